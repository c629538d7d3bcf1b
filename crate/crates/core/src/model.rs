//! Full segmentation network with the ablation switches.
//!
//! | flags (vit, cvf, eur) | bottleneck fusion          | output head          |
//! |-----------------------|----------------------------|----------------------|
//! | (f, f, f)             | `F_c`                      | decoder logits       |
//! | (t, f, f)             | `F_v + F_c`                | decoder logits       |
//! | (t, t, f)             | variational fusion         | decoder logits       |
//! | (f, f, t)             | `F_c`                      | refinement logits    |
//! | (t, t, t)             | variational fusion         | refinement logits    |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vf_tensor::{Graph, Scalar, Var};

use crate::config::ModelConfig;
use crate::cvf::{Cvf, CvfOut, Noise};
use crate::encoders::{Age, AgeOut, CnnEncoder, Decoder, Vit, VitOut};
use crate::error::{Result, VfError};
use crate::eur::{belief_from_logits, DirichletBelief, Eur, EurOut};
use crate::nn::{Bound, Builder, ParamStore};

/// Layer layout; independent of the scalar type.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub cnn: CnnEncoder,
    pub vit: Option<(Vit, Age)>,
    pub cvf: Option<Cvf>,
    pub decoder: Decoder,
    pub eur: Option<Eur>,
}

/// Handles produced by one forward pass.
pub struct ForwardOut {
    /// Logits of the head that defines the prediction.
    pub logits: Var,
    /// Softmax of `logits` over the class axis.
    pub probs: Var,
    /// Decoder logits (initial prediction).
    pub dec_logits: Var,
    /// Dirichlet state of the decoder logits; present when EUR is enabled.
    pub belief: Option<DirichletBelief>,
    pub encoder_feats: Vec<Var>,
    pub decoder_feats: Vec<Var>,
    pub vit: Option<(VitOut, AgeOut)>,
    pub cvf: Option<CvfOut>,
    pub eur: Option<EurOut>,
}

impl Network {
    fn build<T: Scalar>(cfg: &ModelConfig, bd: &mut Builder<'_, T>) -> Self {
        let cc = &cfg.cnn;
        let deep = cc.deepest_channels();
        let cnn = CnnEncoder::new(bd, cc, cfg.in_channels);
        let vit = cfg.ablation.enhanced_vit.then(|| {
            let vit = Vit::new(bd, &cfg.vit, cfg.in_channels, cfg.input_dims, deep);
            let age = Age::new(bd, deep, cfg.age_reduction, cfg.eur.sab_kernel);
            (vit, age)
        });
        let cvf = cfg.ablation.cvf.then(|| Cvf::new(bd, deep, cfg.cvf.logsigma_init));
        let decoder = Decoder::new(bd, cc, cfg.num_classes);
        let eur = cfg.ablation.eur.then(|| {
            let chans: Vec<usize> = (0..cc.num_scales).map(|i| cc.channels(i)).collect();
            Eur::new(bd, &cfg.eur, &chans, cfg.num_classes)
        });
        Network {
            cfg: cfg.clone(),
            cnn,
            vit,
            cvf,
            decoder,
            eur,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, noise: &mut Noise<'_>) -> Result<ForwardOut> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 5 || xs[1] != self.cfg.in_channels {
            return Err(VfError::config("input", format!("expected [N, {}, D, H, W], got {xs:?}", self.cfg.in_channels)));
        }
        self.cfg.check_input([xs[2], xs[3], xs[4]])?;
        let feats = self.cnn.forward(g, p, x)?;
        let f_c = *feats.last().expect("at least one scale");
        let deep_grid = {
            let s = g.shape(f_c);
            [s[2], s[3], s[4]]
        };

        let mut vit_out = None;
        let mut cvf_out = None;
        let fuse = match &self.vit {
            None => f_c,
            Some((vit, age)) => {
                let v = vit.forward(g, p, x, deep_grid)?;
                let a = age.forward(g, p, v.grid)?;
                let f_v = a.out;
                vit_out = Some((v, a));
                match &self.cvf {
                    Some(cvf) => {
                        let out = cvf.forward(g, p, f_v, f_c, noise)?;
                        let fuse = out.fuse;
                        cvf_out = Some(out);
                        fuse
                    }
                    None => g.add(f_v, f_c)?,
                }
            }
        };

        let dec = self.decoder.forward(g, p, fuse, &feats[..feats.len() - 1])?;
        let (logits, belief, eur_out) = match &self.eur {
            None => (dec.logits, None, None),
            Some(eur) => {
                let b = belief_from_logits(g, dec.logits)?;
                let p0 = g.softmax(dec.logits, 1)?;
                let out = eur.forward(g, p, p0, b.u, &dec.feats)?;
                (out.logits, Some(b), Some(out))
            }
        };
        let probs = g.softmax(logits, 1)?;
        Ok(ForwardOut {
            logits,
            probs,
            dec_logits: dec.logits,
            belief,
            encoder_feats: feats,
            decoder_feats: dec.feats,
            vit: vit_out,
            cvf: cvf_out,
            eur: eur_out,
        })
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. Values are drawn in `f64` and then converted,
    /// so `f32` and `f64` models built from the same seed agree.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(cfg, &mut Builder::new(&mut store, &mut rng));
        Ok(Model {
            net,
            params: store.cast(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Binds the parameters (tracked for gradients when `train`) and runs the network.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, train: bool, noise: &mut Noise<'_>) -> Result<(Bound, ForwardOut)> {
        let p = self.params.bind(g, train);
        let out = self.net.forward(g, &p, x, noise)?;
        Ok((p, out))
    }
}
