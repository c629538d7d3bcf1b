//! Named parameter storage and the small layer set the networks are built from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vf_tensor::{ConvGeom, Graph, Scalar, Tensor, UpsampleMode, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters are bound as constants and never updated.
    pub trainable: bool,
}

/// Parameters in registration order; names are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// # Panics
    /// On a duplicate name; layer construction is static so this is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Pushes every parameter onto `g`. With `track` set, trainable entries
    /// become gradient leaves; everything else is a constant.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| g.leaf(p.value.clone(), track && p.trainable))
            .collect();
        Bound { vars }
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Redirects `id` to another handle (used to differentiate w.r.t. selected parameters).
    pub fn set(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// N(0, 2/fan_in), for layers followed by ReLU.
    He,
    /// N(0, 1/fan_in).
    Lecun,
    Normal(f64),
    Const(f64),
}

/// Parameter construction context: target store, RNG and a name prefix.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            trainable: true,
        }
    }

    /// Runs `f` with `name` appended to the prefix and the given trainability.
    pub fn scope<R>(&mut self, name: &str, trainable: bool, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
            trainable: trainable && self.trainable,
        };
        f(&mut inner)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::He | Init::Lecun | Init::Normal(_) => {
                let std = match init {
                    Init::He => (2.0 / fan_in as f64).sqrt(),
                    Init::Lecun => (1.0 / fan_in as f64).sqrt(),
                    Init::Normal(s) => s,
                    Init::Const(_) => unreachable!(),
                };
                (0..n)
                    .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let t = Tensor::from_f64(shape, &values).expect("shape and data agree");
        self.store.add(full, t, self.trainable)
    }
}

/// 3-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeom, init: Init) -> Self {
        bd.scope(name, true, |bd| {
            let fan_in = cin * k * k * k;
            let w = bd.param("w", &[cout, cin, k, k, k], fan_in, init);
            let b = Some(bd.param("b", &[cout], fan_in, Init::Const(0.0)));
            Conv { w, b, geom }
        })
    }

    /// `k`-cubed convolution with same padding and unit stride.
    pub fn same<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, init: Init) -> Self {
        Self::new(bd, name, cin, cout, k, ConvGeom::same(k), init)
    }

    pub fn pointwise<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, init: Init) -> Self {
        Self::new(bd, name, cin, cout, 1, ConvGeom::unit(), init)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv3d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.geom)?)
    }
}

/// Affine map over the last axis of a `[rows, in]` matrix.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, fin: usize, fout: usize, init: Init) -> Self {
        bd.scope(name, true, |bd| Linear {
            w: bd.param("w", &[fin, fout], fin, init),
            b: bd.param("b", &[fout], fin, Init::Const(0.0)),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        Ok(g.add_bias(y, p.var(self.b), 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, width: usize) -> Self {
        bd.scope(name, true, |bd| LayerNorm {
            gamma: bd.param("gamma", &[width], width, Init::Const(1.0)),
            beta: bd.param("beta", &[width], width, Init::Const(0.0)),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p.var(self.gamma), p.var(self.beta), 1e-5)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, channels: usize, groups: usize) -> Self {
        bd.scope(name, true, |bd| GroupNorm {
            gamma: bd.param("gamma", &[channels], channels, Init::Const(1.0)),
            beta: bd.param("beta", &[channels], channels, Init::Const(0.0)),
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups, 1e-5)?)
    }
}

/// conv(3³) → group norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        bd.scope(name, true, |bd| ConvBlock {
            conv: Conv::same(bd, "conv", cin, cout, 3, Init::He),
            norm: GroupNorm::new(bd, "norm", cout, groups.min(cout)),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.relu(y))
    }
}

/// Channel-wise mean and max of `[N,C,...]`, concatenated to `[N,2,...]`.
pub fn channel_pool<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let mean = g.mean(x, &[1], true)?;
    let max = g.max(x, &[1], true)?;
    Ok(g.concat(&[mean, max], 1)?)
}

/// Broadcasts a single-channel `[N,1,...]` map to the shape of `like`.
pub fn expand_like<T: Scalar>(g: &mut Graph<T>, x: Var, like: Var) -> Result<Var> {
    let shape = g.shape(like).to_vec();
    let xs = g.shape(x);
    if xs.len() != shape.len() || xs[1] != 1 || xs[0] != shape[0] || xs[2..] != shape[2..] {
        return Err(vf_tensor::TensorError::Shape {
            op: "expand_like",
            lhs: xs.to_vec(),
            rhs: shape,
        }
        .into());
    }
    Ok(g.expand(x, &shape)?)
}

/// Computes `1 - x` elementwise.
pub fn one_minus<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let n = g.neg(x);
    g.add_scalar(n, T::one())
}

pub fn upsample<T: Scalar>(g: &mut Graph<T>, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
    Ok(g.upsample(x, factor, mode)?)
}
