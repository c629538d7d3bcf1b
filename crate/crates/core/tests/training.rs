mod common;

use vf_core::data::generate_dataset;
use vf_core::train::{train, Trainer, BEST_CKPT, CSV_HEADER, LAST_CKPT, METRICS_FILE};
use vf_core::{generate_phantom, LabelVolume, Volume};

fn sample(seed: u64) -> (Volume, LabelVolume) {
    let (img, lbl) = generate_phantom(&common::tiny_phantom(seed)).unwrap();
    // Centre crop, which always intersects the vessel trees.
    (img.crop([8; 3], [16; 3]).unwrap(), lbl.crop([8; 3], [16; 3]).unwrap())
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_run(dir.path(), 1);
    cfg.train.lr = 0.0;
    let mut t = Trainer::new(&cfg).unwrap();
    let before = t.model.params.clone();
    let batch = [sample(1)];
    for _ in 0..3 {
        t.step(&batch, 0).unwrap();
    }
    assert_eq!(t.adam.steps(), 3);
    for id in before.ids() {
        assert_eq!(before.get(id).value.data(), t.model.params.get(id).value.data());
    }
}

#[test]
fn a_few_steps_reduce_the_loss_for_most_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut decreased = 0;
    for seed in 0..20 {
        let mut cfg = common::tiny_run(dir.path(), seed);
        cfg.train.lr = 1e-3;
        let mut t = Trainer::new(&cfg).unwrap();
        let (img, lbl) = sample(100 + seed);
        let l0 = t.eval_loss(&img, &lbl, 0).unwrap().total;
        let batch = [(img.clone(), lbl.clone())];
        for _ in 0..5 {
            t.step(&batch, 0).unwrap();
        }
        let l1 = t.eval_loss(&img, &lbl, 0).unwrap().total;
        decreased += (l1 < l0) as usize;
    }
    assert!(decreased >= 18, "loss decreased for {decreased}/20 seeds");
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let data = tempfile::tempdir().unwrap();
    generate_dataset(&common::tiny_phantom(21), 4, data.path()).unwrap();
    let cfg = common::tiny_run(data.path(), 7);
    let run = |cfg: &vf_core::RunConfig| {
        let out = tempfile::tempdir().unwrap();
        let mut seen = 0;
        let s = train(cfg, out.path(), &mut |_| seen += 1).unwrap();
        assert_eq!(seen, cfg.train.epochs);
        assert_eq!(s.records.len(), cfg.train.epochs);
        let read = |f: &str| std::fs::read(out.path().join(f)).unwrap();
        (read(METRICS_FILE), read(BEST_CKPT), read(LAST_CKPT))
    };
    let a = run(&cfg);
    let b = run(&cfg);
    assert_eq!(a, b);

    let csv = String::from_utf8(a.0).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + cfg.train.epochs);
    assert!(lines[1].starts_with("1,2,"));

    let mut other = cfg.clone();
    other.train.seed = 8;
    assert_ne!(run(&other).2, a.2);
}
