use patcher::config::RunConfig;
use patcher::model::ModelConfig;
use patcher::train::{
    clip_grad_norm, read_log, Checkpoint, OptimConfig, OptimKind, Optimizer, PolySchedule, Trainer, MAGIC, VERSION,
};
use patcher::{Error, ParameterStore, Tensor};

fn store(values: &[(&str, Vec<f32>)]) -> ParameterStore<f32> {
    let mut s = ParameterStore::new();
    for (name, v) in values {
        s.insert(*name, Tensor::new(&[v.len()], v.clone()).unwrap().with_requires_grad(true)).unwrap();
    }
    s
}

fn set_grad(s: &mut ParameterStore<f32>, name: &str, g: &[f32]) {
    let p = s.get_mut(name).unwrap();
    p.zero_grad();
    p.accumulate_grad(g).unwrap();
}

fn adam(kind: OptimKind, wd: f64) -> OptimConfig {
    OptimConfig { kind, lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let mut s = store(&[("w.weight", vec![1.0, -2.0])]);
    let mut opt = Optimizer::new(adam(OptimKind::Adam, 0.0), &s);
    set_grad(&mut s, "w.weight", &[1.0, -0.25]);
    opt.step(&mut s, 0.1).unwrap();
    let p = s.get("w.weight").unwrap().data();
    assert!((p[0] as f64 - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-7);
    assert!((p[1] as f64 - (-2.0 + 0.1 / (1.0 + 4e-8))).abs() < 1e-7);
    assert_eq!(opt.step, 1);
}

/// Reference Adam/AdamW on one scalar, all in f64.
struct Reference {
    m: f64,
    v: f64,
    t: i32,
}

impl Reference {
    fn step(&mut self, x: f64, g: f64, lr: f64, c: &OptimConfig, decay: bool) -> f64 {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let mh = self.m / (1.0 - c.beta1.powi(self.t));
        let vh = self.v / (1.0 - c.beta2.powi(self.t));
        let x = if decay { x * (1.0 - lr * c.weight_decay) } else { x };
        x - lr * mh / (vh.sqrt() + c.eps)
    }
}

#[test]
fn adamw_matches_reference_and_skips_biases_and_norms() {
    let c = adam(OptimKind::AdamW, 0.05);
    let names = ["fc.weight", "fc.bias", "enc.0.block.0.norm1.weight", "attn.sr_norm.weight"];
    let mut s = store(&names.map(|n| (n, vec![0.5f32])));
    let mut opt = Optimizer::new(c.clone(), &s);
    let mut refs: Vec<(f64, Reference)> = names.iter().map(|_| (0.5, Reference { m: 0.0, v: 0.0, t: 0 })).collect();
    for k in 0..25 {
        let lr = 0.1 * (1.0 - k as f64 / 25.0);
        for (i, n) in names.iter().enumerate() {
            let g = ((k * 7 + i * 3) as f64 * 0.61).sin();
            set_grad(&mut s, n, &[g as f32]);
            let (x, r) = &mut refs[i];
            *x = r.step(*x, g as f32 as f64, lr, &c, i == 0);
        }
        opt.step(&mut s, lr).unwrap();
    }
    for (i, n) in names.iter().enumerate() {
        let got = s.get(n).unwrap().data()[0] as f64;
        assert!((got - refs[i].0).abs() < 1e-5, "{n}: {got} vs {}", refs[i].0);
    }
}

#[test]
fn adamw_without_decay_is_adam() {
    let run = |kind| {
        let mut s = store(&[("a.weight", vec![0.3, -0.7, 1.1]), ("a.bias", vec![0.0, 0.2, 0.0])]);
        let mut opt = Optimizer::new(adam(kind, 0.0), &s);
        for k in 0..10 {
            let g: Vec<f32> = (0..3).map(|i| ((k + i) as f32 * 0.9).cos()).collect();
            set_grad(&mut s, "a.weight", &g);
            set_grad(&mut s, "a.bias", &g);
            opt.step(&mut s, 0.01).unwrap();
        }
        s.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert_eq!(run(OptimKind::Adam), run(OptimKind::AdamW));
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut s = store(&[("x", vec![-4.0])]);
    let mut opt = Optimizer::new(adam(OptimKind::Adam, 0.0), &s);
    let sched = PolySchedule { base_lr: 0.1, total_steps: 2000, power: 0.9 };
    for k in 0..2000 {
        let x = s.get("x").unwrap().data()[0];
        set_grad(&mut s, "x", &[2.0 * (x - 3.0)]);
        opt.step(&mut s, sched.lr(k)).unwrap();
    }
    let x = s.get("x").unwrap().data()[0];
    assert!((x - 3.0).abs() < 1e-3, "{x}");
}

#[test]
fn non_finite_gradients_are_rejected_by_name() {
    let mut s = store(&[("good", vec![1.0]), ("bad.weight", vec![1.0])]);
    let mut opt = Optimizer::new(OptimConfig::default(), &s);
    set_grad(&mut s, "good", &[1.0]);
    set_grad(&mut s, "bad.weight", &[f32::NAN]);
    let err = opt.step(&mut s, 0.1).unwrap_err();
    assert!(err.to_string().contains("bad.weight"), "{err}");
    assert!(s.iter().all(|(_, t)| t.data() == [1.0]));
    assert_eq!(opt.step, 0);
}

#[test]
fn gradient_clipping_bounds_the_global_norm() {
    let mut s = store(&[("a", vec![0.0, 0.0]), ("b", vec![0.0])]);
    set_grad(&mut s, "a", &[3.0, 0.0]);
    set_grad(&mut s, "b", &[4.0]);
    assert_eq!(clip_grad_norm(&mut s, 10.0), 5.0);
    assert_eq!(s.get("b").unwrap().grad().unwrap(), [4.0]);
    assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
    assert!((s.get("a").unwrap().grad().unwrap()[0] - 0.6).abs() < 1e-7);
    assert!((s.get("b").unwrap().grad().unwrap()[0] - 0.8).abs() < 1e-7);
}

#[test]
fn polynomial_schedule_values() {
    let s = PolySchedule { base_lr: 1e-3, total_steps: 300, power: 0.9 };
    for k in [0usize, 1, 150, 299] {
        let want = 1e-3 * (1.0 - k as f64 / 300.0).powf(0.9);
        assert!((s.lr(k) - want).abs() < 1e-18);
    }
    assert_eq!(s.lr(300), 0.0);
}

const SMALL_RUN: &str = r#"
seed = 5
model.preset = "tiny"
synth.count = 6
synth.size = 16
train.epochs = 4
train.batch_size = 4
train.loss = "bce+iou"
train.augment = true
train.crop = 16
"#;

fn trainer(text: &str) -> Trainer {
    Trainer::from_config(&RunConfig::parse(text).unwrap(), RunConfig::hash(text)).unwrap()
}

fn losses(t: &mut Trainer, n: usize) -> Vec<u32> {
    (0..n).map(|_| t.step().unwrap().train_loss.to_bits()).collect()
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut t = trainer(SMALL_RUN);
    losses(&mut t, 2);
    let ck = t.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(bytes[4..8], VERSION.to_le_bytes());
    assert_eq!(bytes[8..12], t.config_hash.to_le_bytes());
    let n_params = t.state.params.len();
    assert_eq!(bytes[12..16], ((3 * n_params + 2) as u32).to_le_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut state = back.state(t.config_hash, &t.state.params, t.state.optimizer.config.clone()).unwrap();
    assert_eq!(state.optimizer, t.state.optimizer);
    assert_eq!((state.step, state.best_val_dsc), (t.state.step, t.state.best_val_dsc));
    let mut params = t.state.params.clone();
    params.zero_grads();
    state.params.zero_grads();
    assert_eq!(state.params, params);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = trainer(SMALL_RUN);
    let bytes = t.checkpoint().to_bytes().unwrap();
    let step = (bytes.len() / 97).max(1);
    for cut in (0..bytes.len()).step_by(step) {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint(_))));
    let mut version = bytes;
    version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(_))));

    let dup = Checkpoint {
        config_hash: 0,
        tensors: vec![("a".into(), Tensor::zeros(&[1])), ("a".into(), Tensor::zeros(&[1]))],
    };
    let err = Checkpoint::from_bytes(&dup.to_bytes().unwrap()).unwrap_err();
    assert!(err.to_string().contains("duplicate"), "{err}");
}

#[test]
fn mismatched_checkpoints_name_the_tensor() {
    let t = trainer(SMALL_RUN);
    let ck = t.checkpoint();
    let mut other = ModelConfig::tiny(1);
    other.decoder.dim = 8;
    let template = other.init(0).unwrap();
    let err = ck.params(t.config_hash, &template).unwrap_err().to_string();
    assert!(err.contains("dec.expert.0.2.bias"), "{err}");
    assert!(err.contains("mismatch"), "{err}");

    let err = ck.params(t.config_hash ^ 1, &t.state.params).unwrap_err().to_string();
    assert!(err.contains("hash"), "{err}");
    assert!(ck.params(t.config_hash, &t.state.params).is_ok());
}

#[test]
fn resumed_training_continues_bit_for_bit() {
    let mut a = trainer(SMALL_RUN);
    losses(&mut a, 3);
    let ck = Checkpoint::from_bytes(&a.checkpoint().to_bytes().unwrap()).unwrap();
    let expect = losses(&mut a, 5);

    let mut b = trainer(SMALL_RUN);
    b.resume(&ck).unwrap();
    assert_eq!(b.state.step, 3);
    assert_eq!(losses(&mut b, 5), expect);
    assert_eq!(a.checkpoint(), b.checkpoint());
}

#[test]
fn identical_configs_train_identically() {
    let run = |text: &str| {
        let mut t = trainer(text);
        t.run(None, Vec::new(), |_| {}).unwrap()
    };
    let (a, b) = (run(SMALL_RUN), run(SMALL_RUN));
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    let c = run(&SMALL_RUN.replace("seed = 5", "seed = 6"));
    assert_ne!(a.iter().map(|r| r.train_loss).collect::<Vec<_>>(), c.iter().map(|r| r.train_loss).collect::<Vec<_>>());
}

#[test]
fn epoch_order_depends_on_seed_and_epoch() {
    let t = trainer(SMALL_RUN);
    let ids = |step| t.batch_for(step).unwrap().into_iter().map(|s| s.id).collect::<Vec<_>>();
    let e0: Vec<String> = [ids(0), ids(1)].concat();
    let e1: Vec<String> = [ids(2), ids(3)].concat();
    assert_eq!(ids(1).len(), 2);
    let (mut s0, mut s1) = (e0.clone(), e1.clone());
    s0.sort();
    s1.sort();
    assert_eq!(s0, s1);
    assert_eq!(s0.len(), 6);
    assert_eq!(ids(0), t.batch_for(0).unwrap().into_iter().map(|s| s.id).collect::<Vec<_>>());
    assert_ne!((0..4).map(ids).collect::<Vec<_>>(), (4..8).map(ids).collect::<Vec<_>>());
}

#[test]
fn a_run_writes_its_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(SMALL_RUN);
    let log = t.run(Some(dir.path()), Vec::new(), |_| {}).unwrap();
    assert_eq!(read_log(&dir.path().join("log.csv")).unwrap(), log);
    let header = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert!(header.starts_with("step,lr,train_loss,val_dsc,val_iou\n"), "{header}");
    for (i, row) in log.iter().enumerate() {
        assert_eq!(row.step, i + 1);
        assert_eq!(row.lr, t.schedule.lr(i));
        assert_eq!(row.val_dsc.is_some(), row.step % 2 == 0);
    }
    let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(last, t.checkpoint());
    assert!(dir.path().join("best.ckpt").exists());
    let best = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    let best_dsc = log.iter().filter_map(|r| r.val_dsc).fold(f64::MIN, f64::max);
    assert!((t.state.best_val_dsc - best_dsc).abs() < 1e-12);
    assert!(best.params(t.config_hash, &t.state.params).is_ok());
}

#[test]
fn config_hash_is_the_hash_of_the_file_text() {
    let t = trainer(SMALL_RUN);
    assert_eq!(t.config_hash, patcher::config::fnv1a(SMALL_RUN.as_bytes()));
    let spaced = SMALL_RUN.replace("seed = 5", "seed=5");
    assert_ne!(RunConfig::hash(&spaced), t.config_hash);
}
