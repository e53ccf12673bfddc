use super::*;
use crate::editops::clip_distance;
use crate::embednet::embed_image;
use crate::stylegen::{BodyPart, EditKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 2,
        n_train: 6,
        n_test: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn defaults_follow_the_reference_settings() {
    let c = TrainConfig::default();
    assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (5e-4, 0.95, 0.9, 1e-8));
    assert_eq!((c.lookahead_k, c.lookahead_alpha), (5, 0.5));
    assert_eq!((c.batch, c.steps, c.n_train, c.n_test), (8, 2000, 2000, 200));
    assert_eq!(c.weights, LossWeights::default());
    assert_eq!(c.target, EditTarget::new(BodyPart::Upper, EditKind::Texture));
    c.validate().unwrap();
}

#[test]
fn config_text_round_trips() {
    let mut c = TrainConfig::default();
    c.set("lr", "0.00123").unwrap();
    c.set("groups", "fine,coarse").unwrap();
    c.set("mapper", "baseline").unwrap();
    c.set("target", "lower-shape").unwrap();
    c.set("w_bg", "2.5").unwrap();
    let back = TrainConfig::from_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_text(), c.to_text());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let bad = [
        "learning_rate = 0.1",
        "lr = fast",
        "lr = 0",
        "lr = -1",
        "beta1 = 1.0",
        "beta2 = 0",
        "batch = 0",
        "groups = fine,everything",
        "mapper = mlp",
        "target = hat-color",
        "heads = 3",
        "w_norm = -1",
        "just some words",
    ];
    for text in bad {
        assert!(matches!(TrainConfig::from_text(text), Err(Error::Config(_) | Error::UnknownTarget(_))), "{text}");
    }
    let ok = TrainConfig::from_text("# comment\n\nsteps = 7  # trailing\nseed=3\n").unwrap();
    assert_eq!((ok.steps, ok.seed), (7, 3));
}

#[test]
fn dataset_is_deterministic_and_splits_are_disjoint() {
    let lex = Lexicon::default();
    let t = EditTarget::new(BodyPart::Upper, EditKind::Texture);
    let a = build_dataset(4, 20, 10, 8, &lex, t).unwrap();
    let b = build_dataset(4, 20, 10, 8, &lex, t).unwrap();
    assert_eq!(a, b);
    // each sample depends only on its index
    let c = build_dataset(4, 7, 3, 8, &lex, t).unwrap();
    assert_eq!(&a.train[..7], &c.train[..]);
    assert_eq!(&a.test[..3], &c.test[..]);
    for s in &a.test {
        assert!(a.train.iter().all(|r| r.z != s.z));
    }
    let other = build_dataset(5, 20, 10, 8, &lex, t).unwrap();
    assert_ne!(a.train[0].z, other.train[0].z);
}

#[test]
fn every_emitted_prompt_parses_and_all_labels_appear() {
    let lex = Lexicon::default();
    for part in [BodyPart::Upper, BodyPart::Lower] {
        for kind in [EditKind::Shape, EditKind::Texture] {
            let t = EditTarget::new(part, kind);
            let ds = build_dataset(1, 400, 50, 8, &lex, t).unwrap();
            for s in ds.train.iter().chain(&ds.test) {
                embed_text(&s.prompt, &lex).unwrap();
            }
            let mut seen: Vec<&str> = ds.train.iter().map(|s| s.prompt.as_str()).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), lex.prompts(t).len(), "{t}");
        }
    }
}

#[test]
fn dataset_errors() {
    let t = EditTarget::new(BodyPart::Upper, EditKind::Texture);
    let empty = Lexicon::from_toml_str("").unwrap();
    assert!(matches!(build_dataset(0, 4, 4, 8, &empty, t), Err(Error::EmptyLexicon(_))));
    assert!(matches!(build_dataset(0, 0, 4, 8, &Lexicon::default(), t), Err(Error::Config(_))));
}

fn store(values: &[f64]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert("x", Tensor::vector(values.to_vec())).unwrap();
    p
}

/// Adam + Lookahead on one scalar, written out longhand.
struct ScalarOracle {
    x: f64,
    slow: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarOracle {
    fn step(&mut self, g: f64, c: &OptimConfig) {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let mhat = self.m / (1.0 - c.beta1.powi(self.t));
        let vhat = self.v / (1.0 - c.beta2.powi(self.t));
        self.x -= c.lr * mhat / (vhat.sqrt() + c.eps);
        if self.t as usize % c.k == 0 {
            self.slow += c.alpha * (self.x - self.slow);
            self.x = self.slow;
        }
    }
}

#[test]
fn optimizer_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..20 {
        let cfg = OptimConfig {
            lr: rng.gen_range(1e-4..1e-1),
            k: rng.gen_range(1..8),
            alpha: rng.gen_range(0.1..1.0),
            ..OptimConfig::default()
        };
        // minimise a(x - b)^2 from a random start
        let (a, b) = (rng.gen_range(0.1..3.0), rng.gen_range(-2.0..2.0));
        let x0: f64 = rng.gen_range(-3.0..3.0);
        let mut oracle = ScalarOracle {
            x: x0,
            slow: x0,
            m: 0.0,
            v: 0.0,
            t: 0,
        };
        let mut p = store(&[x0]);
        let mut state = OptimState::new(&p);
        for _ in 0..60 {
            let x = p.values()[0].data()[0];
            let g = 2.0 * a * (x - b);
            optimizer_step(&mut p, &store(&[g]), &mut state, &cfg).unwrap();
            oracle.step(2.0 * a * (oracle.x - b), &cfg);
            let got = p.values()[0].data()[0];
            assert!((got - oracle.x).abs() <= 1e-12, "case {case}: {got} vs {}", oracle.x);
        }
    }
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let mut p = store(&[0.5, -1.25, 3.0]);
    let before = p.values()[0].to_vec();
    let mut state = OptimState::new(&p);
    for _ in 0..12 {
        optimizer_step(&mut p, &store(&[0.0; 3]), &mut state, &OptimConfig::default()).unwrap();
    }
    assert_eq!(p.values()[0].to_vec(), before);
}

#[test]
fn constant_gradient_steps_approach_lr() {
    let cfg = OptimConfig {
        alpha: 1.0,
        ..OptimConfig::default()
    };
    let mut p = store(&[0.0, 0.0]);
    let mut state = OptimState::new(&p);
    let mut prev = p.values()[0].to_vec();
    for i in 0..200 {
        optimizer_step(&mut p, &store(&[3.0, -0.02]), &mut state, &cfg).unwrap();
        let now = p.values()[0].to_vec();
        if i > 100 {
            assert!(((prev[0] - now[0]) - cfg.lr).abs() < 1e-9);
            assert!(((now[1] - prev[1]) - cfg.lr).abs() < 1e-9);
        }
        prev = now;
    }
}

#[test]
fn lookahead_with_unit_alpha_is_plain_adam() {
    let plain = OptimConfig {
        k: 1_000_000,
        ..OptimConfig::default()
    };
    let unit = OptimConfig {
        alpha: 1.0,
        ..OptimConfig::default()
    };
    let mut a = store(&[1.0, -2.0]);
    let mut b = a.clone();
    let (mut sa, mut sb) = (OptimState::new(&a), OptimState::new(&b));
    for i in 0..23 {
        let g = [(i as f64).sin(), (i as f64 * 0.7).cos()];
        optimizer_step(&mut a, &store(&g), &mut sa, &plain).unwrap();
        optimizer_step(&mut b, &store(&g), &mut sb, &unit).unwrap();
        if (i + 1) % unit.k == 0 {
            assert_eq!(a.values()[0].to_vec(), b.values()[0].to_vec());
        }
    }
}

#[test]
fn optimizer_rejects_mismatched_gradients() {
    let mut p = store(&[1.0, 2.0]);
    let mut s = OptimState::new(&p);
    let err = optimizer_step(&mut p, &store(&[1.0]), &mut s, &OptimConfig::default()).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { ref name, .. } if name == "x"));
}

fn bundle() -> CheckpointBundle {
    let cfg = TrainConfig {
        blocks: 1,
        ..small(0)
    };
    let params = init_params::<f64>(&cfg.mapper_config(), 3).unwrap();
    let mut state = OptimState::new(&params);
    state.t = 9;
    state.m[0][0] = 0.25;
    state.v[1][0] = 1.5;
    CheckpointBundle::new(&params, state, 9, cfg.to_text())
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let b = bundle();
    let bytes = b.to_bytes();
    let back = CheckpointBundle::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params.digest(), b.params.digest());
    assert_eq!(back.optim, b.optim);
    assert_eq!((back.step, &back.config), (b.step, &b.config));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    b.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(CheckpointBundle::load(&path).unwrap().digest(), b.digest());
}

#[test]
fn checkpoint_layout_starts_with_header() {
    let b = bundle();
    let bytes = b.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize, b.params.len());
    let first = &b.params.names()[0];
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize, first.len());
    assert_eq!(&bytes[20..20 + first.len()], first.as_bytes());
}

#[test]
fn flipped_bytes_are_detected() {
    let bytes = bundle().to_bytes();
    let step = (bytes.len() / 97).max(1);
    for i in (0..bytes.len()).step_by(step).chain([bytes.len() - 1]) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(
            matches!(CheckpointBundle::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))),
            "byte {i}"
        );
    }
    assert!(matches!(CheckpointBundle::from_bytes(&bytes[..bytes.len() - 5]), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(CheckpointBundle::from_bytes(b""), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn other_versions_are_refused() {
    let bytes = bundle().to_bytes();
    let mut body = bytes[..bytes.len() - 32].to_vec();
    body[8..12].copy_from_slice(&2u32.to_le_bytes());
    let digest = <sha2::Sha256 as sha2::Digest>::digest(&body);
    body.extend_from_slice(&digest);
    assert!(matches!(
        CheckpointBundle::from_bytes(&body),
        Err(Error::VersionMismatch { found: 2, expected: 1 })
    ));
}

#[test]
fn mismatched_architecture_names_the_array() {
    let b = bundle();
    let wider = MapperConfig {
        latent_dim: 12,
        blocks: 1,
        ..MapperConfig::default()
    };
    match b.params_for::<f64>(&wider) {
        Err(Error::ShapeMismatch { name, .. }) => assert!(b.params.names().contains(&name), "{name}"),
        other => panic!("{other:?}"),
    }
    let deeper = MapperConfig {
        blocks: 2,
        ..MapperConfig::default()
    };
    match b.params_for::<f64>(&deeper) {
        Err(Error::ShapeMismatch { name, .. }) => assert!(name.contains(".b1."), "{name}"),
        other => panic!("{other:?}"),
    }
    let base = MapperConfig {
        blocks: 1,
        ..MapperConfig::baseline()
    };
    assert!(matches!(b.params_for::<f64>(&base), Err(Error::ShapeMismatch { .. })));
    let same = TrainConfig::from_text(&b.config).unwrap().mapper_config();
    assert_eq!(b.params_for::<f64>(&same).unwrap().digest(), b.params.digest());
}

#[test]
fn first_step_loss_is_clip_plus_directional_weight() {
    let cfg = small(1);
    let trainer = Trainer::<f64>::new(&cfg).unwrap();
    let out = trainer.run(None).unwrap();
    // identity mapper: w' = w, so only the clip term and the guarded
    // directional constant remain
    let mut expected = 0.0;
    for i in trainer.batch_indices(0) {
        let s = &trainer.dataset.train[i];
        let w = trainer.generator.map_to_w(&s.z).unwrap();
        let img = trainer.generator.generate(&w).unwrap().image;
        let e = embed_image(&img).unwrap().vector;
        let t = embed_text(&s.prompt, &trainer.lexicon).unwrap().tensor();
        let clip = clip_distance(&e, &t).unwrap().item().unwrap();
        expected += (cfg.weights.clip * clip + cfg.weights.direct) / cfg.batch as f64;
    }
    let r = out.log[0];
    assert!((r.total - expected).abs() < 1e-12, "{} vs {expected}", r.total);
    assert_eq!((r.direct, r.bg, r.norm), (1.0, 0.0, 0.0));
}

#[test]
fn training_is_deterministic_and_leaves_frozen_modules_alone() {
    let cfg = small(6);
    let trainer = Trainer::<f64>::new(&cfg).unwrap();
    let before = trainer.frozen_digests();
    let a = trainer.run(None).unwrap();
    let b = train(&cfg, None).unwrap();
    assert_eq!(a.bundle.digest(), b.bundle.digest());
    assert_eq!(trainer.frozen_digests(), before);
    assert_eq!((a.generator_digest.clone(), a.embednet_digest.clone()), before);
    let init = trainer.init_params().unwrap();
    assert_ne!(a.bundle.params.digest(), init.digest());
    assert_eq!(a.bundle.step, 6);
    assert_eq!(a.bundle.optim.t, 6);
}

#[test]
fn threaded_batches_match_the_serial_path() {
    let cfg = small(4);
    let serial = train(&cfg, None).unwrap();
    let threaded = train(&TrainConfig { threads: 2, ..cfg }, None).unwrap();
    for (s, t) in serial.log.iter().zip(&threaded.log) {
        assert!((s.total - t.total).abs() <= 1e-6);
    }
    assert_eq!(serial.bundle.params.digest(), threaded.bundle.params.digest());
}

#[test]
fn log_lines_are_json_records() {
    let cfg = small(3);
    let mut buf = Vec::new();
    let out = train(&cfg, Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, rec) in lines.iter().zip(&out.log) {
        let parsed: StepRecord = serde_json::from_str(line).unwrap();
        assert_eq!(parsed.step, rec.step);
        assert_eq!(parsed.total, rec.total);
        assert!(parsed.wall_ms >= 0.0);
    }
}

#[test]
fn non_finite_values_abort() {
    let ok = LossBreakdown::weighted(0.5, 1.0, 0.0, 0.0, &LossWeights::default());
    let grads = store(&[0.0, 1.0]);
    guard(3, &ok, &grads, "{}").unwrap();
    let nan = LossBreakdown { bg: f64::NAN, ..ok };
    assert!(matches!(guard(3, &nan, &grads, "dump"), Err(Error::NonFiniteLoss { step: 3, ref detail }) if detail == "dump"));
    assert!(matches!(guard(4, &ok, &store(&[f64::INFINITY, 0.0]), "{}"), Err(Error::NonFiniteLoss { step: 4, .. })));
}

#[test]
fn untrained_model_is_the_identity() {
    let cfg = small(0);
    let out = train(&cfg, None).unwrap();
    let model = EditModel::<f64>::from_bundle(&out.bundle).unwrap();
    for s in model.test_set().unwrap() {
        let (w, w2) = model.edit(&s.z, &s.prompt).unwrap();
        assert_eq!(w.codes.to_vec(), w2.codes.to_vec());
    }
}

#[test]
fn smoothing_endpoints() {
    let log: Vec<StepRecord> = (0..10)
        .map(|i| StepRecord {
            step: i,
            clip: 0.0,
            direct: 0.0,
            bg: 0.0,
            norm: 0.0,
            total: i as f64,
            wall_ms: 0.0,
        })
        .collect();
    assert_eq!(smoothed_endpoints(&log, 3), (1.0, 8.0));
    assert_eq!(smoothed_endpoints(&log, 50), (4.5, 4.5));
}
