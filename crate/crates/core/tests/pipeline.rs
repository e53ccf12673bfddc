use garmentedit::editops::{feature_space_edit, pixel_space_edit, DEFAULT_STAGES};
use garmentedit::eval::{evaluate, Masking};
use garmentedit::stylegen::GeneratorConfig;
use garmentedit::trainer::{train, CheckpointBundle, EditModel, TrainConfig};
use garmentedit::{Generator32, Generator64};

const PROMPT: &str = "a human wearing red upper body clothes";

fn small() -> TrainConfig {
    TrainConfig {
        steps: 12,
        batch: 2,
        n_train: 16,
        n_test: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn train_save_load_edit() {
    let cfg = small();
    let out = train(&cfg, None).unwrap();
    assert_eq!(out.log.len(), cfg.steps);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.bundle.save(&path).unwrap();
    let bundle = CheckpointBundle::load(&path).unwrap();
    assert_eq!(bundle.digest(), out.bundle.digest());

    let model = EditModel::<f64>::from_bundle(&bundle).unwrap();
    let z = model.generator.sample_z(5, 1).remove(0);
    let (w, w2) = model.edit(&z, PROMPT).unwrap();
    let px = pixel_space_edit(&model.generator, &w, &w2, model.config.target).unwrap();
    let (a, b, img) = (px.original.image.data(), px.edited.image.data(), px.image.data());
    let n = px.mask.height * px.mask.width;
    for ch in 0..3 {
        for p in 0..n {
            let want = if px.mask.data[p] { b[ch * n + p] } else { a[ch * n + p] };
            assert_eq!(img[ch * n + p], want);
        }
    }
    let fs = feature_space_edit(&model.generator, &w, &w2, model.config.target, &DEFAULT_STAGES).unwrap();
    assert_eq!(fs.mask, px.mask);
    assert_eq!(fs.image.shape(), px.image.shape());
}

#[test]
fn eval_covers_the_test_split() {
    let out = train(&small(), None).unwrap();
    let model = EditModel::<f64>::from_bundle(&out.bundle).unwrap();
    for masking in [Masking::None, Masking::Feature, Masking::Pixel] {
        let r = evaluate(&model, None, masking).unwrap();
        assert_eq!(r.samples.len(), 4);
        let hits = r.samples.iter().filter(|s| s.hit).count();
        assert_eq!(r.clip_acc, 100.0 * hits as f64 / 4.0);
    }
    assert_eq!(evaluate(&model, Some(2), Masking::None).unwrap().samples.len(), 2);
}

#[test]
fn f32_generator_tracks_f64() {
    let cfg = GeneratorConfig::default();
    let g64 = Generator64::build(&cfg).unwrap();
    let g32 = Generator32::build(&cfg).unwrap();
    let z = g64.sample_z(3, 1).remove(0);
    let z32: Vec<f32> = z.iter().map(|&v| v as f32).collect();
    let a = g64.generate(&g64.map_to_w(&z).unwrap()).unwrap().image;
    let b = g32.generate(&g32.map_to_w(&z32).unwrap()).unwrap().image;
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - *y as f64).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "f32 vs f64 pixel gap {worst}");
}
