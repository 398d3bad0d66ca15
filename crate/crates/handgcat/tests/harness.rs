use std::path::Path;
use std::process::Command;

use handgcat::ablate::{self, Table};
use handgcat::blob::{BlobReader, BlobWriter};
use handgcat::checkpoint;
use handgcat::config::{Profile, RunConfig};
use handgcat::dataset::{self, Dataset, DatasetManifest};
use handgcat::evaluate::{evaluate, report, score, Prediction};
use handgcat::train::{init_model, train, train_from};
use handgcat_core::metrics::FScoreMode;
use handgcat_core::synth::SynthConfig;
use proptest::prelude::*;

fn small_data() -> Dataset {
    dataset::generate(&SynthConfig { seed: 3, ..SynthConfig::default() }, 8, 4).unwrap()
}

fn quick(cfg: &mut RunConfig) {
    cfg.train.max_steps = 2;
    cfg.optimizer.batch = 4;
}

#[test]
fn config_text_round_trips() {
    for profile in [Profile::Desk, Profile::Full] {
        let cfg = RunConfig::profile(profile);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
    let cfg = RunConfig::default()
        .with_overrides(&["kgc.depth=3".into(), "kgc.widths=2,16,64".into(), "cat.variant=plain_transformer".into(), "precision=f64".into()])
        .unwrap();
    assert_eq!(cfg.model.kgc.depth, 3);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn config_rejects_bad_input() {
    let base = RunConfig::default();
    assert!(base.with_overrides(&["no.such.key=1".into()]).is_err());
    assert!(base.with_overrides(&["optimizer.lr=abc".into()]).is_err());
    assert!(base.with_overrides(&["optimizer.lr=0".into()]).is_err());
    assert!(base.with_overrides(&["profile=full".into()]).is_err());
    assert!(base.with_overrides(&["seed".into()]).is_err());
    assert!(RunConfig::parse("seed 3").is_err());
}

proptest! {
    #[test]
    fn overrides_survive_serialization(seed in any::<u64>(), lr in 1e-6f64..1.0, batch in 1usize..64, depth in 1usize..6, blocks in 1usize..4) {
        let cfg = RunConfig::default()
            .with_overrides(&[
                format!("seed={seed}"),
                format!("optimizer.lr={lr}"),
                format!("optimizer.batch={batch}"),
                format!("kgc.depth={depth}"),
                "kgc.widths=".into(),
                format!("cat.blocks={blocks}"),
            ])
            .unwrap();
        prop_assert_eq!(cfg.optimizer.lr, lr);
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

#[test]
fn learning_rate_schedule() {
    let s = RunConfig::profile(Profile::Full).optimizer.schedule();
    assert_eq!(s.lr(0), 1e-4);
    assert_eq!(s.lr(9), 1e-4);
    assert!((s.lr(10) - 1e-4 * 0.7).abs() < 1e-18);
    assert!((s.lr(20) - 1e-4 * 0.49).abs() < 1e-18);
}

#[test]
fn dataset_round_trip_and_regeneration() {
    let ds = small_data();
    let dir = tempfile::tempdir().unwrap();
    let m = dataset::save(&ds, dir.path()).unwrap();
    let back = dataset::load(dir.path()).unwrap();
    assert_eq!(back.train, ds.train);
    assert_eq!(back.test, ds.test);
    assert_eq!(back.generator, ds.generator);
    let again = dataset::regenerate(&m).unwrap();
    assert_eq!(again.train, ds.train);
    assert_eq!(again.test, ds.test);
}

#[test]
fn dataset_rejects_foreign_hand_model_and_missing_dirs() {
    let dir = tempfile::tempdir().unwrap();
    dataset::save(&small_data(), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    m.generator.hand_model_version += 1;
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(dataset::load(dir.path()).is_err());
    assert!(dataset::load(&dir.path().join("missing")).is_err());
}

#[test]
fn blob_rejects_truncated_buffers() {
    let mut w = BlobWriter::new();
    w.push("a", &[2, 3], &[1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    w.push("b", &[2], &[7u64, 8]).unwrap();
    let entries = w.entries().to_vec();
    let bytes = w.bytes().to_vec();
    let r = BlobReader::from_bytes(bytes.clone(), entries.clone()).unwrap();
    assert_eq!(r.read::<f32>("a").unwrap(), (vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    assert_eq!(r.read::<u64>("b").unwrap().1, vec![7, 8]);
    assert!(r.read::<f64>("a").is_err());
    assert!(r.read::<f32>("c").is_err());
    assert!(BlobReader::from_bytes(bytes[..bytes.len() - 1].to_vec(), entries).is_err());
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let ds = small_data();
    let mut cfg = RunConfig::default();
    quick(&mut cfg);
    let t = train::<f32>(&cfg, &ds.train, None, &mut |_| {}).unwrap();
    let before = evaluate(&cfg, &t.model, &t.params, &ds.test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &cfg, &t.params, 1, 2).unwrap();
    let ck = checkpoint::load::<f32>(dir.path()).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!((ck.epoch, ck.step), (1, 2));
    let after = evaluate(&ck.config, &ck.model, &ck.params, &ds.test).unwrap();
    assert_eq!(before, after);
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn same_seed_gives_byte_identical_checkpoints() {
    let ds = small_data();
    let mut cfg = RunConfig::default();
    quick(&mut cfg);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train::<f32>(&cfg, &ds.train, Some(a.path()), &mut |_| {}).unwrap().report;
    let rb = train::<f32>(&cfg, &ds.train, Some(b.path()), &mut |_| {}).unwrap().report;
    assert_eq!(ra, rb);
    for f in ["checkpoint/params.bin", "checkpoint/manifest.json", "train_log.csv", "config.txt"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    cfg.seed = 1;
    let c = tempfile::tempdir().unwrap();
    train::<f32>(&cfg, &ds.train, Some(c.path()), &mut |_| {}).unwrap();
    assert_ne!(read(a.path(), "checkpoint/params.bin"), read(c.path(), "checkpoint/params.bin"));
}

#[test]
fn nan_parameter_aborts_training() {
    let ds = small_data();
    let mut cfg = RunConfig::default();
    quick(&mut cfg);
    let (model, mut params) = init_model::<f32>(&cfg).unwrap();
    let id = params.find("regressor.out.w").or_else(|| params.ids().last()).unwrap();
    let mut v = params.get(id).data().to_vec();
    v[0] = f32::NAN;
    params.set_value(id, &v);
    let err = train_from(&cfg, model, params, &ds.train, None, &mut |_| {}).err().expect("training must fail");
    assert!(format!("{err:#}").contains("non-finite"), "{err:#}");
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let ds = small_data();
    let preds: Vec<Prediction> = ds.test.iter().map(Prediction::ground_truth).collect();
    let per = score(&ds.test, &preds, FScoreMode::default()).unwrap();
    let r = report(&ds.test, &per).unwrap();
    let o = &r.overall;
    assert!(o.mpjpe_mm < 1e-9 && o.mpvpe_mm < 1e-9 && o.pa_mpjpe_mm < 1e-9 && o.pa_mpvpe_mm < 1e-9);
    assert_eq!((o.auc_pck, o.auc_pcv, o.f_at_5, o.f_at_15), (1.0, 1.0, 1.0, 1.0));
    let binned: usize = r.bins.iter().filter_map(|b| b.metrics.as_ref()).map(|m| m.sample_count).sum();
    assert_eq!(binned, ds.test.len());
}

#[test]
fn ablation_grids_and_determinism() {
    let base = RunConfig::default();
    assert_eq!(Table::Depth.grid(&base).len(), 6);
    assert_eq!(Table::Blocks.grid(&base).len(), 4);
    assert_eq!(Table::Prior.grid(&base).len(), 2);
    assert!(Table::parse("nope").is_err());

    let ds = small_data();
    let mut cfg = base.clone();
    quick(&mut cfg);
    let row = |c: &RunConfig| ablate::run_one(Table::Depth, c, &ds, &mut |_| {}).unwrap();
    let (a, b) = (row(&cfg), row(&cfg));
    assert!(a.is_populated());
    assert_eq!(a, b);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_handgcat")).args(args).output().unwrap()
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let (data, run, eval) = (p("data"), p("run"), p("eval"));

    let out = cli(&["generate-data", "--out", &data, "--train", "8", "--test", "4", "--ppm", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/test_0000.ppm").exists());

    let out = cli(&["train", "--data", &data, "--out", &run, "--steps", "2", "--batch", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("final_loss"));

    let out = cli(&["evaluate", "--checkpoint", &format!("{run}/checkpoint"), "--data", &data, "--out", &eval]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval/metrics.json")).unwrap()).unwrap();
    assert!(metrics["overall"]["mpjpe_mm"].as_f64().unwrap().is_finite());
    assert!(dir.path().join("eval/metrics.csv").exists());

    let out = cli(&["gradcheck", "--seeds", "1", "--coords", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    assert!(!cli(&["train", "--data", &data, "--out", &run, "--set", "bogus=1"]).status.success());
    assert!(!cli(&["evaluate", "--checkpoint", &p("nothing"), "--data", &data, "--out", &eval]).status.success());
    assert!(!cli(&["train", "--data", &p("nothing"), "--out", &run]).status.success());
}
