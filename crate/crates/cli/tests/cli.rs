use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use choroid_cli::config::PipelineConfig;

fn choroid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_choroid")).current_dir(dir).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

/// Small anatomy so the end-to-end verbs finish in seconds.
const SMALL: &str = r#"
[training_phantom]
width = 64
frames = 32

[shadow_seg]
n_train = 2

[shadow_seg.train]
max_epochs = 2

[deshadow]
n_train = 2

[deshadow.model]
crop = 32

[deshadow.train]
max_epochs = 1
"#;

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = String::from_utf8(ok(choroid(dir.path(), &["default-config"])).stdout).unwrap();
    let parsed = PipelineConfig::from_toml(&text).unwrap();
    assert_eq!(parsed, PipelineConfig::default());
    let ablation = String::from_utf8(ok(choroid(dir.path(), &["default-config", "ablation"])).stdout).unwrap();
    assert!(ablation.contains("seeds = [0, 1, 2, 3, 4]"), "{ablation}");
}

#[test]
fn unknown_config_key_exits_2_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[bionet.train]\nlearning_rate = 0.1\n").unwrap();
    let o = choroid(dir.path(), &["train-bionet", "--config", "bad.toml", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bionet.train.learning_rate"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_2_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[training_phantom]\nheight = 40\n").unwrap();
    let o = choroid(dir.path(), &["train-shadow-seg", "--config", "bad.toml", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`training_phantom.layer_mean_thicknesses_px`"), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = choroid(dir.path(), &["segment", "--in", "absent.raw", "--model", "absent.ckpt", "--out", "seg"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = "[training_phantom]\nframes = 1\n[biomarker]\nn_train = 4\n[biomarker.train]\ninitial_lr = 1e30\nmax_epochs = 3\ncrop_width = 32\n";
    fs::write(dir.path().join("div.toml"), config).unwrap();
    let o = choroid(dir.path(), &["train-biomarker", "--config", "div.toml", "--out", "bio.ckpt"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn later_gan_stage_needs_init() {
    let dir = tempfile::tempdir().unwrap();
    let o = choroid(dir.path(), &["train-deshadow", "--stage", "inpaint", "--out", "g.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--init"));
}

#[test]
fn bio_variant_needs_biomarker_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = choroid(dir.path(), &["train-bionet", "--ablation", "full", "--out", "b.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--biomarker"));
}

#[test]
fn ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    ok(choroid(dir.path(), &["phantom", "--out", "ph", "--n-train", "1", "--n-test", "1", "--seed", "5"]));
    let gt = "ph/choroid_00001.png";
    ok(choroid(dir.path(), &["evaluate-seg", "--pred", gt, "--gt", gt, "--out", "scores.csv"]));
    let mut rd = csv::Reader::from_path(dir.path().join("scores.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["sample", "di", "iou", "ausde_bm", "ausde_csi", "acc", "sen"]);
    let row = rd.records().next().unwrap().unwrap();
    let val = |i: usize| row[i].parse::<f64>().unwrap();
    assert_eq!((val(1), val(2), val(3), val(4), val(5), val(6)), (1.0, 1.0, 0.0, 0.0, 1.0, 1.0));
}

#[test]
fn enface_verbs_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();
    fs::write(d.join("phantom.toml"), "width = 64\nframes = 32\n").unwrap();
    ok(choroid(d, &["phantom", "--kind", "enface", "--config", "phantom.toml", "--out", "ef", "--n-train", "2", "--n-test", "1"]));
    ok(choroid(d, &["train-shadow-seg", "--config", "small.toml", "--data", "ef", "--out", "m/seg.ckpt"]));
    assert!(d.join("m/shadow_seg_log.csv").exists());
    ok(choroid(d, &["locate-shadows", "--rpe", "ef/rpe_00002.png", "--model", "m/seg.ckpt", "--out", "mask.png"]));
    ok(choroid(d, &["train-deshadow", "--stage", "edge", "--config", "small.toml", "--data", "ef", "--out", "m/edge.ckpt"]));
    ok(choroid(d, &["train-deshadow", "--stage", "inpaint", "--config", "small.toml", "--data", "ef", "--init", "m/edge.ckpt", "--out", "m/inpaint.ckpt"]));
    ok(choroid(d, &["deshadow", "--choroid", "ef/choroid_00002.png", "--mask", "ef/shadow_00002.png", "--model", "m/inpaint.ckpt", "--out", "out.png"]));
    assert!(d.join("out.png").exists());
    ok(choroid(d, &["evaluate-inpaint", "--data", "ef", "--model", "m/inpaint.ckpt", "--out", "inpaint.csv"]));
    let rows = csv::Reader::from_path(d.join("inpaint.csv")).unwrap().records().count();
    assert_eq!(rows, 1, "only the test split is scored");
}

#[test]
fn volume_verbs_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = "[training_phantom]\nframes = 1\n[bionet]\nn_train = 2\n[bionet.model]\nvariant = \"baseline\"\n[bionet.train]\nmax_epochs = 1\nval_fraction = 0.0\n";
    fs::write(d.join("tiny.toml"), config).unwrap();
    fs::write(d.join("phantom.toml"), "width = 48\nframes = 4\n").unwrap();
    ok(choroid(d, &["phantom", "--kind", "volume", "--config", "phantom.toml", "--out", "vol"]));
    ok(choroid(d, &["train-bionet", "--config", "tiny.toml", "--out", "m/bionet.ckpt"]));
    ok(choroid(d, &["segment", "--in", "vol/volume.raw", "--model", "m/bionet.ckpt", "--out", "seg"]));
    let thickness = csv::Reader::from_path(d.join("seg/thickness.csv")).unwrap().records().count();
    assert_eq!(thickness, 4);
    // Projecting with the true masks keeps the test independent of how well one epoch trains.
    ok(choroid(d, &["enface", "--in", "vol/volume.raw", "--seg", "vol/truth", "--out", "ef"]));
    let rpe = choroid::oct::io::read_enface::<f32>(&d.join("ef/rpe.png")).unwrap();
    assert_eq!(rpe.dim(), (4, 48));
}
