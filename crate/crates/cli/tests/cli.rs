use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cbodd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbodd")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn datagen(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["datagen", "--out", p(&data)];
    args.extend_from_slice(extra);
    let o = cbodd(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

/// Small two-domain corpus and a short training run.
struct Trained {
    dir: TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn trained(config: &str) -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let data = datagen(dir.path(), &["--clips", "16", "--frames", "3", "--seed", "4"]);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, config).unwrap();
    let run = dir.path().join("run");
    let o = cbodd(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Trained { dir, data, run }
}

const QUICK: &str = "[train]\nepochs = 2\nbatch_size = 16\n";

fn trace_rows(run: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(run.join("loss_trace.csv"))
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn datagen_defaults_write_one_manifest_row_per_clip() {
    let dir = tempfile::tempdir().unwrap();
    let data = datagen(dir.path(), &[]);
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 40);
    assert_eq!(fs::read_dir(&data).unwrap().count(), 41);
}

#[test]
fn datagen_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["--clips", "6", "--frames", "3", "--seed", "9"];
    assert_eq!(files(&datagen(a.path(), &args)), files(&datagen(b.path(), &args)));
}

#[test]
fn datagen_validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = cbodd(&["datagen", "--out", p(&dir.path().join("d")), "--size", "8"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = cbodd(&["datagen", "--out", p(&blocker.join("sub")), "--clips", "4"]);
    assert_eq!(code(&o), 2);
    let o = cbodd(&["datagen", "--out", p(&dir.path().join("d")), "--domain", "C"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_all_artifacts_with_digest() {
    let t = trained(QUICK);
    for f in ["model.cbodd", "config.toml", "loss_trace.csv", "train_clips.txt"] {
        assert!(t.run.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(t.run.join("loss_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert!(lines.next().unwrap().starts_with("# config_digest = "));
    assert_eq!(lines.next(), Some("epoch,l_cls,l_branch_ortho,l_cross_ortho,total"));
    assert_eq!(lines.count(), 2);
    assert_eq!(&fs::read(t.run.join("model.cbodd")).unwrap()[..7], b"CBODD01");
}

#[test]
fn train_total_decreases_on_a_five_epoch_moving_average() {
    let dir = tempfile::tempdir().unwrap();
    let data = datagen(dir.path(), &["--clips", "30", "--frames", "4", "--domain", "A"]);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nepochs = 15\nbatch_size = 16\n").unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&cbodd(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)])), 0);
    let total: Vec<f64> = trace_rows(&run).iter().map(|r| r[4]).collect();
    assert_eq!(total.len(), 15);
    let avg: Vec<f64> = total.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] < w[0], "{avg:?}");
    }
}

#[test]
fn zero_weights_leave_ortho_columns_zero() {
    let t = trained("[ofdm]\nlambda_branch = 0.0\nlambda_cross = 0.0\n[train]\nepochs = 2\nbatch_size = 16\n");
    for r in trace_rows(&t.run) {
        assert_eq!((r[2], r[3]), (0.0, 0.0));
        assert_eq!(r[4], r[1]);
    }
}

#[test]
fn train_is_deterministic() {
    let (a, b) = (trained(QUICK), trained(QUICK));
    for f in ["model.cbodd", "loss_trace.csv", "train_clips.txt", "config.toml"] {
        assert_eq!(fs::read(a.run.join(f)).unwrap(), fs::read(b.run.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupt_corpus_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = datagen(dir.path(), &["--clips", "8", "--frames", "2"]);
    fs::write(data.join("a_00001").join("frame_0001.ppm"), b"P6\n32 32\n255\n").unwrap();
    let o = cbodd(&["train", "--data", p(&data), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn non_finite_loss_exits_4_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = datagen(dir.path(), &["--clips", "8", "--frames", "2", "--domain", "A"]);
    let cfg = dir.path().join("c.toml");
    // one step per epoch; the first step blows every weight up
    fs::write(&cfg, "[optim]\nlearning_rate = 1e300\n[train]\nepochs = 3\nbatch_size = 64\n").unwrap();
    let run = dir.path().join("run");
    let o = cbodd(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("model.cbodd").exists());
    assert_eq!(trace_rows(&run).len(), 1);
}

#[test]
fn eval_reports_both_aucs() {
    let t = trained(QUICK);
    for protocol in ["within", "cross"] {
        let report = t.dir.path().join(format!("{protocol}.json"));
        let o = cbodd(&["eval", "--model", p(&t.run.join("model.cbodd")), "--data", p(&t.data), "--protocol", protocol, "--report", p(&report)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
        for key in ["frame_auc", "video_auc"] {
            let x = v[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
        assert_eq!(v["protocol"], protocol);
        assert_eq!(v["config_digest"].as_str().unwrap().len(), 16);
    }
}

#[test]
fn explicit_full_variant_equals_the_default() {
    let t = trained(QUICK);
    let model = t.run.join("model.cbodd");
    let (a, b) = (t.dir.path().join("a.json"), t.dir.path().join("b.json"));
    let base = ["eval", "--model", p(&model), "--data", p(&t.data), "--protocol", "within"];
    assert_eq!(code(&cbodd(&[&base[..], &["--report", p(&a)]].concat())), 0);
    assert_eq!(code(&cbodd(&[&base[..], &["--report", p(&b), "--variant", "FULL"]].concat())), 0);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn mismatched_artifacts_exit_5() {
    let t = trained(QUICK);
    let model = t.run.join("model.cbodd");
    let report = t.dir.path().join("r.json");
    let args = ["eval", "--model", p(&model), "--data", p(&t.data), "--protocol", "within", "--report", p(&report)];
    assert_eq!(code(&cbodd(&[&args[..], &["--variant", "MB-wo-BO"]].concat())), 5);
    let other = t.dir.path().join("other.toml");
    fs::write(&other, "[ofdm]\nlambda_cross = 0.3\n[train]\nepochs = 2\nbatch_size = 16\n").unwrap();
    assert_eq!(code(&cbodd(&[&args[..], &["--config", p(&other)]].concat())), 5);
    let mut bytes = fs::read(&model).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    fs::write(&model, bytes).unwrap();
    assert_eq!(code(&cbodd(&args)), 5);
}

#[test]
fn eval_validation_errors_exit_2() {
    let t = trained(QUICK);
    let model = t.run.join("model.cbodd");
    let report = t.dir.path().join("r.json");
    let single = datagen(&t.dir.path().join("single"), &["--clips", "8", "--frames", "2", "--domain", "A"]);
    let o = cbodd(&["eval", "--model", p(&model), "--data", p(&single), "--protocol", "cross", "--report", p(&report)]);
    assert_eq!(code(&o), 2);

    // a test clip listed among the training clips is leakage
    let ids = t.run.join("train_clips.txt");
    let mut text = fs::read_to_string(&ids).unwrap();
    text.push_str("b_00002\n");
    fs::write(&ids, text).unwrap();
    let o = cbodd(&["eval", "--model", p(&model), "--data", p(&t.data), "--protocol", "cross", "--report", p(&report)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("leakage"));
}

#[test]
fn gradcheck_passes_and_lists_every_term() {
    let o = cbodd(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    for term in ["l_cls", "l_branch_ortho", "l_cross_ortho", "total", "conv2d", "layer_norm"] {
        assert!(out.contains(term), "{term}");
    }
}

#[test]
fn gradcheck_fault_hook_exits_6() {
    let o = cbodd(&["gradcheck", "--inject-fault", "1e-3"]);
    assert_eq!(code(&o), 6);
    assert!(String::from_utf8_lossy(&o.stderr).contains("l_cross_ortho"));
}

#[test]
fn export_embeddings_shape_and_determinism() {
    let t = trained(QUICK);
    let model = t.run.join("model.cbodd");
    let (a, b) = (t.dir.path().join("a.csv"), t.dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = cbodd(&["export-embeddings", "--model", p(&model), "--data", p(&t.data), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let mut lines = text.lines().skip(1);
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 6 + 16);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 16 * 3 * 3 * 2);
    for r in &rows {
        assert_eq!(r.len(), header.len());
        let filled = r[6..].iter().filter(|v| !v.is_empty()).count();
        match r[3] {
            "shared" => assert_eq!(filled, 8),
            "disentangled" => assert_eq!(filled, 16),
            other => panic!("component {other}"),
        }
    }
}

fn params(config: &str) -> Vec<(String, usize)> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, config).unwrap();
    let o = cbodd(&["report-params", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split_whitespace();
            (it.next().unwrap().to_string(), it.next().unwrap().parse().unwrap())
        })
        .collect()
}

fn row(rows: &[(String, usize)], name: &str) -> usize {
    rows.iter().find(|r| r.0 == name).map_or(0, |r| r.1)
}

#[test]
fn report_params_scaling_and_ablation_arithmetic() {
    let base = params("");
    let wide = params("[attention]\nembed_dim = 128\n");
    assert_eq!(row(&wide, "projection_heads"), 2 * row(&base, "projection_heads"));
    assert_eq!(params("[train]\nbatch_size = 7\n"), base);

    let no_ce = params("variant = \"CBO-wo-CE\"\n");
    let ce: usize = ["CE.backbone", "CE.segment_attention", "CE.expression_head"].iter().map(|n| row(&base, n)).sum();
    // shared heads are unchanged; the classifier loses the CE slice of the fused vector
    assert_eq!(row(&base, "total") - row(&no_ce, "total"), ce + 8 + 16);
    assert_eq!(row(&base, "projection_heads"), row(&no_ce, "projection_heads"));
    let sum: usize = base.iter().filter(|r| r.0 != "total").map(|r| r.1).sum();
    assert_eq!(sum, row(&base, "total"));
}

#[test]
fn shipped_config_example_is_the_canonical_default() {
    let o = cbodd(&["print-config"]);
    assert_eq!(code(&o), 0);
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/desk.toml");
    assert_eq!(String::from_utf8(o.stdout).unwrap(), fs::read_to_string(&shipped).unwrap());
    let cfg = cbodd_core::config::RunConfig::load(&shipped).unwrap();
    assert_eq!(cfg.digest(), cbodd_core::config::RunConfig::desk().digest());

    let paper = cbodd(&["print-config", "--paper-scale"]);
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("paper.toml");
    fs::write(&path, paper.stdout).unwrap();
    let cfg = cbodd_core::config::RunConfig::load(&path).unwrap();
    assert_eq!(cfg.digest(), cbodd_core::config::RunConfig::paper_scale().digest());
}
