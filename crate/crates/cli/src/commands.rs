use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cbodd_core::config::{RunConfig, Variant};
use cbodd_core::data::{generate_corpus, read_corpus, write_corpus, CorpusSpec, DomainMix};
use cbodd_core::eval::{check_disjoint, evaluate, split, Protocol};
use cbodd_core::model::CbodModel;
use cbodd_core::ofdm::ortho_grad_check;
use cbodd_core::tensor::gradcheck;
use cbodd_core::tensor::Graph;
use cbodd_core::train::{trace_csv, train as fit, EpochLoss};
use cbodd_core::{Error, Result};

pub const CHECKPOINT: &str = "model.cbodd";
pub const CONFIG: &str = "config.toml";
pub const TRACE: &str = "loss_trace.csv";
pub const TRAIN_CLIPS: &str = "train_clips.txt";

/// Relative-error tolerance of the gradient verification.
pub const GRAD_TOL: f64 = 1e-4;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::desk()),
    }
}

fn beside(model: &Path, name: &str) -> PathBuf {
    model.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn datagen(out: &Path, seed: u64, clips: usize, frames: usize, size: usize, mix: DomainMix) -> Result<()> {
    let spec = CorpusSpec {
        seed,
        clips,
        frames,
        size,
        mix,
    };
    let corpus = generate_corpus(&spec)?;
    write_corpus(out, &corpus).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot write corpus to {}: {io}", out.display())),
        e => e,
    })?;
    eprintln!("wrote {} clips to {}", corpus.len(), out.display());
    Ok(())
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let clips = read_corpus(data)?;
    let s = split(&cfg, Protocol::Within, &clips)?;
    fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let digest = cfg.digest();
    write(&out.join(CONFIG), cfg.to_toml())?;
    let mut ids = format!("# config_digest = {digest}\n");
    for c in &s.train {
        ids.push_str(&c.clip_id);
        ids.push('\n');
    }
    write(&out.join(TRAIN_CLIPS), ids)?;

    let mut model = CbodModel::new(&cfg)?;
    eprintln!(
        "training {} on {} clips ({} parameters, digest {digest})",
        cfg.variant,
        s.train.len(),
        model.param_count()
    );
    let ckpt = out.join(CHECKPOINT);
    let trace_path = out.join(TRACE);
    let mut trace: Vec<EpochLoss> = Vec::new();
    // checkpoint and trace are rewritten after every epoch, so a later
    // numeric failure leaves the last good state on disk
    let outcome = fit(&mut model, &s.train, |m, e| {
        trace.push(*e);
        m.save(&ckpt)?;
        write(&trace_path, trace_csv(&digest, &trace))?;
        eprintln!(
            "epoch {:>3}  l_cls {:.5}  l_branch {:.5}  l_cross {:.5}  total {:.5}",
            e.epoch, e.l_cls, e.l_branch_ortho, e.l_cross_ortho, e.total
        );
        Ok(())
    });
    if let Err(e) = outcome {
        if ckpt.exists() {
            eprintln!("last good checkpoint kept at {}", ckpt.display());
        }
        return Err(e);
    }
    if cfg.train.epochs == 0 {
        model.save(&ckpt)?;
        write(&trace_path, trace_csv(&digest, &[]))?;
    }
    Ok(())
}

/// Model and config for an existing checkpoint. A `--variant` differing
/// from the one the checkpoint was trained as changes the digest and is
/// rejected by the load.
fn open_model(model: &Path, config: Option<&Path>, variant: Option<Variant>) -> Result<CbodModel> {
    let path = config.map(Path::to_path_buf).unwrap_or_else(|| beside(model, CONFIG));
    let mut cfg = RunConfig::load(&path)?;
    cfg.variant = variant.unwrap_or(Variant::Full);
    CbodModel::load(&cfg, model).map_err(|e| match e {
        Error::Format(m) => Error::Mismatch(format!("unreadable checkpoint {}: {m}", model.display())),
        Error::Io(io) => Error::Mismatch(format!("cannot read checkpoint {}: {io}", model.display())),
        e => e,
    })
}

fn read_train_ids(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    Ok(Some(
        text.lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
    ))
}

pub fn eval(model: &Path, data: &Path, protocol: Protocol, report: &Path, variant: Option<Variant>, config: Option<&Path>) -> Result<()> {
    let m = open_model(model, config, variant)?;
    let clips = read_corpus(data)?;
    let s = split(&m.config, protocol, &clips)?;
    if let Some(ids) = read_train_ids(&beside(model, TRAIN_CLIPS))? {
        check_disjoint(ids.iter().map(String::as_str), &s.test)?;
    }
    let r = evaluate(&m, protocol, &s.test)?;
    write(report, r.to_json())?;
    println!(
        "{} {}: frame_auc {:.4}  video_auc {:.4}  ({} test clips)",
        r.variant,
        r.protocol,
        r.frame_auc,
        r.video_auc,
        s.test.len()
    );
    Ok(())
}

/// Returns whether every suite stayed under tolerance.
pub fn gradcheck(seed: u64, fault: Option<f64>) -> Result<bool> {
    let cfg = RunConfig::desk();
    let mut failing = Vec::new();
    println!("op suite (seed {seed})");
    for (name, e) in gradcheck::op_suite(seed, fault)? {
        println!("  {name:<20} {e:.3e}");
        if !(e < GRAD_TOL) {
            failing.push(name);
        }
    }
    println!("loss terms (seed {seed})");
    let report = ortho_grad_check(seed, cfg.ofdm.lambda_branch, cfg.ofdm.lambda_cross, fault)?;
    for (name, e) in &report.entries {
        println!("  {name:<20} {e:.3e}");
    }
    failing.extend(report.failing(GRAD_TOL).into_iter().map(str::to_string));
    if failing.is_empty() {
        println!("all gradients within {GRAD_TOL:e}");
        Ok(true)
    } else {
        eprintln!("gradient check failed for: {}", failing.join(", "));
        Ok(false)
    }
}

pub fn export_embeddings(model: &Path, data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let m = open_model(model, config, None)?;
    let clips = read_corpus(data)?;
    let (ds, dd) = (m.heads.shared_dim(), m.heads.disentangled_dim());
    let width = ds.max(dd);
    let mut csv = format!("# config_digest = {}\nclip_id,frame,branch,component,label,domain", m.config.digest());
    for i in 0..width {
        write!(csv, ",v_{i}").expect("string write");
    }
    csv.push('\n');
    let batch = m.config.train.batch_size.max(1);
    for clip in &clips {
        for chunk in clip.frames.chunks(batch) {
            let refs: Vec<_> = chunk.iter().collect();
            let g = Graph::new();
            let x = g.input(&m.batch_input(&refs)?);
            let fwd = m.forward(&g, x)?;
            let per_branch: Vec<_> = fwd.pairs.iter().map(|p| p.unbatch()).collect();
            for (row, frame) in chunk.iter().enumerate() {
                for pairs in &per_branch {
                    let p = &pairs[row];
                    for (component, values) in [("shared", &p.shared), ("disentangled", &p.disentangled)] {
                        write!(csv, "{},{},{},{component},{},{}", clip.clip_id, frame.index, p.branch, clip.label, clip.domain).expect("string write");
                        for v in values.iter() {
                            write!(csv, ",{v:.17e}").expect("string write");
                        }
                        for _ in values.len()..width {
                            csv.push(',');
                        }
                        csv.push('\n');
                    }
                }
            }
        }
    }
    write(out, csv)?;
    Ok(())
}

pub fn report_params(config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let model = CbodModel::new(&cfg)?;
    println!("variant {}  digest {}", cfg.variant, cfg.digest());
    for (name, n) in model.param_report() {
        println!("{name:<24} {n:>12}");
    }
    println!("{:<24} {:>12}", "total", model.param_count());
    Ok(())
}

pub fn print_config(paper_scale: bool) {
    let cfg = if paper_scale { RunConfig::paper_scale() } else { RunConfig::desk() };
    print!("{}", cfg.to_toml());
}
