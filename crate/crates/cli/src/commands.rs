use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use arl_core::arlnet::{load_checkpoint, read_header, save_checkpoint};
use arl_core::autodiff::gradcheck::{op_suite, tolerance, GradCheck};
use arl_core::autodiff::OpKind;
use arl_core::data::{generate_synthetic, sample_episode, write_dataset};
use arl_core::relabel::{binary_label, soft_label};
use arl_core::training::{
    evaluate, objective_gradcheck, search_weights, train_supervised, train_unsupervised, EvalReport, EvalSpec,
    MetricsSink, SearchBudget, SearchTrial, TrainState,
};
use arl_core::{ArlError, Dataset, LossWeights, Mode, Real, Split};

use crate::{CmdResult, DataSource, Failure, Precision, RunConfig};

pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const FROZEN_CONFIG: &str = "config.frozen";
pub const EVAL_JSON: &str = "eval.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const SWEEP_CSV: &str = "sweep_p.csv";
pub const SEARCH_CSV: &str = "search.csv";

/// Seed of the full-objective finite-difference probe. At this seed no ReLU
/// or max-pool switch lies within the difference step of any parameter.
pub const OBJECTIVE_SEED: u64 = 0;

/// Validation episodes of the sweeps are drawn from this offset of the run seed.
const VAL_SEED_SALT: u64 = 0x5eed_0f_7a11;

pub fn gen(seed: u64, classes: usize, per_class: usize, side: usize, out: &Path, log: &mut dyn Write) -> CmdResult<PathBuf> {
    let ds = generate_synthetic(seed, classes, per_class, side)?;
    let manifest = write_dataset(&ds, out)?;
    writeln!(
        log,
        "wrote {} images of {} classes to {}",
        ds.num_instances(),
        ds.classes().len(),
        out.display()
    )?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub iteration: usize,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub frozen: PathBuf,
}

/// Train in `cfg.out`. With `resume`, an existing checkpoint there is picked
/// up (optimizer state included) and the metrics file is appended to.
pub fn train(cfg: &RunConfig, mode: Mode, resume: bool, log: &mut dyn Write) -> CmdResult<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.train.mode = mode;
    cfg.validate()?;
    let ds = cfg.data.load()?;
    fs::create_dir_all(&cfg.out)?;
    let iteration = match cfg.precision {
        Precision::F32 => train_in::<f32>(&cfg, &ds, resume)?,
        Precision::F64 => train_in::<f64>(&cfg, &ds, resume)?,
    };
    let frozen = cfg.out.join(FROZEN_CONFIG);
    fs::write(&frozen, cfg.to_text())?;
    writeln!(log, "trained to iteration {} in {}", iteration, cfg.out.display())?;
    Ok(TrainOutcome {
        iteration,
        checkpoint: cfg.out.join(CHECKPOINT),
        metrics: cfg.out.join(METRICS),
        frozen,
    })
}

fn train_in<T: Real>(cfg: &RunConfig, ds: &Dataset, resume: bool) -> CmdResult<usize> {
    let desc = cfg.train.descriptor(ds)?;
    let ckpt = cfg.out.join(CHECKPOINT);
    let resuming = resume && ckpt.exists();
    let state = if resuming {
        let c = load_checkpoint::<T>(&ckpt)?;
        if c.store.descriptor() != &desc {
            return Err(ArlError::Config(format!(
                "{} was trained with a different architecture than the config describes",
                ckpt.display()
            ))
            .into());
        }
        let adam = c
            .adam
            .ok_or_else(|| ArlError::Format(format!("{} holds no optimizer state to resume from", ckpt.display())))?;
        TrainState {
            store: c.store,
            adam,
            iteration: c.iteration,
        }
    } else {
        TrainState::fresh(desc, cfg.train.seed)?
    };
    let mut sink = MetricsSink::file(&cfg.out.join(METRICS), cfg.train.log_every, resuming)?;
    let state = match cfg.train.mode {
        Mode::Supervised => train_supervised(&cfg.train, ds, state, &mut sink)?,
        Mode::Unsupervised => train_unsupervised(&cfg.train, ds, state, &mut sink)?,
    };
    save_checkpoint(&ckpt, &state.store, state.iteration, Some(&state.adam))?;
    Ok(state.iteration)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: DataSource,
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Episodic evaluation of a checkpoint. Writes the summary JSON and the
/// per-pair score dump under `out`.
pub fn eval(args: &EvalArgs, log: &mut dyn Write) -> CmdResult<EvalReport> {
    let ds = args.data.load()?;
    let spec = EvalSpec {
        split: args.split,
        way: args.way,
        shot: args.shot,
        queries: args.queries,
        episodes: args.episodes,
        seed: args.seed,
    };
    let header = read_header(&args.ckpt)?;
    let (report, dump) = if header.dtype == f64::NAME {
        evaluate(&load_checkpoint::<f64>(&args.ckpt)?.store, &ds, &spec)?
    } else {
        evaluate(&load_checkpoint::<f32>(&args.ckpt)?.store, &ds, &spec)?
    };
    fs::create_dir_all(&args.out)?;
    let mut summary = serde_json::to_value(report.record())?;
    summary["format_version"] = 1.into();
    fs::write(args.out.join(EVAL_JSON), format!("{}\n", summary))?;

    let mut w = csv::Writer::from_path(args.out.join(SCORES_CSV))?;
    w.write_record(["episode", "query", "label", "class", "score"])?;
    for e in &dump {
        for (q, (row, label)) in e.scores.iter().zip(&e.labels).enumerate() {
            for (c, s) in row.iter().enumerate() {
                w.write_record([
                    e.episode.to_string(),
                    q.to_string(),
                    label.to_string(),
                    c.to_string(),
                    format!("{:e}", s),
                ])?;
            }
        }
    }
    w.flush()?;
    writeln!(
        log,
        "acc {:.2} ± {:.2} ({}-way {}-shot, {} episodes)",
        report.acc, report.ci95, report.way, report.shot, report.episodes
    )?;
    Ok(report)
}

/// Every op check plus the full objective; fails if any exceeds tolerance.
pub fn gradcheck(precision: Precision, seed: u64, fault: Option<OpKind>, log: &mut dyn Write) -> CmdResult<Vec<GradCheck>> {
    let (checks, tol) = match precision {
        Precision::F32 => (run_checks::<f32>(seed, fault)?, tolerance::<f32>()),
        Precision::F64 => (run_checks::<f64>(seed, fault)?, tolerance::<f64>()),
    };
    writeln!(log, "{:<18} {:>12} {:>8}  result (tolerance {:e}, {})", "check", "max rel err", "elems", tol, precision)?;
    for c in &checks {
        writeln!(
            log,
            "{:<18} {:>12.3e} {:>8}  {}",
            c.name,
            c.max_rel_err,
            c.checked,
            if c.passes(tol) { "pass" } else { "FAIL" }
        )?;
    }
    let worst = checks
        .iter()
        .fold(None::<&GradCheck>, |w, c| match w {
            Some(w) if !(c.max_rel_err > w.max_rel_err) && c.max_rel_err.is_finite() => Some(w),
            _ => Some(c),
        })
        .expect("suite is never empty");
    writeln!(log, "worst: {} ({:.3e})", worst.name, worst.max_rel_err)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passes(tol)).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(Failure::GradCheck(failed.join(", ")))
    }
}

fn run_checks<T: Real>(seed: u64, fault: Option<OpKind>) -> CmdResult<Vec<GradCheck>> {
    let mut checks = op_suite::<T>(seed, fault)?;
    checks.push(objective_gradcheck::<T>(OBJECTIVE_SEED, fault)?);
    Ok(checks)
}

fn train_and_validate<T: Real>(cfg: &RunConfig, ds: &Dataset) -> CmdResult<EvalReport> {
    let t = &cfg.train;
    let state = TrainState::<T>::fresh(t.descriptor(ds)?, t.seed)?;
    let state = train_supervised(t, ds, state, &mut MetricsSink::memory(t.log_every))?;
    let spec = EvalSpec {
        split: Split::Val,
        way: t.way.min(ds.splits().val.len()),
        shot: t.shot,
        queries: t.queries,
        episodes: t.eval_episodes,
        seed: t.seed ^ VAL_SEED_SALT,
    };
    Ok(evaluate(&state.store, ds, &spec)?.0)
}

/// One budgeted training run per p, scored on validation episodes; writes
/// `p,acc,ci95` rows.
pub fn sweep_p(cfg: &RunConfig, values: &[f64], log: &mut dyn Write) -> CmdResult<Vec<(f64, EvalReport)>> {
    if values.is_empty() {
        return Err(ArlError::Config("sweep needs at least one p value".into()).into());
    }
    let ds = cfg.data.load()?;
    fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.out.join(SWEEP_CSV))?;
    w.write_record(["p", "acc", "ci95"])?;
    let mut rows = Vec::with_capacity(values.len());
    for &p in values {
        let mut run = cfg.clone();
        run.train.mode = Mode::Supervised;
        run.train.p = p;
        run.validate()?;
        let report = match cfg.precision {
            Precision::F32 => train_and_validate::<f32>(&run, &ds)?,
            Precision::F64 => train_and_validate::<f64>(&run, &ds)?,
        };
        w.write_record([p.to_string(), report.acc.to_string(), report.ci95.to_string()])?;
        w.flush()?;
        writeln!(log, "p = {}: {:.2} ± {:.2}", p, report.acc, report.ci95)?;
        rows.push((p, report));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelgenArgs {
    pub data: DataSource,
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episode_seed: u64,
    pub p: f64,
    pub out: PathBuf,
}

fn write_matrix(path: &Path, ids: &[String], m: &[Vec<f64>]) -> CmdResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(std::iter::once("").chain(ids.iter().map(String::as_str)))?;
    for (id, row) in ids.iter().zip(m) {
        w.write_record(std::iter::once(id.clone()).chain(row.iter().map(|x| x.to_string())))?;
    }
    w.flush()?;
    Ok(())
}

/// Pairwise ĉ and â for one sampled episode, at class level and over every
/// episode instance (grouped by class, supports first).
pub fn labelgen(args: &LabelgenArgs, log: &mut dyn Write) -> CmdResult<()> {
    let ds = args.data.load()?;
    let ep = sample_episode(&ds, args.way, args.shot, args.queries, args.split, args.episode_seed)?;
    fs::create_dir_all(&args.out)?;
    let attrs: Vec<&[f64]> = ep.classes.iter().map(|&c| ds.classes()[c].attribute.as_slice()).collect();

    let mut ca = vec![vec![0.0; ep.way]; ep.way];
    let mut cc = ca.clone();
    for i in 0..ep.way {
        for j in 0..ep.way {
            cc[i][j] = binary_label(ep.classes[i], ep.classes[j]) as f64;
            ca[i][j] = soft_label(attrs[i], attrs[j], args.p)?;
        }
    }
    let class_ids: Vec<String> = ep.classes.iter().map(|&c| ds.classes()[c].id.to_string()).collect();
    write_matrix(&args.out.join("class_c_hat.csv"), &class_ids, &cc)?;
    write_matrix(&args.out.join("class_a_hat.csv"), &class_ids, &ca)?;

    let mut members: Vec<(usize, usize)> = Vec::new();
    for c in 0..ep.way {
        for (&i, &l) in ep.support.iter().zip(&ep.support_labels) {
            if l == c {
                members.push((i, c));
            }
        }
        for (&i, &l) in ep.query.iter().zip(&ep.query_labels) {
            if l == c {
                members.push((i, c));
            }
        }
    }
    let n = members.len();
    let mut ic = vec![vec![0.0; n]; n];
    let mut ia = ic.clone();
    for (a, &(_, ca_)) in members.iter().enumerate() {
        for (b, &(_, cb)) in members.iter().enumerate() {
            ic[a][b] = cc[ca_][cb];
            ia[a][b] = ca[ca_][cb];
        }
    }
    let ids: Vec<String> = members.iter().map(|(i, _)| i.to_string()).collect();
    write_matrix(&args.out.join("c_hat.csv"), &ids, &ic)?;
    write_matrix(&args.out.join("a_hat.csv"), &ids, &ia)?;
    writeln!(log, "{}-way episode, {} instances, labels in {}", ep.way, n, args.out.display())?;
    Ok(())
}

/// Random search over (α, β, γ); writes one row per trial.
pub fn search(
    cfg: &RunConfig,
    budget: &SearchBudget,
    seed: u64,
    log: &mut dyn Write,
) -> CmdResult<(LossWeights, Vec<SearchTrial>)> {
    cfg.validate()?;
    let ds = cfg.data.load()?;
    let mut train = cfg.train.clone();
    train.mode = Mode::Supervised;
    let (best, trials) = search_weights(&train, &ds, budget, seed)?;
    fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.out.join(SEARCH_CSV))?;
    w.write_record(["trial", "alpha", "beta", "gamma", "val_acc"])?;
    for (k, t) in trials.iter().enumerate() {
        w.write_record([
            k.to_string(),
            t.weights.alpha.to_string(),
            t.weights.beta.to_string(),
            t.weights.gamma.to_string(),
            t.val_acc.to_string(),
        ])?;
    }
    w.flush()?;
    writeln!(
        log,
        "best alpha = {} beta = {} gamma = {}",
        best.alpha, best.beta, best.gamma
    )?;
    Ok((best, trials))
}
