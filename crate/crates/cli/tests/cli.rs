use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use arl_cli::commands::{self, EvalArgs, LabelgenArgs};
use arl_cli::{DataSource, RunConfig};
use arl_core::autodiff::OpKind;
use arl_core::relabel::soft_label;
use arl_core::{Mode, Split};

fn arl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arl"))
}

fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(
        "data = synthetic:1,10,10,28\nway = 2\nqueries = 2\nchannels = 8\niterations = 10\nlog_every = 2\nm = 2\npairs = 2\n",
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_dataset_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let st = arl()
            .args(["gen", "--seed", "7", "--classes", "20", "--per-class", "30", "--side", "32", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    }
    let files = tree_bytes(&a);
    assert_eq!(files.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count(), 600);
    let attrs = read_csv(&a.join("attributes.csv"));
    assert_eq!(attrs.len(), 21);
    assert!(attrs.iter().all(|r| r.len() == 17));
    assert_eq!(files, tree_bytes(&b));
}

#[test]
fn gen_capacity_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = arl()
        .args(["gen", "--seed", "7", "--classes", "300", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("capacity"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let flag = arl()
        .args(["labelgen", "--episode-seed", "31", "--data", "synthetic:3,10,10,28", "--out"])
        .arg(&a)
        .status()
        .unwrap();
    let env = arl()
        .env("ARL_SEED", "31")
        .args(["labelgen", "--data", "synthetic:3,10,10,28", "--out"])
        .arg(&b)
        .status()
        .unwrap();
    assert!(flag.success() && env.success());
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn train_resume_continues_iteration_counter() {
    let dir = tempfile::tempdir().unwrap();
    let full = tiny_config(&dir.path().join("full"));
    let mut sink = Vec::new();
    let done = commands::train(&full, Mode::Supervised, false, &mut sink).unwrap();
    assert_eq!(done.iteration, 10);

    let mut first = tiny_config(&dir.path().join("split"));
    first.train.iterations = 6;
    commands::train(&first, Mode::Supervised, false, &mut sink).unwrap();
    let second = tiny_config(&dir.path().join("split"));
    let resumed = commands::train(&second, Mode::Supervised, true, &mut sink).unwrap();
    assert_eq!(resumed.iteration, 10);

    let metrics = fs::read_to_string(&resumed.metrics).unwrap();
    let iters: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iter"].as_u64().unwrap())
        .collect();
    assert_eq!(iters, [2, 4, 6, 8, 10]);
    assert_eq!(metrics, fs::read_to_string(&done.metrics).unwrap());
    assert_eq!(fs::read(&resumed.checkpoint).unwrap(), fs::read(&done.checkpoint).unwrap());

    let frozen = RunConfig::load(&done.frozen).unwrap();
    assert_eq!(frozen, full);
}

#[test]
fn unsupervised_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let done = commands::train(&cfg, Mode::Unsupervised, false, &mut Vec::new()).unwrap();
    assert_eq!(done.iteration, 10);
    let frozen = RunConfig::load(&done.frozen).unwrap();
    assert_eq!(frozen.train.mode, Mode::Unsupervised);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "data = synthetic:1,10,10,28\nway = 2\nqueries = 2\nchannels = 8\niterations = 5\nlr = 1e300\n",
    )
    .unwrap();
    let out = arl().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "way = 5\nshots = 1\n").unwrap();
    let out = arl().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shots"));
}

#[test]
fn eval_dump_recounts_and_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let done = commands::train(&cfg, Mode::Supervised, false, &mut Vec::new()).unwrap();
    let args = EvalArgs {
        ckpt: done.checkpoint.clone(),
        data: cfg.data.clone(),
        split: Split::Test,
        way: 2,
        shot: 5,
        queries: 3,
        episodes: 25,
        seed: 4,
        out: dir.path().join("eval"),
    };
    let mut log = Vec::new();
    let rep = commands::eval(&args, &mut log).unwrap();
    assert!(String::from_utf8(log).unwrap().starts_with("acc "));

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(args.out.join(commands::EVAL_JSON)).unwrap()).unwrap();
    assert_eq!(summary["acc"].as_f64().unwrap(), rep.acc);
    assert_eq!(summary["L"], 2);
    assert_eq!(summary["Z"], 5);
    assert_eq!(summary["format_version"], 1);

    // argmax over the dumped per-pair scores, one query at a time
    let rows = read_csv(&args.out.join(commands::SCORES_CSV));
    let mut per_episode = vec![(0usize, 0usize); 25];
    let mut best: Option<(usize, usize, usize, f64, usize)> = None;
    let mut flush = |b: Option<(usize, usize, usize, f64, usize)>| {
        if let Some((e, _, label, _, arg)) = b {
            per_episode[e].0 += (arg == label) as usize;
            per_episode[e].1 += 1;
        }
    };
    for r in &rows[1..] {
        let v: Vec<f64> = r.iter().map(|x| x.parse().unwrap()).collect();
        let (e, q, label, c, s) = (v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize, v[4]);
        match best {
            Some((be, bq, _, bs, _)) if be == e && bq == q => {
                if s > bs {
                    best = Some((e, q, label, s, c));
                }
            }
            _ => {
                flush(best);
                best = Some((e, q, label, s, c));
            }
        }
    }
    flush(best);
    let accs: Vec<f64> = per_episode.iter().map(|(h, n)| 100.0 * *h as f64 / *n as f64).collect();
    assert_eq!(accs, rep.per_episode);

    let out = arl()
        .args(["eval", "--ckpt"])
        .arg(&done.checkpoint)
        .args(["--data", "synthetic:1,10,10,32", "--L", "2", "--episodes", "2", "--out"])
        .arg(dir.path().join("mismatch"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checkpoint:") && err.contains("dataset:"), "{}", err);
}

#[test]
fn gradcheck_names_the_faulty_op_and_covers_every_op() {
    let out = arl()
        .args(["gradcheck", "--precision", "f64", "--inject-fault", "sigmoid"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
    let text = String::from_utf8_lossy(&out.stdout);
    let failing: Vec<&str> = text
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert!(failing.contains(&"sigmoid"), "{}", text);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigmoid"));
    for k in OpKind::ALL {
        let rows = text.lines().filter(|l| l.split_whitespace().next() == Some(k.name())).count();
        assert_eq!(rows, 1, "{} listed {} times", k.name(), rows);
    }
    assert_eq!(text.lines().filter(|l| l.starts_with("objective ")).count(), 1);
}

#[test]
fn sweep_rows_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.eval_episodes = 20;
    let a = commands::sweep_p(&cfg, &[0.5, 4.0], &mut Vec::new()).unwrap();
    let csv_a = fs::read_to_string(dir.path().join(commands::SWEEP_CSV)).unwrap();
    let b = commands::sweep_p(&cfg, &[0.5, 4.0], &mut Vec::new()).unwrap();
    let csv_b = fs::read_to_string(dir.path().join(commands::SWEEP_CSV)).unwrap();
    assert_eq!(a, b);
    assert_eq!(csv_a, csv_b);
    let rows = read_csv(&dir.path().join(commands::SWEEP_CSV));
    assert_eq!(rows[0], ["p", "acc", "ci95"]);
    assert_eq!(rows.len(), 3);
}

#[test]
fn labelgen_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let data = DataSource::Synthetic {
        seed: 2,
        classes: 20,
        per_class: 10,
        side: 28,
    };
    let args = LabelgenArgs {
        data: data.clone(),
        split: Split::Train,
        way: 5,
        shot: 2,
        queries: 1,
        episode_seed: 9,
        p: 1.5,
        out: dir.path().to_path_buf(),
    };
    commands::labelgen(&args, &mut Vec::new()).unwrap();
    let parse = |name: &str| -> (Vec<String>, Vec<Vec<f64>>) {
        let rows = read_csv(&dir.path().join(name));
        let ids = rows[0][1..].to_vec();
        let m = rows[1..].iter().map(|r| r[1..].iter().map(|x| x.parse().unwrap()).collect()).collect();
        (ids, m)
    };
    let (class_ids, cc) = parse("class_c_hat.csv");
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(cc[i][j], (i == j) as u8 as f64);
        }
    }
    let ds = data.load().unwrap();
    let attr = |id: &str| {
        let id: i64 = id.parse().unwrap();
        ds.classes().iter().find(|c| c.id == id).unwrap().attribute.0.clone()
    };
    let (_, ca) = parse("class_a_hat.csv");
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(ca[i][j], ca[j][i]);
            let (a, b) = (attr(&class_ids[i]), attr(&class_ids[j]));
            let mut d = 0.0;
            for k in 0..a.len() {
                d += (a[k] - b[k]).abs().powf(1.5);
            }
            assert!((ca[i][j] - (-d).exp()).abs() < 1e-12);
            assert_eq!(ca[i][j], soft_label(&a, &b, 1.5).unwrap());
        }
    }
    let (ids, ia) = parse("a_hat.csv");
    assert_eq!(ids.len(), 15);
    for (a, ia_a) in ids.iter().zip(&ia) {
        let ca_ = ds.class_of(a.parse().unwrap());
        for (b, &v) in ids.iter().zip(ia_a.iter()) {
            if ds.class_of(b.parse().unwrap()) == ca_ {
                assert_eq!(v, 1.0);
            }
        }
    }
}

#[test]
fn search_writes_trials() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let budget = arl_core::training::SearchBudget {
        trials: 2,
        iterations: 2,
        val_episodes: 4,
    };
    let (best, trials) = commands::search(&cfg, &budget, 3, &mut Vec::new()).unwrap();
    assert_eq!(trials.len(), 2);
    assert!(trials.iter().any(|t| t.weights == best));
    assert_eq!(read_csv(&dir.path().join(commands::SEARCH_CSV)).len(), 3);
}
