//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Environment:
//! - `PMNET_ACCEPT_STEPS`: training steps per copy-paste model (default 4000)
//! - `PMNET_ACCEPT_TRIALS`: copy-paste instances per N when evaluating (default 32)
//! - `PMNET_ACCEPT_ONLY`: comma-separated criterion numbers to run
//! - `PMNET_ACCEPT_STRICT=1`: exit nonzero when any criterion fails
//!
//! Trained models are cached under the cargo target directory, keyed by the
//! full experiment config, so reruns with the same settings reuse them.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;

use pmnet::checkpoint::Checkpoint;
use pmnet::eval::{self, AblationSpec, AccuracyRow};
use pmnet::experiment::{self, ExperimentConfig, TaskConfig};
use pmnet::model::{self, ForwardOptions, ModelConfig, Params};
use pmnet::phasor::{self, TreeShape};
use pmnet::rng::{self, normal_tensor, uniform_tensor};
use pmnet::scan::{self, build_plan, phase_distance, sequential_oracle};
use pmnet::task::{self, CopyPasteConfig};
use pmnet::{gradcheck, Tape, Tensor};

type Outcome = Result<String, String>;

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradcheck_suite() -> Outcome {
    let t = Instant::now();
    let report = gradcheck::run_suite(2024, 20, None).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = report.ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = report
        .ops
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name)
        .collect();
    let min_inst = report.ops.iter().map(|o| o.instances).min().unwrap_or(0);
    check(
        failed.is_empty() && worst < 1e-4 && min_inst >= 20 && secs < 60.0,
        format!("{} ops x {min_inst} instances, worst rel err {worst:.2e}, {secs:.1}s, failing {failed:?}", report.ops.len()),
    )
}

fn unitarity() -> Outcome {
    let t = 256;
    let mut r = rng::stream(256, "accept-unitary");
    let mut tape = Tape::<f64>::new();
    let mut m = tape.constant(uniform_tensor(&mut r, &[1, 16], 0.0, 2.0 * PI));
    let mut deltas = Vec::new();
    for _ in 0..t {
        let d = tape.leaf(uniform_tensor(&mut r, &[1, 16], -PI, PI), true);
        deltas.push(d);
        m = phasor::apply_update(&mut tape, m, d).map_err(|e| e.to_string())?;
    }
    let c = tape.cos(m);
    let w = tape.constant(normal_tensor(&mut r, &[1, 16], 1.0));
    let p = tape.mul(c, w).map_err(|e| e.to_string())?;
    let loss = tape.sum_all(p);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let norms: Vec<f64> = deltas
        .iter()
        .map(|d| grads.get_or_zeros(*d).sq_norm().sqrt())
        .collect();
    let (lo, hi) = norms
        .iter()
        .fold((f64::MAX, 0.0f64), |(a, b), &n| (a.min(n), b.max(n)));
    let rel = (hi - lo) / hi;
    check(
        hi > 0.0 && rel <= 1e-12,
        format!("T={t}, gradient norms in [{lo:.6}, {hi:.6}], relative spread {rel:.1e}"),
    )
}

fn scan_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(3, "accept-scan");
    let mut worst = 0.0f64;
    for case in 0..200 {
        let b = r.random_range(1..=4);
        let s = match case % 5 {
            0 => 1,
            1 => 257,
            _ => r.random_range(1..=257),
        };
        let n = r.random_range(1..=16);
        let groups: Vec<usize> = (0..b * s)
            .map(|i| match case % 4 {
                0 => r.random_range(0..n),
                1 => 0,
                2 => (i % s) % n,
                _ => ((i % s) / 5 % 2) * (n - 1),
            })
            .collect();
        let grid: Tensor<f32> = uniform_tensor(&mut r, &[b, s, 4, 3], -PI, PI);
        let plan = build_plan(&groups, b, s, n).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let g = tape.constant(grid.clone());
        let out = scan::segmented_scan(&mut tape, g, &plan).map_err(|e| e.to_string())?;
        let oracle = sequential_oracle(&grid, &groups, b, s);
        for (a, o) in tape.value(out).data().iter().zip(oracle.data()) {
            worst = worst.max(phase_distance(*a as f64, *o as f64));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && secs < 60.0,
        format!("200 configs at f32, worst circular error {worst:.2e}, {secs:.2}s"),
    )
}

fn eq9_law() -> Outcome {
    let t = Instant::now();
    let trials = 10_000;
    let mut details = Vec::new();
    let mut ok = true;
    for &s in &[1usize, 4, 16] {
        let plan = build_plan(&vec![0; trials * s], trials, s, 1).map_err(|e| e.to_string())?;
        let mut r = rng::stream(s as u64, "accept-eq9");
        let grid: Tensor<f64> = normal_tensor(&mut r, &[trials, s, 1], 1.0);
        let upstream: Tensor<f64> = normal_tensor(&mut r, &[trials, s, 1], 1.0);

        let mut tape = Tape::new();
        let g = tape.leaf(grid.clone(), true);
        let y = scan::grad_scale(&mut tape, g, &plan, true).map_err(|e| e.to_string())?;
        let forward_exact = tape.value(y) == &grid;
        let mut tape2 = Tape::new();
        let g2 = tape2.leaf(grid.clone(), true);
        let y2 = phasor::segment_normalize(&mut tape2, g2, s).map_err(|e| e.to_string())?;
        let forward_exact = forward_exact && tape2.value(y2) == &grid;

        let grads = tape
            .backward_with(y, upstream.clone())
            .map_err(|e| e.to_string())?;
        let gd = grads.get_or_zeros(g);
        let factor = 1.0 / (s as f64).sqrt();
        let scale_exact = gd
            .data()
            .iter()
            .zip(upstream.data())
            .all(|(a, u)| *a == u * factor);

        let sums: Vec<f64> = gd.data().chunks(s).map(|c| c.iter().sum()).collect();
        let mean = sums.iter().sum::<f64>() / trials as f64;
        let var = sums.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let raw: Vec<f64> = upstream.data().chunks(s).map(|c| c.iter().sum()).collect();
        let raw_mean = raw.iter().sum::<f64>() / trials as f64;
        let raw_var = raw.iter().map(|x| (x - raw_mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let within = (var - 1.0).abs() <= 0.1;
        ok &= forward_exact && scale_exact && within;
        details.push(format!(
            "s={s}: fwd {} scale {} var {var:.3} (unscaled {raw_var:.2})",
            if forward_exact { "exact" } else { "DIFF" },
            if scale_exact { "exact" } else { "DIFF" }
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        ok && secs < 60.0,
        format!("{}; {secs:.2}s", details.join("; ")),
    )
}

fn receptive_field() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 4,
        window: 16,
        d_model: 64,
        ffn_mult: 2,
        memory_enabled: false,
        ..ModelConfig::default()
    };
    let params = Params::<f32>::init(&cfg, 5).map_err(|e| e.to_string())?;
    let s = 100;
    let mut r = rng::stream(5, "accept-rf");
    let tokens: Vec<u8> = (0..s).map(|_| r.random()).collect();
    let (base, _, _) = model::infer(&cfg, &params, &tokens, 1, s, None, ForwardOptions::EVAL)
        .map_err(|e| e.to_string())?;
    let v = model::VOCAB;
    let mut checked = 0;
    for p in 0..s {
        let mut pert = tokens.clone();
        pert[p] = tokens[p].wrapping_add(1 + r.random_range(0..255u8));
        let (out, _, _) = model::infer(&cfg, &params, &pert, 1, s, None, ForwardOptions::EVAL)
            .map_err(|e| e.to_string())?;
        for t in p + 65..s {
            if out.data()[t * v..(t + 1) * v] != base.data()[t * v..(t + 1) * v] {
                return Err(format!("perturbing byte {p} changed logits at {t}"));
            }
            checked += 1;
        }
    }
    Ok(format!("L=4, w=16: {checked} (position, perturbation) pairs beyond 64 bytes, all logits bit-identical"))
}

fn capacity() -> Outcome {
    let shape = TreeShape::new(4, 4, 1).map_err(|e| e.to_string())?;
    let mut leaves = std::collections::BTreeSet::new();
    for path in 0..64usize {
        let mut g = 0;
        for level in 1..4 {
            g = phasor::child_group(g, (path >> (2 * (3 - level))) & 3, 4, level)
                .map_err(|e| e.to_string())?;
        }
        leaves.insert(g);
    }
    let (lo, hi) = (*leaves.first().unwrap(), *leaves.last().unwrap());
    check(
        shape.total_groups() == 85 && leaves.len() == 64 && lo == 0 && hi == 63,
        format!(
            "groups {}, leaves reached {} spanning [{lo}, {})",
            shape.total_groups(),
            leaves.len(),
            hi + 1
        ),
    )
}

fn determinism() -> Outcome {
    let doc = serde_json::json!({
        "seed": 11,
        "model": {"d_model": 16, "window": 4, "d_mem": 4, "n_heads": 2, "ffn_mult": 2, "max_seq_len": 64},
        "train": {"steps": 12, "batch_size": 8, "grad_shards": 4, "eval_every": 4, "eval_batches": 2,
                  "checkpoint_every": 6, "log_wall_time": false},
        "task": {"kind": "copy_paste", "n_min": 2, "n_max": 16}
    });
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for (i, workers) in [1usize, 1, 4].into_iter().enumerate() {
        let cfg = ExperimentConfig::from_value(doc.clone(), &[format!("train.workers={workers}")])
            .map_err(|e| e.to_string())?;
        let out = dir.path().join(format!("run{i}"));
        experiment::run_experiment(&cfg, &out).map_err(|e| e.to_string())?;
        let read = |n: &str| std::fs::read(out.join(n)).map_err(|e| e.to_string());
        runs.push((
            read("metrics.jsonl")?,
            read("step_6.ckpt")?,
            read("final.ckpt")?,
        ));
    }
    let same = |a: usize, b: usize| runs[a] == runs[b];
    check(
        same(0, 1) && same(0, 2),
        format!(
            "metrics+checkpoints identical: repeat run {}, 1 vs 4 workers {}",
            same(0, 1),
            same(0, 2)
        ),
    )
}

struct Trained {
    cfg: ExperimentConfig,
    params: Params<f32>,
    summary: experiment::Summary,
    cached: bool,
    minutes: f64,
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

fn train_cached(cfg: &ExperimentConfig) -> Result<Trained, String> {
    let text = serde_json::to_string(cfg).map_err(|e| e.to_string())?;
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let dir = root.join(format!("{:016x}", fnv(&text)));
    let ckpt_path = dir.join("final.ckpt");
    let stored = std::fs::read_to_string(dir.join("config.json")).ok();
    let reusable = ckpt_path.exists()
        && stored
            .and_then(|s| serde_json::from_str::<ExperimentConfig>(&s).ok())
            .as_ref()
            == Some(cfg);
    let t = Instant::now();
    if !reusable {
        experiment::run_experiment(cfg, &dir).map_err(|e| e.to_string())?;
    }
    let ckpt = Checkpoint::<f32>::load(&ckpt_path).map_err(|e| e.to_string())?;
    let records =
        experiment::read_metrics(&dir.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    let warmup = (cfg.optim.warmup_frac * cfg.train.steps as f64).ceil() as usize;
    Ok(Trained {
        cfg: cfg.clone(),
        params: ckpt.params,
        summary: experiment::summarize(&records, warmup),
        cached: reusable,
        minutes: t.elapsed().as_secs_f64() / 60.0,
    })
}

fn copy_task(cfg: &ExperimentConfig) -> CopyPasteConfig {
    match &cfg.task {
        TaskConfig::CopyPaste(c) => c.clone(),
        TaskConfig::Corpus(_) => CopyPasteConfig::default(),
    }
}

fn accuracy(
    m: &Trained,
    ns: &[usize],
    ablation: &AblationSpec,
    trials: usize,
) -> Result<Vec<AccuracyRow>, String> {
    eval::exact_accuracy(
        &m.cfg.model,
        &m.params,
        &copy_task(&m.cfg),
        ns,
        trials,
        ablation,
        99,
        16,
        m.cfg.model.max_seq_len,
    )
    .map_err(|e| e.to_string())
}

fn fmt_rows(rows: &[AccuracyRow]) -> String {
    rows.iter()
        .map(|r| format!("{}:{:.2}", r.n, r.accuracy))
        .collect::<Vec<_>>()
        .join(" ")
}

struct CopyRuns {
    nomem: Trained,
    mem: Trained,
    grid: Vec<usize>,
    nomem_acc: Vec<AccuracyRow>,
    mem_acc: Vec<AccuracyRow>,
    trials: usize,
}

fn copy_runs(config: &Path) -> Result<CopyRuns, String> {
    let steps = env_usize("PMNET_ACCEPT_STEPS", 4000);
    let trials = env_usize("PMNET_ACCEPT_TRIALS", 32);
    let base = [
        format!("train.steps={steps}"),
        "train.log_wall_time=false".to_string(),
    ];
    let load = |extra: &[&str]| {
        let mut ov = base.to_vec();
        ov.extend(extra.iter().map(|s| s.to_string()));
        ExperimentConfig::load(config, &ov).map_err(|e| e.to_string())
    };
    let mem_cfg = load(&["memory_enabled=true"])?;
    let nomem_cfg = load(&["memory_enabled=false"])?;
    let nomem = train_cached(&nomem_cfg)?;
    let mem = train_cached(&mem_cfg)?;
    let grid: Vec<usize> = (2..=64).step_by(2).collect();
    let nomem_acc = accuracy(&nomem, &grid, &AblationSpec::NONE, trials)?;
    let mem_acc = accuracy(&mem, &grid, &AblationSpec::NONE, trials)?;
    Ok(CopyRuns {
        nomem,
        mem,
        grid,
        nomem_acc,
        mem_acc,
        trials,
    })
}

fn copy_paste(runs: &CopyRuns) -> Outcome {
    let at = |rows: &[AccuracyRow], f: &dyn Fn(usize) -> bool| {
        rows.iter()
            .filter(|r| f(r.n))
            .map(|r| r.accuracy)
            .collect::<Vec<_>>()
    };
    let min = |v: Vec<f64>| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: Vec<f64>| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let nomem_short = min(at(&runs.nomem_acc, &|n| n <= 24));
    let nomem_long = max(at(&runs.nomem_acc, &|n| n >= 48));
    let mem_all = min(at(&runs.mem_acc, &|_| true));
    let how = |t: &Trained| {
        if t.cached {
            "cached".to_string()
        } else {
            format!("{:.0} min", t.minutes)
        }
    };
    check(
        nomem_short >= 0.95 && nomem_long <= 0.20 && mem_all >= 0.90,
        format!(
            "{} steps each (no-mem {}, memory {}), {} trials/N; no-mem min acc N<=24 {nomem_short:.3} (need >=0.95), \
             max acc N>=48 {nomem_long:.3} (need <=0.20); memory min acc N<=64 {mem_all:.3} (need >=0.90)\n    \
             no-mem  {}\n    memory  {}",
            runs.mem.cfg.train.steps,
            how(&runs.nomem),
            how(&runs.mem),
            runs.trials,
            fmt_rows(&runs.nomem_acc),
            fmt_rows(&runs.mem_acc)
        ),
    )
}

fn grad_dynamics(runs: &CopyRuns) -> Outcome {
    let mem = &runs.mem.summary;
    let nomem = &runs.nomem.summary;
    let ratio = mem.max_grad_norm / nomem.median_grad_norm_after_warmup;
    let windows = experiment::windowed_eval_means(&mem.eval, 1000);
    let monotone = windows.len() >= 2 && windows.windows(2).all(|w| w[1] < w[0]);
    let finite = mem.last_train_loss.is_finite();
    check(
        ratio >= 2.0 && monotone && finite,
        format!(
            "memory max pre-clip norm {:.3} vs no-mem post-warmup median {:.3} (ratio {ratio:.2}, need >=2); \
             memory eval loss per 1k-step window [{}] ({})",
            mem.max_grad_norm,
            nomem.median_grad_norm_after_warmup,
            windows.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(", "),
            if monotone { "decreasing" } else { "not monotone" }
        ),
    )
}

fn ablations(runs: &CopyRuns) -> Outcome {
    let m = &runs.mem;
    let long: Vec<usize> = runs.grid.iter().copied().filter(|&n| n >= 48).collect();
    let full: Vec<&AccuracyRow> = runs.mem_acc.iter().filter(|r| r.n >= 48).collect();
    let off = accuracy(
        m,
        &long,
        &AblationSpec::parse("disable_updates").map_err(|e| e.to_string())?,
        runs.trials,
    )?;
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        let (s, c) = v.fold((0.0, 0), |(s, c), x| (s + x, c + 1));
        s / c as f64
    };
    let full_mean = mean(&mut full.iter().map(|r| r.accuracy));
    let off_mean = mean(&mut off.iter().map(|r| r.accuracy));

    let task = CopyPasteConfig {
        n_min: 64,
        n_max: 64,
        ..copy_task(&m.cfg)
    };
    let mut r = rng::stream(7, "accept-ablate");
    let docs: Vec<Vec<u8>> = (0..16)
        .map(|_| task::sample_instance(&mut r, &task, 64).bytes())
        .collect();
    let curve = |mode: &str| -> Result<Vec<f64>, String> {
        let spec = AblationSpec::parse(mode).map_err(|e| e.to_string())?;
        eval::cumulative_delta_bpb(
            &m.cfg.model,
            &m.params,
            &spec,
            &docs,
            m.cfg.model.max_seq_len,
        )
        .map_err(|e| e.to_string())
    };
    let root = curve("zero_root")?;
    let leaf = curve("zero_leaf")?;
    let none = curve("none")?;
    let root_last = *root.last().unwrap_or(&0.0);
    let leaf_last = *leaf.last().unwrap_or(&0.0);
    let none_zero = none.iter().all(|&v| v == 0.0);
    // diagnostic only: the same deltas restricted to the pasted half of each doc
    let per_doc = 2 * 64;
    let paste = |c: &[f64]| -> f64 {
        (0..c.len())
            .filter(|i| i % per_doc >= 64)
            .map(|i| c[i] - if i == 0 { 0.0 } else { c[i - 1] })
            .sum()
    };
    check(
        off_mean < full_mean && root_last > leaf_last && none_zero,
        format!(
            "N>=48 mean acc: full {full_mean:.3}, disable_updates {off_mean:.3}; final cumulative delta-BPB \
             zero_root {root_last:.2} vs zero_leaf {leaf_last:.2} over {} positions; none identically zero: {none_zero}\n    \
             pasted half only: zero_root {:.2}, zero_leaf {:.2}",
            root.len(),
            paste(&root),
            paste(&leaf)
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("PMNET_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/copy_paste_small.json");
    let mut failures = 0;
    let mut emit = |i: usize, name: &str, out: Outcome| {
        let (tag, detail) = match out {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {i:>2} {name}: {detail}");
    };

    let cheap: [Criterion; 5] = [
        (1, "gradient check", gradcheck_suite),
        (2, "unitarity", unitarity),
        (3, "scan vs oracle", scan_oracle),
        (4, "segment normalization law", eq9_law),
        (5, "receptive field", receptive_field),
    ];
    for (i, name, f) in &cheap {
        if want(*i) {
            emit(*i, name, f());
        }
    }
    if want(6) || want(7) || want(8) {
        match copy_runs(&config) {
            Ok(runs) => {
                if want(6) {
                    emit(6, "copy-paste reproduction", copy_paste(&runs));
                }
                if want(7) {
                    emit(7, "gradient dynamics", grad_dynamics(&runs));
                }
                if want(8) {
                    emit(8, "ablation orderings", ablations(&runs));
                }
            }
            Err(e) => {
                for (i, name) in [
                    (6, "copy-paste reproduction"),
                    (7, "gradient dynamics"),
                    (8, "ablation orderings"),
                ] {
                    if want(i) {
                        emit(i, name, Err(format!("training failed: {e}")));
                    }
                }
            }
        }
    }
    if want(9) {
        emit(9, "capacity arithmetic", capacity());
    }
    if want(10) {
        emit(10, "determinism", determinism());
    }
    println!("acceptance: {failures} failing");
    if failures > 0 && std::env::var("PMNET_ACCEPT_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
