//! Experiment configuration, the training loop, metrics logging and the
//! metrics summarizer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{Checkpoint, Embedded};
use crate::model::{ModelConfig, Params};
use crate::rng;
use crate::task::{self, CopyPasteConfig};
use crate::train::{self, AdamW, Batch, OptimConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("bad override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    pub seq_len: usize,
    /// Trailing fraction of the corpus held out for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout_frac: f64,
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    CopyPaste(CopyPasteConfig),
    Corpus(CorpusConfig),
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::CopyPaste(CopyPasteConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Fixed number of gradient shards per batch; results do not depend on
    /// the number of workers executing them.
    pub grad_shards: usize,
    pub workers: usize,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Record wall-clock milliseconds in the metrics log. Disable for
    /// byte-identical logs across runs.
    pub log_wall_time: bool,
    /// Copy-paste length curriculum: when positive, training `n_max` starts
    /// here and grows linearly to the task's `n_max` over the first
    /// `curriculum_frac` of training. Evaluation always uses the full range.
    pub curriculum_start_n_max: usize,
    pub curriculum_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            grad_shards: 4,
            workers: 1,
            eval_every: 100,
            eval_batches: 4,
            checkpoint_every: 0,
            log_wall_time: true,
            curriculum_start_n_max: 0,
            curriculum_frac: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

/// Dotted paths of all leaves and objects in `user` that `reference` lacks.
fn unknown_keys(user: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(u), Value::Object(r)) = (user, reference) {
        for (k, v) in u {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match r.get(k) {
                None => out.push(path),
                Some(rv) => unknown_keys(v, rv, &path, out),
            }
        }
    }
}

/// The default document for the task kind named in `user`, used as the
/// schema for unknown-key detection.
fn reference_doc(user: &Value) -> Result<Value, ConfigError> {
    let mut reference = serde_json::to_value(ExperimentConfig::default())?;
    let kind = user
        .pointer("/task/kind")
        .and_then(Value::as_str)
        .unwrap_or("copy_paste");
    let task = match kind {
        "copy_paste" => serde_json::to_value(TaskConfig::CopyPaste(CopyPasteConfig::default()))?,
        "corpus" => serde_json::to_value(TaskConfig::Corpus(CorpusConfig {
            path: PathBuf::new(),
            seq_len: 0,
            holdout_frac: default_holdout(),
        }))?,
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown task kind `{other}` (copy_paste, corpus)"
            )))
        }
    };
    reference["task"] = task;
    Ok(reference)
}

/// Applies `key=value` overrides. Dotted keys address nested fields; a bare
/// key is resolved against the top level and then each section, and must
/// match exactly one field. Values parse as JSON, falling back to strings.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<(), ConfigError> {
    let reference = reference_doc(doc)?;
    let mut unknown = Vec::new();
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(ov.clone()))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let path: Vec<String> = if key.contains('.') {
            key.split('.').map(str::to_string).collect()
        } else if reference.get(key).is_some() {
            vec![key.to_string()]
        } else {
            let hits: Vec<&String> = reference
                .as_object()
                .into_iter()
                .flatten()
                .filter(|(_, v)| v.get(key).is_some())
                .map(|(k, _)| k)
                .collect();
            match hits.as_slice() {
                [one] => vec![(*one).clone(), key.to_string()],
                [] => {
                    unknown.push(key.to_string());
                    continue;
                }
                many => {
                    return Err(ConfigError::Invalid(format!(
                        "ambiguous override `{key}`: qualify it as one of {}",
                        many.iter()
                            .map(|s| format!("{s}.{key}"))
                            .collect::<Vec<_>>()
                            .join(", ")
                    )))
                }
            }
        };
        let mut r = &reference;
        for seg in &path {
            match r.get(seg) {
                Some(next) => r = next,
                None => {
                    unknown.push(key.to_string());
                    break;
                }
            }
        }
        if unknown.last().map(String::as_str) == Some(key) {
            continue;
        }
        let mut node = &mut *doc;
        for seg in &path[..path.len() - 1] {
            if !node.is_object() {
                *node = Value::Object(Default::default());
            }
            node = node
                .as_object_mut()
                .expect("object")
                .entry(seg.clone())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node.as_object_mut()
            .expect("object")
            .insert(path[path.len() - 1].clone(), value);
    }
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::UnknownKeys(unknown))
    }
}

impl ExperimentConfig {
    /// Parses a JSON document, applying overrides first. Every unknown key is
    /// reported, not only the first.
    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<Self, ConfigError> {
        apply_overrides(&mut doc, overrides)?;
        if let Some(task) = doc.get_mut("task").and_then(Value::as_object_mut) {
            task.entry("kind")
                .or_insert_with(|| Value::String("copy_paste".into()));
        }
        let reference = reference_doc(&doc)?;
        let mut unknown = Vec::new();
        unknown_keys(&doc, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let cfg: ExperimentConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_value(serde_json::from_str(&text)?, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: crate::tensor::TensorError| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(inv)?;
        if self.train.batch_size == 0 || self.train.grad_shards == 0 || self.train.workers == 0 {
            return Err(ConfigError::Invalid(
                "batch_size, grad_shards and workers must be positive".into(),
            ));
        }
        match &self.task {
            TaskConfig::CopyPaste(c) => c.validate(self.model.max_seq_len).map_err(inv)?,
            TaskConfig::Corpus(c) => {
                if c.seq_len == 0 || c.seq_len > self.model.max_seq_len {
                    return Err(ConfigError::Invalid(format!(
                        "corpus seq_len {} out of range",
                        c.seq_len
                    )));
                }
                if !(0.0..1.0).contains(&c.holdout_frac) {
                    return Err(ConfigError::Invalid(
                        "holdout_frac must be in [0, 1)".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub loss_nats: f64,
    pub bpb: f64,
    pub grad_norm_preclip: Option<f64>,
    pub lr: f64,
    pub wall_ms: Option<f64>,
}

enum Data {
    Copy(CopyPasteConfig),
    Corpus {
        train: Vec<u8>,
        eval: Vec<u8>,
        seq: usize,
    },
}

impl Data {
    fn new(cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        Ok(match &cfg.task {
            TaskConfig::CopyPaste(c) => Data::Copy(c.clone()),
            TaskConfig::Corpus(c) => {
                let bytes = std::fs::read(&c.path)
                    .map_err(|e| anyhow::anyhow!("reading corpus {}: {e}", c.path.display()))?;
                let cut = ((1.0 - c.holdout_frac) * bytes.len() as f64) as usize;
                let (train, eval) = bytes.split_at(cut);
                let eval = if eval.len() > c.seq_len {
                    eval.to_vec()
                } else {
                    train.to_vec()
                };
                Data::Corpus {
                    train: train.to_vec(),
                    eval,
                    seq: c.seq_len,
                }
            }
        })
    }

    fn batch(
        &self,
        r: &mut rng::Rng,
        size: usize,
        max_len: usize,
        eval: bool,
        n_cap: Option<usize>,
    ) -> anyhow::Result<Batch> {
        Ok(match self {
            Data::Copy(c) => {
                let mut c = c.clone();
                if let Some(cap) = n_cap {
                    c.n_max = cap.clamp(c.n_min, c.n_max);
                }
                let inst = task::gen_copy_paste(r, &c, size, max_len)?;
                task::to_batch(&inst, c.pad)
            }
            Data::Corpus {
                train,
                eval: held,
                seq,
            } => task::corpus_batch(r, if eval { held } else { train }, size, *seq)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
}

/// Trains per `cfg`, writing `metrics.jsonl`, periodic `step_<n>.ckpt` and
/// `final.ckpt` into `out_dir`. Deterministic given the config.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<RunOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let doc = serde_json::to_value(cfg)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    // The worker count cannot change results, so checkpoints do not record it.
    let mut embedded = doc.clone();
    if let Some(t) = embedded.get_mut("train").and_then(Value::as_object_mut) {
        t.remove("workers");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.workers)
        .build()?;
    let data = Data::new(cfg)?;
    let mut params = Params::<f32>::init(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut data_rng = rng::stream(cfg.seed, "data");
    let mut eval_rng = rng::stream(cfg.seed, "eval");
    let eval_set = (0..cfg.train.eval_batches)
        .map(|_| {
            data.batch(
                &mut eval_rng,
                cfg.train.batch_size,
                cfg.model.max_seq_len,
                true,
                None,
            )
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&metrics_path)?);
    let t0 = Instant::now();
    let wall = |t0: &Instant| {
        cfg.train
            .log_wall_time
            .then(|| t0.elapsed().as_secs_f64() * 1000.0)
    };
    let save = |params: &Params<f32>, step: usize, name: &str| -> anyhow::Result<PathBuf> {
        let path = out_dir.join(name);
        Checkpoint {
            config: Embedded {
                model: cfg.model.clone(),
                experiment: embedded.clone(),
            },
            step: step as u64,
            seed: cfg.seed,
            params: params.clone(),
        }
        .save(&path)?;
        Ok(path)
    };

    let steps = cfg.train.steps;
    let task_n_max = match &cfg.task {
        TaskConfig::CopyPaste(c) => c.n_max,
        TaskConfig::Corpus(_) => 0,
    };
    let mut last_train = f64::NAN;
    let mut last_eval = None;
    for step in 0..steps {
        let batch = data.batch(
            &mut data_rng,
            cfg.train.batch_size,
            cfg.model.max_seq_len,
            false,
            curriculum_cap(&cfg.train, task_n_max, step, steps),
        )?;
        let lr = train::learning_rate(&cfg.optim, step, steps);
        let res = train::train_step(
            &cfg.model,
            &mut params,
            &mut opt,
            &batch,
            lr,
            cfg.train.grad_shards,
            &pool,
        )
        .map_err(|e| anyhow::anyhow!("step {step}: {e}"))?;
        last_train = res.loss;
        let rec = MetricRecord {
            step,
            split: "train".into(),
            loss_nats: res.loss,
            bpb: res.loss / std::f64::consts::LN_2,
            grad_norm_preclip: Some(res.grad_norm_preclip),
            lr,
            wall_ms: wall(&t0),
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        let done = step + 1;
        let eval_now = !eval_set.is_empty()
            && (done == steps || (cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0));
        if eval_now {
            let loss = eval_set
                .iter()
                .map(|b| train::eval_loss(&cfg.model, &params, b))
                .collect::<crate::tensor::Result<Vec<_>>>()?
                .iter()
                .sum::<f64>()
                / eval_set.len() as f64;
            last_eval = Some(loss);
            let rec = MetricRecord {
                step,
                split: "eval".into(),
                loss_nats: loss,
                bpb: loss / std::f64::consts::LN_2,
                grad_norm_preclip: None,
                lr,
                wall_ms: wall(&t0),
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            log.flush()?;
        }
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done != steps
        {
            save(&params, done, &format!("step_{done}.ckpt"))?;
        }
    }
    log.flush()?;
    let final_checkpoint = save(&params, steps, "final.ckpt")?;
    Ok(RunOutput {
        metrics: metrics_path,
        final_checkpoint,
        final_train_loss: last_train,
        final_eval_loss: last_eval,
    })
}

/// Training `n_max` under the length curriculum at `step`, or `None` once
/// the ramp is over (or when no curriculum is configured).
pub fn curriculum_cap(t: &TrainConfig, n_max: usize, step: usize, steps: usize) -> Option<usize> {
    if t.curriculum_start_n_max == 0 || t.curriculum_frac <= 0.0 {
        return None;
    }
    let ramp = (t.curriculum_frac * steps as f64).max(1.0);
    let f = step as f64 / ramp;
    if f >= 1.0 {
        return None;
    }
    let start = t.curriculum_start_n_max.min(n_max) as f64;
    Some((start + f * (n_max as f64 - start)).floor() as usize)
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub train_steps: usize,
    pub first_train_loss: f64,
    pub last_train_loss: f64,
    pub eval: Vec<(usize, f64)>,
    pub max_grad_norm: f64,
    /// Median pre-clip gradient norm over steps at or after `warmup`.
    pub median_grad_norm_after_warmup: f64,
}

pub fn summarize(records: &[MetricRecord], warmup: usize) -> Summary {
    let train: Vec<&MetricRecord> = records.iter().filter(|r| r.split == "train").collect();
    let norms: Vec<f64> = train.iter().filter_map(|r| r.grad_norm_preclip).collect();
    let mut post: Vec<f64> = train
        .iter()
        .filter(|r| r.step >= warmup)
        .filter_map(|r| r.grad_norm_preclip)
        .collect();
    post.sort_by(f64::total_cmp);
    let median = if post.is_empty() {
        f64::NAN
    } else if post.len() % 2 == 1 {
        post[post.len() / 2]
    } else {
        0.5 * (post[post.len() / 2 - 1] + post[post.len() / 2])
    };
    Summary {
        train_steps: train.len(),
        first_train_loss: train.first().map_or(f64::NAN, |r| r.loss_nats),
        last_train_loss: train.last().map_or(f64::NAN, |r| r.loss_nats),
        eval: records
            .iter()
            .filter(|r| r.split == "eval")
            .map(|r| (r.step, r.loss_nats))
            .collect(),
        max_grad_norm: norms.iter().copied().fold(f64::NAN, f64::max),
        median_grad_norm_after_warmup: median,
    }
}

/// Means of eval losses over consecutive windows of `window` steps.
pub fn windowed_eval_means(eval: &[(usize, f64)], window: usize) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for &(step, loss) in eval {
        let w = step / window.max(1);
        match out.last_mut() {
            Some((k, s, c)) if *k == w => {
                *s += loss;
                *c += 1;
            }
            _ => out.push((w, loss, 1)),
        }
    }
    out.into_iter().map(|(_, s, c)| s / c as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn unknown_keys_are_all_listed() {
        let doc = json!({"model": {"d_model": 32, "bogus": 1}, "train": {"nope": 2}, "extra": 3});
        match ExperimentConfig::from_value(doc, &[]) {
            Err(ConfigError::UnknownKeys(k)) => {
                assert_eq!(k.len(), 3, "{k:?}");
                assert!(k.contains(&"model.bogus".to_string()));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_bare_and_dotted() {
        let cfg = ExperimentConfig::from_value(
            json!({}),
            &[
                "memory_enabled=false".into(),
                "train.steps=7".into(),
                "seed=3".into(),
                "task.n_max=10".into(),
            ],
        )
        .unwrap();
        assert!(!cfg.model.memory_enabled);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.seed, 3);
        match cfg.task {
            TaskConfig::CopyPaste(c) => assert_eq!(c.n_max, 10),
            _ => panic!(),
        }
        match ExperimentConfig::from_value(json!({}), &["nonsense_key=1".into()]) {
            Err(ConfigError::UnknownKeys(k)) => assert_eq!(k, vec!["nonsense_key".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ExperimentConfig::from_value(json!({}), &["noequals".into()]),
            Err(ConfigError::BadOverride(_))
        ));
    }

    #[test]
    fn corpus_task_parses() {
        let cfg = ExperimentConfig::from_value(
            json!({"task": {"kind": "corpus", "path": "x.txt", "seq_len": 64}}),
            &[],
        )
        .unwrap();
        assert!(matches!(cfg.task, TaskConfig::Corpus(_)));
        assert!(ExperimentConfig::from_value(
            json!({"task": {"kind": "corpus", "path": "x", "seq_len": 8, "zzz": 1}}),
            &[]
        )
        .is_err());
    }

    #[test]
    fn summary_statistics() {
        let rec = |step, norm: f64| MetricRecord {
            step,
            split: "train".into(),
            loss_nats: 1.0,
            bpb: 1.0,
            grad_norm_preclip: Some(norm),
            lr: 0.0,
            wall_ms: None,
        };
        let recs = vec![rec(0, 10.0), rec(1, 1.0), rec(2, 3.0), rec(3, 2.0)];
        let s = summarize(&recs, 1);
        assert_eq!(s.max_grad_norm, 10.0);
        assert_eq!(s.median_grad_norm_after_warmup, 2.0);
        let t = TrainConfig {
            curriculum_start_n_max: 8,
            curriculum_frac: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(curriculum_cap(&t, 64, 0, 100), Some(8));
        assert_eq!(curriculum_cap(&t, 64, 25, 100), Some(36));
        assert_eq!(curriculum_cap(&t, 64, 50, 100), None);
        assert_eq!(curriculum_cap(&TrainConfig::default(), 64, 0, 100), None);
        assert_eq!(
            windowed_eval_means(&[(0, 4.0), (5, 2.0), (10, 1.0)], 10),
            vec![3.0, 1.0]
        );
    }
}
