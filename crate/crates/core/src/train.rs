//! Loss, sharded gradients, AdamW and the learning-rate schedule.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::model::{self, Bound, ForwardOptions, ModelConfig, Params};
use crate::tensor::{Result, Tensor, TensorError};

/// A padded batch of next-byte prediction rows, `[B, S]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u8>,
    pub targets: Vec<u8>,
    /// Supervised positions.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn supervised(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn rows(&self, lo: usize, hi: usize) -> (Vec<u8>, Vec<usize>, &[bool]) {
        let (a, b) = (lo * self.seq, hi * self.seq);
        (
            self.inputs[a..b].to_vec(),
            self.targets[a..b].iter().map(|&t| t as usize).collect(),
            &self.mask[a..b],
        )
    }
}

pub type Grads = BTreeMap<String, Tensor<f32>>;

/// Splits `batch` rows into at most `shards` contiguous, near-equal ranges.
pub fn shard_ranges(batch: usize, shards: usize) -> Vec<(usize, usize)> {
    let k = shards.clamp(1, batch.max(1));
    (0..k)
        .map(|i| (i * batch / k, (i + 1) * batch / k))
        .filter(|(a, b)| b > a)
        .collect()
}

/// Mean masked NLL (nats) and its gradient. Each shard runs on a private
/// tape; shard gradients are summed in shard order, so the result does not
/// depend on how many workers execute the shards.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    params: &Params<f32>,
    batch: &Batch,
    shards: usize,
    pool: &rayon::ThreadPool,
) -> Result<(f64, Grads)> {
    let count = batch.supervised();
    if count == 0 {
        return Err(TensorError::Invalid(
            "batch has no supervised positions".into(),
        ));
    }
    let w = 1.0 / count as f32;
    let ranges = shard_ranges(batch.batch, shards);
    let parts: Vec<Result<(f64, Grads)>> = pool.install(|| {
        ranges
            .par_iter()
            .map(|&(lo, hi)| {
                let (inputs, targets, mask) = batch.rows(lo, hi);
                let weights: Vec<f32> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
                let mut tape = Tape::new();
                let bound = Bound::new(&mut tape, params, true);
                let out = model::forward(
                    &mut tape,
                    cfg,
                    &bound,
                    &inputs,
                    hi - lo,
                    batch.seq,
                    None,
                    ForwardOptions::TRAIN,
                )?;
                let loss = tape.weighted_nll(out.logits, &targets, &weights)?;
                let mut g = tape.backward(loss)?;
                let grads = bound
                    .iter()
                    .map(|(name, &v)| {
                        (
                            name.clone(),
                            g.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))),
                        )
                    })
                    .collect();
                Ok((tape.value(loss).item() as f64, grads))
            })
            .collect()
    });
    let mut total = 0.0;
    let mut merged: Option<Grads> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        match merged.as_mut() {
            None => merged = Some(g),
            Some(m) => {
                for (k, v) in g {
                    m.get_mut(&k).expect("same parameter set").add_assign(&v)?;
                }
            }
        }
    }
    Ok((total, merged.unwrap_or_default()))
}

/// Mean masked NLL without gradients.
pub fn eval_loss(cfg: &ModelConfig, params: &Params<f32>, batch: &Batch) -> Result<f64> {
    let (logits, _, _) = model::infer(
        cfg,
        params,
        &batch.inputs,
        batch.batch,
        batch.seq,
        None,
        ForwardOptions::EVAL,
    )?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, row) in logits.data().chunks(model::VOCAB).enumerate() {
        if batch.mask[r] {
            total += nll(row, batch.targets[r] as usize);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// `-log softmax(row)[target]`, accumulated in f64.
pub fn nll(row: &[f32], target: usize) -> f64 {
    let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
    z.ln() + mx - row[target] as f64
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Per top-level module (`blocks.0`, `memory.1`, `embed`, ...) gradient norms.
pub fn module_norms(grads: &Grads) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for (name, g) in grads {
        let parts: Vec<&str> = name.splitn(3, '.').collect();
        let key = if parts.len() > 2 {
            format!("{}.{}", parts[0], parts[1])
        } else {
            parts[0].to_string()
        };
        *out.entry(key).or_default() += g.sq_norm();
    }
    out.values_mut().for_each(|v| *v = v.sqrt());
    out
}

/// Scales gradients to global norm `max_norm` if above it; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let c = (max_norm / norm) as f32;
        grads.values_mut().for_each(|g| g.scale_in_place(c));
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_frac: 0.02,
            min_lr_ratio: 0.1,
            clip: 1.0,
        }
    }
}

/// Linear warmup to `lr`, then cosine decay to `lr * min_lr_ratio` at `total`.
pub fn learning_rate(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let warmup = (cfg.warmup_frac * total as f64).ceil() as usize;
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = cfg.lr * cfg.min_lr_ratio;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Weight decay applies to matrices other than the embedding and anchors.
fn decays(name: &str, t: &Tensor<f32>) -> bool {
    t.ndim() == 2 && name != "embed"
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut Params<f32>, grads: &Grads, lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.tensors.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::Invalid(format!("no gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let wd = if decays(name, p) {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi as f64;
                *mi = (b1 * *mi as f64 + (1.0 - b1) * gi) as f32;
                *vi = (b2 * *vi as f64 + (1.0 - b2) * gi * gi) as f32;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                let delta = lr * (mhat / (vhat.sqrt() + self.cfg.eps) + wd * *x as f64);
                *x -= delta as f32;
            }
        }
        Ok(())
    }
}

pub struct StepResult {
    pub loss: f64,
    pub grad_norm_preclip: f64,
}

/// Forward, backward, clipping and one optimiser update. A non-finite loss
/// or gradient aborts with the per-module gradient norms.
pub fn train_step(
    cfg: &ModelConfig,
    params: &mut Params<f32>,
    opt: &mut AdamW,
    batch: &Batch,
    lr: f64,
    shards: usize,
    pool: &rayon::ThreadPool,
) -> Result<StepResult> {
    let (loss, mut grads) = loss_and_grads(cfg, params, batch, shards, pool)?;
    let norm = clip_global_norm(&mut grads, opt.cfg.clip);
    if !loss.is_finite() || !norm.is_finite() {
        let dump = module_norms(&grads)
            .iter()
            .map(|(k, v)| format!("{k}={v:.4e}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(TensorError::Invalid(format!(
            "non-finite training step (loss {loss}, grad norm {norm}); module grad norms: {dump}"
        )));
    }
    opt.update(params, &grads, lr)?;
    Ok(StepResult {
        loss,
        grad_norm_preclip: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            window: 4,
            d_mem: 4,
            n_heads: 2,
            ffn_mult: 2,
            ..ModelConfig::default()
        }
    }

    fn toy_batch() -> Batch {
        let inputs: Vec<u8> = b"ABCDABCDABCDABCD".to_vec();
        let targets: Vec<u8> = b"BCDABCDABCDABCDA".to_vec();
        let mask = (0..16).map(|i| i % 8 >= 2).collect();
        Batch {
            inputs,
            targets,
            mask,
            batch: 2,
            seq: 8,
        }
    }

    fn pool(n: usize) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
    }

    #[test]
    fn shards_cover_rows() {
        assert_eq!(shard_ranges(5, 2), vec![(0, 2), (2, 5)]);
        assert_eq!(shard_ranges(2, 4), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn schedule_shape() {
        let o = OptimConfig {
            lr: 1.0,
            warmup_frac: 0.1,
            min_lr_ratio: 0.0,
            ..OptimConfig::default()
        };
        assert!((learning_rate(&o, 0, 100) - 0.1).abs() < 1e-12);
        assert!((learning_rate(&o, 9, 100) - 1.0).abs() < 1e-12);
        assert!(learning_rate(&o, 55, 100) < 0.6);
        assert!(learning_rate(&o, 100, 100).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params_bit_exact() {
        let c = cfg();
        let mut p = Params::init(&c, 1).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(OptimConfig::default());
        train_step(&c, &mut p, &mut opt, &toy_batch(), 0.0, 1, &pool(1)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_reduces_overfit_loss() {
        let c = cfg();
        let mut p = Params::init(&c, 1).unwrap();
        let b = toy_batch();
        let before = eval_loss(&c, &p, &b).unwrap();
        let mut opt = AdamW::new(OptimConfig::default());
        train_step(&c, &mut p, &mut opt, &b, 1e-2, 1, &pool(1)).unwrap();
        assert!(eval_loss(&c, &p, &b).unwrap() < before);
    }

    #[test]
    fn sharded_gradients_independent_of_workers() {
        let c = cfg();
        let p = Params::init(&c, 2).unwrap();
        let b = toy_batch();
        let (l1, g1) = loss_and_grads(&c, &p, &b, 2, &pool(1)).unwrap();
        let (l4, g4) = loss_and_grads(&c, &p, &b, 2, &pool(4)).unwrap();
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(g1, g4);
        let (l_single, _) = loss_and_grads(&c, &p, &b, 1, &pool(1)).unwrap();
        assert!((l_single - l1).abs() < 1e-5);
    }

    #[test]
    fn labels_outside_mask_do_not_matter() {
        let c = cfg();
        let p = Params::init(&c, 3).unwrap();
        let b = toy_batch();
        let mut other = b.clone();
        for (t, &m) in other.targets.iter_mut().zip(&b.mask) {
            if !m {
                *t = b'Z';
            }
        }
        let (la, ga) = loss_and_grads(&c, &p, &b, 1, &pool(1)).unwrap();
        let (lb, gb) = loss_and_grads(&c, &p, &other, 1, &pool(1)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }
}
