//! Copy-paste accuracy, bucketed bits-per-byte and ablations.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::model::{self, ForwardOptions, ModelConfig, Params, VOCAB};
use crate::rng;
use crate::task::{self, CopyPasteConfig};
use crate::tensor::{Result, TensorError};
use crate::train::nll;

/// Inference-time ablations; all flags compose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub disable_memory_updates: bool,
    pub zero_all_embeddings: bool,
    pub zero_root_embeddings: bool,
    pub zero_leaf_embeddings: bool,
    pub disable_recurrence_eval: bool,
}

impl AblationSpec {
    pub const NONE: AblationSpec = AblationSpec {
        disable_memory_updates: false,
        zero_all_embeddings: false,
        zero_root_embeddings: false,
        zero_leaf_embeddings: false,
        disable_recurrence_eval: false,
    };

    /// Parses a comma-separated list of modes: `none`, `disable_updates`,
    /// `zero_all`, `zero_root`, `zero_leaf`, `disable_recurrence`.
    pub fn parse(modes: &str) -> Result<Self> {
        let mut s = AblationSpec::default();
        for m in modes.split(',').map(str::trim).filter(|m| !m.is_empty()) {
            match m {
                "none" => {}
                "disable_updates" | "disable_memory_updates" => s.disable_memory_updates = true,
                "zero_all" | "zero_all_embeddings" => s.zero_all_embeddings = true,
                "zero_root" | "zero_root_embeddings" => s.zero_root_embeddings = true,
                "zero_leaf" | "zero_leaf_embeddings" => s.zero_leaf_embeddings = true,
                "disable_recurrence" | "disable_recurrence_eval" => s.disable_recurrence_eval = true,
                other => {
                    return Err(TensorError::Invalid(format!(
                        "unknown ablation `{other}` (none, disable_updates, zero_all, zero_root, zero_leaf, disable_recurrence)"
                    )))
                }
            }
        }
        Ok(s)
    }

    pub fn is_none(&self) -> bool {
        *self == AblationSpec::NONE
    }

    /// Copy of `params` with the selected anchor embeddings zeroed.
    pub fn apply(&self, cfg: &ModelConfig, params: &Params<f32>) -> Params<f32> {
        let mut p = params.clone();
        if !cfg.memory_enabled {
            return p;
        }
        let depth = cfg.depth();
        for level in 1..=depth {
            let hit = self.zero_all_embeddings
                || (self.zero_root_embeddings && level == 1)
                || (self.zero_leaf_embeddings && level == depth);
            if hit {
                if let Some(t) = p.tensors.get_mut(&format!("memory.{level}.anchors")) {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        p
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            training: false,
            memory_updates: !self.disable_memory_updates,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub n: usize,
    pub accuracy: f64,
    pub positions: usize,
}

/// Teacher-forced greedy accuracy on target bytes: at every target position
/// the prediction is the argmax over the task alphabet (lowest byte on
/// ties) given the true prefix. `trials` instances per `N`, evaluated in
/// recurrent chunks of `chunk` positions.
#[allow(clippy::too_many_arguments)]
pub fn exact_accuracy(
    cfg: &ModelConfig,
    params: &Params<f32>,
    task_cfg: &CopyPasteConfig,
    n_values: &[usize],
    trials: usize,
    ablation: &AblationSpec,
    seed: u64,
    batch: usize,
    chunk: usize,
) -> Result<Vec<AccuracyRow>> {
    let p = ablation.apply(cfg, params);
    let mut alphabet = task_cfg.alphabet_bytes();
    alphabet.sort_unstable();
    let mut rows = Vec::new();
    for &n in n_values {
        let cp = CopyPasteConfig {
            n_min: n,
            n_max: n,
            ..task_cfg.clone()
        };
        cp.validate(cfg.max_seq_len)?;
        let mut r = rng::stream(seed, &format!("eval-copy/{n}"));
        let (mut hits, mut total) = (0usize, 0usize);
        let mut done = 0;
        while done < trials {
            let k = batch.max(1).min(trials - done);
            let inst: Vec<_> = (0..k)
                .map(|_| task::sample_instance(&mut r, &cp, n))
                .collect();
            let b = task::to_batch(&inst, cp.pad);
            let logits = model::infer_chunked(
                cfg,
                &p,
                &b.inputs,
                b.batch,
                b.seq,
                chunk,
                ablation.forward_options(),
                ablation.disable_recurrence_eval,
            )?;
            for (row, l) in logits.data().chunks(VOCAB).enumerate() {
                if !b.mask[row] {
                    continue;
                }
                let best = alphabet
                    .iter()
                    .copied()
                    .fold((alphabet[0], f32::NEG_INFINITY), |acc, c| {
                        if l[c as usize] > acc.1 {
                            (c, l[c as usize])
                        } else {
                            acc
                        }
                    })
                    .0;
                hits += (best == b.targets[row]) as usize;
                total += 1;
            }
            done += k;
        }
        rows.push(AccuracyRow {
            n,
            accuracy: hits as f64 / total.max(1) as f64,
            positions: total,
        });
    }
    Ok(rows)
}

/// Bits for predicting `bytes[t + 1]` from `bytes[..=t]`, evaluated in
/// recurrent chunks of `chunk` positions.
pub fn position_bits(
    cfg: &ModelConfig,
    params: &Params<f32>,
    bytes: &[u8],
    chunk: usize,
    ablation: &AblationSpec,
) -> Result<Vec<f64>> {
    if bytes.len() < 2 {
        return Ok(Vec::new());
    }
    let p = ablation.apply(cfg, params);
    let seq = bytes.len() - 1;
    let logits = model::infer_chunked(
        cfg,
        &p,
        &bytes[..seq],
        1,
        seq,
        chunk,
        ablation.forward_options(),
        ablation.disable_recurrence_eval,
    )?;
    Ok(logits
        .data()
        .chunks(VOCAB)
        .zip(&bytes[1..])
        .map(|(l, &t)| nll(l, t as usize) / LN_2)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    /// Positions `[lo, hi)` within the context.
    pub lo: usize,
    pub hi: usize,
    pub bpb: f64,
    pub count: usize,
}

/// Power-of-two bucket index of a position: `[0,1), [1,2), [2,4), ...`.
pub fn bucket_of(pos: usize) -> usize {
    if pos == 0 {
        0
    } else {
        (usize::BITS - pos.leading_zeros()) as usize
    }
}

/// Mean bits per byte per position bucket over windows of `context`
/// predictions taken every `stride` bytes of `corpus`.
pub fn bpb_eval(
    cfg: &ModelConfig,
    params: &Params<f32>,
    corpus: &[u8],
    context: usize,
    stride: usize,
    chunk: usize,
    ablation: &AblationSpec,
) -> Result<Vec<BucketRow>> {
    if corpus.len() < 2 {
        return Err(TensorError::Invalid("empty corpus".into()));
    }
    if context == 0 || stride == 0 {
        return Err(TensorError::Invalid(
            "context and stride must be positive".into(),
        ));
    }
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + context + 1).min(corpus.len());
        let bits = position_bits(cfg, params, &corpus[start..end], chunk, ablation)?;
        for (pos, b) in bits.into_iter().enumerate() {
            let k = bucket_of(pos);
            if sums.len() <= k {
                sums.resize(k + 1, (0.0, 0));
            }
            sums[k].0 += b;
            sums[k].1 += 1;
        }
        if end == corpus.len() || start + stride + 1 >= corpus.len() {
            break;
        }
        start += stride;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, (_, c))| *c > 0)
        .map(|(k, (s, c))| BucketRow {
            lo: if k == 0 { 0 } else { 1 << (k - 1) },
            hi: 1 << k,
            bpb: s / c as f64,
            count: c,
        })
        .collect())
}

/// Running sum over positions of `bits_ablated - bits_full`, documents
/// concatenated in order (each document starts from a fresh memory).
pub fn cumulative_delta_bpb(
    cfg: &ModelConfig,
    params: &Params<f32>,
    ablation: &AblationSpec,
    docs: &[Vec<u8>],
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut curve = Vec::new();
    let mut acc = 0.0;
    for doc in docs {
        let full = position_bits(cfg, params, doc, chunk, &AblationSpec::NONE)?;
        let abl = if ablation.is_none() {
            full.clone()
        } else {
            position_bits(cfg, params, doc, chunk, ablation)?
        };
        for (f, a) in full.iter().zip(&abl) {
            acc += a - f;
            curve.push(acc);
        }
    }
    Ok(curve)
}
