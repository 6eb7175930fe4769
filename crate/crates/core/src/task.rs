//! Copy-paste task and byte-corpus batching.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{Result, TensorError};
use crate::train::Batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopyPasteConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Source bytes are drawn uniformly from this string.
    pub alphabet: String,
    pub delimiter: u8,
    /// Padding byte; never supervised.
    pub pad: u8,
}

impl Default for CopyPasteConfig {
    fn default() -> Self {
        CopyPasteConfig {
            n_min: 2,
            n_max: 64,
            alphabet: ('A'..='Z').collect(),
            delimiter: b'|',
            pad: 0,
        }
    }
}

impl CopyPasteConfig {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let bad = |m: String| Err(TensorError::Invalid(m));
        if self.n_min < 1 || self.n_max < self.n_min {
            return bad(format!(
                "copy-paste needs 1 <= n_min <= n_max, got {}..{}",
                self.n_min, self.n_max
            ));
        }
        if self.alphabet.is_empty() {
            return bad("empty alphabet".into());
        }
        if self
            .alphabet
            .bytes()
            .any(|b| b == self.delimiter || b == self.pad)
        {
            return bad("alphabet contains the delimiter or pad byte".into());
        }
        if self.delimiter == self.pad {
            return bad("delimiter and pad must differ".into());
        }
        if 2 * self.n_max + 1 > max_len {
            return bad(format!(
                "n_max {} needs {} bytes, beyond the model context of {max_len}",
                self.n_max,
                2 * self.n_max + 1
            ));
        }
        Ok(())
    }

    pub fn alphabet_bytes(&self) -> Vec<u8> {
        self.alphabet.bytes().collect()
    }
}

/// `[source, delimiter, source]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyPasteInstance {
    pub source: Vec<u8>,
    pub delimiter: u8,
}

impl CopyPasteInstance {
    pub fn n(&self) -> usize {
        self.source.len()
    }

    pub fn bytes(&self) -> Vec<u8> {
        let mut v = self.source.clone();
        v.push(self.delimiter);
        v.extend_from_slice(&self.source);
        v
    }
}

/// One instance with a source of exactly `n` bytes.
pub fn sample_instance(rng: &mut Rng, cfg: &CopyPasteConfig, n: usize) -> CopyPasteInstance {
    let alphabet = cfg.alphabet_bytes();
    let source = (0..n)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect();
    CopyPasteInstance {
        source,
        delimiter: cfg.delimiter,
    }
}

/// `batch` instances with `N` uniform on `[n_min, n_max]`.
pub fn gen_copy_paste(
    rng: &mut Rng,
    cfg: &CopyPasteConfig,
    batch: usize,
    max_len: usize,
) -> Result<Vec<CopyPasteInstance>> {
    cfg.validate(max_len)?;
    Ok((0..batch)
        .map(|_| {
            let n = rng.random_range(cfg.n_min..=cfg.n_max);
            sample_instance(rng, cfg, n)
        })
        .collect())
}

/// Next-byte rows padded to the longest instance; only target bytes (the
/// copy after the delimiter) are supervised.
pub fn to_batch(instances: &[CopyPasteInstance], pad: u8) -> Batch {
    let seq = instances.iter().map(|i| 2 * i.n()).max().unwrap_or(0);
    let b = instances.len();
    let mut inputs = vec![pad; b * seq];
    let mut targets = vec![pad; b * seq];
    let mut mask = vec![false; b * seq];
    for (r, inst) in instances.iter().enumerate() {
        let bytes = inst.bytes();
        let n = inst.n();
        for p in 0..bytes.len() - 1 {
            inputs[r * seq + p] = bytes[p];
            targets[r * seq + p] = bytes[p + 1];
            mask[r * seq + p] = p >= n;
        }
    }
    Batch {
        inputs,
        targets,
        mask,
        batch: b,
        seq,
    }
}

/// Random windows of `seq + 1` bytes from `corpus`, every position supervised.
pub fn corpus_batch(rng: &mut Rng, corpus: &[u8], batch: usize, seq: usize) -> Result<Batch> {
    if corpus.len() < seq + 1 {
        return Err(TensorError::Invalid(format!(
            "corpus of {} bytes is shorter than one training window ({})",
            corpus.len(),
            seq + 1
        )));
    }
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let start = rng.random_range(0..=corpus.len() - seq - 1);
        inputs.extend_from_slice(&corpus[start..start + seq]);
        targets.extend_from_slice(&corpus[start + 1..start + seq + 1]);
    }
    Ok(Batch {
        inputs,
        targets,
        mask: vec![true; batch * seq],
        batch,
        seq,
    })
}
