//! Byte-level backbone: embedding, pre-norm blocks of sliding-window attention
//! and feed-forward, a phasor memory layer after every `P`-th block, and a
//! 256-way logits head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::phasor::{self, MemoryLayerVars, RoutingTrace, StepOptions, TreeShape};
use crate::rng::{self, Rng};
use crate::tensor::{Float, Result, Tensor, TensorError};

pub const VOCAB: usize = 256;
const NORM_EPS: f64 = 1e-6;

/// Which memory state the routing keys of a chunk are formed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKeys {
    /// The state at the start of the whole sequence (the training convention).
    SequenceStart,
    /// The state at the start of the current chunk.
    ChunkStart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of blocks `L`.
    pub n_layers: usize,
    /// Memory period `P`; hierarchy depth is `L / P`.
    pub period: usize,
    pub d_model: usize,
    /// Sliding window `w`, including the current position.
    pub window: usize,
    pub d_mem: usize,
    pub n_slots: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub memory_enabled: bool,
    pub share_route_read_weights: bool,
    pub normalize_value_path: bool,
    pub rope: bool,
    pub rope_base: f64,
    pub routing_keys: RoutingKeys,
    pub init_std: f64,
    pub anchor_std: f64,
    /// Longest sequence a single forward accepts.
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            period: 2,
            d_model: 128,
            window: 16,
            d_mem: 32,
            n_slots: 4,
            n_heads: 4,
            ffn_mult: 4,
            memory_enabled: true,
            share_route_read_weights: false,
            normalize_value_path: false,
            rope: true,
            rope_base: 10_000.0,
            routing_keys: RoutingKeys::SequenceStart,
            init_std: 0.02,
            anchor_std: 0.02,
            max_seq_len: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Invalid(m));
        if self.n_layers == 0 || self.period == 0 || !self.n_layers.is_multiple_of(self.period) {
            return bad(format!(
                "n_layers ({}) must be a positive multiple of period ({})",
                self.n_layers, self.period
            ));
        }
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.rope && !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad("rope needs an even head dimension".into());
        }
        if self.d_mem == 0 || self.n_slots == 0 || self.ffn_mult == 0 || self.max_seq_len == 0 {
            return bad("d_mem, n_slots, ffn_mult and max_seq_len must be positive".into());
        }
        Ok(())
    }

    /// Hierarchy depth `H = L / P`.
    pub fn depth(&self) -> usize {
        self.n_layers / self.period
    }

    pub fn tree_shape(&self) -> Result<TreeShape> {
        TreeShape::new(self.n_slots, self.depth(), self.d_mem)
    }

    /// `L * w`.
    pub fn receptive_field(&self) -> usize {
        self.n_layers * self.window
    }

    /// 1-based memory level attached to block `i`, if any.
    pub fn memory_level(&self, block: usize) -> Option<usize> {
        (self.memory_enabled && (block + 1).is_multiple_of(self.period))
            .then_some((block + 1) / self.period)
    }

    /// Name and shape of every learnable tensor, in a stable order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, dm, n) = (self.d_model, self.d_mem, self.n_slots);
        let f = d * self.ffn_mult;
        let mut out = vec![("embed".to_string(), vec![VOCAB, d])];
        for i in 0..self.n_layers {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.attn_norm"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            if let Some(h) = self.memory_level(i) {
                let m = format!("memory.{h}");
                out.push((format!("{m}.pre_norm"), vec![d]));
                out.push((format!("{m}.norm_gain"), vec![d]));
                out.push((format!("{m}.w_q_route"), vec![d, dm]));
                out.push((format!("{m}.w_k_route"), vec![2 * dm, dm]));
                out.push((format!("{m}.w_v"), vec![d, dm]));
                out.push((format!("{m}.w_out"), vec![dm, dm]));
                if !self.share_route_read_weights {
                    out.push((format!("{m}.w_q_read"), vec![d, dm]));
                }
                out.push((format!("{m}.w_kv"), vec![2 * dm, 2 * dm]));
                out.push((format!("{m}.w_o"), vec![dm, d]));
                out.push((format!("{m}.anchors"), vec![n.pow(h as u32 - 1), n, dm]));
            }
            out.push((format!("{p}.ffn_norm"), vec![d]));
            out.push((format!("{p}.ffn.w1"), vec![d, f]));
            out.push((format!("{p}.ffn.w2"), vec![f, d]));
        }
        out.push(("final_norm".into(), vec![d]));
        out.push(("head".into(), vec![d, VOCAB]));
        out
    }
}

/// Named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F: Float> {
    pub tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> Params<F> {
    /// Initialisation from `seed`'s `init` stream. Every tensor draws from
    /// its own named sub-stream, so toggling memory leaves the backbone
    /// initialisation unchanged.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let residual_std = cfg.init_std / (2.0 * cfg.n_layers as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let mut r: Rng = rng::stream(seed, &format!("init/{name}"));
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let t = if leaf.ends_with("norm") || leaf == "norm_gain" {
                Tensor::ones(&shape)
            } else if leaf == "anchors" {
                rng::normal_tensor(&mut r, &shape, cfg.anchor_std)
            } else if name.starts_with("memory.") && leaf != "w_o" {
                // phase projections: unit-scale pre-activations
                rng::normal_tensor(&mut r, &shape, 1.0 / (shape[0] as f64).sqrt())
            } else if matches!(leaf, "wo" | "w2" | "w_o") {
                rng::normal_tensor(&mut r, &shape, residual_std)
            } else {
                rng::normal_tensor(&mut r, &shape, cfg.init_std)
            };
            tensors.insert(name, t);
        }
        Ok(Params { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Errors naming every tensor whose presence or shape differs from `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let mut problems = Vec::new();
        let expected = cfg.param_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => problems.push(format!("{name}: missing, expected {shape:?}")),
                Some(t) if t.shape() != shape.as_slice() => problems.push(format!(
                    "{name}: checkpoint {:?} vs config {shape:?}",
                    t.shape()
                )),
                _ => {}
            }
        }
        for name in self.tensors.keys() {
            if !expected.iter().any(|(n, _)| n == name) {
                problems.push(format!("{name}: not part of the configured model"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TensorError::Invalid(format!(
                "parameter mismatch: {}",
                problems.join("; ")
            )))
        }
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Parameters registered on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every tensor, as trainable leaves or as constants.
    pub fn new<F: Float>(tape: &mut Tape<F>, params: &Params<F>, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn memory(&self, level: usize, shared: bool) -> Result<MemoryLayerVars> {
        let m = |s: &str| self.get(&format!("memory.{level}.{s}"));
        let w_q_route = m("w_q_route")?;
        Ok(MemoryLayerVars {
            norm_gain: m("norm_gain")?,
            w_q_route,
            w_k_route: m("w_k_route")?,
            w_v: m("w_v")?,
            w_out: m("w_out")?,
            w_q_read: if shared { w_q_route } else { m("w_q_read")? },
            w_kv: m("w_kv")?,
            w_o: m("w_o")?,
            anchors: m("anchors")?,
        })
    }
}

/// State threaded between chunks in recurrent mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<F: Float> {
    /// Absolute position of the next token.
    pub position: usize,
    /// Per block: the last `w - 1` rotated keys and values, `[B, c, d]`.
    pub keys: Vec<Tensor<F>>,
    pub values: Vec<Tensor<F>>,
    /// Per level: phase states `[B, G_h, N_m, d_m]`.
    pub memory: Vec<Tensor<F>>,
    /// Per level: state the routing keys are formed from.
    pub routing: Vec<Tensor<F>>,
}

impl<F: Float> RecurrentState<F> {
    /// Start-of-sequence state: empty caches and zero phases.
    pub fn new(cfg: &ModelConfig, batch: usize) -> Self {
        let d = cfg.d_model;
        let memory: Vec<Tensor<F>> = if cfg.memory_enabled {
            (1..=cfg.depth())
                .map(|h| {
                    Tensor::zeros(&[batch, cfg.n_slots.pow(h as u32 - 1), cfg.n_slots, cfg.d_mem])
                })
                .collect()
        } else {
            Vec::new()
        };
        RecurrentState {
            position: 0,
            keys: vec![Tensor::zeros(&[batch, 0, d]); cfg.n_layers],
            values: vec![Tensor::zeros(&[batch, 0, d]); cfg.n_layers],
            routing: memory.clone(),
            memory,
        }
    }

    /// Zeroes the memory phases, keeping attention caches and position.
    pub fn reset_memory(&mut self) {
        for m in self.memory.iter_mut().chain(self.routing.iter_mut()) {
            m.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Enables segment-aware gradient scaling.
    pub training: bool,
    pub memory_updates: bool,
}

impl ForwardOptions {
    pub const TRAIN: ForwardOptions = ForwardOptions {
        training: true,
        memory_updates: true,
    };
    pub const EVAL: ForwardOptions = ForwardOptions {
        training: false,
        memory_updates: true,
    };
}

pub struct ForwardOutput<F: Float> {
    /// `[B, S, 256]`
    pub logits: Var,
    pub state: RecurrentState<F>,
    pub trace: RoutingTrace,
}

fn keep_tail<F: Float>(t: &Tensor<F>, keep: usize) -> Tensor<F> {
    let s = t.shape();
    let (b, len, d) = (s[0], s[1], s[2]);
    let k = keep.min(len);
    let mut out = Vec::with_capacity(b * k * d);
    for bi in 0..b {
        out.extend_from_slice(&t.data()[(bi * len + len - k) * d..(bi * len + len) * d]);
    }
    Tensor::new(&[b, k, d], out).expect("tail shape")
}

/// Forward over `tokens` (`[B, S]` row-major). `state = None` starts a fresh
/// sequence (zero memory, empty caches), the training-mode convention;
/// passing the returned state continues the sequence in recurrent mode.
#[allow(clippy::too_many_arguments)]
pub fn forward<F: Float>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    p: &Bound,
    tokens: &[u8],
    batch: usize,
    seq: usize,
    state: Option<&RecurrentState<F>>,
    opts: ForwardOptions,
) -> Result<ForwardOutput<F>> {
    if tokens.len() != batch * seq {
        return Err(TensorError::Invalid(format!(
            "{} tokens for a [{batch}, {seq}] batch",
            tokens.len()
        )));
    }
    if seq > cfg.max_seq_len {
        return Err(TensorError::Invalid(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let fresh;
    let state = match state {
        Some(s) => s,
        None => {
            fresh = RecurrentState::new(cfg, batch);
            &fresh
        }
    };
    let d = cfg.d_model;
    let t = batch * seq;
    let mut next = RecurrentState {
        position: state.position + seq,
        ..state.clone()
    };
    let mut trace = RoutingTrace::new(cfg.n_slots);

    let ids: Vec<usize> = tokens.iter().map(|&b| b as usize).collect();
    let emb = tape.gather_rows(p.get("embed")?, &ids)?;
    let mut x = tape.reshape(emb, &[batch, seq, d])?;

    for i in 0..cfg.n_layers {
        let b = |s: &str| p.get(&format!("blocks.{i}.{s}"));
        let h = tape.rmsnorm(x, b("attn_norm")?, NORM_EPS)?;
        let mut q = tape.matmul(h, b("attn.wq")?)?;
        let mut k = tape.matmul(h, b("attn.wk")?)?;
        let v = tape.matmul(h, b("attn.wv")?)?;
        if cfg.rope {
            q = tape.rope(q, cfg.n_heads, state.position, cfg.rope_base)?;
            k = tape.rope(k, cfg.n_heads, state.position, cfg.rope_base)?;
        }
        let (k, v) = if state.keys[i].shape()[1] > 0 {
            let ck = tape.constant(state.keys[i].clone());
            let cv = tape.constant(state.values[i].clone());
            (tape.concat(&[ck, k], 1)?, tape.concat(&[cv, v], 1)?)
        } else {
            (k, v)
        };
        next.keys[i] = keep_tail(tape.value(k), cfg.window - 1);
        next.values[i] = keep_tail(tape.value(v), cfg.window - 1);
        let a = tape.window_attention(q, k, v, cfg.n_heads, cfg.window)?;
        let a = tape.matmul(a, b("attn.wo")?)?;
        x = tape.add(x, a)?;

        if let Some(level) = cfg.memory_level(i) {
            let vars = p.memory(level, cfg.share_route_read_weights)?;
            let hm = tape.rmsnorm(x, p.get(&format!("memory.{level}.pre_norm"))?, NORM_EPS)?;
            let groups = trace.current_groups(t);
            let init = tape.constant(state.memory[level - 1].clone());
            let route_state = match cfg.routing_keys {
                RoutingKeys::SequenceStart => tape.constant(state.routing[level - 1].clone()),
                RoutingKeys::ChunkStart => init,
            };
            let step_opts = StepOptions {
                training: opts.training,
                updates_enabled: opts.memory_updates,
                normalize_value_path: cfg.normalize_value_path,
            };
            let out = phasor::memory_layer_step(
                tape,
                hm,
                level,
                &vars,
                &groups,
                init,
                route_state,
                step_opts,
            )?;
            next.memory[level - 1] = tape.value(out.final_state).clone();
            trace.levels.push(out.trace);
            x = tape.add(x, out.read_out)?;
        }

        let h = tape.rmsnorm(x, b("ffn_norm")?, NORM_EPS)?;
        let u = tape.matmul(h, b("ffn.w1")?)?;
        let u = tape.gelu(u);
        let u = tape.matmul(u, b("ffn.w2")?)?;
        x = tape.add(x, u)?;
    }
    let h = tape.rmsnorm(x, p.get("final_norm")?, NORM_EPS)?;
    let logits = tape.matmul(h, p.get("head")?)?;
    Ok(ForwardOutput {
        logits,
        state: next,
        trace,
    })
}

/// Logits of a constant-parameter forward, `[B, S, 256]`.
pub fn infer<F: Float>(
    cfg: &ModelConfig,
    params: &Params<F>,
    tokens: &[u8],
    batch: usize,
    seq: usize,
    state: Option<&RecurrentState<F>>,
    opts: ForwardOptions,
) -> Result<(Tensor<F>, RecurrentState<F>, RoutingTrace)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let out = forward(&mut tape, cfg, &bound, tokens, batch, seq, state, opts)?;
    Ok((tape.value(out.logits).clone(), out.state, out.trace))
}

/// Recurrent forward over `[B, S]` tokens in chunks of `chunk` positions.
/// With `reset_memory`, memory phases are cleared before every chunk.
#[allow(clippy::too_many_arguments)]
pub fn infer_chunked<F: Float>(
    cfg: &ModelConfig,
    params: &Params<F>,
    tokens: &[u8],
    batch: usize,
    seq: usize,
    chunk: usize,
    opts: ForwardOptions,
    reset_memory: bool,
) -> Result<Tensor<F>> {
    if chunk == 0 {
        return Err(TensorError::Invalid("chunk length must be positive".into()));
    }
    let mut state = RecurrentState::new(cfg, batch);
    let mut logits = vec![F::zero(); batch * seq * VOCAB];
    let mut start = 0;
    while start < seq {
        let len = chunk.min(seq - start);
        let mut part = Vec::with_capacity(batch * len);
        for b in 0..batch {
            part.extend_from_slice(&tokens[b * seq + start..b * seq + start + len]);
        }
        if reset_memory {
            state.reset_memory();
        }
        let (l, s, _) = infer(cfg, params, &part, batch, len, Some(&state), opts)?;
        for b in 0..batch {
            let dst = (b * seq + start) * VOCAB;
            logits[dst..dst + len * VOCAB]
                .copy_from_slice(&l.data()[b * len * VOCAB..(b + 1) * len * VOCAB]);
        }
        state = s;
        start += len;
    }
    Tensor::new(&[batch, seq, VOCAB], logits)
}
