//! Hierarchical phasor memory.
//!
//! Memory is an `N_m`-ary tree of groups. Level `h` (1-based) holds
//! `N_m^(h-1)` groups, each with `N_m` phase vectors of `d_m` angles and a
//! learnable anchor of the same shape. A token visits exactly one group per
//! level: it reads from the group, writes a rank-one phase update into it,
//! and its top-1 routing slot selects the child group at the next level.
//!
//! Phases live in `[0, 2pi)`. Updates are additive modulo `2pi`, i.e. a
//! rotation `z <- z * exp(i dM)`, so the Jacobian of the state with respect
//! to any earlier update is the identity.

use std::f64::consts::PI;

use crate::autodiff::{argmax_rows, Tape, Var};
use crate::scan;
use crate::tensor::{Float, Result, Tensor, TensorError};

/// Branching, depth and phase width of a memory tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeShape {
    pub n_slots: usize,
    pub depth: usize,
    pub phase_dim: usize,
}

impl TreeShape {
    pub fn new(n_slots: usize, depth: usize, phase_dim: usize) -> Result<Self> {
        if n_slots == 0 || depth == 0 || phase_dim == 0 {
            return Err(TensorError::Invalid(format!(
                "memory tree needs positive branching/depth/phase dim, got {n_slots}/{depth}/{phase_dim}"
            )));
        }
        Ok(TreeShape {
            n_slots,
            depth,
            phase_dim,
        })
    }

    /// Groups at 1-based `level`.
    pub fn groups_at(&self, level: usize) -> usize {
        self.n_slots.pow(level as u32 - 1)
    }

    /// Total number of groups over all levels.
    pub fn total_groups(&self) -> usize {
        (1..=self.depth).map(|h| self.groups_at(h)).sum()
    }

    /// Addressable leaf capacity `N_m^H`.
    pub fn capacity(&self) -> usize {
        self.n_slots.pow(self.depth as u32)
    }
}

/// A memory tree: per-level anchors `[G_h, N_m, d_m]` and per-level phase
/// states `[B, G_h, N_m, d_m]` for a batch of independent sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasorMemoryTree<F: Float> {
    pub shape: TreeShape,
    pub anchors: Vec<Tensor<F>>,
    pub states: Vec<Tensor<F>>,
}

impl<F: Float> PhasorMemoryTree<F> {
    /// Zero phases, zero anchors.
    pub fn zeros(shape: TreeShape, batch: usize) -> Self {
        let per = |h: usize| [shape.groups_at(h), shape.n_slots, shape.phase_dim];
        PhasorMemoryTree {
            shape,
            anchors: (1..=shape.depth).map(|h| Tensor::zeros(&per(h))).collect(),
            states: (1..=shape.depth)
                .map(|h| {
                    let p = per(h);
                    Tensor::zeros(&[batch, p[0], p[1], p[2]])
                })
                .collect(),
        }
    }

    /// Anchors drawn from `N(0, std^2)`, phases zero.
    pub fn init(shape: TreeShape, batch: usize, rng: &mut crate::rng::Rng, std: f64) -> Self {
        let mut tree = Self::zeros(shape, batch);
        for a in &mut tree.anchors {
            *a = crate::rng::normal_tensor(rng, a.shape(), std);
        }
        tree
    }

    pub fn group_count(&self) -> usize {
        self.anchors.iter().map(|a| a.shape()[0]).sum()
    }
}

/// Index of the child of group `group` at 1-based `level` reached via `slot`.
pub fn child_group(group: usize, slot: usize, n_slots: usize, level: usize) -> Result<usize> {
    if level == 0 {
        return Err(TensorError::Invalid("levels are 1-based".into()));
    }
    let extent = n_slots.pow(level as u32 - 1);
    if group >= extent {
        return Err(TensorError::IndexOutOfRange {
            op: "child_group",
            index: group,
            extent,
        });
    }
    if slot >= n_slots {
        return Err(TensorError::IndexOutOfRange {
            op: "child_group",
            index: slot,
            extent: n_slots,
        });
    }
    Ok(group * n_slots + slot)
}

fn pi<F: Float>() -> F {
    F::of(PI)
}

/// `pi * tanh(x)`.
fn phase_squash<F: Float>(tape: &mut Tape<F>, x: Var) -> Var {
    let t = tape.tanh(x);
    tape.scale(t, pi())
}

/// Query phase `pi * tanh(W_q * rmsnorm(h))` for rows `h: [T, d]` -> `[T, d_m]`.
pub fn query_phase<F: Float>(tape: &mut Tape<F>, h: Var, gain: Var, w_q: Var) -> Result<Var> {
    let n = tape.rmsnorm(h, gain, 1e-6)?;
    let p = tape.matmul(n, w_q)?;
    Ok(phase_squash(tape, p))
}

/// `[sin(theta), cos(theta)]` along the last axis.
pub fn geom_project<F: Float>(tape: &mut Tape<F>, theta: Var) -> Result<Var> {
    let axis = tape.shape(theta).len() - 1;
    let s = tape.sin(theta);
    let c = tape.cos(theta);
    tape.concat(&[s, c], axis)
}

/// Routing key phases `pi * tanh(W_k * Phi(M + E))`, shape of `state`.
pub fn key_phases<F: Float>(tape: &mut Tape<F>, state: Var, anchors: Var, w_k: Var) -> Result<Var> {
    let m = tape.add(state, anchors)?;
    let phi = geom_project(tape, m)?;
    let k = tape.matmul(phi, w_k)?;
    Ok(phase_squash(tape, k))
}

/// Phase-cosine scores `sum_j cos(q_j - k_ij) / sqrt(d_m)`:
/// `q: [T, d_m]`, `k: [T, N, d_m]` -> `[T, N]`.
pub fn phase_scores<F: Float>(tape: &mut Tape<F>, q: Var, k: Var) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    if qs.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "phase_scores",
            lhs: qs,
            rhs: tape.shape(k).to_vec(),
        });
    }
    let q3 = tape.reshape(q, &[qs[0], 1, qs[1]])?;
    let diff = tape.sub(q3, k)?;
    let c = tape.cos(diff);
    let s = tape.sum(c, 2)?;
    Ok(tape.scale(s, F::one() / F::of(qs[1] as f64).sqrt()))
}

/// Routing distribution and top-1 slot per row.
pub fn route<F: Float>(tape: &mut Tape<F>, q: Var, k: Var) -> Result<(Var, Vec<usize>)> {
    let scores = phase_scores(tape, q, k)?;
    let a = tape.softmax(scores, 1)?;
    let slots = argmax_rows(tape.value(a));
    Ok((a, slots))
}

/// Rank-one update `dM = a (x) m`, `m = pi * tanh(W_out * W_v * h)`:
/// `h: [T, d]`, `a: [T, N]` -> `[T, N, d_m]`.
pub fn compute_update<F: Float>(
    tape: &mut Tape<F>,
    h: Var,
    a: Var,
    w_v: Var,
    w_out: Var,
) -> Result<Var> {
    let v = tape.matmul(h, w_v)?;
    let pre = tape.matmul(v, w_out)?;
    let m = phase_squash(tape, pre);
    let (t, dm) = (tape.shape(m)[0], tape.shape(m)[1]);
    let n = tape.shape(a)[1];
    let a3 = tape.reshape(a, &[t, n, 1])?;
    let m3 = tape.reshape(m, &[t, 1, dm])?;
    tape.mul(a3, m3)
}

/// `(M + dM) mod 2pi`; the backward pass is the identity for both inputs.
pub fn apply_update<F: Float>(tape: &mut Tape<F>, state: Var, delta: Var) -> Result<Var> {
    let s = tape.add(state, delta)?;
    Ok(tape.wrap_mod_2pi(s))
}

/// `dM / sqrt(s) + sg(dM - dM / sqrt(s))`: forward unchanged, gradient
/// scaled by `1 / sqrt(s)`.
pub fn segment_normalize<F: Float>(
    tape: &mut Tape<F>,
    delta: Var,
    collisions: usize,
) -> Result<Var> {
    if collisions < 1 {
        return Err(TensorError::Invalid(
            "segment_normalize: collision count must be >= 1".into(),
        ));
    }
    let scaled = tape.scale(delta, F::one() / F::of(collisions as f64).sqrt());
    tape.straight_through(delta, scaled)
}

/// Phase cross-attention read. `h: [T, d]`; `state`, `anchors`: `[T, N, d_m]`
/// (the group each row reads from, already gathered). Returns `[T, d]`.
pub fn memory_read<F: Float>(
    tape: &mut Tape<F>,
    h: Var,
    state: Var,
    anchors: Var,
    w_q: Var,
    w_kv: Var,
    w_o: Var,
) -> Result<Var> {
    let dm = *tape.shape(state).last().unwrap_or(&0);
    let m = tape.add(state, anchors)?;
    let phi = geom_project(tape, m)?;
    let kv = tape.matmul(phi, w_kv)?;
    let k = tape.narrow(kv, 2, 0, dm)?;
    let v = tape.narrow(kv, 2, dm, dm)?;
    let phi_k = phase_squash(tape, k);
    let q = tape.matmul(h, w_q)?;
    let phi_q = phase_squash(tape, q);
    let scores = phase_scores(tape, phi_q, phi_k)?;
    let attn = tape.softmax(scores, 1)?;
    let (t, n) = (tape.shape(attn)[0], tape.shape(attn)[1]);
    let a3 = tape.reshape(attn, &[t, n, 1])?;
    let weighted = tape.mul(a3, v)?;
    let mixed = tape.sum(weighted, 1)?;
    tape.matmul(mixed, w_o)
}

/// Parameters of one memory layer, registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MemoryLayerVars {
    pub norm_gain: Var,
    pub w_q_route: Var,
    pub w_k_route: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub w_q_read: Var,
    pub w_kv: Var,
    pub w_o: Var,
    /// `[G_h, N_m, d_m]`
    pub anchors: Var,
}

/// Runtime switches for a memory layer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub training: bool,
    pub updates_enabled: bool,
    pub normalize_value_path: bool,
}

/// Per-level routing record.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LevelTrace {
    /// Group each token read from and wrote to at this level.
    pub groups: Vec<usize>,
    /// Routing distribution, `[T, N_m]` row-major.
    pub probs: Vec<f64>,
    pub slots: Vec<usize>,
    /// Group index at the next level.
    pub next_groups: Vec<usize>,
}

/// Routing of every token through every level.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RoutingTrace {
    pub n_slots: usize,
    pub levels: Vec<LevelTrace>,
}

impl RoutingTrace {
    pub fn new(n_slots: usize) -> Self {
        RoutingTrace {
            n_slots,
            levels: Vec::new(),
        }
    }

    /// Groups the next memory level reads from (`0` for the root).
    pub fn current_groups(&self, tokens: usize) -> Vec<usize> {
        self.levels
            .last()
            .map_or_else(|| vec![0; tokens], |l| l.next_groups.clone())
    }
}

pub struct StepOutput {
    /// `[B, S, d]`, added to the residual stream by the caller.
    pub read_out: Var,
    /// `[B, G_h, N_m, d_m]` state after the chunk.
    pub final_state: Var,
    pub trace: LevelTrace,
}

/// One memory layer at 1-based `level` over `x: [B, S, d]`.
///
/// `groups[t]` is the group each token visits at this level. `init_state`
/// (`[B, G_h, N_m, d_m]`) is the state at the start of the chunk and
/// `route_state` the state the routing keys are formed from. Each token reads
/// the state accumulated by strictly earlier tokens of its group, then writes
/// its own update.
#[allow(clippy::too_many_arguments)]
pub fn memory_layer_step<F: Float>(
    tape: &mut Tape<F>,
    x: Var,
    level: usize,
    vars: &MemoryLayerVars,
    groups: &[usize],
    init_state: Var,
    route_state: Var,
    opts: StepOptions,
) -> Result<StepOutput> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(TensorError::Invalid(format!(
            "memory layer expects [B, S, d], got {xs:?}"
        )));
    }
    let (b, s, d) = (xs[0], xs[1], xs[2]);
    let t = b * s;
    if groups.len() != t {
        return Err(TensorError::Invalid(format!(
            "routing trace holds {} tokens but the batch has {t}",
            groups.len()
        )));
    }
    let ishape = tape.shape(init_state).to_vec();
    let (n_groups, n_slots, dm) = (ishape[1], ishape[2], ishape[3]);
    let h = tape.reshape(x, &[t, d])?;

    // routing keys per (batch, group), then per token
    let anchors4 = tape.reshape(vars.anchors, &[1, n_groups, n_slots, dm])?;
    let keys = key_phases(tape, route_state, anchors4, vars.w_k_route)?;
    let keys = tape.reshape(keys, &[b * n_groups, n_slots, dm])?;
    let rows: Vec<usize> = (0..t).map(|i| (i / s) * n_groups + groups[i]).collect();
    let tok_keys = tape.gather_rows(keys, &rows)?;
    let q = query_phase(tape, h, vars.norm_gain, vars.w_q_route)?;
    let (a, slots) = route(tape, q, tok_keys)?;
    let next_groups = groups
        .iter()
        .zip(&slots)
        .map(|(&g, &sl)| child_group(g, sl, n_slots, level))
        .collect::<Result<Vec<_>>>()?;

    let plan = scan::build_plan(groups, b, s, n_groups)?;
    let tok_anchors = tape.gather_rows(vars.anchors, groups)?;
    let (reads, final_state) = if opts.updates_enabled {
        let value_in = if opts.normalize_value_path {
            tape.rmsnorm(h, vars.norm_gain, 1e-6)?
        } else {
            h
        };
        let delta = compute_update(tape, value_in, a, vars.w_v, vars.w_out)?;
        let grid = tape.reshape(delta, &[b, s, n_slots, dm])?;
        let grid = scan::grad_scale(tape, grid, &plan, opts.training)?;
        let inclusive = scan::segmented_scan(tape, grid, &plan)?;
        let reads = scan::exclusive_states(tape, inclusive, &plan, init_state)?;
        let fin = scan::final_states(tape, inclusive, &plan, init_state)?;
        (tape.reshape(reads, &[t, n_slots, dm])?, fin)
    } else {
        let flat = tape.reshape(init_state, &[b * n_groups, n_slots, dm])?;
        (tape.gather_rows(flat, &rows)?, init_state)
    };
    let o = memory_read(
        tape,
        h,
        reads,
        tok_anchors,
        vars.w_q_read,
        vars.w_kv,
        vars.w_o,
    )?;
    let read_out = tape.reshape(o, &[b, s, d])?;
    let trace = LevelTrace {
        groups: groups.to_vec(),
        probs: tape.value(a).to_f64_vec(),
        slots,
        next_groups,
    };
    Ok(StepOutput {
        read_out,
        final_state,
        trace,
    })
}
