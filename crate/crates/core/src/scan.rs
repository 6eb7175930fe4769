//! Parallel segmented scan over phase updates grouped by (batch, memory group).
//!
//! Tokens are linearised into `P = B * S` rows, stably sorted by the key
//! `batch * n_groups + group`, prefix-summed along the sorted axis, shifted by
//! the offset captured at each segment start, and scattered back into
//! temporal order before the phase projection `mod 2pi`.
//!
//! [`sequential_oracle`] is the O(T) recurrent reference the scan replaces.

use crate::autodiff::{wrap_phase, Tape, Var};
use crate::tensor::{Float, Result, Tensor, TensorError};

/// Linearisation of a `[B, S]` grid of group indices into segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPlan {
    pub batch: usize,
    pub seq: usize,
    pub n_groups: usize,
    /// `batch * n_groups + group`, temporal order.
    pub keys: Vec<usize>,
    /// Sorted position -> temporal token index.
    pub perm: Vec<usize>,
    /// Temporal token index -> sorted position.
    pub inv_perm: Vec<usize>,
    /// Segment starts, sorted order.
    pub boundaries: Vec<bool>,
    /// Sorted position of each segment's first token.
    pub starts: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Sorted position -> segment id.
    pub segment_of: Vec<usize>,
    /// Length of each token's segment, temporal order.
    pub collisions: Vec<usize>,
}

impl SegmentPlan {
    pub fn tokens(&self) -> usize {
        self.keys.len()
    }

    pub fn num_segments(&self) -> usize {
        self.lengths.len()
    }

    pub fn group_of(&self, token: usize) -> usize {
        self.keys[token] % self.n_groups
    }

    /// Temporal index of the previous token in the same segment.
    pub fn prev_in_segment(&self) -> Vec<Option<usize>> {
        let mut prev = vec![None; self.tokens()];
        for i in 1..self.tokens() {
            if !self.boundaries[i] {
                prev[self.perm[i]] = Some(self.perm[i - 1]);
            }
        }
        prev
    }

    /// Temporal index of the last token of every segment.
    pub fn segment_last(&self) -> Vec<usize> {
        self.starts
            .iter()
            .zip(&self.lengths)
            .map(|(&s, &l)| self.perm[s + l - 1])
            .collect()
    }

    fn check_grid(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() < 2 || shape[0] != self.batch || shape[1] != self.seq {
            return Err(TensorError::ShapeMismatch {
                op: "segmented scan",
                lhs: shape.to_vec(),
                rhs: vec![self.batch, self.seq],
            });
        }
        Ok(shape[2..].iter().product())
    }
}

/// Builds the segment plan for group indices `groups` (`[batch, seq]`, row-major).
pub fn build_plan(
    groups: &[usize],
    batch: usize,
    seq: usize,
    n_groups: usize,
) -> Result<SegmentPlan> {
    if groups.len() != batch * seq {
        return Err(TensorError::BadLength {
            shape: vec![batch, seq],
            expected: batch * seq,
            got: groups.len(),
        });
    }
    let mut keys = Vec::with_capacity(groups.len());
    for (i, &g) in groups.iter().enumerate() {
        if g >= n_groups {
            return Err(TensorError::IndexOutOfRange {
                op: "build_plan",
                index: g,
                extent: n_groups,
            });
        }
        keys.push((i / seq.max(1)) * n_groups + g);
    }
    let p = keys.len();
    let mut perm: Vec<usize> = (0..p).collect();
    // stable: equal keys keep temporal order
    perm.sort_by_key(|&i| keys[i]);
    let mut inv_perm = vec![0; p];
    for (s, &t) in perm.iter().enumerate() {
        inv_perm[t] = s;
    }
    let boundaries: Vec<bool> = (0..p)
        .map(|i| i == 0 || keys[perm[i]] != keys[perm[i - 1]])
        .collect();
    let starts: Vec<usize> = (0..p).filter(|&i| boundaries[i]).collect();
    let lengths: Vec<usize> = starts
        .iter()
        .enumerate()
        .map(|(k, &s)| starts.get(k + 1).copied().unwrap_or(p) - s)
        .collect();
    let mut segment_of = Vec::with_capacity(p);
    for (k, &l) in lengths.iter().enumerate() {
        segment_of.extend(std::iter::repeat_n(k, l));
    }
    let mut collisions = vec![0; p];
    for (s, &k) in segment_of.iter().enumerate() {
        collisions[perm[s]] = lengths[k];
    }
    Ok(SegmentPlan {
        batch,
        seq,
        n_groups,
        keys,
        perm,
        inv_perm,
        boundaries,
        starts,
        lengths,
        segment_of,
        collisions,
    })
}

/// Per-token straight-through gradient scaling by `1 / sqrt(max(1, collisions))`.
/// Forward is a bit-exact passthrough; in eval mode nothing is recorded.
pub fn grad_scale<F: Float>(
    tape: &mut Tape<F>,
    grid: Var,
    plan: &SegmentPlan,
    training: bool,
) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    plan.check_grid(&shape)?;
    if !training {
        return Ok(grid);
    }
    let mut sshape = vec![plan.batch, plan.seq];
    sshape.extend(std::iter::repeat_n(1, shape.len() - 2));
    let inv = Tensor::new(
        &sshape,
        plan.collisions
            .iter()
            .map(|&c| F::one() / F::of(c.max(1) as f64).sqrt())
            .collect(),
    )?;
    let inv = tape.constant(inv);
    let scaled = tape.mul(grid, inv)?;
    tape.straight_through(grid, scaled)
}

/// Inclusive per-segment prefix sums of `grid` (`[B, S, ...]`), restored to
/// temporal order and projected into `[0, 2pi)`.
///
/// Sums are accumulated in f64 regardless of `F`; the backward pass is the
/// per-segment reversed suffix sum of the upstream gradient.
pub fn segmented_scan<F: Float>(tape: &mut Tape<F>, grid: Var, plan: &SegmentPlan) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    let w = plan.check_grid(&shape)?;
    let p = plan.tokens();
    let src = tape.value(grid).data();

    // prefix sum over the sorted axis, restarted at each segment start;
    // equal to the global prefix minus the gathered start offsets
    let mut out = vec![F::zero(); p * w];
    let mut run = vec![0f64; w];
    for (s, &t) in plan.perm.iter().enumerate() {
        if plan.starts[plan.segment_of[s]] == s {
            run.iter_mut().for_each(|r| *r = 0.0);
        }
        for (j, r) in run.iter_mut().enumerate() {
            *r += src[t * w + j].f64();
            out[t * w + j] = F::of(wrap_phase(*r));
        }
    }
    let value = Tensor::new(&shape, out)?;
    let perm = plan.perm.clone();
    let boundaries = plan.boundaries.clone();
    Ok(tape.custom(&[grid], value, move |_, _, g| {
        let mut gx = vec![F::zero(); g.len()];
        let mut acc = vec![0f64; w];
        for s in (0..perm.len()).rev() {
            let t = perm[s];
            for j in 0..w {
                acc[j] += g[t * w + j].f64();
                gx[t * w + j] = F::of(acc[j]);
            }
            if boundaries[s] {
                acc.iter_mut().for_each(|a| *a = 0.0);
            }
        }
        vec![Some(gx)]
    }))
}

/// The same scan assembled step by step from tape primitives (gather,
/// cumsum, offset gather, subtract, inverse gather, wrap). Accumulates in `F`.
pub fn segmented_scan_composed<F: Float>(
    tape: &mut Tape<F>,
    grid: Var,
    plan: &SegmentPlan,
) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    let w = plan.check_grid(&shape)?;
    let p = plan.tokens();
    if p == 0 {
        return Ok(grid);
    }
    let flat = tape.reshape(grid, &[p, w])?;
    let sorted = tape.gather_rows(flat, &plan.perm)?;
    let c = tape.cumsum(sorted, 0)?;
    let zero = tape.constant(Tensor::zeros(&[1, w]));
    let shifted = if p > 1 {
        let head = tape.narrow(c, 0, 0, p - 1)?;
        tape.concat(&[zero, head], 0)?
    } else {
        zero
    };
    let offsets = tape.gather_rows(shifted, &plan.starts)?;
    let broadcast = tape.gather_rows(offsets, &plan.segment_of)?;
    let local = tape.sub(c, broadcast)?;
    let restored = tape.gather_rows(local, &plan.inv_perm)?;
    let wrapped = tape.wrap_mod_2pi(restored);
    tape.reshape(wrapped, &shape)
}

fn initial_rows(plan: &SegmentPlan) -> Vec<usize> {
    (0..plan.tokens())
        .map(|t| (t / plan.seq) * plan.n_groups + plan.group_of(t))
        .collect()
}

/// Read states under read-before-write: each token sees the initial state of
/// its group plus the inclusive state of the previous token in its segment.
/// `initial` is `[B, n_groups, ...]`.
pub fn exclusive_states<F: Float>(
    tape: &mut Tape<F>,
    inclusive: Var,
    plan: &SegmentPlan,
    initial: Var,
) -> Result<Var> {
    let shape = tape.shape(inclusive).to_vec();
    let w = plan.check_grid(&shape)?;
    let p = plan.tokens();
    let init_flat = flatten_initial(tape, initial, plan, w)?;
    if p == 0 {
        return Ok(inclusive);
    }
    let flat = tape.reshape(inclusive, &[p, w])?;
    let zero = tape.constant(Tensor::zeros(&[1, w]));
    let padded = tape.concat(&[zero, flat], 0)?;
    let idx: Vec<usize> = plan
        .prev_in_segment()
        .iter()
        .map(|p| p.map_or(0, |t| t + 1))
        .collect();
    let prev = tape.gather_rows(padded, &idx)?;
    let init = tape.gather_rows(init_flat, &initial_rows(plan))?;
    let sum = tape.add(prev, init)?;
    let wrapped = tape.wrap_mod_2pi(sum);
    tape.reshape(wrapped, &shape)
}

/// Group states after the whole sequence: initial state plus the inclusive
/// state of each segment's last token. Returns `[B, n_groups, ...]`.
pub fn final_states<F: Float>(
    tape: &mut Tape<F>,
    inclusive: Var,
    plan: &SegmentPlan,
    initial: Var,
) -> Result<Var> {
    let shape = tape.shape(inclusive).to_vec();
    let w = plan.check_grid(&shape)?;
    let init_shape = tape.shape(initial).to_vec();
    let init_flat = flatten_initial(tape, initial, plan, w)?;
    if plan.tokens() == 0 {
        return Ok(initial);
    }
    let flat = tape.reshape(inclusive, &[plan.tokens(), w])?;
    let lasts = plan.segment_last();
    let rows: Vec<usize> = lasts.iter().map(|&t| plan.keys[t]).collect();
    let last_vals = tape.gather_rows(flat, &lasts)?;
    let placed = tape.scatter_add_rows(last_vals, &rows, plan.batch * plan.n_groups)?;
    let sum = tape.add(placed, init_flat)?;
    let wrapped = tape.wrap_mod_2pi(sum);
    tape.reshape(wrapped, &init_shape)
}

fn flatten_initial<F: Float>(
    tape: &mut Tape<F>,
    initial: Var,
    plan: &SegmentPlan,
    w: usize,
) -> Result<Var> {
    let s = tape.shape(initial).to_vec();
    if s.len() < 2
        || s[0] != plan.batch
        || s[1] != plan.n_groups
        || s[2..].iter().product::<usize>() != w
    {
        return Err(TensorError::ShapeMismatch {
            op: "initial group state",
            lhs: s,
            rhs: vec![plan.batch, plan.n_groups, w],
        });
    }
    tape.reshape(initial, &[plan.batch * plan.n_groups, w])
}

/// Recurrent reference: one running accumulator per (batch, group), inclusive
/// states in temporal order, reduced mod 2pi. Accumulates in f64.
pub fn sequential_oracle<F: Float>(
    grid: &Tensor<F>,
    groups: &[usize],
    batch: usize,
    seq: usize,
) -> Tensor<F> {
    sequential_reads(grid, groups, batch, seq, None).0
}

/// Recurrent read-then-write simulation. Returns `(inclusive, reads)` where
/// `reads[t]` is the group state seen by token `t` before its own write.
/// `initial`, when given, is `[B, n_groups, ...]`.
pub fn sequential_reads<F: Float>(
    grid: &Tensor<F>,
    groups: &[usize],
    batch: usize,
    seq: usize,
    initial: Option<&Tensor<F>>,
) -> (Tensor<F>, Tensor<F>) {
    let p = batch * seq;
    let w = grid.numel().checked_div(p).unwrap_or(0);
    let mut inclusive = vec![F::zero(); p * w];
    let mut reads = vec![F::zero(); p * w];
    let n_groups = initial
        .map(|t| t.shape()[1])
        .unwrap_or_else(|| groups.iter().copied().max().map_or(0, |m| m + 1));
    for b in 0..batch {
        let mut acc = vec![vec![0f64; w]; n_groups];
        let mut base = vec![vec![0f64; w]; n_groups];
        if let Some(init) = initial {
            for (g, row) in base.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = init.data()[(b * n_groups + g) * w + j].f64();
                }
            }
        }
        for s in 0..seq {
            let t = b * seq + s;
            let g = groups[t];
            for j in 0..w {
                reads[t * w + j] = F::of(wrap_phase(base[g][j] + wrap_phase(acc[g][j])));
                acc[g][j] += grid.data()[t * w + j].f64();
                inclusive[t * w + j] = F::of(wrap_phase(acc[g][j]));
            }
        }
    }
    (
        Tensor::new(grid.shape(), inclusive).expect("grid shape"),
        Tensor::new(grid.shape(), reads).expect("grid shape"),
    )
}

/// Distance between two phases on the circle.
pub fn phase_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * std::f64::consts::PI);
    d.min(2.0 * std::f64::consts::PI - d)
}

/// One row of the scan micro-benchmark. `k` is the number of segments.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct BenchRow {
    pub s: usize,
    pub k: usize,
    pub t_scan_ns: u128,
    pub t_seq_ns: u128,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.t_seq_ns as f64 / self.t_scan_ns.max(1) as f64
    }
}

/// Times plan construction plus the fused scan against the sequential
/// oracle on one sequence of each length, `width` values per token and
/// groups drawn uniformly from `n_groups`. Each output is checked against
/// the oracle (1e-6 on the circle) before timing; the best of `reps` runs
/// is reported.
pub fn bench(
    s_values: &[usize],
    n_groups: usize,
    width: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    use rand::Rng as _;
    use std::time::Instant;
    let mut rows = Vec::new();
    for &s in s_values {
        let mut r = crate::rng::stream(seed, &format!("scan-bench/{s}"));
        let groups: Vec<usize> = (0..s).map(|_| r.random_range(0..n_groups)).collect();
        let grid = crate::rng::uniform_tensor::<f32>(&mut r, &[1, s, width], -1.0, 1.0);
        let run = || -> Result<(Tensor<f32>, usize)> {
            let plan = build_plan(&groups, 1, s, n_groups)?;
            let mut tape = Tape::new();
            let g = tape.constant(grid.clone());
            let out = segmented_scan(&mut tape, g, &plan)?;
            Ok((tape.value(out).clone(), plan.num_segments()))
        };
        let (out, k) = run()?;
        let oracle = sequential_oracle(&grid, &groups, 1, s);
        let err = out
            .data()
            .iter()
            .zip(oracle.data())
            .map(|(a, b)| phase_distance(a.f64(), b.f64()))
            .fold(0.0, f64::max);
        if err > 1e-6 {
            return Err(TensorError::Invalid(format!(
                "scan disagrees with the oracle at S={s}: {err:e}"
            )));
        }
        let (mut t_scan, mut t_seq) = (u128::MAX, u128::MAX);
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            std::hint::black_box(run()?);
            t_scan = t_scan.min(t.elapsed().as_nanos());
            let t = Instant::now();
            std::hint::black_box(sequential_oracle(&grid, &groups, 1, s));
            t_seq = t_seq.min(t.elapsed().as_nanos());
        }
        rows.push(BenchRow {
            s,
            k,
            t_scan_ns: t_scan,
            t_seq_ns: t_seq,
        });
    }
    Ok(rows)
}
