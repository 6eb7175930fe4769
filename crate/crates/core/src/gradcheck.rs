//! Central finite-difference checks of every differentiable operation at f64.
//!
//! Each instance draws random inputs, seeds the backward pass with a random
//! projection `r` of the output, and compares the resulting vector-Jacobian
//! product with `(f(x + h e_i) - f(x - h e_i)) . r / 2h`. The error of an
//! instance is `|a - n|_2 / max(|a|_2, |n|_2)`.
//!
//! Straight-through compositions are checked against their surrogate: the
//! backward must equal the derivative of the surrogate alone, while the
//! forward must equal the pass-through value bit for bit.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::phasor::{self, MemoryLayerVars, StepOptions};
use crate::rng::{self, Rng};
use crate::scan;
use crate::tensor::{Result, Tensor, TensorError};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One random instance of an operation under test.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    /// Function whose backward is checked.
    pub build: Build,
    /// Function differentiated numerically; defaults to `build`.
    pub reference: Option<Build>,
    /// Forward of `build` must equal this input bit-exactly (straight-through).
    pub passthrough: Option<usize>,
}

impl Instance {
    fn new(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Instance {
            inputs,
            build: Box::new(build),
            reference: None,
            passthrough: None,
        }
    }
}

/// Deliberate backward defects, used to prove the checker can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the tanh backward rule.
    TanhSign,
}

pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut Rng, Option<Fault>) -> Instance,
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub forward_exact: bool,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.forward_exact
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub ops: Vec<OpReport>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>9} {:>12}  status",
            "op", "instances", "max_rel_err"
        )?;
        for op in &self.ops {
            writeln!(
                f,
                "{:<28} {:>9} {:>12.3e}  {}",
                op.name,
                op.instances,
                op.max_rel_err,
                if op.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn eval(build: &Build, inputs: &[Tensor<f64>], proj: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(proj)
        .map(|(a, b)| a * b)
        .sum())
}

/// Relative error of one instance and whether its forward contract held.
pub fn check_instance(inst: &Instance, rng: &mut Rng) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars)?;
    let forward_exact = match inst.passthrough {
        Some(i) => tape.value(out).data() == inst.inputs[i].data(),
        None => true,
    };
    let proj: Tensor<f64> = rng::normal_tensor(rng, tape.shape(out), 1.0);
    let grads = tape.backward_with(out, proj.clone())?;
    let reference = inst.reference.as_ref().unwrap_or(&inst.build);

    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    let mut inputs = inst.inputs.clone();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + STEP;
            let up = eval(reference, &inputs, proj.data())?;
            inputs[i].data_mut()[j] = x0 - STEP;
            let down = eval(reference, &inputs, proj.data())?;
            inputs[i].data_mut()[j] = x0;
            let num = (up - down) / (2.0 * STEP);
            let a = analytic.data()[j];
            diff += (a - num) * (a - num);
            an += a * a;
            nn += num * num;
        }
    }
    let denom = an.sqrt().max(nn.sqrt());
    let err = if denom == 0.0 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    };
    Ok((err, forward_exact))
}

pub fn run_case(
    case: &OpCase,
    seed: u64,
    instances: usize,
    fault: Option<Fault>,
) -> Result<OpReport> {
    let mut rng = rng::stream(seed, case.name);
    let mut max_rel_err: f64 = 0.0;
    let mut forward_exact = true;
    for _ in 0..instances {
        let inst = (case.make)(&mut rng, fault);
        let (err, exact) = check_instance(&inst, &mut rng)?;
        max_rel_err = if err.is_nan() {
            f64::INFINITY
        } else {
            max_rel_err.max(err)
        };
        forward_exact &= exact;
    }
    Ok(OpReport {
        name: case.name,
        instances,
        max_rel_err,
        forward_exact,
    })
}

/// Runs every case in [`cases`].
pub fn run_suite(seed: u64, instances: usize, fault: Option<Fault>) -> Result<Report> {
    let ops = cases()
        .iter()
        .map(|c| run_case(c, seed, instances, fault))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { ops })
}

// ---- samplers ------------------------------------------------------------

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng::normal_tensor(rng, shape, 1.0)
}

/// Magnitudes in `[0.5, 2)` with random sign.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.5..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Values in `(-4pi, 4pi)` at least 0.1 from any multiple of `2pi`.
fn off_wrap_boundary(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let k = rng.random_range(-2i32..2) as f64;
        k * 2.0 * PI + rng.random_range(0.1..2.0 * PI - 0.1)
    })
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn groups(rng: &mut Rng, tokens: usize, n_groups: usize) -> Vec<usize> {
    (0..tokens).map(|_| rng.random_range(0..n_groups)).collect()
}

fn sign_flipped_tanh(tape: &mut Tape<f64>, x: Var) -> Var {
    let value = tape.value(x).map(f64::tanh);
    tape.custom(&[x], value, |_, out, g| {
        vec![Some(
            out.data()
                .iter()
                .zip(g)
                .map(|(y, g)| -(1.0 - y * y) * g)
                .collect(),
        )]
    })
}

// ---- cases ---------------------------------------------------------------

fn binary(rng: &mut Rng, kind: crate::Elementwise) -> Instance {
    let (m, n) = (dims(rng, 1, 4), dims(rng, 1, 4));
    let a = normal(rng, &[m, n]);
    let b = if rng.random_bool(0.5) {
        vec![n]
    } else {
        vec![m, n]
    };
    let b = if matches!(kind, crate::Elementwise::Div) {
        away_from_zero(rng, &b)
    } else {
        normal(rng, &b)
    };
    Instance::new(vec![a, b], move |t, v| {
        t.elementwise(kind, v[0], Some(v[1]))
    })
}

fn unary(rng: &mut Rng, f: fn(&mut Tape<f64>, Var) -> Var) -> Instance {
    let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
    Instance::new(vec![normal(rng, &shape)], move |t, v| Ok(f(t, v[0])))
}

/// Small memory-layer shapes shared by the phasor cases.
struct MemDims {
    t: usize,
    d: usize,
    n: usize,
    dm: usize,
}

fn mem_dims(rng: &mut Rng) -> MemDims {
    MemDims {
        t: dims(rng, 1, 3),
        d: dims(rng, 2, 4),
        n: dims(rng, 2, 3),
        dm: dims(rng, 1, 3),
    }
}

pub fn cases() -> Vec<OpCase> {
    use crate::Elementwise as E;
    vec![
        OpCase {
            name: "add",
            make: |r, _| binary(r, E::Add),
        },
        OpCase {
            name: "sub",
            make: |r, _| binary(r, E::Sub),
        },
        OpCase {
            name: "mul",
            make: |r, _| binary(r, E::Mul),
        },
        OpCase {
            name: "div",
            make: |r, _| binary(r, E::Div),
        },
        OpCase {
            name: "neg",
            make: |r, _| unary(r, |t, x| t.neg(x)),
        },
        OpCase {
            name: "scale",
            make: |r, _| unary(r, |t, x| t.scale(x, -1.7)),
        },
        OpCase {
            name: "tanh",
            make: |r, fault| match fault {
                Some(Fault::TanhSign) => unary(r, sign_flipped_tanh),
                None => unary(r, |t, x| t.tanh(x)),
            },
        },
        OpCase {
            name: "sin",
            make: |r, _| unary(r, |t, x| t.sin(x)),
        },
        OpCase {
            name: "cos",
            make: |r, _| unary(r, |t, x| t.cos(x)),
        },
        OpCase {
            name: "exp",
            make: |r, _| unary(r, |t, x| t.exp(x)),
        },
        OpCase {
            name: "gelu",
            make: |r, _| unary(r, |t, x| t.gelu(x)),
        },
        OpCase {
            name: "wrap_mod_2pi",
            make: |r, _| {
                let x = {
                    let sh = [dims(r, 1, 3), dims(r, 1, 4)];
                    off_wrap_boundary(r, &sh)
                };
                Instance::new(vec![x], |t, v| Ok(t.wrap_mod_2pi(v[0])))
            },
        },
        OpCase {
            name: "stop_gradient_composition",
            make: |r, _| {
                // y = x/2 + sg(x - x/2), checked against x/2
                let x = {
                    let sh = [dims(r, 1, 3), dims(r, 1, 4)];
                    normal(r, &sh)
                };
                let mut inst = Instance::new(vec![x], |t, v| {
                    let half = t.scale(v[0], 0.5);
                    let rest = t.sub(v[0], half)?;
                    let sg = t.stop_gradient(rest);
                    t.add(half, sg)
                });
                inst.reference = Some(Box::new(|t, v| Ok(t.scale(v[0], 0.5))));
                inst
            },
        },
        OpCase {
            name: "straight_through",
            make: |r, _| {
                let x = {
                    let sh = [dims(r, 1, 3), dims(r, 1, 4)];
                    normal(r, &sh)
                };
                let mut inst = Instance::new(vec![x], |t, v| {
                    let f = t.tanh(v[0]);
                    t.straight_through(v[0], f)
                });
                inst.reference = Some(Box::new(|t, v| Ok(t.tanh(v[0]))));
                inst.passthrough = Some(0);
                inst
            },
        },
        OpCase {
            name: "matmul",
            make: |r, _| {
                let (a, b) = (normal(r, &[5, 7]), normal(r, &[7, 3]));
                Instance::new(vec![a, b], |t, v| t.matmul(v[0], v[1]))
            },
        },
        OpCase {
            name: "matmul_batched",
            make: |r, _| {
                let (bt, m, k, n) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
                let (a, b) = (normal(r, &[bt, m, k]), normal(r, &[bt, k, n]));
                Instance::new(vec![a, b], |t, v| t.matmul(v[0], v[1]))
            },
        },
        OpCase {
            name: "softmax",
            make: |r, _| {
                let shape = [dims(r, 1, 3), dims(r, 2, 6)];
                let axis = r.random_range(0..2);
                Instance::new(vec![normal(r, &shape)], move |t, v| t.softmax(v[0], axis))
            },
        },
        OpCase {
            name: "rmsnorm",
            make: |r, _| {
                let (m, n) = (dims(r, 1, 4), dims(r, 2, 6));
                Instance::new(vec![normal(r, &[m, n]), normal(r, &[n])], |t, v| {
                    t.rmsnorm(v[0], v[1], 1e-6)
                })
            },
        },
        OpCase {
            name: "cross_entropy",
            make: |r, _| {
                let (rows, vocab) = (dims(r, 2, 5), dims(r, 2, 8));
                let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..vocab)).collect();
                let mut mask: Vec<bool> = (0..rows).map(|_| r.random_bool(0.7)).collect();
                mask[0] = true;
                Instance::new(vec![normal(r, &[rows, vocab])], move |t, v| {
                    t.cross_entropy(v[0], &targets, &mask)
                })
            },
        },
        OpCase {
            name: "sum_axis",
            make: |r, _| {
                let axis = r.random_range(0..3);
                let x = {
                    let sh = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)];
                    normal(r, &sh)
                };
                Instance::new(vec![x], move |t, v| t.sum(v[0], axis))
            },
        },
        OpCase {
            name: "mean",
            make: |r, _| {
                let x = {
                    let sh = [dims(r, 1, 3), dims(r, 1, 4)];
                    normal(r, &sh)
                };
                Instance::new(vec![x], |t, v| t.mean(v[0], 1))
            },
        },
        OpCase {
            name: "cumsum",
            make: |r, _| {
                let axis = r.random_range(0..2);
                let x = {
                    let sh = [dims(r, 1, 5), dims(r, 1, 4)];
                    normal(r, &sh)
                };
                Instance::new(vec![x], move |t, v| t.cumsum(v[0], axis))
            },
        },
        OpCase {
            name: "gather_rows",
            make: |r, _| {
                let rows = dims(r, 1, 4);
                let idx: Vec<usize> = (0..dims(r, 1, 6))
                    .map(|_| r.random_range(0..rows))
                    .collect();
                let x = {
                    let sh = [rows, dims(r, 1, 3)];
                    normal(r, &sh)
                };
                Instance::new(vec![x], move |t, v| t.gather_rows(v[0], &idx))
            },
        },
        OpCase {
            name: "scatter_add_rows",
            make: |r, _| {
                let (n, rows) = (dims(r, 1, 6), dims(r, 1, 4));
                let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..rows)).collect();
                let x = {
                    let sh = [n, dims(r, 1, 3)];
                    normal(r, &sh)
                };
                Instance::new(vec![x], move |t, v| t.scatter_add_rows(v[0], &idx, rows))
            },
        },
        OpCase {
            name: "concat_narrow",
            make: |r, _| {
                let m = dims(r, 1, 3);
                let (a, b) = (
                    {
                        let sh = [m, dims(r, 1, 3)];
                        normal(r, &sh)
                    },
                    {
                        let sh = [m, dims(r, 1, 3)];
                        normal(r, &sh)
                    },
                );
                let total = a.shape()[1] + b.shape()[1];
                let start = r.random_range(0..total);
                let len = r.random_range(1..=total - start);
                Instance::new(vec![a, b], move |t, v| {
                    let c = t.concat(&[v[0], v[1]], 1)?;
                    t.narrow(c, 1, start, len)
                })
            },
        },
        OpCase {
            name: "reshape_permute",
            make: |r, _| {
                let (a, b, c) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
                Instance::new(vec![normal(r, &[a, b, c])], move |t, v| {
                    let p = t.permute(v[0], &[2, 0, 1])?;
                    let q = t.reshape(p, &[c, a * b])?;
                    t.transpose(q, 0, 1)
                })
            },
        },
        OpCase {
            name: "window_attention",
            make: |r, _| {
                let (b, sq, heads, window) =
                    (dims(r, 1, 2), dims(r, 1, 5), dims(r, 1, 2), dims(r, 1, 4));
                let sk = sq + r.random_range(0..3);
                let d = heads * dims(r, 1, 3);
                let q = normal(r, &[b, sq, d]);
                let (k, v) = (normal(r, &[b, sk, d]), normal(r, &[b, sk, d]));
                Instance::new(vec![q, k, v], move |t, x| {
                    t.window_attention(x[0], x[1], x[2], heads, window)
                })
            },
        },
        OpCase {
            name: "rope",
            make: |r, _| {
                let heads = dims(r, 1, 2);
                let x = {
                    let sh = [dims(r, 1, 2), dims(r, 1, 5), heads * 2 * dims(r, 1, 2)];
                    normal(r, &sh)
                };
                let start = r.random_range(0..50);
                Instance::new(vec![x], move |t, v| t.rope(v[0], heads, start, 10_000.0))
            },
        },
        OpCase {
            name: "query_phase",
            make: |r, _| {
                let m = mem_dims(r);
                let ins = vec![
                    normal(r, &[m.t, m.d]),
                    normal(r, &[m.d]),
                    normal(r, &[m.d, m.dm]),
                ];
                Instance::new(ins, |t, v| phasor::query_phase(t, v[0], v[1], v[2]))
            },
        },
        OpCase {
            name: "key_phases",
            make: |r, _| {
                let m = mem_dims(r);
                let state = rng::uniform_tensor(r, &[m.n, m.dm], 0.0, 2.0 * PI);
                let ins = vec![state, normal(r, &[m.n, m.dm]), normal(r, &[2 * m.dm, m.dm])];
                Instance::new(ins, |t, v| phasor::key_phases(t, v[0], v[1], v[2]))
            },
        },
        OpCase {
            name: "route_softmax",
            make: |r, _| {
                let m = mem_dims(r);
                let q = rng::uniform_tensor(r, &[m.t, m.dm], -PI, PI);
                let k = rng::uniform_tensor(r, &[m.t, m.n, m.dm], -PI, PI);
                Instance::new(vec![q, k], |t, v| Ok(phasor::route(t, v[0], v[1])?.0))
            },
        },
        OpCase {
            name: "compute_update",
            make: |r, _| {
                let m = mem_dims(r);
                let a = normal(r, &[m.t, m.n]);
                let ins = vec![
                    normal(r, &[m.t, m.d]),
                    a,
                    normal(r, &[m.d, m.dm]),
                    normal(r, &[m.dm, m.dm]),
                ];
                Instance::new(ins, |t, v| {
                    let a = t.softmax(v[1], 1)?;
                    phasor::compute_update(t, v[0], a, v[2], v[3])
                })
            },
        },
        OpCase {
            name: "apply_update",
            make: |r, _| {
                let shape = [dims(r, 1, 3), dims(r, 1, 3)];
                let m = rng::uniform_tensor(r, &shape, 0.1, PI);
                let dm = rng::uniform_tensor(r, &shape, -0.09, PI - 0.1);
                Instance::new(vec![m, dm], |t, v| phasor::apply_update(t, v[0], v[1]))
            },
        },
        OpCase {
            name: "segment_normalize",
            make: |r, _| {
                let s = dims(r, 1, 16);
                let x = {
                    let sh = [dims(r, 1, 3), dims(r, 1, 3)];
                    normal(r, &sh)
                };
                let mut inst =
                    Instance::new(vec![x], move |t, v| phasor::segment_normalize(t, v[0], s));
                inst.reference = Some(Box::new(move |t, v| {
                    Ok(t.scale(v[0], 1.0 / (s as f64).sqrt()))
                }));
                inst.passthrough = Some(0);
                inst
            },
        },
        OpCase {
            name: "memory_read",
            make: |r, _| {
                let m = mem_dims(r);
                let ins = vec![
                    normal(r, &[m.t, m.d]),
                    rng::uniform_tensor(r, &[m.t, m.n, m.dm], 0.0, 2.0 * PI),
                    normal(r, &[m.t, m.n, m.dm]),
                    normal(r, &[m.d, m.dm]),
                    normal(r, &[2 * m.dm, 2 * m.dm]),
                    normal(r, &[m.dm, m.d]),
                ];
                Instance::new(ins, |t, v| {
                    phasor::memory_read(t, v[0], v[1], v[2], v[3], v[4], v[5])
                })
            },
        },
        OpCase {
            name: "segmented_scan",
            make: |r, _| {
                let (b, s, ng, w) = (dims(r, 1, 2), dims(r, 1, 6), dims(r, 1, 3), dims(r, 1, 2));
                let g = groups(r, b * s, ng);
                // small updates keep every prefix away from the wrap boundary
                let grid = rng::uniform_tensor(r, &[b, s, w], 0.01, 0.5);
                Instance::new(vec![grid], move |t, v| {
                    let plan = scan::build_plan(&g, b, s, ng)?;
                    scan::segmented_scan(t, v[0], &plan)
                })
            },
        },
        OpCase {
            name: "segmented_scan_composed",
            make: |r, _| {
                let (b, s, ng) = (dims(r, 1, 2), dims(r, 1, 6), dims(r, 1, 3));
                let g = groups(r, b * s, ng);
                let grid = rng::uniform_tensor(r, &[b, s, 2], 0.01, 0.5);
                Instance::new(vec![grid], move |t, v| {
                    let plan = scan::build_plan(&g, b, s, ng)?;
                    scan::segmented_scan_composed(t, v[0], &plan)
                })
            },
        },
        OpCase {
            name: "exclusive_states",
            make: |r, _| {
                let (b, s, ng) = (dims(r, 1, 2), dims(r, 1, 6), dims(r, 1, 3));
                let g = groups(r, b * s, ng);
                let grid = rng::uniform_tensor(r, &[b, s, 2], 0.01, 0.4);
                let init = rng::uniform_tensor(r, &[b, ng, 2], 0.1, 1.0);
                Instance::new(vec![grid, init], move |t, v| {
                    let plan = scan::build_plan(&g, b, s, ng)?;
                    let inc = scan::segmented_scan(t, v[0], &plan)?;
                    scan::exclusive_states(t, inc, &plan, v[1])
                })
            },
        },
        OpCase {
            name: "grad_scale",
            make: |r, _| {
                let (b, s, ng) = (dims(r, 1, 2), dims(r, 2, 8), dims(r, 1, 2));
                let g = groups(r, b * s, ng);
                let plan = scan::build_plan(&g, b, s, ng).expect("valid groups");
                let sigma: Vec<f64> = (0..b * s)
                    .map(|tok| (plan.collisions[tok].max(1) as f64).sqrt())
                    .collect();
                let grid = normal(r, &[b, s, 2]);
                let p2 = plan.clone();
                let mut inst =
                    Instance::new(vec![grid], move |t, v| scan::grad_scale(t, v[0], &p2, true));
                inst.reference = Some(Box::new(move |t, v| {
                    let inv = Tensor::from_fn(&[b, s, 1], |i| 1.0 / sigma[i]);
                    let c = t.constant(inv);
                    t.mul(v[0], c)
                }));
                inst.passthrough = Some(0);
                inst
            },
        },
        OpCase {
            name: "memory_layer_step",
            make: |r, _| {
                let (b, s, d, n, dm) = (dims(r, 1, 2), dims(r, 1, 4), 4, 2usize, 2);
                let level = dims(r, 1, 2);
                let ng = n.pow(level as u32 - 1);
                let g = groups(r, b * s, ng);
                let ins = vec![
                    normal(r, &[b, s, d]),
                    normal(r, &[d]),
                    normal(r, &[d, dm]),
                    normal(r, &[2 * dm, dm]),
                    normal(r, &[d, dm]),
                    normal(r, &[dm, dm]),
                    normal(r, &[d, dm]),
                    normal(r, &[2 * dm, 2 * dm]),
                    normal(r, &[dm, d]),
                    normal(r, &[ng, n, dm]),
                    rng::uniform_tensor(r, &[b, ng, n, dm], 0.5, 1.5),
                ];
                Instance::new(ins, move |t, v| {
                    let vars = MemoryLayerVars {
                        norm_gain: v[1],
                        w_q_route: v[2],
                        w_k_route: v[3],
                        w_v: v[4],
                        w_out: v[5],
                        w_q_read: v[6],
                        w_kv: v[7],
                        w_o: v[8],
                        anchors: v[9],
                    };
                    // eval mode: grad_scale is the identity, so the step is a
                    // plain differentiable function of its inputs
                    let opts = StepOptions {
                        training: false,
                        updates_enabled: true,
                        normalize_value_path: false,
                    };
                    let out =
                        phasor::memory_layer_step(t, v[0], level, &vars, &g, v[10], v[10], opts)?;
                    Ok(out.read_out)
                })
            },
        },
    ]
}

/// Parses a fault name as accepted by the command line.
pub fn parse_fault(name: &str) -> Result<Fault> {
    match name {
        "tanh-sign" => Ok(Fault::TanhSign),
        other => Err(TensorError::Invalid(format!(
            "unknown fault `{other}` (known: tanh-sign)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_passes_and_injected_fault_fails() {
        let case = cases().into_iter().find(|c| c.name == "tanh").unwrap();
        assert!(run_case(&case, 1, 5, None).unwrap().passed());
        let bad = run_case(&case, 1, 5, Some(Fault::TanhSign)).unwrap();
        assert!(!bad.passed());
        assert!(bad.max_rel_err > 1.0);
    }

    #[test]
    fn straight_through_forward_is_checked() {
        let case = cases()
            .into_iter()
            .find(|c| c.name == "straight_through")
            .unwrap();
        let rep = run_case(&case, 2, 5, None).unwrap();
        assert!(rep.forward_exact && rep.passed());
    }
}
