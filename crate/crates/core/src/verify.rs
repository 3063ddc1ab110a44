//! Self-check suites shared by the `verify` command and the test targets.
//!
//! Every suite runs at fixed seeds and returns a [`SuiteReport`] holding its
//! worst observed error and the threshold it was judged against.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_many, Tape, Var, LAYER_NORM_EPS};
use crate::checkpoint;
use crate::cross_scan::{expand_tensor, inverse_reorder_tensor, merge_tensor, ss2d, ScanOrder};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Variant};
use crate::params::{Bound, ParamStore};
use crate::ssm::{
    discretize, discretize_forward, s6_forward, scan_chunked, scan_reference, selective_scan,
    DiscretizedStep, ScanDims, ScanInputs, ScanMode, SsmLearned, SsmVars,
};
use crate::tensor::Tensor;
use crate::vss::{VssBlock, VssDims};

/// Shape of every scan-oracle instance.
pub const SCAN_ORACLE_DIMS: ScanDims = ScanDims {
    batch: 2,
    len: 64,
    dim: 8,
    state: 4,
};
pub const SCAN_ORACLE_CHUNKS: [usize; 5] = [1, 2, 7, 16, 64];
pub const SCAN_ORACLE_TOLERANCE: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Step for the whole-model check; see [`grad_micro_model`].
pub const MICRO_MODEL_EPS: f64 = 1e-4;
pub const DISCRETIZATION_DELTAS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub max_error: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl SuiteReport {
    fn new(name: impl Into<String>, max_error: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            max_error,
            threshold,
            // NaN never passes.
            passed: max_error <= threshold,
            detail,
            seconds: 0.0,
        }
    }

    fn failed(name: impl Into<String>, threshold: f64, err: impl std::fmt::Display) -> Self {
        Self::new(name, f64::INFINITY, threshold, format!("error: {err}"))
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} max error {:.3e} (threshold {:.1e}, {:.2}s){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.threshold,
            self.seconds,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!("  {}", self.detail)
            }
        )
    }
}

fn timed(f: impl FnOnce() -> SuiteReport) -> SuiteReport {
    let start = Instant::now();
    let mut r = f();
    r.seconds = start.elapsed().as_secs_f64();
    r
}

/// A chunked scan under test: `(inputs, chunk length) → y`.
pub type ScanKernel = dyn Fn(&ScanInputs<'_, f32>, usize) -> Vec<f32> + Sync;

/// The shipped chunked kernel.
pub fn chunked_kernel(s: &ScanInputs<'_, f32>, chunk: usize) -> Vec<f32> {
    scan_chunked(s, chunk).0
}

/// Mutation fixture: a chunked scan that forgets to carry state across
/// chunk boundaries, so every chunk restarts from `h = 0`.
pub fn carry_dropping_kernel(s: &ScanInputs<'_, f32>, chunk: usize) -> Vec<f32> {
    let ScanDims {
        batch,
        len,
        dim,
        state,
    } = s.dims;
    let dn = dim * state;
    let chunk = chunk.clamp(1, len.max(1));
    let mut y = Vec::with_capacity(batch * len * dim);
    for b in 0..batch {
        for l0 in (0..len).step_by(chunk) {
            let l1 = (l0 + chunk).min(len);
            let (r0, r1) = (b * len + l0, b * len + l1);
            let part = ScanInputs {
                dims: ScanDims {
                    batch: 1,
                    len: l1 - l0,
                    dim,
                    state,
                },
                a_bar: &s.a_bar[r0 * dn..r1 * dn],
                b_bar_x: &s.b_bar_x[r0 * dn..r1 * dn],
                c: &s.c[r0 * state..r1 * state],
                d_skip: s.d_skip,
                x: &s.x[r0 * dim..r1 * dim],
            };
            y.extend(scan_reference(&part).0);
        }
    }
    y
}

/// Per-output deviation relative to that output's conditioning: the
/// magnitude sum `Σ_n |C_n·h_n| + |D·x|` of the terms it is built from.
/// A bare `|a - b| / |b|` is meaningless in `f32` where those terms cancel.
fn max_rel(s: &ScanInputs<'_, f32>, hs: &[f32], fast: &[f32], reference: &[f32]) -> f64 {
    let ScanDims { dim, state, .. } = s.dims;
    let mut worst = 0.0f64;
    for (row, (f_row, r_row)) in fast
        .chunks_exact(dim)
        .zip(reference.chunks_exact(dim))
        .enumerate()
    {
        let c = &s.c[row * state..(row + 1) * state];
        let h_row = &hs[row * dim * state..(row + 1) * dim * state];
        for (d, (&a, &b)) in f_row.iter().zip(r_row).enumerate() {
            let h = &h_row[d * state..(d + 1) * state];
            let scale = h
                .iter()
                .zip(c)
                .map(|(&hv, &cv)| f64::from(hv * cv).abs())
                .sum::<f64>()
                + f64::from(s.d_skip[d] * s.x[row * dim + d]).abs();
            let (a, b) = (f64::from(a), f64::from(b));
            let err = (a - b).abs() / scale.max(a.abs()).max(b.abs()).max(f64::MIN_POSITIVE);
            // `!(err <= worst)` also latches NaN.
            if !(err <= worst) {
                worst = err;
            }
        }
    }
    worst
}

/// Random scan instance with `A_bar` drawn from a realistic decay range.
pub fn scan_instance(dims: ScanDims, seed: u64) -> [Tensor<f32>; 5] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ScanDims {
        batch,
        len,
        dim,
        state,
    } = dims;
    [
        Tensor::rand_uniform([batch, len, dim, state], 0.5, 0.999, &mut rng),
        Tensor::randn([batch, len, dim, state], 1.0, &mut rng),
        Tensor::randn([batch, len, state], 1.0, &mut rng),
        Tensor::randn([dim], 1.0, &mut rng),
        Tensor::randn([batch, len, dim], 1.0, &mut rng),
    ]
}

/// Chunked kernel against the sequential recurrence in `f32`.
pub fn scan_oracle(trials: usize, kernel: &ScanKernel) -> SuiteReport {
    timed(|| {
        let mut worst = 0.0f64;
        let mut worst_at = (0, 0);
        for trial in 0..trials {
            let [ab, bx, c, d, x] = scan_instance(SCAN_ORACLE_DIMS, trial as u64);
            let s = ScanInputs {
                dims: SCAN_ORACLE_DIMS,
                a_bar: ab.data(),
                b_bar_x: bx.data(),
                c: c.data(),
                d_skip: d.data(),
                x: x.data(),
            };
            let (reference, hs) = scan_reference(&s);
            for chunk in SCAN_ORACLE_CHUNKS {
                let fast = kernel(&s, chunk);
                if fast.len() != reference.len() {
                    return SuiteReport::failed(
                        "scan_oracle",
                        SCAN_ORACLE_TOLERANCE,
                        format!(
                            "chunk {chunk}: {} outputs, expected {}",
                            fast.len(),
                            reference.len()
                        ),
                    );
                }
                let err = max_rel(&s, &hs, &fast, &reference);
                if !(err <= worst) {
                    worst = err;
                    worst_at = (trial, chunk);
                }
            }
        }
        SuiteReport::new(
            "scan_oracle",
            worst,
            SCAN_ORACLE_TOLERANCE,
            format!(
                "{trials} instances x {} chunk sizes, worst at seed {} chunk {}",
                SCAN_ORACLE_CHUNKS.len(),
                worst_at.0,
                worst_at.1
            ),
        )
    })
}

type LossFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

/// One randomized grad-check case: inputs and the op under test. The
/// harness contracts the op's output with a fixed random readout.
struct OpCase {
    inputs: Vec<Tensor<f64>>,
    op: LossFn,
}

struct OpSpec {
    name: &'static str,
    make: fn(&mut ChaCha8Rng) -> OpCase,
}

fn extent(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), 0.5, 2.0, rng)
}

fn case(inputs: Vec<Tensor<f64>>, op: LossFn) -> OpCase {
    OpCase { inputs, op }
}

/// Shapes `(a, b)` that broadcast against each other.
fn broadcast_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let full = vec![extent(rng), extent(rng), extent(rng)];
    let other = match rng.random_range(0..4) {
        0 => full.clone(),
        1 => vec![full[2]],
        2 => vec![full[1], 1],
        _ => vec![full[0], 1, full[2]],
    };
    if rng.random_bool(0.5) {
        (full, other)
    } else {
        (other, full)
    }
}

fn binary(
    rng: &mut ChaCha8Rng,
    kind: for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> OpCase {
    let (sa, sb) = broadcast_pair(rng);
    let inputs = vec![normal(&sa, rng), normal(&sb, rng)];
    case(inputs, Box::new(move |_, v| kind(v[0], v[1])))
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    positive_domain: bool,
    f: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> OpCase {
    let shape = [extent(rng), extent(rng)];
    let x = if positive_domain {
        positive(&shape, rng)
    } else {
        normal(&shape, rng).map(|v| 2.0 * v)
    };
    case(vec![x], Box::new(move |_, v| f(v[0])))
}

fn learned_scan(dim: usize, state: usize, rng: &mut ChaCha8Rng) -> SsmLearned<f64> {
    // Init-scale projections leave Δ, B and C nearly constant, and the
    // init Δ bias keeps Δ near 1e-2; both put gradients at the
    // finite-difference noise floor. Widen the projections and recentre
    // the bias, as [`jitter`] does.
    let mut p = SsmLearned::init(dim, state, rng);
    p.x_proj = p.x_proj.map(|v| v * 25.0);
    p.dt_proj = p.dt_proj.map(|v| v * 25.0);
    p.dt_bias = Tensor::randn([dim], 0.5, rng);
    p
}

const OPS: &[OpSpec] = &[
    OpSpec {
        name: "add",
        make: |rng| binary(rng, |a, b| a.add(b)),
    },
    OpSpec {
        name: "sub",
        make: |rng| binary(rng, |a, b| a.sub(b)),
    },
    OpSpec {
        name: "mul",
        make: |rng| binary(rng, |a, b| a.mul(b)),
    },
    OpSpec {
        name: "exp",
        make: |rng| unary_case(rng, false, |x| Ok(x.scale(0.5).exp())),
    },
    OpSpec {
        name: "log",
        make: |rng| unary_case(rng, true, |x| x.log()),
    },
    OpSpec {
        name: "neg",
        make: |rng| unary_case(rng, false, |x| Ok(x.neg())),
    },
    OpSpec {
        name: "silu",
        make: |rng| unary_case(rng, false, |x| Ok(x.silu())),
    },
    OpSpec {
        name: "softplus",
        make: |rng| unary_case(rng, false, |x| Ok(x.softplus())),
    },
    OpSpec {
        name: "sqrt",
        make: |rng| unary_case(rng, true, |x| x.sqrt()),
    },
    OpSpec {
        name: "scale",
        make: |rng| {
            let s = rng.random_range(-3.0..3.0);
            let x = normal(&[extent(rng), extent(rng)], rng);
            case(vec![x], Box::new(move |_, v| Ok(v[0].scale(s))))
        },
    },
    OpSpec {
        name: "add_scalar",
        make: |rng| {
            let s = rng.random_range(-3.0..3.0);
            let x = normal(&[extent(rng), extent(rng)], rng);
            case(vec![x], Box::new(move |_, v| Ok(v[0].add_scalar(s))))
        },
    },
    OpSpec {
        name: "sum",
        make: |rng| unary_case(rng, false, |x| Ok(x.sum())),
    },
    OpSpec {
        name: "mean",
        make: |rng| unary_case(rng, false, |x| Ok(x.mean())),
    },
    OpSpec {
        name: "reshape",
        make: |rng| {
            let (a, b, c) = (extent(rng), extent(rng), extent(rng));
            let x = normal(&[a, b, c], rng);
            case(vec![x], Box::new(move |_, v| v[0].reshape(&[c, a * b])))
        },
    },
    OpSpec {
        name: "permute",
        make: |rng| {
            const PERMS: [[usize; 3]; 6] = [
                [0, 1, 2],
                [0, 2, 1],
                [1, 0, 2],
                [1, 2, 0],
                [2, 0, 1],
                [2, 1, 0],
            ];
            let perm = PERMS[rng.random_range(0..PERMS.len())];
            let x = normal(&[extent(rng), extent(rng), extent(rng)], rng);
            case(vec![x], Box::new(move |_, v| v[0].permute(&perm)))
        },
    },
    OpSpec {
        name: "narrow",
        make: |rng| {
            let shape = [extent(rng), extent(rng) + 1, extent(rng)];
            let axis = rng.random_range(0..3);
            let len = rng.random_range(1..=shape[axis]);
            let start = rng.random_range(0..=shape[axis] - len);
            let x = normal(&shape, rng);
            case(vec![x], Box::new(move |_, v| v[0].narrow(axis, start, len)))
        },
    },
    OpSpec {
        name: "concat",
        make: |rng| {
            let axis = rng.random_range(0..3);
            let base = [extent(rng), extent(rng), extent(rng)];
            let parts: Vec<_> = (0..rng.random_range(2..=3))
                .map(|_| {
                    let mut s = base;
                    s[axis] = extent(rng);
                    normal(&s, rng)
                })
                .collect();
            case(parts, Box::new(move |_, v| Var::concat(v, axis)))
        },
    },
    OpSpec {
        name: "matmul",
        make: |rng| {
            let (b, m, k, n) = (extent(rng), extent(rng), extent(rng), extent(rng));
            let lhs = normal(&[b, m, k], rng);
            let rhs = if rng.random_bool(0.5) {
                normal(&[k, n], rng)
            } else {
                normal(&[b, k, n], rng)
            };
            case(vec![lhs, rhs], Box::new(|_, v| v[0].matmul(v[1])))
        },
    },
    OpSpec {
        name: "linear",
        make: |rng| {
            let (b, k, n) = (extent(rng), extent(rng), extent(rng));
            let inputs = vec![
                normal(&[b, 2, k], rng),
                normal(&[k, n], rng),
                normal(&[n], rng),
            ];
            case(inputs, Box::new(|_, v| v[0].linear(v[1], Some(v[2]))))
        },
    },
    OpSpec {
        name: "layer_norm",
        make: |rng| {
            // Two channels normalize to ±1 regardless of input, leaving only
            // noise-level gradients.
            let c = extent(rng) + 2;
            let inputs = vec![
                normal(&[extent(rng), extent(rng), c], rng),
                normal(&[c], rng),
                normal(&[c], rng),
            ];
            case(
                inputs,
                Box::new(|_, v| v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS)),
            )
        },
    },
    OpSpec {
        name: "depthwise_conv2d",
        make: |rng| {
            let c = extent(rng);
            let k = [1, 3][rng.random_range(0..2)];
            let padding = k / 2;
            let inputs = vec![
                normal(
                    &[extent(rng).min(2), c, extent(rng) + 1, extent(rng) + 1],
                    rng,
                ),
                normal(&[c, 1, k, k], rng),
            ];
            case(
                inputs,
                Box::new(move |_, v| v[0].depthwise_conv2d(v[1], padding)),
            )
        },
    },
    OpSpec {
        name: "avg_pool2d",
        make: |rng| {
            let window = rng.random_range(1..=3);
            let x = normal(
                &[
                    extent(rng).min(2),
                    extent(rng),
                    window * extent(rng).min(2),
                    window * extent(rng).min(2),
                ],
                rng,
            );
            case(vec![x], Box::new(move |_, v| v[0].avg_pool2d(window)))
        },
    },
    OpSpec {
        name: "label_smoothed_ce",
        make: |rng| {
            let (b, k) = (extent(rng), extent(rng) + 1);
            let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let smoothing = [0.0, 0.1, 0.3][rng.random_range(0..3)];
            let logits = normal(&[b, k], rng).map(|v| 2.0 * v);
            case(
                vec![logits],
                Box::new(move |_, v| v[0].label_smoothed_ce(&targets, smoothing)),
            )
        },
    },
    OpSpec {
        name: "discretize",
        make: |rng| {
            let (b, l, d, n) = (extent(rng), extent(rng), extent(rng), extent(rng));
            let inputs = vec![
                Tensor::rand_uniform([b, l, d], 0.05, 0.5, rng),
                Tensor::rand_uniform([d, n], -2.0, -0.5, rng),
                normal(&[b, l, n], rng),
                normal(&[b, l, d], rng),
            ];
            case(
                inputs,
                Box::new(|_, v| {
                    let s = discretize(v[0], v[1], v[2], v[3])?;
                    s.a_bar.mul(s.b_bar_x)
                }),
            )
        },
    },
    OpSpec {
        name: "selective_scan",
        make: |rng| {
            let (b, l, d, n) = (
                extent(rng).min(2),
                extent(rng) + 2,
                extent(rng),
                extent(rng),
            );
            let mode = if rng.random_bool(0.5) {
                ScanMode::Reference
            } else {
                ScanMode::Chunked(rng.random_range(1..=l))
            };
            let inputs = vec![
                Tensor::rand_uniform([b, l, d, n], 0.3, 0.99, rng),
                normal(&[b, l, d, n], rng),
                normal(&[b, l, n], rng),
                normal(&[d], rng),
                normal(&[b, l, d], rng),
            ];
            case(
                inputs,
                Box::new(move |_, v| {
                    let step = DiscretizedStep {
                        a_bar: v[0],
                        b_bar_x: v[1],
                    };
                    selective_scan(&step, v[2], v[3], v[4], mode)
                }),
            )
        },
    },
    OpSpec {
        name: "s6_fused",
        make: |rng| {
            let (b, l, d, n) = (
                extent(rng).min(2),
                extent(rng) + 2,
                extent(rng),
                extent(rng),
            );
            let chunk = rng.random_range(1..=l);
            let p = learned_scan(d, n, rng);
            let mut inputs: Vec<_> = p.tensors().into_iter().cloned().collect();
            inputs.push(normal(&[b, l, d], rng));
            case(
                inputs,
                Box::new(move |_, v| {
                    s6_forward(
                        v[5],
                        &SsmVars::from_slice(&v[..5]),
                        ScanMode::Chunked(chunk),
                    )
                }),
            )
        },
    },
    OpSpec {
        name: "ss2d",
        make: |rng| {
            let (h, w, d) = (extent(rng).min(3), extent(rng).min(3), extent(rng).min(3));
            let n = rng.random_range(1..=2);
            let mut inputs = vec![normal(&[1, d, h, w], rng)];
            for _ in 0..4 {
                inputs.extend(learned_scan(d, n, rng).tensors().into_iter().cloned());
            }
            case(
                inputs,
                Box::new(|_, v| {
                    let dirs =
                        std::array::from_fn(|k| SsmVars::from_slice(&v[1 + 5 * k..6 + 5 * k]));
                    ss2d(v[0], &dirs, ScanMode::Chunked(2))
                }),
            )
        },
    },
];

pub fn grad_op_names() -> Vec<&'static str> {
    OPS.iter().map(|o| o.name).collect()
}

/// `Σ f(inputs) ⊙ R` for a fixed random `R`, so no output coordinate
/// is weighted symmetrically with another.
fn readout_check(op: &LossFn, inputs: &[Tensor<f64>], readout_seed: u64, eps: f64) -> Result<f64> {
    let shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        op(&tape, &vars)?.shape()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(readout_seed);
    let readout = Tensor::<f64>::randn(shape, 1.0, &mut rng);
    grad_check_many(
        |tape, v| Ok(op(tape, v)?.mul(tape.constant(readout.clone()))?.sum()),
        inputs,
        eps,
    )
}

/// Finite-difference check of every differentiable op over `trials`
/// seeded cases each, in `f64`. One report per op.
pub fn grad_ops(trials: usize) -> Vec<SuiteReport> {
    OPS.iter()
        .enumerate()
        .map(|(k, spec)| {
            timed(|| {
                let name = format!("grad/{}", spec.name);
                let mut worst = 0.0f64;
                for trial in 0..trials {
                    let seed = (k as u64) << 32 | trial as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let c = (spec.make)(&mut rng);
                    match readout_check(&c.op, &c.inputs, seed ^ 0x5eed, 1e-5) {
                        Ok(err) if err <= worst => {}
                        Ok(err) => worst = err,
                        Err(e) => return SuiteReport::failed(name, GRAD_TOLERANCE, e),
                    }
                }
                SuiteReport::new(name, worst, GRAD_TOLERANCE, format!("{trials} trials"))
            })
        })
        .collect()
}

/// Spreads every parameter away from its init so no gradient is tiny.
/// The Δ bias is recentred on zero: at init Δ ~ 1e-2 and the state
/// path's gradients sit at the finite-difference noise floor.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.params_mut() {
        let noise = Tensor::<f64>::randn(p.value.shape().to_vec(), 0.3, &mut rng);
        let keep = if p.name.ends_with("dt_bias") {
            0.0
        } else {
            1.0
        };
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v = keep * *v + n;
        }
    }
}

/// Whole VSS block at `(1, 4, 3, 3)` with `E = 1`, `N = 2`, input and
/// every parameter perturbed.
pub fn grad_vss_block(seed: u64) -> SuiteReport {
    timed(|| {
        let dims = VssDims {
            dim: 4,
            expansion: 1,
            state: 2,
            conv_kernel: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blk = VssBlock::new(&mut store, "blk", dims, &mut rng);
        jitter(&mut store, seed + 1);
        let mut inputs = vec![Tensor::<f64>::randn([1, 4, 3, 3], 1.0, &mut rng)];
        inputs.extend(store.params().iter().map(|p| p.value.clone()));
        let op: LossFn = Box::new(move |_, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            blk.forward(&b, v[0], ScanMode::Chunked(4))
        });
        let n = inputs.iter().map(Tensor::numel).sum::<usize>();
        match readout_check(&op, &inputs, seed + 2, 1e-5) {
            Ok(err) => SuiteReport::new(
                "grad/vss_block",
                err,
                GRAD_TOLERANCE,
                format!("{n} coordinates"),
            ),
            Err(e) => SuiteReport::failed("grad/vss_block", GRAD_TOLERANCE, e),
        }
    })
}

/// Full micro-preset model on one 32×32 image: every parameter and pixel.
///
/// The step is `1e-4` rather than `1e-5`: through ~20 stacked layers the
/// loss is O(10), so the smaller step's cancellation noise reaches the
/// smallest gradients.
pub fn grad_micro_model(variant: Variant, seed: u64) -> SuiteReport {
    let name = format!("grad/micro_model_{variant}");
    timed(|| {
        let mut model = match Model::<f64>::new(ModelConfig::micro(3, variant), seed) {
            Ok(m) => m,
            Err(e) => return SuiteReport::failed(name, GRAD_TOLERANCE, e),
        };
        jitter(model.params_mut(), seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let mut inputs = vec![Tensor::<f64>::randn([1, 3, 32, 32], 1.0, &mut rng)];
        inputs.extend(model.params().params().iter().map(|p| p.value.clone()));
        let n = inputs.iter().map(Tensor::numel).sum::<usize>();
        let op: LossFn = Box::new(move |_, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            model.forward(&b, v[0], ScanMode::Chunked(4))
        });
        match readout_check(&op, &inputs, seed + 3, MICRO_MODEL_EPS) {
            Ok(err) => SuiteReport::new(name, err, GRAD_TOLERANCE, format!("{n} coordinates")),
            Err(e) => SuiteReport::failed(name, GRAD_TOLERANCE, e),
        }
    })
}

/// Error of the first-order input discretization against exact ZOH for
/// the scalar system `A = -1`, `B = 1`, `x = 1`, at each step size.
pub fn discretization_errors() -> Result<Vec<(f64, f64)>> {
    let a = Tensor::<f64>::from_f64s([1, 1], &[-1.0])?;
    let b = Tensor::from_f64s([1, 1, 1], &[1.0])?;
    let x = Tensor::from_f64s([1, 1, 1], &[1.0])?;
    DISCRETIZATION_DELTAS
        .iter()
        .map(|&dt| {
            let delta = Tensor::from_f64s([1, 1, 1], &[dt])?;
            let (_, b_bar_x) = discretize_forward(&delta, &a, &b, &x)?;
            // (exp(ΔA) - 1)/A · B with A = -1.
            let exact = -(-dt).exp_m1();
            Ok((dt, (b_bar_x.item() - exact).abs()))
        })
        .collect()
}

/// Halving Δ must cut the discretization error by about 4.
pub fn discretization_order() -> SuiteReport {
    timed(|| match discretization_errors() {
        Ok(errs) => {
            let ratios: Vec<f64> = errs.windows(2).map(|w| w[0].1 / w[1].1).collect();
            let worst = ratios
                .iter()
                .map(|r| (r / 4.0 - 1.0).abs())
                .fold(0.0, f64::max);
            let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.4}")).collect();
            SuiteReport::new(
                "discretization_order",
                worst,
                0.1,
                format!("error ratios {}", shown.join(", ")),
            )
        }
        Err(e) => SuiteReport::failed("discretization_order", 0.1, e),
    })
}

/// Expand then inverse-reorder returns four bitwise copies; expand then
/// merge returns exactly `4·x`. Every map size up to `max_side²`.
pub fn cross_scan_round_trip(max_side: usize, seed: u64) -> SuiteReport {
    timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mismatches = 0usize;
        let mut worst = 0.0f64;
        for h in 1..=max_side {
            for w in 1..=max_side {
                let order = ScanOrder::new(h, w);
                let d = rng.random_range(1..=3);
                let x = Tensor::<f32>::randn([2, h * w, d], 1.0, &mut rng);
                let check = || -> Result<(bool, f64)> {
                    let expanded = expand_tensor(&x, &order)?;
                    let back = inverse_reorder_tensor(&expanded, &order)?;
                    let copies_ok = (0..2).all(|b| {
                        let src = &x.data()[b * h * w * d..(b + 1) * h * w * d];
                        back.data()[b * 4 * h * w * d..(b + 1) * 4 * h * w * d]
                            .chunks_exact(h * w * d)
                            .all(|c| c == src)
                    });
                    let merged = merge_tensor(&expanded, &order)?;
                    Ok((copies_ok, merged.max_abs_diff(&x.map(|v| 4.0 * v))))
                };
                match check() {
                    Ok((ok, diff)) => {
                        mismatches += usize::from(!ok || diff != 0.0);
                        worst = worst.max(diff);
                    }
                    Err(e) => return SuiteReport::failed("cross_scan_round_trip", 0.0, e),
                }
            }
        }
        let mut r = SuiteReport::new(
            "cross_scan_round_trip",
            worst,
            0.0,
            format!("{} maps, {mismatches} mismatched", max_side * max_side),
        );
        r.passed &= mismatches == 0;
        r
    })
}

/// Zero-initialized residual model against the plain model with the same
/// backbone: identical logits, and exactly `C1·C4 + C4` extra scalars.
pub fn residual_equivalence(seed: u64) -> SuiteReport {
    timed(|| {
        let name = "residual_equivalence";
        let build = |v| Model::<f64>::new(ModelConfig::nano(7, v), seed);
        let (plain, res) = match (build(Variant::Plain), build(Variant::GlobalResidual)) {
            (Ok(p), Ok(r)) => (p, r),
            (Err(e), _) | (_, Err(e)) => return SuiteReport::failed(name, 0.0, e),
        };
        let [c1, .., c4] = plain.config().dims;
        let delta = res.num_params() as i64 - plain.num_params() as i64;
        let shared = plain
            .params()
            .params()
            .iter()
            .zip(res.params().params())
            .all(|(a, b)| a == b);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = Tensor::<f64>::randn([2, 3, 32, 32], 1.0, &mut rng);
        let mode = ScanMode::default();
        let diff = match (plain.logits(&x, mode), res.logits(&x, mode)) {
            (Ok(a), Ok(b)) => a.max_abs_diff(&b),
            (Err(e), _) | (_, Err(e)) => return SuiteReport::failed(name, 0.0, e),
        };
        let want = (c1 * c4 + c4) as i64;
        let mut r = SuiteReport::new(
            name,
            diff,
            0.0,
            format!("parameter delta {delta} (expected {want}), backbone shared: {shared}"),
        );
        r.passed &= delta == want && shared;
        r
    })
}

/// Encode, decode, and compare every tensor and the logits bitwise.
pub fn checkpoint_round_trip(seed: u64) -> SuiteReport {
    timed(|| {
        let name = "checkpoint_round_trip";
        let model = match Model::<f32>::new(ModelConfig::micro(5, Variant::GlobalResidual), seed) {
            Ok(m) => m,
            Err(e) => return SuiteReport::failed(name, 0.0, e),
        };
        let bytes = checkpoint::encode(&model);
        let back = match checkpoint::decode(&bytes, "<memory>".as_ref()) {
            Ok(m) => m,
            Err(e) => return SuiteReport::failed(name, 0.0, e),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = Tensor::<f32>::randn([1, 3, 32, 32], 1.0, &mut rng);
        let mode = ScanMode::default();
        let diff = match (model.logits(&x, mode), back.logits(&x, mode)) {
            (Ok(a), Ok(b)) => a.max_abs_diff(&b),
            (Err(e), _) | (_, Err(e)) => return SuiteReport::failed(name, 0.0, e),
        };
        let same = back.params() == model.params() && back.config() == model.config();
        let mut r = SuiteReport::new(name, diff, 0.0, format!("{} bytes", bytes.len()));
        r.passed &= same;
        r
    })
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub scan_trials: usize,
    pub grad_trials: usize,
    /// The whole-model check dominates the runtime.
    pub micro_model: bool,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            scan_trials: 100,
            grad_trials: 100,
            micro_model: true,
            seed: 0,
        }
    }
}

/// Every suite in a fixed order; `on_report` sees each result as it lands.
pub fn run_all(
    opts: &VerifyOptions,
    kernel: &ScanKernel,
    mut on_report: impl FnMut(&SuiteReport),
) -> Vec<SuiteReport> {
    let mut out = Vec::new();
    let mut push = |r: SuiteReport| {
        on_report(&r);
        out.push(r);
    };
    push(scan_oracle(opts.scan_trials, kernel));
    for r in grad_ops(opts.grad_trials) {
        push(r);
    }
    push(grad_vss_block(opts.seed));
    if opts.micro_model {
        for v in [Variant::Plain, Variant::GlobalResidual] {
            push(grad_micro_model(v, opts.seed));
        }
    }
    push(discretization_order());
    push(cross_scan_round_trip(16, opts.seed));
    push(residual_equivalence(opts.seed));
    push(checkpoint_round_trip(opts.seed));
    out
}
