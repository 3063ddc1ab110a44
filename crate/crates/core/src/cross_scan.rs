//! Four-direction cross scan over 2-D feature maps.
//!
//! A `(H, W)` map is flattened into four sequences of length `L = H·W`:
//!
//! | direction | traversal                                   |
//! |-----------|---------------------------------------------|
//! | 0         | row-major: left→right, then top→bottom      |
//! | 1         | column-major: top→bottom, then left→right   |
//! | 2         | direction 0 reversed                        |
//! | 3         | direction 1 reversed                        |
//!
//! Every direction gets its own selective scan; the outputs are put back in
//! spatial order and summed in direction order 0, 1, 2, 3.

use crate::autodiff::Var;
use crate::error::{Result, TensorError};
use crate::ssm::{s6_forward, ScanMode, SsmVars};
use crate::tensor::{Real, Tensor};

pub const DIRECTIONS: usize = 4;

/// For each direction, the row-major spatial index visited at each
/// sequence position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    pub height: usize,
    pub width: usize,
    pub perms: [Vec<usize>; DIRECTIONS],
}

impl ScanOrder {
    pub fn new(height: usize, width: usize) -> Self {
        let len = height * width;
        let row_major: Vec<usize> = (0..len).collect();
        let col_major: Vec<usize> = (0..len)
            .map(|j| (j % height) * width + j / height)
            .collect();
        let rev = |p: &[usize]| p.iter().rev().copied().collect::<Vec<_>>();
        Self {
            height,
            width,
            perms: [
                row_major.clone(),
                col_major.clone(),
                rev(&row_major),
                rev(&col_major),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn seq_dims(op: &'static str, shape: &[usize], order: &ScanOrder) -> Result<(usize, usize)> {
    match *shape {
        [b, l, d] if l == order.len() => Ok((b, d)),
        [b, h, w, d] if h == order.height && w == order.width => Ok((b, d)),
        _ => Err(TensorError::invalid(
            op,
            format!(
                "expected (batch, {}, channels) for a {}x{} map, got {shape:?}",
                order.len(),
                order.height,
                order.width
            ),
        )),
    }
}

/// `(B, L, D)` channel-last sequence → `(B, 4, L, D)` directional copies.
pub fn expand_tensor<T: Real>(x: &Tensor<T>, order: &ScanOrder) -> Result<Tensor<T>> {
    let (batch, dim) = seq_dims("cross_scan_expand", x.shape(), order)?;
    let len = order.len();
    let mut out = Vec::with_capacity(batch * DIRECTIONS * len * dim);
    for b in 0..batch {
        let src = &x.data()[b * len * dim..(b + 1) * len * dim];
        for perm in &order.perms {
            for &p in perm {
                out.extend_from_slice(&src[p * dim..(p + 1) * dim]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch, DIRECTIONS, len, dim], out))
}

/// Puts each direction of `(B, 4, L, D)` back into spatial order, keeping
/// the directions separate.
pub fn inverse_reorder_tensor<T: Real>(y: &Tensor<T>, order: &ScanOrder) -> Result<Tensor<T>> {
    let (batch, len, dim) = merge_dims(y.shape(), order)?;
    let mut out = vec![T::zero(); y.numel()];
    for b in 0..batch {
        for (k, perm) in order.perms.iter().enumerate() {
            let base = (b * DIRECTIONS + k) * len * dim;
            for (j, &p) in perm.iter().enumerate() {
                out[base + p * dim..base + (p + 1) * dim]
                    .copy_from_slice(&y.data()[base + j * dim..base + (j + 1) * dim]);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

fn merge_dims(shape: &[usize], order: &ScanOrder) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, DIRECTIONS, l, d] if l == order.len() => Ok((b, l, d)),
        _ => Err(TensorError::invalid(
            "cross_merge",
            format!(
                "expected (batch, 4, {}, channels) for a {}x{} map, got {shape:?}",
                order.len(),
                order.height,
                order.width
            ),
        )),
    }
}

/// `(B, 4, L, D)` → `(B, L, D)`: inverse-permute every direction and sum.
pub fn merge_tensor<T: Real>(y: &Tensor<T>, order: &ScanOrder) -> Result<Tensor<T>> {
    let (batch, len, dim) = merge_dims(y.shape(), order)?;
    let mut out = vec![T::zero(); batch * len * dim];
    for b in 0..batch {
        let dst = &mut out[b * len * dim..(b + 1) * len * dim];
        for (k, perm) in order.perms.iter().enumerate() {
            let base = (b * DIRECTIONS + k) * len * dim;
            for (j, &p) in perm.iter().enumerate() {
                let src = &y.data()[base + j * dim..base + (j + 1) * dim];
                for (o, &v) in dst[p * dim..(p + 1) * dim].iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch, len, dim], out))
}

/// Differentiable expand of a channel-last `(B, L, D)` or `(B, H, W, D)`
/// sequence.
pub fn expand<'t, T: Real>(x: Var<'t, T>, order: &ScanOrder) -> Result<Var<'t, T>> {
    let value = expand_tensor(&x.value(), order)?;
    let order = order.clone();
    Ok(x.tape().push("cross_scan_expand", value, &[x], move |ctx| {
        let g = Tensor::from_parts(ctx.output.shape().to_vec(), ctx.grad.to_vec());
        let merged = merge_tensor(&g, &order).expect("shape checked in forward");
        vec![Some(merged.into_data())]
    }))
}

/// Differentiable merge back to channel-last `(B, L, D)`.
pub fn merge<'t, T: Real>(y: Var<'t, T>, order: &ScanOrder) -> Result<Var<'t, T>> {
    let value = merge_tensor(&y.value(), order)?;
    let order = order.clone();
    Ok(y.tape().push("cross_merge", value, &[y], move |ctx| {
        let g = Tensor::from_parts(ctx.output.shape().to_vec(), ctx.grad.to_vec());
        vec![Some(
            expand_tensor(&g, &order)
                .expect("shape checked in forward")
                .into_data(),
        )]
    }))
}

fn feature_map_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| {
        TensorError::invalid(
            op,
            format!("expected (batch, channels, height, width), got {shape:?}"),
        )
    })
}

/// Feature map `(B, D, H, W)` → directional sequences `(B, 4, H·W, D)`.
pub fn cross_scan_expand<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let [_, _, h, w] = feature_map_dims("cross_scan_expand", &x.shape())?;
    expand(x.permute(&[0, 2, 3, 1])?, &ScanOrder::new(h, w))
}

/// Directional outputs `(B, 4, H·W, D)` → feature map `(B, D, H, W)`.
pub fn cross_merge<'t, T: Real>(y: Var<'t, T>, height: usize, width: usize) -> Result<Var<'t, T>> {
    let order = ScanOrder::new(height, width);
    let merged = merge(y, &order)?;
    let [b, _, d] = <[usize; 3]>::try_from(merged.shape()).expect("merge output is 3-D");
    merged
        .reshape(&[b, height, width, d])?
        .permute(&[0, 3, 1, 2])
}

/// SS2D over a channel-last map `(B, H, W, D)`; returns the same shape.
pub fn ss2d_channel_last<'t, T: Real>(
    x: Var<'t, T>,
    dirs: &[SsmVars<'t, T>; DIRECTIONS],
    mode: ScanMode,
) -> Result<Var<'t, T>> {
    let [b, h, w, d] = <[usize; 4]>::try_from(x.shape()).map_err(|_| {
        TensorError::invalid(
            "ss2d",
            format!(
                "expected (batch, height, width, channels), got {:?}",
                x.shape()
            ),
        )
    })?;
    let order = ScanOrder::new(h, w);
    let len = h * w;
    let seqs = expand(x, &order)?;
    let mut outs = Vec::with_capacity(DIRECTIONS);
    for (k, p) in dirs.iter().enumerate() {
        let seq = seqs.narrow(1, k, 1)?.reshape(&[b, len, d])?;
        let y = s6_forward(seq, p, mode)?;
        outs.push(y.reshape(&[b, 1, len, d])?);
    }
    let stacked = Var::concat(&outs, 1)?;
    merge(stacked, &order)?.reshape(&[b, h, w, d])
}

/// SS2D over a feature map `(B, D, H, W)`: expand, one selective scan per
/// direction with its own parameters, merge.
pub fn ss2d<'t, T: Real>(
    x: Var<'t, T>,
    dirs: &[SsmVars<'t, T>; DIRECTIONS],
    mode: ScanMode,
) -> Result<Var<'t, T>> {
    feature_map_dims("ss2d", &x.shape())?;
    let y = ss2d_channel_last(x.permute(&[0, 2, 3, 1])?, dirs, mode)?;
    y.permute(&[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, Tape};
    use crate::ssm::SsmLearned;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s([1, 1, h, w], values).unwrap()
    }

    fn directions(x: &Tensor<f64>) -> Vec<Vec<f64>> {
        let tape = Tape::new();
        let e = cross_scan_expand(tape.constant(x.clone()))
            .unwrap()
            .to_tensor();
        let l = e.shape()[2];
        (0..4)
            .map(|k| e.data()[k * l..(k + 1) * l].to_vec())
            .collect()
    }

    #[test]
    fn two_by_two_conventions() {
        let d = directions(&map(2, 2, &[1., 2., 3., 4.]));
        assert_eq!(d[0], [1., 2., 3., 4.]);
        assert_eq!(d[1], [1., 3., 2., 4.]);
        assert_eq!(d[2], [4., 3., 2., 1.]);
        assert_eq!(d[3], [4., 2., 3., 1.]);
    }

    #[test]
    fn degenerate_maps() {
        let d = directions(&map(1, 1, &[7.]));
        assert!(d.iter().all(|s| s == &[7.]));
        let d = directions(&map(3, 1, &[1., 2., 3.]));
        assert_eq!(d[0], d[1]);
    }

    #[test]
    fn merge_examples() {
        let order = ScanOrder::new(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 6, 3], 1.0, &mut rng);
        let e = expand_tensor(&x, &order).unwrap();
        let m = merge_tensor(&e, &order).unwrap();
        for (a, b) in m.data().iter().zip(x.data()) {
            assert_eq!(*a, 4.0 * b);
        }
        // Only direction 2 populated.
        let mut only = Tensor::<f64>::zeros([2, 4, 6, 3]);
        for b in 0..2 {
            let base = (b * 4 + 2) * 18;
            only.data_mut()[base..base + 18].copy_from_slice(&e.data()[base..base + 18]);
        }
        assert_eq!(merge_tensor(&only, &order).unwrap(), x);
        assert!(merge_tensor(&Tensor::<f64>::zeros([1, 4, 5, 3]), &order).is_err());
    }

    #[test]
    fn feature_map_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([2, 3, 4, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let e = cross_scan_expand(tape.constant(x.clone())).unwrap();
        let m = cross_merge(e, 4, 5).unwrap().to_tensor();
        assert_eq!(m, x.map(|v| 4.0 * v));
    }

    fn learned(dim: usize, state: usize, seed: u64) -> [SsmLearned<f64>; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|_| {
            let mut p = SsmLearned::init(dim, state, &mut rng);
            p.x_proj = p.x_proj.map(|v| v * 25.0);
            p.dt_proj = p.dt_proj.map(|v| v * 25.0);
            p
        })
    }

    fn run_ss2d(x: &Tensor<f64>, params: &[SsmLearned<f64>; 4]) -> Tensor<f64> {
        let tape = Tape::new();
        let dirs = std::array::from_fn(|k| params[k].bind(&tape, false));
        ss2d(tape.constant(x.clone()), &dirs, ScanMode::Chunked(4))
            .unwrap()
            .to_tensor()
    }

    #[test]
    fn ss2d_shape_and_zero_input() {
        let params = learned(8, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn([2, 8, 4, 4], 1.0, &mut rng);
        assert_eq!(run_ss2d(&x, &params).shape(), &[2, 8, 4, 4]);
        let z = run_ss2d(&Tensor::zeros([2, 8, 4, 4]), &params);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_equivariance_with_swapped_directions() {
        let params = learned(3, 2, 5);
        let swapped = [
            params[2].clone(),
            params[3].clone(),
            params[0].clone(),
            params[1].clone(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn([1, 3, 3, 3], 1.0, &mut rng);
        let rot = |t: &Tensor<f64>| {
            let mut out = t.clone();
            for c in 0..3 {
                for p in 0..9 {
                    out.data_mut()[c * 9 + 8 - p] = t.data()[c * 9 + p];
                }
            }
            out
        };
        let y = run_ss2d(&x, &params);
        let y_rot = run_ss2d(&rot(&x), &swapped);
        assert!(rot(&y_rot).max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn every_pixel_sees_every_pixel() {
        let params = learned(2, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn([1, 2, 3, 3], 1.0, &mut rng);
        let y = run_ss2d(&x, &params);
        for p in 0..9 {
            let mut x2 = x.clone();
            x2.data_mut()[p] += 0.5;
            let y2 = run_ss2d(&x2, &params);
            for q in 0..9 {
                let changed = (0..2).any(|c| y.data()[c * 9 + q] != y2.data()[c * 9 + q]);
                assert!(changed, "pixel {p} does not reach {q}");
            }
        }
    }

    #[test]
    fn ss2d_gradient() {
        let params = learned(2, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn([1, 2, 3, 2], 1.0, &mut rng);
        let readout = Tensor::<f64>::randn([1, 2, 3, 2], 1.0, &mut rng);
        let mut inputs = vec![x];
        for p in &params {
            inputs.extend(p.tensors().into_iter().cloned());
        }
        let err = grad_check_many(
            |tape, v| {
                let dirs = std::array::from_fn(|k| SsmVars::from_slice(&v[1 + 5 * k..6 + 5 * k]));
                let y = ss2d(v[0], &dirs, ScanMode::Chunked(2))?;
                Ok(y.mul(tape.constant(readout.clone()))?.sum())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
