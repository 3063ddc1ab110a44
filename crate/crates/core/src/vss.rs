//! The VSS block: pre-norm, a gated branch around SS2D, local residual.
//!
//! ```text
//! x ─┬─ LN ─ in_proj ─┬─ main ─ dwconv ─ SiLU ─ SS2D ─ LN ─┐
//!    │                └─ gate ─ SiLU ────────────────────── ⊙ ─ out_proj ─┐
//!    └──────────────────────────────────────────────────────────────────── + ─ out
//! ```

use rand::Rng;

use crate::autodiff::Var;
use crate::cross_scan::{ss2d_channel_last, DIRECTIONS};
use crate::error::{Result, TensorError};
use crate::params::{Bound, LayerNormIds, ParamId, ParamStore, SsmIds};
use crate::ssm::{ScanMode, SsmLearned};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VssDims {
    pub dim: usize,
    pub expansion: usize,
    pub state: usize,
    pub conv_kernel: usize,
}

impl VssDims {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            expansion: 2,
            state: 16,
            conv_kernel: 3,
        }
    }

    pub fn inner(&self) -> usize {
        self.dim * self.expansion
    }
}

#[derive(Clone, Debug)]
pub struct VssBlock {
    pub dims: VssDims,
    pub norm: LayerNormIds,
    /// `(D, 2·E·D)`: main branch columns first, then gate.
    pub in_proj: ParamId,
    /// `(E·D, 1, k, k)`.
    pub conv_weight: ParamId,
    /// `(E·D, 1, 1)`.
    pub conv_bias: ParamId,
    pub ssm: [SsmIds; DIRECTIONS],
    pub out_norm: LayerNormIds,
    /// `(E·D, D)`.
    pub out_proj: ParamId,
}

impl VssBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: VssDims,
        rng: &mut R,
    ) -> Self {
        let (d, inner, k) = (dims.dim, dims.inner(), dims.conv_kernel);
        let norm = LayerNormIds::new(store, &format!("{prefix}.norm"), d);
        let in_proj = store.add(
            format!("{prefix}.in_proj.weight"),
            Tensor::trunc_normal([d, 2 * inner], INIT_STD, rng),
            true,
        );
        let conv_weight = store.add(
            format!("{prefix}.conv.weight"),
            Tensor::trunc_normal([inner, 1, k, k], INIT_STD, rng),
            true,
        );
        let conv_bias = store.add(
            format!("{prefix}.conv.bias"),
            Tensor::zeros([inner, 1, 1]),
            false,
        );
        let ssm = std::array::from_fn(|dir| {
            let init = SsmLearned::init(inner, dims.state, rng);
            SsmIds::new(store, &format!("{prefix}.ss2d.dir{dir}"), init)
        });
        let out_norm = LayerNormIds::new(store, &format!("{prefix}.out_norm"), inner);
        let out_proj = store.add(
            format!("{prefix}.out_proj.weight"),
            Tensor::trunc_normal([inner, d], INIT_STD, rng),
            true,
        );
        Self {
            dims,
            norm,
            in_proj,
            conv_weight,
            conv_bias,
            ssm,
            out_norm,
            out_proj,
        }
    }

    /// Feature map `(B, D, H, W)` in, same shape out.
    pub fn forward<'t, T: Real>(
        &self,
        b: &Bound<'t, T>,
        x: Var<'t, T>,
        mode: ScanMode,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.dims.dim {
            return Err(TensorError::invalid(
                "vss_block",
                format!(
                    "expected (batch, {}, height, width), got {shape:?}",
                    self.dims.dim
                ),
            ));
        }
        self.forward_channel_last(b, x.permute(&[0, 2, 3, 1])?, mode)?
            .permute(&[0, 3, 1, 2])
    }

    /// Channel-last `(B, H, W, D)` in, same shape out.
    pub fn forward_channel_last<'t, T: Real>(
        &self,
        b: &Bound<'t, T>,
        x: Var<'t, T>,
        mode: ScanMode,
    ) -> Result<Var<'t, T>> {
        self.run(b, x, mode, true)
    }

    fn run<'t, T: Real>(
        &self,
        b: &Bound<'t, T>,
        x: Var<'t, T>,
        mode: ScanMode,
        gated: bool,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[3] != self.dims.dim {
            return Err(TensorError::invalid(
                "vss_block",
                format!(
                    "expected (batch, height, width, {}), got {shape:?}",
                    self.dims.dim
                ),
            ));
        }
        let inner = self.dims.inner();
        let u = self.norm.apply(b, x)?;
        let z = u.linear(b[self.in_proj], None)?;
        let main = z
            .narrow(3, 0, inner)?
            .permute(&[0, 3, 1, 2])?
            .depthwise_conv2d(b[self.conv_weight], self.dims.conv_kernel / 2)?
            .add(b[self.conv_bias])?
            .silu()
            .permute(&[0, 2, 3, 1])?;
        let dirs = self.ssm.map(|ids| ids.bind(b));
        let mut y = self
            .out_norm
            .apply(b, ss2d_channel_last(main, &dirs, mode)?)?;
        if gated {
            y = y.mul(z.narrow(3, inner, inner)?.silu())?;
        }
        x.add(y.linear(b[self.out_proj], None)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, Tape};
    use crate::verify::jitter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(dims: VssDims, seed: u64) -> (ParamStore<f64>, VssBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blk = VssBlock::new(&mut store, "blk", dims, &mut rng);
        (store, blk)
    }

    fn run(store: &ParamStore<f64>, blk: &VssBlock, x: &Tensor<f64>, gated: bool) -> Tensor<f64> {
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let xl = tape.constant(x.clone()).permute(&[0, 2, 3, 1]).unwrap();
        blk.run(&b, xl, ScanMode::default(), gated)
            .unwrap()
            .permute(&[0, 3, 1, 2])
            .unwrap()
            .to_tensor()
    }

    #[test]
    fn shape_is_preserved() {
        let (store, blk) = block(VssDims::new(16), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 16, 8, 8], 1.0, &mut rng);
        assert_eq!(run(&store, &blk, &x, true).shape(), &[2, 16, 8, 8]);
    }

    #[test]
    fn zero_out_proj_is_identity() {
        let (mut store, blk) = block(VssDims::new(8), 2);
        *store.get_mut(blk.out_proj) = Tensor::zeros([16, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([2, 8, 4, 4], 1.0, &mut rng);
        assert_eq!(run(&store, &blk, &x, true), x);
    }

    #[test]
    fn gate_is_live() {
        let (mut store, blk) = block(VssDims::new(8), 4);
        jitter(&mut store, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn([1, 8, 4, 4], 1.0, &mut rng);
        let gated = run(&store, &blk, &x, true);
        let ungated = run(&store, &blk, &x, false);
        assert!(gated.max_abs_diff(&ungated) > 1e-3);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let (store, blk) = block(VssDims::new(8), 7);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let x = tape.constant(Tensor::zeros([1, 4, 2, 2]));
        assert!(blk.forward(&b, x, ScanMode::default()).is_err());
    }

    #[test]
    fn block_gradient() {
        let dims = VssDims {
            dim: 4,
            expansion: 1,
            state: 2,
            conv_kernel: 3,
        };
        let (mut store, blk) = block(dims, 8);
        jitter(&mut store, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn([1, 4, 3, 3], 1.0, &mut rng);
        let readout = Tensor::<f64>::randn([1, 4, 3, 3], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(store.params().iter().map(|p| p.value.clone()));
        let err = grad_check_many(
            |tape, v| {
                let b = Bound::from_vars(v[1..].to_vec());
                let y = blk.forward(&b, v[0], ScanMode::Chunked(4))?;
                Ok(y.mul(tape.constant(readout.clone()))?.sum())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
