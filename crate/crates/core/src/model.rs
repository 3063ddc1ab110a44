//! Hierarchical VMamba backbone, its global-residual variant, and the
//! classifier head.
//!
//! Everything after the stem runs channel-last, `(B, H, W, C)`:
//!
//! ```text
//! img (B,3,H,W) → stem → (H/4, C1) → stage1 → merge → (H/8, C2) → stage2
//!   → merge → (H/16, C3) → stage3 → merge → (H/32, C4) → stage4
//!   [+ Linear(avgpool8(stem))] → LN → global mean → Linear → logits
//! ```

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result, TensorError};
use crate::params::{Bound, LayerNormIds, ParamId, ParamStore};
use crate::ssm::ScanMode;
use crate::tensor::{Real, Tensor};
use crate::vss::{VssBlock, VssDims, INIT_STD};

pub const STAGES: usize = 4;
pub const PATCH: usize = 4;
/// Spatial reduction from stem output to stage-4 output.
pub const RESIDUAL_POOL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Plain,
    GlobalResidual,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::GlobalResidual => "res",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> std::result::Result<Self, Error> {
        match s {
            "plain" | "vmamba" => Ok(Variant::Plain),
            "res" | "global_residual" | "res-vmamba" => Ok(Variant::GlobalResidual),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected plain or res)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub depths: [usize; STAGES],
    pub dims: [usize; STAGES],
    pub state: usize,
    pub expansion: usize,
    pub conv_kernel: usize,
    pub num_classes: usize,
    pub variant: Variant,
    /// `(H, W)` of the RGB input.
    pub input_size: (usize, usize),
}

impl ModelConfig {
    /// Desk-scale preset: depths (1,1,2,1), dims (16,32,64,128), 32×32.
    pub fn nano(num_classes: usize, variant: Variant) -> Self {
        Self {
            depths: [1, 1, 2, 1],
            dims: [16, 32, 64, 128],
            state: 16,
            expansion: 2,
            conv_kernel: 3,
            num_classes,
            variant,
            input_size: (32, 32),
        }
    }

    /// Gradient-check scale: depths (1,1,1,1), dims (4,8,16,32), N = 2.
    pub fn micro(num_classes: usize, variant: Variant) -> Self {
        Self {
            depths: [1, 1, 1, 1],
            dims: [4, 8, 16, 32],
            state: 2,
            ..Self::nano(num_classes, variant)
        }
    }

    /// VMamba-S: depths (2,2,27,2), dims (96,192,384,768), 224×224.
    pub fn small(num_classes: usize, variant: Variant) -> Self {
        Self {
            depths: [2, 2, 27, 2],
            dims: [96, 192, 384, 768],
            input_size: (224, 224),
            ..Self::nano(num_classes, variant)
        }
    }

    pub fn preset(name: &str, num_classes: usize, variant: Variant) -> Result<Self, Error> {
        match name {
            "nano" => Ok(Self::nano(num_classes, variant)),
            "micro" => Ok(Self::micro(num_classes, variant)),
            "small" => Ok(Self::small(num_classes, variant)),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (expected nano, micro or small)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dims.contains(&0) {
            return bad(format!("stage dims must be positive, got {:?}", self.dims));
        }
        if self.state == 0 || self.expansion == 0 {
            return bad("state size and expansion must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv kernel must be odd, got {}", self.conv_kernel));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        check_input_size(self.input_size.0, self.input_size.1)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn vss_dims(&self, stage: usize) -> VssDims {
        VssDims {
            dim: self.dims[stage],
            expansion: self.expansion,
            state: self.state,
            conv_kernel: self.conv_kernel,
        }
    }
}

fn check_input_size(h: usize, w: usize) -> Result<()> {
    let unit = PATCH * (1 << (STAGES - 1));
    if h == 0 || w == 0 || !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
        return Err(TensorError::invalid(
            "vmamba",
            format!("input {h}x{w} is not a positive multiple of {unit}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Stem {
    weight: ParamId,
    bias: ParamId,
    norm: LayerNormIds,
}

#[derive(Clone, Debug)]
struct Merge {
    norm: LayerNormIds,
    weight: ParamId,
}

#[derive(Clone, Debug)]
struct Residual {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Stem,
    stages: Vec<Vec<VssBlock>>,
    merges: Vec<Merge>,
    head_norm: LayerNormIds,
    head_weight: ParamId,
    head_bias: ParamId,
    residual: Option<Residual>,
}

/// Intermediate channel-last activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<'t, T: Real> {
    pub stem: Var<'t, T>,
    pub stages: Vec<Var<'t, T>>,
    /// Global-residual branch output, `(B, H/32, W/32, C4)`.
    pub residual: Option<Var<'t, T>>,
    pub logits: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Fresh weights drawn from a ChaCha stream seeded with `seed`. The
    /// residual projection is created last and zero-initialized, so both
    /// variants share every backbone weight for a given seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let [c1, .., c4] = config.dims;
        let stem = Stem {
            weight: s.add(
                "stem.proj.weight",
                Tensor::trunc_normal([3 * PATCH * PATCH, c1], INIT_STD, &mut rng),
                true,
            ),
            bias: s.add("stem.proj.bias", Tensor::zeros([c1]), false),
            norm: LayerNormIds::new(&mut s, "stem.norm", c1),
        };
        let mut stages = Vec::with_capacity(STAGES);
        let mut merges = Vec::with_capacity(STAGES - 1);
        for stage in 0..STAGES {
            if stage > 0 {
                let (c_in, c_out) = (config.dims[stage - 1], config.dims[stage]);
                let prefix = format!("merge{stage}");
                merges.push(Merge {
                    norm: LayerNormIds::new(&mut s, &format!("{prefix}.norm"), 4 * c_in),
                    weight: s.add(
                        format!("{prefix}.reduction.weight"),
                        Tensor::trunc_normal([4 * c_in, c_out], INIT_STD, &mut rng),
                        true,
                    ),
                });
            }
            let blocks = (0..config.depths[stage])
                .map(|i| {
                    let prefix = format!("stage{}.block{i}", stage + 1);
                    VssBlock::new(&mut s, &prefix, config.vss_dims(stage), &mut rng)
                })
                .collect();
            stages.push(blocks);
        }
        let head_norm = LayerNormIds::new(&mut s, "head.norm", c4);
        let head_weight = s.add(
            "head.fc.weight",
            Tensor::trunc_normal([c4, config.num_classes], INIT_STD, &mut rng),
            true,
        );
        let head_bias = s.add("head.fc.bias", Tensor::zeros([config.num_classes]), false);
        let residual = (config.variant == Variant::GlobalResidual).then(|| Residual {
            weight: s.add("residual.proj.weight", Tensor::zeros([c1, c4]), true),
            bias: s.add("residual.proj.bias", Tensor::zeros([c4]), false),
        });
        Ok(Self {
            config,
            params: s,
            layout: Layout {
                stem,
                stages,
                merges,
                head_norm,
                head_weight,
                head_bias,
                residual,
            },
        })
    }

    /// Rebuilds a model around `params`, which must name and shape every
    /// tensor exactly as [`Model::new`] would for `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, Error> {
        let mut model = Self::new(config, 0)?;
        let expected = model.params.params();
        if expected.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (want, got) in expected.iter().zip(params.params()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        let decay: Vec<bool> = expected.iter().map(|p| p.decay).collect();
        model.params = params;
        for (p, d) in model.params.params_mut().iter_mut().zip(decay) {
            p.decay = d;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Residual projection `(weight, bias)` ids for the global-residual variant.
    pub fn residual_ids(&self) -> Option<(ParamId, ParamId)> {
        self.layout.residual.as_ref().map(|r| (r.weight, r.bias))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Logits `(B, num_classes)` for images `(B, 3, H, W)`.
    pub fn forward<'t>(
        &self,
        b: &Bound<'t, T>,
        img: Var<'t, T>,
        mode: ScanMode,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_trace(b, img, mode)?.logits)
    }

    pub fn forward_trace<'t>(
        &self,
        b: &Bound<'t, T>,
        img: Var<'t, T>,
        mode: ScanMode,
    ) -> Result<ForwardTrace<'t, T>> {
        let l = &self.layout;
        let shape = img.shape();
        let &[batch, 3, h, w] = shape.as_slice() else {
            return Err(TensorError::invalid(
                "vmamba",
                format!("expected images (batch, 3, height, width), got {shape:?}"),
            ));
        };
        check_input_size(h, w)?;

        let stem = self.stem(b, img, batch, h, w)?;
        let mut x = stem;
        let mut stages = Vec::with_capacity(STAGES);
        for stage in 0..STAGES {
            if stage > 0 {
                x = patch_merge(b, &l.merges[stage - 1], x)?;
            }
            let scale = PATCH << stage;
            let want = [batch, h / scale, w / scale, self.config.dims[stage]];
            assert_eq!(x.shape(), want, "stage {} resolution ladder", stage + 1);
            for block in &l.stages[stage] {
                x = block.forward_channel_last(b, x, mode)?;
            }
            stages.push(x);
        }

        let residual = match &l.residual {
            Some(r) => {
                let pooled = stem
                    .permute(&[0, 3, 1, 2])?
                    .avg_pool2d(RESIDUAL_POOL)?
                    .permute(&[0, 2, 3, 1])?;
                let r = pooled.linear(b[r.weight], Some(b[r.bias]))?;
                x = x.add(r)?;
                Some(r)
            }
            None => None,
        };

        let [_, fh, fw, c4] = <[usize; 4]>::try_from(x.shape()).expect("stage output is 4-D");
        let normed = l.head_norm.apply(b, x)?;
        let pooled = if fh * fw == 1 {
            normed.reshape(&[batch, c4])?
        } else {
            let avg = Tensor::full([1, fh * fw], T::c(1.0 / (fh * fw) as f64));
            b.vars()[0]
                .tape()
                .constant(avg)
                .matmul(normed.reshape(&[batch, fh * fw, c4])?)?
                .reshape(&[batch, c4])?
        };
        let logits = pooled.linear(b[l.head_weight], Some(b[l.head_bias]))?;
        Ok(ForwardTrace {
            stem,
            stages,
            residual,
            logits,
        })
    }

    /// `(B, 3, H, W)` → `(B, H/4, W/4, C1)`: 4×4 patches flattened in
    /// `(channel, row, col)` order, projected, normalized.
    fn stem<'t>(
        &self,
        b: &Bound<'t, T>,
        img: Var<'t, T>,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<Var<'t, T>> {
        let s = &self.layout.stem;
        let (gh, gw) = (h / PATCH, w / PATCH);
        let patches = img
            .reshape(&[batch, 3, gh, PATCH, gw, PATCH])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[batch, gh, gw, 3 * PATCH * PATCH])?;
        s.norm
            .apply(b, patches.linear(b[s.weight], Some(b[s.bias]))?)
    }

    /// Inference on a fresh tape with constant weights.
    pub fn logits(&self, images: &Tensor<T>, mode: ScanMode) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, false);
        Ok(self
            .forward(&b, tape.constant(images.clone()), mode)?
            .to_tensor())
    }
}

/// `(B, H, W, C)` → `(B, H/2, W/2, 2C)`: gather, normalize, project.
fn patch_merge<'t, T: Real>(b: &Bound<'t, T>, m: &Merge, x: Var<'t, T>) -> Result<Var<'t, T>> {
    m.norm.apply(b, gather_2x2(x)?)?.linear(b[m.weight], None)
}

/// `(B, H, W, C)` → `(B, H/2, W/2, 4C)`, concatenating each 2×2
/// neighbourhood as `(0,0), (1,0), (0,1), (1,1)` in (row, col) offsets.
fn gather_2x2<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let [batch, h, w, c] = <[usize; 4]>::try_from(x.shape()).expect("channel-last map");
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::invalid(
            "patch_merging",
            format!("odd spatial extent {h}x{w}"),
        ));
    }
    x.reshape(&[batch, h / 2, 2, w / 2, 2, c])?
        .permute(&[0, 1, 3, 4, 2, 5])?
        .reshape(&[batch, h / 2, w / 2, 4 * c])
}
