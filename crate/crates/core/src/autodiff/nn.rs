use super::Var;
use crate::error::{Result, TensorError};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn check_feature_map(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(TensorError::invalid(
            op,
            format!("expected (batch, channels, height, width), got {shape:?}"),
        )),
    }
}

/// Per-channel 2-D cross-correlation, stride 1, zero padding.
pub fn depthwise_conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = check_feature_map("depthwise_conv2d", x.shape())?;
    let k = match *kernel.shape() {
        [kc, 1, kh, kw] if kc == c && kh == kw => kh,
        _ => {
            return Err(TensorError::shape(
                "depthwise_conv2d",
                x.shape(),
                kernel.shape(),
            ))
        }
    };
    if k % 2 == 0 {
        return Err(TensorError::invalid(
            "depthwise_conv2d",
            format!("kernel size must be odd, got {k}"),
        ));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(TensorError::shape(
            "depthwise_conv2d",
            x.shape(),
            kernel.shape(),
        ));
    }
    let (oh, ow) = (h + 2 * padding - k + 1, w + 2 * padding - k + 1);
    let mut out = vec![T::zero(); b * c * oh * ow];
    let (xd, kd) = (x.data(), kernel.data());
    for bc in 0..b * c {
        let ch = bc % c;
        let src = &xd[bc * h * w..(bc + 1) * h * w];
        let ker = &kd[ch * k * k..(ch + 1) * k * k];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for i in 0..oh {
            for ki in 0..k {
                let si = (i + ki) as isize - padding as isize;
                if si < 0 || si >= h as isize {
                    continue;
                }
                let row = &src[si as usize * w..(si as usize + 1) * w];
                for kj in 0..k {
                    let wt = ker[ki * k + kj];
                    // output column j reads input column j + kj - padding
                    let lo = padding.saturating_sub(kj);
                    let hi = (w + padding).saturating_sub(kj).min(ow);
                    for j in lo..hi {
                        dst[i * ow + j] = dst[i * ow + j] + wt * row[j + kj - padding];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

/// Non-overlapping window means.
pub fn avg_pool2d_forward<T: Real>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = check_feature_map("avg_pool2d", x.shape())?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(TensorError::invalid(
            "avg_pool2d",
            format!("spatial extents {h}x{w} not divisible by window {window}"),
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let inv = T::one() / T::c((window * window) as f64);
    let mut out = vec![T::zero(); b * c * oh * ow];
    let xd = x.data();
    for bc in 0..b * c {
        for i in 0..h {
            for j in 0..w {
                let o = bc * oh * ow + (i / window) * ow + j / window;
                out[o] = out[o] + xd[bc * h * w + i * w + j];
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * inv);
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

impl<'t, T: Real> Var<'t, T> {
    /// Normalizes over the last axis (population variance), then applies
    /// `gamma · x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.tape.check_same(&[gamma, beta])?;
        if !(eps > 0.0) {
            return Err(TensorError::invalid(
                "layer_norm",
                format!("eps must be > 0, got {eps}"),
            ));
        }
        let (value, xhat, rstd) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let d = *x
                .shape()
                .last()
                .ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
            if g.shape() != [d] || b.shape() != [d] {
                return Err(TensorError::shape("layer_norm", x.shape(), g.shape()));
            }
            let rows = x.numel() / d;
            let inv_d = T::one() / T::c(d as f64);
            let eps = T::c(eps);
            let mut out = vec![T::zero(); x.numel()];
            let mut xhat = vec![T::zero(); x.numel()];
            let mut rstd = vec![T::zero(); rows];
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = g.data()[j] * xh + b.data()[j];
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd)
        };
        Ok(self
            .tape
            .push("layer_norm", value, &[self, gamma, beta], move |ctx| {
                let d = ctx.inputs[1].numel();
                let gamma = ctx.inputs[1].data();
                let g = ctx.grad;
                let rows = g.len() / d;
                let inv_d = T::one() / T::c(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = ctx.needs[0].then(|| vec![T::zero(); g.len()]);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + gr[j] * xr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        let dxh = gr[j] * gamma[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        mean_dxh = mean_dxh * inv_d;
                        mean_dxh_xh = mean_dxh_xh * inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * gamma[j];
                            dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                }
                vec![dx, Some(dgamma), Some(dbeta)]
            }))
    }

    /// Depthwise 2-D convolution with an odd `(C, 1, k, k)` kernel.
    pub fn depthwise_conv2d(self, kernel: Var<'t, T>, padding: usize) -> Result<Var<'t, T>> {
        self.tape.check_same(&[kernel])?;
        let value = depthwise_conv2d_forward(&self.value(), &kernel.value(), padding)?;
        Ok(self
            .tape
            .push("depthwise_conv2d", value, &[self, kernel], move |ctx| {
                let (x, ker) = (ctx.inputs[0], ctx.inputs[1]);
                let [b, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
                let k = ker.shape()[2];
                let [_, _, oh, ow] = <[usize; 4]>::try_from(ctx.output.shape()).unwrap();
                let (xd, kd, g) = (x.data(), ker.data(), ctx.grad);
                let mut dx = vec![T::zero(); xd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                for bc in 0..b * c {
                    let ch = bc % c;
                    for i in 0..oh {
                        for ki in 0..k {
                            let si = (i + ki) as isize - padding as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let si = si as usize;
                            for kj in 0..k {
                                let lo = padding.saturating_sub(kj);
                                let hi = (w + padding).saturating_sub(kj).min(ow);
                                let wt = kd[ch * k * k + ki * k + kj];
                                let mut acc = T::zero();
                                for j in lo..hi {
                                    let gi = g[bc * oh * ow + i * ow + j];
                                    let xi = bc * h * w + si * w + j + kj - padding;
                                    acc = acc + gi * xd[xi];
                                    dx[xi] = dx[xi] + gi * wt;
                                }
                                let kidx = ch * k * k + ki * k + kj;
                                dk[kidx] = dk[kidx] + acc;
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dk)]
            }))
    }

    pub fn avg_pool2d(self, window: usize) -> Result<Var<'t, T>> {
        let value = avg_pool2d_forward(&self.value(), window)?;
        Ok(self.tape.push("avg_pool2d", value, &[self], move |ctx| {
            let [b, c, h, w] = <[usize; 4]>::try_from(ctx.inputs[0].shape()).unwrap();
            let (oh, ow) = (h / window, w / window);
            let inv = T::one() / T::c((window * window) as f64);
            let mut dx = vec![T::zero(); b * c * h * w];
            for bc in 0..b * c {
                for i in 0..h {
                    for j in 0..w {
                        dx[bc * h * w + i * w + j] =
                            ctx.grad[bc * oh * ow + (i / window) * ow + j / window] * inv;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Mean over the batch of `-Σ_c q_c log softmax(logits)_c` with
    /// `q = (1-ε)·onehot(target) + ε/K`.
    pub fn label_smoothed_ce(self, targets: &[usize], smoothing: f64) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::invalid(
                "label_smoothed_ce",
                format!("smoothing must lie in [0, 1), got {smoothing}"),
            ));
        }
        let (value, probs, q) = {
            let logits = self.value();
            let [n, k] = match *logits.shape() {
                [n, k] => [n, k],
                ref s => {
                    return Err(TensorError::invalid(
                        "label_smoothed_ce",
                        format!("logits must be (batch, classes), got {s:?}"),
                    ))
                }
            };
            if targets.len() != n {
                return Err(TensorError::invalid(
                    "label_smoothed_ce",
                    format!("{} targets for a batch of {n}", targets.len()),
                ));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= k) {
                return Err(TensorError::invalid(
                    "label_smoothed_ce",
                    format!("target {t} out of range for {k} classes"),
                ));
            }
            let off = T::c(smoothing / k as f64);
            let on = T::c(1.0 - smoothing) + off;
            let mut probs = vec![T::zero(); n * k];
            let mut q = vec![off; n * k];
            let mut total = T::zero();
            for (r, &t) in targets.iter().enumerate() {
                q[r * k + t] = on;
                let row = &logits.data()[r * k..(r + 1) * k];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - max).exp()).sum();
                let log_z = z.ln() + max;
                for c in 0..k {
                    let log_p = row[c] - log_z;
                    probs[r * k + c] = log_p.exp();
                    total = total - q[r * k + c] * log_p;
                }
            }
            (Tensor::scalar(total / T::c(n as f64)), probs, q)
        };
        Ok(self
            .tape
            .push("label_smoothed_ce", value, &[self], move |ctx| {
                let n = T::c(ctx.inputs[0].shape()[0] as f64);
                let g = ctx.grad[0] / n;
                vec![Some(
                    probs.iter().zip(&q).map(|(&p, &q)| g * (p - q)).collect(),
                )]
            }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, Tape};
    use rand::SeedableRng;

    fn six_loop(x: &Tensor<f64>, k: &Tensor<f64>, pad: usize) -> Vec<f64> {
        let [b, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let ks = k.shape()[2];
        let (oh, ow) = (h + 2 * pad - ks + 1, w + 2 * pad - ks + 1);
        let mut out = vec![0.0; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        for ki in 0..ks {
                            for kj in 0..ks {
                                let (si, sj) = (i + ki, j + kj);
                                if si < pad || sj < pad || si - pad >= h || sj - pad >= w {
                                    continue;
                                }
                                out[((bi * c + ci) * oh + i) * ow + j] += k.data()
                                    [(ci * ks + ki) * ks + kj]
                                    * x.data()[((bi * c + ci) * h + si - pad) * w + sj - pad];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones([3]));
        let zeros = tape.constant(Tensor::zeros([3]));
        let flat = tape.constant(Tensor::ones([3]));
        let y = flat.layer_norm(ones, zeros, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let g2 = tape.constant(Tensor::ones([2]));
        let b2 = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(Tensor::from_f64s([2], &[-1.0, 1.0]).unwrap());
        let y = x.layer_norm(g2, b2, 1e-12).unwrap();
        for (a, b) in y.value().data().iter().zip([-1.0, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }

        let x = tape.constant(Tensor::from_f64s([3], &[0.0, 2.0, 4.0]).unwrap());
        let y = x.layer_norm(ones, zeros, 1e-5).unwrap().to_tensor();
        let mean = y.data().iter().sum::<f64>() / 3.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(
            mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4,
            "{mean} {var}"
        );
        assert!(x.layer_norm(g2, b2, 1e-5).is_err());
    }

    #[test]
    fn conv_identity_and_overlap_counts() {
        let tape = Tape::<f64>::new();
        let mut delta = Tensor::zeros([1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([1, 1, 5, 6], 1.0, &mut rng);
        let y = tape
            .constant(x.clone())
            .depthwise_conv2d(tape.constant(delta), 1)
            .unwrap();
        assert_eq!(y.value().data(), x.data());

        let ones = tape.constant(Tensor::ones([1, 1, 8, 8]));
        let y = ones
            .depthwise_conv2d(tape.constant(Tensor::ones([1, 1, 3, 3])), 1)
            .unwrap()
            .to_tensor();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[7], 4.0);
        assert_eq!(y.data()[63], 4.0);
        assert_eq!(y.data()[3 * 8 + 4], 9.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([2, 3, 5, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([3, 1, 3, 3], 1.0, &mut rng);
        let got = depthwise_conv2d_forward(&x, &k, 1).unwrap();
        for (a, b) in got.data().iter().zip(six_loop(&x, &k, 1)) {
            assert!((a - b).abs() < 1e-5);
        }
        let k5 = Tensor::<f64>::randn([3, 1, 5, 5], 1.0, &mut rng);
        let got = depthwise_conv2d_forward(&x, &k5, 1).unwrap();
        assert_eq!(got.shape(), &[2, 3, 3, 2]);
        for (a, b) in got.data().iter().zip(six_loop(&x, &k5, 1)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let x = Tensor::<f64>::ones([1, 1, 4, 4]);
        let k = Tensor::<f64>::ones([1, 1, 2, 2]);
        assert!(depthwise_conv2d_forward(&x, &k, 0).is_err());
    }

    #[test]
    fn pool_examples() {
        let x = Tensor::<f64>::from_f64s([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(avg_pool2d_forward(&x, 2).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full([2, 3, 4, 4], 1.75);
        assert!(avg_pool2d_forward(&c, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.75));
        assert!(avg_pool2d_forward(&c, 3).is_err());
    }

    #[test]
    fn smoothed_ce_closed_form() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_f64s([1, 4], &[2., 0., 0., 0.]).unwrap());
        let loss = logits.label_smoothed_ce(&[0], 0.1).unwrap().item();
        // -(0.925·log p0 + 3·0.025·log p1) with p0 = e²/(e²+3)
        let z = 2f64.exp() + 3.0;
        let want = -(0.925 * (2.0 - z.ln()) + 0.075 * (-z.ln()));
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.490752953913).abs() < 1e-9, "{loss}");

        let uniform = tape.constant(Tensor::zeros([3, 5]));
        let l = uniform.label_smoothed_ce(&[0, 1, 4], 0.0).unwrap().item();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(uniform.label_smoothed_ce(&[0, 1, 5], 0.0).is_err());
    }

    #[test]
    fn nn_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn([2, 2, 4, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([2, 1, 3, 3], 1.0, &mut rng);
        let gamma = Tensor::<f64>::randn([4], 1.0, &mut rng);
        let beta = Tensor::<f64>::randn([4], 1.0, &mut rng);
        let err = grad_check_many(
            |_, v| {
                let y = v[0].depthwise_conv2d(v[1], 1)?;
                let y = y.layer_norm(v[2], v[3], 1e-5)?;
                let p = y.avg_pool2d(2)?.reshape(&[2, 8])?;
                p.label_smoothed_ce(&[3, 5], 0.1)
            },
            &[x, k, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
