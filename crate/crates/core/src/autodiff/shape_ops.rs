use super::Var;
use crate::error::{Result, TensorError};
use crate::tensor::{numel, strides, Real, Tensor};

/// Gathers `src` (with `src_strides` already permuted into output axis
/// order) into a row-major buffer of shape `out`.
fn permute_gather<T: Real>(src: &[T], out: &[usize], src_strides: &[usize]) -> Vec<T> {
    let n = numel(out);
    let mut dst = Vec::with_capacity(n);
    let rank = out.len();
    if rank == 0 {
        return src.to_vec();
    }
    let inner = out[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..n / inner {
        if inner_stride == 1 {
            dst.extend_from_slice(&src[base..base + inner]);
        } else {
            dst.extend((0..inner).map(|k| src[base + k * inner_stride]));
        }
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            base -= src_strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    dst
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let own = strides(x.shape());
    let out: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let s: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
    let data = permute_gather(x.data(), &out, &s);
    Tensor::from_parts(out, data)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape.to_vec())?;
        Ok(self.tape.push("reshape", value, &[self], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let rank = self.value().rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let value = permute_tensor(&self.value(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape.push("permute", value, &[self], move |ctx| {
            let g = Tensor::from_parts(ctx.output.shape().to_vec(), ctx.grad.to_vec());
            vec![Some(permute_tensor(&g, &inverse).into_data())]
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let shape = x.shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return Err(TensorError::invalid(
                    "narrow",
                    format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
                ));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut out = shape.to_vec();
            out[axis] = len;
            Tensor::from_parts(out, data)
        };
        Ok(self.tape.push("narrow", value, &[self], move |ctx| {
            let shape = ctx.inputs[0].shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[axis];
            let mut dx = vec![T::zero(); ctx.inputs[0].numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&ctx.grad[src..src + len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Joins tensors along an existing axis.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        first.tape.check_same(parts)?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let base = &shapes[0];
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} of {base:?}"),
            ));
        }
        for s in &shapes[1..] {
            let same_rank = s.len() == base.len();
            if !same_rank || (0..s.len()).any(|i| i != axis && s[i] != base[i]) {
                return Err(TensorError::shape("concat", base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for o in 0..outer {
                for (v, &w) in values.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
        }
        let mut out = base.clone();
        out[axis] = total / inner;
        let value = Tensor::from_parts(out, data);
        Ok(first.tape.push("concat", value, parts, move |ctx| {
            let mut grads: Vec<Vec<T>> = widths
                .iter()
                .map(|&w| Vec::with_capacity(outer * w))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &w) in grads.iter_mut().zip(&widths) {
                    g.extend_from_slice(&ctx.grad[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::{grad_check, Tape, Var};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn permute_transposes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(y.value().data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn narrow_and_concat_invert() {
        let tape = Tape::<f64>::new();
        let x =
            tape.constant(Tensor::from_f64s([2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]).unwrap());
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 3).unwrap();
        assert_eq!(b.value().data(), &[1., 2., 3., 5., 6., 7.]);
        let back = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([4, 2, 3], 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let w = tape.constant(w.clone());
                let p = x.permute(&[2, 0, 1])?;
                let n = p.narrow(1, 1, 1)?;
                let c = Var::concat(&[p, n], 1)?;
                let r = c.narrow(1, 0, 2)?.reshape(&[4, 2, 3])?;
                Ok(r.mul(w)?.exp().sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
