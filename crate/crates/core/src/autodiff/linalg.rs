use super::Var;
use crate::error::{Result, TensorError};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, numel, Real, Tensor};

/// `c += a · b` for row-major `a (m×k)`, `b (k×n)`, `c (m×n)`.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k, 1), b, (n, 1), c, (n, 1));
}

/// `c += a · bᵀ` for `a (m×k)`, `b (n×k)`.
fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k, 1), b, (1, k), c, (n, 1));
}

/// `c += aᵀ · b` for `a (m×k)`, `b (m×n)`, `c (k×n)`.
fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(k, m, n, a, (1, k), b, (n, 1), c, (n, 1));
}

/// Batch layout of a matmul: broadcast batch shape plus, per batch entry,
/// the matrix offsets into `a` and `b`.
struct BatchPlan {
    batch_shape: Vec<usize>,
    offsets: Vec<(usize, usize)>,
    m: usize,
    k: usize,
    n: usize,
}

fn plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(TensorError::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(TensorError::shape("matmul", a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    // A plain 2-D right operand folds every leading axis of `a` into rows.
    if bb.is_empty() {
        let rows = numel(ab) * m;
        return Ok(BatchPlan {
            batch_shape: ab.to_vec(),
            offsets: vec![(0, 0)],
            m: rows,
            k,
            n,
        });
    }
    let batch_shape = broadcast_shape(ab, bb).ok_or_else(|| TensorError::shape("matmul", a, b))?;
    let sa = broadcast_strides(ab, &batch_shape);
    let sb = broadcast_strides(bb, &batch_shape);
    let mut offsets = Vec::with_capacity(numel(&batch_shape));
    for_each_broadcast(&batch_shape, &sa, &sb, |_, oa, ob| {
        offsets.push((oa * m * k, ob * k * n))
    });
    Ok(BatchPlan {
        batch_shape,
        offsets,
        m,
        k,
        n,
    })
}

impl<'t, T: Real> Var<'t, T> {
    /// Batched matrix product `(.., M, K) × (.., K, N) → (.., M, N)` with
    /// broadcast leading axes.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_same(&[other])?;
        let (value, p) = {
            let (a, b) = (self.value(), other.value());
            let p = plan(a.shape(), b.shape())?;
            let mut out = vec![T::zero(); p.offsets.len() * p.m * p.n];
            for (bi, &(oa, ob)) in p.offsets.iter().enumerate() {
                gemm_acc(
                    &a.data()[oa..oa + p.m * p.k],
                    &b.data()[ob..ob + p.k * p.n],
                    &mut out[bi * p.m * p.n..(bi + 1) * p.m * p.n],
                    p.m,
                    p.k,
                    p.n,
                );
            }
            let mut shape = p.batch_shape.clone();
            if p.offsets.len() == 1 && b.rank() == 2 {
                shape.push(a.shape()[a.rank() - 2]);
            } else {
                shape.push(p.m);
            }
            shape.push(p.n);
            (Tensor::from_parts(shape, out), p)
        };
        Ok(self.tape.push("matmul", value, &[self, other], move |ctx| {
            let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let (m, k, n) = (p.m, p.k, p.n);
            let mut da = ctx.needs[0].then(|| vec![T::zero(); a.len()]);
            let mut db = ctx.needs[1].then(|| vec![T::zero(); b.len()]);
            for (bi, &(oa, ob)) in p.offsets.iter().enumerate() {
                let g = &ctx.grad[bi * m * n..(bi + 1) * m * n];
                if let Some(da) = da.as_mut() {
                    gemm_nt_acc(g, &b[ob..ob + k * n], &mut da[oa..oa + m * k], m, n, k);
                }
                if let Some(db) = db.as_mut() {
                    gemm_tn_acc(&a[oa..oa + m * k], g, &mut db[ob..ob + k * n], m, k, n);
                }
            }
            vec![da, db]
        }))
    }

    /// `x · w + bias` over the last axis, with `w` of shape `(in, out)`.
    pub fn linear(self, w: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(w)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::{grad_check_many, Tape};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_and_dot() {
        let tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::from_f64s([2, 2], &[1., 0., 0., 1.]).unwrap());
        let m = tape.constant(Tensor::from_f64s([2, 2], &[1., 2., 3., 4.]).unwrap());
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
        let r = tape.constant(Tensor::from_f64s([1, 2], &[1., 2.]).unwrap());
        let c = tape.constant(Tensor::from_f64s([2, 1], &[3., 4.]).unwrap());
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::randn([2, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let c = tape
            .constant(a.clone())
            .matmul(tape.constant(b.clone()))
            .unwrap();
        let want = triple_loop(&a, &b);
        for (x, y) in c.value().data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn inner_extent_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones([2, 3]));
        let b = tape.constant(Tensor::ones([2, 3]));
        assert!(a.matmul(b).is_err());
    }

    #[test]
    fn batched_shapes_and_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([4, 5], 1.0, &mut rng);
        let c = Tensor::<f64>::randn([1, 5, 2], 1.0, &mut rng);
        let err = grad_check_many(
            |_, v| {
                let ab = v[0].matmul(v[1])?;
                assert_eq!(ab.shape(), vec![2, 3, 5]);
                let abc = ab.matmul(v[2])?;
                assert_eq!(abc.shape(), vec![2, 3, 2]);
                Ok(abc.mul(abc)?.sum())
            },
            &[a, b, c],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
