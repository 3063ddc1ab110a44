use super::{BackwardCtx, Var};
use crate::error::{Result, TensorError};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Neg,
    Silu,
    Softplus,
    Sqrt,
}

/// Above this input softplus returns its argument.
pub const SOFTPLUS_THRESHOLD: f64 = 20.0;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::c(SOFTPLUS_THRESHOLD) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
        }
    }

    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            Self::Add => a + b,
            Self::Sub => a - b,
            Self::Mul => a * b,
        }
    }
}

fn binary_backward<T: Real>(kind: BinaryKind, ctx: &BackwardCtx<'_, T>) -> super::InputGrads<T> {
    let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
    let out = ctx.output.shape();
    let g = ctx.grad;
    let mut ga = ctx.needs[0].then(|| vec![T::zero(); a.numel()]);
    let mut gb = ctx.needs[1].then(|| vec![T::zero(); b.numel()]);
    if a.shape() == b.shape() {
        for i in 0..g.len() {
            let (da, db) = match kind {
                BinaryKind::Add => (g[i], g[i]),
                BinaryKind::Sub => (g[i], -g[i]),
                BinaryKind::Mul => (g[i] * b.data()[i], g[i] * a.data()[i]),
            };
            if let Some(ga) = ga.as_mut() {
                ga[i] = da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[i] = db;
            }
        }
        return vec![ga, gb];
    }
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(out, &sa, &sb, |i, oa, ob| {
        let (da, db) = match kind {
            BinaryKind::Add => (g[i], g[i]),
            BinaryKind::Sub => (g[i], -g[i]),
            BinaryKind::Mul => (g[i] * bd[ob], g[i] * ad[oa]),
        };
        if let Some(ga) = ga.as_mut() {
            ga[oa] = ga[oa] + da;
        }
        if let Some(gb) = gb.as_mut() {
            gb[ob] = gb[ob] + db;
        }
    });
    vec![ga, gb]
}

// Fallible on shape mismatch, so these are methods rather than std::ops.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    /// Elementwise binary op with trailing-dimension broadcasting.
    pub fn binary(self, kind: BinaryKind, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_same(&[other])?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let out = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| TensorError::shape(kind.name(), a.shape(), b.shape()))?;
            if a.shape() == b.shape() {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| kind.apply(x, y))
                    .collect();
                Tensor::from_parts(out, data)
            } else {
                let sa = broadcast_strides(a.shape(), &out);
                let sb = broadcast_strides(b.shape(), &out);
                let mut data = vec![T::zero(); crate::tensor::numel(&out)];
                let (ad, bd) = (a.data(), b.data());
                for_each_broadcast(&out, &sa, &sb, |i, oa, ob| {
                    data[i] = kind.apply(ad[oa], bd[ob]);
                });
                Tensor::from_parts(out, data)
            }
        };
        Ok(self
            .tape
            .push(kind.name(), value, &[self, other], move |ctx| {
                binary_backward(kind, ctx)
            }))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Mul, other)
    }

    /// Elementwise unary op. `Log` and `Sqrt` require strictly positive
    /// inputs.
    pub fn unary(self, kind: UnaryKind) -> Result<Var<'t, T>> {
        let (value, name) = {
            let x = self.value();
            if matches!(kind, UnaryKind::Log | UnaryKind::Sqrt) {
                if let Some(index) = x.data().iter().position(|&v| !(v > T::zero())) {
                    return Err(TensorError::Domain {
                        op: if kind == UnaryKind::Log {
                            "log"
                        } else {
                            "sqrt"
                        },
                        index,
                        value: x.data()[index].as_f64(),
                    });
                }
            }
            match kind {
                UnaryKind::Exp => (x.map(|v| v.exp()), "exp"),
                UnaryKind::Log => (x.map(|v| v.ln()), "log"),
                UnaryKind::Neg => (x.map(|v| -v), "neg"),
                UnaryKind::Silu => (x.map(silu), "silu"),
                UnaryKind::Softplus => (x.map(softplus), "softplus"),
                UnaryKind::Sqrt => (x.map(|v| v.sqrt()), "sqrt"),
            }
        };
        Ok(self.tape.push(name, value, &[self], move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let g = ctx.grad;
            let two = T::c(2.0);
            let dx = (0..g.len())
                .map(|i| match kind {
                    UnaryKind::Exp => g[i] * y[i],
                    UnaryKind::Log => g[i] / x[i],
                    UnaryKind::Neg => -g[i],
                    UnaryKind::Silu => {
                        let s = sigmoid(x[i]);
                        g[i] * s * (T::one() + x[i] * (T::one() - s))
                    }
                    UnaryKind::Softplus => {
                        if x[i] > T::c(SOFTPLUS_THRESHOLD) {
                            g[i]
                        } else {
                            g[i] * sigmoid(x[i])
                        }
                    }
                    UnaryKind::Sqrt => g[i] / (two * y[i]),
                })
                .collect();
            vec![Some(dx)]
        }))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp).expect("exp is total")
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(UnaryKind::Neg).expect("neg is total")
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(UnaryKind::Silu).expect("silu is total")
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(UnaryKind::Softplus).expect("softplus is total")
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let value = self.value().map(|v| v * s);
        self.tape.push("scale", value, &[self], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * s).collect())]
        })
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let value = self.value().map(|v| v + s);
        self.tape.push("add_scalar", value, &[self], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value().data().iter().copied().sum());
        self.tape.push("sum", value, &[self], |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::c(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }
}
