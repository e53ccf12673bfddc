//! Elementwise unary and broadcasting binary ops.

use std::cell::Cell;
use std::sync::Arc;

use super::error::{NdError, NdResult};
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Denominators closer to zero than this are rejected by `div`.
pub const DIV_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sqrt,
    Relu,
    Abs,
    Neg,
}

thread_local! {
    static SIGMOID_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Flips the sign of the sigmoid backward pass for ops recorded on this
/// thread while enabled. Exists so the gradient-check suites can be shown to
/// catch a broken derivative.
#[doc(hidden)]
pub fn inject_sigmoid_backward_fault(enabled: bool) {
    SIGMOID_FAULT.with(|f| f.set(enabled));
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat output indices back onto a (possibly broadcast) input.
#[derive(Clone)]
pub(crate) enum BIndex {
    Same,
    Scalar,
    /// Input is a trailing block repeated over leading output dims.
    Tile(usize),
    /// Each input element is repeated for a contiguous run of outputs.
    Repeat(usize),
    Map(Arc<Vec<usize>>),
}

impl BIndex {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return BIndex::Same;
        }
        if input.iter().product::<usize>() == 1 {
            return BIndex::Scalar;
        }
        let rank = out.len();
        let offset = rank - input.len();
        let padded: Vec<usize> = std::iter::repeat(1).take(offset).chain(input.iter().copied()).collect();
        let split = padded.iter().position(|&d| d != 1).unwrap_or(rank);
        if padded[split..] == out[split..] {
            return BIndex::Tile(out[split..].iter().product());
        }
        let end = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if padded[..end] == out[..end] {
            return BIndex::Repeat(out[end..].iter().product());
        }
        // strides of the input expressed over output dims, zero where broadcast
        let mut in_strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..input.len()).rev() {
            if input[i] != 1 {
                in_strides[i + offset] = s;
            }
            s *= input[i];
        }
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..n {
            map.push(flat);
            for d in (0..rank).rev() {
                idx[d] += 1;
                flat += in_strides[d];
                if idx[d] < out[d] {
                    break;
                }
                flat -= in_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        BIndex::Map(Arc::new(map))
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            BIndex::Same => i,
            BIndex::Scalar => 0,
            BIndex::Tile(n) => i % n,
            BIndex::Repeat(n) => i / n,
            BIndex::Map(m) => m[i],
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn binary(&self, kind: BinaryKind, other: &Tensor<T>) -> NdResult<Tensor<T>> {
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
            BinaryKind::Pow => "pow",
        };
        let shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            NdError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }
        })?;
        let n: usize = shape.iter().product();
        let ia = BIndex::new(&shape, &self.shape);
        let ib = BIndex::new(&shape, &other.shape);
        let a = Arc::clone(&self.data);
        let b = Arc::clone(&other.data);
        match kind {
            BinaryKind::Div => {
                if b.iter().any(|v| v.abs() < T::of(DIV_EPS)) {
                    return Err(NdError::DomainError {
                        op,
                        detail: "division by zero".into(),
                    });
                }
            }
            BinaryKind::Pow => {
                let bad = (0..n).any(|i| {
                    let base = a[ia.at(i)];
                    let e = b[ib.at(i)];
                    base < T::zero() && (e.fract() != T::zero() || other.requires_grad())
                        || base == T::zero() && other.requires_grad()
                });
                if bad {
                    return Err(NdError::DomainError {
                        op,
                        detail: "pow needs a positive base".into(),
                    });
                }
            }
            _ => {}
        }
        let data: Vec<T> = match kind {
            BinaryKind::Add => combine(&a, &b, &ia, &ib, n, |x, y| x + y),
            BinaryKind::Sub => combine(&a, &b, &ia, &ib, n, |x, y| x - y),
            BinaryKind::Mul => combine(&a, &b, &ia, &ib, n, |x, y| x * y),
            BinaryKind::Div => combine(&a, &b, &ia, &ib, n, |x, y| x / y),
            BinaryKind::Pow => combine(&a, &b, &ia, &ib, n, |x: T, y| x.powf(y)),
        };
        let (la, lb) = (self.len(), other.len());
        let data = Arc::new(data);
        let out = (kind == BinaryKind::Pow).then(|| Arc::clone(&data));
        Tensor::record(op, &[self, other], shape, Arc::clone(&data), move |g, needs| {
            let mut ga = needs[0].then(|| vec![T::zero(); la]);
            let mut gb = needs[1].then(|| vec![T::zero(); lb]);
            let (ra, rb) = (ga.as_deref_mut(), gb.as_deref_mut());
            match kind {
                BinaryKind::Add => scatter(g, &a, &b, &ia, &ib, ra, rb, |gi, _, _, _| (gi, gi)),
                BinaryKind::Sub => scatter(g, &a, &b, &ia, &ib, ra, rb, |gi, _, _, _| (gi, -gi)),
                BinaryKind::Mul => scatter(g, &a, &b, &ia, &ib, ra, rb, |gi, x, y, _| (gi * y, gi * x)),
                BinaryKind::Div => scatter(g, &a, &b, &ia, &ib, ra, rb, |gi, x, y, _| (gi / y, -gi * x / (y * y))),
                BinaryKind::Pow => scatter(g, &a, &b, &ia, &ib, ra, rb, |gi, x: T, y, i| {
                    let o = out.as_ref().map_or_else(|| x.powf(y), |o| o[i]);
                    let da = if y == T::zero() {
                        T::zero()
                    } else {
                        gi * y * x.powf(y - T::one())
                    };
                    let db = if x > T::zero() { gi * o * x.ln() } else { T::zero() };
                    (da, db)
                }),
            }
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> NdResult<Tensor<T>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> NdResult<Tensor<T>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> NdResult<Tensor<T>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> NdResult<Tensor<T>> {
        self.binary(BinaryKind::Div, other)
    }

    pub fn pow(&self, other: &Tensor<T>) -> NdResult<Tensor<T>> {
        self.binary(BinaryKind::Pow, other)
    }

    pub fn unary(&self, kind: UnaryKind) -> NdResult<Tensor<T>> {
        let op = match kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Relu => "relu",
            UnaryKind::Abs => "abs",
            UnaryKind::Neg => "neg",
        };
        let x = Arc::clone(&self.data);
        match kind {
            UnaryKind::Log if x.iter().any(|v| *v <= T::zero()) => {
                return Err(NdError::DomainError {
                    op,
                    detail: "log of a non-positive value".into(),
                })
            }
            UnaryKind::Sqrt if x.iter().any(|v| *v < T::zero()) => {
                return Err(NdError::DomainError {
                    op,
                    detail: "sqrt of a negative value".into(),
                })
            }
            _ => {}
        }
        let data: Vec<T> = x
            .iter()
            .map(|&v| match kind {
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Relu => v.max(T::zero()),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Neg => -v,
            })
            .collect();
        let y = Arc::new(data);
        let fault = kind == UnaryKind::Sigmoid && SIGMOID_FAULT.with(Cell::get);
        Tensor::record(op, &[self], self.shape.clone(), Arc::clone(&y), move |g, _| {
            let gx = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| {
                    let (xi, yi) = (x[i], y[i]);
                    match kind {
                        UnaryKind::Exp => gi * yi,
                        UnaryKind::Log => gi / xi,
                        UnaryKind::Tanh => gi * (T::one() - yi * yi),
                        UnaryKind::Sigmoid => {
                            let d = gi * yi * (T::one() - yi);
                            if fault {
                                -d
                            } else {
                                d
                            }
                        }
                        UnaryKind::Sqrt => {
                            if yi > T::zero() {
                                gi / (yi + yi)
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Relu => {
                            if xi > T::zero() {
                                gi
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Abs => {
                            if xi > T::zero() {
                                gi
                            } else if xi < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Neg => -gi,
                    }
                })
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn exp(&self) -> NdResult<Tensor<T>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> NdResult<Tensor<T>> {
        self.unary(UnaryKind::Log)
    }

    pub fn tanh(&self) -> NdResult<Tensor<T>> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(&self) -> NdResult<Tensor<T>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn sqrt(&self) -> NdResult<Tensor<T>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn relu(&self) -> NdResult<Tensor<T>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn abs(&self) -> NdResult<Tensor<T>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn neg(&self) -> NdResult<Tensor<T>> {
        self.unary(UnaryKind::Neg)
    }

    /// `x * s` for a constant `s`.
    pub fn scale(&self, s: T) -> NdResult<Tensor<T>> {
        let x = &self.data;
        let data: Vec<T> = x.iter().map(|&v| v * s).collect();
        Tensor::record("scale", &[self], self.shape.clone(), data, move |g, _| {
            vec![Some(g.iter().map(|&gi| gi * s).collect())]
        })
    }

    /// `x + s` for a constant `s`.
    pub fn add_scalar(&self, s: T) -> NdResult<Tensor<T>> {
        let data: Vec<T> = self.data.iter().map(|&v| v + s).collect();
        Tensor::record("add_scalar", &[self], self.shape.clone(), data, |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// `x^e` for a constant exponent.
    pub fn powf(&self, e: T) -> NdResult<Tensor<T>> {
        if e.fract() != T::zero() && self.data.iter().any(|v| *v < T::zero()) {
            return Err(NdError::DomainError {
                op: "powf",
                detail: "fractional power of a negative value".into(),
            });
        }
        let x = Arc::clone(&self.data);
        let data: Vec<T> = x.iter().map(|&v| v.powf(e)).collect();
        Tensor::record("powf", &[self], self.shape.clone(), data, move |g, _| {
            let gx = g
                .iter()
                .zip(x.iter())
                .map(|(&gi, &xi)| {
                    if e == T::zero() {
                        T::zero()
                    } else {
                        gi * e * xi.powf(e - T::one())
                    }
                })
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn square(&self) -> NdResult<Tensor<T>> {
        self.mul(self)
    }

    /// `relu(x) - slope * relu(-x)`.
    pub fn leaky_relu(&self, slope: T) -> NdResult<Tensor<T>> {
        let pos = self.relu()?;
        let neg = self.neg()?.relu()?.scale(slope)?;
        pos.sub(&neg)
    }
}

fn combine<T: Scalar>(a: &[T], b: &[T], ia: &BIndex, ib: &BIndex, n: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    match (ia, ib) {
        (BIndex::Same, BIndex::Same) => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
        (BIndex::Same, BIndex::Scalar) => a.iter().map(|x| f(*x, b[0])).collect(),
        (BIndex::Scalar, BIndex::Same) => b.iter().map(|y| f(a[0], *y)).collect(),
        _ => (0..n).map(|i| f(a[ia.at(i)], b[ib.at(i)])).collect(),
    }
}

/// Accumulates per-element partials `(d/da, d/db)` into broadcast inputs.
#[allow(clippy::too_many_arguments)]
fn scatter<T: Scalar>(
    g: &[T],
    a: &[T],
    b: &[T],
    ia: &BIndex,
    ib: &BIndex,
    mut ga: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
    f: impl Fn(T, T, T, usize) -> (T, T),
) {
    for (i, &gi) in g.iter().enumerate() {
        let (ka, kb) = (ia.at(i), ib.at(i));
        let (da, db) = f(gi, a[ka], b[kb], i);
        if let Some(ga) = ga.as_deref_mut() {
            ga[ka] = ga[ka] + da;
        }
        if let Some(gb) = gb.as_deref_mut() {
            gb[kb] = gb[kb] + db;
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
