//! Plain slice math shared by the tape forward pass and the serving path.

use crate::scalar::Scalar;

/// w: [rows, cols] row-major, x: [cols] -> [rows].
pub fn matvec<T: Scalar>(w: &[T], rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = T::zero();
        for (a, b) in row.iter().zip(x) {
            acc += *a * *b;
        }
        out.push(acc);
    }
    out
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x - *y).collect()
}

pub fn mul<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x * *y).collect()
}

pub fn scale<T: Scalar>(a: &[T], c: T) -> Vec<T> {
    a.iter().map(|x| *x * c).collect()
}

pub fn axpy<T: Scalar>(acc: &mut [T], c: T, x: &[T]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, b) in acc.iter_mut().zip(x) {
        *a += c * *b;
    }
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_vec<T: Scalar>(a: &[T]) -> Vec<T> {
    a.iter().map(|x| sigmoid(*x)).collect()
}

pub fn tanh_vec<T: Scalar>(a: &[T]) -> Vec<T> {
    a.iter().map(|x| x.tanh()).collect()
}

pub fn relu_vec<T: Scalar>(a: &[T]) -> Vec<T> {
    a.iter()
        .map(|x| if *x > T::zero() { *x } else { T::zero() })
        .collect()
}

/// ln(1 + e^x) without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    let cap = T::of(30.0);
    if x > cap {
        x
    } else if x < -cap {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// ln sigmoid(x) = -softplus(-x).
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    -softplus(-x)
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(a: &[T]) -> Vec<T> {
    let max = a.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = a.iter().map(|x| (*x - max).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log softmax(a)_i = a_i - max - ln sum exp(a - max).
pub fn log_softmax<T: Scalar>(a: &[T]) -> Vec<T> {
    let max = a.iter().cloned().fold(T::neg_infinity(), T::max);
    let lse: T = a.iter().map(|x| (*x - max).exp()).sum::<T>().ln();
    a.iter().map(|x| *x - max - lse).collect()
}

/// Index of the largest entry, ties broken toward the lowest index.
pub fn argmax<T: Scalar>(a: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in a.iter().enumerate().skip(1) {
        if *x > a[best] {
            best = i;
        }
    }
    best
}
