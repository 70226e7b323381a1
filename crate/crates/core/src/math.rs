//! Scalar functions shared by the tensor kernels and the expert controllers.

pub use libm::{cos, exp, fabs, log1p, pow, sqrt};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + log1p(exp(-x))
    } else {
        log1p(exp(x))
    }
}

/// `x^q`, with the convention that a zero base raised to a negative exponent
/// yields 0. That case only appears in derivative chains of fractional powers
/// evaluated at the origin, where the subgradient 0 is used.
pub fn powf(x: f64, q: f64) -> f64 {
    if x == 0.0 && q < 0.0 {
        0.0
    } else {
        pow(x, q)
    }
}

pub fn safe_recip(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        1.0 / x
    }
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn is_integer(q: f64) -> bool {
    libm::trunc(q) == q
}

pub fn norm(v: &[f64]) -> f64 {
    sqrt(v.iter().map(|x| x * x).sum())
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}
