//! Float helpers that work without `std`.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Floor applied before divisions and logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-30;

/// `ln(max(x, PROB_FLOOR))`.
#[inline]
pub fn ln_floor(x: f64) -> f64 {
    ln(x.max(PROB_FLOOR))
}

/// Numerically stable `ln(sum(exp(xs)))`.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ln(xs.map(|x| exp(x - m)).sum::<f64>())
}

/// Softmax of two logits, returned as `[p0, p1]`.
#[inline]
pub fn softmax2(l0: f64, l1: f64) -> [f64; 2] {
    [sigmoid(l0 - l1), sigmoid(l1 - l0)]
}

/// A standard Gumbel(0, 1) draw.
pub fn gumbel<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval keeps both logarithms finite
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -ln(-ln(u))
}
