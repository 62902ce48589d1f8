//! Scalar special functions shared by primitives and their backward rules.

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + exp(beta * x)) / beta`, evaluated without overflow.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x + (-bx).exp().ln_1p() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

pub fn softplus_grad(x: f64, beta: f64) -> f64 {
    sigmoid(beta * x)
}

pub fn normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Φ(x)`.
pub fn normal_sf(x: f64) -> f64 {
    normal_cdf(-x)
}

/// 8-point Gauss–Legendre nodes and weights on `[-1, 1]` (positive half).
const GL_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// `Φ(hi) - Φ(lo)` for `lo ≤ hi`. Narrow finite intervals integrate the
/// density directly, which avoids cancelling two nearly equal CDF values;
/// otherwise the tail that keeps precision is used.
pub fn normal_interval_mass(lo: f64, hi: f64) -> f64 {
    // The density varies by at most a factor e across the interval here.
    if lo.is_finite() && hi.is_finite() && hi - lo <= 0.5 && (hi - lo) * lo.abs().max(hi.abs()) <= 1.0 {
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let sum: f64 = GL_NODES
            .iter()
            .zip(GL_WEIGHTS)
            .map(|(&u, w)| w * (normal_pdf(mid - half * u) + normal_pdf(mid + half * u)))
            .sum();
        return half * sum;
    }
    if lo > 0.0 {
        normal_sf(lo) - normal_sf(hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

pub fn gaussian_log_density(x: f64, mean: f64, scale: f64) -> f64 {
    let u = (x - mean) / scale;
    -0.5 * LN_2PI - scale.ln() - 0.5 * u * u
}
