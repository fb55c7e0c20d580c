//! Special functions and numerically stable helpers.
//!
//! The regularized incomplete beta function is evaluated with the modified
//! Lentz continued fraction; the lower regularized incomplete gamma function
//! uses the power series below `a + 1` and the Legendre continued fraction
//! above it.

use crate::num::Real;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const CF_MAX_ITER: usize = 10_000;

/// Logistic link `1 / (1 + exp(-x))`.
#[inline]
pub fn logistic<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(logistic(x))` without cancellation.
#[inline]
pub fn log_logistic<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `log(1 - logistic(x)) = log_logistic(-x)`.
#[inline]
pub fn log1m_logistic<T: Real>(x: T) -> T {
    log_logistic(-x)
}

#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// Log-sum-exp; returns `-inf` when every term is `-inf` (or the slice is empty).
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    if m == T::infinity() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Natural log of the gamma function for `x > 0` (Lanczos approximation).
pub fn ln_gamma<T: Real>(x: T) -> T {
    if x < T::lit(0.5) {
        // reflection
        let pi = T::PI();
        return (pi / (pi * x).sin()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut a = T::lit(LANCZOS_COEF[0]);
    let t = x + T::lit(LANCZOS_G + 0.5);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a = a + T::lit(c) / (x + T::count(i));
    }
    T::lit(0.5) * (T::lit(2.0) * T::PI()).ln() + (x + T::lit(0.5)) * t.ln() - t + a.ln()
}

pub fn ln_beta<T: Real>(a: T, b: T) -> T {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf<T: Real>(a: T, b: T, x: T) -> Option<T> {
    let tiny = T::min_positive_value() / T::epsilon();
    let eps = T::epsilon();
    let one = T::one();
    let two = T::lit(2.0);
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = T::count(m);
        let m2 = two * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h = h * d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let del = d * c;
        h = h * del;
        if (del - one).abs() <= eps {
            return Some(h);
        }
    }
    None
}

/// Regularized incomplete beta function `I_x(a, b)`, i.e. the Beta(a, b) CDF at `x`.
///
/// Returns `NaN` for invalid shape parameters.
pub fn beta_inc_reg<T: Real>(a: T, b: T, x: T) -> T {
    if !(a > T::zero() && b > T::zero()) || x.is_nan() {
        return T::nan();
    }
    if x <= T::zero() {
        return T::zero();
    }
    if x >= T::one() {
        return T::one();
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    let front = ln_front.exp();
    let switch = (a + T::one()) / (a + b + T::lit(2.0));
    if x < switch {
        match beta_cf(a, b, x) {
            Some(cf) => front * cf / a,
            None => T::nan(),
        }
    } else {
        match beta_cf(b, a, T::one() - x) {
            Some(cf) => T::one() - front * cf / b,
            None => T::nan(),
        }
    }
}

/// Beta(a, b) log-density.
pub fn beta_ln_pdf<T: Real>(a: T, b: T, x: T) -> T {
    if x <= T::zero() || x >= T::one() {
        return T::neg_infinity();
    }
    (a - T::one()) * x.ln() + (b - T::one()) * (-x).ln_1p() - ln_beta(a, b)
}

/// Gamma(shape, rate) log-density.
pub fn gamma_ln_pdf<T: Real>(shape: T, rate: T, x: T) -> T {
    if x <= T::zero() {
        return T::neg_infinity();
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - T::one()) * x.ln() - rate * x
}

/// Lower regularized incomplete gamma function `P(a, x)`, the Gamma(a, 1) CDF at `x`.
pub fn gamma_inc_lower_reg<T: Real>(a: T, x: T) -> T {
    if !(a > T::zero()) || x.is_nan() {
        return T::nan();
    }
    if x <= T::zero() {
        return T::zero();
    }
    if x.is_infinite() {
        return T::one();
    }
    let eps = T::epsilon();
    let ln_front = a * x.ln() - x - ln_gamma(a);
    if x < a + T::one() {
        let mut ap = a;
        let mut del = T::one() / a;
        let mut sum = del;
        for _ in 0..CF_MAX_ITER {
            ap = ap + T::one();
            del = del * x / ap;
            sum = sum + del;
            if del.abs() < sum.abs() * eps {
                break;
            }
        }
        (sum.ln() + ln_front).exp().min(T::one())
    } else {
        let tiny = T::min_positive_value() / eps;
        let mut b = x + T::one() - a;
        let mut c = T::one() / tiny;
        let mut d = T::one() / b;
        let mut h = d;
        for i in 1..=CF_MAX_ITER {
            let i = T::count(i);
            let an = -i * (i - a);
            b = b + T::lit(2.0);
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = T::one() / d;
            let del = d * c;
            h = h * del;
            if (del - T::one()).abs() <= eps {
                break;
            }
        }
        (T::one() - (ln_front + h.ln()).exp()).max(T::zero())
    }
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum<T> {
    sum: T,
    comp: T,
}

impl<T: Real> CompensatedSum<T> {
    pub fn new() -> Self {
        Self { sum: T::zero(), comp: T::zero() }
    }

    #[inline]
    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp = self.comp + ((self.sum - t) + x);
        } else {
            self.comp = self.comp + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.comp
    }
}

impl<T: Real> FromIterator<T> for CompensatedSum<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of a sequence; `-inf` terms propagate.
pub fn stable_sum<T: Real, I: IntoIterator<Item = T>>(iter: I) -> T {
    let mut acc = CompensatedSum::new();
    for x in iter {
        if x == T::neg_infinity() {
            return x;
        }
        acc.add(x);
    }
    acc.value()
}
