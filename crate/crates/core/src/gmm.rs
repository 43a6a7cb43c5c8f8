//! Two-component, one-dimensional Gaussian mixture fitted by EM.
//!
//! Component 1 is the low-score (negative) mode and component 2 the
//! high-score (positive) mode; fitted mixtures are always returned with
//! `m1 <= m2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Inputs whose range is below this are not separable.
pub const MIN_SCORE_RANGE: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mixture `w1 N(m1, 1/p1) + w2 N(m2, 1/p2)`, parameterized by precisions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm1D {
    pub w1: f64,
    pub w2: f64,
    pub m1: f64,
    pub m2: f64,
    pub p1: f64,
    pub p2: f64,
}

/// Log density of `N(mean, 1/precision)` at `x`.
#[inline]
pub fn normal_log_pdf(x: f64, mean: f64, precision: f64) -> f64 {
    let d = x - mean;
    0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * d * d
}

impl Gmm1D {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.w1, self.w2, self.m1, self.m2, self.p1, self.p2]
            .iter()
            .all(|v| v.is_finite())
            && self.w1 >= 0.0
            && self.w2 >= 0.0
            && ((self.w1 + self.w2) - 1.0).abs() < 1e-9
            && self.p1 > 0.0
            && self.p2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid mixture {self:?}")))
        }
    }

    fn log_joint(&self, x: f64) -> [f64; 2] {
        [
            self.w1.ln() + normal_log_pdf(x, self.m1, self.p1),
            self.w2.ln() + normal_log_pdf(x, self.m2, self.p2),
        ]
    }

    /// Log of the mixture density at `x`.
    pub fn log_density(&self, x: f64) -> f64 {
        let [a, b] = self.log_joint(x);
        log_add_exp(a, b)
    }

    pub fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter().map(|&x| self.log_density(x)).sum()
    }

    /// Responsibilities `(r1, r2)` of the two components for `x`.
    pub fn posterior(&self, x: f64) -> (f64, f64) {
        let [a, b] = self.log_joint(x);
        let top = a.max(b);
        let ea = (a - top).exp();
        let eb = (b - top).exp();
        let z = ea + eb;
        (ea / z, eb / z)
    }

    /// Same mixture with components swapped if needed so that `m1 <= m2`.
    pub fn ordered(self) -> Self {
        if self.m1 <= self.m2 {
            self
        } else {
            Self {
                w1: self.w2,
                w2: self.w1,
                m1: self.m2,
                m2: self.m1,
                p1: self.p2,
                p2: self.p1,
            }
        }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let top = a.max(b);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + ((a - top).exp() + (b - top).exp()).ln()
}

/// Means at the smallest and largest score, unit precisions, equal weights.
pub fn init_gmm(scores: &[f64]) -> Result<Gmm1D> {
    if scores.is_empty() {
        return Err(Error::Degenerate("cannot initialize a mixture from no scores".into()));
    }
    let (lo, hi) = min_max(scores);
    Ok(Gmm1D {
        w1: 0.5,
        w2: 0.5,
        m1: lo,
        m2: hi,
        p1: 1.0,
        p2: 1.0,
    })
}

pub(crate) fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    pub iterations: usize,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Log-likelihood of the initial parameters followed by one entry per iteration.
    pub trace: Vec<f64>,
}

/// Fits the mixture to `scores` by EM starting from `init`.
///
/// Variances and weights are kept above [`VARIANCE_FLOOR`] and
/// [`WEIGHT_FLOOR`]; both floors are applied as constrained M-step maxima so
/// the log-likelihood stays non-decreasing.
pub fn fit_em(scores: &[f64], init: &Gmm1D, opts: &EmOptions) -> Result<(Gmm1D, EmReport)> {
    if scores.len() < 2 {
        return Err(Error::Degenerate(format!(
            "EM needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::Degenerate(format!("non-finite score {bad}")));
    }
    let (lo, hi) = min_max(scores);
    if hi - lo < MIN_SCORE_RANGE {
        return Err(Error::Degenerate(format!(
            "score range {} below {MIN_SCORE_RANGE}",
            hi - lo
        )));
    }
    init.validate()?;

    let n = scores.len() as f64;
    let mut g = *init;
    let mut ll = g.log_likelihood(scores);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;

        // E-step
        let mut n1 = 0.0;
        let mut n2 = 0.0;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let resp: Vec<(f64, f64)> = scores.iter().map(|&x| g.posterior(x)).collect();
        for (&x, &(r1, r2)) in scores.iter().zip(&resp) {
            n1 += r1;
            n2 += r2;
            s1 += r1 * x;
            s2 += r2 * x;
        }

        // M-step
        let m1 = if n1 > f64::MIN_POSITIVE { s1 / n1 } else { g.m1 };
        let m2 = if n2 > f64::MIN_POSITIVE { s2 / n2 } else { g.m2 };
        let mut v1 = 0.0;
        let mut v2 = 0.0;
        for (&x, &(r1, r2)) in scores.iter().zip(&resp) {
            v1 += r1 * (x - m1) * (x - m1);
            v2 += r2 * (x - m2) * (x - m2);
        }
        let v1 = if n1 > f64::MIN_POSITIVE { (v1 / n1).max(VARIANCE_FLOOR) } else { 1.0 / g.p1 };
        let v2 = if n2 > f64::MIN_POSITIVE { (v2 / n2).max(VARIANCE_FLOOR) } else { 1.0 / g.p2 };
        let w1 = (n1 / n).clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR);

        g = Gmm1D {
            w1,
            w2: 1.0 - w1,
            m1,
            m2,
            p1: 1.0 / v1,
            p2: 1.0 / v2,
        };
        let next = g.log_likelihood(scores);
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain < opts.tol {
            converged = true;
            break;
        }
    }

    Ok((
        g.ordered(),
        EmReport {
            iterations,
            log_likelihood: ll,
            converged,
            trace,
        },
    ))
}

/// [`init_gmm`] followed by [`fit_em`].
pub fn fit(scores: &[f64], opts: &EmOptions) -> Result<(Gmm1D, EmReport)> {
    let init = init_gmm(scores)?;
    fit_em(scores, &init, opts)
}
