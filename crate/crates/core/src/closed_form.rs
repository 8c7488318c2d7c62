//! Closed-form conditional intensity and compensator of the `PMBP(2,1)`
//! process with exponential kernels.
//!
//! Every function involved is an exponential polynomial
//! `Σ c · u^m · e^{-λ u}` on `u ≥ 0`, a class closed under convolution with
//! `e^{-b u}` and under integration from 0, so the expressions are built
//! symbolically once and evaluated at any time.

use crate::data::EventHistory;
use crate::error::{PmbpError, Result};
use crate::model::ModelParams;

/// Rates closer than this (relative) are treated as equal.
const EQUAL_RATE_TOL: f64 = 1e-9;
/// Rates closer than this (relative) but not equal are rejected as ill-conditioned.
const DEGENERATE_RATE_TOL: f64 = 1e-3;

/// One term `coef · u^power · e^{-rate · u}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpTerm {
    /// Multiplier.
    pub coef: f64,
    /// Polynomial degree.
    pub power: u32,
    /// Decay rate (may be zero or negative).
    pub rate: f64,
}

/// Sum of [`ExpTerm`]s, a function of `u ≥ 0` that vanishes for `u < 0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpPoly {
    /// Terms of the sum.
    pub terms: Vec<ExpTerm>,
}

fn factorial(m: u32) -> f64 {
    (1..=m).map(f64::from).product()
}

fn same_rate(a: f64, b: f64) -> bool {
    (a - b).abs() <= EQUAL_RATE_TOL * a.abs().max(b.abs())
}

impl ExpPoly {
    /// Constant `c` on `u ≥ 0`.
    pub fn constant(c: f64) -> Self {
        Self::exp(c, 0.0)
    }

    /// `c · e^{-rate · u}`.
    pub fn exp(c: f64, rate: f64) -> Self {
        ExpPoly { terms: vec![ExpTerm { coef: c, power: 0, rate }] }
    }

    /// Value at `u`; zero for `u < 0`.
    pub fn eval(&self, u: f64) -> f64 {
        if u < 0.0 {
            return 0.0;
        }
        self.terms.iter().map(|t| t.coef * u.powi(t.power as i32) * (-t.rate * u).exp()).sum()
    }

    /// Sum of two polynomials with like terms merged.
    pub fn add(&self, other: &ExpPoly) -> ExpPoly {
        let mut out = self.clone();
        for t in &other.terms {
            out.push(*t);
        }
        out
    }

    /// `c · self`.
    pub fn scale(&self, c: f64) -> ExpPoly {
        ExpPoly { terms: self.terms.iter().map(|t| ExpTerm { coef: c * t.coef, ..*t }).collect() }
    }

    fn push(&mut self, t: ExpTerm) {
        if t.coef == 0.0 {
            return;
        }
        match self.terms.iter_mut().find(|s| s.power == t.power && same_rate(s.rate, t.rate)) {
            Some(s) => s.coef += t.coef,
            None => self.terms.push(t),
        }
    }

    /// Convolution `(self * e^{-b ·})(u) = ∫_0^u self(s) e^{-b(u - s)} ds`.
    pub fn conv_exp(&self, b: f64) -> Result<ExpPoly> {
        let mut out = ExpPoly::default();
        for t in &self.terms {
            let (a, m, c) = (t.rate, t.power, t.coef);
            if same_rate(a, b) {
                out.push(ExpTerm { coef: c / f64::from(m + 1), power: m + 1, rate: b });
                continue;
            }
            let k = a - b;
            if k.abs() < DEGENERATE_RATE_TOL * a.abs().max(b.abs()) {
                return Err(PmbpError::DegenerateParameters(format!(
                    "decay rates {a} and {b} are too close for the closed form"
                )));
            }
            // ∫_0^u s^m e^{-k s} ds = m!/k^{m+1} [1 - e^{-k u} Σ_{j≤m} (k u)^j / j!]
            let lead = factorial(m) / k.powi(m as i32 + 1);
            out.push(ExpTerm { coef: c * lead, power: 0, rate: b });
            for j in 0..=m {
                out.push(ExpTerm { coef: -c * lead * k.powi(j as i32) / factorial(j), power: j, rate: a });
            }
        }
        Ok(out)
    }

    /// Convolution with the kernel `α θ e^{-θ u}`.
    pub fn conv_kernel(&self, alpha: f64, theta: f64) -> Result<ExpPoly> {
        Ok(self.conv_exp(theta)?.scale(alpha * theta))
    }

    /// Antiderivative vanishing at 0.
    pub fn integral(&self) -> Result<ExpPoly> {
        self.conv_exp(0.0)
    }
}

/// Closed-form `PMBP(2,1)` oracle: dimension 1 censored, dimension 2 observed.
#[derive(Debug, Clone)]
pub struct ClosedFormPmbp21 {
    params: ModelParams,
    /// Background-driven part of `ξ¹` (impulse and constant rate).
    base1: ExpPoly,
    base1_int: ExpPoly,
    /// Response of `ξ¹` to one dimension-2 event.
    resp1: ExpPoly,
    resp1_int: ExpPoly,
    /// Background-driven part of `ξ²` excluding `ν²`.
    base2: ExpPoly,
    base2_int: ExpPoly,
    /// Response of `ξ²` to one dimension-2 event.
    resp2: ExpPoly,
    resp2_int: ExpPoly,
}

/// `(ξ¹, ξ², Ξ¹, Ξ²)` at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pmbp21Values {
    /// Intensity of the censored dimension.
    pub xi1: f64,
    /// Intensity of the observed dimension.
    pub xi2: f64,
    /// Compensator of the censored dimension.
    pub comp1: f64,
    /// Compensator of the observed dimension.
    pub comp2: f64,
}

impl ClosedFormPmbp21 {
    /// Builds the symbolic expressions for `params` (requires `d = 2`, `e = 1`).
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        if params.d != 2 || params.e != 1 {
            return Err(PmbpError::Dimension(format!("closed form needs d=2, e=1, got d={}, e={}", params.d, params.e)));
        }
        let (a, th) = (&params.alpha, &params.theta);
        if a[0][0] >= 1.0 {
            return Err(PmbpError::NotSubcritical(a[0][0]));
        }
        let h = ExpPoly::exp(a[0][0] * th[0][0], (1.0 - a[0][0]) * th[0][0]);
        let big_h = h.integral()?;
        let (nu1, g1) = (params.nu[0], params.gamma[0]);
        // ξ¹ background: ν¹(1 + H) + γ¹ h
        let base1 = ExpPoly::constant(nu1).add(&big_h.scale(nu1)).add(&h.scale(g1));
        // ξ¹ response to an observed event: φ¹² + h * φ¹²
        let phi12 = ExpPoly::exp(a[0][1] * th[0][1], th[0][1]);
        let resp1 = phi12.add(&h.conv_kernel(a[0][1], th[0][1])?);
        // ξ² background: φ²¹ * (ν¹(1 + H) + γ¹ h) + γ¹ φ²¹
        let phi21 = ExpPoly::exp(a[1][0] * th[1][0], th[1][0]);
        let base2 = base1.conv_kernel(a[1][0], th[1][0])?.add(&phi21.scale(g1));
        // ξ² response: φ²² + φ²¹ * resp1
        let phi22 = ExpPoly::exp(a[1][1] * th[1][1], th[1][1]);
        let resp2 = phi22.add(&resp1.conv_kernel(a[1][0], th[1][0])?);
        Ok(ClosedFormPmbp21 {
            params: params.clone(),
            base1_int: base1.integral()?,
            resp1_int: resp1.integral()?,
            base2_int: base2.integral()?,
            resp2_int: resp2.integral()?,
            base1,
            resp1,
            base2,
            resp2,
        })
    }

    /// Values at time `t ≥ 0` given the observed dimension-2 timestamps.
    pub fn eval(&self, events2: &[f64], t: f64) -> Pmbp21Values {
        let p = &self.params;
        let mut v = Pmbp21Values {
            xi1: self.base1.eval(t),
            xi2: p.nu[1] + self.base2.eval(t),
            comp1: self.base1_int.eval(t),
            comp2: p.nu[1] * t + self.base2_int.eval(t),
        };
        if t > 0.0 {
            v.comp1 += p.gamma[0];
            v.comp2 += p.gamma[1];
        }
        for &s in events2.iter().filter(|&&s| s < t) {
            let u = t - s;
            v.xi1 += self.resp1.eval(u);
            v.xi2 += self.resp2.eval(u);
            v.comp1 += self.resp1_int.eval(u);
            v.comp2 += self.resp2_int.eval(u);
        }
        v
    }
}

/// `(ξ¹, ξ², Ξ¹, Ξ²)` of a `PMBP(2,1)` process at `t` from dimension 2 of `history`.
pub fn closed_form_pmbp21(params: &ModelParams, history: &EventHistory, t: f64) -> Result<Pmbp21Values> {
    if history.dim() != 2 {
        return Err(PmbpError::Dimension("closed form needs a 2-dimensional history".into()));
    }
    Ok(ClosedFormPmbp21::new(params)?.eval(&history.events[1], t))
}
