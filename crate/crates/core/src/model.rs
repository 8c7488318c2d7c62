//! Model parameters, exponential kernels, block masking and subcriticality.
//!
//! Matrices are row-major with `i` the target dimension and `j` the source
//! dimension. Dimensions `0..e` are the interval-censored (mean-behavior)
//! block `E`; dimensions `e..d` carry observed timestamps (block `E^c`).

use serde::{Deserialize, Serialize};

use crate::error::{PmbpError, Result};

/// Dense row-major matrix.
pub type Matrix = Vec<Vec<f64>>;

/// All process parameters together with the dimension split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Total number of dimensions.
    pub d: usize,
    /// Number of censored dimensions; they occupy indices `0..e`.
    pub e: usize,
    /// Kernel decay rates (1/time), strictly positive.
    pub theta: Matrix,
    /// Branching factors (expected direct offspring), non-negative.
    pub alpha: Matrix,
    /// Impulse mass injected at `t = 0`.
    pub gamma: Vec<f64>,
    /// Constant background rate.
    pub nu: Vec<f64>,
}

/// Identifier of a free (fitted) scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    /// Decay rate of entry `(i, j)`.
    Theta(usize, usize),
    /// Branching factor of entry `(i, j)`.
    Alpha(usize, usize),
    /// Background rate of dimension `i`.
    Nu(usize),
}

impl ParamId {
    /// Human-readable name with 1-based indices, e.g. `theta_12`.
    pub fn name(&self) -> String {
        match *self {
            ParamId::Theta(i, j) => format!("theta_{}{}", i + 1, j + 1),
            ParamId::Alpha(i, j) => format!("alpha_{}{}", i + 1, j + 1),
            ParamId::Nu(i) => format!("nu_{}", i + 1),
        }
    }
}

impl ModelParams {
    /// Builds and validates a parameter set.
    pub fn new(e: usize, theta: Matrix, alpha: Matrix, gamma: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        let p = ModelParams { d: nu.len(), e, theta, alpha, gamma, nu };
        p.validate()?;
        Ok(p)
    }

    /// Parameters with every kernel entry equal and zero impulse.
    pub fn uniform(d: usize, e: usize, theta: f64, alpha: f64, nu: f64) -> Result<Self> {
        Self::new(e, vec![vec![theta; d]; d], vec![vec![alpha; d]; d], vec![0.0; d], vec![nu; d])
    }

    /// Checks shapes, signs and the dimension split.
    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 {
            return Err(PmbpError::InvalidParams("d must be at least 1".into()));
        }
        if self.e > d {
            return Err(PmbpError::InvalidParams(format!("e = {} exceeds d = {}", self.e, d)));
        }
        let square = |m: &Matrix| m.len() == d && m.iter().all(|r| r.len() == d);
        if !square(&self.theta) || !square(&self.alpha) {
            return Err(PmbpError::Dimension(format!("theta and alpha must be {d}x{d}")));
        }
        if self.gamma.len() != d || self.nu.len() != d {
            return Err(PmbpError::Dimension(format!("gamma and nu must have length {d}")));
        }
        for i in 0..d {
            for j in 0..d {
                let (th, al) = (self.theta[i][j], self.alpha[i][j]);
                if !(th.is_finite() && th > 0.0) {
                    return Err(PmbpError::InvalidParams(format!("theta[{i}][{j}] = {th} must be > 0")));
                }
                if !(al.is_finite() && al >= 0.0) {
                    return Err(PmbpError::InvalidParams(format!("alpha[{i}][{j}] = {al} must be >= 0")));
                }
            }
            for (name, v) in [("gamma", self.gamma[i]), ("nu", self.nu[i])] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(PmbpError::InvalidParams(format!("{name}[{i}] = {v} must be >= 0")));
                }
            }
        }
        Ok(())
    }

    /// Whether dimension `j` belongs to the censored block.
    pub fn is_censored(&self, j: usize) -> bool {
        j < self.e
    }

    /// Kernel entry `alpha * theta * exp(-theta t)` for `t >= 0`, zero before.
    pub fn phi(&self, i: usize, j: usize, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let th = self.theta[i][j];
        self.alpha[i][j] * th * (-th * t).exp()
    }

    /// Kernel integral `alpha (1 - exp(-theta t))` for `t >= 0`, zero before.
    pub fn phi_integral(&self, i: usize, j: usize, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        self.alpha[i][j] * -(-self.theta[i][j] * t).exp_m1()
    }

    /// Ordered list of free parameters: theta (row-major), alpha (row-major), nu.
    pub fn free_ids(&self) -> Vec<ParamId> {
        let d = self.d;
        let mut ids = Vec::with_capacity(2 * d * d + d);
        for i in 0..d {
            for j in 0..d {
                ids.push(ParamId::Theta(i, j));
            }
        }
        for i in 0..d {
            for j in 0..d {
                ids.push(ParamId::Alpha(i, j));
            }
        }
        ids.extend((0..d).map(ParamId::Nu));
        ids
    }

    /// Free-parameter vector in the order of [`ModelParams::free_ids`].
    pub fn to_free_vec(&self) -> Vec<f64> {
        self.free_ids().iter().map(|&id| self.get(id)).collect()
    }

    /// Copy of `self` with free parameters replaced by `x`; gamma is kept.
    pub fn with_free_vec(&self, x: &[f64]) -> Self {
        let mut p = self.clone();
        for (id, &v) in self.free_ids().iter().zip(x) {
            p.set(*id, v);
        }
        p
    }

    /// Value of one free parameter.
    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::Theta(i, j) => self.theta[i][j],
            ParamId::Alpha(i, j) => self.alpha[i][j],
            ParamId::Nu(i) => self.nu[i],
        }
    }

    /// Overwrites one free parameter.
    pub fn set(&mut self, id: ParamId, v: f64) {
        match id {
            ParamId::Theta(i, j) => self.theta[i][j] = v,
            ParamId::Alpha(i, j) => self.alpha[i][j] = v,
            ParamId::Nu(i) => self.nu[i] = v,
        }
    }
}

/// Kernel matrix at lag `t`: entry `(i, j)` is `alpha θ e^{-θ t}`, zero for `t < 0`.
pub fn phi_eval(params: &ModelParams, t: f64) -> Matrix {
    (0..params.d).map(|i| (0..params.d).map(|j| params.phi(i, j, t)).collect()).collect()
}

/// Kernel integral matrix at lag `t`.
pub fn phi_integral(params: &ModelParams, t: f64) -> Matrix {
    (0..params.d).map(|i| (0..params.d).map(|j| params.phi_integral(i, j, t)).collect()).collect()
}

/// Which source columns a [`MaskedKernel`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// Columns of the censored dimensions.
    Censored,
    /// Columns of the timestamped dimensions.
    Observed,
}

/// Kernel with the columns of one block zeroed out.
#[derive(Debug, Clone, Copy)]
pub struct MaskedKernel<'a> {
    params: &'a ModelParams,
    block: Block,
}

impl MaskedKernel<'_> {
    /// Whether source column `j` is kept.
    pub fn keeps(&self, j: usize) -> bool {
        self.params.is_censored(j) == (self.block == Block::Censored)
    }

    /// Masked kernel matrix at lag `t`.
    pub fn eval(&self, t: f64) -> Matrix {
        let d = self.params.d;
        (0..d)
            .map(|i| (0..d).map(|j| if self.keeps(j) { self.params.phi(i, j, t) } else { 0.0 }).collect())
            .collect()
    }

    /// Masked kernel integral matrix at lag `t`.
    pub fn integral(&self, t: f64) -> Matrix {
        let d = self.params.d;
        (0..d)
            .map(|i| {
                (0..d).map(|j| if self.keeps(j) { self.params.phi_integral(i, j, t) } else { 0.0 }).collect()
            })
            .collect()
    }
}

/// Splits the kernel into the censored-column part and the observed-column part.
pub fn split_kernel(params: &ModelParams) -> (MaskedKernel<'_>, MaskedKernel<'_>) {
    (MaskedKernel { params, block: Block::Censored }, MaskedKernel { params, block: Block::Observed })
}

fn check_square(m: &[Vec<f64>]) -> Result<usize> {
    let n = m.len();
    if m.iter().any(|r| r.len() != n) {
        return Err(PmbpError::Dimension(format!("expected a square matrix, got {} rows", n)));
    }
    Ok(n)
}

/// Largest eigenvalue modulus of a non-negative square matrix.
///
/// Sizes 1 and 2 use exact formulas. Larger matrices use power iteration on
/// `M + I` (whose Perron root is `ρ(M) + 1` and which is aperiodic) from the
/// all-ones start vector, tolerance `1e-10`, at most 10000 iterations.
pub fn spectral_radius(m: &[Vec<f64>]) -> Result<f64> {
    let n = check_square(m)?;
    match n {
        0 => Ok(0.0),
        1 => Ok(m[0][0].abs()),
        2 => {
            let tr = m[0][0] + m[1][1];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let disc = tr * tr - 4.0 * det;
            if disc >= 0.0 {
                let s = disc.sqrt();
                Ok(((tr + s) / 2.0).abs().max(((tr - s) / 2.0).abs()))
            } else {
                Ok(det.abs().sqrt())
            }
        }
        _ => Ok(power_iteration(m, 1e-10, 10_000)),
    }
}

fn power_iteration(m: &[Vec<f64>], tol: f64, max_iter: usize) -> f64 {
    let n = m.len();
    let mut v = vec![1.0 / n as f64; n];
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w: Vec<f64> = (0..n).map(|i| v[i] + m[i].iter().zip(&v).map(|(a, b)| a.abs() * b).sum::<f64>()).collect();
        let norm: f64 = w.iter().sum();
        if norm <= 0.0 {
            return 0.0;
        }
        let next = norm - 1.0;
        v = w.iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= tol * next.abs().max(1.0) {
            return next.max(0.0);
        }
        lambda = next;
    }
    lambda.max(0.0)
}

/// Spectral radii of the three blocks that decide subcriticality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    /// Radius of the censored block `α^{EE}`.
    pub rho_ee: f64,
    /// Radius of the observed block `α^{E^cE^c}`.
    pub rho_ecec: f64,
    /// Radius of `α^{E^cE}(I − α^{EE})^{-1} α^{EE^c}`; infinite when `ρ(α^{EE}) ≥ 1`.
    pub rho_cross: f64,
    /// All three radii are below one.
    pub subcritical: bool,
}

fn block(m: &Matrix, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Matrix {
    rows.map(|i| cols.clone().map(|j| m[i][j]).collect()).collect()
}

fn mat_mul(a: &Matrix, b: &Matrix, inner: usize) -> Matrix {
    let cols = b.first().map_or(0, |r| r.len());
    a.iter().map(|row| (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()).collect()
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub(crate) fn invert(m: &Matrix) -> Option<Matrix> {
    let n = m.len();
    let mut a: Matrix = m.iter().enumerate().map(|(i, r)| {
        let mut row = r.clone();
        row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
        row
    }).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
        if a[p][c].abs() < 1e-14 {
            return None;
        }
        a.swap(c, p);
        let piv = a[c][c];
        a[c].iter_mut().for_each(|x| *x /= piv);
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                if f != 0.0 {
                    let pivot_row = a[c].clone();
                    a[r].iter_mut().zip(&pivot_row).for_each(|(x, y)| *x -= f * y);
                }
            }
        }
    }
    Some(a.into_iter().map(|r| r[n..].to_vec()).collect())
}

/// Computes the block spectral radii and the subcriticality verdict.
pub fn check_subcriticality(params: &ModelParams) -> RegularityReport {
    let (d, e) = (params.d, params.e);
    let a = &params.alpha;
    let radius = |m: &Matrix| spectral_radius(m).unwrap_or(f64::INFINITY);
    let rho_ee = radius(&block(a, 0..e, 0..e));
    let rho_ecec = radius(&block(a, e..d, e..d));
    let rho_cross = if e == 0 || e == d {
        0.0
    } else if rho_ee >= 1.0 {
        f64::INFINITY
    } else {
        let ee = block(a, 0..e, 0..e);
        let i_minus: Matrix = (0..e).map(|i| (0..e).map(|j| f64::from(u8::from(i == j)) - ee[i][j]).collect()).collect();
        match invert(&i_minus) {
            Some(inv) => {
                let left = mat_mul(&block(a, e..d, 0..e), &inv, e);
                radius(&mat_mul(&left, &block(a, 0..e, e..d), e))
            }
            None => f64::INFINITY,
        }
    };
    RegularityReport { rho_ee, rho_ecec, rho_cross, subcritical: rho_ee < 1.0 && rho_ecec < 1.0 && rho_cross < 1.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params2(alpha: Matrix, e: usize) -> ModelParams {
        ModelParams::new(e, vec![vec![1.0; 2]; 2], alpha, vec![0.0; 2], vec![1.0; 2]).unwrap()
    }

    #[test]
    fn phi_examples() {
        let mut p = params2(vec![vec![0.0, 0.5], vec![0.5, 0.5]], 0);
        assert_eq!(phi_eval(&p, 3.7)[0][0], 0.0);
        p.alpha[0][0] = 0.5;
        assert!((phi_eval(&p, 0.0)[0][0] - 0.5).abs() < 1e-15);
        assert!(phi_eval(&p, -1.0).iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn phi_integral_examples() {
        let p = params2(vec![vec![0.5; 2]; 2], 0);
        assert!(phi_integral(&p, 0.0).iter().flatten().all(|&x| x == 0.0));
        assert!((phi_integral(&p, 1e3)[0][0] - 0.5).abs() < 1e-15);
        let expected = 0.5 * (1.0 - (-1.0f64).exp());
        assert!((phi_integral(&p, 1.0)[0][0] - expected).abs() < 1e-15);
        assert!((expected - 0.3161).abs() < 1e-4);
    }

    #[test]
    fn spectral_radius_examples() {
        assert_eq!(spectral_radius(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 1.0);
        assert!((spectral_radius(&[vec![0.2, 0.2], vec![0.2, 0.2]]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(spectral_radius(&[]).unwrap(), 0.0);
        assert!(matches!(spectral_radius(&[vec![1.0, 2.0]]), Err(PmbpError::Dimension(_))));
    }

    #[test]
    fn spectral_radius_power_iteration_matches_known_values() {
        let cyclic = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        assert!((spectral_radius(&cyclic).unwrap() - 1.0).abs() < 1e-8);
        let uniform = vec![vec![0.1; 3]; 3];
        assert!((spectral_radius(&uniform).unwrap() - 0.3).abs() < 1e-8);
        let diag = vec![vec![0.3, 0.0, 0.0], vec![0.0, 0.7, 0.0], vec![0.0, 0.0, 0.2]];
        assert!((spectral_radius(&diag).unwrap() - 0.7).abs() < 1e-7);
    }

    #[test]
    fn subcriticality_examples() {
        let p = params2(vec![vec![0.5, 0.5], vec![0.5, 0.5]], 0);
        let r = check_subcriticality(&p);
        assert!((r.rho_ecec - 1.0).abs() < 1e-12 && !r.subcritical);

        let p = params2(vec![vec![0.5, 0.0], vec![0.0, 0.5]], 2);
        let r = check_subcriticality(&p);
        assert_eq!((r.rho_ee, r.rho_ecec, r.rho_cross), (0.5, 0.0, 0.0));
        assert!(r.subcritical);

        let p = params2(vec![vec![0.5, 0.5], vec![0.5, 0.5]], 1);
        let r = check_subcriticality(&p);
        assert!((r.rho_ee - 0.5).abs() < 1e-12);
        assert!((r.rho_ecec - 0.5).abs() < 1e-12);
        assert!((r.rho_cross - 0.5).abs() < 1e-12);
        assert!(r.subcritical);

        let p = params2(vec![vec![1.5, 0.1], vec![0.1, 0.1]], 1);
        let r = check_subcriticality(&p);
        assert!(r.rho_cross.is_infinite() && !r.subcritical);
    }

    #[test]
    fn split_kernel_examples() {
        let p = params2(vec![vec![0.5; 2]; 2], 0);
        let (ke, _) = split_kernel(&p);
        assert!(ke.eval(0.3).iter().flatten().all(|&x| x == 0.0));
        let p = params2(vec![vec![0.5; 2]; 2], 2);
        let (_, kc) = split_kernel(&p);
        assert!(kc.eval(0.3).iter().flatten().all(|&x| x == 0.0));
        let p = params2(vec![vec![0.5; 2]; 2], 1);
        let (ke, _) = split_kernel(&p);
        for t in [0.0, 0.5, 3.0] {
            let m = ke.eval(t);
            assert_eq!((m[0][1], m[1][1]), (0.0, 0.0));
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(ModelParams::new(0, vec![vec![0.0]], vec![vec![0.1]], vec![0.0], vec![1.0]).is_err());
        assert!(ModelParams::new(0, vec![vec![1.0]], vec![vec![-0.1]], vec![0.0], vec![1.0]).is_err());
        assert!(ModelParams::new(2, vec![vec![1.0]], vec![vec![0.1]], vec![0.0], vec![1.0]).is_err());
        assert!(ModelParams::new(0, vec![vec![1.0]], vec![vec![0.1]], vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn free_vector_round_trip() {
        let p = params2(vec![vec![0.1, 0.2], vec![0.3, 0.4]], 1);
        let x = p.to_free_vec();
        assert_eq!(x.len(), 10);
        assert_eq!(p.with_free_vec(&x), p);
        assert_eq!(ParamId::Theta(0, 1).name(), "theta_12");
    }

    fn arb_params(d: usize) -> impl Strategy<Value = ModelParams> {
        (
            prop::collection::vec(0.05f64..5.0, d * d),
            prop::collection::vec(0.0f64..1.0, d * d),
            0..=d,
        )
            .prop_map(move |(th, al, e)| {
                let m = |v: &Vec<f64>| v.chunks(d).map(|c| c.to_vec()).collect();
                ModelParams::new(e, m(&th), m(&al), vec![0.0; d], vec![1.0; d]).unwrap()
            })
    }

    proptest! {
        #[test]
        fn masks_are_complementary(p in arb_params(3), t in 0.0f64..10.0) {
            let (ke, kc) = split_kernel(&p);
            let (a, b, full) = (ke.eval(t), kc.eval(t), phi_eval(&p, t));
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(a[i][j] + b[i][j], full[i][j]);
                }
            }
        }

        #[test]
        fn phi_integral_is_monotone(p in arb_params(3), t1 in 0.0f64..10.0, dt in 0.0f64..10.0) {
            let (a, b) = (phi_integral(&p, t1), phi_integral(&p, t1 + dt));
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!(a[i][j] <= b[i][j]);
                }
            }
        }

        #[test]
        fn spectral_radius_is_homogeneous(v in prop::collection::vec(0.0f64..1.0, 9), c in 0.0f64..4.0) {
            let m: Matrix = v.chunks(3).map(|r| r.to_vec()).collect();
            let scaled: Matrix = m.iter().map(|r| r.iter().map(|x| c * x).collect()).collect();
            let (r1, r2) = (spectral_radius(&m).unwrap(), spectral_radius(&scaled).unwrap());
            prop_assert!((r2 - c * r1).abs() <= 1e-6 * (1.0 + c * r1));
        }

        #[test]
        fn reduced_splits_use_full_radius(p in arb_params(3)) {
            let full = spectral_radius(&p.alpha).unwrap();
            for e in [0, 3] {
                let mut q = p.clone();
                q.e = e;
                let r = check_subcriticality(&q);
                prop_assert_eq!(r.subcritical, full < 1.0);
            }
        }
    }
}
