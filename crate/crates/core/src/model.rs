//! Semi-linear SDE problems
//!
//! `du = (A u + F(u)) dt + Σ_i (B_i u + g_i(u)) dW_i`, `u(0) = u0`.
//!
//! Vector fields are stored as shared closures writing into caller-owned
//! buffers so that stepping allocates nothing. A missing drift or diffusion
//! is treated as identically zero.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::matexp::{self, CommutatorReport, DEFAULT_COMMUTATOR_TOL};
use crate::noise::NoiseLevel;

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type JacobianField = Arc<dyn Fn(&[f64], &mut Mat) + Send + Sync>;
/// Exact solution along one sampled path: given the noise on some grid and
/// `u0`, returns the state at every point of that grid.
pub type ExactSolution = Arc<dyn Fn(&NoiseLevel, &[f64]) -> Trajectory + Send + Sync>;

pub const BUILTIN_PROBLEMS: [&str; 4] =
    ["ginzburg_landau", "diag_noise", "noncomm_noise", "stiff2d"];

/// States on a uniform grid, flattened `(len) × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub d: usize,
    pub states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n * self.d..(n + 1) * self.d]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

#[derive(Clone)]
pub struct SdeProblem {
    name: String,
    d: usize,
    m: usize,
    a: Mat,
    bs: Vec<Mat>,
    drift: Option<VectorField>,
    diffusions: Option<Vec<VectorField>>,
    jacobians: Option<Vec<JacobianField>>,
    u0: Vec<f64>,
    commutative_noise: bool,
    exact: Option<ExactSolution>,
    commutators: CommutatorReport,
    waived: bool,
    homotopy_weights: Option<(f64, f64)>,
}

impl fmt::Debug for SdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeProblem")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("m", &self.m)
            .field("commutative_noise", &self.commutative_noise)
            .field("commutators", &self.commutators)
            .field("waived", &self.waived)
            .finish_non_exhaustive()
    }
}

/// Builder for [`SdeProblem`]; `build` checks dimensions and commutators.
pub struct ProblemBuilder {
    name: String,
    a: Mat,
    bs: Vec<Mat>,
    u0: Vec<f64>,
    drift: Option<VectorField>,
    diffusions: Option<Vec<VectorField>>,
    jacobians: Option<Vec<JacobianField>>,
    commutative_noise: bool,
    exact: Option<ExactSolution>,
    tol: f64,
    waive: bool,
    homotopy_weights: Option<(f64, f64)>,
}

impl ProblemBuilder {
    pub fn new(name: impl Into<String>, a: Mat, bs: Vec<Mat>, u0: Vec<f64>) -> Self {
        ProblemBuilder {
            name: name.into(),
            a,
            bs,
            u0,
            drift: None,
            diffusions: None,
            jacobians: None,
            commutative_noise: false,
            exact: None,
            tol: DEFAULT_COMMUTATOR_TOL,
            waive: false,
            homotopy_weights: None,
        }
    }

    pub fn drift(mut self, f: VectorField) -> Self {
        self.drift = Some(f);
        self
    }

    pub fn diffusions(mut self, gs: Vec<VectorField>) -> Self {
        self.diffusions = Some(gs);
        self
    }

    pub fn jacobians(mut self, dgs: Vec<JacobianField>) -> Self {
        self.jacobians = Some(dgs);
        self
    }

    pub fn commutative_noise(mut self, yes: bool) -> Self {
        self.commutative_noise = yes;
        self
    }

    pub fn exact(mut self, e: ExactSolution) -> Self {
        self.exact = Some(e);
        self
    }

    pub fn commutator_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn waive_commutators(mut self, yes: bool) -> Self {
        self.waive = yes;
        self
    }

    /// `(α, β)` weights of the nonlinear and linear noise parts.
    pub fn homotopy_weights(mut self, alpha: f64, beta: f64) -> Self {
        self.homotopy_weights = Some((alpha, beta));
        self
    }

    pub fn build(self) -> Result<SdeProblem> {
        let d = self.a.dim();
        let m = self.bs.len();
        if d == 0 || m == 0 {
            return Err(Error::InvalidInput("state and noise dimensions must be >= 1".into()));
        }
        if self.u0.len() != d {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: d,
                actual: self.u0.len(),
            });
        }
        if self.u0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state"));
        }
        self.a.ensure_finite("A")?;
        for b in &self.bs {
            b.ensure_finite("B_i")?;
        }
        if let Some(gs) = &self.diffusions {
            if gs.len() != m {
                return Err(Error::DimensionMismatch {
                    context: "diffusion fields",
                    expected: m,
                    actual: gs.len(),
                });
            }
        }
        if let Some(dgs) = &self.jacobians {
            if dgs.len() != m {
                return Err(Error::DimensionMismatch {
                    context: "diffusion Jacobians",
                    expected: m,
                    actual: dgs.len(),
                });
            }
        }
        let commutators = matexp::check_commutators(&self.a, &self.bs, self.tol)?;
        if !commutators.pass && !self.waive {
            return Err(Error::NonCommuting {
                residual: commutators.max_residual,
                tol: self.tol,
            });
        }
        let problem = SdeProblem {
            name: self.name,
            d,
            m,
            a: self.a,
            bs: self.bs,
            drift: self.drift,
            diffusions: self.diffusions,
            jacobians: self.jacobians,
            u0: self.u0,
            commutative_noise: self.commutative_noise,
            exact: self.exact,
            commutators,
            waived: !commutators.pass,
            homotopy_weights: self.homotopy_weights,
        };
        // Output sanity at the initial state.
        let mut buf = vec![0.0; d];
        problem.eval_drift(&problem.u0, &mut buf);
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("drift at u0"));
        }
        for i in 0..m {
            problem.eval_diffusion(i, &problem.u0, &mut buf);
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("diffusion at u0"));
            }
        }
        Ok(problem)
    }
}

impl SdeProblem {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn bs(&self) -> &[Mat] {
        &self.bs
    }

    pub fn u0(&self) -> &[f64] {
        &self.u0
    }

    pub fn commutative_noise(&self) -> bool {
        self.commutative_noise
    }

    pub fn commutators(&self) -> CommutatorReport {
        self.commutators
    }

    /// True when the commutator check failed and the problem was built anyway.
    pub fn waived(&self) -> bool {
        self.waived
    }

    pub fn has_drift(&self) -> bool {
        self.drift.is_some()
    }

    pub fn has_diffusion(&self) -> bool {
        self.diffusions.is_some()
    }

    /// Jacobians are available, or not needed because every g_i is zero.
    pub fn has_jacobians(&self) -> bool {
        self.jacobians.is_some() || self.diffusions.is_none()
    }

    pub fn exact(&self) -> Option<&ExactSolution> {
        self.exact.as_ref()
    }

    pub fn homotopy_weights(&self) -> Option<(f64, f64)> {
        self.homotopy_weights
    }

    /// `p = |β| / (|α| + |β|)` when the problem exposes its noise weights.
    pub fn default_homotopy(&self) -> Option<f64> {
        let (alpha, beta) = self.homotopy_weights?;
        let denom = alpha.abs() + beta.abs();
        (denom > 0.0).then(|| beta.abs() / denom)
    }

    pub fn eval_drift(&self, u: &[f64], out: &mut [f64]) {
        match &self.drift {
            Some(f) => f(u, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    pub fn eval_diffusion(&self, i: usize, u: &[f64], out: &mut [f64]) {
        match &self.diffusions {
            Some(gs) => gs[i](u, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// Writes `Dg_i(u)`; fails when g is nonzero and no Jacobians were supplied.
    pub fn eval_jacobian(&self, i: usize, u: &[f64], out: &mut Mat) -> Result<()> {
        match (&self.jacobians, &self.diffusions) {
            (Some(dgs), _) => {
                dgs[i](u, out);
                Ok(())
            }
            (None, None) => {
                out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
                Ok(())
            }
            (None, Some(_)) => Err(Error::MissingJacobian("h_tensor")),
        }
    }

    pub fn drift_at(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.eval_drift(u, &mut out);
        out
    }

    pub fn diffusion_at(&self, i: usize, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.eval_diffusion(i, u, &mut out);
        out
    }

    /// `g_i^p(u) = g_i(u) + (1-p) B_i u`.
    pub fn g_p(&self, i: usize, u: &[f64], p: f64) -> Vec<f64> {
        let mut out = self.diffusion_at(i, u);
        self.bs[i].matvec_acc(1.0 - p, u, &mut out);
        out
    }

    /// `f̃^p(u) = F(u) - Σ p B_i g_i^p(u)`; `p = 1` gives `f̃ = F - Σ B_i g_i`.
    pub fn f_tilde_p(&self, u: &[f64], p: f64) -> Vec<f64> {
        let mut out = self.drift_at(u);
        for i in 0..self.m {
            let gp = self.g_p(i, u, p);
            self.bs[i].matvec_acc(-p, &gp, &mut out);
        }
        out
    }

    pub fn f_tilde(&self, u: &[f64]) -> Vec<f64> {
        self.f_tilde_p(u, 1.0)
    }

    /// `H_{i,l}(u) = Dg_i(u) (B_l u + g_l(u)) - B_l g_i(u)`.
    pub fn h_tensor(&self, u: &[f64], i: usize, l: usize) -> Result<Vec<f64>> {
        self.h_tensor_p(u, i, l, 1.0)
    }

    /// The same tensor for the homotopy splitting with linear part `p B` and
    /// nonlinearity `g^p`: `(Dg_i + (1-p) B_i) G_l - p B_l g_i^p`.
    pub fn h_tensor_p(&self, u: &[f64], i: usize, l: usize, p: f64) -> Result<Vec<f64>> {
        if i >= self.m || l >= self.m {
            return Err(Error::InvalidInput(format!("noise index out of range ({i}, {l})")));
        }
        let mut jac = Mat::zeros(self.d);
        self.eval_jacobian(i, u, &mut jac)
            .map_err(|_| Error::MissingJacobian("h_tensor"))?;
        jac.add_scaled(1.0 - p, &self.bs[i]);
        let mut big_g = self.diffusion_at(l, u);
        self.bs[l].matvec_acc(1.0, u, &mut big_g);
        let mut out = jac.matvec(&big_g);
        let gp = self.g_p(i, u, p);
        self.bs[l].matvec_acc(-p, &gp, &mut out);
        Ok(out)
    }
}

/// Parameters of a built-in problem; missing entries take the defaults.
#[derive(Debug, Clone, Default)]
pub struct BuiltinParams {
    values: Vec<(String, f64)>,
    waive: Option<bool>,
}

impl BuiltinParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.values.push((key.to_string(), value));
        self
    }

    pub fn waive_commutators(mut self, yes: bool) -> Self {
        self.waive = Some(yes);
        self
    }

    fn take(&self, allowed: &[&str]) -> Result<()> {
        for (k, _) in &self.values {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Unknown {
                    kind: "problem parameter",
                    name: k.clone(),
                });
            }
        }
        Ok(())
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        self.values
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map_or(default, |(_, v)| *v)
    }
}

/// Parameter names accepted by each builtin.
pub fn builtin_param_names(name: &str) -> Option<&'static [&'static str]> {
    match name {
        "ginzburg_landau" => Some(&["sigma", "u0"]),
        "diag_noise" | "noncomm_noise" => Some(&["alpha", "beta", "r"]),
        "stiff2d" => Some(&["beta", "sigma", "rho"]),
        _ => None,
    }
}

pub fn builtin(name: &str, params: &BuiltinParams) -> Result<SdeProblem> {
    let allowed = builtin_param_names(name).ok_or_else(|| Error::Unknown {
        kind: "problem",
        name: name.to_string(),
    })?;
    params.take(allowed)?;
    match name {
        "ginzburg_landau" => ginzburg_landau(params.get("sigma", 2.0), params.get("u0", 1.0)),
        "diag_noise" => diag_noise(
            params.get("alpha", 0.1),
            params.get("beta", 1.0),
            params.get("r", 4.0),
            params.waive.unwrap_or(true),
        ),
        "noncomm_noise" => noncomm_noise(
            params.get("alpha", 0.1),
            params.get("beta", 1.0),
            params.get("r", 4.0),
            params.waive.unwrap_or(true),
        ),
        "stiff2d" => stiff2d(
            params.get("beta", 5.0),
            params.get("sigma", 4.0),
            params.get("rho", 0.5),
        ),
        _ => unreachable!(),
    }
}

/// `du = (-u + σ/2 u - u³) dt + √σ u dW`, with its closed-form solution.
pub fn ginzburg_landau(sigma: f64, u0: f64) -> Result<SdeProblem> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
    }
    let s = sigma.sqrt();
    let exact: ExactSolution = Arc::new(move |noise: &NoiseLevel, init: &[f64]| {
        let x0 = init[0];
        let h = noise.dt();
        let w = noise.path();
        let mut states = Vec::with_capacity(w.len());
        let mut integral = 0.0;
        let mut prev = 1.0; // integrand at t = 0
        states.push(x0);
        for (k, &wk) in w.iter().enumerate().skip(1) {
            let t = k as f64 * h;
            let cur = (-2.0 * t + 2.0 * s * wk).exp();
            integral += 0.5 * h * (prev + cur);
            prev = cur;
            let num = x0 * (-t + s * wk).exp();
            states.push(num / (1.0 + 2.0 * x0 * x0 * integral).sqrt());
        }
        Trajectory { d: 1, states }
    });
    ProblemBuilder::new(
        "ginzburg_landau",
        Mat::from_diag(&[-1.0 + 0.5 * sigma]),
        vec![Mat::from_diag(&[s])],
        vec![u0],
    )
    .drift(Arc::new(|u, out| out[0] = -u[0] * u[0] * u[0]))
    .commutative_noise(true)
    .exact(exact)
    .build()
}

fn laplacian_4(r: f64) -> Mat {
    let mut a = Mat::zeros(4);
    for i in 0..4 {
        a[(i, i)] = -2.0 * r;
        if i + 1 < 4 {
            a[(i, i + 1)] = r;
            a[(i + 1, i)] = r;
        }
    }
    a
}

fn unit_diag(d: usize, i: usize, scale: f64) -> Mat {
    let mut e = vec![0.0; d];
    e[i] = scale;
    Mat::from_diag(&e)
}

fn saturating_drift() -> VectorField {
    Arc::new(|u, out| {
        for (o, &x) in out.iter_mut().zip(u) {
            *o = x / (1.0 + x.abs());
        }
    })
}

/// Four-point discretised heat equation with diagonal noise
/// `(β u_i + α/(1+u_i²)) dW_i` on component `i`.
pub fn diag_noise(alpha: f64, beta: f64, r: f64, waive: bool) -> Result<SdeProblem> {
    let d = 4;
    let gs: Vec<VectorField> = (0..d)
        .map(|i| -> VectorField {
            Arc::new(move |u: &[f64], out: &mut [f64]| {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[i] = alpha / (1.0 + u[i] * u[i]);
            })
        })
        .collect();
    let dgs: Vec<JacobianField> = (0..d)
        .map(|i| -> JacobianField {
            Arc::new(move |u: &[f64], out: &mut Mat| {
                out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
                let q = 1.0 + u[i] * u[i];
                out[(i, i)] = -2.0 * alpha * u[i] / (q * q);
            })
        })
        .collect();
    ProblemBuilder::new(
        "diag_noise",
        laplacian_4(r),
        (0..d).map(|i| unit_diag(d, i, beta)).collect(),
        vec![1.0; d],
    )
    .drift(saturating_drift())
    .diffusions(gs)
    .jacobians(dgs)
    .commutative_noise(true)
    .waive_commutators(waive)
    .homotopy_weights(alpha, beta)
    .build()
}

/// Same drift, with noise `(β u_j - α u_{j-1}) dW_j` on component `j`
/// (`u_0` term absent for the first component).
pub fn noncomm_noise(alpha: f64, beta: f64, r: f64, waive: bool) -> Result<SdeProblem> {
    let d = 4;
    let gs: Vec<VectorField> = (0..d)
        .map(|j| -> VectorField {
            Arc::new(move |u: &[f64], out: &mut [f64]| {
                out.iter_mut().for_each(|v| *v = 0.0);
                if j > 0 {
                    out[j] = -alpha * u[j - 1];
                }
            })
        })
        .collect();
    let dgs: Vec<JacobianField> = (0..d)
        .map(|j| -> JacobianField {
            Arc::new(move |_u: &[f64], out: &mut Mat| {
                out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
                if j > 0 {
                    out[(j, j - 1)] = -alpha;
                }
            })
        })
        .collect();
    ProblemBuilder::new(
        "noncomm_noise",
        laplacian_4(r),
        (0..d).map(|i| unit_diag(d, i, beta)).collect(),
        vec![1.0; d],
    )
    .drift(saturating_drift())
    .diffusions(gs)
    .jacobians(dgs)
    .commutative_noise(false)
    .waive_commutators(waive)
    .homotopy_weights(alpha, beta)
    .build()
}

/// Linear stiff oscillator with the noise split into scalar multiples of
/// the identity (`B`) plus the off-diagonal remainder (`g`).
pub fn stiff2d(beta: f64, sigma: f64, rho: f64) -> Result<SdeProblem> {
    let a = Mat::from_rows(&[vec![0.0, beta], vec![-beta, 0.0]])?;
    let (s, q) = (0.5 * sigma, 0.5 * rho);
    let g1: VectorField = Arc::new(move |u, out| {
        out[0] = s * u[1];
        out[1] = s * u[0];
    });
    let g2: VectorField = Arc::new(move |u, out| {
        out[0] = -q * u[1];
        out[1] = -q * u[0];
    });
    let dg1: JacobianField = Arc::new(move |_u, out| {
        *out = Mat::from_rows(&[vec![0.0, s], vec![s, 0.0]]).unwrap();
    });
    let dg2: JacobianField = Arc::new(move |_u, out| {
        *out = Mat::from_rows(&[vec![0.0, -q], vec![-q, 0.0]]).unwrap();
    });
    ProblemBuilder::new(
        "stiff2d",
        a,
        vec![Mat::identity(2).scaled(s), Mat::identity(2).scaled(q)],
        vec![1.0, 0.0],
    )
    .diffusions(vec![g1, g2])
    .jacobians(vec![dg1, dg2])
    .commutative_noise(true)
    .build()
}

/// Pure linear problem `du = A u dt + Σ B_i u dW_i` with its exact solution.
/// Requires commuting matrices.
pub fn linear_gbm(a: Mat, bs: Vec<Mat>, u0: Vec<f64>) -> Result<SdeProblem> {
    let (a2, bs2) = (a.clone(), bs.clone());
    let exact: ExactSolution = Arc::new(move |noise: &NoiseLevel, init: &[f64]| {
        let d = init.len();
        let w = noise.path();
        let m = noise.noise_dim();
        let mut states = Vec::with_capacity(w.len() * d);
        for k in 0..=noise.steps() {
            let t = k as f64 * noise.dt();
            let x = if k == 0 {
                Mat::zeros(d)
            } else {
                matexp::gbm_exponent(Some(&a2), &bs2, t, &w[k * m..(k + 1) * m], 1.0)
            };
            states.extend(matexp::exp_unchecked(&x).matvec(init));
        }
        Trajectory { d, states }
    });
    ProblemBuilder::new("linear_gbm", a, bs, u0)
        .commutative_noise(true)
        .exact(exact)
        .build()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(d: usize) -> Vec<Vec<f64>> {
        let raw = [0.3, -1.7, 2.2, 0.05, -0.6, 1.1, -2.5, 0.9, 0.0, 3.3, -0.2, 1.9];
        (0..5)
            .map(|k| (0..d).map(|j| raw[(k * 3 + j * 5) % raw.len()]).collect())
            .collect()
    }

    #[test]
    fn ginzburg_landau_constants() {
        let p = ginzburg_landau(2.0, 1.0).unwrap();
        assert_eq!(p.a()[(0, 0)], 0.0);
        assert!((p.bs()[0][(0, 0)] - 2f64.sqrt()).abs() < 1e-16);
        assert!(p.commutators().pass);
        for u in points(1) {
            assert_eq!(p.drift_at(&u)[0], -u[0].powi(3));
            assert_eq!(p.diffusion_at(0, &u)[0], 0.0);
        }
    }

    #[test]
    fn diag_noise_golden_values() {
        let (alpha, beta) = (0.1, 1.0);
        let p = diag_noise(alpha, beta, 4.0, true).unwrap();
        assert_eq!(p.a()[(1, 1)], -8.0);
        assert_eq!(p.a()[(1, 2)], 4.0);
        assert_eq!(p.a()[(0, 3)], 0.0);
        assert_eq!(p.u0(), &[1.0; 4]);
        assert!(p.waived());
        assert!((p.default_homotopy().unwrap() - 1.0 / 1.1).abs() < 1e-15);
        for u in points(4) {
            let f = p.drift_at(&u);
            for j in 0..4 {
                assert_eq!(f[j], u[j] / (1.0 + u[j].abs()));
            }
            for i in 0..4 {
                let g = p.diffusion_at(i, &u);
                for j in 0..4 {
                    let want = if i == j { alpha / (1.0 + u[j] * u[j]) } else { 0.0 };
                    assert_eq!(g[j], want);
                }
            }
        }
    }

    #[test]
    fn noncomm_noise_golden_values() {
        let alpha = 0.4;
        let p = noncomm_noise(alpha, 1.0, 4.0, true).unwrap();
        assert!(!p.commutative_noise());
        for u in points(4) {
            for j in 0..4 {
                let g = p.diffusion_at(j, &u);
                for k in 0..4 {
                    let want = if j > 0 && k == j { -alpha * u[j - 1] } else { 0.0 };
                    assert_eq!(g[k], want);
                }
            }
        }
    }

    #[test]
    fn example_two_matrices_need_waiver() {
        assert!(matches!(
            diag_noise(0.1, 1.0, 4.0, false),
            Err(Error::NonCommuting { .. })
        ));
        assert!(matches!(
            noncomm_noise(0.1, 1.0, 4.0, false),
            Err(Error::NonCommuting { .. })
        ));
        let with_waiver = noncomm_noise(0.1, 1.0, 4.0, true).unwrap();
        assert!(!with_waiver.commutators().pass);
    }

    #[test]
    fn stiff2d_constants() {
        let p = stiff2d(5.0, 4.0, 0.5).unwrap();
        assert_eq!(p.bs()[0], Mat::identity(2).scaled(2.0));
        assert_eq!(p.bs()[1], Mat::identity(2).scaled(0.25));
        assert!(p.commutators().pass);
        for u in points(2) {
            assert_eq!(p.diffusion_at(0, &u), vec![2.0 * u[1], 2.0 * u[0]]);
            assert_eq!(p.diffusion_at(1, &u), vec![-0.25 * u[1], -0.25 * u[0]]);
            assert_eq!(p.drift_at(&u), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn builtin_dispatch() {
        let p = builtin("diag_noise", &BuiltinParams::new().with("alpha", 0.1)).unwrap();
        assert_eq!(p.name(), "diag_noise");
        assert!(matches!(
            builtin("nope", &BuiltinParams::new()),
            Err(Error::Unknown { .. })
        ));
        assert!(matches!(
            builtin("stiff2d", &BuiltinParams::new().with("alpha", 1.0)),
            Err(Error::Unknown { .. })
        ));
    }

    #[test]
    fn builder_dimension_errors() {
        let r = ProblemBuilder::new("x", Mat::zeros(2), vec![Mat::zeros(3)], vec![0.0; 2]).build();
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
        let r = ProblemBuilder::new("x", Mat::zeros(2), vec![Mat::zeros(2)], vec![0.0; 3]).build();
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
        let r = ProblemBuilder::new("x", Mat::zeros(2), vec![Mat::zeros(2)], vec![0.0; 2])
            .diffusions(vec![])
            .build();
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn homotopy_endpoint_identities() {
        let p = diag_noise(0.3, 0.7, 4.0, true).unwrap();
        for u in points(4) {
            let ft = p.f_tilde(&u);
            let mut want = p.drift_at(&u);
            for i in 0..4 {
                want[i] -= 0.7 * 0.3 / (1.0 + u[i] * u[i]);
            }
            for (a, b) in ft.iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
            assert_eq!(p.f_tilde_p(&u, 0.0), p.drift_at(&u));
            for i in 0..4 {
                let mut gb = p.diffusion_at(i, &u);
                gb[i] += 0.7 * u[i];
                let gp = p.g_p(i, &u, 0.0);
                for (a, b) in gp.iter().zip(&gb) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn h_tensor_zero_without_g() {
        let p = ginzburg_landau(2.0, 1.0).unwrap();
        assert_eq!(p.h_tensor(&[0.7], 0, 0).unwrap(), vec![0.0]);
    }

    #[test]
    fn h_tensor_scalar_square() {
        let g: VectorField = Arc::new(|u, out| out[0] = u[0] * u[0]);
        let dg: JacobianField = Arc::new(|u, out| out[(0, 0)] = 2.0 * u[0]);
        let p = ProblemBuilder::new("sq", Mat::zeros(1), vec![Mat::zeros(1)], vec![1.0])
            .diffusions(vec![g])
            .jacobians(vec![dg])
            .build()
            .unwrap();
        assert_eq!(p.h_tensor(&[1.0], 0, 0).unwrap(), vec![2.0]);
        assert_eq!(p.h_tensor(&[1.5], 0, 0).unwrap(), vec![2.0 * 1.5f64.powi(3)]);
    }

    #[test]
    fn h_tensor_missing_jacobian() {
        let g: VectorField = Arc::new(|u, out| out[0] = u[0].sin());
        let p = ProblemBuilder::new("s", Mat::zeros(1), vec![Mat::zeros(1)], vec![1.0])
            .diffusions(vec![g])
            .build()
            .unwrap();
        assert!(matches!(p.h_tensor(&[1.0], 0, 0), Err(Error::MissingJacobian(_))));
    }

    fn fd_jacobian(p: &SdeProblem, i: usize, u: &[f64]) -> Mat {
        let d = u.len();
        let eps = 1e-5;
        let mut jac = Mat::zeros(d);
        for k in 0..d {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[k] += eps;
            dn[k] -= eps;
            let (gp, gm) = (p.diffusion_at(i, &up), p.diffusion_at(i, &dn));
            for j in 0..d {
                jac[(j, k)] = (gp[j] - gm[j]) / (2.0 * eps);
            }
        }
        jac
    }

    #[test]
    fn h_tensor_matches_finite_differences() {
        let problems = [
            diag_noise(0.1, 1.0, 4.0, true).unwrap(),
            noncomm_noise(0.5, 1.0, 4.0, true).unwrap(),
            stiff2d(5.0, 4.0, 0.5).unwrap(),
        ];
        for p in &problems {
            let (d, m) = (p.state_dim(), p.noise_dim());
            for u in points(d) {
                for i in 0..m {
                    let jac = fd_jacobian(p, i, &u);
                    for l in 0..m {
                        let mut gl = p.diffusion_at(l, &u);
                        p.bs()[l].matvec_acc(1.0, &u, &mut gl);
                        let mut want = jac.matvec(&gl);
                        p.bs()[l].matvec_acc(-1.0, &p.diffusion_at(i, &u), &mut want);
                        let got = p.h_tensor(&u, i, l).unwrap();
                        for (a, b) in got.iter().zip(&want) {
                            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{} {a} {b}", p.name());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn diag_noise_h_tensor_structure() {
        let p = diag_noise(0.1, 1.0, 4.0, true).unwrap();
        let u = [0.4, -1.2, 2.0, 0.7];
        for i in 0..4 {
            for l in 0..4 {
                let h = p.h_tensor(&u, i, l).unwrap();
                let nonzero = h.iter().filter(|v| **v != 0.0).count();
                if i == l {
                    assert_eq!(nonzero, 1);
                } else {
                    assert_eq!(nonzero, 0);
                }
            }
        }
    }

    #[test]
    fn gl_exact_solution_without_noise() {
        // W = 0: u(t) = e^{-t} / sqrt(1 + 2 ∫ e^{-2s} ds) = e^{-t} / sqrt(2 - e^{-2t})
        let p = ginzburg_landau(2.0, 1.0).unwrap();
        let lvl = NoiseLevel::from_parts(1.0 / 1024.0, 1, vec![0.0; 1024], None).unwrap();
        let traj = (p.exact().unwrap())(&lvl, p.u0());
        let want = (-1f64).exp() / (2.0 - (-2f64).exp()).sqrt();
        assert!((traj.last()[0] - want).abs() < 1e-6);
        assert_eq!(traj.len(), 1025);
    }
}
