//! Time-stepping schemes.
//!
//! The exponential-integrator family shares one update skeleton. With the
//! homotopy weight `p`, write `g^p_i = g_i + (1-p) B_i u`,
//! `f̃^p = F - p Σ B_i g^p_i` and `Ω^p = exp((A - ½ Σ p² B_i²) Δt + Σ p B_i ΔW_i)`:
//!
//! * EI0 / HomEI0 / SETD0:  `Ω^p (u + f̃^p Δt + Σ g^p_i ΔW_i)` with p = 1 / p / 0
//! * MI0 / HomMI0:          the same plus `Σ_{i,l} H^p_{i,l}(u) I[l][i]` inside
//! * EI1, EI2:              drift moved out of the propagator through `φ1(ΔtA)`
//!
//! `H^p_{i,l} = (Dg_i + (1-p) B_i) G_l - p B_l g^p_i` with `G_l = B_l u + g_l`,
//! which is `Dg_i G_l - B_l g_i` at p = 1 and `DG_i G_l` at p = 0.
//! `I[l][i]` is the iterated integral with `l` inner and `i` outer.
//!
//! When the problem passed its commutator check the propagator is applied as
//! `e^{ΔtA} Z` with `e^{ΔtA}` cached per step size; for waived problems the
//! full exponent is exponentiated every step.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mat::{norm2, Lu, Mat};
use crate::matexp;
use crate::model::{SdeProblem, Trajectory};
use crate::noise::NoiseLevel;

/// States whose Euclidean norm exceeds this are reported as blown up.
pub const OVERFLOW_GUARD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeKind {
    Em,
    Setd0,
    Setd1,
    MilsteinClassical,
    ExpMilstein,
    Ei0,
    Ei1,
    Ei2,
    HomEi0,
    Mi0,
    HomMi0,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 11] = [
        SchemeKind::Em,
        SchemeKind::Setd0,
        SchemeKind::Setd1,
        SchemeKind::MilsteinClassical,
        SchemeKind::ExpMilstein,
        SchemeKind::Ei0,
        SchemeKind::Ei1,
        SchemeKind::Ei2,
        SchemeKind::HomEi0,
        SchemeKind::Mi0,
        SchemeKind::HomMi0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Em => "EM",
            SchemeKind::Setd0 => "SETD0",
            SchemeKind::Setd1 => "SETD1",
            SchemeKind::MilsteinClassical => "MilsteinClassical",
            SchemeKind::ExpMilstein => "ExpMilstein",
            SchemeKind::Ei0 => "EI0",
            SchemeKind::Ei1 => "EI1",
            SchemeKind::Ei2 => "EI2",
            SchemeKind::HomEi0 => "HomEI0",
            SchemeKind::Mi0 => "MI0",
            SchemeKind::HomMi0 => "HomMI0",
        }
    }

    pub fn is_homotopy(self) -> bool {
        matches!(self, SchemeKind::HomEi0 | SchemeKind::HomMi0)
    }

    pub fn needs_iterated(self) -> bool {
        matches!(
            self,
            SchemeKind::MilsteinClassical
                | SchemeKind::ExpMilstein
                | SchemeKind::Mi0
                | SchemeKind::HomMi0
        )
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "scheme",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeSpec {
    kind: SchemeKind,
    p: Option<f64>,
}

impl SchemeSpec {
    /// Non-homotopy kinds only.
    pub fn new(kind: SchemeKind) -> Result<Self> {
        if kind.is_homotopy() {
            return Err(Error::InvalidInput(format!("{kind} needs a homotopy parameter")));
        }
        Ok(SchemeSpec { kind, p: None })
    }

    pub fn homotopy(kind: SchemeKind, p: f64) -> Result<Self> {
        if !kind.is_homotopy() {
            return Err(Error::InvalidInput(format!("{kind} takes no homotopy parameter")));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("homotopy parameter must lie in [0,1], got {p}")));
        }
        Ok(SchemeSpec { kind, p: Some(p) })
    }

    /// Fills in `p` from the problem's noise weights for homotopy kinds.
    pub fn for_problem(kind: SchemeKind, problem: &SdeProblem) -> Result<Self> {
        if kind.is_homotopy() {
            let p = problem.default_homotopy().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{kind} on `{}` needs an explicit homotopy parameter",
                    problem.name()
                ))
            })?;
            SchemeSpec::homotopy(kind, p)
        } else {
            SchemeSpec::new(kind)
        }
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn p(&self) -> Option<f64> {
        self.p
    }

    pub fn needs_iterated(&self) -> bool {
        self.kind.needs_iterated()
    }

    pub fn label(&self) -> String {
        self.kind.name().to_string()
    }

    /// Weight on the linear noise inside the propagator.
    fn propagator_weight(&self) -> f64 {
        match self.kind {
            SchemeKind::Ei0 | SchemeKind::Ei1 | SchemeKind::Ei2 | SchemeKind::Mi0 => 1.0,
            SchemeKind::HomEi0 | SchemeKind::HomMi0 => self.p.unwrap_or(1.0),
            _ => 0.0,
        }
    }
}

/// Step-size dependent pieces, computed once per grid level.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub dt: f64,
    pub exp_a: Mat,
    pub phi1_a: Mat,
    /// `(I - ΔtA)` factorised, for the semi-implicit Euler scheme.
    pub em_lu: Option<Lu>,
    /// `-½ Σ p² B_i² Δt`, plus `A Δt` when the commutator check was waived.
    exponent_base: Mat,
    /// Same with p = 1 and no `A` term, for `Z` in EI1 on waived problems.
    z_base: Mat,
    b_diag: Option<Vec<Vec<f64>>>,
    p: f64,
}

impl StepCache {
    pub fn new(problem: &SdeProblem, spec: &SchemeSpec, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("step size must be positive, got {dt}")));
        }
        let d = problem.state_dim();
        let a_dt = problem.a().scaled(dt);
        let exp_a = matexp::mat_exp(&a_dt)?;
        let phi1_a = matexp::phi1(&a_dt)?;
        let em_lu = if spec.kind == SchemeKind::Em {
            let mut m = Mat::identity(d);
            m.add_scaled(-1.0, &a_dt);
            Some(m.lu()?)
        } else {
            None
        };
        let p = spec.propagator_weight();
        let mut exponent_base = Mat::zeros(d);
        let mut z_base = Mat::zeros(d);
        for b in problem.bs() {
            let b2 = b.matmul(b);
            exponent_base.add_scaled(-0.5 * p * p * dt, &b2);
            z_base.add_scaled(-0.5 * dt, &b2);
        }
        if problem.waived() {
            exponent_base.add_scaled(1.0, &a_dt);
        }
        let b_diag = problem
            .bs()
            .iter()
            .all(Mat::is_diagonal)
            .then(|| problem.bs().iter().map(Mat::diag).collect());
        Ok(StepCache {
            dt,
            exp_a,
            phi1_a,
            em_lu,
            exponent_base,
            z_base,
            b_diag,
            p,
        })
    }
}

/// Reusable stepping state for one (problem, scheme, step size).
pub struct Stepper<'a> {
    problem: &'a SdeProblem,
    spec: SchemeSpec,
    cache: StepCache,
    d: usize,
    m: usize,
    drift: Vec<f64>,
    g: Vec<f64>,
    big_g: Vec<f64>,
    acc: Vec<f64>,
    tmp: Vec<f64>,
    ftilde: Vec<f64>,
    zbuf: Vec<f64>,
    jac: Mat,
}

impl<'a> Stepper<'a> {
    pub fn new(problem: &'a SdeProblem, spec: SchemeSpec, dt: f64) -> Result<Self> {
        if spec.needs_iterated() && !problem.has_jacobians() {
            return Err(Error::MissingJacobian(spec.kind.name()));
        }
        let cache = StepCache::new(problem, &spec, dt)?;
        let (d, m) = (problem.state_dim(), problem.noise_dim());
        Ok(Stepper {
            problem,
            spec,
            cache,
            d,
            m,
            drift: vec![0.0; d],
            g: vec![0.0; m * d],
            big_g: vec![0.0; m * d],
            acc: vec![0.0; d],
            tmp: vec![0.0; d],
            ftilde: vec![0.0; d],
            zbuf: vec![0.0; d],
            jac: Mat::zeros(d),
        })
    }

    pub fn cache(&self) -> &StepCache {
        &self.cache
    }

    pub fn spec(&self) -> &SchemeSpec {
        &self.spec
    }

    /// One step from `u` with increments `dw`; `iterated` is the m×m matrix
    /// `I[l][i]` (row-major), required by the Milstein kinds.
    pub fn step(
        &mut self,
        u: &[f64],
        dw: &[f64],
        iterated: Option<&[f64]>,
        out: &mut [f64],
    ) -> Result<()> {
        let (d, m) = (self.d, self.m);
        if u.len() != d || out.len() != d {
            return Err(Error::DimensionMismatch {
                context: "state",
                expected: d,
                actual: u.len().min(out.len()),
            });
        }
        if dw.len() != m {
            return Err(Error::DimensionMismatch {
                context: "noise increments",
                expected: m,
                actual: dw.len(),
            });
        }
        let iterated = match (self.spec.needs_iterated(), iterated) {
            (true, None) => return Err(Error::MissingIteratedIntegrals(self.spec.kind.name())),
            (true, Some(it)) if it.len() != m * m => {
                return Err(Error::DimensionMismatch {
                    context: "iterated integrals",
                    expected: m * m,
                    actual: it.len(),
                })
            }
            (_, it) => it,
        };
        let dt = self.cache.dt;
        self.problem.eval_drift(u, &mut self.drift);
        for i in 0..m {
            let gi = &mut self.g[i * d..(i + 1) * d];
            self.problem.eval_diffusion(i, u, gi);
            let big = &mut self.big_g[i * d..(i + 1) * d];
            big.copy_from_slice(gi);
            self.problem.bs()[i].matvec_acc(1.0, u, big);
        }

        use SchemeKind::*;
        match self.spec.kind {
            Em => {
                self.acc.copy_from_slice(u);
                axpy(dt, &self.drift, &mut self.acc);
                self.add_noise(dw, true);
                self.cache.em_lu.as_ref().expect("EM cache").solve_in_place(&mut self.acc);
                out.copy_from_slice(&self.acc);
            }
            Setd1 => {
                self.acc.copy_from_slice(u);
                self.add_noise(dw, true);
                self.cache.exp_a.matvec_into(&self.acc, out);
                self.cache.phi1_a.matvec_acc(dt, &self.drift, out);
            }
            MilsteinClassical => {
                self.acc.copy_from_slice(u);
                self.problem.a().matvec_acc(dt, u, &mut self.acc);
                axpy(dt, &self.drift, &mut self.acc);
                self.add_noise(dw, true);
                self.add_milstein(u, iterated.unwrap(), 0.0)?;
                out.copy_from_slice(&self.acc);
            }
            ExpMilstein => {
                self.acc.copy_from_slice(u);
                self.add_noise(dw, true);
                self.add_milstein(u, iterated.unwrap(), 0.0)?;
                self.cache.exp_a.matvec_into(&self.acc, out);
                self.cache.phi1_a.matvec_acc(dt, &self.drift, out);
            }
            Setd0 | Ei0 | HomEi0 | Mi0 | HomMi0 => {
                let p = self.cache.p;
                self.homotopy_increment(u, dw, p);
                if matches!(self.spec.kind, Mi0 | HomMi0) {
                    self.add_milstein(u, iterated.unwrap(), p)?;
                }
                if p == 0.0 {
                    self.cache.exp_a.matvec_into(&self.acc, out);
                } else {
                    propagate(self.problem, &self.cache, dw, &self.acc, &mut self.zbuf, out);
                }
            }
            Ei1 | Ei2 => {
                // f̃ into ftilde, then u + Σ g ΔW into acc
                self.ftilde.copy_from_slice(&self.drift);
                for i in 0..m {
                    self.problem.bs()[i].matvec_acc(-1.0, &self.g[i * d..(i + 1) * d], &mut self.ftilde);
                }
                self.acc.copy_from_slice(u);
                self.add_noise(dw, false);
                propagate(self.problem, &self.cache, dw, &self.acc, &mut self.zbuf, out);
                // φ1(ΔtA) f̃ Δt, through Z for EI1
                self.cache.phi1_a.matvec_into(&self.ftilde, &mut self.tmp);
                if self.spec.kind == Ei1 {
                    apply_z(self.problem, &self.cache, dw, &self.tmp, &mut self.zbuf);
                    axpy(dt, &self.zbuf, out);
                } else {
                    axpy(dt, &self.tmp, out);
                }
            }
        }
        Ok(())
    }

    /// `acc = u + f̃^p Δt + Σ g^p_i ΔW_i`; leaves `g^p_i` in `g`.
    fn homotopy_increment(&mut self, u: &[f64], dw: &[f64], p: f64) {
        let (d, m, dt) = (self.d, self.m, self.cache.dt);
        for i in 0..m {
            let gi = &mut self.g[i * d..(i + 1) * d];
            if p != 1.0 {
                self.problem.bs()[i].matvec_acc(1.0 - p, u, gi);
            }
        }
        self.acc.copy_from_slice(u);
        axpy(dt, &self.drift, &mut self.acc);
        for i in 0..m {
            let gi = &self.g[i * d..(i + 1) * d];
            if p != 0.0 {
                self.problem.bs()[i].matvec_acc(-p * dt, gi, &mut self.acc);
            }
            axpy(dw[i], gi, &mut self.acc);
        }
    }

    /// `acc += Σ_i G_i ΔW_i` (with_linear) or `Σ_i g_i ΔW_i`.
    fn add_noise(&mut self, dw: &[f64], with_linear: bool) {
        let d = self.d;
        let src = if with_linear { &self.big_g } else { &self.g };
        for (i, &w) in dw.iter().enumerate() {
            axpy(w, &src[i * d..(i + 1) * d], &mut self.acc);
        }
    }

    /// `acc += Σ_{i,l} H^p_{i,l}(u) I[l][i]`; expects `g` to hold `g^p_i`.
    fn add_milstein(&mut self, u: &[f64], iterated: &[f64], p: f64) -> Result<()> {
        let (d, m) = (self.d, self.m);
        for i in 0..m {
            // y = Σ_l I[l][i] G_l
            self.tmp.iter_mut().for_each(|v| *v = 0.0);
            for l in 0..m {
                axpy(iterated[l * m + i], &self.big_g[l * d..(l + 1) * d], &mut self.tmp);
            }
            self.problem
                .eval_jacobian(i, u, &mut self.jac)
                .map_err(|_| Error::MissingJacobian(self.spec.kind.name()))?;
            if p != 1.0 {
                self.jac.add_scaled(1.0 - p, &self.problem.bs()[i]);
            }
            self.jac.matvec_acc(1.0, &self.tmp, &mut self.acc);
            if p != 0.0 {
                let gi = &self.g[i * d..(i + 1) * d];
                for l in 0..m {
                    let w = iterated[l * m + i];
                    if w != 0.0 {
                        self.problem.bs()[l].matvec_acc(-p * w, gi, &mut self.acc);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `out = Ω^p v`.
fn propagate(
    problem: &SdeProblem,
    cache: &StepCache,
    dw: &[f64],
    v: &[f64],
    zbuf: &mut [f64],
    out: &mut [f64],
) {
    let p = cache.p;
    if problem.waived() {
        let x = exponent(problem, &cache.exponent_base, dw, p);
        matexp::exp_unchecked(&x).matvec_into(v, out);
        return;
    }
    match &cache.b_diag {
        Some(diags) => {
            for (j, z) in zbuf.iter_mut().enumerate() {
                let mut e = cache.exponent_base[(j, j)];
                for (b, &w) in diags.iter().zip(dw) {
                    e += p * b[j] * w;
                }
                *z = e.exp() * v[j];
            }
            cache.exp_a.matvec_into(zbuf, out);
        }
        None => {
            let x = exponent(problem, &cache.exponent_base, dw, p);
            matexp::exp_unchecked(&x).matvec_into(v, zbuf);
            cache.exp_a.matvec_into(zbuf, out);
        }
    }
}

/// `out = Z v` with `Z = exp(-½ Σ B_i² Δt + Σ B_i ΔW_i)`.
fn apply_z(problem: &SdeProblem, cache: &StepCache, dw: &[f64], v: &[f64], out: &mut [f64]) {
    match &cache.b_diag {
        Some(diags) => {
            for (j, o) in out.iter_mut().enumerate() {
                let mut e = cache.z_base[(j, j)];
                for (b, &w) in diags.iter().zip(dw) {
                    e += b[j] * w;
                }
                *o = e.exp() * v[j];
            }
        }
        None => {
            let x = exponent(problem, &cache.z_base, dw, 1.0);
            matexp::exp_unchecked(&x).matvec_into(v, out);
        }
    }
}

fn exponent(problem: &SdeProblem, base: &Mat, dw: &[f64], p: f64) -> Mat {
    let mut x = base.clone();
    for (b, &w) in problem.bs().iter().zip(dw) {
        x.add_scaled(p * w, b);
    }
    x
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Single step with a freshly built cache.
pub fn step(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    dt: f64,
    u: &[f64],
    dw: &[f64],
    iterated: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut stepper = Stepper::new(problem, *spec, dt)?;
    let mut out = vec![0.0; u.len()];
    stepper.step(u, dw, iterated, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub trajectory: Trajectory,
    /// First step index whose state failed the overflow guard.
    pub blowup_step: Option<usize>,
}

impl PathResult {
    pub fn blew_up(&self) -> bool {
        self.blowup_step.is_some()
    }
}

fn check_level(problem: &SdeProblem, spec: &SchemeSpec, level: &NoiseLevel) -> Result<()> {
    if level.noise_dim() != problem.noise_dim() {
        return Err(Error::DimensionMismatch {
            context: "noise dimension",
            expected: problem.noise_dim(),
            actual: level.noise_dim(),
        });
    }
    if spec.needs_iterated()
        && !problem.commutative_noise()
        && problem.noise_dim() > 1
        && !level.has_areas()
    {
        return Err(Error::MissingIteratedIntegrals(spec.kind.name()));
    }
    Ok(())
}

fn blown(u: &[f64]) -> bool {
    let n = norm2(u);
    !n.is_finite() || n > OVERFLOW_GUARD
}

/// Integrates over every step of `level`, keeping all states. Integration
/// stops at the first state that trips the overflow guard.
pub fn integrate_path(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    level: &NoiseLevel,
) -> Result<PathResult> {
    check_level(problem, spec, level)?;
    let d = problem.state_dim();
    let mut states = Vec::with_capacity((level.steps() + 1) * d);
    states.extend_from_slice(problem.u0());
    if level.steps() == 0 {
        return Ok(PathResult {
            trajectory: Trajectory { d, states },
            blowup_step: None,
        });
    }
    let mut stepper = Stepper::new(problem, *spec, level.dt())?;
    let mut cur = problem.u0().to_vec();
    let mut next = vec![0.0; d];
    let mut it = vec![0.0; problem.noise_dim().pow(2)];
    let mut blowup_step = None;
    for n in 0..level.steps() {
        if spec.needs_iterated() {
            level.iterated_into(n, &mut it);
            stepper.step(&cur, level.increment(n), Some(&it), &mut next)?;
        } else {
            stepper.step(&cur, level.increment(n), None, &mut next)?;
        }
        std::mem::swap(&mut cur, &mut next);
        states.extend_from_slice(&cur);
        if blown(&cur) {
            blowup_step = Some(n + 1);
            break;
        }
    }
    Ok(PathResult {
        trajectory: Trajectory { d, states },
        blowup_step,
    })
}

/// Final state only; `Err` for bad inputs, `Ok(None)` on blowup.
pub fn integrate_final(
    problem: &SdeProblem,
    spec: &SchemeSpec,
    level: &NoiseLevel,
) -> Result<Option<Vec<f64>>> {
    check_level(problem, spec, level)?;
    let d = problem.state_dim();
    let mut u = problem.u0().to_vec();
    if level.steps() == 0 {
        return Ok(Some(u));
    }
    let mut stepper = Stepper::new(problem, *spec, level.dt())?;
    let mut next = vec![0.0; d];
    let mut it = vec![0.0; problem.noise_dim().pow(2)];
    for n in 0..level.steps() {
        if spec.needs_iterated() {
            level.iterated_into(n, &mut it);
            stepper.step(&u, level.increment(n), Some(&it), &mut next)?;
        } else {
            stepper.step(&u, level.increment(n), None, &mut next)?;
        }
        std::mem::swap(&mut u, &mut next);
        if blown(&u) {
            return Ok(None);
        }
    }
    Ok(Some(u))
}
