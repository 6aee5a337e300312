//! Matrix exponential, the φ1 function and the stochastic propagators built from them.
//!
//! `mat_exp` is scaling and squaring with diagonal Padé approximants of degree
//! 3 to 13, choosing the lowest degree whose backward-error bound covers the
//! 1-norm of the input. Diagonal inputs take an elementwise path.
//!
//! The propagators solve the linear matrix SDE
//! `dΩ = A Ω dt + Σ B_i Ω dW_i` exactly when all of `A, B_1..B_m` commute:
//! `Ω(dt) = exp((A - ½ Σ B_i²) dt + Σ B_i ΔW_i)`.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Default absolute tolerance on max-norm commutator residuals.
pub const DEFAULT_COMMUTATOR_TOL: f64 = 1e-10;

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152e0;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

pub fn mat_exp(m: &Mat) -> Result<Mat> {
    m.ensure_finite("mat_exp input")?;
    Ok(exp_unchecked(m))
}

pub(crate) fn exp_unchecked(m: &Mat) -> Mat {
    if m.is_diagonal() {
        return exp_diagonal(m);
    }
    exp_pade(m)
}

fn exp_diagonal(m: &Mat) -> Mat {
    let d: Vec<f64> = m.diag().iter().map(|v| v.exp()).collect();
    Mat::from_diag(&d)
}

/// General Padé path, also used for diagonal input by tests.
pub fn exp_pade(m: &Mat) -> Mat {
    let n = m.dim();
    let norm = m.norm1();
    for &(degree, theta) in &THETA {
        if norm <= theta {
            let coeffs: &[f64] = match degree {
                3 => &PADE_3,
                5 => &PADE_5,
                7 => &PADE_7,
                _ => &PADE_9,
            };
            return pade_low(m, coeffs);
        }
    }
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = m.scaled(2f64.powi(-s));
    let mut r = pade_13(&scaled);
    let mut tmp = Mat::zeros(n);
    for _ in 0..s {
        r.matmul_into(&r.clone(), &mut tmp);
        std::mem::swap(&mut r, &mut tmp);
    }
    r
}

fn pade_low(a: &Mat, b: &[f64]) -> Mat {
    let n = a.dim();
    let a2 = a.matmul(a);
    // even powers A^0, A^2, A^4, ...
    let mut powers = vec![Mat::identity(n), a2.clone()];
    while powers.len() * 2 < b.len() {
        let next = powers.last().unwrap().matmul(&a2);
        powers.push(next);
    }
    let mut u_inner = Mat::zeros(n);
    let mut v = Mat::zeros(n);
    for (k, p) in powers.iter().enumerate() {
        v.add_scaled(b[2 * k], p);
        u_inner.add_scaled(b[2 * k + 1], p);
    }
    let u = a.matmul(&u_inner);
    finish_pade(&u, &v)
}

fn pade_13(a: &Mat) -> Mat {
    let b = &PADE_13;
    let n = a.dim();
    let ident = Mat::identity(n);
    let a2 = a.matmul(a);
    let a4 = a2.matmul(&a2);
    let a6 = a4.matmul(&a2);

    let mut w1 = a6.scaled(b[13]);
    w1.add_scaled(b[11], &a4);
    w1.add_scaled(b[9], &a2);
    let mut u_inner = a6.matmul(&w1);
    u_inner.add_scaled(b[7], &a6);
    u_inner.add_scaled(b[5], &a4);
    u_inner.add_scaled(b[3], &a2);
    u_inner.add_scaled(b[1], &ident);
    let u = a.matmul(&u_inner);

    let mut z1 = a6.scaled(b[12]);
    z1.add_scaled(b[10], &a4);
    z1.add_scaled(b[8], &a2);
    let mut v = a6.matmul(&z1);
    v.add_scaled(b[6], &a6);
    v.add_scaled(b[4], &a4);
    v.add_scaled(b[2], &a2);
    v.add_scaled(b[0], &ident);
    finish_pade(&u, &v)
}

fn finish_pade(u: &Mat, v: &Mat) -> Mat {
    let mut p = v.clone();
    p.add_scaled(1.0, u);
    let mut q = v.clone();
    q.add_scaled(-1.0, u);
    // q = V - U is well conditioned inside the theta bounds.
    q.lu()
        .expect("Padé denominator is nonsingular for scaled input")
        .solve_mat(&p)
}

/// φ1(M) = Σ_k M^k / (k+1)!, so that φ1(M) M = exp(M) - I without inverting M.
pub fn phi1(m: &Mat) -> Result<Mat> {
    m.ensure_finite("phi1 input")?;
    Ok(phi1_unchecked(m))
}

pub(crate) fn phi1_unchecked(m: &Mat) -> Mat {
    if m.is_diagonal() {
        let d: Vec<f64> = m
            .diag()
            .iter()
            .map(|&a| if a == 0.0 { 1.0 } else { a.exp_m1() / a })
            .collect();
        return Mat::from_diag(&d);
    }
    phi1_augmented(m)
}

/// Top-right block of exp([[M, I], [0, 0]]).
pub fn phi1_augmented(m: &Mat) -> Mat {
    let n = m.dim();
    let mut big = Mat::zeros(2 * n);
    for i in 0..n {
        for j in 0..n {
            big[(i, j)] = m[(i, j)];
        }
        big[(i, n + i)] = 1.0;
    }
    let e = exp_pade(&big);
    let mut out = Mat::zeros(n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = e[(i, n + j)];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommutatorReport {
    pub max_residual: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Largest max-norm residual over `[A, B_i]` and `[B_i, B_j]`.
pub fn check_commutators(a: &Mat, bs: &[Mat], tol: f64) -> Result<CommutatorReport> {
    let n = a.dim();
    for b in bs {
        if b.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "commutator check",
                expected: n,
                actual: b.dim(),
            });
        }
    }
    let mut max_residual: f64 = 0.0;
    for (i, bi) in bs.iter().enumerate() {
        max_residual = max_residual.max(a.commutator(bi).max_abs());
        for bj in &bs[i + 1..] {
            max_residual = max_residual.max(bi.commutator(bj).max_abs());
        }
    }
    Ok(CommutatorReport {
        max_residual,
        tol,
        pass: max_residual <= tol,
    })
}

#[derive(Debug, Clone)]
pub struct PropagatorInputs {
    pub a: Mat,
    pub bs: Vec<Mat>,
    pub dt: f64,
    pub dw: Vec<f64>,
    /// Homotopy weight on the linear noise; 1 gives the full propagator.
    pub p: f64,
    pub tol: f64,
    /// Run even when the commutator check fails; exactness no longer holds.
    pub waive_commutators: bool,
}

impl PropagatorInputs {
    pub fn new(a: Mat, bs: Vec<Mat>, dt: f64, dw: Vec<f64>) -> Self {
        PropagatorInputs {
            a,
            bs,
            dt,
            dw,
            p: 1.0,
            tol: DEFAULT_COMMUTATOR_TOL,
            waive_commutators: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.a.dim();
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidInput(format!("p must lie in [0,1], got {}", self.p)));
        }
        if self.dw.len() != self.bs.len() {
            return Err(Error::DimensionMismatch {
                context: "propagator noise increments",
                expected: self.bs.len(),
                actual: self.dw.len(),
            });
        }
        if self.dw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("propagator noise increments"));
        }
        self.a.ensure_finite("propagator A")?;
        for b in &self.bs {
            if b.dim() != n {
                return Err(Error::DimensionMismatch {
                    context: "propagator B_i",
                    expected: n,
                    actual: b.dim(),
                });
            }
            b.ensure_finite("propagator B_i")?;
        }
        if !self.waive_commutators {
            let report = check_commutators(&self.a, &self.bs, self.tol)?;
            if !report.pass {
                return Err(Error::NonCommuting {
                    residual: report.max_residual,
                    tol: self.tol,
                });
            }
        }
        Ok(())
    }
}

/// `-½ Σ p² B_i² dt + Σ p B_i ΔW_i`, optionally plus `A dt`.
pub(crate) fn gbm_exponent(
    a: Option<&Mat>,
    bs: &[Mat],
    dt: f64,
    dw: &[f64],
    p: f64,
) -> Mat {
    let n = bs.first().map(Mat::dim).or(a.map(Mat::dim)).unwrap_or(0);
    let mut x = match a {
        Some(a) => a.scaled(dt),
        None => Mat::zeros(n),
    };
    for (b, &w) in bs.iter().zip(dw) {
        x.add_scaled(-0.5 * p * p * dt, &b.matmul(b));
        x.add_scaled(p * w, b);
    }
    x
}

/// `exp((A - ½ Σ p² B_i²) dt + Σ p B_i ΔW_i)`.
pub fn gbm_propagator(input: &PropagatorInputs) -> Result<Mat> {
    input.validate()?;
    Ok(exp_unchecked(&gbm_exponent(
        Some(&input.a),
        &input.bs,
        input.dt,
        &input.dw,
        input.p,
    )))
}

/// The propagator with the `A` term removed: `exp(-½ Σ p² B_i² dt + Σ p B_i ΔW_i)`.
pub fn z_propagator(bs: &[Mat], dt: f64, dw: &[f64], p: f64) -> Result<Mat> {
    let n = match bs.first() {
        Some(b) => b.dim(),
        None => {
            return Err(Error::InvalidInput(
                "z_propagator needs at least one B_i to fix the dimension".into(),
            ))
        }
    };
    let input = PropagatorInputs {
        a: Mat::zeros(n),
        bs: bs.to_vec(),
        dt,
        dw: dw.to_vec(),
        p,
        tol: DEFAULT_COMMUTATOR_TOL,
        waive_commutators: false,
    };
    input.validate()?;
    Ok(exp_unchecked(&gbm_exponent(None, bs, dt, dw, p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        a.sub(b).max_abs() <= tol
    }

    /// Plain Taylor series, only trusted for small norms.
    fn taylor_exp(m: &Mat, terms: usize) -> Mat {
        let n = m.dim();
        let mut sum = Mat::identity(n);
        let mut term = Mat::identity(n);
        for k in 1..terms {
            term = term.matmul(m).scaled(1.0 / k as f64);
            sum.add_scaled(1.0, &term);
        }
        sum
    }

    fn lcg_matrix(n: usize, seed: u64, scale: f64) -> Mat {
        let mut s = seed;
        let data = (0..n * n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
            })
            .collect();
        Mat::from_row_major(data).unwrap()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(mat_exp(&Mat::zeros(3)).unwrap(), Mat::identity(3));
    }

    #[test]
    fn exp_of_diagonal() {
        let e = mat_exp(&Mat::from_diag(&[1.0, -1.0])).unwrap();
        assert!((e[(0, 0)] - std::f64::consts::E).abs() < 1e-15);
        assert!((e[(1, 1)] - 1.0 / std::f64::consts::E).abs() < 1e-15);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn rotation_generator_matches_closed_form() {
        for &theta in &[0.01, 0.7, 3.0, 20.0] {
            let m = Mat::from_rows(&[vec![0.0, theta], vec![-theta, 0.0]]).unwrap();
            let e = mat_exp(&m).unwrap();
            let (s, c) = theta.sin_cos();
            let want = Mat::from_rows(&[vec![c, s], vec![-s, c]]).unwrap();
            assert!(close(&e, &want, 1e-13 * theta.max(1.0)), "theta={theta}");
        }
    }

    #[test]
    fn agrees_with_taylor_for_small_norm() {
        for seed in 0..20 {
            let m = lcg_matrix(4, seed, 0.4);
            assert!(close(&mat_exp(&m).unwrap(), &taylor_exp(&m, 40), 1e-14));
        }
    }

    #[test]
    fn exp_inverse_identity() {
        for seed in 0..20 {
            let m = lcg_matrix(4, 100 + seed, 3.0);
            let prod = mat_exp(&m).unwrap().matmul(&mat_exp(&m.scaled(-1.0)).unwrap());
            assert!(close(&prod, &Mat::identity(4), 1e-10));
        }
    }

    #[test]
    fn large_norm_relative_accuracy() {
        // Nilpotent-plus-diagonal: exp([[a, b],[0, a]]) = e^a [[1, b],[0, 1]].
        let (a, b) = (-20.0, 30.0);
        let m = Mat::from_rows(&[vec![a, b], vec![0.0, a]]).unwrap();
        let e = mat_exp(&m).unwrap();
        let want = Mat::from_rows(&[vec![1.0, b], vec![0.0, 1.0]]).unwrap().scaled(a.exp());
        let rel = e.sub(&want).norm1() / want.norm1();
        assert!(rel < 1e-12, "rel={rel}");
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = Mat::zeros(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(mat_exp(&m), Err(Error::NonFinite(_))));
        assert!(matches!(phi1(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn phi1_basic_values() {
        assert!(close(&phi1(&Mat::zeros(3)).unwrap(), &Mat::identity(3), 1e-15));
        let one = phi1(&Mat::from_diag(&[1.0])).unwrap();
        assert!((one[(0, 0)] - 1.718281828459045).abs() < 1e-14);
        let aug = phi1_augmented(&Mat::from_diag(&[1.0]));
        assert!((aug[(0, 0)] - 1.718281828459045).abs() < 1e-14);
    }

    #[test]
    fn phi1_identity_random() {
        for seed in 0..20 {
            let m = lcg_matrix(3, 200 + seed, 2.0);
            let lhs = phi1(&m).unwrap().matmul(&m);
            let mut rhs = mat_exp(&m).unwrap();
            rhs.add_scaled(-1.0, &Mat::identity(3));
            assert!(close(&lhs, &rhs, 1e-10));
        }
    }

    #[test]
    fn phi1_singular_input() {
        // Rank one, so the A^{-1} form is unusable.
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let lhs = phi1(&m).unwrap().matmul(&m);
        let mut rhs = mat_exp(&m).unwrap();
        rhs.add_scaled(-1.0, &Mat::identity(2));
        assert!(close(&lhs, &rhs, 1e-10));
        // closed form: M^2 = 5M, so phi1(M) = I + (e^5 - 1 - 5)/25 M
        let mut want = Mat::identity(2);
        want.add_scaled((5f64.exp() - 6.0) / 25.0, &m);
        assert!(close(&phi1(&m).unwrap(), &want, 1e-11));
    }

    #[test]
    fn diagonal_fast_paths_match_general() {
        let d = Mat::from_diag(&[0.3, -2.0, 5.5, 0.0]);
        assert!(close(&mat_exp(&d).unwrap(), &exp_pade(&d), 1e-12 * 5.5f64.exp()));
        assert!(close(&phi1(&d).unwrap(), &phi1_augmented(&d), 1e-12 * 5.5f64.exp()));
    }

    #[test]
    fn commutator_examples() {
        let d = check_commutators(
            &Mat::from_diag(&[1.0, 2.0]),
            &[Mat::from_diag(&[3.0, 4.0]), Mat::from_diag(&[0.0, 1.0])],
            1e-12,
        )
        .unwrap();
        assert_eq!(d.max_residual, 0.0);
        assert!(d.pass);

        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let r = check_commutators(&a, &[b], 1e-12).unwrap();
        assert_eq!(r.max_residual, 1.0);
        assert!(!r.pass);

        let bad = check_commutators(&Mat::zeros(2), &[Mat::zeros(3)], 1e-12);
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn tridiagonal_drift_with_unit_vector_noise_fails() {
        let mut a = Mat::zeros(4);
        for i in 0..4 {
            a[(i, i)] = -2.0;
            if i + 1 < 4 {
                a[(i, i + 1)] = 1.0;
                a[(i + 1, i)] = 1.0;
            }
        }
        let bs: Vec<Mat> = (0..4)
            .map(|i| {
                let mut e = vec![0.0; 4];
                e[i] = 1.0;
                Mat::from_diag(&e)
            })
            .collect();
        let r = check_commutators(&a, &bs, DEFAULT_COMMUTATOR_TOL).unwrap();
        assert_eq!(r.max_residual, 1.0);
        assert!(!r.pass);
    }

    #[test]
    fn propagator_scalar_values() {
        let inp = PropagatorInputs::new(Mat::zeros(1), vec![Mat::identity(1)], 1.0, vec![0.0]);
        let o = gbm_propagator(&inp).unwrap();
        assert!((o[(0, 0)] - 0.6065306597126334).abs() < 1e-15);

        // Ginzburg-Landau linear part at sigma = 2: A = 0, B = sqrt(2).
        let gl = PropagatorInputs::new(
            Mat::zeros(1),
            vec![Mat::from_diag(&[2f64.sqrt()])],
            1.0,
            vec![0.0],
        );
        let o = gbm_propagator(&gl).unwrap();
        assert!((o[(0, 0)] - (-1f64).exp()).abs() < 1e-15);

        let z = z_propagator(&[Mat::identity(1)], 1.0, &[1.0], 1.0).unwrap();
        assert!((z[(0, 0)] - 0.5f64.exp()).abs() < 1e-15);
        let z0 = z_propagator(&[Mat::zeros(3)], 0.5, &[0.7], 1.0).unwrap();
        assert_eq!(z0, Mat::identity(3));
    }

    #[test]
    fn propagator_without_noise_is_semigroup() {
        let a = lcg_matrix(3, 7, 1.0);
        let inp = PropagatorInputs::new(a.clone(), vec![Mat::zeros(3), Mat::zeros(3)], 0.3, vec![1.2, -0.4]);
        let o = gbm_propagator(&inp).unwrap();
        assert!(close(&o, &mat_exp(&a.scaled(0.3)).unwrap(), 1e-15));
    }

    #[test]
    fn propagator_rejects_non_commuting_unless_waived() {
        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let mut inp = PropagatorInputs::new(a, vec![b], 0.1, vec![0.2]);
        assert!(matches!(gbm_propagator(&inp), Err(Error::NonCommuting { .. })));
        inp.waive_commutators = true;
        assert!(gbm_propagator(&inp).is_ok());
    }

    #[test]
    fn propagator_input_validation() {
        let mut inp = PropagatorInputs::new(Mat::zeros(1), vec![Mat::identity(1)], 0.0, vec![0.0]);
        assert!(matches!(gbm_propagator(&inp), Err(Error::InvalidInput(_))));
        inp.dt = 0.1;
        inp.dw = vec![];
        assert!(matches!(gbm_propagator(&inp), Err(Error::DimensionMismatch { .. })));
    }

    /// Random commuting family: simultaneously diagonalisable through a fixed rotation.
    fn commuting_family(seed: u64, m: usize) -> (Mat, Vec<Mat>) {
        let q = {
            let (s, c) = (0.3f64 + seed as f64 * 0.1).sin_cos();
            let mut q = Mat::identity(3);
            q[(0, 0)] = c;
            q[(0, 1)] = -s;
            q[(1, 0)] = s;
            q[(1, 1)] = c;
            q
        };
        let mut qt = q.clone();
        for i in 0..3 {
            for j in 0..3 {
                qt[(i, j)] = q[(j, i)];
            }
        }
        let conj = |diag: &[f64]| q.matmul(&Mat::from_diag(diag)).matmul(&qt);
        let a = conj(&[-1.0, 0.5, -0.2 * seed as f64]);
        let bs = (0..m)
            .map(|i| conj(&[0.3 * (i + 1) as f64, -0.2, 0.1 * seed as f64]))
            .collect();
        (a, bs)
    }

    #[test]
    fn propagator_splits_under_commutativity() {
        let (a, bs) = commuting_family(2, 2);
        let inp = PropagatorInputs::new(a.clone(), bs.clone(), 0.4, vec![0.3, -0.5]);
        let o = gbm_propagator(&inp).unwrap();
        let split = mat_exp(&a.scaled(0.4))
            .unwrap()
            .matmul(&z_propagator(&bs, 0.4, &[0.3, -0.5], 1.0).unwrap());
        assert!(close(&o, &split, 1e-12));
    }

    #[test]
    fn propagator_inverse_form() {
        let (a, bs) = commuting_family(3, 2);
        let (dt, dw) = (0.25, [0.4, -0.1]);
        let o = gbm_propagator(&PropagatorInputs::new(a.clone(), bs.clone(), dt, dw.to_vec()))
            .unwrap();
        let mut inv = a.scaled(-dt);
        for (b, w) in bs.iter().zip(dw) {
            inv.add_scaled(0.5 * dt, &b.matmul(b));
            inv.add_scaled(-w, b);
        }
        let prod = o.matmul(&mat_exp(&inv).unwrap());
        assert!(close(&prod, &Mat::identity(3), 1e-10));
    }

    proptest! {
        #[test]
        fn cocycle_property(
            seed in 0u64..50,
            dt1 in 0.01f64..1.0, dt2 in 0.01f64..1.0,
            w1 in -2.0f64..2.0, w2 in -2.0f64..2.0, w3 in -2.0f64..2.0, w4 in -2.0f64..2.0,
        ) {
            let (a, bs) = commuting_family(seed % 7, 2);
            let prop = |dt: f64, dw: Vec<f64>| {
                gbm_propagator(&PropagatorInputs::new(a.clone(), bs.clone(), dt, dw)).unwrap()
            };
            let lhs = prop(dt1, vec![w1, w2]).matmul(&prop(dt2, vec![w3, w4]));
            let rhs = prop(dt1 + dt2, vec![w1 + w3, w2 + w4]);
            let scale = rhs.max_abs().max(1.0);
            prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-10 * scale);
        }

        #[test]
        fn phi1_identity_property(seed in 0u64..10_000, scale in 0.0f64..2.5, rank_one in any::<bool>()) {
            let mut m = lcg_matrix(3, seed, scale);
            if rank_one {
                // Force a singular input by duplicating a row.
                for j in 0..3 {
                    m[(2, j)] = m[(0, j)];
                }
            }
            let lhs = phi1(&m).unwrap().matmul(&m);
            let mut rhs = mat_exp(&m).unwrap();
            rhs.add_scaled(-1.0, &Mat::identity(3));
            prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-10 * rhs.max_abs().max(1.0));
        }
    }
}
