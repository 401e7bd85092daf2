//! Full-state-feedback synthesis for the AV.
//!
//! The AV's input is `u = -K x` on the controlled lane's error state. K is the
//! H2-optimal state feedback for the performance weights (gamma_s, gamma_v,
//! gamma_u), obtained by solving the algebraic Riccati equation
//!
//! ```text
//! Aᵀ P + P A - P B R⁻¹ Bᵀ P + Q = 0,     K = R⁻¹ Bᵀ P,
//! ```
//!
//! with `Q = diag(gamma_s², gamma_v², ...)` over the interleaved headway and
//! velocity states and `R = gamma_u²`.
//!
//! A ring couples the headways: their deviations always sum to zero because
//! the vehicles share a track of fixed length. That conservation law makes the
//! direction `w = [1, 0, 1, 0, ...]` a left null vector of both A and B, so
//! the full-space pair is never stabilizable and the Riccati equation is
//! solved on the physical subspace `wᵀx = 0` instead, where every reachable
//! ring state lives. The returned gain is lifted back to full length and acts
//! identically on ring states; the closed loop keeps a single structural zero
//! eigenvalue along the conserved direction, with every other eigenvalue
//! strictly in the left half-plane.
//!
//! The Riccati solve itself is the matrix-sign-function method (scaled Newton
//! iteration on the Hamiltonian), polished by Newton-Kleinman iteration to a
//! 1e-10 relative residual.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{solve_lyapunov, spectral_abscissa, symmetric_eig_range, symmetrize};
use crate::ovm::{Equilibrium, LaneKind, LinearSystem};
use crate::{Error, Result};

/// Relative Riccati residual at which Newton-Kleinman stops.
const RICCATI_TOL: f64 = 1e-10;
const RICCATI_MAX_ITERS: usize = 200;
/// Closed-loop eigenvalues must sit at least this far inside the left
/// half-plane (structural zero mode excepted).
const STABILITY_MARGIN: f64 = 1e-6;

/// Performance weights of the feedback design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightSpec {
    pub gamma_s: f64,
    pub gamma_v: f64,
    pub gamma_u: f64,
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self {
            gamma_s: 0.03,
            gamma_v: 0.15,
            gamma_u: 1.0,
        }
    }
}

impl WeightSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_s > 0.0 && self.gamma_v > 0.0 && self.gamma_u > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter("all weights must be > 0".into()))
        }
    }
}

/// A synthesized feedback row vector together with the equilibrium it targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMatrix {
    /// Row vector of length 2n over `[s~_1, v~_1, ..., s~_n, v~_n]`.
    pub k: Vec<f64>,
    pub n: usize,
    /// Equilibrium the error state is measured against. For a non-uniform
    /// reference this records the human vehicles' shared headway.
    pub equilibrium: Equilibrium,
}

impl GainMatrix {
    /// Feedback input `u = -K x` for an error state of length 2n.
    pub fn feedback(&self, error: &[f64]) -> f64 {
        debug_assert_eq!(error.len(), self.k.len());
        -self
            .k
            .iter()
            .zip(error)
            .map(|(k, x)| k * x)
            .sum::<f64>()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Lyapunov certificate for a stable closed loop: `A_clᵀ P + P A_cl = -Q`.
///
/// When the system conserves total headway, `p` and `q` act on deflated
/// coordinates `y = basisᵀ x` and certify decay on the physical subspace; the
/// full-space closed loop retains the structural zero mode, which ring
/// trajectories never excite.
#[derive(Debug, Clone)]
pub struct LyapunovCertificate {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Orthonormal basis of the physical subspace, present when the conserved
    /// direction was deflated.
    pub basis: Option<DMatrix<f64>>,
}

/// Exponential rate constants entering the variance envelopes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateConstants {
    /// Controlled-lane decay rate `lambda_min(Q) / lambda_max(P)`, 1/s.
    pub alpha2: f64,
    /// Uncontrolled-lane growth rate `lambda_max(A_u + A_uᵀ)`, 1/s.
    pub beta2: f64,
    /// False when beta2 <= 0, i.e. the uncontrolled system does not satisfy
    /// the instability premise behind the growth envelope.
    pub growth_premise_holds: bool,
}

/// Unit vector along the conserved total-headway direction `[1,0,1,0,...]`.
fn conserved_direction(dim: usize) -> DVector<f64> {
    let mut w = DVector::zeros(dim);
    for i in (0..dim).step_by(2) {
        w[i] = 1.0;
    }
    let norm = w.norm();
    w / norm
}

/// Whether the conserved direction is a left null vector of A (and of B when
/// present), i.e. the system carries the ring's structural zero mode.
fn conserves_total_headway(a: &DMatrix<f64>, b: Option<&DMatrix<f64>>) -> bool {
    let w = conserved_direction(a.nrows());
    let wa = a.transpose() * &w;
    let scale = a.norm().max(1.0);
    if wa.norm() > 1e-12 * scale {
        return false;
    }
    match b {
        Some(b) => (b.transpose() * &w).norm() <= 1e-12 * b.norm().max(1.0),
        None => true,
    }
}

/// Orthonormal basis of the subspace orthogonal to the conserved direction,
/// built as the trailing columns of the Householder reflector mapping e_1 to
/// that direction.
fn deflation_basis(dim: usize) -> DMatrix<f64> {
    let w = conserved_direction(dim);
    let mut u = w;
    u[0] -= 1.0;
    let denom = u.norm_squared();
    let mut h = DMatrix::identity(dim, dim);
    if denom > 0.0 {
        h -= &u * u.transpose() * (2.0 / denom);
    }
    h.columns(1, dim - 1).clone_owned()
}

fn closed_loop(a: &DMatrix<f64>, b: &DMatrix<f64>, k: &RowDVector<f64>) -> DMatrix<f64> {
    a - b * k
}

/// log |det M| from an LU factorization's diagonal.
fn log_abs_det(m: &DMatrix<f64>) -> Result<f64> {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows().min(u.ncols()) {
        let d = u[(i, i)].abs();
        if d == 0.0 {
            return Err(Error::Synthesis("Hamiltonian became singular".into()));
        }
        acc += d.ln();
    }
    Ok(acc)
}

/// Stabilizing solution of `Aᵀ P + P A - P B R⁻¹ Bᵀ P + Q = 0` via the
/// matrix-sign-function method with determinantal scaling, then Newton-Kleinman
/// polish. Returns (P, K).
fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: f64,
) -> Result<(DMatrix<f64>, RowDVector<f64>)> {
    let m = a.nrows();
    let g = b * b.transpose() / r;

    let mut ham = DMatrix::zeros(2 * m, 2 * m);
    ham.view_mut((0, 0), (m, m)).copy_from(a);
    ham.view_mut((0, m), (m, m)).copy_from(&(-&g));
    ham.view_mut((m, 0), (m, m)).copy_from(&(-q));
    ham.view_mut((m, m), (m, m)).copy_from(&(-a.transpose()));

    let mut s = ham;
    let mut converged = false;
    for _ in 0..100 {
        let c = (log_abs_det(&s)? / (2 * m) as f64).exp();
        let inv = s.clone().try_inverse().ok_or_else(|| {
            Error::Synthesis("Hamiltonian sign iteration hit a singular iterate".into())
        })?;
        let next = (&s / c + inv * c) * 0.5;
        let delta = (&next - &s).norm() / s.norm();
        s = next;
        if delta <= 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Synthesis(
            "Hamiltonian sign iteration did not converge; the pair may not be stabilizable".into(),
        ));
    }

    // (I - sign(H)) / 2 projects onto the stable invariant subspace; a
    // rank-revealing QR extracts an orthonormal basis [Z1; Z2], P = Z2 Z1⁻¹.
    let proj = (DMatrix::identity(2 * m, 2 * m) - &s) * 0.5;
    let qr = proj.col_piv_qr();
    let z = qr.q().columns(0, m).clone_owned();
    let z1 = z.rows(0, m).clone_owned();
    let z2 = z.rows(m, m).clone_owned();
    let z1_inv = z1.try_inverse().ok_or_else(|| {
        Error::Synthesis("stable subspace is not a Riccati graph; no stabilizing solution".into())
    })?;
    let p0 = symmetrize(&(z2 * z1_inv));
    let mut k = (b.transpose() * &p0).row(0).clone_owned() / r;
    if spectral_abscissa(&closed_loop(a, b, &k)) >= 0.0 {
        return Err(Error::Synthesis(
            "sign-function seed is not stabilizing".into(),
        ));
    }

    let mut last_residual = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITERS {
        let a_cl = closed_loop(a, b, &k);
        let q_iter = q + k.transpose() * k.clone_owned() * r;
        let p = solve_lyapunov(&a_cl, &q_iter)?;
        k = (b.transpose() * &p).row(0).clone_owned() / r;
        let res = a.transpose() * &p + &p * a - &p * &g * &p + q;
        last_residual = res.norm() / q.norm();
        if last_residual <= RICCATI_TOL {
            return Ok((p, k));
        }
    }
    Err(Error::Synthesis(format!(
        "Riccati iteration did not converge in {RICCATI_MAX_ITERS} steps (residual {last_residual:.3e})"
    )))
}

fn performance_q(n: usize, dim: usize, w: &WeightSpec) -> DMatrix<f64> {
    let mut q = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        q[(2 * i, 2 * i)] = w.gamma_s * w.gamma_s;
        q[(2 * i + 1, 2 * i + 1)] = w.gamma_v * w.gamma_v;
    }
    q
}

/// H2 / LQR state feedback for a controlled lane system.
pub fn synthesize_gain(sys: &LinearSystem, w: &WeightSpec) -> Result<GainMatrix> {
    w.validate()?;
    if sys.kind != LaneKind::Controlled {
        return Err(Error::Synthesis("gain synthesis needs a controlled system".into()));
    }
    let a = &sys.a;
    let b = sys
        .b
        .as_ref()
        .ok_or_else(|| Error::Synthesis("controlled system carries no input column".into()))?;
    let dim = a.nrows();
    let q = performance_q(sys.n, dim, w);
    let r = w.gamma_u * w.gamma_u;

    let k_full = if conserves_total_headway(a, Some(b)) {
        let v = deflation_basis(dim);
        let a_r = v.transpose() * a * &v;
        let b_r = v.transpose() * b;
        let q_r = v.transpose() * &q * &v;
        let (_, k_r) = solve_care(&a_r, &b_r, &q_r, r)?;
        let abscissa = spectral_abscissa(&closed_loop(&a_r, &b_r, &k_r));
        if abscissa > -STABILITY_MARGIN {
            return Err(Error::UnstableClosedLoop(abscissa));
        }
        (k_r * v.transpose()).row(0).clone_owned()
    } else {
        let (_, k) = solve_care(a, b, &q, r)?;
        let abscissa = spectral_abscissa(&closed_loop(a, b, &k));
        if abscissa > -STABILITY_MARGIN {
            return Err(Error::UnstableClosedLoop(abscissa));
        }
        k
    };

    Ok(GainMatrix {
        k: k_full.iter().copied().collect(),
        n: sys.n,
        equilibrium: sys.equilibrium,
    })
}

/// Solves `(A - B K)ᵀ P + P (A - B K) = -Q` for the closed loop and verifies
/// that P is positive definite. `q_choice` defaults to the identity and, for a
/// headway-conserving ring, is restricted to the physical subspace first.
pub fn lyapunov_certificate(
    sys: &LinearSystem,
    gain: &GainMatrix,
    q_choice: Option<DMatrix<f64>>,
) -> Result<LyapunovCertificate> {
    let a = &sys.a;
    let dim = a.nrows();
    let a_cl = match (&sys.b, sys.kind) {
        (Some(b), LaneKind::Controlled) => {
            let k = RowDVector::from_row_slice(&gain.k);
            closed_loop(a, b, &k)
        }
        _ => a.clone(),
    };
    let q_full = q_choice.unwrap_or_else(|| DMatrix::identity(dim, dim));

    let (a_eff, q_eff, basis) = if conserves_total_headway(&a_cl, None) {
        let v = deflation_basis(dim);
        let a_r = v.transpose() * &a_cl * &v;
        let q_r = v.transpose() * &q_full * &v;
        (a_r, q_r, Some(v))
    } else {
        (a_cl, q_full, None)
    };

    let abscissa = spectral_abscissa(&a_eff);
    if abscissa >= 0.0 {
        return Err(Error::UnstableClosedLoop(abscissa));
    }
    let p = symmetrize(&solve_lyapunov(&a_eff, &q_eff)?);
    let (p_min, _) = symmetric_eig_range(&p);
    if p_min <= 0.0 {
        return Err(Error::Synthesis(format!(
            "Lyapunov solution is not positive definite (min eigenvalue {p_min:.3e})"
        )));
    }
    Ok(LyapunovCertificate {
        p,
        q: q_eff,
        basis,
    })
}

/// Envelope rate constants from a certificate and the uncontrolled system.
pub fn rate_constants(cert: &LyapunovCertificate, sys_u: &LinearSystem) -> RateConstants {
    let (q_min, _) = symmetric_eig_range(&cert.q);
    let (_, p_max) = symmetric_eig_range(&cert.p);
    let alpha2 = q_min / p_max;
    let w = &sys_u.a + sys_u.a.transpose();
    let (_, beta2) = symmetric_eig_range(&w);
    RateConstants {
        alpha2,
        beta2,
        growth_premise_holds: beta2 > 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ovm::{linearize, OvmParams};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn toy_double_integrator() -> LinearSystem {
        // A single directly actuated vehicle whose leader holds the
        // equilibrium speed: s~' = -v~, v~' = u. No ring closure, so no
        // conserved direction and the full-space Riccati solve applies.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        LinearSystem {
            a,
            b: Some(b),
            kind: LaneKind::Controlled,
            n: 1,
            equilibrium: Equilibrium {
                n: 1,
                headway: 400.0,
                velocity: 30.0,
            },
            a1: 0.0,
            a2: 0.0,
            a3: 0.0,
        }
    }

    #[test]
    fn toy_gain_matches_hand_solved_riccati() {
        // For A = [0 -1; 0 0], B = [0; 1], Q = diag(q1, q2), R = r the
        // stabilizing solution is p12 = -sqrt(r q1), p22 = sqrt(r (q2 - 2 p12)),
        // K = [p12, p22] / r. Frozen for the default weights:
        let k_expected = [-0.03, 0.287_228_132_326_901_4];
        let gain = synthesize_gain(&toy_double_integrator(), &WeightSpec::default()).unwrap();
        assert_relative_eq!(gain.k[0], k_expected[0], epsilon = 1e-9);
        assert_relative_eq!(gain.k[1], k_expected[1], epsilon = 1e-9);
    }

    #[test]
    fn ring_gain_stabilizes_physical_subspace() {
        let sys = linearize(20, LaneKind::Controlled, &OvmParams::default()).unwrap();
        let gain = synthesize_gain(&sys, &WeightSpec::default()).unwrap();
        let k = RowDVector::from_row_slice(&gain.k);
        let a_cl = closed_loop(&sys.a, sys.b.as_ref().unwrap(), &k);

        // Deflated loop is strictly stable.
        let v = deflation_basis(40);
        let a_red = v.transpose() * &a_cl * &v;
        assert!(spectral_abscissa(&a_red) < -1e-6);

        // The full loop keeps exactly the structural zero mode: every
        // eigenvalue is either within 1e-9 of zero or has real part < -1e-6.
        let eigs = a_cl.complex_eigenvalues();
        let near_zero = eigs.iter().filter(|l| l.norm() < 1e-9).count();
        assert_eq!(near_zero, 1);
        for l in eigs.iter() {
            assert!(l.norm() < 1e-9 || l.re < -1e-6);
        }

        // The lifted gain annihilates the conserved direction: headway
        // entries sum to zero, so gains are unique on physical states.
        let headway_gain_sum: f64 = gain.k.iter().step_by(2).sum();
        assert!(headway_gain_sum.abs() < 1e-10);

        // Open loop is not exponentially stable on the subspace (the AV's
        // velocity is a free integrator), so the gain does real work.
        assert!(spectral_abscissa(&(v.transpose() * &sys.a * &v)) > -1e-9);
    }

    #[test]
    fn ring_gain_satisfies_reduced_riccati() {
        let sys = linearize(20, LaneKind::Controlled, &OvmParams::default()).unwrap();
        let w = WeightSpec::default();
        let gain = synthesize_gain(&sys, &w).unwrap();

        let v = deflation_basis(40);
        let a_r = v.transpose() * &sys.a * &v;
        let b_r = v.transpose() * sys.b.as_ref().unwrap();
        let q_r = v.transpose() * performance_q(20, 40, &w) * &v;
        let r = w.gamma_u * w.gamma_u;
        // Recover P from the Lyapunov equation the converged gain satisfies.
        let k_full = RowDVector::from_row_slice(&gain.k);
        let k_r = (k_full * &v).row(0).clone_owned();
        let q_iter = &q_r + k_r.transpose() * k_r.clone_owned() * r;
        let p = solve_lyapunov(&closed_loop(&a_r, &b_r, &k_r), &q_iter).unwrap();
        let res = a_r.transpose() * &p + &p * &a_r - &p * &b_r * (b_r.transpose() * &p) / r + &q_r;
        assert!(res.norm() <= 1e-8 * q_r.norm());
    }

    #[test]
    fn expensive_control_shrinks_the_gain() {
        let sys = linearize(16, LaneKind::Controlled, &OvmParams::default()).unwrap();
        let cheap = synthesize_gain(&sys, &WeightSpec::default()).unwrap();
        let pricey = synthesize_gain(
            &sys,
            &WeightSpec {
                gamma_u: 100.0,
                ..WeightSpec::default()
            },
        )
        .unwrap();
        let norm = |k: &[f64]| k.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(&pricey.k) < 0.05 * norm(&cheap.k));
    }

    #[test]
    fn certificate_residual_and_symmetry() {
        let sys = linearize(20, LaneKind::Controlled, &OvmParams::default()).unwrap();
        let gain = synthesize_gain(&sys, &WeightSpec::default()).unwrap();
        let cert = lyapunov_certificate(&sys, &gain, None).unwrap();

        let v = cert.basis.as_ref().expect("ring system deflates");
        let k = RowDVector::from_row_slice(&gain.k);
        let a_cl = closed_loop(&sys.a, sys.b.as_ref().unwrap(), &k);
        let a_red = v.transpose() * a_cl * v;
        let residual = a_red.transpose() * &cert.p + &cert.p * &a_red + &cert.q;
        assert!(residual.norm() <= 1e-8 * cert.q.norm());
        assert!((&cert.p - cert.p.transpose()).norm() <= 1e-10 * cert.p.norm());
        let (p_min, _) = symmetric_eig_range(&cert.p);
        assert!(p_min > 0.0);
        // Default Q restricts to the identity on the subspace.
        assert!((&cert.q - DMatrix::identity(39, 39)).norm() < 1e-12);
    }

    #[test]
    fn certificate_rejects_unstable_loop() {
        let sys = linearize(19, LaneKind::Uncontrolled, &OvmParams::default()).unwrap();
        let fake_gain = GainMatrix {
            k: vec![0.0; 38],
            n: 19,
            equilibrium: sys.equilibrium,
        };
        assert!(lyapunov_certificate(&sys, &fake_gain, None).is_err());
    }

    #[test]
    fn rate_constant_identities() {
        // P = I, Q = 2I gives alpha2 = 2; A_u = -I gives beta2 = -2, flagged.
        let cert = LyapunovCertificate {
            p: DMatrix::identity(4, 4),
            q: DMatrix::identity(4, 4) * 2.0,
            basis: None,
        };
        let sys_u = LinearSystem {
            a: DMatrix::identity(4, 4) * -1.0,
            b: None,
            kind: LaneKind::Uncontrolled,
            n: 2,
            equilibrium: Equilibrium {
                n: 2,
                headway: 200.0,
                velocity: 30.0,
            },
            a1: 0.0,
            a2: 1.5,
            a3: 0.9,
        };
        let rc = rate_constants(&cert, &sys_u);
        assert_abs_diff_eq!(rc.alpha2, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rc.beta2, -2.0, epsilon = 1e-12);
        assert!(!rc.growth_premise_holds);
    }

    #[test]
    fn paper_scale_rate_constants_have_the_asserted_signs() {
        let p = OvmParams::default();
        let sys_c = linearize(20, LaneKind::Controlled, &p).unwrap();
        let sys_u = linearize(19, LaneKind::Uncontrolled, &p).unwrap();
        let gain = synthesize_gain(&sys_c, &WeightSpec::default()).unwrap();
        let cert = lyapunov_certificate(&sys_c, &gain, None).unwrap();
        let rc = rate_constants(&cert, &sys_u);
        assert!(rc.alpha2 > 0.0);
        assert!(rc.beta2 > 0.0);
        assert!(rc.growth_premise_holds);
    }

    #[test]
    fn gain_json_round_trip() {
        // n = 12 keeps the equilibrium headway inside the OVM ramp; sparser
        // rings saturate V(s) and lose the headway coupling entirely.
        let sys = linearize(12, LaneKind::Controlled, &OvmParams::default()).unwrap();
        let gain = synthesize_gain(&sys, &WeightSpec::default()).unwrap();
        let text = gain.to_json().unwrap();
        let back = GainMatrix::from_json(&text).unwrap();
        assert_eq!(gain, back);
    }
}
