//! Optimal velocity car-following model on a ring road, its equilibria, and the
//! linearized per-lane dynamics.
//!
//! The model: vehicle i accelerates by `F(s, s_dot, v) = alpha (V(s) - v) + beta s_dot`
//! where s is the headway to its leader and V is the clipped optimal-velocity
//! profile: 0 below `s_stop`, `v_max` above `s_go`, and a raised cosine in
//! between. A ring of n identical vehicles has the unique uniform equilibrium
//! `s* = C / n`, `v* = V(s*)`.
//!
//! Linearization about that equilibrium yields block-circulant error dynamics
//! built from `a1 = alpha Vdot(s*)`, `a2 = alpha + beta`, `a3 = beta`. The
//! controlled variant replaces the last vehicle (the AV) with a directly
//! actuated double integrator; the uncontrolled variant is the all-human ring.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ring-road and car-following parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OvmParams {
    /// Ring circumference C, m.
    pub ring_length: f64,
    /// Headway below which the target velocity is 0, m.
    pub s_stop: f64,
    /// Headway above which the target velocity saturates at `v_max`, m.
    pub s_go: f64,
    /// Free-flow speed, m/s.
    pub v_max: f64,
    /// Relaxation gain on the velocity error, 1/s.
    pub alpha: f64,
    /// Gain on the headway rate, 1/s.
    pub beta: f64,
}

impl Default for OvmParams {
    fn default() -> Self {
        Self {
            ring_length: 400.0,
            s_stop: 5.0,
            s_go: 35.0,
            v_max: 30.0,
            alpha: 0.6,
            beta: 0.9,
        }
    }
}

impl OvmParams {
    /// Checks the parameter invariants: positive lengths and gains, s_stop < s_go.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if !(self.ring_length > 0.0) {
            return bad("ring_length must be > 0");
        }
        if !(self.s_stop > 0.0 && self.s_go > self.s_stop) {
            return bad("need 0 < s_stop < s_go");
        }
        if !(self.v_max > 0.0) {
            return bad("v_max must be > 0");
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be > 0");
        }
        Ok(())
    }
}

/// Uniform flow equilibrium of an n-vehicle lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub n: usize,
    /// s* = C / n, m.
    pub headway: f64,
    /// v* = V(s*), m/s.
    pub velocity: f64,
}

/// Which lane dynamics a linear system describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneKind {
    /// n - 1 human vehicles plus the AV in the last slot, input on the AV.
    Controlled,
    /// All n vehicles human, ring closed, no input.
    Uncontrolled,
}

/// Linearized lane dynamics about a uniform equilibrium.
///
/// State layout is `[s~_1, v~_1, ..., s~_n, v~_n]` (headway and velocity errors,
/// vehicle 1 leading, each vehicle following the previous one, vehicle 1
/// following vehicle n around the ring). For `Controlled` the AV is vehicle n
/// and `b` is the 2n x 1 input column; for `Uncontrolled` there is no input.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: Option<DMatrix<f64>>,
    pub kind: LaneKind,
    /// Vehicles on the lane (the AV counts toward n when controlled).
    pub n: usize,
    pub equilibrium: Equilibrium,
    /// a1 = alpha Vdot(s_ref), 1/s².
    pub a1: f64,
    /// a2 = alpha + beta, 1/s.
    pub a2: f64,
    /// a3 = beta, 1/s.
    pub a3: f64,
}

/// Clipped optimal-velocity profile V(s).
pub fn optimal_velocity(s: f64, p: &OvmParams) -> f64 {
    if s <= p.s_stop {
        0.0
    } else if s >= p.s_go {
        p.v_max
    } else {
        let phase = std::f64::consts::PI * (s - p.s_stop) / (p.s_go - p.s_stop);
        p.v_max / 2.0 * (1.0 - phase.cos())
    }
}

/// Analytic derivative dV/ds; zero on the clipped regions.
pub fn optimal_velocity_slope(s: f64, p: &OvmParams) -> f64 {
    if s <= p.s_stop || s >= p.s_go {
        0.0
    } else {
        let w = std::f64::consts::PI / (p.s_go - p.s_stop);
        p.v_max / 2.0 * w * (w * (s - p.s_stop)).sin()
    }
}

/// Car-following acceleration `alpha (V(s) - v) + beta s_dot`.
pub fn ovm_acceleration(s: f64, s_dot: f64, v: f64, p: &OvmParams) -> f64 {
    p.alpha * (optimal_velocity(s, p) - v) + p.beta * s_dot
}

/// Uniform equilibrium of n vehicles sharing the ring.
pub fn equilibrium(n: usize, p: &OvmParams) -> Result<Equilibrium> {
    if n == 0 {
        return Err(Error::InvalidParameter("equilibrium needs n >= 1".into()));
    }
    let headway = p.ring_length / n as f64;
    Ok(Equilibrium {
        n,
        headway,
        velocity: optimal_velocity(headway, p),
    })
}

/// Linearized dynamics of an n-vehicle lane about its uniform equilibrium.
pub fn linearize(n: usize, kind: LaneKind, p: &OvmParams) -> Result<LinearSystem> {
    let eq = equilibrium(n, p)?;
    linearize_about(n, kind, eq, eq.headway, p)
}

/// Linearization with the headway coupling coefficient evaluated at `s_ref`
/// instead of the uniform equilibrium headway. Used for feedback designs that
/// target a non-uniform reference (the human vehicles then share the headway
/// `s_ref` while the AV takes up the remainder of the ring).
pub fn linearize_about(
    n: usize,
    kind: LaneKind,
    eq: Equilibrium,
    s_ref: f64,
    p: &OvmParams,
) -> Result<LinearSystem> {
    if n < 2 {
        return Err(Error::InvalidParameter("linearize needs n >= 2".into()));
    }
    let a1 = p.alpha * optimal_velocity_slope(s_ref, p);
    let a2 = p.alpha + p.beta;
    let a3 = p.beta;

    let dim = 2 * n;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        // Vehicle i (0-based) follows i-1; vehicle 0 follows vehicle n-1.
        let lead = if i == 0 { n - 1 } else { i - 1 };
        let (rs, rv) = (2 * i, 2 * i + 1);
        let (cs, cv) = (2 * i, 2 * i + 1);
        let cv_lead = 2 * lead + 1;
        // Headway row: s~' = v~_lead - v~.
        a[(rs, cv_lead)] += 1.0;
        a[(rs, cv)] -= 1.0;
        let is_av = kind == LaneKind::Controlled && i == n - 1;
        if !is_av {
            // Human row: v~' = a1 s~ - a2 v~ + a3 v~_lead.
            a[(rv, cs)] = a1;
            a[(rv, cv)] -= a2;
            a[(rv, cv_lead)] += a3;
        }
    }
    let b = match kind {
        LaneKind::Controlled => {
            let mut b = DMatrix::<f64>::zeros(dim, 1);
            b[(dim - 1, 0)] = 1.0;
            Some(b)
        }
        LaneKind::Uncontrolled => None,
    };
    Ok(LinearSystem {
        a,
        b,
        kind,
        n,
        equilibrium: eq,
        a1,
        a2,
        a3,
    })
}

/// String instability criterion for the n-vehicle uniform flow:
/// perturbations amplify along the chain iff `alpha + 2 beta < 2 Vdot(C/n)`.
pub fn string_instability_check(n: usize, p: &OvmParams) -> Result<bool> {
    let eq = equilibrium(n, p)?;
    Ok(p.alpha + 2.0 * p.beta < 2.0 * optimal_velocity_slope(eq.headway, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn p() -> OvmParams {
        OvmParams::default()
    }

    // Frozen oracle values, computed independently from the closed forms.
    const V_AT_20: f64 = 15.0;
    const VDOT_AT_20: f64 = 1.570_796_326_794_896_3;
    const S_19: f64 = 400.0 / 19.0;
    const V_AT_S19: f64 = 16.650_123_314_911_19;
    const VDOT_AT_S19: f64 = 1.561_262_657_019_798_5;

    #[test]
    fn optimal_velocity_matches_oracle() {
        assert_abs_diff_eq!(optimal_velocity(5.0, &p()), 0.0);
        assert_abs_diff_eq!(optimal_velocity(35.0, &p()), 30.0);
        assert_abs_diff_eq!(optimal_velocity(20.0, &p()), V_AT_20, epsilon = 1e-12);
        assert_abs_diff_eq!(optimal_velocity(S_19, &p()), V_AT_S19, epsilon = 1e-12);
        assert_abs_diff_eq!(optimal_velocity(0.0, &p()), 0.0);
        assert_abs_diff_eq!(optimal_velocity(1e9, &p()), 30.0);
    }

    #[test]
    fn slope_matches_oracle_and_clips() {
        assert_abs_diff_eq!(optimal_velocity_slope(20.0, &p()), VDOT_AT_20, epsilon = 1e-12);
        assert_abs_diff_eq!(optimal_velocity_slope(S_19, &p()), VDOT_AT_S19, epsilon = 1e-12);
        assert_eq!(optimal_velocity_slope(4.0, &p()), 0.0);
        assert_eq!(optimal_velocity_slope(40.0, &p()), 0.0);
    }

    #[test]
    fn slope_agrees_with_finite_differences_inside_the_ramp() {
        let h = 1e-6;
        for s in [6.0, 10.0, 17.5, 20.0, 25.0, 34.0] {
            let fd = (optimal_velocity(s + h, &p()) - optimal_velocity(s - h, &p())) / (2.0 * h);
            assert_relative_eq!(optimal_velocity_slope(s, &p()), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn acceleration_examples() {
        assert_abs_diff_eq!(ovm_acceleration(20.0, 0.0, 10.0, &p()), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ovm_acceleration(20.0, -2.0, 15.0, &p()), -1.8, epsilon = 1e-12);
    }

    #[test]
    fn equilibria_match_oracle() {
        let e20 = equilibrium(20, &p()).unwrap();
        assert_abs_diff_eq!(e20.headway, 20.0);
        assert_abs_diff_eq!(e20.velocity, 15.0, epsilon = 1e-12);
        let e19 = equilibrium(19, &p()).unwrap();
        assert_abs_diff_eq!(e19.headway, S_19, epsilon = 1e-12);
        assert_abs_diff_eq!(e19.velocity, V_AT_S19, epsilon = 1e-12);
        // Equilibrium is an exact fixed point of the acceleration law.
        assert_eq!(ovm_acceleration(e19.headway, 0.0, e19.velocity, &p()), 0.0);
        // Sparse ring saturates at free flow.
        let sparse = equilibrium(11, &p()).unwrap();
        assert_eq!(sparse.velocity, 30.0);
        assert!(equilibrium(0, &p()).is_err());
    }

    #[test]
    fn linearize_small_controlled_structure() {
        // n = 3 controlled: vehicles 1, 2 human, vehicle 3 the AV.
        let sys = linearize(3, LaneKind::Controlled, &p()).unwrap();
        let (a1, a2, a3) = (sys.a1, sys.a2, sys.a3);
        assert_abs_diff_eq!(a2, 1.5);
        assert_abs_diff_eq!(a3, 0.9);
        let m = &sys.a;
        assert_eq!(m.nrows(), 6);
        // Row 0: s1' = v3 - v1 (vehicle 1 follows the AV around the ring).
        assert_eq!(m[(0, 5)], 1.0);
        assert_eq!(m[(0, 1)], -1.0);
        // Row 1: v1' = a1 s1 - a2 v1 + a3 v3.
        assert_eq!(m[(1, 0)], a1);
        assert_eq!(m[(1, 1)], -a2);
        assert_eq!(m[(1, 5)], a3);
        // Row 2: s2' = v1 - v2.
        assert_eq!(m[(2, 1)], 1.0);
        assert_eq!(m[(2, 3)], -1.0);
        // Row 4: s3' = v2 - v3; row 5 (AV velocity) all zeros, driven by input.
        assert_eq!(m[(4, 3)], 1.0);
        assert_eq!(m[(4, 5)], -1.0);
        assert!(m.row(5).iter().all(|x| *x == 0.0));
        let b = sys.b.as_ref().unwrap();
        assert_eq!(b[(5, 0)], 1.0);
        assert_eq!(b.column(0).iter().filter(|x| **x != 0.0).count(), 1);
    }

    #[test]
    fn headway_rows_encode_velocity_differences() {
        for (n, kind) in [(20, LaneKind::Controlled), (19, LaneKind::Uncontrolled)] {
            let sys = linearize(n, kind, &p()).unwrap();
            for i in 0..n {
                let lead = if i == 0 { n - 1 } else { i - 1 };
                let row = sys.a.row(2 * i);
                for j in 0..2 * n {
                    let want = if j == 2 * lead + 1 {
                        1.0
                    } else if j == 2 * i + 1 {
                        -1.0
                    } else {
                        0.0
                    };
                    assert_eq!(row[j], want, "n={n} row {i} col {j}");
                }
            }
        }
    }

    #[test]
    fn uncontrolled_ring_is_linearly_unstable_for_paper_sizes() {
        for n in [19usize, 20] {
            let sys = linearize(n, LaneKind::Uncontrolled, &p()).unwrap();
            let max_re = sys
                .a
                .complex_eigenvalues()
                .iter()
                .map(|l| l.re)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max_re > 1e-6, "n={n}: spectral abscissa {max_re}");
        }
    }

    #[test]
    fn instability_criterion_examples() {
        assert!(string_instability_check(19, &p()).unwrap());
        assert!(string_instability_check(20, &p()).unwrap());
        let stiff = OvmParams {
            alpha: 10.0,
            beta: 10.0,
            ..p()
        };
        assert!(!string_instability_check(20, &stiff).unwrap());
    }

    #[test]
    fn optimal_velocity_is_continuous_and_monotone() {
        let eps = 1e-9;
        for s0 in [5.0, 35.0] {
            let lo = optimal_velocity(s0 - eps, &p());
            let hi = optimal_velocity(s0 + eps, &p());
            assert!((hi - lo).abs() < 1e-6);
        }
        let mut prev = -1.0;
        for k in 0..=4000 {
            let v = optimal_velocity(k as f64 * 0.01, &p());
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }
}
