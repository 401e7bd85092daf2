//! Exponential variance envelopes: fitting them to nominal traces,
//! composing them over a round, and the state-dependent tube that
//! justifies the tightened uncontrolled branch.

use serde::{Deserialize, Serialize};

use crate::analysis::variance::VarianceTrace;
use crate::error::Error;
use crate::Result;

/// Envelope parameters for one round of the switching cycle.
///
/// The controlled lane is bounded by alpha1 * v * exp(-alpha2 t) and the
/// uncontrolled lane by beta1 * v * exp(beta2 t), with v the variance at the
/// start of the respective phase. The tightened uncontrolled branch follows
/// the tabulated nominal curve plus a slack eps until t_eps, then grows
/// exponentially from that level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub t_eps: f64,
    pub eps: f64,
    /// Nominal uncontrolled variance curve, (time, variance) knots.
    pub nominal_var_u: Vec<(f64, f64)>,
    /// Fitted rate of the nominal curve's early decrease, when it has one.
    #[serde(default)]
    pub decrease_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 1.0) || !(self.beta1 >= 1.0) {
            return Err(Error::InvalidParameter(
                "envelope multipliers alpha1 and beta1 must be at least 1".into(),
            ));
        }
        if !(self.alpha2 > 0.0) {
            return Err(Error::InvalidParameter(
                "controlled decay rate alpha2 must be positive".into(),
            ));
        }
        if !(self.beta2 > 0.0) {
            return Err(Error::InvalidParameter(
                "uncontrolled growth rate beta2 must be positive".into(),
            ));
        }
        if !(self.t_eps > 0.0) {
            return Err(Error::InvalidParameter("t_eps must be positive".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidParameter("eps must be nonnegative".into()));
        }
        Ok(())
    }

    /// Nominal uncontrolled variance at time t, linearly interpolated and
    /// clamped to the tabulated range.
    pub fn nominal_at(&self, t: f64) -> f64 {
        let knots = &self.nominal_var_u;
        assert!(!knots.is_empty(), "nominal curve has no knots");
        if t <= knots[0].0 {
            return knots[0].1;
        }
        if t >= knots[knots.len() - 1].0 {
            return knots[knots.len() - 1].1;
        }
        let hi = knots.partition_point(|k| k.0 <= t);
        let (t0, v0) = knots[hi - 1];
        let (t1, v1) = knots[hi];
        if t1 == t0 {
            return v0;
        }
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// The same envelope with the controlled decay slowed fourfold, for
    /// rounds whose control phase is too short to settle.
    pub fn with_insufficient_adjustment(&self) -> BoundParams {
        BoundParams {
            alpha2: self.alpha2 / 4.0,
            ..self.clone()
        }
    }
}

/// Knobs for the envelope fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Restrict the controlled-lane fit to this time window.
    pub controlled_window: Option<(f64, f64)>,
    /// The controlled fit stops once the variance has dropped this many
    /// decades below its first in-window value, so the numerically steep
    /// tail does not dominate the regression.
    pub controlled_decades: f64,
    /// Samples at or below this variance are excluded from log fits.
    pub variance_floor: f64,
    /// Length of the growth-fit window, starting at the uncontrolled
    /// trace's minimum.
    pub growth_window: f64,
    /// Slack added to the nominal curve in the tightened bound.
    pub eps: f64,
    /// Keep every k-th sample when tabulating the nominal curve.
    pub table_stride: usize,
}

impl Default for FitOptions {
    fn default() -> FitOptions {
        FitOptions {
            controlled_window: None,
            controlled_decades: 3.0,
            variance_floor: 1e-9,
            growth_window: 90.0,
            eps: 0.5,
            table_stride: 100,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.controlled_window {
            if !(hi > lo) {
                return Err(Error::InvalidParameter(
                    "controlled_window must have positive length".into(),
                ));
            }
        }
        if !(self.controlled_decades > 0.0) {
            return Err(Error::InvalidParameter(
                "controlled_decades must be positive".into(),
            ));
        }
        if !(self.variance_floor >= 0.0) {
            return Err(Error::InvalidParameter(
                "variance_floor must be nonnegative".into(),
            ));
        }
        if !(self.growth_window > 0.0) {
            return Err(Error::InvalidParameter(
                "growth_window must be positive".into(),
            ));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidParameter("eps must be nonnegative".into()));
        }
        if self.table_stride == 0 {
            return Err(Error::InvalidParameter(
                "table_stride must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Least-squares line through (t, ln v): returns (slope, intercept).
fn log_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(t, v) in points {
        let y = v.ln();
        sx += t;
        sy += y;
        sxx += t * t;
        sxy += t * y;
    }
    let den = n * sxx - sx * sx;
    if den == 0.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / den;
    let intercept = (sy - slope * sx) / n;
    Some((slope, intercept))
}

/// Fit envelope rates to a controlled and an uncontrolled nominal variance
/// trace with default options.
pub fn fit_envelopes(
    controlled: &VarianceTrace,
    uncontrolled: &VarianceTrace,
) -> Result<BoundParams> {
    fit_envelopes_with(controlled, uncontrolled, &FitOptions::default())
}

pub fn fit_envelopes_with(
    controlled: &VarianceTrace,
    uncontrolled: &VarianceTrace,
    opts: &FitOptions,
) -> Result<BoundParams> {
    opts.validate()?;
    let mut warnings = Vec::new();

    let in_window = |t: f64| match opts.controlled_window {
        Some((lo, hi)) => t >= lo && t <= hi,
        None => true,
    };
    let mut c_points: Vec<(f64, f64)> = controlled
        .points
        .iter()
        .copied()
        .filter(|&(t, v)| in_window(t) && v > opts.variance_floor)
        .collect();
    if let Some(&(_, v_first)) = c_points.first() {
        let cut = v_first * 10f64.powf(-opts.controlled_decades);
        if let Some(end) = c_points.iter().position(|&(_, v)| v < cut) {
            c_points.truncate(end.max(2));
        }
    }
    if c_points.len() < 2 {
        return Err(Error::Analysis(
            "controlled trace has too few usable samples for a fit".into(),
        ));
    }
    let (c_slope, _) = log_line(&c_points)
        .ok_or_else(|| Error::Analysis("controlled trace spans zero time".into()))?;
    let alpha2 = -c_slope;
    if alpha2 <= 0.0 {
        return Err(Error::Analysis(
            "controlled trace does not decay over the fit window".into(),
        ));
    }
    let mut running_min = c_points[0].1;
    for &(_, v) in &c_points {
        if v > 1.05 * running_min {
            warnings.push("controlled variance trace is not monotone decreasing".into());
            break;
        }
        running_min = running_min.min(v);
    }

    let u_points: Vec<(f64, f64)> = uncontrolled
        .points
        .iter()
        .copied()
        .filter(|&(_, v)| v > opts.variance_floor)
        .collect();
    if u_points.len() < 2 {
        return Err(Error::Analysis(
            "uncontrolled trace has too few usable samples for a fit".into(),
        ));
    }
    let (t_min, v_min) = u_points
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("u_points is nonempty");

    // Decay segment: from the start until the trace first comes within eps
    // of its floor. Stopping there keeps the flat basin, where the curve has
    // no exponential character left, out of the regression.
    let t_band = u_points
        .iter()
        .find(|&&(_, v)| v <= v_min + opts.eps)
        .map(|&(t, _)| t)
        .unwrap_or(t_min);
    let early: Vec<(f64, f64)> = u_points
        .iter()
        .copied()
        .filter(|&(t, _)| t <= t_band)
        .collect();
    let decay_line = log_line(&early).filter(|&(slope, _)| slope < 0.0);
    let decrease_rate = decay_line.map(|(slope, _)| -slope);
    if decrease_rate.is_none() {
        warnings.push("uncontrolled trace has no initial decrease".into());
    }

    let late: Vec<(f64, f64)> = u_points
        .iter()
        .copied()
        .filter(|&(t, _)| t >= t_min && t <= t_min + opts.growth_window)
        .collect();
    let (g_slope, g_intercept) = log_line(&late)
        .ok_or_else(|| Error::Analysis("uncontrolled trace ends at its minimum".into()))?;
    let beta2 = g_slope;
    if beta2 <= 0.0 {
        return Err(Error::Analysis(
            "uncontrolled trace does not grow after its minimum".into(),
        ));
    }

    // The fitted curve is the pair of exponentials; its minimum sits where
    // they cross, which in a flat-bottomed trace lands earlier than the raw
    // argmin.
    let t_eps = match decay_line {
        Some((d_slope, d_intercept)) => {
            let crossing = (d_intercept - g_intercept) / (g_slope - d_slope);
            if crossing.is_finite() && crossing > 0.0 {
                crossing
            } else {
                warnings.push(
                    "fitted decay and growth envelopes do not cross; using the band entry time"
                        .into(),
                );
                t_band
            }
        }
        None => t_min,
    };

    let mut nominal: Vec<(f64, f64)> = uncontrolled
        .points
        .iter()
        .copied()
        .step_by(opts.table_stride)
        .collect();
    nominal.push((t_min, v_min));
    if let Some(&last) = uncontrolled.points.last() {
        nominal.push(last);
    }
    nominal.sort_by(|a, b| a.0.total_cmp(&b.0));
    nominal.dedup_by(|a, b| a.0 == b.0);

    let params = BoundParams {
        alpha1: 1.0,
        alpha2,
        beta1: 1.0,
        beta2,
        t_eps,
        eps: opts.eps,
        nominal_var_u: nominal,
        decrease_rate,
        warnings,
    };
    params.validate()?;
    Ok(params)
}

/// Envelope values at the two endpoints of one round: after the controlled
/// phase, and after the following uncontrolled phase.
pub fn round_bound(
    params: &BoundParams,
    var_start: f64,
    jump_enter: f64,
    jump_exit: f64,
    t_controlled: f64,
    t_uncontrolled: f64,
    use_state_dependent: bool,
) -> (f64, f64) {
    let var_1 =
        params.alpha1 * (var_start + jump_enter) * (-params.alpha2 * t_controlled).exp();
    let var_next = if use_state_dependent {
        if t_uncontrolled <= params.t_eps {
            params.nominal_at(t_uncontrolled) + params.eps
        } else {
            params.beta1
                * (params.nominal_at(params.t_eps) + params.eps)
                * (params.beta2 * (t_uncontrolled - params.t_eps)).exp()
        }
    } else {
        params.beta1 * (var_1 + jump_exit) * (params.beta2 * t_uncontrolled).exp()
    };
    (var_1, var_next)
}

/// Worst-case divergence of two trajectories of the same Lipschitz flow:
/// the state gap and the variance gap both grow at most exponentially from
/// their initial values.
pub fn state_dependent_tube(
    z0: &[f64],
    z0_bar: &[f64],
    lipschitz: f64,
    t: f64,
) -> (f64, f64) {
    assert_eq!(z0.len(), z0_bar.len(), "tube endpoints differ in dimension");
    assert!(z0.len() % 2 == 0, "state stacks headway and velocity pairs");
    let n_l = (z0.len() / 2).max(1) as f64;
    let mut diff_sq = 0.0;
    let mut sum_sq = 0.0;
    for (a, b) in z0.iter().zip(z0_bar) {
        diff_sq += (a - b) * (a - b);
        sum_sq += (a + b) * (a + b);
    }
    let diff = diff_sq.sqrt();
    let sum = sum_sq.sqrt();
    let state_gap = diff * (lipschitz * t).exp();
    let var_gap = sum * diff * (2.0 * lipschitz * t).exp() / n_l;
    (state_gap, var_gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::{synthesize_gain, WeightSpec};
    use crate::ovm::{linearize, LaneKind, OvmParams};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace_of(f: impl Fn(f64) -> f64, t_end: f64, dt: f64) -> VarianceTrace {
        let steps = (t_end / dt).round() as usize;
        VarianceTrace {
            points: (0..=steps).map(|k| (k as f64 * dt, f(k as f64 * dt))).collect(),
        }
    }

    fn hand_params() -> BoundParams {
        BoundParams {
            alpha1: 1.0,
            alpha2: 0.25,
            beta1: 1.0,
            beta2: 0.04,
            t_eps: 4.0,
            eps: 0.5,
            nominal_var_u: vec![(0.0, 20.0), (4.0, 15.0), (10.0, 30.0)],
            decrease_rate: None,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn identity_round_returns_the_start_variance() {
        let params = hand_params();
        let (v1, v_next) = round_bound(&params, 12.5, 0.0, 0.0, 0.0, 0.0, false);
        assert_eq!(v1, 12.5);
        assert_eq!(v_next, 12.5);
    }

    #[test]
    fn plain_round_bound_composes_the_two_exponentials() {
        let params = hand_params();
        let (v1, v_next) = round_bound(&params, 10.0, 2.0, 3.0, 2.0, 3.0, false);
        assert_relative_eq!(v1, 12.0 * (-0.5_f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(v_next, (v1 + 3.0) * (0.12_f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn tightened_bound_follows_the_nominal_curve_then_grows() {
        let params = hand_params();
        let (_, inside) = round_bound(&params, 10.0, 2.0, 3.0, 2.0, 3.0, true);
        assert_relative_eq!(inside, 16.25 + 0.5, epsilon = 1e-12);
        let (_, beyond) = round_bound(&params, 10.0, 2.0, 3.0, 2.0, 10.0, true);
        assert_relative_eq!(beyond, 15.5 * (0.04_f64 * 6.0).exp(), epsilon = 1e-12);
    }

    #[test]
    fn nominal_curve_interpolates_and_clamps() {
        let params = hand_params();
        assert_eq!(params.nominal_at(-1.0), 20.0);
        assert_eq!(params.nominal_at(0.0), 20.0);
        assert_relative_eq!(params.nominal_at(2.0), 17.5, epsilon = 1e-12);
        assert_relative_eq!(params.nominal_at(7.0), 22.5, epsilon = 1e-12);
        assert_eq!(params.nominal_at(11.0), 30.0);
    }

    #[test]
    fn insufficient_adjustment_slows_only_the_controlled_rate() {
        let params = hand_params();
        let slowed = params.with_insufficient_adjustment();
        assert_eq!(slowed.alpha2, 0.0625);
        assert_eq!(slowed.beta2, params.beta2);
        assert_eq!(slowed.t_eps, params.t_eps);
    }

    #[test]
    fn fit_recovers_exact_exponentials() {
        let controlled = trace_of(|t| 10.0 * (-0.25 * t).exp(), 20.0, 0.1);
        let uncontrolled = trace_of(
            |t| {
                if t <= 4.0 {
                    20.0 * (-0.3 * t).exp()
                } else {
                    20.0 * (-0.3_f64 * 4.0).exp() * (0.04 * (t - 4.0)).exp()
                }
            },
            40.0,
            0.1,
        );
        let params = fit_envelopes(&controlled, &uncontrolled).unwrap();
        assert_relative_eq!(params.alpha2, 0.25, epsilon = 1e-6);
        assert_relative_eq!(params.beta2, 0.04, epsilon = 1e-6);
        assert_relative_eq!(params.decrease_rate.unwrap(), 0.3, epsilon = 1e-6);
        assert_relative_eq!(params.t_eps, 4.0, epsilon = 1e-9);
        assert_eq!(params.alpha1, 1.0);
        assert_eq!(params.beta1, 1.0);
        assert!(params.warnings.is_empty(), "{:?}", params.warnings);
        // The tabulated curve reproduces the input at its knots.
        assert_relative_eq!(
            params.nominal_at(4.0),
            20.0 * (-1.2_f64).exp(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn fit_warns_on_a_bumpy_controlled_trace() {
        let controlled = trace_of(
            |t| 10.0 * (-0.25 * t).exp() * (1.0 + 0.5 * (0.9 * t).sin().powi(2)),
            20.0,
            0.1,
        );
        let uncontrolled = trace_of(
            |t| {
                if t <= 4.0 {
                    20.0 * (-0.3 * t).exp()
                } else {
                    20.0 * (-0.3_f64 * 4.0).exp() * (0.04 * (t - 4.0)).exp()
                }
            },
            40.0,
            0.1,
        );
        let params = fit_envelopes(&controlled, &uncontrolled).unwrap();
        assert!(params
            .warnings
            .iter()
            .any(|w| w.contains("not monotone")));
    }

    #[test]
    fn fit_rejects_a_growing_controlled_trace() {
        let controlled = trace_of(|t| 10.0 * (0.1 * t).exp(), 20.0, 0.1);
        let uncontrolled = trace_of(|t| 20.0 * (0.04 * t).exp() + 1.0, 40.0, 0.1);
        assert!(fit_envelopes(&controlled, &uncontrolled).is_err());
    }

    #[test]
    fn tube_is_tight_at_time_zero_and_empty_for_equal_states() {
        let z0 = [1.0, 2.0, -1.0, 0.5];
        let (gap, var_gap) = state_dependent_tube(&z0, &z0, 3.0, 7.0);
        assert_eq!(gap, 0.0);
        assert_eq!(var_gap, 0.0);

        let z1 = [1.5, 2.0, -1.0, 0.5];
        let (gap0, _) = state_dependent_tube(&z0, &z1, 3.0, 0.0);
        assert_relative_eq!(gap0, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn tube_dominates_a_linearized_simulation_pair() {
        let p = OvmParams::default();
        let sys = linearize(19, LaneKind::Controlled, &p).unwrap();
        let gain = synthesize_gain(&sys, &WeightSpec::default()).unwrap();
        let k_row = nalgebra::DMatrix::from_row_slice(1, gain.k.len(), &gain.k);
        let a_closed = &sys.a - sys.b.as_ref().unwrap() * k_row;
        let lipschitz = a_closed.singular_values().max();

        let dim = 2 * 19;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let z0 = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
        // Perturb with zero velocity-mean so the sample-variance gap obeys
        // the mean-square bound at t = 0 as well.
        let mut delta = DVector::from_fn(dim, |_, _| rng.gen_range(-0.1..0.1));
        let v_mean: f64 = delta.iter().skip(1).step_by(2).sum::<f64>() / 19.0;
        for i in 0..19 {
            delta[2 * i + 1] -= v_mean;
        }
        let z0_bar = &z0 + &delta;

        let dt = 0.01;
        let stepper = nalgebra::DMatrix::identity(dim, dim) + dt * &a_closed;
        let mut a = z0.clone();
        let mut b = z0_bar.clone();
        for k in 0..=500 {
            let t = k as f64 * dt;
            let (state_gap, var_gap) =
                state_dependent_tube(z0.as_slice(), z0_bar.as_slice(), lipschitz, t);
            let measured_gap = (&a - &b).norm();
            assert!(
                measured_gap <= state_gap + 1e-9,
                "state gap {measured_gap} above bound {state_gap} at t={t}"
            );
            let ms_gap = (a.norm_squared() - b.norm_squared()).abs() / 19.0;
            assert!(
                ms_gap <= var_gap + 1e-9,
                "variance gap {ms_gap} above bound {var_gap} at t={t}"
            );
            a = &stepper * a;
            b = &stepper * b;
        }
    }

    #[test]
    fn params_round_trip_through_json() {
        let params = hand_params();
        let text = serde_json::to_string(&params).unwrap();
        let back: BoundParams = serde_json::from_str(&text).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn validation_rejects_bad_rates() {
        let mut params = hand_params();
        params.alpha2 = 0.0;
        assert!(params.validate().is_err());
        let mut params = hand_params();
        params.beta2 = -0.1;
        assert!(params.validate().is_err());
        let mut params = hand_params();
        params.alpha1 = 0.5;
        assert!(params.validate().is_err());
        assert!(hand_params().validate().is_ok());
    }
}
