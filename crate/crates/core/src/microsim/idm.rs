//! Modified IDM+ with the gradient effect.

use crate::error::{Error, Result};
use crate::scenario::DriverParams;

/// Desired gap s*(v, Δv), m. `dv` is own speed minus leader speed.
pub fn desired_gap(v: f64, dv: f64, params: &DriverParams) -> f64 {
    let dynamic = v * params.headway_t + v * dv / (2.0 * (params.alpha * params.beta).sqrt());
    params.s0 + dynamic.max(0.0)
}

/// IDM+ desired acceleration, m/s². An infinite `gap` means no leader.
pub fn desired_acceleration(v: f64, dv: f64, gap: f64, params: &DriverParams) -> Result<f64> {
    if !(gap > 0.0) {
        return Err(Error::Domain {
            what: "gap",
            value: gap,
        });
    }
    let free = 1.0 - (v / params.v_des).powf(params.delta);
    let interaction = 1.0 - (desired_gap(v, dv, params) / gap).powi(2);
    Ok(params.alpha * free.min(interaction))
}

/// Acceleration caused by the not-yet-compensated part of the road gradient.
pub fn gradient_acceleration(g_here: f64, g_comp: f64, theta: f64) -> f64 {
    -theta * (g_here - g_comp)
}

/// Rate-limited compensation of gradient increases; decreases (and
/// increases within one step's budget) are compensated instantly.
pub fn update_compensated_gradient(g_comp_prev: f64, g_here: f64, lambda: f64, dt: f64) -> f64 {
    let limit = g_comp_prev + lambda * dt;
    if g_here > limit {
        limit
    } else {
        g_here
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> DriverParams {
        DriverParams::default()
    }

    #[test]
    fn desired_gap_cases() {
        assert_eq!(desired_gap(0.0, 0.0, &p()), 3.0);
        assert!((desired_gap(20.0, 0.0, &p()) - 27.0).abs() < 1e-12);
        // 20*1.2 + 20*(-10)/(2*sqrt(2.5)) = 24 - 63.2 < 0
        assert_eq!(desired_gap(20.0, -10.0, &p()), 3.0);
    }

    #[test]
    fn desired_acceleration_cases() {
        let params = p();
        let a = desired_acceleration(27.0, 0.0, f64::INFINITY, &params).unwrap();
        assert_eq!(a, 0.0);
        let a = desired_acceleration(0.0, 0.0, 1e12, &params).unwrap();
        assert!((a - params.alpha).abs() < 1e-12);
        let s_star = desired_gap(13.5, 0.0, &params);
        let a = desired_acceleration(13.5, 0.0, s_star, &params).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn collision_gap_is_domain_error() {
        assert!(desired_acceleration(10.0, 0.0, 0.0, &p()).is_err());
        assert!(desired_acceleration(10.0, 0.0, -1.0, &p()).is_err());
    }

    #[test]
    fn gradient_acceleration_cases() {
        assert_eq!(gradient_acceleration(0.01, 0.01, 20.0), 0.0);
        assert!((gradient_acceleration(0.03, -0.005, 20.0) + 0.7).abs() < 1e-12);
        assert!(gradient_acceleration(-0.005, 0.01, 20.0) > 0.0);
    }

    #[test]
    fn compensation_cases() {
        assert_eq!(update_compensated_gradient(0.0, 0.000001, 0.0003, 0.01), 0.000001);
        assert_eq!(update_compensated_gradient(0.01, -0.005, 0.0003, 0.01), -0.005);
        let g = update_compensated_gradient(-0.005, 0.03, 0.0003, 0.01);
        assert!((g + 0.004997).abs() < 1e-15);
    }

    #[test]
    fn compensation_reaches_target_in_finite_steps() {
        let mut g = -0.005;
        let mut steps = 0;
        while g != 0.03 {
            g = update_compensated_gradient(g, 0.03, 0.0003, 0.01);
            steps += 1;
            assert!(steps < 20_000);
        }
        // 0.035 / 3e-6 = 11667 rate-limited steps, then one exact snap.
        assert!((11_666..=11_668).contains(&steps), "{steps}");
    }
}
