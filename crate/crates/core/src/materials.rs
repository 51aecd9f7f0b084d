//! Single-field three-state material model.
//!
//! γ = 1 is fluid 1, γ = 0 is fluid 2 and intermediate values are the solid
//! wall. Each fluid gets its own inverse permeability, the two being mirror
//! images in γ, so at mid-band both fluids are blocked. The Péclet number
//! dips towards the solid value around γ = 0.5 through a Gaussian bump.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationSettings {
    pub alpha_max: f64,
    pub q: f64,
    pub s: f64,
    pub pe_f1: f64,
    pub pe_f2: f64,
    pub pe_s: f64,
}

impl InterpolationSettings {
    pub fn validate(&self) -> Result<()> {
        // alpha_max = 0 is accepted: it switches the flow penalization off,
        // which the degenerate optimizer checks rely on.
        if !(self.alpha_max >= 0.0 && self.alpha_max.is_finite()) {
            return Err(Error::param("alpha_max", "must be finite and non-negative"));
        }
        for (name, v) in [
            ("q", self.q),
            ("s", self.s),
            ("Pe_f1", self.pe_f1),
            ("Pe_f2", self.pe_f2),
            ("Pe_s", self.pe_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be positive"));
            }
        }
        Ok(())
    }
}

#[inline]
fn clamp_unit(gamma: f64) -> f64 {
    debug_assert!(
        (-1e-9..=1.0 + 1e-9).contains(&gamma),
        "design value {gamma} outside [0, 1]"
    );
    gamma.clamp(0.0, 1.0)
}

/// Inverse permeability seen by fluid 1; vanishes at γ = 1.
#[inline]
pub fn alpha1(gamma: f64, m: &InterpolationSettings) -> f64 {
    let g = clamp_unit(gamma);
    m.alpha_max * m.q * (1.0 - g) / (m.q + g)
}

/// Inverse permeability seen by fluid 2; `alpha2(γ) == alpha1(1 − γ)`.
#[inline]
pub fn alpha2(gamma: f64, m: &InterpolationSettings) -> f64 {
    let g = clamp_unit(gamma);
    m.alpha_max * m.q * g / (m.q + 1.0 - g)
}

#[inline]
pub fn d_alpha1(gamma: f64, m: &InterpolationSettings) -> f64 {
    let g = clamp_unit(gamma);
    -m.alpha_max * m.q * (1.0 + m.q) / ((m.q + g) * (m.q + g))
}

#[inline]
pub fn d_alpha2(gamma: f64, m: &InterpolationSettings) -> f64 {
    let g = clamp_unit(gamma);
    let den = m.q + 1.0 - g;
    m.alpha_max * m.q * (1.0 + m.q) / (den * den)
}

#[inline]
pub fn peclet(gamma: f64, m: &InterpolationSettings) -> f64 {
    let g = clamp_unit(gamma);
    let bump = (-(g - 0.5) * (g - 0.5) / (2.0 * m.s * m.s)).exp();
    (m.pe_s - 0.5 * (m.pe_f1 + m.pe_f2)) * bump + m.pe_f2 + (m.pe_f1 - m.pe_f2) * g
}

#[inline]
pub fn d_peclet(gamma: f64, m: &InterpolationSettings) -> f64 {
    let g = clamp_unit(gamma);
    let bump = (-(g - 0.5) * (g - 0.5) / (2.0 * m.s * m.s)).exp();
    (m.pe_s - 0.5 * (m.pe_f1 + m.pe_f2)) * bump * (-(g - 0.5) / (m.s * m.s)) + (m.pe_f1 - m.pe_f2)
}

/// Per-cell material coefficients for one design field.
#[derive(Clone, Debug, Default)]
pub struct MaterialFields {
    pub alpha: [Vec<f64>; 2],
    pub peclet: Vec<f64>,
}

impl MaterialFields {
    pub fn from_design(gamma: &[f64], m: &InterpolationSettings) -> Self {
        MaterialFields {
            alpha: [
                gamma.iter().map(|&g| alpha1(g, m)).collect(),
                gamma.iter().map(|&g| alpha2(g, m)).collect(),
            ],
            peclet: gamma.iter().map(|&g| peclet(g, m)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper() -> InterpolationSettings {
        InterpolationSettings {
            alpha_max: 1e4,
            q: 0.01,
            s: 0.1,
            pe_f1: 700.0,
            pe_f2: 700.0,
            pe_s: 350.0,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn alpha_end_points() {
        let m = paper();
        assert_eq!(alpha1(1.0, &m), 0.0);
        assert!(rel(alpha1(0.0, &m), 1e4) < 1e-12);
        assert_eq!(alpha2(0.0, &m), 0.0);
        assert!(rel(alpha2(1.0, &m), 1e4) < 1e-12);
        // 1e4 * 0.005 / 0.51
        assert!(rel(alpha1(0.5, &m), 98.039_215_686_274_5) < 1e-12);
        assert!(rel(alpha2(0.5, &m), 98.039_215_686_274_5) < 1e-12);
    }

    #[test]
    fn peclet_points() {
        let m = paper();
        assert_eq!(peclet(0.5, &m), 350.0);
        let tail = 700.0 - 350.0 * (-12.5f64).exp();
        assert!(rel(peclet(0.0, &m), tail) < 1e-12);
        assert!(rel(peclet(1.0, &m), tail) < 1e-12);
        assert!((peclet(0.0, &m) - 699.998_70).abs() < 5e-6);
        assert_eq!(d_peclet(0.5, &m), 0.0);
    }

    #[test]
    fn alpha1_slope_at_one() {
        let m = paper();
        // d/dγ [q(1−γ)/(q+γ)] = −q(1+q)/(q+γ)², so at γ = 1 the slope is −α_max·q/(1+q).
        let expected = -1e4 * 0.01 / 1.01;
        assert!(rel(d_alpha1(1.0, &m), expected) < 1e-12);
        assert!((d_alpha1(1.0, &m) + 99.0099).abs() < 1e-4);
    }

    #[test]
    fn mid_band_blocks_both_fluids() {
        let m = paper();
        let floor = m.alpha_max * m.q / (2.0 * (m.q + 1.0));
        assert!(alpha1(0.5, &m) > floor);
        assert!(alpha2(0.5, &m) > floor);
    }

    proptest! {
        #[test]
        fn mirror_symmetry(g in 0.0f64..=1.0) {
            let m = paper();
            let (a, b) = (alpha1(g, &m), alpha2(1.0 - g, &m));
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            prop_assert!((d_alpha2(g, &m) + d_alpha1(1.0 - g, &m)).abs() <= 1e-12 * d_alpha1(1.0 - g, &m).abs());
        }

        #[test]
        fn only_pure_states_are_free_flowing(g in 1e-6f64..=(1.0 - 1e-6)) {
            let m = paper();
            prop_assert!(alpha1(g, &m).min(alpha2(g, &m)) > 0.0);
        }

        #[test]
        fn derivatives_match_central_differences(
            g in 0.01f64..0.99,
            pe1 in 100.0f64..2000.0,
            pe2 in 100.0f64..2000.0,
        ) {
            let m = InterpolationSettings { pe_f1: pe1, pe_f2: pe2, ..paper() };
            let h = 1e-6;
            let fd = |f: &dyn Fn(f64) -> f64| (f(g + h) - f(g - h)) / (2.0 * h);
            let checks = [
                (d_alpha1(g, &m), fd(&|x| alpha1(x, &m))),
                (d_alpha2(g, &m), fd(&|x| alpha2(x, &m))),
                (d_peclet(g, &m), fd(&|x| peclet(x, &m))),
            ];
            for (exact, approx) in checks {
                let scale = exact.abs().max(1.0);
                prop_assert!((exact - approx).abs() <= 1e-6 * scale, "{} vs {}", exact, approx);
            }
        }
    }
}
