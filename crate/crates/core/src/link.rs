//! Inverse link functions for binary models: logit, probit, complementary
//! log-log. All saturate smoothly and never return exactly 0 or 1.

use serde::{Deserialize, Serialize};

use crate::numeric::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Logit,
    Probit,
    Cloglog,
}

/// Smallest probability returned; keeps inverse weights finite.
const FLOOR: f64 = 1e-12;

/// Maps a linear predictor into (0,1) with overflow-safe formulas.
pub fn inverse_link(link: LinkKind, eta: f64) -> f64 {
    let raw = match link {
        LinkKind::Logit => {
            if eta >= 0.0 {
                1.0 / (1.0 + (-eta).exp())
            } else {
                let e = eta.exp();
                e / (1.0 + e)
            }
        }
        LinkKind::Probit => normal_cdf(eta),
        LinkKind::Cloglog => -(-eta.exp()).exp_m1(),
    };
    raw.clamp(FLOOR, 1.0 - FLOOR)
}

impl std::str::FromStr for LinkKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logit" => Ok(LinkKind::Logit),
            "probit" => Ok(LinkKind::Probit),
            "cloglog" => Ok(LinkKind::Cloglog),
            other => Err(format!("unknown link {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn midpoints() {
        assert_abs_diff_eq!(inverse_link(LinkKind::Logit, 0.0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(inverse_link(LinkKind::Probit, 0.0), 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(
            inverse_link(LinkKind::Cloglog, 0.0),
            1.0 - (-1.0f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn extreme_eta_stays_inside_unit_interval() {
        for link in [LinkKind::Logit, LinkKind::Probit, LinkKind::Cloglog] {
            for eta in [-1e4, -50.0, 50.0, 1e4] {
                let p = inverse_link(link, eta);
                assert!(p > 0.0 && p < 1.0, "{link:?} at {eta} gave {p}");
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_eta(a in -5.0f64..3.0, b in -5.0f64..3.0) {
            // Strict monotonicity away from the saturated tails, where the
            // floating-point clamp makes neighbors merely non-decreasing.
            prop_assume!((a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            for link in [LinkKind::Logit, LinkKind::Probit, LinkKind::Cloglog] {
                prop_assert!(inverse_link(link, lo) < inverse_link(link, hi));
            }
        }

        #[test]
        fn non_decreasing_everywhere(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            for link in [LinkKind::Logit, LinkKind::Probit, LinkKind::Cloglog] {
                prop_assert!(inverse_link(link, lo) <= inverse_link(link, hi));
            }
        }

        #[test]
        fn logit_symmetry(eta in -30.0f64..30.0) {
            let s = inverse_link(LinkKind::Logit, eta) + inverse_link(LinkKind::Logit, -eta);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
