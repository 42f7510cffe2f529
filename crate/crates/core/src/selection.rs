//! Model selection over a grid of (number of clusters, envelope dimension)
//! pairs by BIC.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::icc::{run_icc, FitResult, IccConfig};
use crate::model::Dataset;
use crate::rng::derive_seed;

/// Free-parameter count
/// N(M,u) = Mr + Mup + Mu(u+1)/2 + (r-u)(r-u+1)/2 + u(r-u).
/// The M-1 free mixing proportions are intentionally not counted; see
/// [`free_param_count_with_pi`].
pub fn free_param_count(m: usize, u: usize, r: usize, p: usize) -> usize {
    assert!(u <= r, "u must not exceed r");
    m * r + m * u * p + m * u * (u + 1) / 2 + (r - u) * (r - u + 1) / 2 + u * (r - u)
}

/// Variant that also counts the M-1 free mixing proportions.
pub fn free_param_count_with_pi(m: usize, u: usize, r: usize, p: usize) -> usize {
    free_param_count(m, u, r, p) + (m - 1)
}

/// BIC(M,u) = -2 loglik + log(n) N(M,u); smaller is better.
pub fn bic_score(loglik: f64, m: usize, u: usize, r: usize, p: usize, n: usize) -> f64 {
    -2.0 * loglik + (n as f64).ln() * free_param_count(m, u, r, p) as f64
}

pub fn bic_score_with_pi(loglik: f64, m: usize, u: usize, r: usize, p: usize, n: usize) -> f64 {
    -2.0 * loglik + (n as f64).ln() * free_param_count_with_pi(m, u, r, p) as f64
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub icc: IccConfig,
    /// Count the M-1 mixing proportions in the BIC penalty (off by default).
    pub count_pi: bool,
    /// Keep the fitted model of every grid cell in the report.
    pub keep_fits: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            icc: IccConfig::default(),
            count_pi: false,
            keep_fits: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectionCell {
    pub m: usize,
    pub u: usize,
    pub loglik: f64,
    pub bic: f64,
    pub converged: bool,
    pub error: Option<String>,
    pub fit: Option<FitResult>,
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub grid: Vec<SelectionCell>,
    /// The (M, u) attaining the smallest BIC among non-failed cells;
    /// ties broken by smaller M, then smaller u. None if every cell failed.
    pub best: Option<(usize, usize)>,
    pub n: usize,
}

impl SelectionReport {
    pub fn best_cell(&self) -> Option<&SelectionCell> {
        let (m, u) = self.best?;
        self.grid.iter().find(|c| c.m == m && c.u == u)
    }
}

/// Fit every grid cell with an independently derived seed and score it at
/// the cell's best log-likelihood. Cell failures are recorded, not fatal.
pub fn select_model(
    data: &Dataset,
    m_grid: &[usize],
    u_grid: &[usize],
    cfg: &SelectionConfig,
) -> Result<SelectionReport> {
    if m_grid.is_empty() || u_grid.is_empty() {
        return Err(Error::InvalidArgument("selection grids must be non-empty".into()));
    }
    if let Some(&u) = u_grid.iter().find(|&&u| u > data.r()) {
        return Err(Error::InvalidArgument(format!(
            "grid dimension u={u} exceeds r={}",
            data.r()
        )));
    }
    let (n, r, p) = (data.n(), data.r(), data.p());
    let cells: Vec<(usize, usize)> = m_grid
        .iter()
        .flat_map(|&m| u_grid.iter().map(move |&u| (m, u)))
        .collect();

    let grid: Vec<SelectionCell> = cells
        .par_iter()
        .map(|&(m, u)| {
            let seed = derive_seed(cfg.icc.seed, ((m as u64) << 32) | u as u64);
            let icc = IccConfig {
                seed,
                ..cfg.icc.clone()
            };
            match run_icc(data, m, u, &icc) {
                Ok(fit) => {
                    let loglik = fit.loglik();
                    let bic = if cfg.count_pi {
                        bic_score_with_pi(loglik, m, u, r, p, n)
                    } else {
                        bic_score(loglik, m, u, r, p, n)
                    };
                    SelectionCell {
                        m,
                        u,
                        loglik,
                        bic,
                        converged: fit.converged,
                        error: None,
                        fit: cfg.keep_fits.then_some(fit),
                    }
                }
                Err(err) => SelectionCell {
                    m,
                    u,
                    loglik: f64::NAN,
                    bic: f64::NAN,
                    converged: false,
                    error: Some(err.to_string()),
                    fit: None,
                },
            }
        })
        .collect();

    let best = grid
        .iter()
        .filter(|c| c.error.is_none() && c.bic.is_finite())
        .min_by(|a, b| {
            a.bic
                .partial_cmp(&b.bic)
                .unwrap()
                .then(a.m.cmp(&b.m))
                .then(a.u.cmp(&b.u))
        })
        .map(|c| (c.m, c.u));
    Ok(SelectionReport { grid, best, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn free_param_count_reference_value() {
        // 2*10 + 2*1*20 + 2*1 + 45 + 9 = 116.
        assert_eq!(free_param_count(2, 1, 10, 20), 116);
    }

    #[test]
    fn free_param_count_u_zero() {
        for m in 1..=4 {
            for r in 1..=6 {
                assert_eq!(free_param_count(m, 0, r, 7), m * r + r * (r + 1) / 2);
            }
        }
    }

    #[test]
    fn free_param_count_full_u_single_group() {
        // Plain multivariate regression: r + rp + r(r+1)/2.
        for r in 1..=6 {
            for p in 1..=5 {
                assert_eq!(free_param_count(1, r, r, p), r + r * p + r * (r + 1) / 2);
            }
        }
    }

    /// Enumerates parameters one slot at a time: group means, coordinate
    /// entries, symmetric upper triangles, and the subspace dimension.
    fn recount(m: usize, u: usize, r: usize, p: usize) -> usize {
        let mut count = 0usize;
        for _group in 0..m {
            count += (0..r).count(); // mean entries
            for _row in 0..u {
                count += (0..p).count(); // eta entries
            }
            for i in 0..u {
                count += (i..u).count(); // Omega upper triangle
            }
        }
        for i in 0..(r - u) {
            count += (i..(r - u)).count(); // Omega0 upper triangle
        }
        count += u * (r - u); // basis degrees of freedom
        count
    }

    #[test]
    fn free_param_count_matches_enumeration() {
        let (r, p) = (10, 20);
        for m in 1..=4 {
            for u in 0..=r {
                assert_eq!(
                    free_param_count(m, u, r, p),
                    recount(m, u, r, p),
                    "mismatch at M={m}, u={u}"
                );
            }
        }
    }

    #[test]
    fn with_pi_adds_m_minus_one() {
        assert_eq!(free_param_count_with_pi(3, 1, 10, 20) - free_param_count(3, 1, 10, 20), 2);
    }

    #[test]
    fn bic_zero_penalty_at_n_one() {
        assert_relative_eq!(bic_score(0.0, 2, 1, 10, 20, 1), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bic_delta_is_log_n_times_delta_n() {
        let (r, p, n) = (10, 20, 300);
        let ll = -1234.5;
        for u in 0..r {
            let d_bic = bic_score(ll, 2, u + 1, r, p, n) - bic_score(ll, 2, u, r, p, n);
            let d_n = free_param_count(2, u + 1, r, p) as f64 - free_param_count(2, u, r, p) as f64;
            assert_relative_eq!(d_bic, (n as f64).ln() * d_n, epsilon = 1e-9);
        }
    }

    #[test]
    fn singleton_grid_selects_itself() {
        let sim = crate::simgen::generate_scenario(&crate::simgen::ScenarioConfig {
            r: 4,
            p: 3,
            ..crate::simgen::ScenarioConfig::new(2, 80, 5)
        })
        .unwrap();
        let cfg = SelectionConfig {
            icc: IccConfig {
                max_iter: 30,
                burn_in: 5,
                ..IccConfig::with_seed(2)
            },
            ..Default::default()
        };
        let report = select_model(&sim.data, &[2], &[1], &cfg).unwrap();
        assert_eq!(report.best, Some((2, 1)));
        assert_eq!(report.grid.len(), 1);
        assert!(report.grid[0].error.is_none());
    }

    #[test]
    fn empty_grid_rejected() {
        let sim = crate::simgen::generate_scenario(&crate::simgen::ScenarioConfig {
            r: 3,
            p: 2,
            ..crate::simgen::ScenarioConfig::new(2, 40, 5)
        })
        .unwrap();
        assert!(select_model(&sim.data, &[], &[1], &SelectionConfig::default()).is_err());
    }
}
