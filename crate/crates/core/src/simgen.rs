//! Synthetic scenario generation for the benchmark suite.
//!
//! The generator draws a shared basis from the eigenvectors of a random
//! positive-definite matrix, group means at 1, 2, ..., coordinate matrices
//! from chi-square variates (group k uses k degrees of freedom), a 1x1
//! chi-square(1) material covariance per group at u = 1, an immaterial
//! covariance A A^T with A of independent N(1,1) entries, and predictors of
//! independent N(1,1) entries. Responses follow the envelope model with
//! Gaussian errors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, EnvelopeBasis, GroupParams, LabelVector, MixtureParams};
use crate::rng::rng_from;

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub u: usize,
    pub proportions: Vec<f64>,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Defaults: r=10, p=20, u=1; proportions (0.4, 0.6) for two groups,
    /// uniform otherwise.
    pub fn new(m: usize, n: usize, seed: u64) -> Self {
        let proportions = if m == 2 {
            vec![0.4, 0.6]
        } else {
            vec![1.0 / m as f64; m]
        };
        Self {
            m,
            n,
            r: 10,
            p: 20,
            u: 1,
            proportions,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("M and n must be positive".into()));
        }
        if self.u > self.r {
            return Err(Error::InvalidArgument(format!(
                "u={} exceeds r={}",
                self.u, self.r
            )));
        }
        if self.proportions.len() != self.m {
            return Err(Error::InvalidArgument(
                "proportions length must equal M".into(),
            ));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.proportions.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidArgument(
                "proportions must be positive and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// Generated data together with the generating parameters.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: Dataset,
    pub truth: MixtureParams,
}

/// Deterministic group sizes by largest remainder, so e.g. proportions
/// (0.4, 0.6) at n = 300 give exactly (120, 180).
pub fn group_sizes(n: usize, proportions: &[f64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = proportions.iter().map(|&p| (n as f64 * p) as usize).collect();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(k, &p)| (k, n as f64 * p - sizes[k] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut leftover = n - sizes.iter().sum::<usize>();
    for (k, _) in remainders {
        if leftover == 0 {
            break;
        }
        sizes[k] += 1;
        leftover -= 1;
    }
    sizes
}

fn chi_square(df: f64, rng: &mut ChaCha8Rng) -> f64 {
    let dist = ChiSquared::new(df).expect("positive df");
    rng.sample(dist)
}

/// Chi-square draw with a tiny floor so covariance blocks stay invertible.
fn chi_square_pd(df: f64, rng: &mut ChaCha8Rng) -> f64 {
    for _ in 0..64 {
        let v = chi_square(df, rng);
        if v > 1e-10 {
            return v;
        }
    }
    1e-10
}

pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let (m, n, r, p, u) = (cfg.m, cfg.n, cfg.r, cfg.p, cfg.u);
    let mut rng = rng_from(cfg.seed);

    // Basis from the eigenvectors of a seeded positive-definite matrix.
    let mut basis = None;
    for _ in 0..5 {
        let w = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut pd = &w * w.transpose() + DMatrix::identity(r, r) * r as f64;
        linalg::symmetrize(&mut pd);
        let (_, vecs) = linalg::sym_eigen_desc(&pd);
        let gamma = vecs.columns(0, u).into_owned();
        let gamma0 = vecs.columns(u, r - u).into_owned();
        if let Ok(b) = EnvelopeBasis::new(gamma, gamma0) {
            basis = Some(b);
            break;
        }
    }
    let basis = basis.ok_or_else(|| Error::Singular("scenario basis generation".into()))?;

    // Immaterial covariance Omega0 = A A^T, A of N(1,1) entries.
    let mut omega0 = DMatrix::zeros(r - u, r - u);
    for _ in 0..5 {
        let a = DMatrix::from_fn(r - u, r - u, |_, _| {
            1.0 + rng.sample::<f64, _>(StandardNormal)
        });
        let mut candidate = &a * a.transpose();
        linalg::symmetrize(&mut candidate);
        if r - u == 0 || candidate.clone().cholesky().is_some() {
            omega0 = candidate;
            break;
        }
    }

    let mut groups = Vec::with_capacity(m);
    for k in 1..=m {
        let mu = DVector::from_element(r, k as f64);
        let eta = DMatrix::from_fn(u, p, |_, _| chi_square(k as f64, &mut rng));
        // At u = 1 every group uses a chi-square(1) variance; larger u takes
        // a diagonal of chi-square(k) variates per group.
        let omega = if u == 1 {
            DMatrix::from_element(1, 1, chi_square_pd(1.0, &mut rng))
        } else {
            DMatrix::from_diagonal(&DVector::from_fn(u, |_, _| {
                chi_square_pd(k as f64, &mut rng)
            }))
        };
        groups.push(GroupParams::new(mu, eta, omega)?);
    }
    let truth = MixtureParams::new(cfg.proportions.clone(), groups, basis, omega0)?;

    // Predictors: independent N(1,1).
    let x = DMatrix::from_fn(n, p, |_, _| 1.0 + rng.sample::<f64, _>(StandardNormal));

    // Labels in blocks matching the deterministic group sizes.
    let sizes = group_sizes(n, &cfg.proportions);
    let mut labels = Vec::with_capacity(n);
    for (k, &sz) in sizes.iter().enumerate() {
        labels.extend(std::iter::repeat(k + 1).take(sz));
    }

    // Responses: mu_k + Gamma eta_k x + Gamma L_k z + Gamma0 L0 z0.
    let chol_omega: Vec<DMatrix<f64>> = (0..m)
        .map(|k| {
            truth.groups[k]
                .omega
                .clone()
                .cholesky()
                .expect("validated PD")
                .l()
        })
        .collect();
    let chol_omega0 = if r - u > 0 {
        truth
            .omega0
            .clone()
            .cholesky()
            .expect("validated PD")
            .l()
    } else {
        DMatrix::zeros(0, 0)
    };

    let mut y = DMatrix::zeros(n, r);
    for i in 0..n {
        let k = labels[i] - 1;
        let xi = x.row(i).transpose();
        let mut yi = truth.conditional_mean(k, &xi);
        if u > 0 {
            let z = DVector::from_fn(u, |_, _| rng.sample(StandardNormal));
            yi += truth.basis.gamma() * (&chol_omega[k] * z);
        }
        if r - u > 0 {
            let z0 = DVector::from_fn(r - u, |_, _| rng.sample(StandardNormal));
            yi += truth.basis.gamma0() * (&chol_omega0 * z0);
        }
        y.row_mut(i).copy_from(&yi.transpose());
    }

    let data = Dataset::new(x, y, Some(LabelVector::new(labels, m)?))?;
    Ok(SimDataset { data, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_two_group_sizes_are_120_180() {
        let cfg = ScenarioConfig::new(2, 300, 7);
        let sim = generate_scenario(&cfg).unwrap();
        let counts = sim.data.true_labels().unwrap().counts(2);
        assert_eq!(counts, vec![120, 180]);
    }

    #[test]
    fn three_groups_same_size() {
        let cfg = ScenarioConfig::new(3, 300, 7);
        let sim = generate_scenario(&cfg).unwrap();
        let counts = sim.data.true_labels().unwrap().counts(3);
        assert_eq!(counts, vec![100, 100, 100]);
    }

    #[test]
    fn group_sizes_largest_remainder() {
        assert_eq!(group_sizes(10, &[0.34, 0.33, 0.33]), vec![4, 3, 3]);
        assert_eq!(group_sizes(301, &[0.4, 0.6]), vec![120, 181]);
    }

    #[test]
    fn sigma_satisfies_envelope_decomposition() {
        let cfg = ScenarioConfig::new(2, 50, 3);
        let sim = generate_scenario(&cfg).unwrap();
        let p_mat = sim.truth.basis.projection();
        let q_mat = DMatrix::identity(10, 10) - &p_mat;
        for k in 0..2 {
            let sigma = sim.truth.sigma(k);
            let recomposed = &p_mat * &sigma * &p_mat + &q_mat * &sigma * &q_mat;
            assert!((&sigma - recomposed).amax() < 1e-12);
        }
    }

    #[test]
    fn identical_seed_identical_dataset() {
        let cfg = ScenarioConfig::new(2, 80, 99);
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        assert_eq!(a.data.x(), b.data.x());
        assert_eq!(a.data.y(), b.data.y());
        assert_eq!(a.truth.basis.gamma(), b.truth.basis.gamma());
        // And a different seed changes the draw.
        let c = generate_scenario(&ScenarioConfig::new(2, 80, 100)).unwrap();
        assert_ne!(a.data.y(), c.data.y());
    }

    #[test]
    fn truth_basis_orthonormal_and_omegas_positive() {
        let sim = generate_scenario(&ScenarioConfig::new(3, 60, 21)).unwrap();
        assert!(linalg::orthonormality_defect(sim.truth.basis.gamma()) < 1e-10);
        assert!(linalg::orthonormality_defect(sim.truth.basis.gamma0()) < 1e-10);
        for g in &sim.truth.groups {
            assert!(g.omega[(0, 0)] > 0.0);
        }
    }

    #[test]
    fn group_moments_match_truth_at_large_n() {
        let cfg = ScenarioConfig::new(2, 3000, 11);
        let sim = generate_scenario(&cfg).unwrap();
        let labels = sim.data.true_labels().unwrap().clone();
        for k in 1..=2 {
            let idx = labels.group_indices(k);
            let nk = idx.len() as f64;
            let beta = sim.truth.beta(k - 1);
            // Mean of Y - beta X should approach mu_k within 3 SE per
            // coordinate.
            let mut acc = DVector::zeros(10);
            for &i in &idx {
                acc += sim.data.y_row(i) - &beta * sim.data.x_row(i);
            }
            acc /= nk;
            let sigma = sim.truth.sigma(k - 1);
            for j in 0..10 {
                let se = (sigma[(j, j)] / nk).sqrt();
                let diff = (acc[j] - sim.truth.groups[k - 1].mu[j]).abs();
                assert!(diff < 4.0 * se + 1e-6, "group {k} coord {j}: {diff} vs se {se}");
            }
            // Covariance of the envelope scores approaches Omega_k.
            let gamma = sim.truth.basis.gamma();
            let mut scores = Vec::with_capacity(idx.len());
            for &i in &idx {
                let resid = sim.data.y_row(i)
                    - &sim.truth.groups[k - 1].mu
                    - &beta * sim.data.x_row(i);
                scores.push((gamma.transpose() * resid)[0]);
            }
            let mean: f64 = scores.iter().sum::<f64>() / nk;
            let var: f64 = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (nk - 1.0);
            let omega = sim.truth.groups[k - 1].omega[(0, 0)];
            let se_var = omega * (2.0 / nk).sqrt();
            assert!(
                (var - omega).abs() < 4.0 * se_var + 1e-9,
                "group {k}: var {var} vs omega {omega}"
            );
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ScenarioConfig::new(2, 100, 1);
        cfg.proportions = vec![0.7, 0.7];
        assert!(generate_scenario(&cfg).is_err());
        let mut cfg = ScenarioConfig::new(2, 100, 1);
        cfg.u = 11;
        assert!(generate_scenario(&cfg).is_err());
    }
}
