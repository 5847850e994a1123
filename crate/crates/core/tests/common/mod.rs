//! Shared test support: an independent observed-data likelihood, a BFGS
//! maximizer over it, and random PD matrix generation. Everything here is
//! deliberately written against raw parameter values rather than the
//! crate's fitting path, so it can serve as an oracle for that path.

use distimp::data::{Group, TrialDataset};
use distimp::rng::{fill_standard_normal, standard_normal, substream, uniform01, StreamDomain};
use nalgebra::{DMatrix, DVector};

/// Observed-data Gaussian log-likelihood of one arm, computed directly
/// from `(beta, sigma)` with per-subject leading blocks.
pub fn oracle_group_loglik(
    ds: &TrialDataset,
    group: Group,
    beta: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for s in ds.subjects() {
        if s.group != group {
            continue;
        }
        let k = s.n_observed();
        let block = sigma.view((0, 0), (k, k)).into_owned();
        let chol = match block.cholesky() {
            Some(c) => c,
            None => return f64::NEG_INFINITY,
        };
        let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let mu = beta.rows(0, k) * s.design_row();
        let centered =
            DVector::from_iterator(k, s.outcomes.iter().zip(mu.iter()).map(|(y, m)| y - m));
        let z = chol.l().solve_lower_triangular(&centered).unwrap();
        total += -0.5 * (k as f64 * ln2pi + logdet + z.norm_squared());
    }
    total
}

/// Unconstrained parameter vector for one arm: the coefficient entries
/// followed by the lower Cholesky factor of the covariance with
/// log-diagonal.
pub struct GroupParam {
    pub n_visits: usize,
    pub n_covariates: usize,
}

impl GroupParam {
    pub fn dim(&self) -> usize {
        let t = self.n_visits;
        t * (self.n_covariates + 1) + t * (t + 1) / 2
    }

    pub fn unpack(&self, theta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let t = self.n_visits;
        let d = self.n_covariates + 1;
        let beta = DMatrix::from_row_slice(t, d, &theta[..t * d]);
        let mut l = DMatrix::<f64>::zeros(t, t);
        let mut idx = t * d;
        for i in 0..t {
            for j in 0..=i {
                l[(i, j)] = if i == j {
                    theta[idx].exp()
                } else {
                    theta[idx]
                };
                idx += 1;
            }
        }
        let sigma = &l * l.transpose();
        (beta, sigma)
    }

    pub fn pack(&self, beta: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Vec<f64> {
        let t = self.n_visits;
        let d = self.n_covariates + 1;
        let mut theta = Vec::with_capacity(self.dim());
        for i in 0..t {
            for j in 0..d {
                theta.push(beta[(i, j)]);
            }
        }
        let l = sigma.clone().cholesky().expect("pd sigma").l();
        for i in 0..t {
            for j in 0..=i {
                theta.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
            }
        }
        theta
    }
}

/// Generic BFGS minimizer with central-difference gradients and Armijo
/// backtracking. Returns the argmin.
pub fn bfgs_minimize(
    f: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    max_iter: usize,
    grad_tol: f64,
) -> Vec<f64> {
    let n = start.len();
    let fd_step = 1e-5;
    let grad = |x: &[f64]| -> DVector<f64> {
        let mut g = DVector::zeros(n);
        let mut xp = x.to_vec();
        for i in 0..n {
            let h = fd_step * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    };
    let mut x = DVector::from_column_slice(start);
    let mut fx = f(x.as_slice());
    let mut g = grad(x.as_slice());
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        if g.amax() < grad_tol {
            break;
        }
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            // Reset a corrupted approximation.
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let mut step = 1.0;
        let slope = g.dot(&dir);
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &x + step * &dir;
            let fc = f(cand.as_slice());
            if fc.is_finite() && fc <= fx + 1e-4 * step * slope {
                let g_new = grad(cand.as_slice());
                let s = step * &dir;
                let y = &g_new - &g;
                let sy = s.dot(&y);
                if sy > 1e-12 {
                    // BFGS inverse update.
                    let rho = 1.0 / sy;
                    let id = DMatrix::<f64>::identity(n, n);
                    let left = &id - rho * &s * y.transpose();
                    let right = &id - rho * &y * s.transpose();
                    h_inv = &left * h_inv * &right + rho * &s * s.transpose();
                }
                x = cand;
                fx = fc;
                g = g_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    x.as_slice().to_vec()
}

/// Maximizes the one-arm observed-data log-likelihood by BFGS from a
/// neutral start (per-visit means and variances), independent of the
/// sequential-factorization estimator.
pub fn oracle_max_loglik(ds: &TrialDataset, group: Group) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = ds.n_visits();
    let p = ds.n_covariates();
    let param = GroupParam {
        n_visits: t,
        n_covariates: p,
    };
    // Start: visit-wise observed means in the intercept column, identity
    // scaled by visit-wise variances.
    let mut beta0 = DMatrix::<f64>::zeros(t, p + 1);
    let mut sigma0 = DMatrix::<f64>::identity(t, t);
    for k in 0..t {
        let vals: Vec<f64> = ds
            .subjects()
            .iter()
            .filter(|s| s.group == group && s.n_observed() > k)
            .map(|s| s.outcomes[k])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        beta0[(k, 0)] = mean;
        sigma0[(k, k)] = var.max(0.1);
    }
    let start = param.pack(&beta0, &sigma0);
    let objective = |theta: &[f64]| -> f64 {
        let (beta, sigma) = param.unpack(theta);
        -oracle_group_loglik(ds, group, &beta, &sigma)
    };
    let solution = bfgs_minimize(&objective, &start, 600, 1e-7 * ds.n_subjects() as f64);
    param.unpack(&solution)
}

/// Random PD covariance `A A' + eps I` with entries from a seeded stream.
pub fn random_pd(dim: usize, seed: u64, index: u64) -> DMatrix<f64> {
    let mut rng = substream(seed, StreamDomain::Oracle, index);
    let a = DMatrix::from_fn(dim, dim, |_, _| standard_normal(&mut rng));
    &a * a.transpose() + DMatrix::<f64>::identity(dim, dim) * 0.1
}

/// Random mean vector.
pub fn random_mean(dim: usize, seed: u64, index: u64) -> DVector<f64> {
    let mut rng = substream(seed, StreamDomain::Oracle, index | (1 << 40));
    let mut out = vec![0.0; dim];
    fill_standard_normal(&mut rng, &mut out);
    DVector::from_vec(out) * 2.0
}

/// Random nonempty proper subset of 0..dim.
pub fn random_subset(dim: usize, seed: u64, index: u64) -> Vec<usize> {
    let mut rng = substream(seed, StreamDomain::Oracle, index | (1 << 41));
    loop {
        let subset: Vec<usize> = (0..dim).filter(|_| uniform01(&mut rng) < 0.5).collect();
        if !subset.is_empty() && subset.len() < dim {
            return subset;
        }
    }
}
