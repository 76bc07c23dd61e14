//! Linear spectral generators and a Monte-Carlo check of the singular-value
//! deviation bound.
//!
//! A data matrix `D` (`N × M`, one sample per column) is projected onto its
//! left singular basis, `C = Uᵀ D`. Each row of `C` is summarized by its
//! population mean `m_i` and variance `v_i`; new samples draw every spectral
//! coefficient independently from `Normal(m_i, v_i)` and map back through `U`.
//!
//! The bound on `|σ_n(D) − E σ_n(D_g)|` is evaluated in two forms: the
//! short form `2|m_n Σ_{i≠n} m_i| / (σ_n(D) + σ_n(D_g))` and the long form
//! that carries an extra factor of the sample count.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};

/// Minimum Monte-Carlo trials accepted by [`verify_bound`].
pub const MIN_TRIALS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralStats {
    /// `N × r` left singular basis of the data.
    pub u: Matrix,
    /// Per-component means.
    pub m: Vec<f64>,
    /// Per-component population variances.
    pub v: Vec<f64>,
}

impl SpectralStats {
    pub fn rank(&self) -> usize {
        self.m.len()
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }
}

/// Row-wise mean and population (1/M) variance.
pub fn row_moments(c: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = c.cols() as f64;
    let mut means = Vec::with_capacity(c.rows());
    let mut vars = Vec::with_capacity(c.rows());
    for r in 0..c.rows() {
        let row = c.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

pub fn fit_lsg(d: &Matrix) -> Result<SpectralStats> {
    if d.cols() < 2 {
        return Err(invalid("fitting needs at least two samples (columns)"));
    }
    let svd = linalg::svd(d)?;
    let c = svd.u.t_matmul(d)?;
    let (m, v) = row_moments(&c);
    Ok(SpectralStats { u: svd.u, m, v })
}

fn coefficients(stats: &SpectralStats, rng: &mut impl Rng) -> Vec<f64> {
    stats
        .m
        .iter()
        .zip(&stats.v)
        .map(|(&m, &v)| {
            let z: f64 = StandardNormal.sample(rng);
            m + v.sqrt() * z
        })
        .collect()
}

/// One generated sample `d_g = U c_g`.
pub fn lsg_sample(stats: &SpectralStats, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lsg_sample_with(stats, &mut rng)
}

pub fn lsg_sample_with(stats: &SpectralStats, rng: &mut impl Rng) -> Vec<f64> {
    let c = coefficients(stats, rng);
    (0..stats.dim())
        .map(|i| linalg::dot(stats.u.row(i), &c))
        .collect()
}

/// `cols` generated samples as the columns of an `N × cols` matrix.
pub fn lsg_sample_matrix(stats: &SpectralStats, cols: usize, rng: &mut impl Rng) -> Matrix {
    let r = stats.rank();
    let mut coeffs = Matrix::zeros(r, cols);
    for j in 0..cols {
        let c = coefficients(stats, rng);
        for i in 0..r {
            coeffs[(i, j)] = c[i];
        }
    }
    stats
        .u
        .matmul(&coeffs)
        .expect("basis and coefficients agree on rank")
}

/// `2 · n_factor · |m_n · Σ_{i≠n} m_i| / (σ_n(D) + σ_n(D_g))`, `n` 0-based.
pub fn theorem1_bound(m: &[f64], sigma_d: f64, sigma_dg: f64, n: usize, n_factor: usize) -> Result<f64> {
    if n >= m.len() {
        return Err(invalid(format!("index {n} out of range for {} means", m.len())));
    }
    let denom = sigma_d + sigma_dg;
    if denom <= 0.0 {
        return Err(invalid("bound denominator sigma_d + sigma_dg must be positive"));
    }
    let off: f64 = m
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != n)
        .map(|(_, x)| x)
        .sum();
    Ok(2.0 * n_factor as f64 * (m[n] * off).abs() / denom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundRow {
    /// 1-based component index.
    pub n: usize,
    pub sigma_d: f64,
    pub sigma_dg_mean: f64,
    pub deviation: f64,
    pub bound_eq4: f64,
    pub holds_eq4: bool,
    pub bound_proof: f64,
    pub holds_proof: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub trials: usize,
    /// Factor applied in the long-form bound (the generated column count).
    pub proof_factor: usize,
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn all_hold_eq4(&self) -> bool {
        self.rows.iter().all(|r| r.holds_eq4)
    }

    pub fn all_hold_proof(&self) -> bool {
        self.rows.iter().all(|r| r.holds_proof)
    }

    pub fn count_eq4(&self) -> usize {
        self.rows.iter().filter(|r| r.holds_eq4).count()
    }

    pub fn count_proof(&self) -> usize {
        self.rows.iter().filter(|r| r.holds_proof).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# singular-value deviation bound: {} trials, long-form factor N := M = {}",
            self.trials, self.proof_factor
        );
        let _ = writeln!(
            s,
            "{:>4} {:>14} {:>14} {:>14} {:>14} {:>5} {:>14} {:>5}",
            "n", "sigma_d", "sigma_dg", "deviation", "bound_eq4", "ok", "bound_proof", "ok"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>4} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e} {:>5} {:>14.6e} {:>5}",
                r.n,
                r.sigma_d,
                r.sigma_dg_mean,
                r.deviation,
                r.bound_eq4,
                r.holds_eq4,
                r.bound_proof,
                r.holds_proof
            );
        }
        let _ = writeln!(
            s,
            "# holds: eq4 {}/{}, proof {}/{}",
            self.count_eq4(),
            self.rows.len(),
            self.count_proof(),
            self.rows.len()
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,deviation,bound_eq4,holds_eq4,bound_proof,holds_proof\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{},{:e},{}",
                r.n, r.deviation, r.bound_eq4, r.holds_eq4, r.bound_proof, r.holds_proof
            );
        }
        s
    }
}

/// Mean singular values of `trials` generated `N × M` matrices.
pub fn mean_generated_singular_values(stats: &SpectralStats, cols: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let r = stats.rank().min(cols);
    let mut acc = vec![0.0; r];
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let dg = lsg_sample_matrix(stats, cols, &mut rng);
        let s = linalg::svd(&dg)?.s;
        for (a, x) in acc.iter_mut().zip(s) {
            *a += x;
        }
    }
    Ok(acc.into_iter().map(|a| a / trials as f64).collect())
}

/// Fits `d`, generates `trials` matrices with as many columns as `d`, and
/// evaluates both bound forms for every index.
pub fn verify_bound(d: &Matrix, trials: usize, seed: u64) -> Result<BoundReport> {
    if trials < MIN_TRIALS {
        return Err(invalid(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    let stats = fit_lsg(d)?;
    let sigma_d = linalg::svd(d)?.s;
    let cols = d.cols();
    let sigma_dg = mean_generated_singular_values(&stats, cols, trials, seed)?;
    let mut rows = Vec::with_capacity(sigma_dg.len());
    for (n, (&sd, &sg)) in sigma_d.iter().zip(&sigma_dg).enumerate() {
        let deviation = (sd - sg).abs();
        let (bound_eq4, bound_proof) = if sd + sg > 0.0 {
            (
                theorem1_bound(&stats.m, sd, sg, n, 1)?,
                theorem1_bound(&stats.m, sd, sg, n, cols)?,
            )
        } else {
            (0.0, 0.0)
        };
        rows.push(BoundRow {
            n: n + 1,
            sigma_d: sd,
            sigma_dg_mean: sg,
            deviation,
            bound_eq4,
            holds_eq4: deviation <= bound_eq4,
            bound_proof,
            holds_proof: deviation <= bound_proof,
        });
    }
    if rows.iter().any(|r| !r.deviation.is_finite()) {
        return Err(Error::NonFinite("bound report".into()));
    }
    Ok(BoundReport {
        trials,
        proof_factor: cols,
        rows,
    })
}

/// Default verification family: `dim × samples`, columns assigned round-robin
/// to `components` Gaussian clusters with `Normal(0, 1)` centres and
/// within-cluster standard deviation `spread`.
pub fn mixture_dataset(dim: usize, samples: usize, components: usize, spread: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = linalg::gaussian_matrix_with(components, dim, 0.0, 1.0, &mut rng);
    let noise = linalg::gaussian_matrix_with(dim, samples, 0.0, spread, &mut rng);
    Matrix::from_fn(dim, samples, |i, j| centres[(j % components, i)] + noise[(i, j)])
}

pub const DEFAULT_FAMILY_DIM: usize = 32;
pub const DEFAULT_FAMILY_SAMPLES: usize = 64;
pub const DEFAULT_FAMILY_COMPONENTS: usize = 4;
pub const DEFAULT_FAMILY_SPREAD: f64 = 0.1;
pub const DEFAULT_FAMILY_SEED: u64 = 20_231_025;

pub fn default_family() -> Matrix {
    mixture_dataset(
        DEFAULT_FAMILY_DIM,
        DEFAULT_FAMILY_SAMPLES,
        DEFAULT_FAMILY_COMPONENTS,
        DEFAULT_FAMILY_SPREAD,
        DEFAULT_FAMILY_SEED,
    )
}
