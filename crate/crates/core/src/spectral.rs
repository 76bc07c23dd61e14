//! Spectral-shift reparameterization of weight matrices.
//!
//! A weight `W = U diag(σ) Vᵀ` is frozen in its singular vectors and values;
//! only a shift vector `δ` is trained, giving the effective weight
//! `U diag(ReLU(σ + δ)) Vᵀ`. The shift is penalized by `Σ σ_k δ_k²`, which
//! holds large singular values closer to their pre-trained values than
//! small ones. A LoRA layer and parameter accounting are provided for
//! comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Default coefficient of the spectral-shift penalty.
pub const DEFAULT_LAMBDA: f64 = 1e-3;
/// Coefficient preset for multi-attribute edits.
pub const MULTI_ATTRIBUTE_LAMBDA: f64 = 5e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralLayer {
    pub name: String,
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
    pub delta: Vec<f64>,
}

impl SpectralLayer {
    /// Factorizes `w` and starts with a zero shift.
    pub fn decompose(name: impl Into<String>, w: &Matrix) -> Result<Self> {
        let svd = linalg::svd(w)?;
        let rank = svd.s.len();
        Ok(Self {
            name: name.into(),
            u: svd.u,
            sigma: svd.s,
            v: svd.v,
            delta: vec![0.0; rank],
        })
    }

    /// Builds a layer from stored factors, checking shapes and the σ ordering.
    pub fn from_parts(
        name: impl Into<String>,
        u: Matrix,
        sigma: Vec<f64>,
        v: Matrix,
        delta: Vec<f64>,
    ) -> Result<Self> {
        let r = sigma.len();
        if u.cols() != r || v.cols() != r || delta.len() != r || r != u.rows().min(v.rows()) {
            return Err(Error::ShapeMismatch {
                op: "spectral_layer",
                left: u.shape(),
                right: v.shape(),
            });
        }
        if sigma.iter().any(|s| *s < 0.0 || !s.is_finite())
            || sigma.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::InvalidArgument(
                "sigma must be finite, non-negative and non-increasing".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            u,
            sigma,
            v,
            delta,
        })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `(M, N)` of the represented weight.
    pub fn dims(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    /// `ReLU(σ_k + δ_k)` for every component.
    pub fn shifted_singular_values(&self) -> Vec<f64> {
        self.sigma
            .iter()
            .zip(&self.delta)
            .map(|(s, d)| (s + d).max(0.0))
            .collect()
    }

    pub fn effective_weight(&self) -> Matrix {
        linalg::scaled_outer(&self.u, &self.shifted_singular_values(), &self.v)
            .expect("spectral layer factors have consistent shapes")
    }

    /// Chain rule from `∂L/∂Ŵ` to `∂L/∂δ`.
    ///
    /// Component `k` is `u_kᵀ g v_k` gated by `σ_k + δ_k > 0`; the ReLU
    /// subgradient at exactly zero is taken as zero.
    pub fn delta_gradient(&self, g: &Matrix) -> Result<Vec<f64>> {
        let (m, n) = self.dims();
        if g.shape() != (m, n) {
            return Err(Error::ShapeMismatch {
                op: "delta_gradient",
                left: (m, n),
                right: g.shape(),
            });
        }
        // g · V gives N-side projections for all components at once.
        let gv = g.matmul(&self.v)?;
        let mut out = vec![0.0; self.rank()];
        for (k, slot) in out.iter_mut().enumerate() {
            if self.sigma[k] + self.delta[k] <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for i in 0..m {
                acc += self.u[(i, k)] * gv[(i, k)];
            }
            *slot = acc;
        }
        Ok(out)
    }

    /// `Σ_k σ_k δ_k²` for this layer.
    pub fn regularizer(&self) -> f64 {
        self.sigma
            .iter()
            .zip(&self.delta)
            .map(|(s, d)| s * d * d)
            .sum()
    }

    /// Gradient of [`Self::regularizer`]: `2 σ_k δ_k`.
    pub fn regularizer_gradient(&self) -> Vec<f64> {
        self.sigma
            .iter()
            .zip(&self.delta)
            .map(|(s, d)| 2.0 * s * d)
            .collect()
    }

    /// `|δ_1| / σ_1`, the relative drift of the leading singular value.
    pub fn top_relative_drift(&self) -> f64 {
        match (self.sigma.first(), self.delta.first()) {
            (Some(&s), Some(&d)) if s > 0.0 => d.abs() / s,
            _ => 0.0,
        }
    }
}

/// Spectral-shift penalty summed over layers.
pub fn spectral_regularizer<'a>(layers: impl IntoIterator<Item = &'a SpectralLayer>) -> f64 {
    layers.into_iter().map(SpectralLayer::regularizer).sum()
}

/// Additive low-rank adapter `W₀ + B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub name: String,
    pub w0: Matrix,
    /// `rank × N`
    pub a: Matrix,
    /// `M × rank`
    pub b: Matrix,
    pub rank: usize,
}

impl LoraLayer {
    /// Gaussian-initialized `A`, zero `B`, so the update starts at zero.
    pub fn new(name: impl Into<String>, w0: Matrix, rank: usize, seed: u64) -> Result<Self> {
        let (m, n) = w0.shape();
        if rank == 0 || rank > m.min(n) {
            return Err(Error::InvalidArgument(format!(
                "lora rank {rank} must be in 1..={}",
                m.min(n)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = linalg::gaussian_matrix_with(rank, n, 0.0, 1.0 / (n as f64).sqrt(), &mut rng);
        Ok(Self {
            name: name.into(),
            w0,
            a,
            b: Matrix::zeros(m, rank),
            rank,
        })
    }

    pub fn from_parts(
        name: impl Into<String>,
        w0: Matrix,
        a: Matrix,
        b: Matrix,
    ) -> Result<Self> {
        let (m, n) = w0.shape();
        let rank = a.rows();
        if a.cols() != n || b.shape() != (m, rank) || rank > m.min(n) {
            return Err(Error::ShapeMismatch {
                op: "lora_layer",
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(Self {
            name: name.into(),
            w0,
            a,
            b,
            rank,
        })
    }

    pub fn effective_weight(&self) -> Result<Matrix> {
        let delta = self.b.matmul(&self.a)?;
        self.w0.add(&delta)
    }

    /// `(∂L/∂A, ∂L/∂B)` from `∂L/∂W`.
    pub fn gradients(&self, g: &Matrix) -> Result<(Matrix, Matrix)> {
        if g.shape() != self.w0.shape() {
            return Err(Error::ShapeMismatch {
                op: "lora_gradients",
                left: self.w0.shape(),
                right: g.shape(),
            });
        }
        let grad_a = self.b.t_matmul(g)?;
        let grad_b = g.matmul_t(&self.a)?;
        Ok((grad_a, grad_b))
    }

    pub fn tunable_count(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerBudget {
    pub rows: usize,
    pub cols: usize,
    pub full: usize,
    pub save: usize,
    pub lora: usize,
}

/// Tunable-parameter counts for full tuning, spectral shifts and LoRA.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBudget {
    pub full: usize,
    pub save: usize,
    pub lora: usize,
    pub lora_rank: usize,
    pub layers: Vec<LayerBudget>,
}

impl ParamBudget {
    /// `full / save` as an exact ratio when it divides evenly.
    pub fn reduction_ratio(&self) -> f64 {
        self.full as f64 / self.save as f64
    }
}

pub fn count_params(layer_dims: &[(usize, usize)], lora_rank: usize) -> Result<ParamBudget> {
    let mut layers = Vec::with_capacity(layer_dims.len());
    for &(m, n) in layer_dims {
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!("layer dims must be positive, got {m}x{n}")));
        }
        layers.push(LayerBudget {
            rows: m,
            cols: n,
            full: m * n,
            save: m.min(n),
            lora: lora_rank * (m + n),
        });
    }
    Ok(ParamBudget {
        full: layers.iter().map(|l| l.full).sum(),
        save: layers.iter().map(|l| l.save).sum(),
        lora: layers.iter().map(|l| l.lora).sum(),
        lora_rank,
        layers,
    })
}
