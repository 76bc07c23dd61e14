//! Scaled dot-product attention and its cross-frame variants.
//!
//! A [`TokenGrid`] stores `F` frames of `N` tokens each as one `(F·N) × d`
//! matrix, frame-major. Every variant is expressed as a list of
//! [`AttentionGroup`]s: which query rows attend to which key rows. The same
//! groups drive the inference path here and the differentiable path in the
//! model.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::spectral::{LoraLayer, SpectralLayer};

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub frames: usize,
    pub tokens: usize,
    pub values: Matrix,
}

impl TokenGrid {
    pub fn new(frames: usize, tokens: usize, values: Matrix) -> Result<Self> {
        if values.rows() != frames * tokens {
            return Err(Error::ShapeMismatch {
                op: "token_grid",
                left: (frames * tokens, values.cols()),
                right: values.shape(),
            });
        }
        Ok(Self {
            frames,
            tokens,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn frame(&self, f: usize) -> Matrix {
        self.values.row_block(f * self.tokens, self.tokens)
    }
}

/// Query projection: plain, spectrally shifted, or LoRA-adapted.
#[derive(Clone, Debug, PartialEq)]
pub enum QueryProjection {
    Dense(Matrix),
    Spectral(SpectralLayer),
    Lora(LoraLayer),
}

impl QueryProjection {
    pub fn effective_weight(&self) -> Matrix {
        match self {
            QueryProjection::Dense(w) => w.clone(),
            QueryProjection::Spectral(s) => s.effective_weight(),
            QueryProjection::Lora(l) => l
                .effective_weight()
                .expect("lora factors have consistent shapes"),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            QueryProjection::Dense(w) => w.shape(),
            QueryProjection::Spectral(s) => s.dims(),
            QueryProjection::Lora(l) => l.w0.shape(),
        }
    }
}

/// Attention with projections `W^Q`, `W^K`, `W^V` and no output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub w_q: QueryProjection,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionLayer {
    pub fn dim(&self) -> usize {
        self.w_k.rows()
    }
}

/// Query rows attending to key rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Queries of frame i, keys/values of frame 0.
    Frame,
    /// Keys/values from frame 0 and frame i−1 (frame 0 uses itself twice).
    SparseCausal,
    /// Keys/values from every frame.
    SpatioTemporal,
    /// Per spatial position, across frames.
    Temporal,
}

fn frame_rows(f: usize, n: usize) -> Vec<usize> {
    (f * n..(f + 1) * n).collect()
}

/// Groups for a self-sourced variant over `frames × tokens` rows.
pub fn attention_groups(variant: Variant, frames: usize, tokens: usize) -> Vec<AttentionGroup> {
    match variant {
        Variant::Frame => (0..frames)
            .map(|f| AttentionGroup {
                queries: frame_rows(f, tokens),
                keys: frame_rows(0, tokens),
            })
            .collect(),
        Variant::SparseCausal => (0..frames)
            .map(|f| {
                let mut keys = frame_rows(0, tokens);
                keys.extend(frame_rows(f.saturating_sub(1), tokens));
                AttentionGroup {
                    queries: frame_rows(f, tokens),
                    keys,
                }
            })
            .collect(),
        Variant::SpatioTemporal => {
            let all: Vec<usize> = (0..frames * tokens).collect();
            (0..frames)
                .map(|f| AttentionGroup {
                    queries: frame_rows(f, tokens),
                    keys: all.clone(),
                })
                .collect()
        }
        Variant::Temporal => (0..tokens)
            .map(|p| {
                let rows: Vec<usize> = (0..frames).map(|f| f * tokens + p).collect();
                AttentionGroup {
                    queries: rows.clone(),
                    keys: rows,
                }
            })
            .collect(),
    }
}

/// Every query row attends to every key row.
pub fn full_group(queries: usize, keys: usize) -> Vec<AttentionGroup> {
    vec![AttentionGroup {
        queries: (0..queries).collect(),
        keys: (0..keys).collect(),
    }]
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `Softmax(Q Kᵀ / √d)` row by row.
pub fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() == 0 {
        return Err(invalid("attention needs d > 0"));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut s = q.matmul_t(k)?;
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        for x in row.iter_mut() {
            *x *= scale;
        }
        softmax_in_place(row);
    }
    Ok(s)
}

/// `Softmax(Q Kᵀ / √d) · V`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            left: k.shape(),
            right: v.shape(),
        });
    }
    attention_weights(q, k)?.matmul(v)
}

/// Runs attention per group; returns the output and the per-group weights.
pub fn grouped_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    groups: &[AttentionGroup],
) -> Result<(Matrix, Vec<Matrix>)> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "grouped_attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if q.cols() == 0 {
        return Err(invalid("attention needs d > 0"));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut all_probs = Vec::with_capacity(groups.len());
    for g in groups {
        let mut probs = Matrix::zeros(g.queries.len(), g.keys.len());
        for (a, &qi) in g.queries.iter().enumerate() {
            let q_row = q.row(qi);
            let p_row = probs.row_mut(a);
            for (b, &ki) in g.keys.iter().enumerate() {
                p_row[b] = dot(q_row, k.row(ki)) * scale;
            }
            softmax_in_place(p_row);
            let o_row = out.row_mut(qi);
            for (b, &ki) in g.keys.iter().enumerate() {
                let p = p_row[b];
                for (o, x) in o_row.iter_mut().zip(v.row(ki)) {
                    *o += p * x;
                }
            }
        }
        all_probs.push(probs);
    }
    Ok((out, all_probs))
}

fn project(x: &Matrix, layer: &AttentionLayer) -> Result<(Matrix, Matrix, Matrix)> {
    let q = x.matmul_t(&layer.w_q.effective_weight())?;
    let k = x.matmul_t(&layer.w_k)?;
    let v = x.matmul_t(&layer.w_v)?;
    Ok((q, k, v))
}

fn self_variant(grid: &TokenGrid, layer: &AttentionLayer, variant: Variant) -> Result<TokenGrid> {
    if grid.frames == 0 {
        return Err(invalid("grid needs at least one frame"));
    }
    let (q, k, v) = project(&grid.values, layer)?;
    let groups = attention_groups(variant, grid.frames, grid.tokens);
    let (out, _) = grouped_attention(&q, &k, &v, &groups)?;
    TokenGrid::new(grid.frames, grid.tokens, out)
}

/// Every frame queries the first frame's keys and values.
pub fn frame_attention(grid: &TokenGrid, layer: &AttentionLayer) -> Result<TokenGrid> {
    self_variant(grid, layer, Variant::Frame)
}

pub fn sparse_causal_attention(grid: &TokenGrid, layer: &AttentionLayer) -> Result<TokenGrid> {
    self_variant(grid, layer, Variant::SparseCausal)
}

pub fn spatio_temporal_attention(grid: &TokenGrid, layer: &AttentionLayer) -> Result<TokenGrid> {
    self_variant(grid, layer, Variant::SpatioTemporal)
}

pub fn temporal_attention(grid: &TokenGrid, layer: &AttentionLayer) -> Result<TokenGrid> {
    self_variant(grid, layer, Variant::Temporal)
}

/// Grid tokens query the prompt embeddings.
pub fn cross_attention(grid: &TokenGrid, prompt: &Matrix, layer: &AttentionLayer) -> Result<TokenGrid> {
    if prompt.rows() == 0 {
        return Err(invalid("cross attention needs at least one prompt token"));
    }
    let q = grid.values.matmul_t(&layer.w_q.effective_weight())?;
    let k = prompt.matmul_t(&layer.w_k)?;
    let v = prompt.matmul_t(&layer.w_v)?;
    let (out, _) = grouped_attention(&q, &k, &v, &full_group(q.rows(), k.rows()))?;
    TokenGrid::new(grid.frames, grid.tokens, out)
}

/// Cross-frame schemes costed by the block-level FLOPs model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlopsVariant {
    SpatioTemporal,
    SparseCausalTemporal,
    FrameTemporal,
}

impl FlopsVariant {
    pub const ALL: [FlopsVariant; 3] = [
        FlopsVariant::SpatioTemporal,
        FlopsVariant::SparseCausalTemporal,
        FlopsVariant::FrameTemporal,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FlopsVariant::SpatioTemporal => "spatio-temporal",
            FlopsVariant::SparseCausalTemporal => "sparse-causal+temporal",
            FlopsVariant::FrameTemporal => "frame+temporal",
        }
    }
}

impl fmt::Display for FlopsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FlopsVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FlopsVariant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| invalid(format!("unknown attention variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsEstimate {
    pub variant: FlopsVariant,
    pub attention_c: u64,
    pub total: u64,
}

/// Block-level cost model: `Attention_c = 4·B′·F·H·W` times
/// `F·H` (spatio-temporal), `F + 2H` (sparse-causal + temporal) or
/// `F + H` (frame + temporal). The multipliers are reproduced as published,
/// including their H/W asymmetry.
pub fn flops_estimate(variant: FlopsVariant, b_prime: u64, f: u64, h: u64, w: u64) -> Result<FlopsEstimate> {
    if b_prime == 0 || f == 0 || h == 0 || w == 0 {
        return Err(invalid("flops dims must be positive"));
    }
    let attention_c = 4 * b_prime * f * h * w;
    let multiplier = match variant {
        FlopsVariant::SpatioTemporal => f * h,
        FlopsVariant::SparseCausalTemporal => f + 2 * h,
        FlopsVariant::FrameTemporal => f + h,
    };
    Ok(FlopsEstimate {
        variant,
        attention_c,
        total: attention_c * multiplier,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: u64,
    pub frames: u64,
    pub height: u64,
    pub width: u64,
    pub dim: u64,
}

/// Operation counts in FLOPs, one multiply-add counted as 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct OpCount {
    /// `Q Kᵀ` and weights·`V` products.
    pub attention: u64,
    /// `Q`, `K`, `V` projections.
    pub projections: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.attention + self.projections
    }
}

fn core_count(n_q: u64, n_k: u64, d: u64) -> u64 {
    // QKᵀ and AV, 2 FLOPs per multiply-add each
    2 * (2 * n_q * n_k * d)
}

/// Counts the products the implemented kernels actually execute.
pub fn exact_op_count(variant: FlopsVariant, dims: AttentionDims) -> OpCount {
    let AttentionDims {
        batch,
        frames: f,
        height,
        width,
        dim: d,
    } = dims;
    let n = height * width;
    let tokens = f * n;
    let proj = 3 * 2 * tokens * d * d;
    let temporal = OpCount {
        attention: n * core_count(f, f, d),
        projections: proj,
    };
    let spatial = match variant {
        FlopsVariant::SpatioTemporal => OpCount {
            attention: f * core_count(n, tokens, d),
            projections: proj,
        },
        FlopsVariant::SparseCausalTemporal => OpCount {
            attention: f * core_count(n, 2 * n, d),
            projections: proj,
        },
        FlopsVariant::FrameTemporal => OpCount {
            attention: f * core_count(n, n, d),
            projections: proj,
        },
    };
    let with_temporal = match variant {
        FlopsVariant::SpatioTemporal => spatial,
        _ => OpCount {
            attention: spatial.attention + temporal.attention,
            projections: spatial.projections + temporal.projections,
        },
    };
    OpCount {
        attention: batch * with_temporal.attention,
        projections: batch * with_temporal.projections,
    }
}

/// Single-pair count used as a sanity anchor: one query, one key.
pub fn single_attention_count(n_q: u64, n_k: u64, d: u64) -> u64 {
    core_count(n_q, n_k, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn layer(d: usize, seed: u64) -> AttentionLayer {
        AttentionLayer {
            w_q: QueryProjection::Dense(gaussian_matrix(d, d, 0.0, 0.5, seed)),
            w_k: gaussian_matrix(d, d, 0.0, 0.5, seed + 1),
            w_v: gaussian_matrix(d, d, 0.0, 0.5, seed + 2),
        }
    }

    fn grid(frames: usize, tokens: usize, d: usize, seed: u64) -> TokenGrid {
        TokenGrid::new(frames, tokens, gaussian_matrix(frames * tokens, d, 0.0, 1.0, seed)).unwrap()
    }

    fn repeated(frame: &Matrix, frames: usize) -> TokenGrid {
        let parts = vec![frame.clone(); frames];
        TokenGrid::new(frames, frame.rows(), Matrix::vstack(&parts).unwrap()).unwrap()
    }

    fn self_attention(frame: &Matrix, l: &AttentionLayer) -> Matrix {
        let (q, k, v) = project(frame, l).unwrap();
        scaled_dot_attention(&q, &k, &v).unwrap()
    }

    #[test]
    fn singleton_key_returns_value() {
        let q = gaussian_matrix(3, 4, 0.0, 1.0, 1);
        let k = gaussian_matrix(1, 4, 0.0, 1.0, 2);
        let v = gaussian_matrix(1, 4, 0.0, 1.0, 3);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn zero_scores_average_values() {
        let q = Matrix::zeros(2, 3);
        let k = gaussian_matrix(4, 3, 0.0, 1.0, 2);
        let v = gaussian_matrix(4, 3, 0.0, 1.0, 3);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for c in 0..3 {
            let mean = v.col(c).iter().sum::<f64>() / 4.0;
            assert!((out[(0, c)] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let q = gaussian_matrix(7, 5, 0.0, 3.0, 1);
        let k = gaussian_matrix(9, 5, 0.0, 3.0, 2);
        let w = attention_weights(&q, &k).unwrap();
        for r in 0..7 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(scaled_dot_attention(&q, &k, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn frame_attention_examples() {
        let l = layer(4, 10);
        let g1 = grid(1, 5, 4, 1);
        let out = frame_attention(&g1, &l).unwrap();
        assert_eq!(out.values, self_attention(&g1.values, &l));

        let g = grid(3, 5, 4, 2);
        let out = frame_attention(&g, &l).unwrap();
        assert_eq!(out.frame(0), self_attention(&g.frame(0), &l));

        let same = repeated(&g.frame(1), 3);
        let out = frame_attention(&same, &l).unwrap();
        assert_eq!(out.frame(0), out.frame(2));
    }

    #[test]
    fn sparse_causal_examples() {
        let l = layer(4, 20);
        let g1 = grid(1, 6, 4, 3);
        let sc = sparse_causal_attention(&g1, &l).unwrap();
        let sa = self_attention(&g1.values, &l);
        assert!(sc.values.max_abs_diff(&sa) < 1e-12);

        let same = repeated(&grid(1, 6, 4, 4).values, 4);
        let sc = sparse_causal_attention(&same, &l).unwrap();
        let fa = frame_attention(&same, &l).unwrap();
        assert!(sc.values.max_abs_diff(&fa.values) < 1e-12);

        for g in attention_groups(Variant::SparseCausal, 4, 6) {
            assert_eq!(g.keys.len(), 12);
        }
    }

    #[test]
    fn spatio_temporal_examples() {
        let l = layer(4, 30);
        let g1 = grid(1, 5, 4, 5);
        assert!(spatio_temporal_attention(&g1, &l)
            .unwrap()
            .values
            .max_abs_diff(&self_attention(&g1.values, &l))
            < 1e-12);

        let g = grid(3, 5, 4, 6);
        let out = spatio_temporal_attention(&g, &l).unwrap();
        let perm = [2, 0, 1];
        let permuted_parts: Vec<Matrix> = perm.iter().map(|&f| g.frame(f)).collect();
        let pg = TokenGrid::new(3, 5, Matrix::vstack(&permuted_parts).unwrap()).unwrap();
        let pout = spatio_temporal_attention(&pg, &l).unwrap();
        for (i, &f) in perm.iter().enumerate() {
            assert!(pout.frame(i).max_abs_diff(&out.frame(f)) < 1e-12);
        }

        let frame = grid(1, 5, 4, 7).values;
        let out = spatio_temporal_attention(&repeated(&frame, 4), &l).unwrap();
        assert!(out.frame(3).max_abs_diff(&self_attention(&frame, &l)) < 1e-12);
    }

    #[test]
    fn temporal_examples() {
        let l = layer(4, 40);
        let g1 = grid(1, 5, 4, 8);
        let out = temporal_attention(&g1, &l).unwrap();
        assert_eq!(out.values, g1.values.matmul_t(&l.w_v).unwrap());

        let zero_v = AttentionLayer {
            w_v: Matrix::zeros(4, 4),
            ..l.clone()
        };
        let out = temporal_attention(&grid(3, 5, 4, 9), &zero_v).unwrap();
        assert!(out.values.data().iter().all(|&x| x == 0.0));

        let same = repeated(&grid(1, 5, 4, 10).values, 3);
        let out = temporal_attention(&same, &l).unwrap();
        assert!(out.frame(0).max_abs_diff(&out.frame(2)) < 1e-14);
    }

    #[test]
    fn cross_attention_examples() {
        let l = layer(4, 50);
        let g = grid(2, 5, 4, 11);
        let p1 = gaussian_matrix(1, 4, 0.0, 1.0, 12);
        let out = cross_attention(&g, &p1, &l).unwrap();
        let projected = p1.matmul_t(&l.w_v).unwrap();
        for r in 0..10 {
            assert_eq!(out.values.row(r), projected.row(0));
        }
        let p2 = Matrix::vstack(&[p1.clone(), p1.clone()]).unwrap();
        assert!(cross_attention(&g, &p2, &l).unwrap().values.max_abs_diff(&out.values) < 1e-14);

        let pa = gaussian_matrix(2, 4, 0.0, 1.0, 13);
        let pb = pa.select_rows(&[1, 0]);
        let a = cross_attention(&g, &pa, &l).unwrap();
        let b = cross_attention(&g, &pb, &l).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-14);
        assert!(cross_attention(&g, &Matrix::zeros(0, 4), &l).is_err());
    }

    #[test]
    fn all_variants_agree_bitwise_at_one_frame() {
        let l = layer(6, 60);
        let g = grid(1, 7, 6, 14);
        let fa = frame_attention(&g, &l).unwrap();
        let st = spatio_temporal_attention(&g, &l).unwrap();
        assert_eq!(fa, st);
        let sc = sparse_causal_attention(&g, &l).unwrap();
        assert!(sc.values.max_abs_diff(&fa.values) < 1e-12);
    }

    #[test]
    fn duplicate_keys_leave_outputs_unchanged() {
        let q = gaussian_matrix(4, 3, 0.0, 1.0, 1);
        let k = gaussian_matrix(5, 3, 0.0, 1.0, 2);
        let v = gaussian_matrix(5, 3, 0.0, 1.0, 3);
        let once = scaled_dot_attention(&q, &k, &v).unwrap();
        let kk = Matrix::vstack(&[k.clone(), k]).unwrap();
        let vv = Matrix::vstack(&[v.clone(), v]).unwrap();
        let twice = scaled_dot_attention(&q, &kk, &vv).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn flops_table_integers() {
        let st = flops_estimate(FlopsVariant::SpatioTemporal, 2, 8, 16, 16).unwrap();
        assert_eq!(st.attention_c, 16_384);
        assert_eq!(st.total, 2_097_152);
        let ft = flops_estimate(FlopsVariant::FrameTemporal, 2, 8, 16, 16).unwrap();
        assert_eq!(ft.total, 393_216);
        let sc = flops_estimate(FlopsVariant::SparseCausalTemporal, 2, 8, 16, 16).unwrap();
        assert_eq!(sc.total, 655_360);
        assert!(flops_estimate(FlopsVariant::FrameTemporal, 0, 8, 16, 16).is_err());
        assert!("causal".parse::<FlopsVariant>().is_err());
        assert_eq!("frame+temporal".parse::<FlopsVariant>().unwrap(), FlopsVariant::FrameTemporal);
    }

    #[test]
    fn flops_frame_cheaper_than_sparse_causal() {
        for f in 1..20 {
            for h in 1..20 {
                let a = flops_estimate(FlopsVariant::FrameTemporal, 1, f, h, 3).unwrap();
                let b = flops_estimate(FlopsVariant::SparseCausalTemporal, 1, f, h, 3).unwrap();
                assert!(a.total < b.total);
            }
        }
        // F = H = 1: spatio-temporal = frame+temporal · (1·1)/(1+1)
        let st = flops_estimate(FlopsVariant::SpatioTemporal, 1, 1, 1, 5).unwrap();
        let ft = flops_estimate(FlopsVariant::FrameTemporal, 1, 1, 1, 5).unwrap();
        assert_eq!(2 * st.total, ft.total);
    }

    #[test]
    fn exact_count_anchor_and_monotone_ratio() {
        assert_eq!(single_attention_count(1, 1, 1), 4);
        let mut last = f64::INFINITY;
        for f in 1..=16 {
            let dims = AttentionDims {
                batch: 1,
                frames: f,
                height: 4,
                width: 4,
                dim: 8,
            };
            let frame = exact_op_count(FlopsVariant::FrameTemporal, dims).total() as f64;
            let st = exact_op_count(FlopsVariant::SpatioTemporal, dims).total() as f64;
            let ratio = frame / st;
            if f > 1 {
                assert!(ratio < last, "ratio not decreasing at F = {f}");
            }
            last = ratio;
        }
    }
}
