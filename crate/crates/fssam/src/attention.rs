//! Support-calibrated memory attention.
//!
//! A stack of attention layers fuses query features with the refined Disc
//! memory. Each layer runs plain self-attention on the running query
//! features, then cross-attention against the memory. In calibrated mode the
//! cross-attention scores receive a non-positive bias wherever a memory
//! position looks unlike the support foreground: the scaled-dot-product row
//! profile and a support-prototype cosine profile are each normalized to
//! [0, 1], summed with -1, and entries that remain negative are scaled by
//! `alpha` and added back onto the raw scores. Softmax then starves the
//! suppressed positions of attention mass.
//!
//! Projections stand in for learned parameters: identity matrices when the
//! projection width equals the channel count (the default, keeping analytic
//! cases exact), seeded orthonormal-column matrices otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot_f64, masked_gap, minmax_inplace, norm_f64, row_softmax, AttentionMatrix, FeatureMap,
    SoftMask,
};
use crate::prior::Memory;

/// Axis over which the raw cross-attention scores are min-max normalized
/// before calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// Normalize each query row independently (default): calibration compares
    /// each pixel's affinity profile against the support profile.
    #[default]
    Row,
    /// Normalize over the whole score matrix.
    Global,
}

/// Knobs of the attention stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStackConfig {
    /// Number of (self, cross) layer pairs.
    pub layers: usize,
    /// Calibration bias scale; 0 disables calibration.
    pub alpha: f64,
    /// Cosine denominator guard.
    pub epsilon: f64,
    /// Normalization axis for the raw scores entering calibration.
    pub norm_axis: NormAxis,
}

impl Default for AttentionStackConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            alpha: 10.0,
            epsilon: crate::numerics::DEFAULT_EPSILON,
            norm_axis: NormAxis::Row,
        }
    }
}

impl AttentionStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidValue(
                "attention stack needs at least one layer".to_string(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "epsilon must be finite and positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Query, key, value and output projection matrices.
///
/// The key projection is a single matrix shared by the query memory and the
/// support memories, so both land in the same key space. The whole set is
/// regenerable bit-exactly from `(seed, channels, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    channels: usize,
    width: usize,
    seed: u64,
    /// `channels x width`, row-major.
    theta_q: Vec<f32>,
    theta_k: Vec<f32>,
    theta_v: Vec<f32>,
    /// `width x channels`, row-major.
    theta_out: Vec<f32>,
}

impl ProjectionSet {
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Projection width `d`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn theta_q(&self) -> &[f32] {
        &self.theta_q
    }

    pub fn theta_k(&self) -> &[f32] {
        &self.theta_k
    }

    pub fn theta_v(&self) -> &[f32] {
        &self.theta_v
    }

    pub fn theta_out(&self) -> &[f32] {
        &self.theta_out
    }

    /// Copy of this set with the output projection zeroed. With a zero
    /// output projection the attention result contributes nothing and the
    /// skip connection returns the input features unchanged; used to verify
    /// that contract.
    pub fn zeroed_output(&self) -> ProjectionSet {
        ProjectionSet {
            theta_out: vec![0.0; self.theta_out.len()],
            ..self.clone()
        }
    }
}

/// Build the projection set for `channels`-dimensional features and
/// projection width `width`.
///
/// `width == channels` yields identity matrices regardless of seed. Other
/// widths draw seeded pseudo-random matrices whose columns are
/// orthonormalized; the same `(seed, channels, width)` always reproduces the
/// same bits.
pub fn make_projections(channels: usize, width: usize, seed: u64) -> ProjectionSet {
    assert!(channels >= 1 && width >= 1, "projection dims must be positive");
    if channels == width {
        let identity = identity_matrix(channels);
        return ProjectionSet {
            channels,
            width,
            seed,
            theta_q: identity.clone(),
            theta_k: identity.clone(),
            theta_v: identity.clone(),
            theta_out: identity,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_q = orthonormal_columns(channels, width, &mut rng);
    let theta_k = orthonormal_columns(channels, width, &mut rng);
    let theta_v = orthonormal_columns(channels, width, &mut rng);
    let theta_out = orthonormal_columns(width, channels, &mut rng);
    ProjectionSet {
        channels,
        width,
        seed,
        theta_q,
        theta_k,
        theta_v,
        theta_out,
    }
}

fn identity_matrix(n: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Random `rows x cols` matrix with columns orthonormalized by modified
/// Gram-Schmidt. Columns beyond the row dimension (or residuals that vanish)
/// fall back to the normalized raw draw, or a canonical basis vector as the
/// last resort.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut raw = vec![0.0f64; rows * cols];
    for v in raw.iter_mut() {
        *v = rng.gen::<f64>() * 2.0 - 1.0;
    }
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|r| raw[r * cols + j]).collect();
        for prev in &columns {
            let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= proj * pi;
            }
        }
        let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            v = (0..rows).map(|r| raw[r * cols + j]).collect();
            norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        if norm < 1e-12 {
            v = vec![0.0; rows];
            v[j % rows] = 1.0;
            norm = 1.0;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        columns.push(v);
    }
    let mut out = vec![0.0f32; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out[r * cols + j] = v as f32;
        }
    }
    out
}

/// Multiply pixel rows (`n x c`) by a projection (`c x d`), f64-accumulated.
fn project_rows(data: &[f32], n: usize, c: usize, theta: &[f32], d: usize) -> Vec<f32> {
    debug_assert_eq!(data.len(), n * c);
    debug_assert_eq!(theta.len(), c * d);
    let mut out = vec![0.0f32; n * d];
    let mut acc = vec![0.0f64; d];
    for p in 0..n {
        let row = &data[p * c..(p + 1) * c];
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (ci, &x) in row.iter().enumerate() {
            let x = x as f64;
            let trow = &theta[ci * d..(ci + 1) * d];
            for (a, &t) in acc.iter_mut().zip(trow) {
                *a += x * t as f64;
            }
        }
        for (o, &a) in out[p * d..(p + 1) * d].iter_mut().zip(acc.iter()) {
            *o = a as f32;
        }
    }
    out
}

/// Project a channel vector (`c`) through a `c x d` matrix.
fn project_vector(v: &[f32], theta: &[f32], d: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; d];
    for (ci, &x) in v.iter().enumerate() {
        let x = x as f64;
        let trow = &theta[ci * d..(ci + 1) * d];
        for (a, &t) in acc.iter_mut().zip(trow) {
            *a += x * t as f64;
        }
    }
    acc.iter().map(|&a| a as f32).collect()
}

/// Scaled dot-product scores between projected rows: `q k^T / sqrt(d)`.
///
/// Errors if a score overflows single precision (possible only for inputs
/// near the `f32` range limits).
pub fn scaled_dot_scores(
    q: &[f32],
    k: &[f32],
    n_q: usize,
    n_k: usize,
    d: usize,
) -> Result<AttentionMatrix> {
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut data = vec![0.0f32; n_q * n_k];
    for i in 0..n_q {
        let qi = &q[i * d..(i + 1) * d];
        let dst = &mut data[i * n_k..(i + 1) * n_k];
        for (j, o) in dst.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *o = (dot_f64(qi, kj) * inv_sqrt_d) as f32;
        }
    }
    AttentionMatrix::new(n_q, n_k, data)
}

/// Cosine similarity of one projected prototype against every projected key
/// row, with the epsilon guard in the denominator.
pub fn prototype_key_similarity(proto: &[f32], k: &[f32], n: usize, d: usize, epsilon: f64) -> Vec<f32> {
    let proto_norm = norm_f64(proto);
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let kj = &k[j * d..(j + 1) * d];
        let denom = proto_norm * norm_f64(kj) + epsilon;
        out.push((dot_f64(proto, kj) / denom) as f32);
    }
    out
}

/// Apply support calibration to raw cross-attention scores.
///
/// `support_norm` must already be min-max normalized over its entries. The
/// raw scores are normalized per `axis`, each entry gets the bias
/// `alpha * min(norm_scores + support_norm - 1, 0)` added, so no score ever
/// increases and entries whose support similarity is 1 are untouched.
/// `alpha == 0` returns the raw scores unchanged.
pub fn calibrate_scores(
    raw: &AttentionMatrix,
    support_norm: &[f32],
    alpha: f64,
    axis: NormAxis,
) -> Result<AttentionMatrix> {
    if support_norm.len() != raw.cols() {
        return Err(Error::ShapeMismatch {
            context: "calibrate_scores support row",
            expected: raw.cols().to_string(),
            actual: support_norm.len().to_string(),
        });
    }
    if alpha == 0.0 {
        return Ok(raw.clone());
    }
    let mut normed = raw.data().to_vec();
    match axis {
        NormAxis::Row => {
            for r in 0..raw.rows() {
                minmax_inplace(&mut normed[r * raw.cols()..(r + 1) * raw.cols()]);
            }
        }
        NormAxis::Global => minmax_inplace(&mut normed),
    }
    let cols = raw.cols();
    let data: Vec<f32> = raw
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let shifted = normed[idx] as f64 + (support_norm[idx % cols] as f64 - 1.0);
            let bias = shifted.min(0.0);
            (v as f64 + alpha * bias) as f32
        })
        .collect();
    AttentionMatrix::new(raw.rows(), raw.cols(), data)
}

/// Selection masks for score diagnostics: which query rows and memory
/// columns to average pre/post-calibration scores over.
#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub rows: Vec<bool>,
    pub cols: Vec<bool>,
}

impl AttentionProbe {
    /// Rows from the binary ground-truth foreground; columns where the
    /// refined prior is active on a ground-truth background pixel, i.e. the
    /// background positions wrongly present in memory.
    pub fn from_masks(query_gt: &SoftMask, refined_prior: &SoftMask) -> Result<AttentionProbe> {
        if !query_gt.same_shape(refined_prior) {
            return Err(Error::ShapeMismatch {
                context: "probe masks",
                expected: query_gt.shape_string(),
                actual: refined_prior.shape_string(),
            });
        }
        let rows = query_gt.data().iter().map(|&v| v > 0.5).collect();
        let cols = query_gt
            .data()
            .iter()
            .zip(refined_prior.data())
            .map(|(&gt, &prior)| prior - gt > 0.0)
            .collect();
        Ok(AttentionProbe { rows, cols })
    }
}

/// Sums of pre- and post-calibration raw scores over the probed
/// (row, column) pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProbeStats {
    pub pre_sum: f64,
    pub post_sum: f64,
    pub pair_count: u64,
}

impl ProbeStats {
    pub fn pre_mean(&self) -> f64 {
        if self.pair_count == 0 {
            0.0
        } else {
            self.pre_sum / self.pair_count as f64
        }
    }

    pub fn post_mean(&self) -> f64 {
        if self.pair_count == 0 {
            0.0
        } else {
            self.post_sum / self.pair_count as f64
        }
    }

    pub fn merge(&mut self, other: &ProbeStats) {
        self.pre_sum += other.pre_sum;
        self.post_sum += other.post_sum;
        self.pair_count += other.pair_count;
    }
}

fn probe_sums(pre: &AttentionMatrix, post: &AttentionMatrix, probe: &AttentionProbe) -> ProbeStats {
    let mut stats = ProbeStats::default();
    for (i, &row_on) in probe.rows.iter().enumerate() {
        if !row_on {
            continue;
        }
        let pre_row = pre.row(i);
        let post_row = post.row(i);
        for (j, &col_on) in probe.cols.iter().enumerate() {
            if !col_on {
                continue;
            }
            stats.pre_sum += pre_row[j] as f64;
            stats.post_sum += post_row[j] as f64;
            stats.pair_count += 1;
        }
    }
    stats
}

/// One cross-attention result with its diagnostics.
#[derive(Debug, Clone)]
pub struct CrossAttentionOutput {
    pub features: FeatureMap,
    /// Prototype-vs-key cosine sweeps performed (one per support).
    pub extra_similarity_passes: usize,
    pub probe: Option<ProbeStats>,
}

/// Extra prototype-vs-key cosine sweeps one calibrated cross-attention layer
/// performs for `shots` supports. Must match the observed counter.
pub fn extra_similarity_count(shots: usize) -> usize {
    shots
}

fn check_attention_shapes(query: &FeatureMap, memory: &Memory, proj: &ProjectionSet) -> Result<()> {
    if !query.same_shape(&memory.features) {
        return Err(Error::ShapeMismatch {
            context: "query vs memory features",
            expected: query.shape_string(),
            actual: memory.features.shape_string(),
        });
    }
    if query.channels() != proj.channels() {
        return Err(Error::ShapeMismatch {
            context: "features vs projection channels",
            expected: proj.channels().to_string(),
            actual: query.channels().to_string(),
        });
    }
    Ok(())
}

fn check_probe(probe: Option<&AttentionProbe>, n: usize) -> Result<()> {
    if let Some(p) = probe {
        if p.rows.len() != n || p.cols.len() != n {
            return Err(Error::ShapeMismatch {
                context: "attention probe length",
                expected: n.to_string(),
                actual: format!("{} / {}", p.rows.len(), p.cols.len()),
            });
        }
    }
    Ok(())
}

/// Finish an attention op: softmax the scores, aggregate values, project out
/// and add the skip connection.
fn attend_and_fuse(
    input: &FeatureMap,
    scores: &AttentionMatrix,
    values: &[f32],
    proj: &ProjectionSet,
) -> Result<FeatureMap> {
    let n = input.pixel_count();
    let c = input.channels();
    let d = proj.width();
    let weights = row_softmax(scores);
    let mut context = vec![0.0f32; n * d];
    for i in 0..n {
        let wrow = weights.row(i);
        let mut acc = vec![0.0f64; d];
        for (j, &w) in wrow.iter().enumerate() {
            let w = w as f64;
            let vrow = &values[j * d..(j + 1) * d];
            for (a, &v) in acc.iter_mut().zip(vrow) {
                *a += w * v as f64;
            }
        }
        for (o, a) in context[i * d..(i + 1) * d].iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    let projected = project_rows(&context, n, d, proj.theta_out(), c);
    let data: Vec<f32> = input
        .data()
        .iter()
        .zip(&projected)
        .map(|(&x, &y)| x + y)
        .collect();
    FeatureMap::new(input.height(), input.width(), c, data)
}

/// Plain memory cross-attention: scaled dot-product scores between projected
/// query rows and projected memory keys, softmax aggregation of projected
/// memory values, output projection and skip connection. This is the
/// uncalibrated baseline; it never looks at supports.
pub fn memory_cross_attention(
    query: &FeatureMap,
    memory: &Memory,
    proj: &ProjectionSet,
    probe: Option<&AttentionProbe>,
) -> Result<CrossAttentionOutput> {
    check_attention_shapes(query, memory, proj)?;
    let n = query.pixel_count();
    check_probe(probe, n)?;
    let c = query.channels();
    let d = proj.width();
    let q = project_rows(query.data(), n, c, proj.theta_q(), d);
    let k = project_rows(memory.features.data(), n, c, proj.theta_k(), d);
    let v = project_rows(memory.features.data(), n, c, proj.theta_v(), d);
    let scores = scaled_dot_scores(&q, &k, n, n, d)?;
    let stats = probe.map(|p| probe_sums(&scores, &scores, p));
    Ok(CrossAttentionOutput {
        features: attend_and_fuse(query, &scores, &v, proj)?,
        extra_similarity_passes: 0,
        probe: stats,
    })
}

/// Support-calibrated cross-attention.
///
/// On top of the plain path, each support memory is pooled under its mask
/// into a prototype, projected through the shared key projection, and scored
/// against the memory keys by cosine (one sweep per support, averaged). The
/// averaged profile calibrates the raw scores via [`calibrate_scores`]
/// before softmax.
pub fn calibrated_cross_attention(
    query: &FeatureMap,
    memory: &Memory,
    supports: &[Memory],
    proj: &ProjectionSet,
    cfg: &AttentionStackConfig,
    probe: Option<&AttentionProbe>,
) -> Result<CrossAttentionOutput> {
    check_attention_shapes(query, memory, proj)?;
    if supports.is_empty() {
        return Err(Error::MissingSupport);
    }
    cfg.validate()?;
    let n = query.pixel_count();
    check_probe(probe, n)?;
    let c = query.channels();
    let d = proj.width();
    let q = project_rows(query.data(), n, c, proj.theta_q(), d);
    let k = project_rows(memory.features.data(), n, c, proj.theta_k(), d);
    let v = project_rows(memory.features.data(), n, c, proj.theta_v(), d);

    let raw = scaled_dot_scores(&q, &k, n, n, d)?;

    // Pool each support under its mask, project through the shared key
    // projection, score against the keys, then average the k profiles.
    let mut passes = 0usize;
    let mut sums = vec![0.0f64; n];
    for support in supports {
        if support.features.channels() != c {
            return Err(Error::ShapeMismatch {
                context: "support memory channel count",
                expected: c.to_string(),
                actual: support.features.channels().to_string(),
            });
        }
        let pooled = masked_gap(&support.features, &support.prior)?;
        let projected = project_vector(pooled.data(), proj.theta_k(), d);
        let sim = prototype_key_similarity(&projected, &k, n, d, cfg.epsilon);
        passes += 1;
        for (s, &x) in sums.iter_mut().zip(&sim) {
            *s += x as f64;
        }
    }
    let k_count = supports.len() as f64;
    let mut support_row: Vec<f32> = sums.iter().map(|&s| (s / k_count) as f32).collect();
    minmax_inplace(&mut support_row);

    let calibrated = calibrate_scores(&raw, &support_row, cfg.alpha, cfg.norm_axis)?;
    let stats = probe.map(|p| probe_sums(&raw, &calibrated, p));

    Ok(CrossAttentionOutput {
        features: attend_and_fuse(query, &calibrated, &v, proj)?,
        extra_similarity_passes: passes,
        probe: stats,
    })
}

/// Plain self-attention with skip connection: queries, keys and values all
/// come from the same feature map.
pub fn self_attention(features: &FeatureMap, proj: &ProjectionSet) -> Result<FeatureMap> {
    if features.channels() != proj.channels() {
        return Err(Error::ShapeMismatch {
            context: "features vs projection channels",
            expected: proj.channels().to_string(),
            actual: features.channels().to_string(),
        });
    }
    let n = features.pixel_count();
    let c = features.channels();
    let d = proj.width();
    let q = project_rows(features.data(), n, c, proj.theta_q(), d);
    let k = project_rows(features.data(), n, c, proj.theta_k(), d);
    let v = project_rows(features.data(), n, c, proj.theta_v(), d);
    let scores = scaled_dot_scores(&q, &k, n, n, d)?;
    attend_and_fuse(features, &scores, &v, proj)
}

/// Per-layer diagnostics of an attention stack run.
#[derive(Debug, Clone, Default)]
pub struct StackDiagnostics {
    pub layers: Vec<LayerDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct LayerDiagnostics {
    pub extra_similarity_passes: usize,
    pub probe: Option<ProbeStats>,
}

/// Derive the self-attention seed for one layer from the base seed.
fn layer_seed(base: u64, layer: usize) -> u64 {
    base.wrapping_add((layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Run the attention stack: `layers` pairs of self-attention over the
/// running query features followed by cross-attention against the memory
/// (calibrated, or the plain baseline when `calibrated` is false).
///
/// Cross-attention layers share `proj`; each self-attention layer draws a
/// fresh projection set from a seed derived from `proj`'s (identical
/// identity matrices when the width equals the channel count).
pub fn attention_stack(
    query: &FeatureMap,
    memory: &Memory,
    supports: &[Memory],
    proj: &ProjectionSet,
    cfg: &AttentionStackConfig,
    calibrated: bool,
    probe: Option<&AttentionProbe>,
) -> Result<(FeatureMap, StackDiagnostics)> {
    cfg.validate()?;
    let mut features = query.clone();
    let mut diagnostics = StackDiagnostics::default();
    for layer in 0..cfg.layers {
        let self_proj = make_projections(proj.channels(), proj.width(), layer_seed(proj.seed(), layer));
        features = self_attention(&features, &self_proj)?;
        let out = if calibrated {
            calibrated_cross_attention(&features, memory, supports, proj, cfg, probe)?
        } else {
            memory_cross_attention(&features, memory, proj, probe)?
        };
        features = out.features;
        diagnostics.layers.push(LayerDiagnostics {
            extra_similarity_passes: out.extra_similarity_passes,
            probe: out.probe,
        });
    }
    Ok((features, diagnostics))
}
