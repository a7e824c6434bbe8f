//! End-to-end episodic orchestration and evaluation.
//!
//! [`run_episode`] wires the stages together for one episode: per-support
//! priors, k-shot averaging, memory encoding, optional iterative refinement,
//! the attention stack, and a deterministic prediction head. [`evaluate`]
//! runs a batch (in parallel; aggregation is order-independent) and reports
//! mIoU and FB-IoU. [`ablation_suite`] re-runs the batch under the four
//! component flag settings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::attention::{
    attention_stack, AttentionProbe, AttentionStackConfig, NormAxis, ProbeStats, ProjectionSet,
    StackDiagnostics,
};
use crate::error::{Error, Result};
use crate::numerics::{cosine_map, masked_gap, minmax_norm, FeatureMap, Prototype, SoftMask};
use crate::prior::{average_priors, encode_memory, make_priors, Memory, PriorSet};
use crate::refine::{refine, RefinementTrace};

/// One annotated support sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSample {
    pub features: FeatureMap,
    pub mask: SoftMask,
}

/// One few-shot task instance: a query with ground truth plus `k` supports
/// sharing the target class.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    query_features: FeatureMap,
    query_mask: SoftMask,
    supports: Vec<SupportSample>,
    class_id: u32,
}

impl Episode {
    /// Build an episode, checking shape uniformity across all members, that
    /// both masks are binary, and that every support has foreground.
    pub fn new(
        query_features: FeatureMap,
        query_mask: SoftMask,
        supports: Vec<SupportSample>,
        class_id: u32,
    ) -> Result<Self> {
        if supports.is_empty() {
            return Err(Error::EmptyInput("episode needs at least one support"));
        }
        if query_features.height() != query_mask.height()
            || query_features.width() != query_mask.width()
        {
            return Err(Error::ShapeMismatch {
                context: "query features vs mask",
                expected: query_features.shape_string(),
                actual: query_mask.shape_string(),
            });
        }
        query_mask.require_binary()?;
        for support in &supports {
            if !support.features.same_shape(&query_features) {
                return Err(Error::ShapeMismatch {
                    context: "support features vs query",
                    expected: query_features.shape_string(),
                    actual: support.features.shape_string(),
                });
            }
            if support.mask.height() != support.features.height()
                || support.mask.width() != support.features.width()
            {
                return Err(Error::ShapeMismatch {
                    context: "support features vs mask",
                    expected: support.features.shape_string(),
                    actual: support.mask.shape_string(),
                });
            }
            support.mask.require_binary()?;
            if support.mask.weight_sum() <= 0.0 {
                return Err(Error::DegenerateMask("support mask has no foreground"));
            }
        }
        Ok(Self {
            query_features,
            query_mask,
            supports,
            class_id,
        })
    }

    pub fn query_features(&self) -> &FeatureMap {
        &self.query_features
    }

    pub fn query_mask(&self) -> &SoftMask {
        &self.query_mask
    }

    pub fn supports(&self) -> &[SupportSample] {
        &self.supports
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    /// Number of supports (`k`).
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    /// Copy of this episode truncated to the first `k` supports.
    pub fn with_shots(&self, k: usize) -> Result<Episode> {
        if k == 0 || k > self.supports.len() {
            return Err(Error::InvalidValue(format!(
                "cannot take {k} shots from an episode with {}",
                self.supports.len()
            )));
        }
        Ok(Episode {
            query_features: self.query_features.clone(),
            query_mask: self.query_mask.clone(),
            supports: self.supports[..k].to_vec(),
            class_id: self.class_id,
        })
    }
}

/// Which deterministic readout turns pipeline state into a binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionHead {
    /// Threshold the min-max normalized cosine between the fused query
    /// features and the averaged support FG prototype.
    #[default]
    Fused,
    /// Threshold the refined Disc prior directly.
    Prior,
}

fn default_imr_iterations() -> usize {
    3
}
fn default_alpha() -> f64 {
    10.0
}
fn default_epsilon() -> f64 {
    crate::numerics::DEFAULT_EPSILON
}
fn default_attention_layers() -> usize {
    4
}
fn default_threshold() -> f32 {
    0.5
}
fn default_true() -> bool {
    true
}

/// Every constant the pipeline depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Refinement pass count `n`.
    #[serde(default = "default_imr_iterations")]
    pub imr_iterations: usize,
    /// Calibration bias scale.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Cosine denominator guard.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Attention layer pairs.
    #[serde(default = "default_attention_layers")]
    pub attention_layers: usize,
    /// Memory encoder gain; 0 passes features through unchanged.
    #[serde(default)]
    pub memory_gain: f32,
    #[serde(default)]
    pub prediction_head: PredictionHead,
    /// Prediction threshold, strictly inside (0, 1).
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    /// Enables iterative memory refinement.
    #[serde(default = "default_true")]
    pub use_imr: bool,
    /// Enables support calibration in the attention stack.
    #[serde(default = "default_true")]
    pub use_scma_calibration: bool,
    /// Seed for the projection matrices.
    #[serde(default)]
    pub projection_seed: u64,
    /// Normalization axis for calibration.
    #[serde(default)]
    pub scma_norm_axis: NormAxis,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            imr_iterations: default_imr_iterations(),
            alpha: default_alpha(),
            epsilon: default_epsilon(),
            attention_layers: default_attention_layers(),
            memory_gain: 0.0,
            prediction_head: PredictionHead::default(),
            threshold: default_threshold(),
            use_imr: true,
            use_scma_calibration: true,
            projection_seed: 0,
            scma_norm_axis: NormAxis::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be finite and > 0, got {}", self.epsilon)));
        }
        if self.attention_layers == 0 {
            return Err(Error::InvalidConfig("attention_layers must be >= 1".to_string()));
        }
        if !(self.memory_gain.is_finite() && self.memory_gain >= 0.0) {
            return Err(Error::InvalidConfig(format!("memory_gain must be finite and >= 0, got {}", self.memory_gain)));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold must lie strictly in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }

    /// The attention stack view of this configuration.
    pub fn attention_config(&self) -> AttentionStackConfig {
        AttentionStackConfig {
            layers: self.attention_layers,
            alpha: self.alpha,
            epsilon: self.epsilon,
            norm_axis: self.scma_norm_axis,
        }
    }

    /// Projection set for `channels`-dimensional features at the identity
    /// width (the pipeline default).
    pub fn projections_for(&self, channels: usize) -> ProjectionSet {
        crate::attention::make_projections(channels, channels, self.projection_seed)
    }
}

/// What one episode run exposes besides the prediction.
#[derive(Debug, Clone)]
pub struct EpisodeDiagnostics {
    /// Averaged priors out of the prompt generation stage.
    pub priors: PriorSet,
    /// Disc prior after refinement (equal to `priors.disc` when refinement
    /// is disabled).
    pub refined_prior: SoftMask,
    pub trace: RefinementTrace,
    pub stack: StackDiagnostics,
    /// Set when any support had an empty background region.
    pub bg_prototype_fallback: bool,
    /// Continuous score map the fused head thresholds (empty for the prior head).
    pub fused_scores: Option<SoftMask>,
}

/// Run the full pipeline on one episode.
pub fn run_episode(
    episode: &Episode,
    cfg: &PipelineConfig,
    proj: &ProjectionSet,
) -> Result<(SoftMask, EpisodeDiagnostics)> {
    cfg.validate()?;
    let query = episode.query_features();
    if proj.channels() != query.channels() {
        return Err(Error::ShapeMismatch {
            context: "projection channels vs episode",
            expected: query.channels().to_string(),
            actual: proj.channels().to_string(),
        });
    }

    // Prompt generation: per-support priors, averaged.
    let mut sets = Vec::with_capacity(episode.shots());
    let mut bg_fallback = false;
    for support in episode.supports() {
        let computed = make_priors(query, &support.features, &support.mask, cfg.epsilon)?;
        bg_fallback |= computed.bg_prototype_fallback;
        sets.push(computed.set);
    }
    let priors = average_priors(&sets)?;

    // Memory encoding.
    let support_mems: Vec<Memory> = episode
        .supports()
        .iter()
        .map(|s| encode_memory(&s.features, &s.mask, cfg.memory_gain))
        .collect::<Result<_>>()?;
    let fg_mem = encode_memory(query, &priors.fg, cfg.memory_gain)?;
    let disc_mem = encode_memory(query, &priors.disc, cfg.memory_gain)?;

    // Iterative refinement; disabled means zero passes.
    let iterations = if cfg.use_imr { cfg.imr_iterations } else { 0 };
    let (refined_mem, refined_prior, trace) = refine(
        &disc_mem,
        &priors.disc,
        &fg_mem,
        &support_mems,
        iterations,
        cfg.epsilon,
    )?;

    // Attention over the refined memory.
    let probe = AttentionProbe::from_masks(episode.query_mask(), &refined_prior)?;
    let (fused, stack) = attention_stack(
        query,
        &refined_mem,
        &support_mems,
        proj,
        &cfg.attention_config(),
        cfg.use_scma_calibration,
        Some(&probe),
    )?;

    // Prediction head.
    let (prediction, fused_scores) = match cfg.prediction_head {
        PredictionHead::Prior => (threshold_mask(&refined_prior, cfg.threshold)?, None),
        PredictionHead::Fused => {
            let fg_proto = averaged_fg_prototype(episode)?;
            let scores = minmax_norm(&cosine_map(&fused, &fg_proto, cfg.epsilon)?);
            (threshold_mask(&scores, cfg.threshold)?, Some(scores))
        }
    };

    Ok((
        prediction,
        EpisodeDiagnostics {
            priors,
            refined_prior,
            trace,
            stack,
            bg_prototype_fallback: bg_fallback,
            fused_scores,
        },
    ))
}

/// Mean of the per-support FG prototypes.
fn averaged_fg_prototype(episode: &Episode) -> Result<Prototype> {
    let channels = episode.query_features().channels();
    let mut sums = vec![0.0f64; channels];
    for support in episode.supports() {
        let proto = masked_gap(&support.features, &support.mask)?;
        for (s, &v) in sums.iter_mut().zip(proto.data()) {
            *s += v as f64;
        }
    }
    let k = episode.shots() as f64;
    Prototype::new(sums.iter().map(|&s| (s / k) as f32).collect())
}

fn threshold_mask(scores: &SoftMask, threshold: f32) -> Result<SoftMask> {
    let data = scores
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    SoftMask::new(scores.height(), scores.width(), data)
}

/// Pixel counts of one prediction against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub class_id: u32,
    pub fg_intersection: u64,
    pub fg_union: u64,
    pub bg_intersection: u64,
    pub bg_union: u64,
}

impl EpisodeRecord {
    /// Foreground IoU of this episode alone; an empty union counts as a
    /// perfect (vacuous) match.
    pub fn iou(&self) -> f64 {
        ratio(self.fg_intersection, self.fg_union)
    }
}

fn ratio(intersection: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

fn count_masks(index: usize, class_id: u32, pred: &SoftMask, gt: &SoftMask) -> EpisodeRecord {
    let mut record = EpisodeRecord {
        index,
        class_id,
        fg_intersection: 0,
        fg_union: 0,
        bg_intersection: 0,
        bg_union: 0,
    };
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let p = p > 0.5;
        let g = g > 0.5;
        record.fg_intersection += (p && g) as u64;
        record.fg_union += (p || g) as u64;
        record.bg_intersection += (!p && !g) as u64;
        record.bg_union += (!p || !g) as u64;
    }
    record
}

/// Per-class IoU entry of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

/// Aggregated evaluation metrics.
///
/// Intersections and unions are summed per class across episodes before the
/// ratio; mIoU is the mean of the per-class ratios. FB-IoU is the mean of
/// the class-agnostic foreground and background IoU aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episode_count: usize,
    pub miou: f64,
    pub fb_iou: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub per_class: Vec<ClassMetrics>,
    pub per_episode: Vec<EpisodeRecord>,
}

/// Aggregate prediction/ground-truth pairs into a metrics report.
pub fn metrics_from_masks(items: &[(SoftMask, SoftMask, u32)]) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::EmptyInput("metrics_from_masks"));
    }
    let records = items
        .iter()
        .enumerate()
        .map(|(index, (pred, gt, class_id))| {
            if !pred.same_shape(gt) {
                return Err(Error::ShapeMismatch {
                    context: "prediction vs ground truth",
                    expected: gt.shape_string(),
                    actual: pred.shape_string(),
                });
            }
            Ok(count_masks(index, *class_id, pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_records(records))
}

fn aggregate_records(records: Vec<EpisodeRecord>) -> MetricsReport {
    let mut per_class: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    let mut fg = (0u64, 0u64);
    let mut bg = (0u64, 0u64);
    for record in &records {
        let entry = per_class.entry(record.class_id).or_insert((0, 0));
        entry.0 += record.fg_intersection;
        entry.1 += record.fg_union;
        fg.0 += record.fg_intersection;
        fg.1 += record.fg_union;
        bg.0 += record.bg_intersection;
        bg.1 += record.bg_union;
    }
    let per_class: Vec<ClassMetrics> = per_class
        .into_iter()
        .map(|(class_id, (intersection, union))| ClassMetrics {
            class_id,
            intersection,
            union,
            iou: ratio(intersection, union),
        })
        .collect();
    let miou = per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64;
    let fg_iou = ratio(fg.0, fg.1);
    let bg_iou = ratio(bg.0, bg.1);
    MetricsReport {
        episode_count: records.len(),
        miou,
        fb_iou: 0.5 * (fg_iou + bg_iou),
        fg_iou,
        bg_iou,
        per_class,
        per_episode: records,
    }
}

/// Evaluate a batch of episodes under one configuration.
///
/// Episodes are independent and run in parallel; records are kept by index
/// and reduced with integer counts, so the report is identical regardless of
/// thread count or completion order.
pub fn evaluate(
    episodes: &[Episode],
    cfg: &PipelineConfig,
    proj: &ProjectionSet,
) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    cfg.validate()?;
    let records = episodes
        .par_iter()
        .enumerate()
        .map(|(index, episode)| {
            let (prediction, _) =
                run_episode(episode, cfg, proj).map_err(|e| e.in_episode(index))?;
            Ok(count_masks(
                index,
                episode.class_id(),
                &prediction,
                episode.query_mask(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_records(records))
}

/// One row of the component ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub use_imr: bool,
    pub use_scma_calibration: bool,
    pub report: MetricsReport,
    /// mIoU difference against the first (prompt-generation only) variant.
    pub miou_delta: f64,
}

/// Reports for the four component combinations, in fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<AblationVariant>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&AblationVariant> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Evaluate the batch under {base, +refinement, +calibration, full}.
///
/// All other configuration fields are taken from `cfg` unchanged.
pub fn ablation_suite(
    episodes: &[Episode],
    cfg: &PipelineConfig,
    proj: &ProjectionSet,
) -> Result<AblationReport> {
    let combos: [(&str, bool, bool); 4] = [
        ("ppg", false, false),
        ("ppg+imr", true, false),
        ("ppg+scma", false, true),
        ("full", true, true),
    ];
    let mut variants = Vec::with_capacity(combos.len());
    let mut base_miou = 0.0;
    for (name, use_imr, use_scma) in combos {
        let variant_cfg = PipelineConfig {
            use_imr,
            use_scma_calibration: use_scma,
            ..cfg.clone()
        };
        let report = evaluate(episodes, &variant_cfg, proj)?;
        if name == "ppg" {
            base_miou = report.miou;
        }
        variants.push(AblationVariant {
            name: name.to_string(),
            use_imr,
            use_scma_calibration: use_scma,
            miou_delta: report.miou - base_miou,
            report,
        });
    }
    Ok(AblationReport { variants })
}

/// Aggregated pre/post-calibration score summary for one attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibrationSummary {
    pub layer: usize,
    pub pre_mean: f64,
    pub post_mean: f64,
    /// Percentage drop from `pre_mean` to `post_mean`.
    pub reduction_percent: f64,
    pub pair_count: u64,
}

/// Run every episode and merge the per-layer probe statistics: mean raw
/// cross-attention score between true-foreground query pixels and the
/// background positions active in memory, before and after calibration.
pub fn calibration_stats(
    episodes: &[Episode],
    cfg: &PipelineConfig,
    proj: &ProjectionSet,
) -> Result<Vec<LayerCalibrationSummary>> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("calibration_stats"));
    }
    cfg.validate()?;
    let per_episode: Vec<Vec<Option<ProbeStats>>> = episodes
        .par_iter()
        .enumerate()
        .map(|(index, episode)| {
            let (_, diagnostics) =
                run_episode(episode, cfg, proj).map_err(|e| e.in_episode(index))?;
            Ok(diagnostics
                .stack
                .layers
                .iter()
                .map(|l| l.probe)
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut merged: Vec<ProbeStats> = vec![ProbeStats::default(); cfg.attention_layers];
    for layers in &per_episode {
        for (slot, stats) in merged.iter_mut().zip(layers) {
            if let Some(stats) = stats {
                slot.merge(stats);
            }
        }
    }
    Ok(merged
        .into_iter()
        .enumerate()
        .map(|(layer, stats)| {
            let pre = stats.pre_mean();
            let post = stats.post_mean();
            let reduction = if pre.abs() > 0.0 {
                100.0 * (pre - post) / pre.abs()
            } else {
                0.0
            };
            LayerCalibrationSummary {
                layer,
                pre_mean: pre,
                post_mean: post,
                reduction_percent: reduction,
                pair_count: stats.pair_count,
            }
        })
        .collect())
}
