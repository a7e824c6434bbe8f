//! Iterative memory refinement.
//!
//! The Disc memory has few background features but incomplete foreground;
//! the FG memory has the opposite problem. Each refinement pass measures how
//! similar every FG-memory position is to the Disc prototype (candidate FG)
//! and to the support prototypes (known FG), suppresses candidates the
//! support does not corroborate, and uses the surviving weights to pull FG
//! content into the Disc memory and its prior. The pass count is a
//! parameter; each pass costs one prototype-vs-map cosine per prototype, so
//! `n` passes over `k` supports perform `n * (k + 1)` cosine sweeps.

use crate::error::{Error, Result};
use crate::numerics::{cosine_map, masked_gap, minmax_norm, FeatureMap, SoftMask};
use crate::prior::Memory;

/// What one refinement pass saw and produced.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// Fuse weight per pixel after background suppression.
    pub weight: SoftMask,
    /// Support similarity map (averaged over supports, normalized).
    pub support_similarity: SoftMask,
    /// The refined Disc prior after this pass.
    pub prior: SoftMask,
    /// Set when the pass short-circuited on an all-zero Disc prior.
    pub degenerate: bool,
    /// Prototype-vs-map cosine sweeps performed in this pass.
    pub cosine_passes: usize,
}

/// Per-iteration records of a full refinement run.
#[derive(Debug, Clone, Default)]
pub struct RefinementTrace {
    pub iterations: Vec<IterationRecord>,
}

impl RefinementTrace {
    /// Total cosine sweeps observed across all passes.
    pub fn cosine_passes(&self) -> usize {
        self.iterations.iter().map(|it| it.cosine_passes).sum()
    }
}

/// Result of a single refinement pass.
#[derive(Debug, Clone)]
pub struct RefineStep {
    pub memory: Memory,
    pub prior: SoftMask,
    pub record: IterationRecord,
}

/// Predicted number of prototype-vs-map cosine sweeps for `iterations`
/// refinement passes under `shots` supports. Must match the observed count
/// in [`RefinementTrace::cosine_passes`].
pub fn similarity_op_count(iterations: usize, shots: usize) -> usize {
    iterations * (shots + 1)
}

/// Background suppression: `relu(weight + (support - 1))`.
///
/// Keeps only regions similar to both the Disc prototype and the support
/// foreground; never increases any entry.
pub fn bg_suppress(weight: &SoftMask, support: &SoftMask) -> Result<SoftMask> {
    if !weight.same_shape(support) {
        return Err(Error::ShapeMismatch {
            context: "bg_suppress operands",
            expected: weight.shape_string(),
            actual: support.shape_string(),
        });
    }
    let data = weight
        .data()
        .iter()
        .zip(support.data())
        .map(|(&a, &s)| (a + (s - 1.0)).max(0.0))
        .collect();
    SoftMask::new(weight.height(), weight.width(), data)
}

/// Pointwise convex blend `base + w * (target - base)` of two masks.
///
/// Written in this form so the result stays inside `[min(base, target),
/// max(base, target)]` pointwise and equals `base` bit-exactly wherever the
/// operands agree. Arithmetic runs in `f64`.
pub fn blend_masks(weight: &SoftMask, target: &SoftMask, base: &SoftMask) -> Result<SoftMask> {
    if !weight.same_shape(target) || !weight.same_shape(base) {
        return Err(Error::ShapeMismatch {
            context: "blend_masks operands",
            expected: weight.shape_string(),
            actual: format!("{} / {}", target.shape_string(), base.shape_string()),
        });
    }
    let data = weight
        .data()
        .iter()
        .zip(target.data().iter().zip(base.data()))
        .map(|(&w, (&t, &b))| {
            let (w, t, b) = (w as f64, t as f64, b as f64);
            (b + w * (t - b)) as f32
        })
        .collect();
    SoftMask::new(weight.height(), weight.width(), data)
}

/// Same convex blend, broadcast over the channels of two feature maps.
fn blend_features(
    weight: &SoftMask,
    target: &FeatureMap,
    base: &FeatureMap,
) -> Result<FeatureMap> {
    if !target.same_shape(base)
        || weight.height() != target.height()
        || weight.width() != target.width()
    {
        return Err(Error::ShapeMismatch {
            context: "blend_features operands",
            expected: target.shape_string(),
            actual: format!("{} / {}", base.shape_string(), weight.shape_string()),
        });
    }
    let channels = target.channels();
    let mut data = Vec::with_capacity(target.data().len());
    for (p, &w) in weight.data().iter().enumerate() {
        let w = w as f64;
        let t = target.pixel(p);
        let b = base.pixel(p);
        for c in 0..channels {
            let (tc, bc) = (t[c] as f64, b[c] as f64);
            data.push((bc + w * (tc - bc)) as f32);
        }
    }
    FeatureMap::new(target.height(), target.width(), channels, data)
}

fn check_refine_shapes(
    disc_mem: &Memory,
    disc_prior: &SoftMask,
    fg_mem: &Memory,
    supports: &[Memory],
) -> Result<()> {
    if supports.is_empty() {
        return Err(Error::EmptyInput("refine requires at least one support memory"));
    }
    if !disc_mem.features.same_shape(&fg_mem.features) {
        return Err(Error::ShapeMismatch {
            context: "disc memory vs fg memory",
            expected: disc_mem.features.shape_string(),
            actual: fg_mem.features.shape_string(),
        });
    }
    if disc_prior.height() != disc_mem.features.height()
        || disc_prior.width() != disc_mem.features.width()
    {
        return Err(Error::ShapeMismatch {
            context: "disc prior vs disc memory",
            expected: disc_mem.features.shape_string(),
            actual: disc_prior.shape_string(),
        });
    }
    for support in supports {
        if support.features.channels() != disc_mem.features.channels() {
            return Err(Error::ShapeMismatch {
                context: "support memory channel count",
                expected: disc_mem.features.channels().to_string(),
                actual: support.features.channels().to_string(),
            });
        }
    }
    Ok(())
}

/// One refinement pass.
///
/// Pools the Disc memory under its prior and each support memory under its
/// mask, scores every FG-memory position against both, suppresses
/// support-uncorroborated positions, and blends FG content into the Disc
/// memory and prior under the surviving weights. An all-zero Disc prior has
/// no pooled prototype; the pass returns its inputs unchanged with the
/// record flagged degenerate.
pub fn refine_once(
    disc_mem: &Memory,
    disc_prior: &SoftMask,
    fg_mem: &Memory,
    supports: &[Memory],
    epsilon: f64,
) -> Result<RefineStep> {
    check_refine_shapes(disc_mem, disc_prior, fg_mem, supports)?;

    if disc_prior.weight_sum() <= 0.0 {
        let zeros = SoftMask::zeros(disc_prior.height(), disc_prior.width())?;
        return Ok(RefineStep {
            memory: disc_mem.clone(),
            prior: disc_prior.clone(),
            record: IterationRecord {
                weight: zeros.clone(),
                support_similarity: zeros,
                prior: disc_prior.clone(),
                degenerate: true,
                cosine_passes: 0,
            },
        });
    }

    let mut cosine_passes = 0usize;

    let disc_proto = masked_gap(&disc_mem.features, disc_prior)?;
    let weight_raw = cosine_map(&fg_mem.features, &disc_proto, epsilon)?;
    let weight = minmax_norm(&weight_raw);
    cosine_passes += 1;

    // Per-support similarity maps are normalized before the k-shot mean so
    // each support contributes on a common [0, 1] scale.
    let pixels = fg_mem.features.pixel_count();
    let mut sums = vec![0.0f64; pixels];
    for support in supports {
        let proto = masked_gap(&support.features, &support.prior)?;
        let sim = minmax_norm(&cosine_map(&fg_mem.features, &proto, epsilon)?);
        cosine_passes += 1;
        for (s, &v) in sums.iter_mut().zip(sim.data()) {
            *s += v as f64;
        }
    }
    let k = supports.len() as f64;
    let support_similarity = SoftMask::new(
        disc_prior.height(),
        disc_prior.width(),
        sums.iter().map(|&s| (s / k) as f32).collect(),
    )?;

    let weight = bg_suppress(&weight, &support_similarity)?;

    let new_features = blend_features(&weight, &fg_mem.features, &disc_mem.features)?;
    let new_prior = blend_masks(&weight, &fg_mem.prior, disc_prior)?;

    Ok(RefineStep {
        memory: Memory::new(new_features, new_prior.clone())?,
        prior: new_prior.clone(),
        record: IterationRecord {
            weight,
            support_similarity,
            prior: new_prior,
            degenerate: false,
            cosine_passes,
        },
    })
}

/// Run `iterations` refinement passes, threading each pass's outputs into
/// the next. Zero iterations returns the inputs unchanged with an empty
/// trace.
pub fn refine(
    disc_mem: &Memory,
    disc_prior: &SoftMask,
    fg_mem: &Memory,
    supports: &[Memory],
    iterations: usize,
    epsilon: f64,
) -> Result<(Memory, SoftMask, RefinementTrace)> {
    check_refine_shapes(disc_mem, disc_prior, fg_mem, supports)?;
    let mut memory = disc_mem.clone();
    let mut prior = disc_prior.clone();
    let mut trace = RefinementTrace::default();
    for _ in 0..iterations {
        let step = refine_once(&memory, &prior, fg_mem, supports, epsilon)?;
        memory = step.memory;
        prior = step.prior;
        trace.iterations.push(step.record);
    }
    Ok((memory, prior, trace))
}
