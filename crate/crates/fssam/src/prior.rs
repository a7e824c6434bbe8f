//! Prior mask generation and memory encoding.
//!
//! A support image with an annotated mask is compressed into foreground and
//! background prototypes by masked pooling. Cosine similarity of the query
//! features against each prototype, min-max normalized, gives the FG and BG
//! prior masks; the discriminative (Disc) prior is the rectified difference
//! of the two, renormalized. Priors then gate the encoding of features into
//! memories for the refinement and attention stages.

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_map, masked_gap, minmax_norm, FeatureMap, Grid, Prototype, SoftMask,
};

/// The three prior masks produced for one query image.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    /// Foreground prior: high where the query resembles the support FG prototype.
    pub fg: SoftMask,
    /// Background prior: high where the query resembles the support BG prototype.
    pub bg: SoftMask,
    /// Discriminative prior: rectified FG-minus-BG, renormalized. Fewer false
    /// BG activations than `fg`, at the cost of less complete FG coverage.
    pub disc: SoftMask,
}

impl PriorSet {
    fn check_uniform(&self) -> Result<()> {
        if !self.fg.same_shape(&self.bg) || !self.fg.same_shape(&self.disc) {
            return Err(Error::ShapeMismatch {
                context: "prior set members",
                expected: self.fg.shape_string(),
                actual: format!("{} / {}", self.bg.shape_string(), self.disc.shape_string()),
            });
        }
        Ok(())
    }
}

/// A feature map paired with the soft mask it was encoded under.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    pub features: FeatureMap,
    pub prior: SoftMask,
}

impl Memory {
    pub fn new(features: FeatureMap, prior: SoftMask) -> Result<Self> {
        if features.height() != prior.height() || features.width() != prior.width() {
            return Err(Error::ShapeMismatch {
                context: "memory features vs prior",
                expected: features.shape_string(),
                actual: prior.shape_string(),
            });
        }
        Ok(Self { features, prior })
    }
}

/// Output of [`make_priors`]: the normalized prior set plus the raw
/// intermediates the normalization consumed, kept for invariant checks and
/// diagnostics.
#[derive(Debug, Clone)]
pub struct PriorComputation {
    pub set: PriorSet,
    /// Cosine map against the FG prototype before normalization.
    pub fg_raw: Grid,
    /// Cosine map against the BG prototype before normalization.
    pub bg_raw: Grid,
    /// Rectified difference of the normalized FG and BG priors, before its
    /// own renormalization.
    pub disc_pre: Grid,
    /// Set when the support background region was empty and the BG prototype
    /// fell back to the zero vector.
    pub bg_prototype_fallback: bool,
}

/// Build FG, BG and Disc prior masks for a query from one support sample.
///
/// The support mask must be binary with a nonempty foreground. An empty
/// background is tolerated: the BG prototype falls back to the zero vector
/// (the epsilon guard in the cosine keeps the map well defined) and the
/// output is flagged.
pub fn make_priors(
    query: &FeatureMap,
    support: &FeatureMap,
    support_mask: &SoftMask,
    epsilon: f64,
) -> Result<PriorComputation> {
    if query.channels() != support.channels() {
        return Err(Error::ShapeMismatch {
            context: "make_priors channel count",
            expected: query.channels().to_string(),
            actual: support.channels().to_string(),
        });
    }
    if support.height() != support_mask.height() || support.width() != support_mask.width() {
        return Err(Error::ShapeMismatch {
            context: "support features vs mask",
            expected: support.shape_string(),
            actual: support_mask.shape_string(),
        });
    }
    support_mask.require_binary()?;

    let fg_proto = masked_gap(support, support_mask)?;

    let bg_mask = support_mask.complement();
    let (bg_proto, bg_prototype_fallback) = if bg_mask.weight_sum() > 0.0 {
        (masked_gap(support, &bg_mask)?, false)
    } else {
        (Prototype::zero(support.channels()), true)
    };

    let fg_raw = cosine_map(query, &fg_proto, epsilon)?;
    let bg_raw = cosine_map(query, &bg_proto, epsilon)?;
    let fg = minmax_norm(&fg_raw);
    let bg = minmax_norm(&bg_raw);

    // Rectified difference on the already-normalized maps.
    let disc_pre_data: Vec<f32> = fg
        .data()
        .iter()
        .zip(bg.data())
        .map(|(&f, &b)| (f - b).max(0.0))
        .collect();
    let disc_pre = Grid::new(query.height(), query.width(), disc_pre_data)?;
    let disc = minmax_norm(&disc_pre);

    Ok(PriorComputation {
        set: PriorSet { fg, bg, disc },
        fg_raw,
        bg_raw,
        disc_pre,
        bg_prototype_fallback,
    })
}

/// Elementwise arithmetic mean of several prior sets (the k-shot rule).
///
/// Sums run in `f64`, so averaging k copies of one set reproduces that set
/// bit-exactly.
pub fn average_priors(sets: &[PriorSet]) -> Result<PriorSet> {
    let first = sets.first().ok_or(Error::EmptyInput("average_priors"))?;
    first.check_uniform()?;
    for set in &sets[1..] {
        set.check_uniform()?;
        if !set.fg.same_shape(&first.fg) {
            return Err(Error::ShapeMismatch {
                context: "average_priors set shapes",
                expected: first.fg.shape_string(),
                actual: set.fg.shape_string(),
            });
        }
    }
    let mean = |pick: fn(&PriorSet) -> &SoftMask| -> Result<SoftMask> {
        let len = pick(first).data().len();
        let mut sums = vec![0.0f64; len];
        for set in sets {
            for (s, &v) in sums.iter_mut().zip(pick(set).data()) {
                *s += v as f64;
            }
        }
        let k = sets.len() as f64;
        let data = sums.iter().map(|&s| (s / k) as f32).collect();
        SoftMask::new(first.fg.height(), first.fg.width(), data)
    };
    Ok(PriorSet {
        fg: mean(|s| &s.fg)?,
        bg: mean(|s| &s.bg)?,
        disc: mean(|s| &s.disc)?,
    })
}

/// Encode features under a mask prompt into a memory.
///
/// Stand-in for a learned memory encoder: features are modulated by a
/// mask-gated gain, `out(p) = features(p) * (1 + gain * mask(p))`, and the
/// mask is carried alongside. The default gain 0 leaves features untouched,
/// which keeps analytic test cases exact.
pub fn encode_memory(features: &FeatureMap, mask: &SoftMask, gain: f32) -> Result<Memory> {
    if !gain.is_finite() || gain < 0.0 {
        return Err(Error::InvalidValue(format!(
            "memory gain must be finite and non-negative, got {gain}"
        )));
    }
    if features.height() != mask.height() || features.width() != mask.width() {
        return Err(Error::ShapeMismatch {
            context: "encode_memory features vs mask",
            expected: features.shape_string(),
            actual: mask.shape_string(),
        });
    }
    let channels = features.channels();
    let mut data = Vec::with_capacity(features.data().len());
    for (p, &m) in mask.data().iter().enumerate() {
        let scale = 1.0 + gain * m;
        for &v in features.pixel(p) {
            data.push(v * scale);
        }
    }
    let encoded = FeatureMap::new(features.height(), features.width(), channels, data)?;
    Memory::new(encoded, mask.clone())
}
