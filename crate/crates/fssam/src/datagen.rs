//! Seeded synthetic episode generator with known ground truth.
//!
//! Every class gets a random unit direction in channel space. Foreground
//! pixels carry the class direction, background pixels a neutral direction
//! orthogonal to it, and distractor rectangles carry directions with a fixed
//! partial alignment to the class: background objects that genuinely
//! resemble the foreground, which is exactly what the suppression stages are
//! for. Gaussian channel noise controls difficulty. Query and supports of an
//! episode share the class direction but differ in geometry and noise.
//!
//! Generation is fully determined by the spec (including its seed); episodes
//! derive per-index seeds, so the set is reproducible regardless of how many
//! episodes are requested.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot_f64, norm_f64, FeatureMap, SoftMask};
use crate::pipeline::{Episode, SupportSample};

/// Cosine between each distractor direction and its class direction.
/// High enough that distractors partially match the foreground prototype,
/// low enough that they stay separable.
pub const DISTRACTOR_ALIGNMENT: f64 = 0.55;

/// Parameters of one synthetic episode set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Classes are assigned round-robin over episodes.
    pub class_count: usize,
    /// Standard deviation of the per-channel Gaussian noise.
    pub noise_sigma: f64,
    /// Distractor rectangles per image, disjoint from the foreground.
    pub distractors_per_image: usize,
    /// Foreground is a union of up to this many axis-aligned rectangles.
    pub max_fg_rects: usize,
    /// Side range of each foreground rectangle.
    pub fg_min_side: usize,
    pub fg_max_side: usize,
    /// Supports per episode (`k`).
    pub shots: usize,
    pub episode_count: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Noiseless, distractor-free episodes with exactly separable classes.
    pub fn identity_benchmark(episode_count: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            height: 32,
            width: 32,
            channels: 16,
            class_count: 5,
            noise_sigma: 0.0,
            distractors_per_image: 0,
            max_fg_rects: 2,
            fg_min_side: 6,
            fg_max_side: 14,
            shots: 1,
            episode_count,
            seed,
        }
    }

    /// Noisy episodes with two partially class-aligned distractors per
    /// image; the standard stress set for the suppression stages.
    pub fn distractor_benchmark(episode_count: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            height: 16,
            width: 16,
            channels: 16,
            class_count: 4,
            noise_sigma: 0.1,
            distractors_per_image: 2,
            max_fg_rects: 1,
            fg_min_side: 4,
            fg_max_side: 7,
            shots: 1,
            episode_count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.height, "height"),
            (self.width, "width"),
            (self.class_count, "class_count"),
            (self.max_fg_rects, "max_fg_rects"),
            (self.fg_min_side, "fg_min_side"),
            (self.fg_max_side, "fg_max_side"),
            (self.shots, "shots"),
            (self.episode_count, "episode_count"),
        ];
        for (value, name) in positive {
            if value == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if self.channels < 2 {
            return Err(Error::InvalidSpec(
                "at least 2 channels are needed for an orthogonal background direction".to_string(),
            ));
        }
        if self.fg_min_side > self.fg_max_side {
            return Err(Error::InvalidSpec(format!(
                "fg_min_side {} exceeds fg_max_side {}",
                self.fg_min_side, self.fg_max_side
            )));
        }
        if self.fg_max_side >= self.height.min(self.width) {
            return Err(Error::InvalidSpec(format!(
                "foreground side {} does not fit a {}x{} image with background left over",
                self.fg_max_side, self.height, self.width
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.y < other.y + other.h
            && other.y < self.y + self.h
            && self.x < other.x + other.w
            && other.x < self.x + self.w
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Where one generated image put its regions.
#[derive(Debug, Clone)]
pub struct ImageLayout {
    pub fg_rects: Vec<Rect>,
    /// `(distractor index, rectangle)` pairs actually placed.
    pub distractors: Vec<(usize, Rect)>,
}

/// Ground-truth construction record of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeLayout {
    pub class_id: u32,
    pub class_vector: Vec<f32>,
    pub neutral_vector: Vec<f32>,
    pub distractor_vectors: Vec<Vec<f32>>,
    pub query: ImageLayout,
    pub supports: Vec<ImageLayout>,
}

struct ClassVectors {
    class: Vec<f32>,
    neutral: Vec<f32>,
    distractors: Vec<Vec<f32>>,
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_unit(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..channels).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn orthogonal_unit(rng: &mut ChaCha8Rng, reference: &[f64]) -> Vec<f64> {
    loop {
        let mut v = random_unit(rng, reference.len());
        let proj: f64 = v.iter().zip(reference).map(|(a, b)| a * b).sum();
        for (vi, ri) in v.iter_mut().zip(reference) {
            *vi -= proj * ri;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn class_vectors(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<ClassVectors> {
    (0..spec.class_count)
        .map(|_| {
            let class = random_unit(rng, spec.channels);
            let neutral = orthogonal_unit(rng, &class);
            let distractors = (0..spec.distractors_per_image)
                .map(|_| {
                    // Fixed alignment to the class direction: aligned part
                    // plus an orthogonal remainder of complementary length.
                    let ortho = orthogonal_unit(rng, &class);
                    let residual = (1.0 - DISTRACTOR_ALIGNMENT * DISTRACTOR_ALIGNMENT).sqrt();
                    let v: Vec<f64> = class
                        .iter()
                        .zip(&ortho)
                        .map(|(&c, &o)| DISTRACTOR_ALIGNMENT * c + residual * o)
                        .collect();
                    to_f32(&v)
                })
                .collect();
            ClassVectors {
                class: to_f32(&class),
                neutral: to_f32(&neutral),
                distractors,
            }
        })
        .collect()
}

const OWNER_NEUTRAL: u8 = u8::MAX;
const OWNER_FG: u8 = u8::MAX - 1;

fn build_image(
    spec: &SynthSpec,
    vectors: &ClassVectors,
    geometry: &mut ChaCha8Rng,
    noise: &mut ChaCha8Rng,
) -> (FeatureMap, SoftMask, ImageLayout) {
    let (h, w) = (spec.height, spec.width);
    let rect_count = geometry.gen_range(1..=spec.max_fg_rects);
    let mut fg_rects: Vec<Rect> = (0..rect_count)
        .map(|_| {
            let rh = geometry.gen_range(spec.fg_min_side..=spec.fg_max_side);
            let rw = geometry.gen_range(spec.fg_min_side..=spec.fg_max_side);
            Rect {
                y: geometry.gen_range(0..=h - rh),
                x: geometry.gen_range(0..=w - rw),
                h: rh,
                w: rw,
            }
        })
        .collect();

    // A single rectangle never covers the image (validated side bound), but a
    // union might; drop rectangles until background remains.
    let covers = |rects: &[Rect]| -> bool {
        (0..h * w).all(|p| rects.iter().any(|r| r.contains(p / w, p % w)))
    };
    while fg_rects.len() > 1 && covers(&fg_rects) {
        fg_rects.pop();
    }

    // Distractors must not touch the foreground (and keep each other
    // disjoint so every distractor pixel has a unique owner). Placement is
    // best-effort: an image too crowded to fit one simply gets fewer.
    let d_min = (spec.fg_min_side / 2).max(2).min(h.min(w));
    let d_max = (spec.fg_max_side / 2).max(d_min).min(h.min(w));
    let mut distractors: Vec<(usize, Rect)> = Vec::new();
    for j in 0..spec.distractors_per_image {
        for _attempt in 0..128 {
            let rh = geometry.gen_range(d_min..=d_max);
            let rw = geometry.gen_range(d_min..=d_max);
            if rh > h || rw > w {
                continue;
            }
            let rect = Rect {
                y: geometry.gen_range(0..=h - rh),
                x: geometry.gen_range(0..=w - rw),
                h: rh,
                w: rw,
            };
            let clash = fg_rects.iter().any(|r| r.overlaps(&rect))
                || distractors.iter().any(|(_, r)| r.overlaps(&rect));
            if !clash {
                distractors.push((j, rect));
                break;
            }
        }
    }

    let mut owner = vec![OWNER_NEUTRAL; h * w];
    for (j, rect) in &distractors {
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                owner[y * w + x] = *j as u8;
            }
        }
    }
    for rect in &fg_rects {
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                owner[y * w + x] = OWNER_FG;
            }
        }
    }

    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(h * w * spec.channels);
    let mut mask = Vec::with_capacity(h * w);
    for &o in &owner {
        let base: &[f32] = match o {
            OWNER_FG => &vectors.class,
            OWNER_NEUTRAL => &vectors.neutral,
            j => &vectors.distractors[j as usize],
        };
        mask.push(if o == OWNER_FG { 1.0 } else { 0.0 });
        for &b in base {
            let draw: f64 = normal.sample(noise);
            data.push((b as f64 + spec.noise_sigma * draw) as f32);
        }
    }

    let features = FeatureMap::new(h, w, spec.channels, data).expect("generated map is valid");
    let mask = SoftMask::new(h, w, mask).expect("generated mask is binary");
    (
        features,
        mask,
        ImageLayout {
            fg_rects,
            distractors,
        },
    )
}

/// Generate the episode set together with its construction records.
pub fn generate_detailed(spec: &SynthSpec) -> Result<Vec<(Episode, EpisodeLayout)>> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0, 0));
    let vectors = class_vectors(spec, &mut master);

    let mut episodes = Vec::with_capacity(spec.episode_count);
    for index in 0..spec.episode_count {
        let class_id = (index % spec.class_count) as u32;
        let class_vecs = &vectors[class_id as usize];
        let mut geometry = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64 + 1, 1));
        let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64 + 1, 2));

        let (query_features, query_mask, query_layout) =
            build_image(spec, class_vecs, &mut geometry, &mut noise);
        let mut supports = Vec::with_capacity(spec.shots);
        let mut support_layouts = Vec::with_capacity(spec.shots);
        for _ in 0..spec.shots {
            let (features, mask, layout) = build_image(spec, class_vecs, &mut geometry, &mut noise);
            supports.push(SupportSample { features, mask });
            support_layouts.push(layout);
        }

        let episode = Episode::new(query_features, query_mask, supports, class_id)
            .map_err(|e| e.in_episode(index))?;
        episodes.push((
            episode,
            EpisodeLayout {
                class_id,
                class_vector: class_vecs.class.clone(),
                neutral_vector: class_vecs.neutral.clone(),
                distractor_vectors: class_vecs.distractors.clone(),
                query: query_layout,
                supports: support_layouts,
            },
        ));
    }
    Ok(episodes)
}

/// Generate the episode set.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Episode>> {
    Ok(generate_detailed(spec)?
        .into_iter()
        .map(|(episode, _)| episode)
        .collect())
}

/// Misclassification rate of the cheating baseline that thresholds each
/// query pixel's cosine to the true class direction.
///
/// Serves as a difficulty gauge for generated sets: more noise can only make
/// this oracle worse.
pub fn oracle_error(detailed: &[(Episode, EpisodeLayout)], threshold: f32) -> f64 {
    let mut wrong = 0u64;
    let mut total = 0u64;
    for (episode, layout) in detailed {
        let features = episode.query_features();
        let class = &layout.class_vector;
        let class_norm = norm_f64(class);
        for (p, &gt) in episode.query_mask().data().iter().enumerate() {
            let pixel = features.pixel(p);
            let denom = norm_f64(pixel) * class_norm + crate::numerics::DEFAULT_EPSILON;
            let cos = (dot_f64(pixel, class) / denom) as f32;
            let predicted = cos >= threshold;
            let actual = gt > 0.5;
            wrong += (predicted != actual) as u64;
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        wrong as f64 / total as f64
    }
}
