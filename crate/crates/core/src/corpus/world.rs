//! The synthetic stand-in for a chest radiograph archive: multi-view images
//! with class-specific stamps and template-written findings reports.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CorpusSample;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Per-class vocabulary: the keyword and the modifier used by its templates.
/// Listed in anatomical (apex to base) order, which is also report order.
const CLASSES: [(&str, &str); 8] = [
    ("pneumothorax", "apical"),
    ("nodule", "small"),
    ("opacity", "patchy"),
    ("cardiomegaly", "mild"),
    ("consolidation", "lobar"),
    ("atelectasis", "subsegmental"),
    ("edema", "interstitial"),
    ("effusion", "pleural"),
];

/// Normal-finding sentences, grouped by reporting style.
const NORMAL_SENTENCES: [[&str; 3]; 5] = [
    [
        "the heart size is normal",
        "the mediastinum is unremarkable",
        "there is no acute bony abnormality",
    ],
    [
        "heart size within normal limits",
        "mediastinal contours are stable",
        "osseous structures are intact",
    ],
    [
        "normal cardiac silhouette",
        "unremarkable mediastinal contours",
        "no acute osseous findings",
    ],
    [
        "cardiomediastinal silhouette within normal limits",
        "the lungs are otherwise clear",
        "no displaced rib fractures",
    ],
    [
        "heart is not enlarged",
        "hilar structures appear normal",
        "visualized bones are unremarkable",
    ],
];

/// Anatomical terms that join the class keywords as keyword-dictionary candidates.
const ORGAN_TERMS: [&str; 9] = [
    "heart",
    "cardiac",
    "lungs",
    "rib",
    "mediastinum",
    "mediastinal",
    "osseous",
    "bony",
    "pleural",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub classes: usize,
    /// Image side length in pixels.
    pub grid: usize,
    /// Feature-map side length; `grid` must be divisible by it.
    pub cells: usize,
    pub stamp: usize,
    pub noise_sigma: f64,
    pub stamp_amplitude: f64,
    /// Amplitude of the per-style scanner pattern added to every view.
    pub style_signal: f64,
    pub no_finding_rate: f64,
    /// Expected number of active classes per sample, over all samples.
    pub mean_active: f64,
    /// Pixel offset of the second view relative to the first.
    pub view_shift: (usize, usize),
    pub views: usize,
    /// Seed of the fixed world constants (stamps, scanner patterns).
    pub world_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            grid: 32,
            cells: 4,
            stamp: 6,
            noise_sigma: 0.1,
            stamp_amplitude: 1.0,
            style_signal: 0.3,
            no_finding_rate: 0.25,
            mean_active: 1.2,
            view_shift: (1, 1),
            views: 2,
            world_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    stamps: Vec<Vec<f64>>,
    style_patterns: Vec<Vec<f64>>,
}

/// Latent attributes of one generated subject that the corpus file does not carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubjectTraits {
    pub side: Side,
    pub style: usize,
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if config.classes == 0 || config.classes > CLASSES.len() {
            return Err(Error::Config(format!(
                "classes must be in 1..={}, got {}",
                CLASSES.len(),
                config.classes
            )));
        }
        if config.cells == 0 || config.grid % config.cells != 0 {
            return Err(Error::Config(format!(
                "grid {} is not divisible by cells {}",
                config.grid, config.cells
            )));
        }
        let cell = config.grid / config.cells;
        if config.stamp + 1 + config.view_shift.0.max(config.view_shift.1) > cell {
            return Err(Error::Config(format!(
                "stamp {} with shift {:?} does not fit a {cell}-pixel cell",
                config.stamp, config.view_shift
            )));
        }
        let rows_needed = config.classes.div_ceil(2);
        if rows_needed > config.cells || config.cells < 4 {
            return Err(Error::Config(format!(
                "{} classes need a feature map of at least 4 cells per side",
                config.classes
            )));
        }
        if config.views == 0 {
            return Err(Error::Config("views must be positive".into()));
        }
        let mut rng = rng_for(config.world_seed, "world");
        let stamps = (0..config.classes)
            .map(|_| {
                (0..config.stamp * config.stamp)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let style_patterns = (0..NORMAL_SENTENCES.len())
            .map(|_| {
                (0..config.grid * config.grid)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            stamps,
            style_patterns,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes
    }

    pub fn num_styles(&self) -> usize {
        NORMAL_SENTENCES.len()
    }

    pub fn class_keyword(&self, class: usize) -> &'static str {
        CLASSES[class].0
    }

    /// Keywords that mark class presence in a report.
    pub fn class_keywords(&self) -> Vec<Vec<String>> {
        (0..self.config.classes)
            .map(|c| vec![CLASSES[c].0.to_string()])
            .collect()
    }

    /// Candidate tokens for the keyword dictionary.
    pub fn domain_terms(&self) -> Vec<String> {
        let mut terms: Vec<String> = (0..self.config.classes)
            .map(|c| CLASSES[c].0.to_string())
            .chain(ORGAN_TERMS.iter().map(|s| s.to_string()))
            .collect();
        terms.sort();
        terms.dedup();
        terms
    }

    /// Probability that a sample with findings gets each non-seed class.
    fn extra_class_rate(&self) -> f64 {
        let c = self.config.classes as f64;
        let per_finding = self.config.mean_active / (1.0 - self.config.no_finding_rate);
        if c <= 1.0 {
            0.0
        } else {
            ((per_finding - 1.0) / (c - 1.0)).clamp(0.0, 1.0)
        }
    }

    /// Marginal probability that a given class is active.
    pub fn class_rate(&self) -> f64 {
        let c = self.config.classes as f64;
        (1.0 - self.config.no_finding_rate) * (1.0 / c + (c - 1.0) / c * self.extra_class_rate())
    }

    pub fn class_sentence(&self, class: usize, style: usize, side: Side) -> Vec<String> {
        let (kw, modifier) = CLASSES[class];
        let s = side.word();
        let text = match style {
            0 => format!("there is a {s} {modifier} {kw}"),
            1 => format!("{s} {modifier} {kw} is present"),
            2 => format!("findings consistent with {s} {kw}"),
            3 => format!("{modifier} {kw} noted on the {s}"),
            _ => format!("{s} sided {kw} is seen"),
        };
        text.split_whitespace().map(str::to_string).collect()
    }

    pub fn sample_traits(&self, rng: &mut ChaCha8Rng) -> (Vec<usize>, SubjectTraits) {
        let c = self.config.classes;
        let mut labels = Vec::new();
        if rng.random::<f64>() >= self.config.no_finding_rate {
            let first = rng.random_range(0..c);
            let p = self.extra_class_rate();
            for k in 0..c {
                if k == first || rng.random::<f64>() < p {
                    labels.push(k);
                }
            }
        }
        let side = if rng.random::<bool>() { Side::Left } else { Side::Right };
        let style = rng.random_range(0..self.num_styles());
        (labels, SubjectTraits { side, style })
    }

    /// Top-left pixel of `class`'s stamp in the unshifted view.
    fn stamp_origin(&self, class: usize, side: Side) -> (usize, usize) {
        let cell = self.config.grid / self.config.cells;
        let half = self.config.cells / 2;
        let row = class / 2;
        let col = class % 2 + if side == Side::Right { half } else { 0 };
        (row * cell + 1, col * cell + 1)
    }

    pub fn render_views(
        &self,
        labels: &[usize],
        traits: SubjectTraits,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<f64>> {
        let g = self.config.grid;
        let noise = Normal::new(0.0, self.config.noise_sigma).expect("valid sigma");
        (0..self.config.views)
            .map(|v| {
                let (dy, dx) = if v % 2 == 1 { self.config.view_shift } else { (0, 0) };
                let mut img: Vec<f64> = (0..g * g).map(|_| noise.sample(rng)).collect();
                for (px, sp) in img.iter_mut().zip(&self.style_patterns[traits.style]) {
                    *px += self.config.style_signal * sp;
                }
                for &class in labels {
                    let (y0, x0) = self.stamp_origin(class, traits.side);
                    let s = self.config.stamp;
                    for y in 0..s {
                        for x in 0..s {
                            img[(y0 + dy + y) * g + x0 + dx + x] +=
                                self.config.stamp_amplitude * self.stamps[class][y * s + x];
                        }
                    }
                }
                img
            })
            .collect()
    }

    pub fn compose_report(
        &self,
        labels: &[usize],
        traits: SubjectTraits,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<String>> {
        let mut sentences: Vec<Vec<String>> = labels
            .iter()
            .map(|&c| self.class_sentence(c, traits.style, traits.side))
            .collect();
        let pool = &NORMAL_SENTENCES[traits.style];
        let count = rng.random_range(1..=2);
        let first = rng.random_range(0..pool.len());
        for k in 0..count {
            let text = pool[(first + k) % pool.len()];
            sentences.push(text.split_whitespace().map(str::to_string).collect());
        }
        sentences
    }

    /// One subject, drawn from a generator seeded by `(seed, id)` alone.
    pub fn generate_sample(&self, seed: u64, id: usize) -> (CorpusSample, SubjectTraits) {
        let mut rng = rng_for(seed, &format!("sample/{id}"));
        let (labels, traits) = self.sample_traits(&mut rng);
        let views = self.render_views(&labels, traits, &mut rng);
        let sentences = self.compose_report(&labels, traits, &mut rng);
        (
            CorpusSample {
                id,
                views,
                sentences,
                labels,
            },
            traits,
        )
    }
}

pub fn generate_corpus(seed: u64, n: usize, world: &SyntheticWorld) -> Result<Vec<CorpusSample>> {
    if n < 10 {
        return Err(Error::Validation(format!(
            "corpus needs at least 10 samples, got {n}"
        )));
    }
    Ok((0..n).map(|id| world.generate_sample(seed, id).0).collect())
}
