use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::manifest::{save_png, write_manifest, ManifestRecord};
use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub topics: usize,
    pub herbs_per_topic: usize,
    pub min_herbs: usize,
    pub max_herbs: usize,
    /// Half-width of the additive uniform pixel noise.
    pub noise: f64,
    /// Symmetric Dirichlet concentration of the per-sample topic mixture.
    pub mixture_alpha: f64,
    /// Block intensity for a topic with zero weight.
    pub floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 1000,
            height: 32,
            width: 32,
            topics: 6,
            herbs_per_topic: 8,
            min_herbs: 3,
            max_herbs: 7,
            noise: 0.05,
            mixture_alpha: 0.1,
            floor: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn herb_count(&self) -> usize {
        self.topics * self.herbs_per_topic
    }

    /// Block grid `(rows, cols)` holding one block per topic.
    pub fn grid(&self) -> (usize, usize) {
        let cols = (self.topics as f64).sqrt().ceil() as usize;
        (self.topics.div_ceil(cols), cols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("synth.samples", "must be positive"));
        }
        if self.topics == 0 || self.herbs_per_topic == 0 {
            return Err(Error::config("synth.topics", "topic count and herbs per topic must be positive"));
        }
        if self.min_herbs < 2 {
            return Err(Error::config("synth.min_herbs", "prescriptions hold at least 2 herbs"));
        }
        if self.min_herbs > self.max_herbs || self.max_herbs > self.herb_count() {
            return Err(Error::config(
                "synth.max_herbs",
                format!(
                    "size range {}..={} infeasible for {} herbs",
                    self.min_herbs,
                    self.max_herbs,
                    self.herb_count()
                ),
            ));
        }
        let (rows, cols) = self.grid();
        if self.height < rows || self.width < cols {
            return Err(Error::config("synth.height", format!("image too small for a {rows}x{cols} block grid")));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..1.0).contains(&self.floor) {
            return Err(Error::config("synth.noise", "noise must lie in [0, 1] and floor in [0, 1)"));
        }
        if !(self.mixture_alpha > 0.0 && self.mixture_alpha.is_finite()) {
            return Err(Error::config("synth.mixture_alpha", "must be positive"));
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedWorld {
    pub herb_names: Vec<String>,
    /// Topic-herb distributions, one row per topic, disjoint supports.
    pub topic_herb: Vec<Vec<f64>>,
    /// Per-sample topic mixtures, in sample order.
    pub mixtures: Vec<Vec<f64>>,
    /// Per-topic RGB tint of its image block.
    pub tints: Vec<[f64; 3]>,
}

fn herb_name(topic: usize, j: usize) -> String {
    format!("h{topic:02}{j:02}")
}

fn tint(k: usize, topics: usize) -> [f64; 3] {
    let hue = k as f64 / topics as f64;
    let channel = |offset: f64| 0.6 + 0.4 * (std::f64::consts::TAU * (hue + offset)).cos().abs();
    [channel(0.0), channel(1.0 / 3.0), channel(2.0 / 3.0)]
}

fn dirichlet(rng: &mut impl Rng, alpha: f64, m: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.into_iter().map(|d| d / sum).collect()
    } else {
        let mut one_hot = vec![0.0; m];
        one_hot[rng.random_range(0..m)] = 1.0;
        one_hot
    }
}

/// Draws `size` distinct herbs, each from the remaining mixture mass.
fn draw_herbs(rng: &mut impl Rng, weights: &[f64], size: usize) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &wi) in w.iter().enumerate() {
                if wi > 0.0 {
                    chosen = Some(i);
                    if u < wi {
                        break;
                    }
                    u -= wi;
                }
            }
            chosen.expect("positive total")
        } else {
            let free: Vec<usize> = (0..w.len()).filter(|i| !out.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        out.push(pick);
        w[pick] = 0.0;
    }
    out.sort();
    out
}

/// Renders a topic mixture as a grid of tinted blocks with intensity
/// `floor + (1 - floor)·θ_k`, plus uniform noise, clamped to [0, 1].
pub fn render(config: &SynthConfig, mixture: &[f64], tints: &[[f64; 3]], rng: &mut impl Rng) -> Result<Tensor> {
    let (rows, cols) = config.grid();
    let (h, w) = (config.height, config.width);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let row = y * rows / h;
        for x in 0..w {
            let k = row * cols + x * cols / w;
            let (intensity, t) = match mixture.get(k) {
                Some(theta) => (config.floor + (1.0 - config.floor) * theta, tints[k]),
                None => (config.floor, [1.0; 3]),
            };
            for c in t {
                let noise = if config.noise > 0.0 { rng.random_range(-config.noise..=config.noise) } else { 0.0 };
                data.push((intensity * c + noise).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([h, w, 3], data)
}

/// Generates the synthetic planted-topic dataset. Herb ids follow the sorted
/// herb names, so topic `k` owns ids `k·herbs_per_topic ..`.
pub fn synth_generate(config: &SynthConfig) -> Result<(Dataset, PlantedWorld)> {
    config.validate()?;
    let (m, hp) = (config.topics, config.herbs_per_topic);
    let herb_names = (0..m).flat_map(|k| (0..hp).map(move |j| herb_name(k, j))).collect();
    let zipf: Vec<f64> = (0..hp).map(|j| 1.0 / (j + 1) as f64).collect();
    let zsum: f64 = zipf.iter().sum();
    let topic_herb: Vec<Vec<f64>> = (0..m)
        .map(|k| {
            let mut row = vec![0.0; m * hp];
            row[k * hp..(k + 1) * hp].iter_mut().zip(&zipf).for_each(|(r, z)| *r = z / zsum);
            row
        })
        .collect();
    let tints: Vec<[f64; 3]> = (0..m).map(|k| tint(k, m)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::with_capacity(config.samples);
    let mut mixtures = Vec::with_capacity(config.samples);
    for i in 0..config.samples {
        let theta = dirichlet(&mut rng, config.mixture_alpha, m);
        let weights: Vec<f64> = (0..m * hp).map(|h| theta[h / hp] * topic_herb[h / hp][h]).collect();
        let size = rng.random_range(config.min_herbs..=config.max_herbs);
        let herbs = draw_herbs(&mut rng, &weights, size);
        let image = render(config, &theta, &tints, &mut rng)?;
        samples.push(Sample { id: format!("syn{i:05}"), image, herbs, topics: None });
        mixtures.push(theta);
    }
    Ok((Dataset { samples, herb_count: m * hp }, PlantedWorld { herb_names, topic_herb, mixtures, tints }))
}

/// Writes `images/<id>.png`, `manifest.tsv` and `planted.json` under `dir`.
pub fn write_synth_dataset(dir: &Path, dataset: &Dataset, world: &PlantedWorld) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut records = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let path = images.join(format!("{}.png", s.id));
        save_png(&s.image, &path)?;
        let herbs = s.herbs.iter().map(|&h| world.herb_names[h].clone()).collect();
        records.push(ManifestRecord { id: s.id.clone(), path, herbs });
    }
    let mut manifest = Vec::new();
    write_manifest(&records, dir, &mut manifest)?;
    fs::write(dir.join("manifest.tsv"), manifest)?;
    fs::write(dir.join("planted.json"), serde_json::to_string_pretty(world)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            samples: 50,
            height: 12,
            width: 12,
            topics: 4,
            herbs_per_topic: 5,
            min_herbs: 2,
            max_herbs: 4,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let (a, wa) = synth_generate(&small()).unwrap();
        let (b, wb) = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        assert_eq!(a.len(), 50);
        for s in &a.samples {
            assert!((2..=4).contains(&s.herbs.len()));
            assert!(s.herbs.windows(2).all(|w| w[0] < w[1]));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut sorted = wa.herb_names.clone();
        sorted.sort();
        assert_eq!(sorted, wa.herb_names);
    }

    #[test]
    fn zero_noise_rendering() {
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let tints: Vec<[f64; 3]> = (0..4).map(|k| tint(k, 4)).collect();
        let img = render(&cfg, &[0.0, 0.0, 1.0, 0.0], &tints, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // 2x2 grid over 12x12: topic 2 is the lower-left block.
        let px = |y: usize, x: usize| img.data()[(y * 12 + x) * 3];
        assert_eq!(px(9, 2), tints[2][0]);
        assert_eq!(px(2, 2), cfg.floor * tints[0][0]);
        assert_eq!(px(2, 9), cfg.floor * tints[1][0]);
    }

    #[test]
    fn infeasible_configs() {
        assert!(SynthConfig { min_herbs: 1, ..small() }.validate().is_err());
        assert!(SynthConfig { min_herbs: 5, max_herbs: 4, ..small() }.validate().is_err());
        assert!(SynthConfig { max_herbs: 21, ..small() }.validate().is_err());
    }

    #[test]
    fn draw_herbs_falls_back_when_mass_runs_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picks = draw_herbs(&mut rng, &[0.0, 1.0, 0.0, 0.0], 3);
        assert_eq!(picks.len(), 3);
        assert!(picks.contains(&1));
    }
}
