use super::ExperimentError;
use crate::network::Sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

fn default_part_dim() -> usize {
    2
}

/// A synthetic part-whole task: each class is a fixed arrangement of part
/// poses, observed with Gaussian pose noise and occasional distractor parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstellationConfig {
    pub classes: usize,
    pub parts: usize,
    /// Length of each part's pose vector; the model input has
    /// `parts * part_dim` features.
    #[serde(default = "default_part_dim")]
    pub part_dim: usize,
    pub noise: f64,
    /// Chance that a sample has one part replaced by a random pose.
    #[serde(default)]
    pub distractor_prob: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ConstellationConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            parts: 4,
            part_dim: 2,
            noise: 0.7,
            distractor_prob: 0.1,
            train_samples: 2000,
            eval_samples: 500,
            seed: 0,
        }
    }
}

impl ConstellationConfig {
    pub fn input_dim(&self) -> usize {
        self.parts * self.part_dim
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let ok = self.classes >= 2
            && self.parts >= 2
            && self.part_dim >= 1
            && self.noise >= 0.0
            && self.noise.is_finite()
            && (0.0..=1.0).contains(&self.distractor_prob)
            && self.train_samples > 0
            && self.eval_samples > 0;
        if ok {
            Ok(())
        } else {
            Err(ExperimentError::InvalidConfig(format!("invalid dataset config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: ConstellationConfig,
    /// Class templates, `classes × (parts · part_dim)`.
    pub templates: Vec<Vec<f64>>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Draws the templates, then the training split, then the evaluation split,
/// all from one seeded stream.
pub fn generate_constellation(cfg: &ConstellationConfig) -> Result<Dataset, ExperimentError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.input_dim();
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut draw = |n: usize| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let label = rng.random_range(0..cfg.classes);
                let mut x: Vec<f64> = templates[label]
                    .iter()
                    .map(|t| t + cfg.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if rng.random::<f64>() < cfg.distractor_prob {
                    let p = rng.random_range(0..cfg.parts);
                    for v in &mut x[p * cfg.part_dim..(p + 1) * cfg.part_dim] {
                        *v = rng.sample(StandardNormal);
                    }
                }
                Sample { x, label }
            })
            .collect()
    };
    let train = draw(cfg.train_samples);
    let eval = draw(cfg.eval_samples);
    Ok(Dataset {
        config: cfg.clone(),
        templates,
        train,
        eval,
    })
}
