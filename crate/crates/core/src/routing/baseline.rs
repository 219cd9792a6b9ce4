use super::RoutingConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded stream of random link strengths, drawn row-major from
/// `U(random_low, random_high)`. Backed by ChaCha8 so the sequence is the
/// same on every platform.
#[derive(Debug, Clone)]
pub struct RandomLinks {
    rng: ChaCha8Rng,
    low: f64,
    width: f64,
}

impl RandomLinks {
    pub fn new(cfg: &RoutingConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            low: cfg.random_low,
            width: cfg.random_high - cfg.random_low,
        }
    }

    pub fn draw(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| self.low + self.width * self.rng.random::<f64>())
            .collect()
    }
}
