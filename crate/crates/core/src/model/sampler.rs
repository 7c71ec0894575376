use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Next-token selection at batch size 1.
#[derive(Debug, Clone)]
pub enum Sampler {
    Greedy,
    /// Sample proportionally to the softmax of the logits, no temperature.
    Categorical(Box<ChaCha8Rng>),
}

impl Sampler {
    pub fn greedy() -> Self {
        Sampler::Greedy
    }

    pub fn categorical(seed: u64) -> Self {
        Sampler::Categorical(Box::new(ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn sample(&mut self, logits: &[f32]) -> usize {
        match self {
            Sampler::Greedy => crate::tensor::argmax(logits),
            Sampler::Categorical(rng) => {
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let p: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
                let total: f64 = p.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for (i, &pi) in p.iter().enumerate() {
                    if u < pi {
                        return i;
                    }
                    u -= pi;
                }
                p.len() - 1
            }
        }
    }
}
