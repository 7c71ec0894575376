use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded order-2 Markov chain over `vocab_size` symbols.
///
/// Symbols are split into contiguous clusters. Each context `(a, b)` has a few
/// candidate successors, mostly drawn from `b`'s cluster, so nearby tokens
/// tend to share a cluster. That gives routing something local to latch onto.
#[derive(Debug, Clone)]
pub struct MarkovCorpus {
    vocab_size: usize,
    seed: u64,
    /// `vocab^2` rows of `(successor, cumulative probability)`.
    table: Vec<Vec<(usize, f64)>>,
}

const SUCCESSOR_PROBS: [f64; 4] = [0.45, 0.25, 0.15, 0.15];
const N_CLUSTERS: usize = 8;

impl MarkovCorpus {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        assert!(vocab_size >= 2, "corpus needs at least two symbols");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let clusters = N_CLUSTERS.min(vocab_size);
        let cluster_len = vocab_size.div_ceil(clusters);
        let mut table = Vec::with_capacity(vocab_size * vocab_size);
        for _a in 0..vocab_size {
            for b in 0..vocab_size {
                let lo = (b / cluster_len) * cluster_len;
                let hi = (lo + cluster_len).min(vocab_size);
                let mut cum = 0.0;
                let row = SUCCESSOR_PROBS
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let next = if i < 3 {
                            rng.gen_range(lo..hi)
                        } else {
                            rng.gen_range(0..vocab_size)
                        };
                        cum += p;
                        (next, cum)
                    })
                    .collect();
                table.push(row);
            }
        }
        Self {
            vocab_size,
            seed,
            table,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next(&self, a: usize, b: usize, rng: &mut impl Rng) -> usize {
        let row = &self.table[a * self.vocab_size + b];
        let u: f64 = rng.gen();
        row.iter()
            .find(|(_, c)| u < *c)
            .map_or(row[row.len() - 1].0, |(t, _)| *t)
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let t = if i < 2 {
                rng.gen_range(0..self.vocab_size)
            } else {
                self.next(out[i - 2], out[i - 1], rng)
            };
            out.push(t);
        }
        out
    }

    /// The `index`-th sequence of a stream keyed by `stream_seed`; used for
    /// evaluation sets and reproducible prompts.
    pub fn sequence(&self, stream_seed: u64, index: u64, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        rng.set_stream(index);
        self.sample(len, &mut rng)
    }
}
