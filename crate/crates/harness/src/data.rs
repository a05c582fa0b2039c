//! Seeded Markov corpora with a known transition table, so the best
//! achievable next-token loss is computable.

use dnt_core::tensor::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Dirichlet concentration of each transition row.
pub const DEFAULT_CONCENTRATION: f64 = 0.05;

/// An order-1 or order-2 Markov chain over `vocab` tokens.
///
/// Row `c` of `table` is the next-token distribution for context index
/// `c`; for order 2 the context `(a, b)` (oldest first) has index
/// `a·vocab + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSource {
    pub vocab: usize,
    pub order: usize,
    pub table: Vec<Vec<f64>>,
}

fn validate_shape(vocab: usize, order: usize) -> Result<()> {
    if vocab < 2 {
        return Err(HarnessError::Config(format!("vocab must be >= 2, got {vocab}")));
    }
    if !(1..=2).contains(&order) {
        return Err(HarnessError::Config(format!("order must be 1 or 2, got {order}")));
    }
    Ok(())
}

fn row_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

impl MarkovSource {
    /// Transition rows drawn from a symmetric Dirichlet. Rows that come out
    /// deterministic or exactly uniform are redrawn, which keeps the entropy
    /// rate strictly inside `(0, ln vocab)`.
    pub fn random(seed: u64, vocab: usize, order: usize, concentration: f64) -> Result<Self> {
        validate_shape(vocab, order)?;
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| HarnessError::Config(format!("concentration {concentration}: {e}")))?;
        let mut rng = Rng::new(seed).split(0xDA7A);
        let contexts = vocab.pow(order as u32);
        let max_h = (vocab as f64).ln();
        let table = (0..contexts)
            .map(|_| loop {
                let draws: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                if total > 0.0 && total.is_finite() {
                    let row: Vec<f64> = draws.iter().map(|g| g / total).collect();
                    let h = row_entropy(&row);
                    if h > 1e-9 && h < max_h - 1e-9 {
                        break row;
                    }
                }
            })
            .collect();
        Ok(Self { vocab, order, table })
    }

    pub fn from_table(vocab: usize, order: usize, table: Vec<Vec<f64>>) -> Result<Self> {
        validate_shape(vocab, order)?;
        if table.len() != vocab.pow(order as u32) {
            return Err(HarnessError::Config(format!(
                "transition table needs {} rows, got {}",
                vocab.pow(order as u32),
                table.len()
            )));
        }
        for (c, row) in table.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.len() != vocab || row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-9 {
                return Err(HarnessError::Config(format!("transition row {c} is not a distribution")));
            }
        }
        Ok(Self { vocab, order, table })
    }

    fn context(&self, history: &[usize]) -> usize {
        history[history.len() - self.order..]
            .iter()
            .fold(0, |acc, &t| acc * self.vocab + t)
    }

    fn sample_row(row: &[f64], u: f64) -> usize {
        let mut acc = 0.0;
        for (i, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        row.len() - 1
    }

    /// `length` tokens; the first `order` tokens are uniform.
    pub fn generate(&self, seed: u64, length: usize) -> Vec<usize> {
        let mut rng = Rng::new(seed).split(0xC0DE);
        let mut out = Vec::with_capacity(length);
        for _ in 0..self.order.min(length) {
            out.push(rng.below(self.vocab));
        }
        while out.len() < length {
            let row = &self.table[self.context(&out)];
            out.push(Self::sample_row(row, rng.uniform()));
        }
        out
    }

    /// Mean `−ln p(t | context)` of the true chain over every token that has
    /// a full context.
    pub fn corpus_cross_entropy(&self, tokens: &[usize]) -> f64 {
        if tokens.len() <= self.order {
            return f64::NAN;
        }
        let total: f64 = (self.order..tokens.len())
            .map(|i| -self.table[self.context(&tokens[..i])][tokens[i]].ln())
            .sum();
        total / (tokens.len() - self.order) as f64
    }

    /// Stationary entropy rate `Σ_c π(c) H(row_c)`, with `π` from power
    /// iteration on the context chain.
    pub fn entropy_rate(&self) -> f64 {
        let contexts = self.table.len();
        let mut pi = vec![1.0 / contexts as f64; contexts];
        for _ in 0..10_000 {
            let mut next = vec![0.0; contexts];
            for (c, &mass) in pi.iter().enumerate() {
                let last = c % self.vocab;
                for (t, &p) in self.table[c].iter().enumerate() {
                    let to = if self.order == 1 { t } else { last * self.vocab + t };
                    next[to] += mass * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-14 {
                break;
            }
        }
        pi.iter().zip(&self.table).map(|(m, row)| m * row_entropy(row)).sum()
    }
}

/// Fixed-length training windows drawn from a token stream.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

impl Corpus {
    /// Splits off the last `valid_fraction` of `tokens` for evaluation.
    pub fn split(tokens: Vec<usize>, valid_fraction: f64) -> Self {
        let cut = ((tokens.len() as f64) * (1.0 - valid_fraction)).round() as usize;
        let mut train = tokens;
        let valid = train.split_off(cut.min(train.len()));
        Self { train, valid }
    }

    /// `count` random windows of `len + 1` tokens from the training split,
    /// returned as (inputs, targets).
    pub fn sample_batch(&self, rng: &mut Rng, count: usize, len: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        windows(&self.train, (0..count).map(|_| rng.below(self.train.len() - len)), len)
    }

    /// `count` evenly spaced windows from the validation split.
    pub fn eval_batch(&self, count: usize, len: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let span = self.valid.len() - len - 1;
        windows(&self.valid, (0..count).map(|i| i * span / count.max(1)), len)
    }
}

fn windows(
    tokens: &[usize],
    starts: impl Iterator<Item = usize>,
    len: usize,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    starts
        .map(|s| (tokens[s..s + len].to_vec(), tokens[s + 1..s + len + 1].to_vec()))
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let src = MarkovSource::random(3, 8, 2, DEFAULT_CONCENTRATION).unwrap();
        assert_eq!(src, MarkovSource::random(3, 8, 2, DEFAULT_CONCENTRATION).unwrap());
        assert_eq!(src.generate(1, 500), src.generate(1, 500));
        assert_ne!(src.generate(1, 500), src.generate(2, 500));
    }

    #[test]
    fn entropy_strictly_inside_bounds() {
        for order in [1, 2] {
            let src = MarkovSource::random(11, 16, order, DEFAULT_CONCENTRATION).unwrap();
            let h = src.entropy_rate();
            assert!(h > 0.0 && h < 16f64.ln(), "{h}");
        }
    }

    #[test]
    fn sticky_chain_stay_rate() {
        let table = vec![vec![0.99, 0.01], vec![0.01, 0.99]];
        let src = MarkovSource::from_table(2, 1, table).unwrap();
        let t = src.generate(5, 100_000);
        let stays = t.windows(2).filter(|w| w[0] == w[1]).count() as f64 / (t.len() - 1) as f64;
        assert!((stays - 0.99).abs() < 0.01, "{stays}");
    }

    #[test]
    fn empirical_cross_entropy_matches_entropy_rate() {
        let src = MarkovSource::random(2, 6, 1, DEFAULT_CONCENTRATION).unwrap();
        let t = src.generate(9, 200_000);
        assert!((src.corpus_cross_entropy(&t) - src.entropy_rate()).abs() < 0.02);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(MarkovSource::random(0, 1, 1, 0.3).is_err());
        assert!(MarkovSource::random(0, 4, 3, 0.3).is_err());
        assert!(MarkovSource::random(0, 4, 1, 0.0).is_err());
        assert!(MarkovSource::from_table(2, 1, vec![vec![0.5, 0.4], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn windows_are_shifted_by_one() {
        let c = Corpus::split((0..100).collect(), 0.2);
        assert_eq!(c.train.len(), 80);
        let mut rng = Rng::new(0);
        let (i, t) = c.sample_batch(&mut rng, 4, 10);
        for (a, b) in i.iter().zip(&t) {
            assert_eq!(a.len(), 10);
            assert!(a.iter().zip(b).all(|(x, y)| y - x == 1));
        }
        let (i, _) = c.eval_batch(3, 5);
        assert_eq!(i[0][0], 80);
    }
}
