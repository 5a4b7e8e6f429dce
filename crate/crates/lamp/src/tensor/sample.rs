//! Categorical sampling from logits.
//!
//! Probabilities are formed in f64 from f32 logits so the inverse-CDF walk
//! is stable; draws consume exactly one `f64` from the RNG each, keeping
//! streams reproducible.

use crate::error::{Error, Result};
use rand::Rng;

/// One sampled index together with its log-probability at draw time. For
/// draws without replacement the distribution is renormalized over the
/// remaining support before each draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub index: usize,
    pub log_prob: f64,
}

/// Softmax of logits in f64 (max-shifted).
pub fn softmax_probs(logits: &[f32]) -> Vec<f64> {
    let m = logits
        .iter()
        .cloned()
        .fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut p: Vec<f64> = logits.iter().map(|&x| ((x as f64) - m).exp()).collect();
    let z: f64 = p.iter().sum();
    for x in &mut p {
        *x /= z;
    }
    p
}

/// Entropy (nats) of the softmax distribution.
pub fn entropy_of_logits(logits: &[f32]) -> f64 {
    softmax_probs(logits)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Draws `n_draws` category indices from softmax(logits). With
/// `without_replacement`, each drawn index is removed and the remainder
/// renormalized; `n_draws` may not exceed the support size in that mode.
pub fn categorical_sample(
    logits: &[f32],
    n_draws: usize,
    without_replacement: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Draw>> {
    if logits.is_empty() {
        return Err(Error::invalid("categorical_sample over empty support"));
    }
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("categorical_sample logits".into()));
    }
    if without_replacement && n_draws > logits.len() {
        return Err(Error::invalid(format!(
            "{} draws without replacement from support of {}",
            n_draws,
            logits.len()
        )));
    }
    let mut p = softmax_probs(logits);
    let mut alive = vec![true; p.len()];
    let mut mass = 1.0f64;
    let mut out = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let r: f64 = rng.gen::<f64>() * mass;
        let mut acc = 0.0f64;
        let mut pick = None;
        for (i, &pi) in p.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            acc += pi;
            if r < acc {
                pick = Some(i);
                break;
            }
        }
        // Guard the open end of the interval against accumulated round-off.
        let pick = pick.unwrap_or_else(|| {
            alive
                .iter()
                .rposition(|&a| a)
                .expect("support exhausted")
        });
        out.push(Draw {
            index: pick,
            log_prob: (p[pick] / mass).ln(),
        });
        if without_replacement {
            alive[pick] = false;
            mass -= p[pick];
            p[pick] = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frequencies_match_softmax_within_three_sigma() {
        let logits = [0.0f32, 1.0, -0.5, 2.0];
        let p = softmax_probs(&logits);
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let d = categorical_sample(&logits, 1, false, &mut rng).unwrap();
            counts[d[0].index] += 1;
        }
        for i in 0..4 {
            let exp = p[i] * n as f64;
            let sigma = (n as f64 * p[i] * (1.0 - p[i])).sqrt();
            let dev = (counts[i] as f64 - exp).abs();
            assert!(
                dev <= 3.0 * sigma,
                "category {}: count {} expected {:.0} (3 sigma = {:.0})",
                i,
                counts[i],
                exp,
                3.0 * sigma
            );
        }
    }

    #[test]
    fn without_replacement_never_repeats_and_renormalizes() {
        let logits = [1.0f32, 0.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let draws = categorical_sample(&logits, 3, true, &mut rng).unwrap();
            let mut seen: Vec<usize> = draws.iter().map(|d| d.index).collect();
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2]);
            // Last draw is forced: log-prob must be 0 (prob 1).
            assert!(draws[2].log_prob.abs() < 1e-9);
        }
    }

    #[test]
    fn draw_log_prob_agrees_with_softmax() {
        let logits = [0.3f32, -1.2, 0.8];
        let p = softmax_probs(&logits);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = categorical_sample(&logits, 5, false, &mut rng).unwrap();
        for draw in d {
            assert!((draw.log_prob - p[draw.index].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_of_uniform_is_log_n() {
        let h = entropy_of_logits(&[0.5f32; 8]);
        assert!((h - (8.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_draws() {
        let logits = [0.1f32, 0.9, -0.4, 0.0, 2.0];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            categorical_sample(&logits, 64, false, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }
}
