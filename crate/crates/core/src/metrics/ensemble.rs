use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::speech_bert::select_span_log;

/// Probability floor for positions a system assigns (almost) no mass to.
pub const FLOOR_PROB: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub start_scores: Vec<f64>,
    pub end_scores: Vec<f64>,
    pub span: (usize, usize),
}

fn floored_ln(p: f64) -> f64 {
    p.max(FLOOR_PROB).ln()
}

fn combine(audio: &[f64], cascade: &[f64], alignment: &[usize]) -> Vec<f64> {
    let mut mass = vec![0.0; audio.len()];
    for (&k, &p) in alignment.iter().zip(cascade) {
        mass[k] += p;
    }
    audio
        .iter()
        .zip(&mass)
        .map(|(&a, &c)| 0.5 * (floored_ln(a) + floored_ln(c)))
        .collect()
}

/// Average the two systems' log start and end probabilities over audio
/// positions and decode. `alignment[c]` is the audio position of cascade
/// token `c`; several tokens mapped to one position pool their mass.
pub fn ensemble_predict(
    audio_start: &[f64],
    audio_end: &[f64],
    cascade_start: &[f64],
    cascade_end: &[f64],
    alignment: &[usize],
    max_span_len: usize,
) -> Result<EnsemblePrediction> {
    if alignment.is_empty() {
        return Err(Error::data("empty alignment between cascade tokens and audio words"));
    }
    if cascade_start.len() != alignment.len() || cascade_end.len() != alignment.len() {
        return Err(Error::shape(format!(
            "{} aligned tokens but cascade distributions of length {} and {}",
            alignment.len(),
            cascade_start.len(),
            cascade_end.len()
        )));
    }
    if audio_start.len() != audio_end.len() {
        return Err(Error::shape("audio start and end distributions differ in length"));
    }
    if let Some(&k) = alignment.iter().find(|&&k| k >= audio_start.len()) {
        return Err(Error::Index(format!(
            "alignment target {k} outside {} audio words",
            audio_start.len()
        )));
    }
    let start_scores = combine(audio_start, cascade_start, alignment);
    let end_scores = combine(audio_end, cascade_end, alignment);
    let span = select_span_log(&start_scores, &end_scores, max_span_len)?;
    Ok(EnsemblePrediction {
        start_scores,
        end_scores,
        span,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speech_bert::select_span;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3) + 1e-6).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    }

    #[test]
    fn identical_systems_agree_with_either() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.gen_range(1..20);
            let s = dist(n, &mut rng);
            let e = dist(n, &mut rng);
            let id: Vec<usize> = (0..n).collect();
            let got = ensemble_predict(&s, &e, &s, &e, &id, 8).unwrap();
            assert_eq!(got.span, select_span(&s, &e, 8).unwrap());
        }
    }

    #[test]
    fn uniform_system_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let n = rng.gen_range(1..20);
            let s = dist(n, &mut rng);
            let e = dist(n, &mut rng);
            let u = vec![1.0 / n as f64; n];
            let id: Vec<usize> = (0..n).collect();
            let want = select_span(&s, &e, 8).unwrap();
            assert_eq!(ensemble_predict(&s, &e, &u, &u, &id, 8).unwrap().span, want);
            assert_eq!(ensemble_predict(&u, &u, &s, &e, &id, 8).unwrap().span, want);
        }
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.gen_range(1..16);
            let m = rng.gen_range(1..20);
            let max_len = rng.gen_range(1..6);
            let (as_, ae) = (dist(n, &mut rng), dist(n, &mut rng));
            let (cs, ce) = (dist(m, &mut rng), dist(m, &mut rng));
            let mut alignment: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            alignment.sort_unstable();
            let got = ensemble_predict(&as_, &ae, &cs, &ce, &alignment, max_len).unwrap();
            // per audio word, gather its cascade mass by scanning all tokens
            let score = |a: &[f64], c: &[f64], k: usize| {
                let mass: f64 = (0..m).filter(|&t| alignment[t] == k).map(|t| c[t]).sum();
                let lc = if mass > 0.0 { mass.ln().max((1e-9f64).ln()) } else { (1e-9f64).ln() };
                0.5 * (a[k].ln().max((1e-9f64).ln()) + lc)
            };
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..n {
                for j in i..n {
                    if j - i >= max_len {
                        continue;
                    }
                    let v = score(&as_, &cs, i) + score(&ae, &ce, j);
                    if best.map_or(true, |b| v > b.0) {
                        best = Some((v, i, j));
                    }
                }
            }
            let (_, i, j) = best.unwrap();
            assert_eq!(got.span, (i, j));
            for k in 0..n {
                assert!((got.start_scores[k] - score(&as_, &cs, k)).abs() <= 1e-12);
                assert!((got.end_scores[k] - score(&ae, &ce, k)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn missing_positions_take_the_floor() {
        let a = [0.5, 0.5];
        let got = ensemble_predict(&a, &a, &[1.0], &[1.0], &[1], 8).unwrap();
        assert!((got.start_scores[0] - 0.5 * (0.5f64.ln() + (1e-9f64).ln())).abs() < 1e-15);
        assert_eq!(got.span, (1, 1));
    }

    #[test]
    fn malformed_inputs() {
        let a = [0.5, 0.5];
        assert!(matches!(ensemble_predict(&a, &a, &[], &[], &[], 8), Err(Error::Data(_))));
        assert!(matches!(ensemble_predict(&a, &a, &[1.0], &[1.0], &[2], 8), Err(Error::Index(_))));
        assert!(matches!(ensemble_predict(&a, &a, &[1.0], &[1.0], &[0, 1], 8), Err(Error::Shape(_))));
    }
}
