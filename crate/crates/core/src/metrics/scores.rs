use std::collections::HashMap;

use super::FrameSpan;
use crate::corpus::AsrOutput;
use crate::error::{Error, Result};

/// 1 when the token sequences are identical, else 0.
pub fn exact_match(pred: &[usize], gold: &[usize]) -> f64 {
    f64::from(u8::from(pred == gold))
}

/// Harmonic mean of precision and recall over token multisets.
pub fn token_f1(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::contract("token F1 against an empty gold answer"));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return Ok(0.0);
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

fn check_gold(gold: &FrameSpan) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::contract(format!("degenerate gold span [{}, {})", gold.start, gold.end)));
    }
    Ok(())
}

/// Frame-set F1 of two half-open spans; a degenerate prediction scores 0.
pub fn frame_f1(pred: &FrameSpan, gold: &FrameSpan) -> Result<f64> {
    check_gold(gold)?;
    let inter = pred.intersection_len(gold);
    if inter == 0 {
        return Ok(0.0);
    }
    let p = inter as f64 / pred.len() as f64;
    let r = inter as f64 / gold.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Audio overlapping score: intersection over union of the frame sets.
pub fn aos(pred: &FrameSpan, gold: &FrameSpan) -> Result<f64> {
    check_gold(gold)?;
    Ok(pred.intersection_len(gold) as f64 / pred.union_len(gold) as f64)
}

/// Frame interval covered by words `i..=j` of a segmentation.
pub fn span_tokens_to_frames(span: (usize, usize), boundaries: &[FrameSpan]) -> Result<FrameSpan> {
    let (i, j) = span;
    if i > j || j >= boundaries.len() {
        return Err(Error::Index(format!(
            "span ({i}, {j}) outside {} words",
            boundaries.len()
        )));
    }
    Ok(FrameSpan {
        start: boundaries[i].start,
        end: boundaries[j].end,
    })
}

/// Transcript words whose interval midpoint falls inside `span`: the text a
/// time-span prediction reads as.
pub fn transcript_tokens_in(asr: &AsrOutput, span: &FrameSpan) -> Vec<usize> {
    asr.tokens
        .iter()
        .zip(&asr.boundaries)
        .filter(|(_, b)| {
            let twice_mid = b.start + b.end;
            twice_mid >= 2 * span.start && twice_mid < 2 * span.end
        })
        .map(|(&t, _)| t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fs(start: usize, end: usize) -> FrameSpan {
        FrameSpan { start, end }
    }

    fn frame_sets(p: &FrameSpan, g: &FrameSpan) -> (f64, f64, f64) {
        let inter = (0..200).filter(|f| (p.start..p.end).contains(f) && (g.start..g.end).contains(f)).count();
        let union = (0..200).filter(|f| (p.start..p.end).contains(f) || (g.start..g.end).contains(f)).count();
        (inter as f64, union as f64, (p.end - p.start) as f64)
    }

    #[test]
    fn frame_metric_examples() {
        assert_eq!(frame_f1(&fs(3, 9), &fs(3, 9)).unwrap(), 1.0);
        assert_eq!(frame_f1(&fs(5, 15), &fs(10, 20)).unwrap(), 0.5);
        assert_eq!(frame_f1(&fs(0, 4), &fs(4, 8)).unwrap(), 0.0);
        assert_eq!(frame_f1(&fs(6, 6), &fs(4, 8)).unwrap(), 0.0);
        assert_eq!(aos(&fs(3, 9), &fs(3, 9)).unwrap(), 1.0);
        assert!((aos(&fs(5, 15), &fs(10, 20)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(aos(&fs(0, 4), &fs(4, 8)).unwrap(), 0.0);
        assert!(matches!(frame_f1(&fs(0, 4), &fs(2, 2)), Err(Error::Contract(_))));
        assert!(matches!(aos(&fs(0, 4), &fs(2, 2)), Err(Error::Contract(_))));
    }

    #[test]
    fn frame_metrics_match_frame_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let a = rng.gen_range(0..100);
            let p = fs(a, a + rng.gen_range(0..60));
            let b = rng.gen_range(0..100);
            let g = fs(b, b + rng.gen_range(1..60));
            let (inter, union, plen) = frame_sets(&p, &g);
            let f1 = if inter == 0.0 {
                0.0
            } else {
                let pr = inter / plen;
                let rc = inter / g.len() as f64;
                2.0 * pr * rc / (pr + rc)
            };
            let got_f1 = frame_f1(&p, &g).unwrap();
            let got_aos = aos(&p, &g).unwrap();
            assert!((got_f1 - f1).abs() <= 1e-12);
            assert!((got_aos - inter / union).abs() <= 1e-12);
            assert!((0.0..=1.0).contains(&got_f1) && (0.0..=1.0).contains(&got_aos));
            assert_eq!(got_f1 == 1.0, p == g);
            assert_eq!(got_aos == 1.0, p == g);
            assert_eq!(got_f1 == 0.0, inter == 0.0);
            assert_eq!(got_aos == 0.0, inter == 0.0);
        }
    }

    #[test]
    fn token_metric_examples() {
        assert_eq!(exact_match(&[5, 6], &[5, 6]), 1.0);
        assert_eq!(exact_match(&[5, 6], &[5, 6, 7]), 0.0);
        assert_eq!(token_f1(&[5, 6], &[5, 6]).unwrap(), 1.0);
        assert_eq!(token_f1(&[5, 6], &[7, 8]).unwrap(), 0.0);
        assert_eq!(token_f1(&[], &[7, 8]).unwrap(), 0.0);
        assert!((token_f1(&[10, 11, 12], &[11, 12, 13]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(token_f1(&[1], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn token_metrics_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let pred: Vec<usize> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..4)).collect();
            let gold: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..4)).collect();
            let same = pred.len() == gold.len() && pred.iter().zip(&gold).all(|(a, b)| a == b);
            assert_eq!(exact_match(&pred, &gold), if same { 1.0 } else { 0.0 });
            // multiset intersection via per-symbol minimum counts
            let common: usize = (0..4)
                .map(|s| pred.iter().filter(|&&t| t == s).count().min(gold.iter().filter(|&&t| t == s).count()))
                .sum();
            let want = if common == 0 {
                0.0
            } else {
                2.0 * common as f64 / (pred.len() + gold.len()) as f64
            };
            assert!((token_f1(&pred, &gold).unwrap() - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn span_to_frames_examples() {
        let b = [fs(0, 7), fs(7, 12), fs(12, 20)];
        assert_eq!(span_tokens_to_frames((0, 0), &b).unwrap(), fs(0, 7));
        assert_eq!(span_tokens_to_frames((1, 2), &b).unwrap(), fs(7, 20));
        assert!(matches!(span_tokens_to_frames((1, 3), &b), Err(Error::Index(_))));
        assert!(matches!(span_tokens_to_frames((2, 1), &b), Err(Error::Index(_))));
    }

    #[test]
    fn span_to_frames_is_the_union_of_member_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.gen_range(1..15);
            let mut b = Vec::new();
            let mut at = rng.gen_range(0..3);
            for _ in 0..n {
                let len = rng.gen_range(1..9);
                b.push(fs(at, at + len));
                at += len + rng.gen_range(0..2);
            }
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(i..n);
            let got = span_tokens_to_frames((i, j), &b).unwrap();
            let lo = (i..=j).map(|k| b[k].start).min().unwrap();
            let hi = (i..=j).map(|k| b[k].end).max().unwrap();
            assert_eq!(got, fs(lo, hi));
            assert!(got.start <= got.end);
        }
    }
}
