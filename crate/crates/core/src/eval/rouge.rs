use serde::{Deserialize, Serialize};

use crate::vocab::{Sequence, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeLScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeLScore {
    pub const ZERO: RougeLScore = RougeLScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L over raw token lists.
pub fn rouge_l_tokens(candidate: &[TokenId], reference: &[TokenId]) -> RougeLScore {
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return RougeLScore::ZERO;
    }
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    RougeLScore {
        precision,
        recall,
        f1: 2.0 * precision * recall / (precision + recall),
    }
}

/// ROUGE-L between two sequences, ignoring BOS and EOS.
pub fn rouge_l(candidate: &Sequence, reference: &Sequence, vocab: &Vocabulary) -> RougeLScore {
    rouge_l_tokens(candidate.content(vocab), reference.content(vocab))
}
