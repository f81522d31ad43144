use super::{ConditionalModel, LanguageModel, NGramLM};
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::vocab::{Sequence, Vocabulary};

/// Source-conditioned toy summarizer: `alpha * copy + (1 - alpha) * lm`,
/// where `copy` is the unigram distribution of the source's content tokens
/// with one extra count on EOS.
#[derive(Debug, Clone)]
pub struct CopyMixtureModel {
    alpha: f64,
    background: NGramLM,
}

impl CopyMixtureModel {
    pub fn new(alpha: f64, background: NGramLM) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidModel(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(CopyMixtureModel { alpha, background })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn background(&self) -> &NGramLM {
        &self.background
    }

    pub fn copy_weights(&self, source: &Sequence) -> Vec<f64> {
        let vocab = self.background.vocabulary();
        let content = source.content(vocab);
        let total = (content.len() + 1) as f64;
        let mut w = vec![0.0; vocab.len()];
        for &id in content {
            w[id as usize] += 1.0;
        }
        w[vocab.eos() as usize] += 1.0;
        w.iter_mut().for_each(|x| *x /= total);
        w
    }
}

impl LanguageModel for CopyMixtureModel {
    fn vocabulary(&self) -> &Vocabulary {
        self.background.vocabulary()
    }
}

impl ConditionalModel for CopyMixtureModel {
    fn cond_dist(&self, source: &Sequence, prefix: &Sequence) -> Result<Distribution> {
        source.check_prefix(self.vocabulary())?;
        if self.alpha == 0.0 {
            return self.background.next_dist(prefix);
        }
        let copy = self.copy_weights(source);
        if self.alpha == 1.0 {
            prefix.check_prefix(self.vocabulary())?;
            return Distribution::from_weights(&copy);
        }
        let bg = self.background.next_dist(prefix)?;
        let mixed: Vec<f64> = copy
            .iter()
            .zip(bg.probs())
            .map(|(c, b)| self.alpha * c + (1.0 - self.alpha) * b)
            .collect();
        Distribution::from_weights(&mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn background() -> NGramLM {
        let vocab = Vocabulary::with_words(["a", "b", "c"]).unwrap();
        let mut lm = NGramLM::new(vocab, 2, 1.0).unwrap();
        lm.observe_sequence(&[0, 2, 4, 1]);
        lm.observe_sequence(&[0, 4, 4, 3, 1]);
        lm
    }

    #[test]
    fn pure_copy_distribution() {
        let m = CopyMixtureModel::new(1.0, background()).unwrap();
        let src = m.vocabulary().encode("a a b", false).unwrap();
        let d = m.cond_dist(&src, &Sequence::new(vec![0])).unwrap();
        assert!((d.prob(2) - 0.5).abs() < 1e-12);
        assert!((d.prob(3) - 0.25).abs() < 1e-12);
        assert!((d.prob(1) - 0.25).abs() < 1e-12);
        assert_eq!(d.prob(4), 0.0);
    }

    #[test]
    fn alpha_zero_is_background() {
        let bg = background();
        let m = CopyMixtureModel::new(0.0, bg.clone()).unwrap();
        let src = m.vocabulary().encode("a a b", false).unwrap();
        let prefix = Sequence::new(vec![0, 2]);
        assert_eq!(m.cond_dist(&src, &prefix).unwrap(), bg.next_dist(&prefix).unwrap());
    }

    #[test]
    fn half_mixture_averages_probabilities() {
        let bg = background();
        let src = bg.vocabulary().encode("a a b", false).unwrap();
        let prefix = Sequence::new(vec![0, 4]);
        let copy = CopyMixtureModel::new(1.0, bg.clone())
            .unwrap()
            .cond_dist(&src, &prefix)
            .unwrap();
        let back = bg.next_dist(&prefix).unwrap();
        let half = CopyMixtureModel::new(0.5, bg)
            .unwrap()
            .cond_dist(&src, &prefix)
            .unwrap();
        for id in 0..5 {
            let expect = 0.5 * copy.prob(id) + 0.5 * back.prob(id);
            assert!((half.prob(id) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_source_copies_eos() {
        let m = CopyMixtureModel::new(1.0, background()).unwrap();
        let d = m.cond_dist(&Sequence::new(vec![0]), &Sequence::new(vec![0])).unwrap();
        assert_eq!(d.prob(1), 1.0);
    }

    #[test]
    fn rejects_bad_alpha() {
        assert!(CopyMixtureModel::new(1.5, background()).is_err());
        assert!(CopyMixtureModel::new(f64::NAN, background()).is_err());
    }
}
