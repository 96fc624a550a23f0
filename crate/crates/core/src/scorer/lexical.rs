use std::collections::BTreeSet;

use super::{BinomialRelevance, RelevanceScorer, ScorerError};
use crate::corpus::normalize;

/// Parameter-free reference scorer: `p1 = (1 + J) / 2` where `J` is the
/// Jaccard overlap of the two texts' normalized word sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapScorer;

impl LexicalOverlapScorer {
    pub fn jaccard(a: &str, b: &str) -> f64 {
        let a: BTreeSet<String> = normalize(a).into_iter().collect();
        let b: BTreeSet<String> = normalize(b).into_iter().collect();
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }
}

impl RelevanceScorer for LexicalOverlapScorer {
    fn relevance(&self, query: &str, reference: &str) -> Result<BinomialRelevance, ScorerError> {
        let p1 = (1.0 + Self::jaccard(query, reference)) / 2.0;
        Ok(BinomialRelevance { p1, p0: 1.0 - p1 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn overlap_values() {
        let s = LexicalOverlapScorer;
        assert_eq!(s.score("a b c", "A, b! c.").unwrap(), 1.0);
        assert_eq!(s.score("a b", "c d").unwrap(), 0.0);
        assert!((s.score("a b c", "b c d").unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(s.score("", "").unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn self_score_is_one_and_symmetric(a in "[a-f]{1,3}( [a-f]{1,3}){0,6}", b in "[a-f ]{0,20}") {
            let s = LexicalOverlapScorer;
            prop_assert_eq!(s.score(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(s.score(&a, &b).unwrap(), s.score(&b, &a).unwrap());
            let r = s.relevance(&a, &b).unwrap();
            prop_assert!((r.p1 + r.p0 - 1.0).abs() < 1e-12 && r.p0 >= 0.0);
        }
    }
}
