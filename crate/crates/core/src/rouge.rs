//! ROUGE-L F1 over whitespace-separated, case-folded words.

/// Length of the longest common subsequence, `O(|a|·|b|)` time, `O(|b|)` space.
pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// `F = 2PR/(P+R)` with `P = LCS/|cand|`, `R = LCS/|ref|`; 0 if either side
/// has no words or nothing matches.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rc = lcs / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_one() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert_eq!(rouge_l("", "c d"), 0.0);
        assert_eq!(rouge_l("a", ""), 0.0);
    }

    #[test]
    fn partial_overlap() {
        assert!((rouge_l("the cat sat", "the cat sat down") - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn case_and_whitespace_folded() {
        assert_eq!(rouge_l("The  CAT\tsat", "the cat sat"), 1.0);
    }
}
