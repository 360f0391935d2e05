//! Multi-index algebra and enumeration of the hierarchical and remainder
//! sets that organize iterated integrals and operator compositions.
//!
//! A multi-index is a finite word over the label set `S0 = {0, 1, .., d_v}`
//! (`S1` excludes 0). Length `|a|` counts components, `|a|_0` counts zeros.
//! Enumeration order is length-then-lexicographic throughout so coefficient
//! tables and goldens are stable.

use std::fmt;
use thiserror::Error;

/// Hard caps: table sizes grow as `(d_v + 1)^m`, so exceeding these is a
/// configuration error rather than something to truncate silently.
pub const MAX_DV: usize = 8;
pub const MAX_ORDER: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum MultiIndexError {
    #[error("d_v = {d_v} exceeds the supported maximum {MAX_DV}")]
    DvTooLarge { d_v: usize },
    #[error("order m = {m} exceeds the supported maximum {MAX_ORDER}")]
    OrderTooLarge { m: usize },
    #[error("the band of lengths [2, m-1] requires m >= 3 (got m = {m})")]
    BandUndefined { m: usize },
}

/// A finite sequence over `{0, .., d_v}`; the empty sequence is written `()`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<u8>);

impl MultiIndex {
    /// The zero-length multi-index.
    pub fn empty() -> Self {
        MultiIndex(Vec::new())
    }

    pub fn new(components: impl Into<Vec<u8>>) -> Self {
        MultiIndex(components.into())
    }

    pub fn components(&self) -> &[u8] {
        &self.0
    }

    /// `|a|`
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `|a|_0`, the number of zero components.
    pub fn zero_count(&self) -> usize {
        self.0.iter().filter(|&&c| c == 0).count()
    }

    /// `a-`: remove the last component; the empty index maps to itself.
    pub fn drop_last(&self) -> Self {
        let mut v = self.0.clone();
        v.pop();
        MultiIndex(v)
    }

    /// `-a`: remove the first component; the empty index maps to itself.
    pub fn drop_first(&self) -> Self {
        if self.0.is_empty() {
            return MultiIndex::empty();
        }
        MultiIndex(self.0[1..].to_vec())
    }

    /// Concatenation `a * b`.
    pub fn concat(&self, other: &Self) -> Self {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        MultiIndex(v)
    }

    /// Last component, if any.
    pub fn last(&self) -> Option<u8> {
        self.0.last().copied()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

fn check_caps(m: usize, d_v: usize) -> Result<(), MultiIndexError> {
    if d_v == 0 || d_v > MAX_DV {
        return Err(MultiIndexError::DvTooLarge { d_v });
    }
    if m > MAX_ORDER {
        return Err(MultiIndexError::OrderTooLarge { m });
    }
    Ok(())
}

fn push_all_of_length(out: &mut Vec<MultiIndex>, len: usize, labels: &[u8]) {
    // lexicographic enumeration of words of a fixed length
    let mut word = vec![labels[0]; len];
    let mut slots = vec![0usize; len];
    if len == 0 {
        out.push(MultiIndex::empty());
        return;
    }
    loop {
        out.push(MultiIndex(word.clone()));
        let mut i = len;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if slots[i] + 1 < labels.len() {
                slots[i] += 1;
                word[i] = labels[slots[i]];
                for j in i + 1..len {
                    slots[j] = 0;
                    word[j] = labels[0];
                }
                break;
            }
        }
    }
}

/// All multi-indices of length `<= m` over `S0 = {0..d_v}` (or `S1 = {1..d_v}`
/// when `include_zero` is off), in length-then-lexicographic order. The empty
/// index comes first.
pub fn enumerate_m(
    m: usize,
    d_v: usize,
    include_zero: bool,
) -> Result<Vec<MultiIndex>, MultiIndexError> {
    check_caps(m, d_v)?;
    let labels: Vec<u8> = if include_zero {
        (0..=d_v as u8).collect()
    } else {
        (1..=d_v as u8).collect()
    };
    let mut out = Vec::new();
    for len in 0..=m {
        push_all_of_length(&mut out, len, &labels);
    }
    Ok(out)
}

/// The remainder set of the length-`<= m` hierarchy: all indices of exactly
/// length `m + 1` over `S0`; size `(d_v + 1)^(m+1)`.
pub fn remainder_set(m: usize, d_v: usize) -> Result<Vec<MultiIndex>, MultiIndexError> {
    check_caps(m, d_v)?;
    let labels: Vec<u8> = (0..=d_v as u8).collect();
    let mut out = Vec::new();
    push_all_of_length(&mut out, m + 1, &labels);
    Ok(out)
}

/// The band of lengths `[2, m-1]` over `S0`: the indices carrying the
/// high-order correction terms that require taming (defined for `m >= 3`).
pub fn m1_band(m: usize, d_v: usize) -> Result<Vec<MultiIndex>, MultiIndexError> {
    if m < 3 {
        return Err(MultiIndexError::BandUndefined { m });
    }
    check_caps(m, d_v)?;
    let labels: Vec<u8> = (0..=d_v as u8).collect();
    let mut out = Vec::new();
    for len in 2..=m - 1 {
        push_all_of_length(&mut out, len, &labels);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mi(c: &[u8]) -> MultiIndex {
        MultiIndex::new(c)
    }

    #[test]
    fn drop_last_cases() {
        assert_eq!(mi(&[1, 0, 2]).drop_last(), mi(&[1, 0]));
        assert_eq!(MultiIndex::empty().drop_last(), MultiIndex::empty());
        assert_eq!(mi(&[0]).drop_last(), MultiIndex::empty());
    }

    #[test]
    fn drop_first_cases() {
        assert_eq!(mi(&[1, 0, 2]).drop_first(), mi(&[0, 2]));
        assert_eq!(MultiIndex::empty().drop_first(), MultiIndex::empty());
        assert_eq!(mi(&[2]).drop_first(), MultiIndex::empty());
    }

    #[test]
    fn concat_cases() {
        assert_eq!(mi(&[1]).concat(&mi(&[0, 2])), mi(&[1, 0, 2]));
        let a = mi(&[2, 1]);
        assert_eq!(MultiIndex::empty().concat(&a), a);
        assert_eq!(a.concat(&MultiIndex::empty()), a);
    }

    #[test]
    fn concat_length_additivity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        for _ in 0..200 {
            let d_v = rng.random_range(1..=3u8);
            let draw = |rng: &mut rand_chacha::ChaCha12Rng| {
                let len = rng.random_range(0..=4usize);
                MultiIndex::new(
                    (0..len)
                        .map(|_| rng.random_range(0..=d_v))
                        .collect::<Vec<u8>>(),
                )
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let c = a.concat(&b);
            assert_eq!(c.len(), a.len() + b.len());
            assert_eq!(c.zero_count(), a.zero_count() + b.zero_count());
        }
    }

    #[test]
    fn enumerate_small() {
        let set = enumerate_m(1, 1, true).unwrap();
        assert_eq!(set, vec![MultiIndex::empty(), mi(&[0]), mi(&[1])]);
        assert_eq!(enumerate_m(2, 1, true).unwrap().len(), 7); // 1 + 2 + 4
        assert_eq!(enumerate_m(0, 3, true).unwrap(), vec![MultiIndex::empty()]);
    }

    #[test]
    fn enumerate_excluding_zero() {
        let set = enumerate_m(2, 2, false).unwrap();
        // 1 + 2 + 4 words over {1,2}
        assert_eq!(set.len(), 7);
        assert!(set.iter().all(|a| a.zero_count() == 0));
    }

    #[test]
    fn enumeration_is_length_then_lex() {
        let set = enumerate_m(2, 2, true).unwrap();
        for w in set.windows(2) {
            let key = |a: &MultiIndex| (a.len(), a.components().to_vec());
            assert!(key(&w[0]) < key(&w[1]), "{} !< {}", w[0], w[1]);
        }
    }

    #[test]
    fn remainder_small() {
        assert_eq!(remainder_set(0, 1).unwrap(), vec![mi(&[0]), mi(&[1])]);
        assert_eq!(remainder_set(1, 2).unwrap().len(), 9);
    }

    #[test]
    fn remainder_zero_count_partition() {
        let r = remainder_set(1, 1).unwrap();
        let by_zeros = |k: usize| -> Vec<&MultiIndex> {
            r.iter().filter(|a| a.zero_count() == k).collect()
        };
        assert_eq!(by_zeros(0), vec![&mi(&[1, 1])]);
        assert_eq!(by_zeros(1), vec![&mi(&[0, 1]), &mi(&[1, 0])]);
        assert_eq!(by_zeros(2), vec![&mi(&[0, 0])]);
    }

    #[test]
    fn band_cases() {
        let b = m1_band(3, 1).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|a| a.len() == 2));
        assert_eq!(m1_band(4, 1).unwrap().len(), 12);
        assert_eq!(m1_band(3, 2).unwrap().len(), 9);
        assert_eq!(m1_band(2, 1), Err(MultiIndexError::BandUndefined { m: 2 }));
    }

    #[test]
    fn caps_are_enforced() {
        assert!(matches!(
            enumerate_m(7, 1, true),
            Err(MultiIndexError::OrderTooLarge { .. })
        ));
        assert!(matches!(
            enumerate_m(2, 9, true),
            Err(MultiIndexError::DvTooLarge { .. })
        ));
    }

    #[test]
    fn hierarchy_and_remainder_characterization() {
        for d_v in 1..=2 {
            for m in 0..=3 {
                let set = enumerate_m(m, d_v, true).unwrap();
                // closure under drop_first
                for a in set.iter().filter(|a| !a.is_empty()) {
                    assert!(set.contains(&a.drop_first()));
                }
                // remainder = next level minus this level, and drop_first lands inside
                let rem = remainder_set(m, d_v).unwrap();
                let next = enumerate_m(m + 1, d_v, true).unwrap();
                for a in &rem {
                    assert!(!set.contains(a));
                    assert!(set.contains(&a.drop_first()));
                }
                assert_eq!(set.len() + rem.len(), next.len());
                let mut merged = set.clone();
                merged.extend(rem.iter().cloned());
                merged.sort_by_key(|a| (a.len(), a.components().to_vec()));
                assert_eq!(merged, next);
            }
        }
    }

    #[test]
    fn display_forms() {
        assert_eq!(MultiIndex::empty().to_string(), "()");
        assert_eq!(mi(&[1, 0, 2]).to_string(), "(1,0,2)");
    }
}
