//! Random codebooks and per-word filter vectors.
//!
//! A bank holds `M` source matrices of shape `d_o × c`. Each word is tied to
//! one column of every matrix; its filter vector is `f(Σ_i m_w^i)` where `f`
//! is element-wise [`clip`] for binary masks and the identity for real
//! vectors.
//!
//! Generation order, from one [`SeededRng`] keyed by `config.seed`:
//! 1. sources, matrix-major, then column, then row (`d_o` draws per column);
//! 2. assignments, word-major, then matrix index.
//!
//! Sources never depend on the vocabulary size, so a bank rebuilt from
//! `(config, vocab_size)` is bit-identical to the original.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterKind {
    BinaryMask,
    RealVector,
}

impl FilterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterKind::BinaryMask => "binary",
            FilterKind::RealVector => "real",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(FilterKind::BinaryMask),
            "real" => Ok(FilterKind::RealVector),
            other => Err(Error::Config(format!("unknown filter kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Dimension of the base embedding.
    pub d_o: usize,
    /// Columns per source matrix.
    pub c: usize,
    /// Number of source matrices.
    pub m: usize,
    pub kind: FilterKind,
    /// Target probability that a binary filter element is zero. Ignored for
    /// real-valued filters.
    pub p_o: f64,
    pub seed: u64,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_o == 0 || self.c == 0 || self.m == 0 {
            return Err(Error::Config(format!(
                "d_o, c and m must be positive (got d_o={}, c={}, m={})",
                self.d_o, self.c, self.m
            )));
        }
        if self.c > u32::MAX as usize {
            return Err(Error::Config(format!("c={} is too large", self.c)));
        }
        if self.kind == FilterKind::BinaryMask && !(self.p_o > 0.0 && self.p_o < 1.0) {
            return Err(Error::Config(format!(
                "p_o must lie in (0, 1), got {}",
                self.p_o
            )));
        }
        Ok(())
    }

    /// Probability of a 1-entry in a binary source matrix, `1 - p_o^(1/M)`.
    ///
    /// With `M` independent columns OR-ed together, an output element is zero
    /// with probability `(p_o^(1/M))^M = p_o`.
    pub fn source_one_probability(&self) -> f64 {
        1.0 - self.p_o.powf(1.0 / self.m as f64)
    }

    /// Logical element count of all source matrices, `M · d_o · c`.
    pub fn source_elements(&self) -> usize {
        self.m * self.d_o * self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Sources {
    /// One byte per element, each 0 or 1.
    Binary(Vec<u8>),
    Real(Vec<f64>),
}

/// Immutable once built; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    config: FilterConfig,
    vocab_size: usize,
    /// `[matrix][column][row]`, so each column is a contiguous `d_o` slice.
    sources: Sources,
    /// `[word][matrix]`, values in `[0, c)`.
    assignment: Vec<u32>,
}

pub fn build_filter_bank(config: FilterConfig, vocab_size: usize) -> Result<FilterBank> {
    config.validate()?;
    if vocab_size == 0 {
        return Err(Error::Config("vocab_size must be at least 1".into()));
    }
    let mut rng = SeededRng::new(config.seed);
    let n = config.source_elements();
    let sources = match config.kind {
        FilterKind::BinaryMask => {
            let p_one = config.source_one_probability();
            Sources::Binary((0..n).map(|_| rng.bernoulli(p_one) as u8).collect())
        }
        FilterKind::RealVector => Sources::Real((0..n).map(|_| rng.standard_normal()).collect()),
    };
    let assignment = (0..vocab_size * config.m)
        .map(|_| rng.index(config.c) as u32)
        .collect();
    Ok(FilterBank {
        config,
        vocab_size,
        sources,
        assignment,
    })
}

impl FilterBank {
    /// Assembles a bank from explicit parts. `sources` is laid out
    /// `[matrix][column][row]` and `assignment` is `[word][matrix]`.
    pub fn from_parts(config: FilterConfig, sources: Vec<f64>, assignment: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if sources.len() != config.source_elements() {
            return Err(Error::Shape(format!(
                "expected {} source elements, got {}",
                config.source_elements(),
                sources.len()
            )));
        }
        if assignment.is_empty() || !assignment.len().is_multiple_of(config.m) {
            return Err(Error::Shape(format!(
                "assignment length {} is not a positive multiple of m={}",
                assignment.len(),
                config.m
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&a| a >= config.c) {
            return Err(Error::Index {
                what: "source columns",
                index: bad,
                len: config.c,
            });
        }
        let sources = match config.kind {
            FilterKind::BinaryMask => {
                if sources.iter().any(|&s| s != 0.0 && s != 1.0) {
                    return Err(Error::Config("binary sources must be 0 or 1".into()));
                }
                Sources::Binary(sources.iter().map(|&s| s as u8).collect())
            }
            FilterKind::RealVector => Sources::Real(sources),
        };
        Ok(Self {
            config,
            vocab_size: assignment.len() / config.m,
            sources,
            assignment: assignment.into_iter().map(|a| a as u32).collect(),
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Column indices assigned to `word`, one per source matrix.
    pub fn assignment(&self, word: usize) -> Result<Vec<usize>> {
        self.check_word(word)?;
        let m = self.config.m;
        Ok(self.assignment[word * m..(word + 1) * m]
            .iter()
            .map(|&a| a as usize)
            .collect())
    }

    /// All source elements as reals, in `[matrix][column][row]` order.
    pub fn source_values(&self) -> Vec<f64> {
        match &self.sources {
            Sources::Binary(s) => s.iter().map(|&b| b as f64).collect(),
            Sources::Real(s) => s.clone(),
        }
    }

    pub(crate) fn sources(&self) -> &Sources {
        &self.sources
    }

    /// Column `column` of source matrix `matrix`.
    pub fn source_column(&self, matrix: usize, column: usize) -> Vec<f64> {
        let d = self.config.d_o;
        let start = (matrix * self.config.c + column) * d;
        match &self.sources {
            Sources::Binary(s) => s[start..start + d].iter().map(|&b| b as f64).collect(),
            Sources::Real(s) => s[start..start + d].to_vec(),
        }
    }

    fn check_word(&self, word: usize) -> Result<()> {
        if word >= self.vocab_size {
            return Err(Error::Index {
                what: "vocabulary",
                index: word,
                len: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Writes the filter vector of `word` into `out` (length `d_o`).
    pub fn filter_into(&self, word: usize, out: &mut [f64]) -> Result<()> {
        self.check_word(word)?;
        let d = self.config.d_o;
        if out.len() != d {
            return Err(Error::Shape(format!(
                "filter buffer has length {}, expected {d}",
                out.len()
            )));
        }
        out.fill(0.0);
        let m = self.config.m;
        for (i, &col) in self.assignment[word * m..(word + 1) * m].iter().enumerate() {
            let start = (i * self.config.c + col as usize) * d;
            match &self.sources {
                Sources::Binary(s) => {
                    for (o, &b) in out.iter_mut().zip(&s[start..start + d]) {
                        *o += b as f64;
                    }
                }
                Sources::Real(s) => {
                    for (o, &v) in out.iter_mut().zip(&s[start..start + d]) {
                        *o += v;
                    }
                }
            }
        }
        if self.config.kind == FilterKind::BinaryMask {
            out.iter_mut().for_each(|v| *v = clip(*v));
        }
        Ok(())
    }
}

/// 1 when `a >= 1`, else 0.
pub fn clip(a: f64) -> f64 {
    if a >= 1.0 {
        1.0
    } else {
        0.0
    }
}

pub fn filter_vector(bank: &FilterBank, word_index: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; bank.config.d_o];
    bank.filter_into(word_index, &mut out)?;
    Ok(out)
}

/// Birthday bound `1 - exp(-V² / (2 c^M))` that two words share a column tuple.
///
/// The exponent is formed in log space so large `c^M` cannot overflow.
pub fn collision_probability(vocab_size: u64, c: u64, m: u64) -> Result<f64> {
    if c < 2 || m < 1 || vocab_size < 1 {
        return Err(Error::Config(format!(
            "collision_probability needs c >= 2, m >= 1, V >= 1 (got V={vocab_size}, c={c}, m={m})"
        )));
    }
    let log_ratio =
        2.0 * (vocab_size as f64).ln() - std::f64::consts::LN_2 - m as f64 * (c as f64).ln();
    let ratio = log_ratio.exp();
    Ok(-(-ratio).exp_m1())
}

/// Every pair `(i, j)` with `i < j` whose assignment tuples are identical,
/// sorted. Collisions are reported, never repaired.
pub fn detect_assignment_collisions(bank: &FilterBank) -> Vec<(usize, usize)> {
    let m = bank.config.m;
    let mut groups: HashMap<&[u32], Vec<usize>> = HashMap::new();
    for (word, tuple) in bank.assignment.chunks_exact(m).enumerate() {
        groups.entry(tuple).or_default().push(word);
    }
    let mut pairs: Vec<(usize, usize)> = groups
        .values()
        .filter(|g| g.len() > 1)
        .flat_map(|g| {
            g.iter()
                .enumerate()
                .flat_map(move |(k, &a)| g[k + 1..].iter().map(move |&b| (a, b)))
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Builds the bank, re-seeding with `seed + 1, seed + 2, …` until no two words
/// share a tuple or `max_attempts` builds have been tried. Returns the bank
/// and the number of re-seeds performed.
pub fn build_collision_free(
    mut config: FilterConfig,
    vocab_size: usize,
    max_attempts: usize,
) -> Result<(FilterBank, usize)> {
    for attempt in 0..max_attempts.max(1) {
        let bank = build_filter_bank(config, vocab_size)?;
        if detect_assignment_collisions(&bank).is_empty() {
            return Ok((bank, attempt));
        }
        config.seed = config.seed.wrapping_add(1);
    }
    Err(Error::Consistency(format!(
        "assignment collisions persisted after {max_attempts} seeds"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(kind: FilterKind, d_o: usize, c: usize, m: usize, seed: u64) -> FilterConfig {
        FilterConfig {
            d_o,
            c,
            m,
            kind,
            p_o: 0.5,
            seed,
        }
    }

    #[test]
    fn clip_cases() {
        assert_eq!(clip(2.0), 1.0);
        assert_eq!(clip(1.0), 1.0);
        assert_eq!(clip(0.0), 0.0);
        assert_eq!(clip(0.999), 0.0);
        assert_eq!(clip(-3.0), 0.0);
    }

    #[test]
    fn build_is_deterministic() {
        for kind in [FilterKind::BinaryMask, FilterKind::RealVector] {
            let c = cfg(kind, 16, 8, 3, 42);
            assert_eq!(build_filter_bank(c, 100).unwrap(), build_filter_bank(c, 100).unwrap());
        }
    }

    #[test]
    fn sources_independent_of_vocab_size() {
        let c = cfg(FilterKind::RealVector, 8, 4, 2, 9);
        let a = build_filter_bank(c, 10).unwrap();
        let b = build_filter_bank(c, 1000).unwrap();
        assert_eq!(a.source_values(), b.source_values());
    }

    #[test]
    fn binary_sources_are_zero_or_one() {
        let bank = build_filter_bank(cfg(FilterKind::BinaryMask, 32, 16, 4, 1), 50).unwrap();
        assert!(bank.source_values().iter().all(|&v| v == 0.0 || v == 1.0));
        for w in 0..50 {
            assert!(bank.assignment(w).unwrap().iter().all(|&a| a < 16));
        }
    }

    #[test]
    fn source_storage_matches_worked_example() {
        let c = cfg(FilterKind::BinaryMask, 512, 64, 8, 0);
        assert_eq!(c.source_elements(), 262_144);
        let bank = build_filter_bank(c, 37_000).unwrap();
        assert_eq!(bank.source_values().len(), 262_144);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = cfg(FilterKind::BinaryMask, 4, 4, 2, 0);
        for bad in [
            FilterConfig { d_o: 0, ..base },
            FilterConfig { c: 0, ..base },
            FilterConfig { m: 0, ..base },
            FilterConfig { p_o: 0.0, ..base },
            FilterConfig { p_o: 1.0, ..base },
            FilterConfig { p_o: f64::NAN, ..base },
        ] {
            assert!(matches!(build_filter_bank(bad, 3), Err(Error::Config(_))), "{bad:?}");
        }
        assert!(matches!(build_filter_bank(base, 0), Err(Error::Config(_))));
        // p_o is irrelevant for real filters.
        let real = FilterConfig {
            kind: FilterKind::RealVector,
            p_o: 7.0,
            ..base
        };
        assert!(build_filter_bank(real, 3).is_ok());
    }

    #[test]
    fn binary_filter_is_or_of_columns() {
        let config = FilterConfig {
            d_o: 3,
            c: 2,
            m: 2,
            kind: FilterKind::BinaryMask,
            p_o: 0.5,
            seed: 0,
        };
        // matrix 0: col0 = [0,0,0], col1 = [1,0,1]; matrix 1: col0 = [0,0,1], col1 = [1,1,1]
        let sources = vec![0., 0., 0., 1., 0., 1., 0., 0., 1., 1., 1., 1.];
        let bank = FilterBank::from_parts(config, sources, vec![1, 0]).unwrap();
        assert_eq!(filter_vector(&bank, 0).unwrap(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn real_filter_is_sum_of_columns() {
        let config = FilterConfig {
            d_o: 2,
            c: 1,
            m: 2,
            kind: FilterKind::RealVector,
            p_o: 0.5,
            seed: 0,
        };
        let bank = FilterBank::from_parts(config, vec![0.5, -1.0, 0.25, 2.0], vec![0, 0]).unwrap();
        assert_eq!(filter_vector(&bank, 0).unwrap(), vec![0.75, 1.0]);
    }

    #[test]
    fn filter_index_out_of_range() {
        let bank = build_filter_bank(cfg(FilterKind::BinaryMask, 4, 4, 2, 0), 3).unwrap();
        assert!(matches!(filter_vector(&bank, 3), Err(Error::Index { index: 3, len: 3, .. })));
    }

    #[test]
    fn from_parts_rejects_bad_shapes() {
        let config = cfg(FilterKind::BinaryMask, 2, 2, 1, 0);
        assert!(FilterBank::from_parts(config, vec![0.0; 3], vec![0]).is_err());
        assert!(FilterBank::from_parts(config, vec![0.0; 4], vec![2]).is_err());
        assert!(FilterBank::from_parts(config, vec![0.5; 4], vec![0]).is_err());
    }

    /// Independent oracle: the exponent V²/(2c^M) as an exact rational in
    /// integers, then the alternating series for 1 - exp(-x).
    fn collision_oracle(v: u128, c: u128, m: u32) -> f64 {
        let x = (v * v) as f64 / (2 * c.pow(m)) as f64;
        let mut term = x;
        let mut sum = 0.0;
        for k in 1..30 {
            sum += term;
            term *= -x / (k + 1) as f64;
        }
        sum
    }

    #[test]
    fn collision_probability_matches_oracle() {
        let p = collision_probability(37_000, 64, 8).unwrap();
        let oracle = collision_oracle(37_000, 64, 8);
        assert!(((p - oracle) / oracle).abs() < 1e-12, "{p} vs {oracle}");
        assert!((p - 2.4318e-6).abs() < 1e-9, "{p}");

        let p1 = collision_probability(37_000, 64, 1).unwrap();
        assert!(p1 > 1.0 - 1e-12);

        let single = collision_probability(1, 64, 8).unwrap();
        assert!(single > 0.0 && single < 1e-14);
        // huge c^M stays finite
        assert_eq!(collision_probability(10, 1 << 40, 1000).unwrap(), 0.0);
        assert!(collision_probability(10, 1, 1).is_err());
        assert!(collision_probability(0, 64, 1).is_err());
    }

    #[test]
    fn collisions_empty_for_single_word() {
        let bank = build_filter_bank(cfg(FilterKind::BinaryMask, 4, 2, 1, 0), 1).unwrap();
        assert!(detect_assignment_collisions(&bank).is_empty());
    }

    #[test]
    fn forced_duplicate_is_reported() {
        let config = cfg(FilterKind::RealVector, 1, 3, 2, 0);
        // rows: [0,1] [2,2] [0,1] [1,0] [2,2] [0,1]
        let assignment = vec![0, 1, 2, 2, 0, 1, 1, 0, 2, 2, 0, 1];
        let bank = FilterBank::from_parts(config, vec![0.0; 6], assignment).unwrap();
        assert_eq!(
            detect_assignment_collisions(&bank),
            vec![(0, 2), (0, 5), (1, 4), (2, 5)]
        );
    }

    #[test]
    fn reseeding_escapes_collisions() {
        // c^M = 4 with V = 3 collides often; re-seeding eventually finds a clean bank.
        let config = cfg(FilterKind::BinaryMask, 2, 2, 2, 0);
        let (bank, _) = build_collision_free(config, 3, 1000).unwrap();
        assert!(detect_assignment_collisions(&bank).is_empty());
        assert!(build_collision_free(config, 5, 10).is_err());
    }

    proptest! {
        #[test]
        fn clip_idempotent(a in -1e6f64..1e6) {
            prop_assert_eq!(clip(clip(a)), clip(a));
        }

        #[test]
        fn binary_filter_equals_elementwise_max(seed in any::<u64>(), m in 1usize..5, c in 1usize..6) {
            let bank = build_filter_bank(cfg(FilterKind::BinaryMask, 7, c, m, seed), 20).unwrap();
            for w in 0..20 {
                let cols = bank.assignment(w).unwrap();
                let mut max = vec![0.0f64; 7];
                for (i, &col) in cols.iter().enumerate() {
                    for (acc, v) in max.iter_mut().zip(bank.source_column(i, col)) {
                        *acc = acc.max(v);
                    }
                }
                prop_assert_eq!(filter_vector(&bank, w).unwrap(), max);
            }
        }

        #[test]
        fn collision_probability_monotone(v in 1u64..100_000, c in 2u64..200, m in 1u64..10) {
            let p = collision_probability(v, c, m).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(collision_probability(v, c + 1, m).unwrap() <= p);
            prop_assert!(collision_probability(v, c, m + 1).unwrap() <= p);
            prop_assert!(collision_probability(v + 1, c, m).unwrap() >= p);
        }
    }
}
