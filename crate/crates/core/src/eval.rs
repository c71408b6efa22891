//! Word-similarity evaluation: cosine similarity of embeddings against human
//! ratings, scored with Spearman's rank correlation.

use std::fs;
use std::path::Path;

use crate::composer::{embed_word, AloneModel};
use crate::error::{Error, Result};
use crate::filter_bank::FilterBank;
use crate::trainer::TargetEmbeddingTable;

/// Anything that can produce a vector for a word.
pub trait EmbeddingLookup {
    fn lookup(&self, word: &str) -> Result<Option<Vec<f64>>>;
}

impl EmbeddingLookup for TargetEmbeddingTable {
    fn lookup(&self, word: &str) -> Result<Option<Vec<f64>>> {
        Ok(self.word_index(word).map(|i| self.row(i).to_vec()))
    }
}

/// Composed embeddings of a model and its filter bank.
pub struct ComposedEmbeddings<'a> {
    pub model: &'a AloneModel,
    pub bank: &'a FilterBank,
}

impl EmbeddingLookup for ComposedEmbeddings<'_> {
    fn lookup(&self, word: &str) -> Result<Option<Vec<f64>>> {
        match self.model.word_index(word) {
            Some(i) => embed_word(self.model, self.bank, i).map(Some),
            None => Ok(None),
        }
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "vectors have lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub(crate) fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Pearson correlation of the average-rank vectors of `xs` and `ys`.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "lists have lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than 2 observations".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite observation".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    let rho = pearson(&average_ranks(xs), &average_ranks(ys));
    Ok(rho.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delimiter {
    /// Any run of spaces or tabs.
    Whitespace,
    Comma,
    Tab,
}

impl std::str::FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" | "space" => Ok(Delimiter::Whitespace),
            "comma" | "," => Ok(Delimiter::Comma),
            "tab" | "\t" => Ok(Delimiter::Tab),
            other => Err(Error::Config(format!("unknown delimiter `{other}`"))),
        }
    }
}

/// Column layout of a word-pair file. Columns are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFormat {
    pub delimiter: Delimiter,
    pub word_a: usize,
    pub word_b: usize,
    pub score: usize,
    pub skip_header: bool,
    pub lowercase: bool,
}

impl Default for DatasetFormat {
    fn default() -> Self {
        Self {
            delimiter: Delimiter::Whitespace,
            word_a: 0,
            word_b: 1,
            score: 2,
            skip_header: false,
            lowercase: true,
        }
    }
}

impl DatasetFormat {
    /// SimLex-999: tab-separated with a header, score in column 3.
    pub fn simlex() -> Self {
        Self {
            delimiter: Delimiter::Tab,
            score: 3,
            skip_header: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordPairDataset {
    pub name: String,
    pub records: Vec<(String, String, f64)>,
}

impl WordPairDataset {
    pub fn parse(name: &str, text: &str, format: &DatasetFormat) -> Result<Self> {
        let path = Path::new(name);
        let mut records = Vec::new();
        let mut lines = text.lines().enumerate();
        if format.skip_header {
            lines.next();
        }
        for (i, raw) in lines {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = match format.delimiter {
                Delimiter::Whitespace => line.split_whitespace().collect(),
                Delimiter::Comma => line.split(',').map(str::trim).collect(),
                Delimiter::Tab => line.split('\t').map(str::trim).collect(),
            };
            let field = |col: usize| {
                fields.get(col).copied().ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("missing column {col}"),
                })
            };
            let word = |col: usize| -> Result<String> {
                let w = field(col)?;
                Ok(if format.lowercase {
                    w.to_lowercase()
                } else {
                    w.to_string()
                })
            };
            let score_text = field(format.score)?;
            let score: f64 = score_text.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("score `{score_text}` is not a number"),
            })?;
            if !score.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "score is not finite".into(),
                });
            }
            records.push((word(format.word_a)?, word(format.word_b)?, score));
        }
        Ok(Self {
            name: name.to_string(),
            records,
        })
    }

    pub fn load(path: impl AsRef<Path>, format: &DatasetFormat) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&path.display().to_string(), &text, format)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub rho: f64,
    pub pairs_used: usize,
    /// Pairs with a word missing from the vocabulary.
    pub pairs_oov: usize,
    /// Pairs where an embedding had zero norm.
    pub pairs_zero_norm: usize,
}

impl SimilarityReport {
    pub fn pairs_skipped(&self) -> usize {
        self.pairs_oov + self.pairs_zero_norm
    }
}

/// Spearman's rho between embedding cosines and human scores. Pairs with an
/// out-of-vocabulary word or a zero-norm embedding are skipped and counted.
pub fn evaluate_similarity(
    embeddings: &dyn EmbeddingLookup,
    dataset: &WordPairDataset,
) -> Result<SimilarityReport> {
    let mut cosines = Vec::new();
    let mut human = Vec::new();
    let (mut oov, mut zero) = (0, 0);
    for (a, b, score) in &dataset.records {
        let (Some(u), Some(v)) = (embeddings.lookup(a)?, embeddings.lookup(b)?) else {
            oov += 1;
            continue;
        };
        match cosine_similarity(&u, &v) {
            Ok(c) => {
                cosines.push(c);
                human.push(*score);
            }
            Err(Error::UndefinedSimilarity) => zero += 1,
            Err(e) => return Err(e),
        }
    }
    if cosines.len() < 2 {
        return Err(Error::Evaluation {
            usable: cosines.len(),
            skipped: oov + zero,
        });
    }
    let rho = spearman_rho(&cosines, &human)?;
    Ok(SimilarityReport {
        rho,
        pairs_used: cosines.len(),
        pairs_oov: oov,
        pairs_zero_norm: zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::UndefinedSimilarity)));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn spearman_monotone_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman_rho(&xs, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&xs, &[9.0, 7.0, 5.0, 3.0, -1.0]).unwrap(), -1.0);
        assert!(spearman_rho(&xs, &[1.0; 5]).is_err());
        assert!(spearman_rho(&[1.0], &[1.0]).is_err());
        assert!(spearman_rho(&[1.0, 2.0], &[1.0]).is_err());
    }

    /// Oracle: rank by counting (#smaller + (#equal + 1) / 2), then Pearson by
    /// the raw-moment formula.
    fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
        let rank = |v: &[f64], i: usize| {
            let less = v.iter().filter(|&&a| a < v[i]).count() as f64;
            let equal = v.iter().filter(|&&a| a == v[i]).count() as f64;
            less + (equal + 1.0) / 2.0
        };
        let rx: Vec<f64> = (0..xs.len()).map(|i| rank(xs, i)).collect();
        let ry: Vec<f64> = (0..ys.len()).map(|i| rank(ys, i)).collect();
        let n = xs.len() as f64;
        let sx: f64 = rx.iter().sum();
        let sy: f64 = ry.iter().sum();
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
        let sxx: f64 = rx.iter().map(|a| a * a).sum();
        let syy: f64 = ry.iter().map(|a| a * a).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn spearman_with_ties_matches_oracle() {
        let xs = [1.0, 2.0, 2.0, 4.0];
        let ys = [1.0, 3.0, 2.0, 4.0];
        let rho = spearman_rho(&xs, &ys).unwrap();
        let oracle = brute_spearman(&xs, &ys);
        assert!((rho - oracle).abs() < 1e-12, "{rho} vs {oracle}");
        // ranks x = [1, 2.5, 2.5, 4], y = [1, 3, 2, 4]
        assert!((rho - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn table() -> TargetEmbeddingTable {
        TargetEmbeddingTable::new(
            vec!["cat".into(), "dog".into(), "car".into(), "bus".into(), "nil".into()],
            array![[1.0, 0.1], [0.9, 0.2], [0.0, 1.0], [0.1, 0.9], [0.0, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn dataset_parsing_variants() {
        let simlex = "word1\tword2\tPOS\tSimLex999\nCat\tdog\tN\t7.5\ncar\tbus\tN\t6.0\n";
        let d = WordPairDataset::parse("simlex", simlex, &DatasetFormat::simlex()).unwrap();
        assert_eq!(d.records[0], ("cat".into(), "dog".into(), 7.5));

        let ws = "cat,dog,7.0\ncar , bus, 6.5\n";
        let fmt = DatasetFormat {
            delimiter: Delimiter::Comma,
            ..Default::default()
        };
        let d = WordPairDataset::parse("ws", ws, &fmt).unwrap();
        assert_eq!(d.records[1], ("car".into(), "bus".into(), 6.5));

        let rg = "cord  smile 0.02\n\nrooster voyage   0.04\n";
        let d = WordPairDataset::parse("rg", rg, &DatasetFormat::default()).unwrap();
        assert_eq!(d.len(), 2);

        let keep_case = DatasetFormat {
            lowercase: false,
            ..Default::default()
        };
        let d = WordPairDataset::parse("x", "Cat Dog 1\n", &keep_case).unwrap();
        assert_eq!(d.records[0].0, "Cat");

        let err = WordPairDataset::parse("bad", "a b\n", &DatasetFormat::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = WordPairDataset::parse("bad", "a b c\nx y zz\n", &DatasetFormat::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn evaluation_skips_and_counts() {
        let ds = WordPairDataset {
            name: "t".into(),
            records: vec![
                ("cat".into(), "dog".into(), 9.0),
                ("car".into(), "bus".into(), 8.0),
                ("cat".into(), "car".into(), 1.0),
                ("cat".into(), "zebra".into(), 5.0),
                ("nil".into(), "cat".into(), 5.0),
            ],
        };
        let r = evaluate_similarity(&table(), &ds).unwrap();
        assert_eq!(r.pairs_used, 3);
        assert_eq!(r.pairs_oov, 1);
        assert_eq!(r.pairs_zero_norm, 1);
        assert_eq!(r.pairs_skipped(), 2);
        assert!(r.rho > 0.0);
    }

    #[test]
    fn all_oov_is_an_error() {
        let ds = WordPairDataset {
            name: "t".into(),
            records: vec![("x".into(), "y".into(), 1.0), ("p".into(), "q".into(), 2.0)],
        };
        match evaluate_similarity(&table(), &ds) {
            Err(Error::Evaluation { usable: 0, skipped: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40)
        ) {
            let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(spearman_rho(&xs, &ys).is_ok());
            let rho = spearman_rho(&xs, &ys).unwrap();
            let tx: Vec<f64> = xs.iter().map(|x| (x / 50.0).exp() * 3.0 + 1.0).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y * y * y).collect();
            prop_assert!((spearman_rho(&tx, &ty).unwrap() - rho).abs() < 1e-12);
            prop_assert!((rho - brute_spearman(&xs, &ys)).abs() < 1e-9);
        }

        #[test]
        fn cosine_scale_invariant(
            u in proptest::collection::vec(-10.0f64..10.0, 4),
            v in proptest::collection::vec(-10.0f64..10.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            if let Ok(c) = cosine_similarity(&u, &v) {
                let us: Vec<f64> = u.iter().map(|x| x * a).collect();
                let vs: Vec<f64> = v.iter().map(|x| x * b).collect();
                prop_assert!((cosine_similarity(&us, &vs).unwrap() - c).abs() < 1e-12);
            }
        }
    }
}
