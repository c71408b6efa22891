//! The model parameters and the composition `W2 · max(0, W1 · (m_w ⊙ o))`.
//!
//! The per-vector path here evaluates every dot product in a fixed sequential
//! order, so [`embed_word`] and [`embed_batch`] agree bit-for-bit. The trainer
//! uses a separate batched path for speed.

use std::collections::HashMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::filter_bank::{FilterBank, FilterConfig};
use crate::rng::SeededRng;

/// Weight initialization scheme identifiers, recorded in model files.
pub const INIT_WEIGHTS: &str = "glorot_uniform";
pub const INIT_BASE: &str = "normal_var_inv_d_o";

#[derive(Debug, Clone, PartialEq)]
pub struct AloneModel {
    base: Array1<f64>,
    w1: Array2<f64>,
    w2: Array2<f64>,
    filter_config: FilterConfig,
    vocab: Vec<String>,
    vocab_index: HashMap<String, usize>,
    train_base: bool,
    init_seed: u64,
    /// Bumped on every parameter update; forward caches record it.
    generation: u64,
}

impl AloneModel {
    /// Fresh model: `o ~ N(0, 1/d_o)`, then `W1`, then `W2` (row-major), each
    /// weight uniform on `±sqrt(6 / (fan_in + fan_out))`, all drawn in that
    /// order from one stream seeded with `init_seed`.
    pub fn new(
        filter_config: FilterConfig,
        vocab: Vec<String>,
        d_inter: usize,
        d_e: usize,
        init_seed: u64,
        train_base: bool,
    ) -> Result<Self> {
        filter_config.validate()?;
        if d_inter == 0 || d_e == 0 {
            return Err(Error::Config(format!(
                "d_inter and d_e must be positive (got {d_inter}, {d_e})"
            )));
        }
        let d_o = filter_config.d_o;
        let mut rng = SeededRng::new(init_seed);
        let std = (1.0 / d_o as f64).sqrt();
        let base = Array1::from_shape_fn(d_o, |_| std * rng.standard_normal());
        let s1 = (6.0 / (d_o + d_inter) as f64).sqrt();
        let w1 = Array2::from_shape_fn((d_inter, d_o), |_| rng.symmetric_uniform(s1));
        let s2 = (6.0 / (d_inter + d_e) as f64).sqrt();
        let w2 = Array2::from_shape_fn((d_e, d_inter), |_| rng.symmetric_uniform(s2));
        let mut model = Self::from_parts(base, w1, w2, filter_config, vocab, train_base)?;
        model.init_seed = init_seed;
        Ok(model)
    }

    pub fn from_parts(
        base: Array1<f64>,
        w1: Array2<f64>,
        w2: Array2<f64>,
        filter_config: FilterConfig,
        vocab: Vec<String>,
        train_base: bool,
    ) -> Result<Self> {
        filter_config.validate()?;
        if base.len() != filter_config.d_o {
            return Err(Error::Shape(format!(
                "base has length {}, filter d_o is {}",
                base.len(),
                filter_config.d_o
            )));
        }
        if w1.ncols() != base.len() {
            return Err(Error::Shape(format!(
                "W1 has {} columns, base has length {}",
                w1.ncols(),
                base.len()
            )));
        }
        if w2.ncols() != w1.nrows() {
            return Err(Error::Shape(format!(
                "W2 has {} columns, W1 has {} rows",
                w2.ncols(),
                w1.nrows()
            )));
        }
        if w1.nrows() == 0 || w2.nrows() == 0 {
            return Err(Error::Shape("empty weight matrix".into()));
        }
        let mut vocab_index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "vocabulary entry {i} ({w:?}) is empty or contains whitespace"
                )));
            }
            if vocab_index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self {
            base: base.as_standard_layout().into_owned(),
            w1: w1.as_standard_layout().into_owned(),
            w2: w2.as_standard_layout().into_owned(),
            filter_config,
            vocab,
            vocab_index,
            train_base,
            init_seed: 0,
            generation: 0,
        })
    }

    pub fn base(&self) -> &Array1<f64> {
        &self.base
    }

    pub fn w1(&self) -> &Array2<f64> {
        &self.w1
    }

    pub fn w2(&self) -> &Array2<f64> {
        &self.w2
    }

    pub fn filter_config(&self) -> &FilterConfig {
        &self.filter_config
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.vocab_index.get(word).copied()
    }

    pub fn train_base(&self) -> bool {
        self.train_base
    }

    pub fn set_train_base(&mut self, train_base: bool) {
        self.train_base = train_base;
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub(crate) fn set_init_seed(&mut self, seed: u64) {
        self.init_seed = seed;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn d_o(&self) -> usize {
        self.base.len()
    }

    pub fn d_inter(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_e(&self) -> usize {
        self.w2.nrows()
    }

    /// Number of trainable elements, `d_o + d_inter · (d_o + d_e)`.
    pub fn parameter_count(&self) -> usize {
        self.d_o() + self.d_inter() * (self.d_o() + self.d_e())
    }

    /// Mutable access to `(o, W1, W2)`. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> (&mut Array1<f64>, &mut Array2<f64>, &mut Array2<f64>) {
        self.generation += 1;
        (&mut self.base, &mut self.w1, &mut self.w2)
    }

    /// Checks that `bank` was built for this model.
    pub fn check_bank(&self, bank: &FilterBank) -> Result<()> {
        if *bank.config() != self.filter_config {
            return Err(Error::Consistency(format!(
                "filter bank config {:?} does not match model config {:?}",
                bank.config(),
                self.filter_config
            )));
        }
        if bank.vocab_size() != self.vocab.len() {
            return Err(Error::Consistency(format!(
                "filter bank covers {} words, model vocabulary has {}",
                bank.vocab_size(),
                self.vocab.len()
            )));
        }
        Ok(())
    }
}

/// Intermediate activations of one [`ffn_forward`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnCache {
    pub x: Vec<f64>,
    /// `W1 · x` before the ReLU.
    pub pre: Vec<f64>,
    /// Hidden activations after ReLU and dropout.
    pub hidden: Vec<f64>,
    /// Per-unit dropout multipliers (0 or `1/(1-rate)`), when dropout ran.
    pub dropout: Option<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `y = W2 · dropout(max(0, W1 · x))` with inverted dropout after the ReLU.
pub fn ffn_forward(
    model: &AloneModel,
    x: &[f64],
    dropout_rate: f64,
    rng: Option<&mut SeededRng>,
) -> Result<(Vec<f64>, FfnCache)> {
    if x.len() != model.d_o() {
        return Err(Error::Shape(format!(
            "input has length {}, model expects {}",
            x.len(),
            model.d_o()
        )));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {dropout_rate}"
        )));
    }
    let w1 = model.w1.as_slice().expect("standard layout");
    let w2 = model.w2.as_slice().expect("standard layout");
    let d_o = model.d_o();
    let d_inter = model.d_inter();

    let pre: Vec<f64> = w1.chunks_exact(d_o).map(|row| dot(row, x)).collect();
    let mut hidden: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
    let dropout = if dropout_rate > 0.0 {
        let rng = rng.ok_or_else(|| {
            Error::Config("dropout requires a random generator".into())
        })?;
        let scale = 1.0 / (1.0 - dropout_rate);
        let mask: Vec<f64> = (0..d_inter)
            .map(|_| if rng.bernoulli(dropout_rate) { 0.0 } else { scale })
            .collect();
        hidden.iter_mut().zip(&mask).for_each(|(h, k)| *h *= k);
        Some(mask)
    } else {
        None
    };
    let y = w2.chunks_exact(d_inter).map(|row| dot(row, &hidden)).collect();
    Ok((
        y,
        FfnCache {
            x: x.to_vec(),
            pre,
            hidden,
            dropout,
        },
    ))
}

fn composed_input(model: &AloneModel, bank: &FilterBank, word: usize) -> Result<Vec<f64>> {
    let mut x = vec![0.0; model.d_o()];
    bank.filter_into(word, &mut x)?;
    x.iter_mut().zip(model.base.iter()).for_each(|(m, o)| *m *= o);
    Ok(x)
}

/// `FFN(m_w ⊙ o)` with dropout disabled.
pub fn embed_word(model: &AloneModel, bank: &FilterBank, word_index: usize) -> Result<Vec<f64>> {
    model.check_bank(bank)?;
    let x = composed_input(model, bank, word_index)?;
    Ok(ffn_forward(model, &x, 0.0, None)?.0)
}

/// Row `i` is `embed_word(word_indices[i])`, bit-for-bit.
pub fn embed_batch(
    model: &AloneModel,
    bank: &FilterBank,
    word_indices: &[usize],
) -> Result<Array2<f64>> {
    model.check_bank(bank)?;
    let v = model.vocab.len();
    if let Some((position, &index)) = word_indices.iter().enumerate().find(|(_, &w)| w >= v) {
        return Err(Error::BatchIndex {
            position,
            index,
            len: v,
        });
    }
    let mut out = Array2::zeros((word_indices.len(), model.d_e()));
    for (mut row, &w) in out.rows_mut().into_iter().zip(word_indices) {
        let x = composed_input(model, bank, w)?;
        let (y, _) = ffn_forward(model, &x, 0.0, None)?;
        row.assign(&Array1::from(y));
    }
    Ok(out)
}
