//! Reconstruction training: fit `FFN(m_w ⊙ o)` to a table of target
//! embeddings under the mean squared error, with hand-derived gradients and
//! Adam.
//!
//! Batched forward/backward passes go through `ndarray` matrix products. The
//! filter vectors receive no gradient; they are fixed by construction.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis, Zip};

use crate::composer::{embed_word, AloneModel};
use crate::error::{Error, Result};
use crate::filter_bank::FilterBank;
use crate::rng::SeededRng;

/// The embedding matrix being reconstructed, one row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEmbeddingTable {
    vocab: Vec<String>,
    matrix: Array2<f64>,
    index: HashMap<String, usize>,
}

impl TargetEmbeddingTable {
    pub fn new(vocab: Vec<String>, matrix: Array2<f64>) -> Result<Self> {
        if vocab.len() != matrix.nrows() {
            return Err(Error::Shape(format!(
                "{} words but {} embedding rows",
                vocab.len(),
                matrix.nrows()
            )));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate word {w:?}")));
            }
        }
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "non-finite value in row {}",
                pos / matrix.ncols().max(1)
            )));
        }
        Ok(Self {
            vocab,
            matrix: matrix.as_standard_layout().into_owned(),
            index,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn d_e(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.matrix.row(i)
    }

    /// The first `k` rows (all rows if fewer).
    pub fn top_k(&self, k: usize) -> Self {
        let k = k.min(self.len());
        self.select(&(0..k).collect::<Vec<_>>())
    }

    /// Rows for `words` in the given order, skipping words not in the table,
    /// stopping after `k` hits.
    pub fn select_words<S: AsRef<str>>(&self, words: &[S], k: usize) -> Self {
        let mut seen = std::collections::HashSet::new();
        let rows: Vec<usize> = words
            .iter()
            .filter_map(|w| self.word_index(w.as_ref()))
            .filter(|&i| seen.insert(i))
            .take(k)
            .collect();
        self.select(&rows)
    }

    fn select(&self, rows: &[usize]) -> Self {
        let vocab: Vec<String> = rows.iter().map(|&i| self.vocab[i].clone()).collect();
        let matrix = self.matrix.select(Axis(0), rows);
        Self::new(vocab, matrix).expect("subset of a valid table")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Each minibatch draws `batch_size` words uniformly with replacement.
    WithReplacement,
    /// Each epoch visits a fresh permutation of the vocabulary.
    Shuffle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout_rate: f64,
    pub train_base: bool,
    pub data_seed: u64,
    pub sampling: Sampling,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 1000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout_rate: 0.0,
            train_base: true,
            data_seed: 0,
            sampling: Sampling::WithReplacement,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Seed of the dropout stream, `data_seed + 1`.
    pub fn dropout_seed(&self) -> u64 {
        self.data_seed.wrapping_add(1)
    }
}

/// Adam moments for every trainable tensor plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub m_w1: Array2<f64>,
    pub v_w1: Array2<f64>,
    pub m_w2: Array2<f64>,
    pub v_w2: Array2<f64>,
    pub m_base: Array1<f64>,
    pub v_base: Array1<f64>,
    pub step: u64,
    /// Mean minibatch loss of each completed epoch.
    pub loss_history: Vec<f64>,
}

impl TrainerState {
    pub fn new(model: &AloneModel) -> Self {
        Self {
            m_w1: Array2::zeros(model.w1().raw_dim()),
            v_w1: Array2::zeros(model.w1().raw_dim()),
            m_w2: Array2::zeros(model.w2().raw_dim()),
            v_w2: Array2::zeros(model.w2().raw_dim()),
            m_base: Array1::zeros(model.d_o()),
            v_base: Array1::zeros(model.d_o()),
            step: 0,
            loss_history: Vec::new(),
        }
    }

    fn check_shapes(&self, model: &AloneModel) -> Result<()> {
        let ok = self.m_w1.dim() == model.w1().dim()
            && self.v_w1.dim() == model.w1().dim()
            && self.m_w2.dim() == model.w2().dim()
            && self.v_w2.dim() == model.w2().dim()
            && self.m_base.len() == model.d_o()
            && self.v_base.len() == model.d_o();
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("trainer state does not match model shapes".into()))
        }
    }
}

/// Everything the backward pass needs from one batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub word_indices: Vec<usize>,
    /// Filter vectors, `B × d_o`.
    pub filters: Array2<f64>,
    /// `filters ⊙ o`, `B × d_o`.
    pub x: Array2<f64>,
    /// `x · W1ᵀ`, `B × d_inter`.
    pub pre: Array2<f64>,
    /// After ReLU and dropout.
    pub hidden: Array2<f64>,
    pub dropout: Option<Array2<f64>>,
    /// `hidden · W2ᵀ`, `B × d_e`.
    pub output: Array2<f64>,
    generation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    /// Present only when the base embedding is trainable.
    pub base: Option<Array1<f64>>,
}

fn check_pair(model: &AloneModel, bank: &FilterBank, targets: &TargetEmbeddingTable) -> Result<()> {
    model.check_bank(bank)?;
    if model.d_e() != targets.d_e() {
        return Err(Error::Shape(format!(
            "model d_e {} differs from target d_e {}",
            model.d_e(),
            targets.d_e()
        )));
    }
    if model.vocab() != targets.vocab() {
        return Err(Error::Consistency(
            "model vocabulary differs from target vocabulary".into(),
        ));
    }
    Ok(())
}

fn check_indices(indices: &[usize], len: usize) -> Result<()> {
    match indices.iter().enumerate().find(|(_, &w)| w >= len) {
        Some((position, &index)) => Err(Error::BatchIndex {
            position,
            index,
            len,
        }),
        None => Ok(()),
    }
}

/// Mean over `word_indices` of `‖e_w − FFN(m_w ⊙ o)‖²`.
pub fn reconstruction_loss(
    model: &AloneModel,
    bank: &FilterBank,
    targets: &TargetEmbeddingTable,
    word_indices: &[usize],
) -> Result<f64> {
    check_pair(model, bank, targets)?;
    check_indices(word_indices, targets.len())?;
    if word_indices.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &w in word_indices {
        let y = embed_word(model, bank, w)?;
        total += y
            .iter()
            .zip(targets.row(w))
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>();
    }
    Ok(total / word_indices.len() as f64)
}

/// Reconstruction loss over the whole vocabulary.
pub fn full_loss(model: &AloneModel, bank: &FilterBank, targets: &TargetEmbeddingTable) -> Result<f64> {
    let all: Vec<usize> = (0..targets.len()).collect();
    reconstruction_loss(model, bank, targets, &all)
}

pub fn forward_batch(
    model: &AloneModel,
    bank: &FilterBank,
    word_indices: &[usize],
    dropout_rate: f64,
    rng: Option<&mut SeededRng>,
) -> Result<BatchCache> {
    model.check_bank(bank)?;
    check_indices(word_indices, model.vocab().len())?;
    let b = word_indices.len();
    let d_o = model.d_o();
    let mut filters = Array2::zeros((b, d_o));
    for (mut row, &w) in filters.rows_mut().into_iter().zip(word_indices) {
        bank.filter_into(w, row.as_slice_mut().expect("standard layout"))?;
    }
    let x = &filters * model.base();
    let pre = x.dot(&model.w1().t());
    let mut hidden = pre.mapv(|p| p.max(0.0));
    let dropout = if dropout_rate > 0.0 {
        let rng = rng.ok_or_else(|| Error::Config("dropout requires a random generator".into()))?;
        let scale = 1.0 / (1.0 - dropout_rate);
        let mask = Array2::from_shape_fn(hidden.raw_dim(), |_| {
            if rng.bernoulli(dropout_rate) {
                0.0
            } else {
                scale
            }
        });
        hidden *= &mask;
        Some(mask)
    } else {
        None
    };
    let output = hidden.dot(&model.w2().t());
    Ok(BatchCache {
        word_indices: word_indices.to_vec(),
        filters,
        x,
        pre,
        hidden,
        dropout,
        output,
        generation: model.generation(),
    })
}

/// Mean squared residual of a cached forward pass.
pub fn batch_loss(cache: &BatchCache, targets: &TargetEmbeddingTable) -> f64 {
    let b = cache.word_indices.len();
    if b == 0 {
        return 0.0;
    }
    let e = targets.matrix().select(Axis(0), &cache.word_indices);
    let diff = &cache.output - &e;
    diff.iter().map(|d| d * d).sum::<f64>() / b as f64
}

/// Gradients of the mean-reduced batch loss with respect to `W2`, `W1` and,
/// when the model's base is trainable, `o`.
pub fn backward(
    model: &AloneModel,
    bank: &FilterBank,
    targets: &TargetEmbeddingTable,
    word_indices: &[usize],
    cache: &BatchCache,
) -> Result<Gradients> {
    check_pair(model, bank, targets)?;
    if cache.word_indices != word_indices {
        return Err(Error::Consistency("cache was built for different words".into()));
    }
    if cache.generation != model.generation() {
        return Err(Error::Consistency(
            "cache is stale: parameters changed since the forward pass".into(),
        ));
    }
    let b = word_indices.len();
    if cache.output.dim() != (b, model.d_e()) || cache.pre.dim() != (b, model.d_inter()) {
        return Err(Error::Consistency("cache shapes do not match the model".into()));
    }
    if b == 0 {
        return Ok(Gradients {
            w1: Array2::zeros(model.w1().raw_dim()),
            w2: Array2::zeros(model.w2().raw_dim()),
            base: model.train_base().then(|| Array1::zeros(model.d_o())),
        });
    }

    let e = targets.matrix().select(Axis(0), word_indices);
    let residual = (&cache.output - &e) * (2.0 / b as f64);
    let grad_w2 = residual.t().dot(&cache.hidden);

    // Back through W2, dropout and the ReLU gate (subgradient 0 at 0).
    let mut delta = residual.dot(model.w2());
    if let Some(mask) = &cache.dropout {
        delta *= mask;
    }
    Zip::from(&mut delta)
        .and(&cache.pre)
        .for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0
            }
        });
    let grad_w1 = delta.t().dot(&cache.x);
    let grad_base = model.train_base().then(|| {
        let grad_x = delta.dot(model.w1());
        (grad_x * &cache.filters).sum_axis(Axis(0))
    });
    Ok(Gradients {
        w1: grad_w1.as_standard_layout().into_owned(),
        w2: grad_w2.as_standard_layout().into_owned(),
        base: grad_base,
    })
}

/// `element` is the row-major offset of the first non-finite value.
fn check_finite<'a>(name: &'static str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    match values.into_iter().enumerate().find(|(_, v)| !v.is_finite()) {
        Some((element, &value)) => Err(Error::NonFinite {
            tensor: name,
            element,
            value,
        }),
        None => Ok(()),
    }
}

fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &TrainerConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m).zip(v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// One Adam update with bias-corrected moments. Gradients are checked for
/// finiteness before anything is modified.
pub fn adam_step(
    state: &mut TrainerState,
    model: &mut AloneModel,
    grads: &Gradients,
    config: &TrainerConfig,
) -> Result<()> {
    state.check_shapes(model)?;
    if grads.w1.dim() != model.w1().dim() || grads.w2.dim() != model.w2().dim() {
        return Err(Error::Shape("gradient shapes do not match the model".into()));
    }
    check_finite("W1", &grads.w1)?;
    check_finite("W2", &grads.w2)?;
    if let Some(g) = &grads.base {
        if g.len() != model.d_o() {
            return Err(Error::Shape("base gradient length does not match d_o".into()));
        }
        check_finite("o", g)?;
    }

    state.step += 1;
    let step = state.step;
    let (base, w1, w2) = model.params_mut();
    adam_update(
        w1.as_slice_mut().unwrap(),
        grads.w1.as_standard_layout().as_slice().unwrap(),
        state.m_w1.as_slice_mut().unwrap(),
        state.v_w1.as_slice_mut().unwrap(),
        step,
        config,
    );
    adam_update(
        w2.as_slice_mut().unwrap(),
        grads.w2.as_standard_layout().as_slice().unwrap(),
        state.m_w2.as_slice_mut().unwrap(),
        state.v_w2.as_slice_mut().unwrap(),
        step,
        config,
    );
    if let Some(g) = &grads.base {
        adam_update(
            base.as_slice_mut().unwrap(),
            g.as_standard_layout().as_slice().unwrap(),
            state.m_base.as_slice_mut().unwrap(),
            state.v_base.as_slice_mut().unwrap(),
            step,
            config,
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
}

/// Trains for `config.epochs` epochs from a fresh optimizer state.
pub fn train(
    model: &mut AloneModel,
    bank: &FilterBank,
    targets: &TargetEmbeddingTable,
    config: &TrainerConfig,
) -> Result<TrainerState> {
    let mut state = TrainerState::new(model);
    train_with(model, bank, targets, config, &mut state, |_, _, _| Ok(()))?;
    Ok(state)
}

/// Trains, calling `on_epoch` after every completed epoch.
///
/// Each epoch runs `⌈V / batch_size⌉` minibatches. On failure the model and
/// state are rolled back to the end of the last completed epoch before the
/// error is returned, so callers can checkpoint them.
pub fn train_with<F>(
    model: &mut AloneModel,
    bank: &FilterBank,
    targets: &TargetEmbeddingTable,
    config: &TrainerConfig,
    state: &mut TrainerState,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&EpochReport, &AloneModel, &TrainerState) -> Result<()>,
{
    config.validate()?;
    check_pair(model, bank, targets)?;
    state.check_shapes(model)?;
    if config.epochs == 0 {
        return Ok(());
    }
    model.set_train_base(config.train_base);

    let v = targets.len();
    let n_batches = v.div_ceil(config.batch_size);
    let mut data_rng = SeededRng::new(config.data_seed);
    let mut dropout_rng = SeededRng::new(config.dropout_seed());
    let mut order: Vec<usize> = (0..v).collect();

    let start_epoch = state.loss_history.len();
    for epoch in start_epoch + 1..=start_epoch + config.epochs {
        let model_snapshot = model.clone();
        let state_snapshot = state.clone();
        let result = (|| -> Result<f64> {
            if config.sampling == Sampling::Shuffle {
                for i in (1..v).rev() {
                    order.swap(i, data_rng.index(i + 1));
                }
            }
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            for batch in 0..n_batches {
                let indices: Vec<usize> = match config.sampling {
                    Sampling::WithReplacement => {
                        (0..config.batch_size).map(|_| data_rng.index(v)).collect()
                    }
                    Sampling::Shuffle => {
                        let lo = batch * config.batch_size;
                        order[lo..(lo + config.batch_size).min(v)].to_vec()
                    }
                };
                let cache = forward_batch(
                    model,
                    bank,
                    &indices,
                    config.dropout_rate,
                    Some(&mut dropout_rng),
                )?;
                loss_sum += batch_loss(&cache, targets) * indices.len() as f64;
                seen += indices.len();
                let grads = backward(model, bank, targets, &indices, &cache)?;
                adam_step(state, model, &grads, config)?;
            }
            Ok(loss_sum / seen as f64)
        })();
        match result {
            Ok(loss) => {
                state.loss_history.push(loss);
                let report = EpochReport { epoch, loss };
                log::debug!("epoch {epoch} loss {loss}");
                on_epoch(&report, model, state)?;
            }
            Err(e) => {
                *model = model_snapshot;
                *state = state_snapshot;
                return Err(e);
            }
        }
    }
    Ok(())
}
