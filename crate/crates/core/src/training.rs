//! Optimization: Noam schedule, Adam with clipping, the four training
//! regimes, evaluation and the binary checkpoint container.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::ForwardMode;
use crate::error::{Error, Result};
use crate::heads::{perplexity, total_loss, LossConfig};
use crate::metrics::{threshold, LabelSet, MetricsReport};
use crate::model::{EncoderKind, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoamSchedule {
    pub d_model: usize,
    pub warmup_steps: u64,
    pub scale: f64,
}

impl NoamSchedule {
    pub fn new(d_model: usize) -> Self {
        NoamSchedule { d_model, warmup_steps: 8000, scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.d_model == 0 {
            return Err(Error::Config("warmup_steps and d_model must be >= 1".into()));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("lr scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// `scale · d^{-1/2} · min(step^{-1/2}, step · warmup^{-3/2})`.
pub fn noam_lr(s: &NoamSchedule, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("noam_lr is defined for step >= 1".into()));
    }
    let st = step as f64;
    let w = s.warmup_steps as f64;
    Ok(s.scale * (s.d_model as f64).powf(-0.5) * st.powf(-0.5).min(st * w.powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap applied to the gradient before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. Returns the gradient norm before clipping.
/// Non-finite gradients abort before any parameter is touched.
pub fn adam_step(store: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<f64> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::dim("adam_step", &[store.len()], &[grads.len(), state.m.len()]));
    }
    let mut sq = 0.0;
    for (id, gr) in store.ids().zip(grads) {
        if gr.len() != store.get(id).len() {
            return Err(Error::dim("adam_step", store.get(id).shape(), &[gr.len()]));
        }
        if gr.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
        sq += gr.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    let factor = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (k, tensor) in store.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in tensor.values_mut().iter_mut().enumerate() {
            let gi = grads[k][i] * factor;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "pretrain")]
    Pretrain,
    #[serde(rename = "auxiliary")]
    Auxiliary,
    #[serde(rename = "auxiliary+pretrain")]
    AuxiliaryPretrain,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Base, Regime::Pretrain, Regime::Auxiliary, Regime::AuxiliaryPretrain];

    pub fn uses_pretrain(self) -> bool {
        matches!(self, Regime::Pretrain | Regime::AuxiliaryPretrain)
    }

    pub fn uses_auxiliary(self) -> bool {
        matches!(self, Regime::Auxiliary | Regime::AuxiliaryPretrain)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Base => "base",
            Regime::Pretrain => "pretrain",
            Regime::Auxiliary => "auxiliary",
            Regime::AuxiliaryPretrain => "auxiliary+pretrain",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }
}

/// Parameter precision. `Single` rounds every parameter to the nearest f32
/// after each update; arithmetic stays in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub regime: Regime,
    pub lambda: f64,
    pub seed: u64,
    pub precision: Precision,
    pub clip_norm: Option<f64>,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    /// Probability cut for turning scores into label sets.
    pub threshold: f64,
}

impl TrainConfig {
    pub fn for_encoder(kind: EncoderKind) -> Self {
        TrainConfig {
            epochs: 10,
            dropout: 0.1,
            batch_size: match kind {
                EncoderKind::Lstm => 10,
                EncoderKind::Transformer => 5,
            },
            regime: Regime::Base,
            lambda: LossConfig::default().lambda,
            seed: 0,
            precision: Precision::Double,
            clip_norm: Some(1.0),
            warmup_steps: 8000,
            lr_scale: 1.0,
            threshold: 0.5,
        }
    }

    /// Desk-scale runs take a few hundred updates, far short of the default
    /// warmup, so the ramp is shortened.
    pub fn desk(kind: EncoderKind) -> Self {
        TrainConfig { warmup_steps: 200, ..Self::for_encoder(kind) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        LossConfig { lambda: self.lambda }.validate()
    }

    pub fn schedule(&self, d_model: usize) -> NoamSchedule {
        NoamSchedule { d_model, warmup_steps: self.warmup_steps, scale: self.lr_scale }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { clip_norm: self.clip_norm, ..AdamConfig::default() }
    }
}

/// A framed token sequence with its gold label ids (empty when unlabeled).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub labels: LabelSet,
}

impl Example {
    pub fn unlabeled(ids: Vec<usize>) -> Self {
        Example { ids, labels: LabelSet::new() }
    }
}

/// What a step minimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    LanguageModel,
    /// `bce + λ·nll`; λ = 0 is plain classification.
    Classify { lambda: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// One JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_micro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_ppl: Option<f64>,
}

/// Optional JSON-lines sink for training progress.
#[derive(Default)]
pub struct TrainLog {
    sink: Option<Box<dyn Write + Send>>,
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_writer(w: Box<dyn Write + Send>) -> Self {
        TrainLog { sink: Some(w), entries: Vec::new() }
    }

    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
        }
        self.entries.push(entry);
        Ok(())
    }

    fn step(&mut self, s: &StepStats) -> Result<()> {
        self.push(LogEntry {
            step: s.step,
            epoch: s.epoch,
            lr: s.lr,
            loss: s.loss,
            valid_micro_f1: None,
            valid_em: None,
            held_out_ppl: None,
        })
    }
}

/// Per-epoch permutation, a pure function of `(seed, epoch)`.
pub fn batch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Model plus everything needed to continue optimizing it.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: AdamState,
    /// Dropout randomness; checkpointed.
    pub rng: ChaCha8Rng,
    /// Completed updates.
    pub step: u64,
    pub tokenizer_hash: String,
    pub labels: Vec<String>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, tokenizer_hash: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        config.validate()?;
        config.schedule(model.config.d_model).validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            optimizer: AdamState::new(&model.params),
            model,
            config,
            rng,
            step: 0,
            tokenizer_hash: tokenizer_hash.into(),
            labels,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    /// Loss and gradients of one example; gradients in store order.
    fn example_grads(&self, ex: &Example, objective: Objective, seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
        let model = &self.model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mode = if self.config.dropout > 0.0 {
            ForwardMode::train(self.config.dropout, &mut rng)
        } else {
            ForwardMode::eval()
        };
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let valid = vec![true; ex.ids.len()];
        let enc = model.encode(&mut g, &bound, &ex.ids, &valid, &mut mode)?;
        let loss = match objective {
            Objective::LanguageModel => model.lm_loss(&mut g, &bound, enc.hidden, &ex.ids, &valid)?,
            Objective::Classify { lambda } => {
                let mut y = vec![0.0; model.config.n_labels];
                for &j in &ex.labels {
                    *y.get_mut(j).ok_or_else(|| {
                        Error::Data(format!("label id {j} outside label map of {}", model.config.n_labels))
                    })? = 1.0;
                }
                let bce = model.bce(&mut g, &bound, enc.hidden, &valid, &y)?;
                if lambda == 0.0 {
                    bce
                } else {
                    let nll = model.lm_loss(&mut g, &bound, enc.hidden, &ex.ids, &valid)?;
                    total_loss(&mut g, bce, nll, LossConfig { lambda })?
                }
            }
        };
        g.backward(loss)?;
        Ok((g.value(loss).item(), bound.grads(&g, &model.params)))
    }

    /// Runs the next update. Which batch that is follows from `self.step`
    /// alone, so a restored trainer continues exactly where it stopped.
    pub fn step_on(&mut self, data: &[Example], objective: Objective) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let spe = self.steps_per_epoch(data.len());
        let epoch = (self.step / spe) as usize;
        let b = (self.step % spe) as usize * self.config.batch_size;
        let order = batch_order(self.config.seed, epoch, data.len());
        let batch: Vec<&Example> = order[b..(b + self.config.batch_size).min(data.len())]
            .iter()
            .map(|&i| &data[i])
            .collect();
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.next_u64()).collect();

        let this = &*self;
        let results: Vec<(f64, Vec<Vec<f64>>)> = batch
            .par_iter()
            .zip(&seeds)
            .map(|(ex, &s)| this.example_grads(ex, objective, s))
            .collect::<Result<_>>()?;

        let inv = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
        let mut loss = 0.0;
        for (l, gr) in &results {
            loss += l;
            for (acc, part) in grads.iter_mut().zip(gr) {
                for (a, x) in acc.iter_mut().zip(part) {
                    *a += x;
                }
            }
        }
        for acc in &mut grads {
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
        }

        let lr = noam_lr(&self.config.schedule(self.model.config.d_model), self.step + 1)?;
        let grad_norm = adam_step(&mut self.model.params, &grads, &mut self.optimizer, &self.config.adam(), lr)?;
        if self.config.precision == Precision::Single {
            for t in self.model.params.tensors_mut() {
                for w in t.values_mut() {
                    *w = *w as f32 as f64;
                }
            }
        }
        self.step += 1;
        Ok(StepStats { step: self.step, epoch, lr, loss, grad_norm })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }
}

/// Mean per-token NLL and perplexity of `exp(mean NLL)` over a corpus.
pub fn corpus_perplexity(model: &Model, seqs: &[Vec<usize>]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = seqs
        .par_iter()
        .filter(|s| s.len() >= 2)
        .map(|s| model.sequence_nll(s))
        .collect::<Result<_>>()?;
    let (nll, n) = parts.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    if n == 0 {
        return Err(Error::Data("no predictable tokens in corpus".into()));
    }
    Ok(perplexity(nll / n as f64))
}

/// Minimizes the language-model loss for `config.epochs` epochs, logging
/// held-out perplexity after each. On error the trainer keeps its last good
/// parameters.
pub fn pretrain_lm(trainer: &mut Trainer, corpus: &[Example], held_out: &[Vec<usize>], log: &mut TrainLog) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    let spe = trainer.steps_per_epoch(corpus.len());
    let mut ppl = Vec::new();
    while trainer.step < spe * trainer.config.epochs as u64 {
        let s = trainer.step_on(corpus, Objective::LanguageModel)?;
        log.step(&s)?;
        if trainer.step % spe == 0 {
            let p = if held_out.is_empty() { f64::NAN } else { corpus_perplexity(&trainer.model, held_out)? };
            ppl.push(p);
            log.push(LogEntry { held_out_ppl: p.is_finite().then_some(p), ..log_at(&s) })?;
        }
    }
    Ok(ppl)
}

fn log_at(s: &StepStats) -> LogEntry {
    LogEntry {
        step: s.step,
        epoch: s.epoch,
        lr: s.lr,
        loss: s.loss,
        valid_micro_f1: None,
        valid_em: None,
        held_out_ppl: None,
    }
}

/// Builds the model a regime starts from. Pretrained regimes copy encoder,
/// embeddings and LM head from `pretrained`; the classifier stays fresh.
pub fn prepare_model(config: ModelConfig, regime: Regime, pretrained: Option<&Model>) -> Result<Model> {
    let mut model = Model::new(config)?;
    if regime.uses_pretrain() {
        let p = pretrained.ok_or_else(|| Error::Config(format!("regime {regime} needs a pretrained model")))?;
        model.transfer_from(p)?;
    }
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct ClassifierRun {
    pub best_epoch: usize,
    pub best_valid: MetricsReport,
    pub history: Vec<MetricsReport>,
}

/// Supervised training under `trainer.config.regime`. After each epoch the
/// validation set is scored and the parameters with the highest micro-F1
/// (earliest on ties) are kept; they are loaded back into the trainer when
/// training ends.
pub fn train_classifier(trainer: &mut Trainer, train: &[Example], valid: &[Example], log: &mut TrainLog) -> Result<ClassifierRun> {
    if train.is_empty() {
        return Err(Error::Data("labeled training set is empty".into()));
    }
    let regime = trainer.config.regime;
    let lambda = if regime.uses_auxiliary() { trainer.config.lambda } else { 0.0 };
    let objective = Objective::Classify { lambda };
    let selection = if valid.is_empty() { train } else { valid };
    let spe = trainer.steps_per_epoch(train.len());
    let mut best: Option<(usize, MetricsReport, ParamStore)> = None;
    let mut history = Vec::new();
    while trainer.step < spe * trainer.config.epochs as u64 {
        let s = trainer.step_on(train, objective)?;
        log.step(&s)?;
        if trainer.step % spe == 0 {
            let report = evaluate(&trainer.model, selection, &trainer.labels, trainer.config.threshold)?;
            log.push(LogEntry {
                valid_micro_f1: Some(report.micro_f1),
                valid_em: Some(report.em),
                ..log_at(&s)
            })?;
            if best.as_ref().map_or(true, |(_, r, _)| report.micro_f1 > r.micro_f1) {
                best = Some((s.epoch, report.clone(), trainer.model.params.clone()));
            }
            history.push(report);
        }
    }
    let (best_epoch, best_valid, params) = match best {
        Some(b) => b,
        None => {
            let r = evaluate(&trainer.model, selection, &trainer.labels, trainer.config.threshold)?;
            (trainer.config.epochs - 1, r, trainer.model.params.clone())
        }
    };
    trainer.model.params = params;
    Ok(ClassifierRun { best_epoch, best_valid, history })
}

/// Label probabilities for every example, in input order.
pub fn predict_probs(model: &Model, data: &[Example]) -> Result<Vec<Vec<f64>>> {
    data.par_iter().map(|ex| model.predict_probs(&ex.ids)).collect()
}

pub fn predict(model: &Model, data: &[Example], cut: f64) -> Result<Vec<LabelSet>> {
    Ok(predict_probs(model, data)?.iter().map(|p| threshold(p, cut)).collect())
}

/// Deterministic forward pass, thresholding and metrics.
pub fn evaluate(model: &Model, data: &[Example], labels: &[String], cut: f64) -> Result<MetricsReport> {
    let preds = predict(model, data, cut)?;
    let golds: Vec<LabelSet> = data.iter().map(|e| e.labels.clone()).collect();
    MetricsReport::compute(&preds, &golds, labels)
}

/// As [`evaluate`], after checking that `tokenizer_hash` is the one the
/// checkpoint was trained with.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, tokenizer_hash: &str, data: &[Example]) -> Result<MetricsReport> {
    ckpt.check_tokenizer(tokenizer_hash)?;
    let model = ckpt.model()?;
    let cut = ckpt.train.as_ref().map_or(0.5, |t| t.threshold);
    evaluate(&model, data, &ckpt.labels, cut)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQC1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// ChaCha state as seed, stream and word position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tokenizer_hash: String,
    labels: Vec<String>,
    train: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tokenizer_hash: String,
    pub labels: Vec<String>,
    pub train: Option<TrainConfig>,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        Checkpoint {
            config: t.model.config.clone(),
            tokenizer_hash: t.tokenizer_hash.clone(),
            labels: t.labels.clone(),
            train: Some(t.config.clone()),
            params: t.model.params.clone(),
            optimizer: t.optimizer.clone(),
            step: t.step,
            rng: RngState::capture(&t.rng),
        }
    }

    pub fn check_tokenizer(&self, hash: &str) -> Result<()> {
        if self.tokenizer_hash != hash {
            return Err(Error::Compatibility(format!(
                "checkpoint was trained with tokenizer {} but {} was supplied",
                self.tokenizer_hash, hash
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone())?;
        if model.params.len() != self.params.len() {
            return Err(Error::Load {
                section: "params",
                reason: format!("{} tensors, model expects {}", self.params.len(), model.params.len()),
            });
        }
        for (name, t) in self.params.iter() {
            model.params.set(name, t.clone()).map_err(|e| Error::Load { section: "params", reason: e.to_string() })?;
        }
        Ok(model)
    }

    /// Rebuilds the trainer. A checkpoint without training state gets
    /// `fallback` and fresh optimizer moments.
    pub fn trainer(&self, fallback: Option<TrainConfig>) -> Result<Trainer> {
        let model = self.model()?;
        let config = self
            .train
            .clone()
            .or(fallback)
            .ok_or_else(|| Error::Config("checkpoint carries no training config".into()))?;
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            optimizer: self.optimizer.clone(),
            rng: self.rng.restore(),
            step: self.step,
            tokenizer_hash: self.tokenizer_hash.clone(),
            labels: self.labels.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = Header {
            model: self.config.clone(),
            tokenizer_hash: self.tokenizer_hash.clone(),
            labels: self.labels.clone(),
            train: self.train.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);

        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, t.values());
        }

        put_u64(&mut out, self.optimizer.t);
        put_u64(&mut out, self.optimizer.m.len() as u64);
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            put_u64(&mut out, m.len() as u64);
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }

        put_u64(&mut out, self.step);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Load { section: "magic", reason: "not a checkpoint file".into() });
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < 8 + 32 {
            return Err(Error::Load { section: "checksum", reason: "file truncated".into() });
        }
        let body = &bytes[..bytes.len() - 32];
        if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
            return Err(Error::Load { section: "checksum", reason: "content hash mismatch".into() });
        }
        r.buf = body;

        let n = r.u64("header")? as usize;
        let header: Header = serde_json::from_slice(r.take(n, "header")?)
            .map_err(|e| Error::Load { section: "header", reason: e.to_string() })?;

        let mut params = ParamStore::new();
        let count = r.u64("params")?;
        for _ in 0..count {
            let n = r.u64("params")? as usize;
            let name = std::str::from_utf8(r.take(n, "params")?)
                .map_err(|e| Error::Load { section: "params", reason: e.to_string() })?
                .to_string();
            let dtype = r.take(1, "params")?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Load { section: "params", reason: format!("unknown dtype {dtype} for {name}") });
            }
            let ndim = r.take(1, "params")?[0] as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64("params").map(|d| d as usize)).collect::<Result<_>>()?;
            let len = shape.iter().product();
            let values = r.f64s(len, "params")?;
            let t = Tensor::new(shape, values).map_err(|e| Error::Load { section: "params", reason: e.to_string() })?;
            params.add(name, t);
        }

        let t = r.u64("optimizer")?;
        let k = r.u64("optimizer")? as usize;
        if k != params.len() {
            return Err(Error::Load { section: "optimizer", reason: format!("{k} moment slots for {} tensors", params.len()) });
        }
        let (mut m, mut v) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for id in params.ids() {
            let len = r.u64("optimizer")? as usize;
            if len != params.get(id).len() {
                return Err(Error::Load { section: "optimizer", reason: format!("moment size mismatch for {}", params.name(id)) });
            }
            m.push(r.f64s(len, "optimizer")?);
            v.push(r.f64s(len, "optimizer")?);
        }

        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng")?.try_into().unwrap();
        let stream = r.u64("rng")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng")?.try_into().unwrap());
        if r.pos != body.len() {
            return Err(Error::Load { section: "trailer", reason: format!("{} unexpected bytes", body.len() - r.pos) });
        }
        let ckpt = Checkpoint {
            config: header.model,
            tokenizer_hash: header.tokenizer_hash,
            labels: header.labels,
            train: header.train,
            params,
            optimizer: AdamState { t, m, v },
            step,
            rng: RngState { seed, stream, word_pos },
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const DTYPE_F64: u8 = 0;

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Load { section, reason: "unexpected end of file".into() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, section: &'static str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::Load { section, reason: "size overflow".into() })?, section)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_peak_value() {
        let s = NoamSchedule::new(768);
        let lr = noam_lr(&s, 8000).unwrap();
        let expected = 768f64.powf(-0.5) * 8000f64.powf(-0.5);
        assert!((lr - expected).abs() < 1e-18);
        assert!((lr - 4.034e-4).abs() < 5e-7);
        assert!(noam_lr(&s, 0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.5]));
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig { clip_norm: None, ..AdamConfig::default() };
        adam_step(&mut store, &[vec![1.0]], &mut st, &cfg, 0.01).unwrap();
        let moved = 0.5 - store.get(store.find("w").unwrap()).values()[0];
        assert!((moved - 0.01 / (1.0 + 1e-9)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_keeps_params_and_decays_moments() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.5, -1.0]));
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig::default();
        adam_step(&mut store, &[vec![1.0, 1.0]], &mut st, &cfg, 0.1).unwrap();
        let before = store.get(id).clone();
        let m0 = st.m[0][0];
        let mut zero_state = AdamState::new(&store);
        let mut s2 = store.clone();
        adam_step(&mut s2, &[vec![0.0, 0.0]], &mut zero_state, &cfg, 0.1).unwrap();
        assert_eq!(s2.get(id), &before);
        adam_step(&mut store, &[vec![0.0, 0.0]], &mut st, &cfg, 0.1).unwrap();
        assert_eq!(st.m[0][0], 0.9 * m0);
    }

    #[test]
    fn adam_rejects_nan_with_name() {
        let mut store = ParamStore::new();
        store.add("layer0.w", Tensor::vector(vec![0.0]));
        let mut st = AdamState::new(&store);
        let err = adam_step(&mut store, &[vec![f64::NAN]], &mut st, &AdamConfig::default(), 0.1).unwrap_err();
        assert!(err.to_string().contains("layer0.w"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![0.0, 0.0]));
        let mut st = AdamState::new(&store);
        let norm = adam_step(&mut store, &[vec![3.0, 4.0]], &mut st, &AdamConfig::default(), 0.0).unwrap();
        assert_eq!(norm, 5.0);
        assert!((st.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn regime_names_roundtrip() {
        for r in Regime::ALL {
            assert_eq!(r.to_string().parse::<Regime>().unwrap(), r);
            let j = serde_json::to_string(&r).unwrap();
            assert_eq!(j, format!("\"{r}\""));
        }
        assert!("aux".parse::<Regime>().is_err());
    }

    #[test]
    fn batch_order_is_a_permutation() {
        let o = batch_order(3, 2, 50);
        let mut s = o.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(o, batch_order(3, 2, 50));
        assert_ne!(o, batch_order(3, 3, 50));
    }
}
