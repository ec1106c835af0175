//! Encoder plus language-model head plus classifier, behind one config.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    lstm_forward, transformer_forward, BlockStyle, Encoded, ForwardMode, LstmParams, TransformerParams,
};
use crate::error::{Error, Result};
use crate::heads::{bce_loss, lm_loss, AttnPoolClassifier, LmHead};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Var};
use crate::tokenizer::Preprocessor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Lstm,
    Transformer,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Lstm => "lstm",
            EncoderKind::Transformer => "transformer",
        })
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(EncoderKind::Lstm),
            "transformer" => Ok(EncoderKind::Transformer),
            other => Err(Error::Config(format!("unknown encoder {other:?} (lstm or transformer)"))),
        }
    }
}

/// Architecture hyperparameters. Serialized as canonical JSON into
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_pool: usize,
    pub n_labels: usize,
    pub tie_embeddings: bool,
    /// Bare blocks: attention and FFN without residual or norm, `√d` scaling.
    pub literal_blocks: bool,
    pub preprocessor: Preprocessor,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk Transformer: d=64, 4 heads, FFN 256, 2 blocks.
    pub fn desk_transformer(vocab_size: usize, n_labels: usize) -> Self {
        ModelConfig {
            encoder: EncoderKind::Transformer,
            vocab_size,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            n_pool: 4,
            n_labels,
            tie_embeddings: true,
            literal_blocks: false,
            preprocessor: Preprocessor::default(),
            init_seed: 0,
        }
    }

    /// Full-size Transformer: d=768, 8 heads, FFN 2048, 6 blocks.
    pub fn full_transformer(vocab_size: usize, n_labels: usize) -> Self {
        ModelConfig {
            d_model: 768,
            n_heads: 8,
            d_ff: 2048,
            n_layers: 6,
            ..Self::desk_transformer(vocab_size, n_labels)
        }
    }

    pub fn desk_lstm(vocab_size: usize, n_labels: usize) -> Self {
        ModelConfig {
            encoder: EncoderKind::Lstm,
            n_heads: 1,
            d_ff: 0,
            n_layers: 1,
            ..Self::desk_transformer(vocab_size, n_labels)
        }
    }

    pub fn full_lstm(vocab_size: usize, n_labels: usize) -> Self {
        ModelConfig {
            d_model: 768,
            ..Self::desk_lstm(vocab_size, n_labels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocessor.validate()?;
        if self.vocab_size < 5 || self.d_model == 0 || self.n_pool == 0 || self.n_labels == 0 {
            return Err(Error::Config(
                "vocab_size, d_model, n_pool and n_labels must be positive".into(),
            ));
        }
        if self.encoder == EncoderKind::Transformer {
            if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                return Err(Error::Config(format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                )));
            }
            if self.d_model % 2 != 0 {
                return Err(Error::Config("d_model must be even for positional encoding".into()));
            }
            if self.d_ff == 0 {
                return Err(Error::Config("d_ff must be positive".into()));
            }
        }
        Ok(())
    }

    /// Parameters owned by the encoder and embedding table.
    pub fn encoder_param_count(&self) -> usize {
        let (v, d) = (self.vocab_size, self.d_model);
        let emb = v * d;
        match self.encoder {
            EncoderKind::Lstm => emb + 8 * d * d + 4 * d,
            EncoderKind::Transformer => {
                let dh = d / self.n_heads;
                let head = 3 * (dh * d + dh) + dh * dh + dh;
                let ffn = self.d_ff * d + self.d_ff + d * self.d_ff + d;
                let norms = if self.literal_blocks { 0 } else { 4 * d };
                emb + self.n_layers * (self.n_heads * head + ffn + norms)
            }
        }
    }

    pub fn lm_head_param_count(&self) -> usize {
        self.vocab_size + if self.tie_embeddings { 0 } else { self.vocab_size * self.d_model }
    }

    pub fn classifier_param_count(&self) -> usize {
        let d = self.d_model;
        self.n_pool * (d * d + d) + self.n_labels * (self.n_pool * d + 1)
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Lstm(LstmParams),
    Transformer(TransformerParams),
}

/// A complete model: parameters plus the handles that address them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: ParamId,
    pub encoder: Encoder,
    pub lm_head: LmHead,
    pub classifier: AttnPoolClassifier,
}

pub const EMBEDDING_INIT_BOUND: f64 = 0.5;

/// Parameter-name prefixes carried over from a pretrained language model.
const TRANSFER_PREFIXES: [&str; 4] = ["embedding", "lstm.", "layer", "lm."];

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        // independent of d so token identity is not drowned by the
        // positional encoding at small widths
        let emb_bound = EMBEDDING_INIT_BOUND;
        let embedding = params.add_uniform("embedding", &[config.vocab_size, d], emb_bound, &mut rng);
        let encoder = match config.encoder {
            EncoderKind::Lstm => Encoder::Lstm(LstmParams::init(&mut params, embedding, d, &mut rng)),
            EncoderKind::Transformer => Encoder::Transformer(TransformerParams::init(
                &mut params,
                embedding,
                d,
                config.n_heads,
                config.d_ff,
                config.n_layers,
                BlockStyle { literal: config.literal_blocks },
                &mut rng,
            )?),
        };
        let lm_head = LmHead::init(&mut params, config.vocab_size, d, config.tie_embeddings, &mut rng);
        let classifier = AttnPoolClassifier::init(&mut params, d, config.n_pool, config.n_labels, &mut rng)?;
        Ok(Model { config, params, embedding, encoder, lm_head, classifier })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn encode(&self, g: &mut Graph, bound: &Bound, ids: &[usize], valid: &[bool], mode: &mut ForwardMode) -> Result<Encoded> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index { op: "encode", index: bad, size: self.config.vocab_size });
        }
        match &self.encoder {
            Encoder::Lstm(p) => lstm_forward(g, bound, p, ids, mode),
            Encoder::Transformer(p) => transformer_forward(g, bound, p, ids, valid, mode),
        }
    }

    pub fn lm_logits(&self, g: &mut Graph, bound: &Bound, hidden: Var) -> Result<Var> {
        self.lm_head.logits(g, bound, self.embedding, hidden)
    }

    pub fn lm_loss(&self, g: &mut Graph, bound: &Bound, hidden: Var, ids: &[usize], valid: &[bool]) -> Result<Var> {
        lm_loss(g, bound, &self.lm_head, self.embedding, hidden, ids, valid)
    }

    /// Pre-sigmoid label scores `1 × m`.
    pub fn label_logits(&self, g: &mut Graph, bound: &Bound, hidden: Var, valid: &[bool]) -> Result<Var> {
        let (c, _) = self.classifier.pool(g, bound, hidden, valid)?;
        self.classifier.logits(g, bound, c)
    }

    pub fn bce(&self, g: &mut Graph, bound: &Bound, hidden: Var, valid: &[bool], targets: &[f64]) -> Result<Var> {
        let z = self.label_logits(g, bound, hidden, valid)?;
        let p = g.sigmoid(z)?;
        bce_loss(g, p, targets)
    }

    /// Label probabilities for one framed sequence (dropout off).
    pub fn predict_probs(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let valid = vec![true; ids.len()];
        let enc = self.encode(&mut g, &bound, ids, &valid, &mut ForwardMode::eval())?;
        let z = self.label_logits(&mut g, &bound, enc.hidden, &valid)?;
        let p = g.sigmoid(z)?;
        Ok(g.value(p).values().to_vec())
    }

    /// Summed next-token NLL and the number of predicted tokens.
    pub fn sequence_nll(&self, ids: &[usize]) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let valid = vec![true; ids.len()];
        let enc = self.encode(&mut g, &bound, ids, &valid, &mut ForwardMode::eval())?;
        let l = self.lm_loss(&mut g, &bound, enc.hidden, ids, &valid)?;
        let n = ids.len() - 1;
        Ok((g.value(l).item() * n as f64, n))
    }

    /// LM logits `T × V` for one framed sequence (dropout off).
    pub fn lm_logits_for(&self, ids: &[usize]) -> Result<crate::tensor::Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let valid = vec![true; ids.len()];
        let enc = self.encode(&mut g, &bound, ids, &valid, &mut ForwardMode::eval())?;
        let z = self.lm_logits(&mut g, &bound, enc.hidden)?;
        Ok(g.value(z).clone())
    }

    /// Copies the embedding table, encoder and language-model head from a
    /// pretrained model. Classifier parameters stay as initialized.
    pub fn transfer_from(&mut self, pretrained: &Model) -> Result<usize> {
        if pretrained.config.encoder != self.config.encoder
            || pretrained.config.vocab_size != self.config.vocab_size
            || pretrained.config.d_model != self.config.d_model
        {
            return Err(Error::Compatibility(
                "pretrained model architecture does not match".into(),
            ));
        }
        let mut copied = 0;
        for (name, tensor) in pretrained.params.iter() {
            if TRANSFER_PREFIXES.iter().any(|p| name.starts_with(p)) {
                self.params.set(name, tensor.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}
