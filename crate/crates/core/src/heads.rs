//! Language-model head, attention-pooling multi-label classifier, and losses.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Probability floor applied before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Next-token projection. With tied weights the embedding table doubles as
/// the output matrix and only the bias is separate.
#[derive(Clone, Debug)]
pub struct LmHead {
    pub proj: Option<ParamId>,
    pub bias: ParamId,
}

impl LmHead {
    pub fn init(store: &mut ParamStore, vocab: usize, d: usize, tied: bool, rng: &mut ChaCha8Rng) -> Self {
        let proj = (!tied).then(|| store.add_xavier("lm.proj", vocab, d, rng));
        let bias = store.add_filled("lm.bias", &[vocab], 0.0);
        LmHead { proj, bias }
    }

    /// Logits `T × V` for hidden states `T × d`.
    pub fn logits(&self, g: &mut Graph, bound: &Bound, embedding: ParamId, hidden: Var) -> Result<Var> {
        let w = bound[self.proj.unwrap_or(embedding)];
        let z = g.matmul_t(hidden, w)?;
        g.add(z, bound[self.bias])
    }
}

/// Next-token targets: position `t` predicts `ids[t+1]` when that position is
/// valid.
pub fn next_token_targets(ids: &[usize], valid: &[bool]) -> Vec<Option<usize>> {
    (0..ids.len().saturating_sub(1))
        .map(|t| valid[t + 1].then_some(ids[t + 1]))
        .collect()
}

/// Mean per-token negative log-likelihood of a framed sequence.
pub fn lm_loss(
    g: &mut Graph,
    bound: &Bound,
    head: &LmHead,
    embedding: ParamId,
    hidden: Var,
    ids: &[usize],
    valid: &[bool],
) -> Result<Var> {
    let t_len = ids.len();
    if t_len < 2 {
        return Err(Error::Contract(format!("lm_loss needs T >= 2, got {t_len}")));
    }
    if g.value(hidden).rows() != t_len || valid.len() != t_len {
        return Err(Error::dim("lm_loss", g.value(hidden).shape(), &[t_len]));
    }
    let prefix = g.slice(hidden, 0, 0, t_len - 1)?;
    let logits = head.logits(g, bound, embedding, prefix)?;
    g.nll_rows(logits, &next_token_targets(ids, valid))
}

pub fn perplexity(nll_per_token: f64) -> f64 {
    nll_per_token.exp()
}

/// Attention pooling followed by independent per-label sigmoids.
#[derive(Clone, Debug)]
pub struct AttnPoolClassifier {
    /// Query projection `W^(k): d × d` and bias `b^(k)` per pooling head.
    pub queries: Vec<(ParamId, ParamId)>,
    /// Rows are the per-label weight vectors `w_j`, `m × (n_pool·d)`.
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub d: usize,
    pub n_labels: usize,
}

impl AttnPoolClassifier {
    pub fn init(store: &mut ParamStore, d: usize, n_pool: usize, n_labels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_pool == 0 || n_labels == 0 {
            return Err(Error::Config("classifier needs n_pool >= 1 and at least one label".into()));
        }
        let queries = (0..n_pool)
            .map(|k| {
                (
                    store.add_xavier(format!("pool{k}.w"), d, d, rng),
                    store.add_filled(format!("pool{k}.b"), &[d], 0.0),
                )
            })
            .collect();
        let out_w = store.add_xavier("cls.w", n_labels, n_pool * d, rng);
        let out_b = store.add_filled("cls.b", &[n_labels], 0.0);
        Ok(AttnPoolClassifier { queries, out_w, out_b, d, n_labels })
    }

    /// Summary vector `c` (`1 × n_pool·d`) and each head's weights `α`
    /// (`1 × T`). The query is built from the last valid state.
    pub fn pool(&self, g: &mut Graph, bound: &Bound, hidden: Var, valid: &[bool]) -> Result<(Var, Vec<Var>)> {
        let t_len = g.value(hidden).rows();
        if valid.len() != t_len {
            return Err(Error::dim("attention_pool", g.value(hidden).shape(), &[valid.len()]));
        }
        let last = valid
            .iter()
            .rposition(|&v| v)
            .ok_or_else(|| Error::Contract("attention_pool needs a valid position".into()))?;
        let h_last = g.slice(hidden, 0, last, 1)?;
        let mask = Tensor::matrix(1, t_len, valid.iter().map(|&v| f64::from(u8::from(v))).collect())?;
        let mut parts = Vec::with_capacity(self.queries.len());
        let mut alphas = Vec::with_capacity(self.queries.len());
        for &(w, b) in &self.queries {
            let q = g.matmul_t(h_last, bound[w])?;
            let q = g.add(q, bound[b])?;
            let scores = g.matmul_t(q, hidden)?;
            let alpha = g.softmax_rows(scores, Some(&mask))?;
            parts.push(g.matmul(alpha, hidden)?);
            alphas.push(alpha);
        }
        Ok((g.concat(&parts, 1)?, alphas))
    }

    /// Pre-sigmoid scores `w_jᵀ c + b_j`, shape `1 × m`.
    pub fn logits(&self, g: &mut Graph, bound: &Bound, c: Var) -> Result<Var> {
        let z = g.matmul_t(c, bound[self.out_w])?;
        g.add(z, bound[self.out_b])
    }

    pub fn probs(&self, g: &mut Graph, bound: &Bound, c: Var) -> Result<Var> {
        let z = self.logits(g, bound, c)?;
        g.sigmoid(z)
    }
}

/// `−(1/m) Σ [y log p + (1−y) log(1−p)]` with probabilities clamped at
/// [`PROB_CLAMP`].
pub fn bce_loss(g: &mut Graph, p: Var, y: &[f64]) -> Result<Var> {
    let m = g.value(p).len();
    if y.len() != m || m == 0 {
        return Err(Error::dim("bce_loss", g.value(p).shape(), &[y.len()]));
    }
    let shape = g.value(p).shape().to_vec();
    let yv = g.constant(Tensor::new(shape.clone(), y.to_vec())?);
    let ny = g.constant(Tensor::new(shape, y.iter().map(|v| 1.0 - v).collect())?);
    let log_p = g.ln_clamped(p, PROB_CLAMP)?;
    let not_p = g.neg(p)?;
    let not_p = g.add_scalar(not_p, 1.0)?;
    let log_not_p = g.ln_clamped(not_p, PROB_CLAMP)?;
    let pos = g.mul(yv, log_p)?;
    let neg = g.mul(ny, log_not_p)?;
    let s = g.add(pos, neg)?;
    let s = g.sum(s)?;
    g.scale(s, -1.0 / m as f64)
}

/// Auxiliary weighting of the language-model loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `bce + λ·nll`; the NLL is `−log p(X)`, hence the plus sign.
pub fn total_loss(g: &mut Graph, bce: Var, nll: Var, config: LossConfig) -> Result<Var> {
    if config.lambda == 0.0 {
        return Ok(bce);
    }
    let aux = g.scale(nll, config.lambda)?;
    g.add(bce, aux)
}

pub fn total_loss_value(bce: f64, nll: f64, config: LossConfig) -> f64 {
    bce + config.lambda * nll
}
