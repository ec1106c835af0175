//! Sequence encoders mapping framed token ids to hidden states `T × d`.
//!
//! Both encoders are causal: the state at position `t` depends only on tokens
//! at positions `≤ t`, so the same weights serve the language-model head and
//! the classifier.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Dropout settings for one forward pass.
pub struct ForwardMode<'a> {
    pub dropout: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardMode<'a> {
    pub fn eval() -> Self {
        ForwardMode { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardMode { dropout, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub(crate) fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => g.dropout(x, self.dropout, rng, true),
            None => Ok(x),
        }
    }
}

/// Gate order for the four LSTM weight groups.
pub const GATES: [&str; 4] = ["f", "i", "o", "c"];

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub embedding: ParamId,
    /// Input weights `W_f, W_i, W_o, W_c`, each `d × d`.
    pub w: [ParamId; 4],
    /// Recurrent weights `V_f, V_i, V_o, V_c`, each `d × d`.
    pub v: [ParamId; 4],
    pub b: [ParamId; 4],
    pub d: usize,
}

impl LstmParams {
    pub fn init(store: &mut ParamStore, embedding: ParamId, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = GATES.map(|gate| store.add_xavier(format!("lstm.w_{gate}"), d, d, rng));
        let v = GATES.map(|gate| store.add_xavier(format!("lstm.v_{gate}"), d, d, rng));
        let b = GATES.map(|gate| store.add_filled(format!("lstm.b_{gate}"), &[d], 0.0));
        LstmParams { embedding, w, v, b, d }
    }
}

/// One recurrence step on `1 × d` row vectors.
pub fn lstm_step(g: &mut Graph, bound: &Bound, p: &LstmParams, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    for v in [x, h_prev, c_prev] {
        if g.value(v).shape() != [1, p.d] {
            return Err(Error::dim("lstm_step", g.value(v).shape(), &[1, p.d]));
        }
    }
    let mut pre = Vec::with_capacity(4);
    for k in 0..4 {
        let a = g.matmul_t(x, bound[p.w[k]])?;
        let r = g.matmul_t(h_prev, bound[p.v[k]])?;
        let s = g.add(a, r)?;
        pre.push(g.add(s, bound[p.b[k]])?);
    }
    let f = g.sigmoid(pre[0])?;
    let i = g.sigmoid(pre[1])?;
    let o = g.sigmoid(pre[2])?;
    let cand = g.tanh(pre[3])?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Left-to-right scan from zero state over already-embedded inputs `T × d`.
/// Gate pre-activations for all positions are computed in one product.
pub fn lstm_scan(g: &mut Graph, bound: &Bound, p: &LstmParams, x: Var) -> Result<Var> {
    let t_len = g.value(x).rows();
    let d = p.d;
    let w_all = g.concat(&p.w.map(|id| bound[id]), 0)?;
    let v_all = g.concat(&p.v.map(|id| bound[id]), 0)?;
    let b_all = g.concat(&p.b.map(|id| bound[id]), 0)?;
    let xw = g.matmul_t(x, w_all)?;
    let xw = g.add(xw, b_all)?;
    let mut h = g.constant(Tensor::zeros([1, d]));
    let mut c = g.constant(Tensor::zeros([1, d]));
    let mut states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let row = g.slice(xw, 0, t, 1)?;
        let rec = g.matmul_t(h, v_all)?;
        let z = g.add(row, rec)?;
        let f = g.slice(z, 1, 0, d)?;
        let i = g.slice(z, 1, d, d)?;
        let o = g.slice(z, 1, 2 * d, d)?;
        let cand = g.slice(z, 1, 3 * d, d)?;
        let f = g.sigmoid(f)?;
        let i = g.sigmoid(i)?;
        let o = g.sigmoid(o)?;
        let cand = g.tanh(cand)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        h = g.mul(o, tc)?;
        states.push(h);
    }
    if states.is_empty() {
        return Err(Error::Contract("lstm_forward needs a nonempty sequence".into()));
    }
    g.concat(&states, 0)
}

/// Output of an encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Contextual states `T × d`.
    pub hidden: Var,
    /// Gathered embedding rows `T × d`, before positional encoding or dropout.
    pub embeddings: Var,
}

pub fn lstm_forward(g: &mut Graph, bound: &Bound, p: &LstmParams, ids: &[usize], mode: &mut ForwardMode) -> Result<Encoded> {
    if ids.is_empty() {
        return Err(Error::Contract("lstm_forward needs a nonempty sequence".into()));
    }
    let emb = g.embedding_lookup(bound[p.embedding], ids)?;
    let x = mode.drop(g, emb)?;
    let h = lstm_scan(g, bound, p, x)?;
    let hidden = mode.drop(g, h)?;
    Ok(Encoded { hidden, embeddings: emb })
}

static PE_CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Tensor>>>> = OnceLock::new();

/// Sinusoidal table: `PE(t, 2i) = sin(t / 10000^{2i/d})`,
/// `PE(t, 2i+1) = cos(t / 10000^{2i/d})`. Cached per `(T, d)`.
pub fn positional_encoding(t_len: usize, d: usize) -> Result<Arc<Tensor>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs even d, got {d}")));
    }
    let cache = PE_CACHE.get_or_init(Default::default);
    let mut cache = cache.lock().expect("positional encoding cache poisoned");
    let table = cache.entry((t_len, d)).or_insert_with(|| {
        let mut v = vec![0.0; t_len * d];
        for t in 0..t_len {
            for i in 0..d / 2 {
                let angle = t as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
                v[t * d + 2 * i] = angle.sin();
                v[t * d + 2 * i + 1] = angle.cos();
            }
        }
        Arc::new(Tensor::matrix(t_len, d, v).expect("shape matches"))
    });
    Ok(Arc::clone(table))
}

/// `M[t, s] = 1` iff `s ≤ t` and position `s` is valid.
pub fn causal_mask(valid: &[bool]) -> Tensor {
    let n = valid.len();
    let mut m = vec![0.0; n * n];
    for t in 0..n {
        for s in 0..=t {
            if valid[s] {
                m[t * n + s] = 1.0;
            }
        }
    }
    Tensor::matrix(n, n, m).expect("square")
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub w_o1: ParamId,
    pub b_o1: ParamId,
    pub w_o2: ParamId,
    pub b_o2: ParamId,
    /// Gain/bias for the two post-norm sublayers; absent in literal mode.
    pub norms: Option<[(ParamId, ParamId); 2]>,
}

/// Block structure switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockStyle {
    /// Drops residual connections and layer norm, and scales scores by
    /// `√d` instead of the per-head `√(d/n)`.
    pub literal: bool,
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    pub embedding: ParamId,
    pub layers: Vec<LayerParams>,
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub style: BlockStyle,
}

impl TransformerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        embedding: ParamId,
        d: usize,
        n_heads: usize,
        d_ff: usize,
        n_layers: usize,
        style: BlockStyle,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {n_heads} heads")));
        }
        if d % 2 != 0 {
            return Err(Error::Config(format!("d_model must be even, got {d}")));
        }
        let dh = d / n_heads;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let heads = (0..n_heads)
                .map(|h| {
                    let p = format!("layer{l}.head{h}");
                    HeadParams {
                        w_k: store.add_xavier(format!("{p}.w_k"), dh, d, rng),
                        b_k: store.add_filled(format!("{p}.b_k"), &[dh], 0.0),
                        w_q: store.add_xavier(format!("{p}.w_q"), dh, d, rng),
                        b_q: store.add_filled(format!("{p}.b_q"), &[dh], 0.0),
                        w_v: store.add_xavier(format!("{p}.w_v"), dh, d, rng),
                        b_v: store.add_filled(format!("{p}.b_v"), &[dh], 0.0),
                        w_h: store.add_xavier(format!("{p}.w_h"), dh, dh, rng),
                        b_h: store.add_filled(format!("{p}.b_h"), &[dh], 0.0),
                    }
                })
                .collect();
            let w_o1 = store.add_xavier(format!("layer{l}.ffn.w_o1"), d_ff, d, rng);
            let b_o1 = store.add_filled(format!("layer{l}.ffn.b_o1"), &[d_ff], 0.0);
            let w_o2 = store.add_xavier(format!("layer{l}.ffn.w_o2"), d, d_ff, rng);
            let b_o2 = store.add_filled(format!("layer{l}.ffn.b_o2"), &[d], 0.0);
            let norms = (!style.literal).then(|| {
                [1, 2].map(|k| {
                    (
                        store.add_filled(format!("layer{l}.ln{k}.gain"), &[d], 1.0),
                        store.add_filled(format!("layer{l}.ln{k}.bias"), &[d], 0.0),
                    )
                })
            });
            layers.push(LayerParams { heads, w_o1, b_o1, w_o2, b_o2, norms });
        }
        Ok(TransformerParams { embedding, layers, d, n_heads, d_ff, style })
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul_t(x, w)?;
    g.add(y, b)
}

/// Multi-head causal self-attention. Returns the concatenated head outputs
/// `T × d` and each head's attention weights `T × T`.
pub fn multi_head_attention(
    g: &mut Graph,
    bound: &Bound,
    layer: &LayerParams,
    cfg: &TransformerParams,
    h_prev: Var,
    mask: &Tensor,
) -> Result<(Var, Vec<Var>)> {
    let t_len = g.value(h_prev).rows();
    if mask.shape() != [t_len, t_len] {
        return Err(Error::dim("multi_head_attention", &[t_len, t_len], mask.shape()));
    }
    let dh = cfg.d / cfg.n_heads;
    let scale = if cfg.style.literal { cfg.d } else { dh } as f64;
    let inv_sqrt = 1.0 / scale.sqrt();
    let mut outs = Vec::with_capacity(layer.heads.len());
    let mut weights = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let k = linear(g, h_prev, bound[head.w_k], bound[head.b_k])?;
        let q = linear(g, h_prev, bound[head.w_q], bound[head.b_q])?;
        let v = linear(g, h_prev, bound[head.w_v], bound[head.b_v])?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let attn = g.softmax_rows(scores, Some(mask))?;
        let mixed = g.matmul(attn, v)?;
        outs.push(linear(g, mixed, bound[head.w_h], bound[head.b_h])?);
        weights.push(attn);
    }
    Ok((g.concat(&outs, 1)?, weights))
}

/// Attention sublayer then feed-forward sublayer, each wrapped as
/// `norm(x + sublayer(x))` unless the style is literal.
pub fn transformer_block(
    g: &mut Graph,
    bound: &Bound,
    layer: &LayerParams,
    cfg: &TransformerParams,
    h_prev: Var,
    mask: &Tensor,
    mode: &mut ForwardMode,
) -> Result<Var> {
    let (attn, _) = multi_head_attention(g, bound, layer, cfg, h_prev, mask)?;
    let attn = mode.drop(g, attn)?;
    let mid = match layer.norms {
        Some([(gain, bias), _]) => {
            let r = g.add(h_prev, attn)?;
            g.layer_norm(r, bound[gain], bound[bias])?
        }
        None => attn,
    };
    let hidden = linear(g, mid, bound[layer.w_o1], bound[layer.b_o1])?;
    let hidden = g.relu(hidden)?;
    let ffn = linear(g, hidden, bound[layer.w_o2], bound[layer.b_o2])?;
    let ffn = mode.drop(g, ffn)?;
    match layer.norms {
        Some([_, (gain, bias)]) => {
            let r = g.add(mid, ffn)?;
            g.layer_norm(r, bound[gain], bound[bias])
        }
        None => Ok(ffn),
    }
}

pub fn transformer_forward(
    g: &mut Graph,
    bound: &Bound,
    p: &TransformerParams,
    ids: &[usize],
    valid: &[bool],
    mode: &mut ForwardMode,
) -> Result<Encoded> {
    if ids.is_empty() {
        return Err(Error::Contract("transformer_forward needs a nonempty sequence".into()));
    }
    if valid.len() != ids.len() {
        return Err(Error::dim("transformer_forward", &[ids.len()], &[valid.len()]));
    }
    let emb = g.embedding_lookup(bound[p.embedding], ids)?;
    let pe = positional_encoding(ids.len(), p.d)?;
    let pe = g.constant((*pe).clone());
    let x = g.add(emb, pe)?;
    let mut h = mode.drop(g, x)?;
    let mask = causal_mask(valid);
    for layer in &p.layers {
        h = transformer_block(g, bound, layer, p, h, &mask, mode)?;
    }
    Ok(Encoded { hidden: h, embeddings: emb })
}
