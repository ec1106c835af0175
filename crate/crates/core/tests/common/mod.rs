#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqcoder::gradcheck::{self, GradReport};
use seqcoder::{Elementwise, Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_t",
    "transpose",
    "reshape",
    "add",
    "add_row",
    "sub",
    "sub_row",
    "mul",
    "mul_row",
    "scale",
    "neg",
    "add_scalar",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "ln_clamped",
    "elementwise",
    "softmax_rows",
    "softmax_masked",
    "embedding_lookup",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "layer_norm",
    "dropout",
    "sum",
    "mean",
    "nll_rows",
];

pub fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `v` to a scalar with fixed random weights so every output entry
/// gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(v).shape().to_vec();
    let n = g.value(v).len();
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?);
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Finite-difference check of one named op on random shapes up to
/// `max_dim`.
pub fn check_op(name: &str, rng: &mut ChaCha8Rng, max_dim: usize) -> Result<GradReport> {
    let r = rng.gen_range(1..=max_dim);
    let c = rng.gen_range(1..=max_dim);
    let k = rng.gen_range(1..=max_dim);
    let seed: u64 = rng.gen();
    let x = rand_matrix(rng, r, c);
    let ws = move |g: &mut Graph, v: Var| weighted_sum(g, v, seed);
    match name {
        "matmul" => gradcheck::check(&[x, rand_matrix(rng, c, k)], STEP, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            ws(g, y)
        }),
        "matmul_t" => gradcheck::check(&[x, rand_matrix(rng, k, c)], STEP, |g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            ws(g, y)
        }),
        "transpose" => gradcheck::check(&[x], STEP, |g, v| {
            let y = g.transpose(v[0])?;
            ws(g, y)
        }),
        "reshape" => gradcheck::check(&[x], STEP, |g, v| {
            let y = g.reshape(v[0], &[c, r])?;
            ws(g, y)
        }),
        "add" | "sub" | "mul" => {
            let y = rand_matrix(rng, r, c);
            let n = name.to_string();
            gradcheck::check(&[x, y], STEP, move |g, v| {
                let z = match n.as_str() {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                ws(g, z)
            })
        }
        "add_row" | "sub_row" | "mul_row" => {
            let b = Tensor::vector((0..c).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let n = name.to_string();
            gradcheck::check(&[x, b], STEP, move |g, v| {
                let z = match n.as_str() {
                    "add_row" => g.add(v[0], v[1])?,
                    "sub_row" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                ws(g, z)
            })
        }
        "scale" => gradcheck::check(&[x], STEP, |g, v| {
            let y = g.scale(v[0], -1.7)?;
            ws(g, y)
        }),
        "neg" => gradcheck::check(&[x], STEP, |g, v| {
            let y = g.neg(v[0])?;
            ws(g, y)
        }),
        "add_scalar" => gradcheck::check(&[x], STEP, |g, v| {
            let y = g.add_scalar(v[0], 0.3)?;
            ws(g, y)
        }),
        "sigmoid" => gradcheck::check(&[x], STEP, |g, v| {
            let y = g.sigmoid(v[0])?;
            ws(g, y)
        }),
        "tanh" => gradcheck::check(&[x], STEP, |g, v| {
            let y = g.tanh(v[0])?;
            ws(g, y)
        }),
        "relu" => {
            // keep away from the kink
            let vals = x.values().iter().map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
            let x = Tensor::matrix(r, c, vals)?;
            gradcheck::check(&[x], STEP, |g, v| {
                let y = g.relu(v[0])?;
                ws(g, y)
            })
        }
        "exp" => gradcheck::check(&[x], STEP, |g, v| {
            let y = g.exp(v[0])?;
            ws(g, y)
        }),
        "ln_clamped" => {
            let x = Tensor::matrix(r, c, x.values().iter().map(|v| 1.25 + 0.75 * v).collect())?;
            gradcheck::check(&[x], STEP, |g, v| {
                let y = g.ln_clamped(v[0], 1e-12)?;
                ws(g, y)
            })
        }
        "elementwise" => {
            let y = rand_matrix(rng, r, c);
            gradcheck::check(&[x, y], STEP, |g, v| {
                let a = g.elementwise(Elementwise::Mul, &[v[0], v[1]])?;
                let b = g.elementwise(Elementwise::Tanh, &[a])?;
                let b = g.elementwise(Elementwise::Scale(0.5), &[b])?;
                let b = g.elementwise(Elementwise::Sigmoid, &[b])?;
                let b = g.elementwise(Elementwise::Add, &[b, v[1]])?;
                let b = g.elementwise(Elementwise::Neg, &[b])?;
                ws(g, b)
            })
        }
        "softmax_rows" => gradcheck::check(&[x], STEP, |g, v| {
            let y = g.softmax_rows(v[0], None)?;
            ws(g, y)
        }),
        "softmax_masked" => {
            let mut m: Vec<f64> = (0..r * c).map(|_| f64::from(rng.gen_bool(0.6) as u8)).collect();
            for row in 0..r {
                m[row * c + rng.gen_range(0..c)] = 1.0;
            }
            let mask = Tensor::matrix(r, c, m)?;
            gradcheck::check(&[x], STEP, move |g, v| {
                let y = g.softmax_rows(v[0], Some(&mask))?;
                ws(g, y)
            })
        }
        "embedding_lookup" => {
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..r)).collect();
            gradcheck::check(&[x], STEP, move |g, v| {
                let y = g.embedding_lookup(v[0], &ids)?;
                ws(g, y)
            })
        }
        "concat_rows" => gradcheck::check(&[x, rand_matrix(rng, k, c)], STEP, |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 0)?;
            ws(g, y)
        }),
        "concat_cols" => gradcheck::check(&[x, rand_matrix(rng, r, k)], STEP, |g, v| {
            let y = g.concat(&[v[1], v[0]], 1)?;
            ws(g, y)
        }),
        "slice_rows" => {
            let start = rng.gen_range(0..r);
            let len = rng.gen_range(1..=r - start);
            gradcheck::check(&[x], STEP, move |g, v| {
                let y = g.slice(v[0], 0, start, len)?;
                ws(g, y)
            })
        }
        "slice_cols" => {
            let start = rng.gen_range(0..c);
            let len = rng.gen_range(1..=c - start);
            gradcheck::check(&[x], STEP, move |g, v| {
                let y = g.slice(v[0], 1, start, len)?;
                ws(g, y)
            })
        }
        "layer_norm" => {
            // at least two columns with spread, so the variance is not tiny
            let c = c.max(2);
            let x = rand_matrix(rng, r, c);
            let gain = Tensor::vector((0..c).map(|_| rng.gen_range(0.5..1.5)).collect());
            let bias = Tensor::vector((0..c).map(|_| rng.gen_range(-0.5..0.5)).collect());
            gradcheck::check(&[x, gain, bias], STEP, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                ws(g, y)
            })
        }
        "dropout" => {
            let mask_seed: u64 = rng.gen();
            gradcheck::check(&[x], STEP, move |g, v| {
                let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
                let y = g.dropout(v[0], 0.3, &mut mrng, true)?;
                ws(g, y)
            })
        }
        "sum" => gradcheck::check(&[x], STEP, |g, v| {
            let s = g.sum(v[0])?;
            g.scale(s, 1.3)
        }),
        "mean" => gradcheck::check(&[x], STEP, |g, v| {
            let s = g.mean(v[0])?;
            g.scale(s, 1.3)
        }),
        "nll_rows" => {
            let mut targets: Vec<Option<usize>> = (0..r).map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..c))).collect();
            targets[0] = Some(rng.gen_range(0..c));
            gradcheck::check(&[x], STEP, move |g, v| g.nll_rows(v[0], &targets))
        }
        other => panic!("unknown op {other}"),
    }
}

use seqcoder::data::{synth_generate, Dataset, SynthConfig};
use seqcoder::tokenizer::{BpeModel, Preprocessor, Tokenizer};
use seqcoder::training::Example;
use seqcoder::{EncoderKind, ModelConfig};

/// Small synthetic corpora with a tokenizer trained on them.
pub struct Fixture {
    pub cfg: SynthConfig,
    pub a: Dataset,
    pub b: Dataset,
    pub tok: Tokenizer,
    pub labels: Vec<String>,
}

impl Fixture {
    pub fn new(n_a: usize, n_labels: usize) -> Self {
        let cfg = SynthConfig { n_a, n_b: n_a / 2, n_b_unlabeled: n_a, n_labels, ..SynthConfig::default() };
        let c = synth_generate(&cfg).unwrap();
        let pre = Preprocessor::default();
        let corpus: Vec<Vec<String>> = c.a.records.iter().chain(&c.b_unlabeled.records).map(|r| pre.preprocess(&r.text)).collect();
        let bpe = BpeModel::train(&corpus, 400).unwrap();
        let labels = c.a.labels.clone();
        Fixture { cfg, a: c.a, b: c.b, tok: Tokenizer::new(pre, bpe), labels }
    }

    pub fn examples(&self, ds: &Dataset) -> Vec<Example> {
        ds.encode(&self.tok, &self.labels).unwrap()
    }

    pub fn tiny_config(&self, kind: EncoderKind) -> ModelConfig {
        let mut c = ModelConfig::desk_transformer(self.tok.bpe.vocab_size(), self.labels.len());
        c.encoder = kind;
        c.d_model = 16;
        c.n_heads = 2;
        c.d_ff = 32;
        c.n_layers = 1;
        c.n_pool = 2;
        c
    }
}

use seqcoder::metrics::LabelSet;

/// Dense confusion-matrix oracle: indicator matrices, counted cell by cell.
pub fn oracle(preds: &[LabelSet], golds: &[LabelSet], m: usize) -> (Vec<[usize; 3]>, f64) {
    let mut cells = vec![[0usize; 3]; m];
    let mut exact = 0;
    for (p, g) in preds.iter().zip(golds) {
        let mut same = true;
        for j in 0..m {
            let (pj, gj) = (p.contains(&j), g.contains(&j));
            match (pj, gj) {
                (true, true) => cells[j][0] += 1,
                (true, false) => cells[j][1] += 1,
                (false, true) => cells[j][2] += 1,
                _ => {}
            }
            same &= pj == gj;
        }
        exact += usize::from(same);
    }
    let em = if preds.is_empty() { 0.0 } else { exact as f64 / preds.len() as f64 };
    (cells, em)
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

