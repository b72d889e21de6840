//! Pre-norm transformer backbone shared by the classifier encoder and the
//! causal language model.
//!
//! Parameters live in a flat, named, fixed-order list ([`ParamSet`]); the
//! order is the checkpoint order. Index structs map roles to positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{AttnMask, Graph, NodeId};
use crate::error::{invalid, Result};
use crate::tensor::{Matrix, Scalar};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self { name: name.into(), rows, cols, init }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BackboneDims {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl BackboneDims {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.num_layers,
            self.num_heads,
            self.model_dim,
            self.ff_dim,
            self.vocab_size,
            self.max_len,
        ]
        .iter()
        .all(|&d| d >= 1);
        if !all_positive {
            return Err(invalid("all model dimensions must be >= 1"));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(invalid(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIndex {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BackboneIndex {
    pub tok_emb: usize,
    pub pos_emb: usize,
    blocks: Vec<BlockIndex>,
    lnf_g: usize,
    lnf_b: usize,
}

/// Parameter specs in checkpoint order, and the role index into them.
pub(crate) fn backbone_specs(dims: &BackboneDims) -> (Vec<ParamSpec>, BackboneIndex) {
    let d = dims.model_dim;
    let f = dims.ff_dim;
    let mut specs = Vec::new();
    let mut add = |spec: ParamSpec| {
        specs.push(spec);
        specs.len() - 1
    };
    let tok_emb = add(ParamSpec::new("tok_emb", dims.vocab_size, d, Init::Normal(INIT_STD)));
    let pos_emb = add(ParamSpec::new("pos_emb", dims.max_len, d, Init::Normal(INIT_STD)));
    let mut blocks = Vec::with_capacity(dims.num_layers);
    for l in 0..dims.num_layers {
        let n = |s: &str| format!("layer{l}.{s}");
        blocks.push(BlockIndex {
            ln1_g: add(ParamSpec::new(n("ln1.gamma"), 1, d, Init::Ones)),
            ln1_b: add(ParamSpec::new(n("ln1.beta"), 1, d, Init::Zeros)),
            wq: add(ParamSpec::new(n("attn.wq"), d, d, Init::Normal(INIT_STD))),
            bq: add(ParamSpec::new(n("attn.bq"), 1, d, Init::Zeros)),
            wk: add(ParamSpec::new(n("attn.wk"), d, d, Init::Normal(INIT_STD))),
            bk: add(ParamSpec::new(n("attn.bk"), 1, d, Init::Zeros)),
            wv: add(ParamSpec::new(n("attn.wv"), d, d, Init::Normal(INIT_STD))),
            bv: add(ParamSpec::new(n("attn.bv"), 1, d, Init::Zeros)),
            wo: add(ParamSpec::new(n("attn.wo"), d, d, Init::Normal(INIT_STD))),
            bo: add(ParamSpec::new(n("attn.bo"), 1, d, Init::Zeros)),
            ln2_g: add(ParamSpec::new(n("ln2.gamma"), 1, d, Init::Ones)),
            ln2_b: add(ParamSpec::new(n("ln2.beta"), 1, d, Init::Zeros)),
            w1: add(ParamSpec::new(n("ff.w1"), d, f, Init::Normal(INIT_STD))),
            b1: add(ParamSpec::new(n("ff.b1"), 1, f, Init::Zeros)),
            w2: add(ParamSpec::new(n("ff.w2"), f, d, Init::Normal(INIT_STD))),
            b2: add(ParamSpec::new(n("ff.b2"), 1, d, Init::Zeros)),
        });
    }
    let lnf_g = add(ParamSpec::new("final_ln.gamma", 1, d, Init::Ones));
    let lnf_b = add(ParamSpec::new("final_ln.beta", 1, d, Init::Zeros));
    (specs, BackboneIndex { tok_emb, pos_emb, blocks, lnf_g, lnf_b })
}

pub(crate) fn head_spec(name: &str, rows: usize, cols: usize, init_std: f64) -> ParamSpec {
    if init_std == 0.0 {
        ParamSpec::new(name, rows, cols, Init::Zeros)
    } else {
        ParamSpec::new(name, rows, cols, Init::Normal(init_std))
    }
}

pub(crate) fn bias_spec(name: &str, cols: usize) -> ParamSpec {
    ParamSpec::new(name, 1, cols, Init::Zeros)
}

pub(crate) fn init_params<T: Scalar>(specs: &[ParamSpec], seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in specs {
        let m = match spec.init {
            Init::Zeros => Matrix::zeros(spec.rows, spec.cols),
            Init::Ones => Matrix::filled(spec.rows, spec.cols, T::one()),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("valid std");
                let data = (0..spec.rows * spec.cols)
                    .map(|_| T::of(normal.sample(&mut rng)))
                    .collect();
                Matrix::from_vec(spec.rows, spec.cols, data).expect("spec shape")
            }
        };
        names.push(spec.name.clone());
        tensors.push(m);
    }
    ParamSet { names, tensors }
}

/// Checks that loaded parameters have exactly the names and shapes `specs`
/// prescribe, in order.
pub(crate) fn check_layout<T: Scalar>(specs: &[ParamSpec], params: &ParamSet<T>) -> std::result::Result<(), String> {
    if specs.len() != params.len() {
        return Err(format!("expected {} parameter blocks, found {}", specs.len(), params.len()));
    }
    for (spec, (name, t)) in specs.iter().zip(params.names.iter().zip(&params.tensors)) {
        if &spec.name != name {
            return Err(format!("expected block {:?}, found {name:?}", spec.name));
        }
        if (spec.rows, spec.cols) != t.shape() {
            return Err(format!(
                "block {name}: expected {}x{}, found {}x{}",
                spec.rows,
                spec.cols,
                t.rows(),
                t.cols()
            ));
        }
    }
    Ok(())
}

/// Inverted-dropout masks drawn for one forward pass during training.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn apply_dropout<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, dropout: &mut Option<Dropout<'_>>) -> NodeId {
    let Some(d) = dropout.as_mut() else {
        return x;
    };
    if d.rate <= 0.0 {
        return x;
    }
    let (r, c) = g.value(x).shape();
    let keep = T::of(1.0 / (1.0 - d.rate));
    let data = (0..r * c)
        .map(|_| if d.rng.random::<f64>() < d.rate { T::zero() } else { keep })
        .collect();
    g.mul_const(x, Matrix::from_vec(r, c, data).expect("mask shape"))
}

pub(crate) struct BackboneOut {
    pub hidden: NodeId,
    /// `[layer][head]` attention-probability nodes.
    pub attention: Vec<Vec<NodeId>>,
}

pub(crate) fn backbone_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    index: &BackboneIndex,
    dims: &BackboneDims,
    ids: &[usize],
    mask: &AttnMask,
    mut dropout: Option<Dropout<'_>>,
) -> BackboneOut {
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.gather(index.tok_emb, ids);
    let pos = g.gather(index.pos_emb, &positions);
    let mut x = g.add(tok, pos);
    let hd = dims.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut attention = Vec::with_capacity(index.blocks.len());

    for b in &index.blocks {
        let p = |g: &mut Graph<'_, T>, i: usize| g.param(i);
        let (g1, b1) = (p(g, b.ln1_g), p(g, b.ln1_b));
        let h = g.layer_norm(x, g1, b1);
        let proj = |g: &mut Graph<'_, T>, w: usize, bias: usize| {
            let w = g.param(w);
            let bias = g.param(bias);
            let y = g.matmul(h, w);
            g.add_row(y, bias)
        };
        let q = proj(g, b.wq, b.bq);
        let k = proj(g, b.wk, b.bk);
        let v = proj(g, b.wv, b.bv);
        let mut heads = Vec::with_capacity(dims.num_heads);
        let mut probs = Vec::with_capacity(dims.num_heads);
        for head in 0..dims.num_heads {
            let qh = g.slice_cols(q, head * hd, hd);
            let kh = g.slice_cols(k, head * hd, hd);
            let vh = g.slice_cols(v, head * hd, hd);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let a = g.masked_softmax(scores, mask);
            probs.push(a);
            heads.push(g.matmul(a, vh));
        }
        attention.push(probs);
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let wo = g.param(b.wo);
        let bo = g.param(b.bo);
        let attn_out = g.matmul(ctx, wo);
        let attn_out = g.add_row(attn_out, bo);
        let attn_out = apply_dropout(g, attn_out, &mut dropout);
        x = g.add(x, attn_out);

        let (g2, b2) = (p(g, b.ln2_g), p(g, b.ln2_b));
        let h2 = g.layer_norm(x, g2, b2);
        let w1 = g.param(b.w1);
        let bias1 = g.param(b.b1);
        let f = g.matmul(h2, w1);
        let f = g.add_row(f, bias1);
        let f = g.gelu(f);
        let w2 = g.param(b.w2);
        let bias2 = g.param(b.b2);
        let f = g.matmul(f, w2);
        let f = g.add_row(f, bias2);
        let f = apply_dropout(g, f, &mut dropout);
        x = g.add(x, f);
    }
    let gf = g.param(index.lnf_g);
    let bf = g.param(index.lnf_b);
    let hidden = g.layer_norm(x, gf, bf);
    BackboneOut { hidden, attention }
}
