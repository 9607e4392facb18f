//! Transformer building blocks on top of the tape: masked multi-head
//! attention, pre-norm residual blocks with a GELU feed-forward, and
//! parameter initialization.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::tape::{AttentionMask, ParamId, ParamStore, Tape, Var};
use crate::math::tensor::Tensor;

/// Scaled dot-product attention over `heads` heads under a boolean mask.
///
/// Returns the head-concatenated readout (no output projection): each output
/// row is a convex combination of `v` rows whose mask entry is allowed, and
/// disallowed rows receive an exact zero weight.
pub fn masked_multihead_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> Result<Var> {
    let (tq, d) = (tape.shape(q)[0], tape.shape(q)[1]);
    let (tk, dk) = (tape.shape(k)[0], tape.shape(k)[1]);
    let (tv, dv) = (tape.shape(v)[0], tape.shape(v)[1]);
    if d != dk || d != dv || tk != tv {
        return Err(Error::Shape(format!(
            "attention q {:?} k {:?} v {:?}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    if mask.rows != tq || mask.cols != tk {
        return Err(Error::Shape(format!(
            "mask {}x{} vs q rows {tq}, k rows {tk}",
            mask.rows, mask.cols
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Invalid(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    mask.validate()?;

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, c0, c1);
        let kh = tape.slice_cols(k, c0, c1);
        let vh = tape.slice_cols(v, c0, c1);
        let scores = tape.matmul_tb(qh, kh);
        let scaled = tape.scale_const(scores, scale);
        let weights = tape.masked_softmax_rows(scaled, mask.clone());
        outs.push(tape.matmul(weights, vh));
    }
    Ok(if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    })
}

/// Parameter handles for one linear layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), xavier(fan_in, fan_out, rng));
        let b = bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(vec![fan_out])));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = tape.param(b);
                tape.add_row_broadcast(y, bv)
            }
            None => y,
        }
    }

    /// Rebind handles against a reloaded store by parameter name.
    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store
            .by_name(&format!("{name}.w"))
            .ok_or_else(|| Error::MissingArtifact(format!("param {name}.w")))?;
        Ok(Linear {
            w,
            b: store.by_name(&format!("{name}.b")),
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(
            &format!("{name}.gamma"),
            Tensor::new(vec![width], vec![1.0; width]).unwrap(),
        );
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(vec![width]));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm_rows(x, g, b, self.eps)
    }

    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let gamma = store
            .by_name(&format!("{name}.gamma"))
            .ok_or_else(|| Error::MissingArtifact(format!("param {name}.gamma")))?;
        let beta = store
            .by_name(&format!("{name}.beta"))
            .ok_or_else(|| Error::MissingArtifact(format!("param {name}.beta")))?;
        Ok(LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        })
    }
}

/// One pre-norm transformer block: `x + Wo·MHA(LN1 x)` then `x + FF(LN2 x)`.
#[derive(Clone, Debug)]
pub struct Block {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Block {
            heads,
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), width),
            wq: Linear::init(store, &format!("{name}.wq"), width, width, false, rng),
            wk: Linear::init(store, &format!("{name}.wk"), width, width, false, rng),
            wv: Linear::init(store, &format!("{name}.wv"), width, width, false, rng),
            wo: Linear::init(store, &format!("{name}.wo"), width, width, true, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), width),
            ff1: Linear::init(store, &format!("{name}.ff1"), width, width * ff_mult, true, rng),
            ff2: Linear::init(store, &format!("{name}.ff2"), width * ff_mult, width, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let a = self.ln1.forward(tape, x);
        let q = self.wq.forward(tape, a);
        let k = self.wk.forward(tape, a);
        let v = self.wv.forward(tape, a);
        let att = masked_multihead_attention(tape, q, k, v, mask, self.heads)?;
        let proj = self.wo.forward(tape, att);
        let x = tape.add(x, proj);
        let b = self.ln2.forward(tape, x);
        let h = self.ff1.forward(tape, b);
        let h = tape.gelu(h);
        let h = self.ff2.forward(tape, h);
        Ok(tape.add(x, h))
    }

    pub fn attach(store: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(Block {
            heads,
            ln1: LayerNorm::attach(store, &format!("{name}.ln1"))?,
            wq: Linear::attach(store, &format!("{name}.wq"))?,
            wk: Linear::attach(store, &format!("{name}.wk"))?,
            wv: Linear::attach(store, &format!("{name}.wv"))?,
            wo: Linear::attach(store, &format!("{name}.wo"))?,
            ln2: LayerNorm::attach(store, &format!("{name}.ln2"))?,
            ff1: Linear::attach(store, &format!("{name}.ff1"))?,
            ff2: Linear::attach(store, &format!("{name}.ff2"))?,
        })
    }
}

/// A stack of pre-norm blocks with a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
}

impl Stack {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| Block::init(store, &format!("{name}.{i}"), width, heads, 4, rng))
            .collect();
        Stack {
            blocks,
            final_ln: LayerNorm::init(store, &format!("{name}.final_ln"), width),
        }
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, x, mask)?;
        }
        Ok(self.final_ln.forward(tape, x))
    }

    pub fn attach(store: &ParamStore, name: &str, layers: usize, heads: usize) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| Block::attach(store, &format!("{name}.{i}"), heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Stack {
            blocks,
            final_ln: LayerNorm::attach(store, &format!("{name}.final_ln"))?,
        })
    }
}

pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    gaussian(vec![fan_in, fan_out], std, rng)
}

pub fn gaussian(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}
