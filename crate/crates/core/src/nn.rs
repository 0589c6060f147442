//! Transformer building blocks recorded on a [`Session`].

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Session, Var};
use crate::error::{HierarqError, Result};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Default standard deviation of the Gaussian weight initialiser.
pub const INIT_STD: f64 = 0.02;

/// Scale of a Gaussian weight initialiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Fixed(f64),
    /// `1/sqrt(fan_in)`.
    FanIn,
}

impl Init {
    pub fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Fixed(s) => s,
            Init::FanIn => 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormWeights {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormWeights {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNormWeights {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

/// Query/key/value/output projections, all d×d, no biases.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionWeights {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let mut w = |suffix: &str, rng: &mut R| {
            store.add(format!("{name}.{suffix}"), Tensor::randn(&[d, d], init.std(d), rng))
        };
        AttentionWeights {
            wq: w("wq", rng),
            wk: w("wk", rng),
            wv: w("wv", rng),
            wo: w("wo", rng),
        }
    }
}

/// Output and per-head attention maps of [`multi_head_attention_on`].
pub struct AttentionOutput {
    pub out: Var,
    /// One `L_q × L_k` map per head.
    pub maps: Vec<Var>,
}

/// Scaled dot-product attention split over `heads`, then output projection.
pub fn multi_head_attention_on<T: Scalar>(
    s: &mut Session<'_, T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<AttentionOutput> {
    let d = s.value(q_in).cols();
    if heads == 0 || d % heads != 0 {
        return Err(HierarqError::Config(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let (wq, wk, wv, wo) = (s.param(w.wq), s.param(w.wk), s.param(w.wv), s.param(w.wo));
    let q = s.matmul(q_in, wq)?;
    let k = s.matmul(k_in, wk)?;
    let v = s.matmul(v_in, wv)?;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                s.slice_cols(q, h * dh, dh)?,
                s.slice_cols(k, h * dh, dh)?,
                s.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = s.matmul_nt(qh, kh)?;
        let scores = s.scale(scores, scale)?;
        let attn = s.softmax_rows(scores)?;
        outs.push(s.matmul(attn, vh)?);
        maps.push(attn);
    }
    let cat = if heads == 1 { outs[0] } else { s.concat_cols(&outs)? };
    let out = s.matmul(cat, wo)?;
    Ok(AttentionOutput { out, maps })
}

/// Tape-free multi-head attention; returns the output and the stacked
/// `heads × L_q × L_k` attention tensor.
pub fn multi_head_attention<T: Scalar>(
    q_in: &Tensor<T>,
    k_in: &Tensor<T>,
    v_in: &Tensor<T>,
    params: &ParamStore<T>,
    w: &AttentionWeights,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut s = Session::new(params, false);
    let q = s.constant(q_in.clone());
    let k = s.constant(k_in.clone());
    let v = s.constant(v_in.clone());
    let res = multi_head_attention_on(&mut s, q, k, v, w, heads)?;
    let lq = q_in.rows();
    let lk = k_in.rows();
    let mut attn = Vec::with_capacity(heads * lq * lk);
    for m in &res.maps {
        attn.extend_from_slice(s.value(*m).data());
    }
    Ok((s.value(res.out).clone(), Tensor::new(&[heads, lq, lk], attn)?))
}

/// Position-wise d → 4d → d with GELU.
#[derive(Debug, Clone, Copy)]
pub struct FeedForwardWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardWeights {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let h = 4 * d;
        FeedForwardWeights {
            w1: store.add(format!("{name}.w1"), Tensor::randn(&[d, h], init.std(d), rng)),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[h])),
            w2: store.add(format!("{name}.w2"), Tensor::randn(&[h, d], init.std(h), rng)),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (s.param(self.w1), s.param(self.b1), s.param(self.w2), s.param(self.b2));
        let h = s.matmul(x, w1)?;
        let h = s.add_row(h, b1)?;
        let h = s.gelu(h)?;
        let o = s.matmul(h, w2)?;
        s.add_row(o, b2)
    }
}

/// Fully connected map with bias.
#[derive(Debug, Clone, Copy)]
pub struct LinearWeights {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearWeights {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        LinearWeights {
            w: store.add(format!("{name}.w"), Tensor::randn(&[d_in, d_out], init.std(d_in), rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn apply<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let y = s.matmul(x, w)?;
        s.add_row(y, b)
    }
}
