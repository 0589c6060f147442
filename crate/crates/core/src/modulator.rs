//! Text-conditioned feature modulation. Text tokens attend over a frame's
//! visual tokens; the mean attention mass each visual token receives becomes
//! a non-negative gate, normalised so uniform attention leaves tokens as-is.

use rand::Rng;
use serde::Serialize;

use crate::autograd::{ParamId, ParamStore, Session, Var};
use crate::error::{HierarqError, Result};
use crate::nn::{FeedForwardWeights, Init, LayerNormWeights, INIT_STD};
use crate::prompt::PromptBundle;
use crate::tensor::{Scalar, Tensor};

/// Encoder output for one frame: `N_v × D_vis` tokens at position `index`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeature<T> {
    pub index: usize,
    pub tokens: Tensor<T>,
}

impl<T: Scalar> FrameFeature<T> {
    pub fn new(index: usize, tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(HierarqError::Input(format!(
                "frame tokens must be 2-d, got shape {:?}",
                tokens.shape()
            )));
        }
        if !tokens.is_finite() {
            return Err(HierarqError::Input(format!("frame {index} has non-finite tokens")));
        }
        Ok(FrameFeature { index, tokens })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Entity,
    Scene,
}

#[derive(Debug, Clone)]
pub struct ModulatedFeature<T> {
    pub index: usize,
    pub tokens: Tensor<T>,
    pub stream: Stream,
    /// One `N_v` gate per modulator layer, in application order.
    pub gates: Vec<Vec<T>>,
}

impl<T: Scalar> ModulatedFeature<T> {
    /// Gate applied by the first layer, i.e. the salience of the raw tokens.
    pub fn gate(&self) -> &[T] {
        &self.gates[0]
    }
}

/// Query/key projections only: the gate consumes attention weights, never
/// attended values.
#[derive(Debug, Clone, Copy)]
pub struct ScoreWeights {
    pub wq: ParamId,
    pub wk: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ModulatorLayer {
    pub scores: ScoreWeights,
    pub ffn_norm: LayerNormWeights,
    pub ffn: FeedForwardWeights,
}

#[derive(Debug, Clone)]
pub struct ModulatorWeights {
    /// `D_txt × D_vis` map from text embeddings into the visual space.
    pub text_proj: ParamId,
    pub layers: Vec<ModulatorLayer>,
    pub heads: usize,
    pub text_dim: usize,
    pub visual_dim: usize,
}

impl ModulatorWeights {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        text_dim: usize,
        visual_dim: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || visual_dim % heads != 0 {
            return Err(HierarqError::Config(format!(
                "modulator dim {visual_dim} not divisible by {heads} heads"
            )));
        }
        let text_proj = store.add(
            format!("{name}.text_proj"),
            Tensor::randn(&[text_dim, visual_dim], INIT_STD, rng),
        );
        // the small text projection alone keeps initial gates near 1
        let score_std = Init::FanIn.std(visual_dim);
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                ModulatorLayer {
                    scores: ScoreWeights {
                        wq: store.add(
                            format!("{p}.wq"),
                            Tensor::randn(&[visual_dim, visual_dim], score_std, rng),
                        ),
                        wk: store.add(
                            format!("{p}.wk"),
                            Tensor::randn(&[visual_dim, visual_dim], score_std, rng),
                        ),
                    },
                    ffn_norm: LayerNormWeights::init(store, &format!("{p}.ffn_norm"), visual_dim),
                    ffn: FeedForwardWeights::init(store, &format!("{p}.ffn"), visual_dim, Init::Fixed(INIT_STD), rng),
                }
            })
            .collect();
        Ok(ModulatorWeights {
            text_proj,
            layers,
            heads,
            text_dim,
            visual_dim,
        })
    }

    /// Every parameter owned by this modulator.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.text_proj];
        for l in &self.layers {
            ids.extend([
                l.scores.wq,
                l.scores.wk,
                l.ffn_norm.gain,
                l.ffn_norm.bias,
                l.ffn.w1,
                l.ffn.b1,
                l.ffn.w2,
                l.ffn.b2,
            ]);
        }
        ids
    }
}

/// `N_v × mean over heads and text rows` of text→visual attention: a
/// length-`N_v` gate with mean exactly one.
fn salience_gate<T: Scalar>(
    s: &mut Session<'_, T>,
    text: Var,
    tokens: Var,
    w: &ScoreWeights,
    heads: usize,
) -> Result<Var> {
    let (wq, wk) = (s.param(w.wq), s.param(w.wk));
    let q = s.matmul(text, wq)?;
    let k = s.matmul(tokens, wk)?;
    let d = s.value(q).cols();
    let n_v = s.value(tokens).rows();
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut total: Option<Var> = None;
    for h in 0..heads {
        let (qh, kh) = if heads == 1 {
            (q, k)
        } else {
            (s.slice_cols(q, h * dh, dh)?, s.slice_cols(k, h * dh, dh)?)
        };
        let scores = s.matmul_nt(qh, kh)?;
        let scores = s.scale(scores, scale)?;
        let attn = s.softmax_rows(scores)?;
        let mass = s.mean_rows(attn)?;
        total = Some(match total {
            None => mass,
            Some(t) => s.add(t, mass)?,
        });
    }
    let total = total.expect("at least one head");
    s.scale(total, T::from_usize(n_v).unwrap() / T::from_usize(heads).unwrap())
}

/// Modulate `tokens` (`N_v × D_vis`) with text rows `text` (`K × D_txt`).
/// Returns the modulated tokens and one gate per layer.
pub fn modulate_on<T: Scalar>(
    s: &mut Session<'_, T>,
    tokens: Var,
    text: Var,
    w: &ModulatorWeights,
) -> Result<(Var, Vec<Var>)> {
    let text_shape = s.shape(text).to_vec();
    if text_shape.len() != 2 || text_shape[0] == 0 {
        return Err(HierarqError::Input(format!(
            "modulator needs at least one text token, got shape {text_shape:?}"
        )));
    }
    if text_shape[1] != w.text_dim {
        return Err(HierarqError::Config(format!(
            "text embedding dim {} does not match modulator text dim {}",
            text_shape[1], w.text_dim
        )));
    }
    if s.value(tokens).cols() != w.visual_dim {
        return Err(HierarqError::Config(format!(
            "visual dim {} does not match modulator visual dim {}",
            s.value(tokens).cols(),
            w.visual_dim
        )));
    }
    let proj = s.param(w.text_proj);
    let text = s.matmul(text, proj)?;
    let mut x = tokens;
    let mut gates = Vec::with_capacity(w.layers.len());
    for layer in &w.layers {
        let g = salience_gate(s, text, x, &layer.scores, w.heads)?;
        x = s.scale_rows(x, g)?;
        let h = layer.ffn_norm.apply(s, x)?;
        let h = layer.ffn.apply(s, h)?;
        x = s.add(x, h)?;
        gates.push(g);
    }
    Ok((x, gates))
}

fn run_plain<T: Scalar>(
    params: &ParamStore<T>,
    f: &FrameFeature<T>,
    text: &Tensor<T>,
    w: &ModulatorWeights,
    stream: Stream,
) -> Result<ModulatedFeature<T>> {
    let mut s = Session::new(params, false);
    let tokens = s.constant(f.tokens.clone());
    let text = s.constant(text.clone());
    let (out, gates) = modulate_on(&mut s, tokens, text, w)?;
    Ok(ModulatedFeature {
        index: f.index,
        tokens: s.value(out).clone(),
        stream,
        gates: gates.iter().map(|g| s.value(*g).data().to_vec()).collect(),
    })
}

fn passthrough<T: Scalar>(f: &FrameFeature<T>, stream: Stream, layers: usize) -> ModulatedFeature<T> {
    ModulatedFeature {
        index: f.index,
        tokens: f.tokens.clone(),
        stream,
        gates: vec![vec![T::one(); f.tokens.rows()]; layers.max(1)],
    }
}

/// Tape-free modulation of one frame by arbitrary text rows.
pub fn modulate<T: Scalar>(
    params: &ParamStore<T>,
    f: &FrameFeature<T>,
    text_emb: &Tensor<T>,
    w: &ModulatorWeights,
) -> Result<ModulatedFeature<T>> {
    run_plain(params, f, text_emb, w, Stream::Scene)
}

/// Entity-guided modulation; frames pass through untouched when the prompt
/// names no entity.
pub fn modulate_entity<T: Scalar>(
    params: &ParamStore<T>,
    f: &FrameFeature<T>,
    bundle: &PromptBundle<T>,
    w: &ModulatorWeights,
) -> Result<ModulatedFeature<T>> {
    match &bundle.entity_emb {
        Some(e) => run_plain(params, f, e, w, Stream::Entity),
        None => Ok(passthrough(f, Stream::Entity, w.layers.len())),
    }
}

pub fn modulate_scene<T: Scalar>(
    params: &ParamStore<T>,
    f: &FrameFeature<T>,
    bundle: &PromptBundle<T>,
    w: &ModulatorWeights,
) -> Result<ModulatedFeature<T>> {
    run_plain(params, f, &bundle.scene_emb, w, Stream::Scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::config::ModelConfig;
    use crate::prompt::{build_prompt_bundle, EntityLexicon};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, txt: usize, seed: u64) -> (ParamStore<f64>, ModulatorWeights) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = ModulatorWeights::init(&mut store, "m", txt, d, 2, 8, &mut rng).unwrap();
        (store, w)
    }

    fn frame(nv: usize, d: usize, seed: u64) -> FrameFeature<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameFeature::new(0, Tensor::randn(&[nv, d], 1.0, &mut rng)).unwrap()
    }

    fn zero_all(store: &mut ParamStore<f64>, ids: &[ParamId]) {
        for &id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn zero_weights_are_identity() {
        let (mut store, w) = setup(16, 8, 1);
        zero_all(&mut store, &w.param_ids());
        let f = frame(6, 16, 2);
        let text = Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let out = modulate(&store, &f, &text, &w).unwrap();
        assert_eq!(out.tokens, f.tokens);
        for g in &out.gates {
            assert!(g.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn single_token_gate_is_one() {
        let (store, w) = setup(16, 8, 4);
        let f = frame(1, 16, 5);
        let text = Tensor::randn(&[2, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let out = modulate(&store, &f, &text, &w).unwrap();
        for g in &out.gates {
            assert!((g[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_are_nonnegative_with_unit_mean() {
        let (store, w) = setup(16, 8, 7);
        for trial in 0..20 {
            let f = frame(10, 16, 100 + trial);
            let text = Tensor::randn(&[3, 8], 3.0, &mut ChaCha8Rng::seed_from_u64(trial));
            let out = modulate(&store, &f, &text, &w).unwrap();
            assert_eq!(out.tokens.shape(), f.tokens.shape());
            for g in &out.gates {
                assert!(g.iter().all(|&v| v >= 0.0));
                let mean = g.iter().sum::<f64>() / g.len() as f64;
                assert!((mean - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn entity_fallback_is_bit_identical() {
        let mut cfg = ModelConfig::desk();
        cfg.text_dim = 8;
        let bundle = build_prompt_bundle::<f64>("is it raining", &EntityLexicon::empty(), &cfg).unwrap();
        let (store, w) = setup(32, 8, 8);
        let f = frame(16, 32, 9);
        let out = modulate_entity(&store, &f, &bundle, &w).unwrap();
        assert_eq!(out.tokens, f.tokens);
        assert_eq!(out.stream, Stream::Entity);
    }

    #[test]
    fn text_dim_mismatch_is_config_error() {
        let (store, w) = setup(16, 8, 10);
        let f = frame(4, 16, 11);
        let text = Tensor::<f64>::zeros(&[2, 5]);
        assert!(matches!(modulate(&store, &f, &text, &w), Err(HierarqError::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = ModulatorWeights::init(&mut store, "m", 4, 8, 2, 2, &mut rng).unwrap();
        // larger weights so the gates are far from uniform
        for id in w.param_ids() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.5, &mut rng)).unwrap();
        }
        let tokens = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let text = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let report = grad_check(&store, 1e-6, |s| {
            let t = s.constant(tokens.clone());
            let e = s.constant(text.clone());
            let (x, _) = modulate_on(s, t, e, &w)?;
            let sq = s.mul(x, x)?;
            s.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
