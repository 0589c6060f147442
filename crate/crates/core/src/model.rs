//! Entity and scene query transformers and the streaming per-frame step.
//!
//! Frames are consumed strictly in order. Each frame is modulated twice
//! (entity prompt, full prompt), pushed into the two visual banks, and read
//! by two query transformers whose self-attention keys come from per-layer
//! query banks. The scene transformer additionally attends to the entity
//! output of the same frame. Only the final scene output leaves the model.

use std::borrow::Borrow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{ParamId, ParamStore, Session, Var};
use crate::config::{AblationFlags, ModelConfig};
use crate::error::{HierarqError, Result};
use crate::head::ClassifierHead;
use crate::memory::{BankConfig, MemoryBank, PushOutcome, QueryMemory, UpdatePolicy};
use crate::modulator::{modulate_on, FrameFeature, ModulatorWeights};
use crate::nn::{
    multi_head_attention_on, AttentionWeights, FeedForwardWeights, Init, LayerNormWeights,
};
use crate::prompt::PromptBundle;
use crate::tensor::{sinusoidal_position, Scalar, Tensor};

/// Pre-norm attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub norm: LayerNormWeights,
    pub attn: AttentionWeights,
}

impl AttentionBlock {
    fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionBlock {
            norm: LayerNormWeights::init(store, &format!("{name}.norm"), d),
            attn: AttentionWeights::init(store, &format!("{name}.attn"), d, Init::FanIn, rng),
        }
    }

    fn params(&self) -> [ParamId; 6] {
        [
            self.norm.gain,
            self.norm.bias,
            self.attn.wq,
            self.attn.wk,
            self.attn.wv,
            self.attn.wo,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct QFormerLayer {
    /// Self-attention over the layer's query bank.
    pub self_attn: AttentionBlock,
    /// Cross-attention over the stream's visual bank.
    pub cross: Option<AttentionBlock>,
    /// Scene only: self-attention over the cross-attended queries.
    pub refine: Option<AttentionBlock>,
    /// Scene only: cross-attention to the entity output.
    pub link: Option<AttentionBlock>,
    pub ffn_norm: LayerNormWeights,
    pub ffn: FeedForwardWeights,
}

impl QFormerLayer {
    pub fn attention_blocks(&self) -> usize {
        1 + [self.cross, self.refine, self.link].iter().flatten().count()
    }
}

#[derive(Debug, Clone)]
pub struct QFormerWeights {
    /// Learnable input queries, `N_q × D_q`, fed at every frame.
    pub queries: ParamId,
    /// `D_vis × D_q` projection of visual bank rows.
    pub visual_proj: ParamId,
    pub layers: Vec<QFormerLayer>,
    pub final_norm: LayerNormWeights,
}

impl QFormerWeights {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        scene: Option<&AblationFlags>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.query_dim;
        let queries = store.add(
            format!("{name}.queries"),
            Tensor::randn(&[cfg.num_queries, d], 1.0, rng),
        );
        let visual_proj = store.add(
            format!("{name}.visual_proj"),
            Tensor::randn(&[cfg.visual_dim, d], Init::FanIn.std(cfg.visual_dim), rng),
        );
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                let cross = cfg.is_cross_layer(l);
                let extra = scene.map(|f| cross || f.scene_submodules_all_layers);
                let refine = extra == Some(true);
                let link = refine && !scene.is_some_and(|f| f.disable_hierarchical_link);
                QFormerLayer {
                    self_attn: AttentionBlock::init(store, &format!("{p}.self"), d, rng),
                    cross: cross.then(|| AttentionBlock::init(store, &format!("{p}.cross"), d, rng)),
                    refine: refine.then(|| AttentionBlock::init(store, &format!("{p}.refine"), d, rng)),
                    link: link.then(|| AttentionBlock::init(store, &format!("{p}.link"), d, rng)),
                    ffn_norm: LayerNormWeights::init(store, &format!("{p}.ffn_norm"), d),
                    ffn: FeedForwardWeights::init(store, &format!("{p}.ffn"), d, Init::FanIn, rng),
                }
            })
            .collect();
        QFormerWeights {
            queries,
            visual_proj,
            layers,
            final_norm: LayerNormWeights::init(store, &format!("{name}.final_norm"), d),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.queries, self.visual_proj];
        for l in &self.layers {
            ids.extend(l.self_attn.params());
            for b in [l.cross, l.refine, l.link].iter().flatten() {
                ids.extend(b.params());
            }
            ids.extend([l.ffn_norm.gain, l.ffn_norm.bias, l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2]);
        }
        ids.extend([self.final_norm.gain, self.final_norm.bias]);
        ids
    }

    /// Parameters of the scene→entity cross-attention blocks.
    pub fn link_param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.link).flat_map(|b| b.params()).collect()
    }
}

/// Memory owned by one stream of one video.
#[derive(Debug, Clone)]
pub struct StreamState<T> {
    pub visual: MemoryBank<T>,
    pub queries: QueryMemory<T>,
    pub last_output: Option<Tensor<T>>,
    /// Frames processed so far.
    pub frames: usize,
}

impl<T: Scalar> StreamState<T> {
    pub fn live_floats(&self) -> usize {
        self.visual.live_floats()
            + self.queries.live_floats()
            + self.last_output.as_ref().map_or(0, Tensor::len)
    }
}

#[derive(Debug, Clone)]
pub struct VideoState<T> {
    pub entity: StreamState<T>,
    pub scene: StreamState<T>,
}

impl<T: Scalar> VideoState<T> {
    pub fn frames(&self) -> usize {
        self.scene.frames
    }

    pub fn live_floats(&self) -> usize {
        self.entity.live_floats() + self.scene.live_floats()
    }
}

/// Key/value row counts seen by one layer during one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerTrace {
    pub query_rows: usize,
    pub visual_rows: Option<usize>,
    pub entity_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepTrace {
    pub entity: Vec<LayerTrace>,
    pub scene: Vec<LayerTrace>,
}

/// Tape handles produced by one frame step.
#[derive(Debug, Clone)]
pub struct StepVars {
    pub entity: Var,
    pub scene: Var,
    pub entity_gates: Vec<Var>,
    pub scene_gates: Vec<Var>,
    pub trace: StepTrace,
}

#[derive(Debug, Clone)]
pub struct FrameOutput<T> {
    pub index: usize,
    pub entity: Tensor<T>,
    pub scene: Tensor<T>,
    /// First-layer gates.
    pub entity_gate: Vec<T>,
    pub scene_gate: Vec<T>,
    pub trace: StepTrace,
}

/// Per-frame gate statistics reported by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct GateSummary {
    pub frame: usize,
    pub entity_argmax: usize,
    pub entity_max: f64,
    pub scene_argmax: usize,
    pub scene_max: f64,
}

impl GateSummary {
    fn from_output<T: Scalar>(out: &FrameOutput<T>) -> Self {
        let top = |g: &[T]| {
            g.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                    if v.as_f64() > best.1 {
                        (i, v.as_f64())
                    } else {
                        best
                    }
                })
        };
        let (ea, em) = top(&out.entity_gate);
        let (sa, sm) = top(&out.scene_gate);
        GateSummary {
            frame: out.index,
            entity_argmax: ea,
            entity_max: em,
            scene_argmax: sa,
            scene_max: sm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VideoOutput<T> {
    /// Final scene output: exactly `N_q` tokens.
    pub scene: Tensor<T>,
    pub entity: Tensor<T>,
    pub frames: usize,
    pub gates: Vec<GateSummary>,
    /// Largest live state observed after any frame.
    pub peak_live_floats: usize,
}

/// Parameter layout of a model; independent of the scalar type.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub flags: AblationFlags,
    pub entity_modulator: ModulatorWeights,
    pub scene_modulator: ModulatorWeights,
    pub entity: QFormerWeights,
    pub scene: QFormerWeights,
    pub head: ClassifierHead,
}

fn capacity(enabled: bool, m: usize) -> usize {
    if enabled {
        m
    } else {
        1
    }
}

impl Architecture {
    fn init<T: Scalar>(cfg: &ModelConfig, flags: &AblationFlags, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let modulator = |store: &mut ParamStore<T>, name: &str, rng: &mut ChaCha8Rng| {
            ModulatorWeights::init(
                store,
                name,
                cfg.text_dim,
                cfg.visual_dim,
                cfg.modulator_layers,
                cfg.modulator_heads,
                rng,
            )
        };
        let entity_modulator = modulator(store, "entity.modulator", &mut rng)?;
        let scene_modulator = modulator(store, "scene.modulator", &mut rng)?;
        let entity = QFormerWeights::init(store, "entity.qformer", cfg, None, &mut rng);
        let scene = QFormerWeights::init(store, "scene.qformer", cfg, Some(flags), &mut rng);
        let per_stream = cfg.num_queries * cfg.query_dim;
        let inputs = if flags.disable_hierarchical_link {
            2 * per_stream
        } else {
            per_stream
        };
        let head = ClassifierHead::init(store, "head", inputs, cfg.num_classes, &mut rng);
        Ok(Architecture {
            cfg: cfg.clone(),
            flags: flags.clone(),
            entity_modulator,
            scene_modulator,
            entity,
            scene,
            head,
        })
    }

    fn bank(&self, rows: usize, dim: usize, cap: usize, policy: UpdatePolicy) -> BankConfig {
        BankConfig {
            rows,
            dim,
            capacity: cap,
            policy,
            granularity: self.flags.compression_granularity,
            merge: self.flags.merge_rule,
        }
    }

    fn visual_capacity(&self, entity: bool) -> usize {
        if entity {
            capacity(self.flags.short_visual_memory, self.cfg.short_memory)
        } else {
            capacity(self.flags.long_visual_memory, self.cfg.long_memory)
        }
    }

    fn query_capacity(&self, entity: bool) -> usize {
        if entity {
            capacity(self.flags.short_query_memory, self.cfg.short_memory)
        } else {
            capacity(self.flags.long_query_memory, self.cfg.long_memory)
        }
    }

    fn stream_state<T: Scalar>(&self, entity: bool) -> Result<StreamState<T>> {
        let c = &self.cfg;
        let (policy, visual_on, query_on) = if entity {
            (self.flags.short_policy, self.flags.short_visual_memory, self.flags.short_query_memory)
        } else {
            (self.flags.long_policy, self.flags.long_visual_memory, self.flags.long_query_memory)
        };
        // a disabled bank keeps only the current step; merging into a single
        // slot would still carry history
        let policy_for = |on: bool| if on { policy } else { UpdatePolicy::Fifo };
        Ok(StreamState {
            visual: MemoryBank::new(self.bank(
                c.visual_tokens,
                c.visual_dim,
                self.visual_capacity(entity),
                policy_for(visual_on),
            ))?,
            queries: QueryMemory::new(
                c.layers,
                self.bank(c.num_queries, c.query_dim, self.query_capacity(entity), policy_for(query_on)),
            )?,
            last_output: None,
            frames: 0,
        })
    }

    pub fn fresh_state<T: Scalar>(&self) -> Result<VideoState<T>> {
        Ok(VideoState {
            entity: self.stream_state(true)?,
            scene: self.stream_state(false)?,
        })
    }

    /// Closed-form bound on [`VideoState::live_floats`], independent of the
    /// number of frames.
    pub fn state_bound(&self) -> usize {
        let c = &self.cfg;
        let stream = |entity: bool| {
            self.visual_capacity(entity) * c.visual_tokens * c.visual_dim
                + c.layers * self.query_capacity(entity) * c.num_queries * c.query_dim
                + c.num_queries * c.query_dim
        };
        stream(true) + stream(false)
    }

    /// Every trainable parameter, grouped by component.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.entity_modulator.param_ids();
        ids.extend(self.scene_modulator.param_ids());
        ids.extend(self.entity.param_ids());
        ids.extend(self.scene.param_ids());
        ids.extend([self.head.linear.w, self.head.linear.b]);
        ids
    }

    fn check_frame<T: Scalar>(&self, state: &VideoState<T>, frame: &FrameFeature<T>) -> Result<()> {
        if frame.index != state.frames() {
            return Err(HierarqError::Sequencing {
                expected: state.frames(),
                got: frame.index,
            });
        }
        let want = [self.cfg.visual_tokens, self.cfg.visual_dim];
        if frame.tokens.shape() != want {
            return Err(HierarqError::dim("process_frame", &want, frame.tokens.shape()));
        }
        Ok(())
    }

    /// Run one frame on `s`. History in `state` enters as constants; the
    /// frame itself and all parameters are differentiable when `s` tracks.
    pub fn frame_step<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        state: &mut VideoState<T>,
        frame: &FrameFeature<T>,
        bundle: &PromptBundle<T>,
    ) -> Result<StepVars> {
        self.check_frame(state, frame)?;
        let t = frame.index;
        let mut tokens = frame.tokens.clone();
        let pe: Vec<T> = sinusoidal_position(t, self.cfg.visual_dim);
        for row in tokens.data_mut().chunks_mut(self.cfg.visual_dim) {
            row.iter_mut().zip(&pe).for_each(|(x, p)| *x += *p);
        }
        let tokens = s.constant(tokens);

        let entity_text = if self.flags.disable_entity_stream {
            None
        } else {
            bundle.entity_emb.as_ref()
        };
        let (entity_feat, entity_gates) = modulated(s, tokens, entity_text, &self.entity_modulator)?;
        let scene_text = (!self.flags.disable_scene_modulator).then_some(&bundle.scene_emb);
        let (scene_feat, scene_gates) = modulated(s, tokens, scene_text, &self.scene_modulator)?;

        let heads = self.cfg.heads;
        let entity_kv = push_visual(s, &mut state.entity.visual, entity_feat, self.entity.visual_proj)?;
        let (entity, entity_trace) = query_stack(s, &self.entity, &mut state.entity, entity_kv, None, heads)?;
        let link = (!self.flags.disable_hierarchical_link).then_some(entity);
        let scene_kv = push_visual(s, &mut state.scene.visual, scene_feat, self.scene.visual_proj)?;
        let (scene, scene_trace) = query_stack(s, &self.scene, &mut state.scene, scene_kv, link, heads)?;

        for (st, out) in [(&mut state.entity, entity), (&mut state.scene, scene)] {
            st.last_output = Some(s.value(out).clone());
            st.frames += 1;
        }
        Ok(StepVars {
            entity,
            scene,
            entity_gates,
            scene_gates,
            trace: StepTrace {
                entity: entity_trace,
                scene: scene_trace,
            },
        })
    }

    /// Head logits (`1 × C`) for one step's outputs.
    pub fn logits_on<T: Scalar>(&self, s: &mut Session<'_, T>, step: &StepVars) -> Result<Var> {
        if self.flags.disable_hierarchical_link {
            self.head.apply(s, &[step.scene, step.entity])
        } else {
            self.head.apply(s, &[step.scene])
        }
    }
}

/// Modulated tokens and per-layer gates; without text the tokens pass
/// through and the gates are all ones.
fn modulated<T: Scalar>(
    s: &mut Session<'_, T>,
    tokens: Var,
    text: Option<&Tensor<T>>,
    w: &ModulatorWeights,
) -> Result<(Var, Vec<Var>)> {
    match text {
        Some(e) => {
            let e = s.constant(e.clone());
            modulate_on(s, tokens, e, w)
        }
        None => {
            let n = s.value(tokens).rows();
            let ones = s.constant(Tensor::full(&[n], T::one()));
            Ok((tokens, vec![ones; w.layers.len().max(1)]))
        }
    }
}

/// Rows of `bank` after a push, with the newest entry rebuilt from `item`
/// so that gradients reach the current step.
fn bank_rows<T: Scalar>(
    s: &mut Session<'_, T>,
    bank: &MemoryBank<T>,
    outcome: &PushOutcome<T>,
    item: Var,
) -> Result<Var> {
    if !s.tracking() {
        return Ok(s.constant(bank.flatten()?));
    }
    let newest = if outcome.is_fresh() {
        item
    } else {
        let c = s.constant(Tensor::new(&[outcome.coeff.len()], outcome.coeff.clone())?);
        let scaled = s.scale_rows(item, c)?;
        let offset = s.constant(outcome.offset.clone());
        s.add(scaled, offset)?
    };
    let len = bank.len();
    if len == 1 {
        return Ok(newest);
    }
    let history = s.constant(bank.flatten_prefix(len - 1)?);
    s.concat_rows(&[history, newest])
}

fn push_visual<T: Scalar>(
    s: &mut Session<'_, T>,
    bank: &mut MemoryBank<T>,
    feat: Var,
    proj: ParamId,
) -> Result<Var> {
    let outcome = bank.push(s.value(feat))?;
    let rows = bank_rows(s, bank, &outcome, feat)?;
    let w = s.param(proj);
    s.matmul(rows, w)
}

fn attend<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    kv: Option<Var>,
    block: &AttentionBlock,
    heads: usize,
) -> Result<Var> {
    let h = block.norm.apply(s, x)?;
    let kv = kv.unwrap_or(h);
    let out = multi_head_attention_on(s, h, kv, kv, &block.attn, heads)?.out;
    s.add(x, out)
}

fn query_stack<T: Scalar>(
    s: &mut Session<'_, T>,
    w: &QFormerWeights,
    state: &mut StreamState<T>,
    visual: Var,
    entity: Option<Var>,
    heads: usize,
) -> Result<(Var, Vec<LayerTrace>)> {
    if state.queries.layers.len() != w.layers.len() {
        return Err(HierarqError::Config(format!(
            "state has {} query banks for {} layers",
            state.queries.layers.len(),
            w.layers.len()
        )));
    }
    let mut x = s.param(w.queries);
    let mut trace = Vec::with_capacity(w.layers.len());
    for (layer, bank) in w.layers.iter().zip(&mut state.queries.layers) {
        let outcome = bank.push(s.value(x))?;
        let kv = bank_rows(s, bank, &outcome, x)?;
        let mut t = LayerTrace {
            query_rows: s.value(kv).rows(),
            visual_rows: None,
            entity_rows: None,
        };
        let kv = layer.self_attn.norm.apply(s, kv)?;
        x = attend(s, x, Some(kv), &layer.self_attn, heads)?;
        if let Some(cross) = &layer.cross {
            t.visual_rows = Some(s.value(visual).rows());
            x = attend(s, x, Some(visual), cross, heads)?;
        }
        if let Some(refine) = &layer.refine {
            x = attend(s, x, None, refine, heads)?;
        }
        if let (Some(link), Some(e)) = (&layer.link, entity) {
            t.entity_rows = Some(s.value(e).rows());
            x = attend(s, x, Some(e), link, heads)?;
        }
        let h = layer.ffn_norm.apply(s, x)?;
        let h = layer.ffn.apply(s, h)?;
        x = s.add(x, h)?;
        trace.push(t);
    }
    Ok((w.final_norm.apply(s, x)?, trace))
}

/// A model: architecture plus parameter values.
#[derive(Debug, Clone)]
pub struct HierarQ<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Scalar> HierarQ<T> {
    /// Fresh model seeded by `cfg.seed`.
    pub fn new(cfg: &ModelConfig, flags: &AblationFlags) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = Architecture::init(cfg, flags, &mut params)?;
        Ok(HierarQ { arch, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    pub fn cast<U: Scalar>(&self) -> HierarQ<U> {
        HierarQ {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn fresh_state(&self) -> Result<VideoState<T>> {
        self.arch.fresh_state()
    }

    pub fn process_frame(
        &self,
        state: &mut VideoState<T>,
        frame: &FrameFeature<T>,
        bundle: &PromptBundle<T>,
    ) -> Result<FrameOutput<T>> {
        let mut s = Session::new(&self.params, false);
        let step = self.arch.frame_step(&mut s, state, frame, bundle)?;
        Ok(FrameOutput {
            index: frame.index,
            entity: s.value(step.entity).clone(),
            scene: s.value(step.scene).clone(),
            entity_gate: s.value(step.entity_gates[0]).data().to_vec(),
            scene_gate: s.value(step.scene_gates[0]).data().to_vec(),
            trace: step.trace,
        })
    }

    /// Fold [`Self::process_frame`] over `frames` from a fresh state.
    pub fn process_video<I>(&self, frames: I, bundle: &PromptBundle<T>) -> Result<VideoOutput<T>>
    where
        I: IntoIterator,
        I::Item: Borrow<FrameFeature<T>>,
    {
        let mut state = self.fresh_state()?;
        let mut last = None;
        let mut gates = Vec::new();
        let mut peak = 0;
        for f in frames {
            let out = self.process_frame(&mut state, f.borrow(), bundle)?;
            gates.push(GateSummary::from_output(&out));
            peak = peak.max(state.live_floats());
            last = Some(out);
        }
        let last = last.ok_or_else(|| HierarqError::Input("video has no frames".into()))?;
        Ok(VideoOutput {
            scene: last.scene,
            entity: last.entity,
            frames: state.frames(),
            gates,
            peak_live_floats: peak,
        })
    }

    /// Class logits for a processed video.
    pub fn logits(&self, out: &VideoOutput<T>) -> Result<Vec<T>> {
        let parts: Vec<&Tensor<T>> = if self.arch.flags.disable_hierarchical_link {
            vec![&out.scene, &out.entity]
        } else {
            vec![&out.scene]
        };
        crate::head::project_and_decode(&self.params, &self.arch.head, &parts)
    }

    /// State after all frames but the last, computed without a tape.
    pub fn history(&self, frames: &[FrameFeature<T>], bundle: &PromptBundle<T>) -> Result<VideoState<T>> {
        let mut state = self.fresh_state()?;
        for f in frames {
            self.process_frame(&mut state, f, bundle)?;
        }
        Ok(state)
    }
}

/// Cross-entropy of the head on the step that consumes `frame`, recorded
/// on `s`. `state` must hold the history preceding `frame`.
pub fn step_loss<T: Scalar>(
    arch: &Architecture,
    s: &mut Session<'_, T>,
    state: &mut VideoState<T>,
    frame: &FrameFeature<T>,
    bundle: &PromptBundle<T>,
    label: usize,
) -> Result<(Var, Var)> {
    let step = arch.frame_step(s, state, frame, bundle)?;
    let logits = arch.logits_on(s, &step)?;
    let loss = s.cross_entropy(logits, label)?;
    Ok((loss, logits))
}
