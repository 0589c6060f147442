//! Plain nested-vector reimplementation of the streaming model, used as an
//! independent oracle. Parameters are looked up by name so that a layout
//! change in the library cannot silently line up with this code.

#![allow(dead_code)]

use hierarq::autograd::ParamStore;
use hierarq::config::{AblationFlags, ModelConfig};
use hierarq::memory::{MemoryBank, MergeRule, UpdatePolicy};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use hierarq::prompt::PromptBundle;
use hierarq::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain[j] + bias[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb + 1e-12)).clamp(-1.0, 1.0)
}

/// Head-averaged attention map of each head: `heads × lq × lk`.
fn attention_maps(q: &Mat, k: &Mat, heads: usize) -> Vec<Mat> {
    let dh = q[0].len() / heads;
    (0..heads)
        .map(|h| {
            q.iter()
                .map(|qr| {
                    let scores: Vec<f64> = k
                        .iter()
                        .map(|kr| {
                            (0..dh).map(|j| qr[h * dh + j] * kr[h * dh + j]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    softmax(&scores)
                })
                .collect()
        })
        .collect()
}

/// Per-slot temporal bank with the same push semantics as the library.
#[derive(Clone)]
pub struct RefBank {
    pub slots: Vec<Vec<(Vec<f64>, usize)>>,
    pub capacity: usize,
    pub policy: UpdatePolicy,
    pub token_level: bool,
    pub merge: MergeRule,
}

impl RefBank {
    pub fn new(rows: usize, capacity: usize, policy: UpdatePolicy, token_level: bool, merge: MergeRule) -> Self {
        RefBank {
            slots: vec![Vec::new(); rows],
            capacity,
            policy,
            token_level,
            merge,
        }
    }

    pub fn len(&self) -> usize {
        self.slots[0].len()
    }

    fn merged(&self, a: &(Vec<f64>, usize), b: &(Vec<f64>, usize)) -> (Vec<f64>, usize) {
        let v = match self.merge {
            MergeRule::Mean => a.0.iter().zip(&b.0).map(|(x, y)| (x + y) * 0.5).collect(),
            MergeRule::CountWeighted => {
                let (ca, cb) = (a.1 as f64, b.1 as f64);
                a.0.iter().zip(&b.0).map(|(x, y)| (ca * x + cb * y) / (ca + cb)).collect()
            }
        };
        (v, a.1 + b.1)
    }

    fn merge_at(&mut self, slot: usize, k: usize) {
        let m = self.merged(&self.slots[slot][k], &self.slots[slot][k + 1]);
        self.slots[slot][k] = m;
        self.slots[slot].remove(k + 1);
    }

    pub fn push(&mut self, item: &Mat) {
        for (s, row) in self.slots.iter_mut().zip(item) {
            s.push((row.clone(), 1));
        }
        if self.len() <= self.capacity {
            return;
        }
        match self.policy {
            UpdatePolicy::Fifo => self.slots.iter_mut().for_each(|s| {
                s.remove(0);
            }),
            UpdatePolicy::Mbc if self.token_level => {
                for n in 0..self.slots.len() {
                    let seq = &self.slots[n];
                    let cos: Vec<f64> = (0..seq.len() - 1)
                        .map(|t| cosine(&seq[t].0, &seq[t + 1].0))
                        .collect();
                    let k = argmax_first(&cos);
                    self.merge_at(n, k);
                }
            }
            UpdatePolicy::Mbc => {
                let frames: Vec<Vec<f64>> = (0..self.len())
                    .map(|t| self.slots.iter().flat_map(|s| s[t].0.clone()).collect())
                    .collect();
                let cos: Vec<f64> = (0..frames.len() - 1).map(|t| cosine(&frames[t], &frames[t + 1])).collect();
                let k = argmax_first(&cos);
                for n in 0..self.slots.len() {
                    self.merge_at(n, k);
                }
            }
        }
    }

    pub fn flatten(&self) -> Mat {
        (0..self.len()).flat_map(|t| self.slots.iter().map(move |s| s[t].0.clone())).collect()
    }
}

/// Index of the first maximum.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub struct RefStream {
    pub visual: RefBank,
    pub queries: Vec<RefBank>,
}

/// Rows seen by one layer at one step: (query kv rows, visual kv rows,
/// entity kv rows).
pub type RefTrace = Vec<(usize, Option<usize>, Option<usize>)>;

pub struct Reference<'a> {
    pub p: &'a ParamStore<f64>,
    pub cfg: ModelConfig,
    pub flags: AblationFlags,
    pub entity: RefStream,
    pub scene: RefStream,
    pub t: usize,
}

impl<'a> Reference<'a> {
    pub fn new(p: &'a ParamStore<f64>, cfg: &ModelConfig, flags: &AblationFlags) -> Self {
        let token_level = flags.compression_granularity == hierarq::memory::Granularity::Token;
        let bank = |rows: usize, on: bool, m: usize, policy: UpdatePolicy| {
            if on {
                RefBank::new(rows, m, policy, token_level, flags.merge_rule)
            } else {
                RefBank::new(rows, 1, UpdatePolicy::Fifo, token_level, flags.merge_rule)
            }
        };
        let stream = |policy, vis_on, q_on, m| RefStream {
            visual: bank(cfg.visual_tokens, vis_on, m, policy),
            queries: (0..cfg.layers).map(|_| bank(cfg.num_queries, q_on, m, policy)).collect(),
        };
        Reference {
            p,
            cfg: cfg.clone(),
            flags: flags.clone(),
            entity: stream(
                flags.short_policy,
                flags.short_visual_memory,
                flags.short_query_memory,
                cfg.short_memory,
            ),
            scene: stream(
                flags.long_policy,
                flags.long_visual_memory,
                flags.long_query_memory,
                cfg.long_memory,
            ),
            t: 0,
        }
    }

    pub fn w(&self, name: &str) -> Mat {
        let id = self.p.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        let t = self.p.get(id);
        if t.shape().len() == 1 {
            vec![t.data().to_vec()]
        } else {
            to_mat(t)
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.p.id(name).is_some()
    }

    fn ln(&self, x: &Mat, name: &str) -> Mat {
        layer_norm(x, &self.w(&format!("{name}.gain"))[0], &self.w(&format!("{name}.bias"))[0])
    }

    fn ffn(&self, x: &Mat, name: &str) -> Mat {
        let h = add_row(&mm(x, &self.w(&format!("{name}.w1"))), &self.w(&format!("{name}.b1"))[0]);
        let h: Mat = h.iter().map(|r| r.iter().map(|v| gelu(*v)).collect()).collect();
        add_row(&mm(&h, &self.w(&format!("{name}.w2"))), &self.w(&format!("{name}.b2"))[0])
    }

    fn mha(&self, q_in: &Mat, kv: &Mat, name: &str, heads: usize) -> Mat {
        let q = mm(q_in, &self.w(&format!("{name}.wq")));
        let k = mm(kv, &self.w(&format!("{name}.wk")));
        let v = mm(kv, &self.w(&format!("{name}.wv")));
        let dh = q[0].len() / heads;
        let maps = attention_maps(&q, &k, heads);
        let mut cat = vec![vec![0.0; q[0].len()]; q.len()];
        for (h, a) in maps.iter().enumerate() {
            for i in 0..q.len() {
                for (j, row) in v.iter().enumerate() {
                    for c in 0..dh {
                        cat[i][h * dh + c] += a[i][j] * row[h * dh + c];
                    }
                }
            }
        }
        mm(&cat, &self.w(&format!("{name}.wo")))
    }

    /// Pre-norm residual attention; `kv = None` is self-attention.
    fn attend(&self, x: &Mat, kv: Option<&Mat>, name: &str) -> Mat {
        let h = self.ln(x, &format!("{name}.norm"));
        let kv = kv.cloned().unwrap_or_else(|| h.clone());
        add(x, &self.mha(&h, &kv, &format!("{name}.attn"), self.cfg.heads))
    }

    /// Modulated tokens and the first layer's gate.
    pub fn modulate(&self, tokens: &Mat, text: &Mat, name: &str) -> (Mat, Vec<f64>) {
        let text = mm(text, &self.w(&format!("{name}.text_proj")));
        let n_v = tokens.len() as f64;
        let heads = self.cfg.modulator_heads;
        let mut x = tokens.clone();
        let mut first = None;
        for l in 0..self.cfg.modulator_layers {
            let p = format!("{name}.layer{l}");
            let q = mm(&text, &self.w(&format!("{p}.wq")));
            let k = mm(&x, &self.w(&format!("{p}.wk")));
            let maps = attention_maps(&q, &k, heads);
            let mut gate = vec![0.0; x.len()];
            for a in &maps {
                for row in a {
                    for (j, v) in row.iter().enumerate() {
                        gate[j] += v;
                    }
                }
            }
            let denom = (heads * text.len()) as f64;
            gate.iter_mut().for_each(|g| *g *= n_v / denom);
            x = x.iter().zip(&gate).map(|(r, g)| r.iter().map(|v| v * g).collect()).collect();
            let h = self.ffn(&self.ln(&x, &format!("{p}.ffn_norm")), &format!("{p}.ffn"));
            x = add(&x, &h);
            first.get_or_insert(gate);
        }
        (x, first.unwrap_or_else(|| vec![1.0; tokens.len()]))
    }

    fn stack(&mut self, entity: bool, feat: &Mat, link: Option<&Mat>) -> (Mat, RefTrace) {
        let name = if entity { "entity.qformer" } else { "scene.qformer" };
        let proj = self.w(&format!("{name}.visual_proj"));
        let queries = self.w(&format!("{name}.queries"));
        let layers = self.cfg.layers;
        let stream = if entity { &mut self.entity } else { &mut self.scene };
        stream.visual.push(feat);
        let visual = mm(&stream.visual.flatten(), &proj);
        let mut x = queries;
        let mut trace = Vec::new();
        for l in 0..layers {
            let p = format!("{name}.layer{l}");
            let stream = if entity { &mut self.entity } else { &mut self.scene };
            stream.queries[l].push(&x);
            let kv_raw = stream.queries[l].flatten();
            let mut tr = (kv_raw.len(), None, None);
            let kv = self.ln(&kv_raw, &format!("{p}.self.norm"));
            x = self.attend(&x, Some(&kv), &format!("{p}.self"));
            if self.has(&format!("{p}.cross.norm.gain")) {
                tr.1 = Some(visual.len());
                x = self.attend(&x, Some(&visual), &format!("{p}.cross"));
            }
            if self.has(&format!("{p}.refine.norm.gain")) {
                x = self.attend(&x, None, &format!("{p}.refine"));
            }
            if let (true, Some(e)) = (self.has(&format!("{p}.link.norm.gain")), link) {
                tr.2 = Some(e.len());
                x = self.attend(&x, Some(e), &format!("{p}.link"));
            }
            let h = self.ffn(&self.ln(&x, &format!("{p}.ffn_norm")), &format!("{p}.ffn"));
            x = add(&x, &h);
            trace.push(tr);
        }
        (self.ln(&x, &format!("{name}.final_norm")), trace)
    }

    /// One frame: returns (entity output, scene output, entity trace, scene
    /// trace).
    pub fn step(&mut self, frame: &Mat, bundle: &PromptBundle<f64>) -> (Mat, Mat, RefTrace, RefTrace) {
        let d = self.cfg.visual_dim;
        let t = self.t as f64;
        let tokens: Mat = frame
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let freq = 1.0 / 10000f64.powf(2.0 * (j / 2) as f64 / d as f64);
                        let pe = if j % 2 == 0 { (t * freq).sin() } else { (t * freq).cos() };
                        v + pe
                    })
                    .collect()
            })
            .collect();
        let entity_feat = match (&bundle.entity_emb, self.flags.disable_entity_stream) {
            (Some(e), false) => self.modulate(&tokens, &to_mat(e), "entity.modulator").0,
            _ => tokens.clone(),
        };
        let scene_feat = if self.flags.disable_scene_modulator {
            tokens.clone()
        } else {
            self.modulate(&tokens, &to_mat(&bundle.scene_emb), "scene.modulator").0
        };
        let (ze, te) = self.stack(true, &entity_feat, None);
        let (zs, ts) = self.stack(false, &scene_feat, Some(&ze));
        self.t += 1;
        (ze, zs, te, ts)
    }
}

pub fn max_abs_diff(a: &Mat, b: &Tensor<f64>) -> f64 {
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn grid(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(&[rows, dim], 1.0, rng)
}

/// Random grid with a chance of repeating or scaling an earlier
/// slot token so that exact cosine ties occur.
pub fn tie_prone_grid(prev: Option<&Tensor<f64>>, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut g = grid(rows, dim, rng);
    if let Some(p) = prev {
        for r in 0..rows {
            let roll: f64 = rng.random();
            let scale = if roll < 0.25 {
                Some(1.0)
            } else if roll < 0.4 {
                Some(2.0)
            } else {
                None
            };
            if let Some(s) = scale {
                let src: Vec<f64> = p.row(r).iter().map(|v| v * s).collect();
                g.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(&src);
            }
        }
    }
    g
}

/// Exhaustive oracle: every adjacent cosine computed from scratch, first
/// maximum wins, pair replaced by its arithmetic mean.
pub fn oracle_merge(seq: &[Vec<f64>]) -> (usize, Vec<Vec<f64>>) {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = (a.iter().map(|x| x * x).sum::<f64>().sqrt()) * (b.iter().map(|x| x * x).sum::<f64>().sqrt());
        (dot / (n + 1e-12)).clamp(-1.0, 1.0)
    };
    let sims: Vec<f64> = seq.windows(2).map(|w| cos(&w[0], &w[1])).collect();
    let k = argmax_first(&sims);
    let mut out = seq.to_vec();
    out[k] = seq[k].iter().zip(&seq[k + 1]).map(|(a, b)| (a + b) * 0.5).collect();
    out.remove(k + 1);
    (k, out)
}

/// Count-weighted slot average of the surviving tokens minus the plain
/// average of everything pushed, as a max-abs residual.
pub fn mean_residual(b: &MemoryBank<f64>, pushed: &[Tensor<f64>], slot: usize) -> f64 {
    let dim = pushed[0].cols();
    let mut want = vec![0.0; dim];
    for p in pushed {
        want.iter_mut().zip(p.row(slot)).for_each(|(w, v)| *w += v / pushed.len() as f64);
    }
    let mut got = vec![0.0; dim];
    for (t, span) in b.spans(slot).iter().enumerate() {
        let w = span.count as f64 / pushed.len() as f64;
        got.iter_mut().zip(b.token(slot, t)).for_each(|(g, v)| *g += w * v);
    }
    want.iter().zip(&got).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max)
}
