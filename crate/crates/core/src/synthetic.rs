//! Synthetic entity-identification streams and the stub frame encoder.
//!
//! Each stream plants one of `C` orthonormal signature directions into a
//! fixed set of spatial slots for a short run of consecutive frames. Every other
//! token is a random direction orthogonal to all signatures, so the label
//! is always recoverable by comparing tokens against the signatures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{HierarqError, Result};
use crate::modulator::FrameFeature;
use crate::tensor::{cosine_raw, Scalar, Tensor};

/// Distribution of tokens that carry no signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Random directions in the orthogonal complement of the signatures.
    #[default]
    Orthogonal,
    /// Isotropic Gaussian, with chance overlap on the signatures.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub num_signatures: usize,
    pub frames: usize,
    /// Consecutive frames carrying the planted signature.
    pub frames_per_occurrence: usize,
    /// Spatial slots covered by the planted signature in each such frame.
    pub planted_tokens: usize,
    /// Draw the planted slots afresh in every frame of the run.
    pub scatter: bool,
    pub background: Background,
    /// Norm of the perturbation added to a planted signature.
    pub noise: f64,
    /// Seed of the signature directions, shared by every stream.
    pub signature_seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_signatures: 4,
            frames: 20,
            frames_per_occurrence: 3,
            planted_tokens: 1,
            scatter: false,
            background: Background::Orthogonal,
            noise: 0.1,
            signature_seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.num_signatures == 0 || self.frames == 0 || self.frames_per_occurrence == 0 {
            return Err(HierarqError::Config(
                "synthetic signatures, frames and frames_per_occurrence must be positive".into(),
            ));
        }
        if self.planted_tokens == 0 || self.planted_tokens > model.visual_tokens {
            return Err(HierarqError::Config(format!(
                "planted_tokens {} must lie in 1..={}",
                self.planted_tokens, model.visual_tokens
            )));
        }
        if self.frames_per_occurrence > self.frames {
            return Err(HierarqError::Config(format!(
                "frames_per_occurrence {} exceeds frames {}",
                self.frames_per_occurrence, self.frames
            )));
        }
        // background tokens live in the complement of the signature span
        if self.num_signatures >= model.visual_dim {
            return Err(HierarqError::Config(format!(
                "{} signatures need visual_dim > {}",
                self.num_signatures, self.num_signatures
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(HierarqError::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
}

/// One labelled stream.
#[derive(Debug, Clone)]
pub struct SyntheticSample<T> {
    pub frames: Vec<FrameFeature<T>>,
    pub label: usize,
    /// Slots carrying the signature in the first planted frame, ascending.
    pub planted_slots: Vec<usize>,
    /// First frame carrying the planted token.
    pub planted_start: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    spec: SyntheticTaskSpec,
    tokens: usize,
    dim: usize,
    /// Orthonormal rows.
    signatures: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(spec: &SyntheticTaskSpec, model: &ModelConfig) -> Result<Self> {
        spec.validate(model)?;
        let dim = model.visual_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.signature_seed ^ 0x5167_a7e5);
        let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(spec.num_signatures);
        while signatures.len() < spec.num_signatures {
            let mut v = gaussian(&mut rng, dim);
            project_out(&mut v, &signatures);
            // a second pass keeps the basis orthonormal to rounding level
            project_out(&mut v, &signatures);
            normalize(&mut v);
            signatures.push(v);
        }
        Ok(SyntheticTask {
            spec: spec.clone(),
            tokens: model.visual_tokens,
            dim,
            signatures,
        })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn signatures<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.signatures.len(), self.dim],
            self.signatures.iter().flatten().map(|&v| T::lit(v)).collect(),
        )
        .expect("signature shape")
    }

    /// Background token of norm `sqrt(dim)`.
    fn background(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut v = gaussian(rng, self.dim);
        if self.spec.background == Background::Orthogonal {
            project_out(&mut v, &self.signatures);
            project_out(&mut v, &self.signatures);
        }
        normalize(&mut v);
        let scale = (self.dim as f64).sqrt();
        v.iter_mut().for_each(|x| *x *= scale);
        v
    }

    /// Signature `label` plus a perturbation of norm `noise`, at the same
    /// per-coordinate scale as background tokens.
    fn planted(&self, label: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut n = gaussian(rng, self.dim);
        normalize(&mut n);
        let scale = (self.dim as f64).sqrt();
        self.signatures[label]
            .iter()
            .zip(&n)
            .map(|(s, e)| (s + self.spec.noise * e) * scale)
            .collect()
    }

    fn noise_frame<T: Scalar>(&self, index: usize, rng: &mut impl Rng) -> FrameFeature<T> {
        let data = (0..self.tokens)
            .flat_map(|_| self.background(rng))
            .map(T::lit)
            .collect();
        FrameFeature {
            index,
            tokens: Tensor::new(&[self.tokens, self.dim], data).expect("frame shape"),
        }
    }

    /// A stream with a uniformly drawn label.
    pub fn sample<T: Scalar>(&self, rng: &mut impl Rng) -> SyntheticSample<T> {
        let label = rng.random_range(0..self.signatures.len());
        self.sample_with_label(label, rng)
    }

    pub fn sample_with_label<T: Scalar>(&self, label: usize, rng: &mut impl Rng) -> SyntheticSample<T> {
        let t = self.spec.frames;
        let run = self.spec.frames_per_occurrence;
        let planted_start = rng.random_range(0..=t - run);
        let draw = |rng: &mut _| {
            let mut slots = rand::seq::index::sample(rng, self.tokens, self.spec.planted_tokens).into_vec();
            slots.sort_unstable();
            slots
        };
        let first_slots = draw(rng);
        let mut slots = first_slots.clone();
        let frames = (0..t)
            .map(|i| {
                let mut f = self.noise_frame::<T>(i, rng);
                if (planted_start..planted_start + run).contains(&i) {
                    if self.spec.scatter && i > planted_start {
                        slots = draw(rng);
                    }
                    for &slot in &slots {
                        let tok = self.planted(label, rng);
                        let row = &mut f.tokens.data_mut()[slot * self.dim..(slot + 1) * self.dim];
                        row.iter_mut().zip(tok).for_each(|(o, v)| *o = T::lit(v));
                    }
                }
                f
            })
            .collect();
        SyntheticSample {
            frames,
            label,
            planted_slots: first_slots,
            planted_start,
        }
    }

    /// `count` samples from a dedicated seed.
    pub fn dataset<T: Scalar>(&self, count: usize, seed: u64) -> Vec<SyntheticSample<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }

    /// Unlabelled background frames produced on demand, for long streams.
    pub fn frames<T: Scalar>(&self, count: usize, seed: u64) -> impl Iterator<Item = FrameFeature<T>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(move |i| self.noise_frame(i, &mut rng))
    }
}

/// Brute-force label recovery: the signature with the highest cosine to any
/// token of any frame.
pub fn oracle_label<T: Scalar>(frames: &[FrameFeature<T>], signatures: &Tensor<T>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..signatures.rows() {
        let sig = signatures.row(c);
        let score = frames
            .iter()
            .flat_map(|f| (0..f.tokens.rows()).map(move |n| f.tokens.row(n)))
            .map(|tok| cosine_raw(tok, sig).as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        if score > best.1 {
            best = (c, score);
        }
    }
    best.0
}

/// Fixed random projection from flattened raw frames to `N_v × D_vis`
/// token grids.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    tokens: usize,
    dim: usize,
    seed: u64,
}

impl StubEncoder {
    pub fn new(model: &ModelConfig) -> Self {
        StubEncoder {
            tokens: model.visual_tokens,
            dim: model.visual_dim,
            seed: model.seed,
        }
    }

    /// Encode frames given as flat arrays of equal length.
    pub fn encode<T: Scalar>(&self, frames: &[Vec<f32>]) -> Result<Vec<FrameFeature<T>>> {
        let Some(first) = frames.first() else {
            return Ok(Vec::new());
        };
        let p = first.len();
        if p == 0 {
            return Err(HierarqError::Input("raw frames must be non-empty".into()));
        }
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != p) {
            return Err(HierarqError::Input(format!(
                "frame {i} has {} values, expected {p}",
                f.len()
            )));
        }
        let out = self.tokens * self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xe7c0_de00 ^ p as u64);
        let proj = Tensor::<f64>::randn(&[p, out], 1.0 / (p as f64).sqrt(), &mut rng);
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut acc = vec![0.0f64; out];
                for (j, &x) in f.iter().enumerate() {
                    let x = f64::from(x);
                    if x != 0.0 {
                        for (a, &w) in acc.iter_mut().zip(proj.row(j)) {
                            *a += x * w;
                        }
                    }
                }
                let tokens = Tensor::new(&[self.tokens, self.dim], acc.into_iter().map(T::lit).collect())?;
                FrameFeature::new(i, tokens)
            })
            .collect()
    }
}
