//! Adam optimisation of every model parameter on the synthetic entity task.
//!
//! Each sample runs its history frames without a tape and records only the
//! final step, matching the detached memory banks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Gradients, ParamStore, Session};
use crate::config::RunConfig;
use crate::error::{HierarqError, Result};
use crate::model::{step_loss, HierarQ};
use crate::prompt::{build_prompt_bundle, EntityLexicon, PromptBundle};
use crate::synthetic::{oracle_label, SyntheticSample, SyntheticTask};
use crate::tensor::Scalar;

const VALIDATION_SEED: u64 = 0x7a11_da7e;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, step_size: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Adam {
            step_size,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::lit(self.step_size), T::lit(self.epsilon));
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params.get_mut(id).data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean batch loss over the steps since the previous evaluation.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: usize,
    pub curve: Vec<EvalPoint>,
    pub final_val_loss: f64,
    pub final_val_accuracy: f64,
    /// First evaluated step at which the accuracy target was met.
    pub reached_target_at: Option<usize>,
    /// Accuracy of the brute-force label oracle on the validation set.
    pub oracle_accuracy: f64,
    pub parameters: usize,
}

/// Validation loss and accuracy.
pub fn evaluate<T: Scalar>(
    model: &HierarQ<T>,
    samples: &[SyntheticSample<T>],
    bundle: &PromptBundle<T>,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for sample in samples {
        let out = model.process_video(&sample.frames, bundle)?;
        let logits: Vec<f64> = model.logits(&out)?.iter().map(|v| v.as_f64()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - logits[sample.label];
        let pred = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > logits[best] { i } else { best });
        correct += usize::from(pred == sample.label);
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mean loss and gradients over `batch`.
pub fn batch_gradients<T: Scalar>(
    model: &HierarQ<T>,
    batch: &[SyntheticSample<T>],
    bundle: &PromptBundle<T>,
) -> Result<(f64, Gradients<T>)> {
    let mut total: Gradients<T> = vec![None; model.params.len()];
    let mut loss_sum = 0.0;
    for sample in batch {
        let (last, history) = sample
            .frames
            .split_last()
            .ok_or_else(|| HierarqError::Input("sample has no frames".into()))?;
        let mut state = model.history(history, bundle)?;
        let mut s = Session::new(&model.params, true);
        let (loss, _) = step_loss(&model.arch, &mut s, &mut state, last, bundle, sample.label)?;
        loss_sum += s.value(loss).data()[0].as_f64();
        for (acc, g) in total.iter_mut().zip(s.gradients(loss)?) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += *y),
                None => *acc = Some(g),
            }
        }
    }
    let inv = T::one() / T::from_usize(batch.len().max(1)).unwrap();
    for g in total.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    Ok((loss_sum / batch.len().max(1) as f64, total))
}

/// Lexicon used by a run: the built-in list plus any configured extras.
pub fn run_lexicon(cfg: &RunConfig) -> Result<EntityLexicon> {
    let mut lex = EntityLexicon::builtin();
    if let Some(path) = &cfg.lexicon {
        lex.extend(&EntityLexicon::load(path)?);
    }
    Ok(lex)
}

/// Train `model` on the configured synthetic task. `on_eval` sees every
/// evaluation point as it is produced.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    model: &mut HierarQ<T>,
    mut on_eval: impl FnMut(&EvalPoint),
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.model.num_classes != cfg.synthetic.num_signatures {
        return Err(HierarqError::Config(format!(
            "num_classes {} must equal num_signatures {}",
            cfg.model.num_classes, cfg.synthetic.num_signatures
        )));
    }
    let opt = &cfg.optimizer;
    let task = SyntheticTask::new(&cfg.synthetic, &cfg.model)?;
    let bundle = build_prompt_bundle::<T>(&cfg.prompt, &run_lexicon(cfg)?, &cfg.model)?;
    let val = task.dataset::<T>(opt.val_samples, cfg.seed ^ VALIDATION_SEED);
    let sigs = task.signatures::<T>();
    let oracle_hits = val.iter().filter(|s| oracle_label(&s.frames, &sigs) == s.label).count();
    let oracle_accuracy = oracle_hits as f64 / val.len().max(1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, opt.step_size, opt.beta1, opt.beta2, opt.epsilon);
    let mut curve = Vec::new();
    let mut running = (0.0, 0usize);
    let mut reached = None;
    let mut last_eval = None;
    let mut steps = 0;
    for step in 1..=opt.steps {
        let batch: Vec<SyntheticSample<T>> = (0..opt.batch_size).map(|_| task.sample(&mut rng)).collect();
        let (loss, grads) = batch_gradients(model, &batch, &bundle)?;
        if !loss.is_finite() {
            return Err(HierarqError::Numerical(format!("training loss diverged at step {step}")));
        }
        adam.step(&mut model.params, &grads);
        steps = step;
        running.0 += loss;
        running.1 += 1;
        if step % opt.eval_every == 0 || step == opt.steps {
            let (val_loss, val_accuracy) = evaluate(model, &val, &bundle)?;
            let point = EvalPoint {
                step,
                train_loss: running.0 / running.1 as f64,
                val_loss,
                val_accuracy,
            };
            running = (0.0, 0);
            on_eval(&point);
            curve.push(point);
            last_eval = Some(point);
            if let Some(target) = opt.target_accuracy {
                if val_accuracy >= target {
                    reached = Some(step);
                    break;
                }
            }
        }
    }
    let (final_val_loss, final_val_accuracy) = match last_eval {
        Some(p) => (p.val_loss, p.val_accuracy),
        None => evaluate(model, &val, &bundle)?,
    };
    Ok(TrainReport {
        seed: cfg.seed,
        steps,
        curve,
        final_val_loss,
        final_val_accuracy,
        reached_target_at: reached,
        oracle_accuracy,
        parameters: model.params.numel(),
    })
}

/// Fresh model for a run configuration.
pub fn model_for<T: Scalar>(cfg: &RunConfig) -> Result<HierarQ<T>> {
    HierarQ::new(&cfg.model, &cfg.flags)
}
