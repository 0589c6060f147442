//! Capacity-bounded memory banks.
//!
//! A bank holds a temporal sequence of token grids (`rows × dim`). It is
//! stored per spatial slot so that token-level compression can pick a
//! different merge position in every slot. Each stored token carries the
//! interval of source timesteps it was built from and its merge count.
//!
//! Banks store values only. The caller gets a [`PushOutcome`] describing how
//! the newest entry relates to the pushed item, which is enough to rebuild
//! the newest entry on a tape with gradients flowing into the current frame
//! while all history stays detached.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{HierarqError, Result};
use crate::tensor::{cosine_raw, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePolicy {
    /// Drop the oldest entry once capacity is exceeded.
    Fifo,
    /// Merge the most similar adjacent pair once capacity is exceeded.
    Mbc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Similarity per spatial slot across time.
    Token,
    /// Similarity between whole flattened frames.
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Unweighted arithmetic mean of the pair.
    Mean,
    /// Mean weighted by how many source tokens each side already holds.
    CountWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankConfig {
    pub rows: usize,
    pub dim: usize,
    pub capacity: usize,
    pub policy: UpdatePolicy,
    pub granularity: Granularity,
    pub merge: MergeRule,
}

impl BankConfig {
    pub fn fifo(rows: usize, dim: usize, capacity: usize) -> Self {
        BankConfig {
            rows,
            dim,
            capacity,
            policy: UpdatePolicy::Fifo,
            granularity: Granularity::Token,
            merge: MergeRule::Mean,
        }
    }

    pub fn mbc(rows: usize, dim: usize, capacity: usize) -> Self {
        BankConfig {
            policy: UpdatePolicy::Mbc,
            ..Self::fifo(rows, dim, capacity)
        }
    }
}

/// Source timesteps a stored token was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub first: usize,
    pub last: usize,
    pub count: usize,
}

#[derive(Debug, Clone)]
struct Entry<T> {
    token: Vec<T>,
    span: Span,
}

/// How the newest entry of each slot is formed from the item just pushed:
/// `newest[n] = coeff[n] * item[n] + offset[n]`, with `offset` built from
/// detached history.
#[derive(Debug, Clone)]
pub struct PushOutcome<T> {
    pub coeff: Vec<T>,
    pub offset: Tensor<T>,
}

impl<T: Scalar> PushOutcome<T> {
    fn fresh(rows: usize, dim: usize) -> Self {
        PushOutcome {
            coeff: vec![T::one(); rows],
            offset: Tensor::zeros(&[rows, dim]),
        }
    }

    /// True when every slot's newest entry is the pushed item itself.
    pub fn is_fresh(&self) -> bool {
        self.coeff.iter().all(|c| *c == T::one()) && self.offset.data().iter().all(|v| *v == T::zero())
    }
}

#[derive(Debug, Clone)]
pub struct MemoryBank<T> {
    cfg: BankConfig,
    slots: Vec<VecDeque<Entry<T>>>,
    pushed: usize,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(cfg: BankConfig) -> Result<Self> {
        if cfg.capacity == 0 || cfg.rows == 0 || cfg.dim == 0 {
            return Err(HierarqError::Config(format!(
                "bank needs positive capacity and shape, got {cfg:?}"
            )));
        }
        Ok(MemoryBank {
            slots: vec![VecDeque::with_capacity(cfg.capacity + 1); cfg.rows],
            cfg,
            pushed: 0,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.cfg
    }

    pub fn capacity(&self) -> usize {
        self.cfg.capacity
    }

    /// Temporal length (identical across slots).
    pub fn len(&self) -> usize {
        self.slots[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of items ever pushed.
    pub fn pushed(&self) -> usize {
        self.pushed
    }

    /// Scalars currently held.
    pub fn live_floats(&self) -> usize {
        self.len() * self.cfg.rows * self.cfg.dim
    }

    pub fn spans(&self, slot: usize) -> Vec<Span> {
        self.slots[slot].iter().map(|e| e.span).collect()
    }

    /// Token of `slot` at temporal position `t`.
    pub fn token(&self, slot: usize, t: usize) -> &[T] {
        &self.slots[slot][t].token
    }

    /// Token grid at temporal position `t`.
    pub fn entry(&self, t: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.cfg.rows * self.cfg.dim);
        for s in &self.slots {
            data.extend_from_slice(&s[t].token);
        }
        Tensor::new(&[self.cfg.rows, self.cfg.dim], data).expect("entry shape")
    }

    fn check_item(&self, item: &Tensor<T>) -> Result<()> {
        if item.shape() != [self.cfg.rows, self.cfg.dim] {
            return Err(HierarqError::dim(
                "MemoryBank::push",
                &[self.cfg.rows, self.cfg.dim],
                item.shape(),
            ));
        }
        Ok(())
    }

    /// Append without enforcing capacity.
    pub fn append(&mut self, item: &Tensor<T>) -> Result<()> {
        self.check_item(item)?;
        let t = self.pushed;
        for (n, slot) in self.slots.iter_mut().enumerate() {
            slot.push_back(Entry {
                token: item.row(n).to_vec(),
                span: Span {
                    first: t,
                    last: t,
                    count: 1,
                },
            });
        }
        self.pushed += 1;
        Ok(())
    }

    /// Append and restore capacity according to the bank's policy.
    pub fn push(&mut self, item: &Tensor<T>) -> Result<PushOutcome<T>> {
        self.append(item)?;
        let (rows, dim) = (self.cfg.rows, self.cfg.dim);
        if self.len() <= self.cfg.capacity {
            return Ok(PushOutcome::fresh(rows, dim));
        }
        match self.cfg.policy {
            UpdatePolicy::Fifo => {
                for slot in &mut self.slots {
                    slot.pop_front();
                }
                Ok(PushOutcome::fresh(rows, dim))
            }
            UpdatePolicy::Mbc => {
                // the previous newest entry, captured before it can be merged
                let newest = self.len() - 1;
                let prev: Vec<(Vec<T>, usize)> = self
                    .slots
                    .iter()
                    .map(|s| (s[newest - 1].token.clone(), s[newest - 1].span.count))
                    .collect();
                let merged_at = match self.cfg.granularity {
                    Granularity::Token => self.compress_token_level()?,
                    Granularity::Frame => vec![self.compress_frame_level()?; rows],
                };
                let mut out = PushOutcome::fresh(rows, dim);
                for (n, k) in merged_at.into_iter().enumerate() {
                    if k + 1 == newest {
                        let (w_prev, w_new) = self.merge_weights(prev[n].1, 1);
                        out.coeff[n] = w_new;
                        let row = &mut out.offset.data_mut()[n * dim..(n + 1) * dim];
                        for (o, &p) in row.iter_mut().zip(&prev[n].0) {
                            *o = w_prev * p;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    fn merge_weights(&self, ca: usize, cb: usize) -> (T, T) {
        match self.cfg.merge {
            MergeRule::Mean => (T::lit(0.5), T::lit(0.5)),
            MergeRule::CountWeighted => {
                let total = T::from_usize(ca + cb).unwrap();
                (T::from_usize(ca).unwrap() / total, T::from_usize(cb).unwrap() / total)
            }
        }
    }

    fn merge_pair(&self, a: &Entry<T>, b: &Entry<T>) -> Entry<T> {
        let token = match self.cfg.merge {
            MergeRule::Mean => a
                .token
                .iter()
                .zip(&b.token)
                .map(|(&x, &y)| (x + y) * T::lit(0.5))
                .collect(),
            MergeRule::CountWeighted => {
                let ca = T::from_usize(a.span.count).unwrap();
                let cb = T::from_usize(b.span.count).unwrap();
                a.token
                    .iter()
                    .zip(&b.token)
                    .map(|(&x, &y)| (ca * x + cb * y) / (ca + cb))
                    .collect()
            }
        };
        Entry {
            token,
            span: Span {
                first: a.span.first,
                last: b.span.last,
                count: a.span.count + b.span.count,
            },
        }
    }

    fn require_overfull(&self, op: &str) -> Result<()> {
        if self.len() != self.cfg.capacity + 1 {
            return Err(HierarqError::Precondition(format!(
                "{op} needs length {} (capacity + 1), bank has {}",
                self.cfg.capacity + 1,
                self.len()
            )));
        }
        Ok(())
    }

    /// Merge, independently in every slot, the adjacent temporal pair with
    /// the highest cosine similarity (ties go to the earliest pair).
    /// Returns the merged pair's first index per slot.
    pub fn compress_token_level(&mut self) -> Result<Vec<usize>> {
        self.require_overfull("token-level compression")?;
        let mut picked = Vec::with_capacity(self.cfg.rows);
        for n in 0..self.cfg.rows {
            let seq = &self.slots[n];
            let mut best = 0;
            let mut best_cos = T::neg_infinity();
            for t in 0..seq.len() - 1 {
                let c = cosine_raw(&seq[t].token, &seq[t + 1].token);
                if c > best_cos {
                    best_cos = c;
                    best = t;
                }
            }
            let merged = self.merge_pair(&seq[best], &seq[best + 1]);
            let seq = &mut self.slots[n];
            seq[best] = merged;
            seq.remove(best + 1);
            picked.push(best);
        }
        Ok(picked)
    }

    /// Merge the adjacent pair of whole frames with the highest cosine
    /// similarity between their flattened grids.
    pub fn compress_frame_level(&mut self) -> Result<usize> {
        self.require_overfull("frame-level compression")?;
        let len = self.len();
        let frames: Vec<Vec<T>> = (0..len).map(|t| self.entry(t).into_data()).collect();
        let mut best = 0;
        let mut best_cos = T::neg_infinity();
        for t in 0..len - 1 {
            let c = cosine_raw(&frames[t], &frames[t + 1]);
            if c > best_cos {
                best_cos = c;
                best = t;
            }
        }
        for n in 0..self.cfg.rows {
            let merged = self.merge_pair(&self.slots[n][best], &self.slots[n][best + 1]);
            let seq = &mut self.slots[n];
            seq[best] = merged;
            seq.remove(best + 1);
        }
        Ok(best)
    }

    /// All entries concatenated in temporal order: `(len·rows) × dim`.
    pub fn flatten(&self) -> Result<Tensor<T>> {
        self.flatten_prefix(self.len())
    }

    /// The first `len` entries concatenated in temporal order.
    pub fn flatten_prefix(&self, len: usize) -> Result<Tensor<T>> {
        if self.is_empty() {
            return Err(HierarqError::Precondition("flatten of an empty memory bank".into()));
        }
        let mut data = Vec::with_capacity(len * self.cfg.rows * self.cfg.dim);
        for t in 0..len {
            for s in &self.slots {
                data.extend_from_slice(&s[t].token);
            }
        }
        Tensor::new(&[len * self.cfg.rows, self.cfg.dim], data)
    }
}

/// Per-layer query memory: one independent bank per transformer layer.
#[derive(Debug, Clone)]
pub struct QueryMemory<T> {
    pub layers: Vec<MemoryBank<T>>,
}

impl<T: Scalar> QueryMemory<T> {
    pub fn new(layers: usize, cfg: BankConfig) -> Result<Self> {
        Ok(QueryMemory {
            layers: (0..layers).map(|_| MemoryBank::new(cfg)).collect::<Result<_>>()?,
        })
    }

    pub fn live_floats(&self) -> usize {
        self.layers.iter().map(MemoryBank::live_floats).sum()
    }
}
