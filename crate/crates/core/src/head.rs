//! Linear classification head over flattened query tokens.

use rand::Rng;

use crate::autograd::{ParamStore, Session, Var};
use crate::error::{HierarqError, Result};
use crate::nn::{Init, LinearWeights};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub linear: LinearWeights,
    /// Flattened input width.
    pub inputs: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        ClassifierHead {
            linear: LinearWeights::init(store, name, inputs, classes, Init::FanIn, rng),
            inputs,
            classes,
        }
    }

    /// Flatten each part row-major, concatenate, project: `1 × classes`.
    pub fn apply<T: Scalar>(&self, s: &mut Session<'_, T>, parts: &[Var]) -> Result<Var> {
        let width: usize = parts.iter().map(|p| s.value(*p).len()).sum();
        if parts.is_empty() || width != self.inputs {
            return Err(HierarqError::Config(format!(
                "head expects {} inputs, got {width}",
                self.inputs
            )));
        }
        let flat = parts
            .iter()
            .map(|&p| {
                let n = s.value(p).len();
                s.reshape(p, &[1, n])
            })
            .collect::<Result<Vec<_>>>()?;
        let x = if flat.len() == 1 { flat[0] } else { s.concat_cols(&flat)? };
        self.linear.apply(s, x)
    }
}

/// Class logits for the given query tokens.
pub fn project_and_decode<T: Scalar>(
    params: &ParamStore<T>,
    head: &ClassifierHead,
    parts: &[&Tensor<T>],
) -> Result<Vec<T>> {
    let mut s = Session::new(params, false);
    let vars: Vec<Var> = parts.iter().map(|p| s.constant((*p).clone())).collect();
    let logits = head.apply(&mut s, &vars)?;
    Ok(s.value(logits).data().to_vec())
}
