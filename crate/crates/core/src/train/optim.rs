//! Adam and momentum SGD over a [`Network`]'s kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::OptimizerState;
use crate::model::network::Network;
use crate::model::params::ParamBundle;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// beta1 0.9, beta2 0.999, eps 1e-8.
    #[default]
    Adam,
    /// Heavy-ball momentum 0.9.
    Sgd,
}

impl OptimizerKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::config(format!("unknown optimizer {tag:?}"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    step: u64,
    /// Adam: first and second moments. SGD: velocity only.
    moments: Vec<ParamBundle<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, like: &ParamBundle<T>) -> Self {
        let slots = match kind {
            OptimizerKind::Adam => 2,
            OptimizerKind::Sgd => 1,
        };
        Optimizer {
            kind,
            step: 0,
            moments: (0..slots).map(|_| like.zeros_like()).collect(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> OptimizerState<T> {
        OptimizerState {
            kind: self.kind.tag().to_string(),
            step: self.step,
            moments: self.moments.clone(),
        }
    }

    pub fn from_state(state: OptimizerState<T>, like: &ParamBundle<T>) -> Result<Self> {
        let kind = OptimizerKind::from_tag(&state.kind)?;
        let fresh = Self::new(kind, like);
        let shapes_match = state.moments.len() == fresh.moments.len()
            && state.moments.iter().all(|m| {
                m.kernels.len() == like.kernels.len()
                    && m.kernels.iter().zip(&like.kernels).all(|(a, b)| a.shape() == b.shape())
            });
        if !shapes_match {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(Optimizer {
            kind,
            step: state.step,
            moments: state.moments,
        })
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, net: &mut Network<T>, grads: &ParamBundle<T>, lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
                let (one, eps) = (T::one(), T::lit(EPS));
                let step = T::lit(lr / c1);
                let c2 = T::lit(c2);
                let (first, rest) = self.moments.split_at_mut(1);
                let (m, v) = (&mut first[0], &mut rest[0]);
                for (((w, g), m), v) in net
                    .kernels_mut()
                    .zip(&grads.kernels)
                    .zip(&mut m.kernels)
                    .zip(&mut v.kernels)
                {
                    for (((w, &g), m), v) in w
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *w -= step * *m / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = T::lit(MOMENTUM);
                let lr = T::lit(lr);
                for ((w, g), vel) in net
                    .kernels_mut()
                    .zip(&grads.kernels)
                    .zip(&mut self.moments[0].kernels)
                {
                    for ((w, &g), vel) in w.iter_mut().zip(g.data()).zip(vel.data_mut()) {
                        *vel = mu * *vel + g;
                        *w -= lr * *vel;
                    }
                }
            }
        }
    }
}
