//! Encoder plus optional parametric classifier, handled as one flat list of
//! trainable tensors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{EncoderParams, EncoderVars};
use crate::losses::{FcClassifier, FcVariant, IdHead};
use crate::memory::IdentityMemory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Memory,
    FcGlobal,
    FcParallel,
}

impl ClassifierKind {
    pub fn fc_variant(self) -> Option<FcVariant> {
        match self {
            ClassifierKind::Memory => None,
            ClassifierKind::FcGlobal => Some(FcVariant::Global),
            ClassifierKind::FcParallel => Some(FcVariant::Parallel),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ClassifierKind::Memory => "memory",
            ClassifierKind::FcGlobal => "fc_global",
            ClassifierKind::FcParallel => "fc_parallel",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub classifier: Option<FcClassifier>,
}

impl ModelParams {
    pub fn trainable(&self) -> Vec<&Array2<f64>> {
        let mut out = self.encoder.trainable();
        if let Some(c) = &self.classifier {
            out.extend(c.weights.iter());
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.encoder.trainable_mut();
        if let Some(c) = &mut self.classifier {
            out.extend(c.weights.iter_mut());
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.trainable().into_iter().map(|t| g.param(t.clone())).collect()
    }

    pub fn n_encoder_tensors(&self) -> usize {
        self.encoder.n_layers() * EncoderVars::PER_LAYER
    }
}

/// Splits a flat variable list back into encoder and classifier parts.
pub fn split_vars(flat: &[Var], n_encoder: usize) -> (EncoderVars, &[Var]) {
    (EncoderVars::from_flat(&flat[..n_encoder]), &flat[n_encoder..])
}

pub fn head<'a>(params: &'a ModelParams, classifier_vars: &'a [Var], memories: &'a [IdentityMemory]) -> IdHead<'a> {
    match &params.classifier {
        Some(classifier) => IdHead::Fc {
            classifier,
            weights: classifier_vars,
        },
        None => IdHead::Memory(memories),
    }
}
