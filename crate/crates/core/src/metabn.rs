//! MetaBN: the final normalization slot during meta-learning.
//!
//! Meta-train forwards normalize as plain BN and remember each domain's
//! batch mean and variance. The meta-test forward then mixes the meta-test
//! features with Gaussian samples drawn from every remembered domain and
//! batch-normalizes each mixture with the shared scale and shift.

use ndarray::Array2;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::encoder::{batch_norm_train, BatchStats};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Episode-scoped statistics of the meta-train domains.
#[derive(Clone, Debug, Default)]
pub struct MetaBn {
    saved: Vec<BatchStats>,
}

/// One mixture: `lambda * F + (1 - lambda) * z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mix {
    pub lambda: f64,
    pub z: Array2<f64>,
}

/// All random draws of one meta-test forward, fixed up front so the
/// forward is a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub mixes: Vec<Mix>,
}

impl MixPlan {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        for m in &mut self.mixes {
            m.lambda = lambda;
        }
        self
    }
}

impl MetaBn {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.saved.clear();
    }

    pub fn saved(&self) -> &[BatchStats] {
        &self.saved
    }

    /// Plain BN on a meta-train batch; its statistics are kept for the
    /// meta-test stage.
    pub fn metatrain_forward(
        &mut self,
        g: &mut Graph,
        features: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats)> {
        let (out, stats) = batch_norm_train(g, features, gamma, beta)?;
        self.saved.push(stats.clone());
        Ok((out, stats))
    }

    /// `batch` draws from `N(mu_i, var_i)` per dimension.
    pub fn sample_domain_features(&self, domain: usize, batch: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let stats = self.saved.get(domain).ok_or_else(|| {
            Error::MetaBn(format!(
                "no saved statistics for meta-train domain {domain} ({} saved)",
                self.saved.len()
            ))
        })?;
        let d = stats.mean.len();
        let std = stats.var.mapv(|v| v.max(0.0).sqrt());
        let mut z = Array2::zeros((batch, d));
        for mut row in z.rows_mut() {
            for c in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                row[c] = stats.mean[c] + std[c] * e;
            }
        }
        Ok(z)
    }

    /// Draws one `lambda ~ Beta(1, 1)` and one sampled batch per saved domain.
    pub fn plan(&self, batch: usize, lambda_rng: &mut Rng, feature_rng: &mut Rng) -> Result<MixPlan> {
        if self.saved.is_empty() {
            return Err(Error::MetaBn("meta-test forward before any meta-train forward".into()));
        }
        let beta = Beta::new(1.0, 1.0).expect("valid beta parameters");
        let mixes = (0..self.saved.len())
            .map(|i| {
                let lambda = beta.sample(lambda_rng);
                let z = self.sample_domain_features(i, batch, feature_rng)?;
                Ok(Mix { lambda, z })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixPlan { mixes })
    }

    pub fn metatest_forward(
        &self,
        g: &mut Graph,
        features: Var,
        gamma: Var,
        beta: Var,
        lambda_rng: &mut Rng,
        feature_rng: &mut Rng,
    ) -> Result<Vec<Var>> {
        let plan = self.plan(g.shape(features).0, lambda_rng, feature_rng)?;
        mix_forward(g, features, gamma, beta, &plan)
    }
}

/// One normalized output per mixture. Sampled features are constants, so
/// gradients reach the parameters only through `features`.
pub fn mix_forward(g: &mut Graph, features: Var, gamma: Var, beta: Var, plan: &MixPlan) -> Result<Vec<Var>> {
    if plan.mixes.is_empty() {
        return Err(Error::MetaBn("no saved meta-train statistics to mix with".into()));
    }
    let shape = g.shape(features);
    plan.mixes
        .iter()
        .map(|mix| {
            if mix.z.dim() != shape {
                return Err(Error::Shape(format!(
                    "sampled features {:?} do not match meta-test batch {shape:?}",
                    mix.z.dim()
                )));
            }
            let kept = g.scale(features, mix.lambda);
            let injected = g.constant(&mix.z * (1.0 - mix.lambda));
            let mixed = g.add(kept, injected);
            let (out, _) = batch_norm_train(g, mixed, gamma, beta)?;
            Ok(out)
        })
        .collect()
}
