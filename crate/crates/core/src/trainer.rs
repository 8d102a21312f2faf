//! Episodic meta-optimization.
//!
//! Every meta iteration builds one tape holding: the meta-train loss at
//! `theta`, a single fresh-moment Adam step producing `theta'` as a
//! differentiable function of `theta`, and the meta-test loss at `theta'`.
//! The outer gradient of the summed objective therefore carries the
//! second-order terms of the inner step.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{self, BatchStats, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::evalkit::{self, RetrievalReport, RetrievalSplit};
use crate::losses::{self, FcClassifier, TripletConfig};
use crate::memory::{self, IdentityMemory};
use crate::metabn::{MetaBn, MixPlan};
use crate::model::{self, ClassifierKind, ModelParams};
use crate::rng::{self, Rng};
use crate::synthdata::{self, DomainDataset, LabeledSet, MetaEpisode, PkBatch, PkConfig};

/// Inner-step epsilon, added under the square root.
pub const INNER_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "meta")]
    Meta,
    #[serde(rename = "meta+metabn")]
    MetaBn,
}

impl RunMode {
    pub fn label(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Meta => "meta",
            RunMode::MetaBn => "meta+metabn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
    pub steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Array2<f64>]) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (i, (p, grad)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            ndarray::Zip::from(&mut *p)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * weight_decay * *p;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Warmup from `peak / warmup_divisor` to `peak`, then division by
/// `decay_divisor` at each decay epoch. Inner and outer rates share the
/// shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_divisor: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_divisor: f64,
}

impl Default for ScheduleConfig {
    /// Desk-scale: 30 epochs, warmup 5, decays at 15 and 25, peak 3.5e-3.
    fn default() -> Self {
        Self {
            inner_lr: 3.5e-3,
            outer_lr: 3.5e-3,
            decay_epochs: vec![15, 25],
            warmup_epochs: 5,
            ..Self::full_scale()
        }
    }
}

impl ScheduleConfig {
    /// 60 epochs, warmup 10, decays at 30 and 50.
    pub fn full_scale() -> Self {
        Self {
            inner_lr: 3.5e-4,
            outer_lr: 3.5e-4,
            warmup_epochs: 10,
            warmup_divisor: 10.0,
            decay_epochs: vec![30, 50],
            decay_divisor: 10.0,
        }
    }

    fn factor_apply(&self, peak: f64, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let start = peak / self.warmup_divisor;
            if epoch == 0 {
                return start;
            }
            return start + (peak - start) * epoch as f64 / self.warmup_epochs as f64;
        }
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count() as i32;
        if decays == 0 {
            peak
        } else {
            peak / self.decay_divisor.powi(decays)
        }
    }

    /// `(inner, outer)` learning rates for `epoch`.
    pub fn lr_at(&self, epoch: usize) -> (f64, f64) {
        (
            self.factor_apply(self.inner_lr, epoch),
            self.factor_apply(self.outer_lr, epoch),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.warmup_divisor >= 1.0 && self.decay_divisor >= 1.0) {
            return Err(Error::Config("schedule divisors must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: RunMode,
    pub classifier: ClassifierKind,
    pub momentum: f64,
    pub temperature: f64,
    pub margin: f64,
    pub pk: PkConfig,
    pub epochs: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Drop the second-order path through the inner step.
    pub first_order: bool,
    /// Replace every sampled MetaBN mixing coefficient.
    pub force_lambda: Option<f64>,
    /// Evaluate every this many epochs (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Save a checkpoint every this many epochs (0 keeps only the final one).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::MetaBn,
            classifier: ClassifierKind::Memory,
            momentum: memory::DEFAULT_MOMENTUM,
            temperature: memory::DEFAULT_TEMPERATURE,
            margin: losses::DEFAULT_MARGIN,
            pk: PkConfig::default(),
            epochs: 30,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            first_order: false,
            force_lambda: None,
            eval_every: 1,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad_temperature = self.temperature.is_nan() || self.temperature <= 0.0;
        let bad_margin = self.margin.is_nan() || self.margin < 0.0;
        if !(0.0..=1.0).contains(&self.momentum) || bad_temperature || bad_margin {
            return Err(Error::Config("need m in [0,1], tau > 0, margin >= 0".into()));
        }
        if self.pk.p < 2 || self.pk.k < 2 {
            return Err(Error::Config("PK sampling needs P >= 2 and K >= 2".into()));
        }
        if let Some(l) = self.force_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("forced lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One fresh-moment Adam step on a copy of `theta`, kept on the tape.
///
/// With zero initial moments the bias-corrected estimates are `g` and
/// `g^2`, so `theta' = theta - alpha * g / sqrt(g^2 + eps)`. With
/// `first_order` the step is detached and `theta'` depends on `theta` only
/// through the identity.
pub fn inner_update(g: &mut Graph, theta: &[Var], loss: Var, alpha: f64, first_order: bool) -> Result<Vec<Var>> {
    let grads = g.grad(loss, theta);
    if grads.iter().any(|&gr| g.value(gr).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("inner step (meta-train gradient)".into()));
    }
    let mut out = Vec::with_capacity(theta.len());
    for (&p, &gr) in theta.iter().zip(&grads) {
        let sq = g.square(gr);
        let sq = g.add_scalar(sq, INNER_EPS);
        let denom = g.sqrt(sq);
        let mut step = g.div(gr, denom);
        if first_order {
            step = g.detach(step);
        }
        let scaled = g.scale(step, alpha);
        out.push(g.sub(p, scaled));
    }
    Ok(out)
}

/// How the meta-test stage treats the final normalization slot.
pub enum Mixing<'a> {
    /// Plain BN.
    Off,
    /// MetaBN with fresh draws.
    Sample {
        lambda: &'a mut Rng,
        features: &'a mut Rng,
        force_lambda: Option<f64>,
    },
    /// MetaBN with predetermined draws.
    Fixed(&'a MixPlan),
}

/// Values and gradient of `L_mtr(theta) + L_mte(theta')`.
#[derive(Clone, Debug)]
pub struct MetaObjective {
    pub l_mtr: f64,
    pub l_mte: f64,
    /// Gradient with respect to every trainable tensor, in `ModelParams::trainable` order.
    pub grads: Vec<Array2<f64>>,
    pub plan: Option<MixPlan>,
    /// Detached unit embeddings and BN statistics of each meta-train batch at `theta`.
    pub train_embeddings: Vec<Array2<f64>>,
    pub train_stats: Vec<Vec<BatchStats>>,
}

pub fn meta_objective(
    params: &ModelParams,
    memories: &[IdentityMemory],
    episode: &MetaEpisode,
    triplet: &TripletConfig,
    alpha: f64,
    first_order: bool,
    mixing: Mixing<'_>,
) -> Result<MetaObjective> {
    let mut g = Graph::new();
    let theta = params.bind(&mut g);
    let n_enc = params.n_encoder_tensors();
    let (enc, cls) = model::split_vars(&theta, n_enc);
    let head = model::head(params, cls, memories);
    let batches: Vec<(usize, &PkBatch)> = episode
        .meta_train_domains
        .iter()
        .copied()
        .zip(&episode.train_batches)
        .collect();

    let mut bn = MetaBn::new();
    let record = !matches!(mixing, Mixing::Off);
    let mtr = losses::meta_train_loss(
        &mut g,
        &enc,
        &params.encoder,
        head,
        &batches,
        triplet,
        record.then_some(&mut bn),
    )?;
    let plan = match mixing {
        Mixing::Off => None,
        Mixing::Fixed(plan) => Some(plan.clone()),
        Mixing::Sample {
            lambda,
            features,
            force_lambda,
        } => {
            let plan = bn.plan(episode.test_batch.len(), lambda, features)?;
            Some(match force_lambda {
                Some(l) => plan.with_lambda(l),
                None => plan,
            })
        }
    };

    let theta_prime = inner_update(&mut g, &theta, mtr.loss, alpha, first_order)?;
    let (enc_p, cls_p) = model::split_vars(&theta_prime, n_enc);
    let head_p = model::head(params, cls_p, memories);
    let mte = losses::meta_test_loss(
        &mut g,
        &enc_p,
        &params.encoder,
        head_p,
        episode.meta_test_domain,
        &episode.test_batch,
        triplet,
        plan.as_ref(),
    )?;
    let total = g.add(mtr.loss, mte.loss);
    let grads = g.grad(total, &theta);
    let grads = grads.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
    if grads.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("outer meta-gradient".into()));
    }
    Ok(MetaObjective {
        l_mtr: g.scalar_value(mtr.loss),
        l_mte: g.scalar_value(mte.loss),
        grads,
        plan,
        train_embeddings: mtr.domains.iter().map(|d| d.embeddings.clone()).collect(),
        train_stats: mtr.domains.into_iter().map(|d| d.stats).collect(),
    })
}

/// Mean source loss and its gradient, without any meta split.
#[derive(Clone, Debug)]
pub struct PooledObjective {
    pub loss: f64,
    pub grads: Vec<Array2<f64>>,
    pub embeddings: Vec<Array2<f64>>,
    pub stats: Vec<Vec<BatchStats>>,
}

pub fn pooled_objective(
    params: &ModelParams,
    memories: &[IdentityMemory],
    batches: &[(usize, &PkBatch)],
    triplet: &TripletConfig,
) -> Result<PooledObjective> {
    let mut g = Graph::new();
    let theta = params.bind(&mut g);
    let (enc, cls) = model::split_vars(&theta, params.n_encoder_tensors());
    let head = model::head(params, cls, memories);
    let out = losses::meta_train_loss(&mut g, &enc, &params.encoder, head, batches, triplet, None)?;
    let grads = g.grad(out.loss, &theta);
    let grads = grads.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
    if grads.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("baseline gradient".into()));
    }
    Ok(PooledObjective {
        loss: g.scalar_value(out.loss),
        grads,
        embeddings: out.domains.iter().map(|d| d.embeddings.clone()).collect(),
        stats: out.domains.into_iter().map(|d| d.stats).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub epoch: usize,
    pub meta_test_domain: Option<usize>,
    pub l_mtr: f64,
    pub l_mte: Option<f64>,
    pub lr_inner: f64,
    pub lr_outer: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub epoch: usize,
    pub iteration: usize,
    #[serde(flatten)]
    pub report: RetrievalReport,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricEvent {
    Iteration(IterationMetrics),
    Eval(EvalMetrics),
}

/// Everything that advances during training.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub params: ModelParams,
    pub optimizer: Adam,
    pub memories: Vec<IdentityMemory>,
    pub config: TrainConfig,
    pub iteration: usize,
    pub epoch: usize,
    episode_rng: Rng,
    lambda_rng: Rng,
    feature_rng: Rng,
}

impl TrainerState {
    /// Fresh parameters, and memories extracted with them.
    pub fn new(config: &TrainConfig, encoder_config: &EncoderConfig, sources: &[DomainDataset]) -> Result<Self> {
        config.validate()?;
        if sources.is_empty() {
            return Err(Error::Config("no source domains".into()));
        }
        if sources.iter().any(|s| s.input_dim() != encoder_config.input_dim) {
            return Err(Error::Config("source input dim differs from encoder input_dim".into()));
        }
        let mut init_rng = rng::stream(config.seed, rng::INIT);
        let encoder = EncoderParams::init(encoder_config, &mut init_rng)?;
        let classifier = config.classifier.fc_variant().map(|variant| {
            let sizes: Vec<usize> = sources.iter().map(|s| s.n_identities).collect();
            FcClassifier::new(variant, &sizes, encoder_config.embed_dim, &mut init_rng)
        });
        let params = ModelParams { encoder, classifier };
        let memories = match config.classifier {
            ClassifierKind::Memory => sources
                .iter()
                .map(|s| memory::init_memory(s, &params.encoder, config.momentum, config.temperature))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let optimizer = Adam::new(config.adam, &params.trainable());
        Ok(Self {
            params,
            optimizer,
            memories,
            config: config.clone(),
            iteration: 0,
            epoch: 0,
            episode_rng: rng::stream(config.seed, rng::EPISODES),
            lambda_rng: rng::stream(config.seed, rng::LAMBDA),
            feature_rng: rng::stream(config.seed, rng::FEATURES),
        })
    }

    pub fn triplet(&self) -> TripletConfig {
        TripletConfig {
            margin: self.config.margin,
        }
    }

    fn uses_metabn(&self) -> bool {
        self.config.mode == RunMode::MetaBn && self.params.encoder.config.use_metabn_last
    }

    /// Samples this iteration's batches and runs the mode's step.
    pub fn step(&mut self, sources: &[DomainDataset]) -> Result<IterationMetrics> {
        match self.config.mode {
            RunMode::Baseline => {
                let batches = sources
                    .iter()
                    .map(|s| synthdata::sample_pk_batch(s, self.config.pk, &mut self.episode_rng))
                    .collect::<Result<Vec<_>>>()?;
                self.baseline_step(&batches)
            }
            RunMode::Meta | RunMode::MetaBn => {
                let episode = synthdata::split_episode(sources, self.config.pk, &mut self.episode_rng)?;
                self.meta_step(&episode)
            }
        }
    }

    /// One iteration of the meta procedure on `episode`.
    pub fn meta_step(&mut self, episode: &MetaEpisode) -> Result<IterationMetrics> {
        if self.config.mode == RunMode::Baseline {
            return Err(Error::Config("meta_step called in baseline mode".into()));
        }
        let (alpha, beta) = self.config.schedule.lr_at(self.epoch);
        let triplet = self.triplet();
        let mixing = if self.uses_metabn() {
            Mixing::Sample {
                lambda: &mut self.lambda_rng,
                features: &mut self.feature_rng,
                force_lambda: self.config.force_lambda,
            }
        } else {
            Mixing::Off
        };
        let objective = meta_objective(
            &self.params,
            &self.memories,
            episode,
            &triplet,
            alpha,
            self.config.first_order,
            mixing,
        )?;
        // Meta-test features for its memory come from the original model.
        let (test_raw, test_stats) = encoder::embed_train(&self.params.encoder, &episode.test_batch.features)?;
        let test_unit = encoder::l2_normalize_rows(&test_raw);

        let grad_norm = global_norm(&objective.grads);
        self.optimizer.step(self.params.trainable_mut(), &objective.grads, beta);

        for stats in &objective.train_stats {
            self.params.encoder.track_stats(stats);
        }
        self.params.encoder.track_stats(&test_stats);
        if !self.memories.is_empty() {
            for ((&d, batch), emb) in episode
                .meta_train_domains
                .iter()
                .zip(&episode.train_batches)
                .zip(&objective.train_embeddings)
            {
                self.memories[d].update(emb.view(), &batch.labels)?;
            }
            self.memories[episode.meta_test_domain].update(test_unit.view(), &episode.test_batch.labels)?;
        }
        let metrics = IterationMetrics {
            iteration: self.iteration,
            epoch: self.epoch,
            meta_test_domain: Some(episode.meta_test_domain),
            l_mtr: objective.l_mtr,
            l_mte: Some(objective.l_mte),
            lr_inner: alpha,
            lr_outer: beta,
            grad_norm,
        };
        self.iteration += 1;
        Ok(metrics)
    }

    /// One Adam step on the mean loss over every source domain's batch.
    pub fn baseline_step(&mut self, batches: &[PkBatch]) -> Result<IterationMetrics> {
        let (_, lr) = self.config.schedule.lr_at(self.epoch);
        let triplet = self.triplet();
        let indexed: Vec<(usize, &PkBatch)> = batches.iter().enumerate().collect();
        let objective = pooled_objective(&self.params, &self.memories, &indexed, &triplet)?;
        let grad_norm = global_norm(&objective.grads);
        self.optimizer.step(self.params.trainable_mut(), &objective.grads, lr);
        for stats in &objective.stats {
            self.params.encoder.track_stats(stats);
        }
        if !self.memories.is_empty() {
            for ((d, batch), emb) in batches.iter().enumerate().zip(&objective.embeddings) {
                self.memories[d].update(emb.view(), &batch.labels)?;
            }
        }
        let metrics = IterationMetrics {
            iteration: self.iteration,
            epoch: self.epoch,
            meta_test_domain: None,
            l_mtr: objective.loss,
            l_mte: None,
            lr_inner: lr,
            lr_outer: lr,
            grad_norm,
        };
        self.iteration += 1;
        Ok(metrics)
    }
}

fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Held-out retrieval with eval-mode raw embeddings.
pub fn evaluate_encoder(params: &EncoderParams, query: &LabeledSet, gallery: &LabeledSet) -> Result<RetrievalReport> {
    let split = RetrievalSplit::new(
        encoder::embed(params, &query.features, Mode::Eval)?,
        query.labels.clone(),
        encoder::embed(params, &gallery.features, Mode::Eval)?,
        gallery.labels.clone(),
    )?;
    evalkit::evaluate(&split)
}

/// Query and gallery of the held-out domain.
#[derive(Clone, Copy, Debug)]
pub struct EvalSets<'a> {
    pub query: &'a LabeledSet,
    pub gallery: &'a LabeledSet,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub history: Vec<MetricEvent>,
    pub final_report: Option<RetrievalReport>,
}

pub fn iterations_per_epoch(sources: &[DomainDataset], pk: PkConfig) -> usize {
    let min = sources.iter().map(DomainDataset::len).min().unwrap_or(0);
    min.div_ceil(pk.batch_size()).max(1)
}

/// Full training run. Events are handed to `on_event` as they happen and
/// also collected in the returned history.
pub fn train(
    config: &TrainConfig,
    encoder_config: &EncoderConfig,
    sources: &[DomainDataset],
    eval: Option<EvalSets<'_>>,
    on_event: impl FnMut(&MetricEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    train_with(config, encoder_config, sources, eval, on_event, |_| Ok(()))
}

/// [`train`] with a hook that sees the state after every epoch.
pub fn train_with(
    config: &TrainConfig,
    encoder_config: &EncoderConfig,
    sources: &[DomainDataset],
    eval: Option<EvalSets<'_>>,
    mut on_event: impl FnMut(&MetricEvent) -> Result<()>,
    mut on_epoch: impl FnMut(&TrainerState) -> Result<()>,
) -> Result<TrainOutcome> {
    if config.mode != RunMode::Baseline && sources.len() < 2 {
        return Err(Error::Config("meta-learning needs at least 2 source domains".into()));
    }
    let mut state = TrainerState::new(config, encoder_config, sources)?;
    let per_epoch = iterations_per_epoch(sources, config.pk);
    let mut history = Vec::new();
    let mut final_report = None;
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        for _ in 0..per_epoch {
            let metrics = state.step(sources)?;
            let event = MetricEvent::Iteration(metrics);
            on_event(&event)?;
            history.push(event);
        }
        let last = epoch + 1 == config.epochs;
        let periodic = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        if let Some(sets) = eval {
            if periodic || last {
                let report = evaluate_encoder(&state.params.encoder, sets.query, sets.gallery)?;
                let event = MetricEvent::Eval(EvalMetrics {
                    epoch,
                    iteration: state.iteration,
                    report,
                });
                on_event(&event)?;
                history.push(event);
                if last {
                    final_report = Some(report);
                }
            }
        }
        on_epoch(&state)?;
    }
    state.epoch = config.epochs;
    Ok(TrainOutcome {
        state,
        history,
        final_report,
    })
}
