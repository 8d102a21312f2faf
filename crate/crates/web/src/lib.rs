//! Three interactive views over the core library, exported to the browser.
//!
//! * [`domain_scatter`]: synthetic domains projected onto two signal axes.
//! * [`metabn_mix`]: one meta-test batch mixed with samples from another
//!   domain's statistics, before and after normalization.
//! * [`MemoryDemo`]: an identity memory that absorbs noisy batches and
//!   scores a query point against every slot.
//!
//! Every export returns flat `Float64Array`s of `x, y` pairs so the page can
//! draw them without further parsing.

use m3l_core::autodiff::Graph;
use m3l_core::encoder::batch_norm_train;
use m3l_core::memory::IdentityMemory;
use m3l_core::metabn::{mix_forward, MetaBn, Mix, MixPlan};
use m3l_core::rng::{self, Rng};
use m3l_core::synthdata::{DomainDataset, SyntheticConfig};
use ndarray::{s, Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

fn js_err(e: m3l_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

pub const N_DOMAINS: usize = 4;
pub const IDS: usize = 6;
pub const SAMPLES: usize = 16;

fn demo_config(shift: f64, nuisance: f64, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_domains: N_DOMAINS,
        ids_per_domain: IDS,
        samples_per_id: SAMPLES,
        input_dim: 6,
        signal_dims: 2,
        nuisance_dims: 2,
        nuisance,
        shift,
        noise: 0.25,
        center_scale: 1.5,
        seed,
        ..Default::default()
    }
}

fn project(ds: &DomainDataset) -> Array2<f64> {
    ds.features.slice(s![.., ..2]).to_owned()
}

/// Points of every domain with their domain and identity tags.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct Scatter {
    points: Vec<f64>,
    domains: Vec<u32>,
    labels: Vec<u32>,
}

#[wasm_bindgen]
impl Scatter {
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn domains(&self) -> Vec<u32> {
        self.domains.clone()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.labels.clone()
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

pub fn scatter_of(shift: f64, nuisance: f64, seed: u64) -> m3l_core::Result<Scatter> {
    let domains = demo_config(shift, nuisance, seed).generate()?;
    let mut out = Scatter {
        points: Vec::new(),
        domains: Vec::new(),
        labels: Vec::new(),
    };
    for ds in &domains {
        let xy = project(ds);
        out.points.extend(xy.iter());
        out.domains.extend(std::iter::repeat_n(ds.domain_id as u32, ds.len()));
        out.labels.extend(ds.labels.iter().map(|&l| l as u32));
    }
    Ok(out)
}

/// Synthetic domains seen through the first two input coordinates, where the
/// identity centers live.
#[wasm_bindgen]
pub fn domain_scatter(shift: f64, nuisance: f64, seed: u32) -> Result<Scatter, JsError> {
    scatter_of(shift, nuisance, seed.into()).map_err(js_err)
}

/// Before/after views of one MetaBN mixture.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct MixView {
    test: Vec<f64>,
    sampled: Vec<f64>,
    plain: Vec<f64>,
    mixed: Vec<f64>,
    lambda: f64,
}

#[wasm_bindgen]
impl MixView {
    /// Raw meta-test batch.
    pub fn test(&self) -> Vec<f64> {
        self.test.clone()
    }

    /// Draws from the meta-train domain's batch statistics.
    pub fn sampled(&self) -> Vec<f64> {
        self.sampled.clone()
    }

    /// Meta-test batch after plain batch normalization.
    pub fn plain(&self) -> Vec<f64> {
        self.plain.clone()
    }

    /// Mixture after batch normalization.
    pub fn mixed(&self) -> Vec<f64> {
        self.mixed.clone()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

pub fn mix_of(
    lambda: f64,
    test_domain: usize,
    train_domain: usize,
    shift: f64,
    seed: u64,
) -> m3l_core::Result<MixView> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(m3l_core::Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let domains = demo_config(shift, 1.0, seed).generate()?;
    let pick = |d: usize| {
        domains
            .get(d)
            .map(project)
            .ok_or_else(|| m3l_core::Error::Config(format!("domain {d} of {N_DOMAINS}")))
    };
    let test = pick(test_domain)?;
    let train = pick(train_domain)?;

    let mut g = Graph::new();
    let gamma = g.constant(Array2::ones((1, 2)));
    let beta = g.constant(Array2::zeros((1, 2)));
    let mut bn = MetaBn::new();
    let train_var = g.constant(train);
    bn.metatrain_forward(&mut g, train_var, gamma, beta)?;
    let z = bn.sample_domain_features(0, test.nrows(), &mut rng::stream(seed, rng::FEATURES))?;
    let plan = MixPlan {
        mixes: vec![Mix { lambda, z: z.clone() }],
    };
    let x = g.constant(test.clone());
    let (plain, _) = batch_norm_train(&mut g, x, gamma, beta)?;
    let mixed = mix_forward(&mut g, x, gamma, beta, &plan)?[0];
    Ok(MixView {
        test: test.into_iter().collect(),
        sampled: z.into_iter().collect(),
        plain: g.value(plain).iter().copied().collect(),
        mixed: g.value(mixed).iter().copied().collect(),
        lambda,
    })
}

/// Mixes domain `test_domain` with draws from `train_domain`'s statistics at
/// coefficient `lambda`.
#[wasm_bindgen]
pub fn metabn_mix(
    lambda: f64,
    test_domain: usize,
    train_domain: usize,
    shift: f64,
    seed: u32,
) -> Result<MixView, JsError> {
    mix_of(lambda, test_domain, train_domain, shift, seed.into()).map_err(js_err)
}

/// Identity memory over 2-d unit embeddings. Identity `k`'s true direction
/// sits at angle `2 pi k / n`; batches scatter around those directions.
#[wasm_bindgen]
pub struct MemoryDemo {
    memory: IdentityMemory,
    rng: Rng,
    noise: f64,
    steps: u32,
}

fn unit2(x: f64, y: f64) -> Array1<f64> {
    let n = (x * x + y * y).sqrt().max(1e-12);
    Array1::from(vec![x / n, y / n])
}

impl MemoryDemo {
    pub fn create(n_ids: usize, momentum: f64, temperature: f64, noise: f64, seed: u64) -> m3l_core::Result<Self> {
        let mut rng = rng::stream(seed, "memory-demo");
        // Slots start from a single noisy, rotated sample each.
        let mut init = Array2::zeros((n_ids, 2));
        for k in 0..n_ids {
            let a = angle(k, n_ids) + 1.2 + noise * gauss(&mut rng);
            init.row_mut(k).assign(&unit2(a.cos(), a.sin()));
        }
        let labels: Vec<usize> = (0..n_ids).collect();
        let memory = IdentityMemory::from_embeddings(0, init.view(), &labels, n_ids, momentum, temperature)?;
        Ok(Self {
            memory,
            rng,
            noise,
            steps: 0,
        })
    }

    /// One PK-style batch (every identity, `per_id` samples) and a memory
    /// update. Returns the batch points.
    pub fn advance(&mut self, per_id: usize) -> m3l_core::Result<Vec<f64>> {
        let n = self.memory.n_slots();
        let mut batch = Array2::zeros((n * per_id, 2));
        let mut labels = Vec::with_capacity(n * per_id);
        for k in 0..n {
            for i in 0..per_id {
                let a = angle(k, n) + self.noise * gauss(&mut self.rng);
                batch.row_mut(k * per_id + i).assign(&unit2(a.cos(), a.sin()));
                labels.push(k);
            }
        }
        self.memory.update(batch.view(), &labels)?;
        self.steps += 1;
        Ok(batch.into_iter().collect())
    }

    pub fn probabilities_at(&self, x: f64, y: f64) -> m3l_core::Result<Vec<f64>> {
        let q = unit2(x, y);
        (0..self.memory.n_slots())
            .map(|k| self.memory.sample_loss(&q, k).map(|l| (-l).exp()))
            .collect()
    }
}

fn angle(k: usize, n: usize) -> f64 {
    std::f64::consts::TAU * k as f64 / n as f64
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[wasm_bindgen]
impl MemoryDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(n_ids: usize, momentum: f64, temperature: f64, noise: f64, seed: u32) -> Result<MemoryDemo, JsError> {
        Self::create(n_ids, momentum, temperature, noise, seed.into()).map_err(js_err)
    }

    pub fn step(&mut self, per_id: usize) -> Result<Vec<f64>, JsError> {
        self.advance(per_id).map_err(js_err)
    }

    /// Slot centroids as `x, y` pairs.
    pub fn centroids(&self) -> Vec<f64> {
        self.memory.centroids.iter().copied().collect()
    }

    /// Softmax over slots for a query direction.
    pub fn probabilities(&self, x: f64, y: f64) -> Result<Vec<f64>, JsError> {
        self.probabilities_at(x, y).map_err(js_err)
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn set_momentum(&mut self, momentum: f64) -> Result<(), JsError> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(JsError::new("momentum must lie in [0, 1]"));
        }
        self.memory.momentum = momentum;
        Ok(())
    }
}
