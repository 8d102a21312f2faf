//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use m3l_core::encoder::{EncoderConfig, EncoderParams};
use m3l_core::evalkit::RetrievalSplit;
use m3l_core::memory::{self, IdentityMemory};
use m3l_core::model::ModelParams;
use m3l_core::rng;
use m3l_core::synthdata::{self, DomainDataset, MetaEpisode, PkConfig, SyntheticConfig};
use ndarray::{Array1, Array2, Axis};

pub const BN_EPS: f64 = 1e-5;

pub fn tiny_domains(input_dim: usize, ids: usize, samples: usize, seed: u64) -> Vec<DomainDataset> {
    SyntheticConfig {
        n_domains: 3,
        ids_per_domain: ids,
        samples_per_id: samples,
        input_dim,
        signal_dims: input_dim,
        nuisance_dims: 0,
        noise: 0.5,
        seed,
        ..Default::default()
    }
    .generate()
    .unwrap()
}

pub fn encoder(input_dim: usize, hidden: Vec<usize>, embed_dim: usize, seed: u64) -> EncoderParams {
    let cfg = EncoderConfig {
        input_dim,
        hidden_dims: hidden,
        embed_dim,
        use_metabn_last: true,
    };
    EncoderParams::init(&cfg, &mut rng::stream(seed, rng::INIT)).unwrap()
}

pub fn memories(domains: &[DomainDataset], params: &EncoderParams) -> Vec<IdentityMemory> {
    domains
        .iter()
        .map(|d| memory::init_memory(d, params, 0.2, 0.05).unwrap())
        .collect()
}

pub fn episode(domains: &[DomainDataset], pk: PkConfig, seed: u64) -> MetaEpisode {
    synthdata::split_episode(domains, pk, &mut rng::stream(seed, rng::EPISODES)).unwrap()
}

/// Total number of trainable scalars.
pub fn n_scalars(params: &ModelParams) -> usize {
    params.trainable().iter().map(|t| t.len()).sum()
}

/// Central differences of `f` over every trainable scalar.
pub fn fd_gradient(params: &ModelParams, h: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<Array2<f64>> {
    let shapes: Vec<(usize, usize)> = params.trainable().iter().map(|t| t.dim()).collect();
    let mut out: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
    for (t, shape) in shapes.iter().enumerate() {
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let mut plus = params.clone();
                plus.trainable_mut()[t][[i, j]] += h;
                let mut minus = params.clone();
                minus.trainable_mut()[t][[i, j]] -= h;
                out[t][[i, j]] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
        }
    }
    out
}

/// `|a - b| / max(|b|, floor)` over the flattened tensors.
pub fn relative_error(a: &[Array2<f64>], b: &[Array2<f64>], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.iter().zip(y) {
            diff += (u - v) * (u - v);
            norm += v * v;
        }
    }
    diff.sqrt() / norm.sqrt().max(floor)
}

fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    (&a - &b).mapv(|v| v * v).sum().sqrt()
}

/// Ranking, Rank-1 and mAP straight from the definitions: a full sort by
/// (distance, gallery index), then precision at every relevant position.
pub fn brute_force_metrics(split: &RetrievalSplit) -> (f64, f64) {
    let mut rank1 = 0.0;
    let mut ap_sum = 0.0;
    for (qi, q) in split.query.rows().into_iter().enumerate() {
        let mut order: Vec<(f64, usize)> = split
            .gallery
            .rows()
            .into_iter()
            .enumerate()
            .map(|(gi, g)| (dist(q, g), gi))
            .collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let id = split.query_ids[qi];
        if split.gallery_ids[order[0].1] == id {
            rank1 += 1.0;
        }
        let mut hits = 0.0;
        let mut precisions = Vec::new();
        for (r, &(_, gi)) in order.iter().enumerate() {
            if split.gallery_ids[gi] == id {
                hits += 1.0;
                precisions.push(hits / (r as f64 + 1.0));
            }
        }
        ap_sum += precisions.iter().sum::<f64>() / precisions.len() as f64;
    }
    let n = split.query_ids.len() as f64;
    (ap_sum / n, rank1 / n)
}

/// Plain-array train-mode forward: returns the raw embeddings.
pub fn reference_forward(params: &EncoderParams, x: &Array2<f64>) -> Array2<f64> {
    let mut h = x.clone();
    let last = params.linears.len() - 1;
    for (i, (lin, bn)) in params.linears.iter().zip(&params.norms).enumerate() {
        let z = h.dot(&lin.weight) + &lin.bias;
        let mean = z.mean_axis(Axis(0)).unwrap();
        let var = z.var_axis(Axis(0), 0.0);
        let normed = (&z - &mean) / &var.mapv(|v| (v + BN_EPS).sqrt());
        let out = normed * &bn.gamma + &bn.beta;
        h = if i == last { out } else { out.mapv(|v| v.max(0.0)) };
    }
    h
}

pub fn reference_triplet(emb: &Array2<f64>, labels: &[usize], margin: f64) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut dp: f64 = 0.0;
        let mut dn = f64::INFINITY;
        for j in 0..b {
            if i == j {
                continue;
            }
            let d = dist(emb.row(i), emb.row(j)).max(1e-6);
            if labels[i] == labels[j] {
                dp = dp.max(d);
            } else {
                dn = dn.min(d);
            }
        }
        total += (dp - dn + margin).max(0.0);
    }
    total / b as f64
}

pub fn unit_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n.max(1e-12);
    }
    out
}

pub fn reference_memory_loss(emb: &Array2<f64>, labels: &[usize], mem: &IdentityMemory) -> f64 {
    let unit = unit_rows(emb);
    let mut total = 0.0;
    for (row, &label) in unit.rows().into_iter().zip(labels) {
        let logits: Array1<f64> = mem.centroids.dot(&row) / mem.temperature;
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
        total += lse - logits[label];
    }
    total / labels.len() as f64
}

/// Plain BN of an arbitrary batch with the given affine parameters.
pub fn reference_bn(x: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).unwrap();
    let var = x.var_axis(Axis(0), 0.0);
    (x - &mean) / &var.mapv(|v| (v + BN_EPS).sqrt()) * gamma + beta
}

/// Input to the final BN in train mode.
pub fn reference_last_input(params: &EncoderParams, x: &Array2<f64>) -> Array2<f64> {
    let mut h = x.clone();
    let last = params.linears.len() - 1;
    for (lin, bn) in params.linears.iter().zip(&params.norms).take(last) {
        let z = h.dot(&lin.weight) + &lin.bias;
        h = reference_bn(&z, &bn.gamma, &bn.beta).mapv(|v| v.max(0.0));
    }
    h.dot(&params.linears[last].weight) + &params.linears[last].bias
}
