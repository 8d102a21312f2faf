//! Procedural multi-domain identity data, PK batch sampling and episode
//! construction.
//!
//! Each domain owns its own identities and its own affine transform. Identity
//! centers occupy a fixed block of latent coordinates shared by all domains,
//! while every domain inflates the within-identity variance of its own random
//! subset of the remaining coordinates. An encoder has to learn which
//! directions carry identity, and a held-out domain brings nuisance
//! directions no source showed.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Labeled samples of one source domain. Labels are `0..n_identities`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_identities: usize,
    by_identity: Vec<Vec<usize>>,
}

impl DomainDataset {
    pub fn new(domain_id: usize, features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let n_identities = labels.iter().max().map_or(0, |&m| m + 1);
        if n_identities < 2 {
            return Err(Error::Dataset(format!(
                "domain {domain_id} needs at least 2 identities, found {n_identities}"
            )));
        }
        let mut by_identity = vec![Vec::new(); n_identities];
        for (i, &label) in labels.iter().enumerate() {
            by_identity[label].push(i);
        }
        if let Some((k, members)) = by_identity.iter().enumerate().find(|(_, m)| m.len() < 2) {
            return Err(Error::Dataset(format!(
                "domain {domain_id} identity {k} has {} samples, need at least 2",
                members.len()
            )));
        }
        Ok(Self {
            domain_id,
            features,
            labels,
            n_identities,
            by_identity,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Sample indices of identity `k`.
    pub fn members(&self, k: usize) -> &[usize] {
        &self.by_identity[k]
    }
}

/// Generation recipe for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub domain_id: usize,
    /// `d_in x d_in`, applied as `x -> A x + b`.
    pub transform: Array2<f64>,
    pub offset: Array1<f64>,
    /// One row per identity.
    pub centers: Array2<f64>,
    pub noise_scale: f64,
    /// Extra within-identity standard deviation per latent coordinate.
    pub nuisance_scales: Array1<f64>,
    pub samples_per_identity: usize,
    pub seed: u64,
}

impl DomainShiftSpec {
    pub fn n_identities(&self) -> usize {
        self.centers.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        if self.n_identities() < 2 {
            return Err(Error::Dataset(format!(
                "domain {}: n_identities must be >= 2",
                self.domain_id
            )));
        }
        if self.samples_per_identity < 2 {
            return Err(Error::Dataset(format!(
                "domain {}: {} samples per identity cannot form K >= 2 groups",
                self.domain_id, self.samples_per_identity
            )));
        }
        if self.transform.dim() != (d, d) || self.offset.len() != d || self.nuisance_scales.len() != d {
            return Err(Error::Dataset(format!(
                "domain {}: affine transform does not match input dim {d}",
                self.domain_id
            )));
        }
        let finite_non_negative = |v: f64| v >= 0.0 && v.is_finite();
        if !finite_non_negative(self.noise_scale) || !self.nuisance_scales.iter().all(|&v| finite_non_negative(v)) {
            return Err(Error::Dataset(format!(
                "domain {}: noise scale must be finite and non-negative",
                self.domain_id
            )));
        }
        Ok(())
    }
}

/// Compact description of a whole synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Total domains, sources plus the held-out one.
    pub n_domains: usize,
    pub ids_per_domain: usize,
    pub samples_per_id: usize,
    pub input_dim: usize,
    /// Spread of identity centers.
    pub center_scale: f64,
    /// Leading latent coordinates that carry identity; the rest are zero at
    /// every center.
    pub signal_dims: usize,
    /// Non-signal coordinates whose variance each domain inflates.
    pub nuisance_dims: usize,
    /// Standard deviation of the inflated coordinates.
    pub nuisance: f64,
    /// Magnitude of the random part of each domain's linear map.
    pub shift: f64,
    /// Magnitude of each domain's offset.
    pub offset_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_domains: 4,
            ids_per_domain: 50,
            samples_per_id: 20,
            input_dim: 32,
            center_scale: 1.0,
            signal_dims: 8,
            nuisance_dims: 8,
            nuisance: 1.5,
            shift: 0.6,
            offset_scale: 1.0,
            noise: 0.4,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// Random per-domain recipes, a pure function of the config.
    pub fn specs(&self) -> Result<Vec<DomainShiftSpec>> {
        let d = self.input_dim;
        if d == 0 || self.signal_dims == 0 || self.signal_dims > d {
            return Err(Error::Config(format!(
                "need 0 < signal_dims <= input_dim, got {} and {d}",
                self.signal_dims
            )));
        }
        if self.nuisance_dims > d - self.signal_dims {
            return Err(Error::Config(format!(
                "nuisance_dims {} exceeds the {} non-signal coordinates",
                self.nuisance_dims,
                d - self.signal_dims
            )));
        }
        let specs = (0..self.n_domains)
            .map(|domain_id| {
                let mut rng = rng::child(self.seed, "domain-spec", domain_id as u64);
                let mut centers = gaussian((self.ids_per_domain, d), self.center_scale, &mut rng);
                centers.slice_mut(ndarray::s![.., self.signal_dims..]).fill(0.0);
                let mixing = gaussian((d, d), self.shift / (d as f64).sqrt(), &mut rng);
                let transform = Array2::eye(d) + mixing;
                let offset = gaussian((1, d), self.offset_scale, &mut rng).row(0).to_owned();
                let mut nuisance_scales = Array1::zeros(d);
                for c in index::sample(&mut rng, d - self.signal_dims, self.nuisance_dims) {
                    nuisance_scales[self.signal_dims + c] = self.nuisance;
                }
                DomainShiftSpec {
                    domain_id,
                    transform,
                    offset,
                    centers,
                    noise_scale: self.noise,
                    nuisance_scales,
                    samples_per_identity: self.samples_per_id,
                    seed: self.seed.wrapping_add(1000 + domain_id as u64),
                }
            })
            .collect();
        Ok(specs)
    }

    pub fn generate(&self) -> Result<Vec<DomainDataset>> {
        generate_domains(&self.specs()?)
    }
}

fn gaussian(shape: (usize, usize), scale: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Materializes every domain. Sample `j` of identity `k` in domain `d` is
/// `A_d (c_k + e) + b_d` where coordinate `i` of `e` has standard deviation
/// `sqrt(noise^2 + nuisance_i^2)`.
pub fn generate_domains(specs: &[DomainShiftSpec]) -> Result<Vec<DomainDataset>> {
    if specs.len() < 3 {
        return Err(Error::Dataset(format!(
            "need at least 3 domains (sources plus held-out), got {}",
            specs.len()
        )));
    }
    let d = specs[0].input_dim();
    specs
        .iter()
        .map(|spec| {
            spec.validate()?;
            if spec.input_dim() != d {
                return Err(Error::Dataset("domains disagree on input dim".into()));
            }
            let mut rng = rng::stream(spec.seed, rng::DATA);
            let n = spec.n_identities() * spec.samples_per_identity;
            let mut latent = Array2::zeros((n, d));
            let mut labels = Vec::with_capacity(n);
            let scales = spec
                .nuisance_scales
                .mapv(|v| (spec.noise_scale * spec.noise_scale + v * v).sqrt());
            for k in 0..spec.n_identities() {
                for j in 0..spec.samples_per_identity {
                    let row = k * spec.samples_per_identity + j;
                    for c in 0..d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        latent[[row, c]] = spec.centers[[k, c]] + scales[c] * z;
                    }
                    labels.push(k);
                }
            }
            let features = latent.dot(&spec.transform.t()) + &spec.offset;
            DomainDataset::new(spec.domain_id, features, labels)
        })
        .collect()
}

/// Features with identity labels, used for query and gallery sets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

/// One domain split into training identities and disjoint evaluation
/// identities (one query per identity, the rest gallery).
#[derive(Clone, Debug)]
pub struct DomainSplit {
    pub train: DomainDataset,
    pub query: LabeledSet,
    pub gallery: LabeledSet,
}

pub fn split_domain(dataset: &DomainDataset, train_fraction: f64) -> Result<DomainSplit> {
    let n = dataset.n_identities;
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train < 2 || n_train >= n {
        return Err(Error::Dataset(format!(
            "train fraction {train_fraction} leaves {n_train} of {n} identities for training"
        )));
    }
    let d = dataset.input_dim();
    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut query_rows = Vec::new();
    let mut query_labels = Vec::new();
    let mut gallery_rows = Vec::new();
    let mut gallery_labels = Vec::new();
    for k in 0..n {
        let members = dataset.members(k);
        if k < n_train {
            train_rows.extend_from_slice(members);
            train_labels.extend(std::iter::repeat_n(k, members.len()));
        } else {
            let eval_label = k - n_train;
            query_rows.push(members[0]);
            query_labels.push(eval_label);
            gallery_rows.extend_from_slice(&members[1..]);
            gallery_labels.extend(std::iter::repeat_n(eval_label, members.len() - 1));
        }
    }
    let take = |rows: &[usize]| {
        let mut out = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&dataset.features.row(r));
        }
        out
    };
    Ok(DomainSplit {
        train: DomainDataset::new(dataset.domain_id, take(&train_rows), train_labels)?,
        query: LabeledSet {
            features: take(&query_rows),
            labels: query_labels,
        },
        gallery: LabeledSet {
            features: take(&gallery_rows),
            labels: gallery_labels,
        },
    })
}

/// Writes `domain_id,identity,x_0,...,x_{d-1}`, one sample per line,
/// after a `#` header line. Floats use shortest round-trip formatting.
pub fn write_columnar<W: Write>(datasets: &[DomainDataset], mut out: W) -> Result<()> {
    let d = datasets.first().map_or(0, DomainDataset::input_dim);
    write!(out, "# domain_id,identity")?;
    for c in 0..d {
        write!(out, ",x{c}")?;
    }
    writeln!(out)?;
    for ds in datasets {
        for (row, &label) in ds.features.rows().into_iter().zip(&ds.labels) {
            write!(out, "{},{}", ds.domain_id, label)?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn read_columnar<R: BufRead>(input: R) -> Result<Vec<DomainDataset>> {
    let mut grouped: Vec<(usize, Vec<f64>, Vec<usize>)> = Vec::new();
    let mut width = None;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Dataset(format!("line {}: {what}", lineno + 1));
        let mut fields = line.split(',');
        let domain: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad("bad domain id"))?;
        let label: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad("bad identity"))?;
        let values = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad feature value"))?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => return Err(bad("ragged row")),
            _ => {}
        }
        let slot = match grouped.iter().position(|(id, _, _)| *id == domain) {
            Some(i) => i,
            None => {
                grouped.push((domain, Vec::new(), Vec::new()));
                grouped.len() - 1
            }
        };
        grouped[slot].1.extend(values);
        grouped[slot].2.push(label);
    }
    let d = width.unwrap_or(0);
    grouped
        .into_iter()
        .map(|(domain, flat, labels)| {
            let features =
                Array2::from_shape_vec((labels.len(), d), flat).map_err(|e| Error::Dataset(e.to_string()))?;
            DomainDataset::new(domain, features, labels)
        })
        .collect()
}

/// Identities per batch (`p`) and instances per identity (`k`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PkConfig {
    pub p: usize,
    pub k: usize,
}

impl Default for PkConfig {
    fn default() -> Self {
        Self { p: 16, k: 4 }
    }
}

impl PkConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PkBatch {
    pub domain_id: usize,
    pub indices: Vec<usize>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `p` distinct identities with `k` samples each. Identities with fewer
/// than `k` samples are drawn with replacement.
pub fn sample_pk_batch(dataset: &DomainDataset, pk: PkConfig, rng: &mut Rng) -> Result<PkBatch> {
    let PkConfig { p, k } = pk;
    if p == 0 || k == 0 {
        return Err(Error::Sampling("P and K must be positive".into()));
    }
    if p > dataset.n_identities {
        return Err(Error::Sampling(format!(
            "P={p} exceeds the {} identities of domain {}",
            dataset.n_identities, dataset.domain_id
        )));
    }
    let mut indices = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for identity in index::sample(rng, dataset.n_identities, p) {
        let members = dataset.members(identity);
        if members.len() >= k {
            indices.extend(index::sample(rng, members.len(), k).into_iter().map(|i| members[i]));
        } else {
            indices.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
        labels.extend(std::iter::repeat_n(identity, k));
    }
    let mut features = Array2::zeros((indices.len(), dataset.input_dim()));
    for (row, &i) in indices.iter().enumerate() {
        features.row_mut(row).assign(&dataset.features.row(i));
    }
    Ok(PkBatch {
        domain_id: dataset.domain_id,
        indices,
        features,
        labels,
    })
}

/// One iteration's meta-train / meta-test partition. Domain references are
/// positions in the source list.
#[derive(Clone, Debug)]
pub struct MetaEpisode {
    pub meta_test_domain: usize,
    pub meta_train_domains: Vec<usize>,
    pub train_batches: Vec<PkBatch>,
    pub test_batch: PkBatch,
}

pub fn split_episode(domains: &[DomainDataset], pk: PkConfig, rng: &mut Rng) -> Result<MetaEpisode> {
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "an episode needs at least 2 source domains, got {}",
            domains.len()
        )));
    }
    let meta_test_domain = rng.random_range(0..domains.len());
    let meta_train_domains: Vec<usize> = (0..domains.len()).filter(|&d| d != meta_test_domain).collect();
    let train_batches = meta_train_domains
        .iter()
        .map(|&d| sample_pk_batch(&domains[d], pk, rng))
        .collect::<Result<Vec<_>>>()?;
    let test_batch = sample_pk_batch(&domains[meta_test_domain], pk, rng)?;
    Ok(MetaEpisode {
        meta_test_domain,
        meta_train_domains,
        train_batches,
        test_batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            n_domains: 3,
            ids_per_domain: 50,
            samples_per_id: 6,
            input_dim: 8,
            signal_dims: 4,
            nuisance_dims: 2,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn nuisance_lives_outside_the_signal_block() {
        let specs = small_config().specs().unwrap();
        for spec in &specs {
            assert!(spec.centers.slice(ndarray::s![.., 4..]).iter().all(|&v| v == 0.0));
            assert!(spec.nuisance_scales.slice(ndarray::s![..4]).iter().all(|&v| v == 0.0));
            assert_eq!(spec.nuisance_scales.iter().filter(|&&v| v == 1.5).count(), 2);
        }
        let bad = SyntheticConfig {
            nuisance_dims: 5,
            ..small_config()
        };
        assert!(bad.specs().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = small_config().generate().unwrap();
        let b = small_config().generate().unwrap();
        assert_eq!(a.len(), 3);
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        write_columnar(&a, &mut bytes_a).unwrap();
        write_columnar(&b, &mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        for ds in &a {
            assert_eq!(ds.n_identities, 50);
        }
    }

    #[test]
    fn zero_noise_collapses_identities() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            nuisance: 0.0,
            ..small_config()
        };
        for ds in cfg.generate().unwrap() {
            for k in 0..ds.n_identities {
                let m = ds.members(k);
                for &i in &m[1..] {
                    let diff = &ds.features.row(i) - &ds.features.row(m[0]);
                    assert_eq!(diff.iter().map(|x| x * x).sum::<f64>(), 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut specs = small_config().specs().unwrap();
        specs[1].samples_per_identity = 1;
        assert!(generate_domains(&specs).is_err());
        let mut specs = small_config().specs().unwrap();
        specs[0].centers = specs[0].centers.slice(ndarray::s![0..1, ..]).to_owned();
        assert!(generate_domains(&specs).is_err());
        let specs = small_config().specs().unwrap();
        assert!(generate_domains(&specs[..2]).is_err());
    }

    #[test]
    fn domains_get_distinct_transforms() {
        let specs = small_config().specs().unwrap();
        assert_ne!(specs[0].transform, specs[1].transform);
        assert_ne!(specs[1].transform, specs[2].transform);
    }

    #[test]
    fn columnar_round_trip() {
        let data = small_config().generate().unwrap();
        let mut bytes = Vec::new();
        write_columnar(&data, &mut bytes).unwrap();
        let back = read_columnar(bytes.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn pk_batch_shapes() {
        let data = small_config().generate().unwrap();
        let mut rng = rng::stream(1, rng::EPISODES);
        let batch = sample_pk_batch(&data[0], PkConfig { p: 4, k: 4 }, &mut rng).unwrap();
        assert_eq!(batch.len(), 16);
        let mut counts = BTreeMap::new();
        for &l in &batch.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 4));

        let batch = sample_pk_batch(&data[0], PkConfig { p: 16, k: 4 }, &mut rng).unwrap();
        assert_eq!(batch.len(), 64);

        let batch = sample_pk_batch(&data[0], PkConfig { p: 1, k: 2 }, &mut rng).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.labels, vec![batch.labels[0]; 2]);
    }

    #[test]
    fn pk_with_replacement_when_identity_is_small() {
        let data = small_config().generate().unwrap();
        let mut rng = rng::stream(2, rng::EPISODES);
        let batch = sample_pk_batch(&data[0], PkConfig { p: 3, k: 10 }, &mut rng).unwrap();
        assert_eq!(batch.len(), 30);
        for (&i, &l) in batch.indices.iter().zip(&batch.labels) {
            assert_eq!(data[0].labels[i], l);
        }
    }

    #[test]
    fn pk_rejects_too_many_identities() {
        let data = small_config().generate().unwrap();
        let mut rng = rng::stream(3, rng::EPISODES);
        assert!(sample_pk_batch(&data[0], PkConfig { p: 51, k: 2 }, &mut rng).is_err());
    }

    #[test]
    fn episode_partitions_sources() {
        let data = small_config().generate().unwrap();
        let mut rng = rng::stream(4, rng::EPISODES);
        for _ in 0..50 {
            let ep = split_episode(&data, PkConfig { p: 4, k: 2 }, &mut rng).unwrap();
            assert_eq!(ep.meta_train_domains.len(), 2);
            assert!(!ep.meta_train_domains.contains(&ep.meta_test_domain));
            let mut all: Vec<usize> = ep.meta_train_domains.clone();
            all.push(ep.meta_test_domain);
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2]);
            assert_eq!(ep.train_batches.len(), 2);
            assert_eq!(ep.test_batch.len(), 8);
        }
        let ep = split_episode(&data[..2], PkConfig { p: 4, k: 2 }, &mut rng).unwrap();
        assert_eq!(ep.meta_train_domains.len(), 1);
        assert!(split_episode(&data[..1], PkConfig { p: 4, k: 2 }, &mut rng).is_err());
    }

    #[test]
    fn meta_test_choice_is_uniform() {
        // Chi-squared goodness of fit against 1/3 each, df = 2.
        let data = small_config().generate().unwrap();
        let mut rng = rng::stream(5, rng::EPISODES);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            counts[split_episode(&data, PkConfig { p: 2, k: 2 }, &mut rng)
                .unwrap()
                .meta_test_domain] += 1;
        }
        let expected = draws as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-squared with 2 dof.
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts = {counts:?}");
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn split_keeps_identities_disjoint() {
        let data = small_config().generate().unwrap();
        let split = split_domain(&data[0], 0.5).unwrap();
        assert_eq!(split.train.n_identities, 25);
        assert_eq!(split.query.labels.len(), 25);
        assert_eq!(split.gallery.labels.len(), 25 * 5);
        for q in &split.query.labels {
            assert!(split.gallery.labels.contains(q));
        }
    }
}
