//! Per-domain identity memory: a non-parametric classifier whose slots are
//! unit-norm identity centroids, refreshed by momentum rather than by the
//! optimizer.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView2};

use crate::autodiff::{Graph, Var};
use crate::encoder::{self, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::losses;
use crate::synthdata::DomainDataset;

pub const DEFAULT_MOMENTUM: f64 = 0.2;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
const GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityMemory {
    pub domain_id: usize,
    /// `n_identities x embed_dim`, unit rows.
    pub centroids: Array2<f64>,
    pub momentum: f64,
    pub temperature: f64,
}

impl IdentityMemory {
    /// Slot `k` is the normalized mean of the rows of `embeddings` labeled `k`.
    pub fn from_embeddings(
        domain_id: usize,
        embeddings: ArrayView2<f64>,
        labels: &[usize],
        n_identities: usize,
        momentum: f64,
        temperature: f64,
    ) -> Result<Self> {
        check_hyper(momentum, temperature)?;
        let d = embeddings.ncols();
        let mut sums = Array2::<f64>::zeros((n_identities, d));
        let mut counts = vec![0usize; n_identities];
        for (row, &label) in embeddings.rows().into_iter().zip(labels) {
            if label >= n_identities {
                return Err(Error::LabelOutOfRange { label, n_identities });
            }
            let mut slot = sums.row_mut(label);
            slot += &row;
            counts[label] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Dataset(format!(
                "identity {k} of domain {domain_id} has no samples to initialize its slot"
            )));
        }
        for (k, mut slot) in sums.rows_mut().into_iter().enumerate() {
            slot /= counts[k] as f64;
            let mean = slot.to_owned();
            slot.assign(&unit(mean, domain_id, k));
        }
        Ok(Self {
            domain_id,
            centroids: sums,
            momentum,
            temperature,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.centroids.nrows()
    }

    /// `M[k] <- m M[k] + (1 - m) mean(batch_k)`, renormalized, for every
    /// identity present in the batch. Inputs are plain values, so nothing
    /// here is differentiated.
    pub fn update(&mut self, embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        let n = self.n_slots();
        let d = self.centroids.ncols();
        if embeddings.ncols() != d {
            return Err(Error::Shape(format!(
                "memory holds {d}-d centroids, batch has {}-d embeddings",
                embeddings.ncols()
            )));
        }
        let mut sums = Array2::<f64>::zeros((n, d));
        let mut counts = vec![0usize; n];
        for (row, &label) in embeddings.rows().into_iter().zip(labels) {
            if label >= n {
                return Err(Error::LabelOutOfRange { label, n_identities: n });
            }
            let mut slot = sums.row_mut(label);
            slot += &row;
            counts[label] += 1;
        }
        for k in (0..n).filter(|&k| counts[k] > 0) {
            let batch_mean = sums.row(k).to_owned() / counts[k] as f64;
            let blended = &self.centroids.row(k) * self.momentum + batch_mean * (1.0 - self.momentum);
            let normalized = unit(blended, self.domain_id, k);
            self.centroids.row_mut(k).assign(&normalized);
        }
        Ok(())
    }

    /// Mean over the batch of `-log softmax(M f / tau)[label]`.
    ///
    /// `embeddings` must already be unit-norm rows. Centroids enter as
    /// constants.
    pub fn id_loss(&self, g: &mut Graph, embeddings: Var, labels: &[usize]) -> Result<Var> {
        check_hyper(self.momentum, self.temperature)?;
        let n = self.n_slots();
        if let Some(&label) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange { label, n_identities: n });
        }
        let (rows, d) = g.shape(embeddings);
        if rows != labels.len() || d != self.centroids.ncols() {
            return Err(Error::Shape(format!(
                "embeddings {rows}x{d} vs {} labels and {}-d memory",
                labels.len(),
                self.centroids.ncols()
            )));
        }
        let mt = g.constant(self.centroids.t().to_owned());
        let sims = g.matmul(embeddings, mt);
        let logits = g.scale(sims, 1.0 / self.temperature);
        Ok(losses::cross_entropy(g, logits, Rc::new(labels.to_vec())))
    }

    /// Loss of a single embedding, as a plain number.
    pub fn sample_loss(&self, embedding: &Array1<f64>, label: usize) -> Result<f64> {
        let mut g = Graph::new();
        let e = g.constant(embedding.clone().insert_axis(ndarray::Axis(0)));
        let loss = self.id_loss(&mut g, e, &[label])?;
        Ok(g.scalar_value(loss))
    }
}

fn check_hyper(momentum: f64, temperature: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("memory momentum {momentum} outside [0, 1]")));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "memory temperature {temperature} must be positive"
        )));
    }
    Ok(())
}

fn unit(v: Array1<f64>, domain_id: usize, slot: usize) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm < 1e-9 {
        log::warn!("memory slot {slot} of domain {domain_id} has a near-zero mean; normalizing with a guard");
        return v / (norm + GUARD);
    }
    v / norm
}

/// Builds a domain's memory from eval-mode embeddings of all its samples.
pub fn init_memory(
    dataset: &DomainDataset,
    params: &EncoderParams,
    momentum: f64,
    temperature: f64,
) -> Result<IdentityMemory> {
    let raw = encoder::embed(params, &dataset.features, Mode::Eval)?;
    let normalized = encoder::l2_normalize_rows(&raw);
    IdentityMemory::from_embeddings(
        dataset.domain_id,
        normalized.view(),
        &dataset.labels,
        dataset.n_identities,
        momentum,
        temperature,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn memory(centroids: Array2<f64>, momentum: f64) -> IdentityMemory {
        IdentityMemory {
            domain_id: 0,
            centroids,
            momentum,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    #[test]
    fn single_sample_slot_is_its_normalized_embedding() {
        let e = array![[3.0, 4.0], [0.0, 2.0], [0.0, 1.0]];
        let mem = IdentityMemory::from_embeddings(0, e.view(), &[0, 1, 1], 2, 0.2, 0.05).unwrap();
        assert!((mem.centroids[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((mem.centroids[[0, 1]] - 0.8).abs() < 1e-12);
        assert!((mem.centroids[[1, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_embeddings_hit_the_guard() {
        let e = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let mem = IdentityMemory::from_embeddings(0, e.view(), &[0, 0, 1, 1], 2, 0.2, 0.05).unwrap();
        assert!(mem.centroids.row(0).iter().all(|v| v.is_finite() && v.abs() < 1e-9));
    }

    #[test]
    fn empty_identity_is_an_error() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(IdentityMemory::from_embeddings(0, e.view(), &[0, 0], 2, 0.2, 0.05).is_err());
    }

    #[test]
    fn momentum_endpoints() {
        let start = array![[1.0, 0.0], [0.0, 1.0]];
        let batch = array![[0.6, 0.8], [0.8, 0.6]];
        let mut frozen = memory(start.clone(), 1.0);
        frozen.update(batch.view(), &[0, 0]).unwrap();
        assert_eq!(frozen.centroids, start);

        let mut replace = memory(start.clone(), 0.0);
        replace.update(batch.view(), &[0, 0]).unwrap();
        let s = 0.7 / (0.7f64 * 0.7 * 2.0).sqrt();
        assert!((replace.centroids[[0, 0]] - s).abs() < 1e-12);
        assert!((replace.centroids[[0, 1]] - s).abs() < 1e-12);
        assert_eq!(replace.centroids.row(1), start.row(1));
    }

    #[test]
    fn worked_update() {
        let mut mem = memory(array![[1.0, 0.0], [0.0, 1.0]], 0.2);
        mem.update(array![[0.0, 1.0]].view(), &[0]).unwrap();
        // pre-norm (0.2, 0.8)
        let n = (0.2f64 * 0.2 + 0.8 * 0.8).sqrt();
        assert!((mem.centroids[[0, 0]] - 0.2 / n).abs() < 1e-12);
        assert!((mem.centroids[[0, 0]] - 0.2425).abs() < 1e-4);
        assert!((mem.centroids[[0, 1]] - 0.9701).abs() < 1e-4);
    }

    #[test]
    fn update_rejects_bad_label() {
        let mut mem = memory(array![[1.0, 0.0]], 0.2);
        assert!(matches!(
            mem.update(array![[0.0, 1.0]].view(), &[3]),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn single_class_loss_is_zero() {
        let mem = memory(array![[0.6, 0.8]], 0.2);
        assert_eq!(mem.sample_loss(&array![1.0, 0.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn equidistant_loss_is_log_n() {
        let mem = memory(Array2::eye(4), 0.2);
        let e = array![0.5, 0.5, 0.5, 0.5];
        assert!((mem.sample_loss(&e, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_two_class_loss() {
        let mem = memory(array![[1.0, 0.0], [0.0, 1.0]], 0.2);
        let loss = mem.sample_loss(&array![1.0, 0.0], 0).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-14);
        assert!((loss - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn bad_temperature_is_rejected() {
        let mut mem = memory(Array2::eye(2), 0.2);
        mem.temperature = 0.0;
        assert!(mem.sample_loss(&array![1.0, 0.0], 0).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mem = memory(
            encoder::l2_normalize_rows(&array![[1.0, 0.2, -0.3], [0.1, 1.0, 0.4], [-0.5, 0.3, 1.0]]),
            0.2,
        );
        let e0 = encoder::l2_normalize_rows(&array![[0.3, 0.9, 0.1], [0.8, -0.2, 0.5]]);
        let labels = [0usize, 2];
        let f = |e: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.constant(e.clone());
            let l = mem.id_loss(&mut g, v, &labels).unwrap();
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let v = g.param(e0.clone());
        let l = mem.id_loss(&mut g, v, &labels).unwrap();
        let grad = g.grad(l, &[v])[0];
        let analytic = g.value(grad).clone();
        for i in 0..e0.len() {
            let mut p = e0.clone();
            let mut m = e0.clone();
            p.as_slice_mut().unwrap()[i] += 1e-6;
            m.as_slice_mut().unwrap()[i] -= 1e-6;
            let numeric = (f(&p) - f(&m)) / 2e-6;
            let a = analytic.as_slice().unwrap()[i];
            assert!((a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()).max(1e-8));
        }
    }
}
