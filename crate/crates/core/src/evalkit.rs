//! Retrieval evaluation: Euclidean ranking, CMC Rank-1 and mAP.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query and gallery embeddings with identities.
#[derive(Clone, Debug)]
pub struct RetrievalSplit {
    pub query: Array2<f64>,
    pub query_ids: Vec<usize>,
    pub gallery: Array2<f64>,
    pub gallery_ids: Vec<usize>,
}

impl RetrievalSplit {
    pub fn new(
        query: Array2<f64>,
        query_ids: Vec<usize>,
        gallery: Array2<f64>,
        gallery_ids: Vec<usize>,
    ) -> Result<Self> {
        if query.nrows() != query_ids.len() || gallery.nrows() != gallery_ids.len() {
            return Err(Error::Eval("one identity per embedding row".into()));
        }
        if query.ncols() != gallery.ncols() {
            return Err(Error::Eval("query and gallery dimensions differ".into()));
        }
        if gallery.nrows() == 0 {
            return Err(Error::Eval("empty gallery".into()));
        }
        if let Some(id) = query_ids.iter().find(|id| !gallery_ids.contains(id)) {
            return Err(Error::Eval(format!("query identity {id} is absent from the gallery")));
        }
        Ok(Self {
            query,
            query_ids,
            gallery,
            gallery_ids,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub n_query: usize,
    pub n_gallery: usize,
}

/// Gallery indices by ascending Euclidean distance; ties keep gallery order.
pub fn rank_gallery(query: ArrayView1<f64>, gallery: ArrayView2<f64>) -> Vec<usize> {
    let dist: Vec<f64> = gallery
        .rows()
        .into_iter()
        .map(|g| {
            g.iter()
                .zip(query.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevant: impl IntoIterator<Item = bool>) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, rel) in relevant.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn ranked_relevance(split: &RetrievalSplit, q: usize) -> Vec<bool> {
    rank_gallery(split.query.row(q), split.gallery.view())
        .into_iter()
        .map(|g| split.gallery_ids[g] == split.query_ids[q])
        .collect()
}

pub fn cmc_rank1(split: &RetrievalSplit) -> f64 {
    let n = split.query_ids.len();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&q| {
            let top = rank_gallery(split.query.row(q), split.gallery.view())[0];
            split.gallery_ids[top] == split.query_ids[q]
        })
        .count();
    hits as f64 / n as f64
}

pub fn mean_ap(split: &RetrievalSplit) -> Result<f64> {
    let n = split.query_ids.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for q in 0..n {
        total += average_precision(ranked_relevance(split, q)).ok_or_else(|| {
            Error::Eval(format!(
                "query identity {} is absent from the gallery",
                split.query_ids[q]
            ))
        })?;
    }
    Ok(total / n as f64)
}

pub fn evaluate(split: &RetrievalSplit) -> Result<RetrievalReport> {
    let mut map = 0.0;
    let mut hits = 0usize;
    let n = split.query_ids.len();
    for q in 0..n {
        let rel = ranked_relevance(split, q);
        if rel[0] {
            hits += 1;
        }
        map += average_precision(rel).ok_or_else(|| {
            Error::Eval(format!(
                "query identity {} is absent from the gallery",
                split.query_ids[q]
            ))
        })?;
    }
    let denom = n.max(1) as f64;
    Ok(RetrievalReport {
        map: map / denom,
        rank1: hits as f64 / denom,
        n_query: n,
        n_gallery: split.gallery_ids.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ranking_basics() {
        let g = array![[1.0, 1.0]];
        assert_eq!(rank_gallery(array![0.0, 0.0].view(), g.view()), vec![0]);
        let g = array![[5.0, 0.0], [1.0, 2.0], [0.0, 0.0]];
        assert_eq!(rank_gallery(array![1.0, 2.0].view(), g.view())[0], 1);
        // Equal distances keep gallery order.
        let g = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        assert_eq!(rank_gallery(array![0.0, 0.0].view(), g.view()), vec![0, 1, 2]);
    }

    #[test]
    fn ap_closed_forms() {
        let ap = average_precision([true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision([true, true, false, false]), Some(1.0));
        for k in 1..6 {
            let rel = (1..=6).map(|r| r == k);
            assert!((average_precision(rel).unwrap() - 1.0 / k as f64).abs() < 1e-15);
        }
        assert_eq!(average_precision([false, false]), None);
    }

    #[test]
    fn rank1_hand_enumerated() {
        // Gallery on a line; queries 0 and 1 land next to their identity,
        // queries 2 and 3 next to the wrong one.
        let gallery = array![[0.0], [10.0], [20.0], [30.0]];
        let gallery_ids = vec![0, 1, 2, 3];
        let query = array![[0.1], [10.2], [29.0], [1.0]];
        let split = RetrievalSplit::new(query, vec![0, 1, 2, 3], gallery, gallery_ids).unwrap();
        assert_eq!(cmc_rank1(&split), 0.5);
        let report = evaluate(&split).unwrap();
        assert_eq!(report.rank1, 0.5);
        assert_eq!(report.n_query, 4);
    }

    #[test]
    fn perfect_and_hopeless_rank1() {
        let gallery = array![[0.0], [10.0]];
        let ok = RetrievalSplit::new(array![[0.5], [9.5]], vec![0, 1], gallery.clone(), vec![0, 1]).unwrap();
        assert_eq!(cmc_rank1(&ok), 1.0);
        assert_eq!(mean_ap(&ok).unwrap(), 1.0);
        let bad = RetrievalSplit::new(array![[9.5], [0.5]], vec![0, 1], gallery, vec![0, 1]).unwrap();
        assert_eq!(cmc_rank1(&bad), 0.0);
    }

    #[test]
    fn missing_identity_is_rejected() {
        let err = RetrievalSplit::new(array![[0.0]], vec![5], array![[1.0]], vec![0]);
        assert!(err.is_err());
    }
}
