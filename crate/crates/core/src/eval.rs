//! Query-gallery retrieval evaluation under the Full Test Set protocol:
//! non-interpolated average precision, mAP, and the Forget ratio against a
//! cumulative reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingNet;
use crate::tensor::Tensor;

/// Fixed evaluation split: probe images and the pool they are matched against.
#[derive(Debug, Clone)]
pub struct RetrievalSplit {
    queries: Vec<(Tensor, u32)>,
    gallery: Vec<(Tensor, u32)>,
}

impl RetrievalSplit {
    /// Validates that every query instance has at least one gallery match.
    pub fn new(queries: Vec<(Tensor, u32)>, gallery: Vec<(Tensor, u32)>) -> Result<Self> {
        if queries.is_empty() || gallery.is_empty() {
            return Err(Error::Protocol("retrieval split needs queries and a gallery".into()));
        }
        for (i, (_, inst)) in queries.iter().enumerate() {
            if !gallery.iter().any(|(_, g)| g == inst) {
                return Err(Error::Protocol(format!(
                    "query {i} (instance {inst}) has no gallery match"
                )));
            }
        }
        Ok(RetrievalSplit { queries, gallery })
    }

    pub fn queries(&self) -> &[(Tensor, u32)] {
        &self.queries
    }

    pub fn gallery(&self) -> &[(Tensor, u32)] {
        &self.gallery
    }

    /// Instance ids appearing anywhere in the split.
    pub fn instance_ids(&self) -> std::collections::BTreeSet<u32> {
        self.queries.iter().chain(self.gallery.iter()).map(|&(_, id)| id).collect()
    }
}

/// Non-interpolated average precision over a ranked relevance list.
///
/// `ranking` is ordered by ascending distance (ties already broken by
/// gallery index); AP = (1/num_relevant) * sum of precision@k at each
/// relevant rank k.
pub fn average_precision(ranking: &[bool], num_relevant: usize) -> Result<f64> {
    if num_relevant == 0 {
        return Err(Error::Protocol("average_precision with zero relevant items".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranking.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / num_relevant as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// mAP (percent) over explicit embeddings.
///
/// Gallery items are ranked per query by ascending Euclidean distance with
/// ties broken by gallery index.
pub fn map_from_embeddings(
    queries: &[(Vec<f64>, u32)],
    gallery: &[(Vec<f64>, u32)],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Protocol("mAP over zero queries".into()));
    }
    let mut total = 0.0;
    for (qi, (qe, q_inst)) in queries.iter().enumerate() {
        let num_relevant = gallery.iter().filter(|(_, g)| g == q_inst).count();
        if num_relevant == 0 {
            return Err(Error::Protocol(format!(
                "query {qi} (instance {q_inst}) has no relevant gallery item"
            )));
        }
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        let dists: Vec<f64> = gallery.iter().map(|(ge, _)| euclidean(qe, ge)).collect();
        order.sort_by(|&i, &j| dists[i].partial_cmp(&dists[j]).unwrap().then(i.cmp(&j)));
        let ranking: Vec<bool> = order.iter().map(|&i| gallery[i].1 == *q_inst).collect();
        total += average_precision(&ranking, num_relevant)?;
    }
    Ok(100.0 * total / queries.len() as f64)
}

/// Embed the split with a frozen network and compute mAP (percent).
pub fn mean_average_precision(net: &EmbeddingNet, split: &RetrievalSplit) -> Result<f64> {
    let embed_all = |items: &[(Tensor, u32)]| -> Result<Vec<(Vec<f64>, u32)>> {
        items
            .iter()
            .map(|(img, inst)| Ok((net.embed(img)?.data().to_vec(), *inst)))
            .collect()
    };
    map_from_embeddings(&embed_all(&split.queries)?, &embed_all(&split.gallery)?)
}

/// Relative mAP drop against the cumulative reference, in percent.
pub fn forget_ratio(ref_map: f64, map: f64) -> Result<f64> {
    if !(ref_map.is_finite() && ref_map > 0.0) {
        return Err(Error::Protocol(format!(
            "forget_ratio requires reference mAP > 0, got {ref_map}"
        )));
    }
    Ok(100.0 * (ref_map - map) / ref_map)
}

/// One evaluation row: (strategy, batch index, mAP, reference, Forget).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub strategy: String,
    pub loss_family: String,
    pub batch_index: usize,
    pub map_pct: f64,
    /// Cumulative-reference mAP at the same step, when known.
    pub ref_pct: Option<f64>,
    pub forget_pct: Option<f64>,
}

impl MetricsRecord {
    /// Fill reference and forget columns from a cumulative mAP curve.
    pub fn with_reference(mut self, ref_curve: &[f64]) -> Result<Self> {
        let r = *ref_curve.get(self.batch_index).ok_or_else(|| {
            Error::Protocol(format!(
                "reference curve has no entry for batch {}",
                self.batch_index
            ))
        })?;
        self.ref_pct = Some(r);
        self.forget_pct = Some(forget_ratio(r, self.map_pct)?);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn average_precision_hand_cases() {
        assert_eq!(average_precision(&[true, true, false], 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, true, false, true], 2).unwrap(), 0.5);
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!(matches!(average_precision(&[true], 0), Err(Error::Protocol(_))));
    }

    #[test]
    fn forget_ratio_reproduces_published_rows() {
        // ResNet rows: (Ref, mAP) -> Forget
        let cases = [
            (70.82, 50.01, 29.38),
            (94.99, 83.77, 11.81),
            (54.41, 38.60, 29.06),
        ];
        for (r, m, f) in cases {
            assert!((forget_ratio(r, m).unwrap() - f).abs() < 0.01);
        }
        assert_eq!(forget_ratio(70.0, 70.0).unwrap(), 0.0);
        assert!(matches!(forget_ratio(0.0, 1.0), Err(Error::Protocol(_))));
    }

    fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    #[test]
    fn perfect_ranking_gives_100() {
        // queries sit exactly on their instance's gallery cluster
        let e0 = vec![1.0, 0.0];
        let e1 = vec![0.0, 1.0];
        let queries = vec![(e0.clone(), 0), (e1.clone(), 1)];
        let gallery = vec![(e0.clone(), 0), (e0, 0), (e1.clone(), 1), (e1, 1)];
        assert_eq!(map_from_embeddings(&queries, &gallery).unwrap(), 100.0);
    }

    #[test]
    fn random_embeddings_two_instances_hover_near_50() {
        let mut maps = Vec::new();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let queries: Vec<(Vec<f64>, u32)> =
                (0..8).map(|i| (unit_vec(&mut rng, 8), (i % 2) as u32)).collect();
            let gallery: Vec<(Vec<f64>, u32)> =
                (0..20).map(|i| (unit_vec(&mut rng, 8), (i % 2) as u32)).collect();
            maps.push(map_from_embeddings(&queries, &gallery).unwrap());
        }
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        assert!((mean - 50.0).abs() < 10.0, "random-embedding mAP mean {mean}");
    }

    /// Brute-force AP: re-count relevant items among the top-k prefix for
    /// every relevant rank, sharing no code with the implementation.
    fn brute_force_map(queries: &[(Vec<f64>, u32)], gallery: &[(Vec<f64>, u32)]) -> f64 {
        let mut total = 0.0;
        for (qe, qi) in queries {
            let mut items: Vec<(f64, usize)> = gallery
                .iter()
                .enumerate()
                .map(|(i, (ge, _))| {
                    let d = qe
                        .iter()
                        .zip(ge)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    (d, i)
                })
                .collect();
            items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let rel_total = gallery.iter().filter(|(_, g)| g == qi).count();
            let mut ap = 0.0;
            for k in 0..items.len() {
                if gallery[items[k].1].1 == *qi {
                    let prefix_rel =
                        items[..=k].iter().filter(|(_, i)| gallery[*i].1 == *qi).count();
                    ap += prefix_rel as f64 / (k + 1) as f64;
                }
            }
            total += ap / rel_total as f64;
        }
        100.0 * total / queries.len() as f64
    }

    #[test]
    fn map_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(321);
        for _ in 0..10 {
            let nq = rng.gen_range(1..=5);
            let ng = rng.gen_range(4..=20);
            let insts = rng.gen_range(2..=4) as u32;
            let queries: Vec<(Vec<f64>, u32)> =
                (0..nq).map(|i| (unit_vec(&mut rng, 6), i as u32 % insts)).collect();
            let gallery: Vec<(Vec<f64>, u32)> =
                (0..ng).map(|i| (unit_vec(&mut rng, 6), i as u32 % insts)).collect();
            let got = map_from_embeddings(&queries, &gallery).unwrap();
            let want = brute_force_map(&queries, &gallery);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn map_is_invariant_under_query_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut queries: Vec<(Vec<f64>, u32)> =
            (0..6).map(|i| (unit_vec(&mut rng, 4), i as u32 % 3)).collect();
        let gallery: Vec<(Vec<f64>, u32)> =
            (0..12).map(|i| (unit_vec(&mut rng, 4), i as u32 % 3)).collect();
        let base = map_from_embeddings(&queries, &gallery).unwrap();
        queries.reverse();
        let permuted = map_from_embeddings(&queries, &gallery).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn split_validation_requires_matches() {
        let img = Tensor::zeros(&[1, 2, 2]);
        let bad = RetrievalSplit::new(
            vec![(img.clone(), 0)],
            vec![(img.clone(), 1)],
        );
        assert!(matches!(bad, Err(Error::Protocol(_))));
        let ok = RetrievalSplit::new(vec![(img.clone(), 0)], vec![(img, 0)]);
        assert!(ok.is_ok());
    }

    #[test]
    fn metrics_record_reference_fill() {
        let rec = MetricsRecord {
            strategy: "naive".into(),
            loss_family: "triplet".into(),
            batch_index: 1,
            map_pct: 40.0,
            ref_pct: None,
            forget_pct: None,
        };
        let filled = rec.with_reference(&[60.0, 80.0]).unwrap();
        assert_eq!(filled.ref_pct, Some(80.0));
        assert!((filled.forget_pct.unwrap() - 50.0).abs() < 1e-12);
    }
}
