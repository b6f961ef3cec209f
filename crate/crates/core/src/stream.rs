//! Continuous-batch streaming: partition an instance dataset into a training
//! stream under one of three regimes and sample tuples from the current
//! batch only.
//!
//! The continual-learning constraint lives here: a [`BatchView`] owns copies
//! of exactly one batch's samples, so tuple sampling cannot reach history.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{NceTuple, Triplet};
use crate::model::EmbeddingNet;
use crate::tensor::Tensor;

/// Candidate pool size for batch-hard negative mining.
pub const HARD_MINING_POOL: usize = 32;

/// One labelled image: (image, instance-id, view-id).
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub instance: u32,
    pub view: u32,
}

/// Instance-labelled dataset with at least two samples per instance.
#[derive(Debug, Clone)]
pub struct InstanceDataset {
    samples: Vec<Sample>,
    instance_ids: Vec<u32>,
}

impl InstanceDataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut views: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        let mut order: Vec<u32> = Vec::new();
        for s in &samples {
            let c = counts.entry(s.instance).or_insert(0);
            if *c == 0 {
                order.push(s.instance);
            }
            *c += 1;
            if !views.entry(s.instance).or_default().insert(s.view) {
                return Err(Error::Config(format!(
                    "instance {} has duplicate view id {}",
                    s.instance, s.view
                )));
            }
        }
        if samples.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        for (id, c) in &counts {
            if *c < 2 {
                return Err(Error::Config(format!(
                    "instance {id} has {c} sample(s); need >= 2 for a positive pair"
                )));
            }
        }
        Ok(InstanceDataset { samples, instance_ids: order })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Instance ids in order of first appearance.
    pub fn instance_ids(&self) -> &[u32] {
        &self.instance_ids
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ids.len()
    }

    /// New dataset containing only the given instances.
    pub fn subset_by_instances(&self, keep: &BTreeSet<u32>) -> Result<InstanceDataset> {
        let samples: Vec<Sample> =
            self.samples.iter().filter(|s| keep.contains(&s.instance)).cloned().collect();
        InstanceDataset::new(samples)
    }
}

/// How samples arrive over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamRegime {
    /// Instance composition of each batch is unconstrained.
    Random,
    /// Every batch holds the same per-instance sample count.
    Balanced,
    /// Batches are instance-disjoint; each instance appears in one batch.
    Incremental,
}

/// One time-step's training set, stored as indices into the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuousBatch {
    pub index: usize,
    pub sample_indices: Vec<usize>,
    pub instance_ids: Vec<u32>,
}

/// A full partition of the training samples into continuous batches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamPlan {
    pub regime: StreamRegime,
    pub num_batches: usize,
    pub seed: u64,
    pub batches: Vec<ContinuousBatch>,
}

fn batch_from_indices(ds: &InstanceDataset, index: usize, mut indices: Vec<usize>) -> ContinuousBatch {
    indices.sort_unstable();
    let mut ids: BTreeSet<u32> = BTreeSet::new();
    for &i in &indices {
        ids.insert(ds.samples()[i].instance);
    }
    ContinuousBatch { index, sample_indices: indices, instance_ids: ids.into_iter().collect() }
}

/// Near-equal chunk sizes: the first `len % parts` chunks get one extra.
fn chunk_sizes(len: usize, parts: usize) -> Vec<usize> {
    let base = len / parts;
    let extra = len % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Uniform random partition into `b` near-equal batches.
pub fn split_random(ds: &InstanceDataset, b: usize, seed: u64) -> Result<StreamPlan> {
    if b == 0 || b > ds.len() {
        return Err(Error::Config(format!(
            "random split needs 1 <= B <= {} samples, got B = {b}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(b);
    let mut cursor = 0;
    for (t, size) in chunk_sizes(ds.len(), b).into_iter().enumerate() {
        batches.push(batch_from_indices(ds, t, order[cursor..cursor + size].to_vec()));
        cursor += size;
    }
    Ok(StreamPlan { regime: StreamRegime::Random, num_batches: b, seed, batches })
}

/// Partition where every batch holds count(i)/B samples of every instance i.
pub fn split_balanced(ds: &InstanceDataset, b: usize, seed: u64) -> Result<StreamPlan> {
    if b == 0 {
        return Err(Error::Config("balanced split needs B >= 1".into()));
    }
    let mut per_instance: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples().iter().enumerate() {
        per_instance.entry(s.instance).or_default().push(i);
    }
    for (id, idxs) in &per_instance {
        if idxs.len() % b != 0 {
            return Err(Error::Config(format!(
                "instance {id} has {} samples, not divisible by B = {b}",
                idxs.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); b];
    for idxs in per_instance.values() {
        let mut shuffled = idxs.clone();
        shuffled.shuffle(&mut rng);
        let per = idxs.len() / b;
        for (t, chunk) in shuffled.chunks(per).enumerate() {
            buckets[t].extend_from_slice(chunk);
        }
    }
    let batches = buckets
        .into_iter()
        .enumerate()
        .map(|(t, idxs)| batch_from_indices(ds, t, idxs))
        .collect();
    Ok(StreamPlan { regime: StreamRegime::Balanced, num_batches: b, seed, batches })
}

/// Instance-disjoint partition: each batch holds all samples of its group.
pub fn split_incremental(ds: &InstanceDataset, b: usize, seed: u64) -> Result<StreamPlan> {
    if b == 0 || b > ds.instance_count() {
        return Err(Error::Config(format!(
            "incremental split needs 1 <= B <= {} instances, got B = {b}",
            ds.instance_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = ds.instance_ids().to_vec();
    ids.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(b);
    let mut cursor = 0;
    for (t, size) in chunk_sizes(ids.len(), b).into_iter().enumerate() {
        let group: BTreeSet<u32> = ids[cursor..cursor + size].iter().copied().collect();
        cursor += size;
        let idxs: Vec<usize> = ds
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| group.contains(&s.instance))
            .map(|(i, _)| i)
            .collect();
        batches.push(batch_from_indices(ds, t, idxs));
    }
    Ok(StreamPlan { regime: StreamRegime::Incremental, num_batches: b, seed, batches })
}

/// Build a plan under the given regime.
pub fn split(ds: &InstanceDataset, regime: StreamRegime, b: usize, seed: u64) -> Result<StreamPlan> {
    match regime {
        StreamRegime::Random => split_random(ds, b, seed),
        StreamRegime::Balanced => split_balanced(ds, b, seed),
        StreamRegime::Incremental => split_incremental(ds, b, seed),
    }
}

/// Negative selection mode for triplet sampling.
#[derive(Clone, Copy)]
pub enum Mining<'a> {
    Random,
    /// Pick, per anchor, the candidate negative closest in embedding space
    /// under the given network (pool capped at [`HARD_MINING_POOL`]).
    BatchHard(&'a EmbeddingNet),
}

/// Owned view of one continuous batch; the only sampling surface the
/// training loop sees.
pub struct BatchView {
    batch_index: usize,
    samples: Vec<Sample>,
    /// Dataset indices this view was built from, for audit purposes.
    source_indices: Vec<usize>,
}

impl BatchView {
    pub fn from_plan(ds: &InstanceDataset, batch: &ContinuousBatch) -> Result<Self> {
        Self::from_indices(ds, batch.index, &batch.sample_indices)
    }

    /// View over explicit dataset indices (used for cumulative unions).
    pub fn from_indices(ds: &InstanceDataset, batch_index: usize, indices: &[usize]) -> Result<Self> {
        let mut samples = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = ds
                .samples()
                .get(i)
                .ok_or_else(|| Error::Contract(format!("batch references sample {i} out of range")))?;
            samples.push(s.clone());
        }
        Ok(BatchView { batch_index, samples, source_indices: indices.to_vec() })
    }

    pub fn batch_index(&self) -> usize {
        self.batch_index
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    fn instance_groups(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.instance).or_default().push(i);
        }
        groups
    }

    fn starve(&self, reason: &str) -> Error {
        Error::StreamStarvation { batch_index: self.batch_index, reason: reason.to_string() }
    }

    /// Pick an anchor/positive pair and the pool of other-instance samples.
    fn pick_anchor(
        &self,
        groups: &BTreeMap<u32, Vec<usize>>,
        eligible: &[u32],
        rng: &mut ChaCha8Rng,
    ) -> (usize, usize, Vec<usize>) {
        let inst = eligible[rng.gen_range(0..eligible.len())];
        let members = &groups[&inst];
        let a = members[rng.gen_range(0..members.len())];
        let p = loop {
            let c = members[rng.gen_range(0..members.len())];
            if c != a {
                break c;
            }
        };
        let others: Vec<usize> = self
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.instance != inst)
            .map(|(i, _)| i)
            .collect();
        (a, p, others)
    }

    fn check_tuple_preconditions(&self, groups: &BTreeMap<u32, Vec<usize>>) -> Result<Vec<u32>> {
        if groups.len() < 2 {
            return Err(self.starve("batch contains a single instance; no negatives exist"));
        }
        let eligible: Vec<u32> =
            groups.iter().filter(|(_, v)| v.len() >= 2).map(|(&id, _)| id).collect();
        if eligible.is_empty() {
            return Err(self.starve("no instance has two samples; no positive pair exists"));
        }
        Ok(eligible)
    }

    /// Sample `n` triplets from this batch only.
    pub fn sample_triplets(&self, n: usize, seed: u64, mining: Mining) -> Result<Vec<Triplet>> {
        let groups = self.instance_groups();
        let eligible = self.check_tuple_preconditions(&groups)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, p, others) = self.pick_anchor(&groups, &eligible, &mut rng);
            let neg = match mining {
                Mining::Random => others[rng.gen_range(0..others.len())],
                Mining::BatchHard(net) => {
                    let pool_size = others.len().min(HARD_MINING_POOL);
                    let pool = rand::seq::index::sample(&mut rng, others.len(), pool_size);
                    let e_a = net.embed(&self.samples[a].image)?;
                    let mut best = others[pool.index(0)];
                    let mut best_d = f64::INFINITY;
                    for k in 0..pool_size {
                        let cand = others[pool.index(k)];
                        let e_n = net.embed(&self.samples[cand].image)?;
                        let d: f64 = e_a
                            .data()
                            .iter()
                            .zip(e_n.data())
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        if d < best_d {
                            best_d = d;
                            best = cand;
                        }
                    }
                    best
                }
            };
            out.push(Triplet::new(
                self.samples[a].image.clone(),
                self.samples[p].image.clone(),
                self.samples[neg].image.clone(),
                self.samples[a].instance,
                self.samples[neg].instance,
            )?);
        }
        Ok(out)
    }

    /// Sample `n` NCE tuples with K negatives each from this batch only.
    ///
    /// Negatives are drawn without replacement; when fewer than K exist the
    /// tuple falls back to replacement and is flagged.
    pub fn sample_nce_tuples(&self, n: usize, k: usize, seed: u64) -> Result<Vec<NceTuple>> {
        if k == 0 {
            return Err(Error::Config("NCE sampling requires K >= 1".into()));
        }
        let groups = self.instance_groups();
        let eligible = self.check_tuple_preconditions(&groups)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, p, others) = self.pick_anchor(&groups, &eligible, &mut rng);
            let (negs, with_replacement) = if others.len() >= k {
                let picks = rand::seq::index::sample(&mut rng, others.len(), k);
                ((0..k).map(|i| others[picks.index(i)]).collect::<Vec<_>>(), false)
            } else {
                ((0..k).map(|_| others[rng.gen_range(0..others.len())]).collect(), true)
            };
            out.push(NceTuple::new(
                self.samples[a].image.clone(),
                self.samples[p].image.clone(),
                negs.iter().map(|&i| self.samples[i].image.clone()).collect(),
                self.samples[a].instance,
                negs.iter().map(|&i| self.samples[i].instance).collect(),
                with_replacement,
            )?);
        }
        Ok(out)
    }
}

impl StreamPlan {
    /// Check the partition property: batches are disjoint and cover the
    /// dataset exactly.
    pub fn is_partition(&self, ds: &InstanceDataset) -> bool {
        let mut seen = vec![false; ds.len()];
        let mut total = 0;
        for b in &self.batches {
            for &i in &b.sample_indices {
                if i >= ds.len() || seen[i] {
                    return false;
                }
                seen[i] = true;
                total += 1;
            }
        }
        total == ds.len()
    }

    /// Check instance-disjointness across batches (the incremental invariant).
    pub fn instances_disjoint(&self) -> bool {
        let mut seen: BTreeSet<u32> = BTreeSet::new();
        for b in &self.batches {
            for &id in &b.instance_ids {
                if !seen.insert(id) {
                    return false;
                }
            }
        }
        true
    }

    /// Check the balanced invariant: per-batch per-instance counts constant.
    pub fn is_balanced(&self, ds: &InstanceDataset) -> bool {
        let mut expected: Option<BTreeMap<u32, usize>> = None;
        for b in &self.batches {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for &i in &b.sample_indices {
                *counts.entry(ds.samples()[i].instance).or_insert(0) += 1;
            }
            match &expected {
                None => expected = Some(counts),
                Some(e) => {
                    if *e != counts {
                        return false;
                    }
                }
            }
        }
        true
    }
}
