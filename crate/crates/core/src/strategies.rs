//! Continual training over a stream plan: Naive, Fine-Tuning, LFL, LwF, EWC,
//! the Cumulative reference, and the synthetic-transfer variant.
//!
//! The runner owns the continual-learning constraint: exactly one batch's
//! samples are materialised at a time, and only parameter snapshots and
//! Fisher estimates survive a batch boundary. Every RNG stream (tuple
//! sampling, Fisher sampling, LwF re-init, pretraining) is derived
//! independently from the run seed, so disabling a regularizer leaves the
//! remaining streams untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, MetricsRecord, RetrievalSplit};
use crate::losses::{
    estimate_fisher, ewc_penalty, lfl_regularizer, logits_under, lwf_distillation, task_forward,
    FisherDiagonal, LossConfig, TrainingTuple,
};
use crate::model::{
    adam_step, clone_from, init_xavier, AdamState, EmbeddingNet, NetConfig, ParamBinding,
    ParameterSnapshot, DEFAULT_LR,
};
use crate::seeds::derive_seed;
use crate::stream::{BatchView, InstanceDataset, Mining, StreamPlan};
use crate::tensor::{Graph, TensorId};

/// Early-stop rule: stop once the epoch-mean loss improves by less than this
/// for [`CONVERGENCE_PATIENCE`] consecutive epochs.
pub const CONVERGENCE_MIN_IMPROVEMENT: f64 = 1e-4;
pub const CONVERGENCE_PATIENCE: usize = 5;

const TAG_TUPLES: u64 = 0x7475;
const TAG_FISHER: u64 = 0x6669;
const TAG_REINIT: u64 = 0x7265;
const TAG_PRETRAIN: u64 = 0x7072;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Naive,
    Finetune,
    Lfl,
    Lwf,
    Ewc,
    Cumulative,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Finetune => "finetune",
            StrategyKind::Lfl => "lfl",
            StrategyKind::Lwf => "lwf",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Cumulative => "cumulative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Triplet,
    Nce,
}

impl LossFamily {
    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Triplet => "triplet",
            LossFamily::Nce => "nce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMining {
    Random,
    BatchHard,
}

/// Synthetic-transfer settings attached to a strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Parameter-name prefixes to freeze after pretraining (e.g. "conv").
    pub frozen_layers: Vec<String>,
    #[serde(default = "default_transfer_lr")]
    pub transfer_lr: f64,
}

fn default_transfer_lr() -> f64 {
    1e-4
}

/// Full configuration of one strategy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub loss_family: LossFamily,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_epochs")]
    pub epochs_per_batch: usize,
    #[serde(default = "default_tuples")]
    pub tuples_per_epoch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Negatives per NCE tuple.
    #[serde(default = "default_nce_negatives")]
    pub nce_negatives: usize,
    #[serde(default = "default_mining")]
    pub mining: TripletMining,
    /// Tuples drawn for the end-of-batch Fisher estimate (EWC).
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
    /// Sum EWC penalties over all past batches instead of only the latest.
    #[serde(default)]
    pub ewc_accumulate: bool,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
}

fn default_epochs() -> usize {
    50
}

fn default_tuples() -> usize {
    32
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

fn default_nce_negatives() -> usize {
    9
}

fn default_mining() -> TripletMining {
    TripletMining::Random
}

fn default_fisher_samples() -> usize {
    32
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, loss_family: LossFamily) -> Self {
        StrategyConfig {
            kind,
            loss_family,
            loss: LossConfig::default(),
            epochs_per_batch: default_epochs(),
            tuples_per_epoch: default_tuples(),
            lr: default_lr(),
            nce_negatives: default_nce_negatives(),
            mining: default_mining(),
            fisher_samples: default_fisher_samples(),
            ewc_accumulate: false,
            transfer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.kind == StrategyKind::Lwf && self.loss_family == LossFamily::Triplet {
            return Err(Error::Config(
                "LwF distils output probabilities and requires loss_family = nce; \
                 the regression triplet loss provides none"
                    .into(),
            ));
        }
        if self.epochs_per_batch == 0 || self.tuples_per_epoch == 0 {
            return Err(Error::Config("epochs_per_batch and tuples_per_epoch must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.nce_negatives == 0 {
            return Err(Error::Config("nce_negatives must be >= 1".into()));
        }
        if self.fisher_samples == 0 {
            return Err(Error::Config("fisher_samples must be >= 1".into()));
        }
        if let Some(t) = &self.transfer {
            if t.frozen_layers.is_empty() {
                return Err(Error::Config("transfer.frozen_layers must not be empty".into()));
            }
            if !(t.transfer_lr.is_finite() && t.transfer_lr > 0.0 && t.transfer_lr <= self.lr) {
                return Err(Error::Config(format!(
                    "transfer_lr must satisfy 0 < transfer_lr <= lr, got {}",
                    t.transfer_lr
                )));
            }
        }
        Ok(())
    }
}

/// Mutable state carried across continuous batches.
pub struct RunState {
    pub net: EmbeddingNet,
    pub adam: AdamState,
    /// theta_o: parameters frozen at the last batch boundary.
    pub snapshot_prev: Option<ParameterSnapshot>,
    /// Materialised old network for LFL embeddings / LwF logits.
    snapshot_net: Option<EmbeddingNet>,
    pub fisher_prev: Option<FisherDiagonal>,
    /// (theta_o, Fisher) pairs per past batch when ewc_accumulate is set.
    ewc_history: Vec<(ParameterSnapshot, FisherDiagonal)>,
    pub history: Vec<MetricsRecord>,
}

impl RunState {
    fn new(net: EmbeddingNet, lr: f64) -> Self {
        let adam = AdamState::new(&net, lr);
        RunState {
            net,
            adam,
            snapshot_prev: None,
            snapshot_net: None,
            fisher_prev: None,
            ewc_history: Vec::new(),
            history: Vec::new(),
        }
    }
}

/// Which dataset indices the runner touched at each step.
#[derive(Debug, Clone, Default)]
pub struct StreamAudit {
    pub steps: Vec<Vec<usize>>,
}

impl StreamAudit {
    /// True when every step touched only its own batch (or, for cumulative
    /// runs, the union of batches up to the step).
    pub fn is_history_blind(&self, plan: &StreamPlan, cumulative: bool) -> bool {
        use std::collections::BTreeSet;
        let mut allowed: BTreeSet<usize> = BTreeSet::new();
        for (t, step) in self.steps.iter().enumerate() {
            if t >= plan.batches.len() {
                return false;
            }
            if cumulative {
                allowed.extend(plan.batches[t].sample_indices.iter().copied());
            } else {
                allowed = plan.batches[t].sample_indices.iter().copied().collect();
            }
            if !step.iter().all(|i| allowed.contains(i)) {
                return false;
            }
        }
        true
    }
}

/// Observer invoked after every evaluated step with (t, net, adam state).
pub type StepHook<'a> = &'a dyn Fn(usize, &EmbeddingNet, &AdamState) -> Result<()>;

/// One strategy's run over a stream: immutable inputs shared by all steps.
pub struct StreamRun<'a> {
    pub net_config: &'a NetConfig,
    pub strategy: &'a StrategyConfig,
    pub eval_split: &'a RetrievalSplit,
    pub seed: u64,
    /// Cumulative-reference mAP per step; fills the Ref/Forget columns.
    pub reference: Option<&'a [f64]>,
    /// Called after each step, e.g. to write checkpoints.
    pub step_hook: Option<StepHook<'a>>,
}

impl<'a> StreamRun<'a> {
    pub fn new(
        net_config: &'a NetConfig,
        strategy: &'a StrategyConfig,
        eval_split: &'a RetrievalSplit,
        seed: u64,
    ) -> Self {
        StreamRun { net_config, strategy, eval_split, seed, reference: None, step_hook: None }
    }

    pub fn with_reference(mut self, reference: &'a [f64]) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn with_step_hook(mut self, hook: StepHook<'a>) -> Self {
        self.step_hook = Some(hook);
        self
    }
}

impl StreamRun<'_> {
    /// Run the configured strategy over the plan.
    pub fn execute(&self, plan: &StreamPlan, ds: &InstanceDataset) -> Result<Vec<MetricsRecord>> {
        self.execute_audited(plan, ds).map(|(records, _)| records)
    }

    /// Run and report which dataset indices each step touched.
    pub fn execute_audited(
        &self,
        plan: &StreamPlan,
        ds: &InstanceDataset,
    ) -> Result<(Vec<MetricsRecord>, StreamAudit)> {
        self.run(plan, ds, None)
    }

    /// Run starting from an existing network (synthetic transfer entry).
    pub fn execute_from(
        &self,
        net: EmbeddingNet,
        plan: &StreamPlan,
        ds: &InstanceDataset,
    ) -> Result<(Vec<MetricsRecord>, StreamAudit)> {
        self.run(plan, ds, Some(net))
    }

    fn run(
        &self,
        plan: &StreamPlan,
        ds: &InstanceDataset,
        initial: Option<EmbeddingNet>,
    ) -> Result<(Vec<MetricsRecord>, StreamAudit)> {
        self.net_config.validate()?;
        self.strategy.validate()?;
        if plan.batches.is_empty() {
            return Err(Error::Protocol("stream plan has no batches".into()));
        }
        self.check_eval_disjoint(ds)?;
        let mut audit = StreamAudit::default();
        let records = if self.strategy.kind == StrategyKind::Cumulative {
            self.run_cumulative(plan, ds, initial, &mut audit)?
        } else {
            self.run_sequential(plan, ds, initial, &mut audit)?
        };
        Ok((records, audit))
    }

    /// Full Test Set protocol: evaluation instances never appear in training.
    fn check_eval_disjoint(&self, ds: &InstanceDataset) -> Result<()> {
        let eval_ids = self.eval_split.instance_ids();
        for &id in ds.instance_ids() {
            if eval_ids.contains(&id) {
                return Err(Error::Protocol(format!(
                    "instance {id} appears in both the training stream and the eval split"
                )));
            }
        }
        Ok(())
    }

    fn run_sequential(
        &self,
        plan: &StreamPlan,
        ds: &InstanceDataset,
        initial: Option<EmbeddingNet>,
        audit: &mut StreamAudit,
    ) -> Result<Vec<MetricsRecord>> {
        let net = match initial {
            Some(n) => n,
            None => init_xavier(self.net_config, self.seed)?,
        };
        let mut state = RunState::new(net, self.strategy.lr);
        for (t, batch) in plan.batches.iter().enumerate() {
            self.prepare_batch(&mut state, t)?;
            let view = BatchView::from_plan(ds, batch)?;
            audit.steps.push(view.source_indices().to_vec());
            self.train_batch(&mut state, &view, self.strategy.kind, t)?;
            // `view` drops here: batch t's data is gone before t+1 begins.
            drop(view);
            self.record(&mut state, t)?;
            if let Some(hook) = self.step_hook {
                hook(t, &state.net, &state.adam)?;
            }
        }
        Ok(state.history)
    }

    /// The offline reference: retrain from the same initial parameters on
    /// the union of batches 0..=t at every step, with the same epoch budget.
    fn run_cumulative(
        &self,
        plan: &StreamPlan,
        ds: &InstanceDataset,
        initial: Option<EmbeddingNet>,
        audit: &mut StreamAudit,
    ) -> Result<Vec<MetricsRecord>> {
        let base_net = match initial {
            Some(n) => n,
            None => init_xavier(self.net_config, self.seed)?,
        };
        let mut records = Vec::new();
        let mut union: Vec<usize> = Vec::new();
        for (t, batch) in plan.batches.iter().enumerate() {
            union.extend(batch.sample_indices.iter().copied());
            let view = BatchView::from_indices(ds, t, &union)?;
            audit.steps.push(view.source_indices().to_vec());
            let mut state = RunState::new(base_net.clone(), self.strategy.lr);
            self.train_batch(&mut state, &view, StrategyKind::Cumulative, t)?;
            let map = mean_average_precision(&state.net, self.eval_split)?;
            records.push(MetricsRecord {
                strategy: self.strategy.kind.name().to_string(),
                loss_family: self.strategy.loss_family.name().to_string(),
                batch_index: t,
                map_pct: map,
                ref_pct: Some(map),
                forget_pct: Some(0.0),
            });
            if let Some(hook) = self.step_hook {
                hook(t, &state.net, &state.adam)?;
            }
        }
        Ok(records)
    }

    fn record(&self, state: &mut RunState, t: usize) -> Result<()> {
        let map = mean_average_precision(&state.net, self.eval_split)?;
        let mut rec = MetricsRecord {
            strategy: self.strategy.kind.name().to_string(),
            loss_family: self.strategy.loss_family.name().to_string(),
            batch_index: t,
            map_pct: map,
            ref_pct: None,
            forget_pct: None,
        };
        if let Some(curve) = self.reference {
            rec = rec.with_reference(curve)?;
        }
        state.history.push(rec);
        Ok(())
    }

    /// Per-strategy state transitions at the start of batch t.
    fn prepare_batch(&self, state: &mut RunState, t: usize) -> Result<()> {
        if t == 0 {
            return Ok(());
        }
        match self.strategy.kind {
            StrategyKind::Naive | StrategyKind::Cumulative => {}
            StrategyKind::Finetune => {
                // train everything on the first batch, then only the head
                let keep: Vec<String> = state
                    .net
                    .param_names()
                    .filter(|n| !n.starts_with("embed."))
                    .map(String::from)
                    .collect();
                state.net.freeze(&keep)?;
            }
            StrategyKind::Lfl => {
                let snap = state.net.snapshot();
                state.snapshot_net = Some(clone_from(&snap, self.net_config)?);
                state.snapshot_prev = Some(snap);
            }
            StrategyKind::Lwf => {
                let snap = state.net.snapshot();
                state.snapshot_net = Some(clone_from(&snap, self.net_config)?);
                state.snapshot_prev = Some(snap);
                // theta_n restarts from random parameters; frozen layers
                // (e.g. transferred conv blocks) keep their values
                let fresh = init_xavier(self.net_config, derive_seed(self.seed, &[TAG_REINIT, t as u64]))?;
                let names: Vec<String> = state.net.param_names().map(String::from).collect();
                for name in names {
                    if !state.net.is_frozen(&name) {
                        let new = fresh.param(&name).unwrap().detached();
                        *state.net.param_mut(&name).unwrap() = new;
                    }
                }
                state.adam = AdamState::new(&state.net, self.strategy.lr);
            }
            StrategyKind::Ewc => {
                if state.fisher_prev.is_none() {
                    return Err(Error::Contract(format!(
                        "EWC at batch {t} has no Fisher estimate from batch {}",
                        t - 1
                    )));
                }
                state.snapshot_prev = Some(state.net.snapshot());
            }
        }
        Ok(())
    }

    /// Sample tuples from the current batch only.
    fn sample_tuples(
        &self,
        state: &RunState,
        view: &BatchView,
        n: usize,
        seed: u64,
    ) -> Result<Vec<TrainingTuple>> {
        match self.strategy.loss_family {
            LossFamily::Triplet => {
                let mining = match self.strategy.mining {
                    TripletMining::Random => Mining::Random,
                    TripletMining::BatchHard => Mining::BatchHard(&state.net),
                };
                Ok(view
                    .sample_triplets(n, seed, mining)?
                    .into_iter()
                    .map(TrainingTuple::Triplet)
                    .collect())
            }
            LossFamily::Nce => Ok(view
                .sample_nce_tuples(n, self.strategy.nce_negatives, seed)?
                .into_iter()
                .map(TrainingTuple::Nce)
                .collect()),
        }
    }

    /// Epochs of tuple sampling + loss + Adam, with the convergence early
    /// stop; for EWC, ends by caching the Fisher estimate of this batch.
    fn train_batch(
        &self,
        state: &mut RunState,
        view: &BatchView,
        kind: StrategyKind,
        t: usize,
    ) -> Result<()> {
        let cfg = self.strategy;
        let mut prev_mean: Option<f64> = None;
        let mut streak = 0usize;
        for epoch in 0..cfg.epochs_per_batch {
            let seed = derive_seed(self.seed, &[TAG_TUPLES, t as u64, epoch as u64]);
            let tuples = self.sample_tuples(state, view, cfg.tuples_per_epoch, seed)?;
            let mut sum = 0.0;
            for tuple in &tuples {
                let mut g = Graph::new();
                let binding = state.net.bind(&mut g);
                let loss = self.total_loss(&mut g, &binding, state, kind, tuple, t)?;
                g.backward(loss)?;
                sum += g.value(loss).data()[0];
                state.net.extract_grads(&g, &binding);
                adam_step(&mut state.net, &mut state.adam)?;
            }
            let mean = sum / tuples.len() as f64;
            if let Some(p) = prev_mean {
                if p - mean < CONVERGENCE_MIN_IMPROVEMENT {
                    streak += 1;
                    if streak >= CONVERGENCE_PATIENCE {
                        break;
                    }
                } else {
                    streak = 0;
                }
            }
            prev_mean = Some(mean);
        }
        if kind == StrategyKind::Ewc {
            // the only legal moment: this batch's data is discarded next
            let seed = derive_seed(self.seed, &[TAG_FISHER, t as u64]);
            let tuples = self.sample_tuples(state, view, cfg.fisher_samples, seed)?;
            let fisher = estimate_fisher(&state.net, &tuples, &cfg.loss)?;
            if cfg.ewc_accumulate {
                state.ewc_history.push((state.net.snapshot(), fisher.clone()));
            }
            state.fisher_prev = Some(fisher);
        }
        Ok(())
    }

    /// Task loss plus the strategy's regularizer terms.
    ///
    /// Zero-weighted terms are skipped entirely so that, with shared seeds,
    /// the LFL/EWC trajectories are bit-identical to Naive.
    fn total_loss(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        state: &RunState,
        kind: StrategyKind,
        tuple: &TrainingTuple,
        t: usize,
    ) -> Result<TensorId> {
        let loss_cfg = &self.strategy.loss;
        let fwd = task_forward(g, &state.net, binding, tuple, loss_cfg)?;
        match kind {
            StrategyKind::Naive | StrategyKind::Finetune | StrategyKind::Cumulative => Ok(fwd.loss),
            StrategyKind::Lfl => {
                let scaled = g.mul_scalar(fwd.loss, loss_cfg.lambda_c)?;
                if t == 0 || loss_cfg.lambda_e == 0.0 {
                    return Ok(scaled);
                }
                let old_net = state
                    .snapshot_net
                    .as_ref()
                    .ok_or_else(|| Error::Contract("LFL regularizer without a snapshot".into()))?;
                let e_old = old_net.embed(tuple.anchor())?;
                let reg = lfl_regularizer(g, &e_old, fwd.anchor_embedding)?;
                let reg = g.mul_scalar(reg, loss_cfg.lambda_e)?;
                g.add(scaled, reg)
            }
            StrategyKind::Lwf => {
                if t == 0 || loss_cfg.lambda_kd == 0.0 {
                    return Ok(fwd.loss);
                }
                let old_net = state
                    .snapshot_net
                    .as_ref()
                    .ok_or_else(|| Error::Contract("LwF distillation without a snapshot".into()))?;
                let TrainingTuple::Nce(nt) = tuple else {
                    return Err(Error::Contract("LwF requires NCE tuples".into()));
                };
                let z_new = fwd
                    .logits
                    .ok_or_else(|| Error::Contract("LwF requires NCE logits".into()))?;
                let z_old = logits_under(old_net, nt)?;
                let kd = lwf_distillation(g, &z_old, z_new, loss_cfg.kd_temperature)?;
                let kd = g.mul_scalar(kd, loss_cfg.lambda_kd)?;
                g.add(fwd.loss, kd)
            }
            StrategyKind::Ewc => {
                if t == 0 || loss_cfg.lambda_ewc == 0.0 {
                    return Ok(fwd.loss);
                }
                if self.strategy.ewc_accumulate && !state.ewc_history.is_empty() {
                    let mut total = fwd.loss;
                    for (snap, fisher) in &state.ewc_history {
                        let p = ewc_penalty(g, binding, snap, fisher, loss_cfg.lambda_ewc)?;
                        total = g.add(total, p)?;
                    }
                    Ok(total)
                } else {
                    let snap = state
                        .snapshot_prev
                        .as_ref()
                        .ok_or_else(|| Error::Contract("EWC penalty without a snapshot".into()))?;
                    let fisher = state
                        .fisher_prev
                        .as_ref()
                        .ok_or_else(|| Error::Contract("EWC penalty without a Fisher estimate".into()))?;
                    let p = ewc_penalty(g, binding, snap, fisher, loss_cfg.lambda_ewc)?;
                    g.add(fwd.loss, p)
                }
            }
        }
    }
}

/// Pretrain on synthetic instances, freeze the named layers, drop the
/// learning rate, then run the configured strategy over the real stream.
///
/// The synthetic dataset must be instance-disjoint from the real data by
/// construction (it comes from a different generator).
pub fn synthetic_transfer(
    run: &StreamRun,
    synth_train: &InstanceDataset,
    plan: &StreamPlan,
    real_ds: &InstanceDataset,
) -> Result<(Vec<MetricsRecord>, StreamAudit)> {
    run.net_config.validate()?;
    run.strategy.validate()?;
    let transfer = run
        .strategy
        .transfer
        .as_ref()
        .ok_or_else(|| Error::Config("synthetic_transfer requires a transfer config".into()))?;

    let net = pretrain(run, synth_train)?;
    let mut frozen_net = net;
    frozen_net.freeze_prefix(&transfer.frozen_layers)?;

    let mut strategy = run.strategy.clone();
    strategy.lr = transfer.transfer_lr;
    let transfer_run = StreamRun { strategy: &strategy, ..*run };
    transfer_run.execute_from(frozen_net, plan, real_ds)
}

/// Cumulative training on the whole synthetic dataset until convergence.
pub fn pretrain(run: &StreamRun, synth_train: &InstanceDataset) -> Result<EmbeddingNet> {
    let seed = derive_seed(run.seed, &[TAG_PRETRAIN]);
    let net = init_xavier(run.net_config, seed)?;
    let mut state = RunState::new(net, run.strategy.lr);
    let indices: Vec<usize> = (0..synth_train.len()).collect();
    let view = BatchView::from_indices(synth_train, 0, &indices)?;
    let pretrain_run = StreamRun { seed, ..*run };
    pretrain_run.train_batch(&mut state, &view, StrategyKind::Cumulative, 0)?;
    Ok(state.net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, make_retrieval_split, GenConfig};

    fn toy_net_config() -> NetConfig {
        NetConfig { input: (1, 8, 8), conv_blocks: 1, hidden_dims: vec![12], embed_dim: 8 }
    }

    fn toy_gen(seed: u64, instances: usize) -> GenConfig {
        GenConfig {
            num_instances: instances,
            views_per_instance: 4,
            pose_grid: 4,
            image_size: 8,
            noise_sigma: 0.01,
            instance_separation: 1.0,
            outlier_fraction: 0.0,
            elevations: 1,
            frontal_only: false,
            seed,
        }
    }

    /// (train dataset, eval split) carved from one generated dataset.
    fn toy_data(seed: u64) -> (InstanceDataset, RetrievalSplit) {
        let all = generate(&toy_gen(seed, 8)).unwrap().dataset().unwrap();
        let ids = all.instance_ids().to_vec();
        let (eval_ids, train_ids) = ids.split_at(2);
        let train = all
            .subset_by_instances(&train_ids.iter().copied().collect())
            .unwrap();
        let eval_ds = all
            .subset_by_instances(&eval_ids.iter().copied().collect())
            .unwrap();
        let split = make_retrieval_split(&eval_ds, 1).unwrap();
        (train, split)
    }

    fn quick_strategy(kind: StrategyKind, family: LossFamily) -> StrategyConfig {
        let mut cfg = StrategyConfig::new(kind, family);
        cfg.epochs_per_batch = 2;
        cfg.tuples_per_epoch = 4;
        cfg.nce_negatives = 3;
        cfg.fisher_samples = 4;
        cfg
    }

    #[test]
    fn lwf_with_triplet_is_rejected_at_validation() {
        let cfg = StrategyConfig::new(StrategyKind::Lwf, LossFamily::Triplet);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(StrategyConfig::new(StrategyKind::Lwf, LossFamily::Nce).validate().is_ok());
    }

    #[test]
    fn eval_train_overlap_is_a_protocol_error() {
        let (train, _) = toy_data(3);
        let overlap_split = make_retrieval_split(&train, 1).unwrap();
        let plan = crate::stream::split_incremental(&train, 3, 0).unwrap();
        let cfg = quick_strategy(StrategyKind::Naive, LossFamily::Triplet);
        let net_cfg = toy_net_config();
        let run = StreamRun::new(&net_cfg, &cfg, &overlap_split, 1);
        assert!(matches!(run.execute(&plan, &train), Err(Error::Protocol(_))));
    }

    #[test]
    fn runs_produce_one_record_per_batch_with_monotone_t() {
        let (train, split) = toy_data(5);
        let plan = crate::stream::split_incremental(&train, 3, 0).unwrap();
        let cfg = quick_strategy(StrategyKind::Naive, LossFamily::Triplet);
        let net_cfg = toy_net_config();
        let run = StreamRun::new(&net_cfg, &cfg, &split, 1);
        let (records, audit) = run.execute_audited(&plan, &train).unwrap();
        assert_eq!(records.len(), 3);
        for (t, r) in records.iter().enumerate() {
            assert_eq!(r.batch_index, t);
            assert!(r.map_pct >= 0.0 && r.map_pct <= 100.0);
        }
        assert!(audit.is_history_blind(&plan, false));
    }

    #[test]
    fn cumulative_reports_zero_forget_and_stays_in_union() {
        let (train, split) = toy_data(7);
        let plan = crate::stream::split_incremental(&train, 3, 1).unwrap();
        let cfg = quick_strategy(StrategyKind::Cumulative, LossFamily::Triplet);
        let net_cfg = toy_net_config();
        let run = StreamRun::new(&net_cfg, &cfg, &split, 2);
        let (records, audit) = run.execute_audited(&plan, &train).unwrap();
        assert!(records.iter().all(|r| r.forget_pct == Some(0.0)));
        assert!(records.iter().all(|r| r.ref_pct == Some(r.map_pct)));
        assert!(audit.is_history_blind(&plan, true));
        // step 1 uses batch 0's samples: not history-blind in the strict sense
        assert!(!audit.is_history_blind(&plan, false));
    }

    #[test]
    fn zero_weight_lfl_and_ewc_match_naive_bit_for_bit() {
        let (train, split) = toy_data(11);
        let plan = crate::stream::split_incremental(&train, 3, 2).unwrap();
        let net_cfg = toy_net_config();

        let run_kind = |kind: StrategyKind| -> Vec<u64> {
            let mut cfg = quick_strategy(kind, LossFamily::Triplet);
            cfg.loss.lambda_e = 0.0;
            cfg.loss.lambda_ewc = 0.0;
            let run = StreamRun::new(&net_cfg, &cfg, &split, 33);
            // capture the final parameter bits
            let plan = plan.clone();
            let train = train.clone();
            let (records, _) = run.execute_audited(&plan, &train).unwrap();
            assert_eq!(records.len(), 3);
            final_param_bits(&run, &plan, &train)
        };

        let naive = run_kind(StrategyKind::Naive);
        let lfl = run_kind(StrategyKind::Lfl);
        let ewc = run_kind(StrategyKind::Ewc);
        assert_eq!(naive, lfl, "LFL with lambda_e = 0 must replay the naive trajectory");
        assert_eq!(naive, ewc, "EWC with lambda_ewc = 0 must replay the naive trajectory");
    }

    /// Re-run a strategy and hash the final parameters bit-exactly.
    fn final_param_bits(run: &StreamRun, plan: &StreamPlan, ds: &InstanceDataset) -> Vec<u64> {
        let net = match run.strategy.kind {
            StrategyKind::Cumulative => unreachable!("sequential kinds only"),
            _ => {
                let net = init_xavier(run.net_config, run.seed).unwrap();
                let mut state = RunState::new(net, run.strategy.lr);
                for (t, batch) in plan.batches.iter().enumerate() {
                    run.prepare_batch(&mut state, t).unwrap();
                    let view = BatchView::from_plan(ds, batch).unwrap();
                    run.train_batch(&mut state, &view, run.strategy.kind, t).unwrap();
                }
                state.net
            }
        };
        net.params().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn finetune_freezes_everything_but_the_head_after_batch_zero() {
        let (train, split) = toy_data(13);
        let plan = crate::stream::split_incremental(&train, 3, 4).unwrap();
        let cfg = quick_strategy(StrategyKind::Finetune, LossFamily::Triplet);
        let net_cfg = toy_net_config();
        let run = StreamRun::new(&net_cfg, &cfg, &split, 3);

        // replay manually to snapshot boundaries
        let net = init_xavier(&net_cfg, 3).unwrap();
        let mut state = RunState::new(net, cfg.lr);
        run.prepare_batch(&mut state, 0).unwrap();
        let view = BatchView::from_plan(&train, &plan.batches[0]).unwrap();
        run.train_batch(&mut state, &view, cfg.kind, 0).unwrap();
        let after_t0 = state.net.snapshot();

        for t in 1..3 {
            run.prepare_batch(&mut state, t).unwrap();
            let view = BatchView::from_plan(&train, &plan.batches[t]).unwrap();
            run.train_batch(&mut state, &view, cfg.kind, t).unwrap();
        }
        for (name, tensor) in state.net.params() {
            if name.starts_with("embed.") {
                continue;
            }
            assert!(
                tensor.bit_eq(after_t0.get(name).unwrap()),
                "non-head parameter '{name}' changed after batch 0"
            );
        }
        assert!(!state.net.param("embed.weight").unwrap().bit_eq(after_t0.get("embed.weight").unwrap()));
    }

    #[test]
    fn lwf_reinitialises_while_keeping_the_snapshot() {
        let (train, split) = toy_data(17);
        let plan = crate::stream::split_incremental(&train, 2, 5).unwrap();
        let cfg = quick_strategy(StrategyKind::Lwf, LossFamily::Nce);
        let net_cfg = toy_net_config();
        let run = StreamRun::new(&net_cfg, &cfg, &split, 9);

        let net = init_xavier(&net_cfg, 9).unwrap();
        let mut state = RunState::new(net, cfg.lr);
        let view = BatchView::from_plan(&train, &plan.batches[0]).unwrap();
        run.train_batch(&mut state, &view, cfg.kind, 0).unwrap();
        let theta_o = state.net.snapshot();

        run.prepare_batch(&mut state, 1).unwrap();
        let stored = state.snapshot_prev.as_ref().unwrap();
        for (name, t) in theta_o.iter() {
            assert!(t.bit_eq(stored.get(name).unwrap()));
        }
        // fresh theta_n differs from theta_o
        assert!(!state.net.param("embed.weight").unwrap().bit_eq(theta_o.get("embed.weight").unwrap()));
        assert_eq!(state.adam.t, 0, "optimizer state resets with the re-init");
    }

    #[test]
    fn ewc_collects_nonnegative_fisher_and_regularises() {
        let (train, split) = toy_data(19);
        let plan = crate::stream::split_incremental(&train, 2, 6).unwrap();
        let cfg = quick_strategy(StrategyKind::Ewc, LossFamily::Triplet);
        let net_cfg = toy_net_config();
        let run = StreamRun::new(&net_cfg, &cfg, &split, 4);

        let net = init_xavier(&net_cfg, 4).unwrap();
        let mut state = RunState::new(net, cfg.lr);
        let view = BatchView::from_plan(&train, &plan.batches[0]).unwrap();
        run.train_batch(&mut state, &view, cfg.kind, 0).unwrap();
        let fisher = state.fisher_prev.as_ref().expect("fisher cached at end of batch");
        for (_, v) in fisher.iter() {
            assert!(v.iter().all(|&x| x >= 0.0));
        }
        run.prepare_batch(&mut state, 1).unwrap();
        assert!(state.snapshot_prev.is_some());

        // the penalty is exactly zero at the first step of the batch
        let tuples = run
            .sample_tuples(&state, &view, 1, 0)
            .unwrap();
        let mut g = Graph::new();
        let binding = state.net.bind(&mut g);
        let p = ewc_penalty(
            &mut g,
            &binding,
            state.snapshot_prev.as_ref().unwrap(),
            state.fisher_prev.as_ref().unwrap(),
            cfg.loss.lambda_ewc,
        )
        .unwrap();
        assert_eq!(g.value(p).data(), &[0.0]);
        drop(tuples);
    }

    #[test]
    fn single_batch_stream_treats_all_strategies_alike() {
        let (train, split) = toy_data(23);
        let plan = crate::stream::split_incremental(&train, 1, 7).unwrap();
        let net_cfg = toy_net_config();
        let mut finals = Vec::new();
        for kind in [StrategyKind::Naive, StrategyKind::Lfl, StrategyKind::Ewc, StrategyKind::Finetune] {
            let cfg = quick_strategy(kind, LossFamily::Triplet);
            let run = StreamRun::new(&net_cfg, &cfg, &split, 55);
            finals.push(final_param_bits(&run, &plan, &train));
        }
        assert!(finals.windows(2).all(|w| w[0] == w[1]), "B = 1 degenerates to plain training");
    }

    #[test]
    fn transfer_freezes_conv_blocks_across_the_stream() {
        let (train, split) = toy_data(29);
        let plan = crate::stream::split_incremental(&train, 2, 8).unwrap();
        let synth = generate(&toy_gen(101, 5)).unwrap().dataset().unwrap();
        let mut cfg = quick_strategy(StrategyKind::Naive, LossFamily::Triplet);
        cfg.transfer = Some(TransferConfig { frozen_layers: vec!["conv".into()], transfer_lr: 1e-4 });
        let net_cfg = toy_net_config();
        let run = StreamRun::new(&net_cfg, &cfg, &split, 77);

        let pre = pretrain(&run, &synth).unwrap();
        let (records, _) = synthetic_transfer(&run, &synth, &plan, &train).unwrap();
        assert_eq!(records.len(), 2);

        // conv parameters must survive the whole continual run untouched
        let mut frozen_net = pre.clone();
        frozen_net.freeze_prefix(&["conv".to_string()]).unwrap();
        let mut strategy = cfg.clone();
        strategy.lr = 1e-4;
        let frun = StreamRun::new(&net_cfg, &strategy, &split, 77);
        let mut state = RunState::new(frozen_net, strategy.lr);
        for (t, batch) in plan.batches.iter().enumerate() {
            frun.prepare_batch(&mut state, t).unwrap();
            let view = BatchView::from_plan(&train, batch).unwrap();
            frun.train_batch(&mut state, &view, strategy.kind, t).unwrap();
            for name in ["conv0.weight", "conv0.bias"] {
                assert!(
                    state.net.param(name).unwrap().bit_eq(pre.param(name).unwrap()),
                    "conv parameter '{name}' drifted at t = {t}"
                );
            }
        }

        // a conv-free architecture rejects conv freezing
        let flat_cfg = NetConfig { input: (1, 8, 8), conv_blocks: 0, hidden_dims: vec![8], embed_dim: 4 };
        let frun = StreamRun::new(&flat_cfg, &cfg, &split, 77);
        assert!(matches!(
            synthetic_transfer(&frun, &synth, &plan, &train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretrained_model_beats_random_embeddings_on_synth_eval() {
        let gen = toy_gen(41, 6);
        let sd = generate(&gen).unwrap();
        let all = sd.dataset().unwrap();
        let split = make_retrieval_split(&all, 1).unwrap();
        let mut cfg = quick_strategy(StrategyKind::Cumulative, LossFamily::Triplet);
        cfg.epochs_per_batch = 15;
        cfg.tuples_per_epoch = 12;
        let net_cfg = toy_net_config();
        let run = StreamRun::new(&net_cfg, &cfg, &split, 5);
        let net = pretrain(&run, &all).unwrap();
        let trained = mean_average_precision(&net, &split).unwrap();
        let random = mean_average_precision(&init_xavier(&net_cfg, 1234).unwrap(), &split).unwrap();
        assert!(
            trained > random,
            "pretraining must beat a random embedding: {trained:.2} vs {random:.2}"
        );
    }
}
