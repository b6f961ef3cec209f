//! Loss functions and continual-learning regularizers.
//!
//! Task losses: margin triplet (regression family) and normalised
//! cross-entropy over one positive plus K negatives (probabilistic family).
//! Regularizers: LFL Euclidean embedding anchor, LwF soft-target
//! distillation, and the EWC quadratic penalty with an empirical diagonal
//! Fisher estimate.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingNet, ParamBinding, ParameterSnapshot};
use crate::tensor::{Graph, Tensor, TensorId};

/// Weights and shape parameters for all losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Triplet margin.
    pub alpha: f64,
    /// NCE softmax temperature.
    pub tau: f64,
    /// LFL task-loss weight.
    pub lambda_c: f64,
    /// LFL Euclidean regularizer weight.
    pub lambda_e: f64,
    /// EWC previous-task importance.
    pub lambda_ewc: f64,
    /// LwF distillation weight.
    pub lambda_kd: f64,
    /// LwF softening temperature.
    pub kd_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            tau: 1.0,
            lambda_c: 1.0,
            lambda_e: 0.1,
            lambda_ewc: 100.0,
            lambda_kd: 1.0,
            kd_temperature: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("lambda_c", self.lambda_c),
            ("lambda_e", self.lambda_e),
            ("lambda_ewc", self.lambda_ewc),
            ("lambda_kd", self.lambda_kd),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.kd_temperature.is_finite() && self.kd_temperature > 0.0) {
            return Err(Error::Config(format!(
                "kd_temperature must be > 0, got {}",
                self.kd_temperature
            )));
        }
        Ok(())
    }
}

/// Anchor/positive/negative images with their instance labels.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
    pub anchor_instance: u32,
    pub negative_instance: u32,
}

impl Triplet {
    pub fn new(
        anchor: Tensor,
        positive: Tensor,
        negative: Tensor,
        anchor_instance: u32,
        negative_instance: u32,
    ) -> Result<Self> {
        if anchor_instance == negative_instance {
            return Err(Error::Contract(
                "triplet negative must come from a different instance".into(),
            ));
        }
        Ok(Triplet { anchor, positive, negative, anchor_instance, negative_instance })
    }
}

/// Anchor/positive plus K negatives for the NCE loss.
#[derive(Debug, Clone)]
pub struct NceTuple {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negatives: Vec<Tensor>,
    pub anchor_instance: u32,
    pub negative_instances: Vec<u32>,
    /// Set when the batch held fewer than K distinct negatives and samples
    /// were drawn with replacement.
    pub with_replacement: bool,
}

impl NceTuple {
    pub fn new(
        anchor: Tensor,
        positive: Tensor,
        negatives: Vec<Tensor>,
        anchor_instance: u32,
        negative_instances: Vec<u32>,
        with_replacement: bool,
    ) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::Contract("NCE tuple requires at least one negative".into()));
        }
        if negative_instances.len() != negatives.len() {
            return Err(Error::Contract("NCE tuple label/sample count mismatch".into()));
        }
        if negative_instances.contains(&anchor_instance) {
            return Err(Error::Contract(
                "NCE negatives must come from other instances".into(),
            ));
        }
        Ok(NceTuple { anchor, positive, negatives, anchor_instance, negative_instances, with_replacement })
    }

    pub fn k(&self) -> usize {
        self.negatives.len()
    }
}

/// A sampled training example under either loss family.
#[derive(Debug, Clone)]
pub enum TrainingTuple {
    Triplet(Triplet),
    Nce(NceTuple),
}

impl TrainingTuple {
    /// All images referenced by the tuple, anchor first.
    pub fn images(&self) -> Vec<&Tensor> {
        match self {
            TrainingTuple::Triplet(t) => vec![&t.anchor, &t.positive, &t.negative],
            TrainingTuple::Nce(t) => {
                let mut v = vec![&t.anchor, &t.positive];
                v.extend(t.negatives.iter());
                v
            }
        }
    }

    pub fn anchor(&self) -> &Tensor {
        match self {
            TrainingTuple::Triplet(t) => &t.anchor,
            TrainingTuple::Nce(t) => &t.anchor,
        }
    }
}

// ── Task losses ─────────────────────────────────────────────────────────

/// max(0, ||e_a - e_p||^2 - ||e_a - e_n||^2 + alpha).
pub fn triplet_loss(
    g: &mut Graph,
    e_a: TensorId,
    e_p: TensorId,
    e_n: TensorId,
    alpha: f64,
) -> Result<TensorId> {
    let d_ap = g.sub(e_a, e_p)?;
    let dap2 = g.dot(d_ap, d_ap)?;
    let d_an = g.sub(e_a, e_n)?;
    let dan2 = g.dot(d_an, d_an)?;
    let diff = g.sub(dap2, dan2)?;
    let shifted = g.add_scalar(diff, alpha)?;
    g.relu(shifted)
}

/// Similarity logits z = (e_a . e_p, e_a . n_1, ..., e_a . n_K); the positive
/// pair always occupies index 0.
pub fn nce_logits(
    g: &mut Graph,
    e_a: TensorId,
    e_p: TensorId,
    negatives: &[TensorId],
) -> Result<TensorId> {
    if negatives.is_empty() {
        return Err(Error::Contract("nce_logits requires at least one negative".into()));
    }
    let mut parts = Vec::with_capacity(negatives.len() + 1);
    parts.push(g.dot(e_a, e_p)?);
    for &n in negatives {
        parts.push(g.dot(e_a, n)?);
    }
    g.concat(&parts)
}

/// Cross-entropy of softmax(z/tau) against the positive at index 0.
pub fn nce_loss(g: &mut Graph, z: TensorId, tau: f64) -> Result<TensorId> {
    g.softmax_xent(z, 0, tau)
}

// ── Regularizers ────────────────────────────────────────────────────────

/// ||e_old - e_new||^2 with gradient flowing only into e_new.
pub fn lfl_regularizer(g: &mut Graph, e_old: &Tensor, e_new: TensorId) -> Result<TensorId> {
    if g.value(e_new).shape() != e_old.shape() {
        return Err(Error::Dimension(format!(
            "lfl_regularizer embedding shapes differ: {:?} vs {:?}",
            e_old.shape(),
            g.value(e_new).shape()
        )));
    }
    let old = g.constant(e_old);
    let d = g.sub(e_new, old)?;
    g.dot(d, d)
}

/// T^2-scaled cross-entropy between softened old and new logit distributions.
pub fn lwf_distillation(
    g: &mut Graph,
    z_old: &[f64],
    z_new: TensorId,
    temperature: f64,
) -> Result<TensorId> {
    g.distill_xent(z_new, z_old, temperature)
}

// ── EWC ─────────────────────────────────────────────────────────────────

/// Per-parameter importance: the empirical diagonal Fisher estimate,
/// F_i = (1/N) sum over samples of (dL/dtheta_i)^2.
#[derive(Debug, Clone)]
pub struct FisherDiagonal {
    values: IndexMap<String, Vec<f64>>,
    pub sample_count: usize,
}

impl FisherDiagonal {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.values.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.values.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }
}

/// Graph handles produced while building a task loss, kept so regularizers
/// can attach to the same forward passes.
pub struct TaskForward {
    pub anchor_embedding: TensorId,
    /// NCE similarity logits; absent under the triplet family.
    pub logits: Option<TensorId>,
    pub loss: TensorId,
}

/// Build the task loss for one tuple under the tuple's own loss family.
pub fn task_forward(
    g: &mut Graph,
    net: &EmbeddingNet,
    binding: &ParamBinding,
    tuple: &TrainingTuple,
    cfg: &LossConfig,
) -> Result<TaskForward> {
    match tuple {
        TrainingTuple::Triplet(t) => {
            let e_a = net.forward(g, binding, &t.anchor)?;
            let e_p = net.forward(g, binding, &t.positive)?;
            let e_n = net.forward(g, binding, &t.negative)?;
            let loss = triplet_loss(g, e_a, e_p, e_n, cfg.alpha)?;
            Ok(TaskForward { anchor_embedding: e_a, logits: None, loss })
        }
        TrainingTuple::Nce(t) => {
            let e_a = net.forward(g, binding, &t.anchor)?;
            let e_p = net.forward(g, binding, &t.positive)?;
            let negs: Result<Vec<TensorId>> =
                t.negatives.iter().map(|img| net.forward(g, binding, img)).collect();
            let z = nce_logits(g, e_a, e_p, &negs?)?;
            let loss = nce_loss(g, z, cfg.tau)?;
            Ok(TaskForward { anchor_embedding: e_a, logits: Some(z), loss })
        }
    }
}

/// Task loss alone, without the intermediate handles.
pub fn task_loss(
    g: &mut Graph,
    net: &EmbeddingNet,
    binding: &ParamBinding,
    tuple: &TrainingTuple,
    cfg: &LossConfig,
) -> Result<TensorId> {
    Ok(task_forward(g, net, binding, tuple, cfg)?.loss)
}

/// Estimate the diagonal Fisher of the task loss over the given tuples.
///
/// Frozen parameters are untracked and therefore receive zero importance.
pub fn estimate_fisher(
    net: &EmbeddingNet,
    data: &[TrainingTuple],
    cfg: &LossConfig,
) -> Result<FisherDiagonal> {
    if data.is_empty() {
        return Err(Error::Contract("estimate_fisher requires at least one sample".into()));
    }
    let mut accum: IndexMap<String, Vec<f64>> = net
        .params()
        .map(|(n, t)| (n.to_string(), vec![0.0; t.len()]))
        .collect();
    for tuple in data {
        let mut g = Graph::new();
        let binding = net.bind(&mut g);
        let loss = task_loss(&mut g, net, &binding, tuple, cfg)?;
        g.backward(loss)?;
        for (name, id) in binding.iter() {
            if let Some(grad) = g.grad(id) {
                let slot = accum.get_mut(name).expect("binding name mirrors params");
                for (s, &gv) in slot.iter_mut().zip(grad) {
                    *s += gv * gv;
                }
            }
        }
    }
    let n = data.len() as f64;
    for v in accum.values_mut() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    Ok(FisherDiagonal { values: accum, sample_count: data.len() })
}

/// (lambda/2) * sum_i F_i (theta_n,i - theta_o,i)^2 over all bound parameters.
pub fn ewc_penalty(
    g: &mut Graph,
    binding: &ParamBinding,
    snap: &ParameterSnapshot,
    fisher: &FisherDiagonal,
    lambda_ewc: f64,
) -> Result<TensorId> {
    let mut total: Option<TensorId> = None;
    for (name, id) in binding.iter() {
        let target = snap
            .get(name)
            .ok_or_else(|| Error::Contract(format!("ewc_penalty: snapshot missing '{name}'")))?;
        let weights = fisher
            .get(name)
            .ok_or_else(|| Error::Contract(format!("ewc_penalty: fisher missing '{name}'")))?;
        if g.value(id).len() != target.len() || target.len() != weights.len() {
            return Err(Error::Contract(format!(
                "ewc_penalty: length mismatch for '{name}'"
            )));
        }
        let term = g.weighted_sq_diff(id, target.data(), weights)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("ewc_penalty over empty binding".into()))?;
    g.mul_scalar(total, lambda_ewc / 2.0)
}

/// Similarity logits of a tuple under a fixed (old) network, as plain values.
pub fn logits_under(net: &EmbeddingNet, tuple: &NceTuple) -> Result<Vec<f64>> {
    let e_a = net.embed(&tuple.anchor)?;
    let e_p = net.embed(&tuple.positive)?;
    let mut z = Vec::with_capacity(tuple.negatives.len() + 1);
    z.push(dot_slice(e_a.data(), e_p.data()));
    for img in &tuple.negatives {
        let e_n = net.embed(img)?;
        z.push(dot_slice(e_a.data(), e_n.data()));
    }
    Ok(z)
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_xavier, NetConfig};
    use crate::tensor::grad_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit(data: Vec<f64>) -> Tensor {
        let norm: f64 = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::from_vec(data.iter().map(|v| v / norm).collect()).unwrap()
    }

    fn rand_unit(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
        loop {
            let data: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if data.iter().map(|v| v * v).sum::<f64>() > 1e-3 {
                return unit(data);
            }
        }
    }

    fn eval_triplet(a: &Tensor, p: &Tensor, n: &Tensor, alpha: f64) -> f64 {
        let mut g = Graph::new();
        let (ia, ip, inn) = (g.leaf(a.detached()), g.leaf(p.detached()), g.leaf(n.detached()));
        let l = triplet_loss(&mut g, ia, ip, inn, alpha).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn triplet_loss_hand_cases() {
        let ex = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let ey = Tensor::from_vec(vec![0.0, 1.0]).unwrap();
        let enx = Tensor::from_vec(vec![-1.0, 0.0]).unwrap();

        // satisfied margin: e_a = e_p, ||e_a - e_n||^2 = 2
        assert_eq!(eval_triplet(&ex, &ex, &ey, 1.0), 0.0);
        // collapsed case equals the margin
        assert_eq!(eval_triplet(&ex, &ex, &ex, 1.0), 1.0);
        // hand-computed: d_ap^2 = 2, d_an^2 = 4 -> 0; d_an^2 = 0 -> 2 - 0 + 1 = 3
        assert_eq!(eval_triplet(&ex, &ey, &enx, 1.0), 0.0);
        assert_eq!(eval_triplet(&ex, &ey, &ex, 1.0), 3.0);
    }

    #[test]
    fn triplet_loss_is_nonnegative_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..200 {
            let a = rand_unit(&mut rng, 8);
            let p = rand_unit(&mut rng, 8);
            let n = rand_unit(&mut rng, 8);
            assert!(eval_triplet(&a, &p, &n, 1.0) >= 0.0);
        }
    }

    #[test]
    fn triplet_gradients_match_finite_differences_off_the_hinge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 20 {
            let a = rand_unit(&mut rng, 8);
            let p = rand_unit(&mut rng, 8);
            let n = rand_unit(&mut rng, 8);
            let raw = {
                let dap: f64 = a.data().iter().zip(p.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                let dan: f64 = a.data().iter().zip(n.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                dap - dan + 1.0
            };
            if raw.abs() < 1e-3 {
                continue; // hinge kink
            }
            let err = grad_check(
                |g, ids| triplet_loss(g, ids[0], ids[1], ids[2], 1.0),
                &[a, p, n],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "triplet grad error {err:e}");
            checked += 1;
        }
    }

    #[test]
    fn nce_logits_hand_cases() {
        let ex = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let ey = Tensor::from_vec(vec![0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(ex.detached());
        let p = g.leaf(ex.detached());
        let n = g.leaf(ey.detached());
        let z = nce_logits(&mut g, a, p, &[n]).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 0.0]);

        let all = g.leaf(ex.detached());
        let z2 = nce_logits(&mut g, all, all, &[all, all, all]).unwrap();
        assert_eq!(g.value(z2).data(), &[1.0, 1.0, 1.0, 1.0]);

        assert!(matches!(nce_logits(&mut g, a, p, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn nce_logits_match_pairwise_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_unit(&mut rng, 16);
        let p = rand_unit(&mut rng, 16);
        let negs: Vec<Tensor> = (0..5).map(|_| rand_unit(&mut rng, 16)).collect();
        let mut g = Graph::new();
        let ia = g.leaf(a.detached());
        let ip = g.leaf(p.detached());
        let ins: Vec<_> = negs.iter().map(|n| g.leaf(n.detached())).collect();
        let z = nce_logits(&mut g, ia, ip, &ins).unwrap();
        let zd = g.value(z).data().to_vec();
        assert!((zd[0] - dot_slice(a.data(), p.data())).abs() < 1e-15);
        for (j, n) in negs.iter().enumerate() {
            assert!((zd[j + 1] - dot_slice(a.data(), n.data())).abs() < 1e-15);
        }
    }

    #[test]
    fn nce_loss_uniform_and_closed_form_cases() {
        let eval = |z: Vec<f64>, tau: f64| {
            let mut g = Graph::new();
            let zid = g.leaf(Tensor::from_vec(z).unwrap());
            let l = nce_loss(&mut g, zid, tau).unwrap();
            g.value(l).data()[0]
        };
        assert!((eval(vec![0.7, 0.7], 1.0) - 2.0f64.ln()).abs() < 1e-12);
        assert!((eval(vec![0.3; 10], 1.0) - 10.0f64.ln()).abs() < 1e-12);
        assert!((eval(vec![2.0, 0.0], 1.0) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn nce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = rand_unit(&mut rng, 8);
            let p = rand_unit(&mut rng, 8);
            let n1 = rand_unit(&mut rng, 8);
            let n2 = rand_unit(&mut rng, 8);
            let err = grad_check(
                |g, ids| {
                    let z = nce_logits(g, ids[0], ids[1], &[ids[2], ids[3]])?;
                    nce_loss(g, z, 1.0)
                },
                &[a, p, n1, n2],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "nce grad error {err:e}");
        }
    }

    #[test]
    fn lfl_regularizer_cases_and_oracle() {
        let mut g = Graph::new();
        let e_old = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let e_new = g.leaf(Tensor::from_vec(vec![0.0, 1.0]).unwrap());
        let l = lfl_regularizer(&mut g, &e_old, e_new).unwrap();
        assert_eq!(g.value(l).data(), &[2.0]);

        // identical embeddings -> exactly 0
        let same = g.leaf(e_old.detached());
        let l0 = lfl_regularizer(&mut g, &e_old, same).unwrap();
        assert_eq!(g.value(l0).data(), &[0.0]);

        // random pair vs elementwise sum-of-squares oracle
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = rand_unit(&mut rng, 32);
        let b = rand_unit(&mut rng, 32);
        let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let bid = g.leaf(b.detached());
        let lr = lfl_regularizer(&mut g, &a, bid).unwrap();
        assert!((g.value(lr).data()[0] - oracle).abs() < 1e-15);

        // gradient flows only into e_new
        let mut g = Graph::new();
        let mut tracked = b.detached();
        tracked.set_requires_grad(true);
        let bid = g.leaf(tracked);
        let l = lfl_regularizer(&mut g, &a, bid).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(bid).is_some());
        let err = grad_check(|g, ids| lfl_regularizer(g, &a, ids[0]), &[b], 1e-5).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn lwf_distillation_matched_uniform_and_oracle_cases() {
        let temp = 2.0;
        // matched distributions: loss = T^2 * entropy(softened old), zero gradient
        let z = vec![0.4, -0.3, 1.2, 0.0];
        let p = crate::tensor::softmax_scaled(&z, temp);
        let entropy: f64 = -p.iter().map(|&q| q * q.ln()).sum::<f64>();
        let mut g = Graph::new();
        let mut zt = Tensor::from_vec(z.clone()).unwrap();
        zt.set_requires_grad(true);
        let zid = g.leaf(zt);
        let l = lwf_distillation(&mut g, &z, zid, temp).unwrap();
        assert!((g.value(l).data()[0] - temp * temp * entropy).abs() < 1e-12);
        g.backward(l).unwrap();
        assert!(g.grad(zid).unwrap().iter().all(|&v| v.abs() < 1e-12));

        // uniform old logits at uniform new logits: T^2 * ln(K+1)
        let k = 9;
        let zu = vec![0.25; k + 1];
        let mut g = Graph::new();
        let zid = g.leaf(Tensor::from_vec(zu.clone()).unwrap());
        let l = lwf_distillation(&mut g, &zu, zid, temp).unwrap();
        assert!((g.value(l).data()[0] - temp * temp * (10.0f64).ln()).abs() < 1e-12);

        // random logits vs explicit softmax + cross-entropy oracle
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let z_old: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z_new: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = crate::tensor::softmax_scaled(&z_old, temp);
        let q = crate::tensor::softmax_scaled(&z_new, temp);
        let oracle = temp * temp * -p.iter().zip(&q).map(|(&pi, &qi)| pi * qi.ln()).sum::<f64>();
        let mut g = Graph::new();
        let zid = g.leaf(Tensor::from_vec(z_new.clone()).unwrap());
        let l = lwf_distillation(&mut g, &z_old, zid, temp).unwrap();
        assert!((g.value(l).data()[0] - oracle).abs() < 1e-12);

        let err = grad_check(
            |g, ids| lwf_distillation(g, &z_old, ids[0], temp),
            &[Tensor::from_vec(z_new).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "lwf grad error {err:e}");
    }

    fn tiny_net(seed: u64) -> EmbeddingNet {
        let cfg = NetConfig { input: (1, 4, 4), conv_blocks: 0, hidden_dims: vec![6], embed_dim: 4 };
        init_xavier(&cfg, seed).unwrap()
    }

    fn tiny_triplet(seed: u64) -> TrainingTuple {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = |bias: f64| {
            Tensor::new((0..16).map(|_| rng.gen_range(0.0..1.0) + bias).collect(), vec![1, 4, 4])
                .unwrap()
        };
        TrainingTuple::Triplet(
            Triplet::new(img(0.0), img(0.1), img(0.6), 0, 1).unwrap(),
        )
    }

    #[test]
    fn fisher_single_sample_is_squared_gradient() {
        let net = tiny_net(8);
        let cfg = LossConfig::default();
        let tuple = tiny_triplet(4);
        let fisher = estimate_fisher(&net, std::slice::from_ref(&tuple), &cfg).unwrap();
        assert_eq!(fisher.sample_count, 1);

        let mut g = Graph::new();
        let binding = net.bind(&mut g);
        let loss = task_loss(&mut g, &net, &binding, &tuple, &cfg).unwrap();
        g.backward(loss).unwrap();
        for (name, id) in binding.iter() {
            let grad = g.grad(id).unwrap();
            let f = fisher.get(name).unwrap();
            for (fv, gv) in f.iter().zip(grad) {
                assert_eq!(*fv, gv * gv);
            }
        }
    }

    #[test]
    fn fisher_two_samples_average_and_frozen_zero() {
        let mut net = tiny_net(8);
        let cfg = LossConfig::default();
        let (t1, t2) = (tiny_triplet(4), tiny_triplet(5));
        let f1 = estimate_fisher(&net, std::slice::from_ref(&t1), &cfg).unwrap();
        let f2 = estimate_fisher(&net, std::slice::from_ref(&t2), &cfg).unwrap();
        let f12 = estimate_fisher(&net, &[t1.clone(), t2.clone()], &cfg).unwrap();
        for name in f12.names() {
            let (a, b, avg) = (f1.get(name).unwrap(), f2.get(name).unwrap(), f12.get(name).unwrap());
            for i in 0..avg.len() {
                assert!((avg[i] - (a[i] + b[i]) / 2.0).abs() < 1e-15);
                assert!(avg[i] >= 0.0);
            }
        }

        let all: Vec<String> = net.param_names().map(String::from).collect();
        net.freeze(&all).unwrap();
        let f0 = estimate_fisher(&net, &[t1, t2], &cfg).unwrap();
        for (_, v) in f0.iter() {
            assert!(v.iter().all(|&x| x == 0.0));
        }

        assert!(matches!(
            estimate_fisher(&net, &[], &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ewc_penalty_zero_at_snapshot_and_formula_case() {
        let net = tiny_net(2);
        let snap = net.snapshot();
        let cfg = LossConfig::default();
        let fisher = estimate_fisher(&net, &[tiny_triplet(4)], &cfg).unwrap();

        let mut g = Graph::new();
        let binding = net.bind(&mut g);
        let p = ewc_penalty(&mut g, &binding, &snap, &fisher, 100.0).unwrap();
        assert_eq!(g.value(p).data(), &[0.0]);

        // F = 1 everywhere, lambda = 2, two params differing by 1 each -> 2
        let mut drifted = net.clone();
        let w = drifted.param_mut("embed.bias").unwrap();
        w.data_mut()[0] += 1.0;
        w.data_mut()[1] += 1.0;
        let ones = FisherDiagonal {
            values: net.params().map(|(n, t)| (n.to_string(), vec![1.0; t.len()])).collect(),
            sample_count: 1,
        };
        let mut g = Graph::new();
        let binding = drifted.bind(&mut g);
        let p = ewc_penalty(&mut g, &binding, &snap, &ones, 2.0).unwrap();
        assert!((g.value(p).data()[0] - 2.0).abs() < 1e-15);

        // random F and drift vs elementwise oracle
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut drifted = net.clone();
        let mut oracle = 0.0;
        let rand_fisher = FisherDiagonal {
            values: net
                .params()
                .map(|(n, t)| (n.to_string(), (0..t.len()).map(|_| rng.gen_range(0.0..2.0)).collect()))
                .collect(),
            sample_count: 1,
        };
        for name in net.param_names().map(String::from).collect::<Vec<_>>() {
            let f = rand_fisher.get(&name).unwrap().to_vec();
            let p = drifted.param_mut(&name).unwrap();
            for (i, v) in p.data_mut().iter_mut().enumerate() {
                let delta = rng.gen_range(-0.5..0.5);
                *v += delta;
                oracle += f[i] * delta * delta;
            }
        }
        let lambda = 3.0;
        let mut g = Graph::new();
        let binding = drifted.bind(&mut g);
        let p = ewc_penalty(&mut g, &binding, &snap, &rand_fisher, lambda).unwrap();
        assert!((g.value(p).data()[0] - lambda / 2.0 * oracle).abs() < 1e-9);
    }

    #[test]
    fn ewc_penalty_gradients_match_finite_differences() {
        let net = tiny_net(3);
        let snap = net.snapshot();
        let cfg = LossConfig::default();
        let fisher = estimate_fisher(&net, &[tiny_triplet(4), tiny_triplet(9)], &cfg).unwrap();
        let names: Vec<String> = net.param_names().map(String::from).collect();
        let mut drifted: Vec<Tensor> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for name in &names {
            let mut t = net.param(name).unwrap().detached();
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
            drifted.push(t);
        }
        let err = grad_check(
            |g, ids| {
                let binding =
                    ParamBinding::from_pairs(names.iter().cloned().zip(ids.iter().copied()));
                ewc_penalty(g, &binding, &snap, &fisher, 7.0)
            },
            &drifted,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "ewc grad error {err:e}");
    }
}
