//! Siamese embedding network: configuration, parameters, Adam, snapshots,
//! freezing and checkpoint persistence.
//!
//! One parameter set is shared across every forward call, so evaluating an
//! anchor/positive/negative through the same [`ParamBinding`] accumulates
//! gradients into the same leaves — the Siamese property falls out of the
//! tape rather than being a separate mechanism.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorId};

/// Architecture of the embedding network.
///
/// Each conv block is conv2d 3x3 (zero pad 1, stride 1) + ReLU + 2x2
/// max-pool; block `i` produces `8 << i` channels. The flattened conv output
/// feeds the fully connected stack and ends in an L2-normalised embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Input image as (channels, height, width).
    pub input: (usize, usize, usize),
    pub conv_blocks: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_embed_dim() -> usize {
    32
}

impl Default for NetConfig {
    /// Toy backbone: 2 conv blocks on 1x16x16 input, one 64-wide FC layer,
    /// 32-dimensional embedding.
    fn default() -> Self {
        NetConfig { input: (1, 16, 16), conv_blocks: 2, hidden_dims: vec![64], embed_dim: 32 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, mut h, mut w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("degenerate input shape {:?}", self.input)));
        }
        for i in 0..self.conv_blocks {
            if h < 3 || w < 3 {
                return Err(Error::Config(format!(
                    "conv block {i} needs spatial dims >= 3, has {h}x{w}"
                )));
            }
            h /= 2;
            w /= 2;
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("spatial dims collapsed to zero after pooling".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden dims must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be >= 2, got {}", self.embed_dim)));
        }
        Ok(())
    }

    /// Output channels of conv block `i`.
    fn conv_out_channels(i: usize) -> usize {
        8 << i
    }

    /// Ordered (name, shape) records for every parameter tensor.
    pub fn layer_plan(&self) -> Vec<(String, Vec<usize>)> {
        let (c, mut h, mut w) = self.input;
        let mut ch = c;
        let mut plan = Vec::new();
        for i in 0..self.conv_blocks {
            let c_out = Self::conv_out_channels(i);
            plan.push((format!("conv{i}.weight"), vec![c_out, ch, 3, 3]));
            plan.push((format!("conv{i}.bias"), vec![c_out]));
            ch = c_out;
            h /= 2;
            w /= 2;
        }
        let mut dim = ch * h * w;
        for (j, &hd) in self.hidden_dims.iter().enumerate() {
            plan.push((format!("fc{j}.weight"), vec![dim, hd]));
            plan.push((format!("fc{j}.bias"), vec![1, hd]));
            dim = hd;
        }
        plan.push(("embed.weight".to_string(), vec![dim, self.embed_dim]));
        plan.push(("embed.bias".to_string(), vec![1, self.embed_dim]));
        plan
    }
}

/// Xavier-uniform bound for a parameter tensor of the given shape.
fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape.len() {
        // FC weight [in, out]
        2 => (shape[0], shape[1]),
        // Conv weight [c_out, c_in, kh, kw]: fans include the receptive field
        4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
        _ => (shape.iter().product(), 1),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Siamese embedding network with named, ordered parameters.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    config: NetConfig,
    params: IndexMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

/// Immutable deep copy of a network's parameters (theta_o).
#[derive(Debug, Clone)]
pub struct ParameterSnapshot {
    params: IndexMap<String, Tensor>,
}

impl ParameterSnapshot {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Graph-side handles for one bound parameter set.
pub struct ParamBinding {
    ids: IndexMap<String, TensorId>,
}

impl ParamBinding {
    /// Assemble a binding from explicit (name, id) pairs.
    pub fn from_pairs<I: IntoIterator<Item = (String, TensorId)>>(pairs: I) -> Self {
        ParamBinding { ids: pairs.into_iter().collect() }
    }

    pub fn id(&self, name: &str) -> TensorId {
        self.ids[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

/// Initialise a network with Xavier-uniform weights and zero biases.
pub fn init_xavier(config: &NetConfig, seed: u64) -> Result<EmbeddingNet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    for (name, shape) in config.layer_plan() {
        let numel: usize = shape.iter().product();
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let b = xavier_bound(&shape);
            let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-b..b)).collect();
            Tensor::new(data, shape)?
        };
        params.insert(name, tensor);
    }
    Ok(EmbeddingNet { config: config.clone(), params, frozen: BTreeSet::new() })
}

impl EmbeddingNet {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Mark parameters as frozen. Idempotent; unknown names are rejected.
    pub fn freeze<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        for n in names {
            let n = n.as_ref();
            if !self.params.contains_key(n) {
                return Err(Error::Contract(format!("freeze: unknown parameter '{n}'")));
            }
            self.frozen.insert(n.to_string());
        }
        Ok(())
    }

    /// Freeze every parameter whose name starts with one of the prefixes.
    pub fn freeze_prefix(&mut self, prefixes: &[String]) -> Result<()> {
        for p in prefixes {
            let matching: Vec<String> = self
                .params
                .keys()
                .filter(|n| n.starts_with(p.as_str()))
                .cloned()
                .collect();
            if matching.is_empty() {
                return Err(Error::Config(format!("frozen_layers entry '{p}' matches no parameter")));
            }
            self.frozen.extend(matching);
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    /// Names of the final embedding head parameters.
    pub fn head_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| n.starts_with("embed."))
            .cloned()
            .collect()
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot {
            params: self.params.iter().map(|(n, t)| (n.clone(), t.detached())).collect(),
        }
    }

    /// Overwrite parameters from a snapshot; name sets must match.
    pub fn restore(&mut self, snap: &ParameterSnapshot) -> Result<()> {
        if self.params.len() != snap.params.len() {
            return Err(Error::Snapshot(format!(
                "snapshot has {} parameters, net has {}",
                snap.params.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in &snap.params {
            let target = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Snapshot(format!("snapshot parameter '{name}' not in net")))?;
            if target.shape() != tensor.shape() {
                return Err(Error::Snapshot(format!(
                    "shape mismatch for '{name}': {:?} vs {:?}",
                    target.shape(),
                    tensor.shape()
                )));
            }
            *target = tensor.detached();
        }
        Ok(())
    }

    /// Insert all parameters into a graph; frozen parameters are untracked.
    pub fn bind(&self, g: &mut Graph) -> ParamBinding {
        let ids = self
            .params
            .iter()
            .map(|(name, t)| {
                let id = if self.frozen.contains(name) { g.constant(t) } else { g.param(t) };
                (name.clone(), id)
            })
            .collect();
        ParamBinding { ids }
    }

    /// Forward pass producing a unit-norm embedding of shape [embed_dim].
    pub fn forward(&self, g: &mut Graph, binding: &ParamBinding, image: &Tensor) -> Result<TensorId> {
        let (c, h, w) = self.config.input;
        if image.shape() != [c, h, w] {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match configured {:?}",
                image.shape(),
                (c, h, w)
            )));
        }
        let mut cur = g.leaf(image.detached());
        for i in 0..self.config.conv_blocks {
            let kw = binding.id(&format!("conv{i}.weight"));
            let kb = binding.id(&format!("conv{i}.bias"));
            cur = g.conv2d(cur, kw, kb)?;
            cur = g.relu(cur)?;
            cur = g.maxpool2d(cur)?;
        }
        let numel = g.value(cur).len();
        cur = g.reshape(cur, vec![1, numel])?;
        for j in 0..self.config.hidden_dims.len() {
            let fw = binding.id(&format!("fc{j}.weight"));
            let fb = binding.id(&format!("fc{j}.bias"));
            cur = g.matmul(cur, fw)?;
            cur = g.add(cur, fb)?;
            cur = g.relu(cur)?;
        }
        let ew = binding.id("embed.weight");
        let eb = binding.id("embed.bias");
        cur = g.matmul(cur, ew)?;
        cur = g.add(cur, eb)?;
        cur = g.reshape(cur, vec![self.config.embed_dim])?;
        g.l2_normalize(cur)
    }

    /// Evaluate the embedding of one image without gradient tracking.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let binding = ParamBinding {
            ids: self.params.iter().map(|(n, t)| (n.clone(), g.constant(t))).collect(),
        };
        let out = self.forward(&mut g, &binding, image)?;
        Ok(g.value(out).detached())
    }

    /// Copy gradients computed on a graph back into the owning parameters.
    pub fn extract_grads(&mut self, g: &Graph, binding: &ParamBinding) {
        for (name, id) in binding.iter() {
            if let Some(grad) = g.grad(id) {
                if let Some(p) = self.params.get_mut(name) {
                    p.accumulate_grad(grad);
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    /// Bitwise equality of all parameter values.
    pub fn bit_eq(&self, other: &EmbeddingNet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((an, at), (bn, bt))| an == bn && at.bit_eq(bt))
    }
}

/// Build a network from a snapshot; parameters equal the snapshot bit-for-bit.
pub fn clone_from(snap: &ParameterSnapshot, config: &NetConfig) -> Result<EmbeddingNet> {
    config.validate()?;
    let plan = config.layer_plan();
    if plan.len() != snap.params.len() {
        return Err(Error::Snapshot(format!(
            "snapshot has {} parameters, config implies {}",
            snap.params.len(),
            plan.len()
        )));
    }
    let mut params = IndexMap::new();
    for (name, shape) in plan {
        let t = snap
            .params
            .get(&name)
            .ok_or_else(|| Error::Snapshot(format!("snapshot missing parameter '{name}'")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Snapshot(format!(
                "shape mismatch for '{name}': snapshot {:?}, config {:?}",
                t.shape(),
                shape
            )));
        }
        params.insert(name, t.detached());
    }
    Ok(EmbeddingNet { config: config.clone(), params, frozen: BTreeSet::new() })
}

// ── Adam ────────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS_DIV: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 1e-3;

/// Bias-corrected Adam state mirroring a network's parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_div: f64,
}

impl AdamState {
    pub fn new(net: &EmbeddingNet, lr: f64) -> Self {
        let m = net.params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.len()])).collect();
        let v = net.params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.len()])).collect();
        AdamState { m, v, t: 0, lr, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps_div: ADAM_EPS_DIV }
    }

    pub fn moment(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }
}

/// One Adam step over all unfrozen parameters; gradients are then cleared.
pub fn adam_step(net: &mut EmbeddingNet, state: &mut AdamState) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (name, param) in net.params.iter_mut() {
        if net.frozen.contains(name) {
            continue;
        }
        let grad = param
            .grad()
            .ok_or_else(|| Error::Contract(format!("adam_step: no gradient for '{name}'")))?
            .to_vec();
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("adam_step: state missing '{name}'")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("adam_step: state missing '{name}'")))?;
        let data = param.data_mut();
        for i in 0..data.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps_div);
        }
    }
    net.clear_grads();
    Ok(())
}

// ── Checkpoint persistence ──────────────────────────────────────────────

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this parameter's values within the blob.
    offset: u64,
    /// Number of float64 elements.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: NetConfig,
    params: Vec<ParamRecord>,
    adam: AdamMeta,
}

fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

/// Write `<base>.json` (manifest) and `<base>.bin` (little-endian float64
/// blob: parameters, then Adam m, then Adam v, in manifest order).
pub fn save_checkpoint(net: &EmbeddingNet, state: &AdamState, base: &Path) -> Result<()> {
    let mut records = Vec::new();
    let mut offset = 0u64;
    for (name, t) in &net.params {
        records.push(ParamRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len() as u64,
        });
        offset += (t.len() * 8) as u64;
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: net.config.clone(),
        params: records,
        adam: AdamMeta { t: state.t, lr: state.lr, beta1: state.beta1, beta2: state.beta2 },
    };

    let total: usize = net.params.values().map(Tensor::len).sum();
    let mut blob = Vec::with_capacity(total * 24);
    for t in net.params.values() {
        for &v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    for name in net.params.keys() {
        for &v in &state.m[name] {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    for name in net.params.keys() {
        for &v in &state.v[name] {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(manifest_path(base), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(blob_path(base), blob)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]; round trip is bit-exact.
pub fn load_checkpoint(base: &Path) -> Result<(EmbeddingNet, AdamState)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(base))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Persistence(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    manifest.config.validate().map_err(|e| Error::Persistence(e.to_string()))?;
    let plan = manifest.config.layer_plan();
    if plan.len() != manifest.params.len() {
        return Err(Error::Persistence(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            plan.len()
        )));
    }

    let blob = std::fs::read(blob_path(base))?;
    let mut expected_offset = 0u64;
    let mut total = 0usize;
    for (record, (name, shape)) in manifest.params.iter().zip(&plan) {
        if &record.name != name {
            return Err(Error::Persistence(format!(
                "parameter order mismatch: manifest '{}', expected '{name}'",
                record.name
            )));
        }
        let numel: usize = record.shape.iter().product();
        if record.shape != *shape || numel as u64 != record.len {
            return Err(Error::Persistence(format!(
                "inconsistent record for '{}': shape {:?} len {}",
                record.name, record.shape, record.len
            )));
        }
        if record.offset != expected_offset {
            return Err(Error::Persistence(format!(
                "non-contiguous offset for '{}': {} vs expected {expected_offset}",
                record.name, record.offset
            )));
        }
        expected_offset += record.len * 8;
        total += numel;
    }
    if blob.len() != total * 3 * 8 {
        return Err(Error::Persistence(format!(
            "blob holds {} bytes, manifest implies {}",
            blob.len(),
            total * 3 * 8
        )));
    }

    let read_section = |section: usize| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        let base_off = section * total * 8;
        let mut cursor = base_off;
        for record in &manifest.params {
            let n = record.len as usize;
            let mut values = Vec::with_capacity(n);
            for i in 0..n {
                let start = cursor + i * 8;
                let bytes: [u8; 8] = blob[start..start + 8].try_into().unwrap();
                values.push(f64::from_le_bytes(bytes));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Persistence(format!(
                    "non-finite values in checkpoint section {section} for '{}'",
                    record.name
                )));
            }
            cursor += n * 8;
            out.push(values);
        }
        Ok(out)
    };

    let param_values = read_section(0)?;
    let m_values = read_section(1)?;
    let v_values = read_section(2)?;

    let mut params = IndexMap::new();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    for (i, record) in manifest.params.iter().enumerate() {
        let t = Tensor::new(param_values[i].clone(), record.shape.clone())
            .map_err(|e| Error::Persistence(e.to_string()))?;
        params.insert(record.name.clone(), t);
        m.insert(record.name.clone(), m_values[i].clone());
        v.insert(record.name.clone(), v_values[i].clone());
    }
    let net = EmbeddingNet { config: manifest.config, params, frozen: BTreeSet::new() };
    let state = AdamState {
        m,
        v,
        t: manifest.adam.t,
        lr: manifest.adam.lr,
        beta1: manifest.adam.beta1,
        beta2: manifest.adam.beta2,
        eps_div: ADAM_EPS_DIV,
    };
    Ok((net, state))
}
