//! Model zoo: a multilayer perceptron and a small tapped CNN, both with
//! optional fixed-point quantization of the inner layers.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quant::{self, QuantConfig};
use crate::tensor::{BatchNormMode, BatchStats, Gradients, Graph, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchKind {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
    },
    /// Blocks of conv3×3 → batch-norm → ReLU → max-pool 2×2, then global
    /// average pooling and a linear head.
    TapCnn {
        in_channels: usize,
        image_size: usize,
        channels: Vec<usize>,
    },
}

/// Architecture plus the hidden layers (MLP) or blocks (CNN) whose
/// activations are exposed. The logits are always exposed in addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub classes: usize,
    pub taps: Vec<usize>,
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                Error::Validation(format!("{key}: {s:?} is not a non-negative integer"))
            })
        })
        .collect()
}

impl ArchDescriptor {
    pub fn tapcnn(in_channels: usize, image_size: usize, channels: Vec<usize>, classes: usize) -> Result<Self> {
        let taps = (0..channels.len()).collect();
        let d = Self {
            kind: ArchKind::TapCnn {
                in_channels,
                image_size,
                channels,
            },
            classes,
            taps,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        let taps = (0..hidden.len()).collect();
        let d = Self {
            kind: ArchKind::Mlp { input_dim, hidden },
            classes,
            taps,
        };
        d.validate()?;
        Ok(d)
    }

    /// Hidden layers for an MLP, blocks for a CNN.
    pub fn depth(&self) -> usize {
        match &self.kind {
            ArchKind::Mlp { hidden, .. } => hidden.len(),
            ArchKind::TapCnn { channels, .. } => channels.len(),
        }
    }

    /// Weight-bearing layers including the output layer.
    pub fn layer_count(&self) -> usize {
        self.depth() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Validation("at least two classes required".into()));
        }
        match &self.kind {
            ArchKind::Mlp { input_dim, hidden } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return Err(Error::Validation("MLP widths must be positive".into()));
                }
            }
            ArchKind::TapCnn {
                in_channels,
                image_size,
                channels,
            } => {
                if *in_channels == 0 || channels.is_empty() || channels.contains(&0) {
                    return Err(Error::Validation(
                        "CNN needs at least one block and positive channel counts".into(),
                    ));
                }
                if image_size % (1 << channels.len()) != 0 {
                    return Err(Error::Validation(format!(
                        "image size {image_size} is not divisible by 2^{} blocks",
                        channels.len()
                    )));
                }
            }
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.depth()) {
            return Err(Error::Validation(format!(
                "tap {t} refers to a missing layer (depth {})",
                self.depth()
            )));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("taps must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match &self.kind {
            ArchKind::Mlp { input_dim, .. } => vec![*input_dim],
            ArchKind::TapCnn {
                in_channels,
                image_size,
                ..
            } => vec![*in_channels, *image_size, *image_size],
        }
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        match &self.kind {
            ArchKind::Mlp { input_dim, hidden } => {
                out.push(("kind", "mlp".to_string()));
                out.push(("input_dim", input_dim.to_string()));
                out.push(("hidden", join(hidden)));
            }
            ArchKind::TapCnn {
                in_channels,
                image_size,
                channels,
            } => {
                out.push(("kind", "tapcnn".to_string()));
                out.push(("in_channels", in_channels.to_string()));
                out.push(("image_size", image_size.to_string()));
                out.push(("channels", join(channels)));
            }
        }
        out.push(("classes", self.classes.to_string()));
        out.push(("taps", join(&self.taps)));
        out
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parse the `key=value` lines written by [`to_text`](Self::to_text).
    /// Unrelated keys are ignored.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Validation(format!("descriptor lacks {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Validation(format!("descriptor field {k:?} is not an integer")))
        };
        let kind = match get("kind")? {
            "mlp" => ArchKind::Mlp {
                input_dim: num("input_dim")?,
                hidden: parse_list("hidden", get("hidden")?)?,
            },
            "tapcnn" => ArchKind::TapCnn {
                in_channels: num("in_channels")?,
                image_size: num("image_size")?,
                channels: parse_list("channels", get("channels")?)?,
            },
            other => return Err(Error::Validation(format!("unknown architecture {other:?}"))),
        };
        let d = Self {
            kind,
            classes: num("classes")?,
            taps: parse_list("taps", get("taps")?)?,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_map(&parse_kv(text)?)
    }

    /// Names of fields whose values differ.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let a: BTreeMap<_, _> = self.fields().into_iter().collect();
        let b: BTreeMap<_, _> = other.fields().into_iter().collect();
        let mut keys: Vec<_> = a.keys().chain(b.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .filter(|k| a.get(k) != b.get(k))
            .map(|k| {
                format!(
                    "{k}: {} vs {}",
                    a.get(k).map_or("-", String::as_str),
                    b.get(k).map_or("-", String::as_str)
                )
            })
            .collect()
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.fields().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

pub(crate) fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(format!("descriptor line {}", i + 1), "expected key=value")
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Result of one recorded forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Exposed hidden activations, shallow to deep.
    pub taps: Vec<Var>,
    /// Tape leaves of the model parameters, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub bn_stats: Vec<(usize, BatchStats<f32>)>,
}

impl ForwardOutput {
    /// Taps followed by the logits.
    pub fn tap_view(&self) -> Vec<Var> {
        let mut v = self.taps.clone();
        v.push(self.logits);
        v
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    descriptor: ArchDescriptor,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    quant: Option<QuantConfig>,
    mode: Mode,
    velocity: Vec<Vec<f32>>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

impl Model {
    pub fn new(descriptor: ArchDescriptor, quant: Option<QuantConfig>, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        if let Some(q) = &quant {
            q.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let push = |v: &mut Vec<NamedTensor>, name: String, value: Tensor<f32>| {
            v.push(NamedTensor { name, value })
        };
        let head_in = match &descriptor.kind {
            ArchKind::Mlp { input_dim, hidden } => {
                let mut prev = *input_dim;
                for (l, &w) in hidden.iter().enumerate() {
                    push(&mut params, format!("fc{l}.weight"), he_uniform(&mut rng, vec![prev, w], prev));
                    push(&mut params, format!("fc{l}.bias"), Tensor::zeros(&[w]));
                    prev = w;
                }
                prev
            }
            ArchKind::TapCnn {
                in_channels,
                channels,
                ..
            } => {
                let mut prev = *in_channels;
                for (b, &c) in channels.iter().enumerate() {
                    push(
                        &mut params,
                        format!("block{b}.conv.weight"),
                        he_uniform(&mut rng, vec![c, prev, 3, 3], prev * 9),
                    );
                    push(&mut params, format!("block{b}.bn.gamma"), Tensor::full(&[c], 1.0));
                    push(&mut params, format!("block{b}.bn.beta"), Tensor::zeros(&[c]));
                    push(&mut buffers, format!("block{b}.bn.running_mean"), Tensor::zeros(&[c]));
                    push(&mut buffers, format!("block{b}.bn.running_var"), Tensor::full(&[c], 1.0));
                    prev = c;
                }
                prev
            }
        };
        let k = descriptor.classes;
        push(&mut params, "head.weight".into(), he_uniform(&mut rng, vec![head_in, k], head_in));
        push(&mut params, "head.bias".into(), Tensor::zeros(&[k]));
        let velocity = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Ok(Self {
            descriptor,
            params,
            buffers,
            quant,
            mode: Mode::Train,
            velocity,
        })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    pub fn quant(&self) -> Option<&QuantConfig> {
        self.quant.as_ref()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    /// Parameters followed by buffers.
    pub fn state(&self) -> impl Iterator<Item = &NamedTensor> {
        self.params.iter().chain(&self.buffers)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.state().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Replace a parameter or buffer by name; the shape must match.
    pub fn set_state(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Validation(format!("no parameter named {name:?}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// sha256 over names, shapes and little-endian values of all state.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.state() {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn layer_quantized(&self, layer: usize) -> Option<u32> {
        self.quant
            .filter(|q| q.covers(layer, self.descriptor.layer_count()))
            .map(|q| q.n_bits)
    }

    /// Weight tensor of `layer` as seen by the forward pass.
    pub fn effective_weight(&self, layer: usize) -> Result<Tensor<f32>> {
        let name = self.weight_name(layer)?;
        let w = self.param(&name).unwrap();
        match self.layer_quantized(layer) {
            Some(bits) => quant::quantize_weights_value(w, bits),
            None => Ok(w.clone()),
        }
    }

    pub fn weight_name(&self, layer: usize) -> Result<String> {
        let depth = self.descriptor.depth();
        if layer > depth {
            return Err(Error::Validation(format!("layer {layer} of {}", depth + 1)));
        }
        Ok(if layer == depth {
            "head.weight".into()
        } else {
            match self.descriptor.kind {
                ArchKind::Mlp { .. } => format!("fc{layer}.weight"),
                ArchKind::TapCnn { .. } => format!("block{layer}.conv.weight"),
            }
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.descriptor.input_shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] || shape[0] == 0 {
            return Err(Error::dim(format!(
                "batch shape {shape:?} does not match N×{want:?}"
            )));
        }
        Ok(())
    }

    fn weight(&self, g: &mut Graph<f32>, w: Var, layer: usize) -> Result<Var> {
        match self.layer_quantized(layer) {
            Some(bits) => quant::quantize_weights(g, w, bits),
            None => Ok(w),
        }
    }

    fn activation(&self, g: &mut Graph<f32>, a: Var, layer: usize) -> Result<Var> {
        match self.layer_quantized(layer) {
            Some(bits) => quant::quantize_activations(g, a, bits),
            None => Ok(a),
        }
    }

    /// Record a forward pass. Parameters enter the tape as trainable leaves
    /// when `trainable`, as constants otherwise.
    pub fn forward_with_taps(&self, g: &mut Graph<f32>, x: Var, trainable: bool) -> Result<ForwardOutput> {
        self.check_input(g.shape(x))?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let mut hidden = Vec::new();
        let mut bn_stats = Vec::new();
        let mut h = x;
        let mut pi = 0;
        match &self.descriptor.kind {
            ArchKind::Mlp { hidden: widths, .. } => {
                for l in 0..widths.len() {
                    let w = self.weight(g, params[pi], l)?;
                    let z = g.matmul(h, w)?;
                    let z = g.add_bias(z, params[pi + 1])?;
                    pi += 2;
                    let a = g.relu(z);
                    h = self.activation(g, a, l)?;
                    hidden.push(h);
                }
            }
            ArchKind::TapCnn { channels, .. } => {
                for b in 0..channels.len() {
                    let w = self.weight(g, params[pi], b)?;
                    let z = g.conv2d(h, w, 1, 1)?;
                    let mode = match self.mode {
                        Mode::Train => BatchNormMode::Train { eps: BN_EPS },
                        Mode::Eval => BatchNormMode::Eval {
                            mean: self.buffers[2 * b].value.data(),
                            var: self.buffers[2 * b + 1].value.data(),
                            eps: BN_EPS,
                        },
                    };
                    let (z, stats) = g.batch_norm(z, params[pi + 1], params[pi + 2], mode)?;
                    if let Some(s) = stats {
                        bn_stats.push((b, s));
                    }
                    pi += 3;
                    let a = g.relu(z);
                    let a = self.activation(g, a, b)?;
                    hidden.push(a);
                    h = g.max_pool2(a)?;
                }
                h = g.global_avg_pool(h)?;
            }
        }
        let depth = self.descriptor.depth();
        let w = self.weight(g, params[pi], depth)?;
        let z = g.matmul(h, w)?;
        let logits = g.add_bias(z, params[pi + 1])?;
        let taps = self.descriptor.taps.iter().map(|&t| hidden[t]).collect();
        Ok(ForwardOutput {
            logits,
            taps,
            params,
            bn_stats,
        })
    }

    /// Fold batch statistics into the running averages.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats<f32>)]) {
        for (b, s) in stats {
            let mean = self.buffers[2 * b].value.data_mut();
            for (r, &m) in mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let var = self.buffers[2 * b + 1].value.data_mut();
            for (r, &v) in var.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Logits for a whole set of inputs in the current mode, evaluated in
    /// chunks of `batch` without recording gradients.
    pub fn predict(&self, inputs: &Tensor<f32>, batch: usize) -> Result<Tensor<f32>> {
        self.check_input(inputs.shape())?;
        let n = inputs.shape()[0];
        let per: usize = inputs.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(n * self.descriptor.classes);
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let mut shape = inputs.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, inputs.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let f = self.forward_with_taps(&mut g, x, false)?;
            out.extend_from_slice(g.value(f.logits).data());
            start = end;
        }
        Tensor::new(vec![n, self.descriptor.classes], out)
    }

    /// Add tape gradients of the parameter leaves into the parameter
    /// gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<f32>, leaves: &[Var]) -> Result<()> {
        let flat: Vec<Option<Vec<f32>>> = leaves.iter().map(|&v| grads.get(v).map(<[f32]>::to_vec)).collect();
        self.accumulate_flat(&flat)
    }

    /// [`accumulate`](Self::accumulate) from per-parameter vectors; `None`
    /// entries are skipped.
    pub fn accumulate_flat(&mut self, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match p.value.grad_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.value.set_grad(g.clone())?,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }

    /// Nesterov momentum step: `g += wd·w; v = μ·v + g; w -= lr·(g + μ·v)`.
    /// Consumes the gradients.
    pub fn sgd_step(&mut self, cfg: &SgdConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.value.grad().is_none()) {
            return Err(Error::Usage(format!("parameter {} has no gradient", p.name)));
        }
        for (p, vel) in self.params.iter_mut().zip(&mut self.velocity) {
            let grad = p.value.take_grad().unwrap();
            for ((w, v), g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                let g = g + cfg.weight_decay * *w;
                *v = cfg.momentum * *v + g;
                *w -= cfg.lr * (g + cfg.momentum * *v);
            }
        }
        Ok(())
    }

    /// Copy all parameters and buffers from `source`, whose descriptor must
    /// match exactly, and reset the optimizer state.
    pub fn init_from(&mut self, source: &Model) -> Result<()> {
        let diff = self.descriptor.diff(&source.descriptor);
        if !diff.is_empty() {
            return Err(Error::Incompatible(diff.join("; ")));
        }
        self.params = source.params.clone();
        self.buffers = source.buffers.clone();
        self.zero_grad();
        self.velocity.iter_mut().for_each(|v| v.fill(0.0));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cnn() -> ArchDescriptor {
        ArchDescriptor::tapcnn(3, 8, vec![4, 6, 8], 5).unwrap()
    }

    fn batch(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn tap_shapes() {
        let m = Model::new(cnn(), None, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch(vec![2, 3, 8, 8], 1));
        let f = m.forward_with_taps(&mut g, x, true).unwrap();
        let shapes: Vec<_> = f.tap_view().iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 4, 8, 8], vec![2, 6, 4, 4], vec![2, 8, 2, 2], vec![2, 5]]
        );
        assert_eq!(f.bn_stats.len(), 3);
    }

    #[test]
    fn linear_mlp_taps_only_logits() {
        let d = ArchDescriptor::mlp(4, vec![], 3).unwrap();
        let m = Model::new(d, None, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch(vec![5, 4], 2));
        let f = m.forward_with_taps(&mut g, x, true).unwrap();
        assert!(f.taps.is_empty());
        assert_eq!(f.tap_view(), vec![f.logits]);
    }

    #[test]
    fn descriptor_validation() {
        assert!(ArchDescriptor::tapcnn(3, 12, vec![4, 4, 4], 2).is_err());
        let mut d = cnn();
        d.taps = vec![3];
        assert!(d.validate().is_err());
        d.taps = vec![1, 0];
        assert!(d.validate().is_err());
        let text = cnn().to_text();
        assert_eq!(ArchDescriptor::from_text(&text).unwrap(), cnn());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let m = Model::new(cnn(), None, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch(vec![2, 1, 8, 8], 1));
        assert!(matches!(m.forward_with_taps(&mut g, x, true), Err(Error::Dimension(_))));
    }

    #[test]
    fn quantized_layers_use_grid_and_edges_stay_exact() {
        let q = QuantConfig::new(4).unwrap();
        let fp = Model::new(cnn(), None, 3).unwrap();
        let mut qm = Model::new(cnn(), Some(q), 99).unwrap();
        qm.init_from(&fp).unwrap();
        assert_eq!(qm.param_hash(), fp.param_hash());
        let l = quant::levels(4) as f32;
        for layer in 1..3 {
            for &w in qm.effective_weight(layer).unwrap().data() {
                let k = (w + 1.0) / 2.0 * l;
                assert!((k - k.round()).abs() < 1e-4, "{w} off grid");
            }
        }
        assert_eq!(&qm.effective_weight(0).unwrap(), qm.param("block0.conv.weight").unwrap());
        assert_eq!(&qm.effective_weight(3).unwrap(), qm.param("head.weight").unwrap());
        let x = batch(vec![3, 3, 8, 8], 4);
        let a = fp.predict(&x, 8).unwrap();
        let b = qm.predict(&x, 8).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn init_from_copies_bit_exact_and_rejects_mismatch() {
        let src = Model::new(cnn(), None, 5).unwrap();
        let mut dst = Model::new(cnn(), None, 6).unwrap();
        dst.init_from(&src).unwrap();
        let x = batch(vec![2, 3, 8, 8], 7);
        assert_eq!(src.predict(&x, 2).unwrap(), dst.predict(&x, 2).unwrap());
        let other = ArchDescriptor::tapcnn(3, 8, vec![4, 7, 8], 5).unwrap();
        let mut bad = Model::new(other, None, 0).unwrap();
        match bad.init_from(&src) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("channels")),
            r => panic!("{r:?}"),
        }
    }

    fn single_param_model() -> Model {
        let d = ArchDescriptor::mlp(1, vec![], 2).unwrap();
        Model::new(d, None, 0).unwrap()
    }

    #[test]
    fn plain_sgd_and_decay() {
        let mut m = single_param_model();
        let w0 = m.params()[0].value.data().to_vec();
        for p in m.params_mut() {
            let n = p.value.numel();
            p.value.set_grad(vec![1.0; n]).unwrap();
        }
        m.sgd_step(&SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        for (a, b) in m.params()[0].value.data().iter().zip(&w0) {
            assert!((a - (b - 0.1)).abs() < 1e-7);
        }
        let w1 = m.params()[0].value.data().to_vec();
        for p in m.params_mut() {
            let n = p.value.numel();
            p.value.set_grad(vec![0.0; n]).unwrap();
        }
        m.sgd_step(&SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 5e-4 }).unwrap();
        for (a, b) in m.params()[0].value.data().iter().zip(&w1) {
            assert!((a - b * (1.0 - 0.1 * 5e-4)).abs() < 1e-7);
        }
    }

    #[test]
    fn nesterov_two_steps() {
        let mut m = single_param_model();
        let w0 = m.params()[0].value.data()[0];
        let (lr, mu, g) = (0.1f32, 0.9f32, 0.5f32);
        for _ in 0..2 {
            for p in m.params_mut() {
                let n = p.value.numel();
                p.value.set_grad(vec![g; n]).unwrap();
            }
            m.sgd_step(&SgdConfig { lr, momentum: mu, weight_decay: 0.0 }).unwrap();
        }
        // v1 = g, step1 = g + mu·g; v2 = mu·g + g, step2 = g + mu·(mu·g + g)
        let want = w0 - lr * (g + mu * g) - lr * (g + mu * (mu * g + g));
        assert!((m.params()[0].value.data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut m = single_param_model();
        assert!(matches!(
            m.sgd_step(&SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn eval_mode_is_deterministic_and_batch_independent() {
        let mut m = Model::new(cnn(), None, 8).unwrap();
        m.set_mode(Mode::Eval);
        let x = batch(vec![4, 3, 8, 8], 9);
        let a = m.predict(&x, 4).unwrap();
        let b = m.predict(&x, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_names_for_quantized_and_full_precision() {
        let a = Model::new(cnn(), None, 0).unwrap();
        let b = Model::new(cnn(), Some(QuantConfig::new(2).unwrap()), 0).unwrap();
        let names = |m: &Model| m.state().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect::<Vec<_>>();
        assert_eq!(names(&a), names(&b));
    }
}
