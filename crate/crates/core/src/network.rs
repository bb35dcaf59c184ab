//! Small trainable convolutional networks with hand-written forward and
//! backward passes: 3x3 periodic convolutions, SiLU-family activations, a
//! per-channel noise-embedding bias, and 2x average-pool / nearest-upsample
//! resampling. Everything runs in f64; checkpoints serialize to f32 tensors.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{seed_rng, Stream};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};
use crate::volume::Volume;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a network: channel plan, resampling depth, activation, and the
/// seed that determines its initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Hidden widths, one per stage; must be non-empty (two convolutions
    /// minimum, receptive field >= 5 pixels).
    pub hidden: Vec<usize>,
    /// Number of 2x down/up-sampling levels (0-2).
    pub downsample_depth: usize,
    pub activation: Activation,
    pub param_seed: u64,
}

impl ConvNetSpec {
    fn validate(&self, need_stage_per_pool: bool) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CoreError::InvalidArgument("channel counts must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(CoreError::InvalidArgument(
                "hidden widths must be non-empty and positive".into(),
            ));
        }
        if self.downsample_depth > 2 {
            return Err(CoreError::InvalidArgument("downsample depth is capped at 2".into()));
        }
        let stages = self.hidden.len();
        let ok = if need_stage_per_pool {
            // Hourglass: each pool consumes one of the stages after the first.
            self.downsample_depth <= stages.saturating_sub(1)
        } else {
            self.downsample_depth <= stages
        };
        if !ok {
            return Err(CoreError::InvalidArgument(format!(
                "downsample depth {} needs more hidden stages than {}",
                self.downsample_depth, stages
            )));
        }
        Ok(())
    }
}

/// Serializable description of one layer; a checkpoint stores the full list
/// so the net can be rebuilt without replaying constructor logic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv { in_c: usize, out_c: usize },
    NoiseBias { channels: usize },
    Act { activation: Activation },
    AvgPool2,
    Upsample2,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { in_c: usize, out_c: usize, weight: Vec<f64>, bias: Vec<f64> },
    NoiseBias { weight: Vec<f64> },
    Act(Activation),
    AvgPool2,
    Upsample2,
}

impl Layer {
    fn desc(&self) -> LayerDesc {
        match self {
            Layer::Conv { in_c, out_c, .. } => LayerDesc::Conv { in_c: *in_c, out_c: *out_c },
            Layer::NoiseBias { weight } => LayerDesc::NoiseBias { channels: weight.len() },
            Layer::Act(a) => LayerDesc::Act { activation: *a },
            Layer::AvgPool2 => LayerDesc::AvgPool2,
            Layer::Upsample2 => LayerDesc::Upsample2,
        }
    }

    fn from_desc(d: &LayerDesc) -> Layer {
        match d {
            LayerDesc::Conv { in_c, out_c } => Layer::Conv {
                in_c: *in_c,
                out_c: *out_c,
                weight: vec![0.0; out_c * in_c * 9],
                bias: vec![0.0; *out_c],
            },
            LayerDesc::NoiseBias { channels } => Layer::NoiseBias { weight: vec![0.0; *channels] },
            LayerDesc::Act { activation } => Layer::Act(*activation),
            LayerDesc::AvgPool2 => Layer::AvgPool2,
            LayerDesc::Upsample2 => Layer::Upsample2,
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Conv { weight, bias, .. } => weight.len() + bias.len(),
            Layer::NoiseBias { weight } => weight.len(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// Flat learnable-parameter vector plus its layout descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    pub layout: Vec<ParamEntry>,
}

impl ParamVector {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

struct Cache {
    /// Input volume of every layer, in forward order.
    inputs: Vec<Volume>,
    embed: f64,
}

/// A layer stack with tape-based backward. Training callers use
/// `forward`/`backward`; frozen inference uses `forward_inference`, which is
/// safe for concurrent use.
pub struct ConvNet {
    layers: Vec<Layer>,
    in_channels: usize,
    out_channels: usize,
    cache: Option<Cache>,
}

impl ConvNet {
    /// Resolution-preserving denoiser backbone F(x; noise): first conv gets a
    /// per-channel noise-embedding bias; the final conv is zero-initialized
    /// so the wrapped denoiser starts at the skip path.
    pub fn denoiser(spec: &ConvNetSpec) -> Result<ConvNet> {
        spec.validate(true)?;
        let mut rng = seed_rng(spec.param_seed);
        let d = spec.downsample_depth;
        let mut layers = Vec::new();
        layers.push(conv_init(spec.in_channels, spec.hidden[0], &mut rng));
        layers.push(Layer::NoiseBias { weight: vec![0.0; spec.hidden[0]] });
        layers.push(Layer::Act(spec.activation));
        for i in 1..spec.hidden.len() {
            if i <= d {
                layers.push(Layer::AvgPool2);
            }
            layers.push(conv_init(spec.hidden[i - 1], spec.hidden[i], &mut rng));
            layers.push(Layer::Act(spec.activation));
        }
        let last = *spec.hidden.last().expect("validated non-empty");
        for _ in 0..d {
            layers.push(Layer::Upsample2);
            layers.push(conv_init(last, last, &mut rng));
            layers.push(Layer::Act(spec.activation));
        }
        layers.push(conv_zero(last, spec.out_channels));
        Ok(ConvNet::from_layers(layers, spec.in_channels, spec.out_channels))
    }

    /// Like [`ConvNet::denoiser`] but without the noise-embedding bias; used
    /// for the deterministic baseline regressor.
    pub fn regressor(spec: &ConvNetSpec) -> Result<ConvNet> {
        let mut net = ConvNet::denoiser(spec)?;
        net.layers.retain(|l| !matches!(l, Layer::NoiseBias { .. }));
        Ok(net)
    }

    /// Downsampling encoder: output at input resolution / 2^depth.
    pub fn encoder(spec: &ConvNetSpec) -> Result<ConvNet> {
        spec.validate(false)?;
        let mut rng = seed_rng(spec.param_seed);
        let mut layers = Vec::new();
        let mut prev = spec.in_channels;
        for (i, &h) in spec.hidden.iter().enumerate() {
            layers.push(conv_init(prev, h, &mut rng));
            layers.push(Layer::Act(spec.activation));
            if i < spec.downsample_depth {
                layers.push(Layer::AvgPool2);
            }
            prev = h;
        }
        layers.push(conv_init(prev, spec.out_channels, &mut rng));
        Ok(ConvNet::from_layers(layers, spec.in_channels, spec.out_channels))
    }

    /// Upsampling decoder: output at input resolution * 2^depth.
    pub fn decoder(spec: &ConvNetSpec) -> Result<ConvNet> {
        spec.validate(false)?;
        let mut rng = seed_rng(spec.param_seed);
        let mut layers = Vec::new();
        let mut prev = spec.in_channels;
        for (i, &h) in spec.hidden.iter().enumerate() {
            layers.push(conv_init(prev, h, &mut rng));
            layers.push(Layer::Act(spec.activation));
            if i < spec.downsample_depth {
                layers.push(Layer::Upsample2);
            }
            prev = h;
        }
        layers.push(conv_init(prev, spec.out_channels, &mut rng));
        Ok(ConvNet::from_layers(layers, spec.in_channels, spec.out_channels))
    }

    pub fn from_structure(descs: &[LayerDesc]) -> Result<ConvNet> {
        if descs.is_empty() {
            return Err(CoreError::InvalidArgument("empty layer structure".into()));
        }
        let layers: Vec<Layer> = descs.iter().map(Layer::from_desc).collect();
        let in_channels = layers
            .iter()
            .find_map(|l| match l {
                Layer::Conv { in_c, .. } => Some(*in_c),
                _ => None,
            })
            .ok_or_else(|| CoreError::InvalidArgument("structure has no conv layer".into()))?;
        let out_channels = layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv { out_c, .. } => Some(*out_c),
                _ => None,
            })
            .expect("checked above");
        Ok(ConvNet::from_layers(layers, in_channels, out_channels))
    }

    fn from_layers(layers: Vec<Layer>, in_channels: usize, out_channels: usize) -> ConvNet {
        ConvNet { layers, in_channels, out_channels, cache: None }
    }

    pub fn structure(&self) -> Vec<LayerDesc> {
        self.layers.iter().map(Layer::desc).collect()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Forward pass that records the tape for a following `backward` call.
    pub fn forward(&mut self, input: &Volume, noise_embed: f64) -> Result<Volume> {
        let (out, inputs) = self.run_forward(input, noise_embed, true)?;
        self.cache = Some(Cache { inputs: inputs.expect("requested tape"), embed: noise_embed });
        Ok(out)
    }

    /// Pure forward pass on frozen parameters (no tape, concurrent-safe).
    pub fn forward_inference(&self, input: &Volume, noise_embed: f64) -> Result<Volume> {
        Ok(self.run_forward(input, noise_embed, false)?.0)
    }

    fn run_forward(
        &self,
        input: &Volume,
        noise_embed: f64,
        keep_tape: bool,
    ) -> Result<(Volume, Option<Vec<Volume>>)> {
        if input.c != self.in_channels {
            return Err(CoreError::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.in_channels, input.c
            )));
        }
        let mut tape = if keep_tape { Some(Vec::with_capacity(self.layers.len())) } else { None };
        let mut x = input.clone();
        for layer in &self.layers {
            if let Some(t) = tape.as_mut() {
                t.push(x.clone());
            }
            x = layer_forward(layer, &x, noise_embed)?;
        }
        if !x.is_finite() {
            return Err(CoreError::NonFinite("network output".into()));
        }
        Ok((x, tape))
    }

    /// Backpropagates `out_grad` (dLoss/dOutput) through the tape recorded by
    /// the latest `forward`, consuming it.
    pub fn backward(&mut self, out_grad: &Volume) -> Result<BackwardResult> {
        let cache = self.cache.take().ok_or_else(|| {
            CoreError::CallOrder("backward called without a preceding forward".into())
        })?;
        let mut grads = ParamVector { data: vec![0.0; self.num_params()], layout: self.layout() };

        let mut g = out_grad.clone();
        let mut offsets: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.param_count();
        }
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            g = layer_backward(layer, input, &g, cache.embed, &mut grads.data[offsets[i]..offsets[i] + layer.param_count()])?;
        }
        Ok(BackwardResult { grads, input_grad: g })
    }

    pub fn layout(&self) -> Vec<ParamEntry> {
        let mut entries = Vec::new();
        let mut off = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { in_c, out_c, weight, bias } => {
                    entries.push(ParamEntry {
                        name: format!("layer{i}.conv.weight"),
                        offset: off,
                        len: weight.len(),
                        shape: vec![*out_c, *in_c, 3, 3],
                    });
                    off += weight.len();
                    entries.push(ParamEntry {
                        name: format!("layer{i}.conv.bias"),
                        offset: off,
                        len: bias.len(),
                        shape: vec![*out_c],
                    });
                    off += bias.len();
                }
                Layer::NoiseBias { weight } => {
                    entries.push(ParamEntry {
                        name: format!("layer{i}.noise_bias.weight"),
                        offset: off,
                        len: weight.len(),
                        shape: vec![weight.len()],
                    });
                    off += weight.len();
                }
                _ => {}
            }
        }
        entries
    }

    pub fn params(&self) -> ParamVector {
        let mut data = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } => {
                    data.extend_from_slice(weight);
                    data.extend_from_slice(bias);
                }
                Layer::NoiseBias { weight } => data.extend_from_slice(weight),
                _ => {}
            }
        }
        ParamVector { data, layout: self.layout() }
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(CoreError::ShapeMismatch(format!(
                "parameter vector has {} entries, network needs {}",
                flat.len(),
                self.num_params()
            )));
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("parameter vector".into()));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } => {
                    let (wl, bl) = (weight.len(), bias.len());
                    weight.copy_from_slice(&flat[off..off + wl]);
                    off += wl;
                    bias.copy_from_slice(&flat[off..off + bl]);
                    off += bl;
                }
                Layer::NoiseBias { weight } => {
                    let wl = weight.len();
                    weight.copy_from_slice(&flat[off..off + wl]);
                    off += wl;
                }
                _ => {}
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Writes `{prefix}.edmt` (f32 parameters) and `{prefix}.json` (structure,
    /// layout, caller metadata).
    pub fn save_checkpoint(&self, prefix: &std::path::Path, extra: serde_json::Value) -> Result<()> {
        let params = self.params();
        let tensor =
            Tensor::new(vec![params.data.len()], params.data.iter().map(|&v| v as f32).collect())?;
        write_tensor_file(&prefix.with_extension("edmt"), &tensor)?;
        let sidecar = CheckpointSidecar {
            structure: self.structure(),
            layout: params.layout,
            extra,
        };
        std::fs::write(
            prefix.with_extension("json"),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load_checkpoint(prefix: &std::path::Path) -> Result<(ConvNet, serde_json::Value)> {
        let text = std::fs::read_to_string(prefix.with_extension("json"))?;
        let sidecar: CheckpointSidecar = serde_json::from_str(&text)?;
        let tensor = read_tensor_file(&prefix.with_extension("edmt"))?;
        let mut net = ConvNet::from_structure(&sidecar.structure)?;
        let flat: Vec<f64> = tensor.data().iter().map(|&v| v as f64).collect();
        net.set_params(&flat)?;
        Ok((net, sidecar.extra))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointSidecar {
    structure: Vec<LayerDesc>,
    layout: Vec<ParamEntry>,
    extra: serde_json::Value,
}

pub struct BackwardResult {
    pub grads: ParamVector,
    pub input_grad: Volume,
}

fn conv_init(in_c: usize, out_c: usize, rng: &mut Stream) -> Layer {
    let std = (2.0 / (in_c as f64 * 9.0)).sqrt();
    let weight = (0..out_c * in_c * 9)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Layer::Conv { in_c, out_c, weight, bias: vec![0.0; out_c] }
}

fn conv_zero(in_c: usize, out_c: usize) -> Layer {
    Layer::Conv { in_c, out_c, weight: vec![0.0; out_c * in_c * 9], bias: vec![0.0; out_c] }
}

fn layer_forward(layer: &Layer, x: &Volume, embed: f64) -> Result<Volume> {
    match layer {
        Layer::Conv { in_c, out_c, weight, bias } => {
            if x.c != *in_c {
                return Err(CoreError::ShapeMismatch(format!(
                    "conv expects {in_c} channels, got {}",
                    x.c
                )));
            }
            Ok(conv3x3_periodic(x, weight, bias, *in_c, *out_c))
        }
        Layer::NoiseBias { weight } => {
            if x.c != weight.len() {
                return Err(CoreError::ShapeMismatch("noise-bias channel count".into()));
            }
            let mut out = x.clone();
            for (c, &wc) in weight.iter().enumerate() {
                let add = wc * embed;
                for v in out.plane_mut(c) {
                    *v += add;
                }
            }
            Ok(out)
        }
        Layer::Act(a) => {
            let mut out = x.clone();
            for v in &mut out.data {
                *v = a.apply(*v);
            }
            Ok(out)
        }
        Layer::AvgPool2 => {
            if x.h % 2 != 0 || x.w % 2 != 0 {
                return Err(CoreError::ShapeMismatch(format!(
                    "average pool needs even dims, got {}x{}",
                    x.h, x.w
                )));
            }
            let (oh, ow) = (x.h / 2, x.w / 2);
            let mut out = Volume::zeros(x.c, oh, ow);
            for c in 0..x.c {
                let src = x.plane(c);
                let dst = out.plane_mut(c);
                for y in 0..oh {
                    let r0 = &src[(2 * y) * x.w..(2 * y) * x.w + x.w];
                    let r1 = &src[(2 * y + 1) * x.w..(2 * y + 1) * x.w + x.w];
                    for xx in 0..ow {
                        dst[y * ow + xx] =
                            0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
                    }
                }
            }
            Ok(out)
        }
        Layer::Upsample2 => {
            let (oh, ow) = (x.h * 2, x.w * 2);
            let mut out = Volume::zeros(x.c, oh, ow);
            for c in 0..x.c {
                let src = x.plane(c);
                let dst = out.plane_mut(c);
                for y in 0..oh {
                    let sy = y / 2;
                    for xx in 0..ow {
                        dst[y * ow + xx] = src[sy * x.w + xx / 2];
                    }
                }
            }
            Ok(out)
        }
    }
}

fn layer_backward(
    layer: &Layer,
    input: &Volume,
    g: &Volume,
    embed: f64,
    param_grads: &mut [f64],
) -> Result<Volume> {
    match layer {
        Layer::Conv { in_c, out_c, weight, .. } => {
            let (dw, db, dx) = conv3x3_periodic_backward(input, g, weight, *in_c, *out_c);
            param_grads[..dw.len()].copy_from_slice(&dw);
            param_grads[dw.len()..].copy_from_slice(&db);
            Ok(dx)
        }
        Layer::NoiseBias { weight } => {
            for c in 0..weight.len() {
                param_grads[c] = embed * g.plane(c).iter().sum::<f64>();
            }
            Ok(g.clone())
        }
        Layer::Act(a) => {
            let mut dx = g.clone();
            for (d, xi) in dx.data.iter_mut().zip(&input.data) {
                *d *= a.derivative(*xi);
            }
            Ok(dx)
        }
        Layer::AvgPool2 => {
            let mut dx = Volume::zeros(input.c, input.h, input.w);
            for c in 0..input.c {
                let src = g.plane(c);
                let dst = dx.plane_mut(c);
                let (oh, ow) = (input.h / 2, input.w / 2);
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = 0.25 * src[y * ow + xx];
                        dst[(2 * y) * input.w + 2 * xx] = v;
                        dst[(2 * y) * input.w + 2 * xx + 1] = v;
                        dst[(2 * y + 1) * input.w + 2 * xx] = v;
                        dst[(2 * y + 1) * input.w + 2 * xx + 1] = v;
                    }
                }
            }
            Ok(dx)
        }
        Layer::Upsample2 => {
            let mut dx = Volume::zeros(input.c, input.h, input.w);
            for c in 0..input.c {
                let src = g.plane(c);
                let dst = dx.plane_mut(c);
                let gw = input.w * 2;
                for y in 0..input.h {
                    for xx in 0..input.w {
                        let mut acc = 0.0;
                        acc += src[(2 * y) * gw + 2 * xx];
                        acc += src[(2 * y) * gw + 2 * xx + 1];
                        acc += src[(2 * y + 1) * gw + 2 * xx];
                        acc += src[(2 * y + 1) * gw + 2 * xx + 1];
                        dst[y * input.w + xx] = acc;
                    }
                }
            }
            Ok(dx)
        }
    }
}

/// Copies each channel into an (h+2) x (w+2) buffer with periodic halo.
fn pad_periodic(x: &Volume) -> (Vec<f64>, usize, usize) {
    let (h, w) = (x.h, x.w);
    let (ph, pw) = (h + 2, w + 2);
    let mut pad = vec![0.0; x.c * ph * pw];
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = &mut pad[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..h {
            dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..y * w + w]);
            dst[(y + 1) * pw] = src[y * w + (w - 1)];
            dst[(y + 1) * pw + w + 1] = src[y * w];
        }
        // Top/bottom halo rows wrap, including corners.
        let (top, rest) = dst.split_at_mut(pw);
        top.copy_from_slice(&rest[(h - 1) * pw..h * pw]);
        let (body, bottom) = rest.split_at_mut(h * pw);
        bottom.copy_from_slice(&body[..pw]);
    }
    (pad, ph, pw)
}

fn conv3x3_periodic(x: &Volume, weight: &[f64], bias: &[f64], in_c: usize, out_c: usize) -> Volume {
    let (h, w) = (x.h, x.w);
    let (pad, _ph, pw) = pad_periodic(x);
    let plane = (h + 2) * pw;
    let mut out = Volume::zeros(out_c, h, w);
    for oc in 0..out_c {
        let dst = out.plane_mut(oc);
        dst.fill(bias[oc]);
        for ic in 0..in_c {
            let padp = &pad[ic * plane..(ic + 1) * plane];
            let wbase = (oc * in_c + ic) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let coeff = weight[wbase + ky * 3 + kx];
                    if coeff == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let src = &padp[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        let row = &mut dst[y * w..y * w + w];
                        for i in 0..w {
                            row[i] += coeff * src[i];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_periodic_backward(
    x: &Volume,
    g: &Volume,
    weight: &[f64],
    in_c: usize,
    out_c: usize,
) -> (Vec<f64>, Vec<f64>, Volume) {
    let (h, w) = (x.h, x.w);
    let (pad, ph, pw) = pad_periodic(x);
    let plane = ph * pw;
    let mut dw = vec![0.0; out_c * in_c * 9];
    let mut db = vec![0.0; out_c];
    let mut dpad = vec![0.0; in_c * plane];

    for oc in 0..out_c {
        let gp = g.plane(oc);
        db[oc] = gp.iter().sum();
        for ic in 0..in_c {
            let padp = &pad[ic * plane..(ic + 1) * plane];
            let dpadp = &mut dpad[ic * plane..(ic + 1) * plane];
            let wbase = (oc * in_c + ic) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let coeff = weight[wbase + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in 0..h {
                        let grow = &gp[y * w..y * w + w];
                        let srow = &padp[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        let drow = &mut dpadp[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        for i in 0..w {
                            acc += grow[i] * srow[i];
                            drow[i] += coeff * grow[i];
                        }
                    }
                    dw[wbase + ky * 3 + kx] = acc;
                }
            }
        }
    }

    // Fold the padded-gradient halo back onto the torus.
    let mut dx = Volume::zeros(in_c, h, w);
    for ic in 0..in_c {
        let dpadp = &dpad[ic * plane..(ic + 1) * plane];
        let dst = dx.plane_mut(ic);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = dpadp[(y + 1) * pw + xx + 1];
            }
        }
        for xx in 0..w {
            dst[(h - 1) * w + xx] += dpadp[xx + 1]; // top halo row
            dst[xx] += dpadp[(h + 1) * pw + xx + 1]; // bottom halo row
        }
        for y in 0..h {
            dst[y * w + (w - 1)] += dpadp[(y + 1) * pw]; // left halo col
            dst[y * w] += dpadp[(y + 1) * pw + w + 1]; // right halo col
        }
        dst[(h - 1) * w + (w - 1)] += dpadp[0];
        dst[(h - 1) * w] += dpadp[pw - 1];
        dst[w - 1] += dpadp[(h + 1) * pw];
        dst[0] += dpadp[(h + 2) * pw - 1];
    }
    (dw, db, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn small_spec(seed: u64) -> ConvNetSpec {
        ConvNetSpec {
            in_channels: 2,
            out_channels: 1,
            hidden: vec![4, 3],
            downsample_depth: 0,
            activation: Activation::Silu,
            param_seed: seed,
        }
    }

    fn random_volume(c: usize, h: usize, w: usize, seed: u64) -> Volume {
        let mut rng = seed_rng(seed);
        let mut v = Volume::zeros(c, h, w);
        for x in &mut v.data {
            *x = rng.gen_range(-1.5..1.5);
        }
        v
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut net = ConvNet::denoiser(&small_spec(3)).unwrap();
        let x = random_volume(2, 6, 6, 9);
        let out = net.forward(&x, 0.3).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = ConvNet::encoder(&small_spec(5)).unwrap();
        let x = random_volume(2, 6, 6, 10);
        let a = net.forward_inference(&x, 0.1).unwrap();
        let b = net.forward_inference(&x, 0.1).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = ConvNet::encoder(&small_spec(5)).unwrap();
        let g = Volume::zeros(1, 6, 6);
        assert!(matches!(net.backward(&g), Err(CoreError::CallOrder(_))));
    }

    #[test]
    fn gradients_are_additive_and_linear() {
        let mut net = ConvNet::encoder(&small_spec(8)).unwrap();
        let x = random_volume(2, 4, 4, 11);
        let r1 = random_volume(1, 4, 4, 12);
        let r2 = random_volume(1, 4, 4, 13);

        net.forward(&x, 0.0).unwrap();
        let g1 = net.backward(&r1).unwrap().grads;
        net.forward(&x, 0.0).unwrap();
        let g2 = net.backward(&r2).unwrap().grads;
        net.forward(&x, 0.0).unwrap();
        let gsum = net.backward(&r1.add(&r2).unwrap()).unwrap().grads;
        for i in 0..gsum.data.len() {
            let expect = g1.data[i] + g2.data[i];
            assert!((gsum.data[i] - expect).abs() < 1e-9 * expect.abs().max(1.0));
        }

        // Zero loss gradient -> zero parameter gradient.
        net.forward(&x, 0.0).unwrap();
        let gz = net.backward(&Volume::zeros(1, 4, 4)).unwrap().grads;
        assert!(gz.data.iter().all(|&v| v == 0.0));
    }

    // Central finite difference against analytic gradients for every layer
    // type, via small nets that isolate each layer kind.
    fn gradcheck(net: &mut ConvNet, x: &Volume, embed: f64) {
        let r = random_volume(
            net.out_channels,
            // probe output shape first
            net.forward_inference(x, embed).unwrap().h,
            net.forward_inference(x, embed).unwrap().w,
            999,
        );
        let loss = |net: &ConvNet| -> f64 {
            let out = net.forward_inference(x, embed).unwrap();
            out.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        net.forward(x, embed).unwrap();
        let analytic = net.backward(&r).unwrap().grads;

        let base = net.params();
        let h = 1e-3;
        for i in 0..base.data.len() {
            let mut p = base.data.clone();
            p[i] += h;
            net.set_params(&p).unwrap();
            let lp = loss(net);
            p[i] -= 2.0 * h;
            net.set_params(&p).unwrap();
            let lm = loss(net);
            let fd = (lp - lm) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(analytic.data[i].abs()).max(1e-6);
            assert!(
                (fd - analytic.data[i]).abs() <= tol,
                "param {i}: fd {fd} vs analytic {}",
                analytic.data[i]
            );
        }
        net.set_params(&base.data).unwrap();
    }

    #[test]
    fn gradcheck_conv_and_silu() {
        let spec = ConvNetSpec {
            in_channels: 2,
            out_channels: 2,
            hidden: vec![3],
            downsample_depth: 0,
            activation: Activation::Silu,
            param_seed: 21,
        };
        let mut net = ConvNet::encoder(&spec).unwrap();
        gradcheck(&mut net, &random_volume(2, 4, 4, 31), 0.0);
    }

    #[test]
    fn gradcheck_noise_bias_path() {
        let spec = ConvNetSpec {
            in_channels: 1,
            out_channels: 1,
            hidden: vec![3],
            downsample_depth: 0,
            activation: Activation::Silu,
            param_seed: 22,
        };
        let mut net = ConvNet::denoiser(&spec).unwrap();
        // Perturb the zero-initialized final conv so its gradients are exercised.
        let mut p = net.params().data;
        let mut rng = seed_rng(77);
        for v in &mut p {
            *v += rng.gen_range(-0.05..0.05);
        }
        net.set_params(&p).unwrap();
        gradcheck(&mut net, &random_volume(1, 4, 4, 32), 0.7);
    }

    #[test]
    fn gradcheck_pool_and_upsample() {
        let spec = ConvNetSpec {
            in_channels: 1,
            out_channels: 2,
            hidden: vec![3],
            downsample_depth: 1,
            activation: Activation::Relu,
            param_seed: 23,
        };
        let mut enc = ConvNet::encoder(&spec).unwrap();
        gradcheck(&mut enc, &random_volume(1, 4, 4, 33), 0.0);

        let spec = ConvNetSpec {
            in_channels: 2,
            out_channels: 1,
            hidden: vec![3],
            downsample_depth: 1,
            activation: Activation::Identity,
            param_seed: 24,
        };
        let mut dec = ConvNet::decoder(&spec).unwrap();
        gradcheck(&mut dec, &random_volume(2, 3, 3, 34), 0.0);
    }

    #[test]
    fn shift_covariance_on_torus() {
        // Purely convolutional nets with periodic padding commute with
        // circular shifts, bit-exactly.
        let spec = ConvNetSpec {
            in_channels: 1,
            out_channels: 1,
            hidden: vec![4, 4],
            downsample_depth: 0,
            activation: Activation::Silu,
            param_seed: 40,
        };
        let mut net = ConvNet::denoiser(&spec).unwrap();
        let mut p = net.params().data;
        let mut rng = seed_rng(41);
        for v in &mut p {
            *v += rng.gen_range(-0.1..0.1);
        }
        net.set_params(&p).unwrap();

        let x = random_volume(1, 8, 8, 42);
        let (dy, dx) = (3usize, 5usize);
        let shift = |v: &Volume| -> Volume {
            let mut out = Volume::zeros(v.c, v.h, v.w);
            for c in 0..v.c {
                for y in 0..v.h {
                    for xx in 0..v.w {
                        out.data[(c * v.h + (y + dy) % v.h) * v.w + (xx + dx) % v.w] =
                            v.data[(c * v.h + y) * v.w + xx];
                    }
                }
            }
            out
        };
        let direct = net.forward_inference(&shift(&x), 0.2).unwrap();
        let shifted = shift(&net.forward_inference(&x, 0.2).unwrap());
        assert_eq!(direct.data, shifted.data);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("net");
        let spec = small_spec(55);
        let mut net = ConvNet::denoiser(&spec).unwrap();
        let mut p = net.params().data;
        let mut rng = seed_rng(56);
        for v in &mut p {
            *v += rng.gen_range(-0.2..0.2);
        }
        // Quantize to f32 so the save/load round-trip is exact.
        let p: Vec<f64> = p.into_iter().map(|v| v as f32 as f64).collect();
        net.set_params(&p).unwrap();
        net.save_checkpoint(&prefix, serde_json::json!({"task": "test"})).unwrap();

        let (loaded, extra) = ConvNet::load_checkpoint(&prefix).unwrap();
        assert_eq!(extra["task"], "test");
        assert_eq!(loaded.structure(), net.structure());
        assert_eq!(loaded.params().data, net.params().data);

        let x = random_volume(2, 6, 6, 57);
        assert_eq!(
            loaded.forward_inference(&x, 0.5).unwrap().data,
            net.forward_inference(&x, 0.5).unwrap().data
        );
    }

    #[test]
    fn encoder_decoder_shapes() {
        let spec = ConvNetSpec {
            in_channels: 1,
            out_channels: 4,
            hidden: vec![6],
            downsample_depth: 1,
            activation: Activation::Silu,
            param_seed: 60,
        };
        let enc = ConvNet::encoder(&spec).unwrap();
        let z = enc.forward_inference(&random_volume(1, 8, 8, 61), 0.0).unwrap();
        assert_eq!((z.c, z.h, z.w), (4, 4, 4));

        let spec = ConvNetSpec {
            in_channels: 4,
            out_channels: 1,
            hidden: vec![6],
            downsample_depth: 1,
            activation: Activation::Silu,
            param_seed: 62,
        };
        let dec = ConvNet::decoder(&spec).unwrap();
        let y = dec.forward_inference(&z, 0.0).unwrap();
        assert_eq!((y.c, y.h, y.w), (1, 8, 8));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let net = ConvNet::encoder(&small_spec(70)).unwrap();
        assert!(net.forward_inference(&Volume::zeros(3, 4, 4), 0.0).is_err());
    }
}
