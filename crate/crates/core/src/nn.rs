//! Layered classifiers with tap points for deep supervision.
//!
//! A [`ModelSpec`] is a flat list of layers. A tap names the output of one
//! layer; its auxiliary branch (optional global average pooling, then an
//! optional fully connected projection) maps that activation to the
//! feature vector `f^l` the prototype loss sees.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::PrototypeSet;
use crate::rng::{rng_for, Stream};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"PSHLD1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Prelu,
    MaxPool,
    Gap,
    Flatten,
    Fc {
        out: usize,
    },
}

fn one() -> usize {
    1
}

/// Auxiliary branch `G_phi` attached after `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapSpec {
    pub layer: usize,
    #[serde(default)]
    pub gap: bool,
    #[serde(default)]
    pub fc: Option<usize>,
}

impl TapSpec {
    pub fn identity(layer: usize) -> Self {
        TapSpec { layer, gap: false, fc: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Table widths: 32/64/128 conv channels, FC 512 and 64.
    Desk,
    /// Half widths everywhere, for fast runs.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub taps: Vec<TapSpec>,
}

/// Where a layer's parameters live in [`Model::params`].
#[derive(Debug, Clone, Copy)]
enum Slot {
    None,
    Conv { w: usize, b: usize, stride: usize, padding: usize },
    Prelu { slope: usize },
    Fc { w: usize, b: usize },
}

#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<Slot>,
    taps: Vec<Option<(usize, usize)>>,
    /// Activation shape (without batch axis) after each layer.
    shapes: Vec<Vec<usize>>,
    param_shapes: Vec<Vec<usize>>,
    /// Fan-in for Kaiming init; `None` for biases and slopes.
    fan_in: Vec<Option<usize>>,
    tap_dims: Vec<usize>,
}

impl ModelSpec {
    /// The six-layer CNN: three blocks of two 5×5 convs with PReLU and 2×2
    /// max pooling, GAP, FC, FC, classifier. Taps sit on the GAP output and
    /// the two hidden FC outputs (before their PReLU).
    pub fn cnn6(profile: Profile, input_shape: &[usize], num_classes: usize) -> Self {
        let (c1, c2, c3, f1, f2) = match profile {
            Profile::Desk => (32, 64, 128, 512, 64),
            Profile::Tiny => (16, 32, 64, 256, 32),
        };
        let conv = |out_channels| LayerSpec::Conv {
            out_channels,
            kernel: 5,
            padding: 2,
            stride: 1,
        };
        let mut layers = Vec::new();
        for c in [c1, c2, c3] {
            layers.extend([conv(c), LayerSpec::Prelu, conv(c), LayerSpec::Prelu, LayerSpec::MaxPool]);
        }
        let gap = layers.len();
        layers.push(LayerSpec::Gap);
        let fc1 = layers.len();
        layers.extend([LayerSpec::Fc { out: f1 }, LayerSpec::Prelu]);
        let fc2 = layers.len();
        layers.extend([LayerSpec::Fc { out: f2 }, LayerSpec::Prelu]);
        layers.push(LayerSpec::Fc { out: num_classes });
        ModelSpec {
            name: format!("cnn6-{}", profile_name(profile)),
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            taps: vec![TapSpec::identity(gap), TapSpec::identity(fc1), TapSpec::identity(fc2)],
        }
    }

    /// Fully connected network: flatten, hidden FC+PReLU blocks, classifier.
    /// Taps go on every hidden FC output.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        let mut taps = Vec::new();
        for &h in hidden {
            taps.push(TapSpec::identity(layers.len()));
            layers.extend([LayerSpec::Fc { out: h }, LayerSpec::Prelu]);
        }
        layers.push(LayerSpec::Fc { out: num_classes });
        ModelSpec {
            name: format!("mlp-{}", hidden.iter().map(usize::to_string).collect::<Vec<_>>().join("x")),
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            taps,
        }
    }

    /// A shallower 3×3 CNN used only as a black-box attack source.
    pub fn source_cnn(input_shape: &[usize], num_classes: usize) -> Self {
        let conv = |out_channels| LayerSpec::Conv {
            out_channels,
            kernel: 3,
            padding: 1,
            stride: 1,
        };
        ModelSpec {
            name: "source-cnn".into(),
            input_shape: input_shape.to_vec(),
            num_classes,
            layers: vec![
                conv(16),
                LayerSpec::Prelu,
                LayerSpec::MaxPool,
                conv(32),
                LayerSpec::Prelu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Fc { out: 128 },
                LayerSpec::Prelu,
                LayerSpec::Fc { out: num_classes },
            ],
            taps: Vec::new(),
        }
    }

    /// Same network with a different tap set.
    pub fn with_taps(&self, taps: Vec<TapSpec>) -> Self {
        ModelSpec { taps, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }

    pub fn tap_dims(&self) -> Result<Vec<usize>> {
        Ok(self.layout()?.tap_dims)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .layout()?
            .param_shapes
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    fn layout(&self) -> Result<Layout> {
        let cfg = |msg: String| Error::Config(format!("model {}: {msg}", self.name));
        if self.num_classes < 2 {
            return Err(cfg(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(cfg(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Layout {
            layers: Vec::new(),
            taps: Vec::new(),
            shapes: Vec::new(),
            param_shapes: Vec::new(),
            fan_in: Vec::new(),
            tap_dims: Vec::new(),
        };
        let add = |out: &mut Layout, s: Vec<usize>, fan: Option<usize>| {
            out.param_shapes.push(s);
            out.fan_in.push(fan);
            out.param_shapes.len() - 1
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let slot = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    padding,
                    stride,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(cfg(format!("layer {i}: conv needs [C,H,W] input, got {shape:?}")));
                    };
                    if out_channels == 0 || kernel == 0 {
                        return Err(cfg(format!("layer {i}: empty conv")));
                    }
                    let g = crate::tensor::conv_geometry(
                        &[1, c, h, w],
                        &[out_channels, c, kernel, kernel],
                        stride,
                        padding,
                    )
                    .map_err(|e| cfg(format!("layer {i}: {e}")))?;
                    let wi = add(&mut out, vec![out_channels, c, kernel, kernel], Some(c * kernel * kernel));
                    let bi = add(&mut out, vec![out_channels], None);
                    shape = vec![out_channels, g.ho, g.wo];
                    Slot::Conv {
                        w: wi,
                        b: bi,
                        stride,
                        padding,
                    }
                }
                LayerSpec::Prelu => Slot::Prelu {
                    slope: add(&mut out, vec![shape[0]], None),
                },
                LayerSpec::MaxPool => {
                    let [c, h, w] = shape[..] else {
                        return Err(cfg(format!("layer {i}: max_pool needs [C,H,W] input, got {shape:?}")));
                    };
                    if h < 2 || w < 2 {
                        return Err(cfg(format!("layer {i}: max_pool input {h}x{w} too small")));
                    }
                    shape = vec![c, h / 2, w / 2];
                    Slot::None
                }
                LayerSpec::Gap => {
                    if shape.len() != 3 {
                        return Err(cfg(format!("layer {i}: gap needs [C,H,W] input, got {shape:?}")));
                    }
                    shape = vec![shape[0]];
                    Slot::None
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Slot::None
                }
                LayerSpec::Fc { out: o } => {
                    if shape.len() != 1 {
                        return Err(cfg(format!("layer {i}: fc needs a flat input, got {shape:?}")));
                    }
                    if o == 0 {
                        return Err(cfg(format!("layer {i}: empty fc")));
                    }
                    let wi = add(&mut out, vec![shape[0], o], Some(shape[0]));
                    let bi = add(&mut out, vec![o], None);
                    shape = vec![o];
                    Slot::Fc { w: wi, b: bi }
                }
            };
            out.layers.push(slot);
            out.shapes.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(cfg(format!(
                "final layer outputs {shape:?}, expected [{}]",
                self.num_classes
            )));
        }
        let mut prev = None;
        for (t, tap) in self.taps.iter().enumerate() {
            if tap.layer >= self.layers.len() {
                return Err(cfg(format!("tap {t}: layer {} does not exist", tap.layer)));
            }
            if prev.is_some_and(|p| tap.layer <= p) {
                return Err(cfg("tap layers must be strictly increasing".into()));
            }
            prev = Some(tap.layer);
            let mut s = out.shapes[tap.layer].clone();
            if tap.gap {
                if s.len() != 3 {
                    return Err(cfg(format!("tap {t}: gap branch on non-spatial activation {s:?}")));
                }
                s = vec![s[0]];
            }
            if s.len() != 1 {
                return Err(cfg(format!("tap {t}: activation {s:?} is not a feature vector; add gap")));
            }
            let fc = match tap.fc {
                Some(o) => {
                    let wi = add(&mut out, vec![s[0], o], Some(s[0]));
                    let bi = add(&mut out, vec![o], None);
                    s = vec![o];
                    Some((wi, bi))
                }
                None => None,
            };
            out.taps.push(fc);
            out.tap_dims.push(s[0]);
        }
        Ok(out)
    }
}

fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::Desk => "desk",
        Profile::Tiny => "tiny",
    }
}

/// Forward-pass outputs recorded on a tape.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Var,
    pub taps: Vec<Var>,
}

/// Parameters registered on a tape, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: Layout,
    params: Vec<Tensor>,
}

impl Model {
    /// Kaiming-normal weights (std `sqrt(2 / fan_in)`), zero biases, PReLU slopes 0.25.
    /// Each parameter tensor draws from its own seeded stream.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let layout = spec.layout()?;
        let mut params = Vec::with_capacity(layout.param_shapes.len());
        for (i, shape) in layout.param_shapes.iter().enumerate() {
            let t = match layout.fan_in[i] {
                Some(fan) => {
                    let dist = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("positive std");
                    let mut rng = rng_for(seed, Stream::ModelInit, i as u64);
                    let numel = shape.iter().product();
                    Tensor::new(shape.clone(), (0..numel).map(|_| dist.sample(&mut rng)).collect())?
                }
                None => Tensor::zeros(shape),
            };
            params.push(t);
        }
        for slot in &layout.layers {
            if let Slot::Prelu { slope } = *slot {
                params[slope] = Tensor::full(params[slope].shape(), 0.25);
            }
        }
        Ok(Model { spec, layout, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        let layout = spec.layout()?;
        if params.len() != layout.param_shapes.len() {
            return Err(Error::Config(format!(
                "model {} expects {} parameter tensors, got {}",
                spec.name,
                layout.param_shapes.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&layout.param_shapes) {
            if p.shape() != s.as_slice() {
                return Err(Error::shape("model parameter", s, p.shape()));
            }
        }
        Ok(Model { spec, layout, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn tap_dims(&self) -> &[usize] {
        &self.layout.tap_dims
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<ModelOutput> {
        let xs = tape.shape(x);
        if xs.len() != self.spec.input_shape.len() + 1 || xs[1..] != self.spec.input_shape[..] {
            return Err(Error::shape("model input", &self.spec.input_shape, xs));
        }
        let p = |i: usize| bound.vars[i];
        let mut h = x;
        let mut acts = Vec::with_capacity(self.spec.layers.len());
        for slot in &self.layout.layers {
            h = match *slot {
                Slot::Conv { w, b, stride, padding } => {
                    let c = tape.conv2d(h, p(w), stride, padding)?;
                    tape.add_bias(c, p(b))?
                }
                Slot::Prelu { slope } => tape.prelu(h, p(slope))?,
                Slot::Fc { w, b } => {
                    let m = tape.matmul(h, p(w))?;
                    tape.add_bias(m, p(b))?
                }
                Slot::None => self.shape_op(tape, h, acts.len())?,
            };
            acts.push(h);
        }
        let mut taps = Vec::with_capacity(self.spec.taps.len());
        for (tap, fc) in self.spec.taps.iter().zip(&self.layout.taps) {
            let mut f = acts[tap.layer];
            if tap.gap {
                f = tape.global_avg_pool(f)?;
            }
            if let Some((w, b)) = *fc {
                let m = tape.matmul(f, p(w))?;
                f = tape.add_bias(m, p(b))?;
            }
            taps.push(f);
        }
        Ok(ModelOutput { logits: h, taps })
    }

    fn shape_op(&self, tape: &mut Tape, h: Var, layer: usize) -> Result<Var> {
        match self.spec.layers[layer] {
            LayerSpec::MaxPool => tape.max_pool2d(h),
            LayerSpec::Gap => tape.global_avg_pool(h),
            LayerSpec::Flatten => tape.flatten(h),
            _ => unreachable!("parameterised layers have slots"),
        }
    }

    /// Logits and tap features for a batch, evaluated in chunks of `chunk` rows.
    pub fn infer(&self, x: &Tensor, chunk: usize) -> Result<(Tensor, Vec<Tensor>)> {
        let n = x.rows();
        let mut logits = Vec::new();
        let mut taps: Vec<Vec<Tensor>> = vec![Vec::new(); self.spec.taps.len()];
        let chunk = chunk.max(1);
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let xv = tape.constant(x.select_rows(&idx));
            let out = self.forward(&mut tape, &bound, xv)?;
            logits.push(tape.value(out.logits).clone());
            for (dst, v) in taps.iter_mut().zip(&out.taps) {
                dst.push(tape.value(*v).clone());
            }
        }
        let cat = |parts: &[Tensor]| Tensor::concat_rows(&parts.iter().collect::<Vec<_>>());
        let taps = taps.iter().map(|t| cat(t)).collect::<Result<Vec<_>>>()?;
        Ok((cat(&logits)?, taps))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer(x, 256)?.0)
    }

    /// Softmax prediction: argmax of the logits, ties to the lowest class.
    pub fn predict_softmax(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// SHA-256 over the serialized parameters.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            let mut buf = Vec::new();
            p.write_to(&mut buf).expect("vec write");
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

/// A model plus its prototype sets, as stored on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub protos: Option<PrototypeSet>,
}

impl Checkpoint {
    /// Layout: `PSHLD1\n`, u32 LE spec length, spec TOML, u32 LE parameter
    /// count, parameters (tensor format), u32 LE prototype-set count,
    /// prototype centroid tensors.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let spec = self.model.spec.to_toml();
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&(spec.len() as u32).to_le_bytes())?;
            w.write_all(spec.as_bytes())?;
            w.write_all(&(self.model.params.len() as u32).to_le_bytes())?;
            for p in &self.model.params {
                p.write_to(w)?;
            }
            let protos = self.protos.as_ref().map_or(&[][..], |p| p.centroids());
            w.write_all(&(protos.len() as u32).to_le_bytes())?;
            for c in protos {
                c.write_to(w)?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let fmt = |msg: &str| Error::Format {
            path: path.into(),
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt("not a checkpoint (missing PSHLD1 header)"));
        }
        let read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            Ok(u32::from_le_bytes(b))
        };
        let len = read_u32(&mut r)? as usize;
        let mut spec = vec![0u8; len];
        r.read_exact(&mut spec).map_err(|e| Error::io(path, e))?;
        let spec = String::from_utf8(spec).map_err(|_| fmt("spec is not UTF-8"))?;
        let spec = ModelSpec::from_toml(&spec)?;
        let n = read_u32(&mut r)? as usize;
        let params = (0..n)
            .map(|_| Tensor::read_from(&mut r).map_err(|e| Error::io(path, e)))
            .collect::<Result<Vec<_>>>()?;
        let model = Model::from_params(spec, params)?;
        let np = read_u32(&mut r)? as usize;
        let protos = if np == 0 {
            None
        } else {
            let c = (0..np)
                .map(|_| Tensor::read_from(&mut r).map_err(|e| Error::io(path, e)))
                .collect::<Result<Vec<_>>>()?;
            Some(PrototypeSet::from_centroids(c)?)
        };
        if let Some(p) = &protos {
            p.check_against(&model)?;
        }
        Ok(Checkpoint { model, protos })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn6_desk_param_count_matches_hand_count() {
        let spec = ModelSpec::cnn6(Profile::Desk, &[1, 28, 28], 10);
        // conv weights + biases, PReLU slopes per channel, FC weights + biases
        let conv = |cin: usize, cout: usize| cin * cout * 25 + cout;
        let expected = conv(1, 32) + 32 + conv(32, 32) + 32
            + conv(32, 64) + 64 + conv(64, 64) + 64
            + conv(64, 128) + 128 + conv(128, 128) + 128
            + (128 * 512 + 512) + 512
            + (512 * 64 + 64) + 64
            + (64 * 10 + 10);
        assert_eq!(expected, 895_402);
        assert_eq!(spec.param_count().unwrap(), expected);
        assert_eq!(spec.tap_dims().unwrap(), vec![128, 512, 64]);
    }

    #[test]
    fn same_seed_same_params() {
        let spec = ModelSpec::cnn6(Profile::Tiny, &[1, 16, 16], 4);
        let a = Model::build(spec.clone(), 3).unwrap();
        let b = Model::build(spec.clone(), 3).unwrap();
        let c = Model::build(spec, 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn tiny_mlp_final_layer_shape() {
        let spec = ModelSpec::mlp(&[5], &[3], 2);
        let m = Model::build(spec, 0).unwrap();
        assert_eq!(m.params().last().unwrap().shape(), &[2]);
        assert_eq!(m.params()[m.params().len() - 2].shape(), &[3, 2]);
    }

    #[test]
    fn bad_specs_are_config_errors() {
        let mut spec = ModelSpec::mlp(&[4], &[3], 2);
        spec.layers.push(LayerSpec::Fc { out: 5 });
        assert!(matches!(spec.validate(), Err(Error::Config(_))));

        let mut spec = ModelSpec::cnn6(Profile::Tiny, &[1, 16, 16], 3);
        spec.taps = vec![TapSpec::identity(16), TapSpec::identity(15)];
        assert!(matches!(spec.validate(), Err(Error::Config(_))));

        let spec = ModelSpec {
            name: "bad".into(),
            input_shape: vec![1, 5, 5],
            num_classes: 2,
            layers: vec![
                LayerSpec::Conv { out_channels: 2, kernel: 2, padding: 0, stride: 2 },
                LayerSpec::Gap,
                LayerSpec::Fc { out: 2 },
            ],
            taps: vec![],
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn conv_tap_without_gap_is_rejected() {
        let spec = ModelSpec::cnn6(Profile::Tiny, &[1, 16, 16], 3).with_taps(vec![TapSpec::identity(4)]);
        assert!(spec.validate().is_err());
        let spec = spec.with_taps(vec![TapSpec { layer: 4, gap: true, fc: Some(8) }]);
        assert_eq!(spec.tap_dims().unwrap(), vec![8]);
    }

    #[test]
    fn forward_shapes_and_purity() {
        let spec = ModelSpec::cnn6(Profile::Desk, &[1, 28, 28], 10);
        let m = Model::build(spec, 1).unwrap();
        let x = crate::data::synth_blobs(2, 1, &[1, 28, 28], 0.1, 0).unwrap().images;
        let (logits, taps) = m.infer(&x, 8).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        let dims: Vec<_> = taps.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 128], vec![2, 512], vec![2, 64]]);
        let (again, _) = m.infer(&x, 1).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let m = Model::build(ModelSpec::mlp(&[4], &[3], 2), 0).unwrap();
        assert!(matches!(m.logits(&Tensor::zeros(&[2, 5])), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut m = Model::build(ModelSpec::mlp(&[4], &[3], 5), 0).unwrap();
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        let logits = m.logits(&Tensor::full(&[3, 4], 0.7)).unwrap();
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
        assert_eq!(m.predict_softmax(&Tensor::full(&[1, 4], 0.7)).unwrap(), vec![0]);
    }
}
