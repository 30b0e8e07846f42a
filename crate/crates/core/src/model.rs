//! Two-stream feature extractor and checkpoints.
//!
//! Each modality has its own shallow convolution; the two deeper stages are
//! a single set of parameters reached from both streams. Features are
//! emitted after the middle stage (depth 4) and after the last (depth 5).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::cmft::CmftTensor;
use crate::error::{Error, Result};
use crate::field;
use crate::losses::{f32_tensor, ClassifierHead};
use crate::tensor::{FeatureMap, PersonDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    /// Full-channel rendering.
    A,
    /// Channel-collapsed, contrast-remapped rendering.
    B,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::A, Modality::B];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::A => "A",
            Modality::B => "B",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Modality::A),
            "B" | "b" => Ok(Modality::B),
            other => Err(Error::Config(format!("unknown modality {other:?}, expected A or B"))),
        }
    }
}

/// Depth of the middle-stage features.
pub const LAYER4: usize = 4;
/// Depth of the final features, also used for descriptors.
pub const LAYER5: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input size; taken from the data section of a config file.
    #[serde(skip)]
    pub height: usize,
    #[serde(skip)]
    pub width: usize,
    pub shallow_channels: usize,
    pub layer4_channels: usize,
    pub layer5_channels: usize,
    pub gem_power: f64,
    /// Slope of the extractor nonlinearity below zero.
    pub activation_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 36,
            width: 18,
            shallow_channels: 16,
            layer4_channels: 32,
            layer5_channels: 64,
            gem_power: field::DEFAULT_GEM_POWER,
            activation_slope: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.height,
            self.width,
            self.shallow_channels,
            self.layer4_channels,
            self.layer5_channels,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("images must be at least 4x4".into()));
        }
        if !(self.gem_power >= 1.0) {
            return Err(Error::Config(format!("gem_power must be >= 1, got {}", self.gem_power)));
        }
        if !(0.0..1.0).contains(&self.activation_slope) {
            return Err(Error::Config(format!(
                "activation_slope must lie in [0, 1), got {}",
                self.activation_slope
            )));
        }
        Ok(())
    }

    /// Spatial size of the depth-4 and depth-5 feature maps.
    pub fn feature_size(&self) -> (usize, usize) {
        let down = |n: usize| (n + 2 - 3) / 2 + 1;
        (down(down(self.height)), down(down(self.width)))
    }
}

/// Images are fed with this many channels; single-channel input is replicated.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[kh, kw, cin, cout]`.
    pub shape: [usize; 4],
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Self {
        let shape = [3, 3, cin, cout];
        let fan_in = (9 * cin) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..9 * cin * cout)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        Self {
            shape,
            stride,
            pad: 1,
            weight,
            bias: vec![0.0; cout],
        }
    }

    fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        (
            tape.leaf(f32_tensor(self.shape.to_vec(), &self.weight)),
            tape.leaf(f32_tensor(vec![self.shape[3]], &self.bias)),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamExtractor {
    pub config: ModelConfig,
    /// Indexed by [`Modality`].
    pub shallow: [ConvLayer; 2],
    pub layer4: ConvLayer,
    pub layer5: ConvLayer,
}

/// Tape handles for a bound extractor.
#[derive(Debug, Clone, Copy)]
pub struct ExtractorVars {
    pub shallow: [(Var, Var); 2],
    pub layer4: (Var, Var),
    pub layer5: (Var, Var),
}

impl ExtractorVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.shallow[0].0,
            self.shallow[0].1,
            self.shallow[1].0,
            self.shallow[1].1,
            self.layer4.0,
            self.layer4.1,
            self.layer5.0,
            self.layer5.1,
        ]
    }
}

/// Feature batches `[n, h, w, d]` at depth 4 and 5.
#[derive(Debug, Clone, Copy)]
pub struct StreamOutput {
    pub layer4: Var,
    pub layer5: Var,
}

impl StreamOutput {
    pub fn at(&self, layer: usize) -> Var {
        match layer {
            LAYER4 => self.layer4,
            _ => self.layer5,
        }
    }
}

impl TwoStreamExtractor {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shallow_a = ConvLayer::init(&mut rng, INPUT_CHANNELS, config.shallow_channels, 2);
        let shallow_b = ConvLayer::init(&mut rng, INPUT_CHANNELS, config.shallow_channels, 2);
        let layer4 = ConvLayer::init(&mut rng, config.shallow_channels, config.layer4_channels, 2);
        let layer5 = ConvLayer::init(&mut rng, config.layer4_channels, config.layer5_channels, 1);
        Ok(Self {
            config,
            shallow: [shallow_a, shallow_b],
            layer4,
            layer5,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> ExtractorVars {
        ExtractorVars {
            shallow: [self.shallow[0].bind(tape), self.shallow[1].bind(tape)],
            layer4: self.layer4.bind(tape),
            layer5: self.layer5.bind(tape),
        }
    }

    /// Runs a batch `[n, H, W, 3]` through the stream of `modality`.
    pub fn forward_on(&self, tape: &mut Tape, vars: &ExtractorVars, images: Var, modality: Modality) -> StreamOutput {
        let sh = &self.shallow[modality.index()];
        let (w, b) = vars.shallow[modality.index()];
        let x = tape.conv2d(images, w, b, sh.stride, sh.pad);
        let a = self.config.activation_slope;
        let x = tape.leaky_relu_untracked(x, a);
        let x = tape.conv2d(x, vars.layer4.0, vars.layer4.1, self.layer4.stride, self.layer4.pad);
        let layer4 = tape.leaky_relu_untracked(x, a);
        let layer5 = self.lift_on(tape, vars, LAYER4, layer4);
        StreamOutput { layer4, layer5 }
    }

    /// Continues depth-`layer` features through the remaining shared stages.
    pub fn lift_on(&self, tape: &mut Tape, vars: &ExtractorVars, layer: usize, x: Var) -> Var {
        if layer >= LAYER5 {
            return x;
        }
        let x = tape.conv2d(x, vars.layer5.0, vars.layer5.1, self.layer5.stride, self.layer5.pad);
        tape.leaky_relu_untracked(x, self.config.activation_slope)
    }

    /// Validates and stacks images into an `[n, H, W, 3]` tensor.
    pub fn batch_images(&self, images: &[&CmftTensor]) -> Result<Tensor> {
        let (h, w) = (self.config.height, self.config.width);
        let mut data = Vec::with_capacity(images.len() * h * w * INPUT_CHANNELS);
        for img in images {
            let c = match img.dims[..] {
                [ih, iw, c] if ih == h && iw == w && (c == 1 || c == INPUT_CHANNELS) => c,
                _ => return Err(Error::dim("extractor input", &[h, w, INPUT_CHANNELS], &img.dims)),
            };
            for px in img.values.chunks_exact(c) {
                for k in 0..INPUT_CHANNELS {
                    data.push(px[if c == 1 { 0 } else { k }] as f64);
                }
            }
        }
        Ok(Tensor::new(vec![images.len(), h, w, INPUT_CHANNELS], data))
    }

    /// Depth-4 and depth-5 feature maps of one image.
    pub fn forward(&self, image: &CmftTensor, modality: Modality) -> Result<Vec<FeatureMap>> {
        let batch = self.batch_images(&[image])?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(batch);
        let out = self.forward_on(&mut tape, &vars, x, modality);
        [out.layer4, out.layer5]
            .iter()
            .map(|&v| {
                let s = tape.shape(v);
                FeatureMap::new(s[1], s[2], s[3], tape.data(v).to_vec())
            })
            .collect()
    }

    /// GeM-pooled depth-5 descriptors for a batch of images.
    pub fn descriptors(&self, images: &[&CmftTensor], modality: Modality) -> Result<Vec<PersonDescriptor>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch_images(images)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(batch);
        let out = self.forward_on(&mut tape, &vars, x, modality);
        let s = tape.shape(out.layer5).to_vec();
        let flat = tape.reshape(out.layer5, vec![s[0], s[1] * s[2], s[3]]);
        let pooled = tape.gem(flat, self.config.gem_power);
        Ok(tape
            .data(pooled)
            .chunks(s[3])
            .map(|c| PersonDescriptor(c.to_vec()))
            .collect())
    }
}

/// Extractor plus classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: TwoStreamExtractor,
    pub head: ClassifierHead,
}

/// One named parameter view.
pub struct NamedParam<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: &'a mut Vec<f32>,
    /// Updated by the optimizer; otherwise a statistics buffer.
    pub trainable: bool,
    pub is_head: bool,
}

fn conv_params<'a>(name_w: &'static str, name_b: &'static str, l: &'a mut ConvLayer) -> [NamedParam<'a>; 2] {
    let shape = l.shape.to_vec();
    let cout = l.shape[3];
    [
        NamedParam {
            name: name_w,
            shape,
            values: &mut l.weight,
            trainable: true,
            is_head: false,
        },
        NamedParam {
            name: name_b,
            shape: vec![cout],
            values: &mut l.bias,
            trainable: true,
            is_head: false,
        },
    ]
}

impl Model {
    pub fn new(config: ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let extractor = TwoStreamExtractor::new(config, seed)?;
        let d = config.layer5_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let bound = 1.0 / (d as f64).sqrt();
        let weight = (0..d * classes).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        let head = ClassifierHead::new(d, classes, weight)?;
        Ok(Self { extractor, head })
    }

    /// Parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<NamedParam<'_>> {
        let ex = &mut self.extractor;
        let hd = &mut self.head;
        let [sa, sb] = &mut ex.shallow;
        let mut out = Vec::with_capacity(13);
        out.extend(conv_params("shallow_a.weight", "shallow_a.bias", sa));
        out.extend(conv_params("shallow_b.weight", "shallow_b.bias", sb));
        out.extend(conv_params("layer4.weight", "layer4.bias", &mut ex.layer4));
        out.extend(conv_params("layer5.weight", "layer5.bias", &mut ex.layer5));
        let (d, k) = (hd.d, hd.k);
        let head_param = |name, shape, values, trainable| NamedParam {
            name,
            shape,
            values,
            trainable,
            is_head: true,
        };
        out.push(head_param("head.bn.gamma", vec![d], &mut hd.gamma, true));
        out.push(head_param("head.bn.beta", vec![d], &mut hd.beta, true));
        out.push(head_param("head.fc.weight", vec![d, k], &mut hd.weight, true));
        out.push(head_param("head.bn.running_mean", vec![d], &mut hd.running_mean, false));
        out.push(head_param("head.bn.running_var", vec![d], &mut hd.running_var, false));
        out
    }

    /// Writes one CMFT file per parameter and a `manifest.txt` of
    /// `name<TAB>file<TAB>shape` lines.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut copy = self.clone();
        let mut manifest = String::new();
        for p in copy.params_mut() {
            let file = format!("{}.cmft", p.name);
            CmftTensor::new(p.shape.clone(), p.values.clone())?.write(dir.join(&file))?;
            let shape: Vec<String> = p.shape.iter().map(ToString::to_string).collect();
            manifest.push_str(&format!("{}\t{}\t{}\n", p.name, file, shape.join("x")));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>, config: ModelConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bad = |detail: String| Error::Format {
            path: mpath.clone(),
            detail,
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(format!("line {}: expected 3 tab-separated fields", i + 1)));
            }
            entries.push((f[0].to_string(), f[1].to_string()));
        }
        let classes = entries
            .iter()
            .find(|(n, _)| n == "head.fc.weight")
            .map(|(_, f)| CmftTensor::read(dir.join(f)))
            .transpose()?
            .and_then(|t| t.dims.get(1).copied())
            .ok_or_else(|| bad("no head.fc.weight entry".into()))?;
        let mut model = Model::new(config, classes, 0)?;
        for p in model.params_mut() {
            let (_, file) = entries
                .iter()
                .find(|(n, _)| n == p.name)
                .ok_or_else(|| bad(format!("missing parameter {}", p.name)))?;
            let t = CmftTensor::read(dir.join(file))?;
            if t.dims != p.shape {
                return Err(Error::Dimension {
                    op: "checkpoint parameter",
                    left: p.shape.clone(),
                    right: t.dims,
                });
            }
            *p.values = t.values;
        }
        Ok(model)
    }
}
