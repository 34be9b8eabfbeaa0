//! Desk-scale backbone with a parsing head and a channel-reduction head.
//!
//! The network sees five input channels: RGB shifted by −0.5 and the pixel's
//! row and column coordinates scaled to `[-1, 1]`. Without the coordinates a
//! small receptive field cannot tell torso from leg on flat-coloured bodies.
//!
//! Architecture for `downsample = 2^k`:
//! - `k` blocks of 3×3 convolution (stride 2, pad 1) + ReLU, widths
//!   `c/2^(k−1), …, c/2, c` (at least 2 channels each)
//! - one 3×3 convolution (stride 1) + ReLU at width `c`, giving `T`
//! - every block after the first standardizes each pixel's channel vector
//!   (zero mean, unit variance, no learned gain) before its bias and ReLU
//! - parsing head: 3×3 convolution `c → N` + softmax, giving `P`
//! - reduction head: 1×1 convolution `c → c_new`, giving `F`
//! - identity classifiers: `N` affine maps `c_new → K` (one per foreground
//!   region, the last for the unconfident feature)
//!
//! Initialisation: He-normal convolution weights (`σ = √(2/fan_in)`), zero
//! biases, `σ = 0.01` for the parsing head and classifiers (so an untrained
//! model predicts near-uniform parts and identities) and `σ = √(1/c)` for the
//! reduction head. Every parameter is held at `f32` precision so checkpoints
//! reproduce a model exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::align::{FeatureKind, FeatureMap};
use crate::autodiff::{ConvGeometry, Graph, NodeId};
use crate::io::{header_pairs, push_f32s, read_file, split_header, write_file, write_header, Reader};
use crate::losses::{Classifier, RegionClassifiers};
use crate::segmap::SemanticProbMap;
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub downsample: usize,
    /// Backbone channels `c`.
    pub backbone_channels: usize,
    /// Reduced channels `c_new`.
    pub reduced_channels: usize,
    /// Region count `N`, background included.
    pub n_regions: usize,
    pub num_identities: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 96,
            input_width: 32,
            downsample: 8,
            backbone_channels: 64,
            reduced_channels: 32,
            n_regions: 8,
            num_identities: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockSpec {
    in_c: usize,
    out_c: usize,
    stride: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.downsample == 0 || !self.downsample.is_power_of_two() {
            return bad(format!("downsample {} is not a power of two", self.downsample));
        }
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % self.downsample != 0
            || self.input_width % self.downsample != 0
        {
            return bad(format!(
                "input {}x{} is not divisible by downsample {}",
                self.input_height, self.input_width, self.downsample
            ));
        }
        for (name, v) in [
            ("backbone channels", self.backbone_channels),
            ("reduced channels", self.reduced_channels),
            ("regions", self.n_regions),
            ("identities", self.num_identities),
        ] {
            if v < 2 {
                return bad(format!("{name} must be at least 2, got {v}"));
            }
        }
        Ok(())
    }

    pub fn feature_height(&self) -> usize {
        self.input_height / self.downsample
    }

    pub fn feature_width(&self) -> usize {
        self.input_width / self.downsample
    }

    pub fn feature_pixels(&self) -> usize {
        self.feature_height() * self.feature_width()
    }

    fn blocks(&self) -> Vec<BlockSpec> {
        let n_down = self.downsample.trailing_zeros() as usize;
        let mut blocks = Vec::with_capacity(n_down + 1);
        let mut in_c = INPUT_CHANNELS;
        for i in 0..n_down {
            let out_c = (self.backbone_channels >> (n_down - 1 - i)).max(2);
            blocks.push(BlockSpec {
                in_c,
                out_c,
                stride: 2,
            });
            in_c = out_c;
        }
        blocks.push(BlockSpec {
            in_c,
            out_c: self.backbone_channels,
            stride: 1,
        });
        blocks
    }

    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
            ("downsample", self.downsample.to_string()),
            ("backbone_channels", self.backbone_channels.to_string()),
            ("reduced_channels", self.reduced_channels.to_string()),
            ("n_regions", self.n_regions.to_string()),
            ("num_identities", self.num_identities.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Named parameter tensors in a fixed architectural order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl Parameters {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for m in &mut self.values {
            m.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::all_finite)
    }
}

fn layout(config: &ModelConfig) -> Vec<(String, usize, usize, f64)> {
    let mut out = Vec::new();
    for (i, b) in config.blocks().iter().enumerate() {
        let fan_in = 9 * b.in_c;
        out.push((format!("block{i}.weight"), fan_in, b.out_c, (2.0 / fan_in as f64).sqrt()));
        out.push((format!("block{i}.bias"), 1, b.out_c, 0.0));
    }
    let c = config.backbone_channels;
    out.push(("parsing.weight".into(), 9 * c, config.n_regions, 0.01));
    out.push(("parsing.bias".into(), 1, config.n_regions, 0.0));
    out.push(("reduce.weight".into(), c, config.reduced_channels, (1.0 / c as f64).sqrt()));
    out.push(("reduce.bias".into(), 1, config.reduced_channels, 0.0));
    for r in 0..config.n_regions {
        out.push((format!("classifier{r}.weight"), config.reduced_channels, config.num_identities, 0.01));
        out.push((format!("classifier{r}.bias"), 1, config.num_identities, 0.0));
    }
    out
}

/// Seeded initialisation; identical seeds give identical parameters.
pub fn init_parameters(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (name, rows, cols, std) in layout(config) {
        let data = if std == 0.0 {
            vec![0.0; rows * cols]
        } else {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()
        };
        names.push(name);
        values.push(Matrix::from_vec(rows, cols, data));
    }
    let mut params = Parameters { names, values };
    params.round_to_f32();
    Ok(params)
}

/// Scalar parameter count implied by the architecture.
pub fn parameter_count(config: &ModelConfig) -> usize {
    layout(config).iter().map(|(_, r, c, _)| r * c).sum()
}

/// An RGB image in `[0, 1]`, row-major with 3 interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct InputImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// Node ids of one forward pass on a tape. Each output is pixel-major over
/// the whole batch.
#[derive(Debug, Clone, Copy)]
pub struct GraphForward {
    pub backbone: NodeId,
    pub probs: NodeId,
    pub reduced: NodeId,
    pub batch: usize,
}

/// Indices of named parameters within [`Parameters`].
#[derive(Debug, Clone, Copy)]
pub struct ParamIndex {
    n_blocks: usize,
}

impl ParamIndex {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            n_blocks: config.blocks().len(),
        }
    }

    fn block(&self, i: usize) -> (usize, usize) {
        (2 * i, 2 * i + 1)
    }

    fn parsing(&self) -> (usize, usize) {
        (2 * self.n_blocks, 2 * self.n_blocks + 1)
    }

    fn reduce(&self) -> (usize, usize) {
        (2 * self.n_blocks + 2, 2 * self.n_blocks + 3)
    }

    /// Classifier `r`; `r = N − 1` is the unconfident head.
    pub fn classifier(&self, r: usize) -> (usize, usize) {
        let base = 2 * self.n_blocks + 4 + 2 * r;
        (base, base + 1)
    }
}

/// Builds the backbone and both heads on `g`. `params` holds one node per
/// parameter tensor in [`Parameters`] order; `images` is `(b·H·W) × INPUT_CHANNELS`.
pub fn forward_graph(
    g: &mut Graph,
    config: &ModelConfig,
    params: &[NodeId],
    images: NodeId,
    batch: usize,
) -> GraphForward {
    let idx = ParamIndex::new(config);
    let (mut h, mut w) = (config.input_height, config.input_width);
    let mut x = images;
    for (i, b) in config.blocks().iter().enumerate() {
        let geom = ConvGeometry {
            batch,
            in_h: h,
            in_w: w,
            in_c: b.in_c,
            out_c: b.out_c,
            kernel: 3,
            stride: b.stride,
            pad: 1,
        };
        let (wi, bi) = idx.block(i);
        let y = g.conv2d(x, params[wi], geom);
        let y = if i > 0 { g.standardize_rows(y, STANDARDIZE_EPS) } else { y };
        let y = g.add_row(y, params[bi]);
        x = g.relu(y);
        h = geom.out_h();
        w = geom.out_w();
    }
    let backbone = x;
    let (pw, pb) = idx.parsing();
    let head = ConvGeometry {
        batch,
        in_h: h,
        in_w: w,
        in_c: config.backbone_channels,
        out_c: config.n_regions,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let logits = g.conv2d(backbone, params[pw], head);
    let logits = g.add_row(logits, params[pb]);
    let probs = g.softmax_rows(logits);
    let (rw, rb) = idx.reduce();
    let reduced = g.matmul(backbone, params[rw]);
    let reduced = g.add_row(reduced, params[rb]);
    GraphForward {
        backbone,
        probs,
        reduced,
        batch,
    }
}

/// Per-image outputs: backbone map `T`, part probabilities `P`, reduced map `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub backbone: FeatureMap,
    pub probs: SemanticProbMap,
    pub reduced: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

const INFERENCE_CHUNK: usize = 32;

/// Centred RGB plus row and column coordinates in `[-1, 1]`.
pub const INPUT_CHANNELS: usize = 5;

const PIXEL_MEAN: f64 = 0.5;

/// Variance guard of the per-pixel channel standardization.
const STANDARDIZE_EPS: f64 = 1e-5;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_parameters(&config)?;
        Ok(Self { config, params })
    }

    pub fn images_matrix(&self, images: &[&InputImage]) -> Result<Matrix> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if img.height != h || img.width != w || img.pixels.len() != h * w * 3 {
                return Err(Error::ShapeMismatch {
                    what: "input image pixels",
                    expected: h * w * 3,
                    found: img.pixels.len().max(img.height * img.width * 3),
                });
            }
            for (k, px) in img.pixels.chunks_exact(3).enumerate() {
                let (y, x) = (k / w, k % w);
                data.extend(px.iter().map(|v| v - PIXEL_MEAN));
                data.push(2.0 * (y as f64 + 0.5) / h as f64 - 1.0);
                data.push(2.0 * (x as f64 + 0.5) / w as f64 - 1.0);
            }
        }
        Ok(Matrix::from_vec(images.len() * h * w, INPUT_CHANNELS, data))
    }

    pub fn forward(&self, images: &[InputImage]) -> Result<Vec<ModelOutput>> {
        let refs: Vec<&InputImage> = images.iter().collect();
        self.forward_refs(&refs)
    }

    pub fn forward_refs(&self, images: &[&InputImage]) -> Result<Vec<ModelOutput>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = self.params.values().iter().map(|m| g.constant(m.clone())).collect();
            let x = g.constant(self.images_matrix(chunk)?);
            let fw = forward_graph(&mut g, &self.config, &ids, x, chunk.len());
            out.extend(split_outputs(&g, &self.config, fw)?);
        }
        Ok(out)
    }

    pub fn classifiers(&self) -> RegionClassifiers {
        let idx = ParamIndex::new(&self.config);
        RegionClassifiers {
            heads: (0..self.config.n_regions)
                .map(|r| {
                    let (w, b) = idx.classifier(r);
                    Classifier {
                        weight: self.params.values[w].clone(),
                        bias: self.params.values[b].clone(),
                    }
                })
                .collect(),
        }
    }
}

/// Splits batched tape outputs into per-image maps.
pub fn split_outputs(g: &Graph, config: &ModelConfig, fw: GraphForward) -> Result<Vec<ModelOutput>> {
    let (fh, fwid) = (config.feature_height(), config.feature_width());
    let px = fh * fwid;
    let (t, p, f) = (g.value(fw.backbone), g.value(fw.probs), g.value(fw.reduced));
    (0..fw.batch)
        .map(|b| {
            let slice = |m: &Matrix| m.data()[b * px * m.cols()..(b + 1) * px * m.cols()].to_vec();
            Ok(ModelOutput {
                backbone: FeatureMap::new(fh, fwid, t.cols(), FeatureKind::Backbone, slice(t))?,
                probs: SemanticProbMap::new(fh, fwid, p.cols(), slice(p))?,
                reduced: FeatureMap::new(fh, fwid, f.cols(), FeatureKind::Reduced, slice(f))?,
            })
        })
        .collect()
}

const CHECKPOINT_MAGIC: &str = "ESA-REID-CHECKPOINT v1";

/// Writes the config header and every parameter as little-endian `f32`.
///
/// Layout: magic line, `key = value` config lines, one
/// `tensor <name> <rows> <cols>` line per parameter, `end`, then the
/// concatenated tensors in header order.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut lines: Vec<String> = model
        .config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}"))
        .collect();
    for (name, m) in model.params.names.iter().zip(&model.params.values) {
        lines.push(format!("tensor {name} {} {}", m.rows(), m.cols()));
    }
    let mut buf = Vec::new();
    write_header(&mut buf, CHECKPOINT_MAGIC, &lines);
    for m in &model.params.values {
        push_f32s(&mut buf, m.data());
    }
    write_file(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = read_file(path)?;
    let (lines, payload) = split_header(&bytes, CHECKPOINT_MAGIC, "checkpoint", path)?;
    let bad = |reason: String| Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        reason,
    };
    let (tensor_lines, config_lines): (Vec<String>, Vec<String>) =
        lines.into_iter().partition(|l| l.starts_with("tensor "));
    let pairs = header_pairs(&config_lines, "checkpoint", path)?;
    let get = |key: &str| -> Result<String> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| bad(format!("missing `{key}`")))
    };
    let num = |key: &str| -> Result<u64> {
        get(key)?.parse().map_err(|_| bad(format!("`{key}` is not an integer")))
    };
    let config = ModelConfig {
        input_height: num("input_height")? as usize,
        input_width: num("input_width")? as usize,
        downsample: num("downsample")? as usize,
        backbone_channels: num("backbone_channels")? as usize,
        reduced_channels: num("reduced_channels")? as usize,
        n_regions: num("n_regions")? as usize,
        num_identities: num("num_identities")? as usize,
        seed: num("seed")?,
    };
    config.validate()?;
    let expected = layout(&config);
    if tensor_lines.len() != expected.len() {
        return Err(bad(format!("expected {} tensors, found {}", expected.len(), tensor_lines.len())));
    }
    let mut reader = Reader::new(payload, "checkpoint", path);
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (line, (name, rows, cols, _)) in tensor_lines.iter().zip(expected) {
        let want = format!("tensor {name} {rows} {cols}");
        if *line != want {
            return Err(bad(format!("expected `{want}`, found `{line}`")));
        }
        values.push(Matrix::from_vec(rows, cols, reader.f32s(rows * cols)?));
        names.push(name);
    }
    reader.finish()?;
    Ok(Model {
        config,
        params: Parameters { names, values },
    })
}
