//! Procedural partial-person benchmark with exact part labels.
//!
//! A person is seven flat-coloured parts drawn in a canonical body frame
//! `[0, 1]²` and mapped into the image by a per-sample scale/shift. Region
//! indices follow [`Part`]; background is region 8.
//!
//! On disk:
//!
//! ```text
//! <root>/manifest.txt
//! <root>/images/<split>/<id>_<k>.png   8-bit RGB
//! <root>/labels/<split>/<id>_<k>.png   8-bit grey, values 1..=8
//! ```
//!
//! `manifest.txt` is `key = value` lines followed by one line per sample:
//! `sample <split> <identity> <k> <view> <image path> <label path>`, paths
//! relative to the root. Splits are `train`, `gallery` and `probe`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::parse_key_values;
use crate::model::InputImage;
use crate::{Error, Result};

/// Foreground parts plus background.
pub const N_REGIONS: usize = 8;
pub const BACKGROUND: usize = N_REGIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Head = 1,
    Torso = 2,
    UpperArm = 3,
    LowerArm = 4,
    UpperLeg = 5,
    LowerLeg = 6,
    Foot = 7,
}

impl Part {
    pub const ALL: [Part; 7] = [
        Part::Head,
        Part::Torso,
        Part::UpperArm,
        Part::LowerArm,
        Part::UpperLeg,
        Part::LowerLeg,
        Part::Foot,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Head => "head",
            Part::Torso => "torso",
            Part::UpperArm => "upper-arm",
            Part::LowerArm => "lower-arm",
            Part::UpperLeg => "upper-leg",
            Part::LowerLeg => "lower-leg",
            Part::Foot => "foot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewTag {
    Full,
    Half,
    Occluded,
}

impl ViewTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewTag::Full => "full",
            ViewTag::Half => "half",
            ViewTag::Occluded => "occluded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(ViewTag::Full),
            "half" => Some(ViewTag::Half),
            "occluded" => Some(ViewTag::Occluded),
            _ => None,
        }
    }
}

/// Shapes in canonical body coordinates (`x` across, `y` down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Half-open `[x0, x1) × [y0, y1)`.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartAppearance {
    pub color: [f64; 3],
    pub noise: f64,
}

/// Shapes in back-to-front drawing order.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyGeometry {
    pub shapes: Vec<(Part, Shape)>,
}

impl BodyGeometry {
    /// Template body with torso/leg width and head size scaled by the
    /// given factors.
    pub fn canonical(width_factor: f64, head_factor: f64) -> Self {
        let wx = |a: f64| 0.5 + (a - 0.5) * width_factor;
        let rect = |x0: f64, y0: f64, x1: f64, y1: f64| Shape::Rect { x0, y0, x1, y1 };
        let torso_l = wx(0.30);
        let torso_r = wx(0.70);
        let arm = 0.14;
        let mut shapes = vec![(Part::Torso, rect(torso_l, 0.19, torso_r, 0.50))];
        for (l, r) in [(wx(0.32), wx(0.49)), (wx(0.51), wx(0.68))] {
            shapes.push((Part::UpperLeg, rect(l, 0.50, r, 0.70)));
            shapes.push((Part::LowerLeg, rect(l, 0.70, r, 0.88)));
        }
        shapes.push((Part::Foot, rect(wx(0.30), 0.88, wx(0.49), 0.95)));
        shapes.push((Part::Foot, rect(wx(0.51), 0.88, wx(0.70), 0.95)));
        for (l, r) in [(torso_l - arm, torso_l), (torso_r, torso_r + arm)] {
            shapes.push((Part::UpperArm, rect(l, 0.20, r, 0.36)));
            shapes.push((Part::LowerArm, rect(l, 0.36, r, 0.52)));
        }
        shapes.push((
            Part::Head,
            Shape::Ellipse {
                cx: 0.5,
                cy: 0.11,
                rx: 0.16 * head_factor,
                ry: 0.08 * head_factor,
            },
        ));
        Self { shapes }
    }

    /// The frontmost part covering a canonical point.
    pub fn part_at(&self, x: f64, y: f64) -> Option<Part> {
        self.shapes.iter().rev().find(|(_, s)| s.contains(x, y)).map(|(p, _)| *p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub id: i64,
    /// Indexed by `part.label() − 1`.
    pub part_appearance: [PartAppearance; 7],
    pub body_geometry: BodyGeometry,
}

impl IdentitySpec {
    pub fn appearance(&self, part: Part) -> &PartAppearance {
        &self.part_appearance[part.label() - 1]
    }

    fn color_vector(&self) -> impl Iterator<Item = f64> + '_ {
        self.part_appearance.iter().flat_map(|a| a.color)
    }

    pub fn color_distance(&self, other: &IdentitySpec) -> f64 {
        self.color_vector()
            .zip(other.color_vector())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

const PALETTE: [[f64; 3]; 12] = [
    [0.85, 0.15, 0.15],
    [0.20, 0.70, 0.25],
    [0.15, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.60, 0.25, 0.70],
    [0.95, 0.55, 0.10],
    [0.20, 0.80, 0.85],
    [0.92, 0.92, 0.92],
    [0.10, 0.10, 0.10],
    [0.50, 0.30, 0.15],
    [0.95, 0.60, 0.75],
    [0.50, 0.50, 0.50],
];

/// Minimum Euclidean distance between the concatenated part colours of
/// any two identities.
pub const MIN_IDENTITY_DISTANCE: f64 = 0.5;

/// Draws `n` identities with pairwise colour distance at least
/// [`MIN_IDENTITY_DISTANCE`].
pub fn sample_identities(n: usize, rng: &mut impl Rng) -> Vec<IdentitySpec> {
    let mut out: Vec<IdentitySpec> = Vec::with_capacity(n);
    while out.len() < n {
        let mut appearance = [PartAppearance {
            color: [0.0; 3],
            noise: 0.0,
        }; 7];
        for a in appearance.iter_mut() {
            let base = PALETTE[rng.random_range(0..PALETTE.len())];
            for (c, b) in a.color.iter_mut().zip(base) {
                *c = (b + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
            }
            a.noise = rng.random_range(0.02..0.06);
        }
        let geometry = BodyGeometry::canonical(rng.random_range(0.9..1.1), rng.random_range(0.9..1.1));
        let spec = IdentitySpec {
            id: out.len() as i64,
            part_appearance: appearance,
            body_geometry: geometry,
        };
        if out.iter().all(|o| o.color_distance(&spec) >= MIN_IDENTITY_DISTANCE) {
            out.push(spec);
        }
    }
    out
}

/// Occluding rectangle in image fractions, half-open.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub color: [f64; 3],
}

/// Per-sample rendering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Variation {
    pub scale: f64,
    /// Horizontal shift as a fraction of the width.
    pub dx: f64,
    /// Vertical shift as a fraction of the height.
    pub dy: f64,
    pub brightness: f64,
    pub background: [f64; 3],
    pub occluder: Option<Occluder>,
    pub noise_seed: u64,
}

impl Variation {
    pub fn neutral() -> Self {
        Self {
            scale: 1.0,
            dx: 0.0,
            dy: 0.0,
            brightness: 1.0,
            background: [0.5; 3],
            occluder: None,
            noise_seed: 0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            scale: rng.random_range(0.85..1.0),
            dx: rng.random_range(-0.08..0.08),
            dy: rng.random_range(-0.03..0.03),
            brightness: rng.random_range(0.8..1.2),
            background: [rng.random(), rng.random(), rng.random()],
            occluder: None,
            noise_seed: rng.random(),
        }
    }
}

/// Image-from-body mapping: `u = 0.5 + (x − 0.5)·sx + dx`, `v = v0 + y·sy + dy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub sx: f64,
    pub sy: f64,
    pub v0: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Placement {
    pub fn new(variation: &Variation, view: ViewTag) -> Self {
        let s = variation.scale;
        let (sx, sy, v0) = match view {
            // Upper body enlarged to fill the frame; legs below the knee fall outside.
            ViewTag::Half => (1.35 * s, 1.8 * s, 0.02),
            _ => (s, s, (1.0 - s) / 2.0),
        };
        Self {
            sx,
            sy,
            v0,
            dx: variation.dx,
            dy: variation.dy,
        }
    }

    /// Body-frame coordinates of the centre of pixel `(row, col)`.
    pub fn to_body(&self, row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
        let u = (col as f64 + 0.5) / width as f64;
        let v = (row as f64 + 0.5) / height as f64;
        ((u - 0.5 - self.dx) / self.sx + 0.5, (v - self.v0 - self.dy) / self.sy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: InputImage,
    /// Row-major region indices in `1..=N`.
    pub part_labels: Vec<usize>,
    pub identity: i64,
    pub view_tag: ViewTag,
}

impl SampleRecord {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// Pixel count per region, index 0 unused.
    pub fn label_histogram(&self) -> [usize; N_REGIONS + 1] {
        let mut h = [0; N_REGIONS + 1];
        for &l in &self.part_labels {
            h[l] += 1;
        }
        h
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rasterizes one view. Pixel values are quantized to 8 bits so a sample
/// survives a PNG round trip unchanged.
pub fn render_sample(
    identity: &IdentitySpec,
    variation: &Variation,
    view: ViewTag,
    height: usize,
    width: usize,
) -> SampleRecord {
    let placement = Placement::new(variation, view);
    let mut noise = ChaCha8Rng::seed_from_u64(variation.noise_seed);
    let mut pixels = Vec::with_capacity(height * width * 3);
    let mut labels = vec![BACKGROUND; height * width];

    // Painter's pass over the label raster, back to front.
    for (part, shape) in &identity.body_geometry.shapes {
        for row in 0..height {
            for col in 0..width {
                let (x, y) = placement.to_body(row, col, height, width);
                if shape.contains(x, y) {
                    labels[row * width + col] = part.label();
                }
            }
        }
    }
    if let Some(o) = &variation.occluder {
        for row in 0..height {
            for col in 0..width {
                if occludes(o, row, col, height, width) {
                    labels[row * width + col] = BACKGROUND;
                }
            }
        }
    }
    for row in 0..height {
        for col in 0..width {
            let z: [f64; 3] = [
                noise.sample(StandardNormal),
                noise.sample(StandardNormal),
                noise.sample(StandardNormal),
            ];
            let occluded = variation.occluder.as_ref().filter(|o| occludes(o, row, col, height, width));
            let label = labels[row * width + col];
            let (color, amp, gain) = if let Some(o) = occluded {
                (o.color, 0.03, 1.0)
            } else if label == BACKGROUND {
                (variation.background, 0.03, 1.0)
            } else {
                let a = identity.part_appearance[label - 1];
                (a.color, a.noise, variation.brightness)
            };
            for c in 0..3 {
                pixels.push(quantize(color[c] * gain + amp * z[c]));
            }
        }
    }
    SampleRecord {
        image: InputImage {
            height,
            width,
            pixels,
        },
        part_labels: labels,
        identity: identity.id,
        view_tag: view,
    }
}

fn occludes(o: &Occluder, row: usize, col: usize, height: usize, width: usize) -> bool {
    let u = (col as f64 + 0.5) / width as f64;
    let v = (row as f64 + 0.5) / height as f64;
    u >= o.x0 && u < o.x1 && v >= o.y0 && v < o.y1
}

fn random_occluder(rng: &mut impl Rng) -> Occluder {
    let color = [rng.random(), rng.random(), rng.random()];
    if rng.random_bool(0.7) {
        Occluder {
            x0: 0.0,
            y0: rng.random_range(0.6..0.8),
            x1: 1.0,
            y1: 1.0,
            color,
        }
    } else {
        Occluder {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: rng.random_range(0.2..0.3),
            color,
        }
    }
}

/// Renders a randomly varied view. Occluded views redraw the occluder until
/// at least one foreground part is completely hidden.
pub fn render_random(
    identity: &IdentitySpec,
    view: ViewTag,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> SampleRecord {
    let mut variation = Variation::sample(rng);
    if view != ViewTag::Occluded {
        return render_sample(identity, &variation, view, height, width);
    }
    loop {
        variation.occluder = Some(random_occluder(rng));
        let s = render_sample(identity, &variation, view, height, width);
        if s.label_histogram()[1..N_REGIONS].contains(&0) {
            return s;
        }
    }
}

pub fn flip_horizontal(sample: &SampleRecord) -> SampleRecord {
    let (h, w) = (sample.height(), sample.width());
    let mut out = sample.clone();
    for row in 0..h {
        for col in 0..w {
            let src = row * w + (w - 1 - col);
            let dst = row * w + col;
            out.part_labels[dst] = sample.part_labels[src];
            out.image.pixels[3 * dst..3 * dst + 3].copy_from_slice(&sample.image.pixels[3 * src..3 * src + 3]);
        }
    }
    out
}

/// Pixel rectangle `[row0, row1) × [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

/// Fills the rectangle with uniform noise from `seed` and relabels it
/// background.
pub fn erase(sample: &SampleRecord, rect: EraseRect, seed: u64) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = sample.width();
    let mut out = sample.clone();
    for row in rect.row0..rect.row1.min(sample.height()) {
        for col in rect.col0..rect.col1.min(w) {
            let i = row * w + col;
            out.part_labels[i] = BACKGROUND;
            for c in 0..3 {
                out.image.pixels[3 * i + c] = rng.random();
            }
        }
    }
    out
}

/// Random flip (probability 0.5) and random erasing (probability 0.5,
/// area 2–25 %, aspect 0.3–3.3).
pub fn augment(sample: &SampleRecord, seed: u64) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = if rng.random_bool(0.5) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    if rng.random_bool(0.5) {
        let (h, w) = (out.height(), out.width());
        let area = (h * w) as f64 * rng.random_range(0.02..0.25);
        let aspect = rng.random_range(0.3f64.ln()..(1.0f64 / 0.3).ln()).exp();
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
        let row0 = rng.random_range(0..=h - eh);
        let col0 = rng.random_range(0..=w - ew);
        let rect = EraseRect {
            row0,
            col0,
            row1: row0 + eh,
            col1: col0 + ew,
        };
        out = erase(&out, rect, rng.random());
    }
    out
}

/// Majority label per `downsample × downsample` block, ties to the
/// smallest index.
pub fn downsample_labels(labels: &[usize], height: usize, width: usize, downsample: usize) -> Result<Vec<usize>> {
    if downsample == 0 || height % downsample != 0 || width % downsample != 0 {
        return Err(Error::InvalidConfig(format!(
            "{height}×{width} labels are not divisible by {downsample}"
        )));
    }
    if labels.len() != height * width {
        return Err(Error::ShapeMismatch {
            what: "label map",
            expected: height * width,
            found: labels.len(),
        });
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let (oh, ow) = (height / downsample, width / downsample);
    let mut out = Vec::with_capacity(oh * ow);
    let mut counts = vec![0usize; max_label + 1];
    for by in 0..oh {
        for bx in 0..ow {
            counts.iter_mut().for_each(|c| *c = 0);
            for row in by * downsample..(by + 1) * downsample {
                for col in bx * downsample..(bx + 1) * downsample {
                    counts[labels[row * width + col]] += 1;
                }
            }
            let mut best = 0;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = l;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_identities: 50,
            images_per_identity: 20,
            height: 96,
            width: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 4 || self.images_per_identity < 4 {
            return Err(Error::InvalidConfig(
                "need at least 4 identities and 4 images per identity".into(),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidConfig("images must be at least 8×8".into()));
        }
        Ok(())
    }

    /// Identities `0..n/2` train; the rest are split into gallery and probe.
    pub fn train_identities(&self) -> usize {
        self.n_identities / 2
    }

    /// Images `0..n_full` of each identity are full views; the rest
    /// alternate half and occluded.
    pub fn full_views(&self) -> usize {
        (2 * self.images_per_identity).div_ceil(5)
    }

    pub fn view_of(&self, k: usize) -> ViewTag {
        let n_full = self.full_views();
        if k < n_full {
            ViewTag::Full
        } else if (k - n_full) % 2 == 0 {
            ViewTag::Half
        } else {
            ViewTag::Occluded
        }
    }

    pub fn split_of(&self, identity: usize, k: usize) -> Split {
        if identity < self.train_identities() {
            Split::Train
        } else if self.view_of(k) == ViewTag::Full {
            Split::Gallery
        } else {
            Split::Probe
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Gallery,
    Probe,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "gallery" => Some(Split::Gallery),
            "probe" => Some(Split::Probe),
            _ => None,
        }
    }
}

fn sample_seed(seed: u64, identity: usize, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + ((identity as u64) << 20) + k as u64);
    rng.random()
}

/// Identities for a dataset seed.
pub fn identities(config: &SynthConfig) -> Vec<IdentitySpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_identities(config.n_identities, &mut rng)
}

/// One sample by coordinates; each sample has its own random stream.
pub fn render_indexed(config: &SynthConfig, spec: &IdentitySpec, k: usize) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, spec.id as usize, k));
    render_random(spec, config.view_of(k), config.height, config.width, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub identity: i64,
    pub index: usize,
    pub view: ViewTag,
    pub image: PathBuf,
    pub label: PathBuf,
}

impl ManifestEntry {
    /// Stable image id, `<split>/<identity>_<k>`.
    pub fn image_id(&self) -> String {
        format!("{}/{}_{}", self.split.as_str(), self.identity, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::from("# esa-reid synthetic dataset\n");
        s.push_str("# sample <split> <identity> <k> <view> <image> <label>\n");
        let _ = writeln!(s, "seed = {}", c.seed);
        let _ = writeln!(s, "n_identities = {}", c.n_identities);
        let _ = writeln!(s, "images_per_identity = {}", c.images_per_identity);
        let _ = writeln!(s, "height = {}", c.height);
        let _ = writeln!(s, "width = {}", c.width);
        for split in [Split::Train, Split::Gallery, Split::Probe] {
            let _ = writeln!(s, "count.{} = {}", split.as_str(), self.count(split));
        }
        for e in &self.entries {
            let _ = writeln!(
                s,
                "sample {} {} {} {} {} {}",
                e.split.as_str(),
                e.identity,
                e.index,
                e.view.as_str(),
                e.image.display(),
                e.label.display()
            );
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "manifest",
            path: path.to_path_buf(),
            reason,
        };
        let (samples, rest): (Vec<&str>, Vec<&str>) =
            text.lines().partition(|l| l.trim_start().starts_with("sample "));
        let pairs = parse_key_values(&rest.join("\n"))?;
        let get = |k: &str| -> Result<u64> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| bad(format!("missing or invalid `{k}`")))
        };
        let config = SynthConfig {
            seed: get("seed")?,
            n_identities: get("n_identities")? as usize,
            images_per_identity: get("images_per_identity")? as usize,
            height: get("height")? as usize,
            width: get("width")? as usize,
        };
        let mut entries = Vec::with_capacity(samples.len());
        for line in samples {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(bad(format!("malformed sample line `{line}`")));
            }
            entries.push(ManifestEntry {
                split: Split::parse(f[1]).ok_or_else(|| bad(format!("unknown split `{}`", f[1])))?,
                identity: f[2].parse().map_err(|_| bad(format!("bad identity `{}`", f[2])))?,
                index: f[3].parse().map_err(|_| bad(format!("bad index `{}`", f[3])))?,
                view: ViewTag::parse(f[4]).ok_or_else(|| bad(format!("unknown view `{}`", f[4])))?,
                image: PathBuf::from(f[5]),
                label: PathBuf::from(f[6]),
            });
        }
        let manifest = Self { config, entries };
        for split in [Split::Train, Split::Gallery, Split::Probe] {
            let declared = get(&format!("count.{}", split.as_str()))? as usize;
            if declared != manifest.count(split) {
                return Err(bad(format!("count.{} does not match the sample lines", split.as_str())));
            }
        }
        Ok(manifest)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }

    /// Gallery and probe share identities, no image is in both, and train
    /// identities never appear in gallery or probe.
    pub fn check_split_hygiene(&self) -> Result<()> {
        use std::collections::HashSet;
        let ids = |s: Split| self.split(s).map(|e| e.identity).collect::<HashSet<_>>();
        let (train, gallery, probe) = (ids(Split::Train), ids(Split::Gallery), ids(Split::Probe));
        if gallery.is_disjoint(&probe) {
            return Err(Error::InvalidConfig("gallery and probe share no identity".into()));
        }
        if !train.is_disjoint(&gallery) || !train.is_disjoint(&probe) {
            return Err(Error::InvalidConfig("train identities leak into evaluation".into()));
        }
        let g_imgs: HashSet<_> = self.split(Split::Gallery).map(|e| &e.image).collect();
        if self.split(Split::Probe).any(|e| g_imgs.contains(&e.image)) {
            return Err(Error::InvalidConfig("an image is both gallery and probe".into()));
        }
        Ok(())
    }
}

/// Renders every sample in manifest order.
pub fn generate_samples(config: &SynthConfig) -> Result<Vec<(ManifestEntry, SampleRecord)>> {
    config.validate()?;
    let specs = identities(config);
    let mut out = Vec::with_capacity(config.n_identities * config.images_per_identity);
    for spec in &specs {
        for k in 0..config.images_per_identity {
            let split = config.split_of(spec.id as usize, k);
            let name = format!("{}/{}_{k}.png", split.as_str(), spec.id);
            let entry = ManifestEntry {
                split,
                identity: spec.id,
                index: k,
                view: config.view_of(k),
                image: Path::new("images").join(&name),
                label: Path::new("labels").join(&name),
            };
            out.push((entry, render_indexed(config, spec, k)));
        }
    }
    Ok(out)
}

/// Writes the dataset under `root` and returns its manifest.
pub fn generate_dataset(config: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    write_dataset(config, &generate_samples(config)?, root)
}

/// Writes already rendered samples and the manifest under `root`.
pub fn write_dataset(config: &SynthConfig, samples: &[(ManifestEntry, SampleRecord)], root: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for (entry, sample) in samples {
        write_sample(sample, &root.join(&entry.image), &root.join(&entry.label))?;
        entries.push(entry.clone());
    }
    let manifest = DatasetManifest {
        config: config.clone(),
        entries,
    };
    let path = root.join("manifest.txt");
    crate::io::write_file(&path, manifest.to_text().as_bytes())?;
    Ok(manifest)
}

fn save_png(path: &Path, data: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(path, data, w as u32, h as u32, color, image::ImageFormat::Png).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

pub(crate) fn write_rgb(path: &Path, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    save_png(path, &bytes, width, height, image::ExtendedColorType::Rgb8)
}

pub fn write_sample(sample: &SampleRecord, image_path: &Path, label_path: &Path) -> Result<()> {
    write_rgb(image_path, &sample.image.pixels, sample.height(), sample.width())?;
    let labels: Vec<u8> = sample.part_labels.iter().map(|&l| l as u8).collect();
    save_png(label_path, &labels, sample.width(), sample.height(), image::ExtendedColorType::L8)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_image(path: &Path) -> Result<InputImage> {
    let img = open_image(path)?.to_rgb8();
    Ok(InputImage {
        height: img.height() as usize,
        width: img.width() as usize,
        pixels: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let img = open_image(path)?.to_luma8();
    let labels: Vec<usize> = img.as_raw().iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > N_REGIONS) {
        return Err(Error::InvalidLabel {
            label: bad,
            limit: N_REGIONS,
        });
    }
    Ok(labels)
}

/// Loads one split back from disk.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<(ManifestEntry, SampleRecord)>> {
    manifest
        .split(split)
        .map(|e| {
            let image = read_image(&root.join(&e.image))?;
            let part_labels = read_labels(&root.join(&e.label))?;
            if part_labels.len() != image.height * image.width {
                return Err(Error::ShapeMismatch {
                    what: "label raster",
                    expected: image.height * image.width,
                    found: part_labels.len(),
                });
            }
            Ok((
                e.clone(),
                SampleRecord {
                    image,
                    part_labels,
                    identity: e.identity,
                    view_tag: e.view,
                },
            ))
        })
        .collect()
}
