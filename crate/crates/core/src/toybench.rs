//! Procedural quadruped part-segmentation benchmark.
//!
//! Each scene is an articulated 2D silhouette (torso ellipse, head disc, leg
//! rectangles, tail polyline) rasterized with pixel-exact labels. Two texture
//! modes stand in for the synthetic and real domains:
//!
//! * `Source`: flat part colors with white noise on a flat background.
//! * `Target`: the same palette seen through a camera-like tone shift, with
//!   low-frequency sinusoidal and smoothed-noise textures and a correlated
//!   background.
//!
//! The two domains differ mostly in their amplitude spectra, which is what
//! Fourier alignment transfers. Part sizes are chosen so tail and head are
//! pixel-rare compared to leg and torso.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMap};
use crate::{derive_seed, BACKGROUND, CLASS_NAMES, HEAD, LEG, TAIL, TORSO};

pub const DEFAULT_CANVAS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Radians; direction of the major axis (towards the head).
    pub rotation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub radius: f64,
    /// Radians, tilt of the head away from the torso axis (positive = up).
    pub attach_angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegSpec {
    /// Attachment position along the torso axis in `[-1, 1]` (units of the semi-major axis).
    pub offset: f64,
    pub length: f64,
    pub width: f64,
    /// Radians, rotation away from the torso's downward normal.
    pub splay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    pub length: f64,
    /// Turning rate in radians per pixel of tail length.
    pub curvature: f64,
    pub thickness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySceneSpec {
    pub height: usize,
    pub width: usize,
    pub torso: Ellipse,
    pub head: HeadSpec,
    pub legs: Vec<LegSpec>,
    pub tail: Option<TailSpec>,
    pub texture: Domain,
    pub seed: u64,
}

/// Number of straight segments approximating the tail curve.
pub const TAIL_SEGMENTS: usize = 6;

type Point = (f64, f64);

fn rotate((x, y): Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    (x * c - y * s, x * s + y * c)
}

fn add(a: Point, b: Point) -> Point {
    (a.0 + b.0, a.1 + b.1)
}

fn scale(a: Point, k: f64) -> Point {
    (a.0 * k, a.1 * k)
}

fn dot(a: Point, b: Point) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

/// Rasterizable primitive in canvas coordinates (x right, y down, pixel centers at +0.5).
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Ellipse(Ellipse),
    Disc { center: Point, radius: f64 },
    /// Rectangle swept from `start` along unit `dir` for `length`, total width `width`.
    Rect { start: Point, dir: Point, length: f64, width: f64 },
    /// Pixels within `thickness / 2` of a polyline.
    Polyline { points: Vec<Point>, thickness: f64 },
}

impl Shape {
    pub fn contains(&self, p: Point) -> bool {
        match self {
            Shape::Ellipse(e) => {
                let local = rotate((p.0 - e.cx, p.1 - e.cy), -e.rotation);
                (local.0 / e.semi_major).powi(2) + (local.1 / e.semi_minor).powi(2) <= 1.0
            }
            Shape::Disc { center, radius } => {
                (p.0 - center.0).powi(2) + (p.1 - center.1).powi(2) <= radius * radius
            }
            Shape::Rect {
                start,
                dir,
                length,
                width,
            } => {
                let d = (p.0 - start.0, p.1 - start.1);
                let along = dot(d, *dir);
                let across = dot(d, (-dir.1, dir.0));
                (0.0..=*length).contains(&along) && across.abs() <= width / 2.0
            }
            Shape::Polyline { points, thickness } => points.windows(2).any(|seg| {
                let (a, b) = (seg[0], seg[1]);
                let ab = (b.0 - a.0, b.1 - a.1);
                let ap = (p.0 - a.0, p.1 - a.1);
                let len2 = dot(ab, ab);
                let t = if len2 > 0.0 { (dot(ap, ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let closest = add(a, scale(ab, t));
                (p.0 - closest.0).powi(2) + (p.1 - closest.1).powi(2) <= (thickness / 2.0).powi(2)
            }),
        }
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Ellipse(e) => {
                let (s, c) = e.rotation.sin_cos();
                let hx = ((e.semi_major * c).powi(2) + (e.semi_minor * s).powi(2)).sqrt();
                let hy = ((e.semi_major * s).powi(2) + (e.semi_minor * c).powi(2)).sqrt();
                (e.cx - hx, e.cy - hy, e.cx + hx, e.cy + hy)
            }
            Shape::Disc { center, radius } => (
                center.0 - radius,
                center.1 - radius,
                center.0 + radius,
                center.1 + radius,
            ),
            Shape::Rect {
                start,
                dir,
                length,
                width,
            } => {
                let n = scale((-dir.1, dir.0), width / 2.0);
                let end = add(*start, scale(*dir, *length));
                let corners = [
                    add(*start, n),
                    add(*start, scale(n, -1.0)),
                    add(end, n),
                    add(end, scale(n, -1.0)),
                ];
                bounds_of(&corners, 0.0)
            }
            Shape::Polyline { points, thickness } => bounds_of(points, thickness / 2.0),
        }
    }
}

fn bounds_of(points: &[Point], pad: f64) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        b.0 = b.0.min(p.0 - pad);
        b.1 = b.1.min(p.1 - pad);
        b.2 = b.2.max(p.0 + pad);
        b.3 = b.3.max(p.1 + pad);
    }
    b
}

impl ToySceneSpec {
    pub fn axis(&self) -> Point {
        rotate((1.0, 0.0), self.torso.rotation)
    }

    /// Downward normal of the torso: the side legs hang from.
    pub fn normal(&self) -> Point {
        rotate((0.0, 1.0), self.torso.rotation)
    }

    pub fn head_center(&self) -> Point {
        let dir = rotate(self.axis(), -self.head.attach_angle);
        add(
            (self.torso.cx, self.torso.cy),
            scale(dir, self.torso.semi_major + 0.4 * self.head.radius),
        )
    }

    pub fn leg_start(&self, leg: &LegSpec) -> Point {
        let c = (self.torso.cx, self.torso.cy);
        add(
            add(c, scale(self.axis(), leg.offset * self.torso.semi_major * 0.7)),
            scale(self.normal(), self.torso.semi_minor * 0.5),
        )
    }

    pub fn leg_dir(&self, leg: &LegSpec) -> Point {
        rotate(self.normal(), leg.splay)
    }

    pub fn tail_points(&self, tail: &TailSpec) -> Vec<Point> {
        let mut p = add(
            (self.torso.cx, self.torso.cy),
            scale(self.axis(), -0.85 * self.torso.semi_major),
        );
        let mut heading = self.torso.rotation + PI;
        let step = tail.length / TAIL_SEGMENTS as f64;
        let mut points = vec![p];
        for _ in 0..TAIL_SEGMENTS {
            heading += tail.curvature * step;
            p = add(p, scale(rotate((1.0, 0.0), heading), step));
            points.push(p);
        }
        points
    }

    /// Shapes in drawing order (tail, legs, torso, head) with their classes.
    pub fn shapes(&self) -> Vec<(u8, Shape)> {
        let mut shapes = Vec::new();
        if let Some(tail) = &self.tail {
            shapes.push((
                TAIL,
                Shape::Polyline {
                    points: self.tail_points(tail),
                    thickness: tail.thickness,
                },
            ));
        }
        for leg in &self.legs {
            shapes.push((
                LEG,
                Shape::Rect {
                    start: self.leg_start(leg),
                    dir: self.leg_dir(leg),
                    length: leg.length,
                    width: leg.width,
                },
            ));
        }
        shapes.push((TORSO, Shape::Ellipse(self.torso)));
        shapes.push((
            HEAD,
            Shape::Disc {
                center: self.head_center(),
                radius: self.head.radius,
            },
        ));
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("canvas must be non-empty".into()));
        }
        let t = &self.torso;
        if !(t.semi_major > 0.0 && t.semi_minor > 0.0) {
            return Err(Error::InvalidSpec("torso has zero area".into()));
        }
        if !(self.head.radius > 0.0) {
            return Err(Error::InvalidSpec("head radius must be positive".into()));
        }
        for (i, leg) in self.legs.iter().enumerate() {
            if !(leg.length > 0.0 && leg.width > 0.0) {
                return Err(Error::InvalidSpec(format!("leg {i} has zero area")));
            }
        }
        if let Some(tail) = &self.tail {
            if !(tail.length > 0.0 && tail.thickness > 0.0) {
                return Err(Error::InvalidSpec("tail has zero area".into()));
            }
        }
        for (class, shape) in self.shapes() {
            let (x0, y0, x1, y1) = shape.bounds();
            let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite())
                && x0 >= 0.0
                && y0 >= 0.0
                && x1 <= self.width as f64
                && y1 <= self.height as f64;
            if !ok {
                return Err(Error::InvalidSpec(format!(
                    "{} extends outside the {}x{} canvas",
                    CLASS_NAMES[class as usize], self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// Random pose for `domain`; about one scene in five is lying on its side.
    pub fn sample(canvas: usize, domain: Domain, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = canvas as f64;
        for _ in 0..256 {
            let spec = Self::draw(&mut rng, canvas, size, domain, seed);
            if spec.validate().is_ok() {
                return Ok(spec);
            }
        }
        Err(Error::InvalidSpec(format!(
            "could not place a scene on a {canvas}x{canvas} canvas"
        )))
    }

    fn draw(rng: &mut ChaCha8Rng, canvas: usize, size: f64, domain: Domain, seed: u64) -> Self {
        let k = size / 64.0 * rng.random_range(0.85..1.15);
        let facing = if rng.random_bool(0.5) { 0.0 } else { PI };
        let lying = rng.random_bool(0.2);
        let rotation = if lying {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            side * PI / 2.0 + rng.random_range(-0.25..0.25)
        } else {
            facing + rng.random_range(-0.35..0.35)
        };
        let semi_major = k * rng.random_range(12.0..15.0);
        let semi_minor = k * rng.random_range(6.5..8.5);
        let torso = Ellipse {
            cx: size / 2.0 + rng.random_range(-4.0..4.0) * k,
            cy: size / 2.0 + rng.random_range(-4.0..4.0) * k,
            semi_major,
            semi_minor,
            rotation,
        };
        let head = HeadSpec {
            radius: k * rng.random_range(4.2..5.4),
            attach_angle: rng.random_range(0.1..0.6),
        };
        let legs = (0..4)
            .map(|i| {
                let base = [-0.85, -0.5, 0.5, 0.85][i];
                LegSpec {
                    offset: base + rng.random_range(-0.1..0.1),
                    length: k * rng.random_range(11.0..15.0),
                    width: k * rng.random_range(2.6..3.6),
                    splay: rng.random_range(-0.45..0.45),
                }
            })
            .collect();
        let tail = Some(TailSpec {
            length: k * rng.random_range(11.0..16.0),
            curvature: rng.random_range(-0.08..0.08),
            thickness: k * rng.random_range(2.2..3.0),
        });
        Self {
            height: canvas,
            width: canvas,
            torso,
            head,
            legs,
            tail,
            texture: domain,
            seed,
        }
    }
}

/// Label map by per-pixel inclusion tests in drawing order.
pub fn rasterize(spec: &ToySceneSpec) -> Result<LabelMap> {
    spec.validate()?;
    let mut data = vec![BACKGROUND; spec.height * spec.width];
    for (class, shape) in spec.shapes() {
        let (x0, y0, x1, y1) = shape.bounds();
        let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(spec.width as f64) as usize);
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(spec.height as f64) as usize);
        for y in ys {
            for x in xs.clone() {
                if shape.contains((x as f64 + 0.5, y as f64 + 0.5)) {
                    data[y * spec.width + x] = class;
                }
            }
        }
    }
    LabelMap::new(spec.height, spec.width, data)
}

/// Base RGB color of each class in the synthetic palette (index 0 unused).
const PART_COLORS: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [0.86, 0.42, 0.28],
    [0.62, 0.50, 0.36],
    [0.42, 0.32, 0.26],
    [0.80, 0.72, 0.52],
];

/// Appearance parameters of the two domains.
#[derive(Debug, Clone, Copy)]
struct DomainStyle {
    color_jitter: f64,
    white_noise: f64,
    /// Per-channel `out = gain · in + offset` applied to target colors.
    gain: [f64; 3],
    offset: [f64; 3],
    texture_amplitude: f64,
    background_texture: f64,
}

const SOURCE_STYLE: DomainStyle = DomainStyle {
    color_jitter: 0.04,
    white_noise: 0.07,
    gain: [1.0, 1.0, 1.0],
    offset: [0.0, 0.0, 0.0],
    texture_amplitude: 0.0,
    background_texture: 0.0,
};

const TARGET_STYLE: DomainStyle = DomainStyle {
    color_jitter: 0.04,
    white_noise: 0.01,
    gain: [0.62, 0.70, 0.80],
    offset: [0.20, 0.16, 0.12],
    texture_amplitude: 0.06,
    background_texture: 0.14,
};

/// Smooth random field: sum of low-frequency sinusoids plus bilinearly
/// upsampled coarse noise, roughly zero-mean with unit-ish amplitude.
fn low_frequency_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let cycles = rng.random_range(1.0..4.0);
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            (cycles, angle, phase, amp)
        })
        .collect();
    const GRID: usize = 5;
    let coarse: Vec<f64> = (0..GRID * GRID).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let mut s = 0.0;
            for &(cycles, angle, phase, amp) in &waves {
                let t = u * angle.cos() + v * angle.sin();
                s += amp * (2.0 * PI * cycles * t + phase).sin();
            }
            let gx = u * (GRID - 1) as f64;
            let gy = v * (GRID - 1) as f64;
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(GRID - 1), (y0 + 1).min(GRID - 1));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let n = coarse[y0 * GRID + x0] * (1.0 - fx) * (1.0 - fy)
                + coarse[y0 * GRID + x1] * fx * (1.0 - fy)
                + coarse[y1 * GRID + x0] * (1.0 - fx) * fy
                + coarse[y1 * GRID + x1] * fx * fy;
            out.push(s / 2.0 + 0.5 * n);
        }
    }
    out
}

fn render(spec: &ToySceneSpec, label: &LabelMap) -> Result<ImageTensor> {
    let style = match spec.texture {
        Domain::Source => SOURCE_STYLE,
        Domain::Target => TARGET_STYLE,
    };
    // separate stream from the pose sampler
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x7E47));
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let jitter = Normal::new(0.0, style.color_jitter).expect("valid std");
    let noise = Normal::new(0.0, 1.0).expect("valid std");

    let background = [
        rng.random_range(0.15..0.40),
        rng.random_range(0.40..0.65),
        rng.random_range(0.30..0.60),
    ];
    let mut colors = PART_COLORS;
    colors[BACKGROUND as usize] = background;
    for (class, color) in colors.iter_mut().enumerate() {
        if class != BACKGROUND as usize {
            for v in color.iter_mut() {
                *v += jitter.sample(&mut rng);
            }
        }
    }
    let part_field = low_frequency_field(&mut rng, h, w);
    let bg_field = low_frequency_field(&mut rng, h, w);

    let mut data = vec![0.0; n * 3];
    for i in 0..n {
        let class = label.data()[i] as usize;
        let texture = if class == BACKGROUND as usize {
            style.background_texture * bg_field[i]
        } else {
            style.texture_amplitude * part_field[i]
        };
        for c in 0..3 {
            let base = colors[class][c] + texture;
            let shifted = style.gain[c] * base + style.offset[c];
            data[c * n + i] = shifted + style.white_noise * noise.sample(&mut rng);
        }
    }
    ImageTensor::from_clamped(h, w, 3, data)
}

/// Deterministic image and pixel-exact label map for a scene.
pub fn generate_scene(spec: &ToySceneSpec) -> Result<(ImageTensor, LabelMap)> {
    let label = rasterize(spec)?;
    let image = render(spec, &label)?;
    Ok((image, label))
}

/// One dataset entry; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub domain: Domain,
    #[serde(default = "default_split")]
    pub split: Split,
    pub seed: u64,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub canvas: usize,
    pub seed: u64,
    pub classes: BTreeMap<u8, String>,
    pub entries: Vec<ManifestEntry>,
}

pub fn default_class_catalog() -> BTreeMap<u8, String> {
    CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| (i as u8, n.to_string()))
        .collect()
}

impl DatasetManifest {
    pub fn entries_for(&self, domain: Domain, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries
            .iter()
            .filter(move |e| e.domain == domain && e.split == split)
    }
}

/// Planned entries of a split, in file order: source train, target train, target test.
pub fn plan_split(n_source: usize, n_target: usize, n_test: usize, seed: u64) -> Vec<ManifestEntry> {
    let groups = [
        (Domain::Source, Split::Train, n_source, "source"),
        (Domain::Target, Split::Train, n_target, "target"),
        (Domain::Target, Split::Test, n_test, "test"),
    ];
    let mut entries = Vec::with_capacity(n_source + n_target + n_test);
    for (domain, split, count, prefix) in groups {
        for i in 0..count {
            let index = entries.len() as u64;
            entries.push(ManifestEntry {
                image: format!("images/{prefix}_{i:05}.png"),
                label: Some(format!("labels/{prefix}_{i:05}.png")),
                domain,
                split,
                seed: derive_seed(seed, index),
            });
        }
    }
    entries
}

/// Scene for a manifest entry.
pub fn scene_for(entry: &ManifestEntry, canvas: usize) -> Result<(ImageTensor, LabelMap)> {
    let spec = ToySceneSpec::sample(canvas, entry.domain, entry.seed)?;
    generate_scene(&spec)
}

/// Renders a split in memory without touching the filesystem.
pub fn render_split(
    n_source: usize,
    n_target: usize,
    n_test: usize,
    seed: u64,
    canvas: usize,
) -> Result<(DatasetManifest, Vec<(ImageTensor, LabelMap)>)> {
    let entries = plan_split(n_source, n_target, n_test, seed);
    let scenes = entries
        .par_iter()
        .map(|e| scene_for(e, canvas))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        canvas,
        seed,
        classes: default_class_catalog(),
        entries,
    };
    Ok((manifest, scenes))
}

/// Writes a split (PNG images, PNG label maps and `manifest.json`) under `out_dir`.
///
/// Target entries carry labels for held-out evaluation only.
pub fn generate_split(
    n_source: usize,
    n_target: usize,
    n_test: usize,
    seed: u64,
    canvas: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::InvalidInput("a split needs at least one source and one target image".into()));
    }
    if canvas < 16 {
        return Err(Error::InvalidInput(format!("canvas {canvas} is too small for a scene")));
    }
    for sub in ["images", "labels"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let entries = plan_split(n_source, n_target, n_test, seed);
    entries.par_iter().try_for_each(|entry| -> Result<()> {
        let (image, label) = scene_for(entry, canvas)?;
        crate::io::save_image(&out_dir.join(&entry.image), &image)?;
        if let Some(path) = &entry.label {
            crate::io::save_label(&out_dir.join(path), &label)?;
        }
        Ok(())
    })?;
    let manifest = DatasetManifest {
        canvas,
        seed,
        classes: default_class_catalog(),
        entries,
    };
    crate::io::save_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Convenience: resolves an entry path against the manifest directory.
pub fn resolve(base: &Path, relative: &str) -> PathBuf {
    base.join(relative)
}
