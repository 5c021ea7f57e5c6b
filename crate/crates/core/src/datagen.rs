//! Synthetic scenes with exact removal ground truth.
//!
//! A scene is a smooth background with one flat-colored shape pasted on
//! top. The background is rendered first and kept, so a perfect removal is
//! known pixel for pixel. Shapes are rasterized by testing pixel centers
//! (no anti-aliasing), which makes the composite equal the background
//! exactly outside the mask. All pixel values sit on the 8-bit grid, so
//! scenes survive a PNG round trip unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::{self, Manifest};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundKind {
    Gradient,
    Noise,
    Stripes,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Rect, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rect => "rect",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] = [BackgroundKind::Gradient, BackgroundKind::Noise, BackgroundKind::Stripes];

    pub fn name(self) -> &'static str {
        match self {
            BackgroundKind::Gradient => "gradient",
            BackgroundKind::Noise => "noise",
            BackgroundKind::Stripes => "stripes",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Shape geometry in pixel coordinates (pixel `(x, y)` has center
/// `(x + 0.5, y + 0.5)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Disk { .. } => ShapeKind::Disk,
            Shape::Rect { .. } => ShapeKind::Rect,
            Shape::Triangle { .. } => ShapeKind::Triangle,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Triangle { pts: [a, b, c] } => {
                let edge = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
                let (d1, d2, d3) = (edge(a, b), edge(b, c), edge(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Shape {
        match *self {
            Shape::Disk { cx, cy, r } => Shape::Disk { cx: cx + dx, cy: cy + dy, r },
            Shape::Rect { x0, y0, x1, y1 } => Shape::Rect {
                x0: x0 + dx,
                y0: y0 + dy,
                x1: x1 + dx,
                y1: y1 + dy,
            },
            Shape::Triangle { pts } => Shape::Triangle {
                pts: pts.map(|(x, y)| (x + dx, y + dy)),
            },
        }
    }

    /// Axis-aligned bounds `(xmin, ymin, xmax, ymax)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Shape::Triangle { pts } => pts.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
        }
    }

    fn fits(&self, size: usize) -> bool {
        let (a, b, c, d) = self.bounds();
        a >= 0.0 && b >= 0.0 && c <= size as f64 && d <= size as f64
    }

    /// Binary `size×size` rasterization.
    pub fn rasterize(&self, size: usize) -> Vec<bool> {
        (0..size * size)
            .map(|i| self.contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
            .collect()
    }

    fn encode(&self) -> String {
        let nums: Vec<f64> = match *self {
            Shape::Disk { cx, cy, r } => vec![cx, cy, r],
            Shape::Rect { x0, y0, x1, y1 } => vec![x0, y0, x1, y1],
            Shape::Triangle { pts } => pts.iter().flat_map(|&(x, y)| [x, y]).collect(),
        };
        let nums: Vec<String> = nums.iter().map(f64::to_string).collect();
        format!("{}:{}", self.kind().name(), nums.join(","))
    }

    fn decode(s: &str) -> Option<Shape> {
        let (kind, rest) = s.split_once(':')?;
        let v: Vec<f64> = rest.split(',').map(str::parse).collect::<std::result::Result<_, _>>().ok()?;
        match (kind, v.len()) {
            ("disk", 3) => Some(Shape::Disk { cx: v[0], cy: v[1], r: v[2] }),
            ("rect", 4) => Some(Shape::Rect { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }),
            ("triangle", 6) => Some(Shape::Triangle {
                pts: [(v[0], v[1]), (v[2], v[3]), (v[4], v[5])],
            }),
            _ => None,
        }
    }
}

/// A flat-colored shape; `color` holds one 8-bit level per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDescriptor {
    pub shape: Shape,
    pub color: Vec<u8>,
}

impl ShapeDescriptor {
    fn encode(&self) -> String {
        let c: Vec<String> = self.color.iter().map(u8::to_string).collect();
        format!("{};{}", self.shape.encode(), c.join(","))
    }

    fn decode(s: &str) -> Option<Self> {
        let (shape, color) = s.split_once(';')?;
        Some(Self {
            shape: Shape::decode(shape)?,
            color: color.split(',').map(str::parse).collect::<std::result::Result<_, _>>().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub channels: usize,
    pub shapes: Vec<ShapeKind>,
    pub backgrounds: Vec<BackgroundKind>,
    pub min_coverage: f64,
    pub max_coverage: f64,
    /// Also paint an identical copy of the object into the background.
    pub twin: bool,
    /// Twin and object must not share any `twin_block×twin_block` cell.
    pub twin_block: usize,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            channels: 3,
            shapes: ShapeKind::ALL.to_vec(),
            backgrounds: BackgroundKind::ALL.to_vec(),
            min_coverage: 0.02,
            max_coverage: 0.40,
            twin: false,
            twin_block: 8,
            max_attempts: 500,
        }
    }
}

impl SceneSpec {
    /// Scenes with a background twin of the object; objects are kept small
    /// enough that two copies fit.
    pub fn twins() -> Self {
        Self {
            max_coverage: 0.12,
            twin: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || self.shapes.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::config("scene spec needs size ≥ 8, shapes and backgrounds"));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::config("scenes have 1 or 3 channels"));
        }
        if !(0.0 < self.min_coverage && self.min_coverage <= self.max_coverage && self.max_coverage < 1.0) {
            return Err(Error::config("coverage bounds must satisfy 0 < min ≤ max < 1"));
        }
        if self.twin && self.twin_block == 0 {
            return Err(Error::config("twin block must be positive"));
        }
        Ok(())
    }

    fn to_entries(&self) -> Vec<(String, String)> {
        let names = |v: Vec<&str>| v.join(",");
        vec![
            ("size".into(), self.size.to_string()),
            ("channels".into(), self.channels.to_string()),
            ("shapes".into(), names(self.shapes.iter().map(|s| s.name()).collect())),
            ("backgrounds".into(), names(self.backgrounds.iter().map(|s| s.name()).collect())),
            ("min_coverage".into(), self.min_coverage.to_string()),
            ("max_coverage".into(), self.max_coverage.to_string()),
            ("twin".into(), self.twin.to_string()),
            ("twin_block".into(), self.twin_block.to_string()),
            ("max_attempts".into(), self.max_attempts.to_string()),
        ]
    }

    fn from_manifest(m: &Manifest) -> Result<Self> {
        let get = |k: &str| {
            m.get(&format!("spec.{k}"))
                .ok_or_else(|| Error::Integrity(format!("manifest lacks spec.{k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Integrity(format!("spec.{k} is not a number")))
        };
        let shapes = get("shapes")?
            .split(',')
            .map(|s| {
                ShapeKind::ALL
                    .into_iter()
                    .find(|k| k.name() == s)
                    .ok_or_else(|| Error::Integrity(format!("unknown shape `{s}`")))
            })
            .collect::<Result<_>>()?;
        let backgrounds = get("backgrounds")?
            .split(',')
            .map(|s| BackgroundKind::parse(s).ok_or_else(|| Error::Integrity(format!("unknown background `{s}`"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            size: num("size")? as usize,
            channels: num("channels")? as usize,
            shapes,
            backgrounds,
            min_coverage: num("min_coverage")?,
            max_coverage: num("max_coverage")?,
            twin: get("twin")? == "true",
            twin_block: num("twin_block")? as usize,
            max_attempts: num("max_attempts")? as usize,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Seed of the stream the scene was drawn from.
    pub seed: u64,
    pub index: usize,
    /// `channels×size×size` image with the object.
    pub composite: Tensor<f32>,
    /// The same image without the object (twin included, if any).
    pub background: Tensor<f32>,
    /// `size×size`, 1 on the object.
    pub mask: Tensor<f32>,
    pub object: ShapeDescriptor,
    pub background_kind: BackgroundKind,
    pub twin: Option<ShapeDescriptor>,
}

impl Scene {
    pub fn coverage(&self) -> f64 {
        self.mask.mean()
    }
}

fn render_background(rng: &mut Rng, kind: BackgroundKind, size: usize, channels: usize) -> Vec<Vec<f64>> {
    let color = |rng: &mut Rng| (0..channels).map(|_| rng.uniform_range(20.0, 235.0)).collect::<Vec<_>>();
    let n = size as f64;
    let mut planes = vec![vec![0.0; size * size]; channels];
    match kind {
        BackgroundKind::Gradient => {
            let (a, b) = (color(rng), color(rng));
            let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            for i in 0..size * size {
                let (x, y) = ((i % size) as f64 / n - 0.5, (i / size) as f64 / n - 0.5);
                let u = ((x * dx + y * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
                for c in 0..channels {
                    planes[c][i] = a[c] + (b[c] - a[c]) * u;
                }
            }
        }
        BackgroundKind::Noise => {
            let g = 4 + rng.below(3);
            let grid: Vec<Vec<f64>> = (0..(g + 1) * (g + 1)).map(|_| color(rng)).collect();
            for i in 0..size * size {
                let fx = (i % size) as f64 / (n - 1.0) * g as f64;
                let fy = (i / size) as f64 / (n - 1.0) * g as f64;
                let (x0, y0) = ((fx.floor() as usize).min(g - 1), (fy.floor() as usize).min(g - 1));
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                let (tx, ty) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
                let at = |x: usize, y: usize| &grid[y * (g + 1) + x];
                for c in 0..channels {
                    let top = at(x0, y0)[c] * (1.0 - tx) + at(x0 + 1, y0)[c] * tx;
                    let bot = at(x0, y0 + 1)[c] * (1.0 - tx) + at(x0 + 1, y0 + 1)[c] * tx;
                    planes[c][i] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        BackgroundKind::Stripes => {
            let (a, b) = (color(rng), color(rng));
            let period = rng.uniform_range(10.0, 24.0);
            let theta = rng.uniform_range(0.0, std::f64::consts::PI);
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            for i in 0..size * size {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                let u = 0.5 + 0.5 * ((x * dx + y * dy) * std::f64::consts::TAU / period + phase).sin();
                for c in 0..channels {
                    planes[c][i] = a[c] + (b[c] - a[c]) * u;
                }
            }
        }
    }
    planes
}

fn random_shape(rng: &mut Rng, kind: ShapeKind, size: usize, area: f64) -> Shape {
    let n = size as f64;
    match kind {
        ShapeKind::Disk => {
            let r = (area / std::f64::consts::PI).sqrt();
            Shape::Disk {
                cx: rng.uniform_range(r, n - r),
                cy: rng.uniform_range(r, n - r),
                r,
            }
        }
        ShapeKind::Rect => {
            let aspect = rng.uniform_range(0.5, 2.0);
            let w = (area * aspect).sqrt().min(n - 1.0);
            let h = (area / w).min(n - 1.0);
            let x0 = rng.uniform_range(0.0, n - w);
            let y0 = rng.uniform_range(0.0, n - h);
            Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        ShapeKind::Triangle => {
            // Equilateral-ish triangle of the requested area, randomly rotated.
            let r = (4.0 * area / (3.0 * 3f64.sqrt())).sqrt();
            let cx = rng.uniform_range(r, n - r);
            let cy = rng.uniform_range(r, n - r);
            let rot = rng.uniform_range(0.0, std::f64::consts::TAU);
            let mut pts = [(0.0, 0.0); 3];
            for (k, p) in pts.iter_mut().enumerate() {
                let a = rot + k as f64 * std::f64::consts::TAU / 3.0 + rng.uniform_range(-0.25, 0.25);
                let rr = r * rng.uniform_range(0.85, 1.0);
                *p = (cx + rr * a.cos(), cy + rr * a.sin());
            }
            Shape::Triangle { pts }
        }
    }
}

fn blocks(raster: &[bool], size: usize, block: usize) -> Vec<bool> {
    let nb = size.div_ceil(block);
    let mut out = vec![false; nb * nb];
    for (i, _) in raster.iter().enumerate().filter(|(_, &v)| v) {
        out[(i / size / block) * nb + (i % size) / block] = true;
    }
    out
}

/// Draws one scene from `rng`. Deterministic given the stream and `spec`.
pub fn gen_scene(rng: &mut Rng, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (size, ch) = (spec.size, spec.channels);
    let px = (size * size) as f64;
    let bg_kind = spec.backgrounds[rng.below(spec.backgrounds.len())];
    let planes = render_background(rng, bg_kind, size, ch);
    let kind = spec.shapes[rng.below(spec.shapes.len())];
    for _ in 0..spec.max_attempts {
        let target = rng.uniform_range(spec.min_coverage, spec.max_coverage) * px;
        let shape = random_shape(rng, kind, size, target);
        if !shape.fits(size) {
            continue;
        }
        let raster = shape.rasterize(size);
        let count = raster.iter().filter(|&&v| v).count() as f64;
        if count / px < spec.min_coverage || count / px > spec.max_coverage {
            continue;
        }
        // Object color: far enough from the background under it.
        let mean: Vec<f64> = (0..ch)
            .map(|c| planes[c].iter().zip(&raster).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / count)
            .collect();
        let mut color = Vec::new();
        for _ in 0..32 {
            let cand: Vec<f64> = (0..ch).map(|_| rng.uniform_range(0.0, 255.0)).collect();
            let d = cand.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d >= 80.0 * (ch as f64).sqrt() / 3f64.sqrt() {
                color = cand.iter().map(|&v| v.round() as u8).collect();
                break;
            }
        }
        if color.is_empty() {
            continue;
        }
        let object = ShapeDescriptor { shape, color };
        let twin = if spec.twin {
            let obj_blocks = blocks(&raster, size, spec.twin_block);
            let mut found = None;
            for _ in 0..spec.max_attempts {
                let moved = random_shape(rng, kind, size, target);
                let (dx, dy) = match (moved, shape) {
                    (Shape::Disk { cx, cy, .. }, Shape::Disk { cx: ox, cy: oy, .. }) => (cx - ox, cy - oy),
                    (Shape::Rect { x0, y0, .. }, Shape::Rect { x0: ox, y0: oy, .. }) => (x0 - ox, y0 - oy),
                    (Shape::Triangle { pts }, Shape::Triangle { pts: o }) => (pts[0].0 - o[0].0, pts[0].1 - o[0].1),
                    _ => unreachable!("same kind"),
                };
                let cand = shape.translated(dx.round(), dy.round());
                if !cand.fits(size) {
                    continue;
                }
                let r = cand.rasterize(size);
                let overlap = blocks(&r, size, spec.twin_block)
                    .iter()
                    .zip(&obj_blocks)
                    .any(|(a, b)| *a && *b);
                if !overlap {
                    found = Some(ShapeDescriptor {
                        shape: cand,
                        color: object.color.clone(),
                    });
                    break;
                }
            }
            match found {
                Some(t) => Some(t),
                None => continue,
            }
        } else {
            None
        };
        return Ok(assemble(rng.seed(), 0, &planes, object, bg_kind, twin, size));
    }
    Err(Error::SceneGeneration(format!(
        "no {} placement within coverage [{}, {}] after {} attempts",
        kind.name(),
        spec.min_coverage,
        spec.max_coverage,
        spec.max_attempts
    )))
}

fn paint(planes: &mut [Vec<u8>], d: &ShapeDescriptor, size: usize) {
    for (i, inside) in d.shape.rasterize(size).into_iter().enumerate() {
        if inside {
            for (c, plane) in planes.iter_mut().enumerate() {
                plane[i] = d.color[c];
            }
        }
    }
}

fn to_tensor(planes: &[Vec<u8>], size: usize) -> Tensor<f32> {
    let data = planes.iter().flat_map(|p| p.iter().map(|&u| io::to_unit(u))).collect();
    Tensor::new(vec![planes.len(), size, size], data).expect("finite pixels")
}

fn assemble(
    seed: u64,
    index: usize,
    planes: &[Vec<f64>],
    object: ShapeDescriptor,
    background_kind: BackgroundKind,
    twin: Option<ShapeDescriptor>,
    size: usize,
) -> Scene {
    let mut bg: Vec<Vec<u8>> = planes
        .iter()
        .map(|p| p.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
        .collect();
    if let Some(t) = &twin {
        paint(&mut bg, t, size);
    }
    let mut comp = bg.clone();
    paint(&mut comp, &object, size);
    let mask = Tensor::new(
        vec![size, size],
        object.shape.rasterize(size).into_iter().map(|v| if v { 1.0 } else { 0.0 }).collect(),
    )
    .expect("binary mask");
    Scene {
        seed,
        index,
        composite: to_tensor(&comp, size),
        background: to_tensor(&bg, size),
        mask,
        object,
        background_kind,
        twin,
    }
}

/// `count` scenes; scene `i` is drawn from `Rng::derive(seed, i)`.
pub fn gen_corpus(seed: u64, count: usize, spec: &SceneSpec, exec: Exec) -> Result<Vec<Scene>> {
    exec.map_range(count, |i| {
        let mut rng = Rng::derive(seed, i as u64);
        gen_scene(&mut rng, spec).map(|mut s| {
            s.seed = seed;
            s.index = i;
            s
        })
    })
    .into_iter()
    .collect()
}

/// Independent check of the scene invariants: composite equals background
/// outside the mask, the mask is exactly the rasterized object, the object
/// pixels carry the object color, and the coverage is within bounds.
pub fn check_scene(scene: &Scene, min_coverage: f64, max_coverage: f64) -> Result<()> {
    let fail = |reason: String| Error::Integrity(format!("scene {}: {reason}", scene.index));
    let (h, w) = scene.mask.dims2()?;
    let plane = h * w;
    let m = scene.mask.data();
    for (i, (a, b)) in scene.composite.data().iter().zip(scene.background.data()).enumerate() {
        if m[i % plane] == 0.0 && a != b {
            return Err(fail(format!("composite differs from background outside the mask at {i}")));
        }
    }
    for (i, &v) in m.iter().enumerate() {
        let inside = scene.object.shape.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        if inside != (v == 1.0) {
            return Err(fail(format!("mask disagrees with the object shape at pixel {i}")));
        }
        if inside {
            for (c, &col) in scene.object.color.iter().enumerate() {
                if scene.composite.data()[c * plane + i] != io::to_unit(col) {
                    return Err(fail(format!("object pixel {i} has the wrong color")));
                }
            }
        }
    }
    let cov = scene.coverage();
    if cov < min_coverage || cov > max_coverage {
        return Err(fail(format!("coverage {cov:.4} outside [{min_coverage}, {max_coverage}]")));
    }
    Ok(())
}

const README: &str = "\
# Synthetic removal corpus

Each scene `NNNNN` has three PNG files in `scenes/`:

- `NNNNN_composite.png`: the image with the object.
- `NNNNN_background.png`: the same image without the object (ground truth).
- `NNNNN_mask.png`: grayscale mask, white (255) on the object, black elsewhere.

`manifest.txt` holds `key=value` lines: the corpus seed, the scene count,
the generation spec (`spec.*`), and per scene its seed, background family,
object (`kind:geometry;color`) and optional twin.

Scene `i` is generated from the stream `(seed, i)`; pixel values are 8-bit
and the composite equals the background exactly outside the mask.
";

fn scene_key(i: usize) -> String {
    format!("{i:05}")
}

/// Writes scenes as PNG triplets plus `manifest.txt` and `README.md`.
pub fn write_corpus(scenes: &[Scene], spec: &SceneSpec, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let sdir = dir.join("scenes");
    io::ensure_dir(&sdir)?;
    let mut m = Manifest::new();
    let seed = scenes.first().map_or(0, |s| s.seed);
    m.set("seed", seed).set("count", scenes.len());
    m.extend("spec.", spec.to_entries());
    for s in scenes {
        let k = scene_key(s.index);
        io::write_image(sdir.join(format!("{k}_composite.png")), &s.composite)?;
        io::write_image(sdir.join(format!("{k}_background.png")), &s.background)?;
        io::write_mask(sdir.join(format!("{k}_mask.png")), &s.mask)?;
        m.set(format!("scene.{k}.seed"), s.seed);
        m.set(format!("scene.{k}.background"), s.background_kind.name());
        m.set(format!("scene.{k}.object"), s.object.encode());
        if let Some(t) = &s.twin {
            m.set(format!("scene.{k}.twin"), t.encode());
        }
    }
    m.save(dir.join("manifest.txt"))?;
    fs::write(dir.join("README.md"), README).map_err(|e| Error::io(dir.join("README.md"), e))
}

/// Reads a corpus written by [`write_corpus`], checking every scene.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<(Vec<Scene>, SceneSpec)> {
    let dir = dir.as_ref();
    let m = Manifest::load(dir.join("manifest.txt"))?;
    let spec = SceneSpec::from_manifest(&m)?;
    let int = |k: &str| -> Result<u64> {
        m.get(k)
            .ok_or_else(|| Error::Integrity(format!("manifest lacks `{k}`")))?
            .parse()
            .map_err(|_| Error::Integrity(format!("`{k}` is not an integer")))
    };
    let seed = int("seed")?;
    let count = int("count")? as usize;
    let mut scenes = Vec::with_capacity(count);
    let mut keys: Vec<usize> = m
        .entries
        .keys()
        .filter_map(|k| k.strip_prefix("scene.")?.strip_suffix(".object")?.parse().ok())
        .collect();
    keys.sort_unstable();
    if keys.len() != count {
        return Err(Error::Integrity(format!("manifest lists {} scenes, count is {count}", keys.len())));
    }
    for i in keys {
        let k = scene_key(i);
        let corpus_err = |reason: String| Error::Corpus { scene: k.clone(), reason };
        let scene_seed = int(&format!("scene.{k}.seed"))?;
        if scene_seed != seed {
            return Err(Error::Integrity(format!(
                "scene {k} has seed {scene_seed}, corpus seed is {seed}"
            )));
        }
        let load = |suffix: &str| {
            let p = dir.join("scenes").join(format!("{k}_{suffix}.png"));
            if !p.exists() {
                return Err(corpus_err(format!("missing {}", p.display())));
            }
            Ok(p)
        };
        let composite = io::read_image(load("composite")?, spec.channels)?;
        let background = io::read_image(load("background")?, spec.channels)?;
        let mask = io::read_mask(load("mask")?)?;
        let want = [spec.channels, spec.size, spec.size];
        if composite.shape() != want || background.shape() != want || mask.shape() != [spec.size, spec.size] {
            return Err(corpus_err("image sizes disagree with the manifest".into()));
        }
        let field = |name: &str| m.get(&format!("scene.{k}.{name}"));
        let object = field("object")
            .and_then(ShapeDescriptor::decode)
            .ok_or_else(|| corpus_err("unreadable object descriptor".into()))?;
        let twin = match field("twin") {
            Some(t) => Some(ShapeDescriptor::decode(t).ok_or_else(|| corpus_err("unreadable twin descriptor".into()))?),
            None => None,
        };
        let background_kind = field("background")
            .and_then(BackgroundKind::parse)
            .ok_or_else(|| corpus_err("unknown background family".into()))?;
        let scene = Scene {
            seed,
            index: i,
            composite,
            background,
            mask,
            object,
            background_kind,
            twin,
        };
        check_scene(&scene, spec.min_coverage, spec.max_coverage)?;
        scenes.push(scene);
    }
    Ok((scenes, spec))
}

/// Human-readable one-line description of a scene.
pub fn describe(scene: &Scene) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "scene {} {} on {} ({:.1}% coverage)",
        scene.index,
        scene.object.shape.kind().name(),
        scene.background_kind.name(),
        100.0 * scene.coverage()
    );
    if scene.twin.is_some() {
        s.push_str(" with twin");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec {
            shapes: vec![ShapeKind::Disk],
            ..SceneSpec::default()
        };
        let a = gen_scene(&mut Rng::new(5), &spec).unwrap();
        let b = gen_scene(&mut Rng::new(5), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.object.shape.kind(), ShapeKind::Disk);
    }

    #[test]
    fn composite_differs_only_inside_mask() {
        for seed in 0..30 {
            let s = gen_scene(&mut Rng::new(seed), &SceneSpec::default()).unwrap();
            check_scene(&s, 0.02, 0.40).unwrap();
            let plane = 64 * 64;
            let diff_inside = (0..3 * plane)
                .filter(|&i| s.composite.data()[i] != s.background.data()[i])
                .all(|i| s.mask.data()[i % plane] == 1.0);
            assert!(diff_inside);
        }
    }

    #[test]
    fn coverage_audit_over_many_scenes() {
        let scenes = gen_corpus(77, 1000, &SceneSpec::default(), Exec::Parallel).unwrap();
        let mut hist = [0usize; 4];
        for s in &scenes {
            let c = s.coverage();
            assert!((0.02..=0.40).contains(&c), "coverage {c}");
            hist[((c - 0.02) / 0.095).min(3.0) as usize] += 1;
        }
        // every quarter of the allowed range is populated
        assert!(hist.iter().all(|&n| n > 20), "{hist:?}");
    }

    #[test]
    fn twins_are_separate_copies_in_the_background() {
        let scenes = gen_corpus(3, 40, &SceneSpec::twins(), Exec::Sequential).unwrap();
        for s in scenes {
            let t = s.twin.as_ref().unwrap();
            assert_eq!(t.color, s.object.color);
            let a = blocks(&s.object.shape.rasterize(64), 64, 8);
            let b = blocks(&t.shape.rasterize(64), 64, 8);
            assert!(!a.iter().zip(&b).any(|(x, y)| *x && *y));
            // the twin is part of the ground-truth background
            let i = t.shape.rasterize(64).iter().position(|&v| v).unwrap();
            assert_eq!(s.background.data()[i], io::to_unit(t.color[0]));
        }
    }

    #[test]
    fn impossible_coverage_is_reported() {
        let spec = SceneSpec {
            size: 8,
            shapes: vec![ShapeKind::Disk],
            min_coverage: 0.9,
            max_coverage: 0.95,
            max_attempts: 20,
            ..SceneSpec::default()
        };
        assert!(matches!(gen_scene(&mut Rng::new(1), &spec), Err(Error::SceneGeneration(_))));
    }

    #[test]
    fn triangle_containment() {
        let t = Shape::Triangle {
            pts: [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)],
        };
        assert!(t.contains(1.0, 1.0));
        assert!(!t.contains(3.0, 3.0));
        let flipped = Shape::Triangle {
            pts: [(0.0, 0.0), (0.0, 4.0), (4.0, 0.0)],
        };
        assert!(flipped.contains(1.0, 1.0));
    }

    #[test]
    fn descriptors_round_trip_through_text() {
        for s in gen_corpus(9, 12, &SceneSpec::twins(), Exec::Sequential).unwrap() {
            assert_eq!(ShapeDescriptor::decode(&s.object.encode()).unwrap(), s.object);
        }
    }

    #[test]
    fn corpus_round_trip_and_errors() {
        let spec = SceneSpec::twins();
        let scenes = gen_corpus(11, 4, &spec, Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&scenes, &spec, dir.path()).unwrap();
        assert!(dir.path().join("README.md").exists());
        let (back, spec_back) = read_corpus(dir.path()).unwrap();
        assert_eq!(back, scenes);
        assert_eq!(spec_back, spec);

        let manifest = dir.path().join("manifest.txt");
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace("scene.00002.seed=11", "scene.00002.seed=12")).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Integrity(_))));
        fs::write(&manifest, &text).unwrap();

        fs::remove_file(dir.path().join("scenes/00001_mask.png")).unwrap();
        match read_corpus(dir.path()) {
            Err(Error::Corpus { scene, .. }) => assert_eq!(scene, "00001"),
            other => panic!("expected corpus error, got {other:?}"),
        }
    }
}
