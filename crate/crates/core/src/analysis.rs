//! Attention diagnostics: time-averaged maps with PCA and k-means token
//! clusters, per-step top-1 singular-vector heatmaps, and PNG export with a
//! fixed viridis-like colormap.
//!
//! Heatmaps are written to `{run}/{layer}/{timestep}_{mode}.png`. A value
//! `v ∈ [0, 1]` is drawn with color `LUT[round(255·v)]`, where the 256-entry
//! LUT linearly interpolates the nine anchors in [`VIRIDIS_ANCHORS`] and
//! rounds each channel to the nearest integer. An entry that rounds to the
//! same color as its predecessor has its fastest-changing channel moved one
//! level along the segment, so every entry is distinct and reads back
//! unambiguously.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::ensure_dir;
use crate::numerics::{kmeans, pca_top, svd_top1, Real, Rng, Tensor};

/// Default number of token clusters for cluster panels.
pub const DEFAULT_CLUSTERS: usize = 5;

/// Colormap anchors at `0, 1/8, …, 1`.
pub const VIRIDIS_ANCHORS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 45, 123],
    [59, 82, 139],
    [44, 114, 142],
    [33, 145, 140],
    [40, 174, 128],
    [94, 201, 98],
    [173, 220, 48],
    [253, 231, 37],
];

/// Categorical colors for cluster panels (cycled when k exceeds the list).
pub const CLUSTER_COLORS: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// The 256-entry heatmap colormap.
pub fn colormap() -> &'static [[u8; 3]; 256] {
    static LUT: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [[0u8; 3]; 256];
        for i in 0..256 {
            let pos = i as f64 * 8.0 / 255.0;
            let seg = (pos.floor() as usize).min(7);
            let t = pos - seg as f64;
            let (a, b) = (VIRIDIS_ANCHORS[seg], VIRIDIS_ANCHORS[seg + 1]);
            let mut entry = [0u8; 3];
            for c in 0..3 {
                entry[c] = (f64::from(a[c]) + t * (f64::from(b[c]) - f64::from(a[c]))).round() as u8;
            }
            if i > 0 && entry == lut[i - 1] {
                let delta = |c: usize| i16::from(b[c]) - i16::from(a[c]);
                let c = (0..3).max_by_key(|&c| delta(c).abs()).expect("three channels");
                entry[c] = entry[c].saturating_add_signed(delta(c).signum() as i8);
            }
            lut[i] = entry;
        }
        lut
    })
}

/// LUT index for a value (clamped to `[0, 1]`).
pub fn lut_index(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Mean attention map of one layer over all of its records.
///
/// The records for `layer` must share one mode and one shape.
pub fn average_attention<R: Real>(records: &[AttentionRecord<R>], layer: &str) -> Result<Tensor<f64>> {
    let picked: Vec<_> = records.iter().filter(|r| r.layer == layer).collect();
    let first = picked
        .first()
        .ok_or_else(|| Error::config(format!("no attention records for layer `{layer}`")))?;
    if let Some(r) = picked
        .iter()
        .find(|r| r.mode != first.mode || r.attention.shape() != first.attention.shape())
    {
        return Err(Error::config(format!(
            "layer `{layer}` mixes records ({} {:?} vs {} {:?})",
            first.mode.tag(),
            first.attention.shape(),
            r.mode.tag(),
            r.attention.shape()
        )));
    }
    let mut acc = vec![0.0f64; first.attention.len()];
    for r in &picked {
        for (a, v) in acc.iter_mut().zip(r.attention.data()) {
            *a += v.as_f64();
        }
    }
    let n = picked.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(first.attention.shape().to_vec(), acc)
}

/// Token clusters of an averaged attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenClusters {
    /// One label per token, row-major over the `side×side` feature map.
    pub labels: Vec<usize>,
    pub side: usize,
    pub k: usize,
    pub inertia: f64,
}

impl TokenClusters {
    /// Labels as a `side×side` grid.
    pub fn grid(&self) -> Tensor<f64> {
        Tensor::from_fn(vec![self.side, self.side], |i| self.labels[i] as f64).expect("finite labels")
    }
}

/// Projects each token's attention row onto the top 3 principal
/// directions and clusters the projections with k-means.
pub fn token_clusters(avg: &Tensor<f64>, k: usize, rng: &mut Rng) -> Result<TokenClusters> {
    if k < 2 {
        return Err(Error::config(format!("cluster count must be ≥ 2, got {k}")));
    }
    let (n, m) = avg.dims2()?;
    let side = (n as f64).sqrt().round() as usize;
    if n != m || side * side != n {
        return Err(Error::dim(format!("attention map {n}×{m} is not over a square token grid")));
    }
    let pca = pca_top(avg, 3.min(n))?;
    let km = kmeans(&pca.projections, k, rng)?;
    Ok(TokenClusters {
        labels: km.labels,
        side,
        k,
        inertia: km.inertia,
    })
}

/// Min-max normalized `side×side` heatmap of a token vector, with its sign
/// fixed so the entries sum to a non-negative value (largest-magnitude
/// entry positive when the sum vanishes). Near-constant vectors map to 0.
pub fn heatmap_from_vector(v: &[f64], side: usize) -> Result<Tensor<f64>> {
    if v.len() != side * side {
        return Err(Error::dim(format!("{} values for a {side}×{side} heatmap", v.len())));
    }
    let sum: f64 = v.iter().sum();
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let flip = if sum.abs() > 1e-9 * scale * v.len() as f64 {
        sum < 0.0
    } else {
        let peak = v.iter().fold(0.0f64, |m, &x| if x.abs() > m.abs() { x } else { m });
        peak < 0.0
    };
    let w: Vec<f64> = v.iter().map(|&x| if flip { -x } else { x }).collect();
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi - lo <= 1e-9 * scale.max(f64::MIN_POSITIVE) {
        vec![0.0; w.len()]
    } else {
        w.iter().map(|x| (x - lo) / (hi - lo)).collect()
    };
    Tensor::new(vec![side, side], data)
}

/// Heatmap of the dominant right-singular vector of a record's attention
/// map: which tokens the layer's attention is mostly directed at.
pub fn top1_heatmap<R: Real>(record: &AttentionRecord<R>) -> Result<Tensor<f64>> {
    let r1 = svd_top1(&record.attention)?;
    heatmap_from_vector(&r1.v, record.side())
}

/// Writes a `[0, 1]` grid as an RGB PNG, each cell a `scale×scale` block.
pub fn export_heatmap_scaled(grid: &Tensor<f64>, scale: usize, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = grid.dims2()?;
    if scale == 0 {
        return Err(Error::config("heatmap scale must be positive"));
    }
    let lut = colormap();
    let d = grid.data();
    let img: RgbImage = ImageBuffer::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        Rgb(lut[lut_index(d[(y as usize / scale) * w + x as usize / scale])])
    });
    save_png(&img, path.as_ref())
}

/// [`export_heatmap_scaled`] at one pixel per cell.
pub fn export_heatmap(grid: &Tensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    export_heatmap_scaled(grid, 1, path)
}

/// Reads a heatmap PNG back into LUT indices; a pixel whose color is not a
/// LUT entry is an error.
pub fn read_heatmap_indices(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let lut = colormap();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Vec::with_capacity(w * h);
    for p in img.pixels() {
        let idx = lut.iter().position(|c| *c == p.0).ok_or_else(|| Error::Image {
            path: path.to_path_buf(),
            reason: format!("color {:?} is not in the colormap", p.0),
        })?;
        out.push(idx as f64);
    }
    Tensor::new(vec![h, w], out)
}

/// Writes cluster labels as a categorical PNG, `scale` pixels per token.
pub fn export_clusters(clusters: &TokenClusters, scale: usize, path: impl AsRef<Path>) -> Result<()> {
    if scale == 0 {
        return Err(Error::config("panel scale must be positive"));
    }
    let s = clusters.side;
    let img: RgbImage = ImageBuffer::from_fn((s * scale) as u32, (s * scale) as u32, |x, y| {
        let label = clusters.labels[(y as usize / scale) * s + x as usize / scale];
        Rgb(CLUSTER_COLORS[label % CLUSTER_COLORS.len()])
    });
    save_png(&img, path.as_ref())
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// `{run}/{layer}/{timestep}_{mode}.png`.
pub fn heatmap_path<R: Real>(run: &Path, record: &AttentionRecord<R>) -> PathBuf {
    run.join(&record.layer)
        .join(format!("{:04}_{}.png", record.timestep, record.mode.tag()))
}

/// Exports the top-1 heatmap of every record under `run` and returns the
/// written paths in record order.
pub fn export_run_heatmaps<R: Real>(
    records: &[AttentionRecord<R>],
    run: &Path,
    scale: usize,
    exec: Exec,
) -> Result<Vec<PathBuf>> {
    for r in records {
        ensure_dir(&run.join(&r.layer))?;
    }
    exec.map(records, |_, r| {
        let path = heatmap_path(run, r);
        export_heatmap_scaled(&top1_heatmap(r)?, scale, &path)?;
        Ok(path)
    })
    .into_iter()
    .collect()
}

/// Writes a cluster panel per layer (`{run}/{layer}/clusters_{mode}.png`)
/// from the time-averaged maps of `records`.
pub fn export_cluster_panels<R: Real>(
    records: &[AttentionRecord<R>],
    run: &Path,
    k: usize,
    scale: usize,
    rng: &mut Rng,
) -> Result<Vec<(PathBuf, TokenClusters)>> {
    let mut layers: Vec<(&str, &str)> = Vec::new();
    for r in records {
        if !layers.contains(&(r.layer.as_str(), r.mode.tag())) {
            layers.push((r.layer.as_str(), r.mode.tag()));
        }
    }
    let mut out = Vec::new();
    for (layer, mode) in layers {
        let subset: Vec<AttentionRecord<R>> = records
            .iter()
            .filter(|r| r.layer == layer && r.mode.tag() == mode)
            .cloned()
            .collect();
        let avg = average_attention(&subset, layer)?;
        let clusters = token_clusters(&avg, k, rng)?;
        let dir = ensure_dir(&run.join(layer))?;
        let path = dir.join(format!("clusters_{mode}.png"));
        export_clusters(&clusters, scale, &path)?;
        out.push((path, clusters));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;

    fn record(layer: &str, t: usize, a: Tensor<f64>) -> AttentionRecord<f64> {
        AttentionRecord {
            layer: layer.into(),
            timestep: t,
            mode: AttentionMode::Standard,
            similarity: a.clone(),
            attention: a.clone(),
            output: a,
        }
    }

    fn stochastic(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let mut d: Vec<f64> = (0..n * n).map(|_| rng.uniform() + 0.01).collect();
        for row in d.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(vec![n, n], d).unwrap()
    }

    #[test]
    fn lut_endpoints_are_anchors() {
        let lut = colormap();
        assert_eq!(lut[0], VIRIDIS_ANCHORS[0]);
        assert_eq!(lut[255], VIRIDIS_ANCHORS[8]);
    }

    #[test]
    fn lut_is_injective_and_close_to_interpolation() {
        let lut = colormap();
        let distinct: std::collections::HashSet<_> = lut.iter().collect();
        assert_eq!(distinct.len(), 256);
        for (i, entry) in lut.iter().enumerate() {
            let pos = i as f64 * 8.0 / 255.0;
            let seg = (pos.floor() as usize).min(7);
            let t = pos - seg as f64;
            let (a, b) = (VIRIDIS_ANCHORS[seg], VIRIDIS_ANCHORS[seg + 1]);
            for c in 0..3 {
                let exact = f64::from(a[c]) + t * (f64::from(b[c]) - f64::from(a[c]));
                assert!((f64::from(entry[c]) - exact).abs() <= 1.5, "entry {i}");
            }
        }
    }

    #[test]
    fn averaging() {
        let (a, b) = (stochastic(4, 1), stochastic(4, 2));
        let avg = average_attention(&[record("x", 1, a.clone()), record("x", 2, b.clone())], "x").unwrap();
        assert!(avg.max_abs_diff(&a.add(&b).unwrap().scale(0.5).unwrap()).unwrap() < 1e-15);
        for i in 0..4 {
            assert!((avg.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let single = average_attention(&[record("x", 1, a.clone())], "x").unwrap();
        assert_eq!(single, a);
        assert!(average_attention(&[record("x", 1, a.clone())], "y").is_err());
        let mixed = [record("x", 1, a), record("x", 2, stochastic(9, 3))];
        assert!(average_attention(&mixed, "x").is_err());
    }

    #[test]
    fn uniform_attention_gives_a_constant_heatmap() {
        let n = 16;
        let r = record("x", 0, Tensor::full(vec![n, n], 1.0 / n as f64));
        let h = top1_heatmap(&r).unwrap();
        assert!(h.data().iter().all(|&v| v == h.data()[0]));
    }

    #[test]
    fn rank_one_heatmap_is_the_normalized_vector() {
        let v = [0.1, 0.4, 0.2, 0.3];
        let a = Tensor::from_fn(vec![4, 4], |i| v[i % 4]).unwrap();
        let h = top1_heatmap(&record("x", 0, a)).unwrap();
        let want = [0.0, 1.0, 1.0 / 3.0, 2.0 / 3.0];
        for (g, w) in h.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn heatmap_sign_invariance() {
        let v: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(heatmap_from_vector(&v, 3).unwrap(), heatmap_from_vector(&neg, 3).unwrap());
    }

    #[test]
    fn block_attention_clusters_into_groups() {
        // two groups of tokens attending only within their group
        let group = |i: usize| usize::from(i % 3 >= 2 || i >= 6);
        let n = 9;
        let size = |g| (0..n).filter(|&j| group(j) == g).count() as f64;
        let a = Tensor::from_fn(vec![n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            if group(i) == group(j) {
                1.0 / size(group(i))
            } else {
                0.0
            }
        })
        .unwrap();
        let c = token_clusters(&a, 2, &mut Rng::new(4)).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(c.labels[i] == c.labels[j], group(i) == group(j));
            }
        }
        assert!(token_clusters(&a, 1, &mut Rng::new(4)).is_err());
    }

    #[test]
    fn export_uses_exact_lut_colors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let g = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        export_heatmap(&g, &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        let lut = colormap();
        assert_eq!(img.get_pixel(0, 0).0, lut[0]);
        assert_eq!(img.get_pixel(1, 0).0, lut[255]);
        assert_eq!(img.get_pixel(0, 1).0, lut[128]);
        assert_eq!(img.get_pixel(1, 1).0, lut[64]);
        let bytes = std::fs::read(&p).unwrap();
        export_heatmap(&g, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn run_layout() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record("dec.4", 981, stochastic(16, 5)), record("dec.4", 21, stochastic(16, 6))];
        let paths = export_run_heatmaps(&recs, dir.path(), 4, Exec::Sequential).unwrap();
        assert_eq!(paths[0], dir.path().join("dec.4/0981_standard.png"));
        assert!(paths.iter().all(|p| p.exists()));
        let idx = read_heatmap_indices(&paths[1]).unwrap();
        assert_eq!(idx.shape(), &[16, 16]);
        let panels = export_cluster_panels(&recs, dir.path(), 3, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(panels.len(), 1);
        assert!(panels[0].0.exists());
    }
}
