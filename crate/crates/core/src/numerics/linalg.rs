//! Principal components, rank-1 SVD and k-means for attention-map analysis.

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with eigenvectors as the
/// matching columns of a row-major `n×n` matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    (values, vectors)
}

/// Flips `v` so its largest-magnitude entry is positive. Ties resolve to
/// the lowest index.
pub fn fix_sign(v: &mut [f64]) -> bool {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
        true
    } else {
        false
    }
}

/// Principal component projections.
#[derive(Debug, Clone)]
pub struct Pca {
    /// `n×k` projections of the centered rows.
    pub projections: Tensor<f64>,
    /// `k×f` principal directions (unit rows, sign-fixed).
    pub components: Tensor<f64>,
    /// Variance along each direction.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    pub mean: Vec<f64>,
}

/// Projects the mean-centered rows of `x` onto its top-`k` principal
/// directions. Each direction's largest-magnitude loading is positive.
pub fn pca_top<R: Real>(x: &Tensor<R>, k: usize) -> Result<Pca> {
    let (n, f) = x.dims2()?;
    if k == 0 || k > f {
        return Err(Error::dim(format!("pca: k = {k} with {f} features")));
    }
    if n < k {
        return Err(Error::dim(format!("pca: k = {k} exceeds {n} rows")));
    }
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = (0..n)
        .flat_map(|i| {
            x.row(i)
                .iter()
                .zip(&mean)
                .map(|(v, m)| v.as_f64() - m)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut cov = vec![0.0; f * f];
    for row in centered.chunks(f) {
        for a in 0..f {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in a..f {
                cov[a * f + b] += ra * row[b];
            }
        }
    }
    let denom = n.max(2) as f64 - 1.0;
    for a in 0..f {
        for b in a..f {
            cov[a * f + b] /= denom;
            cov[b * f + a] = cov[a * f + b];
        }
    }
    let total_variance = (0..f).map(|a| cov[a * f + a]).sum();
    let (values, vectors) = symmetric_eigen(&cov, f);
    let mut components = Vec::with_capacity(k * f);
    for c in 0..k {
        let mut dir: Vec<f64> = (0..f).map(|r| vectors[r * f + c]).collect();
        fix_sign(&mut dir);
        components.extend(dir);
    }
    let mut projections = vec![0.0; n * k];
    for (i, row) in centered.chunks(f).enumerate() {
        for c in 0..k {
            let dir = &components[c * f..(c + 1) * f];
            projections[i * k + c] = row.iter().zip(dir).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Pca {
        projections: Tensor::new(vec![n, k], projections)?,
        components: Tensor::new(vec![k, f], components)?,
        explained_variance: values[..k].iter().map(|v| v.max(0.0)).collect(),
        total_variance,
        mean,
    })
}

/// Dominant singular triple of a matrix.
#[derive(Debug, Clone)]
pub struct Rank1 {
    pub u: Vec<f64>,
    pub sigma: f64,
    pub v: Vec<f64>,
}

impl Rank1 {
    pub fn reconstruct(&self) -> Tensor<f64> {
        let (r, c) = (self.u.len(), self.v.len());
        let data = (0..r * c)
            .map(|idx| self.sigma * self.u[idx / c] * self.v[idx % c])
            .collect();
        Tensor::from_parts(vec![r, c], data)
    }
}

/// Best rank-1 approximation `σ·u·vᵀ` of `m` in Frobenius norm, from the
/// top eigenpair of `mᵀm`. `v` carries the sign convention of [`fix_sign`].
pub fn svd_top1<R: Real>(m: &Tensor<R>) -> Result<Rank1> {
    let (r, c) = m.dims2()?;
    if r == 0 || c == 0 {
        return Err(Error::dim("svd of an empty matrix"));
    }
    let a: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    let mut gram = vec![0.0; c * c];
    for row in a.chunks(c) {
        for p in 0..c {
            let rp = row[p];
            if rp == 0.0 {
                continue;
            }
            for q in p..c {
                gram[p * c + q] += rp * row[q];
            }
        }
    }
    for p in 0..c {
        for q in p + 1..c {
            gram[q * c + p] = gram[p * c + q];
        }
    }
    let mut v = top_eigvec_power(&gram, c).unwrap_or_else(|| {
        let (values, vectors) = symmetric_eigen(&gram, c);
        debug_assert!(values[0] >= -1e-9 * values[0].abs().max(1.0));
        (0..c).map(|k| vectors[k * c]).collect()
    });
    fix_sign(&mut v);
    let mut u: Vec<f64> = a
        .chunks(c)
        .map(|row| row.iter().zip(&v).map(|(x, y)| x * y).sum())
        .collect();
    let sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if sigma > 0.0 {
        u.iter_mut().for_each(|x| *x /= sigma);
    } else {
        u = vec![0.0; r];
        u[0] = 1.0;
    }
    Ok(Rank1 { u, sigma, v })
}

/// Dominant eigenvector of a positive semi-definite matrix by power
/// iteration from a ramp start. `None` when the residual
/// `|Gv - (v'Gv)v|` has not dropped below `1e-12 * v'Gv` within the
/// iteration budget (small spectral gap or a zero matrix).
fn top_eigvec_power(g: &[f64], n: usize) -> Option<Vec<f64>> {
    const MAX_ITERS: usize = 1000;
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut w = vec![0.0; n];
    for _ in 0..MAX_ITERS {
        for (wi, row) in w.iter_mut().zip(g.chunks(n)) {
            *wi = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let lambda: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        if lambda.is_nan() || lambda <= 0.0 {
            return None;
        }
        let resid = w.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().zip(&w).for_each(|(x, y)| *x = y / norm);
        if resid <= 1e-12 * lambda {
            return Some(v);
        }
    }
    None
}

/// Result of Lloyd's k-means.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding drawn from `rng`. Stops after
/// [`KMEANS_MAX_ITER`] iterations or once no center moves more than
/// [`KMEANS_TOL`].
pub fn kmeans<R: Real>(x: &Tensor<R>, k: usize, rng: &mut Rng) -> Result<KMeans> {
    let (n, f) = x.dims2()?;
    if k == 0 || k > n {
        return Err(Error::dim(format!("kmeans: k = {k} with {n} points")));
    }
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v.as_f64()).collect())
        .collect();

    let mut centers = vec![points[rng.below(n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }

    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    for it in 0..KMEANS_MAX_ITER {
        iterations = it + 1;
        for (label, p) in labels.iter_mut().zip(&points) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            *label = best;
        }
        let mut sums = vec![vec![0.0; f]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster keeps its previous center.
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if shift <= KMEANS_TOL {
            break;
        }
    }
    for (label, p) in labels.iter_mut().zip(&points) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(p, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *label = best;
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    Ok(KMeans {
        labels,
        centers,
        inertia,
        iterations,
    })
}
