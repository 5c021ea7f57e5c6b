//! PCA, rank-1 SVD, k-means and heatmaps checked against nalgebra and
//! hand-written power iteration.

use approx::assert_abs_diff_eq;
use attn_removal::analysis::{heatmap_from_vector, top1_heatmap, token_clusters};
use attn_removal::attention::{AttentionMode, AttentionRecord};
use attn_removal::numerics::{kmeans, pca_top, svd_top1, Rng, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    Rng::new(seed).normal_tensor(&[rows, cols])
}

fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    let (r, c) = t.dims2().unwrap();
    DMatrix::from_row_slice(r, c, t.data())
}

/// Aligns the sign of `b` to `a` and returns the max abs difference.
fn sign_aligned_diff(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = if dot < 0.0 { -1.0 } else { 1.0 };
    a.iter().zip(b).map(|(x, y)| (x - s * y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_top1_matches_nalgebra(rows in 2usize..12, cols in 2usize..12, seed in 0u64..10_000) {
        let m = random(rows, cols, seed);
        let ours = svd_top1(&m).unwrap();
        let svd = to_na(&m).svd(true, true);
        let (imax, &sigma) = svd
            .singular_values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        // a near-degenerate top pair has no well-defined direction
        let second = svd.singular_values.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, v)| *v).fold(0.0, f64::max);
        prop_assume!(sigma - second > 1e-3 * sigma);
        prop_assert!((ours.sigma - sigma).abs() < 1e-9 * sigma.max(1.0));
        let v_t = svd.v_t.unwrap();
        let v: Vec<f64> = v_t.row(imax).iter().copied().collect();
        prop_assert!(sign_aligned_diff(&ours.v, &v) < 1e-6);
        let recon = ours.reconstruct();
        let rank1 = svd.u.unwrap().column(imax) * sigma * v_t.row(imax);
        for (a, b) in recon.data().iter().zip(rank1.transpose().iter()) {
            prop_assert!((a - b).abs() < 1e-8 * sigma.max(1.0));
        }
    }

    #[test]
    fn pca_matches_covariance_eigenvectors(n in 4usize..20, f in 3usize..8, seed in 0u64..10_000) {
        let x = random(n, f, seed);
        let pca = pca_top(&x, 3).unwrap();
        let m = to_na(&x);
        let mean = m.row_mean();
        let centered = DMatrix::from_fn(n, f, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = cov.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..f).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        prop_assume!(eig.eigenvalues[order[2]] - eig.eigenvalues[order[3.min(f - 1)]] > 1e-3 || f == 3);
        prop_assume!(eig.eigenvalues[order[0]] - eig.eigenvalues[order[1]] > 1e-3);
        prop_assume!(eig.eigenvalues[order[1]] - eig.eigenvalues[order[2]] > 1e-3);
        for (c, &col) in order.iter().take(3).enumerate() {
            let want: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
            prop_assert!(sign_aligned_diff(pca.components.row(c), &want) < 1e-6);
            prop_assert!((pca.explained_variance[c] - eig.eigenvalues[col]).abs() < 1e-9);
        }
        prop_assert!((pca.total_variance - cov.trace()).abs() < 1e-9);
        // projections are the centered rows times the components
        for i in 0..n {
            for c in 0..3 {
                let p: f64 = centered.row(i).iter().zip(pca.components.row(c)).map(|(a, b)| a * b).sum();
                prop_assert!((pca.projections.row(i)[c] - p).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn heatmap_ignores_sign(v in prop::collection::vec(-1.0f64..1.0, 16)) {
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        prop_assert_eq!(heatmap_from_vector(&v, 4).unwrap(), heatmap_from_vector(&neg, 4).unwrap());
    }
}

fn power_iteration(a: &Tensor<f64>) -> Vec<f64> {
    let (_, c) = a.dims2().unwrap();
    let gram = a.transpose2().unwrap().matmul(a).unwrap();
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    for _ in 0..5000 {
        let mut w: Vec<f64> = (0..c).map(|i| gram.row(i).iter().zip(&v).map(|(g, x)| g * x).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= norm);
        v = w;
    }
    v
}

#[test]
fn top1_heatmap_matches_power_iteration() {
    for seed in 0..10 {
        let n = 16;
        let mut rng = Rng::new(seed);
        let mut d: Vec<f64> = (0..n * n).map(|_| rng.uniform().powi(3)).collect();
        for row in d.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let a = Tensor::new(vec![n, n], d).unwrap();
        let rec = AttentionRecord {
            layer: "dec.4".into(),
            timestep: 1,
            mode: AttentionMode::Standard,
            similarity: a.clone(),
            attention: a.clone(),
            output: a.clone(),
        };
        let want = heatmap_from_vector(&power_iteration(&a), 4).unwrap();
        let got = top1_heatmap(&rec).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-6);
        }
    }
}

#[test]
fn kmeans_recovers_separated_blobs() {
    let mut rng = Rng::new(11);
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for i in 0..90 {
        let c = i % 3;
        data.push(centers[c][0] + 0.3 * rng.normal());
        data.push(centers[c][1] + 0.3 * rng.normal());
        truth.push(c);
    }
    let x = Tensor::new(vec![90, 2], data).unwrap();
    let km = kmeans(&x, 3, &mut Rng::new(4)).unwrap();
    for i in 0..90 {
        for j in 0..90 {
            assert_eq!(km.labels[i] == km.labels[j], truth[i] == truth[j]);
        }
    }
}

/// Every two-group split of a 3×3 token grid with within-group attention
/// is recovered by the cluster step.
#[test]
fn block_attention_clusters_exhaustively() {
    let n = 9;
    for split in 1u32..(1 << (n - 1)) {
        let group = |i: usize| (split >> i) & 1;
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
        let c = token_clusters(&a, 2, &mut Rng::new(u64::from(split))).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(c.labels[i] == c.labels[j], group(i) == group(j), "split {split:09b}");
            }
        }
    }
}
