//! Attention kernels against a direct loop implementation.

use attn_removal::attention::{aas_attention, ss_attention, standard_attention, AttentionParams};
use attn_removal::numerics::{Rng, Tensor};
use proptest::prelude::*;

struct Case {
    z: Tensor<f64>,
    params: AttentionParams<f64>,
    cols: Vec<bool>,
}

fn case(n: usize, c: usize, heads: usize, dh: usize, seed: u64, mask_bits: u64) -> Case {
    let mut rng = Rng::new(seed);
    let d = heads * dh;
    let mut params = AttentionParams::new(
        rng.normal_tensor(&[c, d]),
        rng.normal_tensor(&[c, d]),
        rng.normal_tensor(&[c, d]),
        rng.normal_tensor(&[d, c]),
        heads,
    )
    .unwrap();
    for b in [&mut params.b_q, &mut params.b_k, &mut params.b_v] {
        b.iter_mut().for_each(|x| *x = rng.normal());
    }
    params.b_o.iter_mut().for_each(|x| *x = rng.normal());
    let mut cols: Vec<bool> = (0..n).map(|i| (mask_bits >> i) & 1 == 1).collect();
    if cols.iter().all(|&c| c) {
        cols[0] = false;
    }
    Case { z: rng.normal_tensor(&[n, c]), params, cols }
}

fn flat(cols: &[bool]) -> Tensor<f32> {
    Tensor::new(vec![1, cols.len()], cols.iter().map(|&b| f32::from(u8::from(b))).collect()).unwrap()
}

fn proj(x: &[Vec<f64>], w: &Tensor<f64>, b: &[f64]) -> Vec<Vec<f64>> {
    let (din, dout) = w.dims2().unwrap();
    x.iter()
        .map(|row| (0..dout).map(|o| b[o] + (0..din).map(|i| row[i] * w.at2(i, o)).sum::<f64>()).collect())
        .collect()
}

/// Per-row treatment for the oracle: logit scale and the killed columns.
fn oracle(c: &Case, scale: impl Fn(usize) -> f64, killed: impl Fn(usize) -> bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (n, _) = c.z.dims2().unwrap();
    let z: Vec<Vec<f64>> = (0..n).map(|i| c.z.row(i).to_vec()).collect();
    let p = &c.params;
    let (q, k, v) = (proj(&z, &p.w_q, &p.b_q), proj(&z, &p.w_k, &p.b_k), proj(&z, &p.w_v, &p.b_v));
    let d = p.width();
    let dh = d / p.heads;
    let mut av = vec![vec![0.0; d]; n];
    let mut mean_attn = vec![vec![0.0; n]; n];
    for h in 0..p.heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| scale(i) * r.clone().map(|e| q[i][e] * k[j][e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = (0..n).filter(|&j| !killed(j)).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = (0..n).map(|j| if killed(j) { 0.0 } else { (logits[j] - m).exp() }).collect();
            let s: f64 = w.iter().sum();
            for j in 0..n {
                let a = w[j] / s;
                mean_attn[i][j] += a / p.heads as f64;
                for e in r.clone() {
                    av[i][e] += a * v[j][e];
                }
            }
        }
    }
    (proj(&av, &p.w_o, &p.b_o), mean_attn)
}

fn close(t: &Tensor<f64>, want: &[Vec<f64>], tol: f64) -> Result<(), TestCaseError> {
    for (i, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            let g = t.at2(i, j);
            prop_assert!((g - w).abs() <= tol * (1.0 + w.abs()), "({i},{j}): {g} vs {w}");
        }
    }
    Ok(())
}

fn shapes() -> impl Strategy<Value = (usize, usize, usize, usize, u64, u64)> {
    (2usize..17, 1usize..6, 1usize..4, 1usize..5, any::<u64>(), any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn standard_matches_loops((n, c, h, dh, seed, bits) in shapes()) {
        let c = case(n, c, h, dh, seed, bits);
        let (out, rec) = standard_attention(&c.params, &c.z).unwrap();
        let (want, attn) = oracle(&c, |_| 1.0, |_| false);
        close(&out, &want, 1e-9)?;
        close(&rec.attention, &attn, 1e-9)?;
    }

    #[test]
    fn aas_matches_loops((n, c, h, dh, seed, bits) in shapes()) {
        let c = case(n, c, h, dh, seed, bits);
        let (out, rec) = aas_attention(&c.params, &c.z, &flat(&c.cols)).unwrap();
        let (want, attn) = oracle(&c, |_| 1.0, |j| c.cols[j]);
        close(&out, &want, 1e-9)?;
        close(&rec.attention, &attn, 1e-9)?;
        for i in 0..n {
            for j in 0..n {
                if c.cols[j] {
                    prop_assert_eq!(rec.attention.at2(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn ss_matches_loops((n, c, h, dh, seed, bits) in shapes(), lambda in 0.0f64..=1.0) {
        let c = case(n, c, h, dh, seed, bits);
        let (out, obj, bg) = ss_attention(&c.params, &c.z, &flat(&c.cols), lambda).unwrap();
        let cols = c.cols.clone();
        let (want, _) = oracle(&c, |i| if cols[i] { lambda } else { 1.0 }, |j| cols[j]);
        close(&out, &want, 1e-9)?;
        let (_, obj_attn) = oracle(&c, |_| lambda, |j| cols[j]);
        close(&obj.attention, &obj_attn, 1e-9)?;
        let (_, bg_attn) = oracle(&c, |_| 1.0, |j| cols[j]);
        close(&bg.attention, &bg_attn, 1e-9)?;
    }

    #[test]
    fn ss_at_lambda_one_is_aas((n, c, h, dh, seed, bits) in shapes()) {
        let c = case(n, c, h, dh, seed, bits);
        let (ss, _, _) = ss_attention(&c.params, &c.z, &flat(&c.cols), 1.0).unwrap();
        let (aas, _) = aas_attention(&c.params, &c.z, &flat(&c.cols)).unwrap();
        for (a, b) in ss.data().iter().zip(aas.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ss_at_lambda_zero_is_uniform_over_background((n, c, h, dh, seed, bits) in shapes()) {
        let c = case(n, c, h, dh, seed, bits);
        let (_, obj, _) = ss_attention(&c.params, &c.z, &flat(&c.cols), 0.0).unwrap();
        let keep = c.cols.iter().filter(|&&b| !b).count() as f64;
        for i in 0..n {
            for j in 0..n {
                let want = if c.cols[j] { 0.0 } else { 1.0 / keep };
                prop_assert!((obj.attention.at2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_stochastic((n, c, h, dh, seed, bits) in shapes()) {
        let c = case(n, c, h, dh, seed, bits);
        let (_, rec) = aas_attention(&c.params, &c.z, &flat(&c.cols)).unwrap();
        for i in 0..n {
            let s: f64 = rec.attention.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(rec.attention.row(i).iter().all(|&a| a >= 0.0));
        }
    }
}

#[test]
fn fully_masked_input_is_rejected() {
    let c = case(4, 2, 1, 2, 1, 0);
    assert!(aas_attention(&c.params, &c.z, &flat(&[true; 4])).is_err());
    assert!(ss_attention(&c.params, &c.z, &flat(&[true; 4]), 0.3).is_err());
    assert!(ss_attention(&c.params, &c.z, &flat(&[false; 4]), 1.5).is_err());
}
