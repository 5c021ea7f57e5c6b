//! Self-attention with foreground-column masking.
//!
//! Three modes share one kernel:
//!
//! * **Standard** – `A = softmax(QKᵀ/√d)`, `OP = A·V`.
//! * **AAS** – every column whose token lies on the removal mask is sent to
//!   −∞ for *all* rows. Rows renormalize over background columns, so
//!   object rows attend more to the background (activation) while both
//!   object→object and background→object weights become exactly zero
//!   (suppression).
//! * **AAS+SS** – object rows additionally have their whole logit row scaled
//!   by λ before masking, which flattens their attention over the
//!   background. Background rows are plain AAS. The final output takes
//!   object rows from the λ branch and background rows from the AAS branch.
//!
//! −∞ is never stored: masked columns are zeroed structurally by the
//! softmax kernel.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::softmax::softmax_row_masked;
use crate::numerics::{Archive, Real, Tensor};

/// How decoder self-attention treats the removal mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    Standard,
    Aas,
    AasSs { lambda: f64 },
}

impl AttentionMode {
    pub fn validate(&self) -> Result<()> {
        if let AttentionMode::AasSs { lambda } = *self {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::config(format!("lambda must be in [0, 1], got {lambda}")));
            }
        }
        Ok(())
    }

    pub fn tag(&self) -> &'static str {
        match self {
            AttentionMode::Standard => "standard",
            AttentionMode::Aas => "aas",
            AttentionMode::AasSs { .. } => "aas_ss",
        }
    }

    pub fn is_standard(&self) -> bool {
        matches!(self, AttentionMode::Standard)
    }
}

/// Area-pools `base` (H×W, 1 = object) to `n×n` and marks every cell with
/// any foreground coverage. Returns a `1×n²` row-major flat mask.
pub fn flatten_mask(base: &Tensor<f32>, n: usize) -> Result<Tensor<f32>> {
    let (h, w) = base.dims2()?;
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::dim(format!(
            "mask of {h}×{w} cannot be pooled to {n}×{n}"
        )));
    }
    let (fh, fw) = (h / n, w / n);
    let mut out = vec![0.0f32; n * n];
    for y in 0..h {
        for x in 0..w {
            if base.data()[y * w + x] > 0.5 {
                out[(y / fh) * n + x / fw] = 1.0;
            }
        }
    }
    Ok(Tensor::from_parts(vec![1, n * n], out))
}

/// Binary object mask plus its flattened variants at each attention
/// resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalMask {
    base: Tensor<f32>,
    per_resolution: BTreeMap<usize, Tensor<f32>>,
}

impl RemovalMask {
    /// Builds the flattened masks for every resolution in `resolutions`.
    /// Fails with a degenerate-mask error if some resolution would be
    /// fully covered.
    pub fn new(base: Tensor<f32>, resolutions: &[usize]) -> Result<Self> {
        base.dims2()?;
        if base.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::config("removal mask must be binary"));
        }
        let mut per_resolution = BTreeMap::new();
        for &n in resolutions {
            let flat = flatten_mask(&base, n)?;
            if flat.data().iter().all(|&v| v == 1.0) {
                return Err(Error::DegenerateMask(format!(
                    "mask covers every token at resolution {n}×{n}"
                )));
            }
            per_resolution.insert(n, flat);
        }
        Ok(Self {
            base,
            per_resolution,
        })
    }

    pub fn base(&self) -> &Tensor<f32> {
        &self.base
    }

    pub fn resolutions(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_resolution.keys().copied()
    }

    pub fn flat(&self, n: usize) -> Result<&Tensor<f32>> {
        self.per_resolution
            .get(&n)
            .ok_or_else(|| Error::dim(format!("no flattened mask for resolution {n}")))
    }

    /// Column mask (`true` = object token) at resolution `n`.
    pub fn columns(&self, n: usize) -> Result<Vec<bool>> {
        Ok(self.flat(n)?.data().iter().map(|&v| v == 1.0).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.base.data().iter().all(|&v| v == 0.0)
    }

    /// Fraction of base pixels on the object.
    pub fn coverage(&self) -> f64 {
        self.base.mean()
    }
}

/// Learned projections of one attention layer. Weights map token rows:
/// `Q = Z·W_q + b_q` with `W_q` of shape `c×d`; the output projection maps
/// `d` back to `c_out`.
#[derive(Debug, Clone)]
pub struct AttentionParams<R: Real = f32> {
    pub w_q: Tensor<R>,
    pub w_k: Tensor<R>,
    pub w_v: Tensor<R>,
    pub w_o: Tensor<R>,
    pub b_q: Vec<R>,
    pub b_k: Vec<R>,
    pub b_v: Vec<R>,
    pub b_o: Vec<R>,
    pub heads: usize,
}

impl<R: Real> AttentionParams<R> {
    pub fn new(
        w_q: Tensor<R>,
        w_k: Tensor<R>,
        w_v: Tensor<R>,
        w_o: Tensor<R>,
        heads: usize,
    ) -> Result<Self> {
        let (c, d) = w_q.dims2()?;
        if w_k.shape() != [c, d] || w_v.shape() != [c, d] {
            return Err(Error::dim("q/k/v projections must share a shape"));
        }
        let (d2, c_out) = w_o.dims2()?;
        if d2 != d {
            return Err(Error::dim("output projection does not match width"));
        }
        if d == 0 || heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} not divisible into {heads} heads")));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: vec![R::zero(); d],
            b_k: vec![R::zero(); d],
            b_v: vec![R::zero(); d],
            b_o: vec![R::zero(); c_out],
            heads,
        })
    }

    pub fn in_width(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[1]
    }
}

/// One layer's attention at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<R: Real = f32> {
    pub layer: String,
    pub timestep: usize,
    pub mode: AttentionMode,
    /// Pre-mask similarity `QKᵀ/√d` (λ-scaled on object rows in the SS
    /// object branch). Head-averaged when there are several heads.
    pub similarity: Tensor<R>,
    /// Row-stochastic attention map.
    pub attention: Tensor<R>,
    /// `A·V` before the output projection.
    pub output: Tensor<R>,
}

impl<R: Real> AttentionRecord<R> {
    /// Tokens per side of the (square) feature map.
    pub fn side(&self) -> usize {
        let n2 = self.attention.shape()[0];
        (n2 as f64).sqrt().round() as usize
    }

    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.layer, self.timestep, self.mode.tag())
    }

    pub fn push_into(&self, archive: &mut Archive)
    where
        crate::numerics::AnyTensor: From<Tensor<R>>,
    {
        let key = self.key();
        let lambda = match self.mode {
            AttentionMode::AasSs { lambda } => lambda,
            _ => 1.0,
        };
        archive.set_meta(format!("{key}/lambda"), lambda);
        archive.push(format!("{key}/similarity"), self.similarity.clone());
        archive.push(format!("{key}/attention"), self.attention.clone());
        archive.push(format!("{key}/output"), self.output.clone());
    }

    /// Reads back every record stored by [`push_into`](Self::push_into).
    pub fn all_from_archive(archive: &Archive) -> Result<Vec<AttentionRecord<f64>>> {
        let mut out = Vec::new();
        for (name, t) in &archive.tensors {
            let Some(key) = name.strip_suffix("/similarity") else {
                continue;
            };
            let mut parts = key.rsplitn(3, '/');
            let (Some(tag), Some(ts), Some(layer)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::CorruptArchive(format!("record key `{key}`")));
            };
            let timestep = ts
                .parse()
                .map_err(|_| Error::CorruptArchive(format!("record timestep `{ts}`")))?;
            let lambda: f64 = archive
                .meta(&format!("{key}/lambda"))?
                .parse()
                .map_err(|_| Error::CorruptArchive(format!("lambda for `{key}`")))?;
            let mode = match tag {
                "standard" => AttentionMode::Standard,
                "aas" => AttentionMode::Aas,
                "aas_ss" => AttentionMode::AasSs { lambda },
                other => return Err(Error::CorruptArchive(format!("mode `{other}`"))),
            };
            let get = |suffix: &str| {
                archive
                    .get(&format!("{key}/{suffix}"))
                    .map(|t| t.to_f64())
                    .ok_or_else(|| Error::CorruptArchive(format!("missing `{key}/{suffix}`")))
            };
            out.push(AttentionRecord {
                layer: layer.to_string(),
                timestep,
                mode,
                similarity: t.to_f64(),
                attention: get("attention")?,
                output: get("output")?,
            });
        }
        Ok(out)
    }
}

/// Row treatment inside the attention kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) enum RowPolicy<'a> {
    Plain,
    /// Kill `cols[j] == true` columns in every row. Logit rows selected by
    /// `scale_all` (every row) or otherwise by `cols[i]` (object rows) are
    /// multiplied by `scale` first.
    Masked {
        cols: &'a [bool],
        scale: f64,
        scale_all: bool,
    },
}

impl<'a> RowPolicy<'a> {
    pub(crate) fn for_mode(mode: AttentionMode, cols: Option<&'a [bool]>) -> Result<Self> {
        match (mode, cols) {
            (AttentionMode::Standard, _) => Ok(RowPolicy::Plain),
            (_, None) => Err(Error::config("non-standard attention mode needs a mask")),
            (AttentionMode::Aas, Some(cols)) => Ok(RowPolicy::Masked {
                cols,
                scale: 1.0,
                scale_all: false,
            }),
            (AttentionMode::AasSs { lambda }, Some(cols)) => {
                mode.validate()?;
                Ok(RowPolicy::Masked {
                    cols,
                    scale: lambda,
                    scale_all: false,
                })
            }
        }
    }
}

/// Output of [`attend`]: `out` is `n×d`; `probs` and `logits` are
/// `heads×n×n` (logits after λ-scaling, before masking).
pub(crate) struct Attended<R> {
    pub out: Vec<R>,
    pub probs: Vec<R>,
    pub logits: Vec<R>,
}

/// Multi-head scaled dot-product attention on token-major buffers
/// (`q`, `k`, `v` all `n×d`).
pub(crate) fn attend<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    n: usize,
    d: usize,
    heads: usize,
    policy: RowPolicy<'_>,
) -> Result<Attended<R>> {
    let dh = d / heads;
    if let RowPolicy::Masked { cols, .. } = policy {
        if cols.len() != n {
            return Err(Error::dim(format!("mask has {} tokens, layer has {n}", cols.len())));
        }
        if cols.iter().all(|&c| c) {
            return Err(Error::DegenerateMask(format!(
                "all {n} tokens are masked"
            )));
        }
    }
    let scale = R::lit(1.0 / (dh as f64).sqrt());
    let mut logits = vec![R::zero(); heads * n * n];
    let mut probs = vec![R::zero(); heads * n * n];
    let mut out = vec![R::zero(); n * d];
    for h in 0..heads {
        let s = &mut logits[h * n * n..(h + 1) * n * n];
        R::gemm(
            n,
            dh,
            n,
            scale,
            &q[h * dh..],
            d as isize,
            1,
            &k[h * dh..],
            1,
            d as isize,
            R::zero(),
            s,
            n as isize,
            1,
        );
        let a = &mut probs[h * n * n..(h + 1) * n * n];
        a.copy_from_slice(s);
        match policy {
            RowPolicy::Plain => {
                for row in a.chunks_mut(n) {
                    softmax_row_masked(row, |_| false);
                }
            }
            RowPolicy::Masked {
                cols,
                scale,
                scale_all,
            } => {
                let lam = R::lit(scale);
                for (i, (row, srow)) in a.chunks_mut(n).zip(s.chunks_mut(n)).enumerate() {
                    if (scale_all || cols[i]) && scale != 1.0 {
                        for (x, y) in row.iter_mut().zip(srow.iter_mut()) {
                            *x = *x * lam;
                            *y = *x;
                        }
                    }
                    softmax_row_masked(row, |j| cols[j]);
                }
            }
        }
        R::gemm(
            n,
            n,
            dh,
            R::one(),
            a,
            n as isize,
            1,
            &v[h * dh..],
            d as isize,
            1,
            R::zero(),
            &mut out[h * dh..],
            d as isize,
            1,
        );
    }
    Ok(Attended { out, probs, logits })
}

/// `x·W + b` for token rows.
pub(crate) fn project<R: Real>(x: &[R], rows: usize, w: &Tensor<R>, b: &[R]) -> Vec<R> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    crate::numerics::gemm(false, false, rows, dout, din, R::one(), x, w.data(), R::one(), &mut out);
    out
}

pub(crate) fn head_mean<R: Real>(buf: &[R], heads: usize, n: usize) -> Tensor<R> {
    if heads == 1 {
        return Tensor::from_parts(vec![n, n], buf.to_vec());
    }
    let inv = 1.0 / heads as f64;
    let data = (0..n * n)
        .map(|idx| R::lit((0..heads).map(|h| buf[h * n * n + idx].as_f64()).sum::<f64>() * inv))
        .collect();
    Tensor::from_parts(vec![n, n], data)
}

fn run<R: Real>(
    params: &AttentionParams<R>,
    z: &Tensor<R>,
    mode: AttentionMode,
    cols: Option<&[bool]>,
) -> Result<(Tensor<R>, AttentionRecord<R>)> {
    let (n, c) = z.dims2()?;
    if c != params.in_width() {
        return Err(Error::dim(format!(
            "tokens have width {c}, layer expects {}",
            params.in_width()
        )));
    }
    let d = params.width();
    let q = project(z.data(), n, &params.w_q, &params.b_q);
    let k = project(z.data(), n, &params.w_k, &params.b_k);
    let v = project(z.data(), n, &params.w_v, &params.b_v);
    let policy = RowPolicy::for_mode(mode, cols)?;
    let att = attend(&q, &k, &v, n, d, params.heads, policy)?;
    let projected = project(&att.out, n, &params.w_o, &params.b_o);
    let c_out = params.w_o.shape()[1];
    let record = AttentionRecord {
        layer: String::new(),
        timestep: 0,
        mode,
        similarity: head_mean(&att.logits, params.heads, n),
        attention: head_mean(&att.probs, params.heads, n),
        output: Tensor::from_parts(vec![n, d], att.out),
    };
    Ok((Tensor::new(vec![n, c_out], projected)?, record))
}

fn mask_columns(mask_flat: &Tensor<f32>, n: usize) -> Result<Vec<bool>> {
    if mask_flat.len() != n {
        return Err(Error::dim(format!(
            "flat mask has {} entries for {n} tokens",
            mask_flat.len()
        )));
    }
    Ok(mask_flat.data().iter().map(|&v| v > 0.5).collect())
}

/// Plain self-attention over token rows `z` (`n×c`).
pub fn standard_attention<R: Real>(
    params: &AttentionParams<R>,
    z: &Tensor<R>,
) -> Result<(Tensor<R>, AttentionRecord<R>)> {
    run(params, z, AttentionMode::Standard, None)
}

/// Attention with every object column removed from every row.
pub fn aas_attention<R: Real>(
    params: &AttentionParams<R>,
    z: &Tensor<R>,
    mask_flat: &Tensor<f32>,
) -> Result<(Tensor<R>, AttentionRecord<R>)> {
    let cols = mask_columns(mask_flat, z.dims2()?.0)?;
    run(params, z, AttentionMode::Aas, Some(&cols))
}

/// Two-branch similarity suppression. Returns the blended output and the
/// records of the λ branch and the plain AAS branch.
pub fn ss_attention<R: Real>(
    params: &AttentionParams<R>,
    z: &Tensor<R>,
    mask_flat: &Tensor<f32>,
    lambda: f64,
) -> Result<(Tensor<R>, AttentionRecord<R>, AttentionRecord<R>)> {
    AttentionMode::AasSs { lambda }.validate()?;
    let (n, _) = z.dims2()?;
    let cols = mask_columns(mask_flat, n)?;
    let d = params.width();
    let q = project(z.data(), n, &params.w_q, &params.b_q);
    let k = project(z.data(), n, &params.w_k, &params.b_k);
    let v = project(z.data(), n, &params.w_v, &params.b_v);
    // Object branch: λ·S with object columns killed, for every row.
    let obj = attend(
        &q,
        &k,
        &v,
        n,
        d,
        params.heads,
        RowPolicy::Masked {
            cols: &cols,
            scale: lambda,
            scale_all: true,
        },
    )?;
    // Background branch: plain AAS.
    let (bg_out, bg_record) = run(params, z, AttentionMode::Aas, Some(&cols))?;
    let obj_proj = project(&obj.out, n, &params.w_o, &params.b_o);
    let c_out = params.w_o.shape()[1];
    let mut blended = Vec::with_capacity(n * c_out);
    for (i, &is_obj) in cols.iter().enumerate() {
        let src = if is_obj {
            &obj_proj[i * c_out..(i + 1) * c_out]
        } else {
            bg_out.row(i)
        };
        blended.extend_from_slice(src);
    }
    let obj_record = AttentionRecord {
        layer: String::new(),
        timestep: 0,
        mode: AttentionMode::AasSs { lambda },
        similarity: head_mean(&obj.logits, params.heads, n),
        attention: head_mean(&obj.probs, params.heads, n),
        output: Tensor::from_parts(vec![n, d], obj.out),
    };
    Ok((Tensor::new(vec![n, c_out], blended)?, obj_record, bg_record))
}
