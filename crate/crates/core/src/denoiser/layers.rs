//! Network building blocks with explicit backward passes.
//!
//! Feature maps are channel-major `c×h×w` buffers. Every `forward` returns
//! the output plus whatever its `backward` needs; gradients accumulate into
//! a [`Params`] buffer with the same layout as the weights.

use super::params::{Init, Layout, ParamId, Params};
use crate::attention::{attend, Attended, RowPolicy};
use crate::error::Result;
use crate::numerics::{gemm, Real};

pub(crate) const GN_EPS: f64 = 1e-5;

fn lit<R: Real>(v: f64) -> R {
    R::lit(v)
}

pub(crate) fn transpose<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub(crate) fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu<R: Real>(x: &[R]) -> Vec<R> {
    x.iter()
        .map(|&v| {
            let v = v.as_f64();
            lit(v * sigmoid(v))
        })
        .collect()
}

pub(crate) fn silu_backward<R: Real>(x: &[R], dy: &[R]) -> Vec<R> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let v = v.as_f64();
            let s = sigmoid(v);
            lit(g.as_f64() * s * (1.0 + v * (1.0 - s)))
        })
        .collect()
}

/// Sinusoidal embedding of a timestep into `dim` features (half sines,
/// half cosines, geometric frequencies down to 1/10000).
pub(crate) fn timestep_embedding<R: Real>(t: usize, dim: usize) -> Vec<R> {
    let half = dim / 2;
    let mut out = vec![R::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = lit(arg.sin());
        out[half + i] = lit(arg.cos());
    }
    out
}

/// `c×(h·p)×(w·p)` → `(c·p²)×h×w`.
pub(crate) fn pixel_unshuffle<R: Real>(x: &[R], c: usize, side: usize, p: usize) -> Vec<R> {
    if p == 1 {
        return x.to_vec();
    }
    let s = side / p;
    let mut out = vec![R::zero(); x.len()];
    for ci in 0..c {
        for dy in 0..p {
            for dx in 0..p {
                let oc = (ci * p + dy) * p + dx;
                for y in 0..s {
                    for xx in 0..s {
                        out[(oc * s + y) * s + xx] = x[(ci * side + y * p + dy) * side + xx * p + dx];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_unshuffle`]; `side` is the full-resolution side.
pub(crate) fn pixel_shuffle<R: Real>(x: &[R], c: usize, side: usize, p: usize) -> Vec<R> {
    if p == 1 {
        return x.to_vec();
    }
    let s = side / p;
    let mut out = vec![R::zero(); x.len()];
    for ci in 0..c {
        for dy in 0..p {
            for dx in 0..p {
                let oc = (ci * p + dy) * p + dx;
                for y in 0..s {
                    for xx in 0..s {
                        out[(ci * side + y * p + dy) * side + xx * p + dx] = x[(oc * s + y) * s + xx];
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling of a `c×s×s` map.
pub(crate) fn upsample2<R: Real>(x: &[R], c: usize, s: usize) -> Vec<R> {
    let s2 = 2 * s;
    let mut out = vec![R::zero(); c * s2 * s2];
    for ci in 0..c {
        for y in 0..s2 {
            for xx in 0..s2 {
                out[(ci * s2 + y) * s2 + xx] = x[(ci * s + y / 2) * s + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<R: Real>(dy: &[R], c: usize, s: usize) -> Vec<R> {
    let s2 = 2 * s;
    let mut out = vec![R::zero(); c * s * s];
    for ci in 0..c {
        for y in 0..s2 {
            for xx in 0..s2 {
                let o = &mut out[(ci * s + y / 2) * s + xx / 2];
                *o = *o + dy[(ci * s2 + y) * s2 + xx];
            }
        }
    }
    out
}

/// Dense layer on token rows: `rows×din → rows×dout`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, din: usize, dout: usize, zero: bool) -> Self {
        let init = if zero { Init::Zeros } else { Init::Fan(din) };
        let w = layout.add(format!("{name}.weight"), &[din, dout], init);
        let b = layout.add(format!("{name}.bias"), &[dout], Init::Zeros);
        Self { w, b, din, dout }
    }

    pub fn forward<R: Real>(&self, p: &Params<R>, x: &[R], rows: usize) -> Vec<R> {
        let b = p.slice(self.b);
        let mut out = Vec::with_capacity(rows * self.dout);
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        gemm(false, false, rows, self.dout, self.din, R::one(), x, p.slice(self.w), R::one(), &mut out);
        out
    }

    pub fn backward<R: Real>(
        &self,
        p: &Params<R>,
        g: &mut Params<R>,
        x: &[R],
        dy: &[R],
        rows: usize,
    ) -> Vec<R> {
        gemm(true, false, self.din, self.dout, rows, R::one(), x, dy, R::one(), g.slice_mut(self.w));
        let db = g.slice_mut(self.b);
        for row in dy.chunks(self.dout) {
            add_into(db, row);
        }
        let mut dx = vec![R::zero(); rows * self.din];
        gemm(false, true, rows, self.din, self.dout, R::one(), dy, p.slice(self.w), R::zero(), &mut dx);
        dx
    }
}

/// 2-D convolution lowered to a GEMM over an im2col buffer.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) struct ConvCache<R> {
    col: Vec<R>,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut Layout,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero: bool,
    ) -> Self {
        let init = if zero { Init::Zeros } else { Init::Fan(cin * k * k) };
        let w = layout.add(format!("{name}.weight"), &[cout, cin, k, k], init);
        let b = layout.add(format!("{name}.bias"), &[cout], Init::Zeros);
        Self {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn out_side(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output columns `[lo, hi)` whose input column for kernel tap `kx`
    /// lies inside `0..w`.
    fn valid_span(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        // largest ox with ox·stride + kx − pad ≤ w − 1
        let hi = match (w + self.pad).checked_sub(kx + 1) {
            Some(v) => (v / self.stride + 1).min(wo),
            None => 0,
        };
        (lo.min(hi), hi)
    }

    fn im2col<R: Real>(&self, x: &[R], h: usize, w: usize, ho: usize, wo: usize) -> Vec<R> {
        let k = self.k;
        let mut col = vec![R::zero(); self.cin * k * k * ho * wo];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    let (ox_lo, ox_hi) = self.valid_span(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                            continue;
                        }
                        let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        let out = &mut dst[oy * wo + ox_lo..oy * wo + ox_hi];
                        let ix0 = ox_lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            out.copy_from_slice(&src[ix0..ix0 + out.len()]);
                        } else {
                            for (o, s) in out.iter_mut().zip(src[ix0..].iter().step_by(self.stride)) {
                                *o = *s;
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<R: Real>(&self, dcol: &[R], h: usize, w: usize, ho: usize, wo: usize) -> Vec<R> {
        let k = self.k;
        let mut dx = vec![R::zero(); self.cin * h * w];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcol[row * ho * wo..(row + 1) * ho * wo];
                    let (ox_lo, ox_hi) = self.valid_span(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        let ix0 = ox_lo * self.stride + kx - self.pad;
                        let row_in = &src[oy * wo + ox_lo..oy * wo + ox_hi];
                        for (s, d) in row_in.iter().zip(dx[base + ix0..base + w].iter_mut().step_by(self.stride)) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<R: Real>(&self, p: &Params<R>, x: &[R], h: usize, w: usize) -> (Vec<R>, ConvCache<R>) {
        let (ho, wo) = (self.out_side(h), self.out_side(w));
        let col = if self.is_pointwise() {
            x.to_vec()
        } else {
            self.im2col(x, h, w, ho, wo)
        };
        let hw = ho * wo;
        let mut y = Vec::with_capacity(self.cout * hw);
        for &b in p.slice(self.b) {
            y.extend(std::iter::repeat_n(b, hw));
        }
        let kk = self.cin * self.k * self.k;
        gemm(false, false, self.cout, hw, kk, R::one(), p.slice(self.w), &col, R::one(), &mut y);
        (y, ConvCache { col, h, w, ho, wo })
    }

    pub fn backward<R: Real>(
        &self,
        p: &Params<R>,
        g: &mut Params<R>,
        cache: &ConvCache<R>,
        dy: &[R],
    ) -> Vec<R> {
        let hw = cache.ho * cache.wo;
        let kk = self.cin * self.k * self.k;
        gemm(false, true, self.cout, kk, hw, R::one(), dy, &cache.col, R::one(), g.slice_mut(self.w));
        let db = g.slice_mut(self.b);
        for (b, row) in db.iter_mut().zip(dy.chunks(hw)) {
            *b = *b + lit(row.iter().map(|v| v.as_f64()).sum());
        }
        let mut dcol = vec![R::zero(); kk * hw];
        gemm(true, false, kk, hw, self.cout, R::one(), p.slice(self.w), dy, R::zero(), &mut dcol);
        if self.is_pointwise() {
            dcol
        } else {
            self.col2im(&dcol, cache.h, cache.w, cache.ho, cache.wo)
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
    pub groups: usize,
}

pub(crate) struct GnCache<R> {
    xhat: Vec<R>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(layout: &mut Layout, name: &str, c: usize, groups: usize) -> Self {
        let gamma = layout.add(format!("{name}.gamma"), &[c], Init::Ones);
        let beta = layout.add(format!("{name}.beta"), &[c], Init::Zeros);
        Self { gamma, beta, c, groups }
    }

    pub fn forward<R: Real>(&self, p: &Params<R>, x: &[R], hw: usize) -> (Vec<R>, GnCache<R>) {
        let span = self.c / self.groups * hw;
        let mut xhat = vec![R::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for (src, dst) in x.chunks(span).zip(xhat.chunks_mut(span)) {
            let m = span as f64;
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / m;
            let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = lit((s.as_f64() - mean) * inv);
            }
            inv_std.push(inv);
        }
        let (gamma, beta) = (p.slice(self.gamma), p.slice(self.beta));
        let y = xhat
            .chunks(hw)
            .enumerate()
            .flat_map(|(c, row)| row.iter().map(move |&v| v * gamma[c] + beta[c]))
            .collect();
        (y, GnCache { xhat, inv_std })
    }

    pub fn backward<R: Real>(
        &self,
        p: &Params<R>,
        g: &mut Params<R>,
        cache: &GnCache<R>,
        dy: &[R],
        hw: usize,
    ) -> Vec<R> {
        let gamma = p.slice(self.gamma).to_vec();
        {
            let mut dgamma = vec![0.0; self.c];
            let mut dbeta = vec![0.0; self.c];
            for c in 0..self.c {
                for i in c * hw..(c + 1) * hw {
                    dgamma[c] += dy[i].as_f64() * cache.xhat[i].as_f64();
                    dbeta[c] += dy[i].as_f64();
                }
            }
            add_into(g.slice_mut(self.gamma), &dgamma.iter().map(|&v| lit(v)).collect::<Vec<R>>());
            add_into(g.slice_mut(self.beta), &dbeta.iter().map(|&v| lit(v)).collect::<Vec<R>>());
        }
        let cg = self.c / self.groups;
        let span = cg * hw;
        let mut dx = vec![R::zero(); dy.len()];
        for gi in 0..self.groups {
            let range = gi * span..(gi + 1) * span;
            let m = span as f64;
            let (mut s1, mut s2) = (0.0, 0.0);
            let dxhat: Vec<f64> = range
                .clone()
                .map(|i| dy[i].as_f64() * gamma[i / hw].as_f64())
                .collect();
            for (j, i) in range.clone().enumerate() {
                s1 += dxhat[j];
                s2 += dxhat[j] * cache.xhat[i].as_f64();
            }
            let inv = cache.inv_std[gi];
            for (j, i) in range.enumerate() {
                dx[i] = lit(inv / m * (m * dxhat[j] - s1 - cache.xhat[i].as_f64() * s2));
            }
        }
        dx
    }
}

/// Pre-activation residual block with a timestep bias:
/// `x + conv2(silu(gn2(conv1(silu(gn1(x))) + W·temb)))`.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
    cout: usize,
}

pub(crate) struct ResCache<R> {
    gn1: GnCache<R>,
    n1: Vec<R>,
    conv1: ConvCache<R>,
    gn2: GnCache<R>,
    n2: Vec<R>,
    conv2: ConvCache<R>,
    skip: Option<ConvCache<R>>,
}

impl ResBlock {
    pub fn new(layout: &mut Layout, name: &str, cin: usize, cout: usize, groups: usize, tdim: usize) -> Self {
        Self {
            gn1: GroupNorm::new(layout, &format!("{name}.norm1"), cin, groups),
            conv1: Conv::new(layout, &format!("{name}.conv1"), cin, cout, 3, 1, false),
            temb: Linear::new(layout, &format!("{name}.temb"), tdim, cout, false),
            gn2: GroupNorm::new(layout, &format!("{name}.norm2"), cout, groups),
            conv2: Conv::new(layout, &format!("{name}.conv2"), cout, cout, 3, 1, true),
            skip: (cin != cout).then(|| Conv::new(layout, &format!("{name}.skip"), cin, cout, 1, 1, false)),
            cout,
        }
    }

    /// `temb` is the already activated timestep embedding.
    pub fn forward<R: Real>(&self, p: &Params<R>, x: &[R], side: usize, temb: &[R]) -> (Vec<R>, ResCache<R>) {
        let hw = side * side;
        let (n1, gn1) = self.gn1.forward(p, x, hw);
        let (mut h, conv1) = self.conv1.forward(p, &silu(&n1), side, side);
        let tb = self.temb.forward(p, temb, 1);
        for (row, &b) in h.chunks_mut(hw).zip(&tb) {
            row.iter_mut().for_each(|v| *v = *v + b);
        }
        let (n2, gn2) = self.gn2.forward(p, &h, hw);
        let (mut out, conv2) = self.conv2.forward(p, &silu(&n2), side, side);
        let skip = match &self.skip {
            Some(conv) => {
                let (s, c) = conv.forward(p, x, side, side);
                add_into(&mut out, &s);
                Some(c)
            }
            None => {
                add_into(&mut out, x);
                None
            }
        };
        let cache = ResCache {
            gn1,
            n1,
            conv1,
            gn2,
            n2,
            conv2,
            skip,
        };
        (out, cache)
    }

    /// Returns `dx`; adds the gradient of the activated embedding to `dtemb`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<R: Real>(
        &self,
        p: &Params<R>,
        g: &mut Params<R>,
        cache: &ResCache<R>,
        dy: &[R],
        side: usize,
        temb: &[R],
        dtemb: &mut [R],
    ) -> Vec<R> {
        let hw = side * side;
        let da2 = self.conv2.backward(p, g, &cache.conv2, dy);
        let dn2 = silu_backward(&cache.n2, &da2);
        let dh = self.gn2.backward(p, g, &cache.gn2, &dn2, hw);
        let dtb: Vec<R> = dh
            .chunks(hw)
            .map(|row| lit(row.iter().map(|v| v.as_f64()).sum()))
            .collect();
        debug_assert_eq!(dtb.len(), self.cout);
        add_into(dtemb, &self.temb.backward(p, g, temb, &dtb, 1));
        let da1 = self.conv1.backward(p, g, &cache.conv1, &dh);
        let dn1 = silu_backward(&cache.n1, &da1);
        let mut dx = self.gn1.backward(p, g, &cache.gn1, &dn1, hw);
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(c)) => add_into(&mut dx, &conv.backward(p, g, c, dy)),
            _ => add_into(&mut dx, dy),
        }
        dx
    }
}

/// Residual self-attention over the spatial tokens of a feature map.
#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    gn: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    c: usize,
    heads: usize,
}

pub(crate) struct AttnCache<R> {
    gn: GnCache<R>,
    tokens: Vec<R>,
    q: Vec<R>,
    k: Vec<R>,
    v: Vec<R>,
    pub att: Attended<R>,
    /// Per-row logit multiplier applied before the softmax.
    row_scale: Vec<f64>,
}

impl AttnBlock {
    pub fn new(layout: &mut Layout, name: &str, c: usize, groups: usize, heads: usize) -> Self {
        Self {
            gn: GroupNorm::new(layout, &format!("{name}.norm"), c, groups),
            q: Linear::new(layout, &format!("{name}.q"), c, c, false),
            k: Linear::new(layout, &format!("{name}.k"), c, c, false),
            v: Linear::new(layout, &format!("{name}.v"), c, c, false),
            o: Linear::new(layout, &format!("{name}.out"), c, c, true),
            c,
            heads,
        }
    }

    pub fn out_param(&self) -> ParamId {
        self.o.w
    }

    pub fn forward<R: Real>(
        &self,
        p: &Params<R>,
        x: &[R],
        side: usize,
        policy: RowPolicy<'_>,
    ) -> Result<(Vec<R>, AttnCache<R>)> {
        let n = side * side;
        let (hn, gn) = self.gn.forward(p, x, n);
        let tokens = transpose(&hn, self.c, n);
        let q = self.q.forward(p, &tokens, n);
        let k = self.k.forward(p, &tokens, n);
        let v = self.v.forward(p, &tokens, n);
        let att = attend(&q, &k, &v, n, self.c, self.heads, policy)?;
        let yt = self.o.forward(p, &att.out, n);
        let mut y = transpose(&yt, n, self.c);
        add_into(&mut y, x);
        let row_scale = match policy {
            RowPolicy::Plain => vec![1.0; n],
            RowPolicy::Masked {
                cols,
                scale,
                scale_all,
            } => cols
                .iter()
                .map(|&c| if scale_all || c { scale } else { 1.0 })
                .collect(),
        };
        let cache = AttnCache {
            gn,
            tokens,
            q,
            k,
            v,
            att,
            row_scale,
        };
        Ok((y, cache))
    }

    pub fn backward<R: Real>(
        &self,
        p: &Params<R>,
        g: &mut Params<R>,
        cache: &AttnCache<R>,
        dy: &[R],
        side: usize,
    ) -> Vec<R> {
        let n = side * side;
        let d = self.c;
        let dh = d / self.heads;
        let dyt = transpose(dy, d, n);
        let d_out = self.o.backward(p, g, &cache.att.out, &dyt, n);
        let mut dq = vec![R::zero(); n * d];
        let mut dk = vec![R::zero(); n * d];
        let mut dv = vec![R::zero(); n * d];
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut da = vec![R::zero(); n * n];
        for h in 0..self.heads {
            let a = &cache.att.probs[h * n * n..(h + 1) * n * n];
            let off = h * dh;
            // dA = dO_h · V_hᵀ
            R::gemm(n, dh, n, R::one(), &d_out[off..], d as isize, 1, &cache.v[off..], 1, d as isize, R::zero(), &mut da, n as isize, 1);
            // dV_h = Aᵀ · dO_h
            R::gemm(n, n, dh, R::one(), a, 1, n as isize, &d_out[off..], d as isize, 1, R::zero(), &mut dv[off..], d as isize, 1);
            // softmax backward, then the per-row logit scale and 1/√d
            for i in 0..n {
                let arow = &a[i * n..(i + 1) * n];
                let drow = &mut da[i * n..(i + 1) * n];
                let dot: f64 = arow.iter().zip(drow.iter()).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                let s = cache.row_scale[i] * inv_sqrt;
                for (dv_, &av) in drow.iter_mut().zip(arow) {
                    *dv_ = lit(av.as_f64() * (dv_.as_f64() - dot) * s);
                }
            }
            // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
            R::gemm(n, n, dh, R::one(), &da, n as isize, 1, &cache.k[off..], d as isize, 1, R::zero(), &mut dq[off..], d as isize, 1);
            R::gemm(n, n, dh, R::one(), &da, 1, n as isize, &cache.q[off..], d as isize, 1, R::zero(), &mut dk[off..], d as isize, 1);
        }
        let mut dtok = self.q.backward(p, g, &cache.tokens, &dq, n);
        add_into(&mut dtok, &self.k.backward(p, g, &cache.tokens, &dk, n));
        add_into(&mut dtok, &self.v.backward(p, g, &cache.tokens, &dv, n));
        let dhn = transpose(&dtok, n, d);
        let mut dx = self.gn.backward(p, g, &cache.gn, &dhn, n);
        add_into(&mut dx, dy);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn shuffle_inverts_unshuffle() {
        let x: Vec<f64> = (0..3 * 8 * 8).map(|i| i as f64).collect();
        let u = pixel_unshuffle(&x, 3, 8, 2);
        assert_ne!(u, x);
        assert_eq!(pixel_shuffle(&u, 3, 8, 2), x);
        // top-left 2×2 of channel 0 lands in channels 0..4 at (0,0)
        assert_eq!([u[0], u[16], u[32], u[48]], [0.0, 1.0, 8.0, 9.0]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x: Vec<f64> = (0..2 * 3 * 3).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..2 * 6 * 6).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = upsample2(&x, 2, 3).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(upsample2_backward(&y, 2, 3)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (stride, h, w) in [(2, 5, 5), (1, 5, 5), (1, 4, 7), (2, 6, 3), (2, 8, 8), (1, 1, 2)] {
            let mut layout = Layout::default();
            let conv = Conv::new(&mut layout, "c", 2, 3, 3, stride, false);
            let mut rng = Rng::new(4);
            let p: Params<f64> = Params::initialize(&layout, &mut rng);
            let x: Vec<f64> = (0..2 * h * w).map(|_| rng.normal()).collect();
            let (y, cache) = conv.forward(&p, &x, h, w);
            let wt = p.slice(conv.w);
            let (ho, wo) = (conv.out_side(h), conv.out_side(w));
            for co in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix) {
                                        acc += wt[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                            * x[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((y[(co * ho + oy) * wo + ox] - acc).abs() < 1e-12, "stride {stride} {h}x{w}");
                    }
                }
            }
            // col2im is the adjoint of im2col
            let c: Vec<f64> = (0..cache.col.len()).map(|_| rng.normal()).collect();
            let lhs: f64 = cache.col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let back = conv.col2im(&c, h, w, ho, wo);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "stride {stride} {h}x{w}");
        }
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut layout = Layout::default();
        let gn = GroupNorm::new(&mut layout, "gn", 4, 2);
        let p: Params<f64> = Params::initialize(&layout, &mut Rng::new(0));
        let x: Vec<f64> = (0..4 * 9).map(|i| (i as f64 * 1.3).sin() * 5.0 + 2.0).collect();
        let (y, _) = gn.forward(&p, &x, 9);
        for g in y.chunks(18) {
            let mean = g.iter().sum::<f64>() / 18.0;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn timestep_embedding_starts_with_zero_sines() {
        let e: Vec<f64> = timestep_embedding(0, 8);
        assert_eq!(e, [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
