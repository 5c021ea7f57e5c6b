use super::config::{DenoiserConfig, Placement};
use super::layers::*;
use super::params::{Layout, ParamId, Params};
use crate::attention::{head_mean, AttentionMode, AttentionRecord, RemovalMask, RowPolicy};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone)]
struct AttnSlot {
    name: String,
    placement: Placement,
    block: AttnBlock,
}

/// Static network structure; the weights live in a separate [`Params`].
#[derive(Debug, Clone)]
pub(crate) struct Unet {
    cfg: DenoiserConfig,
    temb1: Linear,
    temb2: Linear,
    stem: Conv,
    enc: Vec<(ResBlock, Option<AttnSlot>)>,
    downs: Vec<Conv>,
    mid: ResBlock,
    mid_attn: Option<AttnSlot>,
    dec: Vec<(ResBlock, Option<AttnSlot>)>,
    /// `ups[i - 1]` lifts level `i` to level `i - 1`.
    ups: Vec<Conv>,
    out_gn: GroupNorm,
    out_conv: Conv,
}

/// Per-call settings for a forward pass.
pub(crate) struct Ctx<'a> {
    pub t: usize,
    pub mode: AttentionMode,
    pub mask: Option<&'a RemovalMask>,
    pub record: bool,
}

type Stage<R> = (ResCache<R>, Option<AttnCache<R>>);

/// Noise prediction, the tape for the backward pass and attention records.
type Forward<R> = (Vec<R>, Tape<R>, Vec<AttentionRecord<R>>);

pub(crate) struct Tape<R> {
    emb: Vec<R>,
    th: Vec<R>,
    ta: Vec<R>,
    temb: Vec<R>,
    tact: Vec<R>,
    stem: ConvCache<R>,
    enc: Vec<Stage<R>>,
    downs: Vec<ConvCache<R>>,
    mid: Stage<R>,
    dec: Vec<Option<Stage<R>>>,
    ups: Vec<Option<ConvCache<R>>>,
    out_gn: GnCache<R>,
    out_n: Vec<R>,
    out_conv: ConvCache<R>,
}

impl Unet {
    pub fn new(cfg: &DenoiserConfig) -> Result<(Self, Layout)> {
        cfg.validate()?;
        let mut l = Layout::default();
        let (g, td, heads) = (cfg.groups, cfg.time_dim, cfg.heads);
        let levels = cfg.levels();
        let attn = |l: &mut Layout, placement: Placement, level: usize| {
            cfg.has_attention(level).then(|| {
                let name = format!("{}.{}", placement.tag(), cfg.resolution(level));
                AttnSlot {
                    block: AttnBlock::new(l, &format!("{name}.attn"), cfg.width(level), g, heads),
                    name,
                    placement,
                }
            })
        };
        let temb1 = Linear::new(&mut l, "time.fc1", cfg.base_width, td, false);
        let temb2 = Linear::new(&mut l, "time.fc2", td, td, false);
        let cin = cfg.channels * cfg.patch * cfg.patch;
        let stem = Conv::new(&mut l, "stem", cin, cfg.width(0), 3, 1, false);
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for lv in 0..levels {
            let win = if lv == 0 { cfg.width(0) } else { cfg.width(lv - 1) };
            let res = ResBlock::new(&mut l, &format!("enc{lv}.res"), win, cfg.width(lv), g, td);
            enc.push((res, attn(&mut l, Placement::Encoder, lv)));
            if lv + 1 < levels {
                let w = cfg.width(lv);
                downs.push(Conv::new(&mut l, &format!("down{lv}"), w, w, 3, 2, false));
            }
        }
        let last = levels - 1;
        let wl = cfg.width(last);
        let mid = ResBlock::new(&mut l, "mid.res", wl, wl, g, td);
        let mid_attn = attn(&mut l, Placement::Bottleneck, last);
        let mut dec = Vec::new();
        let mut ups = Vec::new();
        for lv in 0..levels {
            let w = cfg.width(lv);
            let res = ResBlock::new(&mut l, &format!("dec{lv}.res"), 2 * w, w, g, td);
            dec.push((res, attn(&mut l, Placement::Decoder, lv)));
            if lv > 0 {
                ups.push(Conv::new(&mut l, &format!("up{lv}"), w, cfg.width(lv - 1), 3, 1, false));
            }
        }
        let out_gn = GroupNorm::new(&mut l, "out.norm", cfg.width(0), g);
        let out_conv = Conv::new(&mut l, "out.conv", cfg.width(0), cin, 3, 1, true);
        let net = Self {
            cfg: cfg.clone(),
            temb1,
            temb2,
            stem,
            enc,
            downs,
            mid,
            mid_attn,
            dec,
            ups,
            out_gn,
            out_conv,
        };
        Ok((net, l))
    }

    /// Output projections of the decoder attention layers.
    pub fn decoder_attention_outputs(&self) -> Vec<ParamId> {
        self.dec
            .iter()
            .filter_map(|(_, a)| a.as_ref().map(|s| s.block.out_param()))
            .collect()
    }

    fn layer_mode(&self, placement: Placement, mode: AttentionMode) -> AttentionMode {
        match placement {
            Placement::Decoder => mode,
            Placement::Encoder if self.cfg.aas_in_encoder => mode,
            _ => AttentionMode::Standard,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_attn<R: Real>(
        &self,
        slot: &AttnSlot,
        p: &Params<R>,
        x: &[R],
        side: usize,
        ctx: &Ctx<'_>,
        records: &mut Vec<AttentionRecord<R>>,
    ) -> Result<(Vec<R>, AttnCache<R>)> {
        let mode = self.layer_mode(slot.placement, ctx.mode);
        let cols = match (mode.is_standard(), ctx.mask) {
            (true, _) => None,
            (false, Some(m)) => Some(m.columns(side)?),
            (false, None) => return Err(Error::config("masked attention mode needs a removal mask")),
        };
        let policy = RowPolicy::for_mode(mode, cols.as_deref())?;
        let (y, cache) = slot.block.forward(p, x, side, policy)?;
        if ctx.record {
            let n = side * side;
            records.push(AttentionRecord {
                layer: slot.name.clone(),
                timestep: ctx.t,
                mode,
                similarity: head_mean(&cache.att.logits, self.cfg.heads, n),
                attention: head_mean(&cache.att.probs, self.cfg.heads, n),
                output: Tensor::from_parts(vec![n, self.cfg.width_for_side(side)], cache.att.out.clone()),
            });
        }
        Ok((y, cache))
    }

    /// Predicts the noise in `x` (`channels×size×size`).
    pub fn forward<R: Real>(
        &self,
        p: &Params<R>,
        x: &[R],
        ctx: &Ctx<'_>,
    ) -> Result<Forward<R>> {
        let cfg = &self.cfg;
        let mut records = Vec::new();
        let emb = timestep_embedding::<R>(ctx.t, cfg.base_width);
        let th = self.temb1.forward(p, &emb, 1);
        let ta = silu(&th);
        let temb = self.temb2.forward(p, &ta, 1);
        let tact = silu(&temb);

        let u = pixel_unshuffle(x, cfg.channels, cfg.image_size, cfg.patch);
        let r0 = cfg.resolution(0);
        let (mut h, stem) = self.stem.forward(p, &u, r0, r0);
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        let mut skips = Vec::new();
        for (lv, (res, attn)) in self.enc.iter().enumerate() {
            let side = cfg.resolution(lv);
            let (y, rc) = res.forward(p, &h, side, &tact);
            h = y;
            let ac = match attn {
                Some(slot) => {
                    let (y, c) = self.run_attn(slot, p, &h, side, ctx, &mut records)?;
                    h = y;
                    Some(c)
                }
                None => None,
            };
            enc.push((rc, ac));
            skips.push(h.clone());
            if let Some(down) = self.downs.get(lv) {
                let (y, c) = down.forward(p, &h, side, side);
                h = y;
                downs.push(c);
            }
        }
        let last = cfg.levels() - 1;
        let side = cfg.resolution(last);
        let (y, mc) = self.mid.forward(p, &h, side, &tact);
        h = y;
        let mac = match &self.mid_attn {
            Some(slot) => {
                let (y, c) = self.run_attn(slot, p, &h, side, ctx, &mut records)?;
                h = y;
                Some(c)
            }
            None => None,
        };
        let mut dec: Vec<Option<Stage<R>>> = (0..cfg.levels()).map(|_| None).collect();
        let mut ups: Vec<Option<ConvCache<R>>> = (0..cfg.levels()).map(|_| None).collect();
        for lv in (0..cfg.levels()).rev() {
            let side = cfg.resolution(lv);
            h.extend_from_slice(&skips[lv]);
            let (res, attn) = &self.dec[lv];
            let (y, rc) = res.forward(p, &h, side, &tact);
            h = y;
            let ac = match attn {
                Some(slot) => {
                    let (y, c) = self.run_attn(slot, p, &h, side, ctx, &mut records)?;
                    h = y;
                    Some(c)
                }
                None => None,
            };
            dec[lv] = Some((rc, ac));
            if lv > 0 {
                let up = upsample2(&h, cfg.width(lv), side);
                let (y, c) = self.ups[lv - 1].forward(p, &up, 2 * side, 2 * side);
                h = y;
                ups[lv] = Some(c);
            }
        }
        let (out_n, out_gn) = self.out_gn.forward(p, &h, r0 * r0);
        let (o, out_conv) = self.out_conv.forward(p, &silu(&out_n), r0, r0);
        let eps = pixel_shuffle(&o, cfg.channels, cfg.image_size, cfg.patch);
        let tape = Tape {
            emb,
            th,
            ta,
            temb,
            tact,
            stem,
            enc,
            downs,
            mid: (mc, mac),
            dec,
            ups,
            out_gn,
            out_n,
            out_conv,
        };
        Ok((eps, tape, records))
    }

    /// Gradient of `⟨d_eps, forward(x)⟩` with respect to every parameter.
    pub fn backward<R: Real>(&self, p: &Params<R>, tape: &Tape<R>, d_eps: &[R]) -> Params<R> {
        let cfg = &self.cfg;
        let mut g = p.zeros_like();
        let mut dtact = vec![R::zero(); cfg.time_dim];
        let r0 = cfg.resolution(0);
        let d_o = pixel_unshuffle(d_eps, cfg.channels, cfg.image_size, cfg.patch);
        let da = self.out_conv.backward(p, &mut g, &tape.out_conv, &d_o);
        let dn = silu_backward(&tape.out_n, &da);
        let mut dh = self.out_gn.backward(p, &mut g, &tape.out_gn, &dn, r0 * r0);
        let mut dskips: Vec<Vec<R>> = vec![Vec::new(); cfg.levels()];
        for lv in 0..cfg.levels() {
            let side = cfg.resolution(lv);
            if lv > 0 {
                let c = tape.ups[lv].as_ref().expect("up cache");
                let dup = self.ups[lv - 1].backward(p, &mut g, c, &dh);
                dh = upsample2_backward(&dup, cfg.width(lv), side);
            }
            let (res, attn) = &self.dec[lv];
            let (rc, ac) = tape.dec[lv].as_ref().expect("decoder cache");
            if let (Some(slot), Some(c)) = (attn, ac) {
                dh = slot.block.backward(p, &mut g, c, &dh, side);
            }
            let dcat = res.backward(p, &mut g, rc, &dh, side, &tape.tact, &mut dtact);
            let split = dcat.len() / 2;
            dskips[lv] = dcat[split..].to_vec();
            dh = dcat[..split].to_vec();
        }
        let last = cfg.levels() - 1;
        let side = cfg.resolution(last);
        if let (Some(slot), Some(c)) = (&self.mid_attn, &tape.mid.1) {
            dh = slot.block.backward(p, &mut g, c, &dh, side);
        }
        dh = self.mid.backward(p, &mut g, &tape.mid.0, &dh, side, &tape.tact, &mut dtact);
        for lv in (0..cfg.levels()).rev() {
            let side = cfg.resolution(lv);
            if lv < last {
                dh = self.downs[lv].backward(p, &mut g, &tape.downs[lv], &dh);
            }
            add_into(&mut dh, &dskips[lv]);
            let (res, attn) = &self.enc[lv];
            let (rc, ac) = &tape.enc[lv];
            if let (Some(slot), Some(c)) = (attn, ac) {
                dh = slot.block.backward(p, &mut g, c, &dh, side);
            }
            dh = res.backward(p, &mut g, rc, &dh, side, &tape.tact, &mut dtact);
        }
        self.stem.backward(p, &mut g, &tape.stem, &dh);
        let dtemb = silu_backward(&tape.temb, &dtact);
        let dta = self.temb2.backward(p, &mut g, &tape.ta, &dtemb, 1);
        let dth = silu_backward(&tape.th, &dta);
        self.temb1.backward(p, &mut g, &tape.emb, &dth, 1);
        g
    }
}

impl DenoiserConfig {
    /// Channel width of the level whose feature map has side `side`.
    pub(crate) fn width_for_side(&self, side: usize) -> usize {
        (0..self.levels())
            .find(|&l| self.resolution(l) == side)
            .map(|l| self.width(l))
            .unwrap_or(0)
    }
}
