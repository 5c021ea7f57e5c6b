use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Where an attention layer sits in the U-shaped network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Placement {
    Encoder,
    Bottleneck,
    Decoder,
}

impl Placement {
    pub fn tag(self) -> &'static str {
        match self {
            Placement::Encoder => "enc",
            Placement::Bottleneck => "mid",
            Placement::Decoder => "dec",
        }
    }
}

/// One self-attention layer of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayerInfo {
    pub name: String,
    pub resolution: usize,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub channels: usize,
    /// Pixel-unshuffle factor applied before the first convolution.
    pub patch: usize,
    pub base_width: usize,
    /// Width multiplier per level; `len() - 1` downsampling stages.
    pub width_mult: Vec<usize>,
    /// Feature-map sides (after unshuffle) that carry self-attention.
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub groups: usize,
    pub time_dim: usize,
    /// Also redirect encoder attention (ablation only; off by default).
    pub aas_in_encoder: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch: 2,
            base_width: 32,
            width_mult: vec![1, 2, 2],
            attention_resolutions: vec![16, 8],
            heads: 1,
            groups: 8,
            time_dim: 128,
            aas_in_encoder: false,
        }
    }
}

impl DenoiserConfig {
    /// A few-thousand-parameter network for gradient checks and fast tests.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            channels: 1,
            patch: 1,
            base_width: 4,
            width_mult: vec![1, 1],
            attention_resolutions: vec![4],
            heads: 1,
            groups: 2,
            time_dim: 8,
            aas_in_encoder: false,
        }
    }

    /// A small 64×64 network for integration tests of the pipelines.
    pub fn small() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch: 2,
            base_width: 8,
            width_mult: vec![1, 2, 2],
            attention_resolutions: vec![16, 8],
            heads: 1,
            groups: 4,
            time_dim: 16,
            aas_in_encoder: false,
        }
    }

    pub fn levels(&self) -> usize {
        self.width_mult.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.width_mult[level]
    }

    /// Feature-map side at `level`.
    pub fn resolution(&self, level: usize) -> usize {
        (self.image_size / self.patch) >> level
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_resolutions.contains(&self.resolution(level))
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.channels == 0 || self.patch == 0 || self.base_width == 0 {
            return Err(Error::config("image size, channels, patch and width must be positive"));
        }
        if self.width_mult.is_empty() || self.width_mult.contains(&0) {
            return Err(Error::config("width multipliers must be non-empty and positive"));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::config("patch must divide the image size"));
        }
        let last = self.levels() - 1;
        if !(self.image_size / self.patch).is_multiple_of(1 << last) || self.resolution(last) == 0 {
            return Err(Error::config("too many downsampling stages for this image size"));
        }
        for &r in &self.attention_resolutions {
            if !(0..self.levels()).any(|l| self.resolution(l) == r) {
                return Err(Error::config(format!(
                    "attention resolution {r} is not produced by the stage layout"
                )));
            }
        }
        if self.attention_resolutions.is_empty() {
            return Err(Error::config("at least one decoder attention layer is required"));
        }
        if self.groups == 0 || (0..self.levels()).any(|l| !self.width(l).is_multiple_of(self.groups)) {
            return Err(Error::config("group count must divide every level width"));
        }
        if self.heads == 0 || (0..self.levels()).any(|l| !self.width(l).is_multiple_of(self.heads)) {
            return Err(Error::config("head count must divide every attention width"));
        }
        if self.time_dim == 0 || !self.base_width.is_multiple_of(2) {
            return Err(Error::config("time_dim must be positive and base width even"));
        }
        Ok(())
    }

    /// Every attention layer in forward order.
    pub fn attention_layers(&self) -> Vec<AttentionLayerInfo> {
        let mut out = Vec::new();
        let last = self.levels() - 1;
        let info = |placement: Placement, level: usize| AttentionLayerInfo {
            name: format!("{}.{}", placement.tag(), self.resolution(level)),
            resolution: self.resolution(level),
            placement,
        };
        for l in 0..self.levels() {
            if self.has_attention(l) {
                out.push(info(Placement::Encoder, l));
            }
        }
        if self.has_attention(last) {
            out.push(info(Placement::Bottleneck, last));
        }
        for l in (0..self.levels()).rev() {
            if self.has_attention(l) {
                out.push(info(Placement::Decoder, l));
            }
        }
        out
    }

    /// Resolutions a removal mask must be flattened to.
    pub fn mask_resolutions(&self) -> Vec<usize> {
        let mut r = self.attention_resolutions.clone();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn to_entries(&self) -> BTreeMap<String, String> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        [
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("patch", self.patch.to_string()),
            ("base_width", self.base_width.to_string()),
            ("width_mult", join(&self.width_mult)),
            ("attention_resolutions", join(&self.attention_resolutions)),
            ("heads", self.heads.to_string()),
            ("groups", self.groups.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("aas_in_encoder", self.aas_in_encoder.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_entries(get: impl Fn(&str) -> Result<String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::CorruptArchive(format!("config `{k}` is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::CorruptArchive(format!("config `{k}` is not a list")))
                })
                .collect()
        };
        let cfg = Self {
            image_size: num("image_size")?,
            channels: num("channels")?,
            patch: num("patch")?,
            base_width: num("base_width")?,
            width_mult: list("width_mult")?,
            attention_resolutions: list("attention_resolutions")?,
            heads: num("heads")?,
            groups: num("groups")?,
            time_dim: num("time_dim")?,
            aas_in_encoder: get("aas_in_encoder")? == "true",
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let c = DenoiserConfig::default();
        c.validate().unwrap();
        assert_eq!((0..3).map(|l| c.resolution(l)).collect::<Vec<_>>(), vec![32, 16, 8]);
        let names: Vec<_> = c.attention_layers().into_iter().map(|l| l.name).collect();
        assert_eq!(names, ["enc.16", "enc.8", "mid.8", "dec.8", "dec.16"]);
    }

    #[test]
    fn unreachable_attention_resolution_is_rejected() {
        let c = DenoiserConfig {
            attention_resolutions: vec![12],
            ..DenoiserConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn entries_round_trip() {
        let c = DenoiserConfig::micro();
        let e = c.to_entries();
        let back = DenoiserConfig::from_entries(|k| Ok(e[k].clone())).unwrap();
        assert_eq!(back, c);
    }
}
