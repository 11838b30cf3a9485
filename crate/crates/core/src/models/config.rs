use std::fmt;
use std::str::FromStr;

use crate::blocks::{Linear, PatchExpand, PatchMerge, TransformerLayer};
use crate::config::KeyValues;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    SwinMae,
    VitMae,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "swin-mae" => Ok(Variant::SwinMae),
            "vit-mae" => Ok(Variant::VitMae),
            other => Err(format!("expected swin-mae|vit-mae, got `{other}`")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::SwinMae => "swin-mae",
            Variant::VitMae => "vit-mae",
        })
    }
}

/// Architecture hyperparameters for both autoencoder variants.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub bands: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stages: usize,
    pub heads_per_stage: Vec<usize>,
    /// Attention window side, in patches.
    pub window: usize,
    /// Swin blocks per stage; each block is a W-MSA layer followed by an SW-MSA layer.
    pub blocks_per_stage: usize,
    pub mask_ratio: f64,
    /// Masking window side, in patches.
    pub mask_window: usize,
    pub variant: Variant,
    pub vit_depth: usize,
    pub vit_decoder_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            bands: 4,
            patch_size: 4,
            embed_dim: 16,
            stages: 3,
            heads_per_stage: vec![2, 2, 4],
            window: 2,
            blocks_per_stage: 1,
            mask_ratio: 0.75,
            mask_window: 2,
            variant: Variant::SwinMae,
            vit_depth: 2,
            vit_decoder_depth: 1,
        }
    }
}

impl ModelConfig {
    /// Patches per side of the stage-1 grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size.max(1)
    }

    pub fn token_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.bands
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn stage_grid(&self, stage: usize) -> usize {
        self.grid() >> stage
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        for (name, v) in [
            ("image_size", self.image_size),
            ("bands", self.bands),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if self.patch_size > 0 && !self.image_size.is_multiple_of(self.patch_size) {
            p.push(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            p.push(format!("mask_ratio must lie in [0,1), got {}", self.mask_ratio));
        }
        let grid = self.grid();
        if self.mask_window == 0 || !grid.is_multiple_of(self.mask_window) {
            p.push(format!(
                "token grid {grid} not divisible by mask_window {}",
                self.mask_window
            ));
        }
        match self.variant {
            Variant::SwinMae => self.validate_swin(grid, &mut p),
            Variant::VitMae => {
                if self.vit_depth == 0 || self.vit_decoder_depth == 0 {
                    p.push("vit_depth and vit_decoder_depth must be at least 1".into());
                }
                match self.heads_per_stage.first() {
                    Some(&h) if h > 0 && self.embed_dim.is_multiple_of(h) => {}
                    Some(&h) => p.push(format!(
                        "embed_dim {} not divisible by {h} heads",
                        self.embed_dim
                    )),
                    None => p.push("heads must list at least one head count".into()),
                }
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    fn validate_swin(&self, grid: usize, p: &mut Vec<String>) {
        if self.stages == 0 {
            p.push("stages must be at least 1".into());
            return;
        }
        if self.blocks_per_stage == 0 {
            p.push("blocks_per_stage must be at least 1".into());
        }
        if self.heads_per_stage.len() != self.stages {
            p.push(format!(
                "heads lists {} entries for {} stages",
                self.heads_per_stage.len(),
                self.stages
            ));
        }
        if self.window == 0 {
            p.push("window must be positive".into());
        }
        for s in 0..self.stages {
            let side = grid >> s;
            if s > 0 && !(grid >> (s - 1)).is_multiple_of(2) {
                p.push(format!("stage {s}: grid {} cannot be merged (odd)", grid >> (s - 1)));
                break;
            }
            if self.window > 0 && (side == 0 || !side.is_multiple_of(self.window)) {
                p.push(format!(
                    "stage {s}: token grid {side} not divisible by window {}",
                    self.window
                ));
            }
            if let Some(&h) = self.heads_per_stage.get(s) {
                let dim = self.stage_dim(s);
                if h == 0 || !dim.is_multiple_of(h) {
                    p.push(format!("stage {s}: width {dim} not divisible by {h} heads"));
                }
            }
        }
    }

    /// Parameter count as a closed-form function of the configuration.
    pub fn expected_param_count(&self) -> usize {
        let d = self.embed_dim;
        let n = self.token_count();
        let pd = self.patch_dim();
        let embed = Linear::param_count(pd, d, true);
        let head = Linear::param_count(d, pd, true);
        match self.variant {
            Variant::SwinMae => {
                let layers_per_stage = 2 * self.blocks_per_stage;
                let stage_layers: usize = (0..self.stages)
                    .map(|s| layers_per_stage * TransformerLayer::param_count(self.stage_dim(s)))
                    .sum();
                let merges: usize = (0..self.stages - 1)
                    .map(|s| 2 * self.stage_dim(s) + PatchMerge::param_count(self.stage_dim(s)))
                    .sum();
                let expands: usize = (1..self.stages)
                    .map(|s| PatchExpand::param_count(self.stage_dim(s)) + self.stage_dim(s))
                    .sum();
                let norms = 2 * self.stage_dim(self.stages - 1) + 2 * d;
                embed + n * d + d + 2 * stage_layers + merges + expands + norms + head
            }
            Variant::VitMae => {
                let layer = TransformerLayer::param_count(d);
                embed
                    + 2 * n * d
                    + d
                    + (self.vit_depth + self.vit_decoder_depth) * layer
                    + 4 * d
                    + head
            }
        }
    }

    /// Consumes model keys from a parsed config file.
    pub fn from_kv(kv: &mut KeyValues) -> Self {
        let mut c = ModelConfig::default();
        if let Some(v) = kv.take("image_size") {
            c.image_size = v;
        }
        if let Some(v) = kv.take("bands") {
            c.bands = v;
        }
        if let Some(v) = kv.take("patch_size") {
            c.patch_size = v;
        }
        if let Some(v) = kv.take("embed_dim") {
            c.embed_dim = v;
        }
        if let Some(v) = kv.take("stages") {
            c.stages = v;
        }
        if let Some(v) = kv.take_list("heads") {
            c.heads_per_stage = v;
        }
        if let Some(v) = kv.take("window") {
            c.window = v;
        }
        if let Some(v) = kv.take("blocks_per_stage") {
            c.blocks_per_stage = v;
        }
        if let Some(v) = kv.take("mask_ratio") {
            c.mask_ratio = v;
        }
        if let Some(v) = kv.take("mask_window") {
            c.mask_window = v;
        }
        if let Some(v) = kv.take("variant") {
            c.variant = v;
        }
        if let Some(v) = kv.take("vit_depth") {
            c.vit_depth = v;
        }
        if let Some(v) = kv.take("vit_decoder_depth") {
            c.vit_decoder_depth = v;
        }
        c
    }

    pub fn to_kv_lines(&self) -> Vec<String> {
        let heads: Vec<String> = self.heads_per_stage.iter().map(|h| h.to_string()).collect();
        vec![
            format!("image_size = {}", self.image_size),
            format!("bands = {}", self.bands),
            format!("patch_size = {}", self.patch_size),
            format!("embed_dim = {}", self.embed_dim),
            format!("stages = {}", self.stages),
            format!("heads = {}", heads.join(",")),
            format!("window = {}", self.window),
            format!("blocks_per_stage = {}", self.blocks_per_stage),
            format!("mask_ratio = {}", self.mask_ratio),
            format!("mask_window = {}", self.mask_window),
            format!("variant = {}", self.variant),
            format!("vit_depth = {}", self.vit_depth),
            format!("vit_decoder_depth = {}", self.vit_decoder_depth),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.stage_grid(0), c.stage_grid(1), c.stage_grid(2)), (8, 4, 2));
    }

    #[test]
    fn window_three_rejected() {
        let c = ModelConfig {
            window: 3,
            ..Default::default()
        };
        let Err(Error::Config(p)) = c.validate() else {
            panic!("expected config error")
        };
        assert!(p.iter().any(|m| m.contains("not divisible by window 3")), "{p:?}");
    }

    #[test]
    fn every_violation_listed() {
        let c = ModelConfig {
            image_size: 30,
            mask_ratio: 1.0,
            heads_per_stage: vec![2, 2],
            ..Default::default()
        };
        let Err(Error::Config(p)) = c.validate() else {
            panic!("expected config error")
        };
        assert!(p.len() >= 3, "{p:?}");
    }

    #[test]
    fn kv_roundtrip() {
        let c = ModelConfig {
            embed_dim: 8,
            stages: 2,
            heads_per_stage: vec![2, 2],
            variant: Variant::VitMae,
            ..Default::default()
        };
        let mut kv = KeyValues::parse(&c.to_kv_lines().join("\n")).unwrap();
        let back = ModelConfig::from_kv(&mut kv);
        kv.finish().unwrap();
        assert_eq!(back, c);
    }
}
