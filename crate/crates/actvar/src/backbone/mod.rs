//! Toy next-scale autoregressive transformer backbone.
//!
//! A stack of pre-norm attention+FFN blocks predicts per-scale token maps in
//! parallel: scale i's logits are a function of the class embedding and the
//! (upsampled) token maps of scales < i only. The same backbone serves as the
//! dense teacher and as the host for expert routing and token gating.

pub mod attention;
pub mod block;
pub mod model;

pub use attention::{AttentionParams, KvCache};
pub use block::{Block, FfnParams, LayerNormParams, ScaleDetail, SegmentOutcome};
pub use model::{activation_count, ActivationPolicy, BlockTrace, ForwardTrace, VarModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered per-scale side lengths and token counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    sides: Vec<usize>,
    token_counts: Vec<usize>,
    offsets: Vec<usize>,
    total_length: usize,
}

/// Builds a schedule from strictly increasing side lengths.
pub fn build_schedule(sides: &[usize]) -> Result<ScaleSchedule> {
    if sides.is_empty() {
        return Err(Error::Argument("schedule needs at least one scale".into()));
    }
    if sides[0] < 1 {
        return Err(Error::Argument("scale sides must be >= 1".into()));
    }
    for w in sides.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Argument(format!(
                "scale sides must be strictly increasing, got {} after {}",
                w[1], w[0]
            )));
        }
    }
    let token_counts: Vec<usize> = sides.iter().map(|s| s * s).collect();
    let mut offsets = Vec::with_capacity(sides.len());
    let mut total = 0;
    for &c in &token_counts {
        offsets.push(total);
        total += c;
    }
    Ok(ScaleSchedule {
        sides: sides.to_vec(),
        token_counts,
        offsets,
        total_length: total,
    })
}

impl ScaleSchedule {
    pub fn num_scales(&self) -> usize {
        self.sides.len()
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn side(&self, scale: usize) -> usize {
        self.sides[scale]
    }

    pub fn token_counts(&self) -> &[usize] {
        &self.token_counts
    }

    pub fn token_count(&self, scale: usize) -> usize {
        self.token_counts[scale]
    }

    /// Start position of a scale's tokens in the flattened sequence.
    pub fn offset(&self, scale: usize) -> usize {
        self.offsets[scale]
    }

    pub fn total_length(&self) -> usize {
        self.total_length
    }

    /// Scale index for every position of the flattened sequence.
    pub fn scale_of_positions(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.total_length);
        for (i, &c) in self.token_counts.iter().enumerate() {
            v.extend(std::iter::repeat_n(i, c));
        }
        v
    }
}

/// Integer token grid for one scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    pub scale_index: usize,
    pub side: usize,
    pub tokens: Vec<u32>,
}

impl TokenMap {
    pub fn new(scale_index: usize, side: usize, tokens: Vec<u32>) -> Result<TokenMap> {
        if tokens.len() != side * side {
            return Err(Error::Dimension(format!(
                "token map for side {side} needs {} tokens, got {}",
                side * side,
                tokens.len()
            )));
        }
        Ok(TokenMap {
            scale_index,
            side,
            tokens,
        })
    }

    pub fn validate(&self, schedule: &ScaleSchedule, vocab: usize) -> Result<()> {
        if self.scale_index >= schedule.num_scales()
            || self.side != schedule.side(self.scale_index)
        {
            return Err(Error::Dimension(format!(
                "token map side {} does not match schedule scale {}",
                self.side, self.scale_index
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Argument(format!("token {t} out of vocabulary {vocab}")));
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }
}

/// Backbone hyperparameters. The JSON form uses exactly these key names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub classes: usize,
    pub sides: Vec<usize>,
}

impl BackboneConfig {
    /// Toy default: small enough that full runs finish in minutes.
    pub fn toy(sides: &[usize]) -> BackboneConfig {
        BackboneConfig {
            depth: 4,
            hidden: 64,
            heads: 4,
            ffn_hidden: 128,
            vocab: 64,
            classes: 8,
            sides: sides.to_vec(),
        }
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        build_schedule(&self.sides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.depth == 0 || self.vocab == 0 || self.classes == 0 {
            return Err(Error::Config("config dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<BackboneConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: BackboneConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule_has_680_tokens() {
        let s = build_schedule(&[1, 2, 3, 4, 5, 6, 8, 10, 13, 16]).unwrap();
        assert_eq!(s.total_length(), 680);
        assert_eq!(s.num_scales(), 10);
    }

    #[test]
    fn tiny_schedules() {
        assert_eq!(build_schedule(&[1]).unwrap().total_length(), 1);
        let s = build_schedule(&[1, 2, 4]).unwrap();
        assert_eq!(s.token_counts(), &[1, 4, 16]);
        assert_eq!(s.total_length(), 21);
        assert_eq!(s.offset(2), 5);
    }

    #[test]
    fn non_increasing_sides_rejected() {
        assert!(build_schedule(&[1, 2, 2]).is_err());
        assert!(build_schedule(&[3, 2]).is_err());
        assert!(build_schedule(&[]).is_err());
        assert!(build_schedule(&[0, 1]).is_err());
    }

    #[test]
    fn token_map_validation() {
        let s = build_schedule(&[1, 2]).unwrap();
        let m = TokenMap::new(1, 2, vec![0, 1, 2, 3]).unwrap();
        assert!(m.validate(&s, 4).is_ok());
        assert!(m.validate(&s, 3).is_err());
        assert!(TokenMap::new(1, 2, vec![0, 1]).is_err());
    }
}
