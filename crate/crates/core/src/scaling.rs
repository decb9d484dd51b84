//! Adaptive frame scaling.
//!
//! Every frame of a clip shares one token budget `floor(total / frames)`.
//! Short videos get high-resolution frames (resize), medium videos are
//! token-compressed, and anything longer than the long threshold is split
//! into clips that are planned independently.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest patch count considered when searching layouts for a resize target.
const MAX_LAYOUT_PATCHES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConfig {
    pub total_token_budget: usize,
    pub short_threshold: usize,
    pub long_threshold: usize,
    pub patch_size: usize,
    pub fps: f64,
    /// Frame width / height; when set, resize plans carry a target resolution.
    pub aspect_ratio: Option<f64>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            total_token_budget: 16_384,
            short_threshold: 128,
            long_threshold: 1024,
            patch_size: 14,
            fps: 2.0,
            aspect_ratio: None,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.short_threshold == 0 || self.short_threshold >= self.long_threshold {
            return Err(Error::invalid(format!(
                "thresholds must satisfy 0 < short ({}) < long ({})",
                self.short_threshold, self.long_threshold
            )));
        }
        if self.total_token_budget < self.long_threshold {
            return Err(Error::invalid(format!(
                "token budget {} is smaller than the long threshold {}",
                self.total_token_budget, self.long_threshold
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {}", self.fps)));
        }
        if let Some(ar) = self.aspect_ratio {
            if !(ar.is_finite() && ar > 0.0) {
                return Err(Error::invalid(format!("aspect ratio must be positive, got {ar}")));
            }
        }
        Ok(())
    }

    /// Duration in seconds covered by `short_threshold` frames.
    pub fn short_seconds(&self) -> f64 {
        self.short_threshold as f64 / self.fps
    }

    pub fn per_frame_tokens(&self, frames: usize) -> usize {
        self.total_token_budget / frames.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// Resize frames so each yields exactly the budgeted number of patches.
    Resize,
    /// Encode at native resolution, then interpolate tokens down to budget.
    Compress,
    /// Split into clips of `long_threshold` frames; each clip is compressed.
    Partition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub frames: Range<usize>,
    pub mode: ScalingMode,
    pub per_frame_tokens: usize,
}

impl ClipPlan {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.len() * self.per_frame_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub mode: ScalingMode,
    pub per_frame_tokens: usize,
    pub clips: Vec<ClipPlan>,
    pub target_resolution: Option<(usize, usize)>,
}

pub fn plan(n_frames: usize, config: &ScalingConfig) -> Result<ScalingPlan> {
    config.validate()?;
    if n_frames == 0 {
        return Err(Error::invalid("cannot plan an empty video"));
    }

    if n_frames >= config.long_threshold {
        let clips: Vec<ClipPlan> = (0..n_frames)
            .step_by(config.long_threshold)
            .map(|start| {
                let end = (start + config.long_threshold).min(n_frames);
                // A short trailing clip keeps the budget of its own length.
                ClipPlan {
                    frames: start..end,
                    mode: ScalingMode::Compress,
                    per_frame_tokens: config.per_frame_tokens(end - start),
                }
            })
            .collect();
        return Ok(ScalingPlan {
            mode: ScalingMode::Partition,
            per_frame_tokens: config.per_frame_tokens(config.long_threshold),
            clips,
            target_resolution: None,
        });
    }

    let mode = if n_frames < config.short_threshold {
        ScalingMode::Resize
    } else {
        ScalingMode::Compress
    };
    let per_frame_tokens = config.per_frame_tokens(n_frames);
    let target = match (mode, config.aspect_ratio) {
        (ScalingMode::Resize, Some(ar)) => Some(target_resolution(
            per_frame_tokens,
            ar,
            config.patch_size,
        )?),
        _ => None,
    };
    Ok(ScalingPlan {
        mode,
        per_frame_tokens,
        clips: vec![ClipPlan {
            frames: 0..n_frames,
            mode,
            per_frame_tokens,
        }],
        target_resolution: target,
    })
}

/// Pixel resolution `(height, width)` whose `patch x patch` tiling fits the
/// token budget.
///
/// Layouts within a factor of two of the requested aspect ratio are preferred;
/// among them the one with the most patches wins, then the closest aspect.
/// Only when no layout is that close does the search fall back to the
/// largest-area layout overall.
pub fn target_resolution(n_res: usize, aspect_ratio: f64, patch: usize) -> Result<(usize, usize)> {
    if n_res == 0 {
        return Err(Error::invalid("token budget must be at least one patch"));
    }
    if !(aspect_ratio.is_finite() && aspect_ratio > 0.0) {
        return Err(Error::invalid(format!("aspect ratio must be positive, got {aspect_ratio}")));
    }
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let budget = n_res.min(MAX_LAYOUT_PATCHES);
    let target = aspect_ratio.ln();
    let aspect_error = |rows: usize, cols: usize| ((cols as f64 / rows as f64).ln() - target).abs();

    let mut near: Option<(usize, usize)> = None;
    let mut any: Option<(usize, usize)> = None;
    let better = |cand: (usize, usize), cur: Option<(usize, usize)>| match cur {
        None => true,
        Some(cur) => {
            let (ca, ka) = (cand.0 * cand.1, cur.0 * cur.1);
            ca > ka || (ca == ka && aspect_error(cand.0, cand.1) < aspect_error(cur.0, cur.1) - 1e-12)
        }
    };
    for rows in 1..=budget {
        for cols in 1..=budget / rows {
            let cand = (rows, cols);
            if aspect_error(rows, cols) <= std::f64::consts::LN_2 + 1e-12 && better(cand, near) {
                near = Some(cand);
            }
            if better(cand, any) {
                any = Some(cand);
            }
        }
    }
    let (rows, cols) = near.or(any).expect("budget >= 1 always yields a layout");
    Ok((rows * patch, cols * patch))
}
