//! Patch partitioning, random patch masks and difficulty weights.

use crate::error::{Error, Result};
use crate::image::{Image, Modality};
use crate::rng::Rng;

/// One flattened patch per row, patches in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub tokens: Vec<f32>,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn token(&self, r: usize) -> &[f32] {
        let len = self.token_len();
        &self.tokens[r * len..(r + 1) * len]
    }
}

/// Maps pixel `(i, j)` to its flat index in the patch-major token layout.
pub fn token_index(i: usize, j: usize, width: usize, p: usize) -> usize {
    let grid_w = width / p;
    let patch = (i / p) * grid_w + j / p;
    patch * p * p + (i % p) * p + (j % p)
}

pub fn patchify(img: &Image, p: usize) -> Result<PatchGrid> {
    if p == 0 || !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(Error::config(format!(
            "{}x{} image is not divisible into {p}x{p} patches",
            img.height, img.width
        )));
    }
    let mut tokens = vec![0.0; img.len()];
    for i in 0..img.height {
        for j in 0..img.width {
            tokens[token_index(i, j, img.width, p)] = img.get(i, j);
        }
    }
    Ok(PatchGrid { grid_h: img.height / p, grid_w: img.width / p, patch_size: p, tokens })
}

pub fn unpatchify(grid: &PatchGrid) -> Image {
    let p = grid.patch_size;
    let (h, w) = (grid.grid_h * p, grid.grid_w * p);
    Image::new(
        h,
        w,
        (0..h * w).map(|k| grid.tokens[token_index(k / w, k % w, w, p)]).collect(),
        Modality::A,
        0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    /// 1 = masked, row-major.
    pub mask: Vec<u8>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn from_bits(grid_h: usize, grid_w: usize, mask: Vec<u8>) -> Self {
        assert_eq!(mask.len(), grid_h * grid_w);
        assert!(mask.iter().all(|&m| m <= 1));
        let ratio = mask.iter().filter(|&&m| m == 1).count() as f64 / mask.len() as f64;
        MaskPlan { grid_h, grid_w, mask, ratio }
    }

    /// A plan with nothing masked, used for full-sequence encoding.
    pub fn none(grid_h: usize, grid_w: usize) -> Self {
        MaskPlan { grid_h, grid_w, mask: vec![0; grid_h * grid_w], ratio: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn is_masked(&self, r: usize) -> bool {
        self.mask[r] == 1
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| !self.is_masked(r)).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.is_masked(r)).collect()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&m| m as f32).collect()
    }
}

pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Masks exactly `floor(ratio * n)` patches by partial Fisher-Yates.
pub fn sample_mask(grid_h: usize, grid_w: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    let n = grid_h * grid_w;
    let m = masked_count(n, ratio);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        order.swap(i, j);
    }
    let mut mask = vec![0u8; n];
    for &r in &order[..m] {
        mask[r] = 1;
    }
    Ok(MaskPlan { grid_h, grid_w, mask, ratio })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub alpha: Vec<f32>,
}

impl AlphaMap {
    pub fn at(&self, r: usize) -> f32 {
        self.alpha[r]
    }

    /// Broadcasts patch weights to pixels; every pixel of a patch shares it.
    pub fn per_pixel(&self, p: usize) -> Vec<f32> {
        let (h, w) = (self.grid_h * p, self.grid_w * p);
        (0..h * w).map(|k| self.alpha[(k / w / p) * self.grid_w + (k % w) / p]).collect()
    }
}

/// 3x3 stride-1 average pool over the mask, dividing by the number of
/// in-bounds neighbours.
pub fn compute_alpha(mask: &MaskPlan) -> AlphaMap {
    let (gh, gw) = (mask.grid_h, mask.grid_w);
    let mut alpha = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let (mut sum, mut count) = (0u32, 0u32);
            for ii in i.saturating_sub(1)..=(i + 1).min(gh - 1) {
                for jj in j.saturating_sub(1)..=(j + 1).min(gw - 1) {
                    sum += mask.mask[ii * gw + jj] as u32;
                    count += 1;
                }
            }
            alpha.push(sum as f32 / count as f32);
        }
    }
    AlphaMap { grid_h: gh, grid_w: gw, alpha }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Easy patches first: weight `2 - alpha`.
    One,
    /// Hard patches: weight `1 + alpha`.
    Two,
}

impl Stage {
    pub fn from_index(stage: u32) -> Result<Stage> {
        match stage {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::config(format!("stage must be 1 or 2, got {stage}"))),
        }
    }
}

pub fn stage_weight(alpha: f32, stage: Stage) -> f32 {
    assert!((0.0..=1.0).contains(&alpha), "alpha {alpha} outside [0, 1]");
    match stage {
        Stage::One => 2.0 - alpha,
        Stage::Two => 1.0 + alpha,
    }
}
