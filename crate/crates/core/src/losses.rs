//! Fine-tuning objective: pixel L1 plus feature consistency through the
//! frozen pretrained encoder.

use crate::edge_mae::{self, EdgeMaeConfig};
use crate::nn::Session;
use crate::real::Real;
use crate::tape::{Graph, Var};

/// Mean absolute pixel difference.
pub fn pixel_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Var {
    assert_eq!(g.shape(pred), g.shape(target), "pixel loss shape mismatch");
    g.mean_abs_diff(pred, target)
}

/// Sum over encoder blocks of the mean absolute difference between the
/// block outputs for `pred` and `target`. `frozen` must bind the encoder
/// as constants.
pub fn feature_consistency_loss<T: Real>(
    g: &mut Graph<T>,
    frozen: &mut Session<T>,
    cfg: &EdgeMaeConfig,
    pred: Var,
    target: Var,
) -> Var {
    let a = edge_mae::encode_full(g, frozen, cfg, pred).layers;
    let b = edge_mae::encode_full(g, frozen, cfg, target).layers;
    let terms: Vec<Var> = a.iter().zip(&b).map(|(&x, &y)| g.mean_abs_diff(x, y)).collect();
    let ones: Vec<(Var, T)> = terms.iter().map(|&t| (t, T::one())).collect();
    g.lincomb(&ones)
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneLoss {
    pub total: Var,
    pub pixel: Var,
    pub feature: Var,
}

pub fn finetune_loss<T: Real>(
    g: &mut Graph<T>,
    frozen: &mut Session<T>,
    cfg: &EdgeMaeConfig,
    pred: Var,
    target: Var,
) -> FinetuneLoss {
    let pixel = pixel_loss(g, pred, target);
    let feature = feature_consistency_loss(g, frozen, cfg, pred, target);
    let total = g.add(pixel, feature);
    FinetuneLoss { total, pixel, feature }
}
