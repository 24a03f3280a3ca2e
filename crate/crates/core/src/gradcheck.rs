//! Central finite-difference verification of analytic gradients.
//!
//! Per tensor the reported error is
//! `max |a - n| / max(|a|_inf, |n|_inf, ABS_FLOOR)` over the checked
//! coordinates, so gradients that vanish identically are compared absolutely. Coordinates whose perturbation moves any
//! L1 term across its kink are skipped and counted.

use std::fmt;

use crate::edge::sobel_edge_map;
use crate::edge_mae::{self, EdgeMaeConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mt_net::{MtNet, MtNetConfig};
use crate::nn::{ParamGrads, ParamStore, Session};
use crate::patch::{sample_mask, Stage};
use crate::phantom::render_pair;
use crate::rng::Rng;
use crate::tape::Graph;
use crate::train::{finetune_sample_loss, pretrain_sample_loss};

/// Gradient magnitude below which errors are measured absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub threshold: f64,
    pub seed: u64,
    /// Tensor whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-3, threshold: 1e-4, seed: 0, corrupt: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub loss: String,
    pub tensor: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_error_for(&self, loss: &str) -> f64 {
        self.tensors.iter().filter(|t| t.loss == loss).map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn offenders(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_error.is_nan() || t.max_rel_error > self.threshold)
            .map(|t| format!("{}:{}", t.loss, t.tensor))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.offenders().is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        let bad = self.offenders();
        if bad.is_empty() {
            Ok(self)
        } else {
            Err(Error::GradCheck(bad))
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<10} {:<36} rel_err {:.3e}  checked {:>5}  skipped {:>3}",
                t.loss, t.tensor, t.max_rel_error, t.checked, t.skipped
            )?;
        }
        write!(f, "max relative error {:.3e} (threshold {:.0e})", self.max_error(), self.threshold)
    }
}

/// One loss evaluation: value, kink fingerprint, and gradients if asked.
type Evaluation = (f64, u64, Option<ParamGrads<f64>>);

fn check_loss<F>(label: &str, store: &ParamStore<f64>, opts: &GradCheckOptions, eval: F) -> Vec<TensorReport>
where
    F: Fn(&ParamStore<f64>, bool) -> Evaluation,
{
    let (_, base_print, grads) = eval(store, true);
    let mut grads = grads.expect("gradients requested");
    let mut work = store.clone();
    let mut out = Vec::new();
    for (i, p) in store.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let mut analytic = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; p.len()]);
        if opts.corrupt.as_deref() == Some(p.name.as_str()) {
            let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            analytic[0] += 0.01 * (scale + 1.0);
        }
        let (mut max_diff, mut a_inf, mut n_inf) = (0.0f64, 0.0f64, 0.0f64);
        let (mut checked, mut skipped) = (0, 0);
        for (k, &orig) in p.data.iter().enumerate() {
            work.params_mut()[i].data[k] = orig + opts.step;
            let (plus, print_plus, _) = eval(&work, false);
            work.params_mut()[i].data[k] = orig - opts.step;
            let (minus, print_minus, _) = eval(&work, false);
            work.params_mut()[i].data[k] = orig;
            if print_plus != base_print || print_minus != base_print {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            max_diff = max_diff.max((analytic[k] - numeric).abs());
            a_inf = a_inf.max(analytic[k].abs());
            n_inf = n_inf.max(numeric.abs());
            checked += 1;
        }
        let max_rel_error = max_diff / a_inf.max(n_inf).max(ABS_FLOOR);
        out.push(TensorReport { loss: label.to_string(), tensor: p.name.clone(), max_rel_error, checked, skipped });
    }
    out
}

fn binarize(img: &Image, threshold: f32) -> Image {
    let pixels = img.pixels.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect();
    Image::new(img.height, img.width, pixels, img.modality, img.id)
}

/// Checks the pretraining loss in both stages and the fine-tuning loss at
/// micro scale. Targets are binarized so L1 residuals stay clear of zero.
pub fn grad_check_micro(opts: &GradCheckOptions) -> GradCheckReport {
    let cfg = EdgeMaeConfig::micro();
    let (a, b) = render_pair(opts.seed, 0, cfg.image_size, cfg.patch_size).expect("micro geometry is valid");
    let target = binarize(&a, 0.5);
    let mut edges = sobel_edge_map(&target);
    edges.pixels.iter_mut().for_each(|v| *v = if *v > 0.1 { 1.0 } else { 0.0 });
    let mask = sample_mask(cfg.grid(), cfg.grid(), cfg.mask_ratio, &mut Rng::new(opts.seed)).expect("ratio in range");
    let store = edge_mae::init_params::<f64>(&cfg, opts.seed);

    let mut tensors = Vec::new();
    for (label, stage) in [("stage1", Stage::One), ("stage2", Stage::Two)] {
        tensors.extend(check_loss(label, &store, opts, |st, want| {
            let mut g = Graph::new();
            let mut s = Session::new(st);
            let loss = pretrain_sample_loss(&mut g, &mut s, &cfg, &target, &edges, &mask, stage);
            let grads = want.then(|| s.gradients(&mut g.backward(loss)));
            (g.scalar(loss), g.kink_fingerprint(), grads)
        }));
    }

    let mt_cfg = MtNetConfig::micro();
    let net = MtNet::new(&mt_cfg, &cfg).expect("micro geometry is valid");
    let frozen = store.subset("enc.");
    let mut model = frozen.clone();
    net.init(&mut model, &mut Rng::new(opts.seed ^ 1));
    let synth_target = binarize(&b, 0.5);
    tensors.extend(check_loss("finetune", &model, opts, |st, want| {
        let mut g = Graph::new();
        let mut s = Session::new(st);
        let mut fixed = Session::frozen(&frozen);
        let loss = finetune_sample_loss(&mut g, &mut s, &mut fixed, &net, &a, &synth_target).total;
        let grads = want.then(|| s.gradients(&mut g.backward(loss)));
        (g.scalar(loss), g.kink_fingerprint(), grads)
    }));
    GradCheckReport { tensors, threshold: opts.threshold }
}
