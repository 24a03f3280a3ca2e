//! Pretraining and fine-tuning loops.
//!
//! Every random draw (shuffles, masks, augmentation) happens serially on
//! the calling thread. Per-sample gradients may be computed in parallel but
//! are summed in sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::config::{parse_bool, parse_value, Settings};
use crate::edge::{sobel_edge_map, EdgeMap};
use crate::edge_mae::{self, EdgeMaeConfig};
use crate::error::{Error, Result};
use crate::image::{Direction, Image};
use crate::losses::{self, FinetuneLoss};
use crate::mt_net::{self, MtNet, MtNetConfig};
use crate::nn::{add_grads, ParamGrads, ParamStore, Session};
use crate::optim::{step_schedule, Adam};
use crate::patch::{compute_alpha, sample_mask, MaskPlan, Stage};
use crate::phantom::{self, DatasetManifest, Split};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Graph, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub augment: bool,
    pub paired_ratio: f64,
    pub direction: Direction,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 40,
            lr: 3e-4,
            batch: 8,
            augment: true,
            paired_ratio: 1.0,
            direction: Direction::AToB,
            seed: 0,
        }
    }
}

impl Settings for FinetuneConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "paired_ratio" => self.paired_ratio = parse_value(key, v)?,
            "direction" => self.direction = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("augment", self.augment.to_string()),
            ("paired_ratio", self.paired_ratio.to_string()),
            ("direction", self.direction.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 || self.lr <= 0.0 {
            return Err(Error::config("batch, epochs and lr must be positive"));
        }
        if !(self.paired_ratio > 0.0 && self.paired_ratio <= 1.0) {
            return Err(Error::config(format!("paired_ratio {} must lie in (0, 1]", self.paired_ratio)));
        }
        Ok(())
    }
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {threads} worker threads: {e}")))
}

/// Runs `sample` for `0..n` and returns the loss sum and gradient sum,
/// reduced in index order.
fn batch_gradients<F>(pool: &rayon::ThreadPool, n: usize, sample: F) -> (f64, ParamGrads<f32>)
where
    F: Fn(usize) -> (f64, ParamGrads<f32>) + Sync,
{
    let parts: Vec<(f64, ParamGrads<f32>)> = pool.install(|| (0..n).into_par_iter().map(&sample).collect());
    let mut loss = 0.0;
    let mut grads = Vec::new();
    for (l, g) in &parts {
        loss += l;
        add_grads(&mut grads, g);
    }
    (loss, grads)
}

fn scale_grads(grads: &mut ParamGrads<f32>, s: f32) {
    grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
}

/// Loss of one pretraining sample; the image is both input and target.
pub fn pretrain_sample_loss<T: Real>(
    g: &mut Graph<T>,
    s: &mut Session<T>,
    cfg: &EdgeMaeConfig,
    img: &Image,
    edges: &EdgeMap,
    mask: &MaskPlan,
    stage: Stage,
) -> Var {
    let x = edge_mae::image_var(g, img);
    let out = edge_mae::reconstruct(g, s, cfg, x, mask);
    let alpha = compute_alpha(mask);
    edge_mae::pretrain_loss(g, out.imputed, out.edges, img, edges, &alpha, mask, stage, cfg.lambda_imp, cfg.lambda_edge)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Option<Stage>,
    pub lr: f64,
    pub loss: f64,
    pub steps: usize,
}

/// Pretraining state carried across epochs.
pub struct Pretrainer<'a> {
    pub cfg: EdgeMaeConfig,
    pub store: ParamStore<f32>,
    adam: Adam<f32>,
    rng: Rng,
    data: &'a [Image],
    edges: Vec<EdgeMap>,
    pub steps: usize,
}

impl<'a> Pretrainer<'a> {
    pub fn new(cfg: &EdgeMaeConfig, data: &'a [Image]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::config("pretraining needs at least one image"));
        }
        if let Some(bad) = data.iter().find(|im| (im.height, im.width) != (cfg.image_size, cfg.image_size)) {
            return Err(Error::config(format!(
                "image {} is {}x{}, config expects {}",
                bad.id, bad.height, bad.width, cfg.image_size
            )));
        }
        let mut master = Rng::new(cfg.seed);
        let store = edge_mae::init_params(cfg, master.next_u64());
        let adam = Adam::new(&store);
        Ok(Pretrainer {
            cfg: cfg.clone(),
            store,
            adam,
            rng: master.fork(),
            data,
            edges: data.iter().map(sobel_edge_map).collect(),
            steps: 0,
        })
    }

    /// One pass over the shuffled data. Returns the mean step loss.
    pub fn epoch(&mut self, epoch: usize, pool: &rayon::ThreadPool) -> Result<EpochLog> {
        let cfg = &self.cfg;
        let stage = cfg.stage_for_epoch(epoch);
        let lr = step_schedule(cfg.lr, epoch, cfg.epochs);
        let grid = cfg.grid();
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch) {
            let masks: Vec<MaskPlan> =
                chunk.iter().map(|_| sample_mask(grid, grid, cfg.mask_ratio, &mut self.rng)).collect::<Result<_>>()?;
            let store = &self.store;
            let (loss, mut grads) = batch_gradients(pool, chunk.len(), |k| {
                let i = chunk[k];
                let mut g = Graph::new();
                let mut s = Session::new(store);
                let loss = pretrain_sample_loss(&mut g, &mut s, cfg, &self.data[i], &self.edges[i], &masks[k], stage);
                let mut back = g.backward(loss);
                (g.scalar(loss) as f64, s.gradients(&mut back))
            });
            let loss = loss / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, step: self.steps, value: loss });
            }
            scale_grads(&mut grads, 1.0 / chunk.len() as f32);
            self.adam.step(&mut self.store, &grads, lr);
            self.steps += 1;
            steps += 1;
            total += loss;
        }
        Ok(EpochLog { epoch, stage: Some(stage), lr, loss: total / steps as f64, steps })
    }

    pub fn run(mut self, pool: &rayon::ThreadPool, mut log: impl FnMut(&EpochLog)) -> Result<ParamStore<f32>> {
        for epoch in 0..self.cfg.epochs {
            let entry = self.epoch(epoch, pool)?;
            log(&entry);
        }
        Ok(self.store)
    }
}

/// Freezes the first `layers` encoder blocks and, when any are frozen,
/// the patch embedding.
pub fn freeze_encoder(store: &mut ParamStore<f32>, layers: usize) {
    store.set_trainable(|n| n.starts_with("enc."), true);
    if layers == 0 {
        return;
    }
    store.set_trainable(|n| n.starts_with("enc.patch."), false);
    for i in 0..layers {
        let prefix = format!("{}.", edge_mae::block_name(i));
        store.set_trainable(|n| n.starts_with(&prefix), false);
    }
}

/// Brightness offset in [-0.1, 0.1] and contrast scale in [0.9, 1.1],
/// applied as `clip(c * x + b)`.
pub fn augment(img: &Image, rng: &mut Rng) -> Image {
    let brightness = rng.uniform_in(-0.1, 0.1) as f32;
    let contrast = rng.uniform_in(0.9, 1.1) as f32;
    let pixels = img.pixels.iter().map(|&p| (contrast * p + brightness).clamp(0.0, 1.0)).collect();
    Image::new(img.height, img.width, pixels, img.modality, img.id)
}

/// Fine-tuning loss of one (source, target) pair.
pub fn finetune_sample_loss<T: Real>(
    g: &mut Graph<T>,
    model: &mut Session<T>,
    frozen: &mut Session<T>,
    net: &MtNet,
    source: &Image,
    target: &Image,
) -> FinetuneLoss {
    let x = edge_mae::image_var(g, source);
    let pred = mt_net::synthesize_var(g, model, net, x);
    let y = edge_mae::image_var(g, target);
    losses::finetune_loss(g, frozen, &net.enc, pred, y)
}

/// Paired (source, target) training images under the configured ratio.
pub fn load_pairs(manifest: &DatasetManifest, cfg: &FinetuneConfig) -> Result<Vec<(Image, Image)>> {
    let split = phantom::split_dataset(manifest, cfg.paired_ratio)?;
    let ids = split.paired_ids(Split::Train);
    if ids.is_empty() {
        return Err(Error::config(format!("no paired training images at paired_ratio {}", cfg.paired_ratio)));
    }
    ids.iter()
        .map(|&id| Ok((split.load_image(id, cfg.direction.source())?, split.load_image(id, cfg.direction.target())?)))
        .collect()
}

/// Fine-tuning state: the synthesizer store (encoder plus MT-Net) and the
/// frozen copy of the pretrained encoder used by the consistency loss.
pub struct Finetuner<'a> {
    pub cfg: FinetuneConfig,
    pub net: MtNet,
    pub store: ParamStore<f32>,
    frozen: ParamStore<f32>,
    adam: Adam<f32>,
    rng: Rng,
    pairs: &'a [(Image, Image)],
    pub steps: usize,
}

impl<'a> Finetuner<'a> {
    pub fn new(
        enc_cfg: &EdgeMaeConfig,
        pretrained: &ParamStore<f32>,
        mt_cfg: &MtNetConfig,
        cfg: &FinetuneConfig,
        pairs: &'a [(Image, Image)],
    ) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::config("fine-tuning needs at least one paired image"));
        }
        let net = MtNet::new(mt_cfg, enc_cfg)?;
        let encoder = pretrained.subset("enc.");
        let mut master = Rng::new(cfg.seed);
        let mut store = encoder.clone();
        net.init(&mut store, &mut master.fork());
        freeze_encoder(&mut store, mt_cfg.frozen_layers(enc_cfg));
        let adam = Adam::new(&store);
        Ok(Finetuner { cfg: cfg.clone(), net, store, frozen: encoder, adam, rng: master.fork(), pairs, steps: 0 })
    }

    pub fn epoch(&mut self, epoch: usize, pool: &rayon::ThreadPool) -> Result<EpochLog> {
        let lr = step_schedule(self.cfg.lr, epoch, self.cfg.epochs);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch) {
            let sources: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    let src = &self.pairs[i].0;
                    if self.cfg.augment {
                        augment(src, &mut self.rng)
                    } else {
                        src.clone()
                    }
                })
                .collect();
            let (store, frozen, net) = (&self.store, &self.frozen, &self.net);
            let (loss, mut grads) = batch_gradients(pool, chunk.len(), |k| {
                let mut g = Graph::new();
                let mut model = Session::new(store);
                let mut fixed = Session::frozen(frozen);
                let loss = finetune_sample_loss(&mut g, &mut model, &mut fixed, net, &sources[k], &self.pairs[chunk[k]].1);
                let mut back = g.backward(loss.total);
                (g.scalar(loss.total) as f64, model.gradients(&mut back))
            });
            let loss = loss / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, step: self.steps, value: loss });
            }
            scale_grads(&mut grads, 1.0 / chunk.len() as f32);
            self.adam.step(&mut self.store, &grads, lr);
            self.steps += 1;
            steps += 1;
            total += loss;
        }
        Ok(EpochLog { epoch, stage: None, lr, loss: total / steps as f64, steps })
    }

    pub fn run(mut self, pool: &rayon::ThreadPool, mut log: impl FnMut(&EpochLog)) -> Result<(MtNet, ParamStore<f32>)> {
        for epoch in 0..self.cfg.epochs {
            let entry = self.epoch(epoch, pool)?;
            log(&entry);
        }
        Ok((self.net, self.store))
    }
}
