//! Edge-preserving masked autoencoder: a transformer encoder over visible
//! patches and two decoders (pixel imputation and edge estimation) whose
//! leading blocks are shared.

use std::sync::Arc;

use crate::config::{parse_auto, parse_value, render_auto, Settings};
use crate::edge::EdgeMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, ParamStore, Session};
use crate::patch::{stage_weight, AlphaMap, MaskPlan, Stage};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Graph, Var, Windows};

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMaeConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_shared_layers: usize,
    pub dec_heads: usize,
    pub mask_ratio: f64,
    pub lambda_imp: f64,
    pub lambda_edge: f64,
    pub epochs: usize,
    /// Defaults to `epochs / 2`.
    pub stage_switch_epoch: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EdgeMaeConfig {
    fn default() -> Self {
        EdgeMaeConfig {
            image_size: 64,
            patch_size: 8,
            enc_dim: 64,
            enc_layers: 6,
            enc_heads: 4,
            dec_dim: 32,
            dec_layers: 4,
            dec_shared_layers: 2,
            dec_heads: 4,
            mask_ratio: 0.7,
            lambda_imp: 5.0,
            lambda_edge: 1.0,
            epochs: 60,
            stage_switch_epoch: None,
            lr: 5e-4,
            batch: 16,
            seed: 0,
        }
    }
}

impl EdgeMaeConfig {
    /// Smallest configuration exercising every code path.
    pub fn micro() -> Self {
        EdgeMaeConfig {
            image_size: 16,
            patch_size: 8,
            enc_dim: 8,
            enc_layers: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_layers: 2,
            dec_shared_layers: 1,
            dec_heads: 2,
            mask_ratio: 0.5,
            batch: 2,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn stage_switch(&self) -> usize {
        self.stage_switch_epoch.unwrap_or(self.epochs / 2)
    }

    pub fn stage_for_epoch(&self, epoch: usize) -> Stage {
        if epoch < self.stage_switch() {
            Stage::One
        } else {
            Stage::Two
        }
    }

    /// Keys that determine the encoder tensor layout.
    pub fn encoder_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("enc_dim", self.enc_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("enc_heads", self.enc_heads.to_string()),
        ]
    }
}

impl Settings for EdgeMaeConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse_value(key, v)?,
            "patch_size" => self.patch_size = parse_value(key, v)?,
            "enc_dim" => self.enc_dim = parse_value(key, v)?,
            "enc_layers" => self.enc_layers = parse_value(key, v)?,
            "enc_heads" => self.enc_heads = parse_value(key, v)?,
            "dec_dim" => self.dec_dim = parse_value(key, v)?,
            "dec_layers" => self.dec_layers = parse_value(key, v)?,
            "dec_shared_layers" => self.dec_shared_layers = parse_value(key, v)?,
            "dec_heads" => self.dec_heads = parse_value(key, v)?,
            "mask_ratio" => self.mask_ratio = parse_value(key, v)?,
            "lambda_imp" => self.lambda_imp = parse_value(key, v)?,
            "lambda_edge" => self.lambda_edge = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "stage_switch_epoch" => self.stage_switch_epoch = parse_auto(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.encoder_entries();
        out.extend([
            ("dec_dim", self.dec_dim.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("dec_shared_layers", self.dec_shared_layers.to_string()),
            ("dec_heads", self.dec_heads.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("lambda_imp", self.lambda_imp.to_string()),
            ("lambda_edge", self.lambda_edge.to_string()),
            ("epochs", self.epochs.to_string()),
            ("stage_switch_epoch", render_auto(&self.stage_switch_epoch)),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        out
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.patch_size == 0 || self.image_size < 16 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image_size {} must be >= 16 and divisible by patch_size {}", self.image_size, self.patch_size));
        }
        for (name, dim, heads) in [("enc", self.enc_dim, self.enc_heads), ("dec", self.dec_dim, self.dec_heads)] {
            if heads == 0 || dim % heads != 0 {
                return fail(format!("{name}_dim {dim} is not divisible by {name}_heads {heads}"));
            }
            if dim % 4 != 0 {
                return fail(format!("{name}_dim {dim} must be divisible by 4 for 2-D positions"));
            }
        }
        if self.enc_layers == 0 {
            return fail("enc_layers must be positive".into());
        }
        if self.dec_shared_layers >= self.dec_layers {
            return fail(format!(
                "dec_shared_layers {} must be below dec_layers {}",
                self.dec_shared_layers, self.dec_layers
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail(format!("mask_ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        if self.lambda_imp < 0.0 || self.lambda_edge < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.batch == 0 || self.epochs == 0 || self.lr <= 0.0 {
            return fail("batch, epochs and lr must be positive".into());
        }
        Ok(())
    }
}

pub fn block_name(i: usize) -> String {
    format!("enc.blocks.{i}")
}

/// Encoder tensors: patch embedding, blocks and the final norm.
pub fn init_encoder<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &EdgeMaeConfig) {
    nn::add_linear(store, rng, "enc.patch", cfg.patch_len(), cfg.enc_dim, true);
    for i in 0..cfg.enc_layers {
        nn::add_block(store, rng, &block_name(i), cfg.enc_dim);
    }
    nn::add_norm(store, "enc.norm", cfg.enc_dim);
}

pub fn init_decoders<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &EdgeMaeConfig) {
    store.insert("dec.mask_token", 1, cfg.enc_dim, nn::small_uniform(rng, cfg.enc_dim, 0.02));
    nn::add_linear(store, rng, "dec.embed", cfg.enc_dim, cfg.dec_dim, true);
    for i in 0..cfg.dec_shared_layers {
        nn::add_block(store, rng, &format!("dec.shared.{i}"), cfg.dec_dim);
    }
    for head in [Head::Imputation, Head::Edge] {
        let tag = head.tag();
        for i in 0..cfg.dec_layers - cfg.dec_shared_layers {
            nn::add_block(store, rng, &format!("dec.{tag}.{i}"), cfg.dec_dim);
        }
        nn::add_norm(store, &format!("dec.{tag}.norm"), cfg.dec_dim);
        nn::add_linear(store, rng, &format!("dec.{tag}.head"), cfg.dec_dim, cfg.patch_len(), true);
    }
}

pub fn init_params<T: Real>(cfg: &EdgeMaeConfig, seed: u64) -> ParamStore<T> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    init_encoder(&mut store, &mut rng, cfg);
    init_decoders(&mut store, &mut rng, cfg);
    store
}

/// Encoded tokens for a subset of grid positions.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `[positions.len(), enc_dim]` after the final norm.
    pub tokens: Var,
    /// Grid index of each row of `tokens`.
    pub positions: Vec<usize>,
    /// Output of every encoder block, before the final norm.
    pub layers: Vec<Var>,
}

/// Places an image in the graph as an `[h, w]` constant.
pub fn image_var<T: Real>(g: &mut Graph<T>, img: &Image) -> Var {
    g.constant(img.height, img.width, img.pixels.iter().map(|&p| T::lit(p as f64)).collect())
}

/// Runs the encoder on the patches at `positions` of `img` (an `[h, w]` value).
pub fn encode_positions<T: Real>(
    g: &mut Graph<T>,
    s: &mut Session<T>,
    cfg: &EdgeMaeConfig,
    img: Var,
    positions: &[usize],
) -> TokenBatch {
    let (h, w) = g.shape(img);
    assert_eq!((h, w), (cfg.image_size, cfg.image_size), "image does not match the encoder geometry");
    let n = positions.len();
    let index = nn::patch_index(h, w, cfg.patch_size, positions);
    let patches = g.gather(img, n, cfg.patch_len(), Arc::new(index));
    let x = nn::linear(g, s, "enc.patch", patches, true);
    let pos = g.constant(n, cfg.enc_dim, nn::sincos_rows(cfg.grid(), cfg.grid(), cfg.enc_dim, positions));
    let mut x = g.add(x, pos);
    let windows = Arc::new(Windows::full(n));
    let mut layers = Vec::with_capacity(cfg.enc_layers);
    for i in 0..cfg.enc_layers {
        x = nn::block(g, s, &block_name(i), x, cfg.enc_heads, windows.clone());
        layers.push(x);
    }
    let tokens = nn::norm(g, s, "enc.norm", x);
    TokenBatch { tokens, positions: positions.to_vec(), layers }
}

/// Encodes only the unmasked patches; masked pixels never enter the graph.
pub fn encode_visible<T: Real>(
    g: &mut Graph<T>,
    s: &mut Session<T>,
    cfg: &EdgeMaeConfig,
    img: Var,
    mask: &MaskPlan,
) -> TokenBatch {
    assert_eq!(mask.len(), cfg.num_patches(), "mask grid does not match the patch grid");
    encode_positions(g, s, cfg, img, &mask.visible_indices())
}

/// Encodes every patch.
pub fn encode_full<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, cfg: &EdgeMaeConfig, img: Var) -> TokenBatch {
    let all: Vec<usize> = (0..cfg.num_patches()).collect();
    encode_positions(g, s, cfg, img, &all)
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderTokens {
    /// Full sequence projected to the decoder width, before positions.
    pub projected: Var,
    /// `projected` plus decoder positions.
    pub tokens: Var,
}

/// Scatters encoded tokens to their grid slots and fills the rest with the
/// shared mask token.
pub fn assemble_decoder_tokens<T: Real>(
    g: &mut Graph<T>,
    s: &mut Session<T>,
    cfg: &EdgeMaeConfig,
    encoded: &TokenBatch,
    mask: &MaskPlan,
) -> DecoderTokens {
    let n = mask.len();
    let mut map = vec![(1u32, 0u32); n];
    for (k, &r) in encoded.positions.iter().enumerate() {
        assert!(!mask.is_masked(r), "encoded token at masked position {r}");
        map[r] = (0, k as u32);
    }
    let mask_token = s.p(g, "dec.mask_token");
    let seq = g.gather_rows(&[encoded.tokens, mask_token], Arc::new(map));
    let projected = nn::linear(g, s, "dec.embed", seq, true);
    let all: Vec<usize> = (0..n).collect();
    let pos = g.constant(n, cfg.dec_dim, nn::sincos_rows(cfg.grid(), cfg.grid(), cfg.dec_dim, &all));
    let tokens = g.add(projected, pos);
    DecoderTokens { projected, tokens }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Imputation,
    Edge,
}

impl Head {
    fn tag(self) -> &'static str {
        match self {
            Head::Imputation => "imp",
            Head::Edge => "edge",
        }
    }
}

/// Blocks common to both decoders.
pub fn decode_shared<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, cfg: &EdgeMaeConfig, tokens: Var) -> Var {
    let windows = Arc::new(Windows::full(g.rows(tokens)));
    let mut x = tokens;
    for i in 0..cfg.dec_shared_layers {
        x = nn::block(g, s, &format!("dec.shared.{i}"), x, cfg.dec_heads, windows.clone());
    }
    x
}

/// Task-specific tail: blocks, norm, per-token head, sigmoid, unpatchify.
/// Returns an `[h, w]` value in (0, 1).
pub fn decode_head<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, cfg: &EdgeMaeConfig, shared: Var, head: Head) -> Var {
    let tag = head.tag();
    let windows = Arc::new(Windows::full(g.rows(shared)));
    let mut x = shared;
    for i in 0..cfg.dec_layers - cfg.dec_shared_layers {
        x = nn::block(g, s, &format!("dec.{tag}.{i}"), x, cfg.dec_heads, windows.clone());
    }
    let x = nn::norm(g, s, &format!("dec.{tag}.norm"), x);
    let x = nn::linear(g, s, &format!("dec.{tag}.head"), x, true);
    let x = g.sigmoid(x);
    let size = cfg.image_size;
    let index = nn::unpatch_index(size, size, cfg.patch_size);
    g.gather(x, size, size, Arc::new(index))
}

pub fn decode_imputation<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, cfg: &EdgeMaeConfig, tokens: Var) -> Var {
    let shared = decode_shared(g, s, cfg, tokens);
    decode_head(g, s, cfg, shared, Head::Imputation)
}

pub fn decode_edge<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, cfg: &EdgeMaeConfig, tokens: Var) -> Var {
    let shared = decode_shared(g, s, cfg, tokens);
    decode_head(g, s, cfg, shared, Head::Edge)
}

#[derive(Debug, Clone, Copy)]
pub struct Reconstruction {
    pub imputed: Var,
    pub edges: Var,
}

/// Masked forward pass through encoder and both decoders. The shared
/// blocks run once and feed both heads.
pub fn reconstruct<T: Real>(
    g: &mut Graph<T>,
    s: &mut Session<T>,
    cfg: &EdgeMaeConfig,
    img: Var,
    mask: &MaskPlan,
) -> Reconstruction {
    let encoded = encode_visible(g, s, cfg, img, mask);
    let dec = assemble_decoder_tokens(g, s, cfg, &encoded, mask);
    let shared = decode_shared(g, s, cfg, dec.tokens);
    let imputed = decode_head(g, s, cfg, shared, Head::Imputation);
    let edges = decode_head(g, s, cfg, shared, Head::Edge);
    Reconstruction { imputed, edges }
}

/// Weighted L1 objective: imputation error on masked pixels plus edge
/// error over the whole map, both weighted per patch by the stage rule.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss<T: Real>(
    g: &mut Graph<T>,
    imputed: Var,
    edges: Var,
    target: &Image,
    target_edges: &EdgeMap,
    alpha: &AlphaMap,
    mask: &MaskPlan,
    stage: Stage,
    lambda_imp: f64,
    lambda_edge: f64,
) -> Var {
    let (h, w) = (target.height, target.width);
    assert_eq!(g.shape(imputed), (h, w), "imputed image shape");
    assert_eq!(g.shape(edges), (h, w), "edge map shape");
    assert_eq!((target_edges.height, target_edges.width), (h, w), "target edge shape");
    let p = h / alpha.grid_h;
    assert_eq!((alpha.grid_h * p, alpha.grid_w * p), (h, w), "alpha grid does not tile the image");
    let weights: Vec<f64> = alpha.per_pixel(p).iter().map(|&a| stage_weight(a, stage) as f64).collect();
    let masked: Vec<bool> = (0..h * w).map(|k| mask.is_masked((k / w / p) * alpha.grid_w + (k % w) / p)).collect();
    let n_masked = masked.iter().filter(|&&m| m).count();

    let y = g.constant(h, w, target.pixels.iter().map(|&v| T::lit(v as f64)).collect());
    let diff = g.sub(imputed, y);
    let imp_w: Vec<T> = weights.iter().zip(&masked).map(|(&wt, &m)| if m { T::lit(wt) } else { T::zero() }).collect();
    let imp_scale = if n_masked == 0 { 0.0 } else { lambda_imp / n_masked as f64 };
    let imp = g.weighted_abs_sum(diff, Some(Arc::new(imp_w)), T::lit(imp_scale));

    let sy = g.constant(h, w, target_edges.pixels.iter().map(|&v| T::lit(v as f64)).collect());
    let ediff = g.sub(edges, sy);
    let edge_w: Vec<T> = weights.iter().map(|&wt| T::lit(wt)).collect();
    let edge = g.weighted_abs_sum(ediff, Some(Arc::new(edge_w)), T::lit(lambda_edge / (h * w) as f64));
    g.add(imp, edge)
}

/// Plain mean absolute error over masked pixels, the quantity compared
/// against the mean-fill baseline.
pub fn masked_l1(prediction: &[f32], target: &Image, mask: &MaskPlan, patch_size: usize) -> f64 {
    let (w, gw) = (target.width, mask.grid_w);
    let (mut sum, mut n) = (0.0, 0usize);
    for (k, (&a, &b)) in prediction.iter().zip(&target.pixels).enumerate() {
        if mask.is_masked((k / w / patch_size) * gw + (k % w) / patch_size) {
            sum += (a as f64 - b as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Forward-only imputation with trained weights.
pub fn impute(store: &ParamStore<f32>, cfg: &EdgeMaeConfig, img: &Image, mask: &MaskPlan) -> (Image, Image) {
    let mut g = Graph::new();
    let mut s = Session::frozen(store);
    let x = image_var(&mut g, img);
    let out = reconstruct(&mut g, &mut s, cfg, x, mask);
    let size = cfg.image_size;
    let imputed = Image::new(size, size, g.value(out.imputed).to_vec(), img.modality, img.id);
    let edges = Image::new(size, size, g.value(out.edges).to_vec(), img.modality, img.id);
    (imputed, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::sobel_edge_map;
    use crate::patch::{compute_alpha, sample_mask};
    use crate::phantom::render_base_anatomy;

    fn micro_setup() -> (EdgeMaeConfig, ParamStore<f64>, Image) {
        let cfg = EdgeMaeConfig::micro();
        let store = init_params::<f64>(&cfg, 3);
        let img = render_base_anatomy(11, 16, 8).unwrap();
        (cfg, store, img)
    }

    #[test]
    fn defaults_validate() {
        EdgeMaeConfig::default().validate().unwrap();
        EdgeMaeConfig::micro().validate().unwrap();
        let bad = EdgeMaeConfig { dec_shared_layers: 4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EdgeMaeConfig { enc_heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(EdgeMaeConfig::default().stage_switch(), 30);
    }

    #[test]
    fn visible_token_count_default_geometry() {
        let cfg = EdgeMaeConfig::default();
        let store = init_params::<f32>(&cfg, 0);
        let img = render_base_anatomy(1, 64, 8).unwrap();
        let mask = sample_mask(8, 8, 0.7, &mut Rng::new(5)).unwrap();
        let mut g = Graph::new();
        let mut s = Session::new(&store);
        let x = image_var(&mut g, &img);
        let enc = encode_visible(&mut g, &mut s, &cfg, x, &mask);
        assert_eq!(g.shape(enc.tokens), (20, 64));
        assert_eq!(enc.layers.len(), 6);
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let (cfg, store, img) = micro_setup();
        let run = |positions: &[usize]| {
            let mut g = Graph::new();
            let mut s = Session::new(&store);
            let x = image_var(&mut g, &img);
            let enc = encode_positions(&mut g, &mut s, &cfg, x, positions);
            g.value(enc.tokens).to_vec()
        };
        let d = cfg.enc_dim;
        let a = run(&[0, 2, 3]);
        let b = run(&[3, 0, 2]);
        for (ra, rb) in [(0, 1), (1, 2), (2, 0)] {
            for c in 0..d {
                assert!((a[ra * d + c] - b[rb * d + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_pixels_do_not_reach_encoder() {
        let (cfg, store, img) = micro_setup();
        let mask = MaskPlan::from_bits(2, 2, vec![0, 1, 1, 0]);
        let mut altered = img.clone();
        for k in 0..altered.len() {
            let patch = (k / 16 / 8) * 2 + (k % 16) / 8;
            if mask.is_masked(patch) {
                altered.pixels[k] = 1.0 - altered.pixels[k];
            }
        }
        let run = |im: &Image| {
            let mut g = Graph::new();
            let mut s = Session::new(&store);
            let x = image_var(&mut g, im);
            let enc = encode_visible(&mut g, &mut s, &cfg, x, &mask);
            g.value(enc.tokens).to_vec()
        };
        assert_eq!(run(&img), run(&altered));
    }

    #[test]
    fn mask_tokens_share_embedding() {
        let (cfg, store, img) = micro_setup();
        let mask = MaskPlan::from_bits(2, 2, vec![1, 0, 1, 1]);
        let mut g = Graph::new();
        let mut s = Session::new(&store);
        let x = image_var(&mut g, &img);
        let enc = encode_visible(&mut g, &mut s, &cfg, x, &mask);
        let dec = assemble_decoder_tokens(&mut g, &mut s, &cfg, &enc, &mask);
        assert_eq!(g.shape(dec.tokens), (4, cfg.dec_dim));
        let p = g.value(dec.projected);
        let d = cfg.dec_dim;
        assert_eq!(&p[0..d], &p[2 * d..3 * d]);
        assert_eq!(&p[0..d], &p[3 * d..4 * d]);
        assert_ne!(&p[0..d], &p[d..2 * d]);
    }

    #[test]
    fn decoders_output_image_shape_in_unit_interval() {
        let (cfg, store, img) = micro_setup();
        let mask = MaskPlan::from_bits(2, 2, vec![1, 1, 1, 0]);
        let mut g = Graph::new();
        let mut s = Session::new(&store);
        let x = image_var(&mut g, &img);
        let out = reconstruct(&mut g, &mut s, &cfg, x, &mask);
        for v in [out.imputed, out.edges] {
            assert_eq!(g.shape(v), (16, 16));
            assert!(g.value(v).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    fn mask_token_grad(store: &ParamStore<f64>, cfg: &EdgeMaeConfig, img: &Image, mask: &MaskPlan) -> Option<Vec<f64>> {
        let mut g = Graph::new();
        let mut s = Session::new(store);
        let x = image_var(&mut g, img);
        let enc = encode_visible(&mut g, &mut s, cfg, x, mask);
        let dec = assemble_decoder_tokens(&mut g, &mut s, cfg, &enc, mask);
        let out = decode_imputation(&mut g, &mut s, cfg, dec.tokens);
        let total = g.weighted_abs_sum(out, None, 1.0);
        let mut grads = g.backward(total);
        s.gradients(&mut grads)[store.index_of("dec.mask_token").unwrap()].clone()
    }

    #[test]
    fn mask_token_gradient_needs_a_masked_patch() {
        let (cfg, store, img) = micro_setup();
        let none = MaskPlan::none(2, 2);
        let grad = mask_token_grad(&store, &cfg, &img, &none);
        assert!(grad.is_none_or(|g| g.iter().all(|&v| v == 0.0)));

        let one = MaskPlan::from_bits(2, 2, vec![0, 0, 1, 0]);
        let grad = mask_token_grad(&store, &cfg, &img, &one).unwrap();
        assert!(grad.iter().any(|&v| v.abs() > 1e-8));
        // Finite-difference probe on the first coordinate.
        let eval = |delta: f64| {
            let mut st = store.clone();
            st.get_mut("dec.mask_token").unwrap().data[0] += delta;
            let mut g = Graph::new();
            let mut s = Session::new(&st);
            let x = image_var(&mut g, &img);
            let enc = encode_visible(&mut g, &mut s, &cfg, x, &one);
            let dec = assemble_decoder_tokens(&mut g, &mut s, &cfg, &enc, &one);
            let out = decode_imputation(&mut g, &mut s, &cfg, dec.tokens);
            g.value(out).iter().sum::<f64>()
        };
        let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
        assert!((fd - grad[0]).abs() < 1e-6 * fd.abs().max(1.0));
    }

    fn loss_grads(store: &ParamStore<f64>, cfg: &EdgeMaeConfig, img: &Image, li: f64, le: f64) -> Vec<f64> {
        let mask = MaskPlan::from_bits(2, 2, vec![1, 0, 1, 1]);
        let alpha = compute_alpha(&mask);
        let edges = sobel_edge_map(img);
        let mut g = Graph::new();
        let mut s = Session::new(store);
        let x = image_var(&mut g, img);
        let out = reconstruct(&mut g, &mut s, cfg, x, &mask);
        let loss = pretrain_loss(&mut g, out.imputed, out.edges, img, &edges, &alpha, &mask, Stage::One, li, le);
        let mut grads = g.backward(loss);
        s.gradients(&mut grads)[store.index_of("dec.shared.0.mlp.fc2.w").unwrap()].clone().unwrap()
    }

    #[test]
    fn shared_blocks_sum_gradients_from_both_heads() {
        let (cfg, store, img) = micro_setup();
        let imp = loss_grads(&store, &cfg, &img, 5.0, 0.0);
        let edge = loss_grads(&store, &cfg, &img, 0.0, 1.0);
        let both = loss_grads(&store, &cfg, &img, 5.0, 1.0);
        assert!(imp.iter().any(|v| v.abs() > 1e-10));
        assert!(edge.iter().any(|v| v.abs() > 1e-10));
        for ((a, b), c) in imp.iter().zip(&edge).zip(&both) {
            assert!((a + b - c).abs() < 1e-12 * c.abs().max(1.0));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn const_loss(pred: &[f64], edge_pred: &[f64], target: &Image, edges: &EdgeMap, alpha: &AlphaMap, mask: &MaskPlan, stage: Stage, le: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let a = g.constant(16, 16, pred.to_vec());
        let e = g.constant(16, 16, edge_pred.to_vec());
        let l = pretrain_loss(&mut g, a, e, target, edges, alpha, mask, stage, 5.0, le);
        g.scalar(l)
    }

    #[test]
    fn loss_closed_forms() {
        let target = render_base_anatomy(2, 16, 8).unwrap();
        let edges = sobel_edge_map(&target);
        let y: Vec<f64> = target.pixels.iter().map(|&v| v as f64).collect();
        let s: Vec<f64> = edges.pixels.iter().map(|&v| v as f64).collect();
        let mask = MaskPlan::from_bits(2, 2, vec![1, 0, 0, 1]);
        let alpha = compute_alpha(&mask);
        assert_eq!(const_loss(&y, &s, &target, &edges, &alpha, &mask, Stage::One, 1.0), 0.0);

        // alpha == 0 everywhere, stage 1 weight 2, error e on every pixel.
        let zero_alpha = AlphaMap { grid_h: 2, grid_w: 2, alpha: vec![0.0; 4] };
        let e = 0.05;
        let shifted: Vec<f64> = y.iter().map(|v| v + e).collect();
        let got = const_loss(&shifted, &s, &target, &edges, &zero_alpha, &mask, Stage::One, 1.0);
        assert!((got - 5.0 * 2.0 * e).abs() < 1e-12);
    }

    #[test]
    fn zero_edge_weight_ignores_edge_output() {
        let target = render_base_anatomy(2, 16, 8).unwrap();
        let edges = sobel_edge_map(&target);
        let mask = MaskPlan::from_bits(2, 2, vec![1, 1, 0, 0]);
        let alpha = compute_alpha(&mask);
        let pred = vec![0.3; 256];
        let a = const_loss(&pred, &vec![0.1; 256], &target, &edges, &alpha, &mask, Stage::Two, 0.0);
        let b = const_loss(&pred, &vec![0.9; 256], &target, &edges, &alpha, &mask, Stage::Two, 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn stage_two_penalizes_hard_patches_more() {
        let target = Image::filled(16, 16, 0.5);
        let edges = sobel_edge_map(&target);
        let mask = MaskPlan::from_bits(2, 2, vec![1, 1, 1, 0]);
        let alpha = compute_alpha(&mask);
        // Error grows with the patch's alpha.
        let pred: Vec<f64> = alpha.per_pixel(8).iter().map(|&a| 0.5 + 0.4 * a as f64).collect();
        let s: Vec<f64> = vec![0.0; 256];
        let one = const_loss(&pred, &s, &target, &edges, &alpha, &mask, Stage::One, 1.0);
        let two = const_loss(&pred, &s, &target, &edges, &alpha, &mask, Stage::Two, 1.0);
        assert!(two >= one);
    }

    #[test]
    fn masked_l1_counts_only_masked_pixels() {
        let target = Image::filled(16, 16, 0.5);
        let mask = MaskPlan::from_bits(2, 2, vec![1, 0, 0, 0]);
        let mut pred = vec![0.5f32; 256];
        pred[0] = 0.7;
        pred[255] = 0.0;
        assert!((masked_l1(&pred, &target, &mask, 8) - 0.2 / 64.0).abs() < 1e-7);
    }
}
