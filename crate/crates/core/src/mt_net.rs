//! Multi-scale synthesis network: a dual-scale pyramid from the pretrained
//! encoder, two shifted-window branches with patch merging, and a decoder
//! fusing skips of both branches through dual-scale selective fusion.

use std::sync::Arc;

use crate::config::{parse_auto, parse_value, render_auto, Settings};
use crate::edge_mae::{self, EdgeMaeConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, ParamStore, Session};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Graph, RowMixing, Var, Windows};

#[derive(Debug, Clone, PartialEq)]
pub struct MtNetConfig {
    pub base_channels: usize,
    /// Stages of the small branch; the large branch has one more.
    pub small_stages: usize,
    pub window: usize,
    pub head_dim: usize,
    /// Leading encoder blocks kept frozen; defaults to half the encoder.
    pub freeze_layers: Option<usize>,
}

impl Default for MtNetConfig {
    fn default() -> Self {
        MtNetConfig { base_channels: 32, small_stages: 3, window: 4, head_dim: 16, freeze_layers: None }
    }
}

impl MtNetConfig {
    pub fn micro() -> Self {
        MtNetConfig { base_channels: 8, small_stages: 1, window: 4, head_dim: 16, freeze_layers: Some(0) }
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn heads(&self, channels: usize) -> usize {
        (channels / self.head_dim).max(1)
    }

    pub fn frozen_layers(&self, enc: &EdgeMaeConfig) -> usize {
        self.freeze_layers.unwrap_or(enc.enc_layers / 2)
    }

    pub fn check(&self, enc: &EdgeMaeConfig) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.base_channels == 0 || self.small_stages == 0 || self.window == 0 || self.head_dim == 0 {
            return fail("base_channels, small_stages, window and head_dim must be positive".into());
        }
        let grid = enc.grid();
        if !grid.is_multiple_of(1 << (self.small_stages - 1)) {
            return fail(format!("{grid}x{grid} token grid cannot be halved {} times", self.small_stages - 1));
        }
        if !enc.patch_size.is_multiple_of(2) {
            return fail(format!("patch_size {} must be even", enc.patch_size));
        }
        for stage in 0..=self.small_stages {
            let c = self.channels(stage);
            if !c.is_multiple_of(self.heads(c)) {
                return fail(format!("{c} channels are not divisible into heads of {}", self.head_dim));
            }
            let g = (2 * grid) >> stage;
            nn::window_partition(g, g, self.window, false)?;
        }
        let k = self.frozen_layers(enc);
        if k > enc.enc_layers {
            return fail(format!("freeze_layers {k} exceeds enc_layers {}", enc.enc_layers));
        }
        Ok(())
    }
}

impl Settings for MtNetConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "base_channels" => self.base_channels = parse_value(key, v)?,
            "small_stages" => self.small_stages = parse_value(key, v)?,
            "window" => self.window = parse_value(key, v)?,
            "head_dim" => self.head_dim = parse_value(key, v)?,
            "freeze_layers" => self.freeze_layers = parse_auto(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("base_channels", self.base_channels.to_string()),
            ("small_stages", self.small_stages.to_string()),
            ("window", self.window.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("freeze_layers", render_auto(&self.freeze_layers)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Small,
    Large,
}

impl Branch {
    fn tag(self) -> &'static str {
        match self {
            Branch::Small => "small",
            Branch::Large => "large",
        }
    }
}

pub fn init_params<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &MtNetConfig, enc: &EdgeMaeConfig) {
    let s = cfg.small_stages;
    let grid = enc.grid();
    for (branch, stages, g) in [(Branch::Small, s, grid), (Branch::Large, s + 1, 2 * grid)] {
        let tag = branch.tag();
        nn::add_linear(store, rng, &format!("mt.{tag}.proj"), enc.enc_dim, cfg.base_channels, true);
        store.insert(format!("mt.{tag}.pos"), g * g, cfg.base_channels, nn::small_uniform(rng, g * g * cfg.base_channels, 0.02));
        for i in 0..stages {
            let c = cfg.channels(i);
            for l in 0..2 {
                nn::add_block(store, rng, &format!("mt.{tag}.{i}.layer{l}"), c);
            }
            if i + 1 < stages {
                nn::add_linear(store, rng, &format!("mt.{tag}.{i}.merge"), 4 * c, 2 * c, false);
            }
        }
    }
    for l in (0..s).rev() {
        let c = cfg.channels(l);
        nn::add_linear(store, rng, &format!("mt.dec.{l}.expand"), 2 * c, 4 * c, false);
        nn::add_linear(store, rng, &format!("mt.dec.{l}.dsf.up"), c, 4 * c, false);
        store.insert(format!("mt.dec.{l}.dsf.up.b"), 1, c, vec![T::zero(); c]);
        nn::add_linear(store, rng, &format!("mt.dec.{l}.dsf.att_l"), 2 * c, 1, true);
        nn::add_linear(store, rng, &format!("mt.dec.{l}.dsf.att_s"), 2 * c, 1, true);
        nn::add_linear(store, rng, &format!("mt.dec.{l}.fuse"), 2 * c, c, true);
        for k in 0..2 {
            nn::add_block(store, rng, &format!("mt.dec.{l}.layer{k}"), c);
        }
    }
    let c0 = cfg.base_channels;
    let f = enc.patch_size / 2;
    nn::add_norm(store, "mt.final.norm", c0);
    nn::add_linear(store, rng, "mt.final.expand", c0, f * f * c0, false);
    nn::add_linear(store, rng, "mt.head", c0, 1, true);
}

/// Closed-form size of the tensors created by [`init_params`].
pub fn param_count(cfg: &MtNetConfig, enc: &EdgeMaeConfig) -> usize {
    let s = cfg.small_stages;
    let grid = enc.grid();
    let c0 = cfg.base_channels;
    let mut total = 0;
    for (stages, g) in [(s, grid), (s + 1, 2 * grid)] {
        total += enc.enc_dim * c0 + c0 + g * g * c0;
        for i in 0..stages {
            let c = cfg.channels(i);
            total += 2 * nn::block_param_count(c);
            if i + 1 < stages {
                total += 8 * c * c;
            }
        }
    }
    for l in 0..s {
        let c = cfg.channels(l);
        total += 8 * c * c + 4 * c * c + c + 2 * (2 * c + 1) + 2 * c * c + c + 2 * nn::block_param_count(c);
    }
    let f = enc.patch_size / 2;
    total + 2 * c0 + f * f * c0 * c0 + c0 + 1
}

/// Index tables shared by every forward pass of one geometry.
#[derive(Debug, Clone)]
pub struct MtNet {
    pub cfg: MtNetConfig,
    pub enc: EdgeMaeConfig,
    upsample: Arc<RowMixing<f64>>,
    /// Per large-branch stage: (plain windows, shifted windows).
    windows: Vec<(Arc<Windows>, Arc<Windows>)>,
    /// Per branch and stage merge tables.
    merges: [Vec<Arc<Vec<u32>>>; 2],
    expands: Vec<Arc<Vec<u32>>>,
    final_expand: Arc<Vec<u32>>,
}

impl MtNet {
    pub fn new(cfg: &MtNetConfig, enc: &EdgeMaeConfig) -> Result<Self> {
        cfg.check(enc)?;
        let grid = enc.grid();
        let mut windows = Vec::new();
        let mut merges = [Vec::new(), Vec::new()];
        let mut expands = Vec::new();
        for i in 0..=cfg.small_stages {
            let g = (2 * grid) >> i;
            let c = cfg.channels(i);
            windows.push((
                Arc::new(nn::window_partition(g, g, cfg.window, false)?),
                Arc::new(nn::window_partition(g, g, cfg.window, true)?),
            ));
            merges[1].push(Arc::new(nn::merge_index(g, g, c)));
            if i < cfg.small_stages {
                merges[0].push(Arc::new(nn::merge_index(g / 2, g / 2, c)));
            }
            // Doubles grid g/2 into g at c channels.
            expands.push(Arc::new(nn::expand_index(g / 2, g / 2, 2, c)));
        }
        let f = enc.patch_size / 2;
        let big = 2 * grid;
        Ok(MtNet {
            cfg: cfg.clone(),
            enc: enc.clone(),
            upsample: Arc::new(nn::bilinear_x2(grid, grid)),
            windows,
            merges,
            expands,
            final_expand: Arc::new(nn::expand_index(big, big, f, cfg.base_channels)),
        })
    }

    /// Grid side of stage `i` in the given branch.
    pub fn grid(&self, branch: Branch, i: usize) -> usize {
        match branch {
            Branch::Small => self.enc.grid() >> i,
            Branch::Large => (2 * self.enc.grid()) >> i,
        }
    }

    /// Windows for a grid of side `g` (every grid used is a large-branch stage).
    fn windows_for(&self, g: usize, shifted: bool) -> Arc<Windows> {
        let w = &self.windows[(2 * self.enc.grid() / g).trailing_zeros() as usize];
        if shifted {
            w.1.clone()
        } else {
            w.0.clone()
        }
    }

    fn upsample<T: Real>(&self) -> Arc<RowMixing<T>> {
        let taps = self.upsample.taps.iter().map(|t| t.iter().map(|&(j, w)| (j, T::lit(w))).collect()).collect();
        Arc::new(RowMixing { taps, affine: self.upsample.affine })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        init_params(store, rng, &self.cfg, &self.enc);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    /// `[g*g, enc_dim]`
    pub small: Var,
    /// `[4*g*g, enc_dim]`
    pub large: Var,
}

/// Full-sequence encoding followed by half-pixel bilinear x2 upsampling.
pub fn build_feature_pyramid<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, net: &MtNet, img: Var) -> FeaturePyramid {
    let tokens = edge_mae::encode_full(g, s, &net.enc, img).tokens;
    let large = g.row_mix(tokens, net.upsample());
    FeaturePyramid { small: tokens, large }
}

/// Two window-attention layers, the second shifted.
fn swin_pair<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, net: &MtNet, prefix: &str, x: Var, side: usize) -> Var {
    let heads = net.cfg.heads(g.cols(x));
    let x = nn::block(g, s, &format!("{prefix}.layer0"), x, heads, net.windows_for(side, false));
    nn::block(g, s, &format!("{prefix}.layer1"), x, heads, net.windows_for(side, true))
}

#[derive(Debug, Clone)]
pub struct BranchFeatures {
    /// Stage outputs before merging; the last entry is the branch output.
    pub small: Vec<Var>,
    pub large: Vec<Var>,
}

impl BranchFeatures {
    pub fn bottleneck(&self) -> Var {
        *self.large.last().unwrap()
    }
}

fn run_branch<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, net: &MtNet, branch: Branch, input: Var) -> Vec<Var> {
    let tag = branch.tag();
    let stages = match branch {
        Branch::Small => net.cfg.small_stages,
        Branch::Large => net.cfg.small_stages + 1,
    };
    let x = nn::linear(g, s, &format!("mt.{tag}.proj"), input, true);
    let pos = s.p(g, &format!("mt.{tag}.pos"));
    let mut x = g.add(x, pos);
    let mut outputs = Vec::with_capacity(stages);
    for i in 0..stages {
        let side = net.grid(branch, i);
        x = swin_pair(g, s, net, &format!("mt.{tag}.{i}"), x, side);
        outputs.push(x);
        if i + 1 < stages {
            let c = g.cols(x);
            let merged = g.gather(x, side * side / 4, 4 * c, net.merges[branch as usize][i].clone());
            x = nn::linear(g, s, &format!("mt.{tag}.{i}.merge"), merged, false);
        }
    }
    outputs
}

pub fn encode_branches<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, net: &MtNet, pyr: &FeaturePyramid) -> BranchFeatures {
    let small = run_branch(g, s, net, Branch::Small, pyr.small);
    let large = run_branch(g, s, net, Branch::Large, pyr.large);
    BranchFeatures { small, large }
}

/// Per-channel softmax over the two pooled descriptors: returns `(a, b)`
/// with `a + b = 1`, each `[1, c]`.
pub fn channel_softmax<T: Real>(g: &mut Graph<T>, pooled_l: Var, pooled_s: Var) -> (Var, Var) {
    let c = g.cols(pooled_l);
    assert_eq!(g.shape(pooled_s), (1, c));
    let stacked = g.concat_cols(&[pooled_l, pooled_s]);
    let pairs: Vec<u32> = (0..c).flat_map(|k| [k as u32, (c + k) as u32]).collect();
    let pairs = g.gather(stacked, c, 2, Arc::new(pairs));
    let weights = g.softmax_rows(pairs);
    let a = g.gather(weights, 1, c, Arc::new((0..c).map(|k| 2 * k as u32).collect()));
    let b = g.gather(weights, 1, c, Arc::new((0..c).map(|k| 2 * k as u32 + 1).collect()));
    (a, b)
}

#[derive(Debug, Clone, Copy)]
pub struct DsfOutput {
    pub fused: Var,
    /// Spatial maps `[h*w, 1]` for the large and upsampled small features.
    pub mask_l: Var,
    pub mask_s: Var,
    /// Channel weights `[1, c]`.
    pub a: Var,
    pub b: Var,
}

/// Dual-scale selective fusion of a large-scale skip `f_l` (`[h*w, c]`), a
/// small-scale skip `f_s` (`[h*w/4, c]`) and decoder features `f_d`.
pub fn dsf_fuse<T: Real>(
    g: &mut Graph<T>,
    s: &mut Session<T>,
    prefix: &str,
    f_l: Var,
    f_s: Var,
    f_d: Var,
    side: usize,
) -> DsfOutput {
    let (n, c) = g.shape(f_l);
    assert_eq!(n, side * side, "large feature does not match grid {side}");
    assert_eq!(g.shape(f_d), (n, c), "decoder feature shape");
    assert_eq!(g.shape(f_s), (n / 4, c), "small feature must be half resolution");
    // 2x2 stride-2 transposed convolution.
    let up = nn::linear(g, s, &format!("{prefix}.up"), f_s, false);
    let up = g.gather(up, n, c, Arc::new(nn::expand_index(side / 2, side / 2, 2, c)));
    let up_b = s.p(g, &format!("{prefix}.up.b"));
    let f_s_up = g.add_row(up, up_b);

    let cat_l = g.concat_cols(&[f_d, f_l]);
    let mask_l = nn::linear(g, s, &format!("{prefix}.att_l"), cat_l, true);
    let mask_l = g.sigmoid(mask_l);
    let cat_s = g.concat_cols(&[f_d, f_s_up]);
    let mask_s = nn::linear(g, s, &format!("{prefix}.att_s"), cat_s, true);
    let mask_s = g.sigmoid(mask_s);
    let att_l = g.mul_col(f_l, mask_l);
    let att_s = g.mul_col(f_s_up, mask_s);

    let pooled_l = g.mean_rows(att_l);
    let pooled_s = g.mean_rows(att_s);
    let (a, b) = channel_softmax(g, pooled_l, pooled_s);
    let wl = g.mul_row(att_l, a);
    let ws = g.mul_row(att_s, b);
    let fused = g.add(wl, ws);
    DsfOutput { fused, mask_l, mask_s, a, b }
}

/// Decoder from the large-branch bottleneck to an `[h, w]` image in (0, 1).
pub fn decode_synthesis<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, net: &MtNet, feats: &BranchFeatures) -> Var {
    let mut x = feats.bottleneck();
    for l in (0..net.cfg.small_stages).rev() {
        let side = net.grid(Branch::Large, l);
        let c = net.cfg.channels(l);
        let prefix = format!("mt.dec.{l}");
        let e = nn::linear(g, s, &format!("{prefix}.expand"), x, false);
        let f_d = g.gather(e, side * side, c, net.expands[l].clone());
        let dsf = dsf_fuse(g, s, &format!("{prefix}.dsf"), feats.large[l], feats.small[l], f_d, side);
        let cat = g.concat_cols(&[dsf.fused, f_d]);
        let h = nn::linear(g, s, &format!("{prefix}.fuse"), cat, true);
        x = swin_pair(g, s, net, &prefix, h, side);
    }
    let x = nn::norm(g, s, "mt.final.norm", x);
    let x = nn::linear(g, s, "mt.final.expand", x, false);
    let size = net.enc.image_size;
    let x = g.gather(x, size * size, net.cfg.base_channels, net.final_expand.clone());
    let x = nn::linear(g, s, "mt.head", x, true);
    let x = g.sigmoid(x);
    g.gather(x, size, size, Arc::new((0..(size * size) as u32).collect()))
}

/// Source image value to synthesized target value.
pub fn synthesize_var<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, net: &MtNet, img: Var) -> Var {
    let pyr = build_feature_pyramid(g, s, net, img);
    let feats = encode_branches(g, s, net, &pyr);
    decode_synthesis(g, s, net, &feats)
}

/// Forward-only synthesis with a store holding `enc.*` and `mt.*`.
pub fn synthesize(store: &ParamStore<f32>, net: &MtNet, img: &Image) -> Image {
    let mut g = Graph::new();
    let mut s = Session::frozen(store);
    let x = edge_mae::image_var(&mut g, img);
    let y = synthesize_var(&mut g, &mut s, net, x);
    let size = net.enc.image_size;
    Image::new(size, size, g.value(y).to_vec(), img.modality.other(), img.id)
}
