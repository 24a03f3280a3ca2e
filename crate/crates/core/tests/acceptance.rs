//! Acceptance suite. Each test prints one PASS/FAIL line for its criterion.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mtnet::edge::{edge_map, Detector};
use mtnet::edge_mae::{self, EdgeMaeConfig};
use mtnet::gradcheck::{grad_check_micro, GradCheckOptions};
use mtnet::image::Image;
use mtnet::metrics::{nmse, psnr, ssim_global, SSIM_C1};
use mtnet::mt_net::{channel_softmax, synthesize, MtNetConfig};
use mtnet::nn::ParamStore;
use mtnet::patch::{compute_alpha, sample_mask, stage_weight, MaskPlan, Stage};
use mtnet::phantom::render_pair;
use mtnet::rng::Rng;
use mtnet::tape::Graph;
use mtnet::train::{thread_pool, FinetuneConfig, Finetuner, Pretrainer};

const DATA_SEED: u64 = 7;

fn report(criterion: u32, title: &str, ok: bool, detail: &str) {
    println!("criterion {criterion} [{title}]: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed: {detail}");
}

#[test]
fn criterion_1_gradient_suite() {
    let t = Instant::now();
    let r = grad_check_micro(&GradCheckOptions::default());
    let elapsed = t.elapsed();
    let stages = ["stage1", "stage2", "finetune"].map(|l| r.max_error_for(l));
    let covered = ["stage1", "stage2", "finetune"].iter().all(|l| r.tensors.iter().any(|t| t.loss == *l));
    let ok = covered && r.passed() && elapsed < Duration::from_secs(300);
    let detail = format!(
        "max rel err stage1 {:.2e}, stage2 {:.2e}, finetune {:.2e}; {} tensors; {:.1}s; offenders {:?}",
        stages[0],
        stages[1],
        stages[2],
        r.tensors.len(),
        elapsed.as_secs_f64(),
        r.offenders()
    );
    report(1, "gradient suite", ok, &detail);
}

/// Neighbour mean computed from signed offsets with explicit bounds tests.
fn alpha_oracle(mask: &MaskPlan) -> Vec<f32> {
    let (h, w) = (mask.grid_h as i64, mask.grid_w as i64);
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let mut sum = 0u32;
            let mut n = 0u32;
            for di in [-1i64, 0, 1] {
                for dj in [-1i64, 0, 1] {
                    let (y, x) = (i + di, j + dj);
                    if y >= 0 && y < h && x >= 0 && x < w {
                        sum += u32::from(mask.is_masked((y * w + x) as usize));
                        n += 1;
                    }
                }
            }
            out.push(sum as f32 / n as f32);
        }
    }
    out
}

#[test]
fn criterion_2_alpha_oracle() {
    let mut rng = Rng::new(2);
    let (mut mismatches, mut out_of_range, mut weight_breaks) = (0, 0, 0);
    for _ in 0..1000 {
        let ratio = rng.uniform_in(0.05, 0.95);
        let mask = sample_mask(8, 8, ratio, &mut rng).unwrap();
        let alpha = compute_alpha(&mask);
        let oracle = alpha_oracle(&mask);
        for (r, &want) in oracle.iter().enumerate() {
            let a = alpha.at(r);
            mismatches += usize::from(a != want);
            out_of_range += usize::from(!(0.0..=1.0).contains(&a));
            weight_breaks += usize::from(stage_weight(a, Stage::One) + stage_weight(a, Stage::Two) != 3.0);
        }
    }
    let ok = mismatches == 0 && out_of_range == 0 && weight_breaks == 0;
    let detail = format!("1000 masks: {mismatches} mismatches, {out_of_range} out of [0,1], {weight_breaks} weight-sum breaks");
    report(2, "alpha oracle", ok, &detail);
}

#[test]
fn criterion_3_metric_goldens() {
    let ones = Image::filled(32, 32, 1.0);
    let half = Image::filled(32, 32, 0.5);
    let zeros = Image::filled(32, 32, 0.0);
    let mut y = Image::zeros(32, 32);
    let mut rng = Rng::new(3);
    y.pixels.iter_mut().for_each(|v| *v = rng.uniform() as f32);

    let p = psnr(&ones, &half);
    let n = nmse(&ones, &half);
    let s_same = ssim_global(&y, &y);
    let s_opp = ssim_global(&ones, &zeros);
    let s_want = SSIM_C1 / (1.0 + SSIM_C1);
    let ok = (p - 6.0206).abs() <= 1e-3
        && (n - 0.25).abs() <= 1e-6
        && (s_same - 1.0).abs() <= 1e-9
        && (s_opp - s_want).abs() <= 1e-9;
    let detail = format!("psnr {p:.6} dB, nmse {n:.8}, ssim(y,y) {s_same:.12}, ssim(1,0) {s_opp:.3e} vs {s_want:.3e}");
    report(3, "metric goldens", ok, &detail);
}

#[test]
fn criterion_4_edge_oracle() {
    let ramp = Image::from_fn(10, 10, |_, j| 0.1 * j as f32);
    let e = edge_map(&ramp, Detector::Sobel);
    let mut worst = 0.0f64;
    for i in 1..9 {
        for j in 1..9 {
            worst = worst.max((e.pixels[i * 10 + j] as f64 - 0.141421).abs());
        }
    }
    let flat_max = [0.0f32, 0.37, 1.0]
        .iter()
        .flat_map(|&c| edge_map(&Image::filled(12, 9, c), Detector::Sobel).pixels)
        .fold(0.0f32, |m, v| m.max(v.abs()));

    let mut rng = Rng::new(4);
    let img = Image::from_fn(13, 17, |_, _| rng.uniform() as f32);
    let transpose_exact = [Detector::Sobel, Detector::Prewitt]
        .iter()
        .all(|&d| edge_map(&img.transpose(), d).pixels == edge_map(&img, d).as_image().transpose().pixels);
    let ok = worst <= 1e-5 && flat_max == 0.0 && transpose_exact;
    let detail = format!("ramp interior max deviation {worst:.2e}, constant max {flat_max}, transpose exact {transpose_exact}");
    report(4, "edge oracle", ok, &detail);
}

#[test]
fn criterion_5_dsf_properties() {
    let c = 16;
    let mut rng = Rng::new(5);
    let (mut sum_err, mut shift_err, mut argmax_breaks) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let pl: Vec<f32> = (0..c).map(|_| rng.uniform_in(-3.0, 3.0) as f32).collect();
        let ps: Vec<f32> = (0..c).map(|_| rng.uniform_in(-3.0, 3.0) as f32).collect();
        let shift = rng.uniform_in(-5.0, 5.0) as f32;
        let weights = |l: &[f32], s: &[f32]| {
            let mut g = Graph::<f32>::new();
            let (vl, vs) = (g.constant(1, c, l.to_vec()), g.constant(1, c, s.to_vec()));
            let (a, b) = channel_softmax(&mut g, vl, vs);
            (g.value(a).to_vec(), g.value(b).to_vec())
        };
        let (a, b) = weights(&pl, &ps);
        let shifted_l: Vec<f32> = pl.iter().map(|v| v + shift).collect();
        let shifted_s: Vec<f32> = ps.iter().map(|v| v + shift).collect();
        let (a2, b2) = weights(&shifted_l, &shifted_s);
        for k in 0..c {
            sum_err = sum_err.max((a[k] as f64 + b[k] as f64 - 1.0).abs());
            shift_err = shift_err.max((a[k] - a2[k]).abs().max((b[k] - b2[k]).abs()) as f64);
            if pl[k] != ps[k] && (a[k] > b[k]) != (pl[k] > ps[k]) {
                argmax_breaks += 1;
            }
        }
    }
    let ok = sum_err <= 1e-6 && shift_err <= 1e-6 && argmax_breaks == 0;
    let detail = format!("1000 pairs x {c} channels: |a+b-1| max {sum_err:.2e}, shift change max {shift_err:.2e}, argmax breaks {argmax_breaks}");
    report(5, "dsf properties", ok, &detail);
}

struct Pretrained {
    cfg: EdgeMaeConfig,
    store: ParamStore<f32>,
    losses: Vec<f64>,
    elapsed: Duration,
}

/// 200 optimizer steps: 32 images at batch 16 for 100 epochs.
fn pretrained() -> &'static Pretrained {
    static CELL: OnceLock<Pretrained> = OnceLock::new();
    CELL.get_or_init(|| {
        let images: Vec<Image> = (0..32).map(|i| render_pair(DATA_SEED, i, 64, 8).unwrap().0).collect();
        let cfg = EdgeMaeConfig { epochs: 100, ..EdgeMaeConfig::default() };
        let pool = thread_pool(1).unwrap();
        let mut losses = Vec::new();
        let t = Instant::now();
        let store = Pretrainer::new(&cfg, &images).unwrap().run(&pool, |e| losses.push(e.loss)).unwrap();
        Pretrained { cfg, store, losses, elapsed: t.elapsed() }
    })
}

#[test]
fn criterion_6_pretraining_behavior() {
    let pre = pretrained();
    let cfg = &pre.cfg;
    let steps = 32usize.div_ceil(cfg.batch) * cfg.epochs;
    let mut rng = Rng::new(66);
    let (mut model, mut mean_fill, mut visible_fill) = (0.0, 0.0, 0.0);
    for i in 0..32 {
        let img = render_pair(DATA_SEED, i, 64, 8).unwrap().0;
        let mask = sample_mask(cfg.grid(), cfg.grid(), cfg.mask_ratio, &mut rng).unwrap();
        let (imputed, _) = edge_mae::impute(&pre.store, cfg, &img, &mask);
        model += edge_mae::masked_l1(&imputed.pixels, &img, &mask, cfg.patch_size);
        let mean = img.mean() as f32;
        mean_fill += edge_mae::masked_l1(&vec![mean; img.len()], &img, &mask, cfg.patch_size);
        let per_pixel: Vec<bool> =
            (0..img.len()).map(|k| mask.is_masked((k / img.width / cfg.patch_size) * cfg.grid() + (k % img.width) / cfg.patch_size)).collect();
        let visible: Vec<f32> = img.pixels.iter().zip(&per_pixel).filter(|(_, &m)| !m).map(|(&v, _)| v).collect();
        let vmean = visible.iter().sum::<f32>() / visible.len() as f32;
        visible_fill += edge_mae::masked_l1(&vec![vmean; img.len()], &img, &mask, cfg.patch_size);
    }
    let ratio = model / mean_fill;
    let finite = pre.losses.iter().all(|l| l.is_finite());
    let ok = steps == 200 && ratio <= 0.70 && finite && pre.elapsed < Duration::from_secs(900);
    let detail = format!(
        "{steps} steps in {:.1}s, masked L1 {:.4} vs mean-fill {:.4}: ratio {ratio:.3} (limit 0.70); visible-mean fill ratio {:.3}; losses finite {finite}, first {:.3} last {:.3}",
        pre.elapsed.as_secs_f64(),
        model / 32.0,
        mean_fill / 32.0,
        model / visible_fill,
        pre.losses[0],
        pre.losses.last().unwrap()
    );
    report(6, "pretraining behavior", ok, &detail);
}

#[test]
fn criterion_7_finetuning_behavior() {
    let pre = pretrained();
    let pairs: Vec<(Image, Image)> = (0..8).map(|i| render_pair(DATA_SEED, i, 64, 8).unwrap()).collect();
    let mt = MtNetConfig { freeze_layers: Some(3), ..MtNetConfig::default() };
    let ft = FinetuneConfig { epochs: 300, augment: false, ..FinetuneConfig::default() };
    let tuner = Finetuner::new(&pre.cfg, &pre.store, &mt, &ft, &pairs).unwrap();
    let score = |store: &ParamStore<f32>, net: &mtnet::mt_net::MtNet| {
        let (mut p, mut s) = (0.0, 0.0);
        for (a, b) in &pairs {
            let y = synthesize(store, net, a);
            p += psnr(b, &y);
            s += ssim_global(b, &y);
        }
        (p / pairs.len() as f64, s / pairs.len() as f64)
    };
    let (psnr0, ssim0) = score(&tuner.store, &tuner.net);
    let before = tuner.store.clone();
    let steps_per_epoch = pairs.len().div_ceil(ft.batch);
    let pool = thread_pool(1).unwrap();
    let (net, after) = tuner.run(&pool, |_| {}).unwrap();
    let (psnr1, ssim1) = score(&after, &net);

    let frozen: Vec<&str> = before.iter().filter(|p| !p.trainable).map(|p| p.name.as_str()).collect();
    let frozen_identical = frozen.iter().all(|n| {
        let (a, b) = (before.get(n).unwrap(), after.get(n).unwrap());
        a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let covers = frozen.contains(&"enc.patch.w") && frozen.iter().any(|n| n.starts_with("enc.blocks.2.")) && !frozen.iter().any(|n| n.starts_with("enc.blocks.3."));
    let gain = psnr1 - psnr0;
    let ok = steps_per_epoch * ft.epochs == 300 && gain >= 6.0 && ssim1 >= 0.8 && frozen_identical && covers;
    let detail = format!(
        "300 steps on 8 pairs: psnr {psnr0:.2} -> {psnr1:.2} dB (gain {gain:.2}), ssim {ssim0:.3} -> {ssim1:.3}; {} frozen tensors bit-identical {frozen_identical}",
        frozen.len()
    );
    report(7, "fine-tuning behavior", ok, &detail);
}

fn run_cli(args: &[&str]) {
    let argv = std::iter::once("mtnet").chain(args.iter().copied());
    assert_eq!(mtnet::cli::run(argv), 0, "mtnet {}", args.join(" "));
}

const TINY_ENCODER: &[&str] = &[
    "--set", "image_size=16", "--set", "enc_dim=8", "--set", "enc_layers=2", "--set", "enc_heads=2",
    "--set", "dec_dim=8", "--set", "dec_layers=2", "--set", "dec_shared_layers=1", "--set", "dec_heads=2",
    "--set", "batch=4",
];

/// gen-data, pretrain, finetune and eval under `root`.
fn pipeline(root: &Path, threads: &str) {
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let (data, enc, syn, csv) = (p("data"), p("enc"), p("syn"), p("metrics.csv"));
    run_cli(&["gen-data", "--out", &data, "--n-train", "8", "--n-test", "3", "--seed", "11", "--size", "16"]);
    let mut args = vec!["pretrain", "--data", &data, "--out", &enc, "--epochs", "3", "--seed", "5", "--threads", threads];
    args.extend_from_slice(TINY_ENCODER);
    run_cli(&args);
    run_cli(&[
        "finetune", "--data", &data, "--encoder", &enc, "--out", &syn, "--epochs", "3", "--batch", "4",
        "--set", "base_channels=8", "--set", "small_stages=1", "--seed", "9", "--threads", threads,
    ]);
    run_cli(&["eval", "--model", &syn, "--data", &data, "--out", &csv, "--detectors", "sobel,prewitt", "--threads", threads]);
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_8_determinism() {
    let runs: Vec<_> = ["1", "1", "2"]
        .iter()
        .map(|threads| {
            let dir = tempfile::tempdir().unwrap();
            pipeline(dir.path(), threads);
            tree_bytes(dir.path())
        })
        .collect();
    let files = runs[0].len();
    let has_outputs = runs[0].iter().any(|(n, _)| n.starts_with("syn")) && runs[0].iter().any(|(n, _)| n == "metrics.csv");
    let same = runs[0] == runs[1];
    let same_threads = runs[0] == runs[2];
    let ok = has_outputs && same && same_threads;
    let detail = format!("{files} files; two deterministic runs identical {same}; 2-thread run identical {same_threads}");
    report(8, "determinism", ok, &detail);
}

#[test]
fn criterion_9_mask_ratio_sweep() {
    let images: Vec<Image> = (0..16).map(|i| render_pair(DATA_SEED, i, 64, 8).unwrap().0).collect();
    let pool = thread_pool(1).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for ratio in [0.4, 0.5, 0.6, 0.7, 0.8] {
        let cfg = EdgeMaeConfig { mask_ratio: ratio, epochs: 6, ..EdgeMaeConfig::default() };
        let mut losses = Vec::new();
        let result = Pretrainer::new(&cfg, &images).and_then(|p| p.run(&pool, |e| losses.push(e.loss)));
        let finite = result.is_ok() && losses.len() == cfg.epochs && losses.iter().all(|l| l.is_finite());
        ok &= finite;
        lines.push(format!("{ratio}: {}", losses.last().map_or("error".to_string(), |l| format!("{l:.3}"))));
    }
    report(9, "mask-ratio sweep", ok, &format!("final losses {}", lines.join(", ")));
}
