//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{self, Settings};
use crate::edge::{sobel_edge_map, Detector};
use crate::edge_mae::{self, EdgeMaeConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_micro, GradCheckOptions};
use crate::image::{Direction, Image};
use crate::metrics::evaluate_set;
use crate::mt_net::{synthesize, MtNetConfig};
use crate::ntf;
use crate::patch::sample_mask;
use crate::phantom::{self, DatasetManifest, Split};
use crate::rng::Rng;
use crate::train::{load_pairs, thread_pool, EpochLog, FinetuneConfig, Finetuner, Pretrainer};

#[derive(Debug, Parser)]
#[command(name = "mtnet", version, about = "Edge-aware masked autoencoder pretraining and multi-scale synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired two-modality phantom dataset.
    GenData(GenDataArgs),
    /// Pretrain the masked autoencoder on every training image.
    Pretrain(PretrainArgs),
    /// Fine-tune the synthesizer on paired images.
    ///
    /// Augmentation jitters source brightness and contrast; sharpness
    /// jitter is not implemented.
    Finetune(FinetuneArgs),
    /// Synthesize the target modality for one image.
    Synth(SynthArgs),
    /// Score a synthesizer on the test split and write a CSV report.
    Eval(EvalArgs),
    /// Write masked input, imputed image and estimated edge map as PGM.
    Impute(ImputeArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for per-sample gradients; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub n_train: usize,
    #[arg(long, default_value_t = 64)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    /// Mark only the first floor(ratio * n_train) training ids as paired.
    #[arg(long)]
    pub paired_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub stage_switch_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained encoder checkpoint directory.
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub paired_ratio: Option<f64>,
    #[arg(long)]
    pub freeze_layers: Option<usize>,
    /// Disable brightness and contrast jitter.
    #[arg(long)]
    pub no_augment: bool,
    /// A2B or B2A.
    #[arg(long)]
    pub direction: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Source image (NTF1).
    #[arg(long)]
    pub input: PathBuf,
    /// Synthesized image (NTF1).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Synthesizer checkpoint directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "A2B")]
    pub direction: String,
    /// Comma-separated edge detectors (sobel, prewitt) to score edge maps.
    #[arg(long, value_delimiter = ',')]
    pub detectors: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    /// Pretrained checkpoint directory.
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Use the micro configuration (the only supported size).
    #[arg(long)]
    pub micro: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb this tensor's analytic gradient to exercise failure reporting.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

/// Parses arguments, runs the command and maps the outcome to an exit
/// code: 0 success, 1 user error, 2 internal error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn usage_error(msg: &str, usage: &str) -> Error {
    Error::config(format!("{msg}\n\nUsage: {usage}"))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Impute(a) => impute(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

/// Config file pairs, then `--set` pairs, then explicit flags.
fn collect_pairs(common: &ConfigArgs, flags: Vec<(&str, Option<String>)>) -> Result<Vec<(String, String)>> {
    let mut pairs = match &common.config {
        Some(path) => config::read_pairs(path)?,
        None => Vec::new(),
    };
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Ok(pairs)
}

fn log_config(command: &str, groups: &[&dyn Settings]) {
    eprintln!("[{command}] resolved config:");
    for g in groups {
        for (k, v) in g.entries() {
            eprintln!("  {k} = {v}");
        }
    }
}

fn log_epoch(e: &EpochLog) {
    match e.stage {
        Some(stage) => eprintln!("epoch {:>4}  stage {:?}  lr {:.2e}  loss {:.6}", e.epoch, stage, e.lr, e.loss),
        None => eprintln!("epoch {:>4}  lr {:.2e}  loss {:.6}", e.epoch, e.lr, e.loss),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let manifest = phantom::generate_dataset(a.seed, a.n_train, a.n_test, a.size, a.patch_size, &a.out)?;
    if let Some(r) = a.paired_ratio {
        phantom::split_dataset(&manifest, r)?.save()?;
    }
    eprintln!("wrote {} images for {} ids to {}", manifest.entries.len(), a.n_train + a.n_test, a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let pairs = collect_pairs(
        &a.common,
        vec![
            ("epochs", a.epochs.map(|v| v.to_string())),
            ("mask_ratio", a.mask_ratio.map(|v| v.to_string())),
            ("stage_switch_epoch", a.stage_switch_epoch.map(|v| v.to_string())),
            ("lr", a.lr.map(|v| v.to_string())),
            ("batch", a.batch.map(|v| v.to_string())),
            ("seed", a.seed.map(|v| v.to_string())),
        ],
    )?;
    let mut cfg = EdgeMaeConfig::default();
    config::apply_pairs(&pairs, &mut [&mut cfg])?;
    cfg.validate()?;
    log_config("pretrain", &[&cfg]);
    let manifest = DatasetManifest::load(&a.data)?;
    let images = manifest.load_all(Split::Train)?;
    eprintln!("pretraining on {} images", images.len());
    let pool = thread_pool(a.common.threads)?;
    let store = Pretrainer::new(&cfg, &images)?.run(&pool, log_epoch)?;
    checkpoint::save_pretrained(&store, &cfg, &a.out)?;
    eprintln!("saved {}", a.out.display());
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let pairs = collect_pairs(
        &a.common,
        vec![
            ("epochs", a.epochs.map(|v| v.to_string())),
            ("lr", a.lr.map(|v| v.to_string())),
            ("batch", a.batch.map(|v| v.to_string())),
            ("paired_ratio", a.paired_ratio.map(|v| v.to_string())),
            ("freeze_layers", a.freeze_layers.map(|v| v.to_string())),
            ("augment", a.no_augment.then(|| "false".to_string())),
            ("direction", a.direction.clone()),
            ("seed", a.seed.map(|v| v.to_string())),
        ],
    )?;
    let mut ft = FinetuneConfig::default();
    let mut mt = MtNetConfig::default();
    config::apply_pairs(&pairs, &mut [&mut ft, &mut mt])?;
    ft.validate()?;
    let (enc_cfg, pretrained) = checkpoint::load_pretrained(&a.encoder)?;
    mt.check(&enc_cfg)?;
    log_config("finetune", &[&ft, &mt]);
    let manifest = DatasetManifest::load(&a.data)?;
    let train_pairs = load_pairs(&manifest, &ft)?;
    eprintln!("fine-tuning on {} pairs ({})", train_pairs.len(), ft.direction);
    let pool = thread_pool(a.common.threads)?;
    let (net, store) = Finetuner::new(&enc_cfg, &pretrained, &mt, &ft, &train_pairs)?.run(&pool, log_epoch)?;
    checkpoint::save_synthesizer(&store, &net, &a.out)?;
    eprintln!("saved {}", a.out.display());
    Ok(())
}

fn check_geometry(img: &Image, size: usize, path: &Path) -> Result<()> {
    if (img.height, img.width) != (size, size) {
        return Err(Error::config(format!(
            "{} is {}x{} but the model expects {size}x{size}",
            path.display(),
            img.height,
            img.width
        )));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let (net, store) = checkpoint::load_synthesizer(&a.model)?;
    let img = ntf::read_image(&a.input)?;
    check_geometry(&img, net.enc.image_size, &a.input)?;
    let out = synthesize(&store, &net, &img);
    ntf::write_image(&a.out, &out)?;
    if let Some(p) = &a.pgm {
        ntf::write_pgm(p, out.height, out.width, &out.pixels)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = a
        .model
        .as_ref()
        .ok_or_else(|| usage_error("eval requires --model", "mtnet eval --model <DIR> --data <DIR> --out <CSV>"))?;
    let direction: Direction = a.direction.parse()?;
    let detectors: Vec<Detector> = a.detectors.iter().map(|d| d.parse()).collect::<Result<_>>()?;
    let (net, store) = checkpoint::load_synthesizer(model)?;
    let manifest = DatasetManifest::load(&a.data)?;
    if manifest.ids(Split::Test).is_empty() {
        return Err(Error::config(format!("{} has no test images", a.data.display())));
    }
    let pool = thread_pool(a.threads)?;
    let report = pool.install(|| evaluate_set(&manifest, direction, &detectors, |img| synthesize(&store, &net, img)));
    report.write_csv(&a.out)?;
    eprint!("{}", report.summary());
    if report.has_errors() {
        let bad: Vec<String> = report.rows.iter().filter(|r| r.scores.is_none()).map(|r| r.id.to_string()).collect();
        return Err(Error::config(format!("could not evaluate ids {}", bad.join(", "))));
    }
    Ok(())
}

fn impute(a: ImputeArgs) -> Result<()> {
    let (mut cfg, store) = checkpoint::load_pretrained(&a.encoder)?;
    if let Some(r) = a.mask_ratio {
        cfg.mask_ratio = r;
    }
    let img = ntf::read_image(&a.input)?;
    check_geometry(&img, cfg.image_size, &a.input)?;
    let mask = sample_mask(cfg.grid(), cfg.grid(), cfg.mask_ratio, &mut Rng::new(a.seed))?;
    let (imputed, edges) = edge_mae::impute(&store, &cfg, &img, &mask);
    let p = cfg.patch_size;
    let w = img.width;
    let masked: Vec<f32> = img
        .pixels
        .iter()
        .enumerate()
        .map(|(k, &v)| if mask.is_masked((k / w / p) * cfg.grid() + (k % w) / p) { 0.0 } else { v })
        .collect();
    let (h, w) = (img.height, img.width);
    ntf::write_pgm(&a.out_dir.join("masked.pgm"), h, w, &masked)?;
    ntf::write_pgm(&a.out_dir.join("imputed.pgm"), h, w, &imputed.pixels)?;
    ntf::write_pgm(&a.out_dir.join("edges.pgm"), h, w, &edges.pixels)?;
    ntf::write_pgm(&a.out_dir.join("edges_target.pgm"), h, w, &sobel_edge_map(&img).pixels)?;
    eprintln!(
        "masked L1 {:.6} over {} of {} patches",
        edge_mae::masked_l1(&imputed.pixels, &img, &mask, p),
        mask.masked_count(),
        mask.len()
    );
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    if !a.micro {
        return Err(usage_error("only the micro configuration is supported", "mtnet grad-check --micro"));
    }
    let report = grad_check_micro(&GradCheckOptions { seed: a.seed, corrupt: a.corrupt, ..Default::default() });
    println!("{report}");
    report.into_result().map(|_| ())
}
