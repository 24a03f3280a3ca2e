//! Checkpoint directories: one NTF1 file per tensor, a tab-separated
//! manifest and a `key = value` config file.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{self, Settings};
use crate::edge_mae::{self, EdgeMaeConfig};
use crate::error::{Error, Result};
use crate::mt_net::{MtNet, MtNetConfig};
use crate::nn::ParamStore;
use crate::ntf;
use crate::rng::Rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CONFIG_FILE: &str = "config.txt";
pub const KIND_PRETRAINED: &str = "edge-mae";
pub const KIND_SYNTHESIZER: &str = "mt-net";

/// Hex SHA-256 of the encoder layout keys.
pub fn encoder_hash(cfg: &EdgeMaeConfig) -> String {
    let digest = Sha256::digest(config::render_pairs(&cfg.encoder_entries()).as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes every tensor of `store` plus the given config lines.
pub fn save_checkpoint(store: &ParamStore<f32>, config: &[(&str, String)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for p in store.iter() {
        let file = format!("{}.ntf", p.name);
        ntf::write_tensor(&dir.join(&file), &[p.rows, p.cols], &p.data)?;
        let _ = writeln!(manifest, "{}\t{}\t{}x{}\t{}", p.name, file, p.rows, p.cols, u8::from(p.trainable));
    }
    ntf::write_bytes(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    ntf::write_bytes(&dir.join(CONFIG_FILE), config::render_pairs(config).as_bytes())
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub config: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut params = ParamStore::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |reason: &str| Error::format(&manifest_path, format!("line {}: {reason}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let (rows, cols) = f[2]
            .split_once('x')
            .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
            .ok_or_else(|| bad("bad shape"))?;
        let trainable = match f[3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("trainable flag must be 0 or 1")),
        };
        if params.get(f[0]).is_some() {
            return Err(bad("duplicate tensor"));
        }
        let t = ntf::read_tensor(&dir.join(f[1]))?;
        if t.dims != [rows, cols] {
            return Err(Error::Checkpoint {
                name: f[0].to_string(),
                reason: format!("file holds dims {:?} but manifest says {rows}x{cols}", t.dims),
            });
        }
        params.insert(f[0], rows, cols, t.data);
        params.get_mut(f[0]).unwrap().trainable = trainable;
    }
    let config = config::read_pairs(&dir.join(CONFIG_FILE))?;
    Ok(Checkpoint { params, config })
}

fn split_meta(ckpt: &Checkpoint, kind: &str, dir: &Path) -> Result<(String, Vec<(String, String)>)> {
    match ckpt.value("kind") {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::config(format!(
                "{} holds a `{}` checkpoint, expected `{kind}`",
                dir.display(),
                other.unwrap_or("unknown")
            )))
        }
    }
    let hash = ckpt
        .value("encoder_hash")
        .ok_or_else(|| Error::format(dir.join(CONFIG_FILE), "missing encoder_hash"))?
        .to_string();
    let rest = ckpt.config.iter().filter(|(k, _)| k != "kind" && k != "encoder_hash").cloned().collect();
    Ok((hash, rest))
}

fn check_hash(stored: &str, cfg: &EdgeMaeConfig, dir: &Path) -> Result<()> {
    let expected = encoder_hash(cfg);
    if stored != expected {
        return Err(Error::config(format!(
            "{}: encoder hash {stored} does not match its config ({expected})",
            dir.display()
        )));
    }
    Ok(())
}

pub fn save_pretrained(store: &ParamStore<f32>, cfg: &EdgeMaeConfig, dir: &Path) -> Result<()> {
    let mut lines = vec![("kind", KIND_PRETRAINED.to_string())];
    lines.extend(cfg.entries());
    lines.push(("encoder_hash", encoder_hash(cfg)));
    save_checkpoint(store, &lines, dir)
}

/// Loads an Edge-MAE checkpoint and verifies every tensor against the
/// layout implied by its config.
pub fn load_pretrained(dir: &Path) -> Result<(EdgeMaeConfig, ParamStore<f32>)> {
    let ckpt = load_checkpoint(dir)?;
    let (hash, rest) = split_meta(&ckpt, KIND_PRETRAINED, dir)?;
    let mut cfg = EdgeMaeConfig::default();
    config::apply_pairs(&rest, &mut [&mut cfg])?;
    cfg.validate()?;
    ckpt.params.check_layout(&edge_mae::init_params(&cfg, 0))?;
    check_hash(&hash, &cfg, dir)?;
    Ok((cfg, ckpt.params))
}

pub fn save_synthesizer(store: &ParamStore<f32>, net: &MtNet, dir: &Path) -> Result<()> {
    let mut lines = vec![("kind", KIND_SYNTHESIZER.to_string())];
    lines.extend(net.enc.encoder_entries());
    lines.extend(net.cfg.entries());
    lines.push(("encoder_hash", encoder_hash(&net.enc)));
    save_checkpoint(store, &lines, dir)
}

/// Tensor layout of a synthesizer: encoder plus MT-Net.
pub fn synthesizer_layout(net: &MtNet) -> ParamStore<f32> {
    let mut rng = Rng::new(0);
    let mut store = ParamStore::new();
    edge_mae::init_encoder(&mut store, &mut rng, &net.enc);
    net.init(&mut store, &mut rng);
    store
}

pub fn load_synthesizer(dir: &Path) -> Result<(MtNet, ParamStore<f32>)> {
    let ckpt = load_checkpoint(dir)?;
    let (hash, rest) = split_meta(&ckpt, KIND_SYNTHESIZER, dir)?;
    let mut enc = EdgeMaeConfig::default();
    let mut mt = MtNetConfig::default();
    config::apply_pairs(&rest, &mut [&mut enc, &mut mt])?;
    enc.validate()?;
    let net = MtNet::new(&mt, &enc)?;
    ckpt.params.check_layout(&synthesizer_layout(&net))?;
    check_hash(&hash, &enc, dir)?;
    Ok((net, ckpt.params))
}
