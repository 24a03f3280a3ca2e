//! Synthetic paired two-modality phantoms.
//!
//! Modality A is a composite of rotated ellipses under a smooth bias field;
//! modality B is the fixed nonlinear contrast `(1 - A)^1.5`.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Image, Modality};
use crate::ntf;
use crate::rng::Rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Renders the base tissue map for `seed`.
///
/// Draw order: k, then per ellipse (center x, center y, axis 1, axis 2,
/// rotation, intensity), then the bias-field frequencies a, b.
pub fn render_base_anatomy(seed: u64, size: usize, patch_size: usize) -> Result<Image> {
    if size < 16 {
        return Err(Error::config(format!("image size {size} must be at least 16")));
    }
    if patch_size == 0 || !size.is_multiple_of(patch_size) {
        return Err(Error::config(format!("image size {size} is not divisible by patch size {patch_size}")));
    }
    let mut rng = Rng::new(seed);
    let s = size as f64;
    let k = 2 + rng.below(4);
    let ellipses: Vec<Ellipse> = (0..k)
        .map(|_| {
            let cx = rng.uniform_in(0.25 * s, 0.75 * s);
            let cy = rng.uniform_in(0.25 * s, 0.75 * s);
            let a1 = rng.uniform_in(s / 8.0, s / 3.0);
            let a2 = rng.uniform_in(s / 8.0, s / 3.0);
            let theta = rng.uniform_in(0.0, PI);
            let intensity = rng.uniform_in(0.2, 0.9);
            Ellipse { cx, cy, a1, a2, cos: theta.cos(), sin: theta.sin(), intensity }
        })
        .collect();
    let a = rng.uniform_in(0.5, 2.0);
    let b = rng.uniform_in(0.5, 2.0);

    let img = Image::from_fn(size, size, |i, j| {
        let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
        let tissue = ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .fold(0.0, f64::max);
        let bias = 0.85 + 0.15 * (2.0 * PI * (a * i as f64 + b * j as f64) / s).cos();
        (tissue * bias).clamp(0.0, 1.0) as f32
    });
    Ok(img)
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a1: f64,
    a2: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a1).powi(2) + (v / self.a2).powi(2) <= 1.0
    }
}

/// Target contrast for a single intensity.
pub fn contrast_b(a: f32) -> f32 {
    ((1.0 - a as f64).max(0.0).powf(1.5).clamp(0.0, 1.0)) as f32
}

pub fn derive_modalities(base: &Image) -> (Image, Image) {
    let a = base.clone().with_meta(Modality::A, base.id);
    let b = Image::new(
        base.height,
        base.width,
        base.pixels.iter().map(|&p| contrast_b(p)).collect(),
        Modality::B,
        base.id,
    );
    (a, b)
}

/// Renders the (A, B) pair for one id of a dataset generated with `seed`.
pub fn render_pair(seed: u64, id: u32, size: usize, patch_size: usize) -> Result<(Image, Image)> {
    let base = render_base_anatomy(seed ^ id as u64, size, patch_size)?.with_meta(Modality::A, id);
    Ok(derive_modalities(&base))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u32,
    pub modality: Modality,
    pub path: PathBuf,
    pub split: Split,
    pub paired: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().filter(|e| e.split == split).map(|e| e.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn paired_ids(&self, split: Split) -> Vec<u32> {
        let mut ids: Vec<u32> = self.ids(split)
            .into_iter()
            .filter(|&id| {
                let of_id: Vec<_> = self.entries.iter().filter(|e| e.id == id && e.split == split).collect();
                of_id.iter().all(|e| e.paired)
                    && [Modality::A, Modality::B].iter().all(|m| of_id.iter().any(|e| e.modality == *m))
            })
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn entry(&self, id: u32, modality: Modality) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id && e.modality == modality)
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_image(&self, id: u32, modality: Modality) -> Result<Image> {
        let entry = self
            .entry(id, modality)
            .ok_or_else(|| Error::config(format!("manifest has no modality {modality} for id {id}")))?;
        Ok(ntf::read_image(&self.path_of(entry))?.with_meta(modality, id))
    }

    /// Every image of the given split, each modality as an independent sample.
    pub fn load_all(&self, split: Split) -> Result<Vec<Image>> {
        let mut entries: Vec<&ManifestEntry> = self.entries.iter().filter(|e| e.split == split).collect();
        entries.sort_by_key(|e| (e.id, e.modality));
        entries
            .into_iter()
            .map(|e| Ok(ntf::read_image(&self.path_of(e))?.with_meta(e.modality, e.id)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.modality,
                e.path.to_string_lossy().replace('\\', "/"),
                e.split,
                u8::from(e.paired)
            ));
        }
        out
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::format(&manifest_path, format!("line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let id = fields[0].parse().map_err(|_| bad("bad id"))?;
            let modality = fields[1].parse().map_err(|_| bad("bad modality"))?;
            let split = fields[3].parse().map_err(|_| bad("bad split"))?;
            let paired = match fields[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("paired flag must be 0 or 1")),
            };
            entries.push(ManifestEntry { id, modality, path: PathBuf::from(fields[2]), split, paired });
        }
        let manifest = DatasetManifest { root: root.to_path_buf(), entries };
        manifest.validate().map_err(|e| Error::format(&manifest_path, e))?;
        Ok(manifest)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert((e.split, e.id, e.modality)) {
                return Err(format!("duplicate entry for id {} modality {} in {}", e.id, e.modality, e.split));
            }
        }
        for e in self.entries.iter().filter(|e| e.paired) {
            if self.entry(e.id, e.modality.other()).is_none() {
                return Err(format!("id {} is marked paired but lacks modality {}", e.id, e.modality.other()));
            }
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        DatasetManifest::parse(root, &text)
    }

    pub fn save(&self) -> Result<()> {
        ntf::write_bytes(&self.root.join(MANIFEST_FILE), self.to_text().as_bytes())
    }
}

/// Writes `n_train + n_test` paired images, PGM previews and the manifest.
/// Every train id starts out paired; see [`split_dataset`].
pub fn generate_dataset(
    seed: u64,
    n_train: usize,
    n_test: usize,
    size: usize,
    patch_size: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(2 * (n_train + n_test));
    for id in 0..(n_train + n_test) as u32 {
        let split = if (id as usize) < n_train { Split::Train } else { Split::Test };
        let (a, b) = render_pair(seed, id, size, patch_size)?;
        for img in [&a, &b] {
            let rel = PathBuf::from(split.to_string()).join(format!("{id:06}_{}.ntf", img.modality));
            ntf::write_image(&out_dir.join(&rel), img)?;
            let preview = out_dir.join("preview").join(format!("{id:06}_{}.pgm", img.modality));
            ntf::write_pgm(&preview, img.height, img.width, &img.pixels)?;
            entries.push(ManifestEntry { id, modality: img.modality, path: rel, split, paired: true });
        }
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), entries };
    manifest.save()?;
    Ok(manifest)
}

/// Number of train ids marked paired under `ratio`.
pub fn paired_count(n_train: usize, ratio: f64) -> usize {
    // The small epsilon keeps products like 0.7 * 10 from flooring to 6.
    ((ratio * n_train as f64) + 1e-9).floor() as usize
}

/// Marks the first `floor(ratio * n_train)` train ids as paired. Test ids
/// keep their pairing, which evaluation relies on.
pub fn split_dataset(manifest: &DatasetManifest, paired_ratio: f64) -> Result<DatasetManifest> {
    if !(paired_ratio > 0.0 && paired_ratio <= 1.0) {
        return Err(Error::config(format!("paired ratio {paired_ratio} must lie in (0, 1]")));
    }
    let train = manifest.ids(Split::Train);
    let keep = paired_count(train.len(), paired_ratio);
    let paired: std::collections::HashSet<u32> = train.into_iter().take(keep).collect();
    let mut out = manifest.clone();
    for e in out.entries.iter_mut().filter(|e| e.split == Split::Train) {
        e.paired = paired.contains(&e.id) && manifest.entry(e.id, e.modality.other()).is_some();
    }
    Ok(out)
}
