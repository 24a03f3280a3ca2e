//! Image fidelity metrics and per-image evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::edge::{edge_map, Detector};
use crate::error::{Error, Result};
use crate::image::{Direction, Image};
use crate::phantom::{DatasetManifest, Split};

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn check_shapes(y: &Image, g: &Image) {
    assert_eq!((y.height, y.width), (g.height, g.width), "metric inputs differ in shape");
}

fn mse(y: &Image, g: &Image) -> f64 {
    let sum: f64 = y.pixels.iter().zip(&g.pixels).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    sum / y.len() as f64
}

/// Peak signal-to-noise ratio in dB with the peak taken jointly over both
/// images. Identical images give `+inf`; two all-zero images give NaN.
pub fn psnr(y: &Image, g: &Image) -> f64 {
    check_shapes(y, g);
    let peak = y.pixels.iter().chain(&g.pixels).fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    if peak <= 0.0 {
        return f64::NAN;
    }
    let mse = mse(y, g);
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// `|y - g|^2 / |y|^2`; NaN when `y` is all zero.
pub fn nmse(y: &Image, g: &Image) -> f64 {
    check_shapes(y, g);
    let num: f64 = y.pixels.iter().zip(&g.pixels).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    let den: f64 = y.pixels.iter().map(|&a| (a as f64).powi(2)).sum();
    if den == 0.0 {
        f64::NAN
    } else {
        num / den
    }
}

/// Single-window SSIM over the whole image with population statistics.
pub fn ssim_global(y: &Image, g: &Image) -> f64 {
    check_shapes(y, g);
    let n = y.len() as f64;
    let mx = y.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = g.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in y.pixels.iter().zip(&g.pixels) {
        let (da, db) = (a as f64 - mx, b as f64 - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub psnr_db: f64,
    pub nmse: f64,
    pub ssim: f64,
    /// PSNR and NMSE between edge maps, when a detector was requested.
    pub edge: Option<(f64, f64)>,
}

impl Scores {
    pub fn compute(target: &Image, pred: &Image, detector: Option<Detector>) -> Self {
        let edge = detector.map(|d| {
            let (ey, eg) = (edge_map(target, d).as_image(), edge_map(pred, d).as_image());
            (psnr(&ey, &eg), nmse(&ey, &eg))
        });
        Scores { psnr_db: psnr(target, pred), nmse: nmse(target, pred), ssim: ssim_global(target, pred), edge }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub id: u32,
    pub task: String,
    /// `None` marks a row whose inputs could not be evaluated.
    pub scores: Option<Scores>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Aggregate { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Aggregate { mean, std: var.sqrt(), count: n }
    }
}

pub const CSV_HEADER: &str = "id,task,psnr_db,nmse,ssim";
pub const CSV_EDGE_COLUMNS: &str = ",edge_psnr_db,edge_nmse";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub edge_columns: bool,
}

/// Formats with 6 significant digits in the style of `%g`.
pub fn format_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        strip(&format!("{v:.*}", (5 - exp).max(0) as usize))
    } else {
        format!("{}e{}{:02}", strip(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn parse_cell(s: &str, path: &Path, line: usize) -> Result<f64> {
    s.parse().map_err(|_| Error::format(path, format!("line {line}: bad number `{s}`")))
}

impl MetricsReport {
    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| r.scores.is_none())
    }

    /// One value per id; detector rows repeat the image scores.
    fn column(&self, f: impl Fn(&Scores) -> Option<f64>) -> Vec<f64> {
        let mut seen = std::collections::HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.id))
            .filter_map(|r| r.scores.as_ref().and_then(&f))
            .collect()
    }

    /// Edge-map PSNR over the rows of one task tag.
    pub fn edge_psnr(&self, task: &str) -> Aggregate {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.task == task)
            .filter_map(|r| r.scores.as_ref().and_then(|s| s.edge.map(|e| e.0)))
            .collect();
        Aggregate::of(&v)
    }

    pub fn psnr(&self) -> Aggregate {
        Aggregate::of(&self.column(|s| Some(s.psnr_db)))
    }

    pub fn nmse(&self) -> Aggregate {
        Aggregate::of(&self.column(|s| Some(s.nmse)))
    }

    pub fn ssim(&self) -> Aggregate {
        Aggregate::of(&self.column(|s| Some(s.ssim)))
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (name, agg) in [("psnr_db", self.psnr()), ("nmse", self.nmse()), ("ssim", self.ssim())] {
            let _ = writeln!(out, "{name}: {} ± {} (n={})", format_sig(agg.mean), format_sig(agg.std), agg.count);
        }
        let mut tasks: Vec<&str> = Vec::new();
        for r in self.rows.iter().filter(|r| r.task.contains('/')) {
            if !tasks.contains(&r.task.as_str()) {
                tasks.push(&r.task);
            }
        }
        for task in tasks {
            let agg = self.edge_psnr(task);
            let _ = writeln!(out, "{task} edge_psnr_db: {} ± {} (n={})", format_sig(agg.mean), format_sig(agg.std), agg.count);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        if self.edge_columns {
            out.push_str(CSV_EDGE_COLUMNS);
        }
        out.push('\n');
        let width = if self.edge_columns { 5 } else { 3 };
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.id, row.task);
            match &row.scores {
                Some(s) => {
                    let mut cells = vec![s.psnr_db, s.nmse, s.ssim];
                    if self.edge_columns {
                        let (p, n) = s.edge.unwrap_or((f64::NAN, f64::NAN));
                        cells.extend([p, n]);
                    }
                    for c in cells {
                        let _ = write!(out, ",{}", format_sig(c));
                    }
                }
                None => (0..width).for_each(|_| out.push_str(",err")),
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, "empty report"))?;
        let edge_columns = if header == CSV_HEADER {
            false
        } else if header == format!("{CSV_HEADER}{CSV_EDGE_COLUMNS}") {
            true
        } else {
            return Err(Error::format(path, format!("unexpected header `{header}`")));
        };
        let width = if edge_columns { 7 } else { 5 };
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(Error::format(path, format!("line {lineno}: expected {width} columns")));
            }
            let id = cells[0].parse().map_err(|_| Error::format(path, format!("line {lineno}: bad id")))?;
            let scores = if cells[2..].iter().all(|&c| c == "err") {
                None
            } else {
                let v: Vec<f64> = cells[2..].iter().map(|c| parse_cell(c, path, lineno)).collect::<Result<_>>()?;
                Some(Scores { psnr_db: v[0], nmse: v[1], ssim: v[2], edge: edge_columns.then(|| (v[3], v[4])) })
            };
            rows.push(MetricsRow { id, task: cells[1].to_string(), scores });
        }
        Ok(MetricsReport { rows, edge_columns })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::ntf::write_bytes(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }
}

/// Synthesizes every test image in `direction` and scores it against its
/// counterpart. Rows come out sorted by id, one per requested detector
/// (or a single row when none is requested). Unreadable inputs produce
/// error rows.
pub fn evaluate_set<F>(manifest: &DatasetManifest, direction: Direction, detectors: &[Detector], synth: F) -> MetricsReport
where
    F: Fn(&Image) -> Image + Sync,
{
    let ids = manifest.ids(Split::Test);
    let per_id: Vec<Vec<MetricsRow>> = ids
        .par_iter()
        .map(|&id| {
            let loaded = manifest
                .load_image(id, direction.source())
                .and_then(|s| manifest.load_image(id, direction.target()).map(|t| (s, t)));
            let pred = loaded.as_ref().ok().map(|(s, _)| synth(s));
            let tags: Vec<(String, Option<Detector>)> = if detectors.is_empty() {
                vec![(direction.to_string(), None)]
            } else {
                detectors.iter().map(|&d| (format!("{direction}/{}", d.name()), Some(d))).collect()
            };
            tags.into_iter()
                .map(|(task, det)| {
                    let scores = match (&loaded, &pred) {
                        (Ok((_, target)), Some(p)) => Some(Scores::compute(target, p, det)),
                        _ => None,
                    };
                    MetricsRow { id, task, scores }
                })
                .collect()
        })
        .collect();
    MetricsReport { rows: per_id.into_iter().flatten().collect(), edge_columns: !detectors.is_empty() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_image(rng: &mut Rng, n: usize) -> Image {
        Image::new(n, n, (0..n * n).map(|_| rng.uniform() as f32).collect(), crate::image::Modality::A, 0)
    }

    #[test]
    fn constant_goldens() {
        let one = Image::filled(8, 8, 1.0);
        let half = Image::filled(8, 8, 0.5);
        let zero = Image::filled(8, 8, 0.0);
        assert!((psnr(&one, &half) - 6.0206).abs() < 1e-3);
        assert!((nmse(&one, &half) - 0.25).abs() < 1e-12);
        assert_eq!(ssim_global(&one, &one), 1.0);
        assert!((ssim_global(&one, &zero) - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12);
        assert_eq!(psnr(&one, &one), f64::INFINITY);
        assert!(psnr(&zero, &zero).is_nan());
        assert!(nmse(&zero, &one).is_nan());
        assert_eq!(nmse(&half, &half), 0.0);
    }

    #[test]
    fn nmse_is_scale_invariant() {
        let mut rng = Rng::new(4);
        let (y, g) = (random_image(&mut rng, 8), random_image(&mut rng, 8));
        let scale = |im: &Image| Image::new(8, 8, im.pixels.iter().map(|v| v * 0.5).collect(), im.modality, 0);
        assert!((nmse(&y, &g) - nmse(&scale(&y), &scale(&g))).abs() < 1e-12);
    }

    #[test]
    fn ssim_range_and_symmetry() {
        let mut rng = Rng::new(8);
        for _ in 0..1000 {
            let (y, g) = (random_image(&mut rng, 6), random_image(&mut rng, 6));
            let s = ssim_global(&y, &g);
            assert!((-1.0..=1.0).contains(&s));
            assert_eq!(s, ssim_global(&g, &y));
            assert!((ssim_global(&y, &y) - 1.0).abs() < 1e-9);
            assert!(s < 1.0 - 1e-9);
        }
    }

    #[test]
    fn psnr_anti_monotone_in_error() {
        let mut rng = Rng::new(2);
        let y = random_image(&mut rng, 8);
        let noise: Vec<f32> = (0..64).map(|_| rng.uniform() as f32 - 0.5).collect();
        let mut last = (f64::INFINITY, 0.0);
        for k in 1..6 {
            let s = 0.05 * k as f32;
            let g = Image::new(8, 8, y.pixels.iter().zip(&noise).map(|(v, n)| v + s * n).collect(), y.modality, 0);
            let (p, n) = (psnr(&y, &g), nmse(&y, &g));
            assert!(p <= last.0 && n >= last.1);
            last = (p, n);
        }
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(6.020599913), "6.0206");
        assert_eq!(format_sig(0.25), "0.25");
        assert_eq!(format_sig(123456.7), "123457");
        assert_eq!(format_sig(1234567.0), "1.23457e+06");
        assert_eq!(format_sig(9.9990001e-5), "9.999e-05");
        assert_eq!(format_sig(f64::INFINITY), "inf");
        assert_eq!(format_sig(0.0), "0");
    }

    #[test]
    fn aggregates_match_rows() {
        let rows = [20.0, 22.0, 24.0]
            .iter()
            .enumerate()
            .map(|(i, &p)| MetricsRow {
                id: i as u32,
                task: "A2B".into(),
                scores: Some(Scores { psnr_db: p, nmse: 0.1, ssim: 0.9, edge: None }),
            })
            .collect();
        let report = MetricsReport { rows, edge_columns: false };
        let agg = report.psnr();
        assert_eq!(agg.mean, 22.0);
        assert!((agg.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn csv_round_trips(vals in proptest::collection::vec((0.0f64..60.0, 0.0f64..2.0, -1.0f64..1.0), 1..6), edge in any::<bool>()) {
            let rows: Vec<MetricsRow> = vals.iter().enumerate().map(|(i, &(p, n, s))| MetricsRow {
                id: i as u32,
                task: if edge { "A2B/sobel".into() } else { "A2B".into() },
                scores: if i == 2 { None } else { Some(Scores { psnr_db: p, nmse: n, ssim: s, edge: edge.then_some((p, n)) }) },
            }).collect();
            let report = MetricsReport { rows, edge_columns: edge };
            let text = report.to_csv();
            let parsed = MetricsReport::parse_csv(&text, Path::new("r.csv")).unwrap();
            prop_assert_eq!(parsed.to_csv(), text);
            let again = MetricsReport::parse_csv(&parsed.to_csv(), Path::new("r.csv")).unwrap();
            prop_assert_eq!(again, parsed);
        }
    }
}
