//! Sobel and Prewitt gradient-magnitude maps.

use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Detector {
    Sobel,
    Prewitt,
}

impl Detector {
    /// Centre weight of the smoothing direction: 2 for Sobel, 1 for Prewitt.
    fn centre(self) -> f64 {
        match self {
            Detector::Sobel => 2.0,
            Detector::Prewitt => 1.0,
        }
    }

    /// Largest magnitude reachable on [0, 1] inputs.
    pub fn max_magnitude(self) -> f64 {
        match self {
            Detector::Sobel => 4.0 * std::f64::consts::SQRT_2,
            Detector::Prewitt => 3.0 * std::f64::consts::SQRT_2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Detector::Sobel => "sobel",
            Detector::Prewitt => "prewitt",
        }
    }
}

impl std::str::FromStr for Detector {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sobel" => Ok(Detector::Sobel),
            "prewitt" => Ok(Detector::Prewitt),
            other => Err(crate::Error::config(format!("unknown edge detector `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub detector: Detector,
}

impl EdgeMap {
    pub fn as_image(&self) -> Image {
        Image::new(self.height, self.width, self.pixels.clone(), crate::image::Modality::A, 0)
    }
}

/// Unnormalized gradient components at every pixel, replicate-padded.
pub fn gradients(img: &Image, detector: Detector) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.height as isize, img.width as isize);
    let px = |i: isize, j: isize| img.get(i.clamp(0, h - 1) as usize, j.clamp(0, w - 1) as usize) as f64;
    let c = detector.centre();
    let mut gx = Vec::with_capacity(img.len());
    let mut gy = Vec::with_capacity(img.len());
    for i in 0..h {
        for j in 0..w {
            gx.push(
                (px(i - 1, j + 1) - px(i - 1, j - 1))
                    + c * (px(i, j + 1) - px(i, j - 1))
                    + (px(i + 1, j + 1) - px(i + 1, j - 1)),
            );
            gy.push(
                (px(i + 1, j - 1) - px(i - 1, j - 1))
                    + c * (px(i + 1, j) - px(i - 1, j))
                    + (px(i + 1, j + 1) - px(i - 1, j + 1)),
            );
        }
    }
    (gx, gy)
}

pub fn edge_map(img: &Image, detector: Detector) -> EdgeMap {
    let (gx, gy) = gradients(img, detector);
    let norm = detector.max_magnitude();
    let pixels = gx
        .iter()
        .zip(&gy)
        .map(|(x, y)| ((x * x + y * y).sqrt() / norm).clamp(0.0, 1.0) as f32)
        .collect();
    EdgeMap { height: img.height, width: img.width, pixels, detector }
}

pub fn sobel_edge_map(img: &Image) -> EdgeMap {
    edge_map(img, Detector::Sobel)
}

pub fn prewitt_edge_map(img: &Image) -> EdgeMap {
    edge_map(img, Detector::Prewitt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn ramp() -> Image {
        Image::from_fn(8, 8, |_, j| 0.1 * j as f32)
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        Image::from_fn(12, 12, |_, _| rng.uniform() as f32)
    }

    #[test]
    fn constant_gives_zero() {
        for d in [Detector::Sobel, Detector::Prewitt] {
            assert!(edge_map(&Image::filled(8, 8, 0.42), d).pixels.iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn ramp_interior_magnitude() {
        for d in [Detector::Sobel, Detector::Prewitt] {
            let e = edge_map(&ramp(), d);
            for i in 0..8 {
                for j in 1..7 {
                    assert!((e.pixels[i * 8 + j] - 0.141_421).abs() < 1e-5, "{d:?} at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn transpose_symmetry_is_exact() {
        for d in [Detector::Sobel, Detector::Prewitt] {
            let img = random_image(5);
            let a = edge_map(&img.transpose(), d).as_image();
            let b = edge_map(&img, d).as_image().transpose();
            assert_eq!(a.pixels, b.pixels);
            let v = edge_map(&ramp().transpose(), d);
            assert!((v.pixels[3 * 8 + 2] - 0.141_421).abs() < 1e-5);
        }
    }

    #[test]
    fn rotation_equivariance() {
        let img = random_image(9);
        let n = img.height;
        let rot = Image::from_fn(n, n, |i, j| img.get(n - 1 - j, i));
        for d in [Detector::Sobel, Detector::Prewitt] {
            let e = edge_map(&img, d);
            let er = edge_map(&rot, d);
            for i in 0..n {
                for j in 0..n {
                    assert!((er.pixels[i * n + j] - e.pixels[(n - 1 - j) * n + i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn output_range_and_linearity() {
        let img = random_image(2);
        for d in [Detector::Sobel, Detector::Prewitt] {
            assert!(edge_map(&img, d).pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            let half = Image::from_fn(12, 12, |i, j| 0.25 * img.get(i, j));
            let twice = Image::from_fn(12, 12, |i, j| 0.5 * img.get(i, j));
            let (hx, hy) = gradients(&half, d);
            let (tx, ty) = gradients(&twice, d);
            for k in 0..hx.len() {
                let mh = (hx[k] * hx[k] + hy[k] * hy[k]).sqrt();
                let mt = (tx[k] * tx[k] + ty[k] * ty[k]).sqrt();
                assert!((mt - 2.0 * mh).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn worst_case_stays_normalized() {
        // Checkerboard-like corner maximizes both components.
        let img = Image::from_fn(3, 3, |i, j| if i + j >= 2 { 1.0 } else { 0.0 });
        let e = sobel_edge_map(&img);
        assert!(e.pixels.iter().all(|&p| p <= 1.0));
    }
}
