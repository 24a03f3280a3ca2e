use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::A => "A",
            Modality::B => "B",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Modality::A),
            "B" | "b" => Ok(Modality::B),
            _ => Err(Error::config(format!("unknown modality `{s}`"))),
        }
    }
}

/// Synthesis direction between the two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    AToB,
    BToA,
}

impl Direction {
    pub fn source(self) -> Modality {
        match self {
            Direction::AToB => Modality::A,
            Direction::BToA => Modality::B,
        }
    }

    pub fn target(self) -> Modality {
        self.source().other()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}2{}", self.source(), self.target())
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A2B" | "A->B" => Ok(Direction::AToB),
            "B2A" | "B->A" => Ok(Direction::BToA),
            _ => Err(Error::config(format!("unknown direction `{s}` (expected A2B or B2A)"))),
        }
    }
}

/// Single-channel intensity image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub modality: Modality,
    pub id: u32,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, modality: Modality, id: u32) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel buffer does not match {height}x{width}");
        Image { height, width, pixels, modality, id }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image::new(height, width, vec![0.0; height * width], Modality::A, 0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image::new(height, width, vec![value; height * width], Modality::A, 0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                pixels.push(f(i, j));
            }
        }
        Image::new(height, width, pixels, Modality::A, 0)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.pixels[i * self.width + j]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn with_meta(mut self, modality: Modality, id: u32) -> Self {
        self.modality = modality;
        self.id = id;
        self
    }

    pub fn transpose(&self) -> Image {
        let mut out = Image::from_fn(self.width, self.height, |i, j| self.get(j, i));
        out.modality = self.modality;
        out.id = self.id;
        out
    }

    pub fn is_valid_intensity(&self) -> bool {
        self.pixels.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p))
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.len() as f64
    }
}
