//! Synthetic quadrant task and PGM image I/O.
//!
//! Each 32×32 RGB image is i.i.d. Gaussian noise except one 16×16 quadrant,
//! which also carries one of four period-4 binary textures. The texture is
//! the label; the quadrant holding it is the informative quadrant.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 4;
pub const NOISE_STD: f64 = 0.5;
pub const PATTERN_AMPLITUDE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[32, 32, 3]`
    pub image: Tensor<f32>,
    pub label: usize,
    /// Row-major quadrant index: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub informative_quadrant: usize,
    pub seed: u64,
    pub index: usize,
}

/// `±1` texture value of class `label` at pixel `(y, x)`.
pub fn pattern(label: usize, phase: usize, y: usize, x: usize) -> f64 {
    let bit = match label {
        0 => (y + phase) / 2 % 2,
        1 => (x + phase) / 2 % 2,
        2 => ((y + phase) / 2 + (x + phase) / 2) % 2,
        _ => (x + y + phase) / 2 % 2,
    };
    if bit == 0 {
        -1.0
    } else {
        1.0
    }
}

pub fn synthetic_sample(seed: u64, index: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let label = rng.gen_range(0..NUM_CLASSES);
    let quadrant = rng.gen_range(0..4);
    let phase = rng.gen_range(0..4);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let half = IMAGE_SIZE / 2;
    let (qy, qx) = (quadrant / 2 * half, quadrant % 2 * half);
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let inside = (qy..qy + half).contains(&y) && (qx..qx + half).contains(&x);
            let base = if inside {
                PATTERN_AMPLITUDE * pattern(label, phase, y - qy, x - qx)
            } else {
                0.0
            };
            for _ in 0..3 {
                data.push((base + noise.sample(&mut rng)) as f32);
            }
        }
    }
    SyntheticSample {
        image: Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE, 3], data).expect("consistent shape"),
        label,
        informative_quadrant: quadrant,
        seed,
        index,
    }
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn gen_synthetic(n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(invalid("gen_synthetic needs n >= 1"));
    }
    Ok(parallel::map_range(n, |i| synthetic_sample(seed, i)))
}

/// 8-bit or 16-bit greyscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt {
        what: "PGM image",
        detail: detail.into(),
    }
}

fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        match b[0] {
            b'#' if tok.is_empty() => {
                let mut line = Vec::new();
                r.read_until(b'\n', &mut line)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    if tok.is_empty() {
        return Err(corrupt("unexpected end of header"));
    }
    String::from_utf8(tok).map_err(|_| corrupt("non-ASCII header"))
}

fn header_num<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let t = next_token(r)?;
    t.parse().map_err(|_| corrupt(format!("bad {what} '{t}'")))
}

impl Pgm {
    pub fn new(width: usize, height: usize, maxval: u16, pixels: Vec<u16>) -> Result<Self> {
        if maxval == 0 || pixels.len() != width * height || pixels.iter().any(|&p| p > maxval) {
            return Err(invalid("PGM pixels must fill width × height and not exceed maxval"));
        }
        Ok(Self {
            width,
            height,
            maxval,
            pixels,
        })
    }

    /// Quantises `values` in `[0, 1]` (clamped) to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let px = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect();
        Self::new(width, height, 255, px)
    }

    /// Reads binary (`P5`) or plain (`P2`) PGM.
    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let magic = next_token(&mut r)?;
        let width = header_num(&mut r, "width")?;
        let height = header_num(&mut r, "height")?;
        let maxval = header_num(&mut r, "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(corrupt(format!("maxval {maxval} out of range")));
        }
        let n = width
            .checked_mul(height)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| corrupt("image too large"))?;
        let pixels = match magic.as_str() {
            "P5" => {
                let wide = maxval > 255;
                let mut bytes = vec![0u8; n * if wide { 2 } else { 1 }];
                r.read_exact(&mut bytes).map_err(|_| corrupt("truncated pixel data"))?;
                if wide {
                    bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
                } else {
                    bytes.into_iter().map(u16::from).collect()
                }
            }
            "P2" => (0..n)
                .map(|_| header_num(&mut r, "pixel").map(|v| v as u16))
                .collect::<Result<Vec<_>>>()?,
            other => return Err(corrupt(format!("unsupported magic '{other}'"))),
        };
        Self::new(width, height, maxval as u16, pixels).map_err(|_| corrupt("pixel exceeds maxval"))
    }

    /// Writes binary `P5`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n{}\n", self.width, self.height, self.maxval)?;
        if self.maxval > 255 {
            for p in &self.pixels {
                w.write_all(&p.to_be_bytes())?;
            }
        } else {
            let bytes: Vec<u8> = self.pixels.iter().map(|&p| p as u8).collect();
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Grey values mapped to `[-1, 1]` and repeated over three channels.
    pub fn to_image<T: Scalar>(&self) -> Tensor<T> {
        let m = self.maxval as f64;
        let data = self
            .pixels
            .iter()
            .flat_map(|&p| {
                let v = T::lit(2.0 * p as f64 / m - 1.0);
                [v, v, v]
            })
            .collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("consistent shape")
    }

    /// Channel mean of an `[H, W, 3]` image, mapping `[-1, 1]` linearly to `[0, 255]`.
    pub fn from_image<T: Scalar>(image: &Tensor<T>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(invalid(format!("expected [H, W, 3] image, got {s:?}")));
        }
        let unit: Vec<f64> = image
            .data()
            .chunks_exact(3)
            .map(|c| (c.iter().map(|v| v.as_f64()).sum::<f64>() / 3.0 + 1.0) / 2.0)
            .collect();
        Self::from_unit(s[1], s[0], &unit)
    }
}
