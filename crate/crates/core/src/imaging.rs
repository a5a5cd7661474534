//! Image I/O, the affine intensity transform to photon rates and back, and
//! seeded Poisson corruption.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_len, Error, Result};
use crate::likelihood::CountField;

/// Name of the generator behind every seeded draw in this crate.
pub const PRNG_NAME: &str = "chacha20 (rand_chacha 0.9, seed_from_u64)";

/// Grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    max_val: u32,
}

impl PixelImage {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, max_val: u32) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig(format!("empty image {rows}x{cols}")));
        }
        check_len(rows * cols, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite pixel value at {i}")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            max_val,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_val(&self) -> u32 {
        self.max_val
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedHeader(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("{what} out of range")))
    }
}

/// Parses a P2 (ASCII) or P5 (binary, 8- or 16-bit big-endian) PGM.
pub fn read_pgm(bytes: &[u8]) -> Result<PixelImage> {
    if bytes.len() < 2 {
        return Err(Error::MalformedHeader("file too short".into()));
    }
    let magic = String::from_utf8_lossy(&bytes[..2]).into_owned();
    let binary = match magic.as_str() {
        "P2" => false,
        "P5" => true,
        _ => return Err(Error::UnsupportedMagic(magic)),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if cur.pos < bytes.len() && !(bytes[cur.pos].is_ascii_whitespace() || bytes[cur.pos] == b'#') {
        return Err(Error::MalformedHeader("missing separator after magic".into()));
    }
    let width = cur.token("width")? as usize;
    let height = cur.token("height")? as usize;
    let max_val = cur.token("max_val")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("empty image {width}x{height}")));
    }
    if max_val == 0 || max_val > 65535 {
        return Err(Error::MalformedHeader(format!("max_val {max_val} outside 1..=65535")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::MalformedHeader("image dimensions overflow".into()))?;

    let mut values = Vec::with_capacity(n);
    if binary {
        match bytes.get(cur.pos) {
            Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::MalformedHeader("missing separator before raster".into())),
        }
        let data = &bytes[cur.pos..];
        let wide = max_val > 255;
        let per = if wide { 2 } else { 1 };
        if data.len() < n * per {
            return Err(Error::TruncatedData {
                expected: n,
                found: data.len() / per,
            });
        }
        for k in 0..n {
            let v = if wide {
                u16::from_be_bytes([data[2 * k], data[2 * k + 1]]) as u64
            } else {
                data[k] as u64
            };
            values.push(v);
        }
    } else {
        for k in 0..n {
            cur.skip_space_and_comments();
            if cur.pos >= bytes.len() {
                return Err(Error::TruncatedData { expected: n, found: k });
            }
            values.push(cur.token("sample")?);
        }
    }
    if let Some(v) = values.iter().find(|&&v| v > max_val) {
        return Err(Error::Format(format!("sample {v} exceeds max_val {max_val}")));
    }
    PixelImage::new(
        height,
        width,
        values.into_iter().map(|v| v as f64).collect(),
        max_val as u32,
    )
}

/// Emits binary PGM with max_val 255; values are rounded and clamped to
/// `[0, 255]`.
pub fn write_pgm(img: &PixelImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.cols, img.rows).into_bytes();
    out.extend(img.values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn read_pgm_file(path: &Path) -> Result<PixelImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    read_pgm(&bytes)
}

pub fn write_pgm_file(path: &Path, img: &PixelImage) -> Result<()> {
    std::fs::write(path, write_pgm(img)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Target photon-rate bounds of the intensity transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastParams {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl ContrastParams {
    pub fn new(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        let c = Self {
            lambda_min,
            lambda_max,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0 && self.lambda_min < self.lambda_max && self.lambda_max.is_finite()) {
            return Err(Error::InvalidHyper(format!(
                "contrast bounds need 0 < lambda_min < lambda_max, got ({}, {})",
                self.lambda_min, self.lambda_max
            )));
        }
        Ok(())
    }
}

impl Default for ContrastParams {
    fn default() -> Self {
        Self {
            lambda_min: 2.0,
            lambda_max: 25.0,
        }
    }
}

/// Observed pixel range recorded by the forward transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityRange {
    pub i_min: f64,
    pub i_max: f64,
}

/// `x_i = (λ_max − λ_min)/(I_max − I_min)·(I_i − I_min) + λ_min`.
pub fn intensity_forward(img: &PixelImage, c: &ContrastParams) -> Result<(Vec<f64>, IntensityRange)> {
    c.validate()?;
    let i_min = img.values.iter().copied().fold(f64::INFINITY, f64::min);
    let i_max = img.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if i_max <= i_min {
        return Err(Error::ConstantImage(i_min));
    }
    let slope = (c.lambda_max - c.lambda_min) / (i_max - i_min);
    let x = img
        .values
        .iter()
        .map(|&v| {
            if v == i_max {
                c.lambda_max
            } else {
                slope * (v - i_min) + c.lambda_min
            }
        })
        .collect();
    Ok((x, IntensityRange { i_min, i_max }))
}

/// The forward map for a previously recorded range, applied to any field
/// (values outside the range are extrapolated).
pub fn intensity_apply(values: &[f64], range: &IntensityRange, c: &ContrastParams) -> Vec<f64> {
    let slope = (c.lambda_max - c.lambda_min) / (range.i_max - range.i_min);
    values.iter().map(|&v| slope * (v - range.i_min) + c.lambda_min).collect()
}

/// Exact affine inverse of [`intensity_forward`]. No clamping.
pub fn intensity_inverse(x: &[f64], range: &IntensityRange, c: &ContrastParams) -> Vec<f64> {
    let slope = (range.i_max - range.i_min) / (c.lambda_max - c.lambda_min);
    x.iter().map(|&v| slope * (v - c.lambda_min) + range.i_min).collect()
}

/// Poisson draw: multiplication method below rate 30, transformed
/// rejection (PTRS) above.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda < 30.0 {
        let limit = (-lambda).exp();
        let mut k = 0u64;
        let mut p: f64 = rng.random();
        while p > limit {
            k += 1;
            p *= rng.random::<f64>();
        }
        return k;
    }
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln() <= -lambda + k * loglam - ln_gamma(k + 1.0) {
            return k as u64;
        }
    }
}

/// Independent Poisson draws with rates `x`, in pixel order, from a
/// ChaCha20 generator seeded with `seed`.
pub fn corrupt_poisson(x: &[f64], rows: usize, cols: usize, seed: u64) -> Result<CountField> {
    check_len(rows * cols, x.len())?;
    if let Some(index) = x.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::NonPositiveRate { index, value: x[index] });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let counts = x.iter().map(|&l| sample_poisson(&mut rng, l)).collect();
    CountField::new(rows, cols, counts)
}

/// Sidecar written next to corrupted counts so restoration can invert the
/// intensity transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMeta {
    pub seed: u64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub i_min: f64,
    pub i_max: f64,
}

impl CorruptionMeta {
    pub fn contrast(&self) -> Result<ContrastParams> {
        ContrastParams::new(self.lambda_min, self.lambda_max)
    }

    pub fn range(&self) -> IntensityRange {
        IntensityRange {
            i_min: self.i_min,
            i_max: self.i_max,
        }
    }
}

/// Central `rows × cols` window.
pub fn center_crop(img: &PixelImage, rows: usize, cols: usize) -> Result<PixelImage> {
    if rows == 0 || cols == 0 || rows > img.rows || cols > img.cols {
        return Err(Error::InvalidConfig(format!(
            "cannot crop {}x{} image to {rows}x{cols}",
            img.rows, img.cols
        )));
    }
    let r0 = (img.rows - rows) / 2;
    let c0 = (img.cols - cols) / 2;
    let mut values = Vec::with_capacity(rows * cols);
    for r in r0..r0 + rows {
        values.extend_from_slice(&img.values[r * img.cols + c0..r * img.cols + c0 + cols]);
    }
    PixelImage::new(rows, cols, values, img.max_val)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Writes a row-major field as a headerless `rows × cols` CSV matrix with
/// round-trip precision.
pub fn write_field_csv<W: Write, T: std::fmt::Debug>(out: W, values: &[T], rows: usize, cols: usize) -> Result<()> {
    check_len(rows * cols, values.len())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for r in 0..rows {
        w.write_record(values[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:?}")))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("writing csv", e))
}

/// Reads a headerless CSV matrix; returns `(rows, cols, values)`.
pub fn read_field_csv<R: Read, T: std::str::FromStr>(input: R) -> Result<(usize, usize, Vec<T>)> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rows == 0 {
            cols = rec.len();
        }
        rows += 1;
        for field in rec.iter() {
            values.push(
                field
                    .parse()
                    .map_err(|_| Error::Format(format!("bad value {field:?} on row {rows}")))?,
            );
        }
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format("empty matrix".into()));
    }
    Ok((rows, cols, values))
}

pub fn write_counts_csv<W: Write>(out: W, y: &CountField) -> Result<()> {
    write_field_csv(out, y.counts(), y.rows(), y.cols())
}

pub fn read_counts_csv<R: Read>(input: R) -> Result<CountField> {
    let (rows, cols, values) = read_field_csv::<R, u64>(input)?;
    CountField::new(rows, cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn p2_example() {
        let img = read_pgm(b"P2 2 2 255\n0 10 20 255\n").unwrap();
        assert_eq!((img.rows(), img.cols()), (2, 2));
        assert_eq!(img.values(), &[0.0, 10.0, 20.0, 255.0]);
        let with_comments = read_pgm(b"P2\n# comment\n2 # inline\n2\n255\n0 10\n20 255").unwrap();
        assert_eq!(with_comments, img);
    }

    #[test]
    fn p5_sixteen_bit() {
        let mut b = b"P5\n2 1\n65535\n".to_vec();
        b.extend_from_slice(&[0x01, 0x02, 0xff, 0xff]);
        let img = read_pgm(&b).unwrap();
        assert_eq!(img.values(), &[258.0, 65535.0]);
        assert_eq!(img.max_val(), 65535);
    }

    #[test]
    fn p5_round_trip_is_byte_identical() {
        let mut b = b"P5\n3 2\n255\n".to_vec();
        b.extend_from_slice(&[0, 1, 2, 128, 254, 255]);
        let img = read_pgm(&b).unwrap();
        assert_eq!(write_pgm(&img), b);
        assert_eq!(read_pgm(&write_pgm(&img)).unwrap().values(), img.values());
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(read_pgm(b"P6 1 1 255\n\0\0\0"), Err(Error::UnsupportedMagic(_))));
        assert!(matches!(read_pgm(b"P2 2 x 255"), Err(Error::MalformedHeader(_))));
        assert!(matches!(read_pgm(b"P2 2 2 70000\n1 2 3 4"), Err(Error::MalformedHeader(_))));
        assert!(matches!(
            read_pgm(b"P2 2 2 255\n1 2 3"),
            Err(Error::TruncatedData { expected: 4, found: 3 })
        ));
        assert!(matches!(
            read_pgm(b"P5 2 2 255\n\x01\x02"),
            Err(Error::TruncatedData { expected: 4, found: 2 })
        ));
    }

    #[test]
    fn write_clamps_and_rounds() {
        let img = PixelImage::new(1, 4, vec![-3.0, 12.4, 12.6, 300.0], 255).unwrap();
        assert_eq!(&write_pgm(&img)[11..], &[0, 12, 13, 255]);
    }

    #[test]
    fn forward_transform_examples() {
        let img = PixelImage::new(1, 3, vec![0.0, 127.5, 255.0], 255).unwrap();
        let c = ContrastParams::new(2.0, 25.0).unwrap();
        let (x, r) = intensity_forward(&img, &c).unwrap();
        assert_eq!(x[0], 2.0);
        assert_eq!(x[2], 25.0);
        assert_relative_eq!(x[1], 13.5, epsilon = 1e-12);
        assert_eq!((r.i_min, r.i_max), (0.0, 255.0));
        let back = intensity_inverse(&[2.0, 13.5, 25.0], &r, &c);
        assert_eq!(back[0], 0.0);
        assert_relative_eq!(back[1], 127.5, epsilon = 1e-12);
        assert_relative_eq!(back[2], 255.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_errors() {
        let flat = PixelImage::new(1, 2, vec![4.0, 4.0], 255).unwrap();
        assert!(matches!(
            intensity_forward(&flat, &ContrastParams::default()),
            Err(Error::ConstantImage(_))
        ));
        assert!(matches!(ContrastParams::new(25.0, 2.0), Err(Error::InvalidHyper(_))));
        assert!(ContrastParams::new(0.0, 2.0).is_err());
    }

    #[test]
    fn corruption_support_and_determinism() {
        let x = vec![0.01; 10_000];
        let y = corrupt_poisson(&x, 100, 100, 5).unwrap();
        assert!(y.counts().contains(&0));
        assert_eq!(y, corrupt_poisson(&x, 100, 100, 5).unwrap());
        assert!(matches!(
            corrupt_poisson(&[1.0, 0.0], 1, 2, 0),
            Err(Error::NonPositiveRate { index: 1, .. })
        ));
    }

    #[test]
    fn crop_center() {
        let img = PixelImage::new(4, 5, (0..20).map(f64::from).collect(), 255).unwrap();
        let c = center_crop(&img, 2, 3).unwrap();
        assert_eq!(c.values(), &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0]);
        assert!(center_crop(&img, 5, 1).is_err());
    }

    #[test]
    fn counts_csv_round_trip() {
        let y = CountField::new(2, 3, vec![0, 5, 300, 7, 1, 65536]).unwrap();
        let mut buf = Vec::new();
        write_counts_csv(&mut buf, &y).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "0,5,300\n7,1,65536\n");
        assert_eq!(read_counts_csv(&buf[..]).unwrap(), y);
        let v = [0.1, 1.0 / 3.0, -2.5e-17, 7.0];
        let mut buf = Vec::new();
        write_field_csv(&mut buf, &v, 2, 2).unwrap();
        let (r, c, back) = read_field_csv::<_, f64>(&buf[..]).unwrap();
        assert_eq!((r, c), (2, 2));
        assert_eq!(back, v);
    }
}
