//! Token CSV files and PGM heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dydila_core::{Matrix, Real, SeededRng};

/// Bound of the seeded input tokens used when no input file is given. The
/// unnormalized operator is cubic in its input, so deep stacks need small
/// tokens to stay finite.
pub const INPUT_BOUND: f64 = 0.1;

/// Seeded tokens, independent of the weight stream.
pub fn seeded_tokens(seed: u64, n: usize, d: usize) -> Matrix<f64> {
    SeededRng::new(seed ^ 0x746f_6b65_6e73).uniform_matrix(n, d, INPUT_BOUND)
}

/// Header `c0,…,c{d-1}`, then one token per line.
pub fn tokens_to_csv<T: Real>(x: &Matrix<T>) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..x.cols()).map(|c| format!("c{c}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in x.iter_rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn tokens_from_csv(text: &str) -> Result<Matrix<f64>> {
    let mut lines = text.lines();
    let header = lines.next().context("empty token file")?;
    let d = header.split(',').count();
    let mut data = Vec::new();
    let mut n = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .with_context(|| format!("line {}: bad number `{field}`", i + 2))?;
            data.push(v);
        }
        ensure!(
            data.len() - before == d,
            "line {}: {} values, header has {d}",
            i + 2,
            data.len() - before
        );
        n += 1;
    }
    ensure!(n > 0, "token file has no rows");
    Ok(Matrix::from_vec_finite(n, d, data)?)
}

pub fn read_tokens(path: &Path) -> Result<Matrix<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    tokens_from_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Binary P5, 8-bit, min-max scaled per image; a constant image is all 128.
pub fn pgm(values: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    ensure!(values.len() == h * w, "{} values for a {h}×{w} image", values.len());
    if values.iter().any(|v| !v.is_finite()) {
        bail!("heatmap values must be finite");
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    Ok(out)
}

/// Parsed P5 header and pixels.
#[derive(Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Strict reader for the files [`pgm`] writes: single-space/newline separated
/// header, maxval 255, exact pixel count.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(pos < bytes.len(), "truncated PGM header");
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
        pos += 1;
    }
    ensure!(fields[0] == "P5", "not a binary PGM (magic `{}`)", fields[0]);
    let width: usize = fields[1].parse()?;
    let height: usize = fields[2].parse()?;
    ensure!(fields[3] == "255", "maxval must be 255");
    let pixels = bytes[pos..].to_vec();
    ensure!(
        pixels.len() == width * height,
        "{} pixels for {width}×{height}",
        pixels.len()
    );
    Ok(Pgm { width, height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_csv_round_trip() {
        let x = seeded_tokens(3, 5, 4);
        assert!(x.max_abs() <= INPUT_BOUND);
        assert_eq!(tokens_from_csv(&tokens_to_csv(&x)).unwrap(), x);
        assert!(tokens_from_csv("c0,c1\n1,2\n3\n").is_err());
        assert!(tokens_from_csv("c0\nnan\n").is_err());
    }

    #[test]
    fn heatmap_scaling() {
        let img = parse_pgm(&pgm(&[0.0, 0.5, 1.0, 2.0], 2, 2).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 64, 128, 255]);
        let flat = parse_pgm(&pgm(&[0.3; 6], 2, 3).unwrap()).unwrap();
        assert_eq!((flat.width, flat.height), (3, 2));
        assert!(flat.pixels.iter().all(|&p| p == 128));
        assert!(pgm(&[1.0], 2, 2).is_err());
    }
}
