//! Plain (P2) greyscale images.
//!
//! Values are quantised to `0..=65535` relative to the largest value, which
//! is recorded in a `# scale <max>` comment so the original magnitudes can
//! be recovered to within `max / 131070`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAXVAL: u32 = 65535;

#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    /// Row-major grey levels.
    pub pixels: Vec<u32>,
    /// Value represented by `maxval`, when recorded.
    pub scale: Option<f64>,
}

impl Pgm {
    /// Pixels mapped back to the recorded scale.
    pub fn values(&self) -> Vec<f64> {
        let s = self.scale.unwrap_or(1.0);
        self.pixels.iter().map(|&p| p as f64 / self.maxval as f64 * s).collect()
    }
}

/// Encodes non-negative finite values as a P2 image.
pub fn encode(width: usize, height: usize, values: &[f64]) -> Result<String> {
    if values.len() != width * height {
        return Err(Error::Malformed(format!("{} values for a {width}x{height} image", values.len())));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Malformed(format!("PGM values must be finite and non-negative, got {v}")));
    }
    let scale = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P2\n# scale {scale:e}\n{width} {height}\n{MAXVAL}\n");
    for row in values.chunks(width.max(1)) {
        let mut first = true;
        for &v in row {
            let level = if scale > 0.0 { (v / scale * MAXVAL as f64).round() as u32 } else { 0 };
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{level}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    fs::write(path, encode(width, height, values)?).map_err(Error::io(path))
}

/// Parses a P2 image, honouring `#` comments anywhere between tokens.
pub fn parse(text: &str) -> Result<Pgm> {
    let mut scale = None;
    let mut tokens = Vec::new();
    for line in text.lines() {
        let (content, comment) = match line.find('#') {
            Some(i) => (&line[..i], Some(&line[i + 1..])),
            None => (line, None),
        };
        if let Some(rest) = comment.and_then(|c| c.trim().strip_prefix("scale")) {
            scale = rest.trim().parse::<f64>().ok();
        }
        tokens.extend(content.split_whitespace());
    }
    let mut it = tokens.into_iter();
    if it.next() != Some("P2") {
        return Err(Error::Malformed("PGM must start with P2".into()));
    }
    let mut number = |what: &str| -> Result<u32> {
        it.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("PGM: bad or missing {what}")))
    };
    let width = number("width")? as usize;
    let height = number("height")? as usize;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > MAXVAL {
        return Err(Error::Malformed(format!("PGM maxval {maxval} outside 1..=65535")));
    }
    let pixels = (0..width * height).map(|_| number("pixel")).collect::<Result<Vec<_>>>()?;
    if let Some(p) = pixels.iter().find(|&&p| p > maxval) {
        return Err(Error::Malformed(format!("PGM pixel {p} exceeds maxval {maxval}")));
    }
    if it.next().is_some() {
        return Err(Error::Malformed("PGM has trailing data".into()));
    }
    Ok(Pgm { width, height, maxval, pixels, scale })
}

pub fn read(path: &Path) -> Result<Pgm> {
    parse(&fs::read_to_string(path).map_err(Error::io(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_image_text() {
        let text = encode(3, 2, &[0.0, 0.5, 1.0, 0.25, 0.0, 1.0]).unwrap();
        assert_eq!(text, "P2\n# scale 1e0\n3 2\n65535\n0 32768 65535\n16384 0 65535\n");
        let p = parse(&text).unwrap();
        assert_eq!((p.width, p.height, p.maxval, p.scale), (3, 2, 65535, Some(1.0)));
    }

    #[test]
    fn values_round_trip_within_half_a_level() {
        let v = [0.1, 0.0, 0.37, 0.52, 0.9, 0.05];
        let p = parse(&encode(2, 3, &v).unwrap()).unwrap();
        for (a, b) in p.values().iter().zip(v) {
            assert!((a - b).abs() <= 0.9 / 131070.0 + 1e-15);
        }
    }

    #[test]
    fn rejects_negative_or_mismatched_input() {
        assert!(encode(2, 1, &[0.1, -0.1]).is_err());
        assert!(encode(2, 2, &[0.1]).is_err());
        assert!(parse("P5\n1 1\n255\n0\n").is_err());
        assert!(parse("P2\n1 1\n255\n300\n").is_err());
        assert!(parse("P2\n2 1\n255\n3\n").is_err());
    }

    #[test]
    fn all_zero_map_stays_zero() {
        let p = parse(&encode(2, 1, &[0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p.pixels, [0, 0]);
        assert_eq!(p.values(), [0.0, 0.0]);
    }
}
