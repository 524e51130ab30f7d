//! Binary greyscale (P5) PGM output.

use std::io::Write;

use crate::error::{Error, Result};

pub fn write_pgm<W: Write>(mut out: W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Format(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    Ok(())
}

/// Map `values` (row-major `h × w`) linearly onto 0..=255 using `[lo, hi]`,
/// then upscale each cell to a `cell × cell` block.
pub fn grid_to_gray(values: &[f64], h: usize, w: usize, lo: f64, hi: f64, cell: usize) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = vec![0u8; h * w * cell * cell];
    let row_len = w * cell;
    for r in 0..h * cell {
        for c in 0..row_len {
            let v = values[(r / cell) * w + c / cell];
            let g = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0);
            out[r * row_len + c] = g as u8;
        }
    }
    out
}

/// Like [`grid_to_gray`] with the range taken from the data.
pub fn grid_to_gray_auto(values: &[f64], h: usize, w: usize, cell: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    grid_to_gray(values, h, w, lo, hi, cell)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 2, 1, &[0, 255]).unwrap();
        assert_eq!(&buf[..11], b"P5\n2 1\n255\n");
        assert_eq!(&buf[11..], &[0, 255]);
        assert!(write_pgm(&mut Vec::new(), 2, 2, &[0]).is_err());
    }

    #[test]
    fn upscales_cells() {
        let g = grid_to_gray(&[0.0, 1.0], 1, 2, 0.0, 1.0, 2);
        assert_eq!(g, vec![0, 0, 255, 255, 0, 0, 255, 255]);
        let flat = grid_to_gray_auto(&[3.0, 3.0], 1, 2, 1);
        assert_eq!(flat, vec![0, 0]);
    }
}
