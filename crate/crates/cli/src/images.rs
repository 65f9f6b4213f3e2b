//! Image grids as binary PGM (grayscale) or PPM (RGB).

use std::path::Path;

use taxonnet::io::write_atomic;
use taxonnet::{Error, Result};

pub fn grid_name(stem: &str, shape: [usize; 3]) -> String {
    if shape[0] == 3 {
        format!("{stem}.ppm")
    } else {
        format!("{stem}.pgm")
    }
}

/// Lays `images` (CHW values in `[0, 1]`) out in a near-square grid with a
/// one-pixel gap.
pub fn write_grid(path: &Path, images: &[&[f64]], shape: [usize; 3]) -> Result<()> {
    let [c, h, w] = shape;
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("cannot draw images with {c} channels")));
    }
    let n = images.len().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut px = vec![0u8; gw * gh * c];
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = img[ch * h * w + y * w + x].clamp(0.0, 1.0);
                    px[((oy + y) * gw + ox + x) * c + ch] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    write_atomic(path, &out)
}
