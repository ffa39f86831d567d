use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage, RgbaImage};

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB from a channel-planar image: `⌊255·v + ½⌋`, clamped.
pub fn to_rgb8(rgb: &[f64], width: usize, height: usize) -> Vec<u8> {
    let hw = width * height;
    let mut out = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            let v = (255.0 * rgb[c * hw + p] + 0.5).floor();
            out.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn check(rgb: &[f64], width: usize, height: usize) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::shape("save_image", format!("{} values for {width}×{height}×3", rgb.len())));
    }
    Ok(())
}

pub fn save_png(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    check(rgb, width, height)?;
    let img = RgbImage::from_raw(width as u32, height as u32, to_rgb8(rgb, width, height))
        .expect("buffer sized above");
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// PNG with the coverage `alpha` (one value per pixel) in the fourth channel.
pub fn save_png_rgba(path: &Path, rgb: &[f64], alpha: &[f64], width: usize, height: usize) -> Result<()> {
    check(rgb, width, height)?;
    if alpha.len() != width * height {
        return Err(Error::shape("save_image", "alpha plane size"));
    }
    let rgb8 = to_rgb8(rgb, width, height);
    let mut buf = Vec::with_capacity(4 * width * height);
    for (p, a) in alpha.iter().enumerate() {
        buf.extend_from_slice(&rgb8[3 * p..3 * p + 3]);
        buf.push((255.0 * a + 0.5).floor().clamp(0.0, 255.0) as u8);
    }
    let img = RgbaImage::from_raw(width as u32, height as u32, buf).expect("buffer sized above");
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Binary PPM (P6).
pub fn save_ppm(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    check(rgb, width, height)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
    enc.write_image(&to_rgb8(rgb, width, height), width as u32, height as u32, ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Reads an 8-bit PNG into a channel-planar `[0, 1]` image plus its alpha channel.
pub fn load_png(path: &Path) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let img = image::open(path)?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = w * h;
    let mut rgb = vec![0.0; 3 * hw];
    let mut alpha = vec![0.0; hw];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            rgb[c * hw + p] = px.0[c] as f64 / 255.0;
        }
        alpha[p] = px.0[3] as f64 / 255.0;
    }
    Ok((w, h, rgb, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        // planes: R = [0, 1], G = [½, 0.4999]/255, B = [2, −1]
        let rgb = [0.0, 1.0, 0.5 / 255.0, 0.4999 / 255.0, 2.0, -1.0];
        assert_eq!(to_rgb8(&rgb, 2, 1), vec![0, 1, 255, 255, 0, 0]);
    }

    #[test]
    fn ppm_header_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let ppm = dir.path().join("a.ppm");
        save_ppm(&ppm, &rgb, 2, 2).unwrap();
        let bytes = std::fs::read(&ppm).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert!(bytes.ends_with(&to_rgb8(&rgb, 2, 2)));
        let png = dir.path().join("a.png");
        save_png(&png, &rgb, 2, 2).unwrap();
        let (w, h, back, _) = load_png(&png).unwrap();
        assert_eq!((w, h), (2, 2));
        for (a, b) in rgb.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        save_png_rgba(&png, &rgb, &[1.0, 0.5, 0.0, 0.2], 2, 2).unwrap();
        let (_, _, back2, alpha) = load_png(&png).unwrap();
        assert_eq!(back, back2);
        assert_eq!(alpha, vec![1.0, 128.0 / 255.0, 0.0, 51.0 / 255.0]);
    }
}
