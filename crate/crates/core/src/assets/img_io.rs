//! Image file I/O: 8-bit PNG for previews and PFM for lossless float data.

use super::Image;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Saves an image as 8-bit PNG. One-channel data is expanded to gray RGB;
/// values are clamped to `[0,1]` and rounded.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.c {
        1 | 3 => {
            let mut buf = image::RgbImage::new(img.w as u32, img.h as u32);
            for y in 0..img.h {
                for x in 0..img.w {
                    let px = img.pixel(y, x);
                    let rgb = if img.c == 1 {
                        [to_u8(px[0]); 3]
                    } else {
                        [to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]
                    };
                    buf.put_pixel(x as u32, y as u32, image::Rgb(rgb));
                }
            }
            buf.save(path)
                .map_err(|e| Error::parse(path, e.to_string()))
        }
        4 => {
            let mut buf = image::RgbaImage::new(img.w as u32, img.h as u32);
            for y in 0..img.h {
                for x in 0..img.w {
                    let px = img.pixel(y, x);
                    buf.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgba([to_u8(px[0]), to_u8(px[1]), to_u8(px[2]), to_u8(px[3])]),
                    );
                }
            }
            buf.save(path)
                .map_err(|e| Error::parse(path, e.to_string()))
        }
        c => Err(Error::Unsupported(format!("cannot save {c}-channel PNG"))),
    }
}

/// Loads a PNG as float RGB (or RGBA when the file has alpha), values in
/// `[0,1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let dyn_img = image::open(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
    let (c, raw): (usize, Vec<u8>) = match dyn_img.color().has_alpha() {
        true => (4, dyn_img.into_rgba8().into_raw()),
        false => (3, dyn_img.into_rgb8().into_raw()),
    };
    Ok(Image {
        h,
        w,
        c,
        data: raw.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Saves 1- or 3-channel float data as PFM (little-endian, bottom-up rows).
pub fn save_pfm(img: &Image, path: &Path) -> Result<()> {
    let header = match img.c {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Unsupported(format!("cannot save {c}-channel PFM"))),
    };
    let mut out = Vec::with_capacity(32 + img.data.len() * 4);
    write!(out, "{header}\n{} {}\n-1.0\n", img.w, img.h).map_err(|e| Error::io(path, e))?;
    for y in (0..img.h).rev() {
        for x in 0..img.w {
            for &v in img.pixel(y, x) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a PFM file written by [`save_pfm`] (big-endian inputs are also
/// accepted).
pub fn load_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;
    let mut token = || -> Result<String> {
        let mut s = Vec::new();
        while cursor < bytes.len() && (bytes[cursor] as char).is_ascii_whitespace() {
            cursor += 1;
        }
        while cursor < bytes.len() && !(bytes[cursor] as char).is_ascii_whitespace() {
            s.push(bytes[cursor]);
            cursor += 1;
        }
        // A single whitespace byte terminates the header tokens.
        if cursor < bytes.len() {
            cursor += 1;
        }
        String::from_utf8(s).map_err(|e| Error::parse(path, e.to_string()))
    };
    let magic = token()?;
    let c = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::parse(path, format!("bad PFM magic {other:?}"))),
    };
    let w: usize = token()?
        .parse()
        .map_err(|_| Error::parse(path, "bad width"))?;
    let h: usize = token()?
        .parse()
        .map_err(|_| Error::parse(path, "bad height"))?;
    let scale: f32 = token()?
        .parse()
        .map_err(|_| Error::parse(path, "bad scale"))?;
    let little_endian = scale < 0.0;
    let need = w * h * c * 4;
    let payload = &bytes[cursor..];
    if payload.len() != need {
        return Err(Error::parse(
            path,
            format!("payload is {} bytes, expected {need}", payload.len()),
        ));
    }
    let mut img = Image::new(h, w, c);
    let mut rd = payload;
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                let mut b = [0u8; 4];
                rd.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
                let v = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                img.pixel_mut(y, x)[ch] = v;
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let mut img = Image::new(h, w, c);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.137).sin();
        }
        img
    }

    #[test]
    fn pfm_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let img = ramp(5, 7, c);
            let p = dir.path().join(format!("t{c}.pfm"));
            save_pfm(&img, &p).unwrap();
            let back = load_pfm(&p).unwrap();
            assert_eq!(img, back);
        }
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ramp(6, 4, 3);
        for v in &mut img.data {
            *v = v.abs().min(1.0);
        }
        let p = dir.path().join("t.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.c, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
