//! File formats: grayscale plane PNGs, mask and normal PNGs, and the
//! little-endian float binaries for Stokes images (`PSTK`) and depth (`PDEP`).
//!
//! Binary layout: 4-byte magic, `u32` width, `u32` height, `u32` reserved
//! (0), then each plane as row-major `f32` little-endian.

use crate::error::{check_dims, Error, Result};
use crate::normal::{decode_normals, encode_normals, DecodeStats, EncodedNormalImage, NormalMap};
use crate::polar::{Analyzer, Mask, Plane, PolarizationStack, StokesImage};
use image::{ImageBuffer, Luma, Rgb};
use ndarray::Array3;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const STOKES_MAGIC: &[u8; 4] = b"PSTK";
pub const DEPTH_MAGIC: &[u8; 4] = b"PDEP";
const HEADER_LEN: usize = 16;

pub const MASK_FILE: &str = "mask.png";
pub const NORMAL_GT_FILE: &str = "normal_gt.png";

/// Bit depth for written planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    Eight,
    #[default]
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(Self::Eight),
            16 => Ok(Self::Sixteen),
            b => Err(Error::InvalidValue(format!("unsupported bit depth {b}"))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Self::Eight => 8,
            Self::Sixteen => 16,
        }
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn save_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn to_usize(v: u32) -> usize {
    v as usize
}

/// Reads an 8- or 16-bit grayscale PNG scaled to `[0, 1]` by the max code.
pub fn read_plane_png(path: &Path) -> Result<Plane> {
    let img = open_image(path)?;
    let (w, h) = (to_usize(img.width()), to_usize(img.height()));
    let data: Vec<f64> = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(b) => {
            b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        other => {
            return Err(Error::format(
                path,
                format!("expected 8/16-bit grayscale PNG, found {:?}", other.color()),
            ))
        }
    };
    Ok(Plane::from_shape_vec((h, w), data).expect("shape"))
}

/// Writes a plane clamped to `[0, 1]` as grayscale PNG.
pub fn write_plane_png(path: &Path, plane: &Plane, depth: BitDepth) -> Result<()> {
    let (h, w) = plane.dim();
    let (w32, h32) = (w as u32, h as u32);
    match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, raw)
                .expect("buffer size")
                .save(path)
                .map_err(save_err(path))
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = plane
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            ImageBuffer::<Luma<u16>, _>::from_raw(w32, h32, raw)
                .expect("buffer size")
                .save(path)
                .map_err(save_err(path))
        }
    }
}

/// Reads `I000.png … I135.png` from `dir`.
pub fn read_stack(dir: &Path) -> Result<PolarizationStack> {
    let [p0, p45, p90, p135] = Analyzer::ALL.map(|a| dir.join(format!("{}.png", a.file_stem())));
    let load = |p: &Path| -> Result<Plane> {
        if !p.exists() {
            return Err(Error::format(p, "missing polarization plane"));
        }
        read_plane_png(p)
    };
    let planes = [load(&p0)?, load(&p45)?, load(&p90)?, load(&p135)?];
    let [a, b, c, d] = planes;
    PolarizationStack::new(a, b, c, d)
}

/// Writes the four plane PNGs into `dir`; returns the file names written.
pub fn write_stack(dir: &Path, stack: &PolarizationStack, depth: BitDepth) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for a in Analyzer::ALL {
        let name = format!("{}.png", a.file_stem());
        write_plane_png(&dir.join(&name), stack.plane(a), depth)?;
        names.push(name);
    }
    Ok(names)
}

/// Reads an 8-bit mask; codes ≥ 128 are foreground.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = open_image(path)?.into_luma8();
    let (w, h) = (to_usize(img.width()), to_usize(img.height()));
    Ok(Mask::from_shape_vec((h, w), img.into_raw().into_iter().map(|v| v >= 128).collect()).expect("shape"))
}

/// Writes an 8-bit mask, 255 for foreground.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer size")
        .save(path)
        .map_err(save_err(path))
}

/// Writes an encoded normal image as 8- or 16-bit RGB.
pub fn write_encoded_png(path: &Path, img: &EncodedNormalImage, depth: BitDepth) -> Result<()> {
    let (h, w) = img.dims();
    let it = img.rgb.iter().map(|v| v.clamp(0.0, 1.0));
    match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = it.map(|v| (v * 255.0).round() as u8).collect();
            ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
                .expect("buffer size")
                .save(path)
                .map_err(save_err(path))
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = it.map(|v| (v * 65535.0).round() as u16).collect();
            ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, raw)
                .expect("buffer size")
                .save(path)
                .map_err(save_err(path))
        }
    }
}

/// Reads an 8- or 16-bit RGB normal image scaled to `[0, 1]`.
pub fn read_encoded_png(path: &Path) -> Result<EncodedNormalImage> {
    let img = open_image(path)?;
    let (w, h) = (to_usize(img.width()), to_usize(img.height()));
    let data: Vec<f64> = match img {
        image::DynamicImage::ImageRgb8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        image::DynamicImage::ImageRgb16(b) => {
            b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        other => {
            return Err(Error::format(
                path,
                format!("expected 8/16-bit RGB PNG, found {:?}", other.color()),
            ))
        }
    };
    Ok(EncodedNormalImage {
        rgb: Array3::from_shape_vec((h, w, 3), data).expect("shape"),
    })
}

/// Writes a normal map (`normal_gt.png` convention: 16-bit RGB).
pub fn write_normal_png(path: &Path, n: &NormalMap, background: [f64; 3], depth: BitDepth) -> Result<()> {
    write_encoded_png(path, &encode_normals(n, background), depth)
}

/// Reads a normal PNG and decodes it under `mask`.
pub fn read_normal_png(path: &Path, mask: &Mask, strict_nz: bool) -> Result<(NormalMap, DecodeStats)> {
    let img = read_encoded_png(path)?;
    check_dims(
        format!("{} vs mask", path.display()),
        mask.dim(),
        img.dims(),
    )?;
    decode_normals(&img, mask, strict_nz)
}

fn write_float_binary(path: &Path, magic: &[u8; 4], planes: &[&Plane]) -> Result<()> {
    let (h, w) = planes[0].dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + planes.len() * h * w * 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for p in planes {
        check_dims("binary plane", (h, w), p.dim())?;
        for v in p.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_float_binary(path: &Path, magic: &[u8; 4], nplanes: usize) -> Result<Vec<Plane>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < HEADER_LEN || &buf[..4] != magic {
        return Err(Error::format(
            path,
            format!("missing {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let word = |k: usize| u32::from_le_bytes(buf[4 * k..4 * k + 4].try_into().expect("4 bytes")) as usize;
    let (w, h) = (word(1), word(2));
    let expected = HEADER_LEN + nplanes * w * h * 4;
    if buf.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {w}×{h}×{nplanes}, found {}", buf.len()),
        ));
    }
    let mut floats = buf[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    Ok((0..nplanes)
        .map(|_| Plane::from_shape_vec((h, w), floats.by_ref().take(w * h).collect()).expect("shape"))
        .collect())
}

/// Writes `s0, s1, s2` under a `PSTK` header.
pub fn write_stokes(path: &Path, s: &StokesImage) -> Result<()> {
    write_float_binary(path, STOKES_MAGIC, &[&s.s0, &s.s1, &s.s2])
}

pub fn read_stokes(path: &Path) -> Result<StokesImage> {
    let mut p = read_float_binary(path, STOKES_MAGIC, 3)?;
    let s2 = p.pop().expect("3 planes");
    let s1 = p.pop().expect("3 planes");
    let s0 = p.pop().expect("3 planes");
    StokesImage::new(s0, s1, s2)
}

/// Writes one plane under a `PDEP` header.
pub fn write_depth(path: &Path, z: &Plane) -> Result<()> {
    write_float_binary(path, DEPTH_MAGIC, &[z])
}

pub fn read_depth(path: &Path) -> Result<Plane> {
    Ok(read_float_binary(path, DEPTH_MAGIC, 1)?.remove(0))
}

/// Lowercase hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stokes_binary_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pstk");
        let s = StokesImage::uniform(2, 3, [1.0, 0.5, -0.25]);
        write_stokes(&path, &s).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PSTK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), 16 + 3 * 6 * 4);
        assert_eq!(read_stokes(&path).unwrap(), s);
        assert!(read_depth(&path).is_err());
    }

    #[test]
    fn truncated_binary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pdep");
        write_depth(&path, &Plane::zeros((4, 4))).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_depth(&path).is_err());
    }

    #[test]
    fn plane_png_bit_depths() {
        let dir = tempfile::tempdir().unwrap();
        let plane = Plane::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 / 14.0);
        for depth in [BitDepth::Eight, BitDepth::Sixteen] {
            let path = dir.path().join(format!("p{}.png", depth.bits()));
            write_plane_png(&path, &plane, depth).unwrap();
            let back = read_plane_png(&path).unwrap();
            let max = ((1u32 << depth.bits()) - 1) as f64;
            for (a, b) in back.iter().zip(&plane) {
                assert!((a - b).abs() <= 0.5 / max + 1e-12);
            }
        }
    }

    #[test]
    fn mask_roundtrip_preserves_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = Mask::from_shape_fn((7, 9), |(i, j)| (i + 2 * j) % 3 == 0);
        write_mask_png(&path, &mask).unwrap();
        let back = read_mask_png(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn normal_dims_must_match_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.png");
        let n = NormalMap::constant(4, 4, [0.0, 0.0, 1.0]);
        write_normal_png(&path, &n, [0.5; 3], BitDepth::Sixteen).unwrap();
        assert!(read_normal_png(&path, &Mask::from_elem((4, 5), true), true).is_err());
    }

    #[test]
    fn missing_plane_named() {
        let dir = tempfile::tempdir().unwrap();
        write_stack(dir.path(), &PolarizationStack::constant(2, 2, 0.5), BitDepth::Eight).unwrap();
        fs::remove_file(dir.path().join("I090.png")).unwrap();
        let err = read_stack(dir.path()).unwrap_err();
        assert!(err.to_string().contains("I090.png"), "{err}");
    }
}
