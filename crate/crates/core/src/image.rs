//! Binary PPM (P6) input/output, input normalization and label-map
//! colorization.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::LabelMap;
use crate::tensor::{Shape, Tensor};

/// Raw 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB rows, `3 * width * height` bytes.
    pub pixels: Vec<u8>,
}

/// Per-channel normalization applied after scaling pixels to `[0, 1]`:
/// `(v - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Normalization {
        Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Reads a binary (P6) PPM with 8-bit samples.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0usize;

    // Header tokens are separated by whitespace; `#` starts a comment.
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedImage("unexpected end of header".into()));
        }
        Ok(std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::MalformedImage("non-ascii header".into()))?
            .to_string())
    };

    let magic = token(bytes)?;
    if magic != "P6" {
        return Err(Error::UnsupportedImage(magic));
    }
    let parse_dim = |s: String| -> Result<usize> {
        let v: usize = s
            .parse()
            .map_err(|_| Error::MalformedImage(format!("bad header number `{s}`")))?;
        if v == 0 || v > 1 << 16 {
            return Err(Error::MalformedImage(format!("dimension {v} out of range")));
        }
        Ok(v)
    };
    let width = parse_dim(token(bytes)?)?;
    let height = parse_dim(token(bytes)?)?;
    let maxval = token(bytes)?;
    if maxval != "255" {
        return Err(Error::MalformedImage(format!(
            "unsupported maxval {maxval} (want 255)"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(Error::MalformedImage(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P6\n{} {}\n255\n", image.width, image.height)?;
    file.write_all(&image.pixels)?;
    file.flush()?;
    Ok(())
}

/// Converts an RGB image to a `(1, 3, h, w)` tensor. Samples are scaled to
/// `[0, 1]` and then normalized when `normalize` is given.
pub fn image_to_tensor(image: &RgbImage, normalize: Option<Normalization>) -> Result<Tensor> {
    let shape = Shape::new(1, 3, image.height, image.width);
    let plane = image.height * image.width;
    let mut data = vec![0.0f32; shape.len()];
    for (i, px) in image.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            let mut v = px[c] as f32 / 255.0;
            if let Some(n) = normalize {
                v = (v - n.mean[c]) / n.std[c];
            }
            data[c * plane + i] = v;
        }
    }
    Tensor::from_vec(shape, data)
}

/// Converts a `(1, 3, h, w)` tensor back to 8-bit RGB, undoing `normalize`
/// when given; values are clamped to `[0, 1]` and rounded.
pub fn tensor_to_image(t: &Tensor, normalize: Option<Normalization>) -> Result<RgbImage> {
    let shape = t.shape();
    if shape.batch != 1 || shape.channels != 3 {
        return Err(Error::shape("tensor_to_image", "(1,3,h,w)", shape.to_string()));
    }
    let plane = shape.height * shape.width;
    let mut pixels = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let mut v = t.data()[c * plane + i];
            if let Some(n) = normalize {
                v = v * n.std[c] + n.mean[c];
            }
            pixels[3 * i + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage {
        width: shape.width,
        height: shape.height,
        pixels,
    })
}

/// The 19-class color table, in class order: road, sidewalk, building,
/// wall, fence, pole, traffic light, traffic sign, vegetation, terrain,
/// sky, person, rider, car, truck, bus, train, motorcycle, bicycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette(pub [[u8; 3]; 19]);

pub const CITYSCAPES_PALETTE: Palette = Palette([
    [128, 64, 128],  // road
    [244, 35, 232],  // sidewalk
    [70, 70, 70],    // building
    [102, 102, 156], // wall
    [190, 153, 153], // fence
    [153, 153, 153], // pole
    [250, 170, 30],  // traffic light
    [220, 220, 0],   // traffic sign
    [107, 142, 35],  // vegetation
    [152, 251, 152], // terrain
    [70, 130, 180],  // sky
    [220, 20, 60],   // person
    [255, 0, 0],     // rider
    [0, 0, 142],     // car
    [0, 0, 70],      // truck
    [0, 60, 100],    // bus
    [0, 80, 100],    // train
    [0, 0, 230],     // motorcycle
    [119, 11, 32],   // bicycle
]);

/// Pixel-wise palette lookup over a label map.
pub fn colorize(labels: &LabelMap, palette: &Palette) -> Result<RgbImage> {
    let mut pixels = Vec::with_capacity(3 * labels.ids.len());
    for &id in &labels.ids {
        if id as usize >= palette.0.len() {
            return Err(Error::LabelOutOfRange {
                id: id as u32,
                limit: palette.0.len() as u32,
            });
        }
        pixels.extend_from_slice(&palette.0[id as usize]);
    }
    Ok(RgbImage {
        width: labels.width,
        height: labels.height,
        pixels,
    })
}

/// Writes the raw label ids as a binary (P5) PGM, one byte per pixel.
pub fn write_labels_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{} {}\n255\n", labels.width, labels.height)?;
    file.write_all(&labels.ids)?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_ppm_maps_to_ones() {
        let img = RgbImage {
            width: 2,
            height: 2,
            pixels: vec![255; 12],
        };
        let t = image_to_tensor(&img, None).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ppm_round_trip_without_normalization_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = RgbImage {
            width: 3,
            height: 2,
            pixels: (0u8..18).map(|v| v * 13).collect(),
        };
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, img);
        let round = tensor_to_image(&image_to_tensor(&back, None).unwrap(), None).unwrap();
        assert_eq!(round, img);
    }

    #[test]
    fn normalization_defaults_round_trip() {
        let img = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![0, 128, 255, 13, 77, 200],
        };
        let n = Normalization::default();
        let t = image_to_tensor(&img, Some(n)).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = tensor_to_image(&t, Some(n)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn p5_magic_is_unsupported() {
        let bytes = b"P5\n2 2\n255\n0000";
        match parse_ppm(bytes) {
            Err(Error::UnsupportedImage(m)) => assert_eq!(m, "P5"),
            other => panic!("expected UnsupportedImage, got {other:?}"),
        }
    }

    #[test]
    fn truncated_raster_is_malformed() {
        let bytes = b"P6\n4 4\n255\nabc";
        assert!(matches!(parse_ppm(bytes), Err(Error::MalformedImage(_))));
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # binary rgb\n# size comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = parse_ppm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn colorize_all_road_and_out_of_range() {
        let labels = LabelMap {
            height: 2,
            width: 2,
            ids: vec![0; 4],
        };
        let img = colorize(&labels, &CITYSCAPES_PALETTE).unwrap();
        assert!(img.pixels.chunks_exact(3).all(|p| p == [128, 64, 128]));

        let bad = LabelMap {
            height: 1,
            width: 1,
            ids: vec![19],
        };
        assert!(matches!(
            colorize(&bad, &CITYSCAPES_PALETTE),
            Err(Error::LabelOutOfRange { id: 19, .. })
        ));
    }

    #[test]
    fn colorize_matches_scalar_lookup() {
        let ids: Vec<u8> = (0..19).chain(5..9).collect();
        let labels = LabelMap {
            height: 1,
            width: ids.len(),
            ids: ids.clone(),
        };
        let img = colorize(&labels, &CITYSCAPES_PALETTE).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(&img.pixels[3 * i..3 * i + 3], &CITYSCAPES_PALETTE.0[id as usize]);
        }
    }
}
