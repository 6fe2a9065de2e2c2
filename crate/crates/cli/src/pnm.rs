//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

/// Decoded image: `channels` planes of `height × width` samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major samples.
    pub planes: Vec<f32>,
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize), String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format!("header ends at byte {i}"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((fields, i + 1))
}

/// Parses a P5 or P6 file.
pub fn decode(bytes: &[u8]) -> Result<Image, String> {
    let (f, start) = header_fields(bytes, 4)?;
    let channels = match f[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported magic `{m}`, expected P5 or P6")),
    };
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} `{s}`"));
    let (width, height, maxval) = (num(&f[1], "width")?, num(&f[2], "height")?, num(&f[3], "maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported, expected 1..=255"));
    }
    let n = width * height * channels;
    let raster = bytes.get(start..start + n).ok_or_else(|| {
        format!("raster needs {n} bytes after byte {start}, file has {}", bytes.len().saturating_sub(start))
    })?;
    let mut planes = vec![0.0; n];
    let plane = width * height;
    for (i, &b) in raster.iter().enumerate() {
        planes[(i % channels) * plane + i / channels] = b as f32 / maxval as f32;
    }
    Ok(Image { channels, height, width, planes })
}

/// Encodes 8-bit samples, row-major, as P5.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Min-max scales to `0..=255`. A constant map becomes all 255, or all 0
/// when it is zero.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else if hi > 0.0 {
                255
            } else {
                0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let bytes = encode_pgm(3, 2, &[0, 51, 255, 1, 2, 3]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.channels, img.height, img.width), (1, 2, 3));
        assert_eq!(img.planes[1], 0.2);
        assert_eq!(img.planes[2], 1.0);
    }

    #[test]
    fn ppm_is_split_into_planes() {
        let mut bytes = b"P6\n# c\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.planes, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn short_raster_is_an_error() {
        assert!(decode(b"P5 4 4 255\n\x00\x01").unwrap_err().contains("raster needs 16"));
    }

    #[test]
    fn gray_scaling() {
        assert_eq!(to_gray(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
        assert_eq!(to_gray(&[1.0]), vec![255]);
        assert_eq!(to_gray(&[0.0, 0.0]), vec![0, 0]);
    }
}
