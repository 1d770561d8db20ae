//! Depth and label map files: PFM (32-bit float), 16-bit binary PGM for depth
//! and 8-bit binary PGM for label maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reads whitespace-separated header tokens, skipping `#` comments.
/// Returns the tokens and the offset of the byte following the last token's
/// single trailing whitespace character.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(pos, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if pos >= bytes.len() {
        return Err(Error::parse(pos, "header not terminated"));
    }
    Ok((tokens, pos + 1))
}

fn parse_dim(tok: &str, offset: usize) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::parse(offset, format!("invalid dimension {tok:?}"))),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encodes a `1 x C x H x W` map (C = 1 or 3) as little-endian PFM.
pub fn pfm_bytes<F: Scalar>(map: &Tensor<F>) -> Result<Vec<u8>> {
    let [n, c, h, w] = map.dims4();
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::dim(format!(
            "PFM holds 1 or 3 channels of one image, got {:?}",
            map.shape()
        )));
    }
    let tag = if c == 1 { "Pf" } else { "PF" };
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    // PFM stores rows bottom to top.
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                let v = map.data()[(ch * h + y) * w + x].to_f64_lossy() as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn parse_pfm<F: Scalar>(bytes: &[u8]) -> Result<Tensor<F>> {
    let (tok, data_start) = header_tokens(bytes, 4)?;
    let channels = match tok[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::parse(0, format!("not a PFM file (magic {other:?})"))),
    };
    let w = parse_dim(&tok[1], 2)?;
    let h = parse_dim(&tok[2], 2)?;
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::parse(data_start - 1, format!("invalid scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(data_start - 1, "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let need = channels * h * w * 4;
    if bytes.len() < data_start + need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated payload: need {need} bytes after offset {data_start}"),
        ));
    }
    let mut data = vec![F::zero(); channels * h * w];
    for (i, chunk) in bytes[data_start..data_start + need].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (pix, ch) = (i / channels, i % channels);
        let (row, x) = (pix / w, pix % w);
        let y = h - 1 - row;
        data[(ch * h + y) * w + x] = F::from_f64_lossy(v as f64);
    }
    Tensor::new(&[1, channels, h, w], data)
}

pub fn write_pfm<F: Scalar>(path: impl AsRef<Path>, map: &Tensor<F>) -> Result<()> {
    write_file(path.as_ref(), &pfm_bytes(map)?)
}

pub fn read_pfm<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    parse_pfm(&read_file(path.as_ref())?)
}

/// Encodes the first channel of a map with values in `[0, 1]` as 16-bit PGM
/// (values are clamped, scaled to `0..=65535` and rounded).
pub fn pgm16_bytes<F: Scalar>(map: &Tensor<F>) -> Result<Vec<u8>> {
    let [n, _, h, w] = map.dims4();
    if n != 1 {
        return Err(Error::dim("PGM holds a single image"));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in &map.data()[..h * w] {
        let q = (v.to_f64_lossy().clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Decodes a 16-bit PGM into a `1 x 1 x H x W` map scaled to `[0, 1]`.
pub fn parse_pgm16<F: Scalar>(bytes: &[u8]) -> Result<Tensor<F>> {
    let (tok, start) = header_tokens(bytes, 4)?;
    if tok[0] != "P5" {
        return Err(Error::parse(0, format!("not a binary PGM (magic {:?})", tok[0])));
    }
    let w = parse_dim(&tok[1], 2)?;
    let h = parse_dim(&tok[2], 2)?;
    if tok[3] != "65535" {
        return Err(Error::parse(
            start - 1,
            format!("only 16-bit PGM (maxval 65535) is accepted, got maxval {}", tok[3]),
        ));
    }
    let need = 2 * h * w;
    if bytes.len() < start + need {
        return Err(Error::parse(bytes.len(), format!("truncated payload: need {need} bytes after offset {start}")));
    }
    let data = bytes[start..start + need]
        .chunks_exact(2)
        .map(|c| F::from_f64_lossy(u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0))
        .collect();
    Tensor::new(&[1, 1, h, w], data)
}

pub fn write_pgm16<F: Scalar>(path: impl AsRef<Path>, map: &Tensor<F>) -> Result<()> {
    write_file(path.as_ref(), &pgm16_bytes(map)?)
}

/// Min-max scales the first channel to `[0, 1]` before writing, for maps with
/// arbitrary range such as aggregated outputs.
pub fn write_pgm16_scaled<F: Scalar>(path: impl AsRef<Path>, map: &Tensor<F>) -> Result<()> {
    let [_, _, h, w] = map.dims4();
    let mut plane: Vec<f64> = map.data()[..h * w].iter().map(|v| v.to_f64_lossy()).collect();
    super::perturb::min_max_normalize(&mut plane);
    let t = Tensor::<f64>::new(&[1, 1, h, w], plane)?;
    write_pgm16(path, &t)
}

pub fn read_pgm16<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    parse_pgm16(&read_file(path.as_ref())?)
}

pub fn write_label_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    write_file(path.as_ref(), &out)
}

pub fn read_label_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let bytes = read_file(path.as_ref())?;
    let (tok, start) = header_tokens(&bytes, 4)?;
    if tok[0] != "P5" || tok[3] != "255" {
        return Err(Error::parse(0, "label maps are 8-bit binary PGM"));
    }
    let w = parse_dim(&tok[1], 2)?;
    let h = parse_dim(&tok[2], 2)?;
    let payload = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::parse(bytes.len(), "truncated label payload"))?;
    LabelMap::new(h, w, payload.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_orientation_and_channels() {
        let t = Tensor::<f32>::from_fn(&[1, 3, 2, 3], |i| i as f32);
        let b = pfm_bytes(&t).unwrap();
        assert!(b.starts_with(b"PF\n3 2\n-1.0\n"));
        // first stored pixel is bottom-left, channel 0
        let off = b"PF\n3 2\n-1.0\n".len();
        assert_eq!(f32::from_le_bytes(b[off..off + 4].try_into().unwrap()), 3.0);
        assert_eq!(parse_pfm::<f32>(&b).unwrap(), t);
    }

    #[test]
    fn big_endian_pfm_accepted() {
        let mut b = b"Pf\n2 1\n1.0\n".to_vec();
        b.extend_from_slice(&1.5f32.to_be_bytes());
        b.extend_from_slice(&(-2.0f32).to_be_bytes());
        let t = parse_pfm::<f64>(&b).unwrap();
        assert_eq!(t.data(), &[1.5, -2.0]);
    }

    #[test]
    fn malformed_headers_rejected() {
        assert!(matches!(parse_pfm::<f32>(b"P6\n1 1\n-1.0\n...."), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_pfm::<f32>(b"Pf\n0 1\n-1.0\n"), Err(Error::Parse { .. })));
        let short = b"Pf\n2 2\n-1.0\n\0\0\0\0";
        match parse_pfm::<f32>(short) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, short.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pgm8_rejected_for_depth() {
        let b = b"P5\n2 1\n255\n\x01\x02";
        match parse_pgm16::<f32>(b) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("65535")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pgm_comments_skipped() {
        let mut b = b"P5\n# made by hand\n1 1\n65535\n".to_vec();
        b.extend_from_slice(&65535u16.to_be_bytes());
        assert_eq!(parse_pgm16::<f64>(&b).unwrap().data(), &[1.0]);
    }
}
