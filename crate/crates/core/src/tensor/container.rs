//! Little-endian tensor container:
//! `"DFTN"`, u8 rank, rank x u32 extents, u8 dtype tag, row-major payload.

use std::path::Path;

use super::{check_shape, numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 4] = b"DFTN";

pub fn tensor_bytes<F: Scalar>(t: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + t.numel() * F::DTYPE.size());
    write_tensor_to(t, &mut out);
    out
}

pub fn write_tensor_to<F: Scalar>(t: &Tensor<F>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(F::DTYPE.tag());
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Decodes one tensor starting at `bytes[0]`, returning it with the number of bytes consumed.
///
/// `base` is added to reported error offsets so nested containers report file positions.
pub fn read_tensor_from<F: Scalar>(bytes: &[u8], base: usize) -> Result<(Tensor<F>, usize)> {
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if pos + n > bytes.len() {
            Err(Error::parse(base + pos, format!("truncated {what}")))
        } else {
            Ok(())
        }
    };
    need(0, 5, "header")?;
    if &bytes[..4] != MAGIC {
        return Err(Error::parse(base, "bad magic, expected DFTN"));
    }
    let rank = bytes[4] as usize;
    let mut pos = 5;
    need(pos, rank * 4 + 1, "extents")?;
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let s = pos + 4 * i;
            u32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()) as usize
        })
        .collect();
    check_shape(&shape).map_err(|e| Error::parse(base + pos, e.to_string()))?;
    pos += rank * 4;
    let dtype = DType::from_tag(bytes[pos])
        .ok_or_else(|| Error::parse(base + pos, format!("unknown dtype tag {}", bytes[pos])))?;
    pos += 1;
    let n = numel(&shape);
    need(pos, n * dtype.size(), "payload")?;
    let payload = &bytes[pos..pos + n * dtype.size()];
    let data: Vec<F> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| F::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| F::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    pos += n * dtype.size();
    Ok((Tensor::new(&shape, data)?, pos))
}

pub fn write_tensor<F: Scalar>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = read_tensor_from(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::parse(used, "trailing bytes after tensor payload"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::<f32>::new(&[1, 2], vec![1.0, -0.5]).unwrap();
        let b = tensor_bytes(&t);
        let mut expect = b"DFTN".to_vec();
        expect.push(2);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.push(0);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = Tensor::<f64>::ones(&[3]);
        let b = tensor_bytes(&t);
        match read_tensor_from::<f64>(&b[..b.len() - 1], 0) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            read_tensor_from::<f64>(b"XXXX\x01", 0),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn reads_across_dtypes() {
        let t = Tensor::<f32>::new(&[2], vec![0.25, 4.0]).unwrap();
        let (back, _) = read_tensor_from::<f64>(&tensor_bytes(&t), 0).unwrap();
        assert_eq!(back.data(), &[0.25, 4.0]);
    }
}
