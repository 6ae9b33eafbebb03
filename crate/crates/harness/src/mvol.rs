//! MVOL1: one ASCII header line `MVOL1 nx ny nz sx sy sz\n`, then the samples
//! as little-endian f64 in x-fastest order.

use std::path::Path;

use misr_core::Volume;

use crate::error::{HarnessError, IoContext, Result};

pub const MAGIC: &str = "MVOL1";

pub fn encode(v: &Volume) -> Vec<u8> {
    let [nx, ny, nz] = v.dims();
    let [sx, sy, sz] = v.spacing();
    // `{}` on f64 prints the shortest string that parses back to the same bits.
    let mut out = format!("{MAGIC} {nx} {ny} {nz} {sx} {sy} {sz}\n").into_bytes();
    out.reserve(v.len() * 8);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Volume> {
    let bad = |msg: String| HarnessError::Format { path: path.to_path_buf(), msg };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 7 || fields[0] != MAGIC {
        return Err(bad(format!("expected '{MAGIC} nx ny nz sx sy sz', found '{header}'")));
    }
    let mut dims = [0usize; 3];
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        dims[a] = fields[1 + a].parse().map_err(|_| bad(format!("bad dimension '{}'", fields[1 + a])))?;
        spacing[a] = fields[4 + a].parse().map_err(|_| bad(format!("bad spacing '{}'", fields[4 + a])))?;
    }
    let body = &bytes[nl + 1..];
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    if body.len() != n * 8 {
        return Err(bad(format!("expected {} data bytes, found {}", n * 8, body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Volume::new(dims, spacing, data)?)
}

pub fn write(path: &Path, v: &Volume) -> Result<()> {
    std::fs::write(path, encode(v)).at(path)
}

pub fn read(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).at(path)?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let data: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin() / 3.0 + 1e-300 * i as f64).collect();
        let v = Volume::new([5, 4, 3], [1.0, 0.1 + 0.2, 4.0], data).unwrap();
        let bytes = encode(&v);
        assert!(bytes.starts_with(b"MVOL1 5 4 3 1 0.30000000000000004 4\n"));
        let back = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing().map(f64::to_bits), v.spacing().map(f64::to_bits));
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_truncated_and_bad_header() {
        let v = Volume::zeros([2, 2, 2]).unwrap();
        let bytes = encode(&v);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode(b"MVOL2 1 1 1 1 1 1\n\0\0\0\0\0\0\0\0", Path::new("x")).is_err());
        assert!(decode(b"no newline", Path::new("x")).is_err());
    }
}
