//! RSF1 raster persistence: bit-exact float32 grids on disk.
//!
//! Layout: 16-byte header (bytes 0-3 magic `RSF1`, byte 4 dtype code
//! `0x01` = float32 little-endian, byte 5 rank, bytes 6-15 reserved zero),
//! then rank u32 little-endian dims, then the row-major float32 payload.

use crate::error::{Error, Result};
use crate::grid::Grid;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"RSF1";
pub const DTYPE_F32: u8 = 0x01;
const HEADER_LEN: usize = 16;

/// Appends one encoded raster to `buf` (used by the checkpoint container).
pub fn encode_into(grid: &Grid<f32>, buf: &mut Vec<u8>) -> Result<()> {
    if grid.rank() > u8::MAX as usize {
        return Err(Error::format(
            "<buffer>",
            format!("rank {} exceeds format limit", grid.rank()),
        ));
    }
    buf.extend_from_slice(&MAGIC);
    buf.push(DTYPE_F32);
    buf.push(grid.rank() as u8);
    buf.extend_from_slice(&[0u8; 10]);
    for &d in grid.shape() {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::format("<buffer>", format!("dim {d} overflows u32")))?;
        buf.extend_from_slice(&d32.to_le_bytes());
    }
    for &v in grid.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Decodes one raster starting at `*offset`, advancing it past the payload.
pub fn decode_from(bytes: &[u8], offset: &mut usize) -> Result<Grid<f32>> {
    let p = || "<buffer>".to_string();
    let start = *offset;
    if bytes.len() < start + HEADER_LEN {
        return Err(Error::format(p(), "truncated header"));
    }
    if bytes[start..start + 4] != MAGIC {
        return Err(Error::format(p(), "bad magic"));
    }
    if bytes[start + 4] != DTYPE_F32 {
        return Err(Error::format(
            p(),
            format!("unknown dtype code {:#04x}", bytes[start + 4]),
        ));
    }
    let rank = bytes[start + 5] as usize;
    let dims_start = start + HEADER_LEN;
    let dims_end = dims_start + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::format(p(), "truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let off = dims_start + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::format(p(), "zero dimension"));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::format(p(), "dim overflow"))?;
        shape.push(d);
    }
    let need = dims_end + 4 * count;
    if bytes.len() < need {
        return Err(Error::format(
            p(),
            format!("truncated payload: need {need} bytes, have {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = dims_end + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    *offset = need;
    Grid::new(shape, data)
}

pub fn save_raster(grid: &Grid<f32>, path: &Path) -> Result<()> {
    grid.ensure_finite("save_raster")?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * grid.rank() + 4 * grid.len());
    encode_into(grid, &mut buf).map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
        other => other,
    })?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_raster(path: &Path) -> Result<Grid<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut offset = 0;
    let grid = decode_from(&bytes, &mut offset).map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
        other => other,
    })?;
    if offset != bytes.len() {
        return Err(Error::format(
            path.display().to_string(),
            format!("trailing bytes: expected {offset}, have {}", bytes.len()),
        ));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.rsf");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Grid::<f32>::from_fn(&[3, 5, 7], |_| rng.gen_range(-10.0..10.0));
        save_raster(&g, &path).unwrap();
        let back = load_raster(&path).unwrap();
        assert_eq!(back.shape(), g.shape());
        assert!(back
            .data()
            .iter()
            .zip(g.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn file_size_matches_format_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.rsf");
        let g = Grid::<f32>::from_fn(&[2, 3], |i| i as f32);
        save_raster(&g, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        // 16-byte header + 2 dims * 4 + 6 values * 4 = 48.
        assert_eq!(len, 48);
    }

    #[test]
    fn corrupt_magic_reports_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.rsf");
        let g = Grid::<f32>::from_fn(&[4], |i| i as f32);
        save_raster(&g, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_raster(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.rsf");
        let g = Grid::<f32>::from_fn(&[4], |i| i as f32);
        save_raster(&g, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_raster(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
