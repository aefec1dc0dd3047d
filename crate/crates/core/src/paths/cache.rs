//! Binary path-ensemble cache.
//!
//! Layout (little-endian):
//!
//! ```text
//! "GSDUPATH"  8 bytes
//! version     u32
//! seed        u64
//! T           f64
//! n_steps     u32   steps on [0, T]
//! dims        u32
//! n_paths     u32
//! span_factor u8
//! increments  f64 × n_paths × (span_factor·n_steps) × dims, path-major
//! ```
//!
//! The filtration tag is not part of the header; readers supply it.

use std::io::{Read, Write};
use std::path::Path;

use super::{BrownianEnsemble, FiltrationTag, TimeGrid};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GSDUPATH";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 4 + 4 + 4 + 1;

pub fn write_ensemble<W: Write>(mut w: W, e: &BrownianEnsemble) -> Result<()> {
    let g = e.grid();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&e.seed().to_le_bytes())?;
    w.write_all(&g.horizon().to_le_bytes())?;
    w.write_all(&to_u32(g.n_steps())?.to_le_bytes())?;
    w.write_all(&to_u32(e.dims())?.to_le_bytes())?;
    w.write_all(&to_u32(e.n_paths())?.to_le_bytes())?;
    w.write_all(&[g.span_factor()])?;
    let steps = g.total_steps();
    let mut buf = Vec::with_capacity(steps * e.dims() * 8);
    for p in 0..e.n_paths() {
        buf.clear();
        for s in 0..steps {
            for d in 0..e.dims() {
                buf.extend_from_slice(&e.increment(s, p, d).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_ensemble<R: Read>(mut r: R, tag: FiltrationTag) -> Result<BrownianEnsemble> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head)?;
    if &head[0..8] != MAGIC {
        return Err(Error::Format("bad magic, not a path cache".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let seed = u64::from_le_bytes(head[12..20].try_into().unwrap());
    let horizon = f64::from_le_bytes(head[20..28].try_into().unwrap());
    let n_steps = u32::from_le_bytes(head[28..32].try_into().unwrap()) as usize;
    let dims = u32::from_le_bytes(head[32..36].try_into().unwrap()) as usize;
    let n_paths = u32::from_le_bytes(head[36..40].try_into().unwrap()) as usize;
    let span = head[40];
    let grid = TimeGrid::new(horizon, n_steps, span)?;
    let steps = grid.total_steps();
    let per_path = steps * dims;
    let mut raw = vec![0u8; per_path * 8];
    let stride = n_paths * dims;
    let mut inc = vec![0.0; steps * stride];
    for p in 0..n_paths {
        r.read_exact(&mut raw)?;
        for (k, bytes) in raw.chunks_exact(8).enumerate() {
            let (s, d) = (k / dims, k % dims);
            inc[s * stride + p * dims + d] = f64::from_le_bytes(bytes.try_into().unwrap());
        }
    }
    BrownianEnsemble::from_increments(grid, dims, n_paths, seed, tag, inc)
}

pub fn save(path: &Path, e: &BrownianEnsemble) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_ensemble(std::io::BufWriter::new(f), e)
}

pub fn load(path: &Path, tag: FiltrationTag) -> Result<BrownianEnsemble> {
    let f = std::fs::File::open(path)?;
    read_ensemble(std::io::BufReader::new(f), tag)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit the u32 header field")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::generate_ensemble;

    #[test]
    fn header_layout() {
        let e = generate_ensemble(TimeGrid::new(1.5, 3, 2).unwrap(), 2, 4, 77).unwrap();
        let mut buf = Vec::new();
        write_ensemble(&mut buf, &e).unwrap();
        assert_eq!(&buf[..8], b"GSDUPATH");
        assert_eq!(buf.len(), HEADER_LEN + 4 * 6 * 2 * 8);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 77);
        assert_eq!(f64::from_le_bytes(buf[20..28].try_into().unwrap()), 1.5);
        assert_eq!(buf[40], 2);
        // first payload value is path 0, step 0, dim 0; the next is dim 1
        let first = f64::from_le_bytes(buf[HEADER_LEN..HEADER_LEN + 8].try_into().unwrap());
        let second = f64::from_le_bytes(buf[HEADER_LEN + 8..HEADER_LEN + 16].try_into().unwrap());
        assert_eq!(first, e.increment(0, 0, 0));
        assert_eq!(second, e.increment(0, 0, 1));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = vec![0u8; HEADER_LEN];
        assert!(matches!(
            read_ensemble(&buf[..], FiltrationTag::G),
            Err(Error::Format(_))
        ));
    }
}
