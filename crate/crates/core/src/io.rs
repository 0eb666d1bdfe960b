//! Serialization of path ensembles: a plain-text CSV view and a compact
//! little-endian binary dump.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  b"VFBL"
//! version u16      currently 1
//! anchor  u64      first covered grid node
//! n_paths u64
//! n_nodes u64      covered nodes per path (columns of V and X)
//! seed    u64      simulation seed
//! nodes   n_nodes x f64            absolute times of covered nodes
//! v       n_paths x n_nodes x f64  row-major
//! x       n_paths x n_nodes x f64  row-major
//! dw      n_paths x (n_nodes - 1) x f64  row-major
//! db      n_paths x (n_nodes - 1) x f64  row-major
//! xi      n_paths x (n_nodes - 1) x f64  row-major (refinement noises)
//! ```

use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::paths::PathEnsemble;

const MAGIC: [u8; 4] = *b"VFBL";
const VERSION: u16 = 1;

/// Sanity cap on matrix cells accepted from a dump header (guards against
/// allocating on corrupted headers).
const MAX_CELLS: u64 = 1 << 33;

/// Header of a binary dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u16,
    pub anchor: u64,
    pub n_paths: u64,
    pub n_nodes: u64,
    pub seed: u64,
}

/// Contents of a binary dump.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDump {
    pub header: DumpHeader,
    /// Absolute times of the covered nodes.
    pub nodes: Vec<f64>,
    pub v: Array2<f64>,
    pub x: Array2<f64>,
    pub dw: Array2<f64>,
    pub db: Array2<f64>,
    pub xi: Array2<f64>,
}

fn write_f64s<W: Write>(out: &mut W, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Write an ensemble as a binary dump.
pub fn write_binary<W: Write>(out: &mut W, ensemble: &PathEnsemble) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(ensemble.anchor as u64).to_le_bytes())?;
    out.write_all(&(ensemble.n_paths() as u64).to_le_bytes())?;
    out.write_all(&(ensemble.n_local_nodes() as u64).to_le_bytes())?;
    out.write_all(&ensemble.seed.to_le_bytes())?;
    let nodes: Result<Vec<f64>> = (ensemble.anchor..=ensemble.grid.n_steps())
        .map(|k| ensemble.grid.node(k))
        .collect();
    write_f64s(out, nodes?)?;
    write_f64s(out, ensemble.v().iter().copied())?;
    write_f64s(out, ensemble.x().iter().copied())?;
    write_f64s(out, ensemble.dw().iter().copied())?;
    write_f64s(out, ensemble.db().iter().copied())?;
    write_f64s(out, ensemble.xi().iter().copied())?;
    Ok(())
}

fn read_exact_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size")))
        .collect())
}

fn matrix_from(rows: usize, cols: usize, data: Vec<f64>) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Domain(format!("dump shape mismatch: {e}")))
}

/// Read a binary dump produced by [`write_binary`].
pub fn read_binary<R: Read>(input: &mut R) -> Result<PathDump> {
    let magic = read_exact_array::<R, 4>(input)?;
    if magic != MAGIC {
        return Err(Error::Domain(format!(
            "bad dump magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = u16::from_le_bytes(read_exact_array::<R, 2>(input)?);
    if version != VERSION {
        return Err(Error::Domain(format!(
            "unsupported dump version {version}, expected {VERSION}"
        )));
    }
    let anchor = u64::from_le_bytes(read_exact_array::<R, 8>(input)?);
    let n_paths = u64::from_le_bytes(read_exact_array::<R, 8>(input)?);
    let n_nodes = u64::from_le_bytes(read_exact_array::<R, 8>(input)?);
    let seed = u64::from_le_bytes(read_exact_array::<R, 8>(input)?);
    if n_nodes == 0 || n_paths == 0 || n_paths.saturating_mul(n_nodes) > MAX_CELLS {
        return Err(Error::Domain(format!(
            "implausible dump dimensions: {n_paths} paths x {n_nodes} nodes"
        )));
    }
    let (rows, cols) = (n_paths as usize, n_nodes as usize);
    let nodes = read_f64s(input, cols)?;
    let v = matrix_from(rows, cols, read_f64s(input, rows * cols)?)?;
    let x = matrix_from(rows, cols, read_f64s(input, rows * cols)?)?;
    let dw = matrix_from(rows, cols - 1, read_f64s(input, rows * (cols - 1))?)?;
    let db = matrix_from(rows, cols - 1, read_f64s(input, rows * (cols - 1))?)?;
    let xi = matrix_from(rows, cols - 1, read_f64s(input, rows * (cols - 1))?)?;
    Ok(PathDump {
        header: DumpHeader {
            version,
            anchor,
            n_paths,
            n_nodes,
            seed,
        },
        nodes,
        v,
        x,
        dw,
        db,
        xi,
    })
}

/// Write an ensemble as CSV with columns `path_id,time,v,x`. Floats are
/// printed in shortest round-trip form.
pub fn write_csv<W: Write>(out: &mut W, ensemble: &PathEnsemble) -> Result<()> {
    writeln!(out, "path_id,time,v,x")?;
    for p in 0..ensemble.n_paths() {
        for j in 0..ensemble.n_local_nodes() {
            let t = ensemble.grid.node(ensemble.anchor + j)?;
            writeln!(
                out,
                "{p},{t},{v},{x}",
                v = ensemble.v()[[p, j]],
                x = ensemble.x()[[p, j]]
            )?;
        }
    }
    Ok(())
}
