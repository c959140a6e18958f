//! Binary parameter checkpoints (`MAWT`) and embedding files (`MAEB`).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::graph::ByteCursor;
use crate::matrix::{Matrix, Real};

const WEIGHTS_MAGIC: &[u8; 4] = b"MAWT";
const EMBED_MAGIC: &[u8; 4] = b"MAEB";

fn put_matrix<T: Real>(buf: &mut Vec<u8>, m: &Matrix<T>) {
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

fn get_matrix(cur: &mut ByteCursor<'_>) -> Option<Matrix<f32>> {
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let len = rows.checked_mul(cols)?;
    if cur.remaining() < len.checked_mul(4)? {
        return None;
    }
    let data = (0..len).map(|_| cur.f32()).collect::<Option<Vec<_>>>()?;
    Matrix::from_vec(rows, cols, data).ok()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Stores `W_1..W_N, p1, p2` and PReLU slopes as `f32`.
pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let params = model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        put_matrix(&mut buf, p);
    }
    write_file(path, &buf)
}

/// Raw matrices of a checkpoint, in stored order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<Matrix<f32>>> {
    let bytes = read_file(path)?;
    let mut cur = ByteCursor::new(&bytes);
    if cur.take(4) != Some(WEIGHTS_MAGIC.as_slice()) {
        return Err(corrupt(path, "bad magic, expected MAWT"));
    }
    let count = cur.u32().ok_or_else(|| corrupt(path, "truncated header"))?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        out.push(get_matrix(&mut cur).ok_or_else(|| corrupt(path, format!("truncated at matrix {i}")))?);
    }
    if cur.remaining() != 0 {
        return Err(corrupt(path, format!("{} trailing bytes", cur.remaining())));
    }
    Ok(out)
}

/// Loads a checkpoint into `model`, which fixes the expected shapes.
pub fn load_checkpoint<T: Real>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let mats = read_checkpoint(path)?;
    model
        .set_params(mats.iter().map(|m| m.cast()).collect())
        .map_err(|e| Error::InvalidArgument(format!("checkpoint {}: {e}", path.display())))
}

pub fn save_embeddings<T: Real>(emb: &Matrix<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + emb.len() * 4);
    buf.extend_from_slice(EMBED_MAGIC);
    put_matrix(&mut buf, emb);
    write_file(path, &buf)
}

pub fn load_embeddings(path: &Path) -> Result<Matrix<f32>> {
    let bytes = read_file(path)?;
    let mut cur = ByteCursor::new(&bytes);
    if cur.take(4) != Some(EMBED_MAGIC.as_slice()) {
        return Err(corrupt(path, "bad magic, expected MAEB"));
    }
    let m = get_matrix(&mut cur).ok_or_else(|| corrupt(path, "truncated embedding data"))?;
    if cur.remaining() != 0 {
        return Err(corrupt(path, format!("{} trailing bytes", cur.remaining())));
    }
    Ok(m)
}

pub fn save_embeddings_csv<T: Real>(emb: &Matrix<T>, path: &Path) -> Result<()> {
    let mut text = String::with_capacity(emb.len() * 10);
    for r in 0..emb.rows() {
        let row: Vec<String> = emb.row(r).iter().map(|v| format!("{}", v.as_f64() as f32)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}
