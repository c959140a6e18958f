//! CSR graph storage and the normalized graph filter
//! `F = (1-pi) I + pi D^-1/2 A D^-1/2`.

use std::any::Any;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{axpy, Matrix, Real, ShapeMismatch};

pub const DEFAULT_PI: f64 = 0.5;

const FILTER_MAGIC: &[u8; 4] = b"MAFL";

/// Unweighted adjacency in CSR layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseGraph {
    num_nodes: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    is_symmetric: bool,
}

impl SparseGraph {
    /// Builds a graph from raw CSR arrays, checking every structural invariant.
    pub fn from_csr(num_nodes: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>) -> Result<Self> {
        if row_ptr.len() != num_nodes + 1 || row_ptr[0] != 0 {
            return Err(Error::InvalidArgument(format!(
                "row_ptr must have {} entries starting at 0",
                num_nodes + 1
            )));
        }
        if *row_ptr.last().unwrap() != col_idx.len() {
            return Err(Error::InvalidArgument(
                "row_ptr end does not match col_idx length".into(),
            ));
        }
        for r in 0..num_nodes {
            if row_ptr[r] > row_ptr[r + 1] {
                return Err(Error::InvalidArgument(format!("row_ptr decreases at row {r}")));
            }
            let cols = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            if let Some(&c) = cols.iter().find(|&&c| c >= num_nodes) {
                return Err(Error::InvalidArgument(format!(
                    "column {c} out of range for {num_nodes} nodes"
                )));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "row {r} columns are not strictly increasing"
                )));
            }
        }
        let mut g = Self {
            num_nodes,
            row_ptr,
            col_idx,
            is_symmetric: false,
        };
        g.is_symmetric = g.check_symmetric();
        Ok(g)
    }

    /// Symmetric graph from undirected pairs. Duplicates and self-loops are
    /// discarded; each remaining pair is stored in both directions.
    pub fn from_undirected_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(s, d) in edges {
            if s >= num_nodes || d >= num_nodes {
                return Err(Error::InvalidArgument(format!(
                    "edge ({s}, {d}) out of range for {num_nodes} nodes"
                )));
            }
            if s != d {
                rows[s].push(d);
                rows[d].push(s);
            }
        }
        let mut row_ptr = Vec::with_capacity(num_nodes + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            col_idx.extend(row);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            num_nodes,
            row_ptr,
            col_idx,
            is_symmetric: true,
        })
    }

    fn check_symmetric(&self) -> bool {
        (0..self.num_nodes).all(|r| self.neighbors(r).iter().all(|&c| self.contains(c, r)))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored (directed) entries.
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.is_symmetric
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn neighbors(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.neighbors(r).binary_search(&c).is_ok()
    }

    pub fn has_self_loops(&self) -> bool {
        (0..self.num_nodes).any(|r| self.contains(r, r))
    }

    /// Canonical `(min, max)` pairs of a symmetric graph, ascending.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.nnz() / 2);
        for r in 0..self.num_nodes {
            for &c in self.neighbors(r) {
                if r < c {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Copy with a self-loop on every node (existing loops are kept once).
    pub fn with_self_loops(&self) -> Self {
        let mut row_ptr = Vec::with_capacity(self.num_nodes + 1);
        let mut col_idx = Vec::with_capacity(self.nnz() + self.num_nodes);
        row_ptr.push(0);
        for r in 0..self.num_nodes {
            let row = self.neighbors(r);
            let pos = row.partition_point(|&c| c < r);
            col_idx.extend_from_slice(&row[..pos]);
            col_idx.push(r);
            let rest = &row[pos..];
            col_idx.extend_from_slice(if rest.first() == Some(&r) { &rest[1..] } else { rest });
            row_ptr.push(col_idx.len());
        }
        Self {
            num_nodes: self.num_nodes,
            row_ptr,
            col_idx,
            is_symmetric: self.is_symmetric,
        }
    }
}

/// `F = (1-pi) I + pi D^-1/2 A D^-1/2`, with `A` including self-loops.
#[derive(Debug, Clone)]
pub struct GraphFilter {
    structure: SparseGraph,
    values: Vec<f64>,
    values_f32: Vec<f32>,
    pi: f64,
}

/// Adds self-loops, then normalizes with degrees taken after insertion.
pub fn build_filter(graph: &SparseGraph, pi: f64) -> Result<GraphFilter> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Config(format!("pi must lie in (0, 1), got {pi}")));
    }
    if !graph.is_symmetric() {
        return Err(Error::InvalidArgument(
            "graph filter requires a symmetric graph".into(),
        ));
    }
    let structure = graph.with_self_loops();
    let degree: Vec<f64> = (0..structure.num_nodes())
        .map(|r| structure.neighbors(r).len() as f64)
        .collect();
    let mut values = Vec::with_capacity(structure.nnz());
    for r in 0..structure.num_nodes() {
        for &c in structure.neighbors(r) {
            let mut v = pi / (degree[r] * degree[c]).sqrt();
            if r == c {
                v += 1.0 - pi;
            }
            values.push(v);
        }
    }
    GraphFilter::from_parts(structure, values, pi)
}

impl GraphFilter {
    fn from_parts(structure: SparseGraph, values: Vec<f64>, pi: f64) -> Result<Self> {
        if values.len() != structure.nnz() {
            return Err(Error::InvalidArgument("filter value count mismatch".into()));
        }
        let values_f32 = values.iter().map(|&v| v as f32).collect();
        Ok(Self {
            structure,
            values,
            values_f32,
            pi,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.structure.num_nodes()
    }

    pub fn nnz(&self) -> usize {
        self.structure.nnz()
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn structure(&self) -> &SparseGraph {
        &self.structure
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn values_as<T: Real>(&self) -> Vec<T> {
        (&self.values_f32 as &dyn Any)
            .downcast_ref::<Vec<T>>()
            .or_else(|| (&self.values as &dyn Any).downcast_ref::<Vec<T>>())
            .cloned()
            .unwrap_or_else(|| self.values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    fn with_values<T: Real, R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        if let Some(v) = (&self.values_f32 as &dyn Any).downcast_ref::<Vec<T>>() {
            return f(v);
        }
        if let Some(v) = (&self.values as &dyn Any).downcast_ref::<Vec<T>>() {
            return f(v);
        }
        f(&self.values_as::<T>())
    }

    /// Value at `(r, c)`, zero when not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let start = self.structure.row_ptr()[r];
        match self.structure.neighbors(r).binary_search(&c) {
            Ok(pos) => self.values[start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Matrix<f64> {
        let mut out = Matrix::zeros(self.num_nodes(), self.num_nodes());
        for r in 0..self.num_nodes() {
            let start = self.structure.row_ptr()[r];
            for (i, &c) in self.structure.neighbors(r).iter().enumerate() {
                out[(r, c)] = self.values[start + i];
            }
        }
        out
    }

    /// `F * z`.
    pub fn spmm<T: Real>(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(z.rows(), z.cols());
        self.spmm_into(z, &mut out)?;
        Ok(out)
    }

    /// `out <- F * z`. Rows are reduced in ascending column order, so the
    /// result does not depend on the thread count.
    pub fn spmm_into<T: Real>(&self, z: &Matrix<T>, out: &mut Matrix<T>) -> Result<()> {
        if z.rows() != self.num_nodes() || out.shape() != z.shape() {
            return Err(ShapeMismatch {
                op: "spmm",
                lhs: (self.num_nodes(), self.num_nodes()),
                rhs: z.shape(),
            }
            .into());
        }
        let cols = z.cols();
        if cols == 0 {
            return Ok(());
        }
        let row_ptr = self.structure.row_ptr();
        let col_idx = self.structure.col_idx();
        let src = z.as_slice();
        self.with_values::<T, _>(|values| {
            out.as_mut_slice()
                .par_chunks_mut(cols)
                .enumerate()
                .for_each(|(r, dst)| {
                    dst.iter_mut().for_each(|v| *v = T::zero());
                    for p in row_ptr[r]..row_ptr[r + 1] {
                        let c = col_idx[p];
                        axpy(values[p], &src[c * cols..(c + 1) * cols], dst);
                    }
                });
        });
        Ok(())
    }

    /// `F^k * z` using two ping-pong buffers regardless of `k`.
    pub fn propagate<T: Real>(&self, z: &Matrix<T>, k: usize) -> Result<Matrix<T>> {
        if k == 0 {
            if z.rows() != self.num_nodes() {
                return Err(ShapeMismatch {
                    op: "spmm",
                    lhs: (self.num_nodes(), self.num_nodes()),
                    rhs: z.shape(),
                }
                .into());
            }
            return Ok(z.clone());
        }
        let mut cur = self.spmm(z)?;
        if k == 1 {
            return Ok(cur);
        }
        let mut next = Matrix::zeros(z.rows(), z.cols());
        for _ in 1..k {
            self.spmm_into(&cur, &mut next)?;
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Writes the binary `MAFL` cache format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing filter {}", path.display());
        let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::with_capacity(24 + self.nnz() * 12 + self.num_nodes() * 8);
        buf.extend_from_slice(FILTER_MAGIC);
        buf.extend_from_slice(&(self.num_nodes() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.nnz() as u64).to_le_bytes());
        for &p in self.structure.row_ptr() {
            buf.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for &c in self.structure.col_idx() {
            buf.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for &v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.pi.to_le_bytes());
        w.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::io(format!("reading filter {}", path.display()), e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(format!("reading filter {}", path.display()), e))?;
        let corrupt = |msg: &str| Error::Corrupt {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(4) != Some(FILTER_MAGIC.as_slice()) {
            return Err(corrupt("bad magic, expected MAFL"));
        }
        let n = cur.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let nnz = cur.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let expected = (n + 1) * 8 + nnz * 12 + 8;
        if cur.remaining() != expected {
            return Err(corrupt(&format!(
                "expected {expected} payload bytes, found {}",
                cur.remaining()
            )));
        }
        let row_ptr = (0..=n).map(|_| cur.u64().unwrap() as usize).collect();
        let col_idx = (0..nnz).map(|_| cur.u32().unwrap() as usize).collect();
        let values: Vec<f64> = (0..nnz).map(|_| cur.f64().unwrap()).collect();
        let pi = cur.f64().unwrap();
        let structure = SparseGraph::from_csr(n, row_ptr, col_idx)
            .map_err(|e| corrupt(&e.to_string()))?;
        Self::from_parts(structure, values, pi)
    }
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}
