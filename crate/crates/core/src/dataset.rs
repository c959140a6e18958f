//! Dataset directories: `edges.tsv`, `features.csv`, `labels.txt`, `splits.json`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Checks range and pairwise disjointness.
    pub fn validate(&self, num_nodes: usize) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in ids {
                if i >= num_nodes {
                    return Err(format!("{name} id {i} out of range for {num_nodes} nodes"));
                }
                if !seen.insert(i) {
                    return Err(format!("node {i} appears in more than one split ({name})"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: SparseGraph,
    pub features: Matrix<f64>,
    /// `None` marks an unlabelled node.
    pub labels: Vec<Option<usize>>,
    pub splits: Splits,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Scale each feature row to unit L1 norm (all-zero rows stay zero).
    pub row_normalize: bool,
}

impl Dataset {
    pub fn new(
        graph: SparseGraph,
        features: Matrix<f64>,
        labels: Vec<Option<usize>>,
        splits: Splits,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if features.rows() != n || labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{n} nodes but {} feature rows and {} labels",
                features.rows(),
                labels.len()
            )));
        }
        splits.validate(n).map_err(Error::InvalidArgument)?;
        let num_classes = labels.iter().flatten().max().map_or(0, |&m| m + 1);
        Ok(Self {
            graph,
            features,
            labels,
            splits,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Writes the directory layout read by [`load_dataset`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            fs::File::create(&path)
                .and_then(|mut f| f.write_all(body.as_bytes()))
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))
        };
        let mut edges = String::new();
        for (s, d) in self.graph.undirected_edges() {
            edges.push_str(&format!("{s}\t{d}\n"));
        }
        write("edges.tsv", edges)?;
        let mut feats = String::new();
        for r in 0..self.features.rows() {
            let row: Vec<String> = self.features.row(r).iter().map(|v| format!("{v:?}")).collect();
            feats.push_str(&row.join(","));
            feats.push('\n');
        }
        write("features.csv", feats)?;
        let labels: String = self
            .labels
            .iter()
            .map(|l| format!("{}\n", l.map_or(-1, |v| v as i64)))
            .collect();
        write("labels.txt", labels)?;
        write("splits.json", serde_json::to_string(&self.splits).expect("splits serialize"))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::data(path, None, format!("cannot read: {e}")))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn load_dataset(dir: &Path, opts: LoadOptions) -> Result<Dataset> {
    let features = load_features(&dir.join("features.csv"), opts)?;
    let n = features.rows();
    let labels = load_labels(&dir.join("labels.txt"), n)?;
    let graph = load_edges(&dir.join("edges.tsv"), n)?;
    let splits = load_splits(&dir.join("splits.json"), n)?;
    let num_classes = labels.iter().flatten().max().map_or(0, |&m| m + 1);
    Ok(Dataset {
        graph,
        features,
        labels,
        splits,
        num_classes,
    })
}

fn load_features(path: &Path, opts: LoadOptions) -> Result<Matrix<f64>> {
    let text = read(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line_no, line) in content_lines(&text) {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::data(path, Some(line_no), format!("invalid number {:?}", field.trim()))
            })?;
            if !v.is_finite() {
                return Err(Error::data(path, Some(line_no), "non-finite feature value"));
            }
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::data(
                    path,
                    Some(line_no),
                    format!("ragged row: {width} values, expected {c}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::data(path, None, "no feature rows"))?;
    let mut m = Matrix::from_vec(rows, cols, data).expect("consistent feature shape");
    if opts.row_normalize {
        for r in 0..rows {
            let row = m.row_mut(r);
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    Ok(m)
}

fn load_labels(path: &Path, n: usize) -> Result<Vec<Option<usize>>> {
    let text = read(path)?;
    let mut labels = Vec::with_capacity(n);
    for (line_no, line) in content_lines(&text) {
        let v: i64 = line
            .parse()
            .map_err(|_| Error::data(path, Some(line_no), format!("invalid label {line:?}")))?;
        labels.push(match v {
            -1 => None,
            v if v >= 0 => Some(v as usize),
            v => return Err(Error::data(path, Some(line_no), format!("negative label {v}"))),
        });
    }
    if labels.len() != n {
        return Err(Error::data(
            path,
            None,
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    Ok(labels)
}

fn load_edges(path: &Path, n: usize) -> Result<SparseGraph> {
    let text = read(path)?;
    let mut edges = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let mut parts = line.split_whitespace();
        let mut next = || -> Result<usize> {
            let tok = parts
                .next()
                .ok_or_else(|| Error::data(path, Some(line_no), "expected \"src<TAB>dst\""))?;
            let id: usize = tok
                .parse()
                .map_err(|_| Error::data(path, Some(line_no), format!("invalid node id {tok:?}")))?;
            if id >= n {
                return Err(Error::data(
                    path,
                    Some(line_no),
                    format!("node id {id} out of range for {n} nodes"),
                ));
            }
            Ok(id)
        };
        let s = next()?;
        let d = next()?;
        edges.push((s, d));
    }
    SparseGraph::from_undirected_edges(n, &edges)
}

fn load_splits(path: &Path, n: usize) -> Result<Splits> {
    let text = read(path)?;
    let splits: Splits = serde_json::from_str(&text)
        .map_err(|e| Error::data(path, Some(e.line()), e.to_string()))?;
    splits
        .validate(n)
        .map_err(|msg| Error::data(path, None, msg))?;
    Ok(splits)
}

/// Location of the benchmark datasets: `$MAGCL_DATA` or `<workspace>/data`.
pub fn default_data_root() -> PathBuf {
    std::env::var_os("MAGCL_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dir(edges: &str, feats: &str, labels: &str, splits: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("edges.tsv"), edges).unwrap();
        fs::write(dir.path().join("features.csv"), feats).unwrap();
        fs::write(dir.path().join("labels.txt"), labels).unwrap();
        fs::write(dir.path().join("splits.json"), splits).unwrap();
        dir
    }

    const SPLITS: &str = r#"{"train":[0],"val":[1],"test":[2]}"#;

    #[test]
    fn loads_and_symmetrizes() {
        let dir = write_dir("# header\n0\t1\n", "1,0\n0,1\n0.5,0.5\n", "0\n1\n-1\n", SPLITS);
        let ds = load_dataset(dir.path(), LoadOptions::default()).unwrap();
        assert_eq!(ds.num_nodes(), 3);
        assert_eq!(ds.graph.nnz(), 2);
        assert_eq!(ds.labels, vec![Some(0), Some(1), None]);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn errors_carry_file_and_line() {
        let dir = write_dir("0\t1\n0\t7\n", "1,0\n0,1\n1,1\n", "0\n1\n0\n", SPLITS);
        let err = load_dataset(dir.path(), LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("edges.tsv:2") && msg.contains("out of range"), "{msg}");

        let dir = write_dir("", "1,0\n0\n1,1\n", "0\n1\n0\n", SPLITS);
        let msg = load_dataset(dir.path(), LoadOptions::default()).unwrap_err().to_string();
        assert!(msg.contains("features.csv:2") && msg.contains("ragged"), "{msg}");

        let dir = write_dir("", "1\n0\n1\n", "0\n1\n0\n", r#"{"train":[0],"val":[0],"test":[2]}"#);
        let msg = load_dataset(dir.path(), LoadOptions::default()).unwrap_err().to_string();
        assert!(msg.contains("splits.json") && msg.contains("more than one split"), "{msg}");

        let dir = tempfile::tempdir().unwrap();
        let msg = load_dataset(dir.path(), LoadOptions::default()).unwrap_err().to_string();
        assert!(msg.contains("features.csv"), "{msg}");
    }

    #[test]
    fn row_normalization_flag() {
        let dir = write_dir("", "1,3\n0,0\n2,2\n", "0\n1\n0\n", SPLITS);
        let ds = load_dataset(dir.path(), LoadOptions { row_normalize: true }).unwrap();
        assert_eq!(ds.features.row(0), &[0.25, 0.75]);
        assert_eq!(ds.features.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn save_then_load_is_lossless() {
        let dir = write_dir("0\t1\n2\t1\n0\t2\n", "0.1,2\n3,4e-3\n5,6\n", "0\n-1\n2\n", SPLITS);
        let ds = load_dataset(dir.path(), LoadOptions::default()).unwrap();
        let out = tempfile::tempdir().unwrap();
        ds.save(out.path()).unwrap();
        let back = load_dataset(out.path(), LoadOptions::default()).unwrap();
        assert_eq!(back.graph, ds.graph);
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.splits, ds.splits);
    }
}
