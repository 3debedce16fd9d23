//! Temporal graph datasets and their on-disk directory format.
//!
//! A dataset directory holds `meta.json` and `snapshots.jsonl`, one JSON
//! object per timestep:
//!
//! ```text
//! {"t": 0, "edges": [[0, 3, 1.0], ...], "states": [[0.1, ...], ...]}
//! ```
//!
//! Edges are listed once per undirected pair with `i < j`; indices are 0-based.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{connected_components, Graph};

pub const META_FILE: &str = "meta.json";
pub const SNAPSHOTS_FILE: &str = "snapshots.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub n_nodes: usize,
    pub feature_dim: usize,
    pub horizon: usize,
    /// Generator configuration that produced the data (free-form for
    /// externally supplied datasets).
    pub generator: serde_json::Value,
    pub seed: u64,
    pub dynamics: String,
    pub timestamps: Vec<f64>,
    /// Snapshot indices whose graph was disconnected at generation time.
    #[serde(default)]
    pub disconnected_snapshots: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub graph: Graph,
    /// `N x M` node states.
    pub states: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraphDataset {
    pub meta: DatasetMeta,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    t: usize,
    edges: Vec<(usize, usize, f64)>,
    states: Vec<Vec<f64>>,
}

impl TemporalGraphDataset {
    /// Validates shape and ordering invariants and fills the derived
    /// metadata fields (`n_nodes`, `feature_dim`, `horizon`, `timestamps`,
    /// `disconnected_snapshots`).
    pub fn new(mut meta: DatasetMeta, snapshots: Vec<Snapshot>) -> Result<Self> {
        let first = snapshots
            .first()
            .ok_or_else(|| Error::Dataset("dataset has no snapshots".into()))?;
        let n = first.graph.node_count();
        let m = first.states.ncols();
        if m == 0 {
            return Err(Error::Dataset("feature dimension must be positive".into()));
        }
        for (k, s) in snapshots.iter().enumerate() {
            if s.graph.node_count() != n || s.states.dim() != (n, m) {
                return Err(Error::Dataset(format!(
                    "snapshot {k} has shape {:?} with {} nodes, expected {n}x{m}",
                    s.states.dim(),
                    s.graph.node_count()
                )));
            }
            if !s.states.iter().all(|v| v.is_finite()) {
                return Err(Error::Dataset(format!("snapshot {k} has non-finite states")));
            }
            if k > 0 && s.time <= snapshots[k - 1].time {
                return Err(Error::Dataset(format!(
                    "timestamps must be strictly increasing (snapshot {k})"
                )));
            }
        }
        meta.n_nodes = n;
        meta.feature_dim = m;
        meta.horizon = snapshots.len();
        meta.timestamps = snapshots.iter().map(|s| s.time).collect();
        meta.disconnected_snapshots = snapshots
            .iter()
            .enumerate()
            .filter(|(_, s)| connected_components(&s.graph).0 > 1)
            .map(|(k, _)| k)
            .collect();
        Ok(Self { meta, snapshots })
    }

    pub fn node_count(&self) -> usize {
        self.meta.n_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.meta.feature_dim
    }

    pub fn horizon(&self) -> usize {
        self.snapshots.len()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    /// True when consecutive timestamps are equally spaced.
    pub fn is_regular(&self) -> bool {
        let t = self.times();
        if t.len() < 3 {
            return true;
        }
        let first = t[1] - t[0];
        t.windows(2)
            .all(|w| ((w[1] - w[0]) - first).abs() <= 1e-9 * first.abs().max(1.0))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join(META_FILE);
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::json("serializing meta.json", e))?;
        fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;

        let snap_path = dir.join(SNAPSHOTS_FILE);
        let mut out = Vec::new();
        for (t, s) in self.snapshots.iter().enumerate() {
            let line = SnapshotLine {
                t,
                edges: s.graph.edges(),
                states: s.states.rows().into_iter().map(|r| r.to_vec()).collect(),
            };
            serde_json::to_writer(&mut out, &line)
                .map_err(|e| Error::json("serializing snapshot", e))?;
            out.push(b'\n');
        }
        let mut file = fs::File::create(&snap_path).map_err(|e| Error::io(&snap_path, e))?;
        file.write_all(&out).map_err(|e| Error::io(&snap_path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&raw)
            .map_err(|e| Error::json(meta_path.display().to_string(), e))?;

        let snap_path = dir.join(SNAPSHOTS_FILE);
        let file = fs::File::open(&snap_path).map_err(|e| Error::io(&snap_path, e))?;
        let mut snapshots = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&snap_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: SnapshotLine = serde_json::from_str(&line).map_err(|e| {
                Error::json(format!("{} line {}", snap_path.display(), lineno + 1), e)
            })?;
            if parsed.t != snapshots.len() {
                return Err(Error::Dataset(format!(
                    "snapshot line {} has t = {}, expected {}",
                    lineno + 1,
                    parsed.t,
                    snapshots.len()
                )));
            }
            let time = *meta.timestamps.get(parsed.t).ok_or_else(|| {
                Error::Dataset(format!("no timestamp for snapshot {}", parsed.t))
            })?;
            for &(i, j, _) in &parsed.edges {
                if i >= j {
                    return Err(Error::Dataset(format!(
                        "edge [{i}, {j}] must be listed with i < j"
                    )));
                }
            }
            let graph = Graph::from_edges(meta.n_nodes, &parsed.edges)?;
            let m = meta.feature_dim;
            if parsed.states.len() != meta.n_nodes || parsed.states.iter().any(|r| r.len() != m) {
                return Err(Error::Dataset(format!(
                    "snapshot {} states are not {}x{}",
                    parsed.t, meta.n_nodes, m
                )));
            }
            let flat: Vec<f64> = parsed.states.into_iter().flatten().collect();
            let states = Array2::from_shape_vec((meta.n_nodes, m), flat)
                .map_err(|e| Error::Dataset(e.to_string()))?;
            snapshots.push(Snapshot {
                time,
                graph,
                states,
            });
        }
        if snapshots.len() != meta.horizon {
            return Err(Error::Dataset(format!(
                "meta.json declares horizon {} but found {} snapshots",
                meta.horizon,
                snapshots.len()
            )));
        }
        Self::new(meta, snapshots)
    }
}
