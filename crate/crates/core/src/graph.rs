//! Adjacency for the graph-convolution mixers.
//!
//! Both graphs are normalized as `D̃^{-1/2} (A + I) D̃^{-1/2}` where `D̃` is the
//! row-sum degree of `A + I`. The spatial graph is the skeleton; the temporal
//! graph links every frame to its `K` most similar frames (dot product of the
//! per-joint features) and is rebuilt from the features on every pass.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

const H36M_SKELETON: &str = include_str!("../assets/h36m_skeleton.json");

/// Joint names, bone list, left/right mirror permutation and root joint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joints: Vec<String>,
    pub edges: Vec<[usize; 2]>,
    pub mirror: Vec<usize>,
    pub root: usize,
}

impl SkeletonSpec {
    /// The 17-joint Human3.6M layout with the pelvis as root.
    pub fn h36m() -> Self {
        serde_json::from_str(H36M_SKELETON).expect("bundled skeleton parses")
    }

    /// Five joints: pelvis, two hips, two feet. Used by the small test models.
    pub fn five_joint() -> Self {
        Self {
            joints: ["pelvis", "left_hip", "right_hip", "left_foot", "right_foot"].map(String::from).to_vec(),
            edges: vec![[0, 1], [0, 2], [1, 3], [2, 4]],
            mirror: vec![0, 2, 1, 4, 3],
            root: 0,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if n == 0 {
            return Err(Error::Skeleton("no joints".into()));
        }
        let mut seen = BTreeSet::new();
        for &[a, b] in &self.edges {
            if a >= n || b >= n {
                return Err(Error::Skeleton(format!("edge ({a}, {b}) references a joint outside 0..{n}")));
            }
            if a == b {
                return Err(Error::Skeleton(format!("self-edge on joint {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Skeleton(format!("duplicate edge ({a}, {b})")));
            }
        }
        if self.root >= n {
            return Err(Error::Skeleton(format!("root {} outside 0..{n}", self.root)));
        }
        if self.mirror.len() != n {
            return Err(Error::Skeleton(format!("mirror map has {} entries for {n} joints", self.mirror.len())));
        }
        for (i, &m) in self.mirror.iter().enumerate() {
            if m >= n || self.mirror[m] != i {
                return Err(Error::Skeleton(format!("mirror map is not an involution at joint {i}")));
            }
        }
        if self.mirror[self.root] != self.root {
            return Err(Error::Skeleton("root must mirror to itself".into()));
        }
        Ok(())
    }

    /// Parent of each joint in the tree rooted at `root`.
    pub fn parents(&self) -> Result<Vec<Option<usize>>> {
        let n = self.joint_count();
        let mut parent = vec![None; n];
        let mut visited = vec![false; n];
        visited[self.root] = true;
        let mut queue = std::collections::VecDeque::from([self.root]);
        while let Some(j) = queue.pop_front() {
            for &[a, b] in &self.edges {
                let other = if a == j {
                    b
                } else if b == j {
                    a
                } else {
                    continue;
                };
                if !visited[other] {
                    visited[other] = true;
                    parent[other] = Some(j);
                    queue.push_back(other);
                }
            }
        }
        if let Some(j) = visited.iter().position(|v| !v) {
            return Err(Error::Skeleton(format!("joint {j} is not connected to the root")));
        }
        Ok(parent)
    }

    /// Renames joint `i` to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let n = self.joint_count();
        let mut inv = vec![usize::MAX; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inv[p] != usize::MAX {
                return Err(Error::Skeleton("relabeling is not a permutation".into()));
            }
            inv[p] = i;
        }
        if perm.len() != n {
            return Err(Error::Skeleton("relabeling is not a permutation".into()));
        }
        Ok(Self {
            joints: inv.iter().map(|&old| self.joints[old].clone()).collect(),
            edges: self.edges.iter().map(|&[a, b]| [perm[a], perm[b]]).collect(),
            mirror: inv.iter().map(|&old| perm[self.mirror[old]]).collect(),
            root: perm[self.root],
        })
    }
}

/// Dense `n × n` symmetric-normalized adjacency with self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    data: Vec<f64>,
}

impl NormalizedAdjacency {
    /// Normalizes a 0/1 (or weighted) adjacency given row-major, adding self-loops.
    pub fn from_adjacency(n: usize, adj: &[f64]) -> Self {
        assert_eq!(adj.len(), n * n);
        let mut a = adj.to_vec();
        for i in 0..n {
            a[i * n + i] += 1.0;
        }
        let degree: Vec<f64> = a.chunks(n).map(|row| row.iter().sum()).collect();
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] /= (degree[i] * degree[j]).sqrt();
            }
        }
        Self { n, data: a }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_adjacency(n, &vec![0.0; n * n])
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_scalars<F: Scalar>(&self) -> Vec<F> {
        self.data.iter().map(|&v| F::cast(v)).collect()
    }
}

pub fn build_skeleton_adjacency(spec: &SkeletonSpec) -> Result<NormalizedAdjacency> {
    spec.validate()?;
    let n = spec.joint_count();
    let mut a = vec![0.0; n * n];
    for &[i, j] in &spec.edges {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    Ok(NormalizedAdjacency::from_adjacency(n, &a))
}

/// The `k` largest entries of `row`, excluding `self_index`; ties go to the lower index.
pub fn top_k_indices<F: Scalar>(row: &[F], k: usize, self_index: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| i != self_index).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Directed nearest-neighbour lists: frame `t` → its `min(k, T−1)` most similar frames.
pub fn knn_directed<F: Scalar>(features: &[F], frames: usize, dim: usize, k: usize) -> Vec<Vec<usize>> {
    assert_eq!(features.len(), frames * dim);
    let k = k.min(frames.saturating_sub(1));
    let mut sim = vec![F::zero(); frames];
    (0..frames)
        .map(|t| {
            let ft = &features[t * dim..(t + 1) * dim];
            for (s, out) in sim.iter_mut().enumerate() {
                let fs = &features[s * dim..(s + 1) * dim];
                *out = ft.iter().zip(fs).map(|(&a, &b)| a * b).sum();
            }
            top_k_indices(&sim, k, t)
        })
        .collect()
}

/// Temporal K-NN graph over `frames` feature rows of width `dim`, symmetrized
/// by union. `chain` additionally links consecutive frames.
pub fn build_temporal_knn_adjacency<F: Scalar>(
    features: &[F],
    frames: usize,
    dim: usize,
    k: usize,
    chain: bool,
) -> NormalizedAdjacency {
    let n = frames;
    let mut a = vec![0.0; n * n];
    for (t, nbrs) in knn_directed(features, frames, dim, k).into_iter().enumerate() {
        for s in nbrs {
            a[t * n + s] = 1.0;
            a[s * n + t] = 1.0;
        }
    }
    if chain {
        for t in 1..n {
            a[t * n + t - 1] = 1.0;
            a[(t - 1) * n + t] = 1.0;
        }
    }
    NormalizedAdjacency::from_adjacency(n, &a)
}
