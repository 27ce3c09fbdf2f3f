//! Spatial queries and resampling primitives on 3D point sets.
//!
//! Everything here operates on plain values; the recurrent cells replay the
//! returned indices through the differentiation tape so that neighbor
//! *selection* stays constant while displacements remain differentiable.

use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Reference sets at or above this size route ball membership through the
/// uniform grid; the scan and the grid must agree exactly.
const GRID_CUTOVER: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// n×3 coordinates.
    pub coords: Tensor,
    /// Optional n×d per-point features.
    pub features: Option<Tensor>,
}

impl PointCloud {
    pub fn new(coords: Tensor) -> Result<Self> {
        Self::with_features(coords, None)
    }

    pub fn with_features(coords: Tensor, features: Option<Tensor>) -> Result<Self> {
        if coords.rank() != 2 || coords.cols() != 3 {
            return Err(Error::shape(
                "point_cloud",
                format!("coordinates must be n. x 3, got {:?}", coords.shape()),
            ));
        }
        if coords.rows() == 0 {
            return Err(Error::contract("point cloud must hold at least one point"));
        }
        coords.ensure_finite("point_cloud")?;
        if let Some(f) = &features {
            if f.rank() != 2 || f.rows() != coords.rows() {
                return Err(Error::shape(
                    "point_cloud",
                    format!("features {:?} for {} points", f.shape(), coords.rows()),
                ));
            }
            f.ensure_finite("point_cloud")?;
        }
        Ok(PointCloud { coords, features })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        Self::new(Tensor::from_rows(&rows)?)
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty clouds
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }

    /// New cloud consisting of the selected rows (features carried along).
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.coords.row(i).to_vec()).collect();
        let features = match &self.features {
            Some(f) => {
                let frows: Vec<Vec<f64>> = indices.iter().map(|&i| f.row(i).to_vec()).collect();
                Some(Tensor::from_rows(&frows)?)
            }
            None => None,
        };
        PointCloud::with_features(Tensor::from_rows(&rows)?, features)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Per-query neighbor lists into a reference cloud.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    /// n×k indices into the reference cloud, flattened row-major.
    pub indices: Vec<usize>,
    /// Entry (i, j) is true when index j is a genuine member occurrence
    /// rather than padding that repeats an earlier member.
    pub valid: Vec<bool>,
    /// Rows whose ball was empty and fell back to the nearest neighbor.
    pub fallback: Vec<bool>,
    pub k: usize,
    /// n×k×3 displacements: query_i - reference[indices[i][j]].
    pub displacements: Tensor,
}

impl NeighborTable {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row_indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    fn build(query: &PointCloud, reference: &PointCloud, rows: Vec<RowPick>, k: usize) -> Self {
        let n = rows.len();
        let mut indices = Vec::with_capacity(n * k);
        let mut valid = Vec::with_capacity(n * k);
        let mut fallback = Vec::with_capacity(n);
        let mut disp = vec![0.0; n * k * 3];
        for (i, row) in rows.iter().enumerate() {
            fallback.push(row.fallback);
            for (j, &(idx, is_member)) in row.picks.iter().enumerate() {
                indices.push(idx);
                valid.push(is_member);
                let q = query.coords.row(i);
                let r = reference.coords.row(idx);
                let base = (i * k + j) * 3;
                disp[base] = q[0] - r[0];
                disp[base + 1] = q[1] - r[1];
                disp[base + 2] = q[2] - r[2];
            }
        }
        NeighborTable {
            indices,
            valid,
            fallback,
            k,
            displacements: Tensor::from_vec(&[n, k, 3], disp).expect("sized above"),
        }
    }
}

struct RowPick {
    picks: Vec<(usize, bool)>,
    fallback: bool,
}

/// The `k` nearest reference points per query point, ascending by distance,
/// ties broken by lower index. A reference smaller than `k` repeats its
/// nearest point to fill the row; those repeats count as valid.
pub fn knn_query(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<NeighborTable> {
    if k == 0 {
        return Err(Error::contract("knn_query needs k >= 1"));
    }
    let n_ref = reference.len();
    let rows: Vec<RowPick> = (0..query.len())
        .map(|i| {
            let q = query.coords.row(i);
            let mut order: Vec<(f64, usize)> = (0..n_ref)
                .map(|j| (dist2(q, reference.coords.row(j)), j))
                .collect();
            order.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            let mut picks: Vec<(usize, bool)> =
                order.iter().take(k).map(|&(_, j)| (j, true)).collect();
            while picks.len() < k {
                picks.push((order[0].1, true));
            }
            RowPick { picks, fallback: false }
        })
        .collect();
    Ok(NeighborTable::build(query, reference, rows, k))
}

/// How ball query picks `k` members when more than `k` lie inside the ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BallSelect {
    /// Uniform sample without replacement.
    #[default]
    Uniform,
    /// First `k` members in index order.
    FirstK,
}

/// Up to `k` reference points within `radius` of each query point. Rows with
/// fewer than `k` members repeat the first member as padding (marked
/// invalid); rows with no members fall back to the single nearest neighbor
/// and set the row's fallback flag.
pub fn ball_query(
    query: &PointCloud,
    reference: &PointCloud,
    radius: f64,
    k: usize,
    select: BallSelect,
    rng: &mut Prng,
) -> Result<NeighborTable> {
    if radius <= 0.0 {
        return Err(Error::contract("ball_query needs radius > 0"));
    }
    if k == 0 {
        return Err(Error::contract("ball_query needs k >= 1"));
    }
    let grid = if reference.len() >= GRID_CUTOVER {
        Some(SpatialGrid::build(reference, radius))
    } else {
        None
    };
    let r2 = radius * radius;
    let rows: Vec<RowPick> = (0..query.len())
        .map(|i| {
            let q = query.coords.row(i);
            let members = match &grid {
                Some(g) => g.ball_members(reference, q, radius),
                None => ball_members_scan(reference, q, radius),
            };
            if members.is_empty() {
                // Empty ball: nearest neighbor repeated k times.
                let mut best = (f64::INFINITY, 0usize);
                for j in 0..reference.len() {
                    let d = dist2(q, reference.coords.row(j));
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                let mut picks = vec![(best.1, true)];
                picks.resize(k, (best.1, false));
                return RowPick { picks, fallback: true };
            }
            let chosen: Vec<usize> = if members.len() <= k {
                members.clone()
            } else {
                match select {
                    BallSelect::FirstK => members[..k].to_vec(),
                    BallSelect::Uniform => {
                        let picks = rng::sample_without_replacement(rng, members.len(), k);
                        picks.into_iter().map(|p| members[p]).collect()
                    }
                }
            };
            let mut picks: Vec<(usize, bool)> = chosen.iter().map(|&j| (j, true)).collect();
            while picks.len() < k {
                picks.push((chosen[0], false));
            }
            debug_assert!(r2 >= 0.0);
            RowPick { picks, fallback: false }
        })
        .collect();
    Ok(NeighborTable::build(query, reference, rows, k))
}

/// Exhaustive radius filter, membership in index order.
pub fn ball_members_scan(reference: &PointCloud, q: &[f64], radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    (0..reference.len())
        .filter(|&j| dist2(q, reference.coords.row(j)) <= r2)
        .collect()
}

/// Uniform grid over a reference cloud, cell edge equal to the query radius.
pub struct SpatialGrid {
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    cell: f64,
}

impl SpatialGrid {
    pub fn build(reference: &PointCloud, radius: f64) -> Self {
        let cell = radius.max(1e-12);
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for j in 0..reference.len() {
            let p = reference.coords.row(j);
            cells.entry(Self::key(p, cell)).or_default().push(j);
        }
        SpatialGrid { cells, cell }
    }

    fn key(p: &[f64], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Membership identical to [`ball_members_scan`]: candidates from the 27
    /// surrounding cells, filtered exactly, sorted by index.
    pub fn ball_members(&self, reference: &PointCloud, q: &[f64], radius: f64) -> Vec<usize> {
        debug_assert!(radius <= self.cell + 1e-12, "grid keyed by a smaller radius");
        let r2 = radius * radius;
        let (cx, cy, cz) = Self::key(q, self.cell);
        let mut members = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in bucket {
                            if dist2(q, reference.coords.row(j)) <= r2 {
                                members.push(j);
                            }
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        members
    }
}

/// Greedy farthest point sampling: start at `start`, then repeatedly take
/// the point maximizing the minimum distance to the chosen set, ties broken
/// by lowest index. Returns `m` distinct indices in pick order.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::contract(format!("fps needs 1 <= m <= {}, got {}", n, m)));
    }
    if start >= n {
        return Err(Error::contract(format!("fps start {} out of range for {} points", start, n)));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    chosen.push(current);
    for _ in 1..m {
        let p = cloud.coords.row(current).to_vec();
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, slot) in min_d2.iter_mut().enumerate() {
            let d = dist2(&p, cloud.coords.row(j));
            if d < *slot {
                *slot = d;
            }
            if *slot > best.0 {
                best = (*slot, j);
            }
        }
        current = best.1;
        chosen.push(current);
        min_d2[current] = f64::NEG_INFINITY;
    }
    Ok(chosen)
}

/// Gather reference feature rows through a neighbor table: entry (i, j, :)
/// is `reference_features[indices[i][j]]`.
pub fn group_features(table: &NeighborTable, reference_features: &Tensor) -> Result<Tensor> {
    if reference_features.rank() != 2 {
        return Err(Error::shape(
            "group_features",
            format!("features must be rank 2, got {:?}", reference_features.shape()),
        ));
    }
    let d = reference_features.cols();
    let n = table.rows();
    let mut out = Vec::with_capacity(n * table.k * d);
    for &idx in &table.indices {
        if idx >= reference_features.rows() {
            return Err(Error::contract(format!(
                "group_features index {} out of range for {} rows",
                idx,
                reference_features.rows()
            )));
        }
        out.extend_from_slice(reference_features.row(idx));
    }
    Tensor::from_vec(&[n, table.k, d], out)
}

/// Three-nearest inverse-distance interpolation of source features onto the
/// target points: weights `1/(dist + 1e-8)` normalized per target row.
pub fn inverse_distance_interpolate(
    target: &PointCloud,
    source: &PointCloud,
    source_features: &Tensor,
) -> Result<Tensor> {
    if source_features.rank() != 2 || source_features.rows() != source.len() {
        return Err(Error::shape(
            "inverse_distance_interpolate",
            format!("features {:?} for {} sources", source_features.shape(), source.len()),
        ));
    }
    let trips = interpolation_indices(target, source)?;
    let d = source_features.cols();
    let mut out = vec![0.0; target.len() * d];
    for (i, trip) in trips.iter().enumerate() {
        let q = target.coords.row(i);
        let mut u = [0.0f64; 3];
        for (j, &s) in trip.iter().enumerate() {
            u[j] = 1.0 / (dist2(q, source.coords.row(s)).sqrt() + 1e-8);
        }
        let total: f64 = u.iter().sum();
        for (j, &s) in trip.iter().enumerate() {
            let w = u[j] / total;
            let f = source_features.row(s);
            for c in 0..d {
                out[i * d + c] += w * f[c];
            }
        }
    }
    Tensor::from_vec(&[target.len(), d], out)
}

/// Per-target triples of the three nearest source indices (kNN semantics:
/// ascending distance, ties by index, shortage repeats the nearest).
pub fn interpolation_indices(target: &PointCloud, source: &PointCloud) -> Result<Vec<[usize; 3]>> {
    let table = knn_query(target, source, 3)?;
    Ok((0..target.len())
        .map(|i| {
            let r = table.row_indices(i);
            [r[0], r[1], r[2]]
        })
        .collect())
}
