//! Order-invariant set losses between point clouds.
//!
//! Chamfer distance sums squared nearest-neighbor distances in both
//! directions; Earth Mover's distance minimizes total squared distance over
//! bijections. Both are sums over points with no averaging; reporting
//! normalization is a training-module concern. The differentiable variants
//! fix the matched indices from the forward values and route gradients
//! through the squared distances only.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// An optimal (or epsilon-optimal) bijection between equal-size clouds.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// `mapping[i]` is the row of the second cloud assigned to row i.
    pub mapping: Vec<usize>,
    /// Total squared distance under the mapping.
    pub cost: f64,
}

fn check_coords(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 || t.cols() != 3 || t.rows() == 0 {
        return Err(Error::shape(op, format!("expected non-empty n x 3, got {:?}", t.shape())));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the nearest row of `to` for every row of `from`, ties broken by
/// lower index.
fn nearest_indices(from: &Tensor, to: &Tensor) -> Vec<usize> {
    (0..from.rows())
        .map(|i| {
            let p = from.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..to.rows() {
                let d = sq_dist(p, to.row(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Bidirectional sum of squared nearest-neighbor distances.
pub fn chamfer_value(p: &Tensor, q: &Tensor) -> Result<f64> {
    check_coords("chamfer", p)?;
    check_coords("chamfer", q)?;
    let mut total = 0.0;
    for i in 0..p.rows() {
        let r = p.row(i);
        total += (0..q.rows()).map(|j| sq_dist(r, q.row(j))).fold(f64::INFINITY, f64::min);
    }
    let mut back = 0.0;
    for j in 0..q.rows() {
        let r = q.row(j);
        back += (0..p.rows()).map(|i| sq_dist(r, p.row(i))).fold(f64::INFINITY, f64::min);
    }
    Ok(total + back)
}

/// Differentiable Chamfer distance between two coordinate nodes. Nearest
/// partners are fixed from the current values.
pub fn chamfer_loss(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    check_coords("chamfer", tape.value(p))?;
    check_coords("chamfer", tape.value(q))?;
    let pq = nearest_indices(tape.value(p), tape.value(q));
    let qp = nearest_indices(tape.value(q), tape.value(p));
    let matched_q = tape.gather_rows(q, &pq)?;
    let diff1 = tape.sub(p, matched_q)?;
    let sq1 = tape.square(diff1)?;
    let s1 = tape.sum(sq1)?;
    let matched_p = tape.gather_rows(p, &qp)?;
    let diff2 = tape.sub(q, matched_p)?;
    let sq2 = tape.square(diff2)?;
    let s2 = tape.sum(sq2)?;
    tape.add(s1, s2)
}

fn squared_cost_matrix(p: &Tensor, q: &Tensor) -> Vec<f64> {
    let n = p.rows();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let r = p.row(i);
        for j in 0..n {
            cost[i * n + j] = sq_dist(r, q.row(j));
        }
    }
    cost
}

/// Exact minimum-cost bijection by shortest augmenting paths with
/// potentials, O(n^3).
pub fn emd_exact(p: &Tensor, q: &Tensor) -> Result<(f64, Assignment)> {
    check_coords("emd", p)?;
    check_coords("emd", q)?;
    if p.rows() != q.rows() {
        return Err(Error::contract(format!(
            "emd needs equal cardinalities, got {} and {}",
            p.rows(),
            q.rows()
        )));
    }
    let n = p.rows();
    let cost = squared_cost_matrix(p, q);
    let mapping = hungarian(&cost, n);
    let total: f64 = (0..n).map(|i| cost[i * n + mapping[i]]).sum();
    Ok((total, Assignment { mapping, cost: total }))
}

/// Shortest-augmenting-path assignment on a dense n×n cost matrix.
/// Returns the column matched to each row.
fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-indexed working arrays; column 0 is the virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            mapping[matched_row[j] - 1] = j - 1;
        }
    }
    mapping
}

/// Epsilon-optimal bijection by forward auction with epsilon scaling. The
/// returned cost is at most `n * epsilon` above the exact optimum.
pub fn emd_approx(p: &Tensor, q: &Tensor, epsilon: f64) -> Result<(f64, Assignment)> {
    check_coords("emd", p)?;
    check_coords("emd", q)?;
    if p.rows() != q.rows() {
        return Err(Error::contract(format!(
            "emd needs equal cardinalities, got {} and {}",
            p.rows(),
            q.rows()
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::contract("emd_approx needs epsilon > 0"));
    }
    let n = p.rows();
    let cost = squared_cost_matrix(p, q);
    let mapping = auction(&cost, n, epsilon)?;
    let total: f64 = (0..n).map(|i| cost[i * n + mapping[i]]).sum();
    Ok((total, Assignment { mapping, cost: total }))
}

fn auction(cost: &[f64], n: usize, eps_final: f64) -> Result<Vec<usize>> {
    if n == 1 {
        return Ok(vec![0]);
    }
    let hi = cost.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = cost.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = (hi - lo).max(eps_final);
    let mut prices = vec![0.0f64; n];
    let mut eps = range / 2.0;
    let bid_cap = 400 * n * n + 20_000;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assigned_to: Vec<Option<usize>> = vec![None; n];
    loop {
        eps = eps.max(eps_final);
        owner.iter_mut().for_each(|o| *o = None);
        assigned_to.iter_mut().for_each(|a| *a = None);
        let mut queue: Vec<usize> = (0..n).rev().collect();
        let mut bids = 0usize;
        while let Some(person) = queue.pop() {
            bids += 1;
            if bids > bid_cap {
                // Duality gap diagnostic: primal of a greedy completion
                // minus the dual lower bound under current prices.
                let dual: f64 = prices.iter().sum::<f64>()
                    + (0..n)
                        .map(|i| {
                            (0..n)
                                .map(|j| -cost[i * n + j] - prices[j])
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .sum::<f64>();
                return Err(Error::Solver(format!(
                    "auction exceeded {} bids at eps {:.3e}; dual bound {:.6}",
                    bid_cap, eps, -dual
                )));
            }
            // Best and second-best net value for this person.
            let mut best = (f64::NEG_INFINITY, 0usize);
            let mut second = f64::NEG_INFINITY;
            for j in 0..n {
                let value = -cost[person * n + j] - prices[j];
                if value > best.0 {
                    second = best.0;
                    best = (value, j);
                } else if value > second {
                    second = value;
                }
            }
            let j = best.1;
            prices[j] += best.0 - second + eps;
            if let Some(prev) = owner[j] {
                assigned_to[prev] = None;
                queue.push(prev);
            }
            owner[j] = Some(person);
            assigned_to[person] = Some(j);
        }
        if eps <= eps_final {
            break;
        }
        eps /= 5.0;
    }
    Ok(assigned_to.into_iter().map(|a| a.expect("auction phase completes assigned")).collect())
}

/// Differentiable EMD under a fixed (epsilon-)optimal assignment.
pub fn emd_loss(tape: &mut Tape, p: Var, q: Var, exact_threshold: usize, epsilon: f64) -> Result<Var> {
    let (_, assignment) = if tape.value(p).rows() <= exact_threshold {
        emd_exact(tape.value(p), tape.value(q))?
    } else {
        emd_approx(tape.value(p), tape.value(q), epsilon)?
    };
    let matched = tape.gather_rows(q, &assignment.mapping)?;
    let diff = tape.sub(p, matched)?;
    let sq = tape.square(diff)?;
    tape.sum(sq)
}

/// Weighting and solver thresholds for the combined loss.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Clouds up to this size use the exact assignment solver.
    pub emd_exact_threshold: usize,
    /// Epsilon for the auction solver above the threshold.
    pub emd_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1.0, beta: 1.0, emd_exact_threshold: 64, emd_epsilon: 1e-3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        if self.emd_epsilon <= 0.0 {
            return Err(Error::contract("emd epsilon must be positive"));
        }
        Ok(())
    }
}

/// `alpha * chamfer + beta * emd`, differentiable. A zero weight skips the
/// corresponding term entirely.
pub fn combined_loss(tape: &mut Tape, p: Var, q: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let mut total: Option<Var> = None;
    if cfg.alpha != 0.0 {
        let cd = chamfer_loss(tape, p, q)?;
        let a = tape.scalar(cfg.alpha)?;
        total = Some(tape.hadamard(a, cd)?);
    }
    if cfg.beta != 0.0 {
        let emd = emd_loss(tape, p, q, cfg.emd_exact_threshold, cfg.emd_epsilon)?;
        let b = tape.scalar(cfg.beta)?;
        let weighted = tape.hadamard(b, emd)?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.scalar(0.0),
    }
}

/// Value-only combined loss, for metric reporting.
pub fn combined_value(p: &Tensor, q: &Tensor, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let mut total = 0.0;
    if cfg.alpha != 0.0 {
        total += cfg.alpha * chamfer_value(p, q)?;
    }
    if cfg.beta != 0.0 {
        let emd = if p.rows() <= cfg.emd_exact_threshold {
            emd_exact(p, q)?.0
        } else {
            emd_approx(p, q, cfg.emd_epsilon)?.0
        };
        total += cfg.beta * emd;
    }
    Ok(total)
}
