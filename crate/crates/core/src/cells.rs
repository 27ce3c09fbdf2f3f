//! Recurrent units on unordered point sets.
//!
//! The spatiotemporally-local correlation aggregates the previous state into
//! the current frame: for each current point, neighbors are found in the
//! previous coordinates; per neighbor, the query's features, the neighbor's
//! state and the displacement between them are concatenated, pushed through
//! a shared affine map, and pooled. PointRNN uses one correlation per step;
//! PointGRU and PointLSTM wrap correlations in the usual gating structures,
//! plus one extra feature-less correlation that re-aligns the previous state
//! with the current points before any Hadamard product.

use crate::error::{Error, Result};
use crate::geometry::{ball_query, knn_query, BallSelect, NeighborTable, PointCloud};
use crate::rng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Neighbor search mode for a recurrent unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeighborSpec {
    Knn { k: usize },
    Ball { radius: f64, k: usize, select: BallSelect },
}

impl NeighborSpec {
    pub fn k(&self) -> usize {
        match self {
            NeighborSpec::Knn { k } => *k,
            NeighborSpec::Ball { k, .. } => *k,
        }
    }

    /// Run the configured search of `query` coordinates against `reference`.
    pub fn run(
        &self,
        query: &PointCloud,
        reference: &PointCloud,
        rng: &mut Prng,
    ) -> Result<NeighborTable> {
        match *self {
            NeighborSpec::Knn { k } => knn_query(query, reference, k),
            NeighborSpec::Ball { radius, k, select } => {
                ball_query(query, reference, radius, k, select, rng)
            }
        }
    }
}

/// Neighbor pooling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pool {
    #[default]
    Max,
    Mean,
}

/// Shared affine map of one correlation: `weight` is (d + d' + 3) x d'
/// stored input-major (the feature-less variant drops the d block), `bias`
/// is d'.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationParams {
    pub weight: Var,
    pub bias: Var,
}

/// One recorded neighbor search, reusable across the gates of a step.
pub struct Neighborhood {
    /// Flat n*k reference indices.
    gather: Vec<usize>,
    /// Flat n*k query-row repeats [0,0,..,1,1,..].
    repeat: Vec<usize>,
    k: usize,
}

impl Neighborhood {
    /// Search `current` against `previous` coordinates (both tape nodes).
    pub fn search(
        tape: &Tape,
        current_coords: Var,
        prev_coords: Var,
        query: &NeighborSpec,
        rng: &mut Prng,
    ) -> Result<Neighborhood> {
        let cur = PointCloud::new(tape.value(current_coords).clone())?;
        let prev = PointCloud::new(tape.value(prev_coords).clone())?;
        let table = query.run(&cur, &prev, rng)?;
        let k = table.k;
        let n = table.rows();
        let mut repeat = Vec::with_capacity(n * k);
        for i in 0..n {
            repeat.extend(std::iter::repeat_n(i, k));
        }
        Ok(Neighborhood { gather: table.indices, repeat, k })
    }
}

/// The spatiotemporally-local correlation through an already-performed
/// neighbor search. Differentiable w.r.t. features, states and both
/// coordinate sets; the neighbor indices are constants.
#[allow(clippy::too_many_arguments)]
pub fn correlate_with(
    tape: &mut Tape,
    nbhd: &Neighborhood,
    current_coords: Var,
    current_feats: Option<Var>,
    prev_coords: Var,
    prev_state: Var,
    params: &CorrelationParams,
    pool: Pool,
) -> Result<Var> {
    let d_in = tape.value(params.weight).shape()[0];
    let d_feat = current_feats.map_or(0, |f| tape.value(f).cols());
    let d_state = tape.value(prev_state).cols();
    if d_in != d_feat + d_state + 3 {
        return Err(Error::shape(
            "correlate",
            format!(
                "weight expects {} input channels but features ({}) + state ({}) + 3 = {}",
                d_in,
                d_feat,
                d_state,
                d_feat + d_state + 3
            ),
        ));
    }
    let q_rep = tape.gather_rows(current_coords, &nbhd.repeat)?;
    let r_sel = tape.gather_rows(prev_coords, &nbhd.gather)?;
    let disp = tape.sub(q_rep, r_sel)?;
    let state_sel = tape.gather_rows(prev_state, &nbhd.gather)?;
    let cat = match current_feats {
        Some(f) => {
            let f_rep = tape.gather_rows(f, &nbhd.repeat)?;
            tape.concat_last(&[f_rep, state_sel, disp])?
        }
        None => tape.concat_last(&[state_sel, disp])?,
    };
    let mapped = tape.matmul(cat, params.weight)?;
    let affine = tape.add_bias(mapped, params.bias)?;
    match pool {
        Pool::Max => tape.neighbor_max_pool(affine, nbhd.k),
        Pool::Mean => tape.neighbor_mean_pool(affine, nbhd.k),
    }
}

/// Correlation including its own neighbor search.
#[allow(clippy::too_many_arguments)]
pub fn point_rnn_correlate(
    tape: &mut Tape,
    current_coords: Var,
    current_feats: Option<Var>,
    prev_coords: Var,
    prev_state: Var,
    params: &CorrelationParams,
    query: &NeighborSpec,
    pool: Pool,
    rng: &mut Prng,
) -> Result<Var> {
    let nbhd = Neighborhood::search(tape, current_coords, prev_coords, query, rng)?;
    correlate_with(tape, &nbhd, current_coords, current_feats, prev_coords, prev_state, params, pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn name(&self) -> &'static str {
        match self {
            CellKind::Rnn => "point-rnn",
            CellKind::Gru => "point-gru",
            CellKind::Lstm => "point-lstm",
        }
    }
}

/// Per-gate parameters of one recurrent unit, bound to a tape.
pub enum CellParams {
    Rnn {
        main: CorrelationParams,
        /// Optional activation on the correlation output; the plain unit
        /// has none.
        tanh_output: bool,
    },
    Gru {
        update: CorrelationParams,
        reset: CorrelationParams,
        /// Feature-less correlation that re-aligns the previous state.
        carry: CorrelationParams,
        /// Plain row-wise concatenation path for the candidate state:
        /// weight (d + d') x d', bias d'.
        candidate_weight: Var,
        candidate_bias: Var,
    },
    Lstm {
        input: CorrelationParams,
        forget: CorrelationParams,
        output: CorrelationParams,
        /// Feature-less correlation that re-aligns the previous cell state.
        carry: CorrelationParams,
        candidate: CorrelationParams,
    },
}

/// Recurrent state: coordinates plus per-point memory rows.
#[derive(Debug, Clone, Copy)]
pub enum CellState {
    Rnn { coords: Var, state: Var },
    Lstm { coords: Var, hidden: Var, cell: Var },
}

impl CellState {
    pub fn coords(&self) -> Var {
        match self {
            CellState::Rnn { coords, .. } | CellState::Lstm { coords, .. } => *coords,
        }
    }
}

/// Zero state anchored at the first cloud a unit sees, so first-step
/// displacements are self-displacements.
pub fn init_state(
    tape: &mut Tape,
    first_coords: Var,
    channels: usize,
    kind: CellKind,
) -> Result<CellState> {
    if channels == 0 {
        return Err(Error::contract("cell state needs at least one channel"));
    }
    let n = tape.value(first_coords).rows();
    let zeros = tape.leaf(Tensor::zeros(&[n, channels]))?;
    Ok(match kind {
        CellKind::Rnn | CellKind::Gru => CellState::Rnn { coords: first_coords, state: zeros },
        CellKind::Lstm => {
            let cell = tape.leaf(Tensor::zeros(&[n, channels]))?;
            CellState::Lstm { coords: first_coords, hidden: zeros, cell }
        }
    })
}

/// Advance one unit by one frame. Returns the per-point output features and
/// the new state; output coordinates are the input coordinates.
#[allow(clippy::too_many_arguments)]
pub fn step(
    tape: &mut Tape,
    coords: Var,
    feats: Option<Var>,
    state: &CellState,
    params: &CellParams,
    query: &NeighborSpec,
    pool: Pool,
    rng: &mut Prng,
) -> Result<(Var, CellState)> {
    match (params, state) {
        (CellParams::Rnn { main, tanh_output }, CellState::Rnn { coords: pc, state: ps }) => {
            let nbhd = Neighborhood::search(tape, coords, *pc, query, rng)?;
            let mut s = correlate_with(tape, &nbhd, coords, feats, *pc, *ps, main, pool)?;
            if *tanh_output {
                s = tape.tanh(s)?;
            }
            Ok((s, CellState::Rnn { coords, state: s }))
        }
        (
            CellParams::Gru { update, reset, carry, candidate_weight, candidate_bias },
            CellState::Rnn { coords: pc, state: ps },
        ) => {
            let nbhd = Neighborhood::search(tape, coords, *pc, query, rng)?;
            let z_pre = correlate_with(tape, &nbhd, coords, feats, *pc, *ps, update, pool)?;
            let z = tape.sigmoid(z_pre)?;
            let r_pre = correlate_with(tape, &nbhd, coords, feats, *pc, *ps, reset, pool)?;
            let r = tape.sigmoid(r_pre)?;
            let carried = correlate_with(tape, &nbhd, coords, None, *pc, *ps, carry, pool)?;
            // Candidate state by plain per-row concatenation, not correlation.
            let gated = tape.hadamard(r, carried)?;
            let cat = match feats {
                Some(f) => tape.concat_last(&[f, gated])?,
                None => gated,
            };
            let cand_pre = tape.matmul(cat, *candidate_weight)?;
            let cand_aff = tape.add_bias(cand_pre, *candidate_bias)?;
            let cand = tape.tanh(cand_aff)?;
            let keep = tape.hadamard(z, carried)?;
            let one = tape.scalar(1.0)?;
            let inv = tape.sub(one, z)?;
            let fresh = tape.hadamard(inv, cand)?;
            let s = tape.add(keep, fresh)?;
            Ok((s, CellState::Rnn { coords, state: s }))
        }
        (
            CellParams::Lstm { input, forget, output, carry, candidate },
            CellState::Lstm { coords: pc, hidden: ph, cell: pcell },
        ) => {
            let nbhd = Neighborhood::search(tape, coords, *pc, query, rng)?;
            let i_pre = correlate_with(tape, &nbhd, coords, feats, *pc, *ph, input, pool)?;
            let i = tape.sigmoid(i_pre)?;
            let f_pre = correlate_with(tape, &nbhd, coords, feats, *pc, *ph, forget, pool)?;
            let f = tape.sigmoid(f_pre)?;
            let o_pre = correlate_with(tape, &nbhd, coords, feats, *pc, *ph, output, pool)?;
            let o = tape.sigmoid(o_pre)?;
            let carried = correlate_with(tape, &nbhd, coords, None, *pc, *pcell, carry, pool)?;
            let cand_pre = correlate_with(tape, &nbhd, coords, feats, *pc, *ph, candidate, pool)?;
            let cand = tape.tanh(cand_pre)?;
            let kept = tape.hadamard(f, carried)?;
            let fresh = tape.hadamard(i, cand)?;
            let cell = tape.add(kept, fresh)?;
            let cell_act = tape.tanh(cell)?;
            let hidden = tape.hadamard(o, cell_act)?;
            Ok((hidden, CellState::Lstm { coords, hidden, cell }))
        }
        _ => Err(Error::contract("cell parameters and state kinds disagree")),
    }
}
