//! Sequence-to-sequence displacement prediction models.
//!
//! An encoding stack of recurrent units watches the input frames; its final
//! states initialize a separate predicting stack (states transfer, weights
//! do not). The predictor consumes the last observed cloud, regresses a
//! per-point displacement through the head, adds it to the current cloud,
//! and feeds the result back in free-running fashion.
//!
//! The basic architecture keeps every unit at full resolution. The advanced
//! architecture interleaves sampling/grouping blocks with units on the way
//! down, then climbs back with inverse-distance feature propagation before
//! the head. Sampling reruns on the current cloud every step, so the
//! hierarchy follows moved points.

use crate::cells::{self, CellKind, CellParams, CellState, CorrelationParams, NeighborSpec};
use crate::config::{LayerKind, ModelConfig, QueryMode};
use crate::data::CloudSequence;
use crate::error::{Error, Result};
use crate::geometry::{ball_query, farthest_point_sample, interpolation_indices, BallSelect, PointCloud};
use crate::losses::{self, LossConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Prng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One down-sampling level: optional sample/group block plus its unit.
#[derive(Debug, Clone)]
struct LevelPlan {
    sg: Option<(usize, f64, usize)>,
    points: usize,
    in_channels: usize,
    out_channels: usize,
    radius: f64,
    k: usize,
}

#[derive(Debug, Clone)]
struct FpPlan {
    /// 0 is the raw input cloud; level j is the j-th unit's resolution.
    target_level: usize,
    in_channels: usize,
    out_channels: usize,
}

#[derive(Debug, Clone)]
struct FcPlan {
    in_channels: usize,
    out_channels: usize,
    relu: bool,
}

#[derive(Debug, Clone)]
struct Plan {
    levels: Vec<LevelPlan>,
    props: Vec<FpPlan>,
    head: Vec<FcPlan>,
}

fn plan(config: &ModelConfig) -> Result<Plan> {
    config.validate()?;
    let mut levels = Vec::new();
    let mut props = Vec::new();
    let mut head = Vec::new();
    let mut pending_sg: Option<(usize, f64, usize)> = None;
    let mut points = config.points;
    let mut channels = 0usize;
    // Channels after each unit; index 0 is the raw input.
    let mut ladder_channels = vec![0usize];
    let mut width = 0usize;
    for layer in &config.layers {
        match layer.kind {
            LayerKind::SampleGroup => {
                points = layer.points.unwrap();
                pending_sg = Some((points, layer.radius.unwrap(), layer.k.unwrap()));
            }
            LayerKind::Recurrent => {
                let out = layer.channels.unwrap();
                levels.push(LevelPlan {
                    sg: pending_sg.take(),
                    points,
                    in_channels: channels,
                    out_channels: out,
                    radius: layer.radius.unwrap(),
                    k: layer.k.unwrap(),
                });
                channels = out;
                ladder_channels.push(out);
                width = out;
            }
            LayerKind::FeatureProp => {
                let target_level = ladder_channels.len() - 2 - props.len();
                let skip = ladder_channels[target_level];
                let out = layer.channels.unwrap();
                props.push(FpPlan { target_level, in_channels: width + skip, out_channels: out });
                width = out;
            }
            LayerKind::FullyConnected => {
                let out = layer.channels.unwrap();
                head.push(FcPlan { in_channels: width, out_channels: out, relu: true });
                width = out;
            }
        }
    }
    if let Some(last) = head.last_mut() {
        last.relu = false;
    }
    Ok(Plan { levels, props, head })
}

/// Parameter ids of one recurrent unit.
#[derive(Debug, Clone)]
enum UnitIds {
    Rnn { main: (ParamId, ParamId) },
    Gru {
        update: (ParamId, ParamId),
        reset: (ParamId, ParamId),
        carry: (ParamId, ParamId),
        candidate: (ParamId, ParamId),
    },
    Lstm {
        input: (ParamId, ParamId),
        forget: (ParamId, ParamId),
        output: (ParamId, ParamId),
        carry: (ParamId, ParamId),
        candidate: (ParamId, ParamId),
    },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    plan: Plan,
    enc_units: Vec<UnitIds>,
    pred_units: Vec<UnitIds>,
    fp_params: Vec<(ParamId, ParamId)>,
    fc_params: Vec<(ParamId, ParamId)>,
}

fn register_affine(
    store: &mut ParamStore,
    rng: &mut Prng,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<(ParamId, ParamId)> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w = store.register(format!("{}/w", name), Tensor::uniform(&[d_in, d_out], bound, rng))?;
    let b = store.register(format!("{}/b", name), Tensor::uniform(&[d_out], bound, rng))?;
    Ok((w, b))
}

fn register_unit(
    store: &mut ParamStore,
    rng: &mut Prng,
    prefix: &str,
    cell: CellKind,
    d_in: usize,
    d_out: usize,
) -> Result<UnitIds> {
    let full = d_in + d_out + 3;
    let carry_in = d_out + 3;
    Ok(match cell {
        CellKind::Rnn => UnitIds::Rnn {
            main: register_affine(store, rng, &format!("{}/corr", prefix), full, d_out)?,
        },
        CellKind::Gru => UnitIds::Gru {
            update: register_affine(store, rng, &format!("{}/update", prefix), full, d_out)?,
            reset: register_affine(store, rng, &format!("{}/reset", prefix), full, d_out)?,
            carry: register_affine(store, rng, &format!("{}/carry", prefix), carry_in, d_out)?,
            candidate: register_affine(store, rng, &format!("{}/candidate", prefix), d_in + d_out, d_out)?,
        },
        CellKind::Lstm => UnitIds::Lstm {
            input: register_affine(store, rng, &format!("{}/input", prefix), full, d_out)?,
            forget: register_affine(store, rng, &format!("{}/forget", prefix), full, d_out)?,
            output: register_affine(store, rng, &format!("{}/output", prefix), full, d_out)?,
            carry: register_affine(store, rng, &format!("{}/carry", prefix), carry_in, d_out)?,
            candidate: register_affine(store, rng, &format!("{}/candidate", prefix), full, d_out)?,
        },
    })
}

/// Build a model with parameters drawn uniformly from
/// [-1/sqrt(fan_in), +1/sqrt(fan_in)] under the given seed. Equal seeds
/// produce bitwise-identical parameters.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let plan = plan(config)?;
    let mut store = ParamStore::new();
    let mut rng = rng::seeded(seed);
    let mut enc_units = Vec::new();
    let mut pred_units = Vec::new();
    for (l, level) in plan.levels.iter().enumerate() {
        enc_units.push(register_unit(
            &mut store,
            &mut rng,
            &format!("enc/u{}", l),
            config.cell,
            level.in_channels,
            level.out_channels,
        )?);
    }
    for (l, level) in plan.levels.iter().enumerate() {
        pred_units.push(register_unit(
            &mut store,
            &mut rng,
            &format!("pred/u{}", l),
            config.cell,
            level.in_channels,
            level.out_channels,
        )?);
    }
    let mut fp_params = Vec::new();
    for (i, fp) in plan.props.iter().enumerate() {
        fp_params.push(register_affine(
            &mut store,
            &mut rng,
            &format!("pred/fp{}", i),
            fp.in_channels,
            fp.out_channels,
        )?);
    }
    let mut fc_params = Vec::new();
    for (i, fc) in plan.head.iter().enumerate() {
        fc_params.push(register_affine(
            &mut store,
            &mut rng,
            &format!("pred/fc{}", i),
            fc.in_channels,
            fc.out_channels,
        )?);
    }
    Ok(Model {
        config: config.clone(),
        seed,
        params: store,
        plan,
        enc_units,
        pred_units,
        fp_params,
        fc_params,
    })
}

/// Total trainable scalar count.
pub fn count_parameters(model: &Model) -> usize {
    model.params.total_elements()
}

/// Down-sample by farthest point sampling and pool grouped neighbor
/// features through a ball query around each centroid. Feature-less input
/// yields feature-less output.
#[allow(clippy::too_many_arguments)]
pub fn set_abstraction(
    tape: &mut Tape,
    coords: Var,
    feats: Option<Var>,
    points: usize,
    radius: f64,
    k: usize,
    select: BallSelect,
    rng: &mut Prng,
) -> Result<(Var, Option<Var>)> {
    let cloud = PointCloud::new(tape.value(coords).clone())?;
    let picks = farthest_point_sample(&cloud, points, 0)?;
    let centroids = tape.gather_rows(coords, &picks)?;
    let pooled = match feats {
        Some(f) => {
            let centroid_cloud = PointCloud::new(tape.value(centroids).clone())?;
            let table = ball_query(&centroid_cloud, &cloud, radius, k, select, rng)?;
            let grouped = tape.gather_rows(f, &table.indices)?;
            Some(tape.neighbor_max_pool(grouped, k)?)
        }
        None => None,
    };
    Ok((centroids, pooled))
}

/// Interpolate source features onto the target points, concatenate the
/// target's skip features when present, and apply a shared affine map with
/// ReLU.
#[allow(clippy::too_many_arguments)]
pub fn feature_propagation(
    tape: &mut Tape,
    target_coords: Var,
    target_skip: Option<Var>,
    source_coords: Var,
    source_feats: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let target = PointCloud::new(tape.value(target_coords).clone())?;
    let source = PointCloud::new(tape.value(source_coords).clone())?;
    let trips = interpolation_indices(&target, &source)?;
    let interp = tape.interpolate_idw(target_coords, source_coords, source_feats, &trips)?;
    let cat = match target_skip {
        Some(skip) => tape.concat_last(&[interp, skip])?,
        None => interp,
    };
    let mapped = tape.matmul(cat, weight)?;
    let affine = tape.add_bias(mapped, bias)?;
    tape.relu(affine)
}

/// Recurrent state snapshot outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub enum CellStateValue {
    Rnn { coords: Tensor, state: Tensor },
    Lstm { coords: Tensor, hidden: Tensor, cell: Tensor },
}

/// Per-layer states captured after the final input frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub layers: Vec<CellStateValue>,
}

/// One free-running prediction step: the cloud the predictor saw and the
/// displacement it emitted. The predicted frame is `cloud + delta`.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub cloud: Tensor,
    pub delta: Tensor,
}

/// Loss components, each a mean over the predicted frames of the raw
/// per-frame sums.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub total: f64,
    pub chamfer: f64,
    pub emd: f64,
}

/// A model bound onto a tape: every parameter is a leaf node.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl Model {
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> Result<Bound<'m>> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { model: self, vars })
    }

    /// Bind against externally supplied parameter nodes (ordered like the
    /// store); the finite-difference harness uses this.
    pub fn bind_vars<'m>(&'m self, vars: Vec<Var>) -> Result<Bound<'m>> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(Bound { model: self, vars })
    }

    /// Unit resolutions on the way down and propagation targets on the way
    /// back up, straight from the executable plan.
    pub fn shape_ladder(&self) -> (Vec<usize>, Vec<usize>) {
        let down = self.plan.levels.iter().map(|l| l.points).collect();
        let up = self
            .plan
            .props
            .iter()
            .map(|fp| {
                if fp.target_level == 0 {
                    self.config.points
                } else {
                    self.plan.levels[fp.target_level - 1].points
                }
            })
            .collect();
        (down, up)
    }

    /// Output channel widths of the units, the propagation layers and the
    /// head, in stack order.
    pub fn channel_widths(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        (
            self.plan.levels.iter().map(|l| l.out_channels).collect(),
            self.plan.props.iter().map(|p| p.out_channels).collect(),
            self.plan.head.iter().map(|h| h.out_channels).collect(),
        )
    }

    fn check_cloud(&self, cloud: &PointCloud) -> Result<()> {
        if cloud.len() != self.config.points {
            return Err(Error::contract(format!(
                "model expects {} points per cloud, got {}",
                self.config.points,
                cloud.len()
            )));
        }
        if cloud.features.is_some() {
            return Err(Error::contract("model consumes bare coordinates; drop input features"));
        }
        Ok(())
    }

    /// Consume `inputs` (exactly `config.input_len` frames) and return the
    /// per-layer states after the last frame.
    pub fn encode(&self, inputs: &CloudSequence, rng: &mut Prng) -> Result<EncoderState> {
        if inputs.len() != self.config.input_len {
            return Err(Error::contract(format!(
                "encoder expects {} frames, got {}",
                self.config.input_len,
                inputs.len()
            )));
        }
        for f in inputs.frames() {
            self.check_cloud(f)?;
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let mut states: Vec<Option<CellState>> = vec![None; self.plan.levels.len()];
        for frame in inputs.frames() {
            let cloud = tape.leaf(frame.coords.clone())?;
            bound.hierarchy_step(&mut tape, Side::Encoder, &mut states, cloud, rng)?;
        }
        export_states(&tape, &states)
    }

    /// Free-running rollout from an encoder state; returns each step's
    /// input cloud and emitted displacement.
    pub fn predict_steps(
        &self,
        state: &EncoderState,
        last_input: &PointCloud,
        horizon: usize,
        rng: &mut Prng,
    ) -> Result<Vec<RolloutStep>> {
        if horizon == 0 {
            return Err(Error::contract("horizon must be at least 1"));
        }
        self.check_cloud(last_input)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let mut states = import_states(&mut tape, state)?;
        let mut current = tape.leaf(last_input.coords.clone())?;
        let mut steps = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let delta = bound.delta_step(&mut tape, &mut states, current, rng)?;
            let next = tape.add(current, delta)?;
            steps.push(RolloutStep {
                cloud: tape.value(current).clone(),
                delta: tape.value(delta).clone(),
            });
            current = next;
        }
        Ok(steps)
    }

    /// Free-running rollout returning the predicted clouds in order.
    pub fn predict(
        &self,
        state: &EncoderState,
        last_input: &PointCloud,
        horizon: usize,
        rng: &mut Prng,
    ) -> Result<CloudSequence> {
        let steps = self.predict_steps(state, last_input, horizon, rng)?;
        let frames = steps
            .iter()
            .map(|s| {
                let coords = Tensor::from_vec(
                    s.cloud.shape(),
                    s.cloud.data().iter().zip(s.delta.data()).map(|(c, d)| c + d).collect(),
                )?;
                PointCloud::new(coords)
            })
            .collect::<Result<Vec<_>>>()?;
        CloudSequence::new(frames)
    }

    /// Encode, roll out and average the combined loss over predicted
    /// frames, without gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_loss(
        &self,
        sequence: &CloudSequence,
        in_len: usize,
        out_len: usize,
        loss_cfg: &LossConfig,
        teacher_forcing: bool,
        rng: &mut Prng,
    ) -> Result<LossReport> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let (_, report) =
            bound.rollout_loss(&mut tape, sequence, in_len, out_len, loss_cfg, teacher_forcing, rng)?;
        Ok(report)
    }

    /// Like [`Model::forward_loss`] but also runs the reverse pass and
    /// returns per-parameter gradients in store order.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_gradients(
        &self,
        sequence: &CloudSequence,
        in_len: usize,
        out_len: usize,
        loss_cfg: &LossConfig,
        teacher_forcing: bool,
        rng: &mut Prng,
    ) -> Result<(LossReport, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let (root, report) =
            bound.rollout_loss(&mut tape, sequence, in_len, out_len, loss_cfg, teacher_forcing, rng)?;
        tape.backward(root)?;
        let grads = bound.vars.iter().map(|&v| tape.grad(v)).collect();
        Ok((report, grads))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Encoder,
    Predictor,
}

impl<'m> Bound<'m> {
    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn corr(&self, pair: (ParamId, ParamId)) -> CorrelationParams {
        CorrelationParams { weight: self.var(pair.0), bias: self.var(pair.1) }
    }

    fn unit_params(&self, ids: &UnitIds) -> CellParams {
        match ids {
            UnitIds::Rnn { main } => CellParams::Rnn {
                main: self.corr(*main),
                tanh_output: self.model.config.rnn_tanh,
            },
            UnitIds::Gru { update, reset, carry, candidate } => CellParams::Gru {
                update: self.corr(*update),
                reset: self.corr(*reset),
                carry: self.corr(*carry),
                candidate_weight: self.var(candidate.0),
                candidate_bias: self.var(candidate.1),
            },
            UnitIds::Lstm { input, forget, output, carry, candidate } => CellParams::Lstm {
                input: self.corr(*input),
                forget: self.corr(*forget),
                output: self.corr(*output),
                carry: self.corr(*carry),
                candidate: self.corr(*candidate),
            },
        }
    }

    fn neighbor_spec(&self, level: &LevelPlan) -> NeighborSpec {
        match self.model.config.query {
            QueryMode::Knn => NeighborSpec::Knn { k: level.k },
            QueryMode::Ball => NeighborSpec::Ball {
                radius: level.radius,
                k: level.k,
                select: self.model.config.ball_select,
            },
        }
    }

    /// One frame through the sample/unit hierarchy. Returns per-level
    /// (coords, unit output); states update in place, initializing lazily
    /// on the first frame a unit sees.
    fn hierarchy_step(
        &self,
        tape: &mut Tape,
        side: Side,
        states: &mut [Option<CellState>],
        cloud: Var,
        rng: &mut Prng,
    ) -> Result<Vec<(Var, Var)>> {
        let units = match side {
            Side::Encoder => &self.model.enc_units,
            Side::Predictor => &self.model.pred_units,
        };
        let mut coords = cloud;
        let mut feats: Option<Var> = None;
        let mut outputs = Vec::with_capacity(self.model.plan.levels.len());
        for (l, level) in self.model.plan.levels.iter().enumerate() {
            if let Some((points, radius, k)) = level.sg {
                let (c, f) = set_abstraction(
                    tape,
                    coords,
                    feats,
                    points,
                    radius,
                    k,
                    self.model.config.ball_select,
                    rng,
                )?;
                coords = c;
                feats = f;
            }
            let state = match &states[l] {
                Some(s) => *s,
                None => {
                    let s = cells::init_state(tape, coords, level.out_channels, self.model.config.cell)?;
                    states[l] = Some(s);
                    s
                }
            };
            let params = self.unit_params(&units[l]);
            let spec = self.neighbor_spec(level);
            let (out, new_state) = cells::step(
                tape,
                coords,
                feats,
                &state,
                &params,
                &spec,
                self.model.config.pool,
                rng,
            )?;
            states[l] = Some(new_state);
            feats = Some(out);
            outputs.push((coords, out));
        }
        Ok(outputs)
    }

    /// One predictor step: hierarchy, feature propagation back to full
    /// resolution, and the shared head. Returns the n x 3 displacement.
    fn delta_step(
        &self,
        tape: &mut Tape,
        states: &mut [Option<CellState>],
        cloud: Var,
        rng: &mut Prng,
    ) -> Result<Var> {
        let outputs = self.hierarchy_step(tape, Side::Predictor, states, cloud, rng)?;
        let (mut src_coords, mut x) = *outputs.last().expect("stack has at least one level");
        for (i, fp) in self.model.plan.props.iter().enumerate() {
            let (target_coords, skip) = if fp.target_level == 0 {
                (cloud, None)
            } else {
                let (c, f) = outputs[fp.target_level - 1];
                (c, Some(f))
            };
            let (w, b) = self.fp_pair(i);
            x = feature_propagation(tape, target_coords, skip, src_coords, x, w, b)?;
            src_coords = target_coords;
        }
        for (i, fc) in self.model.plan.head.iter().enumerate() {
            let (w, b) = self.fc_pair(i);
            let mapped = tape.matmul(x, w)?;
            x = tape.add_bias(mapped, b)?;
            if fc.relu {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    fn fp_pair(&self, i: usize) -> (Var, Var) {
        (self.var(self.model.fp_params[i].0), self.var(self.model.fp_params[i].1))
    }

    fn fc_pair(&self, i: usize) -> (Var, Var) {
        (self.var(self.model.fc_params[i].0), self.var(self.model.fc_params[i].1))
    }

    /// Encode `in_len` frames, roll out `out_len` predictions and build the
    /// mean-over-frames combined loss on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout_loss(
        &self,
        tape: &mut Tape,
        sequence: &CloudSequence,
        in_len: usize,
        out_len: usize,
        loss_cfg: &LossConfig,
        teacher_forcing: bool,
        rng: &mut Prng,
    ) -> Result<(Var, LossReport)> {
        loss_cfg.validate()?;
        if in_len == 0 || out_len == 0 {
            return Err(Error::contract("split needs at least one input and one output frame"));
        }
        if sequence.len() != in_len + out_len {
            return Err(Error::contract(format!(
                "sequence holds {} frames, split wants {} + {}",
                sequence.len(),
                in_len,
                out_len
            )));
        }
        for f in sequence.frames() {
            self.model.check_cloud(f)?;
        }
        let mut enc_states: Vec<Option<CellState>> = vec![None; self.model.plan.levels.len()];
        for frame in &sequence.frames()[..in_len] {
            let cloud = tape.leaf(frame.coords.clone())?;
            self.hierarchy_step(tape, Side::Encoder, &mut enc_states, cloud, rng)?;
        }
        // States transfer to the predicting units; weights do not.
        let mut pred_states = enc_states;
        let mut current = tape.leaf(sequence.frame(in_len - 1).coords.clone())?;
        let mut frame_losses = Vec::with_capacity(out_len);
        let mut cd_sum = 0.0;
        let mut emd_sum = 0.0;
        for j in 0..out_len {
            let delta = self.delta_step(tape, &mut pred_states, current, rng)?;
            let next = tape.add(current, delta)?;
            let gt = tape.leaf(sequence.frame(in_len + j).coords.clone())?;
            let cd = losses::chamfer_loss(tape, next, gt)?;
            cd_sum += tape.value(cd).item();
            let mut weighted: Option<Var> = None;
            if loss_cfg.alpha != 0.0 {
                let a = tape.scalar(loss_cfg.alpha)?;
                weighted = Some(tape.hadamard(a, cd)?);
            }
            if loss_cfg.beta != 0.0 {
                let emd = losses::emd_loss(
                    tape,
                    next,
                    gt,
                    loss_cfg.emd_exact_threshold,
                    loss_cfg.emd_epsilon,
                )?;
                emd_sum += tape.value(emd).item();
                let b = tape.scalar(loss_cfg.beta)?;
                let term = tape.hadamard(b, emd)?;
                weighted = Some(match weighted {
                    Some(w) => tape.add(w, term)?,
                    None => term,
                });
            }
            let frame_loss = match weighted {
                Some(w) => w,
                None => tape.scalar(0.0)?,
            };
            frame_losses.push(frame_loss);
            current = if teacher_forcing { gt } else { next };
        }
        let stacked = tape.concat_last(&frame_losses)?;
        let total = tape.mean(stacked)?;
        let report = LossReport {
            total: tape.value(total).item(),
            chamfer: cd_sum / out_len as f64,
            emd: emd_sum / out_len as f64,
        };
        Ok((total, report))
    }
}

fn export_states(tape: &Tape, states: &[Option<CellState>]) -> Result<EncoderState> {
    let layers = states
        .iter()
        .map(|s| match s {
            Some(CellState::Rnn { coords, state }) => Ok(CellStateValue::Rnn {
                coords: tape.value(*coords).clone(),
                state: tape.value(*state).clone(),
            }),
            Some(CellState::Lstm { coords, hidden, cell }) => Ok(CellStateValue::Lstm {
                coords: tape.value(*coords).clone(),
                hidden: tape.value(*hidden).clone(),
                cell: tape.value(*cell).clone(),
            }),
            None => Err(Error::contract("encoder state missing; encode at least one frame")),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncoderState { layers })
}

fn import_states(tape: &mut Tape, state: &EncoderState) -> Result<Vec<Option<CellState>>> {
    state
        .layers
        .iter()
        .map(|layer| {
            Ok(Some(match layer {
                CellStateValue::Rnn { coords, state } => CellState::Rnn {
                    coords: tape.leaf(coords.clone())?,
                    state: tape.leaf(state.clone())?,
                },
                CellStateValue::Lstm { coords, hidden, cell } => CellState::Lstm {
                    coords: tape.leaf(coords.clone())?,
                    hidden: tape.leaf(hidden.clone())?,
                    cell: tape.leaf(cell.clone())?,
                },
            }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Pool;
    use crate::config::{Architecture, LayerSpec};
    use crate::tape::finite_difference_check;

    fn random_sequence(seed: u64, frames: usize, n: usize) -> CloudSequence {
        let mut r = rng::seeded(seed);
        let list = (0..frames)
            .map(|_| PointCloud::new(Tensor::uniform(&[n, 3], 4.0, &mut r)).unwrap())
            .collect();
        CloudSequence::new(list).unwrap()
    }

    fn static_sequence(seed: u64, frames: usize, n: usize) -> CloudSequence {
        let mut r = rng::seeded(seed);
        let cloud = PointCloud::new(Tensor::uniform(&[n, 3], 4.0, &mut r)).unwrap();
        CloudSequence::new(vec![cloud; frames]).unwrap()
    }

    #[test]
    fn equal_seeds_build_identical_parameters() {
        let cfg = ModelConfig::micro(CellKind::Lstm, 16, 8, 2).unwrap();
        let a = build_model(&cfg, 7).unwrap();
        let b = build_model(&cfg, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        let c = build_model(&cfg, 8).unwrap();
        assert!(a.params.iter().zip(c.params.iter()).any(|((_, ta), (_, tc))| ta != tc));
    }

    #[test]
    fn single_fc_affine_count() {
        // 64 -> 3 head on a 64-channel unit: the head alone is 64*3+3.
        let cfg = ModelConfig::micro(CellKind::Rnn, 16, 64, 2).unwrap();
        let model = build_model(&cfg, 0).unwrap();
        let head_w = model.params.lookup("pred/fc1/w").unwrap();
        let head_b = model.params.lookup("pred/fc1/b").unwrap();
        assert_eq!(
            model.params.get(head_w).len() + model.params.get(head_b).len(),
            64 * 3 + 3
        );
    }

    #[test]
    fn table_channel_doubling_roughly_quadruples_weights() {
        let count_weights = |c: usize| -> usize {
            let cfg = ModelConfig::micro(CellKind::Gru, 16, c, 2).unwrap();
            let model = build_model(&cfg, 0).unwrap();
            model
                .params
                .iter()
                .filter(|(n, _)| n.ends_with("/w"))
                .map(|(_, t)| t.len())
                .sum()
        };
        let small = count_weights(32);
        let big = count_weights(64);
        let ratio = big as f64 / small as f64;
        assert!((3.4..4.3).contains(&ratio), "ratio {}", ratio);
    }

    #[test]
    fn basic_parameter_counts_match_hand_formula() {
        // One-layer LSTM micro stack, channels 8, feature-less input:
        // five affine maps per unit, sizes (0+8+3)x8 for four gates and
        // (8+3)x8 for the carry, in both encoder and predictor, plus the
        // 8->8 and 8->3 head.
        let cfg = ModelConfig::micro(CellKind::Lstm, 16, 8, 2).unwrap();
        let model = build_model(&cfg, 0).unwrap();
        let unit = 5 * (11 * 8 + 8);
        let head = (8 * 8 + 8) + (8 * 3 + 3);
        assert_eq!(count_parameters(&model), 2 * unit + head);
    }

    #[test]
    fn advanced_shape_ladder_matches_plan() {
        let cfg = ModelConfig::mnist_advanced(CellKind::Lstm, 128).unwrap();
        let model = build_model(&cfg, 1).unwrap();
        let (down, up) = model.shape_ladder();
        assert_eq!(down, vec![64, 32, 16]);
        assert_eq!(up, vec![32, 64, 128]);
        let (units, fps, head) = model.channel_widths();
        assert_eq!(units, vec![64, 128, 256]);
        assert_eq!(fps, vec![128, 128, 128]);
        assert_eq!(head, vec![64, 3]);
    }

    #[test]
    fn set_abstraction_constant_features_and_subset_coords() {
        let mut tape = Tape::new();
        let mut r = rng::seeded(3);
        let coords_t = Tensor::uniform(&[8, 3], 2.0, &mut r);
        let coords = tape.leaf(coords_t.clone()).unwrap();
        let feats = tape.leaf(Tensor::from_vec(&[8, 2], vec![3.5; 16]).unwrap()).unwrap();
        let (c, f) = set_abstraction(
            &mut tape, coords, Some(feats), 4, 1.5, 3, BallSelect::Uniform, &mut r,
        )
        .unwrap();
        assert_eq!(tape.value(c).shape(), &[4, 3]);
        for &x in tape.value(f.unwrap()).data() {
            assert_eq!(x, 3.5);
        }
        // Output coordinates are rows of the input.
        for i in 0..4 {
            let row = tape.value(c).row(i).to_vec();
            assert!((0..8).any(|j| coords_t.row(j) == &row[..]));
        }
    }

    #[test]
    fn set_abstraction_collinear_hand_trace() {
        // Points on a line at 0, 1, 2, 10; two centroids from FPS(start 0)
        // are 0 and 10; balls of radius 1.5 hold {0, 1} and {10}.
        let mut tape = Tape::new();
        let mut r = rng::seeded(0);
        let coords = tape
            .leaf(
                Tensor::from_rows(&[
                    vec![0.0, 0.0, 0.0],
                    vec![1.0, 0.0, 0.0],
                    vec![2.0, 0.0, 0.0],
                    vec![10.0, 0.0, 0.0],
                ])
                .unwrap(),
            )
            .unwrap();
        let feats = tape
            .leaf(Tensor::from_rows(&[vec![1.0], vec![5.0], vec![2.0], vec![9.0]]).unwrap())
            .unwrap();
        let (c, f) = set_abstraction(
            &mut tape, coords, Some(feats), 2, 1.5, 2, BallSelect::Uniform, &mut r,
        )
        .unwrap();
        assert_eq!(tape.value(c).row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.value(c).row(1), &[10.0, 0.0, 0.0]);
        let pooled = tape.value(f.unwrap());
        assert_eq!(pooled.row(0)[0], 5.0); // max of {1, 5}
        assert_eq!(pooled.row(1)[0], 9.0); // lone member
    }

    #[test]
    fn feature_propagation_constant_head_and_oracle() {
        let mut r = rng::seeded(5);
        let tgt_t = Tensor::uniform(&[5, 3], 1.0, &mut r);
        let src_t = Tensor::uniform(&[3, 3], 1.0, &mut r);
        let feat_t = Tensor::uniform(&[3, 2], 1.0, &mut r);

        // Zero weights, bias beta: every row is relu(beta).
        let mut tape = Tape::new();
        let tgt = tape.leaf(tgt_t.clone()).unwrap();
        let src = tape.leaf(src_t.clone()).unwrap();
        let feats = tape.leaf(feat_t.clone()).unwrap();
        let w = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.leaf(Tensor::from_vec(&[2], vec![0.4, -0.2]).unwrap()).unwrap();
        let out = feature_propagation(&mut tape, tgt, None, src, feats, w, b).unwrap();
        for i in 0..5 {
            assert_eq!(tape.value(out).row(i), &[0.4, 0.0]);
        }

        // Random affine against a straight-line composition.
        let w_t = Tensor::uniform(&[2, 2], 0.7, &mut r);
        let b_t = Tensor::uniform(&[2], 0.7, &mut r);
        let mut tape = Tape::new();
        let tgt = tape.leaf(tgt_t.clone()).unwrap();
        let src = tape.leaf(src_t.clone()).unwrap();
        let feats = tape.leaf(feat_t.clone()).unwrap();
        let w = tape.leaf(w_t.clone()).unwrap();
        let b = tape.leaf(b_t.clone()).unwrap();
        let out = feature_propagation(&mut tape, tgt, None, src, feats, w, b).unwrap();
        let interp = crate::geometry::inverse_distance_interpolate(
            &PointCloud::new(tgt_t.clone()).unwrap(),
            &PointCloud::new(src_t.clone()).unwrap(),
            &feat_t,
        )
        .unwrap();
        for i in 0..5 {
            for c in 0..2 {
                let pre: f64 = (0..2).map(|j| interp.row(i)[j] * w_t.row(j)[c]).sum::<f64>()
                    + b_t.data()[c];
                let expect = pre.max(0.0);
                assert!((tape.value(out).row(i)[c] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encode_requires_matching_length_and_size() {
        let cfg = ModelConfig::micro(CellKind::Rnn, 16, 8, 2).unwrap();
        let model = build_model(&cfg, 0).unwrap();
        let mut r = rng::seeded(0);
        let seq = random_sequence(1, 4, 16);
        assert!(model.encode(&seq, &mut r).is_err()); // wants 10 frames
        let bad_n = random_sequence(2, 10, 8);
        assert!(model.encode(&bad_n, &mut r).is_err());
    }

    #[test]
    fn encode_single_frame_config() {
        let mut cfg = ModelConfig::micro(CellKind::Gru, 12, 6, 2).unwrap();
        cfg.input_len = 1;
        let model = build_model(&cfg, 3).unwrap();
        let mut r = rng::seeded(1);
        let seq = random_sequence(3, 1, 12);
        let state = model.encode(&seq, &mut r).unwrap();
        assert_eq!(state.layers.len(), 1);
        let CellStateValue::Rnn { coords, state } = &state.layers[0] else { panic!() };
        assert_eq!(coords, &seq.frame(0).coords);
        assert_eq!(state.shape(), &[12, 6]);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = ModelConfig::mnist_advanced(CellKind::Lstm, 32).unwrap();
        let model = build_model(&cfg, 9).unwrap();
        let seq = random_sequence(5, 10, 32);
        let a = model.encode(&seq, &mut rng::stream(1, 0)).unwrap();
        let b = model.encode(&seq, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn static_frames_converge_toward_fixed_point() {
        // Identical frames repeated with the displacement block zeroed:
        // successive state updates shrink toward a fixed point.
        let mut cfg = ModelConfig::micro(CellKind::Lstm, 12, 6, 2).unwrap();
        cfg.input_len = 10;
        let mut model = build_model(&cfg, 11).unwrap();
        let weight_names: Vec<String> = model
            .params
            .iter()
            .filter(|(n, t)| n.starts_with("enc/") && n.ends_with("/w") && t.rank() == 2)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in weight_names {
            let id = model.params.lookup(&name).unwrap();
            let t = model.params.get_mut(id);
            let rows = t.shape()[0];
            for r in rows - 3..rows {
                for x in t.row_mut(r) {
                    *x = 0.0;
                }
            }
        }
        let seq = static_sequence(7, 10, 12);
        let mut r = rng::seeded(0);
        let through = |t: usize, r: &mut Prng| -> Tensor {
            let prefix = CloudSequence::new(seq.frames()[..t].to_vec()).unwrap();
            let mut cfg_t = model.clone();
            cfg_t.config.input_len = t;
            let state = cfg_t.encode(&prefix, r).unwrap();
            match &state.layers[0] {
                CellStateValue::Lstm { hidden, .. } => hidden.clone(),
                CellStateValue::Rnn { state, .. } => state.clone(),
            }
        };
        let h9 = through(9, &mut r);
        let h10 = through(10, &mut r);
        let drift = h9
            .data()
            .iter()
            .zip(h10.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-5, "state still moving by {}", drift);
    }

    #[test]
    fn zero_head_predicts_copies_of_last_input() {
        let cfg = ModelConfig::micro(CellKind::Rnn, 16, 8, 2).unwrap();
        let mut model = build_model(&cfg, 2).unwrap();
        for name in ["pred/fc1/w", "pred/fc1/b"] {
            let id = model.params.lookup(name).unwrap();
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = Tensor::zeros(&shape);
        }
        let seq = random_sequence(6, 10, 16);
        let mut r = rng::seeded(0);
        let state = model.encode(&seq, &mut r).unwrap();
        let last = seq.frame(9);
        let pred = model.predict(&state, last, 3, &mut r).unwrap();
        for f in pred.frames() {
            assert_eq!(&f.coords, &last.coords);
        }
    }

    #[test]
    fn rollout_rows_are_pointwise_sums() {
        let cfg = ModelConfig::micro(CellKind::Gru, 12, 6, 2).unwrap();
        let model = build_model(&cfg, 4).unwrap();
        let seq = random_sequence(8, 10, 12);
        let mut r = rng::seeded(0);
        let state = model.encode(&seq, &mut r).unwrap();
        let last = seq.frame(9);
        let steps = model.predict_steps(&state, last, 2, &mut rng::seeded(0)).unwrap();
        let pred = model.predict(&state, last, 2, &mut rng::seeded(0)).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].cloud, last.coords);
        for (step, frame) in steps.iter().zip(pred.frames()) {
            for i in 0..12 {
                for c in 0..3 {
                    let expect = step.cloud.row(i)[c] + step.delta.row(i)[c];
                    assert_eq!(frame.coords.row(i)[c], expect);
                }
            }
        }
        // Free running: step 1 consumed step 0's prediction.
        assert_eq!(steps[1].cloud, pred.frame(0).coords);
    }

    #[test]
    fn static_sequence_with_zero_head_has_zero_loss() {
        let cfg = ModelConfig::micro(CellKind::Rnn, 12, 6, 2).unwrap();
        let mut model = build_model(&cfg, 5).unwrap();
        for name in ["pred/fc1/w", "pred/fc1/b"] {
            let id = model.params.lookup(name).unwrap();
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = Tensor::zeros(&shape);
        }
        let seq = static_sequence(9, 12, 12);
        let report = model
            .forward_loss(&seq, 10, 2, &LossConfig::default(), false, &mut rng::seeded(0))
            .unwrap();
        assert_eq!(report.total, 0.0);
        assert_eq!(report.chamfer, 0.0);
        assert_eq!(report.emd, 0.0);
    }

    #[test]
    fn zero_weights_give_zero_loss_regardless() {
        let cfg = ModelConfig::micro(CellKind::Rnn, 12, 6, 2).unwrap();
        let model = build_model(&cfg, 5).unwrap();
        let seq = random_sequence(10, 12, 12);
        let cfg0 = LossConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
        let report = model.forward_loss(&seq, 10, 2, &cfg0, false, &mut rng::seeded(0)).unwrap();
        assert_eq!(report.total, 0.0);
    }

    #[test]
    fn one_step_loss_equals_hand_composition() {
        let cfg = ModelConfig::micro(CellKind::Gru, 8, 4, 2).unwrap();
        let model = build_model(&cfg, 6).unwrap();
        let mut frames = random_sequence(11, 10, 8).frames().to_vec();
        frames.push(frames[9].clone());
        let seq = CloudSequence::new(frames.clone()).unwrap();
        let loss_cfg = LossConfig::default();
        let report = model
            .forward_loss(&seq, 10, 1, &loss_cfg, false, &mut rng::seeded(0))
            .unwrap();
        // Hand composition through the public rollout.
        let inputs = CloudSequence::new(frames[..10].to_vec()).unwrap();
        let state = model.encode(&inputs, &mut rng::seeded(0)).unwrap();
        let pred = model.predict(&state, seq.frame(9), 1, &mut rng::seeded(0)).unwrap();
        let direct =
            losses::combined_value(&pred.frame(0).coords, &seq.frame(10).coords, &loss_cfg)
                .unwrap();
        assert!((report.total - direct).abs() < 1e-9);
    }

    #[test]
    fn teacher_forcing_feeds_ground_truth_back() {
        let cfg = ModelConfig::micro(CellKind::Rnn, 8, 4, 2).unwrap();
        let model = build_model(&cfg, 12).unwrap();
        let seq = random_sequence(13, 12, 8);
        let free = model
            .forward_loss(&seq, 10, 2, &LossConfig::default(), false, &mut rng::seeded(0))
            .unwrap();
        let forced = model
            .forward_loss(&seq, 10, 2, &LossConfig::default(), true, &mut rng::seeded(0))
            .unwrap();
        // First frames agree; the second step consumes different inputs.
        assert_ne!(free.total, forced.total);
    }

    #[test]
    fn permuted_inputs_predict_the_same_point_set() {
        // Basic stack under kNN: joint row permutation of every frame must
        // reproduce the same predicted set.
        let cfg = ModelConfig::micro(CellKind::Lstm, 10, 5, 2).unwrap();
        let model = build_model(&cfg, 14).unwrap();
        let seq = random_sequence(15, 10, 10);
        let perm: Vec<usize> = vec![7, 2, 9, 0, 4, 6, 1, 8, 3, 5];
        let permuted = CloudSequence::new(
            seq.frames()
                .iter()
                .map(|f| f.select(&perm).unwrap())
                .collect(),
        )
        .unwrap();
        let run = |s: &CloudSequence| -> Tensor {
            let state = model.encode(s, &mut rng::seeded(0)).unwrap();
            let pred = model.predict(&state, s.frame(9), 2, &mut rng::seeded(0)).unwrap();
            pred.frame(1).coords.clone()
        };
        let a = run(&seq);
        let b = run(&permuted);
        let cd = losses::chamfer_value(&a, &b).unwrap();
        assert!(cd <= 1e-6, "prediction sets differ: cd {}", cd);
    }

    #[test]
    fn micro_model_end_to_end_gradients() {
        // n = 8, one unit, horizon 2: every parameter against central
        // differences at 64-bit.
        for cell in [CellKind::Rnn, CellKind::Gru, CellKind::Lstm] {
            let mut cfg = ModelConfig::micro(cell, 8, 3, 2).unwrap();
            cfg.input_len = 2;
            cfg.horizon = 2;
            let model = build_model(&cfg, 21).unwrap();
            let seq = random_sequence(22, 4, 8);
            let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
            let f = |tape: &mut Tape, vars: &[Var]| {
                let bound = model.bind_vars(vars.to_vec())?;
                let mut r = rng::seeded(0);
                let loss_cfg = LossConfig::default();
                let (root, _) = bound.rollout_loss(tape, &seq, 2, 2, &loss_cfg, false, &mut r)?;
                Ok(root)
            };
            let err = finite_difference_check(&f, &params, 1e-5).unwrap();
            assert!(err < 1e-3, "{:?} end-to-end rel err {}", cell, err);
        }
    }

    #[test]
    fn custom_stack_with_two_levels_runs() {
        // A small advanced stack exercises sampling, propagation and skip
        // connections end to end.
        let cfg = ModelConfig {
            architecture: Architecture::Advanced,
            cell: CellKind::Gru,
            query: QueryMode::Ball,
            ball_select: BallSelect::Uniform,
            pool: Pool::Max,
            rnn_tanh: false,
            points: 16,
            input_len: 3,
            horizon: 2,
            layers: vec![
                LayerSpec::sample_group(8, 2.0, 3),
                LayerSpec::recurrent(Some(8), 4.0, 3, 6),
                LayerSpec::sample_group(4, 3.0, 2),
                LayerSpec::recurrent(Some(4), 6.0, 2, 8),
                LayerSpec::feature_prop(8, 6),
                LayerSpec::feature_prop(16, 6),
                LayerSpec::fully_connected(4),
                LayerSpec::fully_connected(3),
            ],
        };
        cfg.validate().unwrap();
        let model = build_model(&cfg, 30).unwrap();
        let seq = random_sequence(31, 5, 16);
        let report = model
            .forward_loss(&seq, 3, 2, &LossConfig::default(), false, &mut rng::seeded(0))
            .unwrap();
        assert!(report.total.is_finite());
        let state = model.encode(
            &CloudSequence::new(seq.frames()[..3].to_vec()).unwrap(),
            &mut rng::seeded(0),
        )
        .unwrap();
        assert_eq!(state.layers.len(), 2);
        let CellStateValue::Rnn { coords, .. } = &state.layers[1] else { panic!() };
        assert_eq!(coords.shape(), &[4, 3]);
    }
}
