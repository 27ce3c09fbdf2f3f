//! Optimization, evaluation and scene-flow export.
//!
//! Training is free-running by default: each iteration draws a batch (from
//! files or a synthesizer), averages per-sequence gradients in slot order,
//! clips elementwise and applies Adam. Every random draw derives from the
//! config seed and an absolute sequence index, so resuming from a
//! checkpoint replays the exact stream an uninterrupted run would see.
//!
//! Parameters and Adam moments round through `f32` after every update.
//! That is the training precision, and it makes the 32-bit checkpoint
//! format lossless against memory.

use crate::data::{copy_last_baseline, synthesize_sequence, CloudSequence, DigitBank, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::{self, Prng};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// How per-frame sums are reported as metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricNorm {
    /// Mean over frames of the raw per-frame sums.
    #[default]
    FrameSum,
    /// Divide each frame's sum by its summand count before averaging.
    PerPoint,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Elementwise gradient clamp into [-clip_bound, +clip_bound].
    pub clip_bound: f64,
    pub loss: LossConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub input_len: usize,
    pub horizon: usize,
    pub teacher_forcing: bool,
    pub normalization: MetricNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            clip_bound: 5.0,
            loss: LossConfig::default(),
            iterations: 2000,
            batch_size: 32,
            seed: 0,
            input_len: 10,
            horizon: 10,
            teacher_forcing: false,
            normalization: MetricNorm::FrameSum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::contract("learning rate must be positive"));
        }
        if self.clip_bound <= 0.0 {
            return Err(Error::contract("clip bound must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        self.loss.validate()
    }
}

/// First/second moment estimates mirroring the parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Bias-corrected Adam update in place. Updated parameters and moments are
/// rounded through `f32`.
#[allow(clippy::needless_range_loop)] // four stores walked by one index
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..grads.len() {
        let id = crate::params::ParamId(i);
        if params.get(id).shape() != grads[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient {:?} for parameter {:?} ({})",
                    grads[i].shape(),
                    params.get(id).shape(),
                    params.name(id)
                ),
            ));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.get_mut(id);
        for ((pv, g), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * g;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * g * g;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
            *pv = *pv as f32 as f64;
            *mv = *mv as f32 as f64;
            *vv = *vv as f32 as f64;
        }
        if !p.is_finite() || !m.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite("adam_step"));
        }
    }
    Ok(())
}

/// Elementwise clamp into [-bound, +bound].
pub fn clip_gradients(grads: &mut [Tensor], bound: f64) -> Result<()> {
    if bound <= 0.0 {
        return Err(Error::contract("clip bound must be positive"));
    }
    for g in grads {
        for x in g.data_mut() {
            *x = x.clamp(-bound, bound);
        }
    }
    Ok(())
}

/// Where training batches come from.
pub enum DataSource {
    /// Fixed pool sampled with replacement.
    Files(Vec<CloudSequence>),
    /// Fresh sequences synthesized on demand.
    Synth { config: SynthConfig, bank: DigitBank },
}

impl DataSource {
    /// The sequence for absolute index `index` under `seed`. Pure function
    /// of its arguments, which is what makes resume exact.
    pub fn draw(&self, seed: u64, index: u64) -> Result<CloudSequence> {
        let mut rng = rng::stream(seed, index);
        match self {
            DataSource::Files(pool) => {
                if pool.is_empty() {
                    return Err(Error::contract("data pool is empty"));
                }
                Ok(pool[rng::index(&mut rng, pool.len())].clone())
            }
            DataSource::Synth { config, bank } => synthesize_sequence(config, bank, &mut rng),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: u64,
    pub loss: f64,
    pub chamfer: f64,
    pub emd: f64,
    pub elapsed_ms: u128,
}

impl TrainRecord {
    /// Line format: deterministic fields first, wall time last.
    pub fn to_line(&self) -> String {
        format!(
            "iter={} loss={:?} cd={:?} emd={:?} elapsed_ms={}",
            self.iteration, self.loss, self.chamfer, self.emd, self.elapsed_ms
        )
    }

    /// The line without its wall-time field, for run-to-run comparison.
    pub fn deterministic_prefix(line: &str) -> &str {
        match line.rfind(" elapsed_ms=") {
            Some(pos) => &line[..pos],
            None => line,
        }
    }
}

const FORWARD_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Run `config.iterations` training iterations starting at absolute
/// iteration `start`. `sink` observes every record as it is produced.
pub fn train(
    model: &mut Model,
    data: &DataSource,
    config: &TrainConfig,
    adam: &mut AdamState,
    start: u64,
    mut sink: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.iterations as usize);
    let t0 = std::time::Instant::now();
    for it in start..start + config.iterations {
        let indices: Vec<u64> =
            (0..config.batch_size as u64).map(|s| it * config.batch_size as u64 + s).collect();
        let results: Vec<Result<(crate::model::LossReport, Vec<Tensor>)>> = indices
            .par_iter()
            .map(|&seq_index| {
                let seq = data.draw(config.seed, seq_index)?;
                let mut fwd = rng::stream(config.seed ^ FORWARD_SEED_SALT, seq_index);
                model.loss_and_gradients(
                    &seq,
                    config.input_len,
                    config.horizon,
                    &config.loss,
                    config.teacher_forcing,
                    &mut fwd,
                )
            })
            .collect();
        let mut mean_grads: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        let mut cd_sum = 0.0;
        let mut emd_sum = 0.0;
        for (slot, result) in results.into_iter().enumerate() {
            let (report, grads) = result.map_err(|e| {
                Error::Aborted(format!(
                    "iteration {}, batch stream {}: {}",
                    it, indices[slot], e
                ))
            })?;
            if !report.total.is_finite() {
                return Err(Error::Aborted(format!(
                    "non-finite loss at iteration {}, batch stream {}",
                    it, indices[slot]
                )));
            }
            loss_sum += report.total;
            cd_sum += report.chamfer;
            emd_sum += report.emd;
            match &mut mean_grads {
                None => mean_grads = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = mean_grads.expect("batch size is positive");
        let inv = 1.0 / config.batch_size as f64;
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= inv;
            }
        }
        clip_gradients(&mut grads, config.clip_bound)?;
        debug_assert!(grads
            .iter()
            .all(|g| g.data().iter().all(|x| x.abs() <= config.clip_bound)));
        adam_step(&mut model.params, &grads, adam, config.learning_rate)?;
        let record = TrainRecord {
            iteration: it,
            loss: loss_sum * inv,
            chamfer: cd_sum * inv,
            emd: emd_sum * inv,
            elapsed_ms: t0.elapsed().as_millis(),
        };
        sink(&record);
        records.push(record);
    }
    Ok(records)
}

fn norm_divisors(norm: MetricNorm, n_pred: usize, n_gt: usize) -> (f64, f64) {
    match norm {
        MetricNorm::FrameSum => (1.0, 1.0),
        MetricNorm::PerPoint => ((n_pred + n_gt) as f64, n_pred as f64),
    }
}

/// Chamfer and assignment metrics of a predicted sequence against target
/// frames: mean over frames of the (optionally per-point) per-frame value.
pub fn sequence_metrics(
    pred: &CloudSequence,
    targets: &[crate::geometry::PointCloud],
    norm: MetricNorm,
    loss_cfg: &LossConfig,
) -> Result<(f64, f64)> {
    if pred.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            pred.len(),
            targets.len()
        )));
    }
    let mut cd_total = 0.0;
    let mut emd_total = 0.0;
    for (p, t) in pred.frames().iter().zip(targets) {
        let cd = losses::chamfer_value(&p.coords, &t.coords)?;
        let emd = if p.len() <= loss_cfg.emd_exact_threshold {
            losses::emd_exact(&p.coords, &t.coords)?.0
        } else {
            losses::emd_approx(&p.coords, &t.coords, loss_cfg.emd_epsilon)?.0
        };
        let (cd_div, emd_div) = norm_divisors(norm, p.len(), t.len());
        cd_total += cd / cd_div;
        emd_total += emd / emd_div;
    }
    Ok((cd_total / pred.len() as f64, emd_total / pred.len() as f64))
}

/// Evaluate a model over held-out sequences: encode the first `in_len`
/// frames, roll out `out_len` predictions, and average metrics over
/// sequences. Per-sequence generators are seeded by index, so results do
/// not depend on evaluation order.
pub fn evaluate_model(
    model: &Model,
    sequences: &[CloudSequence],
    in_len: usize,
    out_len: usize,
    norm: MetricNorm,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if sequences.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let per_seq: Vec<Result<(f64, f64)>> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            if seq.len() != in_len + out_len {
                return Err(Error::contract(format!(
                    "sequence {} holds {} frames, split wants {}",
                    i,
                    seq.len(),
                    in_len + out_len
                )));
            }
            let inputs = CloudSequence::new(seq.frames()[..in_len].to_vec())?;
            let mut fwd = rng::stream(seed, i as u64);
            let state = model.encode(&inputs, &mut fwd)?;
            let pred = model.predict(&state, seq.frame(in_len - 1), out_len, &mut fwd)?;
            sequence_metrics(&pred, &seq.frames()[in_len..], norm, loss_cfg)
        })
        .collect();
    let mut cd = 0.0;
    let mut emd = 0.0;
    for r in per_seq {
        let (c, e) = r?;
        cd += c;
        emd += e;
    }
    let n = sequences.len() as f64;
    Ok((cd / n, emd / n))
}

/// Metrics of the copy-last-input baseline over the same protocol.
pub fn evaluate_copy_last(
    sequences: &[CloudSequence],
    in_len: usize,
    out_len: usize,
    norm: MetricNorm,
    loss_cfg: &LossConfig,
) -> Result<(f64, f64)> {
    if sequences.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let mut cd = 0.0;
    let mut emd = 0.0;
    for seq in sequences {
        if seq.len() != in_len + out_len {
            return Err(Error::contract("sequence length does not match the split"));
        }
        let inputs = CloudSequence::new(seq.frames()[..in_len].to_vec())?;
        let pred = copy_last_baseline(&inputs, out_len);
        let (c, e) = sequence_metrics(&pred, &seq.frames()[in_len..], norm, loss_cfg)?;
        cd += c;
        emd += e;
    }
    let n = sequences.len() as f64;
    Ok((cd / n, emd / n))
}

/// One predicted step's surviving flow rows.
#[derive(Debug, Clone)]
pub struct FlowFrame {
    /// m x 3 positions whose flow magnitude met the threshold.
    pub points: Tensor,
    /// m x 3 displacements.
    pub flow: Tensor,
}

/// Roll the model out and keep, per step, the (point, displacement) rows
/// with flow magnitude at or above `threshold`.
pub fn export_scene_flow(
    model: &Model,
    inputs: &CloudSequence,
    horizon: usize,
    threshold: f64,
    rng: &mut Prng,
) -> Result<Vec<FlowFrame>> {
    let state = model.encode(inputs, rng)?;
    let steps = model.predict_steps(&state, inputs.frame(inputs.len() - 1), horizon, rng)?;
    let mut frames = Vec::with_capacity(steps.len());
    for step in steps {
        let n = step.cloud.rows();
        let mut pts = Vec::new();
        let mut flow = Vec::new();
        let mut kept = 0usize;
        for i in 0..n {
            let d = step.delta.row(i);
            let mag = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if mag >= threshold {
                pts.extend_from_slice(step.cloud.row(i));
                flow.extend_from_slice(d);
                kept += 1;
            }
        }
        frames.push(FlowFrame {
            points: Tensor::from_vec(&[kept, 3], pts)?,
            flow: Tensor::from_vec(&[kept, 3], flow)?,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::config::ModelConfig;
    use crate::geometry::PointCloud;
    use crate::model::build_model;

    fn micro_model(seed: u64) -> Model {
        let cfg = ModelConfig::micro(CellKind::Rnn, 16, 6, 2).unwrap();
        build_model(&cfg, seed).unwrap()
    }

    fn store_of(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.register(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut params = store_of(&[("x", Tensor::scalar(1.0))]);
        let mut adam = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut adam, 1e-5).unwrap();
        let moved = 1.0 - params.get(crate::params::ParamId(0)).item();
        // Exact up to the epsilon in the update and the f32 training
        // precision of the stored parameter.
        assert!((moved - 1e-5).abs() < 1e-7, "step was {}", moved);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = store_of(&[("x", Tensor::from_vec(&[3], vec![0.5, -0.25, 2.0]).unwrap())]);
        let before = params.get(crate::params::ParamId(0)).clone();
        let mut adam = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[3])], &mut adam, 1e-3).unwrap();
        assert_eq!(params.get(crate::params::ParamId(0)), &before);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut params = store_of(&[("x", Tensor::scalar(1.0))]);
        let mut adam = AdamState::new(&params);
        let mut last = 1.0;
        for _ in 0..3 {
            let x = params.get(crate::params::ParamId(0)).item();
            adam_step(&mut params, &[Tensor::scalar(2.0 * x)], &mut adam, 1e-2).unwrap();
            let now = params.get(crate::params::ParamId(0)).item();
            assert!(now < last, "{} !< {}", now, last);
            last = now;
        }
    }

    #[test]
    fn adam_shape_mismatch_names_parameter() {
        let mut params = store_of(&[("layer/w", Tensor::zeros(&[2, 2]))]);
        let mut adam = AdamState::new(&params);
        let err = adam_step(&mut params, &[Tensor::zeros(&[3])], &mut adam, 1e-3).unwrap_err();
        assert!(err.to_string().contains("layer/w"), "{}", err);
    }

    #[test]
    fn clip_clamps_in_both_directions() {
        let mut grads = vec![Tensor::from_vec(&[3], vec![7.2, -12.0, 3.3]).unwrap()];
        clip_gradients(&mut grads, 5.0).unwrap();
        assert_eq!(grads[0].data(), &[5.0, -5.0, 3.3]);
    }

    fn synth_source() -> DataSource {
        let mut cfg = SynthConfig::one_digit();
        cfg.samples = 16;
        DataSource::Synth { config: cfg, bank: DigitBank::builtin() }
    }

    #[test]
    fn zero_iterations_touch_nothing() {
        let mut model = micro_model(1);
        let before: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let mut adam = AdamState::new(&model.params);
        let cfg = TrainConfig {
            iterations: 0,
            batch_size: 2,
            loss: LossConfig { beta: 0.0, ..Default::default() },
            ..Default::default()
        };
        let records = train(&mut model, &synth_source(), &cfg, &mut adam, 0, |_| {}).unwrap();
        assert!(records.is_empty());
        for (i, (_, t)) in model.params.iter().enumerate() {
            assert_eq!(t, &before[i]);
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = TrainConfig {
            iterations: 6,
            batch_size: 2,
            learning_rate: 1e-4,
            loss: LossConfig { beta: 0.0, ..Default::default() },
            ..Default::default()
        };
        // Straight run.
        let mut a = micro_model(5);
        let mut adam_a = AdamState::new(&a.params);
        let rec_a = train(&mut a, &synth_source(), &cfg, &mut adam_a, 0, |_| {}).unwrap();
        // Same seeds, second run.
        let mut b = micro_model(5);
        let mut adam_b = AdamState::new(&b.params);
        let rec_b = train(&mut b, &synth_source(), &cfg, &mut adam_b, 0, |_| {}).unwrap();
        for (x, y) in rec_a.iter().zip(&rec_b) {
            assert_eq!(
                TrainRecord::deterministic_prefix(&x.to_line()),
                TrainRecord::deterministic_prefix(&y.to_line())
            );
        }
        // Split run: 3 iterations, then resume for 3 more.
        let mut c = micro_model(5);
        let mut adam_c = AdamState::new(&c.params);
        let head = TrainConfig { iterations: 3, ..cfg.clone() };
        let first = train(&mut c, &synth_source(), &head, &mut adam_c, 0, |_| {}).unwrap();
        let second = train(&mut c, &synth_source(), &head, &mut adam_c, 3, |_| {}).unwrap();
        let stitched: Vec<&TrainRecord> = first.iter().chain(second.iter()).collect();
        for (x, y) in rec_a.iter().zip(stitched) {
            assert_eq!(x.iteration, y.iteration);
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.chamfer, y.chamfer);
        }
        for ((_, ta), (_, tc)) in a.params.iter().zip(c.params.iter()) {
            assert_eq!(ta, tc);
        }
    }

    #[test]
    fn micro_training_reduces_smoothed_loss() {
        // 200 iterations on synthesized one-digit data; compare the mean of
        // the first and last 50 losses.
        let cfg = ModelConfig::micro(CellKind::Rnn, 32, 8, 2).unwrap();
        let mut model = build_model(&cfg, 3).unwrap();
        let mut adam = AdamState::new(&model.params);
        let mut synth = SynthConfig::one_digit();
        synth.samples = 32;
        let data = DataSource::Synth { config: synth, bank: DigitBank::builtin() };
        let tcfg = TrainConfig {
            iterations: 200,
            batch_size: 2,
            learning_rate: 5e-4,
            loss: LossConfig { beta: 0.0, ..Default::default() },
            ..Default::default()
        };
        let records = train(&mut model, &data, &tcfg, &mut adam, 0, |_| {}).unwrap();
        let head: f64 = records[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        let tail: f64 = records[150..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        assert!(tail < head, "no improvement: head {} tail {}", head, tail);
    }

    #[test]
    fn non_finite_parameters_abort_with_stream_diagnostics() {
        let mut model = micro_model(9);
        let id = model.params.lookup("pred/fc1/w").unwrap();
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = Tensor::from_vec(
            &shape,
            (0..shape.iter().product::<usize>()).map(|_| 1e300).collect(),
        )
        .unwrap();
        let mut adam = AdamState::new(&model.params);
        let cfg = TrainConfig {
            iterations: 1,
            batch_size: 2,
            loss: LossConfig { beta: 0.0, ..Default::default() },
            ..Default::default()
        };
        let err = train(&mut model, &synth_source(), &cfg, &mut adam, 0, |_| {}).unwrap_err();
        match err {
            Error::Aborted(msg) => assert!(msg.contains("iteration 0"), "{}", msg),
            other => panic!("expected abort, got {}", other),
        }
    }

    fn static_set(count: usize, frames: usize, n: usize) -> Vec<CloudSequence> {
        (0..count)
            .map(|i| {
                let mut r = rng::stream(77, i as u64);
                let cloud = PointCloud::new(Tensor::uniform(&[n, 3], 4.0, &mut r)).unwrap();
                CloudSequence::new(vec![cloud; frames]).unwrap()
            })
            .collect()
    }

    #[test]
    fn copy_last_on_static_data_scores_zero() {
        let set = static_set(5, 12, 16);
        let (cd, emd) =
            evaluate_copy_last(&set, 10, 2, MetricNorm::FrameSum, &LossConfig::default()).unwrap();
        assert_eq!(cd, 0.0);
        assert_eq!(emd, 0.0);
    }

    #[test]
    fn copy_last_on_moving_digits_is_strictly_positive() {
        let synth = SynthConfig::one_digit();
        let bank = DigitBank::builtin();
        let set: Vec<CloudSequence> = (0..100)
            .map(|i| synthesize_sequence(&synth, &bank, &mut rng::stream(31, i)).unwrap())
            .collect();
        let cfg = LossConfig { emd_exact_threshold: 128, ..Default::default() };
        let (cd, emd) = evaluate_copy_last(&set, 10, 10, MetricNorm::FrameSum, &cfg).unwrap();
        assert!(cd > 0.0);
        assert!(emd > 0.0);
    }

    #[test]
    fn evaluation_is_seed_deterministic() {
        let model = micro_model(11);
        let mut synth = SynthConfig::one_digit();
        synth.samples = 16;
        let bank = DigitBank::builtin();
        let set: Vec<CloudSequence> = (0..4)
            .map(|i| synthesize_sequence(&synth, &bank, &mut rng::stream(3, i)).unwrap())
            .collect();
        let a = evaluate_model(&model, &set, 10, 10, MetricNorm::FrameSum, &LossConfig::default(), 5)
            .unwrap();
        let b = evaluate_model(&model, &set, 10, 10, MetricNorm::FrameSum, &LossConfig::default(), 5)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_point_normalization_divides_sums() {
        let p = CloudSequence::new(vec![
            PointCloud::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap(),
        ])
        .unwrap();
        let t = vec![PointCloud::from_points(&[[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]]).unwrap()];
        let cfg = LossConfig::default();
        let (cd_sum, emd_sum) = sequence_metrics(&p, &t, MetricNorm::FrameSum, &cfg).unwrap();
        let (cd_pp, emd_pp) = sequence_metrics(&p, &t, MetricNorm::PerPoint, &cfg).unwrap();
        assert!((cd_sum - 4.0).abs() < 1e-12); // four unit-squared matches
        assert!((emd_sum - 2.0).abs() < 1e-12);
        assert!((cd_pp - 1.0).abs() < 1e-12); // divided by n_pred + n_gt
        assert!((emd_pp - 1.0).abs() < 1e-12); // divided by n
    }

    #[test]
    fn scene_flow_threshold_semantics() {
        let cfg = ModelConfig::micro(CellKind::Rnn, 16, 6, 2).unwrap();
        let mut model = build_model(&cfg, 13).unwrap();
        let mut r = rng::seeded(0);
        let inputs = CloudSequence::new(
            (0..10)
                .map(|_| PointCloud::new(Tensor::uniform(&[16, 3], 4.0, &mut r)).unwrap())
                .collect(),
        )
        .unwrap();
        // Zero head emits zero flow: nothing survives a positive threshold.
        for name in ["pred/fc1/w", "pred/fc1/b"] {
            let id = model.params.lookup(name).unwrap();
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = Tensor::zeros(&shape);
        }
        let frames =
            export_scene_flow(&model, &inputs, 3, 0.01, &mut rng::seeded(1)).unwrap();
        assert!(frames.iter().all(|f| f.points.rows() == 0));
        // Threshold zero keeps every row.
        let frames = export_scene_flow(&model, &inputs, 3, 0.0, &mut rng::seeded(1)).unwrap();
        assert!(frames.iter().all(|f| f.points.rows() == 16));
        // A tiny uniform bias emits flow below 0.01 everywhere: the filter
        // removes all of it again.
        let id = model.params.lookup("pred/fc1/b").unwrap();
        *model.params.get_mut(id) = Tensor::from_vec(&[3], vec![1e-4, 0.0, 0.0]).unwrap();
        let frames =
            export_scene_flow(&model, &inputs, 3, 0.01, &mut rng::seeded(1)).unwrap();
        assert!(frames.iter().all(|f| f.points.rows() == 0));
    }
}
