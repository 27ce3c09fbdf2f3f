//! Declarative model configuration and its text file format.
//!
//! A config is a line-oriented key/value file; `layer` lines list the stack
//! in order. The schema:
//!
//! ```text
//! architecture = basic | advanced
//! cell         = rnn | gru | lstm
//! query        = knn | ball
//! ball_select  = uniform | first-k      (ball query only)
//! pool         = max | mean
//! rnn_tanh     = true | false           (activation on the plain unit)
//! points       = <n>
//! input_len    = <frames consumed>
//! horizon      = <frames predicted>
//! layer = sg pts=<m> r=<radius> k=<neighbors>
//! layer = pu [pts=<m>] r=<radius> k=<neighbors> c=<channels>
//! layer = fp pts=<m> c=<channels>
//! layer = fc c=<channels>
//! ```
//!
//! `#` starts a comment. The basic architecture stacks `pu` layers at full
//! resolution; the advanced architecture interleaves `sg`/`pu` pairs, then
//! `fp` layers that climb back to full resolution, then the `fc` head. The
//! final `fc` always has three output channels (a displacement).

use crate::cells::CellKind;
use crate::cells::Pool;
use crate::error::{Error, Result};
use crate::geometry::BallSelect;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Basic,
    Advanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    Knn,
    Ball,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    SampleGroup,
    Recurrent,
    FeatureProp,
    FullyConnected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output point count (sg, fp; optional consistency note on pu).
    pub points: Option<usize>,
    pub radius: Option<f64>,
    pub k: Option<usize>,
    pub channels: Option<usize>,
}

impl LayerSpec {
    pub fn sample_group(points: usize, radius: f64, k: usize) -> Self {
        LayerSpec { kind: LayerKind::SampleGroup, points: Some(points), radius: Some(radius), k: Some(k), channels: None }
    }

    pub fn recurrent(points: Option<usize>, radius: f64, k: usize, channels: usize) -> Self {
        LayerSpec { kind: LayerKind::Recurrent, points, radius: Some(radius), k: Some(k), channels: Some(channels) }
    }

    pub fn feature_prop(points: usize, channels: usize) -> Self {
        LayerSpec { kind: LayerKind::FeatureProp, points: Some(points), radius: None, k: None, channels: Some(channels) }
    }

    pub fn fully_connected(channels: usize) -> Self {
        LayerSpec { kind: LayerKind::FullyConnected, points: None, radius: None, k: None, channels: Some(channels) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub cell: CellKind,
    pub query: QueryMode,
    pub ball_select: BallSelect,
    pub pool: Pool,
    /// Optional tanh on the plain recurrent unit's correlation output.
    pub rnn_tanh: bool,
    /// Points per input cloud.
    pub points: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub layers: Vec<LayerSpec>,
}

fn even_fraction(n: usize, denom: usize) -> Result<usize> {
    if !n.is_multiple_of(denom) {
        return Err(Error::config(format!("{} points do not divide evenly by {}", n, denom)));
    }
    Ok(n / denom)
}

impl ModelConfig {
    /// Full-resolution three-unit stack for 64x64 moving digit data.
    pub fn mnist_basic(cell: CellKind, n: usize) -> Result<Self> {
        let cfg = ModelConfig {
            architecture: Architecture::Basic,
            cell,
            query: QueryMode::Ball,
            ball_select: BallSelect::Uniform,
            pool: Pool::Max,
            rnn_tanh: false,
            points: n,
            input_len: 10,
            horizon: 10,
            layers: vec![
                LayerSpec::recurrent(Some(n), 4.0, 8, 64),
                LayerSpec::recurrent(Some(n), 8.0, 8, 128),
                LayerSpec::recurrent(Some(n), 12.0, 8, 256),
                LayerSpec::fully_connected(64),
                LayerSpec::fully_connected(3),
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Down-up-sampling stack for 64x64 moving digit data.
    pub fn mnist_advanced(cell: CellKind, n: usize) -> Result<Self> {
        let n2 = even_fraction(n, 2)?;
        let n4 = even_fraction(n, 4)?;
        let n8 = even_fraction(n, 8)?;
        let cfg = ModelConfig {
            architecture: Architecture::Advanced,
            cell,
            query: QueryMode::Ball,
            ball_select: BallSelect::Uniform,
            pool: Pool::Max,
            rnn_tanh: false,
            points: n,
            input_len: 10,
            horizon: 10,
            layers: vec![
                LayerSpec::sample_group(n2, 1.0, 4),
                LayerSpec::recurrent(Some(n2), 4.0, 12, 64),
                LayerSpec::sample_group(n4, 2.0, 4),
                LayerSpec::recurrent(Some(n4), 8.0, 8, 128),
                LayerSpec::sample_group(n8, 4.0, 4),
                LayerSpec::recurrent(Some(n8), 12.0, 4, 256),
                LayerSpec::feature_prop(n4, 128),
                LayerSpec::feature_prop(n2, 128),
                LayerSpec::feature_prop(n, 128),
                LayerSpec::fully_connected(64),
                LayerSpec::fully_connected(3),
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Down-up-sampling stack for range-cropped driving data (meters).
    pub fn driving_advanced(cell: CellKind, n: usize) -> Result<Self> {
        let n2 = even_fraction(n, 2)?;
        let n4 = even_fraction(n, 4)?;
        let n8 = even_fraction(n, 8)?;
        let cfg = ModelConfig {
            architecture: Architecture::Advanced,
            cell,
            query: QueryMode::Ball,
            ball_select: BallSelect::Uniform,
            pool: Pool::Max,
            rnn_tanh: false,
            points: n,
            input_len: 5,
            horizon: 5,
            layers: vec![
                LayerSpec::sample_group(n2, 0.5, 8),
                LayerSpec::recurrent(Some(n2), 1.0, 24, 128),
                LayerSpec::sample_group(n4, 1.0, 8),
                LayerSpec::recurrent(Some(n4), 2.0, 16, 256),
                LayerSpec::sample_group(n8, 2.0, 8),
                LayerSpec::recurrent(Some(n8), 4.0, 8, 512),
                LayerSpec::feature_prop(n4, 256),
                LayerSpec::feature_prop(n2, 256),
                LayerSpec::feature_prop(n, 256),
                LayerSpec::fully_connected(128),
                LayerSpec::fully_connected(3),
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One-unit desk-scale stack for quick training runs.
    pub fn micro(cell: CellKind, n: usize, channels: usize, k: usize) -> Result<Self> {
        let cfg = ModelConfig {
            architecture: Architecture::Basic,
            cell,
            query: QueryMode::Knn,
            ball_select: BallSelect::Uniform,
            pool: Pool::Max,
            rnn_tanh: false,
            points: n,
            input_len: 10,
            horizon: 10,
            layers: vec![
                LayerSpec::recurrent(Some(n), 4.0, k, channels),
                LayerSpec::fully_connected(channels),
                LayerSpec::fully_connected(3),
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::config("points must be positive"));
        }
        if self.input_len == 0 || self.horizon == 0 {
            return Err(Error::config("input_len and horizon must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("layer stack is empty"));
        }
        let fc_tail: Vec<&LayerSpec> =
            self.layers.iter().filter(|l| l.kind == LayerKind::FullyConnected).collect();
        if fc_tail.is_empty() || fc_tail.last().unwrap().channels != Some(3) {
            return Err(Error::config("stack must end with a 3-channel fully-connected head"));
        }
        match self.architecture {
            Architecture::Basic => self.validate_basic(),
            Architecture::Advanced => self.validate_advanced(),
        }
    }

    fn validate_basic(&self) -> Result<()> {
        let mut seen_fc = false;
        let mut units = 0usize;
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Recurrent => {
                    if seen_fc {
                        return Err(Error::config("recurrent layer after the head"));
                    }
                    if layer.channels.is_none() || layer.k.is_none() {
                        return Err(Error::config("recurrent layer needs k and channels"));
                    }
                    if let Some(p) = layer.points {
                        if p != self.points {
                            return Err(Error::config(format!(
                                "basic stack keeps full resolution: layer lists {} points, input has {}",
                                p, self.points
                            )));
                        }
                    }
                    units += 1;
                }
                LayerKind::FullyConnected => {
                    if layer.channels.is_none() {
                        return Err(Error::config("fully-connected layer needs channels"));
                    }
                    seen_fc = true;
                }
                _ => {
                    return Err(Error::config(
                        "basic architecture allows only recurrent units and the head",
                    ))
                }
            }
        }
        if units == 0 {
            return Err(Error::config("basic stack needs at least one recurrent unit"));
        }
        Ok(())
    }

    fn validate_advanced(&self) -> Result<()> {
        // Expected shape: (sg pu)+ fp{L} fc+ with fp targets climbing back
        // through the sg ladder to full resolution.
        let mut ladder = vec![self.points];
        let mut i = 0usize;
        let layers = &self.layers;
        let mut unit_count = 0usize;
        while i + 1 < layers.len()
            && layers[i].kind == LayerKind::SampleGroup
            && layers[i + 1].kind == LayerKind::Recurrent
        {
            let sg = &layers[i];
            let pu = &layers[i + 1];
            let (Some(points), Some(_), Some(_)) = (sg.points, sg.radius, sg.k) else {
                return Err(Error::config("sample-group layer needs pts, r and k"));
            };
            let prev = *ladder.last().unwrap();
            if points == 0 || points > prev {
                return Err(Error::config(format!(
                    "sample-group output {} exceeds its input {}",
                    points, prev
                )));
            }
            if pu.channels.is_none() || pu.k.is_none() {
                return Err(Error::config("recurrent layer needs k and channels"));
            }
            if let Some(p) = pu.points {
                if p != points {
                    return Err(Error::config(format!(
                        "recurrent layer lists {} points but follows a {}-point sample-group",
                        p, points
                    )));
                }
            }
            ladder.push(points);
            unit_count += 1;
            i += 2;
        }
        if unit_count == 0 {
            return Err(Error::config("advanced stack needs sample-group/recurrent pairs"));
        }
        // fp layers retrace the ladder.
        let mut depth = ladder.len() - 1;
        while i < layers.len() && layers[i].kind == LayerKind::FeatureProp {
            let fp = &layers[i];
            let (Some(points), Some(_)) = (fp.points, fp.channels) else {
                return Err(Error::config("feature-propagation layer needs pts and c"));
            };
            if depth == 0 {
                return Err(Error::config("more feature-propagation layers than levels"));
            }
            let expect = ladder[depth - 1];
            if points != expect {
                return Err(Error::config(format!(
                    "feature propagation targets {} points, ladder expects {}",
                    points, expect
                )));
            }
            depth -= 1;
            i += 1;
        }
        if depth != 0 {
            return Err(Error::config("feature propagation must climb back to full resolution"));
        }
        while i < layers.len() && layers[i].kind == LayerKind::FullyConnected {
            if layers[i].channels.is_none() {
                return Err(Error::config("fully-connected layer needs channels"));
            }
            i += 1;
        }
        if i != layers.len() {
            return Err(Error::config("unexpected layer order in advanced stack"));
        }
        Ok(())
    }

    /// Canonical text form; `parse` round-trips it.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# pointseq model config");
        let _ = writeln!(
            out,
            "architecture = {}",
            match self.architecture {
                Architecture::Basic => "basic",
                Architecture::Advanced => "advanced",
            }
        );
        let _ = writeln!(
            out,
            "cell = {}",
            match self.cell {
                CellKind::Rnn => "rnn",
                CellKind::Gru => "gru",
                CellKind::Lstm => "lstm",
            }
        );
        let _ = writeln!(
            out,
            "query = {}",
            match self.query {
                QueryMode::Knn => "knn",
                QueryMode::Ball => "ball",
            }
        );
        let _ = writeln!(
            out,
            "ball_select = {}",
            match self.ball_select {
                BallSelect::Uniform => "uniform",
                BallSelect::FirstK => "first-k",
            }
        );
        let _ = writeln!(
            out,
            "pool = {}",
            match self.pool {
                Pool::Max => "max",
                Pool::Mean => "mean",
            }
        );
        let _ = writeln!(out, "rnn_tanh = {}", self.rnn_tanh);
        let _ = writeln!(out, "points = {}", self.points);
        let _ = writeln!(out, "input_len = {}", self.input_len);
        let _ = writeln!(out, "horizon = {}", self.horizon);
        for layer in &self.layers {
            let mut line = String::from("layer = ");
            match layer.kind {
                LayerKind::SampleGroup => {
                    let _ = write!(
                        line,
                        "sg pts={} r={} k={}",
                        layer.points.unwrap(),
                        layer.radius.unwrap(),
                        layer.k.unwrap()
                    );
                }
                LayerKind::Recurrent => {
                    let _ = write!(line, "pu");
                    if let Some(p) = layer.points {
                        let _ = write!(line, " pts={}", p);
                    }
                    let _ = write!(
                        line,
                        " r={} k={} c={}",
                        layer.radius.unwrap(),
                        layer.k.unwrap(),
                        layer.channels.unwrap()
                    );
                }
                LayerKind::FeatureProp => {
                    let _ = write!(line, "fp pts={} c={}", layer.points.unwrap(), layer.channels.unwrap());
                }
                LayerKind::FullyConnected => {
                    let _ = write!(line, "fc c={}", layer.channels.unwrap());
                }
            }
            let _ = writeln!(out, "{}", line);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut architecture = None;
        let mut cell = None;
        let mut query = None;
        let mut ball_select = BallSelect::Uniform;
        let mut pool = Pool::Max;
        let mut rnn_tanh = false;
        let mut points = None;
        let mut input_len = None;
        let mut horizon = None;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected key = value", lineno + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::config(format!("line {}: invalid {} value {:?}", lineno + 1, what, value))
            };
            match key {
                "architecture" => {
                    architecture = Some(match value {
                        "basic" => Architecture::Basic,
                        "advanced" => Architecture::Advanced,
                        _ => return Err(bad("architecture")),
                    })
                }
                "cell" => {
                    cell = Some(match value {
                        "rnn" => CellKind::Rnn,
                        "gru" => CellKind::Gru,
                        "lstm" => CellKind::Lstm,
                        _ => return Err(bad("cell")),
                    })
                }
                "query" => {
                    query = Some(match value {
                        "knn" => QueryMode::Knn,
                        "ball" => QueryMode::Ball,
                        _ => return Err(bad("query")),
                    })
                }
                "ball_select" => {
                    ball_select = match value {
                        "uniform" => BallSelect::Uniform,
                        "first-k" => BallSelect::FirstK,
                        _ => return Err(bad("ball_select")),
                    }
                }
                "pool" => {
                    pool = match value {
                        "max" => Pool::Max,
                        "mean" => Pool::Mean,
                        _ => return Err(bad("pool")),
                    }
                }
                "rnn_tanh" => {
                    rnn_tanh = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(bad("rnn_tanh")),
                    }
                }
                "points" => points = Some(value.parse().map_err(|_| bad("points"))?),
                "input_len" => input_len = Some(value.parse().map_err(|_| bad("input_len"))?),
                "horizon" => horizon = Some(value.parse().map_err(|_| bad("horizon"))?),
                "layer" => layers.push(parse_layer(value, lineno + 1)?),
                _ => return Err(Error::config(format!("line {}: unknown key {:?}", lineno + 1, key))),
            }
        }
        let cfg = ModelConfig {
            architecture: architecture.ok_or_else(|| Error::config("missing architecture"))?,
            cell: cell.ok_or_else(|| Error::config("missing cell"))?,
            query: query.ok_or_else(|| Error::config("missing query"))?,
            ball_select,
            pool,
            rnn_tanh,
            points: points.ok_or_else(|| Error::config("missing points"))?,
            input_len: input_len.ok_or_else(|| Error::config("missing input_len"))?,
            horizon: horizon.ok_or_else(|| Error::config("missing horizon"))?,
            layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_layer(value: &str, lineno: usize) -> Result<LayerSpec> {
    let mut parts = value.split_whitespace();
    let kind = match parts.next() {
        Some("sg") => LayerKind::SampleGroup,
        Some("pu") => LayerKind::Recurrent,
        Some("fp") => LayerKind::FeatureProp,
        Some("fc") => LayerKind::FullyConnected,
        other => {
            return Err(Error::config(format!("line {}: unknown layer kind {:?}", lineno, other)))
        }
    };
    let mut spec = LayerSpec { kind, points: None, radius: None, k: None, channels: None };
    for part in parts {
        let Some((key, val)) = part.split_once('=') else {
            return Err(Error::config(format!("line {}: expected attr=value, got {:?}", lineno, part)));
        };
        let bad = || Error::config(format!("line {}: invalid {} value {:?}", lineno, key, val));
        match key {
            "pts" => spec.points = Some(val.parse().map_err(|_| bad())?),
            "r" => spec.radius = Some(val.parse().map_err(|_| bad())?),
            "k" => spec.k = Some(val.parse().map_err(|_| bad())?),
            "c" => spec.channels = Some(val.parse().map_err(|_| bad())?),
            _ => return Err(Error::config(format!("line {}: unknown attr {:?}", lineno, key))),
        }
    }
    Ok(spec)
}
