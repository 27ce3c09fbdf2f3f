//! Dataset synthesis and ingestion.
//!
//! Moving-digit sequences are generated by bouncing thresholded digit
//! images inside a 64x64 area and sampling a fixed number of points per
//! frame. Driving-style clouds are range-cropped and resampled to a fixed
//! size. Sequences persist in the PCSEQ binary format; predictions and
//! scene flow export to ASCII PLY.

pub mod mnist;
pub mod pcseq;
pub mod ply;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

/// An ordered, fixed-size sequence of point clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudSequence {
    frames: Vec<PointCloud>,
}

impl CloudSequence {
    pub fn new(frames: Vec<PointCloud>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::contract("a sequence needs at least one frame"));
        }
        let n = frames[0].len();
        let d = frames[0].features.as_ref().map(|f| f.cols());
        for (t, f) in frames.iter().enumerate() {
            if f.len() != n {
                return Err(Error::contract(format!(
                    "frame {} holds {} points, frame 0 holds {}",
                    t,
                    f.len(),
                    n
                )));
            }
            if f.features.as_ref().map(|x| x.cols()) != d {
                return Err(Error::contract(format!("frame {} feature width differs", t)));
            }
        }
        Ok(CloudSequence { frames })
    }

    pub fn frames(&self) -> &[PointCloud] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &PointCloud {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn points_per_frame(&self) -> usize {
        self.frames[0].len()
    }

    pub fn feature_channels(&self) -> usize {
        self.frames[0].features.as_ref().map_or(0, |f| f.cols())
    }
}

/// Source images for digit synthesis.
#[derive(Debug, Clone)]
pub struct DigitBank {
    images: Vec<DigitImage>,
}

#[derive(Debug, Clone)]
pub struct DigitImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl DigitBank {
    pub fn new(images: Vec<DigitImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::contract("digit bank needs at least one image"));
        }
        Ok(DigitBank { images })
    }

    pub fn from_idx(images: &mnist::IdxImages) -> Result<Self> {
        let per = images.rows * images.cols;
        let list = (0..images.count)
            .map(|i| DigitImage {
                rows: images.rows,
                cols: images.cols,
                pixels: images.pixels[i * per..(i + 1) * per].to_vec(),
            })
            .collect();
        Self::new(list)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &DigitImage {
        &self.images[i]
    }

    /// Procedural 28x28 glyphs for the ten digits: a 5x7 dot-matrix font
    /// scaled up and box-blurred so brightness spans the full byte range.
    /// A stand-in for environments without the handwritten-digit files.
    pub fn builtin() -> Self {
        const FONT: [[u8; 7]; 10] = [
            [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
            [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
            [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
            [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
            [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
            [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
            [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
            [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
            [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
            [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
        ];
        let images = FONT
            .iter()
            .map(|glyph| {
                // 5x7 cells as 4x4 blocks inside 28x28, then one blur pass.
                let mut img = vec![0u8; 28 * 28];
                for (gy, row) in glyph.iter().enumerate() {
                    for gx in 0..5 {
                        if row & (1 << (4 - gx)) == 0 {
                            continue;
                        }
                        for dy in 0..4 {
                            for dx in 0..4 {
                                let y = gy * 4 + dy;
                                let x = 4 + gx * 4 + dx;
                                img[y * 28 + x] = 255;
                            }
                        }
                    }
                }
                let blur = |src: &[u8]| -> Vec<u8> {
                    let mut soft = vec![0u8; 28 * 28];
                    for y in 0..28usize {
                        for x in 0..28usize {
                            let mut acc = 0u32;
                            let mut cnt = 0u32;
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                                    if (0..28).contains(&ny) && (0..28).contains(&nx) {
                                        acc += src[ny as usize * 28 + nx as usize] as u32;
                                        cnt += 1;
                                    }
                                }
                            }
                            soft[y * 28 + x] = (acc / cnt) as u8;
                        }
                    }
                    soft
                };
                // Two passes leave a soft rim spanning the brightness range.
                DigitImage { rows: 28, cols: 28, pixels: blur(&blur(&img)) }
            })
            .collect();
        DigitBank { images }
    }
}

/// Pixels at or above `threshold` as (x = column, y = row) points, in
/// row-major order.
pub fn digit_to_points(image: &DigitImage, threshold: u8) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    for r in 0..image.rows {
        for c in 0..image.cols {
            if image.pixels[r * image.cols + c] >= threshold {
                points.push((c as f64, r as f64));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud(format!(
            "no pixel reaches brightness {} in a {}x{} image",
            threshold, image.rows, image.cols
        )));
    }
    Ok(points)
}

/// Synthesis settings for bouncing-digit sequences.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Square area side length in pixels.
    pub area: f64,
    pub digits: usize,
    /// Total frames per sequence.
    pub length: usize,
    /// Frames handed to the encoder; the rest are prediction targets.
    pub input_len: usize,
    /// Pixels below this brightness are dropped.
    pub threshold: u8,
    /// Points sampled per frame.
    pub samples: usize,
    /// Per-step speed drawn uniformly from this range (pixels/frame).
    pub speed_range: (f64, f64),
}

impl SynthConfig {
    pub fn one_digit() -> Self {
        SynthConfig {
            area: 64.0,
            digits: 1,
            length: 20,
            input_len: 10,
            threshold: 16,
            samples: 128,
            speed_range: (1.0, 4.0),
        }
    }

    pub fn two_digits() -> Self {
        SynthConfig { digits: 2, samples: 256, ..Self::one_digit() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::contract("samples must be positive"));
        }
        if self.digits == 0 {
            return Err(Error::contract("at least one digit required"));
        }
        if self.input_len >= self.length {
            return Err(Error::contract("split must leave frames to predict"));
        }
        if self.speed_range.0 <= 0.0 || self.speed_range.1 < self.speed_range.0 {
            return Err(Error::contract("speed range must be positive and ordered"));
        }
        Ok(())
    }
}

/// A digit bouncing inside the area: thresholded points plus kinematics.
#[derive(Debug, Clone)]
struct DigitTrack {
    points: Vec<(f64, f64)>,
    extent: (f64, f64),
    position: (f64, f64),
    velocity: (f64, f64),
}

impl DigitTrack {
    fn sample(bank: &DigitBank, cfg: &SynthConfig, rng: &mut Prng) -> Result<DigitTrack> {
        // A fully dark draw is resampled with the next image.
        let mut attempts = 0;
        let points = loop {
            let img = bank.image(rng::index(rng, bank.len()));
            match digit_to_points(img, cfg.threshold) {
                Ok(p) => break p,
                Err(_) if attempts < 100 => attempts += 1,
                Err(e) => return Err(e),
            }
        };
        let img0 = bank.image(0);
        let extent = (img0.cols as f64, img0.rows as f64);
        let max_x = cfg.area - extent.0;
        let max_y = cfg.area - extent.1;
        if max_x < 0.0 || max_y < 0.0 {
            return Err(Error::contract("digit larger than the area"));
        }
        let position = (rng::uniform_in(rng, 0.0, max_x), rng::uniform_in(rng, 0.0, max_y));
        let speed = rng::uniform_in(rng, cfg.speed_range.0, cfg.speed_range.1);
        let angle = rng::uniform_in(rng, 0.0, std::f64::consts::TAU);
        let velocity = (speed * angle.cos(), speed * angle.sin());
        Ok(DigitTrack { points, extent, position, velocity })
    }

    /// One frame-granular step: clamp into the walls and negate the
    /// velocity component that hit.
    fn advance(&mut self, area: f64) {
        let limits = (area - self.extent.0, area - self.extent.1);
        let nx = self.position.0 + self.velocity.0;
        if nx < 0.0 || nx > limits.0 {
            self.velocity.0 = -self.velocity.0;
        }
        self.position.0 = nx.clamp(0.0, limits.0);
        let ny = self.position.1 + self.velocity.1;
        if ny < 0.0 || ny > limits.1 {
            self.velocity.1 = -self.velocity.1;
        }
        self.position.1 = ny.clamp(0.0, limits.1);
    }
}

/// Bounce one scalar track, mirroring [`DigitTrack::advance`]; the tests'
/// independent reflection reference.
#[cfg(test)]
fn bounce_scalar(mut pos: f64, mut vel: f64, limit: f64, steps: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = pos + vel;
        if next < 0.0 || next > limit {
            vel = -vel;
        }
        pos = next.clamp(0.0, limit);
        out.push((pos, vel));
    }
    out
}

/// Synthesize one bouncing-digit sequence: digits move and reflect inside
/// the area; each frame unions the digit points (overlap allowed), converts
/// pixels to (x, y, 0) coordinates, and samples exactly `cfg.samples`
/// points -- without replacement when enough exist, with replacement
/// otherwise, independently per frame.
pub fn synthesize_sequence(
    cfg: &SynthConfig,
    bank: &DigitBank,
    rng: &mut Prng,
) -> Result<CloudSequence> {
    cfg.validate()?;
    let mut tracks: Vec<DigitTrack> = (0..cfg.digits)
        .map(|_| DigitTrack::sample(bank, cfg, rng))
        .collect::<Result<_>>()?;
    let mut frames = Vec::with_capacity(cfg.length);
    for _ in 0..cfg.length {
        // Coordinates quantize through f32 so sequences survive the 32-bit
        // file format bit-exactly; track kinematics stay at full precision.
        let mut union: Vec<[f64; 3]> = Vec::new();
        for track in &tracks {
            for &(px, py) in &track.points {
                union.push([
                    (track.position.0 + px) as f32 as f64,
                    (track.position.1 + py) as f32 as f64,
                    0.0,
                ]);
            }
        }
        let chosen: Vec<usize> = if union.len() >= cfg.samples {
            rng::sample_without_replacement(rng, union.len(), cfg.samples)
        } else {
            (0..cfg.samples).map(|_| rng::index(rng, union.len())).collect()
        };
        let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| union[i].to_vec()).collect();
        frames.push(PointCloud::new(Tensor::from_rows(&rows)?)?);
        for track in &mut tracks {
            track.advance(cfg.area);
        }
    }
    CloudSequence::new(frames)
}

/// Keep points with every coordinate inside the closed interval
/// [-range_bound, +range_bound], then sample exactly `n` of them (with
/// replacement only when fewer remain).
pub fn crop_and_sample(
    cloud: &PointCloud,
    range_bound: f64,
    n: usize,
    rng: &mut Prng,
) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::contract("sample count must be positive"));
    }
    let inside: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.point(i).iter().all(|c| c.abs() <= range_bound))
        .collect();
    if inside.is_empty() {
        return Err(Error::EmptyCrop(format!(
            "no points within [-{b}, {b}] on all axes",
            b = range_bound
        )));
    }
    let chosen: Vec<usize> = if inside.len() >= n {
        rng::sample_without_replacement(rng, inside.len(), n)
            .into_iter()
            .map(|i| inside[i])
            .collect()
    } else {
        (0..n).map(|_| inside[rng::index(rng, inside.len())]).collect()
    };
    cloud.select(&chosen)
}

/// The no-model baseline: repeat the final input frame `horizon` times.
pub fn copy_last_baseline(inputs: &CloudSequence, horizon: usize) -> CloudSequence {
    let last = inputs.frames().last().expect("sequences are non-empty").clone();
    CloudSequence { frames: vec![last; horizon.max(1)] }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_to_points_single_pixel() {
        let mut pixels = vec![0u8; 28 * 28];
        pixels[5 * 28 + 3] = 255;
        let img = DigitImage { rows: 28, cols: 28, pixels };
        assert_eq!(digit_to_points(&img, 16).unwrap(), vec![(3.0, 5.0)]);
    }

    #[test]
    fn digit_threshold_boundary() {
        let mut pixels = vec![0u8; 4];
        pixels[0] = 15;
        pixels[1] = 16;
        let img = DigitImage { rows: 2, cols: 2, pixels };
        assert_eq!(digit_to_points(&img, 16).unwrap(), vec![(1.0, 0.0)]);
    }

    #[test]
    fn digit_all_pass_and_all_dark() {
        let img = DigitImage { rows: 3, cols: 3, pixels: vec![200; 9] };
        assert_eq!(digit_to_points(&img, 16).unwrap().len(), 9);
        let dark = DigitImage { rows: 3, cols: 3, pixels: vec![0; 9] };
        assert!(matches!(digit_to_points(&dark, 16), Err(Error::EmptyCloud(_))));
    }

    #[test]
    fn builtin_glyphs_threshold_nontrivially() {
        let bank = DigitBank::builtin();
        assert_eq!(bank.len(), 10);
        for i in 0..10 {
            let pts = digit_to_points(bank.image(i), 16).unwrap();
            assert!(pts.len() >= 60, "glyph {} too sparse: {}", i, pts.len());
            // The blur must produce some sub-threshold but nonzero pixels.
            let partial = bank
                .image(i)
                .pixels
                .iter()
                .filter(|&&p| p > 0 && p < 16)
                .count();
            assert!(partial > 0, "glyph {} has no soft edge", i);
        }
    }

    #[test]
    fn linear_motion_moves_points_exactly() {
        let bank = DigitBank::builtin();
        let cfg = SynthConfig { speed_range: (1.0, 1.0000001), ..SynthConfig::one_digit() };
        // Hand-driven track: start inside, velocity (1, 0).
        let mut track = DigitTrack {
            points: digit_to_points(bank.image(3), cfg.threshold).unwrap(),
            extent: (28.0, 28.0),
            position: (10.0, 10.0),
            velocity: (1.0, 0.0),
        };
        for step in 0..3 {
            assert!((track.position.0 - (10.0 + step as f64)).abs() < 1e-12);
            track.advance(cfg.area);
        }
    }

    #[test]
    fn bounce_flips_velocity_and_matches_scalar_simulation() {
        let mut track = DigitTrack {
            points: vec![(0.0, 0.0)],
            extent: (28.0, 28.0),
            position: (35.0, 5.0),
            velocity: (2.5, 0.0),
        };
        // Limit is 36: one step to 37.5 clamps to 36 and flips vx.
        let oracle = bounce_scalar(35.0, 2.5, 36.0, 5);
        for (pos, vel) in oracle {
            track.advance(64.0);
            assert!((track.position.0 - pos).abs() < 1e-12);
            assert!((track.velocity.0 - vel).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesized_frames_have_exact_sample_count_and_bounds() {
        let bank = DigitBank::builtin();
        let cfg = SynthConfig::one_digit();
        let mut rng = rng::seeded(7);
        let seq = synthesize_sequence(&cfg, &bank, &mut rng).unwrap();
        assert_eq!(seq.len(), 20);
        for frame in seq.frames() {
            assert_eq!(frame.len(), 128);
            for i in 0..frame.len() {
                let p = frame.point(i);
                assert!((0.0..64.0).contains(&p[0]), "x out of area: {}", p[0]);
                assert!((0.0..64.0).contains(&p[1]), "y out of area: {}", p[1]);
                assert_eq!(p[2], 0.0);
            }
        }
    }

    #[test]
    fn two_digit_frames_hold_256_points() {
        let bank = DigitBank::builtin();
        let cfg = SynthConfig::two_digits();
        let mut rng = rng::seeded(9);
        let seq = synthesize_sequence(&cfg, &bank, &mut rng).unwrap();
        assert!(seq.frames().iter().all(|f| f.len() == 256));
    }

    #[test]
    fn speed_is_conserved_across_bounces() {
        let bank = DigitBank::builtin();
        let cfg = SynthConfig::one_digit();
        let mut rng = rng::seeded(11);
        let mut track = DigitTrack::sample(&bank, &cfg, &mut rng).unwrap();
        let speed0 = (track.velocity.0.powi(2) + track.velocity.1.powi(2)).sqrt();
        for _ in 0..100 {
            track.advance(cfg.area);
            let speed = (track.velocity.0.powi(2) + track.velocity.1.powi(2)).sqrt();
            assert!((speed - speed0).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_seeds_make_identical_sequences() {
        let bank = DigitBank::builtin();
        let cfg = SynthConfig::one_digit();
        let a = synthesize_sequence(&cfg, &bank, &mut rng::stream(42, 0)).unwrap();
        let b = synthesize_sequence(&cfg, &bank, &mut rng::stream(42, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_boundary_is_closed() {
        let cloud = PointCloud::from_points(&[
            [6.0, 0.0, 0.0],
            [5.0, 5.0, -5.0],
            [1.0, 1.0, 1.0],
        ])
        .unwrap();
        let mut rng = rng::seeded(1);
        let out = crop_and_sample(&cloud, 5.0, 2, &mut rng).unwrap();
        for i in 0..out.len() {
            assert!(out.point(i)[0] <= 5.0);
        }
        // The boundary point is eligible, the outside one never appears.
        let all: Vec<[f64; 3]> = (0..out.len()).map(|i| out.point(i)).collect();
        assert!(!all.contains(&[6.0, 0.0, 0.0]));
    }

    #[test]
    fn crop_sampling_counts() {
        let mut rng = rng::seeded(3);
        let many: Vec<[f64; 3]> = (0..2000)
            .map(|i| {
                let x = (i % 100) as f64 * 0.05 - 2.5;
                [x, 0.0, 0.0]
            })
            .collect();
        let cloud = PointCloud::from_points(&many).unwrap();
        let out = crop_and_sample(&cloud, 5.0, 1024, &mut rng).unwrap();
        assert_eq!(out.len(), 1024);

        let few = PointCloud::from_points(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let out = crop_and_sample(&few, 5.0, 10, &mut rng).unwrap();
        assert_eq!(out.len(), 10);

        let outside = PointCloud::from_points(&[[9.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(crop_and_sample(&outside, 5.0, 4, &mut rng), Err(Error::EmptyCrop(_))));
    }

    #[test]
    fn copy_last_repeats_final_frame() {
        let bank = DigitBank::builtin();
        let cfg = SynthConfig::one_digit();
        let mut rng = rng::seeded(5);
        let seq = synthesize_sequence(&cfg, &bank, &mut rng).unwrap();
        let base = copy_last_baseline(&seq, 10);
        assert_eq!(base.len(), 10);
        for f in base.frames() {
            assert_eq!(f, seq.frame(seq.len() - 1));
        }
    }
}
