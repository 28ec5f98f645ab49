//! Synthetic task families and seeded sample streams.
//!
//! Complex baseband values are carried as `[re, im]` pairs so every model
//! sees a real 2-D input.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Episode, Sample};
use crate::error::{Error, Result};

/// QPSK points `{−1−j, −1+j, 1+j, 1−j}` indexed `0..4`.
pub const QPSK_CONSTELLATION: [[f64; 2]; 4] = [[-1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [1.0, -1.0]];

/// Per-task receiver state: carrier phase, IQ gain imbalance `ε`, IQ phase
/// skew `δ` and SNR in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpskTaskParams {
    pub phi: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub snr_db: f64,
}

impl QpskTaskParams {
    /// Linear SNR `γ = 10^{snr_db/10}`.
    pub fn gamma(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }

    /// Standard deviation of each noise component; `CN(0, 1/γ)` splits its
    /// variance evenly between I and Q.
    pub fn noise_std(&self) -> f64 {
        (0.5 / self.gamma()).sqrt()
    }
}

/// φ ~ U[0, 2π), ε ~ U[0, 0.3], δ ~ U[0, π/6], SNR ~ U[0, 10] dB.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R) -> QpskTaskParams {
    QpskTaskParams {
        phi: rng.gen_range(0.0..2.0 * PI),
        epsilon: rng.gen_range(0.0..=0.3),
        delta: rng.gen_range(0.0..=PI / 6.0),
        snr_db: rng.gen_range(0.0..=10.0),
    }
}

fn check_symbol(y: usize) -> Result<[f64; 2]> {
    QPSK_CONSTELLATION
        .get(y)
        .copied()
        .ok_or(Error::LabelOutOfRange { label: y, classes: 4 })
}

/// IQ imbalance `f(y)`: `diag(1+ε, 1−ε) · [[cos δ, −sin δ], [−sin δ, cos δ]]`
/// applied to `(Re y, Im y)`.
///
/// Both off-diagonal entries carry `−sin δ`, so this is a shear-like mixing
/// rather than a rotation.
pub fn impair(y: usize, params: &QpskTaskParams) -> Result<[f64; 2]> {
    let [yi, yq] = check_symbol(y)?;
    let (s, c) = params.delta.sin_cos();
    Ok([
        (1.0 + params.epsilon) * (c * yi - s * yq),
        (1.0 - params.epsilon) * (-s * yi + c * yq),
    ])
}

/// `e^{jφ} f(y)`, the received sample before noise.
pub fn observe_noiseless(y: usize, params: &QpskTaskParams) -> Result<[f64; 2]> {
    let [a, b] = impair(y, params)?;
    let (s, c) = params.phi.sin_cos();
    Ok([a * c - b * s, a * s + b * c])
}

/// `x = e^{jφ} f(y) + v`, `v ~ CN(0, 1/γ)`.
pub fn sample_observation<R: Rng + ?Sized>(y: usize, params: &QpskTaskParams, rng: &mut R) -> Result<Vec<f64>> {
    let [re, im] = observe_noiseless(y, params)?;
    let sd = params.noise_std();
    let nr: f64 = rng.sample(StandardNormal);
    let ni: f64 = rng.sample(StandardNormal);
    Ok(vec![re + sd * nr, im + sd * ni])
}

/// `n` context pairs and one query pair, labels uniform over the
/// constellation.
pub fn sample_episode<R: Rng + ?Sized>(params: &QpskTaskParams, n: usize, rng: &mut R) -> Episode {
    let tp = TaskParams::Qpsk(*params);
    tp.sample_episode(n, rng)
}

/// Gaussian blob classification: `K` class means in a square box, shared
/// isotropic spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianTaskConfig {
    pub num_classes: usize,
    pub box_half_width: f64,
    pub sigma: f64,
    /// Minimum pairwise distance between class means.
    pub min_separation: f64,
}

impl Default for GaussianTaskConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            box_half_width: 3.0,
            sigma: 0.1,
            min_separation: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTaskParams {
    pub means: Vec<[f64; 2]>,
    pub sigma: f64,
}

pub fn sample_gaussian_task<R: Rng + ?Sized>(cfg: &GaussianTaskConfig, rng: &mut R) -> Result<GaussianTaskParams> {
    if cfg.num_classes == 0 || cfg.sigma <= 0.0 || cfg.box_half_width <= 0.0 {
        return Err(Error::InvalidArgument(format!("bad gaussian task config {cfg:?}")));
    }
    let w = cfg.box_half_width;
    let mut means: Vec<[f64; 2]> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0;
    while means.len() < cfg.num_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidArgument(
                "cannot place class means at the requested separation".into(),
            ));
        }
        let m = [rng.gen_range(-w..=w), rng.gen_range(-w..=w)];
        let far = means
            .iter()
            .all(|o| ((o[0] - m[0]).powi(2) + (o[1] - m[1]).powi(2)).sqrt() >= cfg.min_separation);
        if far {
            means.push(m);
        }
    }
    Ok(GaussianTaskParams {
        means,
        sigma: cfg.sigma,
    })
}

pub fn sample_gaussian_episode<R: Rng + ?Sized>(params: &GaussianTaskParams, n: usize, rng: &mut R) -> Episode {
    TaskParams::Gaussian(params.clone()).sample_episode(n, rng)
}

/// Which generator a run draws tasks from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskFamily {
    #[default]
    Qpsk,
    Gaussian(GaussianTaskConfig),
}

impl TaskFamily {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::Qpsk => QPSK_CONSTELLATION.len(),
            Self::Gaussian(c) => c.num_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        2
    }

    pub fn sample_task<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TaskParams> {
        Ok(match self {
            Self::Qpsk => TaskParams::Qpsk(sample_task(rng)),
            Self::Gaussian(c) => TaskParams::Gaussian(sample_gaussian_task(c, rng)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskParams {
    Qpsk(QpskTaskParams),
    Gaussian(GaussianTaskParams),
}

impl TaskParams {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::Qpsk(_) => QPSK_CONSTELLATION.len(),
            Self::Gaussian(p) => p.means.len(),
        }
    }

    /// One i.i.d. labelled draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let y = rng.gen_range(0..self.num_classes());
        let x = match self {
            Self::Qpsk(p) => sample_observation(y, p, rng).expect("label in range"),
            Self::Gaussian(p) => {
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                vec![p.means[y][0] + p.sigma * nx, p.means[y][1] + p.sigma * ny]
            }
        };
        Sample::new(x, y)
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Sample> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    pub fn sample_episode<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Episode {
        let context = self.sample_many(n, rng);
        let query = self.sample(rng);
        Episode { context, query }
    }
}

/// Seed domains kept disjoint so training, validation and test data never
/// share a random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Init,
    Train,
    Validation,
    Test,
    Shuffle,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Self::Init => 0x1d1c_0001,
            Self::Train => 0x1d1c_0002,
            Self::Validation => 0x1d1c_0003,
            Self::Test => 0x1d1c_0004,
            Self::Shuffle => 0x1d1c_0005,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `(base, stream, a, b)` into one 64-bit seed.
pub fn derive_seed(base: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(base ^ stream.tag().rotate_left(32));
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

/// RNG for item `(a, b)` of a stream, e.g. `(task, realization)`.
pub fn stream_rng(base: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, a, b))
}

/// Writes one JSON episode per line.
pub fn write_episodes<W: Write>(mut w: W, episodes: &[Episode]) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episodes<R: BufRead>(r: R) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
