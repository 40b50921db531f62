//! Multipath ULA channel simulator and task-dataset generation.
//!
//! A user's channel at carrier frequency `f` is the finite-ray sum
//!
//! ```text
//! h(f) = sum_p |alpha_p| exp(-j 2 pi f tau_p + j phi_p) a(theta_p, f)
//! a(theta, f)[m] = exp(-j varpi m sin(theta)),  varpi = 2 pi d f / c
//! ```
//!
//! The same [`UserRays`] evaluated at the uplink and downlink carriers gives
//! the coupled `(x, y)` sample pair the predictor learns to map.

use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::rng::{substream, Rng, Stream};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Uniform linear array geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub antennas: usize,
    /// Element spacing in meters.
    pub spacing: f64,
}

impl ArrayConfig {
    pub fn new(antennas: usize, spacing: f64) -> Result<Self> {
        if antennas == 0 {
            return Err(invalid("antenna count must be at least 1"));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(invalid(format!("antenna spacing must be positive, got {spacing}")));
        }
        Ok(Self { antennas, spacing })
    }

    /// Half-wavelength spacing at `f_ref`, kept fixed for every carrier.
    pub fn half_wavelength(antennas: usize, f_ref: f64) -> Result<Self> {
        Self::new(antennas, SPEED_OF_LIGHT / (2.0 * f_ref))
    }

    /// Real-stacked vector length `2M`.
    pub fn real_dim(&self) -> usize {
        2 * self.antennas
    }
}

/// One propagation environment: the angle spread its users' rays arrive in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub id: u64,
    pub as_lower: f64,
    pub as_upper: f64,
    pub ray_count: usize,
    pub amplitude_scale: f64,
    pub delay_max: f64,
    pub seed: u64,
}

impl Environment {
    pub fn width(&self) -> f64 {
        self.as_upper - self.as_lower
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.as_lower + self.as_upper)
    }
}

/// Parameters of the environment/user generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// AS width range in radians, sampled uniformly.
    pub width_min: f64,
    pub width_max: f64,
    /// Every AS lies inside `[-angle_limit, angle_limit]`.
    pub angle_limit: f64,
    pub ray_count: usize,
    /// RMS ray amplitude.
    pub amplitude_scale: f64,
    /// Ray delays are uniform in `[0, delay_max]` seconds.
    pub delay_max: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let ray_count = 25;
        Self {
            width_min: 0.05,
            width_max: 0.2,
            angle_limit: FRAC_PI_2,
            ray_count,
            amplitude_scale: 1.0 / (ray_count as f64).sqrt(),
            delay_max: 1e-6,
        }
    }
}

/// Discretized propagation state of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRays {
    pub env_id: u64,
    pub doas: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub delays: Vec<f64>,
}

impl UserRays {
    pub fn ray_count(&self) -> usize {
        self.doas.len()
    }

    /// Multiplies every ray amplitude by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.amplitudes.iter_mut().for_each(|a| *a *= s);
        out
    }
}

/// Complex gain vector between a user and the `M` array elements.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexChannel(pub Vec<Complex64>);

impl ComplexChannel {
    pub fn zeros(len: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.iter().map(|z| z * s).collect())
    }
}

/// Array steering vector for direction `theta` at carrier `f`.
pub fn array_manifold(theta: f64, f: f64, cfg: &ArrayConfig) -> Result<ComplexChannel> {
    if !theta.is_finite() {
        return Err(invalid(format!("DOA must be finite, got {theta}")));
    }
    if !(f.is_finite() && f > 0.0) {
        return Err(invalid(format!("carrier frequency must be positive, got {f}")));
    }
    let step = 2.0 * PI * cfg.spacing * f / SPEED_OF_LIGHT * theta.sin();
    Ok(ComplexChannel(
        (0..cfg.antennas)
            .map(|m| Complex64::cis(-step * m as f64))
            .collect(),
    ))
}

/// Draws the AS of environment `id`. Deterministic in `(id, master_seed)`.
pub fn sample_environment(id: u64, gen: &GeneratorConfig, master_seed: u64) -> Result<Environment> {
    if !(gen.width_min.is_finite() && gen.width_max.is_finite())
        || gen.width_min < 0.0
        || gen.width_min > gen.width_max
    {
        return Err(invalid(format!(
            "empty AS width range [{}, {}]",
            gen.width_min, gen.width_max
        )));
    }
    if !(gen.angle_limit > 0.0 && gen.angle_limit <= FRAC_PI_2) {
        return Err(invalid(format!("angle limit {} outside (0, pi/2]", gen.angle_limit)));
    }
    if gen.width_max > 2.0 * gen.angle_limit {
        return Err(invalid("AS width range exceeds the allowed angular span"));
    }
    if gen.ray_count == 0 {
        return Err(invalid("ray count must be at least 1"));
    }
    if !(gen.amplitude_scale >= 0.0 && gen.delay_max >= 0.0) {
        return Err(invalid("amplitude scale and delay_max must be nonnegative"));
    }

    let mut rng = substream(master_seed, Stream::Environment, id);
    let width = if gen.width_min == gen.width_max {
        gen.width_min
    } else {
        rng.gen_range(gen.width_min..gen.width_max)
    };
    let half_span = gen.angle_limit - 0.5 * width;
    let center = if half_span > 0.0 {
        rng.gen_range(-half_span..half_span)
    } else {
        0.0
    };
    Ok(Environment {
        id,
        as_lower: center - 0.5 * width,
        as_upper: center + 0.5 * width,
        ray_count: gen.ray_count,
        amplitude_scale: gen.amplitude_scale,
        delay_max: gen.delay_max,
        seed: master_seed,
    })
}

/// Draws one user's rays: DOAs uniform in the AS, Rayleigh amplitudes with
/// RMS `amplitude_scale`, uniform phases and uniform delays.
pub fn sample_user(env: &Environment, rng: &mut Rng) -> UserRays {
    let p = env.ray_count;
    let mut user = UserRays {
        env_id: env.id,
        doas: Vec::with_capacity(p),
        amplitudes: Vec::with_capacity(p),
        phases: Vec::with_capacity(p),
        delays: Vec::with_capacity(p),
    };
    for _ in 0..p {
        let u: f64 = rng.gen();
        user.doas.push(env.as_lower + u * (env.as_upper - env.as_lower));
        let r: f64 = rng.gen();
        user.amplitudes.push(env.amplitude_scale * (-(1.0 - r).ln()).sqrt());
        user.phases.push(rng.gen::<f64>() * 2.0 * PI);
        user.delays.push(rng.gen::<f64>() * env.delay_max);
    }
    user
}

/// Evaluates a user's channel at carrier `f`.
pub fn channel_response(user: &UserRays, f: f64, cfg: &ArrayConfig) -> Result<ComplexChannel> {
    if !(f.is_finite() && f > 0.0) {
        return Err(invalid(format!("carrier frequency must be positive, got {f}")));
    }
    let varpi = 2.0 * PI * cfg.spacing * f / SPEED_OF_LIGHT;
    let mut h = vec![Complex64::new(0.0, 0.0); cfg.antennas];
    for p in 0..user.ray_count() {
        let gain = Complex64::from_polar(
            user.amplitudes[p],
            user.phases[p] - 2.0 * PI * f * user.delays[p],
        );
        let step = varpi * user.doas[p].sin();
        for (m, hm) in h.iter_mut().enumerate() {
            *hm += gain * Complex64::cis(-step * m as f64);
        }
    }
    Ok(ComplexChannel(h))
}

/// `[Re(z); Im(z)]`.
pub fn complex_to_real(z: &ComplexChannel) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * z.len());
    out.extend(z.0.iter().map(|c| c.re));
    out.extend(z.0.iter().map(|c| c.im));
    out
}

pub fn real_to_complex(v: &[f64]) -> Result<ComplexChannel> {
    if v.len() % 2 != 0 {
        return Err(invalid(format!("real-stacked vector has odd length {}", v.len())));
    }
    let m = v.len() / 2;
    Ok(ComplexChannel(
        (0..m).map(|i| Complex64::new(v[i], v[m + i])).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    Clean,
    Awgn,
    Lmmse,
}

impl NoiseMode {
    pub fn tag(self) -> u8 {
        match self {
            NoiseMode::Clean => 0,
            NoiseMode::Awgn => 1,
            NoiseMode::Lmmse => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(NoiseMode::Clean),
            1 => Some(NoiseMode::Awgn),
            2 => Some(NoiseMode::Lmmse),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub pilot_len: u32,
    pub mode: NoiseMode,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            snr_db: 20.0,
            pilot_len: 64,
            mode: NoiseMode::Lmmse,
        }
    }
}

impl NoiseSpec {
    pub fn clean() -> Self {
        Self {
            mode: NoiseMode::Clean,
            ..Self::default()
        }
    }
}

/// Per-entry noise variance `||h||^2 / (M 10^(snr/10) L)`.
pub fn noise_variance(h: &ComplexChannel, snr_db: f64, pilot_len: u32) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    h.norm_sqr() / (h.len() as f64 * 10f64.powf(snr_db / 10.0) * pilot_len.max(1) as f64)
}

/// `h + n` with `n` circular complex Gaussian of variance [`noise_variance`].
pub fn add_awgn(h: &ComplexChannel, snr_db: f64, pilot_len: u32, rng: &mut Rng) -> ComplexChannel {
    let sigma2 = noise_variance(h, snr_db, pilot_len);
    let sd = (0.5 * sigma2).sqrt();
    ComplexChannel(
        h.0.iter()
            .map(|z| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                z + Complex64::new(sd * re, sd * im)
            })
            .collect(),
    )
}

/// Channel covariance matrix (Hermitian PSD).
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance(pub DMatrix<Complex64>);

impl Covariance {
    pub fn identity(m: usize) -> Self {
        Self(DMatrix::identity(m, m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Sample covariance of `channels`, regularized by `1e-6 trace/M` on the diagonal.
    pub fn from_samples(channels: &[ComplexChannel]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| invalid("covariance needs at least one channel"))?;
        let m = first.len();
        let mut r = DMatrix::<Complex64>::zeros(m, m);
        for h in channels {
            if h.len() != m {
                return Err(shape(format!("channel length {} != {m}", h.len())));
            }
            for i in 0..m {
                for j in 0..m {
                    r[(i, j)] += h.0[i] * h.0[j].conj();
                }
            }
        }
        r /= Complex64::new(channels.len() as f64, 0.0);
        let trace: f64 = (0..m).map(|i| r[(i, i)].re).sum();
        let ridge = 1e-6 * trace / m as f64;
        for i in 0..m {
            r[(i, i)] += ridge;
        }
        Ok(Self(r))
    }
}

/// LMMSE estimate `R (R + sigma2 I)^-1 y`.
pub fn lmmse_estimate(y: &ComplexChannel, r: &Covariance, sigma2: f64) -> Result<ComplexChannel> {
    let m = r.dim();
    if r.0.ncols() != m || y.len() != m {
        return Err(shape(format!(
            "covariance is {}x{}, observation has length {}",
            r.0.nrows(),
            r.0.ncols(),
            y.len()
        )));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("noise variance must be nonnegative, got {sigma2}")));
    }
    for i in 0..m {
        for j in i..m {
            if (r.0[(i, j)] - r.0[(j, i)].conj()).norm() > 1e-9 {
                return Err(invalid(format!("covariance is not Hermitian at ({i}, {j})")));
            }
        }
    }
    if sigma2 == 0.0 {
        return Ok(y.clone());
    }
    let mut a = r.0.clone();
    for i in 0..m {
        a[(i, i)] += sigma2;
    }
    let rhs = nalgebra::DVector::from_column_slice(&y.0);
    let z = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| invalid("R + sigma2 I is singular"))?;
    let est = &r.0 * z;
    Ok(ComplexChannel(est.iter().copied().collect()))
}

/// Frequency plan, array and noise settings shared by every environment of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub array: ArrayConfig,
    pub generator: GeneratorConfig,
    pub f_min: f64,
    pub f_max: f64,
    pub delta_f: f64,
    pub noise: NoiseSpec,
    /// Users drawn per environment (`U`).
    pub users: usize,
    /// Clean channels averaged into the LMMSE covariance.
    pub covariance_samples: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            array: ArrayConfig::half_wavelength(64, 2e9).expect("valid default array"),
            generator: GeneratorConfig::default(),
            f_min: 1e9,
            f_max: 3e9,
            delta_f: 120e6,
            noise: NoiseSpec::default(),
            users: 25,
            covariance_samples: 200,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_min > 0.0 && self.f_min <= self.f_max && self.f_max.is_finite()) {
            return Err(invalid(format!(
                "invalid uplink frequency range [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        if !(self.f_min + self.delta_f > 0.0) {
            return Err(invalid("downlink frequency must stay positive"));
        }
        if self.users == 0 {
            return Err(invalid("at least one user per environment is required"));
        }
        if self.noise.pilot_len == 0 {
            return Err(invalid("pilot length must be at least 1"));
        }
        if self.noise.mode == NoiseMode::Lmmse && self.covariance_samples == 0 {
            return Err(invalid("LMMSE mode needs covariance samples"));
        }
        Ok(())
    }
}

/// Noisy-estimation pipeline applied to both links of a sample pair.
#[derive(Debug, Clone)]
pub struct NoisePipeline {
    pub spec: NoiseSpec,
    pub covariance: Option<Covariance>,
}

impl NoisePipeline {
    pub fn clean() -> Self {
        Self {
            spec: NoiseSpec::clean(),
            covariance: None,
        }
    }

    /// Builds the pipeline for `env`; LMMSE mode estimates the covariance
    /// from fresh clean channels of that environment.
    pub fn for_environment(env: &Environment, scenario: &ScenarioConfig, spec: NoiseSpec) -> Result<Self> {
        let covariance = if spec.mode == NoiseMode::Lmmse {
            let mut rng = substream(env.seed, Stream::Covariance, env.id);
            let hi = scenario.f_max + scenario.delta_f.max(0.0);
            let lo = scenario.f_min + scenario.delta_f.min(0.0);
            let channels = (0..scenario.covariance_samples)
                .map(|_| {
                    let user = sample_user(env, &mut rng);
                    let f = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                    channel_response(&user, f, &scenario.array)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Covariance::from_samples(&channels)?)
        } else {
            None
        };
        Ok(Self { spec, covariance })
    }

    pub fn estimate(&self, h: &ComplexChannel, rng: &mut Rng) -> Result<ComplexChannel> {
        match self.spec.mode {
            NoiseMode::Clean => Ok(h.clone()),
            NoiseMode::Awgn => Ok(add_awgn(h, self.spec.snr_db, self.spec.pilot_len, rng)),
            NoiseMode::Lmmse => {
                let r = self
                    .covariance
                    .as_ref()
                    .ok_or_else(|| invalid("LMMSE pipeline has no covariance"))?;
                let sigma2 = noise_variance(h, self.spec.snr_db, self.spec.pilot_len);
                let y = add_awgn(h, self.spec.snr_db, self.spec.pilot_len, rng);
                lmmse_estimate(&y, r, sigma2)
            }
        }
    }
}

/// One `(uplink, downlink)` training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// Index of the generating user within its environment.
    pub user: u32,
    pub f_up: f64,
    pub f_down: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Noise-free downlink label, present whenever `y` is an estimate.
    pub y_clean: Option<Vec<f64>>,
}

impl SamplePair {
    pub fn clean_label(&self) -> &[f64] {
        self.y_clean.as_deref().unwrap_or(&self.y)
    }

    fn key(&self) -> (u32, u64) {
        (self.user, self.f_up.to_bits())
    }
}

pub fn make_sample_pair(
    user: &UserRays,
    user_index: u32,
    f_up: f64,
    delta_f: f64,
    cfg: &ArrayConfig,
    noise: &NoisePipeline,
    rng: &mut Rng,
) -> Result<SamplePair> {
    let f_down = f_up + delta_f;
    let h_up = channel_response(user, f_up, cfg)?;
    let h_down = channel_response(user, f_down, cfg)?;
    let (x, y, y_clean) = if noise.spec.mode == NoiseMode::Clean {
        (complex_to_real(&h_up), complex_to_real(&h_down), None)
    } else {
        let x = complex_to_real(&noise.estimate(&h_up, rng)?);
        let y = complex_to_real(&noise.estimate(&h_down, rng)?);
        (x, y, Some(complex_to_real(&h_down)))
    };
    Ok(SamplePair {
        user: user_index,
        f_up,
        f_down,
        x,
        y,
        y_clean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Pooled source-task training data.
    Train,
    TrainSupport,
    TrainQuery,
    Adaption,
    Test,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Train => 0,
            Role::TrainSupport => 1,
            Role::TrainQuery => 2,
            Role::Adaption => 3,
            Role::Test => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Role::Train),
            1 => Some(Role::TrainSupport),
            2 => Some(Role::TrainQuery),
            3 => Some(Role::Adaption),
            4 => Some(Role::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub env_id: u64,
    pub role: Role,
    pub pairs: Vec<SamplePair>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Randomly partitions the pairs into two disjoint datasets of sizes
    /// `first` and `len - first`.
    pub fn split(&self, first: usize, roles: (Role, Role), rng: &mut Rng) -> Result<(Self, Self)> {
        if first > self.len() {
            return Err(invalid(format!(
                "cannot take {first} pairs from a dataset of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        // Partial Fisher-Yates: the first `first` slots are a uniform subset.
        for i in 0..first {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        let pick = |ids: &[usize], role| TaskDataset {
            env_id: self.env_id,
            role,
            pairs: ids.iter().map(|&i| self.pairs[i].clone()).collect(),
        };
        Ok((pick(&idx[..first], roles.0), pick(&idx[first..], roles.1)))
    }

    /// True when no `(user, f_up)` key appears in both datasets.
    pub fn is_disjoint(&self, other: &TaskDataset) -> bool {
        let keys: HashSet<_> = self.pairs.iter().map(SamplePair::key).collect();
        other.pairs.iter().all(|p| !keys.contains(&p.key()))
    }
}

/// An environment together with its drawn users and noise pipeline.
#[derive(Debug, Clone)]
pub struct EnvironmentTasks {
    pub env: Environment,
    pub users: Vec<UserRays>,
    pub noise: NoisePipeline,
    scenario: ScenarioConfig,
}

impl EnvironmentTasks {
    pub fn new(env: Environment, scenario: &ScenarioConfig) -> Result<Self> {
        Self::with_noise(env, scenario, scenario.noise)
    }

    pub fn with_noise(env: Environment, scenario: &ScenarioConfig, noise: NoiseSpec) -> Result<Self> {
        scenario.validate()?;
        let mut rng = substream(env.seed, Stream::Users, env.id);
        let users = (0..scenario.users).map(|_| sample_user(&env, &mut rng)).collect();
        let noise = NoisePipeline::for_environment(&env, scenario, noise)?;
        Ok(Self {
            env,
            users,
            noise,
            scenario: scenario.clone(),
        })
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    /// Samples datasets for several roles at once. Users are chosen uniformly
    /// with replacement and `f_up` uniformly in the scenario's range; no
    /// `(user, f_up)` key is shared between two of the returned datasets.
    pub fn generate(&self, requests: &[(Role, usize)], rng: &mut Rng) -> Result<Vec<TaskDataset>> {
        let sc = &self.scenario;
        let mut taken: Vec<HashSet<(u32, u64)>> = Vec::with_capacity(requests.len());
        let mut out = Vec::with_capacity(requests.len());
        for &(role, n_pairs) in requests {
            if n_pairs == 0 {
                return Err(invalid(format!("{role:?} dataset needs at least one pair")));
            }
            let mut keys = HashSet::new();
            let mut pairs = Vec::with_capacity(n_pairs);
            let mut attempts = 0usize;
            let budget = 1000 * n_pairs;
            while pairs.len() < n_pairs {
                attempts += 1;
                if attempts > budget {
                    return Err(invalid(format!(
                        "could not draw {n_pairs} {role:?} pairs disjoint from earlier roles \
                         ({} users, frequency range [{}, {}])",
                        sc.users, sc.f_min, sc.f_max
                    )));
                }
                let u = rng.gen_range(0..self.users.len());
                let f_up = if sc.f_max > sc.f_min {
                    rng.gen_range(sc.f_min..sc.f_max)
                } else {
                    sc.f_min
                };
                let key = (u as u32, f_up.to_bits());
                if taken.iter().any(|t| t.contains(&key)) {
                    continue;
                }
                keys.insert(key);
                pairs.push(make_sample_pair(
                    &self.users[u],
                    u as u32,
                    f_up,
                    sc.delta_f,
                    &sc.array,
                    &self.noise,
                    rng,
                )?);
            }
            taken.push(keys);
            out.push(TaskDataset {
                env_id: self.env.id,
                role,
                pairs,
            });
        }
        Ok(out)
    }
}

/// Single-role convenience wrapper around [`EnvironmentTasks::generate`].
pub fn generate_task_dataset(
    env: &Environment,
    role: Role,
    n_pairs: usize,
    scenario: &ScenarioConfig,
    rng: &mut Rng,
) -> Result<TaskDataset> {
    let tasks = EnvironmentTasks::new(env.clone(), scenario)?;
    Ok(tasks.generate(&[(role, n_pairs)], rng)?.remove(0))
}
