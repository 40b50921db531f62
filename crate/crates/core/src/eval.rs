//! NMSE, per-target testing and the three-way comparison harness.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ComplexChannel, EnvironmentTasks, NoiseMode, NoiseSpec, Role, TaskDataset};
use crate::error::{invalid, shape, Result};
use crate::net::{predict, NetParams};
use crate::rng::{substream, Stream};
use crate::transfer::{
    adapt, initial_params, meta_train, source_environments, source_training_sets, target_environments,
    train_no_transfer, Provenance, TrainConfig, TrainedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    NoTransfer,
    DirectTransfer,
    MetaLearning,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::NoTransfer, Algorithm::DirectTransfer, Algorithm::MetaLearning];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::NoTransfer => "no-transfer",
            Algorithm::DirectTransfer => "direct-transfer",
            Algorithm::MetaLearning => "meta-learning",
        }
    }
}

/// `||h - h_hat||^2 / ||h||^2`.
pub fn nmse(h_true: &ComplexChannel, h_hat: &ComplexChannel) -> Result<f64> {
    if h_true.len() != h_hat.len() {
        return Err(shape(format!("channel lengths {} and {}", h_true.len(), h_hat.len())));
    }
    let err: f64 = h_true.0.iter().zip(&h_hat.0).map(|(a, b)| (a - b).norm_sqr()).sum();
    ratio(err, h_true.norm_sqr())
}

/// NMSE on the real stacked representation (identical to [`nmse`] on the complex vectors).
pub fn nmse_real(y_true: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y_true.len() != y_hat.len() {
        return Err(shape(format!("vector lengths {} and {}", y_true.len(), y_hat.len())));
    }
    let err: f64 = y_true.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    ratio(err, y_true.iter().map(|v| v * v).sum())
}

fn ratio(err: f64, energy: f64) -> Result<f64> {
    if !(energy > 0.0) {
        return Err(invalid("NMSE is undefined for a zero true channel"));
    }
    Ok(err / energy)
}

pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Mean per-sample NMSE of `params` on `d_te`, measured against clean labels.
pub fn dataset_nmse(params: &NetParams, d_te: &TaskDataset) -> Result<f64> {
    if d_te.is_empty() {
        return Err(invalid("test set is empty"));
    }
    let xs: Vec<f64> = d_te.pairs.iter().flat_map(|p| p.x.iter().copied()).collect();
    let out = predict(params, &xs)?;
    let d = params.spec().output_dim();
    let mut total = 0.0;
    for (p, y_hat) in d_te.pairs.iter().zip(out.chunks_exact(d)) {
        total += nmse_real(p.clean_label(), y_hat)?;
    }
    Ok(total / d_te.len() as f64)
}

pub fn test_model(model: &TrainedModel, d_te: &TaskDataset) -> Result<f64> {
    dataset_nmse(&model.params, d_te)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseResult {
    pub algorithm: Algorithm,
    pub per_target: Vec<f64>,
    pub mean_linear: f64,
    pub mean_db: f64,
}

impl NmseResult {
    pub fn new(algorithm: Algorithm, per_target: Vec<f64>) -> Self {
        let mean_linear = per_target.iter().sum::<f64>() / per_target.len().max(1) as f64;
        Self {
            algorithm,
            per_target,
            mean_linear,
            mean_db: to_db(mean_linear),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepVariable {
    None,
    GAd,
    NAd,
    DeltaF,
    Antennas,
    SnrDb,
}

impl SweepVariable {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(SweepVariable::None),
            "g-ad" | "g_ad" => Ok(SweepVariable::GAd),
            "n-ad" | "n_ad" => Ok(SweepVariable::NAd),
            "delta-f" | "delta_f" => Ok(SweepVariable::DeltaF),
            "m" | "antennas" => Ok(SweepVariable::Antennas),
            "snr-db" | "snr_db" => Ok(SweepVariable::SnrDb),
            other => Err(invalid(format!(
                "unknown sweep variable '{other}' (expected none, g-ad, n-ad, delta-f, m or snr-db)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::None => "none",
            SweepVariable::GAd => "g-ad",
            SweepVariable::NAd => "n-ad",
            SweepVariable::DeltaF => "delta-f",
            SweepVariable::Antennas => "m",
            SweepVariable::SnrDb => "snr-db",
        }
    }

    /// True when changing the variable requires retraining the source-side models.
    pub fn retrains(self) -> bool {
        matches!(self, SweepVariable::DeltaF | SweepVariable::Antennas)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub results: Vec<NmseResult>,
}

impl SweepPoint {
    pub fn get(&self, algorithm: Algorithm) -> &NmseResult {
        self.results
            .iter()
            .find(|r| r.algorithm == algorithm)
            .expect("every point holds all three algorithms")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub config: TrainConfig,
    /// Wall-clock seconds per stage, in execution order.
    pub stage_seconds: Vec<(String, f64)>,
}

/// The two source-trained models shared by every target.
#[derive(Debug, Clone)]
pub struct TrainedStage {
    pub no_transfer: TrainedModel,
    pub meta: TrainedModel,
    pub seconds: Vec<(String, f64)>,
}

pub fn train_stage(cfg: &TrainConfig) -> Result<TrainedStage> {
    cfg.validate()?;
    let t0 = Instant::now();
    let sources = source_environments(cfg)?;
    let sets = source_training_sets(&sources, cfg)?;
    let t1 = Instant::now();
    let nt = train_no_transfer(&sets, cfg, &mut substream(cfg.seed, Stream::Batches, 0))?;
    let t2 = Instant::now();
    let (mt, _) = meta_train(&sources, cfg, &mut substream(cfg.seed, Stream::Batches, 1), false)?;
    let t3 = Instant::now();
    Ok(TrainedStage {
        no_transfer: nt,
        meta: mt,
        seconds: vec![
            ("generate".into(), (t1 - t0).as_secs_f64()),
            ("no-transfer".into(), (t2 - t1).as_secs_f64()),
            ("meta-train".into(), (t3 - t2).as_secs_f64()),
        ],
    })
}

/// Test and adaption sets of one target. The test set does not depend on
/// the adaption size or noise, and smaller adaption sets are prefixes of
/// larger ones.
pub fn target_sets(
    target: &EnvironmentTasks,
    test_env: &EnvironmentTasks,
    n_ad: usize,
    n_te: usize,
    seed: u64,
) -> Result<(TaskDataset, TaskDataset)> {
    let id = target.env.id;
    let test = test_env
        .generate(&[(Role::Test, n_te)], &mut substream(seed, Stream::Samples, id))?
        .remove(0);
    let ad = target
        .generate(&[(Role::Adaption, n_ad)], &mut substream(seed, Stream::Adaption, id))?
        .remove(0);
    if !ad.is_disjoint(&test) {
        return Err(invalid(format!("adaption and test sets of target {id} overlap")));
    }
    Ok((ad, test))
}

/// Per-target NMSE of the three algorithms after `g_ad` adaption steps,
/// for every `g_ad` in `checkpoints` (ascending).
fn evaluate_targets(
    stage: &TrainedStage,
    cfg: &TrainConfig,
    n_ad: usize,
    adaption_noise: NoiseSpec,
    checkpoints: &[usize],
) -> Result<Vec<[Vec<f64>; 3]>> {
    let test_envs = target_environments(cfg, cfg.scenario.noise)?;
    let ad_envs = if adaption_noise == cfg.scenario.noise {
        test_envs.clone()
    } else {
        target_environments(cfg, adaption_noise)?
    };
    let steps = checkpoints.last().copied().unwrap_or(0);
    let per_target: Vec<[Vec<f64>; 3]> = (0..test_envs.len())
        .into_par_iter()
        .map(|k| {
            let (ad, te) = target_sets(&ad_envs[k], &test_envs[k], n_ad, cfg.n_te, cfg.seed)?;
            let nt = dataset_nmse(&stage.no_transfer.params, &te)?;
            let run = |base: &NetParams, rule, lr| -> Result<Vec<f64>> {
                let mut out = Vec::with_capacity(checkpoints.len());
                adapt(base, &ad, rule, lr, steps, cfg.adam, |step, p| {
                    if checkpoints.contains(&step) {
                        out.push(dataset_nmse(p, &te)?);
                    }
                    Ok(())
                })?;
                Ok(out)
            };
            let dt = run(&stage.no_transfer.params, cfg.direct_rule, cfg.direct_lr)?;
            let mt = run(&stage.meta.params, cfg.meta_rule, cfg.beta)?;
            Ok([vec![nt; checkpoints.len()], dt, mt])
        })
        .collect::<Result<_>>()?;
    Ok(per_target)
}

fn point(value: f64, per_target: &[[Vec<f64>; 3]], checkpoint: usize) -> SweepPoint {
    let results = Algorithm::ALL
        .iter()
        .enumerate()
        .map(|(a, &alg)| NmseResult::new(alg, per_target.iter().map(|t| t[a][checkpoint]).collect()))
        .collect();
    SweepPoint { value, results }
}

/// Evaluates an already trained stage over an adaption-side grid
/// (`none`, `g-ad`, `n-ad` or `snr-db`).
pub fn evaluate_stage(stage: &TrainedStage, cfg: &TrainConfig, variable: SweepVariable, grid: &[f64]) -> Result<Vec<SweepPoint>> {
    let as_count = |v: f64, what: &str| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
            Ok(v as usize)
        } else {
            Err(invalid(format!("{what} grid value {v} is not a nonnegative integer")))
        }
    };
    match variable {
        SweepVariable::None => {
            let per = evaluate_targets(stage, cfg, cfg.n_ad, cfg.scenario.noise, &[cfg.g_ad])?;
            Ok(vec![point(cfg.g_ad as f64, &per, 0)])
        }
        SweepVariable::GAd => {
            let mut steps: Vec<usize> = grid.iter().map(|&v| as_count(v, "g-ad")).collect::<Result<_>>()?;
            let order = steps.clone();
            steps.sort_unstable();
            steps.dedup();
            let per = evaluate_targets(stage, cfg, cfg.n_ad, cfg.scenario.noise, &steps)?;
            Ok(order
                .iter()
                .map(|g| point(*g as f64, &per, steps.binary_search(g).unwrap()))
                .collect())
        }
        SweepVariable::NAd => grid
            .iter()
            .map(|&v| {
                let n = as_count(v, "n-ad")?;
                if n == 0 {
                    return Err(invalid("n-ad grid values must be positive"));
                }
                let per = evaluate_targets(stage, cfg, n, cfg.scenario.noise, &[cfg.g_ad])?;
                Ok(point(v, &per, 0))
            })
            .collect(),
        SweepVariable::SnrDb => grid
            .iter()
            .map(|&snr| {
                let mut noise = cfg.scenario.noise;
                noise.snr_db = snr;
                if noise.mode == NoiseMode::Clean {
                    noise.mode = NoiseMode::Lmmse;
                }
                let per = evaluate_targets(stage, cfg, cfg.n_ad, noise, &[cfg.g_ad])?;
                Ok(point(snr, &per, 0))
            })
            .collect(),
        SweepVariable::DeltaF | SweepVariable::Antennas => Err(invalid(format!(
            "{} changes the training stage; use run_three_way",
            variable.name()
        ))),
    }
}

/// Config for one grid point of a source-side sweep.
pub fn config_at(cfg: &TrainConfig, variable: SweepVariable, value: f64) -> Result<TrainConfig> {
    let mut c = cfg.clone();
    match variable {
        SweepVariable::DeltaF => c.scenario.delta_f = value,
        SweepVariable::Antennas => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(invalid(format!("antenna count {value} is not a positive integer")));
            }
            c.scenario.array.antennas = value as usize;
        }
        _ => return Err(invalid(format!("{} does not change the training stage", variable.name()))),
    }
    c.validate()?;
    Ok(c)
}

/// Trains (once, or once per grid point when the variable affects training)
/// and evaluates all three algorithms over the grid.
pub fn run_three_way(cfg: &TrainConfig, variable: SweepVariable, grid: &[f64]) -> Result<SweepReport> {
    if variable != SweepVariable::None && grid.is_empty() {
        return Err(invalid(format!("sweep over {} needs a nonempty grid", variable.name())));
    }
    let mut stage_seconds = Vec::new();
    let points = if variable.retrains() {
        let mut points = Vec::with_capacity(grid.len());
        for &v in grid {
            let c = config_at(cfg, variable, v)?;
            let stage = train_stage(&c)?;
            stage_seconds.extend(stage.seconds.iter().map(|(n, s)| (format!("{n}@{v}"), *s)));
            let t = Instant::now();
            let mut p = evaluate_stage(&stage, &c, SweepVariable::None, &[])?;
            stage_seconds.push((format!("adapt-test@{v}"), t.elapsed().as_secs_f64()));
            p[0].value = v;
            points.extend(p);
        }
        points
    } else {
        let stage = train_stage(cfg)?;
        stage_seconds.extend(stage.seconds.iter().cloned());
        let t = Instant::now();
        let p = evaluate_stage(&stage, cfg, variable, grid)?;
        stage_seconds.push(("adapt-test".into(), t.elapsed().as_secs_f64()));
        p
    };
    let grid = if variable == SweepVariable::None {
        points.iter().map(|p| p.value).collect()
    } else {
        grid.to_vec()
    };
    Ok(SweepReport {
        variable,
        grid,
        points,
        config: cfg.clone(),
        stage_seconds,
    })
}

pub const PROBE_MIN_STEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthLoss {
    pub width: usize,
    pub final_loss: f64,
}

/// Trains one single-hidden-layer network per width on the pairs of one
/// clean source environment and reports the converged training loss.
///
/// Training is full-batch and runs at least `PROBE_MIN_STEPS` steps, so the
/// reported loss is not a minibatch noise floor.
pub fn proposition1_probe(widths: &[usize], cfg: &TrainConfig, pairs: usize) -> Result<Vec<WidthLoss>> {
    if widths.is_empty() {
        return Err(invalid("width list is empty"));
    }
    if widths.windows(2).any(|w| w[1] <= w[0]) || widths[0] == 0 {
        return Err(invalid("widths must be positive and strictly increasing"));
    }
    let mut base = cfg.clone();
    base.scenario.noise = NoiseSpec::clean();
    base.k_s = 1;
    base.k_b = 1;
    base.n_tr = pairs;
    base.n_support = 1;
    base.batch_size = pairs;
    base.min_steps = base.min_steps.max(PROBE_MIN_STEPS);
    base.max_steps = base.max_steps.max(base.min_steps);
    if pairs < 2 {
        return Err(invalid("the probe needs at least two training pairs"));
    }
    let sources = source_environments(&base)?;
    let sets = source_training_sets(&sources, &base)?;
    widths
        .par_iter()
        .map(|&w| {
            let mut c = base.clone();
            c.hidden = vec![w];
            let m = train_no_transfer(&sets, &c, &mut substream(c.seed, Stream::Batches, w as u64))?;
            Ok(WidthLoss {
                width: w,
                final_loss: *m.loss_history.last().expect("history ends with the final loss"),
            })
        })
        .collect()
}

/// A model whose parameters are all zero; it predicts the zero channel.
pub fn zero_model(cfg: &TrainConfig) -> Result<TrainedModel> {
    let mut params = initial_params(cfg)?;
    params.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    Ok(TrainedModel {
        params,
        provenance: Provenance::Initial,
        config: cfg.clone(),
        loss_history: vec![],
        derivative_order: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ArrayConfig, SamplePair};
    use num_complex::Complex64;

    fn channel(v: &[(f64, f64)]) -> ComplexChannel {
        ComplexChannel(v.iter().map(|&(a, b)| Complex64::new(a, b)).collect())
    }

    #[test]
    fn nmse_examples() {
        let h = channel(&[(1.0, 2.0), (-0.5, 0.3), (0.0, 1.0)]);
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        assert_eq!(nmse(&h, &ComplexChannel::zeros(3)).unwrap(), 1.0);
        assert!((nmse(&h, &h.scale(2.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!(nmse(&ComplexChannel::zeros(3), &h).is_err());
        assert!(nmse(&h, &ComplexChannel::zeros(2)).is_err());
    }

    #[test]
    fn nmse_is_scale_invariant_and_matches_real_form() {
        let h = channel(&[(1.0, 2.0), (-0.5, 0.3)]);
        let g = channel(&[(0.7, 1.1), (0.2, -0.3)]);
        let base = nmse(&h, &g).unwrap();
        for s in [-3.0, 1e-3, 17.0] {
            assert!((nmse(&h.scale(s), &g.scale(s)).unwrap() - base).abs() < 1e-14);
        }
        let r = nmse_real(&crate::channel::complex_to_real(&h), &crate::channel::complex_to_real(&g)).unwrap();
        assert!((r - base).abs() < 1e-15);
    }

    #[test]
    fn report_mean_is_mean_of_parts() {
        let parts = vec![0.1, 0.25, 0.7, 0.05];
        let r = NmseResult::new(Algorithm::MetaLearning, parts.clone());
        assert!((r.mean_linear - parts.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert!((r.mean_db - 10.0 * r.mean_linear.log10()).abs() < 1e-12);
    }

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.scenario.array = ArrayConfig::half_wavelength(4, 2e9).unwrap();
        cfg.scenario.noise = NoiseSpec::clean();
        cfg.scenario.users = 4;
        cfg.hidden = vec![16];
        cfg.k_s = 6;
        cfg.k_t = 3;
        cfg.k_b = 2;
        cfg.g_tr = 1;
        cfg.g_ad = 5;
        cfg.max_steps = 10;
        cfg.min_steps = 0;
        cfg.batch_size = 16;
        cfg
    }

    #[test]
    fn zero_model_scores_one() {
        let cfg = tiny();
        let targets = target_environments(&cfg, cfg.scenario.noise).unwrap();
        let (_, te) = target_sets(&targets[0], &targets[0], 4, 6, cfg.seed).unwrap();
        assert_eq!(test_model(&zero_model(&cfg).unwrap(), &te).unwrap(), 1.0);
    }

    #[test]
    fn identity_predictor_on_identity_data() {
        let spec = crate::net::LayerSpec::mlp(4, &[], 4).unwrap();
        let mut p = NetParams::zeros(&spec);
        for i in 0..4 {
            p.weight_mut(0)[i * 4 + i] = 1.0;
        }
        let pairs = (0..5)
            .map(|i| {
                let x: Vec<f64> = (0..4).map(|j| ((i * 4 + j) as f64).sin()).collect();
                SamplePair {
                    user: i,
                    f_up: i as f64,
                    f_down: i as f64,
                    x: x.clone(),
                    y: x,
                    y_clean: None,
                }
            })
            .collect();
        let d = TaskDataset {
            env_id: 0,
            role: Role::Test,
            pairs,
        };
        assert!(dataset_nmse(&p, &d).unwrap() < 1e-20);
    }

    #[test]
    fn target_sets_are_nested_and_stable() {
        let cfg = tiny();
        let targets = target_environments(&cfg, cfg.scenario.noise).unwrap();
        let (ad5, te_a) = target_sets(&targets[1], &targets[1], 5, 6, cfg.seed).unwrap();
        let (ad9, te_b) = target_sets(&targets[1], &targets[1], 9, 6, cfg.seed).unwrap();
        assert_eq!(te_a, te_b);
        assert_eq!(&ad9.pairs[..5], &ad5.pairs[..]);
        assert!(ad9.is_disjoint(&te_a));
    }

    #[test]
    fn three_way_examples() {
        let cfg = tiny();
        let stage = train_stage(&cfg).unwrap();
        let none = evaluate_stage(&stage, &cfg, SweepVariable::None, &[]).unwrap();
        assert_eq!(none.len(), 1);
        let gad = evaluate_stage(&stage, &cfg, SweepVariable::GAd, &[0.0, 3.0, 10.0]).unwrap();
        assert_eq!(gad.len(), 3);
        // No-transfer ignores adaption data entirely.
        let nt = &gad[0].get(Algorithm::NoTransfer).per_target;
        assert!(gad.iter().all(|p| &p.get(Algorithm::NoTransfer).per_target == nt));
        assert_eq!(&none[0].get(Algorithm::NoTransfer).per_target, nt);
        // Zero adaption steps leave both transfer models at their trained parameters.
        assert_eq!(gad[0].get(Algorithm::DirectTransfer).per_target, *nt);
        let targets = target_environments(&cfg, cfg.scenario.noise).unwrap();
        for (k, t) in targets.iter().enumerate() {
            let (_, te) = target_sets(t, t, cfg.n_ad, cfg.n_te, cfg.seed).unwrap();
            let pre = dataset_nmse(&stage.meta.params, &te).unwrap();
            assert_eq!(gad[0].get(Algorithm::MetaLearning).per_target[k], pre);
        }
        let nad = evaluate_stage(&stage, &cfg, SweepVariable::NAd, &[2.0, 4.0]).unwrap();
        assert!(nad.iter().all(|p| &p.get(Algorithm::NoTransfer).per_target == nt));
        assert!(evaluate_stage(&stage, &cfg, SweepVariable::DeltaF, &[1e8]).is_err());
    }

    #[test]
    fn sweep_variable_names() {
        for v in [
            SweepVariable::None,
            SweepVariable::GAd,
            SweepVariable::NAd,
            SweepVariable::DeltaF,
            SweepVariable::Antennas,
            SweepVariable::SnrDb,
        ] {
            assert_eq!(SweepVariable::parse(v.name()).unwrap(), v);
        }
        assert!(SweepVariable::parse("gamma").is_err());
    }

    #[test]
    fn probe_preconditions() {
        let cfg = tiny();
        assert!(proposition1_probe(&[8, 8], &cfg, 10).is_err());
        assert!(proposition1_probe(&[], &cfg, 10).is_err());
        assert_eq!(proposition1_probe(&[4], &cfg, 10).unwrap().len(), 1);
    }
}
