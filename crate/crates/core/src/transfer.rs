//! No-transfer, direct-transfer and meta-learning training.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    sample_environment, EnvironmentTasks, NoiseSpec, Role, ScenarioConfig, TaskDataset,
};
use crate::error::{invalid, Result};
use crate::net::{
    forward_param_jvp, init_params, loss_and_grad, mse_loss, Batch, InitScale, LayerSpec,
    NetParams,
};
use crate::optim::{gd_step_in_place, AdamHyper, AdamState};
use crate::rng::{substream, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaMode {
    /// Differentiate through the unrolled inner loop.
    Exact,
    /// Treat the inner-loop Jacobian as the identity.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptRule {
    Adam,
    Gd,
}

/// Where meta-training gets each visited task's support and query sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskData {
    /// Fresh pairs from the task's environment on every visit.
    Regenerate,
    /// One fixed pool of `n_tr` pairs per task, randomly re-split on every visit.
    FixedPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    NoTransfer,
    Meta,
    DirectAdapted,
    MetaAdapted,
}

impl Provenance {
    pub fn tag(self) -> u8 {
        match self {
            Provenance::Initial => 0,
            Provenance::NoTransfer => 1,
            Provenance::Meta => 2,
            Provenance::DirectAdapted => 3,
            Provenance::MetaAdapted => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Provenance::Initial),
            1 => Some(Provenance::NoTransfer),
            2 => Some(Provenance::Meta),
            3 => Some(Provenance::DirectAdapted),
            4 => Some(Provenance::MetaAdapted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// ADAM learning rate for pooled and across-task training.
    pub gamma: f64,
    /// Inner-task and meta-adaption learning rate.
    pub beta: f64,
    /// Learning rate of direct-transfer adaption.
    pub direct_lr: f64,
    /// Mini-batch size `V` of no-transfer training.
    pub batch_size: usize,
    pub k_s: usize,
    pub k_t: usize,
    pub k_b: usize,
    pub g_tr: usize,
    pub g_ad: usize,
    pub n_tr: usize,
    pub n_ad: usize,
    pub n_te: usize,
    /// Support-set size of a meta-training task; the query set gets `n_tr - n_support`.
    pub n_support: usize,
    pub hidden: Vec<usize>,
    pub init_scale: InitScale,
    pub max_steps: usize,
    /// No convergence check before this many steps.
    pub min_steps: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub meta_mode: MetaMode,
    pub direct_rule: AdaptRule,
    pub meta_rule: AdaptRule,
    pub task_data: TaskData,
    pub adam: AdamHyper,
    pub scenario: ScenarioConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale defaults.
    pub fn paper() -> Self {
        Self {
            gamma: 1e-3,
            beta: 1e-6,
            direct_lr: 1e-6,
            batch_size: 128,
            k_s: 1500,
            k_t: 800,
            k_b: 80,
            g_tr: 3,
            g_ad: 1000,
            n_tr: 20,
            n_ad: 20,
            n_te: 20,
            n_support: 10,
            hidden: vec![128, 128],
            init_scale: InitScale::FanIn,
            max_steps: 100_000,
            min_steps: 0,
            convergence_window: 200,
            convergence_tol: 0.005,
            meta_mode: MetaMode::Exact,
            direct_rule: AdaptRule::Adam,
            meta_rule: AdaptRule::Gd,
            task_data: TaskData::Regenerate,
            adam: AdamHyper::default(),
            scenario: ScenarioConfig::default(),
            seed: 0,
        }
    }

    /// Single-CPU profile: M = 16, 200 source and 50 target environments,
    /// 10 users each.
    pub fn desk() -> Self {
        let mut scenario = ScenarioConfig::default();
        scenario.array = crate::channel::ArrayConfig::half_wavelength(16, 2e9).expect("valid array");
        scenario.users = 10;
        scenario.generator.delay_max = DESK_DELAY_MAX;
        Self {
            gamma: 1e-3,
            beta: 1e-2,
            direct_lr: 1e-3,
            k_s: 200,
            k_t: 50,
            k_b: 10,
            max_steps: 20_000,
            min_steps: 2000,
            scenario,
            ..Self::paper()
        }
    }

    pub fn antennas(&self) -> usize {
        self.scenario.array.antennas
    }

    pub fn layer_spec(&self) -> Result<LayerSpec> {
        LayerSpec::for_antennas(self.antennas(), &self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        let positive = [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("direct_lr", self.direct_lr),
            ("convergence_tol", self.convergence_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("k_s", self.k_s),
            ("k_t", self.k_t),
            ("k_b", self.k_b),
            ("n_tr", self.n_tr),
            ("n_ad", self.n_ad),
            ("n_te", self.n_te),
            ("convergence_window", self.convergence_window),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.k_b > self.k_s {
            return Err(invalid(format!(
                "meta-batch size {} exceeds the number of source tasks {}",
                self.k_b, self.k_s
            )));
        }
        if self.n_support == 0 || self.n_support >= self.n_tr {
            return Err(invalid(format!(
                "support size {} must lie in 1..{}",
                self.n_support, self.n_tr
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Delay spread of the desk profile. At 120 MHz uplink/downlink offset a
/// microsecond spread rotates every ray by an unrelated phase, leaving no
/// learnable uplink-to-downlink structure at 16 antennas.
pub const DESK_DELAY_MAX: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: NetParams,
    pub provenance: Provenance,
    pub config: TrainConfig,
    /// Per-step training loss followed by one final evaluation.
    pub loss_history: Vec<f64>,
    /// Highest derivative order computed by the stage that produced the model.
    pub derivative_order: u32,
}

/// Moving-average plateau detector.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    window: usize,
    tol: f64,
    min_steps: usize,
    sum: f64,
    count: usize,
    previous: Option<f64>,
}

impl ConvergenceMonitor {
    pub fn new(window: usize, tol: f64, min_steps: usize) -> Self {
        Self {
            window: window.max(1),
            tol,
            min_steps,
            sum: 0.0,
            count: 0,
            previous: None,
        }
    }

    /// Feeds one step's loss; true once a window average improves on the
    /// previous one by less than `tol` (relative).
    pub fn push(&mut self, step: usize, loss: f64) -> bool {
        self.sum += loss;
        self.count += 1;
        if self.count < self.window {
            return false;
        }
        let avg = self.sum / self.count as f64;
        self.sum = 0.0;
        self.count = 0;
        let done = match self.previous {
            Some(prev) if step >= self.min_steps => prev - avg < self.tol * prev.abs(),
            _ => false,
        };
        self.previous = Some(avg);
        done
    }
}

pub fn dataset_batch(d: &TaskDataset) -> Result<Batch> {
    Batch::from_rows(d.pairs.iter().map(|p| (&p.x[..], &p.y[..])))
}

pub fn initial_params(cfg: &TrainConfig) -> Result<NetParams> {
    let spec = cfg.layer_spec()?;
    Ok(init_params(&spec, cfg.init_scale, &mut substream(cfg.seed, Stream::NetInit, 0)))
}

/// Source environments get ids `0..K_S`, targets `K_S..K_S+K_T`.
pub fn source_environments(cfg: &TrainConfig) -> Result<Vec<EnvironmentTasks>> {
    environments(cfg, 0..cfg.k_s as u64, cfg.scenario.noise)
}

pub fn target_environments(cfg: &TrainConfig, adaption_noise: NoiseSpec) -> Result<Vec<EnvironmentTasks>> {
    let start = cfg.k_s as u64;
    environments(cfg, start..start + cfg.k_t as u64, adaption_noise)
}

fn environments(cfg: &TrainConfig, ids: std::ops::Range<u64>, noise: NoiseSpec) -> Result<Vec<EnvironmentTasks>> {
    ids.collect::<Vec<_>>()
        .into_par_iter()
        .map(|id| {
            let env = sample_environment(id, &cfg.scenario.generator, cfg.seed)?;
            EnvironmentTasks::with_noise(env, &cfg.scenario, noise)
        })
        .collect()
}

/// The `N_Tr`-pair training set of every source environment.
pub fn source_training_sets(sources: &[EnvironmentTasks], cfg: &TrainConfig) -> Result<Vec<TaskDataset>> {
    sources
        .par_iter()
        .map(|s| {
            let mut rng = substream(cfg.seed, Stream::Samples, s.env.id);
            Ok(s.generate(&[(Role::Train, cfg.n_tr)], &mut rng)?.remove(0))
        })
        .collect()
}

/// Pooled training on all source pairs (mini-batches of `V`, ADAM at `gamma`).
pub fn train_no_transfer(sources: &[TaskDataset], cfg: &TrainConfig, rng: &mut Rng) -> Result<TrainedModel> {
    let pool: Vec<(&[f64], &[f64])> = sources
        .iter()
        .flat_map(|d| d.pairs.iter().map(|p| (&p.x[..], &p.y[..])))
        .collect();
    if pool.is_empty() {
        return Err(invalid("no-transfer training needs at least one source pair"));
    }
    let mut params = initial_params(cfg)?;
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut monitor = ConvergenceMonitor::new(cfg.convergence_window, cfg.convergence_tol, cfg.min_steps);
    let mut history = Vec::new();
    for step in 1..=cfg.max_steps {
        let batch = Batch::from_rows((0..cfg.batch_size).map(|_| pool[rng.gen_range(0..pool.len())]))?;
        let (loss, grad) = loss_and_grad(&params, &batch)?;
        history.push(loss);
        adam.step(&mut params, &grad, cfg.gamma)?;
        if !params.is_finite() {
            return Err(invalid(format!("no-transfer training diverged at step {step}")));
        }
        if monitor.push(step, loss) {
            break;
        }
    }
    history.push(mse_loss(&params, &Batch::from_rows(pool.iter().copied())?)?);
    Ok(TrainedModel {
        params,
        provenance: Provenance::NoTransfer,
        config: cfg.clone(),
        loss_history: history,
        derivative_order: 1,
    })
}

/// Full-batch adaption from `base`. `observer` sees the parameters before
/// the first step and after each step.
pub fn adapt(
    base: &NetParams,
    data: &TaskDataset,
    rule: AdaptRule,
    lr: f64,
    steps: usize,
    adam: AdamHyper,
    mut observer: impl FnMut(usize, &NetParams) -> Result<()>,
) -> Result<(NetParams, Vec<f64>)> {
    if data.is_empty() {
        return Err(invalid("adaption dataset is empty"));
    }
    let batch = dataset_batch(data)?;
    let mut params = base.clone();
    let mut state = AdamState::new(params.len(), adam);
    let mut history = Vec::with_capacity(steps + 1);
    observer(0, &params)?;
    for step in 1..=steps {
        let (loss, grad) = loss_and_grad(&params, &batch)?;
        history.push(loss);
        match rule {
            AdaptRule::Adam => state.step(&mut params, &grad, lr)?,
            AdaptRule::Gd => gd_step_in_place(&mut params, &grad, lr),
        }
        observer(step, &params)?;
    }
    history.push(mse_loss(&params, &batch)?);
    Ok((params, history))
}

fn adapted(base: &TrainedModel, params: NetParams, history: Vec<f64>, provenance: Provenance) -> TrainedModel {
    TrainedModel {
        params,
        provenance,
        config: base.config.clone(),
        loss_history: history,
        derivative_order: 1,
    }
}

/// Fine-tunes a trained model on one target's adaption set.
pub fn direct_adapt(base: &TrainedModel, d_ad: &TaskDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    if !matches!(base.provenance, Provenance::NoTransfer | Provenance::Meta) {
        return Err(invalid(format!("cannot adapt a {:?} model", base.provenance)));
    }
    let (params, history) = adapt(
        &base.params,
        d_ad,
        cfg.direct_rule,
        cfg.direct_lr,
        cfg.g_ad,
        cfg.adam,
        |_, _| Ok(()),
    )?;
    Ok(adapted(base, params, history, Provenance::DirectAdapted))
}

/// Meta-adaption: `G_Ad` steps at rate `beta` from the meta-trained parameters.
pub fn meta_adapt(base: &TrainedModel, d_ad: &TaskDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    if base.provenance != Provenance::Meta {
        return Err(invalid(format!(
            "meta-adaption needs a meta-trained model, got {:?}",
            base.provenance
        )));
    }
    let (params, history) = adapt(&base.params, d_ad, cfg.meta_rule, cfg.beta, cfg.g_ad, cfg.adam, |_, _| Ok(()))?;
    Ok(adapted(base, params, history, Provenance::MetaAdapted))
}

/// Parameters visited by the inner gradient-descent loop, `[omega, ..., omega_G]`.
#[derive(Debug, Clone)]
pub struct Unroll {
    pub iterates: Vec<NetParams>,
    /// Support gradient at each iterate except the last.
    pub support_grads: Vec<NetParams>,
}

impl Unroll {
    pub fn adapted(&self) -> &NetParams {
        self.iterates.last().expect("unroll holds the starting point")
    }
}

pub fn inner_adapt(omega: &NetParams, d_sup: &TaskDataset, g_tr: usize, beta: f64) -> Result<Unroll> {
    let mut iterates = vec![omega.clone()];
    let mut support_grads = Vec::with_capacity(g_tr);
    if g_tr == 0 {
        return Ok(Unroll { iterates, support_grads });
    }
    if d_sup.is_empty() {
        return Err(invalid("support set is empty"));
    }
    let batch = dataset_batch(d_sup)?;
    for _ in 0..g_tr {
        let current = iterates.last().unwrap();
        let (_, grad) = loss_and_grad(current, &batch)?;
        let mut next = current.clone();
        gd_step_in_place(&mut next, &grad, beta);
        support_grads.push(grad);
        iterates.push(next);
    }
    Ok(Unroll { iterates, support_grads })
}

/// Query loss and meta-gradient of one task.
pub fn task_meta_gradient(
    omega: &NetParams,
    d_sup: &TaskDataset,
    d_que: &TaskDataset,
    g_tr: usize,
    beta: f64,
    mode: MetaMode,
) -> Result<(f64, NetParams)> {
    if d_que.is_empty() {
        return Err(invalid("query set is empty"));
    }
    let unroll = inner_adapt(omega, d_sup, g_tr, beta)?;
    let (loss, mut v) = loss_and_grad(unroll.adapted(), &dataset_batch(d_que)?)?;
    if mode == MetaMode::Exact && g_tr > 0 {
        let sup = dataset_batch(d_sup)?;
        for g in (0..g_tr).rev() {
            let (_, hv) = forward_param_jvp(&unroll.iterates[g], &v, &sup)?;
            v.axpy(-beta, &hv);
        }
    }
    Ok((loss, v))
}

/// Sum over tasks of the query-loss gradients with respect to the shared
/// initialization; also returns the summed query loss.
pub fn meta_gradient(
    omega: &NetParams,
    tasks: &[(TaskDataset, TaskDataset)],
    g_tr: usize,
    beta: f64,
    mode: MetaMode,
) -> Result<(f64, NetParams)> {
    if tasks.is_empty() {
        return Err(invalid("meta-gradient needs at least one task"));
    }
    let parts: Vec<(f64, NetParams)> = tasks
        .par_iter()
        .map(|(s, q)| task_meta_gradient(omega, s, q, g_tr, beta, mode))
        .collect::<Result<_>>()?;
    let mut total = NetParams::zeros(omega.spec());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.axpy(1.0, g);
    }
    Ok((loss, total))
}

#[derive(Debug, Clone, Default)]
pub struct MetaTrainStats {
    /// Batch-mean cosine similarity between support and query gradients at the
    /// shared parameters, one entry per step (empty unless tracking was requested).
    pub gradient_similarity: Vec<f64>,
}

fn cosine(a: &NetParams, b: &NetParams) -> f64 {
    let denom = a.norm() * b.norm();
    if denom > 0.0 {
        a.dot(b) / denom
    } else {
        0.0
    }
}

/// Draws the support and query sets of every task in one meta-batch.
fn meta_batch_tasks(
    sources: &[EnvironmentTasks],
    pools: Option<&[TaskDataset]>,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut Rng,
) -> Result<Vec<(TaskDataset, TaskDataset)>> {
    let picked = sample_indices(rng, sources.len(), cfg.k_b).into_vec();
    picked
        .into_par_iter()
        .map(|k| {
            let mut task_rng = substream(cfg.seed, Stream::Splits, (step as u64) * sources.len() as u64 + k as u64);
            let (sup, que) = match pools {
                Some(pools) => pools[k].split(cfg.n_support, (Role::TrainSupport, Role::TrainQuery), &mut task_rng)?,
                None => {
                    let mut sets = sources[k].generate(
                        &[(Role::TrainSupport, cfg.n_support), (Role::TrainQuery, cfg.n_tr - cfg.n_support)],
                        &mut task_rng,
                    )?;
                    let que = sets.pop().unwrap();
                    (sets.pop().unwrap(), que)
                }
            };
            if !sup.is_disjoint(&que) {
                return Err(invalid(format!("support and query sets of task {k} overlap")));
            }
            Ok((sup, que))
        })
        .collect()
}

/// Meta-training over the source environments: inner GD on each task's
/// support set, one ADAM step on the summed query losses per meta-batch.
pub fn meta_train(
    sources: &[EnvironmentTasks],
    cfg: &TrainConfig,
    rng: &mut Rng,
    track_similarity: bool,
) -> Result<(TrainedModel, MetaTrainStats)> {
    cfg.validate()?;
    if sources.len() < cfg.k_b {
        return Err(invalid(format!(
            "{} source tasks cannot fill a meta-batch of {}",
            sources.len(),
            cfg.k_b
        )));
    }
    let pools = match cfg.task_data {
        TaskData::FixedPool => Some(source_training_sets(sources, cfg)?),
        TaskData::Regenerate => None,
    };
    let mut params = initial_params(cfg)?;
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut monitor = ConvergenceMonitor::new(cfg.convergence_window, cfg.convergence_tol, cfg.min_steps);
    let mut history = Vec::new();
    let mut stats = MetaTrainStats::default();
    let mut steps_done = 0;
    for step in 1..=cfg.max_steps {
        let tasks = meta_batch_tasks(sources, pools.as_deref(), cfg, step, rng)?;
        if track_similarity {
            let sims: Vec<f64> = tasks
                .par_iter()
                .map(|(s, q)| {
                    let gs = loss_and_grad(&params, &dataset_batch(s)?)?.1;
                    let gq = loss_and_grad(&params, &dataset_batch(q)?)?.1;
                    Ok(cosine(&gs, &gq))
                })
                .collect::<Result<_>>()?;
            stats.gradient_similarity.push(sims.iter().sum::<f64>() / sims.len() as f64);
        }
        let (loss, grad) = meta_gradient(&params, &tasks, cfg.g_tr, cfg.beta, cfg.meta_mode)?;
        let loss = loss / tasks.len() as f64;
        history.push(loss);
        adam.step(&mut params, &grad, cfg.gamma)?;
        if !params.is_finite() {
            return Err(invalid(format!("meta-training diverged at step {step}")));
        }
        steps_done = step;
        if monitor.push(step, loss) {
            break;
        }
    }
    let tasks = meta_batch_tasks(sources, pools.as_deref(), cfg, steps_done + 1, rng)?;
    let (loss, _) = meta_gradient(&params, &tasks, cfg.g_tr, cfg.beta, MetaMode::FirstOrder)?;
    history.push(loss / tasks.len() as f64);
    let derivative_order = match cfg.meta_mode {
        MetaMode::Exact => cfg.g_tr as u32 + 1,
        MetaMode::FirstOrder => 1,
    };
    Ok((
        TrainedModel {
            params,
            provenance: Provenance::Meta,
            config: cfg.clone(),
            loss_history: history,
            derivative_order,
        },
        stats,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorResidual {
    pub exact: f64,
    pub approx: f64,
    pub residual: f64,
}

/// Compares the one-step meta-loss with its first-order expansion in `beta`.
pub fn taylor_residual(omega: &NetParams, d_sup: &TaskDataset, d_que: &TaskDataset, beta: f64) -> Result<TaylorResidual> {
    let sup = dataset_batch(d_sup)?;
    let que = dataset_batch(d_que)?;
    let (_, g_sup) = loss_and_grad(omega, &sup)?;
    let (l_que, g_que) = loss_and_grad(omega, &que)?;
    let mut stepped = omega.clone();
    stepped.axpy(-beta, &g_sup);
    let exact = mse_loss(&stepped, &que)?;
    let approx = l_que - beta * g_sup.dot(&g_que);
    Ok(TaylorResidual {
        exact,
        approx,
        residual: (exact - approx).abs(),
    })
}
