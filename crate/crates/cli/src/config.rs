//! Flags shared by every subcommand that builds a `TrainConfig`.

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use csipred::channel::{NoiseMode, Role};
use csipred::net::InitScale;
use csipred::transfer::{AdaptRule, MetaMode, TaskData, TrainConfig};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Single-CPU scale (M = 16, K_S = 200, K_T = 50).
    Desk,
    /// Full-scale hyperparameters.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseArg {
    Clean,
    Awgn,
    Lmmse,
}

impl From<NoiseArg> for NoiseMode {
    fn from(v: NoiseArg) -> Self {
        match v {
            NoiseArg::Clean => NoiseMode::Clean,
            NoiseArg::Awgn => NoiseMode::Awgn,
            NoiseArg::Lmmse => NoiseMode::Lmmse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaModeArg {
    Exact,
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleArg {
    Adam,
    Gd,
}

impl From<RuleArg> for AdaptRule {
    fn from(v: RuleArg) -> Self {
        match v {
            RuleArg::Adam => AdaptRule::Adam,
            RuleArg::Gd => AdaptRule::Gd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskDataArg {
    Regenerate,
    FixedPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    FanIn,
    LayerWidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleArg {
    Train,
    TrainSupport,
    TrainQuery,
    Adaption,
    Test,
}

impl From<RoleArg> for Role {
    fn from(v: RoleArg) -> Self {
        match v {
            RoleArg::Train => Role::Train,
            RoleArg::TrainSupport => Role::TrainSupport,
            RoleArg::TrainQuery => Role::TrainQuery,
            RoleArg::Adaption => Role::Adaption,
            RoleArg::Test => Role::Test,
        }
    }
}

/// Scenario and hyperparameter overrides. Anything left unset keeps the
/// value of the selected profile.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ConfigArgs {
    #[arg(long, value_enum, env = "CSIPRED_PROFILE")]
    pub profile: Option<Profile>,
    /// Master seed; every random draw derives from it.
    #[arg(long, env = "CSIPRED_SEED")]
    pub seed: Option<u64>,

    #[arg(long, env = "CSIPRED_ANTENNAS")]
    pub antennas: Option<usize>,
    /// Users per environment.
    #[arg(long, env = "CSIPRED_USERS")]
    pub users: Option<usize>,
    #[arg(long, env = "CSIPRED_DELTA_F_HZ")]
    pub delta_f_hz: Option<f64>,
    #[arg(long, env = "CSIPRED_F_MIN_HZ")]
    pub f_min_hz: Option<f64>,
    #[arg(long, env = "CSIPRED_F_MAX_HZ")]
    pub f_max_hz: Option<f64>,
    #[arg(long, env = "CSIPRED_DELAY_MAX_S")]
    pub delay_max_s: Option<f64>,
    #[arg(long, allow_negative_numbers = true, env = "CSIPRED_SNR_DB")]
    pub snr_db: Option<f64>,
    #[arg(long, env = "CSIPRED_PILOT_LEN")]
    pub pilot_len: Option<u32>,
    #[arg(long, value_enum, env = "CSIPRED_NOISE_MODE")]
    pub noise_mode: Option<NoiseArg>,

    /// ADAM rate of pooled and across-task training.
    #[arg(long, env = "CSIPRED_GAMMA")]
    pub gamma: Option<f64>,
    /// Inner-task and meta-adaption rate.
    #[arg(long, env = "CSIPRED_BETA")]
    pub beta: Option<f64>,
    #[arg(long, env = "CSIPRED_DIRECT_LR")]
    pub direct_lr: Option<f64>,
    /// Mini-batch size of no-transfer training.
    #[arg(long, env = "CSIPRED_V")]
    pub v: Option<usize>,
    #[arg(long, env = "CSIPRED_K_S")]
    pub k_s: Option<usize>,
    #[arg(long, env = "CSIPRED_K_T")]
    pub k_t: Option<usize>,
    #[arg(long, env = "CSIPRED_K_B")]
    pub k_b: Option<usize>,
    #[arg(long, env = "CSIPRED_G_TR")]
    pub g_tr: Option<usize>,
    #[arg(long, env = "CSIPRED_G_AD")]
    pub g_ad: Option<usize>,
    #[arg(long, env = "CSIPRED_N_TR")]
    pub n_tr: Option<usize>,
    #[arg(long, env = "CSIPRED_N_AD")]
    pub n_ad: Option<usize>,
    #[arg(long, env = "CSIPRED_N_TE")]
    pub n_te: Option<usize>,
    #[arg(long, env = "CSIPRED_N_SUPPORT")]
    pub n_support: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', env = "CSIPRED_HIDDEN")]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, env = "CSIPRED_MAX_STEPS")]
    pub max_steps: Option<usize>,
    #[arg(long, env = "CSIPRED_MIN_STEPS")]
    pub min_steps: Option<usize>,
    #[arg(long, value_enum, env = "CSIPRED_META_MODE")]
    pub meta_mode: Option<MetaModeArg>,
    #[arg(long, value_enum, env = "CSIPRED_DIRECT_RULE")]
    pub direct_rule: Option<RuleArg>,
    #[arg(long, value_enum, env = "CSIPRED_META_RULE")]
    pub meta_rule: Option<RuleArg>,
    #[arg(long, value_enum, env = "CSIPRED_TASK_DATA")]
    pub task_data: Option<TaskDataArg>,
    #[arg(long, value_enum, env = "CSIPRED_INIT_SCALE")]
    pub init_scale: Option<InitArg>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig, UsageError> {
        let base = match self.profile.unwrap_or(Profile::Desk) {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        };
        self.apply(base)
    }

    /// Overrides the fields that were given on the command line.
    pub fn apply(&self, mut c: TrainConfig) -> Result<TrainConfig, UsageError> {
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        set(&mut c.seed, &self.seed);
        set(&mut c.scenario.array.antennas, &self.antennas);
        set(&mut c.scenario.users, &self.users);
        set(&mut c.scenario.delta_f, &self.delta_f_hz);
        set(&mut c.scenario.f_min, &self.f_min_hz);
        set(&mut c.scenario.f_max, &self.f_max_hz);
        set(&mut c.scenario.generator.delay_max, &self.delay_max_s);
        set(&mut c.scenario.noise.snr_db, &self.snr_db);
        set(&mut c.scenario.noise.pilot_len, &self.pilot_len);
        if let Some(m) = self.noise_mode {
            c.scenario.noise.mode = m.into();
        }
        set(&mut c.gamma, &self.gamma);
        set(&mut c.beta, &self.beta);
        set(&mut c.direct_lr, &self.direct_lr);
        set(&mut c.batch_size, &self.v);
        set(&mut c.k_s, &self.k_s);
        set(&mut c.k_t, &self.k_t);
        set(&mut c.k_b, &self.k_b);
        set(&mut c.g_tr, &self.g_tr);
        set(&mut c.g_ad, &self.g_ad);
        set(&mut c.n_tr, &self.n_tr);
        set(&mut c.n_ad, &self.n_ad);
        set(&mut c.n_te, &self.n_te);
        set(&mut c.n_support, &self.n_support);
        set(&mut c.hidden, &self.hidden);
        set(&mut c.max_steps, &self.max_steps);
        set(&mut c.min_steps, &self.min_steps);
        if let Some(m) = self.meta_mode {
            c.meta_mode = match m {
                MetaModeArg::Exact => MetaMode::Exact,
                MetaModeArg::FirstOrder => MetaMode::FirstOrder,
            };
        }
        if let Some(r) = self.direct_rule {
            c.direct_rule = r.into();
        }
        if let Some(r) = self.meta_rule {
            c.meta_rule = r.into();
        }
        if let Some(t) = self.task_data {
            c.task_data = match t {
                TaskDataArg::Regenerate => TaskData::Regenerate,
                TaskDataArg::FixedPool => TaskData::FixedPool,
            };
        }
        if let Some(s) = self.init_scale {
            c.init_scale = match s {
                InitArg::FanIn => InitScale::FanIn,
                InitArg::LayerWidth => InitScale::LayerWidth,
            };
        }
        if c.hidden.iter().any(|&w| w == 0) {
            return Err(UsageError("--hidden widths must be positive".into()));
        }
        if c.scenario.array.antennas == 0 {
            return Err(UsageError("--antennas must be at least 1".into()));
        }
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }
}
