use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use csipred::channel::{sample_environment, EnvironmentTasks, Role, TaskDataset};
use csipred::eval::{dataset_nmse, run_three_way, to_db, proposition1_probe, SweepReport, SweepVariable};
use csipred::gradcheck::{gradient_check, hvp_check, meta_gradient_check, CheckReport};
use csipred::net::LayerSpec;
use csipred::rng::{substream, Stream};
use csipred::store::{read_checkpoint, read_dataset, write_atomic, write_checkpoint, write_dataset, DatasetHeader};
use csipred::transfer::{
    direct_adapt, meta_adapt, meta_train, source_environments, source_training_sets, train_no_transfer,
    Provenance, TrainConfig, TrainedModel,
};

use crate::manifest::{self, RunManifest};
use crate::{AdaptAlgorithm, Cli, Command, UsageError, VariableArg};

/// Tolerance of every finite-difference suite in `gradcheck`.
const CHECK_TOL: f64 = 1e-5;
const SYMMETRY_TOL: f64 = 1e-8;

struct Outcome {
    config: Option<TrainConfig>,
    outputs: Vec<PathBuf>,
    passed: bool,
}

impl Outcome {
    fn ok(config: Option<TrainConfig>, outputs: Vec<PathBuf>) -> Self {
        Self { config, outputs, passed: true }
    }
}

pub fn execute(cli: &Cli) -> anyhow::Result<bool> {
    let started = manifest::now();
    let (outcome, primary) = match &cli.command {
        Command::Gen { cfg, envs, first_env, role, pairs, out } => {
            let cfg = cfg.resolve()?;
            (gen(&cfg, *first_env, *envs, (*role).into(), *pairs as usize, out)?, out)
        }
        Command::Train { cfg, data, out } => (train(&cfg.resolve()?, data.as_deref(), out)?, out),
        Command::MetaTrain { cfg, out } => (meta(&cfg.resolve()?, out)?, out),
        Command::Adapt { cfg, checkpoint, data, env_id, algorithm, out } => {
            if cfg.profile.is_some() {
                return Err(UsageError("adapt takes its base config from the checkpoint; drop --profile".into()).into());
            }
            let base = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let c = cfg.apply(base.config.clone())?;
            (adapt(base, c, data, *env_id, *algorithm, out)?, out)
        }
        Command::Eval { checkpoint, data, out } => (eval(checkpoint, data, out)?, out),
        Command::Sweep { cfg, variable, grid, out } => (sweep(&cfg.resolve()?, *variable, grid, out)?, out),
        Command::Gradcheck { cfg, probe_count, out } => (gradcheck(&cfg.resolve()?, *probe_count as usize, out)?, out),
        Command::Probe { cfg, widths, pairs, out } => {
            let mut args = cfg.clone();
            args.antennas = args.antennas.or(Some(4));
            (probe(&args.resolve()?, widths, *pairs as usize, out)?, out)
        }
        Command::Replay { .. } => unreachable!("replay is unwrapped before execution"),
    };
    let m = RunManifest {
        subcommand: cli.command.name().to_string(),
        cli: cli.clone(),
        seed: outcome.config.as_ref().map(|c| c.seed),
        config: outcome.config,
        build: manifest::build_id(),
        started_unix: started,
        finished_unix: manifest::now(),
        outputs: outcome.outputs,
    };
    let path = cli.manifest.clone().unwrap_or_else(|| manifest::default_path(primary));
    manifest::write(&path, &m)?;
    Ok(outcome.passed)
}

fn shape_error(msg: String) -> anyhow::Error {
    csipred::Error::Shape(msg).into()
}

fn model_antennas(model: &TrainedModel) -> usize {
    model.params.spec().input_dim() / 2
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn gen(cfg: &TrainConfig, first: u64, envs: u64, role: Role, pairs: usize, out: &Path) -> anyhow::Result<Outcome> {
    // Same substreams as the training and evaluation pipelines, so a file
    // generated here holds exactly the pairs an in-memory run would draw.
    let stream = if role == Role::Adaption { Stream::Adaption } else { Stream::Samples };
    let last = first.checked_add(envs).context("environment id range overflows")?;
    let datasets: Vec<TaskDataset> = (first..last)
        .into_par_iter()
        .map(|id| {
            let env = sample_environment(id, &cfg.scenario.generator, cfg.seed)?;
            let tasks = EnvironmentTasks::new(env, &cfg.scenario)?;
            Ok(tasks.generate(&[(role, pairs)], &mut substream(cfg.seed, stream, id))?.remove(0))
        })
        .collect::<csipred::Result<_>>()?;
    let header = DatasetHeader {
        antennas: cfg.antennas(),
        delta_f: cfg.scenario.delta_f,
        noise: cfg.scenario.noise,
    };
    write_dataset(out, &header, &datasets)?;
    eprintln!("wrote {} environments x {pairs} pairs to {}", datasets.len(), out.display());
    Ok(Outcome::ok(Some(cfg.clone()), vec![out.to_path_buf(), csipred::store::sidecar_path(out)]))
}

#[derive(Serialize)]
struct LossRow {
    step: String,
    loss: f64,
}

/// Writes the checkpoint and `<out>.loss.csv`; the last history entry is the
/// final full evaluation.
fn save_model(model: &TrainedModel, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    write_checkpoint(out, model)?;
    let n = model.loss_history.len();
    let rows: Vec<LossRow> = model
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow {
            step: if i + 1 == n { "final".into() } else { (i + 1).to_string() },
            loss,
        })
        .collect();
    let csv_path = with_suffix(out, ".loss.csv");
    write_csv(&csv_path, &rows)?;
    if let Some(last) = model.loss_history.last() {
        eprintln!("{:?}: {} steps, final loss {last:.6e}", model.provenance, n.saturating_sub(1));
    }
    Ok(vec![out.to_path_buf(), csipred::store::sidecar_path(out), csv_path])
}

fn train(cfg: &TrainConfig, data: Option<&Path>, out: &Path) -> anyhow::Result<Outcome> {
    let sets = match data {
        Some(path) => {
            let (header, sets) = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
            if header.antennas != cfg.antennas() {
                return Err(shape_error(format!(
                    "dataset {} has M = {}, config has M = {}",
                    path.display(),
                    header.antennas,
                    cfg.antennas()
                )));
            }
            sets
        }
        None => source_training_sets(&source_environments(cfg)?, cfg)?,
    };
    let model = train_no_transfer(&sets, cfg, &mut substream(cfg.seed, Stream::Batches, 0))?;
    Ok(Outcome::ok(Some(cfg.clone()), save_model(&model, out)?))
}

fn meta(cfg: &TrainConfig, out: &Path) -> anyhow::Result<Outcome> {
    let sources = source_environments(cfg)?;
    let (model, _) = meta_train(&sources, cfg, &mut substream(cfg.seed, Stream::Batches, 1), false)?;
    Ok(Outcome::ok(Some(cfg.clone()), save_model(&model, out)?))
}

fn adapt(
    base: TrainedModel,
    cfg: TrainConfig,
    data: &Path,
    env_id: Option<u64>,
    algorithm: AdaptAlgorithm,
    out: &Path,
) -> anyhow::Result<Outcome> {
    let (header, sets) = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    if header.antennas != model_antennas(&base) {
        return Err(shape_error(format!(
            "checkpoint has M = {}, dataset {} has M = {}",
            model_antennas(&base),
            data.display(),
            header.antennas
        )));
    }
    let d_ad = match env_id {
        Some(id) => sets
            .iter()
            .find(|d| d.env_id == id)
            .with_context(|| format!("dataset {} has no environment {id}", data.display()))?,
        None => sets.first().context("dataset holds no environments")?,
    };
    let mut model = match algorithm {
        AdaptAlgorithm::Direct => direct_adapt(&base, d_ad, &cfg)?,
        AdaptAlgorithm::Meta => meta_adapt(&base, d_ad, &cfg)?,
    };
    model.config = cfg.clone();
    Ok(Outcome::ok(Some(cfg), save_model(&model, out)?))
}

#[derive(Serialize)]
struct NmseRow {
    sweep_value: String,
    algorithm: String,
    nmse_linear: f64,
    nmse_db: f64,
    k_targets: usize,
    seed: u64,
}

fn provenance_label(p: Provenance) -> &'static str {
    match p {
        Provenance::Initial => "initial",
        Provenance::NoTransfer => "no-transfer",
        Provenance::Meta => "meta-unadapted",
        Provenance::DirectAdapted => "direct-transfer",
        Provenance::MetaAdapted => "meta-learning",
    }
}

fn eval(checkpoints: &[PathBuf], data: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let (header, sets) = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    if sets.is_empty() {
        bail!("dataset {} holds no environments", data.display());
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let model = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
        if header.antennas != model_antennas(&model) {
            return Err(shape_error(format!(
                "checkpoint {} has M = {}, dataset {} has M = {}",
                path.display(),
                model_antennas(&model),
                data.display(),
                header.antennas
            )));
        }
        let per: Vec<f64> = sets
            .par_iter()
            .map(|d| dataset_nmse(&model.params, d))
            .collect::<csipred::Result<_>>()?;
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        println!("{}\t{}\t{mean:.6e}\t{:.3} dB", path.display(), provenance_label(model.provenance), to_db(mean));
        rows.push(NmseRow {
            sweep_value: String::new(),
            algorithm: provenance_label(model.provenance).into(),
            nmse_linear: mean,
            nmse_db: to_db(mean),
            k_targets: per.len(),
            seed: model.config.seed,
        });
    }
    write_csv(out, &rows)?;
    Ok(Outcome::ok(None, vec![out.to_path_buf()]))
}

fn sweep(cfg: &TrainConfig, variable: VariableArg, grid: &[f64], out: &Path) -> anyhow::Result<Outcome> {
    let variable = match variable {
        VariableArg::None => SweepVariable::None,
        VariableArg::GAd => SweepVariable::GAd,
        VariableArg::NAd => SweepVariable::NAd,
        VariableArg::DeltaF => SweepVariable::DeltaF,
        VariableArg::M => SweepVariable::Antennas,
        VariableArg::SnrDb => SweepVariable::SnrDb,
    };
    if variable == SweepVariable::None && !grid.is_empty() {
        return Err(UsageError("--grid needs a --variable".into()).into());
    }
    if variable != SweepVariable::None && grid.is_empty() {
        return Err(UsageError(format!("--variable {} needs a --grid", variable.name())).into());
    }
    let mut report: SweepReport = run_three_way(cfg, variable, grid)?;
    for (stage, secs) in &report.stage_seconds {
        eprintln!("{stage}: {secs:.1} s");
    }
    let rows: Vec<NmseRow> = report
        .points
        .iter()
        .flat_map(|p| {
            p.results.iter().map(move |r| NmseRow {
                sweep_value: p.value.to_string(),
                algorithm: r.algorithm.name().into(),
                nmse_linear: r.mean_linear,
                nmse_db: r.mean_db,
                k_targets: r.per_target.len(),
                seed: cfg.seed,
            })
        })
        .collect();
    for r in &rows {
        println!("{}\t{}\t{:.6e}\t{:.3} dB", r.sweep_value, r.algorithm, r.nmse_linear, r.nmse_db);
    }
    write_csv(out, &rows)?;
    // Wall-clock timings would make reruns differ; they are only printed.
    report.stage_seconds.clear();
    let json = with_suffix(out, ".json");
    write_json(&json, &report)?;
    Ok(Outcome::ok(Some(cfg.clone()), vec![out.to_path_buf(), json]))
}

#[derive(Serialize)]
struct GradcheckReport {
    seeds: Vec<u64>,
    gradient: CheckReport,
    hvp: CheckReport,
    hvp_symmetry: f64,
    meta: Vec<(usize, CheckReport)>,
    tolerance: f64,
    passed: bool,
}

fn gradcheck(cfg: &TrainConfig, probes: usize, out: &Path) -> anyhow::Result<Outcome> {
    let spec = cfg.layer_spec()?;
    let seeds: Vec<u64> = (0..5).map(|i| cfg.seed.wrapping_add(i)).collect();
    let gradient = gradient_check(&spec, &seeds, probes, 8, 1e-3)?;
    let (hvp, hvp_symmetry) = hvp_check(&spec, &seeds, 8, 1e-4)?;
    let small = LayerSpec::mlp(4, &[8], 4)?;
    let meta = (1..=3)
        .map(|g| Ok((g, meta_gradient_check(&small, g, 0.1, &seeds, probes, 5, 1e-5)?)))
        .collect::<csipred::Result<Vec<_>>>()?;

    let mut passed = true;
    let mut line = |name: String, err: f64, tol: f64, extra: String| {
        let ok = err < tol;
        passed &= ok;
        println!("{} {name}: max relative error {err:.3e} (< {tol:.0e}){extra}", if ok { "PASS" } else { "FAIL" });
    };
    line(
        format!("backward {:?}", spec.sizes()),
        gradient.max_rel_error,
        CHECK_TOL,
        format!(", {} coordinates, {} skipped at kinks", gradient.coordinates, gradient.skipped),
    );
    line("hessian-vector product".into(), hvp.max_rel_error, CHECK_TOL, String::new());
    line("hvp symmetry".into(), hvp_symmetry, SYMMETRY_TOL, String::new());
    for (g, r) in &meta {
        line(
            format!("exact meta-gradient G_Tr={g}"),
            r.max_rel_error,
            CHECK_TOL,
            format!(", {} coordinates, {} skipped", r.coordinates, r.skipped),
        );
    }
    write_json(
        out,
        &GradcheckReport {
            seeds,
            gradient,
            hvp,
            hvp_symmetry,
            meta,
            tolerance: CHECK_TOL,
            passed,
        },
    )?;
    Ok(Outcome {
        config: Some(cfg.clone()),
        outputs: vec![out.to_path_buf()],
        passed,
    })
}

fn probe(cfg: &TrainConfig, widths: &[usize], pairs: usize, out: &Path) -> anyhow::Result<Outcome> {
    let losses = proposition1_probe(widths, cfg, pairs).map_err(|e| match e {
        csipred::Error::InvalidArgument(m) => anyhow::Error::from(UsageError(m)),
        other => other.into(),
    })?;
    for w in &losses {
        println!("{}\t{:.6e}", w.width, w.final_loss);
    }
    write_json(out, &losses)?;
    Ok(Outcome::ok(Some(cfg.clone()), vec![out.to_path_buf()]))
}
