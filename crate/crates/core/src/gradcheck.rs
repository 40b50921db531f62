//! Finite-difference verification of gradients, Hessian-vector products and
//! meta-gradients.
//!
//! Central differences are only meaningful where the loss is smooth, so a
//! probe coordinate is skipped (and another drawn) when the perturbation
//! flips the sign of any ReLU pre-activation along the way.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::net::{
    backward, forward_batch, forward_param_jvp, init_params, mse_loss, Activation, Batch, InitScale, LayerSpec,
    NetParams,
};
use crate::rng::{substream, Rng, Stream};
use crate::transfer::{dataset_batch, inner_adapt, task_meta_gradient, MetaMode};
use crate::channel::{Role, SamplePair, TaskDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinates rejected because the perturbation crossed a ReLU kink.
    pub skipped: usize,
}

impl CheckReport {
    fn merge(self, other: CheckReport) -> CheckReport {
        CheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            coordinates: self.coordinates + other.coordinates,
            skipped: self.skipped + other.skipped,
        }
    }

    fn empty() -> Self {
        CheckReport {
            max_rel_error: 0.0,
            coordinates: 0,
            skipped: 0,
        }
    }
}

/// `|a - f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_params(spec: &LayerSpec, rng: &mut Rng) -> NetParams {
    let mut p = init_params(spec, InitScale::FanIn, rng);
    for l in 0..spec.layer_count() {
        p.bias_mut(l).iter_mut().for_each(|b| *b = 0.2 * (rng.gen::<f64>() - 0.5));
    }
    p
}

fn random_dataset(spec: &LayerSpec, n: usize, rng: &mut Rng) -> TaskDataset {
    let pairs = (0..n)
        .map(|i| SamplePair {
            user: i as u32,
            f_up: i as f64,
            f_down: i as f64,
            x: (0..spec.input_dim()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
            y: (0..spec.output_dim()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
            y_clean: None,
        })
        .collect();
    TaskDataset {
        env_id: 0,
        role: Role::TrainSupport,
        pairs,
    }
}

/// Sign pattern of every ReLU pre-activation over the batch.
fn relu_pattern(params: &NetParams, batch: &Batch) -> Result<Vec<bool>> {
    let tape = forward_batch(params, batch)?;
    let spec = params.spec();
    let mut out = Vec::new();
    for l in 0..spec.layer_count() {
        if spec.activations()[l] == Activation::Relu {
            out.extend(tape.pre_activation(l).iter().map(|z| *z > 0.0));
        }
    }
    Ok(out)
}

fn probe_coordinates(
    params: &NetParams,
    count: usize,
    step: f64,
    rng: &mut Rng,
    mut smooth: impl FnMut(&NetParams, &NetParams) -> Result<bool>,
    mut value: impl FnMut(&NetParams) -> Result<f64>,
    analytic: &NetParams,
) -> Result<CheckReport> {
    let floor = 1e-6 * analytic.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut report = CheckReport::empty();
    let mut attempts = 0;
    while report.coordinates < count {
        attempts += 1;
        if attempts > 20 * count + 100 {
            return Err(invalid("too many probe coordinates sit on ReLU kinks"));
        }
        let i = rng.gen_range(0..params.len());
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += step;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= step;
        if !smooth(&plus, &minus)? {
            report.skipped += 1;
            continue;
        }
        let fd = (value(&plus)? - value(&minus)?) / (2.0 * step);
        let err = relative_error(analytic.as_slice()[i], fd, floor);
        report.max_rel_error = report.max_rel_error.max(err);
        report.coordinates += 1;
    }
    Ok(report)
}

/// Backward pass against central differences on random networks of shape `spec`.
pub fn gradient_check(spec: &LayerSpec, seeds: &[u64], probes: usize, batch: usize, step: f64) -> Result<CheckReport> {
    let mut total = CheckReport::empty();
    for &seed in seeds {
        let mut rng = substream(seed, Stream::Probe, 100);
        let params = random_params(spec, &mut rng);
        let data = dataset_batch(&random_dataset(spec, batch, &mut rng))?;
        let grad = backward(&params, &data)?;
        let base = relu_pattern(&params, &data)?;
        let r = probe_coordinates(
            &params,
            probes,
            step,
            &mut rng,
            |p, m| Ok(relu_pattern(p, &data)? == base && relu_pattern(m, &data)? == base),
            |p| mse_loss(p, &data),
            &grad,
        )?;
        total = total.merge(r);
    }
    Ok(total)
}

/// Hessian-vector products against differences of gradients, plus the
/// symmetry `<d1, H d2> = <d2, H d1>`. Returns (fd report, symmetry error).
pub fn hvp_check(spec: &LayerSpec, seeds: &[u64], batch: usize, step: f64) -> Result<(CheckReport, f64)> {
    let mut total = CheckReport::empty();
    let mut sym = 0.0f64;
    for &seed in seeds {
        let mut rng = substream(seed, Stream::Probe, 200);
        let params = random_params(spec, &mut rng);
        let d1 = random_params(spec, &mut rng);
        let d2 = random_params(spec, &mut rng);
        let data = dataset_batch(&random_dataset(spec, batch, &mut rng))?;
        let (_, h1) = forward_param_jvp(&params, &d1, &data)?;
        let (_, h2) = forward_param_jvp(&params, &d2, &data)?;
        let a = d1.dot(&h2);
        let b = d2.dot(&h1);
        sym = sym.max((a - b).abs() / a.abs().max(b.abs()).max(1e-300));

        let mut plus = params.clone();
        plus.axpy(step, &d1);
        let mut minus = params.clone();
        minus.axpy(-step, &d1);
        let base = relu_pattern(&params, &data)?;
        if relu_pattern(&plus, &data)? != base || relu_pattern(&minus, &data)? != base {
            total.skipped += 1;
            continue;
        }
        let gp = backward(&plus, &data)?;
        let gm = backward(&minus, &data)?;
        let mut diff = 0.0;
        for ((p, m), h) in gp.as_slice().iter().zip(gm.as_slice()).zip(h1.as_slice()) {
            let fd = (p - m) / (2.0 * step);
            diff += (fd - h) * (fd - h);
        }
        total.max_rel_error = total.max_rel_error.max(diff.sqrt() / h1.norm().max(1e-300));
        total.coordinates += h1.len();
    }
    Ok((total, sym))
}

/// Exact meta-gradient against central differences of the composed meta-loss.
pub fn meta_gradient_check(
    spec: &LayerSpec,
    g_tr: usize,
    beta: f64,
    seeds: &[u64],
    probes: usize,
    batch: usize,
    step: f64,
) -> Result<CheckReport> {
    let mut total = CheckReport::empty();
    for &seed in seeds {
        let mut rng = substream(seed, Stream::Probe, 300 + g_tr as u64);
        let params = random_params(spec, &mut rng);
        let sup = random_dataset(spec, batch, &mut rng);
        let que = random_dataset(spec, batch, &mut rng);
        let sup_b = dataset_batch(&sup)?;
        let que_b = dataset_batch(&que)?;
        let (_, grad) = task_meta_gradient(&params, &sup, &que, g_tr, beta, MetaMode::Exact)?;
        let pattern = |p: &NetParams| -> Result<Vec<bool>> {
            let u = inner_adapt(p, &sup, g_tr, beta)?;
            let mut out = Vec::new();
            for (g, it) in u.iterates.iter().enumerate() {
                if g < g_tr {
                    out.extend(relu_pattern(it, &sup_b)?);
                }
            }
            out.extend(relu_pattern(u.adapted(), &que_b)?);
            Ok(out)
        };
        let base = pattern(&params)?;
        let r = probe_coordinates(
            &params,
            probes,
            step,
            &mut rng,
            |p, m| Ok(pattern(p)? == base && pattern(m)? == base),
            |p| mse_loss(inner_adapt(p, &sup, g_tr, beta)?.adapted(), &que_b),
            &grad,
        )?;
        total = total.merge(r);
    }
    Ok(total)
}
