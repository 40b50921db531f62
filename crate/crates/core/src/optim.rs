//! Gradient descent and ADAM.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::net::NetParams;

/// `params - beta * grads`.
pub fn gd_step(params: &NetParams, grads: &NetParams, beta: f64) -> Result<NetParams> {
    params.check_same_shape(grads)?;
    if !(beta > 0.0) {
        return Err(invalid(format!("learning rate must be positive, got {beta}")));
    }
    let mut out = params.clone();
    gd_step_in_place(&mut out, grads, beta);
    Ok(out)
}

pub(crate) fn gd_step_in_place(params: &mut NetParams, grads: &NetParams, beta: f64) {
    params
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .for_each(|(p, g)| *p -= beta * g);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub rho1: f64,
    pub rho2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            rho1: 0.9,
            rho2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub rho1: f64,
    pub rho2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, hyper: AdamHyper) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            rho1: hyper.rho1,
            rho2: hyper.rho2,
            eps: hyper.eps,
        }
    }

    pub fn for_params(params: &NetParams) -> Self {
        Self::new(params.len(), AdamHyper::default())
    }

    /// One bias-corrected ADAM update of `params` in place.
    pub fn step(&mut self, params: &mut NetParams, grads: &NetParams, gamma: f64) -> Result<()> {
        params.check_same_shape(grads)?;
        if self.m.len() != params.len() {
            return Err(invalid(format!(
                "optimizer state tracks {} parameters, network has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.rho1.powi(self.t as i32);
        let c2 = 1.0 - self.rho2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.rho1 * *m + (1.0 - self.rho1) * g;
            *v = self.rho2 * *v + (1.0 - self.rho2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= gamma * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    state: &AdamState,
    params: &NetParams,
    grads: &NetParams,
    gamma: f64,
) -> Result<(NetParams, AdamState)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.step(&mut params, grads, gamma)?;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerSpec;
    use proptest::prelude::*;

    fn scalar(v: f64) -> NetParams {
        // A 1 -> 1 linear net without inputs has two parameters; use the weight only.
        let spec = LayerSpec::mlp(1, &[], 1).unwrap();
        NetParams::from_flat(&spec, vec![v, 0.0]).unwrap()
    }

    #[test]
    fn gd_examples() {
        let p = gd_step(&scalar(1.0), &scalar(2.0), 0.1).unwrap();
        assert!((p.as_slice()[0] - 0.8).abs() < 1e-15);
        let q = gd_step(&scalar(1.0), &scalar(0.0), 0.1).unwrap();
        assert_eq!(q, scalar(1.0));
        assert!(gd_step(&scalar(1.0), &scalar(1.0), 0.0).is_err());
        let other = NetParams::zeros(&LayerSpec::mlp(2, &[], 1).unwrap());
        assert!(gd_step(&scalar(1.0), &other, 0.1).is_err());
    }

    #[test]
    fn gd_matches_elementwise_oracle() {
        let spec = LayerSpec::mlp(5, &[7], 3).unwrap();
        let p: Vec<f64> = (0..spec.param_count()).map(|i| (i as f64 * 0.7).sin()).collect();
        let g: Vec<f64> = (0..spec.param_count()).map(|i| (i as f64 * 1.3).cos()).collect();
        let out = gd_step(
            &NetParams::from_flat(&spec, p.clone()).unwrap(),
            &NetParams::from_flat(&spec, g.clone()).unwrap(),
            0.037,
        )
        .unwrap();
        for i in 0..p.len() {
            assert_eq!(out.as_slice()[i], p[i] - 0.037 * g[i]);
        }
    }

    #[test]
    fn adam_first_step() {
        let state = AdamState::for_params(&scalar(0.0));
        let (p, s) = adam_step(&state, &scalar(0.0), &scalar(1.0), 1e-3).unwrap();
        assert_eq!(s.t, 1);
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((p.as_slice()[0] - want).abs() < 1e-18);
        assert!((p.as_slice()[0] + 9.999_999_90e-4).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let state = AdamState::for_params(&scalar(0.0));
        let (p, _) = adam_step(&state, &scalar(3.0), &scalar(0.0), 1e-3).unwrap();
        assert_eq!(p, scalar(3.0));
    }

    /// Independent scalar ADAM written directly from the update equations.
    fn scalar_adam(w0: f64, gamma: f64, steps: usize) -> Vec<f64> {
        let (r1, r2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut traj = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * w;
            m = r1 * m + (1.0 - r1) * g;
            v = r2 * v + (1.0 - r2) * g * g;
            let mh = m / (1.0 - r1.powi(t as i32));
            let vh = v / (1.0 - r2.powi(t as i32));
            w -= gamma * mh / (vh.sqrt() + eps);
            traj.push(w);
        }
        traj
    }

    #[test]
    fn adam_quadratic_trajectory_matches_oracle() {
        let mut p = scalar(1.0);
        let mut state = AdamState::for_params(&p);
        let oracle = scalar_adam(1.0, 0.1, 100);
        for want in &oracle {
            let g = scalar(2.0 * p.as_slice()[0]);
            state.step(&mut p, &g, 0.1).unwrap();
            assert!((p.as_slice()[0] - want).abs() < 1e-12);
        }
        assert!(p.as_slice()[0].abs() < 0.05);
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut state = AdamState::new(5, AdamHyper::default());
        let mut p = scalar(1.0);
        assert!(state.step(&mut p, &scalar(1.0), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn adam_update_is_bounded(gs in prop::collection::vec(-1e3f64..1e3, 1..40), gamma in 1e-5f64..1.0) {
            let mut p = scalar(0.0);
            let mut state = AdamState::for_params(&p);
            for g in gs {
                let before = p.as_slice()[0];
                state.step(&mut p, &scalar(g), gamma).unwrap();
                let delta = p.as_slice()[0] - before;
                prop_assert!(delta.abs() <= 3.0 * gamma);
                prop_assert!(state.v.iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn adam_constant_gradient_sign(g in prop::sample::select(vec![-5.0f64, -0.3, 0.01, 2.0, 40.0]), steps in 5usize..20) {
            let mut p = scalar(0.0);
            let mut state = AdamState::for_params(&p);
            let mut last = 0.0;
            for _ in 0..steps {
                let before = p.as_slice()[0];
                state.step(&mut p, &scalar(g), 1e-2).unwrap();
                last = p.as_slice()[0] - before;
            }
            prop_assert_eq!(state.t, steps as u64);
            prop_assert!(last.signum() == -g.signum());
        }

        #[test]
        fn adam_is_deterministic(g in -10f64..10.0, w in -10f64..10.0) {
            let state = AdamState::for_params(&scalar(w));
            let a = adam_step(&state, &scalar(w), &scalar(g), 1e-3).unwrap();
            let b = adam_step(&state, &scalar(w), &scalar(g), 1e-3).unwrap();
            prop_assert_eq!(a.0.as_slice()[0].to_bits(), b.0.as_slice()[0].to_bits());
            prop_assert_eq!(a.1, b.1);
        }
    }
}
