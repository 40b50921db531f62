//! Fully-connected predictor network.
//!
//! Layer `l` maps `a_{l-1}` to `a_l = r_l(W_l a_{l-1} + b_l)` with ReLU hidden
//! layers and a linear output. The training loss of a batch is
//! `(1/V) sum_v ||y_hat_v - y_v||^2` (summed over vector entries, averaged over
//! samples only).
//!
//! Parameters live in one flat `Vec<f64>`; layer `l` occupies `W_l` (row-major,
//! `n_l x n_{l-1}`) followed by `b_l`. Gradients, optimizer moments and
//! Hessian-vector products share that layout.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::gemm;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// Layer widths `n_0..n_{L-1}` and the activation of each of the `L-1` maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
}

impl LayerSpec {
    pub fn new(sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(invalid("a network needs at least an input and an output layer"));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(invalid(format!(
                "{} layer sizes need {} activations, got {}",
                sizes.len(),
                sizes.len() - 1,
                activations.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(Self { sizes, activations })
    }

    /// ReLU hidden layers and a linear output layer.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut activations = vec![Activation::Relu; hidden.len()];
        activations.push(Activation::Linear);
        Self::new(sizes, activations)
    }

    /// The CSI predictor for an `antennas`-element array: `2M -> hidden -> 2M`.
    pub fn for_antennas(antennas: usize, hidden: &[usize]) -> Result<Self> {
        Self::mlp(2 * antennas, hidden, 2 * antennas)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn layer_count(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// `(fan_in, fan_out, weight offset, bias offset)` for each layer.
    fn layout(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let (n_in, n_out) = (w[0], w[1]);
            let w_off = offset;
            offset += n_in * n_out + n_out;
            (n_in, n_out, w_off, w_off + n_in * n_out)
        })
    }
}

/// Network parameters, or any array with the same shape (gradients, moments, directions).
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    spec: LayerSpec,
    data: Vec<f64>,
}

impl NetParams {
    pub fn zeros(spec: &LayerSpec) -> Self {
        Self {
            data: vec![0.0; spec.param_count()],
            spec: spec.clone(),
        }
    }

    pub fn from_flat(spec: &LayerSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.param_count() {
            return Err(shape(format!(
                "layer spec needs {} parameters, got {}",
                spec.param_count(),
                data.len()
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            data,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major weight matrix of layer `l` (0-based over the `L-1` maps).
    pub fn weight(&self, l: usize) -> &[f64] {
        let (n_in, n_out, w, _) = self.spec.layout().nth(l).expect("layer index");
        &self.data[w..w + n_in * n_out]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let (n_in, n_out, w, _) = self.spec.layout().nth(l).expect("layer index");
        &mut self.data[w..w + n_in * n_out]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let (_, n_out, _, b) = self.spec.layout().nth(l).expect("layer index");
        &self.data[b..b + n_out]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (_, n_out, _, b) = self.spec.layout().nth(l).expect("layer index");
        &mut self.data[b..b + n_out]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &NetParams) -> Result<()> {
        if self.spec != other.spec {
            return Err(shape(format!(
                "layer sizes {:?} vs {:?}",
                self.spec.sizes, other.spec.sizes
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &NetParams) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &NetParams) {
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += s * b);
    }
}

/// How the initialization variance `1/n` picks `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScale {
    /// `n` = number of inputs to the layer.
    #[default]
    FanIn,
    /// `n` = number of neurons in the layer itself.
    LayerWidth,
}

/// Draws weights from `N(0, 1/n)` truncated at two standard deviations (by
/// rejection); biases start at zero.
pub fn init_params(spec: &LayerSpec, scale: InitScale, rng: &mut Rng) -> NetParams {
    let mut params = NetParams::zeros(spec);
    for (l, (n_in, n_out, _, _)) in spec.layout().collect::<Vec<_>>().into_iter().enumerate() {
        let n = match scale {
            InitScale::FanIn => n_in,
            InitScale::LayerWidth => n_out,
        };
        let sd = (1.0 / n as f64).sqrt();
        for w in params.weight_mut(l) {
            *w = sd * truncated_standard_normal(rng);
        }
    }
    params
}

fn truncated_standard_normal(rng: &mut Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Input/label pairs, stored row-major (`V x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    xs: Vec<f64>,
    ys: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl Batch {
    pub fn new(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(shape(format!("{} inputs vs {} labels", xs.len(), ys.len())));
        }
        let in_dim = xs.first().map_or(0, Vec::len);
        let out_dim = ys.first().map_or(0, Vec::len);
        if xs.iter().any(|x| x.len() != in_dim) || ys.iter().any(|y| y.len() != out_dim) {
            return Err(shape("batch vectors have inconsistent lengths"));
        }
        Ok(Self {
            xs: xs.concat(),
            ys: ys.concat(),
            in_dim,
            out_dim,
        })
    }

    /// Builds a batch from `(x, y)` slices.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<Self> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut dims: Option<(usize, usize)> = None;
        for (x, y) in rows {
            match dims {
                None => dims = Some((x.len(), y.len())),
                Some((dx, dy)) if dx != x.len() || dy != y.len() => {
                    return Err(shape("batch vectors have inconsistent lengths"))
                }
                _ => {}
            }
            xs.extend_from_slice(x);
            ys.extend_from_slice(y);
        }
        let (in_dim, out_dim) = dims.unwrap_or((0, 0));
        Ok(Self {
            xs,
            ys,
            in_dim,
            out_dim,
        })
    }

    pub fn len(&self) -> usize {
        if self.in_dim == 0 {
            0
        } else {
            self.xs.len() / self.in_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &[f64] {
        &self.xs
    }

    pub fn labels(&self) -> &[f64] {
        &self.ys
    }

    pub fn input(&self, v: usize) -> &[f64] {
        &self.xs[v * self.in_dim..(v + 1) * self.in_dim]
    }

    pub fn label(&self, v: usize) -> &[f64] {
        &self.ys[v * self.out_dim..(v + 1) * self.out_dim]
    }

    fn check(&self, spec: &LayerSpec) -> Result<()> {
        if self.is_empty() {
            return Err(invalid("empty batch"));
        }
        if self.in_dim != spec.input_dim() || self.out_dim != spec.output_dim() {
            return Err(shape(format!(
                "batch is {}->{}, network is {}->{}",
                self.in_dim,
                self.out_dim,
                spec.input_dim(),
                spec.output_dim()
            )));
        }
        Ok(())
    }
}

/// Cached pre-activations `z_l` and activations `a_l` of a batch forward pass.
#[derive(Debug, Clone)]
pub struct GradTape {
    rows: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl GradTape {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Row-major pre-activations `z_l` of layer `l`.
    pub fn pre_activation(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }

    /// Activations feeding layer `l` (the input for `l = 0`).
    fn layer_input(&self, l: usize) -> &[f64] {
        if l == 0 {
            &self.input
        } else {
            &self.post[l - 1]
        }
    }
}

fn add_bias(z: &mut [f64], b: &[f64]) {
    for row in z.chunks_exact_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
    }
}

fn activate(act: Activation, z: &[f64]) -> Vec<f64> {
    match act {
        Activation::Linear => z.to_vec(),
        Activation::Relu => z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Multiplies `g` by the activation derivative at `z` (`relu'(0) = 0`).
fn mask_in_place(act: Activation, z: &[f64], g: &mut [f64]) {
    if act == Activation::Relu {
        g.iter_mut().zip(z).for_each(|(gi, &zi)| {
            if zi <= 0.0 {
                *gi = 0.0
            }
        });
    }
}

fn column_sums(m: &[f64], cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for row in m.chunks_exact(cols) {
        out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
    }
}

fn forward_rows(params: &NetParams, xs: &[f64], rows: usize) -> GradTape {
    let spec = params.spec();
    let mut pre = Vec::with_capacity(spec.layer_count());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(spec.layer_count());
    for (l, (n_in, n_out, _, _)) in spec.layout().enumerate() {
        let a_prev: &[f64] = if l == 0 { xs } else { &post[l - 1] };
        let mut z = vec![0.0; rows * n_out];
        gemm::a_bt(rows, n_in, n_out, a_prev, params.weight(l), &mut z, false);
        add_bias(&mut z, params.bias(l));
        post.push(activate(spec.activations[l], &z));
        pre.push(z);
    }
    GradTape {
        rows,
        input: xs.to_vec(),
        pre,
        post,
    }
}

/// Single-sample forward pass.
pub fn forward(params: &NetParams, x: &[f64]) -> Result<(Vec<f64>, GradTape)> {
    if x.len() != params.spec().input_dim() {
        return Err(shape(format!(
            "input has length {}, network expects {}",
            x.len(),
            params.spec().input_dim()
        )));
    }
    let tape = forward_rows(params, x, 1);
    Ok((tape.output().to_vec(), tape))
}

/// Forward pass over every input of a batch.
pub fn forward_batch(params: &NetParams, batch: &Batch) -> Result<GradTape> {
    batch.check(params.spec())?;
    Ok(forward_rows(params, batch.inputs(), batch.len()))
}

/// Predictions for a list of inputs, row-major.
pub fn predict(params: &NetParams, xs: &[f64]) -> Result<Vec<f64>> {
    let d = params.spec().input_dim();
    if xs.len() % d != 0 {
        return Err(shape(format!("input buffer length {} is not a multiple of {d}", xs.len())));
    }
    let tape = forward_rows(params, xs, xs.len() / d);
    Ok(tape.post.into_iter().last().unwrap_or_default())
}

fn loss_from_output(out: &[f64], ys: &[f64], rows: usize) -> f64 {
    out.iter().zip(ys).map(|(o, y)| (o - y) * (o - y)).sum::<f64>() / rows as f64
}

pub fn mse_loss(params: &NetParams, batch: &Batch) -> Result<f64> {
    let tape = forward_batch(params, batch)?;
    Ok(loss_from_output(tape.output(), batch.labels(), batch.len()))
}

/// Loss and its exact gradient.
pub fn loss_and_grad(params: &NetParams, batch: &Batch) -> Result<(f64, NetParams)> {
    let tape = forward_batch(params, batch)?;
    let loss = loss_from_output(tape.output(), batch.labels(), batch.len());
    Ok((loss, backward_from_tape(params, &tape, batch.labels())))
}

pub fn backward(params: &NetParams, batch: &Batch) -> Result<NetParams> {
    Ok(loss_and_grad(params, batch)?.1)
}

fn backward_from_tape(params: &NetParams, tape: &GradTape, ys: &[f64]) -> NetParams {
    let spec = params.spec();
    let rows = tape.rows;
    let scale = 2.0 / rows as f64;
    let mut grad = NetParams::zeros(spec);
    let layout: Vec<_> = spec.layout().collect();
    let mut g: Vec<f64> = tape
        .output()
        .iter()
        .zip(ys)
        .map(|(o, y)| scale * (o - y))
        .collect();
    for l in (0..layout.len()).rev() {
        let (n_in, n_out, w_off, b_off) = layout[l];
        mask_in_place(spec.activations[l], &tape.pre[l], &mut g);
        let a_prev = tape.layer_input(l);
        gemm::at_b(
            n_out,
            rows,
            n_in,
            &g,
            a_prev,
            &mut grad.data[w_off..w_off + n_in * n_out],
            false,
        );
        column_sums(&g, n_out, &mut grad.data[b_off..b_off + n_out]);
        if l > 0 {
            let mut g_prev = vec![0.0; rows * n_in];
            gemm::a_b(rows, n_out, n_in, &g, params.weight(l), &mut g_prev, false);
            g = g_prev;
        }
    }
    grad
}

/// Gradient at `params` and its directional derivative along `direction`
/// (a Hessian-vector product), computed by propagating tangents through the
/// forward and backward passes.
pub fn forward_param_jvp(
    params: &NetParams,
    direction: &NetParams,
    batch: &Batch,
) -> Result<(NetParams, NetParams)> {
    params.check_same_shape(direction)?;
    let tape = forward_batch(params, batch)?;
    let spec = params.spec();
    let rows = batch.len();
    let layout: Vec<_> = spec.layout().collect();

    // Tangent forward pass.
    let mut dot_post: Vec<Vec<f64>> = Vec::with_capacity(layout.len());
    for (l, &(n_in, n_out, _, _)) in layout.iter().enumerate() {
        let mut dz = vec![0.0; rows * n_out];
        gemm::a_bt(rows, n_in, n_out, tape.layer_input(l), direction.weight(l), &mut dz, false);
        if l > 0 {
            gemm::a_bt(rows, n_in, n_out, &dot_post[l - 1], params.weight(l), &mut dz, true);
        }
        add_bias(&mut dz, direction.bias(l));
        mask_in_place(spec.activations[l], &tape.pre[l], &mut dz);
        dot_post.push(dz);
    }

    // Backward pass and its tangent.
    let scale = 2.0 / rows as f64;
    let mut grad = NetParams::zeros(spec);
    let mut hvp = NetParams::zeros(spec);
    let mut g: Vec<f64> = tape
        .output()
        .iter()
        .zip(batch.labels())
        .map(|(o, y)| scale * (o - y))
        .collect();
    let mut dg: Vec<f64> = dot_post.last().unwrap().iter().map(|v| scale * v).collect();
    for l in (0..layout.len()).rev() {
        let (n_in, n_out, w_off, b_off) = layout[l];
        mask_in_place(spec.activations[l], &tape.pre[l], &mut g);
        mask_in_place(spec.activations[l], &tape.pre[l], &mut dg);
        let a_prev = tape.layer_input(l);
        let w_range = w_off..w_off + n_in * n_out;
        let b_range = b_off..b_off + n_out;
        gemm::at_b(n_out, rows, n_in, &g, a_prev, &mut grad.data[w_range.clone()], false);
        column_sums(&g, n_out, &mut grad.data[b_range.clone()]);
        gemm::at_b(n_out, rows, n_in, &dg, a_prev, &mut hvp.data[w_range.clone()], false);
        if l > 0 {
            gemm::at_b(n_out, rows, n_in, &g, &dot_post[l - 1], &mut hvp.data[w_range], true);
        }
        column_sums(&dg, n_out, &mut hvp.data[b_range]);
        if l > 0 {
            let mut g_prev = vec![0.0; rows * n_in];
            gemm::a_b(rows, n_out, n_in, &g, params.weight(l), &mut g_prev, false);
            let mut dg_prev = vec![0.0; rows * n_in];
            gemm::a_b(rows, n_out, n_in, &dg, params.weight(l), &mut dg_prev, false);
            gemm::a_b(rows, n_out, n_in, &g, direction.weight(l), &mut dg_prev, true);
            g = g_prev;
            dg = dg_prev;
        }
    }
    Ok((grad, hvp))
}
