//! Small fully-connected networks with hand-written backprop.
//!
//! Parameters live in one flat `f64` vector. Layer `l` stores its weight
//! matrix row-major as `[out][in]`, followed by its `out` biases. Forward and
//! backward passes work on row-major batches so that a single-sample call is
//! just a batch of one.

use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self, NnError> {
        let spec = MlpSpec { layer_sizes, hidden_activation, output_activation };
        spec.validate()?;
        Ok(spec)
    }

    /// `input -> hidden.. -> output`.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self, NnError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, hidden_activation, output_activation)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 3 {
            return Err(NnError::InvalidSpec("at least one hidden layer is required".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(NnError::InvalidSpec("layer sizes must be >= 1".into()));
        }
        if self.hidden_activation == Activation::Identity {
            return Err(NnError::InvalidSpec("hidden activation must be tanh or relu".into()));
        }
        if self.output_activation == Activation::Relu {
            return Err(NnError::InvalidSpec("output activation must be identity or tanh".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` for every layer.
    fn layout(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        self.layer_sizes.windows(2).scan(0usize, |off, w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let w_off = *off;
            let b_off = w_off + fan_in * fan_out;
            *off = b_off + fan_out;
            Some((w_off, b_off, fan_in, fan_out))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    LecunUniform,
    Orthogonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub spec: MlpSpec,
    pub values: Vec<f64>,
}

impl FlatParams {
    pub fn zeros(spec: MlpSpec) -> Self {
        let values = vec![0.0; spec.param_count()];
        FlatParams { spec, values }
    }

    pub fn from_values(spec: MlpSpec, values: Vec<f64>) -> Result<Self, NnError> {
        if values.len() != spec.param_count() {
            return Err(NnError::DimMismatch { expected: spec.param_count(), actual: values.len() });
        }
        Ok(FlatParams { spec, values })
    }

    /// Per-layer `(weights [out][in], biases)` copies.
    pub fn unflatten(&self) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
        self.spec
            .layout()
            .map(|(w, b, fan_in, fan_out)| {
                let rows = self.values[w..b].chunks(fan_in).map(<[f64]>::to_vec).collect();
                (rows, self.values[b..b + fan_out].to_vec())
            })
            .collect()
    }

    pub fn flatten(spec: MlpSpec, layers: &[(Vec<Vec<f64>>, Vec<f64>)]) -> Result<Self, NnError> {
        let mut values = Vec::with_capacity(spec.param_count());
        for (rows, bias) in layers {
            for r in rows {
                values.extend_from_slice(r);
            }
            values.extend_from_slice(bias);
        }
        Self::from_values(spec, values)
    }
}

/// Orthonormal `rows x cols` matrix (orthonormal columns if rows >= cols,
/// orthonormal rows otherwise), row-major.
pub fn orthogonal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    let (long, short) = (rows.max(cols), rows.min(cols));
    // `short` column vectors of length `long`, Gram-Schmidt'd twice for accuracy.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for q in &basis {
                let proj = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= proj * qi);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows >= cols { basis[c][r] } else { basis[r][c] };
        }
    }
    out
}

/// Orthogonal init uses gain √2 on hidden layers and 0.01 on the last layer.
pub fn init(spec: &MlpSpec, scheme: InitScheme, rng: &mut Rng) -> FlatParams {
    let mut values = vec![0.0; spec.param_count()];
    let n_layers = spec.n_layers();
    for (l, (w, b, fan_in, fan_out)) in spec.layout().enumerate() {
        let weights = &mut values[w..b];
        match scheme {
            InitScheme::LecunUniform => {
                let bound = (3.0 / fan_in as f64).sqrt();
                weights.iter_mut().for_each(|x| *x = rng.gen_range(-bound..=bound));
            }
            InitScheme::Orthogonal => {
                let gain = if l + 1 == n_layers { 0.01 } else { std::f64::consts::SQRT_2 };
                let q = orthogonal_matrix(fan_out, fan_in, rng);
                weights.iter_mut().zip(q).for_each(|(x, v)| *x = gain * v);
            }
        }
    }
    FlatParams { spec: spec.clone(), values }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Post-activation values of every layer for a batch, input included.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub batch: usize,
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

/// Batched forward pass over `batch` row-major inputs.
pub fn forward_batch(spec: &MlpSpec, params: &[f64], inputs: &[f64], batch: usize) -> Result<ForwardCache, NnError> {
    if params.len() != spec.param_count() {
        return Err(NnError::DimMismatch { expected: spec.param_count(), actual: params.len() });
    }
    if inputs.len() != batch * spec.input_dim() {
        return Err(NnError::DimMismatch { expected: batch * spec.input_dim(), actual: inputs.len() });
    }
    let mut activations = Vec::with_capacity(spec.layer_sizes.len());
    activations.push(inputs.to_vec());
    for (l, (w, b, fan_in, fan_out)) in spec.layout().enumerate() {
        let act = spec.activation(l);
        let weights = &params[w..b];
        let bias = &params[b..b + fan_out];
        let x = activations.last().unwrap();
        let mut out = vec![0.0; batch * fan_out];
        for (xn, on) in x.chunks_exact(fan_in).zip(out.chunks_exact_mut(fan_out)) {
            for ((o, row), bo) in on.iter_mut().zip(weights.chunks_exact(fan_in)).zip(bias) {
                *o = act.apply(bo + dot(row, xn));
            }
        }
        activations.push(out);
    }
    Ok(ForwardCache { batch, activations })
}

/// Single-sample forward pass.
pub fn forward(params: &FlatParams, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
    let cache = forward_batch(&params.spec, &params.values, input, 1)?;
    Ok((cache.output().to_vec(), cache))
}

/// Forward pass that discards the cache.
pub fn predict(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>, NnError> {
    let mut cache = forward_batch(spec, params, input, 1)?;
    Ok(cache.activations.pop().unwrap())
}

/// Gradients of `Σ_batch output · grad_output` with respect to the parameters
/// (accumulated into `grad_params`) and to each input row (returned).
pub fn backward_batch_into(
    spec: &MlpSpec,
    params: &[f64],
    cache: &ForwardCache,
    grad_output: &[f64],
    grad_params: &mut [f64],
) -> Result<Vec<f64>, NnError> {
    let batch = cache.batch;
    if grad_output.len() != batch * spec.output_dim() {
        return Err(NnError::DimMismatch { expected: batch * spec.output_dim(), actual: grad_output.len() });
    }
    if grad_params.len() != spec.param_count() || params.len() != spec.param_count() {
        return Err(NnError::DimMismatch { expected: spec.param_count(), actual: grad_params.len() });
    }
    if cache.activations.len() != spec.layer_sizes.len() {
        return Err(NnError::DimMismatch { expected: spec.layer_sizes.len(), actual: cache.activations.len() });
    }
    let layout: Vec<_> = spec.layout().collect();
    let mut grad_a = grad_output.to_vec();
    for l in (0..spec.n_layers()).rev() {
        let (w, b, fan_in, fan_out) = layout[l];
        let act = spec.activation(l);
        let out = &cache.activations[l + 1];
        let x = &cache.activations[l];
        let mut grad_z = grad_a;
        grad_z.iter_mut().zip(out).for_each(|(g, a)| *g *= act.grad_from_output(*a));

        let (gw, gb) = grad_params[w..b + fan_out].split_at_mut(b - w);
        for (gzn, xn) in grad_z.chunks_exact(fan_out).zip(x.chunks_exact(fan_in)) {
            for (o, &g) in gzn.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, xn, &mut gw[o * fan_in..(o + 1) * fan_in]);
                    gb[o] += g;
                }
            }
        }

        let weights = &params[w..b];
        let mut grad_x = vec![0.0; batch * fan_in];
        for (gzn, gxn) in grad_z.chunks_exact(fan_out).zip(grad_x.chunks_exact_mut(fan_in)) {
            for (&g, row) in gzn.iter().zip(weights.chunks_exact(fan_in)) {
                if g != 0.0 {
                    axpy(g, row, gxn);
                }
            }
        }
        grad_a = grad_x;
    }
    Ok(grad_a)
}

/// Single-sample backward pass: `(grad_params, grad_input)`.
pub fn backward(params: &FlatParams, cache: &ForwardCache, grad_output: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let mut grads = vec![0.0; params.values.len()];
    let gi = backward_batch_into(&params.spec, &params.values, cache, grad_output, &mut grads)?;
    Ok((grads, gi))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected Adam step *descending* `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::DimMismatch { expected: self.m.len(), actual: params.len().max(grads.len()) });
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Header line of a parameter file. The body is `count` little-endian f64s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub format: String,
    /// Network specs of the consecutive segments stored in the vector.
    pub specs: Vec<MlpSpec>,
    pub scheme: Option<InitScheme>,
    pub count: usize,
}

pub const PARAMS_FORMAT: &str = "act-params-v1";

pub fn write_params<W: Write>(mut w: W, specs: &[MlpSpec], scheme: Option<InitScheme>, values: &[f64]) -> Result<(), NnError> {
    let expected: usize = specs.iter().map(MlpSpec::param_count).sum();
    if expected != values.len() {
        return Err(NnError::DimMismatch { expected, actual: values.len() });
    }
    let header = ParamsHeader { format: PARAMS_FORMAT.into(), specs: specs.to_vec(), scheme, count: values.len() };
    let line = serde_json::to_string(&header).map_err(|e| NnError::Format(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    let mut body = Vec::with_capacity(values.len() * 8);
    for v in values {
        body.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&body)?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<(ParamsHeader, Vec<f64>), NnError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| NnError::Format("missing header line".into()))?;
    let header: ParamsHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| NnError::Format(format!("bad header: {e}")))?;
    if header.format != PARAMS_FORMAT {
        return Err(NnError::Format(format!("unknown format {:?}", header.format)));
    }
    let body = &bytes[nl + 1..];
    if body.len() != header.count * 8 {
        return Err(NnError::Format(format!("expected {} values, found {} bytes", header.count, body.len())));
    }
    let expected: usize = header.specs.iter().map(MlpSpec::param_count).sum();
    if expected != header.count {
        return Err(NnError::DimMismatch { expected, actual: header.count });
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn spec(sizes: &[usize], h: Activation, o: Activation) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), h, o).unwrap()
    }

    /// Dense-matrix oracle, independent of the flat layout code paths.
    fn oracle_forward(p: &FlatParams, x: &[f64]) -> Vec<f64> {
        let layers = p.unflatten();
        let n = layers.len();
        let mut a = x.to_vec();
        for (l, (w, b)) in layers.iter().enumerate() {
            let act = if l + 1 == n { p.spec.output_activation } else { p.spec.hidden_activation };
            a = w
                .iter()
                .zip(b)
                .map(|(row, bi)| {
                    let z: f64 = row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + bi;
                    match act {
                        Activation::Identity => z,
                        Activation::Tanh => z.tanh(),
                        Activation::Relu => z.max(0.0),
                    }
                })
                .collect();
        }
        a
    }

    fn random_params(spec: &MlpSpec, rng: &mut crate::rng::Rng) -> FlatParams {
        let values = (0..spec.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FlatParams::from_values(spec.clone(), values).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3, 2], Activation::Tanh, Activation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Tanh, Activation::Identity).is_err());
        let s = spec(&[3, 4, 2], Activation::Relu, Activation::Tanh);
        assert_eq!(s.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn lecun_uniform_bounds_and_zero_bias() {
        let s = spec(&[3, 5, 3], Activation::Relu, Activation::Tanh);
        let p = init(&s, InitScheme::LecunUniform, &mut rng::stream(1));
        let layers = p.unflatten();
        assert!(layers[0].0.iter().flatten().all(|w| w.abs() <= 1.0));
        let b2 = (3.0f64 / 5.0).sqrt();
        assert!(layers[1].0.iter().flatten().all(|w| w.abs() <= b2));
        assert!(layers.iter().all(|(_, b)| b.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let s = spec(&[16, 16, 8, 2], Activation::Tanh, Activation::Identity);
        let p = init(&s, InitScheme::Orthogonal, &mut rng::stream(2));
        let layers = p.unflatten();
        let (w, b) = &layers[0];
        let root2 = std::f64::consts::SQRT_2;
        for i in 0..16 {
            for j in 0..16 {
                let g: f64 = (0..16).map(|k| w[k][i] * w[k][j]).sum::<f64>() / 2.0;
                assert!((g - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
        assert!(b.iter().all(|&x| x == 0.0));
        // 8x16: orthonormal rows after removing the gain.
        let (w1, _) = &layers[1];
        for i in 0..8 {
            for j in 0..8 {
                let g: f64 = (0..16).map(|k| w1[i][k] * w1[j][k]).sum::<f64>() / (root2 * root2);
                assert!((g - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
        let (w2, _) = &layers[2];
        let row_norm: f64 = w2[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((row_norm - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_params_give_zero_tanh_output() {
        let s = spec(&[4, 8, 3], Activation::Tanh, Activation::Tanh);
        let (out, _) = forward(&FlatParams::zeros(s), &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn unit_chain_at_zero() {
        let s = spec(&[1, 1, 1], Activation::Tanh, Activation::Identity);
        let p = FlatParams::from_values(s, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(forward(&p, &[0.0]).unwrap().0, vec![0.0]);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let mut r = rng::stream(3);
        for (sizes, h, o) in [
            (vec![3, 7, 2], Activation::Tanh, Activation::Identity),
            (vec![5, 6, 4, 3], Activation::Relu, Activation::Tanh),
            (vec![9, 13, 11, 1], Activation::Tanh, Activation::Tanh),
        ] {
            let s = spec(&sizes, h, o);
            let p = random_params(&s, &mut r);
            let x: Vec<f64> = (0..s.input_dim()).map(|_| r.gen_range(-2.0..2.0)).collect();
            let got = forward(&p, &x).unwrap().0;
            for (g, e) in got.iter().zip(oracle_forward(&p, &x)) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let s = spec(&[3, 4, 2], Activation::Tanh, Activation::Identity);
        assert!(forward(&FlatParams::zeros(s), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn batched_forward_matches_rows() {
        let s = spec(&[4, 9, 3], Activation::Relu, Activation::Identity);
        let mut r = rng::stream(4);
        let p = random_params(&s, &mut r);
        let xs: Vec<f64> = (0..4 * 5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let c = forward_batch(&s, &p.values, &xs, 5).unwrap();
        for (n, row) in xs.chunks(4).enumerate() {
            assert_eq!(&c.output()[n * 3..(n + 1) * 3], forward(&p, row).unwrap().0.as_slice());
        }
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let s = spec(&[3, 5, 2], Activation::Tanh, Activation::Identity);
        let p = random_params(&s, &mut rng::stream(5));
        let (_, c) = forward(&p, &[0.1, 0.2, 0.3]).unwrap();
        let (gp, gi) = backward(&p, &c, &[0.0, 0.0]).unwrap();
        assert!(gp.iter().chain(&gi).all(|&g| g == 0.0));
        assert!(backward(&p, &c, &[0.0]).is_err());
    }

    #[test]
    fn linear_output_layer_weight_grad_is_input_times_upstream() {
        // With identity output the last-layer weight gradient is h * g.
        let s = spec(&[2, 3, 1], Activation::Tanh, Activation::Identity);
        let p = random_params(&s, &mut rng::stream(6));
        let (_, c) = forward(&p, &[0.4, -0.3]).unwrap();
        let (gp, _) = backward(&p, &c, &[2.5]).unwrap();
        let hidden = &c.activations[1];
        let w_off = 2 * 3 + 3;
        for k in 0..3 {
            assert!((gp[w_off + k] - hidden[k] * 2.5).abs() < 1e-15);
        }
        assert_eq!(gp[w_off + 3], 2.5);
    }

    /// Worst relative error of backward against central finite differences.
    fn finite_difference_max_rel_error(seed: u64) -> f64 {
        let mut r = rng::stream(seed);
        let n_layers = r.gen_range(2..=4);
        let sizes: Vec<usize> = (0..=n_layers).map(|_| r.gen_range(1..=6)).collect();
        let h = if r.gen::<bool>() { Activation::Tanh } else { Activation::Relu };
        let o = if r.gen::<bool>() { Activation::Tanh } else { Activation::Identity };
        let s = spec(&sizes, h, o);
        let p = random_params(&s, &mut r);
        let x: Vec<f64> = (0..s.input_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let go: Vec<f64> = (0..s.output_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = |vals: &[f64], x: &[f64]| -> f64 {
            predict(&s, vals, x).unwrap().iter().zip(&go).map(|(a, b)| a * b).sum()
        };
        let (_, c) = forward(&p, &x).unwrap();
        let (gp, gi) = backward(&p, &c, &go).unwrap();
        let eps = 1e-5;
        let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
        let mut worst = 0.0f64;
        for i in 0..p.values.len() {
            let mut plus = p.values.clone();
            let mut minus = p.values.clone();
            plus[i] += eps;
            minus[i] -= eps;
            worst = worst.max(rel(gp[i], (f(&plus, &x) - f(&minus, &x)) / (2.0 * eps)));
        }
        for i in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += eps;
            minus[i] -= eps;
            worst = worst.max(rel(gi[i], (f(&p.values, &plus) - f(&p.values, &minus)) / (2.0 * eps)));
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..100 {
            let err = finite_difference_max_rel_error(seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = vec![1.0, -2.0];
        AdamState::new(2).step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut p = vec![1.0, 1.0];
        let g = [0.5, -3.0];
        AdamState::new(2).step(&mut p, &g, 0.01).unwrap();
        // m̂ = g, v̂ = g², so Δ = lr g / (|g| + eps).
        for (pi, gi) in p.iter().zip(g) {
            let expected = 1.0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_constant_gradient_unit_steps() {
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        let mut prev = 0.0;
        for _ in 0..2000 {
            st.step(&mut p, &[-0.3], 0.01).unwrap();
            let delta = p[0] - prev;
            prev = p[0];
            assert!((delta - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn params_file_round_trip_is_bit_exact() {
        let s = spec(&[3, 4, 2], Activation::Relu, Activation::Tanh);
        let mut p = random_params(&s, &mut rng::stream(9));
        p.values[0] = -0.0;
        p.values[1] = f64::MIN_POSITIVE / 3.0;
        let mut buf = Vec::new();
        write_params(&mut buf, std::slice::from_ref(&s), Some(InitScheme::LecunUniform), &p.values).unwrap();
        let (h, v) = read_params(buf.as_slice()).unwrap();
        assert_eq!(h.specs, vec![s]);
        assert_eq!(h.count, p.values.len());
        assert!(v.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(read_params(&buf[..buf.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trip(sizes in prop::collection::vec(1usize..6, 3..5), seed in 0u64..1000) {
            let s = spec(&sizes, Activation::Tanh, Activation::Identity);
            let p = random_params(&s, &mut rng::stream(seed));
            let q = FlatParams::flatten(s, &p.unflatten()).unwrap();
            prop_assert_eq!(p, q);
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let s = spec(&[4, 8, 8, 2], Activation::Relu, Activation::Tanh);
            let mut r = rng::stream(seed);
            let p = random_params(&s, &mut r);
            let x: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
            let a = forward(&p, &x).unwrap().0;
            let b = forward(&p, &x).unwrap().0;
            prop_assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}
