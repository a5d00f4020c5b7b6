//! Minimal dense layers with explicit backward passes.
//!
//! All parameters of a network live in one flat `Vec<f64>` owned by a
//! [`ParamStore`]; layers only remember offsets into it. Gradients use the
//! same layout, which keeps the optimizer, gradient clipping, checkpointing
//! and finite-difference checks trivial.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Name, shape and position of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    specs: Vec<ParamSpec>,
}

/// How a new tensor is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its offset.
    pub fn push<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> usize {
        let offset = self.values.len();
        let n: usize = shape.iter().product();
        match init {
            Init::Zeros => self.values.extend(std::iter::repeat_n(0.0, n)),
            Init::Ones => self.values.extend(std::iter::repeat_n(1.0, n)),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                self.values.extend((0..n).map(|_| d.sample(rng)));
            }
        }
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.numel()])
    }

    /// Replaces all values; the layout must already match.
    pub fn load_values(&mut self, values: Vec<f64>) -> Result<(), String> {
        if values.len() != self.values.len() {
            return Err(format!(
                "expected {} parameter values, got {}",
                self.values.len(),
                values.len()
            ));
        }
        self.values = values;
        Ok(())
    }
}

fn view(p: &[f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &p[offset..offset + rows * cols]).expect("layout")
}

fn view_mut(g: &mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut g[offset..offset + rows * cols]).expect("layout")
}

pub(crate) fn row_vector(p: &[f64], offset: usize, len: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[offset..offset + len])
}

pub(crate) fn add_to(g: &mut [f64], offset: usize, src: ArrayView1<f64>) {
    for (d, s) in g[offset..offset + src.len()].iter_mut().zip(src) {
        *d += s;
    }
}

/// `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    w: usize,
    b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.push(&format!("{name}.weight"), &[fan_in, fan_out], Init::Normal(std), rng);
        let b = store.push(&format!("{name}.bias"), &[fan_out], Init::Zeros, rng);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        view(p, self.w, self.fan_in, self.fan_out)
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight(p));
        y += &row_vector(p, self.b, self.fan_out);
        y
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, g: &mut [f64]) {
        {
            let mut gw = view_mut(g, self.w, self.fan_in, self.fan_out);
            general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut gw);
        }
        add_to(g, self.b, dy.sum_axis(Axis(0)).view());
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        p: &[f64],
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        g: &mut [f64],
    ) -> Array2<f64> {
        self.backward_params(x, dy, g);
        dy.dot(&self.weight(p).t())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    gain: usize,
    bias: usize,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let gain = store.push(&format!("{name}.gain"), &[dim], Init::Ones, rng);
        let bias = store.push(&format!("{name}.bias"), &[dim], Init::Zeros, rng);
        Self { gain, bias, dim }
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            *r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| (v - mean) * rs);
        }
        let y = &xhat * &row_vector(p, self.gain, self.dim) + &row_vector(p, self.bias, self.dim);
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        p: &[f64],
        cache: &LayerNormCache,
        dy: ArrayView2<f64>,
        g: &mut [f64],
    ) -> Array2<f64> {
        add_to(g, self.gain, (&dy * &cache.xhat).sum_axis(Axis(0)).view());
        add_to(g, self.bias, dy.sum_axis(Axis(0)).view());
        let gain = row_vector(p, self.gain, self.dim);
        let dxhat = &dy * &gain;
        let n = self.dim as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let sum_dh = dh.sum();
            let sum_dh_xh = dh.dot(&xh);
            let r = cache.rstd[i];
            for j in 0..self.dim {
                dx[[i, j]] = r / n * (n * dh[j] - sum_dh - xh[j] * sum_dh_xh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

/// In-place row softmax.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Scales `g` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step_size * self.m[i] / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference gradient of `f` with respect to `p[i]`.
    fn fd(p: &mut [f64], i: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
        let h = 1e-5;
        let orig = p[i];
        p[i] = orig + h;
        let a = f(p);
        p[i] = orig - h;
        let b = f(p);
        p[i] = orig;
        (a - b) / (2.0 * h)
    }

    #[test]
    fn linear_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 4, 0.5, &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 4, &mut rng);
        // perturb LN params away from identity
        for v in store.values_mut().iter_mut().skip(24) {
            *v += rng.random_range(-0.3..0.3);
        }
        let x = rand_matrix(&mut rng, 3, 5);
        let target = rand_matrix(&mut rng, 3, 4);
        let loss = |p: &[f64]| {
            let h = lin.forward(p, x.view()).mapv(gelu);
            let (y, _) = ln.forward(p, h.view());
            (&y - &target).mapv(|v| v * v).sum()
        };
        let p = store.values().to_vec();
        let pre = lin.forward(&p, x.view());
        let h = pre.mapv(gelu);
        let (y, cache) = ln.forward(&p, h.view());
        let dy = (&y - &target) * 2.0;
        let mut g = vec![0.0; p.len()];
        let dh = ln.backward(&p, &cache, dy.view(), &mut g);
        let dpre = &dh * &pre.mapv(gelu_grad);
        lin.backward(&p, x.view(), dpre.view(), &mut g);
        let mut pm = p.clone();
        for i in 0..p.len() {
            let num = fd(&mut pm, i, &loss);
            assert!((num - g[i]).abs() < 1e-6 * (1.0 + num.abs()), "param {i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![1.0, -1.0];
        let mut opt = Adam::new(2, 0.1);
        opt.update(&mut p, &[2.0, -3.0]);
        // first bias-corrected step has magnitude lr
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let mut small = vec![0.1, 0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = ndarray::array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -5.0]];
        softmax_rows(&mut s);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((s[[1, 0]] - 0.5).abs() < 1e-12);
    }
}
