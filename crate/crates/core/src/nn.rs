//! Parameters, layers and the Adam optimiser.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{ConvGeom, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars across the parameters selected by `keep`.
    pub fn count_scalars(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(n, _)| keep(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Binds a [`ParamStore`] to a fresh [`Tape`]: each parameter becomes a leaf
/// the first time it is used. Frozen parameters enter as constants.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    frozen: &'a [bool],
    vars: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, frozen: &'a [bool]) -> Self {
        Self {
            tape: Tape::new(),
            store,
            frozen,
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.frozen.get(id.0).copied().unwrap_or(false) {
            self.tape.constant(value)
        } else {
            self.tape.param(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backpropagates `root` and returns per-parameter gradients.
    pub fn param_grads(&self, root: Var) -> ParamGrads {
        let mut grads = self.tape.backward(root);
        let mut out = ParamGrads::zeros_like(self.store);
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.take(*v) {
                    out.grads[i].add_assign(&g);
                }
            }
        }
        out
    }

    pub fn backward(&self, root: Var) -> Gradients {
        self.tape.backward(root)
    }
}

/// Gradient accumulator shaped like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

/// Seeded initialiser. Uniform bounds follow the usual `1/sqrt(fan_in)` rule.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
        )
    }

    pub fn fan_in(&mut self, fan_in: usize, rows: usize, cols: usize) -> Tensor {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        self.uniform(rows, cols, bound)
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| dist.sample(rng)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            alloc::format!("{name}.weight"),
            init.fan_in(in_dim, in_dim, out_dim),
        );
        let bias = bias.then(|| {
            store.add(
                alloc::format!("{name}.bias"),
                init.fan_in(in_dim, 1, out_dim),
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.p(self.weight);
        let y = g.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.p(b);
                g.tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dims: (usize, usize, usize),
        bias: bool,
    ) -> Self {
        Self {
            first: Linear::new(store, init, &alloc::format!("{name}.0"), dims.0, dims.1, bias),
            second: Linear::new(store, init, &alloc::format!("{name}.1"), dims.1, dims.2, bias),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.first.forward(g, x);
        let h = g.tape.relu(h);
        self.second.forward(g, h)
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }
}

/// Per-row layer normalisation with learned scale and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(alloc::format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.add(alloc::format!("{name}.beta"), Tensor::zeros(1, dim)),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.tape.layer_norm_rows(x, 1e-5);
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        let y = g.tape.mul_row(n, gamma);
        g.tape.add_row(y, beta)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Group normalisation with per-channel affine terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Self {
        assert!(channels % groups == 0, "group count must divide channels");
        Self {
            gamma: store.add(alloc::format!("{name}.gamma"), Tensor::filled(1, channels, 1.0)),
            beta: store.add(alloc::format!("{name}.beta"), Tensor::zeros(1, channels)),
            groups,
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.tape.group_norm(x, self.groups, 1e-5);
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        let y = g.tape.mul_row(n, gamma);
        g.tape.add_row(y, beta)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Square stride-1 convolution with zero "same" padding and a bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = kernel * kernel * in_channels;
        Self {
            weight: store.add(
                alloc::format!("{name}.weight"),
                init.fan_in(fan_in, fan_in, out_channels),
            ),
            bias: store.add(
                alloc::format!("{name}.bias"),
                init.fan_in(fan_in, 1, out_channels),
            ),
            kernel,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, height: usize, width: usize) -> Var {
        let w = g.p(self.weight);
        let y = g.tape.conv2d(
            x,
            w,
            ConvGeom {
                height,
                width,
                kernel: self.kernel,
                in_channels: self.in_channels,
                out_channels: self.out_channels,
            },
        );
        let b = g.p(self.bias);
        g.tape.add_row(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels
    }
}

/// 2x2 stride-2 transposed convolution, realised as a per-location linear
/// map followed by a pixel shuffle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose2x2 {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            weight: store.add(
                alloc::format!("{name}.weight"),
                init.fan_in(in_channels, in_channels, 4 * out_channels),
            ),
            bias: store.add(
                alloc::format!("{name}.bias"),
                init.fan_in(in_channels, 1, out_channels),
            ),
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, height: usize, width: usize) -> Var {
        let w = g.p(self.weight);
        let y = g.tape.matmul(x, w);
        let y = g.tape.pixel_shuffle2(y, height, width);
        let b = g.p(self.bias);
        g.tape.add_row(y, b)
    }

    pub fn param_count(&self) -> usize {
        4 * self.in_channels * self.out_channels + self.out_channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Frozen parameters are never touched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .values
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, frozen: &[bool]) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for i in 0..store.values.len() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let g = &grads.grads[i];
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = &mut store.values[i];
            for (((pp, mm), vv), &gg) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mm = beta1 * *mm + (1.0 - beta1) * gg;
                *vv = beta2 * *vv + (1.0 - beta2) * gg * gg;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *pp -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
    }
}

/// Parameter-group prefix (`"fafm"`, `"decoder"`, ...) of a dotted name.
pub fn group_of(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_string()
}
