//! Shared-representation feed-forward network with linear output heads.
//!
//! The trunk maps `x` to an `r`-dimensional representation through ELU hidden
//! layers and a final linear layer. Heads are linear in the augmented
//! representation `[trunk(x), 1]`, so each head carries its own bias as the
//! last coefficient. In two-head mode sample `i` is scored by head `group[i]`,
//! and the biased effect is `(h1 - h0)^T phi(x)`.
//!
//! All parameters live in one flat vector; training is mini-batch Adam with
//! decoupled weight decay.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{Covariates, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    TwoHead,
    SingleHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Width of every hidden trunk layer.
    pub hidden_width: usize,
    /// Number of linear layers in the trunk (hidden layers + representation layer).
    pub depth: usize,
    /// Representation dimension `r` (before the constant feature is appended).
    pub repr_dim: usize,
    pub heads: HeadMode,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Hold out this fraction of rows and keep the weights with the best
    /// held-out loss.
    pub validation_fraction: Option<f64>,
    /// Stop after this many epochs without held-out improvement.
    pub patience: Option<usize>,
    pub seed: RngStream,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::simulation(RngStream::new(0, 0))
    }
}

impl NetConfig {
    /// Two-head network with the simulation hyperparameters.
    pub fn simulation(seed: RngStream) -> Self {
        NetConfig {
            hidden_width: 16,
            depth: 5,
            repr_dim: 2,
            heads: HeadMode::TwoHead,
            learning_rate: 0.01,
            weight_decay: 0.02,
            batch_size: 2000,
            epochs: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            validation_fraction: None,
            patience: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.repr_dim == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "network depth, repr_dim and batch_size must be >= 1",
            ));
        }
        if self.depth > 1 && self.hidden_width == 0 {
            return Err(Error::invalid("hidden_width must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid(
                "learning_rate must be > 0 and weight_decay >= 0",
            ));
        }
        if let Some(f) = self.validation_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    /// Offset of the row-major weight block; biases follow it.
    offset: usize,
}

impl Layer {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
    fn end(&self) -> usize {
        self.bias_offset() + self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprNet {
    input_dim: usize,
    repr_dim: usize,
    heads: HeadMode,
    layers: Vec<Layer>,
    head_offset: usize,
    params: Vec<f64>,
    /// Epochs actually run (less than configured when early stopping fired).
    pub epochs_run: usize,
}

struct Trace {
    /// Layer inputs, one per layer, plus the final representation.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

impl ReprNet {
    /// Fresh network with uniform fan-in initialization drawn from `cfg.seed`.
    pub fn init(input_dim: usize, cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::invalid("network input dimension must be >= 1"));
        }
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(cfg.hidden_width, cfg.depth - 1));
        dims.push(cfg.repr_dim);
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut offset = 0;
        for w in dims.windows(2) {
            let layer = Layer {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            };
            offset = layer.end();
            layers.push(layer);
        }
        let n_heads = match cfg.heads {
            HeadMode::TwoHead => 2,
            HeadMode::SingleHead => 1,
        };
        let head_offset = offset;
        let total = head_offset + n_heads * (cfg.repr_dim + 1);
        let mut params = vec![0.0; total];
        let mut rng = cfg.seed.child(0x1417).rng();
        for layer in &layers {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for p in &mut params[layer.offset..layer.end()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        let bound = 1.0 / (cfg.repr_dim as f64).sqrt();
        for p in &mut params[head_offset..] {
            *p = rng.random_range(-bound..bound);
        }
        Ok(ReprNet {
            input_dim,
            repr_dim: cfg.repr_dim,
            heads: cfg.heads,
            layers,
            head_offset,
            params,
            epochs_run: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Dimension of the augmented representation `[trunk(x), 1]`.
    pub fn feature_dim(&self) -> usize {
        self.repr_dim + 1
    }

    pub fn head_mode(&self) -> HeadMode {
        self.heads
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Coefficients of head `g` over the augmented representation.
    pub fn head(&self, g: usize) -> &[f64] {
        let k = self.repr_dim + 1;
        let g = match self.heads {
            HeadMode::TwoHead => g.min(1),
            HeadMode::SingleHead => 0,
        };
        &self.params[self.head_offset + g * k..self.head_offset + (g + 1) * k]
    }

    /// `h1 - h0` in two-head mode, the single head otherwise.
    pub fn effect_head(&self) -> Vec<f64> {
        match self.heads {
            HeadMode::TwoHead => self
                .head(1)
                .iter()
                .zip(self.head(0))
                .map(|(a, b)| a - b)
                .collect(),
            HeadMode::SingleHead => self.head(0).to_vec(),
        }
    }

    fn forward(&self, params: &[f64], x: &[f64]) -> Trace {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &acts[l];
            let w = &params[layer.offset..layer.bias_offset()];
            let b = &params[layer.bias_offset()..layer.end()];
            let z: Vec<f64> = (0..layer.fan_out)
                .map(|o| {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            let a = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| elu(v)).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        Trace { acts, pre }
    }

    /// Augmented representation `[trunk(x), 1]`.
    pub fn representation(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = self
            .forward(&self.params, x)
            .acts
            .pop()
            .expect("trunk output");
        phi.push(1.0);
        phi
    }

    pub fn predict_head(&self, x: &[f64], g: usize) -> f64 {
        let phi = self.representation(x);
        dot(self.head(g), &phi)
    }

    /// Biased effect `(h1 - h0)^T phi(x)`.
    pub fn tau_obs(&self, x: &[f64]) -> f64 {
        dot(&self.effect_head(), &self.representation(x))
    }

    fn head_index(&self, group: u8) -> usize {
        match self.heads {
            HeadMode::TwoHead => group as usize,
            HeadMode::SingleHead => 0,
        }
    }

    /// Mean squared error over `rows` and its gradient in the flat parameters.
    fn loss_grad(
        &self,
        params: &[f64],
        x: &Covariates,
        group: &[u8],
        y: &[f64],
        rows: &[usize],
        grad: &mut [f64],
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let k = self.repr_dim + 1;
        let scale = 1.0 / rows.len() as f64;
        let mut loss = 0.0;
        let mut xi = Vec::with_capacity(self.input_dim);
        for &i in rows {
            x.row_into(i, &mut xi);
            let trace = self.forward(params, &xi);
            let rep = trace.acts.last().expect("trunk output");
            let h = self.head_index(group[i]);
            let head = self.head_offset + h * k;
            let out = params[head + self.repr_dim]
                + rep
                    .iter()
                    .zip(&params[head..head + self.repr_dim])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            let err = out - y[i];
            loss += err * err * scale;
            let d_out = 2.0 * err * scale;
            for (j, r) in rep.iter().enumerate() {
                grad[head + j] += d_out * r;
            }
            grad[head + self.repr_dim] += d_out;

            let mut delta: Vec<f64> = params[head..head + self.repr_dim]
                .iter()
                .map(|w| d_out * w)
                .collect();
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                if l + 1 < self.layers.len() {
                    for (d, &z) in delta.iter_mut().zip(&trace.pre[l]) {
                        *d *= elu_grad(z);
                    }
                }
                let input = &trace.acts[l];
                for o in 0..layer.fan_out {
                    let row = layer.offset + o * layer.fan_in;
                    for (c, &a) in input.iter().enumerate() {
                        grad[row + c] += delta[o] * a;
                    }
                    grad[layer.bias_offset() + o] += delta[o];
                }
                if l > 0 {
                    let mut back = vec![0.0; layer.fan_in];
                    for o in 0..layer.fan_out {
                        let row = &params[layer.offset + o * layer.fan_in
                            ..layer.offset + (o + 1) * layer.fan_in];
                        for (b, w) in back.iter_mut().zip(row) {
                            *b += delta[o] * w;
                        }
                    }
                    delta = back;
                }
            }
        }
        loss
    }

    /// Mean squared error over all rows and its analytic gradient at the current parameters.
    pub fn loss_and_grad(&self, x: &Covariates, group: &[u8], y: &[f64]) -> (f64, Vec<f64>) {
        let rows: Vec<usize> = (0..y.len()).collect();
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.loss_grad(&self.params, x, group, y, &rows, &mut grad);
        (loss, grad)
    }

    pub fn loss(&self, x: &Covariates, group: &[u8], y: &[f64]) -> f64 {
        let rows: Vec<usize> = (0..y.len()).collect();
        subset_loss(self, x, group, y, &rows)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn subset_loss(net: &ReprNet, x: &Covariates, group: &[u8], y: &[f64], rows: &[usize]) -> f64 {
    let k = net.repr_dim + 1;
    let mut xi = Vec::with_capacity(net.input_dim);
    let mut total = 0.0;
    for &i in rows {
        x.row_into(i, &mut xi);
        let phi = net.representation(&xi);
        let h = net.head_index(group[i]);
        let out = dot(
            &net.params[net.head_offset + h * k..net.head_offset + (h + 1) * k],
            &phi,
        );
        total += (out - y[i]).powi(2);
    }
    total / rows.len().max(1) as f64
}

/// Trains a representation network: head `group[i]` of `phi(x_i)` regresses `y_i`.
pub fn fit_repr_net(x: &Covariates, group: &[u8], y: &[f64], cfg: &NetConfig) -> Result<ReprNet> {
    let n = x.n_rows();
    if group.len() != n || y.len() != n {
        return Err(Error::invalid(format!(
            "network inputs disagree: {n} rows, {} groups, {} targets",
            group.len(),
            y.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("cannot train a network on zero rows"));
    }
    if group.iter().any(|&g| g > 1) {
        return Err(Error::invalid("group codes must be 0 or 1"));
    }
    let mut net = ReprNet::init(x.n_cols(), cfg)?;
    let mut rng = cfg.seed.child(0x7A41).rng();

    let mut order: Vec<usize> = (0..n).collect();
    let mut holdout = Vec::new();
    if let Some(frac) = cfg.validation_fraction {
        let n_val = ((n as f64) * frac).round() as usize;
        if n_val > 0 && n_val < n {
            order.shuffle(&mut rng);
            holdout = order.split_off(n - n_val);
            order.sort_unstable();
            holdout.sort_unstable();
        }
    }

    let p = net.params.len();
    let mut m = vec![0.0; p];
    let mut v = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut params = net.params.clone();
    let mut step = 0i32;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0usize;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let loss = net.loss_grad(&params, x, group, y, batch, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for j in 0..p {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
                params[j] *= 1.0 - cfg.learning_rate * cfg.weight_decay;
                params[j] -= cfg.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            }
        }
        epochs_run = epoch + 1;
        if !holdout.is_empty() {
            net.params.clone_from(&params);
            let val = subset_loss(&net, x, group, y, &holdout);
            if !val.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            match &best {
                Some((b, _)) if val >= *b => since_best += 1,
                _ => {
                    best = Some((val, params.clone()));
                    since_best = 0;
                }
            }
            if cfg.patience.is_some_and(|pat| since_best >= pat) {
                break;
            }
        }
    }
    net.params = match best {
        Some((_, p)) => p,
        None => params,
    };
    net.epochs_run = epochs_run;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_cfg(seed: u64) -> NetConfig {
        NetConfig {
            hidden_width: 4,
            depth: 3,
            repr_dim: 2,
            epochs: 0,
            ..NetConfig::simulation(RngStream::new(seed, 0))
        }
    }

    fn sample(n: usize, d: usize, seed: u64) -> (Covariates, Vec<u8>, Vec<f64>) {
        let mut rng = RngStream::new(seed, 5).rng();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let g: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let y: Vec<f64> = rows
            .iter()
            .zip(&g)
            .map(|(r, &g)| r[0] * r[0] + g as f64 * r[d - 1] + 0.3)
            .collect();
        (Covariates::from_rows(&rows).unwrap(), g, y)
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let (x, g, y) = sample(10, 3, 1);
        let net = ReprNet::init(3, &small_cfg(3)).unwrap();
        let (_, grad) = net.loss_and_grad(&x, &g, &y);
        let h = 1e-4;
        let mut worst = 0.0f64;
        for j in 0..net.params().len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut pp = net.params().to_vec();
            pp[j] += h;
            plus.set_params(pp).unwrap();
            let mut pm = net.params().to_vec();
            pm[j] -= h;
            minus.set_params(pm).unwrap();
            let fd = (plus.loss(&x, &g, &y) - minus.loss(&x, &g, &y)) / (2.0 * h);
            let rel = (fd - grad[j]).abs() / (fd.abs() + grad[j].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (x, g, y) = sample(20, 2, 2);
        let mut cfg = small_cfg(9);
        cfg.weight_decay = 0.0;
        let init = ReprNet::init(2, &cfg).unwrap();
        let fit = fit_repr_net(&x, &g, &y, &cfg).unwrap();
        assert_eq!(init.params(), fit.params());
    }

    #[test]
    fn learns_linear_target() {
        let mut rng = RngStream::new(4, 4).rng();
        let xs: Vec<f64> = (0..400).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        let x = Covariates::from_columns(vec![xs]).unwrap();
        let g = vec![0u8; 400];
        let cfg = NetConfig {
            hidden_width: 8,
            depth: 2,
            repr_dim: 2,
            weight_decay: 0.0,
            batch_size: 100,
            epochs: 300,
            ..NetConfig::simulation(RngStream::new(6, 0))
        };
        let net = fit_repr_net(&x, &g, &y, &cfg).unwrap();
        let mse = net.loss(&x, &g, &y);
        assert!(mse < 1e-2, "training mse {mse}");
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let (x, g, y) = sample(200, 2, 3);
        let cfg = NetConfig {
            epochs: 20,
            batch_size: 64,
            validation_fraction: Some(0.2),
            patience: Some(5),
            ..small_cfg(10)
        };
        let a = fit_repr_net(&x, &g, &y, &cfg).unwrap();
        let b = fit_repr_net(&x, &g, &y, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn tau_obs_is_head_difference() {
        let net = ReprNet::init(2, &small_cfg(12)).unwrap();
        let x = [0.3, -1.2];
        let direct = net.predict_head(&x, 1) - net.predict_head(&x, 0);
        assert!((net.tau_obs(&x) - direct).abs() < 1e-12);
        assert_eq!(net.representation(&x).len(), net.feature_dim());
    }

    #[test]
    fn divergence_is_reported() {
        let (x, g, _) = sample(30, 2, 4);
        let y = vec![1e300; 30];
        let cfg = NetConfig {
            epochs: 5,
            learning_rate: 1e6,
            ..small_cfg(1)
        };
        assert!(matches!(
            fit_repr_net(&x, &g, &y, &cfg),
            Err(Error::TrainingDiverged { .. })
        ));
    }
}
