//! Noise-prediction network: a small tanh MLP with a learned skip connection
//! from the noisy input to the output, plus sinusoidal timestep features and
//! an optional class-embedding table.
//!
//! Forward and backward passes are written out by hand against the flat
//! parameter vector, which is what makes exact per-sample gradients cheap:
//! one backward pass per sample yields that sample's full gradient row.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamLayout, ParamVector};

/// Optional class-conditioning table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEmbedSpec {
    pub num_classes: usize,
    pub dim: usize,
}

/// Architecture description; fully determines the parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    /// Data dimension d (input and output).
    pub input_dim: usize,
    /// Hidden layer widths; may be empty for a purely linear model.
    pub hidden: Vec<usize>,
    /// Sinusoidal timestep feature count (must be even).
    pub time_embed_dim: usize,
    pub class_embed: Option<ClassEmbedSpec>,
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be a positive even number, got {}",
                self.time_embed_dim
            )));
        }
        if let Some(h) = self.hidden.iter().find(|&&h| h == 0) {
            return Err(Error::Config(format!("hidden width must be positive, got {}", h)));
        }
        if let Some(ce) = &self.class_embed {
            if ce.num_classes == 0 || ce.dim == 0 {
                return Err(Error::Config(
                    "class embedding needs positive num_classes and dim".into(),
                ));
            }
        }
        Ok(())
    }

    /// Width of the concatenated input: data + time features + class features.
    pub fn concat_dim(&self) -> usize {
        self.input_dim + self.time_embed_dim + self.class_embed.as_ref().map_or(0, |c| c.dim)
    }

    pub fn layout(&self) -> Arc<ParamLayout> {
        let mut shapes: Vec<(String, (usize, usize))> = Vec::new();
        let mut fan_in = self.concat_dim();
        for (i, &h) in self.hidden.iter().enumerate() {
            shapes.push((format!("layer{}.weight", i), (h, fan_in)));
            shapes.push((format!("layer{}.bias", i), (h, 1)));
            fan_in = h;
        }
        shapes.push(("out.weight".into(), (self.input_dim, fan_in)));
        shapes.push(("out.bias".into(), (self.input_dim, 1)));
        shapes.push(("skip.gain".into(), (1, 1)));
        if let Some(ce) = &self.class_embed {
            shapes.push(("class_embed.table".into(), (ce.num_classes, ce.dim)));
        }
        let refs: Vec<(&str, (usize, usize))> =
            shapes.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        Arc::new(ParamLayout::new(&refs))
    }
}

/// Anything that maps (noisy point, timestep, optional class) to predicted
/// noise; samplers and evaluation code are generic over this.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &[f64], t: usize, y: Option<usize>) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
}

/// Activations saved by `forward` for the matching `backward` call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Concatenated input [x_t, time features, class features].
    input: Vec<f64>,
    /// Post-tanh activations per hidden layer.
    hidden: Vec<Vec<f64>>,
    y: Option<usize>,
}

/// The denoiser network: flat parameters plus the shape that interprets them.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    shape: NetShape,
    params: ParamVector,
}

impl DenoiserNet {
    /// Random initialization: weights uniform in ±1/sqrt(fan_in), biases zero,
    /// skip gain 1. Draw order is fixed by layer order, so one seed gives one
    /// network.
    pub fn new(shape: NetShape, rng: &mut ChaCha12Rng) -> Result<Self> {
        shape.validate()?;
        let layout = shape.layout();
        let mut params = ParamVector::zeros(layout.clone());
        for spec in layout.layers() {
            let name = spec.name.clone();
            let (rows, cols) = spec.shape;
            if name.ends_with(".bias") {
                continue; // already zero
            }
            if name == "skip.gain" {
                params.layer_mut(&name)?[0] = 1.0;
                continue;
            }
            let bound = 1.0 / (cols as f64).sqrt();
            let slice = params.layer_mut(&name)?;
            for k in 0..rows * cols {
                slice[k] = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { shape, params })
    }

    /// Wraps existing parameters; the vector must match the shape's layout.
    pub fn from_params(shape: NetShape, params: ParamVector) -> Result<Self> {
        shape.validate()?;
        let expected = shape.layout();
        if params.layout().as_ref() != expected.as_ref() {
            return Err(Error::Structural(
                "parameter layout does not match network shape".into(),
            ));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Sinusoidal timestep features: sin(t*w_i) then cos(t*w_i) with
    /// geometrically spaced frequencies from 1 down to 1e-4.
    fn time_features(&self, t: usize, out: &mut [f64]) {
        let half = self.shape.time_embed_dim / 2;
        let tf = t as f64;
        for i in 0..half {
            let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            let w = (10_000.0_f64).powf(-exponent);
            out[i] = (tf * w).sin();
            out[half + i] = (tf * w).cos();
        }
    }

    fn build_input(&self, x_t: &[f64], t: usize, y: Option<usize>) -> Result<Vec<f64>> {
        let d = self.shape.input_dim;
        if x_t.len() != d {
            return Err(Error::Structural(format!(
                "input has dimension {}, network expects {}",
                x_t.len(),
                d
            )));
        }
        let mut input = vec![0.0; self.shape.concat_dim()];
        input[..d].copy_from_slice(x_t);
        self.time_features(t, &mut input[d..d + self.shape.time_embed_dim]);
        match (&self.shape.class_embed, y) {
            (Some(ce), Some(label)) => {
                if label >= ce.num_classes {
                    return Err(Error::Structural(format!(
                        "class label {} out of range (num_classes {})",
                        label, ce.num_classes
                    )));
                }
                let table = self.params.layer("class_embed.table")?;
                let base = d + self.shape.time_embed_dim;
                input[base..base + ce.dim]
                    .copy_from_slice(&table[label * ce.dim..(label + 1) * ce.dim]);
            }
            (Some(_), None) => {} // unconditional pass: class features stay zero
            (None, Some(_)) => {
                return Err(Error::Structural(
                    "class label given but network has no class embedding".into(),
                ));
            }
            (None, None) => {}
        }
        Ok(input)
    }

    /// Forward pass; returns the noise prediction and the activation cache
    /// needed by `backward`.
    pub fn forward(&self, x_t: &[f64], t: usize, y: Option<usize>) -> Result<(Vec<f64>, ForwardCache)> {
        let input = self.build_input(x_t, t, y)?;
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.shape.hidden.len());
        let mut cur: &[f64] = &input;
        for i in 0..self.shape.hidden.len() {
            let w = self.params.layer(&format!("layer{}.weight", i))?;
            let b = self.params.layer(&format!("layer{}.bias", i))?;
            let rows = self.shape.hidden[i];
            let cols = cur.len();
            let mut h = vec![0.0; rows];
            for r in 0..rows {
                let mut z = b[r];
                let wr = &w[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    z += wr[c] * cur[c];
                }
                h[r] = z.tanh();
            }
            hidden.push(h);
            cur = hidden.last().unwrap();
        }

        let w_out = self.params.layer("out.weight")?;
        let b_out = self.params.layer("out.bias")?;
        let gain = self.params.layer("skip.gain")?[0];
        let d = self.shape.input_dim;
        let cols = cur.len();
        let mut eps = vec![0.0; d];
        for r in 0..d {
            let mut z = b_out[r];
            let wr = &w_out[r * cols..(r + 1) * cols];
            for c in 0..cols {
                z += wr[c] * cur[c];
            }
            eps[r] = z + gain * x_t[r];
        }
        Ok((eps, ForwardCache { input, hidden, y }))
    }

    /// Accumulates `weight * dL/dtheta` into `grad`, given the upstream
    /// derivative `d_eps = dL/d eps_hat` for the sample that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache, d_eps: &[f64], weight: f64, grad: &mut ParamVector) -> Result<()> {
        let d = self.shape.input_dim;
        debug_assert_eq!(d_eps.len(), d);
        let x_t = &cache.input[..d];
        let last: &[f64] = cache.hidden.last().map_or(&cache.input, |h| h);

        // Output layer and skip path.
        {
            let gain_grad: f64 = (0..d).map(|r| d_eps[r] * x_t[r]).sum();
            grad.layer_mut("skip.gain")?[0] += weight * gain_grad;
        }
        {
            let gb = grad.layer_mut("out.bias")?;
            for r in 0..d {
                gb[r] += weight * d_eps[r];
            }
        }
        let cols = last.len();
        {
            let gw = grad.layer_mut("out.weight")?;
            for r in 0..d {
                let row = &mut gw[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    row[c] += weight * d_eps[r] * last[c];
                }
            }
        }

        // Pull the derivative back through the output weights.
        let w_out = self.params.layer("out.weight")?;
        let mut delta = vec![0.0; cols];
        for c in 0..cols {
            let mut acc = 0.0;
            for r in 0..d {
                acc += w_out[r * cols + c] * d_eps[r];
            }
            delta[c] = acc;
        }

        // Hidden layers, deepest first.
        for i in (0..self.shape.hidden.len()).rev() {
            let h = &cache.hidden[i];
            // tanh'(z) = 1 - h^2
            for (dv, hv) in delta.iter_mut().zip(h.iter()) {
                *dv *= 1.0 - hv * hv;
            }
            let below: &[f64] = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
            let cols = below.len();
            {
                let gb = grad.layer_mut(&format!("layer{}.bias", i))?;
                for r in 0..delta.len() {
                    gb[r] += weight * delta[r];
                }
            }
            {
                let gw = grad.layer_mut(&format!("layer{}.weight", i))?;
                for r in 0..delta.len() {
                    let row = &mut gw[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        row[c] += weight * delta[r] * below[c];
                    }
                }
            }
            let w = self.params.layer(&format!("layer{}.weight", i))?;
            let mut next = vec![0.0; cols];
            for c in 0..cols {
                let mut acc = 0.0;
                for r in 0..delta.len() {
                    acc += w[r * cols + c] * delta[r];
                }
                next[c] = acc;
            }
            delta = next;
        }

        // Whatever reached the class-feature slice of the input belongs to the
        // embedding row that was looked up.
        if let (Some(ce), Some(label)) = (&self.shape.class_embed, cache.y) {
            let base = d + self.shape.time_embed_dim;
            let gt = grad.layer_mut("class_embed.table")?;
            for k in 0..ce.dim {
                gt[label * ce.dim + k] += weight * delta[base + k];
            }
        }
        Ok(())
    }

    /// Full gradient for a single sample (weight 1).
    pub fn per_sample_grad(&self, cache: &ForwardCache, d_eps: &[f64]) -> Result<ParamVector> {
        let mut g = ParamVector::zeros(self.params.layout().clone());
        self.backward(cache, d_eps, 1.0, &mut g)?;
        Ok(g)
    }
}

impl NoisePredictor for DenoiserNet {
    fn predict_noise(&self, x_t: &[f64], t: usize, y: Option<usize>) -> Result<Vec<f64>> {
        Ok(self.forward(x_t, t, y)?.0)
    }

    fn dim(&self) -> usize {
        self.shape.input_dim
    }
}

/// Central-difference gradient of an arbitrary scalar loss over the flat
/// parameter vector. Slow (two evaluations per parameter); test oracle only.
pub fn finite_difference_gradient<F>(params: &ParamVector, mut loss: F, h: f64) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    let mut work = params.clone();
    let mut grad = ParamVector::zeros(params.layout().clone());
    for k in 0..params.len() {
        let orig = work.values[k];
        work.values[k] = orig + h;
        let plus = loss(&work)?;
        work.values[k] = orig - h;
        let minus = loss(&work)?;
        work.values[k] = orig;
        grad.values[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst-case relative disagreement max_k |a_k - b_k| / (|b_k| + eps),
/// with `b` as the reference.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut worst = 0.0_f64;
    for k in 0..a.len() {
        let rel = (a.values[k] - b.values[k]).abs() / (b.values[k].abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamSeeder;

    fn small_shape() -> NetShape {
        NetShape {
            input_dim: 2,
            hidden: vec![5, 4],
            time_embed_dim: 4,
            class_embed: Some(ClassEmbedSpec { num_classes: 3, dim: 2 }),
        }
    }

    #[test]
    fn layout_covers_expected_parameter_count() {
        let shape = small_shape();
        // concat = 2 + 4 + 2 = 8
        // layer0: 5*8 + 5 = 45; layer1: 4*5 + 4 = 24; out: 2*4 + 2 = 10
        // skip: 1; table: 3*2 = 6   => 86
        assert_eq!(shape.layout().total_len(), 86);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let seeder = StreamSeeder::new(7);
        let a = DenoiserNet::new(small_shape(), &mut seeder.stream("init/net")).unwrap();
        let b = DenoiserNet::new(small_shape(), &mut seeder.stream("init/net")).unwrap();
        assert_eq!(a.params().values, b.params().values);
        let c = DenoiserNet::new(small_shape(), &mut StreamSeeder::new(8).stream("init/net")).unwrap();
        assert_ne!(a.params().values, c.params().values);
    }

    #[test]
    fn linear_net_is_exactly_skip_plus_bias() {
        // No hidden layers and zero output weights: eps_hat = b_out + gain * x_t.
        let shape = NetShape {
            input_dim: 2,
            hidden: vec![],
            time_embed_dim: 2,
            class_embed: None,
        };
        let layout = shape.layout();
        let mut params = ParamVector::zeros(layout);
        params.layer_mut("out.bias").unwrap().copy_from_slice(&[0.25, -1.5]);
        params.layer_mut("skip.gain").unwrap()[0] = 2.0;
        let net = DenoiserNet::from_params(shape, params).unwrap();
        let (eps, _) = net.forward(&[1.0, 3.0], 17, None).unwrap();
        assert_eq!(eps, vec![0.25 + 2.0, -1.5 + 6.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let shape = small_shape();
        let seeder = StreamSeeder::new(42);
        let net = DenoiserNet::new(shape.clone(), &mut seeder.stream("init/net")).unwrap();
        let x_t = [0.3, -0.7];
        let target = [0.1, 0.4];
        let t = 13;
        let y = Some(1);

        // L = 0.5 || eps_hat - target ||^2, so dL/d eps_hat = eps_hat - target.
        let (eps, cache) = net.forward(&x_t, t, y).unwrap();
        let d_eps: Vec<f64> = eps.iter().zip(&target).map(|(e, c)| e - c).collect();
        let analytic = net.per_sample_grad(&cache, &d_eps).unwrap();

        let fd = finite_difference_gradient(
            net.params(),
            |p| {
                let candidate = DenoiserNet::from_params(shape.clone(), p.clone())?;
                let (eps, _) = candidate.forward(&x_t, t, y)?;
                Ok(0.5 * eps.iter().zip(&target).map(|(e, c)| (e - c) * (e - c)).sum::<f64>())
            },
            1e-5,
        )
        .unwrap();

        assert!(max_relative_error(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn unconditional_pass_ignores_embedding_table() {
        let shape = small_shape();
        let seeder = StreamSeeder::new(3);
        let net = DenoiserNet::new(shape, &mut seeder.stream("init/net")).unwrap();
        let (eps, cache) = net.forward(&[0.5, 0.5], 10, None).unwrap();
        // Gradient should leave the table untouched.
        let g = net.per_sample_grad(&cache, &vec![1.0; eps.len()]).unwrap();
        assert!(g.layer("class_embed.table").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let shape = small_shape();
        let seeder = StreamSeeder::new(3);
        let net = DenoiserNet::new(shape, &mut seeder.stream("init/net")).unwrap();
        assert!(net.forward(&[0.0, 0.0], 1, Some(3)).is_err());
    }

    #[test]
    fn odd_time_embed_dim_is_rejected() {
        let shape = NetShape { input_dim: 2, hidden: vec![4], time_embed_dim: 3, class_embed: None };
        assert!(shape.validate().is_err());
    }
}
