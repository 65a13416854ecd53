//! Reverse-mode differentiation over stacks of dense affine layers with
//! ReLU or identity activations.
//!
//! A [`Session`] owns the activation cache for one `(network, batch)` pair.
//! Any number of sessions may borrow the same frozen [`EncoderNetwork`];
//! parameter updates need `&mut EncoderNetwork` and therefore exclusive
//! access.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::RepresentationLoss;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if !weight.is_matrix() {
            return Err(Error::Shape("layer weight must be a matrix".into()));
        }
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// `H(x) = h_L(...h_1(x))`: the encoder mapping inputs to representations.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNetwork {
    layers: Vec<Layer>,
}

impl EncoderNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let last = layers.last().ok_or_else(|| Error::InvalidArgument("no layers".into()))?;
        if last.activation != Activation::Linear {
            return Err(Error::InvalidArgument("final layer must be linear".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Seeded scaled-uniform initialisation, `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))` and zero biases. Hidden layers use
    /// ReLU, the last layer is linear.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
                let act = if i + 1 == n { Activation::Linear } else { Activation::Relu };
                Layer::new(
                    Tensor::from_parts(vec![fan_out, fan_in], data),
                    Tensor::zeros(vec![fan_out]),
                    act,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable views of every parameter block in layer order
    /// (`w_0, b_0, w_1, b_1, ...`).
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.data_mut());
        }
        out
    }

    pub fn session(&self) -> Session<'_> {
        Session { net: self, cache: None }
    }

    /// Forward pass without retaining activations.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let b = batch.rows();
        let mut cur = batch.data().to_vec();
        for layer in &self.layers {
            cur = affine(layer, &cur, b);
            if layer.activation == Activation::Relu {
                cur.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(Tensor::from_parts(vec![b, self.output_dim()], cur))
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        batch.check_finite("network input")
    }
}

fn affine(layer: &Layer, input: &[f64], b: usize) -> Vec<f64> {
    let (n_in, n_out) = (layer.in_dim(), layer.out_dim());
    let mut out = matmul_nt(input, b, n_in, layer.weight.data(), n_out);
    let bias = layer.bias.data();
    for row in out.chunks_exact_mut(n_out) {
        row.iter_mut().zip(bias).for_each(|(v, bi)| *v += bi);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub param_grads: Vec<LayerGrad>,
    pub input_grad: Tensor,
}

impl GradientBundle {
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        self.param_grads.iter().flat_map(|g| [g.weight.data(), g.bias.data()]).collect()
    }
}

#[derive(Debug)]
struct Cache {
    input: Tensor,
    /// Pre-activation outputs of every layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation outputs of every layer.
    post: Vec<Vec<f64>>,
}

/// A single-threaded evaluation session holding the activations of its last
/// forward pass.
#[derive(Debug)]
pub struct Session<'a> {
    net: &'a EncoderNetwork,
    cache: Option<Cache>,
}

impl Session<'_> {
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.net.check_input(batch)?;
        let b = batch.rows();
        let mut pre = Vec::with_capacity(self.net.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.net.layers.len());
        for layer in &self.net.layers {
            let input = post.last().map_or(batch.data(), Vec::as_slice);
            let z = affine(layer, input, b);
            let a = match layer.activation {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::Linear => z.clone(),
            };
            pre.push(z);
            post.push(a);
        }
        let out = Tensor::from_parts(vec![b, self.net.output_dim()], post.last().unwrap().clone());
        self.cache = Some(Cache { input: batch.clone(), pre, post });
        Ok(out)
    }

    /// The on/off pattern of every ReLU unit in the cached pass.
    pub fn relu_pattern(&self) -> Option<Vec<bool>> {
        let cache = self.cache.as_ref()?;
        Some(
            self.net
                .layers
                .iter()
                .zip(&cache.pre)
                .filter(|(l, _)| l.activation == Activation::Relu)
                .flat_map(|(_, z)| z.iter().map(|&v| v > 0.0))
                .collect(),
        )
    }

    /// Gradients of `sum(upstream * output)` with respect to every parameter
    /// and the input.
    pub fn backward(&self, upstream: &Tensor) -> Result<GradientBundle> {
        self.backprop(upstream, true)
    }

    /// Input gradient only; skips the parameter outer products.
    pub fn backward_input(&self, upstream: &Tensor) -> Result<Tensor> {
        Ok(self.backprop(upstream, false)?.input_grad)
    }

    fn backprop(&self, upstream: &Tensor, with_params: bool) -> Result<GradientBundle> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForward)?;
        let b = cache.input.rows();
        if upstream.rows() != b || upstream.cols() != self.net.output_dim() {
            return Err(Error::Shape(format!(
                "upstream is {}x{}, output is {}x{}",
                upstream.rows(),
                upstream.cols(),
                b,
                self.net.output_dim()
            )));
        }
        upstream.check_finite("upstream gradient")?;

        let layers = &self.net.layers;
        let mut grads = Vec::with_capacity(if with_params { layers.len() } else { 0 });
        let mut delta = upstream.data().to_vec();
        for i in (0..layers.len()).rev() {
            let layer = &layers[i];
            let (n_in, n_out) = (layer.in_dim(), layer.out_dim());
            if layer.activation == Activation::Relu {
                // subgradient 0 at the kink
                for (d, z) in delta.iter_mut().zip(&cache.pre[i]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = if i == 0 { cache.input.data() } else { cache.post[i - 1].as_slice() };
            if with_params {
                let gw = matmul_tn(&delta, b, n_out, input, n_in);
                let mut gb = vec![0.0; n_out];
                for row in delta.chunks_exact(n_out) {
                    gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
                grads.push(LayerGrad {
                    weight: Tensor::from_parts(vec![n_out, n_in], gw),
                    bias: Tensor::from_parts(vec![n_out], gb),
                });
            }
            delta = matmul_nn(&delta, b, n_out, layer.weight.data(), n_in);
        }
        grads.reverse();
        Ok(GradientBundle {
            param_grads: grads,
            input_grad: Tensor::from_parts(cache.input.shape().to_vec(), delta),
        })
    }
}

/// Analytic gradients of `loss(H(batch))` with respect to parameters and
/// input.
pub fn loss_gradients(
    net: &EncoderNetwork,
    batch: &Tensor,
    loss: &RepresentationLoss,
) -> Result<(f64, GradientBundle)> {
    let mut s = net.session();
    let z = s.forward(batch)?;
    let value = loss.value(&z)?;
    let upstream = loss.gradient(&z)?;
    Ok((value, s.backward(&upstream)?))
}

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-8;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < FD_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// over every input and parameter coordinate. Coordinates whose `±h` probes
/// change any ReLU on/off state are kink coordinates and are skipped.
pub fn finite_diff_check(
    net: &EncoderNetwork,
    batch: &Tensor,
    loss: &RepresentationLoss,
) -> Result<f64> {
    let mut base = net.session();
    base.forward(batch)?;
    let pattern = base.relu_pattern().unwrap_or_default();
    let (_, grads) = loss_gradients(net, batch, loss)?;

    let probe = |net: &EncoderNetwork, x: &Tensor| -> Result<(f64, Vec<bool>)> {
        let mut s = net.session();
        let z = s.forward(x)?;
        Ok((loss.value(&z)?, s.relu_pattern().unwrap_or_default()))
    };

    let mut worst = 0.0_f64;
    let mut x = batch.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let (fp, pp) = probe(net, &x)?;
        x.data_mut()[i] = orig - FD_STEP;
        let (fm, pm) = probe(net, &x)?;
        x.data_mut()[i] = orig;
        if pp != pattern || pm != pattern {
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grads.input_grad.data()[i], numeric));
    }

    let analytic: Vec<f64> = grads.param_blocks().concat();
    let mut perturbed = net.clone();
    let mut flat = 0;
    let n_blocks = 2 * net.layers.len();
    for block in 0..n_blocks {
        let len = perturbed.param_blocks_mut()[block].len();
        for j in 0..len {
            let orig = perturbed.param_blocks_mut()[block][j];
            perturbed.param_blocks_mut()[block][j] = orig + FD_STEP;
            let (fp, pp) = probe(&perturbed, batch)?;
            perturbed.param_blocks_mut()[block][j] = orig - FD_STEP;
            let (fm, pm) = probe(&perturbed, batch)?;
            perturbed.param_blocks_mut()[block][j] = orig;
            if pp == pattern && pm == pattern {
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(analytic[flat], numeric));
            }
            flat += 1;
        }
    }
    Ok(worst)
}
