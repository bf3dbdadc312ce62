//! Small MLP generator/discriminator models, optimizers, and checkpoints.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Real, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{contract, Error, Result};
use crate::protocol::DecodeError;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LinearLayer<T> {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![outputs, inputs]).with_grad(),
            bias: Tensor::zeros(vec![outputs]).with_grad(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Layer widths and hidden-layer behaviour of an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpShape {
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Dropout applied after every hidden activation; 0 disables it.
    pub dropout: f64,
}

/// Multi-layer perceptron with leaky-ReLU hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real = f32> {
    shape: MlpShape,
    layers: Vec<LinearLayer<T>>,
}

/// Graph handles for an MLP's parameters, in `weight, bias` order per layer.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Swaps in another handle for parameter `index`, for example a leaf
    /// whose gradient is being checked.
    pub fn set(&mut self, index: usize, var: Var) {
        self.vars[index] = var;
    }
}

impl<T: Real> Mlp<T> {
    pub fn new(shape: MlpShape) -> Result<Self> {
        if shape.widths.len() < 2 || shape.widths.contains(&0) {
            return Err(contract(format!("invalid MLP widths {:?}", shape.widths)));
        }
        if !(0.0..1.0).contains(&shape.dropout) {
            return Err(contract(format!("dropout rate {} outside [0, 1)", shape.dropout)));
        }
        let layers = shape.widths.windows(2).map(|w| LinearLayer::new(w[0], w[1])).collect();
        Ok(Self { shape, layers })
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn layers(&self) -> &[LinearLayer<T>] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.shape.widths[0]
    }

    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let bound = (1.0 / layer.fan_in() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = T::cast_from(rng.random_range(-bound..=bound));
            }
            layer.bias.data_mut().iter_mut().for_each(|b| *b = T::zero());
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Registers the parameters on `g`. Frozen parameters become constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params()
            .map(|p| {
                if trainable && p.requires_grad() {
                    g.leaf(p)
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        input: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let last = self.layers.len() - 1;
        let slope = T::cast_from(self.shape.leaky_slope);
        let mut h = input;
        for (i, pair) in params.vars.chunks_exact(2).enumerate() {
            h = g.linear(h, pair[0], pair[1])?;
            if i < last {
                h = g.leaky_relu(h, slope)?;
                if self.shape.dropout > 0.0 {
                    h = g.dropout(h, self.shape.dropout, rng)?;
                }
            }
        }
        Ok(h)
    }

    /// Copies leaf gradients from a backward pass into the parameter slots.
    pub fn store_grads(&mut self, params: &BoundParams, grads: &mut Gradients<T>) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&params.vars) {
            if let Some(gr) = grads.take(v) {
                p.set_grad(gr)?;
            }
        }
        Ok(())
    }

    /// Adds `scale * grad` into the parameter slots, creating them if absent.
    pub fn accumulate_grads(&mut self, params: &BoundParams, grads: &mut Gradients<T>, scale: T) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&params.vars) {
            if let Some(gr) = grads.take(v) {
                let acc = match p.take_grad() {
                    Some(mut acc) => {
                        acc.iter_mut().zip(&gr).for_each(|(a, &b)| *a += scale * b);
                        acc
                    }
                    None => gr.into_iter().map(|b| scale * b).collect(),
                };
                p.set_grad(acc)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            shape: self.shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LinearLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &l.weight),
                    (format!("{prefix}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    /// Overwrites parameters from `(name, tensor)` pairs produced by [`Mlp::named_params`].
    pub fn load_named(&mut self, prefix: &str, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let names: Vec<String> = self.named_params(prefix).into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(self.params_mut()) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| contract(format!("checkpoint has no tensor {name}")))?;
            if t.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load checkpoint",
                    left: p.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Conditional generator: one-hot auxiliary variable in, sample out.
/// Stochasticity comes only from dropout, which stays active when sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet<T: Real = f32> {
    pub mlp: Mlp<T>,
}

impl<T: Real> GeneratorNet<T> {
    pub fn new(components: usize, hidden: &[usize], dropout: f64) -> Result<Self> {
        if dropout <= 0.0 {
            return Err(contract("generator needs a positive dropout rate as its noise source"));
        }
        let mut widths = vec![components];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self {
            mlp: Mlp::new(MlpShape {
                widths,
                leaky_slope: DEFAULT_LEAKY_SLOPE,
                dropout,
            })?,
        })
    }

    /// Default generator: `K → 64 → 64 → 1`, dropout 0.5 on both hidden layers.
    pub fn default_for(components: usize) -> Self {
        Self::new(components, &[64, 64], 0.5).expect("valid default shape")
    }

    pub fn components(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        aux: Var,
        rng: &mut R,
    ) -> Result<Var> {
        self.mlp.forward(g, params, aux, rng)
    }

    /// Draws one sample per row of `aux` without recording gradients.
    pub fn sample<R: Rng + ?Sized>(&self, aux: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.mlp.bind(&mut g, false);
        let x = g.constant(aux.clone());
        let y = self.forward(&mut g, &params, x, rng)?;
        Ok(g.value(y).clone())
    }
}

/// Conditional discriminator: `(y, one-hot x)` in, raw logit out.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet<T: Real = f32> {
    pub mlp: Mlp<T>,
}

impl<T: Real> DiscriminatorNet<T> {
    pub fn new(components: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = vec![1 + components];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self {
            mlp: Mlp::new(MlpShape {
                widths,
                leaky_slope: DEFAULT_LEAKY_SLOPE,
                dropout: 0.0,
            })?,
        })
    }

    /// Default discriminator: `(1 + K) → 64 → 64 → 1`.
    pub fn default_for(components: usize) -> Self {
        Self::new(components, &[64, 64]).expect("valid default shape")
    }

    /// Logits `[m, 1]` for samples `y: [m, 1]` under conditions `x: [m, K]`.
    pub fn forward(&self, g: &mut Graph<T>, params: &BoundParams, y: Var, x: Var) -> Result<Var> {
        let input = g.concat(&[y, x])?;
        // The discriminator has no dropout, so the RNG is never drawn from.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.mlp.forward(g, params, input, &mut unused)
    }

    pub fn cast<U: Real>(&self) -> DiscriminatorNet<U> {
        DiscriminatorNet { mlp: self.mlp.cast() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { lr: f64, momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state. Buffers are created on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update using each parameter's stored gradient.
    pub fn step<T: Real>(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(contract(format!("parameter {i} has no gradient")));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(b, p)| b.len() != p.len()) {
            return Err(contract("optimizer buffers do not match the parameter list"));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (i, p) in params.iter_mut().enumerate() {
                    let grad: Vec<f64> = p.grad().unwrap().iter().map(|g| g.as_f64()).collect();
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grad[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *w = T::cast_from(w.as_f64() - lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
            OptimizerKind::SgdMomentum { lr, momentum } => {
                for (i, p) in params.iter_mut().enumerate() {
                    let grad: Vec<f64> = p.grad().unwrap().iter().map(|g| g.as_f64()).collect();
                    let v = &mut self.first[i];
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        v[j] = momentum * v[j] + grad[j];
                        *w = T::cast_from(w.as_f64() - lr * v[j]);
                    }
                }
            }
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ADGN";
const CHECKPOINT_VERSION: u8 = 1;

/// Writes named `f32` tensors in the `ADGN` v1 checkpoint layout.
pub fn write_checkpoint<W: Write>(out: &mut W, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&[CHECKPOINT_VERSION])?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name = name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| contract("tensor name too long"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name)?;
        let ndim = u8::try_from(t.shape().len()).map_err(|_| contract("too many dimensions"))?;
        out.write_all(&[ndim])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(DecodeError::BadMagic.into());
    }
    let version = cur.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(DecodeError::UnknownVersion(version).into());
    }
    let count = cur.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| contract("tensor name is not UTF-8"))?;
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n.checked_mul(4).ok_or(DecodeError::Truncated)?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DecodeError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
