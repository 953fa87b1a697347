//! Small dense networks with exact reverse-mode gradients.
//!
//! Rows of a batch matrix are samples. Layer weights are stored `(out, in)`.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Softmax,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        };
        f.write_str(tag)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "softmax" => Ok(Activation::Softmax),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::WeightFormat(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    fn apply(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut z = input.dot(&self.weights.t());
        z += &self.bias;
        match self.activation {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
            Activation::Softmax => {
                for mut row in z.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
            }
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (w, b) in &mut self.layers {
            *w *= k;
            *b *= k;
        }
    }

    /// Flattened in the same order as [`Mlp::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

/// Layer inputs/outputs kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    pub activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Mlp> {
        let mut net = Mlp::zeros(dims, activations)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.weights.ncols() as f64).sqrt();
            layer.weights.mapv_inplace(|_| rng.random_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Mlp> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::ArchitectureMismatch(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ArchitectureMismatch("zero-width layer".into()));
        }
        if activations[..activations.len() - 1].contains(&Activation::Softmax) {
            return Err(Error::ArchitectureMismatch("softmax is only allowed on the output layer".into()));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
                activation,
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Mlp> {
        for pair in layers.windows(2) {
            if pair[0].weights.nrows() != pair[1].weights.ncols() {
                return Err(Error::ArchitectureMismatch("layer dims do not chain".into()));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weights.nrows()));
        d
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Mutable access to the `i`-th parameter in [`Mlp::flat_params`] order.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weights.len();
            if i < nw {
                return l.weights.iter_mut().nth(i).expect("index in range");
            }
            i -= nw;
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            Err(Error::DimensionMismatch { expected: self.input_dim(), got: cols })
        } else {
            Ok(())
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let input = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(input)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut h = self.layers[0].apply(x);
        for layer in &self.layers[1..] {
            h = layer.apply(h.view());
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(x.ncols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.layers {
            let next = layer.apply(activations.last().expect("non-empty").view());
            activations.push(next);
        }
        Ok(ForwardCache { activations })
    }

    /// Gradients of `sum(output * upstream)` w.r.t. parameters and input,
    /// summed over the batch.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::DimensionMismatch { expected: out.ncols(), got: upstream.ncols() });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.activations[l + 1];
            match layer.activation {
                Activation::Identity => {}
                Activation::Relu => Zip::from(&mut delta).and(y).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }),
                Activation::Tanh => Zip::from(&mut delta).and(y).for_each(|d, &v| *d *= 1.0 - v * v),
                Activation::Softmax => {
                    for (mut drow, yrow) in delta.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.dot(&yrow);
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &p| *d = p * (*d - dot));
                    }
                }
            }
            let input = &cache.activations[l];
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            grads.push((gw, gb));
            delta = delta.dot(&layer.weights);
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Single-sample convenience wrapper around [`Mlp::backward`].
    pub fn gradients(&self, x: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        self.check_input(x.len())?;
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: upstream.len() });
        }
        let xin = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let cache = self.forward_cached(xin)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        let (g, dx) = self.backward(&cache, up)?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }

    fn same_architecture(&self, other: &Mlp) -> bool {
        self.dims() == other.dims() && self.activations() == other.activations()
    }

    /// Write the `MLP1` text header followed by little-endian `f64` parameters.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        let acts: Vec<String> = self.activations().iter().map(|a| a.to_string()).collect();
        writeln!(w, "MLP1 {} {}", dims.join(" "), acts.join(" "))?;
        for v in self.flat_params() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Mlp> {
        let mut reader = BufReader::new(r);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("MLP1") {
            return Err(Error::WeightFormat("missing MLP1 magic".into()));
        }
        let tokens: Vec<&str> = tokens.collect();
        let n_dims = tokens.iter().take_while(|t| t.parse::<usize>().is_ok()).count();
        let dims: Vec<usize> = tokens[..n_dims].iter().map(|t| t.parse().expect("checked")).collect();
        let acts = tokens[n_dims..].iter().map(|t| t.parse()).collect::<Result<Vec<Activation>>>()?;
        let mut net = Mlp::zeros(&dims, &acts)?;
        let mut buf = [0u8; 8];
        for i in 0..net.param_count() {
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::WeightFormat(format!("truncated at parameter {i}")))?;
            *net.param_mut(i) = f64::from_le_bytes(buf);
        }
        if reader.read(&mut buf)? != 0 {
            return Err(Error::WeightFormat("trailing bytes".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Mlp> {
        Mlp::read_from(std::fs::File::open(path)?)
    }
}

/// `target <- rho * source + (1 - rho) * target`, parameter-wise.
pub fn soft_update(target: &mut Mlp, source: &Mlp, rho: f64) -> Result<()> {
    if !target.same_architecture(source) {
        return Err(Error::ArchitectureMismatch(format!("{:?} vs {:?}", target.dims(), source.dims())));
    }
    for (t, s) in target.layers.iter_mut().zip(&source.layers) {
        Zip::from(&mut t.weights).and(&s.weights).for_each(|a, &b| *a = rho * b + (1.0 - rho) * *a);
        Zip::from(&mut t.bias).and(&s.bias).for_each(|a, &b| *a = rho * b + (1.0 - rho) * *a);
    }
    Ok(())
}

/// Adam state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::ArchitectureMismatch("gradient layer count".into()));
        }
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            if layer.weights.dim() != gw.dim() || layer.bias.dim() != gb.dim() {
                return Err(Error::ArchitectureMismatch("gradient shape".into()));
            }
            Zip::from(&mut layer.weights).and(mw).and(vw).and(gw).for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias).and(mb).and(vb).and(gb).for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}
