//! Parameters, initialization, the Adam optimizer, common layers, and
//! checkpoint persistence.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::graph::{Grads, Graph, Var};
use crate::{Error, Result, Rng, Scalar, Tensor};

/// A trainable tensor with its optimizer state.
///
/// Names are hierarchical dot-paths and must be unique within a model; they
/// key both gradients and checkpoint records.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.numel();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            adam_m: vec![T::ZERO; n],
            adam_v: vec![T::ZERO; n],
            step: 0,
        }
    }

    /// Uniform Kaiming-style fan-in init: U(-b, b) with
    /// b = gain · sqrt(3 / fan_in). Layers followed by ReLU use gain √2
    /// (b = sqrt(6 / fan_in)); plain projections use gain 1 so deep
    /// residual stacks keep bounded activations.
    pub fn kaiming(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| T::from_f64(rng.uniform(-bound, bound)));
        Self::new(name, value)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::full(shape, T::ONE))
    }

    /// Accumulate a gradient contribution (shape-checked by length).
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.value.numel() {
            return Err(Error::invalid(format!(
                "gradient length {} does not match parameter `{}` ({} elements)",
                g.len(),
                self.name,
                self.value.numel()
            )));
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

/// Anything that exposes its parameters in a stable order.
pub trait ParamSet<T: Scalar> {
    fn params(&self) -> Vec<&Parameter<T>>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>>;
}

/// Check the name-uniqueness invariant of a parameter set.
pub fn validate_unique_names<T: Scalar>(params: &[&Parameter<T>]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::invalid(format!("duplicate parameter name `{}`", p.name)));
        }
    }
    Ok(())
}

/// Copy gradients produced by [`Graph::backward`] onto the parameters.
pub fn apply_grads<T: Scalar>(model: &mut impl ParamSet<T>, grads: &Grads<T>) -> Result<()> {
    for p in model.params_mut() {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        p.accumulate_grad(g)?;
    }
    Ok(())
}

/// One Adam update with bias correction; consumed gradients are cleared.
/// Errors if any parameter has no gradient.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let (b1, b2) = (T::from_f64(betas.0), T::from_f64(betas.1));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
    for p in params.iter_mut() {
        let g = p
            .grad
            .take()
            .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        p.step += 1;
        let t = p.step as i32;
        let bc1 = T::ONE - pow_int(b1, t);
        let bc2 = T::ONE - pow_int(b2, t);
        let value = p.value.data_mut();
        for i in 0..g.len() {
            let gi = g[i];
            p.adam_m[i] = b1 * p.adam_m[i] + (T::ONE - b1) * gi;
            p.adam_v[i] = b2 * p.adam_v[i] + (T::ONE - b2) * gi * gi;
            let m_hat = p.adam_m[i] / bc1;
            let v_hat = p.adam_v[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn pow_int<T: Scalar>(base: T, mut n: i32) -> T {
    let mut acc = T::ONE;
    let mut b = base;
    while n > 0 {
        if n & 1 == 1 {
            acc *= b;
        }
        b *= b;
        n >>= 1;
    }
    acc
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut Parameter<T>], max_norm: f64) {
    let mut total = 0.0f64;
    for p in params.iter() {
        if let Some(g) = &p.grad {
            for &v in g {
                total += v.to_f64() * v.to_f64();
            }
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
}

// ───────────────────────── layers ─────────────────────────

/// Affine map on the last axis: y = x · W + b, with W stored (in, out).
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Option<Parameter<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        Self::with_gain(prefix, d_in, d_out, bias, 1.0, rng)
    }

    pub fn with_gain(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        Linear {
            w: Parameter::kaiming(format!("{prefix}.w"), &[d_in, d_out], d_in, gain, rng),
            b: bias.then(|| Parameter::zeros(format!("{prefix}.b"), &[d_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.w);
        let y = g.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.w];
        v.extend(self.b.as_ref());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.w];
        v.extend(self.b.as_mut());
        v
    }
}

/// Two-layer MLP with ReLU, hidden width `d_hidden`.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Mlp {
            fc1: Linear::with_gain(
                &format!("{prefix}.fc1"),
                d_in,
                d_hidden,
                true,
                std::f64::consts::SQRT_2,
                rng,
            ),
            fc2: Linear::new(&format!("{prefix}.fc2"), d_hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

impl<T: Scalar> ParamSet<T> for Mlp<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(prefix: &str, d: usize) -> Self {
        LayerNorm {
            gamma: Parameter::ones(format!("{prefix}.gamma"), &[d]),
            beta: Parameter::zeros(format!("{prefix}.beta"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

impl<T: Scalar> ParamSet<T> for LayerNorm<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// 2D convolution layer (k in {1,3}, stride 1, shape preserving).
#[derive(Debug, Clone)]
pub struct Conv2dLayer<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Self {
        Self::with_gain(prefix, c_in, c_out, k, 1.0, rng)
    }

    pub fn with_gain(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        Conv2dLayer {
            w: Parameter::kaiming(
                format!("{prefix}.w"),
                &[c_out, c_in, k, k],
                c_in * k * k,
                gain,
                rng,
            ),
            b: Parameter::zeros(format!("{prefix}.b"), &[c_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        g.conv2d(x, w, Some(b))
    }
}

impl<T: Scalar> ParamSet<T> for Conv2dLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// 3D convolution layer (k in {1,3}, stride 1, shape preserving).
#[derive(Debug, Clone)]
pub struct Conv3dLayer<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
}

impl<T: Scalar> Conv3dLayer<T> {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Self {
        Self::with_gain(prefix, c_in, c_out, k, 1.0, rng)
    }

    pub fn with_gain(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        Conv3dLayer {
            w: Parameter::kaiming(
                format!("{prefix}.w"),
                &[c_out, c_in, k, k, k],
                c_in * k * k * k,
                gain,
                rng,
            ),
            b: Parameter::zeros(format!("{prefix}.b"), &[c_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        g.conv3d(x, w, Some(b))
    }
}

impl<T: Scalar> ParamSet<T> for Conv3dLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Transposed convolution (2x2 or 2x2x2 kernel, stride 2) for upsampling.
#[derive(Debug, Clone)]
pub struct UpConvLayer<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
    pub three_d: bool,
}

impl<T: Scalar> UpConvLayer<T> {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, three_d: bool, rng: &mut Rng) -> Self {
        let shape: Vec<usize> = if three_d {
            vec![c_in, c_out, 2, 2, 2]
        } else {
            vec![c_in, c_out, 2, 2]
        };
        UpConvLayer {
            w: Parameter::kaiming(format!("{prefix}.w"), &shape, c_in, 1.0, rng),
            b: Parameter::zeros(format!("{prefix}.b"), &[c_out]),
            three_d,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        if self.three_d {
            g.conv_transpose3d(x, w, Some(b))
        } else {
            g.conv_transpose2d(x, w, Some(b))
        }
    }
}

impl<T: Scalar> ParamSet<T> for UpConvLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

// ───────────────────────── checkpoints ─────────────────────────

const MAGIC: &[u8; 4] = b"DTCK";
const VERSION: u16 = 1;

/// A tensor read back from a checkpoint, in whichever precision it was saved.
#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }
}

/// Write named tensors as a checkpoint file: magic "DTCK", version u16,
/// then records {name-length u32, UTF-8 name, dtype u8, rank u8,
/// extents u64 x rank, little-endian float payload}.
pub fn write_checkpoint<T: Scalar, P: AsRef<Path>>(
    path: P,
    records: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in records {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[T::DTYPE_TAG, tensor.rank() as u8])?;
        for &e in tensor.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        match T::DTYPE_TAG {
            0 => {
                for &v in tensor.data() {
                    w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
                }
            }
            _ => {
                for &v in tensor.data() {
                    w.write_all(&v.to_f64().to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read every record of a checkpoint file.
pub fn read_checkpoint<P: AsRef<Path>>(path: P) -> Result<Vec<(String, DynTensor)>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a DTCK file".into()));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr)?;
        let (dtype, rank) = (hdr[0], hdr[1] as usize);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e8 = [0u8; 8];
            r.read_exact(&mut e8)?;
            shape.push(u64::from_le_bytes(e8) as usize);
        }
        let numel: usize = shape.iter().product();
        let tensor = match dtype {
            0 => {
                let mut data = Vec::with_capacity(numel);
                let mut b = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut b)?;
                    data.push(f32::from_le_bytes(b));
                }
                DynTensor::F32(Tensor::from_vec(&shape, data)?)
            }
            1 => {
                let mut data = Vec::with_capacity(numel);
                let mut b = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut b)?;
                    data.push(f64::from_le_bytes(b));
                }
                DynTensor::F64(Tensor::from_vec(&shape, data)?)
            }
            d => return Err(Error::Checkpoint(format!("unknown dtype tag {d}"))),
        };
        out.push((name, tensor));
    }
    Ok(out)
}

/// Save a model's parameters (and Adam state under `#m`/`#v`/`#t` suffixes,
/// when `with_optimizer`).
pub fn save_params<T: Scalar, P: AsRef<Path>>(
    path: P,
    params: &[&Parameter<T>],
    with_optimizer: bool,
) -> Result<()> {
    let mut records: Vec<(String, Tensor<T>)> = Vec::new();
    for p in params {
        records.push((p.name.clone(), p.value.clone()));
        if with_optimizer {
            records.push((
                format!("{}#m", p.name),
                Tensor::from_vec(p.value.shape(), p.adam_m.clone())?,
            ));
            records.push((
                format!("{}#v", p.name),
                Tensor::from_vec(p.value.shape(), p.adam_v.clone())?,
            ));
            records.push((
                format!("{}#t", p.name),
                Tensor::from_vec(&[1], vec![T::from_f64(p.step as f64)])?,
            ));
        }
    }
    let refs: Vec<(&str, &Tensor<T>)> =
        records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_checkpoint(path, &refs)
}

/// Load parameters by name; `#`-suffixed optimizer records are restored when
/// present. Precision is cast to `T`. Unknown names are ignored so extra
/// metadata records are harmless.
pub fn load_params<T: Scalar>(
    records: &[(String, DynTensor)],
    params: &mut [&mut Parameter<T>],
) -> Result<()> {
    let map: HashMap<&str, &DynTensor> =
        records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for p in params.iter_mut() {
        let rec = map
            .get(p.name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{}`", p.name)))?;
        if rec.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "record `{}` has shape {:?}, parameter wants {:?}",
                p.name,
                rec.shape(),
                p.value.shape()
            )));
        }
        p.value = rec.cast();
        if let Some(m) = map.get(format!("{}#m", p.name).as_str()) {
            p.adam_m = m.cast::<T>().into_data();
        }
        if let Some(v) = map.get(format!("{}#v", p.name).as_str()) {
            p.adam_v = v.cast::<T>().into_data();
        }
        if let Some(t) = map.get(format!("{}#t", p.name).as_str()) {
            p.step = t.cast::<f64>().item() as u64;
        }
    }
    Ok(())
}
