//! Parameter storage and the small set of layers the model is built from.
//!
//! Parameters are created from a seeded ChaCha stream in construction order,
//! so two models built from the same seed are bit-identical. The same builder
//! can instead pull named tensors from a checkpoint.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};

/// Named trainable parameters in a stable (sorted) order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
    /// Glorot uniform with the given fan-in and fan-out.
    Xavier(usize, usize),
    Values(Vec<f64>),
}

enum Source {
    Random(ChaCha8Rng),
    Load(HashMap<String, Tensor>),
}

struct BuilderState {
    vars: BTreeMap<String, Var>,
    source: Source,
    dtype: DType,
}

#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn random(seed: u64, dtype: DType) -> Self {
        Self::with_source(Source::Random(ChaCha8Rng::seed_from_u64(seed)), dtype)
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType) -> Self {
        Self::with_source(Source::Load(tensors), dtype)
    }

    fn with_source(source: Source, dtype: DType) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                vars: BTreeMap::new(),
                source,
                dtype,
            })),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut state = self.state.borrow_mut();
        if state.vars.contains_key(&full) {
            return Err(Error::Checkpoint(format!("parameter {full} registered twice")));
        }
        let dtype = state.dtype;
        let n: usize = shape.iter().product();
        let tensor = match &mut state.source {
            Source::Random(rng) => {
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
                    Init::Normal(std) => (0..n).map(|_| std * standard_normal(rng)).collect(),
                    Init::Xavier(fan_in, fan_out) => {
                        let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-b..=b)).collect()
                    }
                    Init::Values(v) => {
                        if v.len() != n {
                            return Err(Error::Checkpoint(format!(
                                "initializer for {full} has {} values, expected {n}",
                                v.len()
                            )));
                        }
                        v
                    }
                };
                Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?
            }
            Source::Load(map) => {
                let t = map
                    .remove(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {full}: stored shape {:?}, model expects {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(dtype)?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        state.vars.insert(full, var);
        Ok(out)
    }

    /// Consumes the builder. When loading, every stored tensor must have been used.
    pub fn finish(self) -> Result<ParamStore> {
        let state = Rc::try_unwrap(self.state)
            .map_err(|_| Error::Checkpoint("parameter builder still shared".into()))?
            .into_inner();
        if let Source::Load(rest) = &state.source {
            if !rest.is_empty() {
                let mut names: Vec<_> = rest.keys().cloned().collect();
                names.sort();
                return Err(Error::Checkpoint(format!(
                    "checkpoint has unused parameters: {}",
                    names.join(", ")
                )));
            }
        }
        Ok(ParamStore {
            vars: state.vars,
            dtype: state.dtype,
        })
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Affine map over the last dimension; the weight is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(pb, d_in, d_out, Init::Uniform(bound), Some(Init::Uniform(bound)))
    }

    pub fn no_bias(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(pb, d_in, d_out, Init::Uniform(bound), None)
    }

    pub fn xavier(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(pb, d_in, d_out, Init::Xavier(d_in, d_out), Some(Init::Zeros))
    }

    pub fn xavier_no_bias(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(pb, d_in, d_out, Init::Xavier(d_in, d_out), None)
    }

    pub fn with_init(
        pb: &ParamBuilder,
        d_in: usize,
        d_out: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        let w = pb.get(&[d_in, d_out], "weight", weight)?;
        let b = match bias {
            Some(init) => Some(pb.get(&[d_out], "bias", init)?),
            None => None,
        };
        Ok(Self { weight: w, bias: b })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// A constant all-zero copy.
    pub fn zeroed(&self) -> Result<Self> {
        Ok(Self {
            weight: self.weight.zeros_like()?,
            bias: self.bias.as_ref().map(|b| b.zeros_like()).transpose()?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = dims[dims.len() - 1];
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.get(&[dim], "weight", Init::Ones)?,
            beta: pb.get(&[dim], "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::layer_norm(x, &self.gamma, &self.beta, 1e-5)?)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&pb.pp(format!("layers.{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Like [`Mlp::new`] but with the last layer zero-initialized.
    pub fn zero_last(pb: &ParamBuilder, dims: &[usize]) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let p = pb.pp(format!("layers.{i}"));
                if i + 1 == n {
                    Linear::with_init(&p, w[0], w[1], Init::Zeros, Some(Init::Zeros))
                } else {
                    Linear::new(&p, w[0], w[1])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Replaces the last layer by constant zeros (no longer trainable).
    pub fn zero_last_layer(&mut self) -> Result<()> {
        let last = self.layers.last_mut().expect("mlp has layers");
        *last = last.zeroed()?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Square-kernel convolution over a channel-last `(H, W, C)` map.
#[derive(Debug, Clone)]
pub struct Conv2d {
    proj: Linear,
    geo: ConvGeometry,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = kernel * kernel * c_in;
        // He-uniform for ReLU networks.
        let bound = (6.0 / fan_in as f64).sqrt();
        let proj = Linear::with_init(pb, fan_in, c_out, Init::Uniform(bound), Some(Init::Zeros))?;
        Ok(Self {
            proj,
            geo: ConvGeometry {
                kernel,
                stride,
                padding: kernel / 2,
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w, _) = x.dims3()?;
        let (ho, wo) = self.geo.out_size(h, w);
        let cols = ops::im2col(x, self.geo)?;
        Ok(self.proj.forward(&cols)?.reshape((ho, wo, self.proj.out_dim()))?)
    }
}

/// Multi-head attention over batched sequences `(B, L, C)`.
///
/// The value projection is optional: without it the heads attend over slices
/// of the raw value input.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Option<Linear>,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, value_proj: bool) -> Result<Self> {
        Ok(Self {
            q: Linear::xavier(&pb.pp("q"), dim, dim)?,
            k: Linear::xavier(&pb.pp("k"), dim, dim)?,
            v: if value_proj {
                Some(Linear::xavier(&pb.pp("v"), dim, dim)?)
            } else {
                None
            },
            o: Linear::xavier(&pb.pp("o"), dim, dim)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the attention probabilities `(B, heads, Lq, Lk)` and the
    /// per-head outputs concatenated before the output projection.
    pub fn attend(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, lq, c) = query.dims3()?;
        let head_dim = c / self.heads;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = match &self.v {
            Some(p) => self.split(&p.forward(value)?)?,
            None => self.split(value)?,
        };
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (head_dim as f64).sqrt())?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let probs = ops::softmax_last_dim(&scores)?;
        let mixed = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, c))?;
        Ok((probs, mixed))
    }

    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (_, mixed) = self.attend(query, key, value, mask)?;
        self.o.forward(&mixed)
    }

    pub fn output_proj(&self) -> &Linear {
        &self.o
    }
}

/// `log(x / (1 - x))` with both terms clamped away from zero.
pub fn inverse_sigmoid(x: &Tensor) -> Result<Tensor> {
    let eps = 1e-5;
    let x = x.clamp(0.0, 1.0)?;
    let num = x.clamp(eps, 1.0)?;
    let den = x.affine(-1.0, 1.0)?.clamp(eps, 1.0)?;
    Ok((num.log()? - den.log()?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + exp(-x)), composed so that autograd sees it.
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Fixed sinusoidal embedding of every coordinate in the last dimension:
/// `(…, k)` → `(…, k * dim)`, each coordinate contributing interleaved
/// `sin`/`cos` pairs at geometric frequencies, scaled by 2π.
pub fn sine_embed(coords: &Tensor, dim: usize) -> Result<Tensor> {
    let dims = coords.dims().to_vec();
    let k = dims[dims.len() - 1];
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 2.0 * std::f64::consts::PI / 10000f64.powf(2.0 * i as f64 / dim as f64))
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), coords.device())?.to_dtype(coords.dtype())?;
    let flat = coords.reshape((coords.elem_count(), 1))?;
    let arg = flat.broadcast_mul(&freqs)?;
    let emb = Tensor::cat(&[arg.sin()?, arg.cos()?], D::Minus1)?;
    let mut out_dims = dims[..dims.len() - 1].to_vec();
    out_dims.push(k * 2 * half);
    Ok(emb.reshape(out_dims)?)
}

/// Index tensor on the CPU.
pub fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic_and_named() {
        let build = || {
            let pb = ParamBuilder::random(9, DType::F32);
            let _ = Linear::new(&pb.pp("a"), 3, 2).unwrap();
            let _ = LayerNorm::new(&pb.pp("b").pp("norm"), 2).unwrap();
            pb.finish().unwrap()
        };
        let (s1, s2) = (build(), build());
        let names: Vec<_> = s1.vars().map(|(k, _)| k.clone()).collect();
        assert_eq!(names, ["a.bias", "a.weight", "b.norm.bias", "b.norm.weight"]);
        for ((_, a), (_, b)) in s1.vars().zip(s2.vars()) {
            let (a, b) = (a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn loading_reports_missing_and_unused() {
        let mut map = HashMap::new();
        map.insert("x.weight".to_string(), Tensor::zeros((3, 2), DType::F32, &Device::Cpu).unwrap());
        map.insert("extra".to_string(), Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
        let pb = ParamBuilder::from_tensors(map, DType::F32);
        let err = Linear::new(&pb.pp("x"), 3, 2).unwrap_err();
        assert!(err.to_string().contains("missing parameter x.bias"));

        let mut map = HashMap::new();
        map.insert("x.weight".to_string(), Tensor::zeros((3, 2), DType::F32, &Device::Cpu).unwrap());
        map.insert("extra".to_string(), Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
        let pb = ParamBuilder::from_tensors(map, DType::F32);
        Linear::no_bias(&pb.pp("x"), 3, 2).unwrap();
        let err = pb.finish().unwrap_err();
        assert!(err.to_string().contains("extra"));
    }

    #[test]
    fn linear_handles_higher_rank_inputs() {
        let pb = ParamBuilder::random(1, DType::F64);
        let lin = Linear::new(&pb, 4, 3).unwrap();
        let x = Tensor::ones((2, 5, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 5, 3]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let pb = ParamBuilder::random(2, DType::F64);
        let conv = Conv2d::new(&pb, 2, 3, 3, 2).unwrap();
        let x: Vec<f64> = (0..5 * 6 * 2).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let xt = Tensor::from_vec(x.clone(), (5, 6, 2), &Device::Cpu).unwrap();
        let y = conv.forward(&xt).unwrap();
        assert_eq!(y.dims(), &[3, 3, 3]);
        let w = conv.proj.weight().to_vec2::<f64>().unwrap();
        let b = conv.proj.bias().unwrap().to_vec1::<f64>().unwrap();
        let y = y.to_vec3::<f64>().unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                for co in 0..3 {
                    let mut acc = b[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x[(iy as usize * 6 + ix as usize) * 2 + ci] * w[(ky * 3 + kx) * 2 + ci][co];
                            }
                        }
                    }
                    assert!((acc - y[oy][ox][co]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inverse_sigmoid_inverts_sigmoid() {
        let x = Tensor::new(&[-3.0f64, -0.5, 0.0, 2.0], &Device::Cpu).unwrap();
        let back = inverse_sigmoid(&sigmoid(&x).unwrap()).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in back.iter().zip([-3.0, -0.5, 0.0, 2.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
