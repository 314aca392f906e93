//! Multi-scale deformable attention.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::nn::{Init, Linear, ParamBuilder};
use crate::ops::{self, LevelLayout};

/// Where each query looks.
#[derive(Debug, Clone)]
pub enum Reference {
    /// `(Q, 2)` normalized points; offsets are in units of each level's cells.
    Points(Tensor),
    /// `(Q, 4)` normalized `(cx, cy, w, h)`; offsets scale with the box.
    Boxes(Tensor),
}

/// Output of a deformable attention call with its intermediate quantities.
#[derive(Debug, Clone)]
pub struct DeformOutput {
    /// `(Q, C)` after the output projection.
    pub output: Tensor,
    /// `(Q, C)` weighted samples before the output projection.
    pub sampled: Tensor,
    /// `(Q, heads, levels, points)`, normalized per head over levels × points.
    pub weights: Tensor,
    /// `(Q, heads, levels, points, 2)` normalized sampling locations.
    pub locations: Tensor,
}

#[derive(Debug, Clone)]
pub struct DeformableAttention {
    offsets: Linear,
    weights: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
    levels: usize,
    points: usize,
}

impl DeformableAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, levels: usize, points: usize) -> Result<Self> {
        // Offsets start at zero weight with a bias that fans each head out in
        // its own direction, `p + 1` cells away for the p-th point.
        let mut bias = Vec::with_capacity(heads * levels * points * 2);
        for h in 0..heads {
            let theta = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
            let (s, c) = theta.sin_cos();
            let m = c.abs().max(s.abs());
            for _ in 0..levels {
                for p in 0..points {
                    bias.push(c / m * (p + 1) as f64);
                    bias.push(s / m * (p + 1) as f64);
                }
            }
        }
        let n_off = heads * levels * points * 2;
        let n_w = heads * levels * points;
        Ok(Self {
            offsets: Linear::with_init(&pb.pp("offsets"), dim, n_off, Init::Zeros, Some(Init::Values(bias)))?,
            weights: Linear::with_init(&pb.pp("weights"), dim, n_w, Init::Zeros, Some(Init::Zeros))?,
            value: Linear::xavier(&pb.pp("value"), dim, dim)?,
            output: Linear::xavier(&pb.pp("output"), dim, dim)?,
            heads,
            levels,
            points,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Swaps in explicit offset and weight projections. The zero-weight init
    /// makes sampling independent of the query, which hides query gradients.
    pub fn with_sampling(mut self, offsets: Linear, weights: Linear) -> Self {
        self.offsets = offsets;
        self.weights = weights;
        self
    }

    /// Projects memory tokens into per-head values `(S, heads, head_dim)`.
    /// Tokens with a `false` mask entry contribute zeros.
    pub fn project_values(&self, memory: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let (s, c) = memory.dims2()?;
        let mut v = self.value.forward(memory)?;
        if let Some(mask) = mask {
            if mask.iter().any(|&m| !m) {
                let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let m = Tensor::from_vec(m, (s, 1), memory.device())?.to_dtype(memory.dtype())?;
                v = v.broadcast_mul(&m)?;
            }
        }
        Ok(v.reshape((s, self.heads, c / self.heads))?)
    }

    pub fn forward(
        &self,
        query: &Tensor,
        reference: &Reference,
        values: &Tensor,
        layout: &LevelLayout,
    ) -> Result<DeformOutput> {
        let (q, _) = query.dims2()?;
        let (h, l, p) = (self.heads, self.levels, self.points);
        let offsets = self.offsets.forward(query)?.reshape((q, h, l, p, 2))?;
        let logits = self.weights.forward(query)?.reshape((q, h, l * p))?;
        let weights = ops::softmax_last_dim(&logits)?.reshape((q, h, l, p))?;
        let locations = match reference {
            Reference::Points(r) => {
                let norm = level_normalizer(layout, query.dtype(), query.device())?;
                r.reshape((q, 1, 1, 1, 2))?.broadcast_add(&offsets.broadcast_div(&norm)?)?
            }
            Reference::Boxes(b) => {
                let xy = b.narrow(1, 0, 2)?.reshape((q, 1, 1, 1, 2))?;
                let wh = b.narrow(1, 2, 2)?.reshape((q, 1, 1, 1, 2))?;
                let scaled = (offsets.broadcast_mul(&wh)? * (0.5 / p as f64))?;
                xy.broadcast_add(&scaled)?
            }
        };
        let sampled = ops::deform_sample(values, &locations, &weights, layout)?;
        let output = self.output.forward(&sampled)?;
        Ok(DeformOutput {
            output,
            sampled,
            weights,
            locations,
        })
    }

    pub fn output_proj(&self) -> &Linear {
        &self.output
    }

    /// Replaces the output projection by constant zeros.
    pub fn zero_output(&mut self) -> Result<()> {
        self.output = self.output.zeroed()?;
        Ok(())
    }
}

/// `(1, 1, levels, 1, 2)` tensor of `(W_l, H_l)`.
fn level_normalizer(layout: &LevelLayout, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = layout
        .shapes()
        .iter()
        .flat_map(|&(h, w)| [w as f64, h as f64])
        .collect();
    Ok(Tensor::from_vec(v, (1, 1, layout.num_levels(), 1, 2), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Independent bilinear interpolation (align-corners off, zero padding).
    fn bilinear(map: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
        let px = x * w as f64 - 0.5;
        let py = y * h as f64 - 0.5;
        let (x0, y0) = (px.floor(), py.floor());
        let mut out = vec![0.0; c];
        for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
            let (cx, cy) = (x0 + dx, y0 + dy);
            let wx = 1.0 - (px - cx).abs();
            let wy = 1.0 - (py - cy).abs();
            if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                continue;
            }
            let idx = (cy as usize * w + cx as usize) * c;
            for k in 0..c {
                out[k] += wx * wy * map[idx + k];
            }
        }
        out
    }

    #[test]
    fn weights_sum_to_one_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pb = ParamBuilder::random(1, DType::F64);
        let mut attn = DeformableAttention::new(&pb, 8, 2, 2, 3).unwrap();
        attn.weights = Linear::from_tensors(randn(&mut rng, &[8, 12]), Some(randn(&mut rng, &[12])));
        let layout = LevelLayout::new(vec![(4, 4), (2, 2)]);
        let memory = randn(&mut rng, &[20, 8]);
        let values = attn.project_values(&memory, None).unwrap();
        let query = randn(&mut rng, &[5, 8]);
        let refs = Reference::Points(randn(&mut rng, &[5, 2]).affine(0.5, 0.5).unwrap());
        let out = attn.forward(&query, &refs, &values, &layout).unwrap();
        let sums: Vec<f64> = out.weights.sum((2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(sums.len(), 10);
        for s in sums {
            assert!((s - 1.0).abs() < 1e-6);
        }
        let w: Vec<f64> = out.weights.flatten_all().unwrap().to_vec1().unwrap();
        assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn zero_offsets_single_point_match_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pb = ParamBuilder::random(2, DType::F64);
        let mut attn = DeformableAttention::new(&pb, 4, 1, 1, 1).unwrap();
        attn.offsets = Linear::from_tensors(Tensor::zeros((4, 2), DType::F64, &Device::Cpu).unwrap(), None);
        attn.value = Linear::from_tensors(Tensor::eye(4, DType::F64, &Device::Cpu).unwrap(), None);
        let (h, w) = (3, 5);
        let layout = LevelLayout::new(vec![(h, w)]);
        let memory = randn(&mut rng, &[h * w, 4]);
        let map: Vec<f64> = memory.flatten_all().unwrap().to_vec1().unwrap();
        let values = attn.project_values(&memory, None).unwrap();
        let pts = [[0.31, 0.62], [0.5, 0.5], [0.02, 0.97], [0.9, 0.1]];
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let refs = Reference::Points(Tensor::from_vec(flat, (4, 2), &Device::Cpu).unwrap());
        let query = randn(&mut rng, &[4, 4]);
        let out = attn.forward(&query, &refs, &values, &layout).unwrap();
        let got: Vec<Vec<f64>> = out.sampled.to_vec2().unwrap();
        for (i, p) in pts.iter().enumerate() {
            let want = bilinear(&map, h, w, 4, p[0], p[1]);
            for k in 0..4 {
                assert!((got[i][k] - want[k]).abs() < 1e-12);
            }
        }
        // Cell (row 1, col 3) center reproduces that token.
        let refs = Reference::Points(Tensor::new(&[[3.5 / 5.0, 1.5 / 3.0]], &Device::Cpu).unwrap());
        let out = attn.forward(&query.narrow(0, 0, 1).unwrap(), &refs, &values, &layout).unwrap();
        let got: Vec<f64> = out.sampled.flatten_all().unwrap().to_vec1().unwrap();
        for k in 0..4 {
            assert!((got[k] - map[(5 + 3) * 4 + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn box_reference_scales_offsets() {
        let pb = ParamBuilder::random(3, DType::F64);
        let attn = DeformableAttention::new(&pb, 8, 2, 1, 2).unwrap();
        let layout = LevelLayout::new(vec![(4, 4)]);
        let memory = Tensor::zeros((16, 8), DType::F64, &Device::Cpu).unwrap();
        let values = attn.project_values(&memory, None).unwrap();
        let query = Tensor::zeros((1, 8), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::new(&[[0.5f64, 0.5, 0.2, 0.4]], &Device::Cpu).unwrap();
        let out = attn.forward(&query, &Reference::Boxes(b), &values, &layout).unwrap();
        let loc: Vec<f64> = out.locations.flatten_all().unwrap().to_vec1().unwrap();
        // Head 0 points along +x: bias (1, 0) and (2, 0), scaled by w/2 / points.
        assert!((loc[0] - (0.5 + 1.0 * 0.1 / 2.0)).abs() < 1e-12);
        assert!((loc[2] - (0.5 + 2.0 * 0.1 / 2.0)).abs() < 1e-12);
        assert!((loc[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pb = ParamBuilder::random(4, DType::F64);
        let mut attn = DeformableAttention::new(&pb, 4, 2, 2, 2).unwrap();
        attn.offsets = Linear::from_tensors(
            (randn(&mut rng, &[4, 16]) * 0.3).unwrap(),
            Some((randn(&mut rng, &[16]) * 0.5).unwrap()),
        );
        attn.weights = Linear::from_tensors(randn(&mut rng, &[4, 8]), None);
        let layout = LevelLayout::new(vec![(3, 3), (2, 2)]);
        let query = Var::from_tensor(&randn(&mut rng, &[2, 4])).unwrap();
        let memory = Var::from_tensor(&randn(&mut rng, &[13, 4])).unwrap();
        let refs = Var::from_tensor(&randn(&mut rng, &[2, 2]).affine(0.3, 0.5).unwrap()).unwrap();
        let probe = randn(&mut rng, &[2, 4]);
        let loss = |q: &Tensor, m: &Tensor, r: &Tensor| -> f64 {
            let v = attn.project_values(m, None).unwrap();
            let o = attn.forward(q, &Reference::Points(r.clone()), &v, &layout).unwrap();
            (o.output * &probe).unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let v = attn.project_values(memory.as_tensor(), None).unwrap();
        let o = attn
            .forward(query.as_tensor(), &Reference::Points(refs.as_tensor().clone()), &v, &layout)
            .unwrap();
        let grads = (o.output * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let vars = [&query, &memory, &refs];
        for (vi, var) in vars.iter().enumerate() {
            let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            for i in 0..base.len() {
                let eval = |d: f64| {
                    let mut x = base.clone();
                    x[i] += d;
                    let t = Tensor::from_vec(x, var.as_tensor().dims(), &Device::Cpu).unwrap();
                    let mut ins = [query.as_tensor().clone(), memory.as_tensor().clone(), refs.as_tensor().clone()];
                    ins[vi] = t;
                    loss(&ins[0], &ins[1], &ins[2])
                };
                let h = 1e-5;
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(err < 1e-4, "input {vi} entry {i}: fd {fd} vs {}", g[i]);
            }
        }
    }
}
