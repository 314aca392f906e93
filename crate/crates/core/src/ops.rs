//! Fused CPU kernels with hand-written backward passes.
//!
//! Each kernel is generic over `f32` and `f64` so that the gradient checks can
//! run in double precision while training runs in single precision.

use candle_core::backend::BackendStorage;
use candle_core::{
    bail, CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType, D,
};

type CResult<T> = candle_core::Result<T>;

pub(crate) trait Real:
    WithDType
    + Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::AddAssign
{
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn floor(self) -> Self;
}

impl Real for f32 {
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn floor(self) -> Self {
        f32::floor(self)
    }
}

impl Real for f64 {
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn floor(self) -> Self {
        f64::floor(self)
    }
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("fused kernels expect contiguous inputs"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension.

struct LayerNormOp {
    eps: f64,
}

impl LayerNormOp {
    fn fwd<T: Real>(&self, x: &[T], g: &[T], b: &[T], c: usize) -> Vec<T> {
        let eps = T::from_f64(self.eps);
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut out = vec![T::zero(); x.len()];
        for (row, dst) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            let rstd = T::one() / (var * inv_c + eps).sqrt();
            for i in 0..c {
                dst[i] = (row[i] - mean) * rstd * g[i] + b[i];
            }
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn bwd<T: Real>(&self, x: &[T], g: &[T], dy: &[T], c: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let eps = T::from_f64(self.eps);
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut dx = vec![T::zero(); x.len()];
        let mut dg = vec![T::zero(); c];
        let mut db = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); c];
        for ((row, grow), dst) in x
            .chunks_exact(c)
            .zip(dy.chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
        {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            let rstd = T::one() / (var * inv_c + eps).sqrt();
            let mut mean_gy = T::zero();
            let mut mean_gy_xhat = T::zero();
            for i in 0..c {
                xhat[i] = (row[i] - mean) * rstd;
                let gy = grow[i] * g[i];
                mean_gy += gy;
                mean_gy_xhat += gy * xhat[i];
                dg[i] += grow[i] * xhat[i];
                db[i] += grow[i];
            }
            mean_gy = mean_gy * inv_c;
            mean_gy_xhat = mean_gy_xhat * inv_c;
            for i in 0..c {
                dst[i] = rstd * (grow[i] * g[i] - mean_gy - xhat[i] * mean_gy_xhat);
            }
        }
        (dx, dg, db)
    }
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let c = l1.dims()[l1.dims().len() - 1];
        let out = match s1.dtype() {
            DType::F32 => {
                let v = self.fwd(slice::<f32>(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, c);
                CpuStorage::F32(v)
            }
            DType::F64 => {
                let v = self.fwd(slice::<f64>(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, c);
                CpuStorage::F64(v)
            }
            dt => bail!("layer-norm: unsupported dtype {dt:?}"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = x.dim(D::Minus1)?;
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let (dx, dg, db) = self.bwd(
                    &host::<$t>(x)?,
                    &host::<$t>(gamma)?,
                    &host::<$t>(grad)?,
                    c,
                );
                (
                    Tensor::from_vec(dx, x.shape(), dev)?,
                    Tensor::from_vec(dg, gamma.shape(), dev)?,
                    Tensor::from_vec(db, gamma.shape(), dev)?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => bail!("layer-norm: unsupported dtype {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Normalizes over the last dimension with learned scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp { eps })
}

// ---------------------------------------------------------------------------
// Softmax over the last dimension. Rows that are entirely `-inf` produce zeros.

struct SoftmaxOp;

impl SoftmaxOp {
    fn fwd<T: Real>(x: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mut max = T::from_f64(f64::NEG_INFINITY);
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            if max == T::from_f64(f64::NEG_INFINITY) {
                continue;
            }
            let mut sum = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            let inv = T::one() / sum;
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        out
    }
}

impl CustomOp1 for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let n = l.dims()[l.dims().len() - 1];
        let out = match s.dtype() {
            DType::F32 => CpuStorage::F32(Self::fwd(slice::<f32>(s, l)?, n)),
            DType::F64 => CpuStorage::F64(Self::fwd(slice::<f64>(s, l)?, n)),
            dt => bail!("softmax: unsupported dtype {dt:?}"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let dot = (res * grad)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad.broadcast_sub(&dot)?)?))
    }
}

pub fn softmax_last_dim(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxOp)
}

// ---------------------------------------------------------------------------
// im2col for channel-last feature maps.

/// Geometry of a square-kernel convolution over an `(H, W, C)` map.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }
}

struct Im2ColOp {
    geo: ConvGeometry,
    h: usize,
    w: usize,
    c: usize,
}

impl Im2ColOp {
    /// Visits every `(column row, column offset, source offset)` triple.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.geo.out_size(self.h, self.w);
        let k = self.geo.kernel;
        let c = self.c;
        let cols = k * k * c;
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * cols;
                for ky in 0..k {
                    let iy = (oy * self.geo.stride + ky) as isize - self.geo.padding as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.geo.stride + kx) as isize - self.geo.padding as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * c;
                        f(row, (ky * k + kx) * c, src);
                    }
                }
            }
        }
    }

    fn fwd<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (ho, wo) = self.geo.out_size(self.h, self.w);
        let cols = self.geo.kernel * self.geo.kernel * self.c;
        let mut out = vec![T::zero(); ho * wo * cols];
        let c = self.c;
        self.for_each(|row, off, src| {
            out[row + off..row + off + c].copy_from_slice(&x[src..src + c]);
        });
        out
    }

    fn bwd<T: Real>(&self, g: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.h * self.w * self.c];
        let c = self.c;
        self.for_each(|row, off, src| {
            for i in 0..c {
                dx[src + i] += g[row + off + i];
            }
        });
        dx
    }
}

impl CustomOp1 for Im2ColOp {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (ho, wo) = self.geo.out_size(self.h, self.w);
        let cols = self.geo.kernel * self.geo.kernel * self.c;
        let out = match s.dtype() {
            DType::F32 => CpuStorage::F32(self.fwd(slice::<f32>(s, l)?)),
            DType::F64 => CpuStorage::F64(self.fwd(slice::<f64>(s, l)?)),
            dt => bail!("im2col: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((ho * wo, cols))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let dx = match arg.dtype() {
            DType::F32 => Tensor::from_vec(self.bwd(&host::<f32>(grad)?), arg.shape(), arg.device())?,
            DType::F64 => Tensor::from_vec(self.bwd(&host::<f64>(grad)?), arg.shape(), arg.device())?,
            dt => bail!("im2col: unsupported dtype {dt:?}"),
        };
        Ok(Some(dx))
    }
}

/// Unfolds an `(H, W, C)` map into `(Ho * Wo, k * k * C)` patches ordered
/// `(ky, kx, c)`.
pub fn im2col(x: &Tensor, geo: ConvGeometry) -> CResult<Tensor> {
    let (h, w, c) = x.dims3()?;
    if h + 2 * geo.padding < geo.kernel || w + 2 * geo.padding < geo.kernel {
        bail!("im2col: kernel {} larger than padded input {h}x{w}", geo.kernel);
    }
    x.contiguous()?.apply_op1(Im2ColOp { geo, h, w, c })
}

// ---------------------------------------------------------------------------
// Multi-scale deformable sampling.

/// Spatial layout of a flattened multi-level feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelLayout {
    shapes: Vec<(usize, usize)>,
    starts: Vec<usize>,
}

impl LevelLayout {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut starts = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(h, w) in &shapes {
            starts.push(acc);
            acc += h * w;
        }
        Self { shapes, starts }
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn num_levels(&self) -> usize {
        self.shapes.len()
    }

    pub fn total(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    /// The first `n` levels only.
    pub fn truncated(&self, n: usize) -> Self {
        Self::new(self.shapes[..n].to_vec())
    }
}

struct DeformSampleOp {
    levels: LevelLayout,
}

/// Bilinear taps for one sampling location: `(token index, weight, d weight / d x, d weight / d y)`
/// in pixel units, zero padding outside the map.
fn bilinear_taps<T: Real>(
    loc_x: T,
    loc_y: T,
    h: usize,
    w: usize,
    start: usize,
    mut f: impl FnMut(usize, T, T, T),
) {
    let half = T::from_f64(0.5);
    let x = loc_x * T::from_f64(w as f64) - half;
    let y = loc_y * T::from_f64(h as f64) - half;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0i, y0i) = (x0.to_f64() as isize, y0.to_f64() as isize);
    let one = T::one();
    let corners = [
        (0isize, 0isize, (one - fx) * (one - fy), T::zero() - (one - fy), T::zero() - (one - fx)),
        (1, 0, fx * (one - fy), one - fy, T::zero() - fx),
        (0, 1, (one - fx) * fy, T::zero() - fy, one - fx),
        (1, 1, fx * fy, fy, fx),
    ];
    for (dx, dy, wgt, dwx, dwy) in corners {
        let (cx, cy) = (x0i + dx, y0i + dy);
        if cx < 0 || cy < 0 || cx >= w as isize || cy >= h as isize {
            continue;
        }
        f(start + cy as usize * w + cx as usize, wgt, dwx, dwy);
    }
}

impl DeformSampleOp {
    fn fwd<T: Real>(&self, value: &[T], loc: &[T], attn: &[T], dims: (usize, usize, usize, usize, usize)) -> Vec<T> {
        let (q, nh, dh, nl, np) = dims;
        let mut out = vec![T::zero(); q * nh * dh];
        for qi in 0..q {
            for hi in 0..nh {
                let dst = &mut out[(qi * nh + hi) * dh..(qi * nh + hi + 1) * dh];
                for li in 0..nl {
                    let (h, w) = self.levels.shapes[li];
                    let start = self.levels.starts[li];
                    for pi in 0..np {
                        let a_idx = ((qi * nh + hi) * nl + li) * np + pi;
                        let a = attn[a_idx];
                        let (lx, ly) = (loc[2 * a_idx], loc[2 * a_idx + 1]);
                        bilinear_taps(lx, ly, h, w, start, |tok, wgt, _, _| {
                            let s = a * wgt;
                            let src = &value[(tok * nh + hi) * dh..(tok * nh + hi + 1) * dh];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += s * v;
                            }
                        });
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn bwd<T: Real>(
        &self,
        value: &[T],
        loc: &[T],
        attn: &[T],
        grad: &[T],
        dims: (usize, usize, usize, usize, usize),
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (q, nh, dh, nl, np) = dims;
        let mut g_value = vec![T::zero(); value.len()];
        let mut g_loc = vec![T::zero(); loc.len()];
        let mut g_attn = vec![T::zero(); attn.len()];
        for qi in 0..q {
            for hi in 0..nh {
                let g = &grad[(qi * nh + hi) * dh..(qi * nh + hi + 1) * dh];
                for li in 0..nl {
                    let (h, w) = self.levels.shapes[li];
                    let start = self.levels.starts[li];
                    let (wf, hf) = (T::from_f64(w as f64), T::from_f64(h as f64));
                    for pi in 0..np {
                        let a_idx = ((qi * nh + hi) * nl + li) * np + pi;
                        let a = attn[a_idx];
                        let (lx, ly) = (loc[2 * a_idx], loc[2 * a_idx + 1]);
                        let mut ga = T::zero();
                        let mut gx = T::zero();
                        let mut gy = T::zero();
                        bilinear_taps(lx, ly, h, w, start, |tok, wgt, dwx, dwy| {
                            let base = (tok * nh + hi) * dh;
                            let mut dot = T::zero();
                            for i in 0..dh {
                                dot += value[base + i] * g[i];
                                g_value[base + i] += a * wgt * g[i];
                            }
                            ga += wgt * dot;
                            gx += dwx * dot;
                            gy += dwy * dot;
                        });
                        g_attn[a_idx] = ga;
                        g_loc[2 * a_idx] = a * gx * wf;
                        g_loc[2 * a_idx + 1] = a * gy * hf;
                    }
                }
            }
        }
        (g_value, g_loc, g_attn)
    }
}

fn deform_dims(value: &Layout, loc: &Layout) -> CResult<(usize, usize, usize, usize, usize)> {
    let (_, nh, dh) = value.shape().dims3()?;
    let d = loc.dims();
    if d.len() != 5 || d[4] != 2 {
        bail!("deformable sampling: locations must be (Q, heads, levels, points, 2), got {d:?}");
    }
    Ok((d[0], nh, dh, d[2], d[3]))
}

impl CustomOp3 for DeformSampleOp {
    fn name(&self) -> &'static str {
        "ms-deform-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = deform_dims(l1, l2)?;
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(self.fwd(
                slice::<f32>(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
                dims,
            )),
            DType::F64 => CpuStorage::F64(self.fwd(
                slice::<f64>(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
                dims,
            )),
            dt => bail!("deformable sampling: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((dims.0, dims.1 * dims.2))))
    }

    fn bwd(
        &self,
        value: &Tensor,
        loc: &Tensor,
        attn: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = deform_dims(value.layout(), loc.layout())?;
        let dev = value.device();
        macro_rules! run {
            ($t:ty) => {{
                let (gv, gl, ga) = self.bwd(
                    &host::<$t>(value)?,
                    &host::<$t>(loc)?,
                    &host::<$t>(attn)?,
                    &host::<$t>(grad)?,
                    dims,
                );
                (
                    Tensor::from_vec(gv, value.shape(), dev)?,
                    Tensor::from_vec(gl, loc.shape(), dev)?,
                    Tensor::from_vec(ga, attn.shape(), dev)?,
                )
            }};
        }
        let (gv, gl, ga) = match value.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => bail!("deformable sampling: unsupported dtype {dt:?}"),
        };
        Ok((Some(gv), Some(gl), Some(ga)))
    }
}

/// Attention-weighted bilinear sampling of a multi-level map.
///
/// * `value`: `(S, heads, head_dim)` with `S = Σ H_l W_l`, levels flattened row-major.
/// * `loc`: `(Q, heads, levels, points, 2)` sampling locations, normalized `(x, y)`.
/// * `attn`: `(Q, heads, levels, points)` weights.
///
/// Returns `(Q, heads * head_dim)`. Locations outside the map read zeros.
pub fn deform_sample(value: &Tensor, loc: &Tensor, attn: &Tensor, levels: &LevelLayout) -> CResult<Tensor> {
    let (s, _, _) = value.dims3()?;
    if s != levels.total() {
        bail!("deformable sampling: value has {s} tokens, levels describe {}", levels.total());
    }
    let ld = loc.dims();
    if ld.len() != 5 || ld[2] != levels.num_levels() {
        bail!("deformable sampling: location shape {ld:?} does not match {} levels", levels.num_levels());
    }
    value.contiguous()?.apply_op3(
        &loc.contiguous()?,
        &attn.contiguous()?,
        DeformSampleOp {
            levels: levels.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_var(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Var {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
    }

    /// Central finite differences of `f` against autograd, over every input entry.
    fn check_grad(vars: &[Var], f: impl Fn(&[Tensor]) -> Tensor, tol: f64) {
        let inputs: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let loss = f(&inputs);
        let grads = loss.backward().unwrap();
        let h = 1e-5;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    let mut ins = inputs.clone();
                    ins[vi] = Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap();
                    f(&ins).to_scalar::<f64>().unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let scale = numeric.abs().max(analytic[i].abs()).max(1e-3);
                assert!(
                    (numeric - analytic[i]).abs() / scale <= tol,
                    "input {vi} entry {i}: numeric {numeric} analytic {}",
                    analytic[i]
                );
            }
        }
    }

    fn weighted_sum(t: &Tensor, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t.elem_count();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::from_vec(w, t.shape(), t.device()).unwrap();
        (t * w).unwrap().sum_all().unwrap()
    }

    #[test]
    fn layer_norm_matches_reference_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_var(&mut rng, &[3, 5], -2.0, 2.0);
        let g = rand_var(&mut rng, &[5], 0.5, 1.5);
        let b = rand_var(&mut rng, &[5], -0.5, 0.5);
        let y = layer_norm(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        let xs = x.as_tensor().to_vec2::<f64>().unwrap();
        let ys = y.to_vec2::<f64>().unwrap();
        let gs = g.as_tensor().to_vec1::<f64>().unwrap();
        let bs = b.as_tensor().to_vec1::<f64>().unwrap();
        for (row, out) in xs.iter().zip(&ys) {
            let m = row.iter().sum::<f64>() / 5.0;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 5.0;
            for i in 0..5 {
                let expect = (row[i] - m) / (v + 1e-5).sqrt() * gs[i] + bs[i];
                assert!((expect - out[i]).abs() < 1e-12);
            }
        }
        check_grad(
            &[x, g, b],
            |t| weighted_sum(&layer_norm(&t[0], &t[1], &t[2], 1e-5).unwrap(), 7),
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_var(&mut rng, &[4, 6], -3.0, 3.0);
        let y = softmax_last_dim(x.as_tensor()).unwrap();
        for row in y.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        check_grad(&[x], |t| weighted_sum(&softmax_last_dim(&t[0]).unwrap(), 3), 1e-6);
    }

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let x = Tensor::new(&[[1.0f32, f32::NEG_INFINITY, 2.0], [f32::NEG_INFINITY; 3]], &Device::Cpu).unwrap();
        let y = softmax_last_dim(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(y[0][1], 0.0);
        assert_eq!(y[1], vec![0.0; 3]);
    }

    #[test]
    fn im2col_reference_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_var(&mut rng, &[5, 4, 2], -1.0, 1.0);
        let geo = ConvGeometry { kernel: 3, stride: 2, padding: 1 };
        let cols = im2col(x.as_tensor(), geo).unwrap();
        assert_eq!(cols.dims(), &[3 * 2, 18]);
        let xs = x.as_tensor().to_vec3::<f64>().unwrap();
        let cs = cols.to_vec2::<f64>().unwrap();
        // Output (1, 1) reads input rows 1..=3 and columns 1..=3.
        let row = &cs[1 * 2 + 1];
        for ky in 0..3 {
            for kx in 0..3 {
                for c in 0..2 {
                    assert_eq!(row[(ky * 3 + kx) * 2 + c], xs[1 + ky][1 + kx][c]);
                }
            }
        }
        // Output (0, 0) reads the zero padding at its top-left tap.
        assert_eq!(cs[0][0], 0.0);
        check_grad(&[x], |t| weighted_sum(&im2col(&t[0], geo).unwrap(), 4), 1e-6);
    }

    #[test]
    fn deform_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let levels = LevelLayout::new(vec![(3, 4), (2, 2)]);
        let value = rand_var(&mut rng, &[16, 2, 3], -1.0, 1.0);
        // Includes locations slightly outside the unit square.
        let loc = rand_var(&mut rng, &[2, 2, 2, 2, 2], -0.1, 1.1);
        let attn = rand_var(&mut rng, &[2, 2, 2, 2], 0.0, 1.0);
        check_grad(
            &[value, loc, attn],
            |t| weighted_sum(&deform_sample(&t[0], &t[1], &t[2], &levels).unwrap(), 5),
            1e-4,
        );
    }

    #[test]
    fn deform_sample_at_cell_center_reads_the_cell() {
        let levels = LevelLayout::new(vec![(2, 3)]);
        let v: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let value = Tensor::from_vec(v, (6, 1, 1), &Device::Cpu).unwrap();
        // Cell (row 1, col 2) has center ((2 + 0.5) / 3, (1 + 0.5) / 2).
        let loc = Tensor::from_vec(vec![2.5f32 / 3.0, 0.75], (1, 1, 1, 1, 2), &Device::Cpu).unwrap();
        let attn = Tensor::from_vec(vec![1.0f32], (1, 1, 1, 1), &Device::Cpu).unwrap();
        let out = deform_sample(&value, &loc, &attn, &levels).unwrap();
        assert!((out.to_vec2::<f32>().unwrap()[0][0] - 5.0).abs() < 1e-5);
    }
}
