//! Forward kernels and their hand-written adjoints.
//!
//! The graph in `graph.rs` calls into these; the public functions are also
//! usable directly for inference-only code and tests.

use serde::{Deserialize, Serialize};

use super::{Graph, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Probability clamp applied before taking logs in the BCE loss.
pub const BCE_EPS: f64 = 1e-7;
/// Variance stabiliser in layer normalisation.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Gelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// dy/dx given the pre-activation `x` and the output `y`.
    #[inline]
    pub(crate) fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Gelu => gelu_derivative(x),
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_derivative<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let k = T::of(SQRT_2_OVER_PI);
    let c = T::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn op_dims<T: Real>(a: &Tensor<T>, transposed: bool) -> (usize, usize, isize, isize) {
    let (r, c) = (a.rows(), a.cols());
    if transposed {
        (c, r, 1, c as isize)
    } else {
        (r, c, c as isize, 1)
    }
}

/// `out = beta * out + op(a) · op(b)`, where `out` is already shaped m×n.
pub(crate) fn matmul_into<T: Real>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    beta: T,
    out: &mut Tensor<T>,
) -> Result<()> {
    let (m, k, rsa, csa) = op_dims(a, ta);
    let (k2, n, rsb, csb) = op_dims(b, tb);
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dims {k} vs {k2} ({:?}{} · {:?}{})",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        )));
    }
    if out.rows() != m || out.cols() != n {
        return Err(shape_err(format!("matmul output {:?}, expected {m}x{n}", out.shape())));
    }
    T::gemm(m, k, n, T::one(), a.data(), rsa, csa, b.data(), rsb, csb, beta, out.data_mut(), n as isize, 1);
    Ok(())
}

pub(crate) fn matmul<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (m, _, _, _) = op_dims(a, ta);
    let (_, n, _, _) = op_dims(b, tb);
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(a, ta, b, tb, T::zero(), &mut out)?;
    Ok(out)
}

pub(crate) fn add_bias_inplace<T: Real>(x: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if b.numel() != x.cols() {
        return Err(shape_err(format!("bias of {} for {} columns", b.numel(), x.cols())));
    }
    let c = x.cols();
    for row in x.data_mut().chunks_mut(c) {
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(())
}

pub(crate) fn column_sums<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); x.cols()];
    for r in 0..x.rows() {
        for (o, &v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// `act(x · w + b)` for `x` of shape T×Din, `w` Din×Dout, `b` Dout.
pub fn dense_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    let mut y = matmul(x, false, w, false)?;
    add_bias_inplace(&mut y, b)?;
    if activation != Activation::Identity {
        for v in y.data_mut() {
            *v = activation.apply(*v);
        }
    }
    Ok(y)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    let c = y.cols();
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dot: T = yr.iter().zip(dy.row(r)).map(|(&a, &b)| a * b).sum();
        for (d, &yv) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(yr) {
            *d = yv * (*d - dot);
        }
    }
    dx
}

pub(crate) struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalisation with biased (1/d) variance.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    layer_norm_cached(x, gamma, beta).map(|(y, _)| y)
}

pub(crate) fn layer_norm_cached<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if d < 2 {
        return Err(shape_err("layer norm needs at least 2 features"));
    }
    if gamma.numel() != d || beta.numel() != d {
        return Err(shape_err(format!(
            "layer norm over {d} features with gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let n = T::of(d as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let yr = &mut y.data_mut()[r * d..(r + 1) * d];
        for (j, out) in yr.iter_mut().enumerate() {
            *out = xhat.get(r, j) * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = dy.cols();
    let n = T::of(d as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            let dxh = dyr[j] * gamma.data()[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let scale = cache.inv_std[r] / n;
        let out = dx.row_mut(r);
        for j in 0..d {
            let dxh = dyr[j] * gamma.data()[j];
            out[j] = scale * (n * dxh - sum_dxh - xh[j] * sum_dxh_xh);
        }
    }
    (dx, Tensor::vector(dgamma), Tensor::vector(dbeta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Weights of one LSTM direction. Gate blocks are ordered input, forget,
/// candidate, output along the `4H` axis.
#[derive(Debug, Clone)]
pub struct LstmParams<T> {
    /// Din × 4H
    pub wx: Tensor<T>,
    /// H × 4H
    pub wh: Tensor<T>,
    /// 4H
    pub b: Tensor<T>,
}

pub(crate) struct LstmCache<T> {
    /// Post-activation gates, T × 4H, indexed by time.
    gates: Vec<T>,
    /// Cell states, T × H.
    cells: Vec<T>,
    tanh_cells: Vec<T>,
}

fn lstm_hidden<T: Real>(x: &Tensor<T>, wx: &Tensor<T>, wh: &Tensor<T>, b: &Tensor<T>) -> Result<usize> {
    let h = wh.rows();
    if wh.cols() != 4 * h || wx.cols() != 4 * h || b.numel() != 4 * h {
        return Err(shape_err(format!(
            "lstm weights wx {:?} wh {:?} b {:?} disagree on hidden size",
            wx.shape(),
            wh.shape(),
            b.shape()
        )));
    }
    if x.cols() != wx.rows() {
        return Err(shape_err(format!("lstm input width {} vs wx rows {}", x.cols(), wx.rows())));
    }
    Ok(h)
}

fn time_order(len: usize, dir: Direction) -> impl DoubleEndedIterator<Item = usize> + Clone {
    let rev = dir == Direction::Backward;
    (0..len).map(move |s| if rev { len - 1 - s } else { s })
}

/// `acc += v · m` for a row-major `v.len() × acc.len()` matrix.
fn vec_mat_acc<T: Real>(v: &[T], m: &[T], acc: &mut [T]) {
    for (&vi, row) in v.iter().zip(m.chunks_exact(acc.len())) {
        for (a, &w) in acc.iter_mut().zip(row) {
            *a += vi * w;
        }
    }
}

/// `out = m · v` for a row-major `out.len() × v.len()` matrix.
fn mat_vec<T: Real>(m: &[T], v: &[T], out: &mut [T]) {
    const LANES: usize = 8;
    for (o, row) in out.iter_mut().zip(m.chunks_exact(v.len())) {
        let mut lanes = [T::zero(); LANES];
        let (rh, rt) = row.split_at(row.len() - row.len() % LANES);
        let (vh, vt) = v.split_at(rh.len());
        for (rc, vc) in rh.chunks_exact(LANES).zip(vh.chunks_exact(LANES)) {
            for k in 0..LANES {
                lanes[k] += rc[k] * vc[k];
            }
        }
        let mut sum = lanes.iter().fold(T::zero(), |a, &b| a + b);
        for (&r, &x) in rt.iter().zip(vt) {
            sum += r * x;
        }
        *o = sum;
    }
}

/// Single-direction LSTM over a T×Din sequence, zero initial state.
/// The backward direction walks the sequence from the end but returns
/// outputs in the original time order.
pub fn lstm_forward<T: Real>(x: &Tensor<T>, p: &LstmParams<T>, dir: Direction) -> Result<Tensor<T>> {
    lstm_forward_cached(x, &p.wx, &p.wh, &p.b, dir).map(|(y, _)| y)
}

pub(crate) fn lstm_forward_cached<T: Real>(
    x: &Tensor<T>,
    wx: &Tensor<T>,
    wh: &Tensor<T>,
    b: &Tensor<T>,
    dir: Direction,
) -> Result<(Tensor<T>, LstmCache<T>)> {
    let h = lstm_hidden(x, wx, wh, b)?;
    let steps = x.rows();
    let g4 = 4 * h;
    let mut pre = matmul(x, false, wx, false)?;
    add_bias_inplace(&mut pre, b)?;
    let mut gates = pre.into_data();
    let mut cells = vec![T::zero(); steps * h];
    let mut tanh_cells = vec![T::zero(); steps * h];
    let mut out = vec![T::zero(); steps * h];
    let mut prev: Option<usize> = None;
    for t in time_order(steps, dir) {
        let a = &mut gates[t * g4..(t + 1) * g4];
        if let Some(p) = prev {
            vec_mat_acc(&out[p * h..(p + 1) * h], wh.data(), a);
        }
        for j in 0..h {
            let i = sigmoid(a[j]);
            let f = sigmoid(a[h + j]);
            let g = a[2 * h + j].tanh();
            let o = sigmoid(a[3 * h + j]);
            a[j] = i;
            a[h + j] = f;
            a[2 * h + j] = g;
            a[3 * h + j] = o;
            let c_prev = prev.map_or(T::zero(), |p| cells[p * h + j]);
            let c = f * c_prev + i * g;
            let tc = c.tanh();
            cells[t * h + j] = c;
            tanh_cells[t * h + j] = tc;
            out[t * h + j] = o * tc;
        }
        prev = Some(t);
    }
    Ok((Tensor::matrix(steps, h, out)?, LstmCache { gates, cells, tanh_cells }))
}

pub(crate) struct LstmGrads<T> {
    pub dx: Tensor<T>,
    pub dwx: Tensor<T>,
    pub dwh: Tensor<T>,
    pub db: Tensor<T>,
}

/// Backpropagation through time for [`lstm_forward_cached`].
pub(crate) fn lstm_backward<T: Real>(
    x: &Tensor<T>,
    wx: &Tensor<T>,
    wh: &Tensor<T>,
    out: &Tensor<T>,
    cache: &LstmCache<T>,
    dout: &Tensor<T>,
    dir: Direction,
) -> Result<LstmGrads<T>> {
    let h = wh.rows();
    let g4 = 4 * h;
    let steps = x.rows();
    let mut dz = Tensor::zeros(&[steps, g4]);
    // h_{t-1} in processing order, zero for the first processed step
    let mut h_prev = Tensor::zeros(&[steps, h]);
    let order: Vec<usize> = time_order(steps, dir).collect();
    let mut dh_next = vec![T::zero(); h];
    let mut dc_next = vec![T::zero(); h];
    for s in (0..steps).rev() {
        let t = order[s];
        let prev = if s > 0 { Some(order[s - 1]) } else { None };
        if let Some(p) = prev {
            h_prev.row_mut(t).copy_from_slice(out.row(p));
        }
        let gt = &cache.gates[t * g4..(t + 1) * g4];
        let dzt = dz.row_mut(t);
        for j in 0..h {
            let (i, f, g, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
            let tc = cache.tanh_cells[t * h + j];
            let dh = dout.get(t, j) + dh_next[j];
            let dc = dh * o * (T::one() - tc * tc) + dc_next[j];
            let c_prev = prev.map_or(T::zero(), |p| cache.cells[p * h + j]);
            dzt[j] = dc * g * i * (T::one() - i);
            dzt[h + j] = dc * c_prev * f * (T::one() - f);
            dzt[2 * h + j] = dc * i * (T::one() - g * g);
            dzt[3 * h + j] = dh * tc * o * (T::one() - o);
            dc_next[j] = dc * f;
        }
        if prev.is_some() {
            // dh_next = dz_t · whᵀ
            mat_vec(wh.data(), dzt, &mut dh_next);
        }
    }
    let dwh = matmul(&h_prev, true, &dz, false)?;
    let dwx = matmul(x, true, &dz, false)?;
    let db = column_sums(&dz);
    let dx = matmul(&dz, false, wx, true)?;
    Ok(LstmGrads { dx, dwx, dwh, db })
}

/// Projection weights for multi-head attention (all d×d, biases d).
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

/// Scaled dot-product attention with `n_heads` heads and an output projection.
pub fn multihead_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    p: &AttentionParams<T>,
    n_heads: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (q, k, v) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let w = [&p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo, &p.bo].map(|t| g.input(t.clone()));
    let out = g.multihead_attention(q, k, v, w, n_heads)?;
    Ok(g.value(out).clone())
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Real>(p: &[T], y: &[T]) -> Result<T> {
    if p.len() != y.len() {
        return Err(shape_err(format!("bce: {} predictions, {} labels", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::InvalidInput("bce over zero frames".into()));
    }
    let lo = T::of(BCE_EPS);
    let hi = T::one() - lo;
    let total: T = p
        .iter()
        .zip(y)
        .map(|(&pv, &yv)| {
            let pc = pv.max(lo).min(hi);
            yv * pc.ln() + (T::one() - yv) * (T::one() - pc).ln()
        })
        .sum();
    Ok(-total / T::of(p.len() as f64))
}

pub(crate) fn bce_grad<T: Real>(p: &[T], y: &[T]) -> Vec<T> {
    let lo = T::of(BCE_EPS);
    let hi = T::one() - lo;
    let n = T::of(p.len() as f64);
    p.iter()
        .zip(y)
        .map(
            |(&pv, &yv)| {
                if pv < lo || pv > hi {
                    T::zero()
                } else {
                    -(yv / pv - (T::one() - yv) / (T::one() - pv)) / n
                }
            },
        )
        .collect()
}
