//! Feed-forward networks (tanh hidden layers, linear output) with exact
//! reverse-mode gradients, Adam, and a flat binary checkpoint format.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`, so a batch is multiplied as `x.dot(&w)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations of every layer from a forward pass, input first.
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache has at least the input")
    }
}

fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let q = DMatrix::from_fn(big, small, |i, j| if r[(j, j)] < 0.0 { -q[(i, j)] } else { q[(i, j)] });
    Array2::from_shape_fn((rows, cols), |(i, j)| gain * if rows >= cols { q[(i, j)] } else { q[(j, i)] })
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least an input and an output size");
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Linear {
                    w: Array2::zeros((w[0], w[1])),
                    b: Array1::zeros(w[1]),
                })
                .collect(),
        }
    }

    /// Orthogonal weights (`hidden_gain` for hidden layers, `output_gain`
    /// for the last one) and zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(sizes: &[usize], hidden_gain: f64, output_gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (r, c) = layer.w.dim();
            layer.w = orthogonal(r, c, if i == last { output_gain } else { hidden_gain }, rng);
        }
        net
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].w.nrows()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<MlpCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("input width {} != {}", x.ncols(), self.input_dim())));
        }
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&l.w) + &l.b;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Ok(MlpCache { activations: acts })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().unwrap())
    }

    /// Gradients of `sum(grad_out * output)` w.r.t. every parameter (returned
    /// in an `Mlp` of the same shape) and w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: ArrayView2<f64>) -> Result<(Mlp, Array2<f64>)> {
        let out = cache.output();
        if grad_out.dim() != out.dim() || cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match cached output {:?}",
                grad_out.dim(),
                out.dim()
            )));
        }
        let mut grads: Vec<Linear> = Vec::with_capacity(self.layers.len());
        let mut dz = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            let a = &cache.activations[i];
            let l = &self.layers[i];
            grads.push(Linear {
                w: a.t().dot(&dz).as_standard_layout().into_owned(),
                b: dz.sum_axis(Axis(0)),
            });
            let mut da = dz.dot(&l.w.t());
            if i > 0 {
                da.zip_mut_with(a, |g, &h| *g *= 1.0 - h * h);
            }
            dz = da;
        }
        grads.reverse();
        Ok((Mlp { layers: grads }, dz))
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().expect("standard layout"), l.b.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self <- tau * src + (1 - tau) * self`
    /// `tau == 0` is a no-op and `tau == 1` an exact copy.
    pub fn soft_update_from(&mut self, src: &Mlp, tau: f64) {
        if tau == 0.0 {
            return;
        }
        if tau == 1.0 {
            *self = src.clone();
            return;
        }
        for (d, s) in self.tensors_mut().into_iter().zip(src.tensors()) {
            for (a, b) in d.iter_mut().zip(s) {
                *a = tau * b + (1.0 - tau) * *a;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (d, s) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in d.iter_mut().zip(s) {
                *a += b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_tensors(lr: f64, tensors: &[&[f64]]) -> Self {
        Self::new(lr, &tensors.iter().map(|t| t.len()).collect::<Vec<_>>())
    }

    /// One bias-corrected update. Refuses non-finite gradients without
    /// touching the parameters or the moments.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer tensor count mismatch".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape("optimizer tensor size mismatch".into()));
            }
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

const MLP_MAGIC: &[u8; 8] = b"GSHMLP\0\0";
const MLP_VERSION: u32 = 1;

/// Appends the checkpoint blob: magic, version, layer-size table, then
/// every weight matrix (row-major) followed by its bias, as little-endian f64.
pub fn write_mlp(net: &Mlp, out: &mut Vec<u8>) {
    out.extend_from_slice(MLP_MAGIC);
    out.extend_from_slice(&MLP_VERSION.to_le_bytes());
    let sizes = net.sizes();
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in sizes {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for t in net.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub(crate) fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if input.len() < n {
        return Err(Error::Checkpoint("unexpected end of data".into()));
    }
    let (head, rest) = input.split_at(n);
    *input = rest;
    Ok(head)
}

pub(crate) fn take_u32(input: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(input, 4)?.try_into().unwrap()))
}

pub(crate) fn take_u64(input: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(input, 8)?.try_into().unwrap()))
}

pub(crate) fn take_f64(input: &mut &[u8]) -> Result<f64> {
    Ok(f64::from_le_bytes(take(input, 8)?.try_into().unwrap()))
}

pub fn read_mlp(input: &mut &[u8]) -> Result<Mlp> {
    if take(input, 8)? != MLP_MAGIC {
        return Err(Error::Checkpoint("not a network blob (bad magic)".into()));
    }
    let version = take_u32(input)?;
    if version != MLP_VERSION {
        return Err(Error::Checkpoint(format!("network blob version {version} unsupported")));
    }
    let n = take_u32(input)? as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::Checkpoint(format!("implausible layer count {n}")));
    }
    let sizes = (0..n).map(|_| take_u64(input).map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
    if sizes.iter().any(|&s| s == 0 || s > 1 << 20) {
        return Err(Error::Checkpoint("implausible layer size".into()));
    }
    let mut net = Mlp::zeros(&sizes);
    for t in net.tensors_mut() {
        for x in t.iter_mut() {
            *x = take_f64(input)?;
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::array;

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]);
        let y = net.forward(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn identity_layer() {
        let mut net = Mlp::zeros(&[2, 2]);
        net.layers[0].w = Array2::eye(2);
        let x = array![[0.3, -1.7], [2.0, 5.0]];
        assert_eq!(net.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn hand_forward_2_3_1() {
        let mut net = Mlp::zeros(&[2, 3, 1]);
        net.layers[0].w = array![[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]];
        net.layers[0].b = array![0.01, 0.02, 0.03];
        net.layers[1].w = array![[0.7], [-0.8], [0.9]];
        net.layers[1].b = array![0.05];
        // x = (1, 2): z = (0.1+0.8+0.01, -0.2+1.0+0.02, 0.3-1.2+0.03) = (0.91, 0.82, -0.87)
        let h = [0.91f64.tanh(), 0.82f64.tanh(), (-0.87f64).tanh()];
        let hand = 0.7 * h[0] - 0.8 * h[1] + 0.9 * h[2] + 0.05;
        let y = net.forward(array![[1.0, 2.0]].view()).unwrap();
        assert!((y[[0, 0]] - hand).abs() < 1e-12);
    }

    #[test]
    fn linear_1x1_gradient_structure() {
        let mut net = Mlp::zeros(&[1, 1]);
        net.layers[0].w[[0, 0]] = 3.0;
        let cache = net.forward_cached(array![[2.0]].view()).unwrap();
        let (g, gx) = net.backward(&cache, array![[5.0]].view()).unwrap();
        assert_eq!(g.layers[0].w[[0, 0]], 10.0); // g * x
        assert_eq!(g.layers[0].b[0], 5.0);
        assert_eq!(gx[[0, 0]], 15.0); // g * w
    }

    #[test]
    fn batch_gradient_is_sum_of_rows() {
        let mut rng = stream_rng(4, 0);
        let net = Mlp::orthogonal(&[3, 6, 2], 2f64.sqrt(), 1.0, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.5) * 0.3 + j as f64 * 0.1);
        let go = Array2::from_shape_fn((4, 2), |(i, j)| 0.2 * i as f64 - 0.5 * j as f64);
        let (full, _) = net.backward(&net.forward_cached(x.view()).unwrap(), go.view()).unwrap();
        let mut acc = Mlp::zeros(&[3, 6, 2]);
        for r in 0..4 {
            let xr = x.slice(ndarray::s![r..r + 1, ..]);
            let gr = go.slice(ndarray::s![r..r + 1, ..]);
            let (g, _) = net.backward(&net.forward_cached(xr).unwrap(), gr).unwrap();
            acc.add_assign(&g);
        }
        for (a, b) in full.tensors().iter().zip(acc.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::zeros(&[3, 2]);
        assert!(net.forward(array![[1.0, 2.0]].view()).is_err());
        let cache = net.forward_cached(array![[1.0, 2.0, 3.0]].view()).unwrap();
        assert!(net.backward(&cache, array![[1.0]].view()).is_err());
    }

    #[test]
    fn orthogonal_init_columns_are_orthonormal() {
        let mut rng = stream_rng(1, 1);
        let net = Mlp::orthogonal(&[8, 5, 12], 1.0, 1.0, &mut rng);
        let w = &net.layers[0].w; // 8x5, columns orthonormal
        let g = w.t().dot(w);
        for i in 0..5 {
            for j in 0..5 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - e).abs() < 1e-12);
            }
        }
        let w = &net.layers[1].w; // 5x12, rows orthonormal
        let g = w.dot(&w.t());
        for i in 0..5 {
            assert!((g[[i, i]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.5, -2.0];
        let mut adam = Adam::new(1e-3, &[2]);
        adam.step(&mut [&mut p[..]], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = vec![0.0];
        let mut adam = Adam::new(1e-3, &[1]);
        adam.step(&mut [&mut p[..]], &[&[1.0]]).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        let expect = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expect).abs() < 1e-18);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let run = || {
            let mut p = vec![0.3, 0.1, -0.7];
            let mut adam = Adam::new(1e-2, &[3]);
            for k in 0..5 {
                let g = [0.1 * k as f64, -0.2, 0.05];
                adam.step(&mut [&mut p[..]], &[&g]).unwrap();
            }
            (p, adam)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(sa, sb);
        let mut p = vec![0.0];
        let mut adam = Adam::new(1e-3, &[1]);
        assert!(adam.step(&mut [&mut p[..]], &[&[f64::NAN]]).is_err());
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_grad_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_eq!(n, 5.0);
        assert!(((a[0] * a[0] + b[0] * b[0]).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blob_round_trip_and_rejection() {
        let mut rng = stream_rng(2, 2);
        let net = Mlp::orthogonal(&[4, 7, 3], 1.0, 0.01, &mut rng);
        let mut bytes = Vec::new();
        write_mlp(&net, &mut bytes);
        assert_eq!(bytes.len(), 8 + 4 + 4 + 3 * 8 + net.param_count() * 8);
        let back = read_mlp(&mut &bytes[..]).unwrap();
        assert_eq!(back, net);
        assert!(read_mlp(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_mlp(&mut &bad[..]).is_err());
    }
}
