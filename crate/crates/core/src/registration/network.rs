//! Shared per-cluster pose regressor: sinusoidal encoding, MLP encoder,
//! separate position and rotation decoders, manual reverse-mode gradients.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Rotation parameterization fed to and produced by the regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationRepr {
    Quaternion,
    Rot6d,
}

impl RotationRepr {
    pub fn dim(self) -> usize {
        match self {
            RotationRepr::Quaternion => 4,
            RotationRepr::Rot6d => 6,
        }
    }
}

impl std::str::FromStr for RotationRepr {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "quaternion" => Ok(RotationRepr::Quaternion),
            "rot6d" => Ok(RotationRepr::Rot6d),
            other => Err(crate::Error::Config(format!("unknown rotation representation `{other}`"))),
        }
    }
}

/// `[x, sin(2^k pi x), cos(2^k pi x)]` for `k = 0..bands`, each block componentwise.
pub fn positional_encode(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (1 + 2 * bands));
    out.extend_from_slice(x);
    for k in 0..bands {
        let f = (1u64 << k) as f64 * PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

pub fn encoded_dim(d: usize, bands: usize) -> usize {
    d * (1 + 2 * bands)
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    input: usize,
    output: usize,
    offset: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.input * self.output + self.output
    }

    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.input, self.output), &params[self.offset..self.offset + self.input * self.output])
            .expect("layer shape")
    }

    fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        let start = self.offset + self.input * self.output;
        ArrayView1::from(&params[start..start + self.output])
    }

    fn forward(&self, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights(params)) + &self.bias(params)
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient.
    fn backward(&self, params: &[f64], x: &Array2<f64>, dy: &Array2<f64>, grad: &mut [f64], need_dx: bool) -> Option<Array2<f64>> {
        let dw = x.t().dot(dy);
        let gw = &mut grad[self.offset..self.offset + self.input * self.output];
        for (g, d) in gw.iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let db = dy.sum_axis(Axis(0));
        let start = self.offset + self.input * self.output;
        for (g, d) in grad[start..start + self.output].iter_mut().zip(db.iter()) {
            *g += d;
        }
        need_dx.then(|| dy.dot(&self.weights(params).t()))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v * sigmoid(v))
}

fn silu_backward(z: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(z, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    out
}

/// Layer sizes of the regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkShape {
    pub hidden_width: usize,
    pub encoder_layers: usize,
    pub pe_bands: usize,
    pub repr: RotationRepr,
}

impl NetworkShape {
    /// Raw per-cluster input/output width: position plus rotation parameters.
    pub fn pose_dim(&self) -> usize {
        3 + self.repr.dim()
    }
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache {
    enc_pre: Vec<Array2<f64>>,
    enc_in: Vec<Array2<f64>>,
    hidden: Array2<f64>,
    pos_pre: Array2<f64>,
    pos_act: Array2<f64>,
    rot_pre: Array2<f64>,
    rot_act: Array2<f64>,
}

/// MLP applied independently to every cluster with shared weights.
#[derive(Clone, Debug)]
pub struct Regressor {
    shape: NetworkShape,
    encoder: Vec<Dense>,
    pos_head: [Dense; 2],
    rot_head: [Dense; 2],
    params: Vec<f64>,
}

impl Regressor {
    /// Fan-in uniform initialization; both decoder output layers start at zero
    /// so the initial residual is exactly zero.
    pub fn new(shape: NetworkShape, rng: &mut ChaCha8Rng) -> Self {
        let h = shape.hidden_width.max(1);
        let half = (h / 2).max(1);
        let mut offset = 0;
        let mut layer = |input: usize, output: usize| {
            let l = Dense { input, output, offset };
            offset += l.len();
            l
        };
        let mut encoder = Vec::with_capacity(shape.encoder_layers);
        let mut width = encoded_dim(shape.pose_dim(), shape.pe_bands);
        for _ in 0..shape.encoder_layers.max(1) {
            encoder.push(layer(width, h));
            width = h;
        }
        let pos_head = [layer(h, half), layer(half, 3)];
        let rot_head = [layer(h, half), layer(half, shape.repr.dim())];
        let mut params = vec![0.0; offset];
        let hidden_layers = encoder.iter().chain([&pos_head[0], &rot_head[0]]);
        for l in hidden_layers {
            let bound = 1.0 / (l.input as f64).sqrt();
            for p in &mut params[l.offset..l.offset + l.len()] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Regressor {
            shape,
            encoder,
            pos_head,
            rot_head,
            params,
        }
    }

    /// Non-zero decoder outputs, for gradient checks.
    pub fn randomize_output_layers(&mut self, rng: &mut ChaCha8Rng, scale: f64) {
        for l in [self.pos_head[1], self.rot_head[1]] {
            for p in &mut self.params[l.offset..l.offset + l.len()] {
                *p = rng.gen_range(-scale..scale);
            }
        }
    }

    pub fn seeded(shape: NetworkShape, seed: u64) -> Self {
        Regressor::new(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Residuals for a batch of raw pose rows `(S, pose_dim)`.
    pub fn forward(&self, inputs: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let bands = self.shape.pe_bands;
        let rows: Vec<f64> = inputs
            .rows()
            .into_iter()
            .flat_map(|r| positional_encode(&r.to_vec(), bands))
            .collect();
        let encoded = Array2::from_shape_vec((inputs.nrows(), encoded_dim(inputs.ncols(), bands)), rows)
            .expect("encoding shape");
        let p = &self.params;
        let mut x = encoded;
        let mut enc_pre = Vec::with_capacity(self.encoder.len());
        let mut enc_in = Vec::with_capacity(self.encoder.len());
        for l in &self.encoder {
            let z = l.forward(p, &x);
            enc_in.push(x);
            x = silu(&z);
            enc_pre.push(z);
        }
        let hidden = x;
        let pos_pre = self.pos_head[0].forward(p, &hidden);
        let pos_act = silu(&pos_pre);
        let dpos = self.pos_head[1].forward(p, &pos_act);
        let rot_pre = self.rot_head[0].forward(p, &hidden);
        let rot_act = silu(&rot_pre);
        let drot = self.rot_head[1].forward(p, &rot_act);
        let mut out = Array2::zeros((inputs.nrows(), self.shape.pose_dim()));
        out.slice_mut(ndarray::s![.., 0..3]).assign(&dpos);
        out.slice_mut(ndarray::s![.., 3..]).assign(&drot);
        let cache = ForwardCache {
            enc_pre,
            enc_in,
            hidden,
            pos_pre,
            pos_act,
            rot_pre,
            rot_act,
        };
        (out, cache)
    }

    /// Parameter gradient given the gradient of the loss w.r.t. the residual outputs.
    pub fn backward(&self, cache: &ForwardCache, dout: &Array2<f64>) -> Vec<f64> {
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let dpos = dout.slice(ndarray::s![.., 0..3]).to_owned();
        let drot = dout.slice(ndarray::s![.., 3..]).to_owned();

        let da = self.pos_head[1].backward(p, &cache.pos_act, &dpos, &mut grad, true).unwrap();
        let dz = silu_backward(&cache.pos_pre, &da);
        let mut dh = self.pos_head[0].backward(p, &cache.hidden, &dz, &mut grad, true).unwrap();

        let da = self.rot_head[1].backward(p, &cache.rot_act, &drot, &mut grad, true).unwrap();
        let dz = silu_backward(&cache.rot_pre, &da);
        dh += &self.rot_head[0].backward(p, &cache.hidden, &dz, &mut grad, true).unwrap();

        for (k, l) in self.encoder.iter().enumerate().rev() {
            let dz = silu_backward(&cache.enc_pre[k], &dh);
            match l.backward(p, &cache.enc_in[k], &dz, &mut grad, k > 0) {
                Some(dx) => dh = dx,
                None => break,
            }
        }
        grad
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    m: Array1<f64>,
    v: Array1<f64>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: Array1::zeros(n),
            v: Array1::zeros(n),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}
