//! Factorized bilinear pooling of an audio vector `a` (length m) and a video
//! vector `v` (length n).
//!
//! Each output `z_i = aᵀ W_i v` uses a rank-k factorization
//! `W_i = Σ_d u_{i,d} v_{i,d}ᵀ`. The k factor pairs of output `i` are the
//! consecutive columns `i·k .. i·k + k` of the projection matrices, so the
//! full block is two bias-free projections, an element-wise product, and a
//! sum over windows of k.

use rand::Rng;

use crate::attention::uniform;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FbpParams {
    /// m×(k·o)
    pub audio_proj: Tensor,
    /// n×(k·o)
    pub video_proj: Tensor,
    pub k: usize,
    pub o: usize,
    pub dropout_p: f64,
}

impl FbpParams {
    pub fn new(
        audio_proj: Tensor,
        video_proj: Tensor,
        k: usize,
        o: usize,
        dropout_p: f64,
    ) -> Result<Self> {
        if k == 0 || o == 0 {
            return Err(Error::Input(format!(
                "FBP needs k >= 1 and o >= 1, got k={k}, o={o}"
            )));
        }
        for (t, what) in [(&audio_proj, "audio"), (&video_proj, "video")] {
            if t.rank() != 2 || t.shape()[1] != k * o {
                return Err(Error::Dimension(format!(
                    "{what} projection {:?} must have exactly k·o = {} columns",
                    t.shape(),
                    k * o
                )));
            }
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Input(format!(
                "dropout probability {dropout_p} outside [0, 1)"
            )));
        }
        Ok(Self {
            audio_proj,
            video_proj,
            k,
            o,
            dropout_p,
        })
    }

    /// Projections uniform in ±1/√m and ±1/√n.
    pub fn init<R: Rng>(
        m: usize,
        n: usize,
        k: usize,
        o: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let audio = uniform(&[m, k * o], 1.0 / (m as f64).sqrt(), rng)?;
        let video = uniform(&[n, k * o], 1.0 / (n as f64).sqrt(), rng)?;
        Self::new(audio, video, k, o, dropout_p)
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_proj.shape()[0]
    }

    pub fn video_dim(&self) -> usize {
        self.video_proj.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph) -> FbpBinding {
        FbpBinding {
            audio_proj: g.leaf(self.audio_proj.clone().with_grad()),
            video_proj: g.leaf(self.video_proj.clone().with_grad()),
            k: self.k,
            dropout_p: self.dropout_p,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FbpBinding {
    pub audio_proj: NodeId,
    pub video_proj: NodeId,
    pub k: usize,
    pub dropout_p: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FbpNodes {
    /// Sum-pooled product before normalization.
    pub pre_norm: NodeId,
    /// Unit-norm fused vector.
    pub fused: NodeId,
}

/// Records FBP on vectors `a` and `v`: project, multiply, dropout (training
/// only), window-sum, l2-normalize.
pub fn fbp_graph(
    g: &mut Graph,
    a: NodeId,
    v: NodeId,
    p: &FbpBinding,
    training: bool,
    seed: u64,
) -> Result<FbpNodes> {
    let (m, n) = (g.shape(p.audio_proj)[0], g.shape(p.video_proj)[0]);
    let (la, lv) = (g.value(a).numel(), g.value(v).numel());
    if la != m || lv != n {
        return Err(Error::Dimension(format!(
            "FBP expects audio length {m} and video length {n}, got {la} and {lv}"
        )));
    }
    let a_row = g.reshape(a, &[1, m])?;
    let v_row = g.reshape(v, &[1, n])?;
    let pa = g.matmul(a_row, p.audio_proj)?;
    let pv = g.matmul(v_row, p.video_proj)?;
    let product = g.mul(pa, pv)?;
    let width = g.value(product).numel();
    let product = g.reshape(product, &[width])?;
    let dropped = g.dropout(product, p.dropout_p, training, seed)?;
    let pre_norm = g.sum_pool_segments(dropped, p.k)?;
    let fused = g.l2_normalize(pre_norm);
    Ok(FbpNodes { pre_norm, fused })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector {
    pub pre_norm: Vec<f64>,
    pub z: Vec<f64>,
}

pub fn fbp_forward(
    a: &[f64],
    v: &[f64],
    params: &FbpParams,
    training: bool,
    seed: u64,
) -> Result<FusedVector> {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(a.to_vec())?);
    let v = g.constant(Tensor::from_vec(v.to_vec())?);
    let binding = params.bind(&mut g);
    let out = fbp_graph(&mut g, a, v, &binding, training, seed)?;
    Ok(FusedVector {
        pre_norm: g.data(out.pre_norm).to_vec(),
        z: g.data(out.fused).to_vec(),
    })
}

/// Dense m×n×o bilinear tensor, `W_i[r][c]` at `(r·n + c)·o + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearTensor {
    pub m: usize,
    pub n: usize,
    pub o: usize,
    pub data: Vec<f64>,
}

impl BilinearTensor {
    pub fn new(m: usize, n: usize, o: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * n * o {
            return Err(Error::Dimension(format!(
                "bilinear tensor {m}×{n}×{o} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { m, n, o, data })
    }

    pub fn get(&self, r: usize, c: usize, i: usize) -> f64 {
        self.data[(r * self.n + c) * self.o + i]
    }

    /// The m×n slice for output `i`, row-major.
    pub fn slice(&self, i: usize) -> Vec<f64> {
        (0..self.m * self.n)
            .map(|rc| self.data[rc * self.o + i])
            .collect()
    }
}

/// `z_i = aᵀ W_i v` by explicit loops.
pub fn bilinear_pool_naive(a: &[f64], v: &[f64], w: &BilinearTensor) -> Result<Vec<f64>> {
    if a.len() != w.m || v.len() != w.n {
        return Err(Error::Dimension(format!(
            "bilinear tensor is {}×{}×{}, vectors have lengths {} and {}",
            w.m,
            w.n,
            w.o,
            a.len(),
            v.len()
        )));
    }
    let mut z = vec![0.0; w.o];
    for (i, zi) in z.iter_mut().enumerate() {
        for (r, ar) in a.iter().enumerate() {
            for (c, vc) in v.iter().enumerate() {
                *zi += ar * w.get(r, c, i) * vc;
            }
        }
    }
    Ok(z)
}

/// Expands the factorized projections into the full bilinear tensor.
pub fn reconstruct_w(params: &FbpParams) -> BilinearTensor {
    let (m, n, k, o) = (params.audio_dim(), params.video_dim(), params.k, params.o);
    let (u, v) = (params.audio_proj.data(), params.video_proj.data());
    let cols = k * o;
    let mut data = vec![0.0; m * n * o];
    for r in 0..m {
        for c in 0..n {
            for i in 0..o {
                data[(r * n + c) * o + i] = (0..k)
                    .map(|d| u[r * cols + i * k + d] * v[c * cols + i * k + d])
                    .sum();
            }
        }
    }
    BilinearTensor { m, n, o, data }
}
