//! Additive attention pooling over a variable-length set of feature vectors.
//!
//! Scores are `e_i = u·tanh(W x_i + b)`, weights are `softmax(λ e)`. The
//! audio form pools the original elements; the video form pools the
//! affine-reduced elements `W x_i + b`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// d×C
    pub weight: Tensor,
    /// d
    pub bias: Tensor,
    /// d
    pub score: Tensor,
    pub lambda: f64,
    pub pool_transformed: bool,
}

impl AttentionParams {
    pub fn new(
        weight: Tensor,
        bias: Tensor,
        score: Tensor,
        lambda: f64,
        pool_transformed: bool,
    ) -> Result<Self> {
        let (d, c) = match weight.shape() {
            &[d, c] => (d, c),
            s => {
                return Err(Error::Dimension(format!(
                    "attention weight must be d×C, got {s:?}"
                )))
            }
        };
        if bias.numel() != d || score.numel() != d {
            return Err(Error::Dimension(format!(
                "attention bias {:?} and score {:?} must have length {d}",
                bias.shape(),
                score.shape()
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Input(format!("lambda {lambda} outside [0, 1]")));
        }
        debug_assert!(c >= 1);
        Ok(Self {
            weight,
            bias,
            score,
            lambda,
            pool_transformed,
        })
    }

    /// W and u uniform in ±1/√C, b = 0.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        lambda: f64,
        pool_transformed: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weight = uniform(&[hidden_dim, input_dim], bound, rng)?;
        let score = uniform(&[hidden_dim], bound, rng)?;
        Self::new(
            weight,
            Tensor::zeros(&[hidden_dim])?,
            score,
            lambda,
            pool_transformed,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Adds the parameters to `g` as gradient-tracking leaves.
    pub fn bind(&self, g: &mut Graph) -> AttentionBinding {
        AttentionBinding {
            weight: g.leaf(self.weight.clone().with_grad()),
            bias: g.leaf(self.bias.clone().with_grad()),
            score: g.leaf(self.score.clone().with_grad()),
            lambda: self.lambda,
            pool_transformed: self.pool_transformed,
        }
    }
}

pub(crate) fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Graph handles for one attention block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBinding {
    pub weight: NodeId,
    pub bias: NodeId,
    pub score: NodeId,
    pub lambda: f64,
    pub pool_transformed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub pooled: NodeId,
    pub weights: NodeId,
}

/// Records attention pooling of an L×C element matrix.
pub fn attention_pool_graph(
    g: &mut Graph,
    elements: NodeId,
    p: &AttentionBinding,
) -> Result<AttentionNodes> {
    let (len, dim) = match g.shape(elements) {
        &[l, c] => (l, c),
        s => {
            return Err(Error::Dimension(format!(
                "attention elements must be L×C, got {s:?}"
            )))
        }
    };
    let (hidden, expect) = (g.shape(p.weight)[0], g.shape(p.weight)[1]);
    if dim != expect {
        return Err(Error::Dimension(format!(
            "attention expects {expect}-dimensional elements, got {dim}"
        )));
    }
    let wt = g.transpose(p.weight)?;
    let projected = g.matmul(elements, wt)?;
    let transformed = g.add_row(projected, p.bias)?;
    let activated = g.tanh(transformed);
    let score = g.reshape(p.score, &[hidden, 1])?;
    let e = g.matmul(activated, score)?;
    let e = g.reshape(e, &[len])?;
    let weights = g.scaled_softmax(e, p.lambda)?;
    let row = g.reshape(weights, &[1, len])?;
    let (source, width) = if p.pool_transformed {
        (transformed, hidden)
    } else {
        (elements, dim)
    };
    let pooled = g.matmul(row, source)?;
    let pooled = g.reshape(pooled, &[width])?;
    Ok(AttentionNodes { pooled, weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub pooled: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Forward-only attention pooling of an L×C element matrix.
pub fn attention_pool(elements: &Tensor, params: &AttentionParams) -> Result<AttentionOutput> {
    if elements.rank() != 2 {
        return Err(Error::Dimension(format!(
            "attention elements must be L×C, got {:?}",
            elements.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(elements.clone());
    let binding = params.bind(&mut g);
    let out = attention_pool_graph(&mut g, x, &binding)?;
    Ok(AttentionOutput {
        pooled: g.data(out.pooled).to_vec(),
        weights: g.data(out.weights).to_vec(),
    })
}

/// Rejects an empty element set before a tensor is built from it.
pub fn elements_from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let Some(first) = rows.first() else {
        return Err(Error::Input("attention over an empty element set".into()));
    };
    let dim = first.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Dimension(format!(
            "element of length {} in a set of {dim}-dimensional elements",
            bad.len()
        )));
    }
    Tensor::new(&[rows.len(), dim], rows.concat())
}

/// Position bookkeeping for a C×F×T grid viewed as F·T elements of length C.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub channels: usize,
    pub freq: usize,
    pub time: usize,
}

impl GridLayout {
    pub fn of(grid_shape: &[usize]) -> Result<Self> {
        match grid_shape {
            &[channels, freq, time] => Ok(Self {
                channels,
                freq,
                time,
            }),
            s => Err(Error::Dimension(format!("grid must be C×F×T, got {s:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.freq * self.time
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (frequency, time) of element `index`; elements run time-fastest.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.time, index % self.time)
    }

    /// Sums element weights over frequency, giving one value per time step.
    pub fn time_profile(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.time];
        for (i, w) in weights.iter().enumerate() {
            out[self.position(i).1] += w;
        }
        out
    }
}

/// C×F×T grid → (F·T)×C element matrix, row-major over (F, T).
pub fn flatten_grid_graph(g: &mut Graph, grid: NodeId) -> Result<(NodeId, GridLayout)> {
    let layout = GridLayout::of(g.shape(grid))?;
    let planes = g.reshape(grid, &[layout.channels, layout.len()])?;
    Ok((g.transpose(planes)?, layout))
}

pub fn flatten_grid(grid: &Tensor) -> Result<(Tensor, GridLayout)> {
    let mut g = Graph::new();
    let x = g.constant(grid.clone());
    let (flat, layout) = flatten_grid_graph(&mut g, x)?;
    Ok((g.value(flat).clone(), layout))
}

pub fn unflatten_grid(elements: &Tensor, layout: GridLayout) -> Result<Tensor> {
    if elements.shape() != [layout.len(), layout.channels] {
        return Err(Error::Dimension(format!(
            "elements {:?} do not match grid layout {layout:?}",
            elements.shape()
        )));
    }
    let mut data = vec![0.0; elements.numel()];
    for (i, row) in elements.data().chunks(layout.channels).enumerate() {
        for (c, v) in row.iter().enumerate() {
            data[c * layout.len() + i] = *v;
        }
    }
    Tensor::new(&[layout.channels, layout.freq, layout.time], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(c: usize, d: usize, lambda: f64, transformed: bool, seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = AttentionParams::init(c, d, lambda, transformed, &mut rng).unwrap();
        p.bias = uniform(&[d], 0.5, &mut rng).unwrap();
        p
    }

    #[test]
    fn singleton_returns_the_element() {
        let x = Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let audio = attention_pool(&x, &params(3, 4, 1.0, false, 1)).unwrap();
        assert_eq!(audio.weights, vec![1.0]);
        assert_eq!(audio.pooled, x.data());

        let p = params(3, 2, 1.0, true, 2);
        let video = attention_pool(&x, &p).unwrap();
        let w = p.weight.data();
        for r in 0..2 {
            let expect: f64 =
                (0..3).map(|c| w[r * 3 + c] * x.data()[c]).sum::<f64>() + p.bias.data()[r];
            assert!((video.pooled[r] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_elements_pool_to_themselves() {
        let x = Tensor::new(&[4, 2], [0.7, -0.2].repeat(4)).unwrap();
        for lambda in [0.0, 0.5, 1.0] {
            let out = attention_pool(&x, &params(2, 3, lambda, false, 3)).unwrap();
            assert!((out.pooled[0] - 0.7).abs() < 1e-14 && (out.pooled[1] + 0.2).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_parameters_give_mean_pooling() {
        let mut p = params(2, 3, 1.0, false, 4);
        p.weight = Tensor::zeros(&[3, 2]).unwrap();
        p.bias = Tensor::zeros(&[3]).unwrap();
        let x = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let out = attention_pool(&x, &p).unwrap();
        assert!(out.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        assert!((out.pooled[0] - 3.0).abs() < 1e-14 && (out.pooled[1] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn errors_on_empty_and_mismatched_sets() {
        assert!(matches!(elements_from_rows(&[]), Err(Error::Input(_))));
        assert!(matches!(
            elements_from_rows(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::Dimension(_))
        ));
        let x = Tensor::new(&[2, 5], vec![0.0; 10]).unwrap();
        assert!(matches!(
            attention_pool(&x, &params(3, 2, 1.0, false, 5)),
            Err(Error::Dimension(_))
        ));
        assert!(AttentionParams::new(
            Tensor::zeros(&[2, 2]).unwrap(),
            Tensor::zeros(&[2]).unwrap(),
            Tensor::zeros(&[2]).unwrap(),
            1.5,
            false
        )
        .is_err());
    }

    #[test]
    fn flatten_orders_time_fastest() {
        // C=2, F'=1, T'=3
        let grid = Tensor::new(&[2, 1, 3], vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]).unwrap();
        let (flat, layout) = flatten_grid(&grid).unwrap();
        assert_eq!(flat.shape(), &[3, 2]);
        assert_eq!(flat.data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
        assert_eq!(layout.len(), 3);
        assert_eq!(layout.position(2), (0, 2));
        assert_eq!(unflatten_grid(&flat, layout).unwrap(), grid);
    }

    #[test]
    fn time_profile_sums_over_frequency() {
        let layout = GridLayout {
            channels: 1,
            freq: 2,
            time: 3,
        };
        let p = layout.time_profile(&[0.1, 0.2, 0.3, 0.05, 0.15, 0.2]);
        assert!(
            (p[0] - 0.15).abs() < 1e-15
                && (p[1] - 0.35).abs() < 1e-15
                && (p[2] - 0.5).abs() < 1e-15
        );
    }
}
