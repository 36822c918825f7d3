//! Gated self-attention block: `out = f + γ · (v · softmax(qᵀk)ᵀ)`.

use bapgan_autograd::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Weights of one attention block. Query/key project `C → C/reduction`
/// with 1×1 convolutions; value keeps all `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionParams<T> {
    pub query_weight: Tensor<T>,
    pub query_bias: Tensor<T>,
    pub key_weight: Tensor<T>,
    pub key_bias: Tensor<T>,
    pub value_weight: Tensor<T>,
    pub value_bias: Tensor<T>,
    pub gamma: T,
}

impl<T: Scalar> SelfAttentionParams<T> {
    /// Random 1×1 projections with `γ = 0`.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let inner = reduced_channels(channels, reduction)?;
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut draw = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect()).expect("shape")
        };
        Ok(Self {
            query_weight: draw(vec![inner, channels, 1, 1]),
            query_bias: Tensor::zeros(vec![inner]),
            key_weight: draw(vec![inner, channels, 1, 1]),
            key_bias: Tensor::zeros(vec![inner]),
            value_weight: draw(vec![channels, channels, 1, 1]),
            value_bias: Tensor::zeros(vec![channels]),
            gamma: T::zero(),
        })
    }

    pub fn channels(&self) -> usize {
        self.value_weight.dim(0)
    }
}

pub(crate) fn reduced_channels(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 || channels < reduction {
        return Err(Error::Config(format!(
            "{channels} channels are not divisible by attention reduction {reduction}"
        )));
    }
    Ok(channels / reduction)
}

pub struct SelfAttentionOutput<T> {
    pub output: Tensor<T>,
    /// `[B, N, N]` row-stochastic attention map, `N = H·W`.
    pub attention: Tensor<T>,
}

/// Non-recording evaluation of one attention block on `f: [B, C, H, W]`.
pub fn self_attention<T: Scalar>(f: &Tensor<T>, params: &SelfAttentionParams<T>) -> Result<SelfAttentionOutput<T>> {
    if f.shape().len() != 4 || f.dim(1) != params.channels() {
        return Err(Error::Dimension(format!(
            "feature map {:?} does not match attention block with {} channels",
            f.shape(),
            params.channels()
        )));
    }
    let g = Graph::new();
    let weights = AttentionVars {
        query_weight: g.constant(params.query_weight.clone()),
        query_bias: g.constant(params.query_bias.clone()),
        key_weight: g.constant(params.key_weight.clone()),
        key_bias: g.constant(params.key_bias.clone()),
        value_weight: g.constant(params.value_weight.clone()),
        value_bias: g.constant(params.value_bias.clone()),
        gamma: g.constant(Tensor::scalar(params.gamma)),
    };
    let (out, attn) = attention_block(g.constant(f.clone()), &weights)?;
    Ok(SelfAttentionOutput {
        output: (*out.value()).clone(),
        attention: (*attn.value()).clone(),
    })
}

pub(crate) struct AttentionVars<'g, T: Scalar> {
    pub query_weight: Var<'g, T>,
    pub query_bias: Var<'g, T>,
    pub key_weight: Var<'g, T>,
    pub key_bias: Var<'g, T>,
    pub value_weight: Var<'g, T>,
    pub value_bias: Var<'g, T>,
    pub gamma: Var<'g, T>,
}

/// Recording attention block; returns the output and the attention map.
pub(crate) fn attention_block<'g, T: Scalar>(
    f: Var<'g, T>,
    w: &AttentionVars<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let shape = f.shape();
    let (b, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    let n = h * wd;
    let inner = w.query_weight.shape()[0];
    let q = f
        .conv2d(w.query_weight, Some(w.query_bias), 1, 0)?
        .reshape(vec![b, inner, n])?;
    let k = f.conv2d(w.key_weight, Some(w.key_bias), 1, 0)?.reshape(vec![b, inner, n])?;
    let v = f.conv2d(w.value_weight, Some(w.value_bias), 1, 0)?.reshape(vec![b, c, n])?;
    // energy[i, j] = q_i · k_j
    let energy = q.bmm(k, true, false)?;
    let attention = energy.softmax_rows();
    // o[:, i] = Σ_j v[:, j] · attention[i, j]
    let o = v.bmm(attention, false, true)?.reshape(vec![b, c, h, wd])?;
    let out = f.add(o.mul_scalar_var(w.gamma)?)?;
    Ok((out, attention))
}
