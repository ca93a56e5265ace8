//! Channel attention and the adversarial diversity term.
//!
//! A channel-attention module squeezes a response map to one value per
//! channel, passes it through `W2 · relu(W1 · ·)` and a sigmoid, and scales
//! each channel plane by the resulting gate. Several of these run in parallel
//! on the same map; the adversary network then tries to make the embeddings
//! of the branches indistinguishable while, through a gradient-reversal node,
//! everything upstream of it is pushed to make them differ.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hidden width of the channel gate and of the adversary.
pub const HIDDEN: usize = 64;

pub(crate) fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| normal.sample(rng)).collect())
        .expect("rows*cols entries")
}

/// Bias-free gate weights: `w1` is `hidden × C`, `w2` is `C × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl CamParams {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        CamParams { w1: Tensor::zeros(&[hidden, channels]), w2: Tensor::zeros(&[channels, hidden]) }
    }

    pub fn random(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        CamParams {
            w1: random_matrix(hidden, channels, (1.0 / channels as f64).sqrt(), rng),
            w2: random_matrix(channels, hidden, (1.0 / hidden as f64).sqrt(), rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }
}

/// Gated map together with the gate itself (`[N, C]`, or `[C]` for a single map).
#[derive(Clone, Copy, Debug)]
pub struct CamOutput {
    pub output: Var,
    pub gate: Var,
}

/// Channel attention on `u` (`[C, H, W]` or `[N, C, H, W]`) with weights
/// already recorded on the graph.
pub fn cam_forward(g: &mut Graph, u: Var, w1: Var, w2: Var) -> Result<CamOutput> {
    let shape = g.shape(u).to_vec();
    let single = shape.len() == 3;
    let channels = shape.get(shape.len().wrapping_sub(3)).copied().unwrap_or(0);
    let (s1, s2) = (g.shape(w1).to_vec(), g.shape(w2).to_vec());
    if s1.len() != 2 || s2.len() != 2 || s1[1] != channels || s2 != [channels, s1[0]] {
        return Err(Error::dim(
            "cam_forward",
            format!("map {shape:?} with W1 {s1:?}, W2 {s2:?}"),
        ));
    }
    let mut pooled = g.spatial_avg_pool(u)?;
    if single {
        pooled = g.reshape(pooled, &[1, channels])?;
    }
    let w1t = g.transpose(w1)?;
    let hidden = g.matmul(pooled, w1t)?;
    let hidden = g.relu(hidden);
    let w2t = g.transpose(w2)?;
    let logits = g.matmul(hidden, w2t)?;
    let mut gate = g.sigmoid(logits);
    if single {
        gate = g.reshape(gate, &[channels])?;
    }
    let output = g.channel_scale(u, gate)?;
    Ok(CamOutput { output, gate })
}

/// Convenience wrapper evaluating a module on a plain tensor.
pub fn cam_apply(u: &Tensor, params: &CamParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (vu, v1, v2) = (g.leaf(u.clone()), g.leaf(params.w1.clone()), g.leaf(params.w2.clone()));
    let out = cam_forward(&mut g, vu, v1, v2)?;
    Ok((g.value(out.output).clone(), g.value(out.gate).clone()))
}

/// Two bias-free fully connected layers, `dim → hidden → hidden`, ReLU
/// between, applied to the L2-normalized input.
///
/// Normalizing first keeps the game about directions. On raw outputs a
/// bias-free ReLU network is homogeneous, so upstream layers could inflate
/// the discrepancy without bound just by growing the embeddings, which the
/// cosine-based metric loss never notices.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryNet {
    pub l1: Tensor,
    pub l2: Tensor,
}

impl AdversaryNet {
    pub fn random(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        AdversaryNet {
            l1: random_matrix(hidden, dim, (2.0 / dim as f64).sqrt(), rng),
            l2: random_matrix(hidden, hidden, (2.0 / hidden as f64).sqrt(), rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.shape()[1]
    }
}

fn adversary_map(g: &mut Graph, x: Var, l1: Var, l2: Var) -> Result<Var> {
    let x = g.normalize_rows(x)?;
    let l1t = g.transpose(l1)?;
    let h = g.matmul(x, l1t)?;
    let h = g.relu(h);
    let l2t = g.transpose(l2)?;
    g.matmul(h, l2t)
}

/// `λ0 · Σ_{j<j'} ‖F(e_j) − F(e_j')‖²`, averaged over the batch. A zero
/// embedding is a [`Error::DegenerateVector`].
///
/// Each embedding is `[N, dim]` (or `[dim]` for a single sample). With
/// `reverse` set, every branch passes through a gradient-reversal node before
/// the adversary, so minimizing the returned loss trains the adversary to
/// close the gaps while upstream parameters are trained to widen them.
pub fn adversary_loss(
    g: &mut Graph,
    embeddings: &[Var],
    l1: Var,
    l2: Var,
    lambda0: f64,
    reverse: bool,
) -> Result<Var> {
    if embeddings.len() < 2 {
        return Err(Error::InsufficientBranches(embeddings.len()));
    }
    let shape = g.shape(embeddings[0]).to_vec();
    if embeddings.iter().any(|&e| g.shape(e) != shape.as_slice()) {
        return Err(Error::dim("adversary_loss", "branch embeddings differ in shape"));
    }
    let (batch, dim) = match shape.as_slice() {
        &[d] => (1, d),
        &[n, d] => (n, d),
        _ => return Err(Error::dim("adversary_loss", format!("embedding shape {shape:?}"))),
    };
    let mut mapped = Vec::with_capacity(embeddings.len());
    for &e in embeddings {
        let mut x = if reverse { g.grad_reverse(e) } else { e };
        if shape.len() == 1 {
            x = g.reshape(x, &[1, dim])?;
        }
        mapped.push(adversary_map(g, x, l1, l2)?);
    }
    let mut terms = Vec::new();
    for j in 0..mapped.len() {
        for k in (j + 1)..mapped.len() {
            let diff = g.sub(mapped[j], mapped[k])?;
            terms.push(g.sum_squares(diff)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, lambda0 / batch as f64))
}
