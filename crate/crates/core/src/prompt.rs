//! Soft conditional prompts.
//!
//! A [`PromptPool`] holds `l` learnable prompt experts, each a sequence of
//! `S` tokens of width `C`, plus a dense gating layer. For encoder features
//! `X` of shape `B × S × C` the pool produces
//!
//! ```text
//! w  = σ(mean_S(X) · W_gate + b_gate)        B × l, each entry in (0, 1)
//! P* = w · experts                           B × S × C
//! ```
//!
//! and [`fuse`] combines `P*` with the features by token concatenation or
//! element-wise add/mul. Gate weights are independent sigmoids, not a
//! softmax, so `P*` is not a convex combination of experts.
//!
//! Each entry of `P*` is a correctly rounded sum over experts, which makes
//! the result bit-identical under any permutation of the pool.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DEFAULT_EXPERTS: usize = 8;
pub const INIT_STD: f64 = 0.02;

/// How the synthesized prompt is combined with encoder features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuseMode {
    /// Append prompt tokens after the feature tokens (`B × 2S × C`).
    Concat,
    Add,
    Mul,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    /// `l × S × C`
    pub experts: Tensor,
    /// `C × l`
    pub gate_weight: Tensor,
    /// `l`
    pub gate_bias: Tensor,
}

/// Sigmoid gate outputs, `B × l`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingWeights(pub Tensor);

/// `P*`, `B × S × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedPrompt(pub Tensor);

/// Graph handles for a registered pool.
#[derive(Clone, Copy, Debug)]
pub struct PoolNodes {
    pub experts: NodeId,
    pub gate_weight: NodeId,
    pub gate_bias: NodeId,
}

impl PromptPool {
    /// Experts and gate weights ~ N(0, 0.02²); gate bias 0, so every gate
    /// starts at exactly 0.5.
    pub fn init(experts: usize, tokens: usize, channels: usize, rng: &mut RngStream) -> Result<Self> {
        if experts == 0 || tokens == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "prompt pool needs l, S, C >= 1 (got {experts}, {tokens}, {channels})"
            )));
        }
        Ok(PromptPool {
            experts: Tensor::randn(&[experts, tokens, channels], INIT_STD, rng),
            gate_weight: Tensor::randn(&[channels, experts], INIT_STD, rng),
            gate_bias: Tensor::zeros(&[experts]),
        })
    }

    pub fn experts(&self) -> usize {
        self.experts.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.experts.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.experts.shape()[2]
    }

    pub fn register(&self, g: &mut Graph) -> PoolNodes {
        PoolNodes {
            experts: g.param(self.experts.clone()),
            gate_weight: g.param(self.gate_weight.clone()),
            gate_bias: g.param(self.gate_bias.clone()),
        }
    }

    /// Evaluate [`gate`] outside a training graph.
    pub fn gate(&self, features: &Tensor) -> Result<GatingWeights> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g);
        let x = g.input(features.clone());
        let w = gate(&mut g, &nodes, x)?;
        g.forward()?;
        Ok(GatingWeights(g.value(w)?.clone()))
    }

    /// Evaluate [`synthesize`] outside a training graph.
    pub fn synthesize(&self, weights: &GatingWeights) -> Result<SynthesizedPrompt> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g);
        let w = g.input(weights.0.clone());
        let p = synthesize(&mut g, &nodes, w)?;
        g.forward()?;
        Ok(SynthesizedPrompt(g.value(p)?.clone()))
    }

    /// Reorder experts so that new expert `k` is old expert `perm[k]`,
    /// moving gate columns and biases with them.
    pub fn permuted(&self, perm: &[usize]) -> Result<PromptPool> {
        let l = self.experts();
        let mut seen = vec![false; l];
        if perm.len() != l || perm.iter().any(|&p| p >= l || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of {l}")));
        }
        let per_expert = self.tokens() * self.channels();
        let c = self.channels();
        let mut experts = Vec::with_capacity(self.experts.len());
        for &p in perm {
            experts.extend_from_slice(&self.experts.data()[p * per_expert..(p + 1) * per_expert]);
        }
        let mut gw = vec![0.0; c * l];
        for row in 0..c {
            for (k, &p) in perm.iter().enumerate() {
                gw[row * l + k] = self.gate_weight.data()[row * l + p];
            }
        }
        let gb = perm.iter().map(|&p| self.gate_bias.data()[p]).collect();
        Ok(PromptPool {
            experts: Tensor::new(self.experts.shape().to_vec(), experts)?,
            gate_weight: Tensor::new(vec![c, l], gw)?,
            gate_bias: Tensor::new(vec![l], gb)?,
        })
    }
}

/// `σ(mean_S(features) · W + b)` for `features` of shape `B × S × C`.
pub fn gate(g: &mut Graph, pool: &PoolNodes, features: NodeId) -> Result<NodeId> {
    let fs = g.shape(features).to_vec();
    let gw = g.shape(pool.gate_weight).to_vec();
    if fs.len() != 3 || fs[2] != gw[0] {
        return Err(Error::ChannelMismatch(format!(
            "gate expects B x S x {} features, got {fs:?}",
            gw[0]
        )));
    }
    let pooled = g.mean(features, 1)?;
    let logits = g.affine(pooled, pool.gate_weight, pool.gate_bias)?;
    Ok(g.sigmoid(logits))
}

/// `P*[b] = Σ_k weights[b, k] · experts[k]`.
pub fn synthesize(g: &mut Graph, pool: &PoolNodes, weights: NodeId) -> Result<NodeId> {
    let es = g.shape(pool.experts).to_vec();
    let ws = g.shape(weights).to_vec();
    if ws.len() != 2 || ws[1] != es[0] {
        return Err(Error::ExpertCountMismatch {
            pool: es[0],
            weights: ws.last().copied().unwrap_or(0),
        });
    }
    let flat = g.reshape(pool.experts, &[es[0], es[1] * es[2]])?;
    let mixed = g.matmul_exact(weights, flat)?;
    g.reshape(mixed, &[ws[0], es[1], es[2]])
}

pub fn fuse(g: &mut Graph, features: NodeId, prompt: NodeId, mode: FuseMode) -> Result<NodeId> {
    let (fs, ps) = (g.shape(features).to_vec(), g.shape(prompt).to_vec());
    match mode {
        FuseMode::Concat => {
            if fs.len() != 3 || ps.len() != 3 || fs[0] != ps[0] || fs[2] != ps[2] {
                return Err(Error::InvalidShape(format!(
                    "concat fusion of {fs:?} and {ps:?}"
                )));
            }
            g.concat(&[features, prompt], 1)
        }
        FuseMode::Add | FuseMode::Mul => {
            if fs != ps {
                return Err(Error::InvalidShape(format!(
                    "{mode:?} fusion needs equal shapes, got {fs:?} and {ps:?}"
                )));
            }
            if mode == FuseMode::Add {
                g.add(features, prompt)
            } else {
                g.mul(features, prompt)
            }
        }
    }
}

/// Eager [`fuse`] on plain tensors.
pub fn fuse_tensors(features: &Tensor, prompt: &SynthesizedPrompt, mode: FuseMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.input(features.clone());
    let p = g.input(prompt.0.clone());
    let out = fuse(&mut g, f, p, mode)?;
    g.forward()?;
    Ok(g.value(out)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn pool(l: usize, s: usize, c: usize, seed: u64) -> PromptPool {
        PromptPool::init(l, s, c, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn zero_gate_params_give_half() {
        let mut p = pool(3, 2, 4, 1);
        p.gate_weight = Tensor::zeros(&[4, 3]);
        let feats = Tensor::randn(&[2, 2, 4], 1.0, &mut RngStream::new(2));
        let w = p.gate(&feats).unwrap();
        assert_eq!(w.0, Tensor::full(&[2, 3], 0.5));
    }

    #[test]
    fn default_init_gates_are_neutral() {
        let p = pool(8, 3, 4, 3);
        assert_eq!(p.gate_bias, Tensor::zeros(&[8]));
        let w = p.gate(&Tensor::zeros(&[1, 3, 4])).unwrap();
        assert_eq!(w.0, Tensor::full(&[1, 8], 0.5));
    }

    #[test]
    fn saturated_bias_gives_one_hot() {
        let mut p = pool(2, 1, 3, 4);
        p.gate_weight = Tensor::zeros(&[3, 2]);
        p.gate_bias = Tensor::from_vec(vec![40.0, -40.0]);
        let w = p.gate(&Tensor::ones(&[1, 1, 3])).unwrap();
        assert!((w.0.data()[0] - 1.0).abs() <= 1e-12);
        assert!(w.0.data()[1].abs() <= 1e-12);
    }

    #[test]
    fn two_by_two_gate_by_hand() {
        let p = PromptPool {
            experts: Tensor::zeros(&[2, 2, 2]),
            gate_weight: Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
            gate_bias: Tensor::from_vec(vec![0.1, -0.2]),
        };
        // tokens [1, 2] and [3, -4] => mean [2, -1]
        let feats = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, -4.0]).unwrap();
        let w = p.gate(&feats).unwrap();
        // logits: 2*0.5 + (-1)*2 + 0.1 = -0.9 ; 2*(-1) + (-1)*0.25 - 0.2 = -2.45
        let expect = [1.0 / (1.0 + 0.9f64.exp()), 1.0 / (1.0 + 2.45f64.exp())];
        for (a, b) in w.0.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let p = pool(2, 2, 4, 5);
        assert!(matches!(
            p.gate(&Tensor::ones(&[1, 2, 3])),
            Err(Error::ChannelMismatch(_))
        ));
    }

    #[test]
    fn synthesize_cases() {
        let p = PromptPool {
            experts: Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            gate_weight: Tensor::zeros(&[2, 2]),
            gate_bias: Tensor::zeros(&[2]),
        };
        let out = p
            .synthesize(&GatingWeights(Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap()))
            .unwrap();
        assert_eq!(out.0.data(), &[0.3, 0.7]);

        let half = p.synthesize(&GatingWeights(Tensor::full(&[3, 2], 0.5))).unwrap();
        assert_eq!(half.0, Tensor::full(&[3, 1, 2], 0.5));

        let zero = PromptPool {
            experts: Tensor::zeros(&[2, 1, 2]),
            ..p.clone()
        };
        let w = GatingWeights(Tensor::new(vec![1, 2], vec![0.9, 0.01]).unwrap());
        assert_eq!(zero.synthesize(&w).unwrap().0, Tensor::zeros(&[1, 1, 2]));

        assert!(matches!(
            p.synthesize(&GatingWeights(Tensor::ones(&[1, 3]))),
            Err(Error::ExpertCountMismatch { pool: 2, weights: 3 })
        ));
    }

    #[test]
    fn fuse_modes() {
        let mut rng = RngStream::new(6);
        let f = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let zeros = SynthesizedPrompt(Tensor::zeros(&[2, 3, 4]));
        let ones = SynthesizedPrompt(Tensor::ones(&[2, 3, 4]));
        assert_eq!(fuse_tensors(&f, &zeros, FuseMode::Add).unwrap(), f);
        assert_eq!(fuse_tensors(&f, &ones, FuseMode::Mul).unwrap(), f);

        let cat = fuse_tensors(&f, &ones, FuseMode::Concat).unwrap();
        assert_eq!(cat.shape(), &[2, 6, 4]);
        for b in 0..2 {
            for s in 0..3 {
                for c in 0..4 {
                    assert_eq!(cat.get(&[b, s, c]), f.get(&[b, s, c]));
                    assert_eq!(cat.get(&[b, s + 3, c]), 1.0);
                }
            }
        }
        let short = SynthesizedPrompt(Tensor::ones(&[2, 2, 4]));
        assert!(fuse_tensors(&f, &short, FuseMode::Add).is_err());
        assert!(fuse_tensors(&f, &short, FuseMode::Mul).is_err());
    }

    #[test]
    fn permutation_is_bit_identical() {
        let p = pool(5, 3, 4, 7);
        let q = p.permuted(&[3, 0, 4, 1, 2]).unwrap();
        let feats = Tensor::randn(&[2, 3, 4], 1.0, &mut RngStream::new(8));
        let a = p.synthesize(&p.gate(&feats).unwrap()).unwrap();
        let b = q.synthesize(&q.gate(&feats).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(p.permuted(&[0, 0, 1, 2, 3]).is_err());
    }

    #[test]
    fn experts_receive_gradients() {
        let p = pool(4, 3, 4, 9);
        let mut g = Graph::new();
        let nodes = p.register(&mut g);
        let x = g.input(Tensor::randn(&[2, 3, 4], 1.0, &mut RngStream::new(10)));
        let w = gate(&mut g, &nodes, x).unwrap();
        let ps = synthesize(&mut g, &nodes, w).unwrap();
        let fused = fuse(&mut g, x, ps, FuseMode::Concat).unwrap();
        let sq = g.mul(fused, fused).unwrap();
        let loss = g.sum(sq);
        g.forward().unwrap();
        let grads = g.backward(loss).unwrap();
        let ge = grads.get(nodes.experts).unwrap();
        assert_eq!(ge.shape(), &[4, 3, 4]);
        assert!(ge.data().iter().all(|v| *v != 0.0));
    }

    #[test]
    fn tiny_pool_passes_grad_check() {
        // B=2, S=3, C=4, l=4 through gate -> synthesize -> fuse -> scalar loss.
        let mut rng = RngStream::new(11);
        let mut p = pool(4, 3, 4, 12);
        // Larger-than-default values keep every gradient well above the
        // finite-difference noise floor.
        p.experts = Tensor::randn(&[4, 3, 4], 0.5, &mut rng);
        p.gate_weight = Tensor::randn(&[4, 4], 0.5, &mut rng);
        for mode in [FuseMode::Concat, FuseMode::Add, FuseMode::Mul] {
            let mut g = Graph::new();
            let nodes = p.register(&mut g);
            let x = g.param(Tensor::randn(&[2, 3, 4], 1.0, &mut rng));
            let w = gate(&mut g, &nodes, x).unwrap();
            let ps = synthesize(&mut g, &nodes, w).unwrap();
            let fused = fuse(&mut g, x, ps, mode).unwrap();
            let proj = g.input(Tensor::randn(g.shape(fused), 1.0, &mut rng));
            let t = g.mul(fused, proj).unwrap();
            let th = g.tanh(t);
            let loss = g.sum(th);
            let r = grad_check(&mut g, loss, 1e-5, 1e-5).unwrap();
            assert!(r.pass, "{mode:?}: {r:?}");
        }
    }
}
