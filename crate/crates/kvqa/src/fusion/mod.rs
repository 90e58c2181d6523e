//! Weakly supervised multi-head attention fusion.
//!
//! The question embedding acts as a single query over the selected
//! inference embeddings plus the question itself (so the model can
//! fall back to "just the question" when no inference helps). The
//! attended value vectors from each head are concatenated and passed
//! through an output projection to give one fused vector, and the
//! head-averaged attention weights are kept both for supervision
//! during training and for later inspection.

mod backward;
mod weak;

pub use backward::{fuse_backward, FusionBackward, FusionGradients};
pub use weak::{answer_bearing, attention_loss, label_distribution, weak_labels, LABEL_FLOOR};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, softmax_in_place, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Dimension of the incoming sentence embeddings.
    pub input_dim: usize,
    /// Dimension of the fused output (must be divisible by `heads`).
    pub model_dim: usize,
    pub heads: usize,
}

impl FusionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 || self.heads == 0 {
            return Err(Error::Config(
                "fusion dimensions and head count must be positive".into(),
            ));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "fusion model dimension {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-head projections plus the output projection, all bias-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParameters {
    pub config: FusionConfig,
    /// Per head, `head_dim x input_dim`.
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    /// `model_dim x model_dim`.
    pub wo: Mat,
}

impl FusionParameters {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dh = config.head_dim();
        // Start each head's query/key/value projection at the matching
        // slice of the identity (plus symmetry-breaking noise), and the
        // output projection at the identity. The query/key slices carry
        // gain sqrt(head_dim) so the initial attention scores,
        // sum_heads (g q_slice)(g k_slice) / sqrt(head_dim), equal the
        // question–sentence cosine — the same signal that ranked the
        // sentences — and the fused vector begins as their
        // attention-weighted mean. A plain random projection starts with
        // near-zero scores whose supervision gradients vanish.
        let gain = 2.0 * (dh as f64).sqrt();
        let mut slice = |head: usize, g: f64| {
            let mut m = Mat::xavier(dh, config.input_dim, &mut rng);
            for r in 0..dh {
                let c = head * dh + r;
                if c < config.input_dim {
                    *m.at_mut(r, c) += g;
                }
            }
            m
        };
        let wq: Vec<Mat> = (0..config.heads).map(|h| slice(h, gain)).collect();
        let wk: Vec<Mat> = (0..config.heads).map(|h| slice(h, gain)).collect();
        let wv: Vec<Mat> = (0..config.heads).map(|h| slice(h, 1.0)).collect();
        let mut wo = Mat::xavier(config.model_dim, config.model_dim, &mut rng);
        for r in 0..config.model_dim {
            *wo.at_mut(r, r) += 1.0;
        }
        Ok(FusionParameters {
            config,
            wq,
            wk,
            wv,
            wo,
        })
    }

    /// Visit every parameter matrix in a fixed order, with stable names.
    pub fn for_each_tensor(&self, mut f: impl FnMut(String, &Mat)) {
        for (h, m) in self.wq.iter().enumerate() {
            f(format!("fusion.wq.{h}"), m);
        }
        for (h, m) in self.wk.iter().enumerate() {
            f(format!("fusion.wk.{h}"), m);
        }
        for (h, m) in self.wv.iter().enumerate() {
            f(format!("fusion.wv.{h}"), m);
        }
        f("fusion.wo".to_string(), &self.wo);
    }

    /// Mutable variant of [`Self::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, &mut Mat)) {
        for (h, m) in self.wq.iter_mut().enumerate() {
            f(format!("fusion.wq.{h}"), m);
        }
        for (h, m) in self.wk.iter_mut().enumerate() {
            f(format!("fusion.wk.{h}"), m);
        }
        for (h, m) in self.wv.iter_mut().enumerate() {
            f(format!("fusion.wv.{h}"), m);
        }
        f("fusion.wo".to_string(), &mut self.wo);
    }
}

/// Intermediates retained by [`fuse`] so the backward pass can recompute
/// nothing.
#[derive(Debug, Clone)]
pub struct FusionCache {
    /// Candidates then question; `k + 1` rows of `input_dim`.
    pub inputs: Vec<Vec<f64>>,
    /// Per head: the projected query.
    pub q_heads: Vec<Vec<f64>>,
    /// Per head, per item: projected keys and values.
    pub k_heads: Vec<Vec<Vec<f64>>>,
    pub v_heads: Vec<Vec<Vec<f64>>>,
    /// Per head: post-softmax attention weights over the `k + 1` items.
    pub weights: Vec<Vec<f64>>,
    /// Concatenated head outputs before the output projection.
    pub concat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// The fused vector, `model_dim` long.
    pub fused: Vec<f64>,
    /// Head-averaged attention over candidates then question (`k + 1`).
    pub attention: Vec<f64>,
    pub cache: FusionCache,
}

/// Fuse the question embedding with up to `k` selected inference
/// embeddings. With no candidates the question attends only to itself
/// and the attention distribution is exactly `[1.0]`.
pub fn fuse(
    params: &FusionParameters,
    question: &[f64],
    candidates: &[Vec<f64>],
) -> Result<FusionOutput> {
    let cfg = &params.config;
    if question.len() != cfg.input_dim {
        return Err(Error::Dimension {
            expected: cfg.input_dim,
            actual: question.len(),
        });
    }
    for c in candidates {
        if c.len() != cfg.input_dim {
            return Err(Error::Dimension {
                expected: cfg.input_dim,
                actual: c.len(),
            });
        }
    }
    let mut inputs: Vec<Vec<f64>> = candidates.to_vec();
    inputs.push(question.to_vec());
    let items = inputs.len();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut q_heads = Vec::with_capacity(cfg.heads);
    let mut k_heads = Vec::with_capacity(cfg.heads);
    let mut v_heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    let mut concat = vec![0.0; cfg.model_dim];
    let mut attention = vec![0.0; items];

    for h in 0..cfg.heads {
        let q = params.wq[h].matvec(question);
        let keys: Vec<Vec<f64>> = inputs.iter().map(|x| params.wk[h].matvec(x)).collect();
        let values: Vec<Vec<f64>> = inputs.iter().map(|x| params.wv[h].matvec(x)).collect();
        let mut scores: Vec<f64> = keys.iter().map(|k| dot(&q, k) * scale).collect();
        softmax_in_place(&mut scores);
        let head_out = &mut concat[h * dh..(h + 1) * dh];
        for (w, v) in scores.iter().zip(&values) {
            for (o, vi) in head_out.iter_mut().zip(v) {
                *o += w * vi;
            }
        }
        for (a, w) in attention.iter_mut().zip(&scores) {
            *a += w / cfg.heads as f64;
        }
        q_heads.push(q);
        k_heads.push(keys);
        v_heads.push(values);
        weights.push(scores);
    }

    let fused = params.wo.matvec(&concat);
    Ok(FusionOutput {
        fused,
        attention,
        cache: FusionCache {
            inputs,
            q_heads,
            k_heads,
            v_heads,
            weights,
            concat,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn params(seed: u64) -> FusionParameters {
        FusionParameters::new(
            FusionConfig {
                input_dim: 6,
                model_dim: 8,
                heads: 2,
            },
            seed,
        )
        .unwrap()
    }

    fn random_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn attention_sums_to_one() {
        let p = params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..6 {
            let q = random_vec(&mut rng, 6);
            let cands: Vec<_> = (0..k).map(|_| random_vec(&mut rng, 6)).collect();
            let out = fuse(&p, &q, &cands).unwrap();
            assert_eq!(out.attention.len(), k + 1);
            let total: f64 = out.attention.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "k={k}: sums to {total}");
            assert!(out.attention.iter().all(|&w| w > 0.0));
            assert_eq!(out.fused.len(), 8);
        }
    }

    #[test]
    fn no_candidates_gives_certain_attention_on_the_question() {
        let p = params(1);
        let q = vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.4];
        let out = fuse(&p, &q, &[]).unwrap();
        assert_eq!(out.attention, vec![1.0]);
        // The fused vector is still a real projection of the question,
        // not a placeholder.
        assert!(out.fused.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fusion_is_deterministic() {
        let p = params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_vec(&mut rng, 6);
        let cands: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 6)).collect();
        let a = fuse(&p, &q, &cands).unwrap();
        let b = fuse(&p, &q, &cands).unwrap();
        assert_eq!(a.fused, b.fused);
        assert_eq!(a.attention, b.attention);
    }

    #[test]
    fn identical_candidates_receive_identical_attention() {
        let p = params(3);
        let q = vec![0.5, 0.5, -0.5, 0.25, 0.1, -0.1];
        let c = vec![0.2, -0.3, 0.4, 0.0, 0.6, -0.2];
        let out = fuse(&p, &q, &[c.clone(), c.clone()]).unwrap();
        assert!((out.attention[0] - out.attention[1]).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = params(1);
        let err = fuse(&p, &[0.0; 5], &[]).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 6, actual: 5 }));
        let err = fuse(&p, &[0.0; 6], &[vec![0.0; 7]]).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 6, actual: 7 }));
    }

    #[test]
    fn config_validation_catches_bad_head_split() {
        let bad = FusionConfig {
            input_dim: 6,
            model_dim: 10,
            heads: 4,
        };
        assert!(bad.validate().is_err());
        assert!(FusionParameters::new(bad, 0).is_err());
    }

    #[test]
    fn permuting_candidates_permutes_attention_and_preserves_fusion() {
        let p = params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_vec(&mut rng, 6);
        let cands: Vec<_> = (0..4).map(|_| random_vec(&mut rng, 6)).collect();
        let base = fuse(&p, &q, &cands).unwrap();
        let permutation = [2usize, 0, 3, 1];
        let shuffled: Vec<_> = permutation.iter().map(|&i| cands[i].clone()).collect();
        let permuted = fuse(&p, &q, &shuffled).unwrap();
        for (slot, &src) in permutation.iter().enumerate() {
            assert!((permuted.attention[slot] - base.attention[src]).abs() < 1e-12);
        }
        // Question slot and the fused vector are unaffected.
        assert!((permuted.attention[4] - base.attention[4]).abs() < 1e-12);
        for (a, b) in permuted.fused.iter().zip(&base.fused) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_matches_a_step_by_step_oracle() {
        // Independent recomputation with plain loops: project, score,
        // softmax, weight, concatenate, project out. Written against the
        // definition, not against the kernel.
        let cfg = FusionConfig {
            input_dim: 4,
            model_dim: 8,
            heads: 2,
        };
        let p = FusionParameters::new(cfg, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cands: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let out = fuse(&p, &q, &cands).unwrap();

        let dh = 4usize;
        let mut items = cands.clone();
        items.push(q.clone());
        let matmul = |m: &Mat, x: &[f64]| -> Vec<f64> {
            (0..m.rows)
                .map(|r| (0..m.cols).map(|c| m.at(r, c) * x[c]).sum())
                .collect()
        };
        let mut concat = vec![0.0; 8];
        let mut mean_attention = vec![0.0; 4];
        for h in 0..2 {
            let qh = matmul(&p.wq[h], &q);
            let mut scores = Vec::new();
            for item in &items {
                let kh = matmul(&p.wk[h], item);
                let s: f64 = qh.iter().zip(&kh).map(|(a, b)| a * b).sum();
                scores.push(s / (dh as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
            for j in 0..items.len() {
                let vh = matmul(&p.wv[h], &items[j]);
                for d in 0..dh {
                    concat[h * dh + d] += weights[j] * vh[d];
                }
                mean_attention[j] += weights[j] / 2.0;
            }
        }
        let fused = matmul(&p.wo, &concat);
        for (a, b) in out.fused.iter().zip(&fused) {
            assert!((a - b).abs() < 1e-10, "fused mismatch: {a} vs {b}");
        }
        for (a, b) in out.attention.iter().zip(&mean_attention) {
            assert!((a - b).abs() < 1e-10, "attention mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn tensor_visitor_order_is_stable() {
        let p = params(1);
        let mut names = Vec::new();
        p.for_each_tensor(|name, _| names.push(name));
        assert_eq!(
            names,
            vec![
                "fusion.wq.0",
                "fusion.wq.1",
                "fusion.wk.0",
                "fusion.wk.1",
                "fusion.wv.0",
                "fusion.wv.1",
                "fusion.wo"
            ]
        );
    }
}
