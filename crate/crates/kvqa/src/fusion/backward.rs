//! Analytic gradients for the fusion block.
//!
//! Two loss terms can feed the backward pass at once: an upstream
//! gradient on the fused vector (from the answer loss further down the
//! pipeline) and the weak attention cross entropy. Both route through
//! the per-head softmax; only the first touches the value projections.

use crate::fusion::{FusionCache, FusionParameters, LABEL_FLOOR};
use crate::linalg::{axpy, dot, Mat};
use crate::{Error, Result};

/// Gradients with the same shapes as [`FusionParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGradients {
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    pub wo: Mat,
}

impl FusionGradients {
    pub fn zeros_like(params: &FusionParameters) -> Self {
        let dh = params.config.head_dim();
        let ds = params.config.input_dim;
        let dm = params.config.model_dim;
        let zero_heads =
            || -> Vec<Mat> { (0..params.config.heads).map(|_| Mat::zeros(dh, ds)).collect() };
        FusionGradients {
            wq: zero_heads(),
            wk: zero_heads(),
            wv: zero_heads(),
            wo: Mat::zeros(dm, dm),
        }
    }

    /// Accumulate another gradient, scaled.
    pub fn add_scaled(&mut self, other: &FusionGradients, scale: f64) {
        for (a, b) in self.wq.iter_mut().zip(&other.wq) {
            a.add_scaled(b, scale);
        }
        for (a, b) in self.wk.iter_mut().zip(&other.wk) {
            a.add_scaled(b, scale);
        }
        for (a, b) in self.wv.iter_mut().zip(&other.wv) {
            a.add_scaled(b, scale);
        }
        self.wo.add_scaled(&other.wo, scale);
    }

    /// Gradient-descent step on the parameters.
    pub fn apply(&self, params: &mut FusionParameters, learning_rate: f64) {
        for (p, g) in params.wq.iter_mut().zip(&self.wq) {
            p.add_scaled(g, -learning_rate);
        }
        for (p, g) in params.wk.iter_mut().zip(&self.wk) {
            p.add_scaled(g, -learning_rate);
        }
        for (p, g) in params.wv.iter_mut().zip(&self.wv) {
            p.add_scaled(g, -learning_rate);
        }
        params.wo.add_scaled(&self.wo, -learning_rate);
    }
}

/// Everything [`fuse_backward`] produces: parameter gradients plus the
/// gradients flowing back into the question and candidate embeddings.
#[derive(Debug, Clone)]
pub struct FusionBackward {
    pub params: FusionGradients,
    pub d_question: Vec<f64>,
    pub d_candidates: Vec<Vec<f64>>,
}

/// Backward pass through [`super::fuse`].
///
/// `d_fused` is the upstream gradient on the fused vector;
/// `attention_labels`, when present, adds the gradient of
/// [`super::attention_loss`] taken on the head-averaged attention.
pub fn fuse_backward(
    params: &FusionParameters,
    cache: &FusionCache,
    d_fused: &[f64],
    attention_labels: Option<&[f64]>,
) -> Result<FusionBackward> {
    let cfg = &params.config;
    let items = cache.inputs.len();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    if d_fused.len() != cfg.model_dim {
        return Err(Error::Dimension {
            expected: cfg.model_dim,
            actual: d_fused.len(),
        });
    }
    if let Some(labels) = attention_labels {
        if labels.len() != items {
            return Err(Error::Dimension {
                expected: items,
                actual: labels.len(),
            });
        }
    }

    let mut grads = FusionGradients::zeros_like(params);
    let mut d_inputs = vec![vec![0.0; cfg.input_dim]; items];
    let question = cache.inputs.last().expect("cache always holds the question");

    // Output projection: fused = wo . concat.
    grads.wo.add_outer(d_fused, &cache.concat, 1.0);
    let d_concat = params.wo.matvec_t(d_fused);

    // Cross-entropy gradient on the head-averaged attention.
    let d_mean_attention: Option<Vec<f64>> = attention_labels.map(|labels| {
        let mean: Vec<f64> = (0..items)
            .map(|j| cache.weights.iter().map(|w| w[j]).sum::<f64>() / cfg.heads as f64)
            .collect();
        labels
            .iter()
            .zip(&mean)
            .map(|(&y, &p)| if p > LABEL_FLOOR { -y / p } else { 0.0 })
            .collect()
    });

    for h in 0..cfg.heads {
        let du_h = &d_concat[h * dh..(h + 1) * dh];
        let weights = &cache.weights[h];
        let values = &cache.v_heads[h];
        let keys = &cache.k_heads[h];
        let q_h = &cache.q_heads[h];

        // Value path: head output = sum_j w_j v_j.
        for (j, x) in cache.inputs.iter().enumerate() {
            let dv: Vec<f64> = du_h.iter().map(|&d| weights[j] * d).collect();
            grads.wv[h].add_outer(&dv, x, 1.0);
            axpy(&mut d_inputs[j], &params.wv[h].matvec_t(&dv), 1.0);
        }

        // Gradient on the post-softmax weights from both loss terms.
        let mut dw: Vec<f64> = (0..items).map(|j| dot(du_h, &values[j])).collect();
        if let Some(dmean) = &d_mean_attention {
            for (d, m) in dw.iter_mut().zip(dmean) {
                *d += m / cfg.heads as f64;
            }
        }

        // Softmax backward: ds_j = w_j (dw_j - sum_i dw_i w_i).
        let mixed: f64 = dw.iter().zip(weights).map(|(d, w)| d * w).sum();
        let ds: Vec<f64> = dw
            .iter()
            .zip(weights)
            .map(|(d, w)| w * (d - mixed))
            .collect();

        // Score path: s_j = scale * q . k_j.
        let mut dq = vec![0.0; dh];
        for (j, x) in cache.inputs.iter().enumerate() {
            let dk: Vec<f64> = q_h.iter().map(|&qi| ds[j] * scale * qi).collect();
            grads.wk[h].add_outer(&dk, x, 1.0);
            axpy(&mut d_inputs[j], &params.wk[h].matvec_t(&dk), 1.0);
            for (dqi, ki) in dq.iter_mut().zip(&keys[j]) {
                *dqi += ds[j] * scale * ki;
            }
        }
        grads.wq[h].add_outer(&dq, question, 1.0);
        let d_question_query = params.wq[h].matvec_t(&dq);
        axpy(d_inputs.last_mut().expect("question slot"), &d_question_query, 1.0);
    }

    let d_question = d_inputs.pop().expect("question slot");
    Ok(FusionBackward {
        params: grads,
        d_question,
        d_candidates: d_inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{attention_loss, fuse, label_distribution, FusionConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= 1e-4 * analytic.abs().max(numeric.abs()) || diff <= 1e-7
    }

    /// Total scalar loss used by the finite-difference probes: a fixed
    /// linear functional of the fused vector plus the attention CE.
    fn probe_loss(
        params: &FusionParameters,
        question: &[f64],
        candidates: &[Vec<f64>],
        g: &[f64],
        labels: Option<&[f64]>,
    ) -> f64 {
        let out = fuse(params, question, candidates).unwrap();
        let mut loss = dot(g, &out.fused);
        if let Some(y) = labels {
            loss += attention_loss(&out.attention, y).unwrap();
        }
        loss
    }

    /// Flatten params, perturb one coordinate, and report the loss.
    fn perturbed_loss(
        params: &FusionParameters,
        coord: usize,
        delta: f64,
        question: &[f64],
        candidates: &[Vec<f64>],
        g: &[f64],
        labels: Option<&[f64]>,
    ) -> f64 {
        let mut p = params.clone();
        let mut seen = 0usize;
        p.for_each_tensor_mut(|_, m| {
            if coord >= seen && coord < seen + m.len() {
                m.data[coord - seen] += delta;
            }
            seen += m.len();
        });
        probe_loss(&p, question, candidates, g, labels)
    }

    fn flat_gradient(grads: &FusionGradients) -> Vec<f64> {
        // Same order as for_each_tensor: wq heads, wk heads, wv heads, wo.
        let mut flat = Vec::new();
        for m in &grads.wq {
            flat.extend_from_slice(&m.data);
        }
        for m in &grads.wk {
            flat.extend_from_slice(&m.data);
        }
        for m in &grads.wv {
            flat.extend_from_slice(&m.data);
        }
        flat.extend_from_slice(&grads.wo.data);
        flat
    }

    fn param_count(params: &FusionParameters) -> usize {
        let mut n = 0;
        params.for_each_tensor(|_, m| n += m.len());
        n
    }

    fn check_gradients(seed: u64, k: usize, with_labels: bool, with_fused: bool) {
        let cfg = FusionConfig {
            input_dim: 5,
            model_dim: 8,
            heads: 2,
        };
        let params = FusionParameters::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let question: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let candidates: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let g: Vec<f64> = if with_fused {
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()
        } else {
            vec![0.0; 8]
        };
        let bearing: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
        let labels = if with_labels {
            Some(label_distribution(&bearing))
        } else {
            None
        };
        let labels_ref = labels.as_deref();

        let out = fuse(&params, &question, &candidates).unwrap();
        let back = fuse_backward(&params, &out.cache, &g, labels_ref).unwrap();
        let flat = flat_gradient(&back.params);
        assert_eq!(flat.len(), param_count(&params));

        let h = 1e-5;
        for coord in 0..flat.len() {
            let plus = perturbed_loss(&params, coord, h, &question, &candidates, &g, labels_ref);
            let minus = perturbed_loss(&params, coord, -h, &question, &candidates, &g, labels_ref);
            let numeric = (plus - minus) / (2.0 * h);
            assert!(
                close(flat[coord], numeric),
                "seed {seed} k {k} coord {coord}: analytic {} vs numeric {numeric}",
                flat[coord]
            );
        }

        // Input gradients: question coordinates...
        for i in 0..question.len() {
            let mut qp = question.clone();
            qp[i] += h;
            let mut qm = question.clone();
            qm[i] -= h;
            let plus = probe_loss(&params, &qp, &candidates, &g, labels_ref);
            let minus = probe_loss(&params, &qm, &candidates, &g, labels_ref);
            let numeric = (plus - minus) / (2.0 * h);
            assert!(
                close(back.d_question[i], numeric),
                "seed {seed} question coord {i}: analytic {} vs numeric {numeric}",
                back.d_question[i]
            );
        }
        // ... and candidate coordinates.
        for (j, cand) in candidates.iter().enumerate() {
            for i in 0..cand.len() {
                let mut cp = candidates.clone();
                cp[j][i] += h;
                let mut cm = candidates.clone();
                cm[j][i] -= h;
                let plus = probe_loss(&params, &question, &cp, &g, labels_ref);
                let minus = probe_loss(&params, &question, &cm, &g, labels_ref);
                let numeric = (plus - minus) / (2.0 * h);
                assert!(
                    close(back.d_candidates[j][i], numeric),
                    "seed {seed} candidate {j} coord {i}: analytic {} vs numeric {numeric}",
                    back.d_candidates[j][i]
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_with_both_losses() {
        for seed in 0..12 {
            check_gradients(seed, (seed as usize % 4) + 1, true, true);
        }
    }

    #[test]
    fn gradients_match_finite_differences_fused_only() {
        for seed in 20..26 {
            check_gradients(seed, 3, false, true);
        }
    }

    #[test]
    fn gradients_match_finite_differences_attention_only() {
        for seed in 30..36 {
            check_gradients(seed, 2, true, false);
        }
    }

    #[test]
    fn gradients_match_finite_differences_without_candidates() {
        for seed in 40..44 {
            check_gradients(seed, 0, true, true);
        }
    }

    #[test]
    fn zero_upstream_means_zero_gradients() {
        let cfg = FusionConfig {
            input_dim: 5,
            model_dim: 8,
            heads: 2,
        };
        let params = FusionParameters::new(cfg, 5).unwrap();
        let question = vec![0.4, -0.2, 0.1, 0.5, -0.3];
        let candidates = vec![vec![0.1, 0.2, -0.1, 0.3, 0.0]];
        let out = fuse(&params, &question, &candidates).unwrap();
        let back = fuse_backward(&params, &out.cache, &[0.0; 8], None).unwrap();
        let flat = flat_gradient(&back.params);
        assert!(flat.iter().all(|&v| v == 0.0));
        assert!(back.d_question.iter().all(|&v| v == 0.0));
        assert!(back.d_candidates[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_only_loss_leaves_value_projections_untouched() {
        let cfg = FusionConfig {
            input_dim: 5,
            model_dim: 8,
            heads: 2,
        };
        let params = FusionParameters::new(cfg, 9).unwrap();
        let question = vec![0.4, -0.2, 0.1, 0.5, -0.3];
        let candidates = vec![vec![0.1, 0.2, -0.1, 0.3, 0.0]];
        let out = fuse(&params, &question, &candidates).unwrap();
        let labels = label_distribution(&[true]);
        let back = fuse_backward(&params, &out.cache, &[0.0; 8], Some(&labels)).unwrap();
        for m in &back.params.wv {
            assert!(m.data.iter().all(|&v| v == 0.0));
        }
        assert!(back.params.wo.data.iter().all(|&v| v == 0.0));
        // ... while query and key projections do move.
        assert!(back.params.wq.iter().any(|m| m.data.iter().any(|&v| v != 0.0)));
        assert!(back.params.wk.iter().any(|m| m.data.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn gradient_descent_on_attention_loss_moves_attention_toward_labels() {
        let cfg = FusionConfig {
            input_dim: 5,
            model_dim: 8,
            heads: 2,
        };
        let mut params = FusionParameters::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let question: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let candidates: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = label_distribution(&[false, true, false]);
        let before = {
            let out = fuse(&params, &question, &candidates).unwrap();
            attention_loss(&out.attention, &labels).unwrap()
        };
        for _ in 0..50 {
            let out = fuse(&params, &question, &candidates).unwrap();
            let back = fuse_backward(&params, &out.cache, &[0.0; 8], Some(&labels)).unwrap();
            back.params.apply(&mut params, 0.1);
        }
        let after = {
            let out = fuse(&params, &question, &candidates).unwrap();
            attention_loss(&out.attention, &labels).unwrap()
        };
        assert!(
            after < before - 0.05,
            "training should reduce the attention loss: {before} -> {after}"
        );
    }

    #[test]
    fn accumulation_matches_two_separate_applications() {
        let cfg = FusionConfig {
            input_dim: 5,
            model_dim: 8,
            heads: 2,
        };
        let params = FusionParameters::new(cfg, 21).unwrap();
        let question = vec![0.3, 0.1, -0.4, 0.2, 0.0];
        let candidates = vec![vec![0.5, -0.1, 0.2, 0.1, -0.2]];
        let out = fuse(&params, &question, &candidates).unwrap();
        let g = vec![0.25; 8];
        let back = fuse_backward(&params, &out.cache, &g, None).unwrap();
        let mut sum = FusionGradients::zeros_like(&params);
        sum.add_scaled(&back.params, 0.5);
        sum.add_scaled(&back.params, 0.5);
        for (m, n) in sum.wq.iter().zip(&back.params.wq) {
            for (x, y) in m.data.iter().zip(&n.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
