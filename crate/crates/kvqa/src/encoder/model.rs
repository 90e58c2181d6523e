//! Transformer parameters, forward pass and analytic backward pass.
//!
//! Post-norm layers: `x <- LN(x + MHSA(x))`, `x <- LN(x + FFN(x))`,
//! GELU activations, learned position and segment embeddings, and a
//! linear classifier over the answer vocabulary read from the MASK
//! slot. Everything is 64-bit and hand-differentiated; the tests
//! compare every gradient against central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::sequence::{InputSequence, SlotContent, NUM_SEGMENTS};
use crate::encoder::ModelConfig;
use crate::fusion::{FusionGradients, FusionParameters};
use crate::linalg::{softmax_in_place, Mat};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Geometry feature width: x1, y1, x2, y2, confidence.
const GEO_DIM: usize = 5;

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParameters {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub ffn_w1: Mat,
    pub ffn_b1: Mat,
    pub ffn_w2: Mat,
    pub ffn_b2: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
}

/// Every learned tensor in the answerer, including the fusion block's
/// when the configuration uses it. Doubles as the gradient container:
/// gradients are just a zeroed copy filled by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParameters {
    pub config: ModelConfig,
    pub n_words: usize,
    pub n_answers: usize,
    pub word_emb: Mat,
    pub pos_emb: Mat,
    pub seg_emb: Mat,
    pub w_geo: Mat,
    /// Projection of sentence embeddings into the model dimension
    /// (linear fusion mode only).
    pub w_lin: Option<Mat>,
    /// Fusion block (mha fusion mode only).
    pub fusion: Option<FusionParameters>,
    pub layers: Vec<LayerParameters>,
    pub cls_w: Mat,
    pub cls_b: Mat,
}

impl EncoderParameters {
    pub fn new(config: &ModelConfig, n_words: usize, n_answers: usize) -> Result<Self> {
        config.validate()?;
        if n_words == 0 || n_answers == 0 {
            return Err(Error::Config(
                "encoder needs non-empty token and answer vocabularies".into(),
            ));
        }
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let word_emb = Mat::xavier(n_words, d, &mut rng);
        let pos_emb = Mat::xavier(config.max_len, d, &mut rng);
        let seg_emb = Mat::xavier(NUM_SEGMENTS, d, &mut rng);
        let w_geo = Mat::xavier(d, GEO_DIM, &mut rng);
        let w_lin = match config.fusion_mode {
            super::FusionMode::Linear => Some(Mat::xavier(d, config.sentence_dim, &mut rng)),
            _ => None,
        };
        let fusion = match config.fusion_mode {
            super::FusionMode::Mha => Some(FusionParameters::new(
                crate::fusion::FusionConfig {
                    input_dim: config.sentence_dim,
                    model_dim: d,
                    heads: config.heads,
                },
                config.seed ^ 0x9e37_79b9_7f4a_7c15,
            )?),
            _ => None,
        };
        let layers = (0..config.layers)
            .map(|_| LayerParameters {
                wq: Mat::xavier(d, d, &mut rng),
                wk: Mat::xavier(d, d, &mut rng),
                wv: Mat::xavier(d, d, &mut rng),
                wo: Mat::xavier(d, d, &mut rng),
                ln1_g: ones(1, d),
                ln1_b: Mat::zeros(1, d),
                ffn_w1: Mat::xavier(config.ffn, d, &mut rng),
                ffn_b1: Mat::zeros(1, config.ffn),
                ffn_w2: Mat::xavier(d, config.ffn, &mut rng),
                ffn_b2: Mat::zeros(1, d),
                ln2_g: ones(1, d),
                ln2_b: Mat::zeros(1, d),
            })
            .collect();
        let cls_w = Mat::xavier(n_answers, d, &mut rng);
        let cls_b = Mat::zeros(1, n_answers);
        Ok(EncoderParameters {
            config: *config,
            n_words,
            n_answers,
            word_emb,
            pos_emb,
            seg_emb,
            w_geo,
            w_lin,
            fusion,
            layers,
            cls_w,
            cls_b,
        })
    }

    /// A same-shaped container of zeros, used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, m| m.fill(0.0));
        z
    }

    /// Visit every tensor in a fixed, documented order with stable
    /// names. The checkpoint format, SGD updates and the gradient
    /// checks all iterate through here, so the order is the contract.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Mat)) {
        f("word_emb", &self.word_emb);
        f("pos_emb", &self.pos_emb);
        f("seg_emb", &self.seg_emb);
        f("w_geo", &self.w_geo);
        if let Some(w) = &self.w_lin {
            f("w_lin", w);
        }
        if let Some(fusion) = &self.fusion {
            fusion.for_each_tensor(|name, m| f(&name, m));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.wq"), &layer.wq);
            f(&format!("layer{i}.wk"), &layer.wk);
            f(&format!("layer{i}.wv"), &layer.wv);
            f(&format!("layer{i}.wo"), &layer.wo);
            f(&format!("layer{i}.ln1_g"), &layer.ln1_g);
            f(&format!("layer{i}.ln1_b"), &layer.ln1_b);
            f(&format!("layer{i}.ffn_w1"), &layer.ffn_w1);
            f(&format!("layer{i}.ffn_b1"), &layer.ffn_b1);
            f(&format!("layer{i}.ffn_w2"), &layer.ffn_w2);
            f(&format!("layer{i}.ffn_b2"), &layer.ffn_b2);
            f(&format!("layer{i}.ln2_g"), &layer.ln2_g);
            f(&format!("layer{i}.ln2_b"), &layer.ln2_b);
        }
        f("cls_w", &self.cls_w);
        f("cls_b", &self.cls_b);
    }

    /// Mutable variant of [`Self::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Mat)) {
        f("word_emb", &mut self.word_emb);
        f("pos_emb", &mut self.pos_emb);
        f("seg_emb", &mut self.seg_emb);
        f("w_geo", &mut self.w_geo);
        if let Some(w) = &mut self.w_lin {
            f("w_lin", w);
        }
        if let Some(fusion) = &mut self.fusion {
            fusion.for_each_tensor_mut(|name, m| f(&name, m));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.wq"), &mut layer.wq);
            f(&format!("layer{i}.wk"), &mut layer.wk);
            f(&format!("layer{i}.wv"), &mut layer.wv);
            f(&format!("layer{i}.wo"), &mut layer.wo);
            f(&format!("layer{i}.ln1_g"), &mut layer.ln1_g);
            f(&format!("layer{i}.ln1_b"), &mut layer.ln1_b);
            f(&format!("layer{i}.ffn_w1"), &mut layer.ffn_w1);
            f(&format!("layer{i}.ffn_b1"), &mut layer.ffn_b1);
            f(&format!("layer{i}.ffn_w2"), &mut layer.ffn_w2);
            f(&format!("layer{i}.ffn_b2"), &mut layer.ffn_b2);
            f(&format!("layer{i}.ln2_g"), &mut layer.ln2_g);
            f(&format!("layer{i}.ln2_b"), &mut layer.ln2_b);
        }
        f("cls_w", &mut self.cls_w);
        f("cls_b", &mut self.cls_b);
    }

    /// Accumulate `other` (same shapes) scaled by `scale`; this is both
    /// gradient accumulation and, with a negative scale, the SGD step.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        self.word_emb.add_scaled(&other.word_emb, scale);
        self.pos_emb.add_scaled(&other.pos_emb, scale);
        self.seg_emb.add_scaled(&other.seg_emb, scale);
        self.w_geo.add_scaled(&other.w_geo, scale);
        if let (Some(a), Some(b)) = (&mut self.w_lin, &other.w_lin) {
            a.add_scaled(b, scale);
        }
        if let (Some(a), Some(b)) = (&mut self.fusion, &other.fusion) {
            for (p, g) in a.wq.iter_mut().zip(&b.wq) {
                p.add_scaled(g, scale);
            }
            for (p, g) in a.wk.iter_mut().zip(&b.wk) {
                p.add_scaled(g, scale);
            }
            for (p, g) in a.wv.iter_mut().zip(&b.wv) {
                p.add_scaled(g, scale);
            }
            a.wo.add_scaled(&b.wo, scale);
        }
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.wq.add_scaled(&o.wq, scale);
            l.wk.add_scaled(&o.wk, scale);
            l.wv.add_scaled(&o.wv, scale);
            l.wo.add_scaled(&o.wo, scale);
            l.ln1_g.add_scaled(&o.ln1_g, scale);
            l.ln1_b.add_scaled(&o.ln1_b, scale);
            l.ffn_w1.add_scaled(&o.ffn_w1, scale);
            l.ffn_b1.add_scaled(&o.ffn_b1, scale);
            l.ffn_w2.add_scaled(&o.ffn_w2, scale);
            l.ffn_b2.add_scaled(&o.ffn_b2, scale);
            l.ln2_g.add_scaled(&o.ln2_g, scale);
            l.ln2_b.add_scaled(&o.ln2_b, scale);
        }
        self.cls_w.add_scaled(&other.cls_w, scale);
        self.cls_b.add_scaled(&other.cls_b, scale);
    }

    /// Fold fusion-block gradients into this gradient container.
    pub fn add_fusion_gradients(&mut self, grads: &FusionGradients, scale: f64) {
        let fusion = self
            .fusion
            .as_mut()
            .expect("fusion gradients require a fusion block");
        for (p, g) in fusion.wq.iter_mut().zip(&grads.wq) {
            p.add_scaled(g, scale);
        }
        for (p, g) in fusion.wk.iter_mut().zip(&grads.wk) {
            p.add_scaled(g, scale);
        }
        for (p, g) in fusion.wv.iter_mut().zip(&grads.wv) {
            p.add_scaled(g, scale);
        }
        fusion.wo.add_scaled(&grads.wo, scale);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, m| n += m.len());
        n
    }
}

fn ones(rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    m.fill(1.0);
    m
}

/// (normalized_out, xhat, inv_std) for one slot.
fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out: Vec<f64> = xhat
        .iter()
        .zip(g.iter().zip(b))
        .map(|(xh, (gi, bi))| gi * xh + bi)
        .collect();
    (out, xhat, inv_std)
}

/// Gradient through [`layer_norm`] for one slot; accumulates dg/db and
/// returns dx.
fn layer_norm_backward(
    d_out: &[f64],
    xhat: &[f64],
    inv_std: f64,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let d = d_out.len() as f64;
    let dxhat: Vec<f64> = d_out.iter().zip(g).map(|(o, gi)| o * gi).collect();
    for ((dgi, dbi), (o, xh)) in dg.iter_mut().zip(db.iter_mut()).zip(d_out.iter().zip(xhat)) {
        *dgi += o * xh;
        *dbi += o;
    }
    let m1 = dxhat.iter().sum::<f64>() / d;
    let m2 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(dxh, xh)| inv_std * (dxh - m1 - xh * m2))
        .collect()
}

struct LayerCache {
    x: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Per head: L x L post-softmax attention.
    weights: Vec<Vec<Vec<f64>>>,
    ctx: Vec<Vec<f64>>,
    ln1_xhat: Vec<Vec<f64>>,
    ln1_inv: Vec<f64>,
    y: Vec<Vec<f64>>,
    ffn_u: Vec<Vec<f64>>,
    ffn_a: Vec<Vec<f64>>,
    ln2_xhat: Vec<Vec<f64>>,
    ln2_inv: Vec<f64>,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    mask_hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Content embedding of one slot, before position and segment terms.
fn slot_content(params: &EncoderParameters, content: &SlotContent) -> Result<Vec<f64>> {
    let d = params.config.d_model;
    match content {
        SlotContent::Special(s) => Ok(params.word_emb.row(s.token_id()).to_vec()),
        SlotContent::Word(id) => {
            if *id >= params.n_words {
                return Err(Error::validation(format!(
                    "word id {id} is outside the checkpoint vocabulary ({} tokens)",
                    params.n_words
                )));
            }
            Ok(params.word_emb.row(*id).to_vec())
        }
        SlotContent::Region(r) => {
            if r.label >= params.n_words {
                return Err(Error::validation(format!(
                    "region label id {} is outside the checkpoint vocabulary",
                    r.label
                )));
            }
            let mut e = params.word_emb.row(r.label).to_vec();
            let geo = params.w_geo.matvec(&r.geometry);
            for (ei, gi) in e.iter_mut().zip(&geo) {
                *ei += gi;
            }
            Ok(e)
        }
        SlotContent::Sentence(emb) => {
            let w = params.w_lin.as_ref().ok_or_else(|| {
                Error::validation("sentence slots require the linear fusion mode")
            })?;
            if emb.len() != w.cols {
                return Err(Error::Dimension {
                    expected: w.cols,
                    actual: emb.len(),
                });
            }
            Ok(w.matvec(emb))
        }
        SlotContent::Fused(f) => {
            if f.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: f.len(),
                });
            }
            Ok(f.clone())
        }
    }
}

/// Run the encoder over an assembled sequence; answer logits are read
/// from the MASK slot.
pub fn forward(
    params: &EncoderParameters,
    seq: &InputSequence,
) -> Result<(Vec<f64>, ForwardCache)> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = seq.len();
    if n == 0 {
        return Err(Error::validation("cannot encode an empty sequence"));
    }
    if n > cfg.max_len {
        return Err(Error::validation(format!(
            "sequence length {n} exceeds max_len {}",
            cfg.max_len
        )));
    }

    // Embedding sum: content + position + segment.
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(n);
    for slot in &seq.slots {
        if slot.position >= cfg.max_len {
            return Err(Error::validation(format!(
                "position {} exceeds max_len {}",
                slot.position, cfg.max_len
            )));
        }
        if slot.segment >= NUM_SEGMENTS {
            return Err(Error::validation(format!(
                "segment id {} out of range",
                slot.segment
            )));
        }
        let mut e = slot_content(params, &slot.content)?;
        for (ei, (p, s)) in e.iter_mut().zip(
            params
                .pos_emb
                .row(slot.position)
                .iter()
                .zip(params.seg_emb.row(slot.segment)),
        ) {
            *ei += p + s;
        }
        x.push(e);
    }

    let mut layer_caches = Vec::with_capacity(cfg.layers);
    for layer in &params.layers {
        let q: Vec<Vec<f64>> = x.iter().map(|xi| layer.wq.matvec(xi)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|xi| layer.wk.matvec(xi)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|xi| layer.wv.matvec(xi)).collect();

        let mut weights = Vec::with_capacity(heads);
        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            let mut head_weights = Vec::with_capacity(n);
            for i in 0..n {
                let qi = &q[i][lo..hi];
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let kj = &k[j][lo..hi];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                softmax_in_place(&mut scores);
                for (j, w) in scores.iter().enumerate() {
                    let vj = &v[j][lo..hi];
                    for (c, vv) in ctx[i][lo..hi].iter_mut().zip(vj) {
                        *c += w * vv;
                    }
                }
                head_weights.push(scores);
            }
            weights.push(head_weights);
        }

        let mut ln1_xhat = Vec::with_capacity(n);
        let mut ln1_inv = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let attn_out = layer.wo.matvec(&ctx[i]);
            let sum1: Vec<f64> = x[i].iter().zip(&attn_out).map(|(a, b)| a + b).collect();
            let (out, xhat, inv) =
                layer_norm(&sum1, layer.ln1_g.row(0), layer.ln1_b.row(0));
            ln1_xhat.push(xhat);
            ln1_inv.push(inv);
            y.push(out);
        }

        let mut ffn_u = Vec::with_capacity(n);
        let mut ffn_a = Vec::with_capacity(n);
        let mut ln2_xhat = Vec::with_capacity(n);
        let mut ln2_inv = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for yi in &y {
            let mut u = layer.ffn_w1.matvec(yi);
            for (ui, bi) in u.iter_mut().zip(layer.ffn_b1.row(0)) {
                *ui += bi;
            }
            let a: Vec<f64> = u.iter().map(|&ui| gelu(ui)).collect();
            let mut f = layer.ffn_w2.matvec(&a);
            for (fi, bi) in f.iter_mut().zip(layer.ffn_b2.row(0)) {
                *fi += bi;
            }
            let sum2: Vec<f64> = yi.iter().zip(&f).map(|(a, b)| a + b).collect();
            let (o, xhat, inv) = layer_norm(&sum2, layer.ln2_g.row(0), layer.ln2_b.row(0));
            ffn_u.push(u);
            ffn_a.push(a);
            ln2_xhat.push(xhat);
            ln2_inv.push(inv);
            out.push(o);
        }

        layer_caches.push(LayerCache {
            x: std::mem::take(&mut x),
            q,
            k,
            v,
            weights,
            ctx,
            ln1_xhat,
            ln1_inv,
            y,
            ffn_u,
            ffn_a,
            ln2_xhat,
            ln2_inv,
        });
        x = out;
    }

    let mask_hidden = x[seq.mask_index].clone();
    let mut logits = params.cls_w.matvec(&mask_hidden);
    for (l, b) in logits.iter_mut().zip(params.cls_b.row(0)) {
        *l += b;
    }
    Ok((
        logits.clone(),
        ForwardCache {
            layers: layer_caches,
            mask_hidden,
            logits,
        },
    ))
}

/// Soft cross-entropy against a target distribution; returns the loss
/// and its gradient on the logits (`softmax(logits) - target`).
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(Error::Dimension {
            expected: target.len(),
            actual: logits.len(),
        });
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let loss = target
        .iter()
        .zip(&p)
        .map(|(&y, &pi)| {
            // Clamp underflow but let NaN through — `f64::max` would
            // swallow it and hide a diverged model.
            let clamped = if pi < 1e-300 { 1e-300 } else { pi };
            if y > 0.0 {
                -y * clamped.ln()
            } else {
                0.0
            }
        })
        .sum();
    let grad = p.iter().zip(target).map(|(pi, yi)| pi - yi).collect();
    Ok((loss, grad))
}

/// Backward pass through [`forward`]. Returns parameter gradients and,
/// when the sequence carries a fused slot, the gradient on that fused
/// vector so the caller can continue into the fusion block.
pub fn backward(
    params: &EncoderParameters,
    seq: &InputSequence,
    cache: &ForwardCache,
    d_logits: &[f64],
) -> Result<(EncoderParameters, Option<Vec<f64>>)> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = seq.len();
    if d_logits.len() != params.n_answers {
        return Err(Error::Dimension {
            expected: params.n_answers,
            actual: d_logits.len(),
        });
    }

    let mut grads = params.zeros_like();

    // Classifier.
    grads.cls_w.add_outer(d_logits, &cache.mask_hidden, 1.0);
    for (b, g) in grads.cls_b.row_mut(0).iter_mut().zip(d_logits) {
        *b += g;
    }
    let mut d_x: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    d_x[seq.mask_index] = params.cls_w.matvec_t(d_logits);

    // Layers, in reverse.
    for (layer, lc, lg) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(&mut grads.layers)
        .rev()
        .map(|((a, b), c)| (a, b, c))
    {
        // LN2 <- sum2 = y + ffn(y)
        let mut d_y: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut d_ffn_out: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let d_sum2 = layer_norm_backward(
                &d_x[i],
                &lc.ln2_xhat[i],
                lc.ln2_inv[i],
                layer.ln2_g.row(0),
                lg.ln2_g.row_mut(0),
                lg.ln2_b.row_mut(0),
            );
            d_y.push(d_sum2.clone());
            d_ffn_out.push(d_sum2);
        }

        // FFN
        for i in 0..n {
            let d_a = layer.ffn_w2.matvec_t(&d_ffn_out[i]);
            lg.ffn_w2.add_outer(&d_ffn_out[i], &lc.ffn_a[i], 1.0);
            for (b, g) in lg.ffn_b2.row_mut(0).iter_mut().zip(&d_ffn_out[i]) {
                *b += g;
            }
            let d_u: Vec<f64> = d_a
                .iter()
                .zip(&lc.ffn_u[i])
                .map(|(da, &u)| da * gelu_prime(u))
                .collect();
            lg.ffn_w1.add_outer(&d_u, &lc.y[i], 1.0);
            for (b, g) in lg.ffn_b1.row_mut(0).iter_mut().zip(&d_u) {
                *b += g;
            }
            let back = layer.ffn_w1.matvec_t(&d_u);
            for (dy, db) in d_y[i].iter_mut().zip(&back) {
                *dy += db;
            }
        }

        // LN1 <- sum1 = x + attn(x)
        let mut d_sum1: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            d_sum1.push(layer_norm_backward(
                &d_y[i],
                &lc.ln1_xhat[i],
                lc.ln1_inv[i],
                layer.ln1_g.row(0),
                lg.ln1_g.row_mut(0),
                lg.ln1_b.row_mut(0),
            ));
        }

        // Attention. d_sum1 feeds both the residual and the attention
        // output path.
        let mut d_x_next: Vec<Vec<f64>> = d_sum1.clone();
        let mut d_q = vec![vec![0.0; d]; n];
        let mut d_k = vec![vec![0.0; d]; n];
        let mut d_v = vec![vec![0.0; d]; n];
        for i in 0..n {
            // attn_out_i = wo . ctx_i
            lg.wo.add_outer(&d_sum1[i], &lc.ctx[i], 1.0);
        }
        let d_ctx: Vec<Vec<f64>> = (0..n).map(|i| layer.wo.matvec_t(&d_sum1[i])).collect();
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            for i in 0..n {
                let d_ctx_h = &d_ctx[i][lo..hi];
                let w_row = &lc.weights[h][i];
                // dw over keys, plus value gradients.
                let mut dw: Vec<f64> = Vec::with_capacity(n);
                for j in 0..n {
                    let vj = &lc.v[j][lo..hi];
                    dw.push(d_ctx_h.iter().zip(vj).map(|(a, b)| a * b).sum());
                    for (dv, dc) in d_v[j][lo..hi].iter_mut().zip(d_ctx_h) {
                        *dv += w_row[j] * dc;
                    }
                }
                let mixed: f64 = dw.iter().zip(w_row).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let ds = w_row[j] * (dw[j] - mixed);
                    let kj = &lc.k[j][lo..hi];
                    for (dq, kk) in d_q[i][lo..hi].iter_mut().zip(kj) {
                        *dq += ds * scale * kk;
                    }
                    let qi = &lc.q[i][lo..hi];
                    for (dk, qq) in d_k[j][lo..hi].iter_mut().zip(qi) {
                        *dk += ds * scale * qq;
                    }
                }
            }
        }
        for i in 0..n {
            lg.wq.add_outer(&d_q[i], &lc.x[i], 1.0);
            lg.wk.add_outer(&d_k[i], &lc.x[i], 1.0);
            lg.wv.add_outer(&d_v[i], &lc.x[i], 1.0);
            let bq = layer.wq.matvec_t(&d_q[i]);
            let bk = layer.wk.matvec_t(&d_k[i]);
            let bv = layer.wv.matvec_t(&d_v[i]);
            for (((dx, a), b), c) in d_x_next[i].iter_mut().zip(&bq).zip(&bk).zip(&bv) {
                *dx += a + b + c;
            }
        }
        d_x = d_x_next;
    }

    // Embedding scatter.
    let mut d_fused = None;
    for (slot, dx) in seq.slots.iter().zip(&d_x) {
        for (g, v) in grads.pos_emb.row_mut(slot.position).iter_mut().zip(dx) {
            *g += v;
        }
        for (g, v) in grads.seg_emb.row_mut(slot.segment).iter_mut().zip(dx) {
            *g += v;
        }
        match &slot.content {
            SlotContent::Special(s) => {
                for (g, v) in grads.word_emb.row_mut(s.token_id()).iter_mut().zip(dx) {
                    *g += v;
                }
            }
            SlotContent::Word(id) => {
                for (g, v) in grads.word_emb.row_mut(*id).iter_mut().zip(dx) {
                    *g += v;
                }
            }
            SlotContent::Region(r) => {
                for (g, v) in grads.word_emb.row_mut(r.label).iter_mut().zip(dx) {
                    *g += v;
                }
                grads.w_geo.add_outer(dx, &r.geometry, 1.0);
            }
            SlotContent::Sentence(emb) => {
                grads
                    .w_lin
                    .as_mut()
                    .expect("sentence slot implies w_lin")
                    .add_outer(dx, emb, 1.0);
            }
            SlotContent::Fused(_) => {
                d_fused = Some(dx.clone());
            }
        }
    }

    Ok((grads, d_fused))
}
