//! Two-layer multi-head graph attention network for link prediction,
//! with hand-written forward/backward passes.
//!
//! Layer 1 concatenates 8 heads of width 8 (hidden 64); layer 2 averages
//! 8 heads of width 64. Attention logits use the split form
//! `a_src . W h_i + a_dst . W h_j`, LeakyReLU(0.2), softmax over the
//! neighborhood (self-loops required). ELU follows aggregation; final
//! embeddings are row L2-normalized before scoring.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::behavior::sigmoid;
use crate::config::TrainConfig;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum GatError {
    #[error("node {0} has an empty neighborhood; add a self-loop")]
    IsolatedNode(usize),
    #[error("not enough positive edges to train ({0} < {1})")]
    TooFewPositives(usize, usize),
    #[error("validation split degenerate: only one class present")]
    DegenerateValidation,
    #[error("AUC requires both classes")]
    SingleClassAuc,
    #[error("model has not been trained")]
    Untrained,
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
}

/// Compressed sparse row adjacency. Neighbor lists must include the node
/// itself (self-loop); order within a list is fixed at construction.
#[derive(Debug, Clone, Default)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<u32>,
}

impl Csr {
    pub fn from_lists(lists: &[Vec<u32>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for l in lists {
            neighbors.extend_from_slice(l);
            offsets.push(neighbors.len());
        }
        Csr { offsets, neighbors }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }

    #[inline]
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatDims {
    pub in_dim: usize,
    pub heads: usize,
    /// Per-head width of layer 1 (concatenated).
    pub d1: usize,
    /// Per-head width of layer 2 (averaged).
    pub d2: usize,
}

impl GatDims {
    pub fn standard(in_dim: usize) -> Self {
        GatDims { in_dim, heads: 8, d1: 8, d2: 64 }
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.d1
    }

    fn w1_len(&self) -> usize {
        self.in_dim * self.d1
    }

    fn w2_len(&self) -> usize {
        self.hidden() * self.d2
    }

    pub fn param_count(&self) -> usize {
        self.heads * (self.w1_len() + 2 * self.d1 + self.w2_len() + 2 * self.d2)
    }

    fn w1_off(&self, h: usize) -> usize {
        h * self.w1_len()
    }

    fn a1_src_off(&self, h: usize) -> usize {
        self.heads * self.w1_len() + h * self.d1
    }

    fn a1_dst_off(&self, h: usize) -> usize {
        self.heads * (self.w1_len() + self.d1) + h * self.d1
    }

    fn w2_off(&self, h: usize) -> usize {
        self.heads * (self.w1_len() + 2 * self.d1) + h * self.w2_len()
    }

    fn a2_src_off(&self, h: usize) -> usize {
        self.heads * (self.w1_len() + 2 * self.d1 + self.w2_len()) + h * self.d2
    }

    fn a2_dst_off(&self, h: usize) -> usize {
        self.heads * (self.w1_len() + 2 * self.d1 + self.w2_len() + self.d2) + h * self.d2
    }
}

#[derive(Debug, Clone)]
pub struct GatModel {
    pub dims: GatDims,
    pub theta: Vec<f64>,
    pub last_trained_step: Option<u32>,
    pub validation_auc: f64,
}

impl GatModel {
    /// Glorot-style scaled-uniform init.
    pub fn init(dims: GatDims, rng: &mut ChaCha8Rng) -> Self {
        let mut theta = vec![0.0; dims.param_count()];
        let mut fill = |lo: usize, len: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut theta[lo..lo + len] {
                *v = rng.random_range(-bound..bound);
            }
        };
        for h in 0..dims.heads {
            fill(dims.w1_off(h), dims.w1_len(), dims.in_dim, dims.d1, rng);
            fill(dims.a1_src_off(h), dims.d1, dims.d1, 1, rng);
            fill(dims.a1_dst_off(h), dims.d1, dims.d1, 1, rng);
            fill(dims.w2_off(h), dims.w2_len(), dims.hidden(), dims.d2, rng);
            fill(dims.a2_src_off(h), dims.d2, dims.d2, 1, rng);
            fill(dims.a2_dst_off(h), dims.d2, dims.d2, 1, rng);
        }
        GatModel { dims, theta, last_trained_step: None, validation_auc: f64::NAN }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Embeddings for every node (inference mode, no dropout).
    pub fn embed(&self, graph: &Csr, features: &Array2<f64>) -> Result<Array2<f64>, GatError> {
        let cache = forward(&self.theta, self.dims, graph, features, None)?;
        Ok(cache.emb)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn elu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        pre.exp()
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Per-layer, per-head attention state kept for the backward pass.
struct AttnCache {
    /// LeakyReLU input per edge.
    pre: Vec<f64>,
    /// Post-softmax (and post-dropout-mask) coefficient per edge.
    alpha: Vec<f64>,
    /// Inverted-dropout scale per edge (1 when inference).
    mask: Vec<f64>,
}

pub struct ForwardCache {
    x: Array2<f64>,
    p1: Vec<Array2<f64>>,
    att1: Vec<AttnCache>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    p2: Vec<Array2<f64>>,
    att2: Vec<AttnCache>,
    m: Array2<f64>,
    norms: Vec<f64>,
    pub emb: Array2<f64>,
}

struct Dropout<'a> {
    p: f64,
    rng: &'a mut ChaCha8Rng,
}

/// One attention layer: transformed inputs `p[h]`, logits, softmax over each
/// neighborhood, weighted aggregation.
#[allow(clippy::too_many_arguments)]
fn attention_layer(
    theta: &[f64],
    graph: &Csr,
    p: &[Array2<f64>],
    a_src_off: impl Fn(usize) -> usize,
    a_dst_off: impl Fn(usize) -> usize,
    d: usize,
    heads: usize,
    dropout: &mut Option<Dropout>,
) -> (Vec<AttnCache>, Vec<Array2<f64>>) {
    let n = graph.node_count();
    let mut caches = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let ph = &p[h];
        let a_src = &theta[a_src_off(h)..a_src_off(h) + d];
        let a_dst = &theta[a_dst_off(h)..a_dst_off(h) + d];
        // Per-node projections onto the split attention vectors.
        let mut s = vec![0.0; n];
        let mut t = vec![0.0; n];
        for i in 0..n {
            let row = ph.row(i);
            let mut sv = 0.0;
            let mut tv = 0.0;
            for k in 0..d {
                sv += row[k] * a_src[k];
                tv += row[k] * a_dst[k];
            }
            s[i] = sv;
            t[i] = tv;
        }
        let ne = graph.edge_count();
        let mut pre = vec![0.0; ne];
        let mut alpha = vec![0.0; ne];
        let mut mask = vec![1.0; ne];
        let mut out = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let r = graph.range(i);
            debug_assert!(!r.is_empty(), "node {i} isolated");
            let mut max = f64::NEG_INFINITY;
            for e in r.clone() {
                let j = graph.neighbors[e] as usize;
                let v = leaky(s[i] + t[j]);
                pre[e] = v;
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for e in r.clone() {
                let v = (pre[e] - max).exp();
                alpha[e] = v;
                sum += v;
            }
            for e in r.clone() {
                alpha[e] /= sum;
            }
            if let Some(dp) = dropout.as_mut() {
                let keep = 1.0 - dp.p;
                for e in r.clone() {
                    let m = if dp.rng.random::<f64>() < dp.p { 0.0 } else { 1.0 / keep };
                    mask[e] = m;
                    alpha[e] *= m;
                }
            }
            let mut acc = vec![0.0; d];
            for e in r.clone() {
                let j = graph.neighbors[e] as usize;
                let a = alpha[e];
                if a != 0.0 {
                    let row = ph.row(j);
                    for k in 0..d {
                        acc[k] += a * row[k];
                    }
                }
            }
            let mut orow = out.row_mut(i);
            for k in 0..d {
                orow[k] = acc[k];
            }
        }
        caches.push(AttnCache { pre, alpha, mask });
        outs.push(out);
    }
    (caches, outs)
}

/// Full forward pass. `dropout` enables input and attention dropout
/// (training mode).
pub fn forward(
    theta: &[f64],
    dims: GatDims,
    graph: &Csr,
    features: &Array2<f64>,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<ForwardCache, GatError> {
    let n = graph.node_count();
    assert_eq!(features.nrows(), n, "feature rows must match node count");
    assert_eq!(features.ncols(), dims.in_dim);
    for i in 0..n {
        if graph.range(i).is_empty() {
            return Err(GatError::IsolatedNode(i));
        }
    }

    let mut dropout = dropout.map(|(p, rng)| Dropout { p, rng });

    // Input dropout.
    let x = if let Some(dp) = dropout.as_mut() {
        let keep = 1.0 - dp.p;
        let mut x = features.clone();
        for v in x.iter_mut() {
            if dp.rng.random::<f64>() < dp.p {
                *v = 0.0;
            } else {
                *v /= keep;
            }
        }
        x
    } else {
        features.clone()
    };

    // Layer 1.
    let p1: Vec<Array2<f64>> = (0..dims.heads)
        .map(|h| {
            let w = ndarray::ArrayView2::from_shape(
                (dims.in_dim, dims.d1),
                &theta[dims.w1_off(h)..dims.w1_off(h) + dims.w1_len()],
            )
            .unwrap();
            x.dot(&w)
        })
        .collect();
    let (att1, z1_heads) = attention_layer(
        theta,
        graph,
        &p1,
        |h| dims.a1_src_off(h),
        |h| dims.a1_dst_off(h),
        dims.d1,
        dims.heads,
        &mut dropout,
    );
    // Concatenate heads, then ELU.
    let hidden = dims.hidden();
    let mut z1 = Array2::<f64>::zeros((n, hidden));
    for (h, zh) in z1_heads.iter().enumerate() {
        let base = h * dims.d1;
        for i in 0..n {
            let src = zh.row(i);
            for k in 0..dims.d1 {
                z1[(i, base + k)] = src[k];
            }
        }
    }
    let h1 = z1.mapv(elu);

    // Layer 2.
    let p2: Vec<Array2<f64>> = (0..dims.heads)
        .map(|h| {
            let w = ndarray::ArrayView2::from_shape(
                (hidden, dims.d2),
                &theta[dims.w2_off(h)..dims.w2_off(h) + dims.w2_len()],
            )
            .unwrap();
            h1.dot(&w)
        })
        .collect();
    let (att2, z2_heads) = attention_layer(
        theta,
        graph,
        &p2,
        |h| dims.a2_src_off(h),
        |h| dims.a2_dst_off(h),
        dims.d2,
        dims.heads,
        &mut dropout,
    );
    // Average heads, then ELU, then row-normalize.
    let mut m = Array2::<f64>::zeros((n, dims.d2));
    for zh in &z2_heads {
        m += zh;
    }
    m /= dims.heads as f64;
    let h2 = m.mapv(elu);
    let mut norms = vec![0.0; n];
    let mut emb = h2.clone();
    for i in 0..n {
        let r = h2.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        norms[i] = r;
        emb.row_mut(i).iter_mut().for_each(|v| *v /= r);
    }

    Ok(ForwardCache { x, p1, att1, z1, h1, p2, att2, m, norms, emb })
}

/// Labeled node pair for the link-prediction objective.
#[derive(Debug, Clone, Copy)]
pub struct PairExample {
    pub a: u32,
    pub b: u32,
    pub label: f64,
}

/// Mean binary cross-entropy of `sigmoid(emb_a . emb_b)` over the batch.
pub fn batch_loss(emb: &Array2<f64>, batch: &[PairExample]) -> f64 {
    let mut loss = 0.0;
    for ex in batch {
        let yhat = sigmoid(emb.row(ex.a as usize).dot(&emb.row(ex.b as usize)));
        let yhat = yhat.clamp(1e-12, 1.0 - 1e-12);
        loss -= ex.label * yhat.ln() + (1.0 - ex.label) * (1.0 - yhat).ln();
    }
    loss / batch.len() as f64
}

/// Backward through one attention layer. Accumulates `da_src`/`da_dst`
/// into `grad` and returns the gradient w.r.t. the head inputs `p[h]`.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    graph: &Csr,
    p: &[Array2<f64>],
    att: &[AttnCache],
    theta: &[f64],
    grad: &mut [f64],
    d_out: &[Array2<f64>],
    a_src_off: impl Fn(usize) -> usize,
    a_dst_off: impl Fn(usize) -> usize,
    d: usize,
    heads: usize,
) -> Vec<Array2<f64>> {
    let n = graph.node_count();
    let mut d_p = Vec::with_capacity(heads);
    for h in 0..heads {
        let ph = &p[h];
        let cache = &att[h];
        let dz = &d_out[h];
        let a_src = &theta[a_src_off(h)..a_src_off(h) + d];
        let a_dst = &theta[a_dst_off(h)..a_dst_off(h) + d];
        let mut dph = Array2::<f64>::zeros((n, d));
        let mut ds = vec![0.0; n];
        let mut dt = vec![0.0; n];
        for i in 0..n {
            let r = graph.range(i);
            let dzi = dz.row(i);
            if dzi.iter().all(|v| *v == 0.0) {
                continue;
            }
            // d alpha (post-mask) then back through softmax.
            let mut dalpha = vec![0.0; r.len()];
            for (slot, e) in r.clone().enumerate() {
                let j = graph.neighbors[e] as usize;
                let pj = ph.row(j);
                let mut acc = 0.0;
                for k in 0..d {
                    acc += dzi[k] * pj[k];
                }
                dalpha[slot] = acc;
                // dP_j from aggregation.
                let a = cache.alpha[e];
                if a != 0.0 {
                    let mut row = dph.row_mut(j);
                    for k in 0..d {
                        row[k] += a * dzi[k];
                    }
                }
            }
            // Through the dropout mask: alpha_used = mask * softmax, so
            // d softmax_e = mask_e * dalpha_e; then the softmax jacobian.
            // The pre-mask softmax is recomputed from the cached logits
            // (cache.alpha is post-mask and may be zeroed).
            let mut dsm = vec![0.0; r.len()];
            for (slot, e) in r.clone().enumerate() {
                dsm[slot] = cache.mask[e] * dalpha[slot];
            }
            let mut sm_vals = vec![0.0; r.len()];
            let mut dot = 0.0;
            {
                let mut max = f64::NEG_INFINITY;
                for e in r.clone() {
                    if cache.pre[e] > max {
                        max = cache.pre[e];
                    }
                }
                let mut sum = 0.0;
                for (slot, e) in r.clone().enumerate() {
                    let v = (cache.pre[e] - max).exp();
                    sm_vals[slot] = v;
                    sum += v;
                }
                for slot in 0..sm_vals.len() {
                    sm_vals[slot] /= sum;
                    dot += dsm[slot] * sm_vals[slot];
                }
            }
            for (slot, e) in r.clone().enumerate() {
                let de = sm_vals[slot] * (dsm[slot] - dot) * leaky_grad(cache.pre[e]);
                if de == 0.0 {
                    continue;
                }
                let j = graph.neighbors[e] as usize;
                ds[i] += de;
                dt[j] += de;
            }
        }
        // s_i = P_i . a_src, t_i = P_i . a_dst.
        {
            let ga_src = mut_slice(grad, a_src_off(h), d);
            for i in 0..n {
                if ds[i] != 0.0 {
                    let pi = ph.row(i);
                    for k in 0..d {
                        ga_src[k] += ds[i] * pi[k];
                    }
                }
            }
        }
        {
            let ga_dst = mut_slice(grad, a_dst_off(h), d);
            for i in 0..n {
                if dt[i] != 0.0 {
                    let pi = ph.row(i);
                    for k in 0..d {
                        ga_dst[k] += dt[i] * pi[k];
                    }
                }
            }
        }
        for i in 0..n {
            let mut row = dph.row_mut(i);
            if ds[i] != 0.0 {
                for k in 0..d {
                    row[k] += ds[i] * a_src[k];
                }
            }
            if dt[i] != 0.0 {
                for k in 0..d {
                    row[k] += dt[i] * a_dst[k];
                }
            }
        }
        d_p.push(dph);
    }
    d_p
}

fn mut_slice(grad: &mut [f64], off: usize, len: usize) -> &mut [f64] {
    &mut grad[off..off + len]
}

/// Loss and full parameter gradient for one batch.
pub fn loss_and_grad(
    theta: &[f64],
    dims: GatDims,
    graph: &Csr,
    cache: &ForwardCache,
    batch: &[PairExample],
) -> (f64, Vec<f64>) {
    let n = graph.node_count();
    let mut grad = vec![0.0; theta.len()];
    let inv_b = 1.0 / batch.len() as f64;

    // d loss / d emb.
    let mut d_emb = Array2::<f64>::zeros((n, dims.d2));
    let mut loss = 0.0;
    for ex in batch {
        let (a, b) = (ex.a as usize, ex.b as usize);
        let ra = cache.emb.row(a);
        let rb = cache.emb.row(b);
        let yhat = sigmoid(ra.dot(&rb));
        let yc = yhat.clamp(1e-12, 1.0 - 1e-12);
        loss -= ex.label * yc.ln() + (1.0 - ex.label) * (1.0 - yc).ln();
        let coeff = (yhat - ex.label) * inv_b;
        for k in 0..dims.d2 {
            d_emb[(a, k)] += coeff * rb[k];
            d_emb[(b, k)] += coeff * ra[k];
        }
    }
    loss *= inv_b;

    // Through row normalization: emb = h2 / r.
    let mut d_h2 = Array2::<f64>::zeros((n, dims.d2));
    for i in 0..n {
        let de = d_emb.row(i);
        if de.iter().all(|v| *v == 0.0) {
            continue;
        }
        let e = cache.emb.row(i);
        let r = cache.norms[i];
        let dot: f64 = de.iter().zip(e.iter()).map(|(x, y)| x * y).sum();
        let mut row = d_h2.row_mut(i);
        for k in 0..dims.d2 {
            row[k] = (de[k] - e[k] * dot) / r;
        }
    }

    // Through ELU, then head-average.
    let mut d_m = d_h2;
    for (dm, &mv) in d_m.iter_mut().zip(cache.m.iter()) {
        *dm *= elu_grad(mv);
    }
    let inv_h = 1.0 / dims.heads as f64;
    let d_z2: Vec<Array2<f64>> = (0..dims.heads).map(|_| d_m.mapv(|v| v * inv_h)).collect();

    // Layer-2 attention backward.
    let d_p2 = attention_backward(
        graph,
        &cache.p2,
        &cache.att2,
        theta,
        &mut grad,
        &d_z2,
        |h| dims.a2_src_off(h),
        |h| dims.a2_dst_off(h),
        dims.d2,
        dims.heads,
    );

    // P2[h] = H1 W2[h].
    let hidden = dims.hidden();
    let mut d_h1 = Array2::<f64>::zeros((n, hidden));
    for h in 0..dims.heads {
        let w = ndarray::ArrayView2::from_shape(
            (hidden, dims.d2),
            &theta[dims.w2_off(h)..dims.w2_off(h) + dims.w2_len()],
        )
        .unwrap();
        let dw = cache.h1.t().dot(&d_p2[h]);
        let gw = mut_slice(&mut grad, dims.w2_off(h), dims.w2_len());
        for (g, v) in gw.iter_mut().zip(dw.iter()) {
            *g += v;
        }
        d_h1 += &d_p2[h].dot(&w.t());
    }

    // Through ELU into the concatenated layer-1 output.
    for (dh, &zv) in d_h1.iter_mut().zip(cache.z1.iter()) {
        *dh *= elu_grad(zv);
    }
    let d_z1: Vec<Array2<f64>> = (0..dims.heads)
        .map(|h| {
            let mut dz = Array2::<f64>::zeros((n, dims.d1));
            let base = h * dims.d1;
            for i in 0..n {
                let src = d_h1.row(i);
                let mut row = dz.row_mut(i);
                for k in 0..dims.d1 {
                    row[k] = src[base + k];
                }
            }
            dz
        })
        .collect();

    // Layer-1 attention backward.
    let d_p1 = attention_backward(
        graph,
        &cache.p1,
        &cache.att1,
        theta,
        &mut grad,
        &d_z1,
        |h| dims.a1_src_off(h),
        |h| dims.a1_dst_off(h),
        dims.d1,
        dims.heads,
    );

    // P1[h] = X W1[h].
    for h in 0..dims.heads {
        let dw = cache.x.t().dot(&d_p1[h]);
        let gw = mut_slice(&mut grad, dims.w1_off(h), dims.w1_len());
        for (g, v) in gw.iter_mut().zip(dw.iter()) {
            *g += v;
        }
    }

    (loss, grad)
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// ROC AUC via the Mann-Whitney statistic; ties count one half.
pub fn validation_auc(scores: &[f64], labels: &[bool]) -> Result<f64, GatError> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(GatError::SingleClassAuc);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tie groups.
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter_map(|(&l, &r)| if l { Some(r) } else { None })
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Training bundle: the message graph, node features, and supervision pairs.
pub struct TrainData {
    pub graph: Csr,
    pub features: Array2<f64>,
    /// Positive (user-node, content-node) pairs; the graph's bipartite edges.
    pub positives: Vec<(u32, u32)>,
    pub n_users: usize,
}

struct Split {
    train: Vec<(u32, u32)>,
    val: Vec<PairExample>,
}

fn make_split(
    data: &TrainData,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Split, GatError> {
    use std::collections::HashSet;
    let n_nodes = data.graph.node_count();
    let n_content = n_nodes - data.n_users;
    let pos_set: HashSet<(u32, u32)> = data.positives.iter().copied().collect();

    for _attempt in 0..2 {
        let mut order: Vec<usize> = (0..data.positives.len()).collect();
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let n_val = ((data.positives.len() as f64 * cfg.val_fraction).ceil() as usize).max(1);
        let val_pos: Vec<(u32, u32)> = order[..n_val].iter().map(|&i| data.positives[i]).collect();
        let train: Vec<(u32, u32)> = order[n_val..].iter().map(|&i| data.positives[i]).collect();

        // Fixed validation negatives, one per positive.
        let mut val = Vec::with_capacity(2 * n_val);
        let mut ok = true;
        for &(u, c) in &val_pos {
            val.push(PairExample { a: u, b: c, label: 1.0 });
            let mut found = false;
            for _ in 0..200 {
                let nu = rng.random_range(0..data.n_users) as u32;
                let nc = (data.n_users + rng.random_range(0..n_content)) as u32;
                if !pos_set.contains(&(nu, nc)) {
                    val.push(PairExample { a: nu, b: nc, label: 0.0 });
                    found = true;
                    break;
                }
            }
            if !found {
                ok = false;
                break;
            }
        }
        if ok && val.iter().any(|e| e.label == 0.0) && val.iter().any(|e| e.label == 1.0) {
            return Ok(Split { train, val });
        }
    }
    Err(GatError::DegenerateValidation)
}

/// Build the CSR message graph from train-split edges plus self-loops.
fn message_graph(
    n_nodes: usize,
    edges: &[(u32, u32)],
    cap: Option<(usize, &mut ChaCha8Rng)>,
) -> Csr {
    let mut lists: Vec<Vec<u32>> = (0..n_nodes).map(|i| vec![i as u32]).collect();
    for &(u, c) in edges {
        lists[u as usize].push(c);
        lists[c as usize].push(u);
    }
    if let Some((cap, rng)) = cap {
        for list in &mut lists {
            // Keep the self-loop, subsample the rest.
            if list.len() > cap + 1 {
                let tail = &mut list[1..];
                for i in (1..tail.len()).rev() {
                    let j = rng.random_range(0..=i);
                    tail.swap(i, j);
                }
                list.truncate(cap + 1);
            }
        }
    }
    for list in &mut lists {
        list[1..].sort_unstable();
    }
    Csr::from_lists(&lists)
}

pub struct TrainOutcome {
    pub model: GatModel,
    pub epochs_run: usize,
    pub final_val_loss: f64,
}

/// Link-prediction training: per epoch, one 1:1 positive/negative batch,
/// BCE loss, Adam update, early stopping on validation loss.
pub fn gat_train(
    data: &TrainData,
    cfg: &TrainConfig,
    warm_start: Option<&GatModel>,
    step: u32,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome, GatError> {
    use std::collections::HashSet;
    if data.positives.len() < cfg.min_positives {
        return Err(GatError::TooFewPositives(data.positives.len(), cfg.min_positives));
    }
    let dims = GatDims::standard(data.features.ncols());
    let mut model = match warm_start {
        Some(m) if m.dims == dims => m.clone(),
        _ => GatModel::init(dims, rng),
    };

    let split = make_split(data, cfg, rng)?;
    let n_nodes = data.graph.node_count();
    let n_content = n_nodes - data.n_users;
    let subsample = data.n_users as u32 > cfg.subsample_above;
    let graph = if subsample {
        message_graph(n_nodes, &split.train, Some((cfg.neighbor_cap, rng)))
    } else {
        message_graph(n_nodes, &split.train, None)
    };
    let pos_set: HashSet<(u32, u32)> = data.positives.iter().copied().collect();

    let mut adam = Adam::new(model.theta.len(), cfg.learning_rate);
    let mut best_theta = model.theta.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for _epoch in 0..cfg.max_epochs {
        epochs_run += 1;
        // Sample the batch: up to batch_size positives and as many negatives.
        let b = cfg.batch_size.min(split.train.len());
        let mut batch = Vec::with_capacity(2 * b);
        let mut picked: Vec<usize> = (0..split.train.len()).collect();
        for i in 0..b {
            let j = rng.random_range(i..picked.len());
            picked.swap(i, j);
            let (u, c) = split.train[picked[i]];
            batch.push(PairExample { a: u, b: c, label: 1.0 });
        }
        let n_neg = ((b as f64) * cfg.negative_ratio).round() as usize;
        let mut negs = 0;
        let mut guard = 0;
        while negs < n_neg && guard < 50 * n_neg.max(1) {
            guard += 1;
            let nu = rng.random_range(0..data.n_users) as u32;
            let nc = (data.n_users + rng.random_range(0..n_content)) as u32;
            if !pos_set.contains(&(nu, nc)) {
                batch.push(PairExample { a: nu, b: nc, label: 0.0 });
                negs += 1;
            }
        }

        let cache = if cfg.dropout > 0.0 {
            forward(&model.theta, dims, &graph, &data.features, Some((cfg.dropout, rng)))?
        } else {
            forward(&model.theta, dims, &graph, &data.features, None)?
        };
        let (_, grad) = loss_and_grad(&model.theta, dims, &graph, &cache, &batch);
        adam.step(&mut model.theta, &grad);

        // Validation (no dropout).
        let eval = forward(&model.theta, dims, &graph, &data.features, None)?;
        let val_loss = batch_loss(&eval.emb, &split.val);
        if val_loss < best_val - 1e-9 {
            best_val = val_loss;
            best_theta.copy_from_slice(&model.theta);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    model.theta = best_theta;
    let eval = forward(&model.theta, dims, &graph, &data.features, None)?;
    let scores: Vec<f64> = split
        .val
        .iter()
        .map(|e| sigmoid(eval.emb.row(e.a as usize).dot(&eval.emb.row(e.b as usize))))
        .collect();
    let labels: Vec<bool> = split.val.iter().map(|e| e.label > 0.5).collect();
    model.validation_auc = validation_auc(&scores, &labels)?;
    model.last_trained_step = Some(step);
    debug_assert!(model.is_finite());
    Ok(TrainOutcome { model, epochs_run, final_val_loss: best_val })
}

/// Score held-out pairs of an externally built eval set with this model.
pub fn evaluate_auc(
    model: &GatModel,
    data: &TrainData,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, GatError> {
    let split = make_split(data, cfg, rng)?;
    let graph = message_graph(data.graph.node_count(), &split.train, None);
    let emb = model.embed(&graph, &data.features)?;
    let scores: Vec<f64> = split
        .val
        .iter()
        .map(|e| sigmoid(emb.row(e.a as usize).dot(&emb.row(e.b as usize))))
        .collect();
    let labels: Vec<bool> = split.val.iter().map(|e| e.label > 0.5).collect();
    validation_auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_graph() -> (Csr, Array2<f64>) {
        // 3 users (0..3), 3 content nodes (3..6); bipartite + self-loops.
        let edges: &[(u32, u32)] = &[(0, 3), (0, 4), (1, 4), (2, 5), (1, 5)];
        let mut lists: Vec<Vec<u32>> = (0..6u32).map(|i| vec![i]).collect();
        for &(u, c) in edges {
            lists[u as usize].push(c);
            lists[c as usize].push(u);
        }
        for l in &mut lists {
            l[1..].sort_unstable();
        }
        let graph = Csr::from_lists(&lists);
        let mut features = Array2::<f64>::zeros((6, 4));
        for i in 0..6 {
            for k in 0..4 {
                features[(i, k)] = ((i * 7 + k * 3) as f64 * 0.41).sin().abs() + 0.05;
            }
            let norm = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            features.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
        (graph, features)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (graph, features) = tiny_graph();
        let dims = GatDims { in_dim: 4, heads: 3, d1: 5, d2: 6 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = GatModel::init(dims, &mut rng);
        let cache = forward(&model.theta, dims, &graph, &features, None).unwrap();
        for att in cache.att1.iter().chain(cache.att2.iter()) {
            for i in 0..graph.node_count() {
                let sum: f64 = graph.range(i).map(|e| att.alpha[e]).sum();
                assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
            }
        }
    }

    #[test]
    fn isolated_node_without_self_loop_errors() {
        let lists = vec![vec![0u32, 1], vec![1u32, 0], vec![]];
        let graph = Csr::from_lists(&lists);
        let features = Array2::<f64>::from_elem((3, 2), 0.5);
        let dims = GatDims { in_dim: 2, heads: 1, d1: 2, d2: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = GatModel::init(dims, &mut rng);
        assert_eq!(
            forward(&model.theta, dims, &graph, &features, None).err(),
            Some(GatError::IsolatedNode(2))
        );
    }

    #[test]
    fn self_only_node_is_transform_of_own_features() {
        // A node whose only neighbor is itself: softmax over a singleton is 1,
        // so each layer reduces to nonlinearity(W h).
        let lists = vec![vec![0u32]];
        let graph = Csr::from_lists(&lists);
        let mut features = Array2::<f64>::zeros((1, 3));
        features[(0, 0)] = 0.6;
        features[(0, 1)] = 0.8;
        let dims = GatDims { in_dim: 3, heads: 2, d1: 2, d2: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = GatModel::init(dims, &mut rng);
        let emb = model.embed(&graph, &features).unwrap();

        // Oracle: h1 = elu(concat_h(x W1[h])); h2 = normalize(elu(mean_h(h1 W2[h]))).
        let x = features.row(0).to_vec();
        let mut h1 = Vec::new();
        for h in 0..dims.heads {
            let w = &model.theta[dims.w1_off(h)..dims.w1_off(h) + dims.w1_len()];
            for c in 0..dims.d1 {
                let mut acc = 0.0;
                for r in 0..dims.in_dim {
                    acc += x[r] * w[r * dims.d1 + c];
                }
                h1.push(elu(acc));
            }
        }
        let mut m = vec![0.0; dims.d2];
        for h in 0..dims.heads {
            let w = &model.theta[dims.w2_off(h)..dims.w2_off(h) + dims.w2_len()];
            for c in 0..dims.d2 {
                let mut acc = 0.0;
                for r in 0..dims.hidden() {
                    acc += h1[r] * w[r * dims.d2 + c];
                }
                m[c] += acc;
            }
        }
        let mut h2: Vec<f64> = m.iter().map(|v| elu(v / dims.heads as f64)).collect();
        let norm = h2.iter().map(|v| v * v).sum::<f64>().sqrt();
        h2.iter_mut().for_each(|v| *v /= norm);
        for (k, expect) in h2.iter().enumerate() {
            assert!((emb[(0, k)] - expect).abs() < 1e-12, "component {k}");
        }
    }

    #[test]
    fn two_node_single_head_matches_scalar_oracle() {
        // 2 nodes, 2-dim features, 1 head of width 1 per layer: every tensor
        // is a scalar, so the whole forward pass can be written out by hand.
        let lists = vec![vec![0u32, 1], vec![1u32, 0]];
        let graph = Csr::from_lists(&lists);
        let mut features = Array2::<f64>::zeros((2, 2));
        features[(0, 0)] = 1.0;
        features[(1, 1)] = 1.0;
        let dims = GatDims { in_dim: 2, heads: 1, d1: 1, d2: 1 };
        let mut model = GatModel::init(dims, &mut ChaCha8Rng::seed_from_u64(0));
        // w1 = [0.3, -0.2], a1_src = 0.5, a1_dst = -0.4, w2 = 0.7,
        // a2_src = 0.1, a2_dst = 0.2
        model.theta = vec![0.3, -0.2, 0.5, -0.4, 0.7, 0.1, 0.2];
        let emb = model.embed(&graph, &features).unwrap();

        let p = [0.3f64, -0.2]; // x W1 per node
        let scalar_layer = |p: [f64; 2], a_s: f64, a_d: f64| -> [f64; 2] {
            let mut out = [0.0; 2];
            for i in 0..2 {
                let logits = [leaky(a_s * p[i] + a_d * p[i]), leaky(a_s * p[i] + a_d * p[1 - i])];
                let m = logits[0].max(logits[1]);
                let e0 = (logits[0] - m).exp();
                let e1 = (logits[1] - m).exp();
                let alpha0 = e0 / (e0 + e1);
                let alpha1 = e1 / (e0 + e1);
                out[i] = elu(alpha0 * p[i] + alpha1 * p[1 - i]);
            }
            out
        };
        let h1 = scalar_layer(p, 0.5, -0.4);
        let p2 = [0.7 * h1[0], 0.7 * h1[1]];
        let h2 = scalar_layer(p2, 0.1, 0.2);
        // 1-d embeddings normalize to sign.
        for i in 0..2 {
            let expect = h2[i] / h2[i].abs().max(1e-12);
            assert!((emb[(i, 0)] - expect).abs() < 1e-12, "node {i}");
        }
    }

    #[test]
    fn gradient_matches_central_differences_on_six_nodes() {
        let (graph, features) = tiny_graph();
        let dims = GatDims { in_dim: 4, heads: 2, d1: 3, d2: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = GatModel::init(dims, &mut rng);
        let batch = vec![
            PairExample { a: 0, b: 3, label: 1.0 },
            PairExample { a: 1, b: 4, label: 1.0 },
            PairExample { a: 2, b: 3, label: 0.0 },
            PairExample { a: 0, b: 5, label: 0.0 },
        ];
        let cache = forward(&model.theta, dims, &graph, &features, None).unwrap();
        let (_, grad) = loss_and_grad(&model.theta, dims, &graph, &cache, &batch);

        let f = |theta: &[f64]| {
            let c = forward(theta, dims, &graph, &features, None).unwrap();
            batch_loss(&c.emb, &batch)
        };
        let h = 1e-6;
        let mut max_rel = 0.0f64;
        let mut theta = model.theta.clone();
        for i in 0..theta.len() {
            let orig = theta[i];
            theta[i] = orig + h;
            let up = f(&theta);
            theta[i] = orig - h;
            let down = f(&theta);
            theta[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            let rel = (fd - grad[i]).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
        assert!(max_rel < 1e-3, "worst relative gradient error {max_rel}");
    }

    #[test]
    fn perturbing_non_neighbor_leaves_layer1_output_unchanged() {
        // Attention locality: a node outside N(i) cannot affect i's layer-1 row.
        let (graph, mut features) = tiny_graph();
        let dims = GatDims { in_dim: 4, heads: 2, d1: 3, d2: 4 };
        let model = GatModel::init(dims, &mut ChaCha8Rng::seed_from_u64(3));
        let before = forward(&model.theta, dims, &graph, &features, None).unwrap();
        // Node 5 is not a neighbor of node 0.
        assert!(!graph.range(0).any(|e| graph.neighbors[e] == 5));
        features[(5, 0)] += 0.25;
        let after = forward(&model.theta, dims, &graph, &features, None).unwrap();
        for k in 0..dims.hidden() {
            assert_eq!(before.h1[(0, k)], after.h1[(0, k)]);
        }
    }

    #[test]
    fn first_batch_loss_near_ln2() {
        let (graph, features) = tiny_graph();
        let dims = GatDims::standard(4);
        let model = GatModel::init(dims, &mut ChaCha8Rng::seed_from_u64(23));
        let batch = vec![
            PairExample { a: 0, b: 3, label: 1.0 },
            PairExample { a: 1, b: 4, label: 1.0 },
            PairExample { a: 0, b: 5, label: 0.0 },
            PairExample { a: 2, b: 4, label: 0.0 },
        ];
        let cache = forward(&model.theta, dims, &graph, &features, None).unwrap();
        let loss = batch_loss(&cache.emb, &batch);
        assert!((loss - std::f64::consts::LN_2).abs() < 0.15, "loss {loss}");
    }

    #[test]
    fn training_is_deterministic_without_dropout() {
        let (graph, features) = tiny_graph();
        let positives = vec![(0u32, 3u32), (0, 4), (1, 4), (2, 5), (1, 5)];
        let data = TrainData { graph, features, positives, n_users: 3 };
        let cfg = TrainConfig {
            dropout: 0.0,
            min_positives: 3,
            max_epochs: 8,
            batch_size: 4,
            ..Default::default()
        };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            gat_train(&data, &cfg, None, 10, &mut rng).unwrap().model.theta
        };
        assert_eq!(run(2), run(2));
        assert!(run(2) != run(3));
    }

    #[test]
    fn separable_clusters_reach_high_auc() {
        // Two disjoint user/content clusters with block-diagonal interactions:
        // near-perfect link prediction is forced.
        let n_users = 10usize;
        let n_content = 10usize;
        let n = n_users + n_content;
        let mut features = Array2::<f64>::zeros((n, 4));
        let mut positives = Vec::new();
        for u in 0..n_users {
            let cluster = u % 2;
            features[(u, cluster)] = 1.0;
            features[(u, 2 + cluster)] = 0.3;
        }
        for c in 0..n_content {
            let cluster = c % 2;
            features[(n_users + c, cluster)] = 1.0;
            features[(n_users + c, 2 + cluster)] = 0.25;
        }
        for u in 0..n_users {
            for c in 0..n_content {
                if u % 2 == c % 2 {
                    positives.push((u as u32, (n_users + c) as u32));
                }
            }
        }
        let mut lists: Vec<Vec<u32>> = (0..n as u32).map(|i| vec![i]).collect();
        for &(u, c) in &positives {
            lists[u as usize].push(c);
            lists[c as usize].push(u);
        }
        let graph = Csr::from_lists(&lists);
        let data = TrainData { graph, features, positives, n_users };
        let cfg = TrainConfig { dropout: 0.0, batch_size: 32, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let out = gat_train(&data, &cfg, None, 0, &mut rng).unwrap();
        assert!(out.model.validation_auc >= 0.95, "auc {}", out.model.validation_auc);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(validation_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(validation_auc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap(), 0.5);
        let auc = validation_auc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
        assert_eq!(validation_auc(&[0.1, 0.2], &[true, true]), Err(GatError::SingleClassAuc));
    }

    #[test]
    fn parameters_stay_finite_through_training() {
        let (graph, features) = tiny_graph();
        let positives = vec![(0u32, 3u32), (0, 4), (1, 4), (2, 5), (1, 5)];
        let data = TrainData { graph, features, positives, n_users: 3 };
        let cfg = TrainConfig { min_positives: 3, max_epochs: 20, batch_size: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = gat_train(&data, &cfg, None, 5, &mut rng).unwrap();
        assert!(out.model.is_finite());
        assert_eq!(out.model.last_trained_step, Some(5));
    }

    #[test]
    fn too_few_positives_is_an_error() {
        let (graph, features) = tiny_graph();
        let data = TrainData { graph, features, positives: vec![(0, 3)], n_users: 3 };
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            gat_train(&data, &cfg, None, 0, &mut rng),
            Err(GatError::TooFewPositives(1, 20))
        ));
    }
}
