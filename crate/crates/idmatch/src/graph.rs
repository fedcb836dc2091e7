//! Identity matching graphs.
//!
//! A frame's reference characters R and generated characters G form a weighted
//! complete bipartite graph. Edge weights come from masked attention: each
//! generated character's masked feature tokens query reference tokens, and the
//! attention mass landing on reference character i becomes the raw affinity
//! S_i, normalized to weights w_i = S_i / (Σ S + γ). The consistency score C
//! is the fraction of total weight mass on ground-truth edges, 1 for perfect
//! correspondence, 1/m under uniform ambiguity.
//!
//! Two key-source modes exist and are deliberately not equivalent:
//! `Fast` sums all masked reference maps into one key source (one attention
//! pass per generated character), `Pairwise` runs a separate attention, and a
//! separate softmax normalization, against each reference map.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mask::CharacterMask;
use crate::tape::{row_softmax_forward, Tape, Var};
use crate::tensor::Tensor;

// ── feature maps ──

#[derive(Debug, Clone)]
pub struct FeatureMap {
    c: usize,
    h: usize,
    w: usize,
    /// Row-major [c, h, w].
    values: Tensor,
    pub layer: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, layer: usize) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 {
            return Err(Error::shape(
                "feature map",
                format!("need [c, h, w], got {shape:?}"),
            ));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap { c: shape[0], h: shape[1], w: shape[2], values, layer })
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.values.data()[(ch * self.h + y) * self.w + x]
    }

    /// Token matrix [h·w, c]; token p is spatial cell p in row-major order.
    pub fn to_tokens(&self) -> Tensor {
        let (c, h, w) = (self.c, self.h, self.w);
        Tensor::from_fn(&[h * w, c], |i| {
            let (p, ch) = (i / c, i % c);
            self.values.data()[ch * h * w + p]
        })
    }

    /// Inverse of [`to_tokens`].
    pub fn from_tokens(tokens: &Tensor, h: usize, w: usize, layer: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != h * w {
            return Err(Error::shape(
                "feature map",
                format!("token matrix {:?} does not match {h}x{w}", tokens.shape()),
            ));
        }
        let c = tokens.cols();
        let values = Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            tokens.get2(p, ch)
        });
        FeatureMap::new(values, layer)
    }
}

// ── parameters ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fast,
    Pairwise,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "fast" => Ok(Mode::Fast),
            "pairwise" => Ok(Mode::Pairwise),
            other => Err(Error::domain(format!("unknown mode \"{other}\" (fast|pairwise)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Fast => "fast",
            Mode::Pairwise => "pairwise",
        })
    }
}

pub const DEFAULT_GAMMA: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct MqaParams {
    pub d: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub gamma: f64,
    pub background_mask_enabled: bool,
    pub mode: Mode,
}

impl MqaParams {
    pub fn new(w_q: Tensor, w_k: Tensor) -> Result<Self> {
        if w_q.shape().len() != 2 || w_q.shape() != w_k.shape() {
            return Err(Error::shape(
                "mqa params",
                format!("projections must share a [c, d] shape: {:?} vs {:?}", w_q.shape(), w_k.shape()),
            ));
        }
        let d = w_q.cols();
        if d == 0 {
            return Err(Error::domain("mqa params: d must be at least 1"));
        }
        Ok(MqaParams {
            d,
            w_q,
            w_k,
            gamma: DEFAULT_GAMMA,
            background_mask_enabled: false,
            mode: Mode::Fast,
        })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_background_mask(mut self, enabled: bool) -> Self {
        self.background_mask_enabled = enabled;
        self
    }

    /// Independent Gaussian projections, the untrained-parameter convention.
    pub fn random_init(c: usize, d: usize, std: f64, seed: u64) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::from_fn(&[c, d], |_| {
                let v: f64 = StandardNormal.sample(rng);
                v * std
            })
        };
        let w_q = draw(&mut rng);
        let w_k = draw(&mut rng);
        MqaParams::new(w_q, w_k)
    }

    /// Shared scaled orthonormal projection (W_Q = W_K), the repo's
    /// random-projection convention for feature-space scoring: logits become
    /// scaled embedding dot products, so distinct embeddings separate for any
    /// d ≥ c. For d < c only the first d rows can be orthonormalized and the
    /// projection is approximate.
    pub fn random_shared_orthonormal(c: usize, d: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        // modified Gram-Schmidt over rows
        for i in 0..c {
            for j in 0..i.min(d) {
                let dot: f64 = (0..d).map(|k| rows[i][k] * rows[j][k]).sum();
                for k in 0..d {
                    rows[i][k] -= dot * rows[j][k];
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric("degenerate random projection draw".into()));
            }
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        let flat: Vec<f64> = rows.into_iter().flatten().map(|v| v * scale).collect();
        let w = Tensor::new(vec![c, d], flat)?;
        MqaParams::new(w.clone(), w)
    }
}

// ── graph types ──

#[derive(Debug, Clone)]
pub struct IdentityMatchingGraph {
    pub m: usize,
    pub n: usize,
    /// Reference identities ordered left to right.
    pub ref_ids: Vec<u32>,
    /// Generated identities ordered left to right (dropped characters absent).
    pub gen_ids: Vec<u32>,
    /// weights[j][i] = w(r_i, g_j), each in [0, 1), row sums < 1.
    pub weights: Vec<Vec<f64>>,
    /// Ground truth: generated index j → reference index i.
    pub ground_truth: Vec<usize>,
    pub layer: usize,
    pub dropped_gen_ids: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct AttentionResult {
    /// Full attention matrix, one row per generated token.
    pub a: Tensor,
    /// Raw affinity per reference character.
    pub s: Vec<f64>,
}

/// Node bookkeeping shared by the fast path, the oracle, and the training
/// loop: left-to-right ordering, token index sets, empty-mask drops, and the
/// ground truth translated into ordered index space.
#[derive(Debug, Clone)]
pub struct OrderedNodes {
    pub ref_ids: Vec<u32>,
    pub gen_ids: Vec<u32>,
    pub v_ref: Vec<Vec<usize>>,
    pub v_gen: Vec<Vec<usize>>,
    /// gen index j → ref index i.
    pub gt: Vec<usize>,
    pub dropped_gen_ids: Vec<u32>,
    pub n_tokens: usize,
    /// Reference masks in ordered-node order (used to build key sources).
    pub ref_masks: Vec<CharacterMask>,
    pub gen_masks: Vec<CharacterMask>,
}

/// Orders nodes left to right by mask centroid x (ties: smaller identity),
/// drops generated characters whose mask is empty, and checks the structural
/// preconditions. Returns None when every generated character was dropped.
pub fn order_nodes(
    masks_ref: &[CharacterMask],
    masks_gen: &[CharacterMask],
    gt: &BTreeMap<u32, u32>,
) -> Result<Option<OrderedNodes>> {
    if masks_ref.is_empty() {
        return Err(Error::domain("no reference masks"));
    }
    let (h, w) = masks_ref[0].resolution();
    for m in masks_ref.iter().chain(masks_gen) {
        if m.resolution() != (h, w) {
            return Err(Error::shape(
                "order_nodes",
                format!("mixed mask resolutions: {:?} vs {:?}", (h, w), m.resolution()),
            ));
        }
    }
    if masks_ref.iter().all(|m| m.is_mask_empty()) {
        return Err(Error::domain("all reference masks are empty"));
    }
    let unique = |ms: &[CharacterMask]| {
        let mut ids: Vec<u32> = ms.iter().map(|m| m.identity).collect();
        ids.sort_unstable();
        ids.windows(2).all(|p| p[0] != p[1])
    };
    if !unique(masks_ref) || !unique(masks_gen) {
        return Err(Error::domain("duplicate identities within a frame"));
    }

    // order refs left to right; empty reference masks (tolerated, zero
    // affinity) sort to the end by identity
    let mut ref_order: Vec<usize> = (0..masks_ref.len()).collect();
    let sort_key = |m: &CharacterMask| (m.centroid_x().unwrap_or(f64::INFINITY), m.identity);
    ref_order.sort_by(|&a, &b| {
        let (ka, kb) = (sort_key(&masks_ref[a]), sort_key(&masks_ref[b]));
        ka.partial_cmp(&kb).unwrap()
    });

    let mut gen_order: Vec<usize> = (0..masks_gen.len()).filter(|&j| !masks_gen[j].is_mask_empty()).collect();
    gen_order.sort_by(|&a, &b| {
        let (ka, kb) = (sort_key(&masks_gen[a]), sort_key(&masks_gen[b]));
        ka.partial_cmp(&kb).unwrap()
    });
    let dropped_gen_ids: Vec<u32> = masks_gen
        .iter()
        .filter(|m| m.is_mask_empty())
        .map(|m| m.identity)
        .collect();

    if gen_order.is_empty() {
        return Ok(None);
    }
    if gen_order.len() > masks_ref.len() {
        return Err(Error::domain(format!(
            "more generated characters ({}) than reference characters ({})",
            gen_order.len(),
            masks_ref.len()
        )));
    }

    let ref_ids: Vec<u32> = ref_order.iter().map(|&i| masks_ref[i].identity).collect();
    let gen_ids: Vec<u32> = gen_order.iter().map(|&j| masks_gen[j].identity).collect();

    let mut gt_idx = Vec::with_capacity(gen_ids.len());
    for &gid in &gen_ids {
        let rid = gt
            .get(&gid)
            .ok_or_else(|| Error::domain(format!("ground truth missing generated identity {gid}")))?;
        let i = ref_ids
            .iter()
            .position(|r| r == rid)
            .ok_or_else(|| Error::domain(format!("ground truth maps {gid} to unknown reference {rid}")))?;
        gt_idx.push(i);
    }
    {
        let mut seen = gt_idx.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::domain("ground truth is not injective"));
        }
    }

    Ok(Some(OrderedNodes {
        v_ref: ref_order.iter().map(|&i| masks_ref[i].token_indices()).collect(),
        v_gen: gen_order.iter().map(|&j| masks_gen[j].token_indices()).collect(),
        ref_masks: ref_order.iter().map(|&i| masks_ref[i].clone()).collect(),
        gen_masks: gen_order.iter().map(|&j| masks_gen[j].clone()).collect(),
        ref_ids,
        gen_ids,
        gt: gt_idx,
        dropped_gen_ids,
        n_tokens: h * w,
    }))
}

// ── standalone ops ──

/// Masked node maps node_i = f ⊙ mask_i, plus their sum when requested.
pub fn build_nodes(
    f: &FeatureMap,
    masks: &[CharacterMask],
    with_r_all: bool,
) -> Result<(Vec<FeatureMap>, Option<FeatureMap>)> {
    let (h, w) = f.resolution();
    let c = f.channels();
    for m in masks {
        if m.resolution() != (h, w) {
            return Err(Error::shape(
                "build_nodes",
                format!("mask {:?} vs features {:?}", m.resolution(), (h, w)),
            ));
        }
    }
    let mut nodes = Vec::with_capacity(masks.len());
    let mut sum = with_r_all.then(|| Tensor::zeros(&[c, h, w]));
    for m in masks {
        let vals = Tensor::from_fn(&[c, h, w], |i| {
            let cell = i % (h * w);
            f.values().data()[i] * m.grid()[cell] as f64
        });
        if let Some(acc) = sum.as_mut() {
            *acc = acc.add(&vals)?;
        }
        nodes.push(FeatureMap::new(vals, f.layer)?);
    }
    let r_all = match sum {
        Some(t) => Some(FeatureMap::new(t, f.layer)?),
        None => None,
    };
    Ok((nodes, r_all))
}

/// Attention scores for one generated character against a key source.
///
/// Q = tokens(g_node)·W_Q, K = tokens(key_source)·W_K, A = row softmax of
/// Q·Kᵀ/√d (columns restricted to the union of reference sets when background
/// masking is on), S_i = Σ_{p∈V_g} Σ_{q∈V_rᵢ} A[p,q].
pub fn mqa_scores(
    g_node: &FeatureMap,
    key_source: &FeatureMap,
    params: &MqaParams,
    v_g: &[usize],
    v_r_list: &[Vec<usize>],
) -> Result<AttentionResult> {
    if g_node.channels() != key_source.channels() {
        return Err(Error::shape(
            "mqa_scores",
            format!("channel mismatch: {} vs {}", g_node.channels(), key_source.channels()),
        ));
    }
    if v_g.is_empty() {
        return Err(Error::domain("empty generated mask"));
    }
    if v_r_list.iter().all(|v| v.is_empty()) {
        return Err(Error::domain("all reference index sets are empty"));
    }
    let n_q = g_node.resolution().0 * g_node.resolution().1;
    let n_k = key_source.resolution().0 * key_source.resolution().1;
    if v_g.iter().any(|&p| p >= n_q) || v_r_list.iter().flatten().any(|&q| q >= n_k) {
        return Err(Error::shape("mqa_scores", "token index out of range".to_string()));
    }

    let q = g_node.to_tokens().matmul(&params.w_q)?;
    let k = key_source.to_tokens().matmul(&params.w_k)?;
    let logits = q.matmul_nt(&k)?.scale(1.0 / (params.d as f64).sqrt());
    let col_mask = params.background_mask_enabled.then(|| {
        let mut m = vec![false; n_k];
        for &qi in v_r_list.iter().flatten() {
            m[qi] = true;
        }
        m
    });
    let a = row_softmax_forward(&logits, col_mask.as_deref());
    let s = v_r_list
        .iter()
        .map(|v_r| {
            v_g.iter()
                .map(|&p| v_r.iter().map(|&qi| a.get2(p, qi)).sum::<f64>())
                .sum()
        })
        .collect();
    Ok(AttentionResult { a, s })
}

/// w_i = S_i / (Σ S + γ).
pub fn edge_weights(s: &[f64], gamma: f64) -> Vec<f64> {
    let tot: f64 = s.iter().sum();
    s.iter().map(|&si| si / (tot + gamma)).collect()
}

// ── differentiable construction ──

#[derive(Debug, Clone, Copy)]
pub struct MqaOptions {
    pub gamma: f64,
    pub background_mask_enabled: bool,
    pub mode: Mode,
}

impl From<&MqaParams> for MqaOptions {
    fn from(p: &MqaParams) -> Self {
        MqaOptions {
            gamma: p.gamma,
            background_mask_enabled: p.background_mask_enabled,
            mode: p.mode,
        }
    }
}

pub struct ImgVars {
    /// weights[j][i] on the tape.
    pub weights: Vec<Vec<Var>>,
    /// Consistency score C on the tape.
    pub c: Var,
}

/// Builds the graph on a tape so gradients flow to the feature and projection
/// leaves. `f_ref_tok` and `f_gen_tok` are [h·w, c] token matrices.
pub fn build_img_vars(
    tape: &mut Tape,
    f_ref_tok: Var,
    f_gen_tok: Var,
    w_q: Var,
    w_k: Var,
    nodes: &OrderedNodes,
    opts: MqaOptions,
) -> Result<ImgVars> {
    let n_tokens = nodes.n_tokens;
    let c = tape.value(f_ref_tok).cols();
    let d = tape.value(w_q).cols();
    if tape.value(f_ref_tok).rows() != n_tokens || tape.value(f_gen_tok).rows() != n_tokens {
        return Err(Error::shape(
            "build_img",
            format!("token rows must equal {n_tokens}"),
        ));
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let expand = |mask: &CharacterMask| {
        Tensor::from_fn(&[n_tokens, c], |i| mask.grid()[i / c] as f64)
    };

    let union_mask = opts.background_mask_enabled.then(|| {
        let mut m = vec![false; n_tokens];
        for v in &nodes.v_ref {
            for &qi in v {
                m[qi] = true;
            }
        }
        m
    });

    // queries per generated character
    let mut q_vars = Vec::with_capacity(nodes.gen_ids.len());
    for gm in &nodes.gen_masks {
        let mask = tape.leaf(expand(gm));
        let g_node = tape.mul(f_gen_tok, mask)?;
        q_vars.push(tape.matmul(g_node, w_q)?);
    }

    let mut s: Vec<Vec<Var>> = vec![Vec::new(); nodes.gen_ids.len()];
    match opts.mode {
        Mode::Fast => {
            let mut r_all: Option<Var> = None;
            for rm in &nodes.ref_masks {
                let mask = tape.leaf(expand(rm));
                let node = tape.mul(f_ref_tok, mask)?;
                r_all = Some(match r_all {
                    None => node,
                    Some(acc) => tape.add(acc, node)?,
                });
            }
            let k = tape.matmul(r_all.expect("at least one reference"), w_k)?;
            for (j, &q) in q_vars.iter().enumerate() {
                let logits = tape.matmul_nt(q, k)?;
                let logits = tape.scale(logits, inv_sqrt_d);
                let a = tape.row_softmax(logits, union_mask.as_deref())?;
                for v_r in &nodes.v_ref {
                    s[j].push(tape.masked_sum(a, &nodes.v_gen[j], v_r)?);
                }
            }
        }
        Mode::Pairwise => {
            for (i, rm) in nodes.ref_masks.iter().enumerate() {
                let col_mask = opts.background_mask_enabled.then(|| {
                    let mut m = vec![false; n_tokens];
                    for &qi in &nodes.v_ref[i] {
                        m[qi] = true;
                    }
                    m
                });
                if col_mask.as_ref().is_some_and(|m| !m.iter().any(|&b| b)) {
                    // background masking with an empty reference: no columns
                    // to attend to, affinity is zero by definition
                    for sj in s.iter_mut() {
                        sj.push(tape.leaf(Tensor::scalar(0.0)));
                    }
                    continue;
                }
                let mask = tape.leaf(expand(rm));
                let node = tape.mul(f_ref_tok, mask)?;
                let k_i = tape.matmul(node, w_k)?;
                for (j, &q) in q_vars.iter().enumerate() {
                    let logits = tape.matmul_nt(q, k_i)?;
                    let logits = tape.scale(logits, inv_sqrt_d);
                    let a = tape.row_softmax(logits, col_mask.as_deref())?;
                    s[j].push(tape.masked_sum(a, &nodes.v_gen[j], &nodes.v_ref[i])?);
                }
            }
        }
    }

    let mut weights = Vec::with_capacity(s.len());
    for sj in &s {
        let mut tot = sj[0];
        for &si in &sj[1..] {
            tot = tape.add(tot, si)?;
        }
        let den = tape.add_const(tot, opts.gamma);
        let row: Vec<Var> = sj.iter().map(|&si| tape.div(si, den)).collect::<Result<_>>()?;
        weights.push(row);
    }

    let mut num = weights[0][nodes.gt[0]];
    for (j, row) in weights.iter().enumerate().skip(1) {
        num = tape.add(num, row[nodes.gt[j]])?;
    }
    let mut den = weights[0][0];
    let mut first = true;
    for row in &weights {
        for &wv in row {
            if first {
                first = false;
                continue;
            }
            den = tape.add(den, wv)?;
        }
    }
    let c_var = tape.div(num, den)?;
    Ok(ImgVars { weights, c: c_var })
}

/// Pure token-space scoring: the same arithmetic as the tape path, used by
/// evaluation loops that never need gradients. Returns (C, degenerate).
pub fn consistency_from_tokens(
    ref_tokens: &Tensor,
    gen_tokens: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    nodes: &OrderedNodes,
    opts: MqaOptions,
) -> Result<(f64, bool)> {
    let n_tokens = nodes.n_tokens;
    let c = ref_tokens.cols();
    if ref_tokens.rows() != n_tokens || gen_tokens.rows() != n_tokens || gen_tokens.cols() != c {
        return Err(Error::shape(
            "consistency_from_tokens",
            format!("tokens {:?}/{:?} vs {n_tokens} cells", ref_tokens.shape(), gen_tokens.shape()),
        ));
    }
    let d = w_q.cols();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let m = nodes.ref_ids.len();
    let n = nodes.gen_ids.len();

    let masked = |tokens: &Tensor, sets: &[&[usize]]| {
        let mut member = vec![0.0f64; n_tokens];
        for set in sets {
            for &p in *set {
                member[p] += 1.0;
            }
        }
        Tensor::from_fn(&[n_tokens, c], |i| tokens.data()[i] * member[i / c])
    };
    let sum_block = |a: &Tensor, rows: &[usize], cols: &[usize]| {
        rows.iter()
            .map(|&p| cols.iter().map(|&q| a.get2(p, q)).sum::<f64>())
            .sum::<f64>()
    };

    let mut s = vec![vec![0.0f64; m]; n];
    match opts.mode {
        Mode::Fast => {
            let ref_sets: Vec<&[usize]> = nodes.v_ref.iter().map(|v| v.as_slice()).collect();
            let k = masked(ref_tokens, &ref_sets).matmul(w_k)?;
            let col_mask = opts.background_mask_enabled.then(|| {
                let mut mk = vec![false; n_tokens];
                for v in &nodes.v_ref {
                    for &q in v {
                        mk[q] = true;
                    }
                }
                mk
            });
            for j in 0..n {
                let q = masked(gen_tokens, &[nodes.v_gen[j].as_slice()]).matmul(w_q)?;
                let a = row_softmax_forward(&q.matmul_nt(&k)?.scale(inv_sqrt_d), col_mask.as_deref());
                for i in 0..m {
                    s[j][i] = sum_block(&a, &nodes.v_gen[j], &nodes.v_ref[i]);
                }
            }
        }
        Mode::Pairwise => {
            let queries: Vec<Tensor> = (0..n)
                .map(|j| masked(gen_tokens, &[nodes.v_gen[j].as_slice()]).matmul(w_q))
                .collect::<Result<_>>()?;
            for i in 0..m {
                if opts.background_mask_enabled && nodes.v_ref[i].is_empty() {
                    continue; // no columns to attend to: affinity stays zero
                }
                let k_i = masked(ref_tokens, &[nodes.v_ref[i].as_slice()]).matmul(w_k)?;
                let col_mask = opts.background_mask_enabled.then(|| {
                    let mut mk = vec![false; n_tokens];
                    for &q in &nodes.v_ref[i] {
                        mk[q] = true;
                    }
                    mk
                });
                for (j, q) in queries.iter().enumerate() {
                    let a = row_softmax_forward(&q.matmul_nt(&k_i)?.scale(inv_sqrt_d), col_mask.as_deref());
                    s[j][i] = sum_block(&a, &nodes.v_gen[j], &nodes.v_ref[i]);
                }
            }
        }
    }

    let mut total = 0.0;
    let mut hit = 0.0;
    for (j, row) in s.iter().enumerate() {
        let w = edge_weights(row, opts.gamma);
        total += w.iter().sum::<f64>();
        hit += w[nodes.gt[j]];
    }
    if total == 0.0 {
        return Ok((0.0, true));
    }
    Ok((hit / total, false))
}

/// Builds the graph for one layer. Masks must already be at the features'
/// resolution and pairwise disjoint. Returns None when every generated
/// character's mask is empty (caller skips the frame).
pub fn build_img(
    f_ref: &FeatureMap,
    f_gen: &FeatureMap,
    masks_ref: &[CharacterMask],
    masks_gen: &[CharacterMask],
    gt: &BTreeMap<u32, u32>,
    params: &MqaParams,
    layer: usize,
) -> Result<Option<IdentityMatchingGraph>> {
    check_frame(f_ref, f_gen, masks_ref, masks_gen, params)?;
    let Some(nodes) = order_nodes(masks_ref, masks_gen, gt)? else {
        return Ok(None);
    };
    let mut tape = Tape::new();
    let fr = tape.leaf(f_ref.to_tokens());
    let fg = tape.leaf(f_gen.to_tokens());
    let wq = tape.leaf(params.w_q.clone());
    let wk = tape.leaf(params.w_k.clone());
    let vars = build_img_vars(&mut tape, fr, fg, wq, wk, &nodes, MqaOptions::from(params))?;
    let weights = vars
        .weights
        .iter()
        .map(|row| row.iter().map(|&v| tape.value(v).scalar_value()).collect())
        .collect();
    Ok(Some(IdentityMatchingGraph {
        m: nodes.ref_ids.len(),
        n: nodes.gen_ids.len(),
        ref_ids: nodes.ref_ids,
        gen_ids: nodes.gen_ids,
        weights,
        ground_truth: nodes.gt,
        layer,
        dropped_gen_ids: nodes.dropped_gen_ids,
    }))
}

fn check_frame(
    f_ref: &FeatureMap,
    f_gen: &FeatureMap,
    masks_ref: &[CharacterMask],
    masks_gen: &[CharacterMask],
    params: &MqaParams,
) -> Result<()> {
    if f_ref.channels() != f_gen.channels() {
        return Err(Error::shape(
            "build_img",
            format!("channel mismatch: {} vs {}", f_ref.channels(), f_gen.channels()),
        ));
    }
    if params.w_q.rows() != f_ref.channels() {
        return Err(Error::shape(
            "build_img",
            format!("projection rows {} vs {} channels", params.w_q.rows(), f_ref.channels()),
        ));
    }
    for (which, f, masks) in [("reference", f_ref, masks_ref), ("generated", f_gen, masks_gen)] {
        for m in masks {
            if m.resolution() != f.resolution() {
                return Err(Error::shape(
                    "build_img",
                    format!("{which} mask {:?} vs features {:?}", m.resolution(), f.resolution()),
                ));
            }
        }
        let (h, w) = f.resolution();
        for cell in 0..h * w {
            let covered: u8 = masks.iter().map(|m| m.grid()[cell]).sum();
            if covered > 1 {
                return Err(Error::domain(format!("{which} masks overlap at cell {cell}")));
            }
        }
    }
    Ok(())
}

// ── scoring ──

/// C = Σ ground-truth w / Σ all w. The boolean is the degenerate flag (total
/// weight 0 → C reported as 0).
pub fn consistency_score(img: &IdentityMatchingGraph) -> (f64, bool) {
    let total: f64 = img.weights.iter().flatten().sum();
    if total == 0.0 {
        return (0.0, true);
    }
    let hit: f64 = img
        .weights
        .iter()
        .zip(&img.ground_truth)
        .map(|(row, &i)| row[i])
        .sum();
    (hit / total, false)
}

/// L_match = (1/N) Σ_ℓ (−C_ℓ), in [−1, 0].
pub fn matching_loss(graphs: &[IdentityMatchingGraph]) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::domain("matching_loss: empty layer list"));
    }
    let mut acc = 0.0;
    for g in graphs {
        let (c, degenerate) = consistency_score(g);
        if degenerate {
            return Err(Error::domain(format!("matching_loss: degenerate graph at layer {}", g.layer)));
        }
        acc += -c;
    }
    Ok(acc / graphs.len() as f64)
}

// ── naive oracle ──

/// Brute-force reference implementation of the same formulas with explicit
/// scalar loops and no shared intermediates. Test oracle only.
pub fn naive_oracle_img(
    f_ref: &FeatureMap,
    f_gen: &FeatureMap,
    masks_ref: &[CharacterMask],
    masks_gen: &[CharacterMask],
    gt: &BTreeMap<u32, u32>,
    params: &MqaParams,
    layer: usize,
) -> Result<Option<IdentityMatchingGraph>> {
    check_frame(f_ref, f_gen, masks_ref, masks_gen, params)?;
    let Some(nodes) = order_nodes(masks_ref, masks_gen, gt)? else {
        return Ok(None);
    };
    let (h, w) = f_ref.resolution();
    let c = f_ref.channels();
    let d = params.d;
    let n_tok = h * w;
    let m = nodes.ref_ids.len();
    let n = nodes.gen_ids.len();

    let token = |f: &FeatureMap, p: usize, ch: usize| f.get(ch, p / w, p % w);
    let in_set = |set: &[usize], p: usize| set.contains(&p);

    // key token features: either the aggregated map or one reference map
    let key_feature = |which: Option<usize>, p: usize, ch: usize| -> f64 {
        match which {
            None => {
                let mut acc = 0.0;
                for i in 0..m {
                    if in_set(&nodes.v_ref[i], p) {
                        acc += token(f_ref, p, ch);
                    }
                }
                acc
            }
            Some(i) => {
                if in_set(&nodes.v_ref[i], p) {
                    token(f_ref, p, ch)
                } else {
                    0.0
                }
            }
        }
    };

    let mut s = vec![vec![0.0f64; m]; n];
    for j in 0..n {
        let key_sources: Vec<Option<usize>> = match params.mode {
            Mode::Fast => vec![None],
            Mode::Pairwise => (0..m).map(Some).collect(),
        };
        for source in key_sources {
            // column availability under background masking
            let col_enabled: Vec<bool> = (0..n_tok)
                .map(|p| {
                    if !params.background_mask_enabled {
                        return true;
                    }
                    match source {
                        None => (0..m).any(|i| in_set(&nodes.v_ref[i], p)),
                        Some(i) => in_set(&nodes.v_ref[i], p),
                    }
                })
                .collect();
            if !col_enabled.iter().any(|&b| b) {
                continue; // empty reference under background masking: S stays 0
            }
            for &p in &nodes.v_gen[j] {
                // one query row, recomputed from scratch
                let mut logits = vec![0.0f64; n_tok];
                for (qe, logit) in logits.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for dd in 0..d {
                        let mut qv = 0.0;
                        let mut kv = 0.0;
                        for ch in 0..c {
                            let g = if in_set(&nodes.v_gen[j], p) { token(f_gen, p, ch) } else { 0.0 };
                            qv += g * params.w_q.get2(ch, dd);
                            kv += key_feature(source, qe, ch) * params.w_k.get2(ch, dd);
                        }
                        acc += qv * kv;
                    }
                    *logit = acc / (d as f64).sqrt();
                }
                let mut maxv = f64::NEG_INFINITY;
                for qe in 0..n_tok {
                    if col_enabled[qe] && logits[qe] > maxv {
                        maxv = logits[qe];
                    }
                }
                let mut denom = 0.0;
                for qe in 0..n_tok {
                    if col_enabled[qe] {
                        denom += (logits[qe] - maxv).exp();
                    }
                }
                for i in 0..m {
                    if source.is_some() && source != Some(i) {
                        continue;
                    }
                    for &qe in &nodes.v_ref[i] {
                        if col_enabled[qe] {
                            s[j][i] += (logits[qe] - maxv).exp() / denom;
                        }
                    }
                }
            }
        }
    }

    let mut weights = vec![vec![0.0f64; m]; n];
    for j in 0..n {
        let mut tot = 0.0;
        for i in 0..m {
            tot += s[j][i];
        }
        for i in 0..m {
            weights[j][i] = s[j][i] / (tot + params.gamma);
        }
    }
    Ok(Some(IdentityMatchingGraph {
        m,
        n,
        ref_ids: nodes.ref_ids,
        gen_ids: nodes.gen_ids,
        weights,
        ground_truth: nodes.gt,
        layer,
        dropped_gen_ids: nodes.dropped_gen_ids,
    }))
}
