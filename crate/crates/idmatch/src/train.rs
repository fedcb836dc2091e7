//! Toy training loop: a linear cue-to-feature generator optimized jointly on
//! feature reconstruction and the multi-scale matching objective.
//!
//! The generator replaces a denoising UNet; it maps one-hot identity cues to
//! feature vectors, so reconstruction alone cannot fix identity when cues are
//! corrupted. The matching loss, driven by per-layer identity graphs over
//! 2×-pooled features, supplies exactly that signal. Everything is f64 and
//! seeded, so runs reproduce bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::RunConfig;
use crate::graph::{
    build_img_vars, consistency_from_tokens, order_nodes, FeatureMap, MqaOptions, OrderedNodes,
    DEFAULT_GAMMA,
};
use crate::mask::downsample_masks;
use crate::synth::{gen_scene, load_manifest, load_scene, LoadedScene, SceneSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Attention projection width, fixed across the artifact.
pub const PROJECTION_DIM: usize = 16;
const INIT_STD: f64 = 0.02;

// ── model ──

#[derive(Debug, Clone)]
pub struct ToyModel {
    /// Linear map from cue channels to feature channels, applied per site.
    pub generator: Tensor,
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
}

impl ToyModel {
    /// All parameters drawn N(0, 0.02²) from one stream: generator first,
    /// then W_Q and W_K per layer.
    pub fn init(cue_channels: usize, channels: usize, layers: usize, d: usize, rng: &mut ChaCha8Rng) -> ToyModel {
        let draw = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            Tensor::from_fn(&[r, c], |_| {
                let v: f64 = StandardNormal.sample(rng);
                v * INIT_STD
            })
        };
        let generator = draw(cue_channels, channels, rng);
        let mut w_q = Vec::with_capacity(layers);
        let mut w_k = Vec::with_capacity(layers);
        for _ in 0..layers {
            w_q.push(draw(channels, d, rng));
            w_k.push(draw(channels, d, rng));
        }
        ToyModel { generator, w_q, w_k }
    }

    pub fn layers(&self) -> usize {
        self.w_q.len()
    }

    pub fn cue_channels(&self) -> usize {
        self.generator.rows()
    }

    pub fn channels(&self) -> usize {
        self.generator.cols()
    }

    pub fn d(&self) -> usize {
        self.w_q[0].cols()
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.generator];
        for l in 0..self.layers() {
            out.push(&self.w_q[l]);
            out.push(&self.w_k[l]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.generator];
        for (q, k) in self.w_q.iter_mut().zip(self.w_k.iter_mut()) {
            out.push(q);
            out.push(k);
        }
        out
    }

    /// One flat rank-1 tensor: generator entries, then W_Q and W_K per layer.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut flat = Vec::new();
        for p in self.params() {
            flat.extend_from_slice(p.data());
        }
        Tensor::new(vec![flat.len()], flat)?.save_tsr(path)
    }

    pub fn load(
        path: impl AsRef<Path>,
        cue_channels: usize,
        channels: usize,
        layers: usize,
        d: usize,
    ) -> Result<ToyModel> {
        let flat = Tensor::load_tsr(path.as_ref())?;
        let expect = cue_channels * channels + layers * 2 * channels * d;
        if flat.shape().len() != 1 || flat.len() != expect {
            return Err(Error::shape(
                "model load",
                format!(
                    "expected {expect} values for cue={cue_channels} c={channels} layers={layers} d={d}, got {:?}",
                    flat.shape()
                ),
            ));
        }
        let data = flat.data();
        let mut pos = 0usize;
        let mut take = |r: usize, c: usize| {
            let t = Tensor::new(vec![r, c], data[pos..pos + r * c].to_vec()).expect("sized above");
            pos += r * c;
            t
        };
        let generator = take(cue_channels, channels);
        let mut w_q = Vec::with_capacity(layers);
        let mut w_k = Vec::with_capacity(layers);
        for _ in 0..layers {
            w_q.push(take(channels, d));
            w_k.push(take(channels, d));
        }
        Ok(ToyModel { generator, w_q, w_k })
    }
}

// ── losses ──

/// Mean squared feature error, the reconstruction proxy.
pub fn diffusion_proxy_loss(f_gen: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    let d = f_gen.values().sub(target.values())?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

pub fn total_loss(l_diff: f64, l_match: f64, lambda: f64) -> f64 {
    l_diff + lambda * l_match
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_diff: f64,
    pub l_match: f64,
    pub l_total: f64,
    /// Manifest-wide mean C after this step's update.
    pub c_mean: f64,
    /// Per-layer manifest-wide mean C, index 0 = full resolution.
    pub c_layers: Vec<f64>,
}

// ── pooling ──

/// Matrix form of 2×2 average pooling on [h·w, c] token matrices: P has a
/// 0.25 entry linking each output cell to its four children, so pooled
/// tokens are P·tokens and the operation stays differentiable as a matmul.
pub fn avg_pool_matrix(h: usize, w: usize) -> Result<Tensor> {
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::domain(format!("2x2 pooling needs even dimensions, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut p = Tensor::zeros(&[oh * ow, h * w]);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for dy in 0..2 {
                for dx in 0..2 {
                    let col = (oy * 2 + dy) * w + (ox * 2 + dx);
                    p.data_mut()[row * (h * w) + col] = 0.25;
                }
            }
        }
    }
    Ok(p)
}

// ── prepared scenes ──

struct LayerData {
    nodes: OrderedNodes,
    ref_tokens: Tensor,
}

struct PreparedScene {
    cue_tokens: Tensor,
    target_tokens: Tensor,
    swap: bool,
    /// None where every generated mask vanished at that scale.
    layers: Vec<Option<LayerData>>,
    /// pools[l] maps layer-l tokens to layer-(l+1) tokens.
    pools: Vec<Tensor>,
}

impl PreparedScene {
    fn usable(&self) -> bool {
        self.layers.iter().any(Option::is_some)
    }
}

fn prepare_scene(scene: &LoadedScene, n_layers: usize) -> Result<PreparedScene> {
    let (h, w) = scene.f_ref.resolution();
    if scene.cue.resolution() != (h, w) || scene.target.resolution() != (h, w) {
        return Err(Error::shape("prepare_scene", "cue/target resolution mismatch"));
    }
    let mut pools = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut layers = Vec::with_capacity(n_layers);
    let mut ref_tokens = scene.f_ref.to_tokens();
    let mut masks_ref = scene.masks_ref.clone();
    let mut masks_gen = scene.masks_gen.clone();
    let (mut lh, mut lw) = (h, w);
    for l in 0..n_layers {
        if l > 0 {
            let p = avg_pool_matrix(lh, lw)
                .map_err(|e| Error::domain(format!("layer {}: {e}", l + 1)))?;
            ref_tokens = p.matmul(&ref_tokens)?;
            lh /= 2;
            lw /= 2;
            masks_ref = downsample_masks(&masks_ref, (lh, lw))?;
            masks_gen = downsample_masks(&masks_gen, (lh, lw))?;
            pools.push(p);
        }
        layers.push(
            order_nodes(&masks_ref, &masks_gen, &scene.gt)?.map(|nodes| LayerData {
                nodes,
                ref_tokens: ref_tokens.clone(),
            }),
        );
    }
    Ok(PreparedScene {
        cue_tokens: scene.cue.to_tokens(),
        target_tokens: scene.target.to_tokens(),
        swap: scene.swap,
        layers,
        pools,
    })
}

// ── optimizer ──

struct Adam {
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64) -> Adam {
        Adam { lr, t: 0, m: Vec::new(), v: Vec::new() }
    }

    fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t as i32);
        let bc2 = 1.0 - Self::B2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * gi;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= self.lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

// ── forward/backward ──

/// One tape forward+backward. Returns (l_diff, l_match, l_total, grads) with
/// grads ordered [generator, w_q1, w_k1, ..., w_qN, w_kN].
fn train_step(
    model: &ToyModel,
    scene: &PreparedScene,
    lambda: f64,
    opts: MqaOptions,
) -> Result<(f64, f64, f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let g = tape.leaf(model.generator.clone());
    let wq: Vec<_> = model.w_q.iter().map(|t| tape.leaf(t.clone())).collect();
    let wk: Vec<_> = model.w_k.iter().map(|t| tape.leaf(t.clone())).collect();
    let cue = tape.leaf(scene.cue_tokens.clone());

    let mut f_gen = tape.matmul(cue, g)?;
    let l_diff = tape.sq_err_mean(f_gen, &scene.target_tokens)?;

    let mut neg_cs = Vec::new();
    for (l, layer) in scene.layers.iter().enumerate() {
        if l > 0 {
            let p = tape.leaf(scene.pools[l - 1].clone());
            f_gen = tape.matmul(p, f_gen)?;
        }
        let Some(data) = layer else { continue };
        let ref_tok = tape.leaf(data.ref_tokens.clone());
        let img = build_img_vars(&mut tape, ref_tok, f_gen, wq[l], wk[l], &data.nodes, opts)?;
        neg_cs.push(tape.neg(img.c));
    }
    if neg_cs.is_empty() {
        return Err(Error::domain("scene is degenerate at every layer"));
    }
    let mut acc = neg_cs[0];
    for &v in &neg_cs[1..] {
        acc = tape.add(acc, v)?;
    }
    let l_match = tape.scale(acc, 1.0 / neg_cs.len() as f64);
    let weighted = tape.scale(l_match, lambda);
    let l_total = tape.add(l_diff, weighted)?;
    tape.backward(l_total)?;

    let grads: Vec<Tensor> = std::iter::once(g)
        .chain(wq.iter().zip(&wk).flat_map(|(&q, &k)| [q, k]))
        .map(|v| tape.grad(v).clone())
        .collect();
    Ok((
        tape.value(l_diff).scalar_value(),
        tape.value(l_match).scalar_value(),
        tape.value(l_total).scalar_value(),
        grads,
    ))
}

/// Forward pass without a tape, for finite-difference checks.
fn forward_loss_pure(model: &ToyModel, scene: &PreparedScene, lambda: f64, opts: MqaOptions) -> Result<f64> {
    let mut f_gen = scene.cue_tokens.matmul(&model.generator)?;
    let diff = f_gen.sub(&scene.target_tokens)?;
    let l_diff = diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
    let mut c_sum = 0.0;
    let mut used = 0usize;
    for (l, layer) in scene.layers.iter().enumerate() {
        if l > 0 {
            f_gen = scene.pools[l - 1].matmul(&f_gen)?;
        }
        let Some(data) = layer else { continue };
        let (c, _) = consistency_from_tokens(
            &data.ref_tokens,
            &f_gen,
            &model.w_q[l],
            &model.w_k[l],
            &data.nodes,
            opts,
        )?;
        c_sum += -c;
        used += 1;
    }
    if used == 0 {
        return Err(Error::domain("scene is degenerate at every layer"));
    }
    Ok(l_diff + lambda * (c_sum / used as f64))
}

fn eval_consistency(
    model: &ToyModel,
    prepared: &[PreparedScene],
    opts: MqaOptions,
) -> Result<(Vec<f64>, f64)> {
    let n_layers = model.layers();
    let mut sums = vec![0.0; n_layers];
    let mut counts = vec![0usize; n_layers];
    for scene in prepared {
        let mut tokens = scene.cue_tokens.matmul(&model.generator)?;
        for l in 0..n_layers {
            if l > 0 {
                tokens = scene.pools[l - 1].matmul(&tokens)?;
            }
            let Some(data) = &scene.layers[l] else { continue };
            let (c, _) = consistency_from_tokens(
                &data.ref_tokens,
                &tokens,
                &model.w_q[l],
                &model.w_k[l],
                &data.nodes,
                opts,
            )?;
            sums[l] += c;
            counts[l] += 1;
        }
    }
    let mut c_layers = Vec::with_capacity(n_layers);
    let mut total = 0.0;
    let mut used = 0usize;
    for l in 0..n_layers {
        let mean = if counts[l] > 0 { sums[l] / counts[l] as f64 } else { 0.0 };
        c_layers.push(mean);
        if counts[l] > 0 {
            total += mean;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::domain("no scorable layer in any scene"));
    }
    Ok((c_layers, total / used as f64))
}

// ── training ──

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    /// Degenerate draws that consumed no step.
    pub skipped_draws: usize,
    pub warnings: Vec<String>,
}

fn mqa_options(config: &RunConfig) -> MqaOptions {
    MqaOptions {
        gamma: DEFAULT_GAMMA,
        background_mask_enabled: config.background_mask,
        mode: config.mode,
    }
}

fn load_prepared(config: &RunConfig) -> Result<Vec<PreparedScene>> {
    let entries = load_manifest(&config.manifest)?;
    if entries.is_empty() {
        return Err(Error::domain(format!(
            "manifest {} lists no scenes",
            config.manifest.display()
        )));
    }
    let dir = config.manifest.parent().unwrap_or_else(|| Path::new("."));
    entries
        .iter()
        .map(|e| prepare_scene(&load_scene(dir, e)?, config.layers))
        .collect()
}

/// Runs the training loop against the manifest in `config`, drawing swap
/// scenes with probability rho each step. The caller supplies the RNG so
/// model initialization and step draws can share one seeded stream.
pub fn run_training(model: &mut ToyModel, config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<TrainOutcome> {
    config.validate()?;
    if model.layers() != config.layers {
        return Err(Error::shape(
            "run_training",
            format!("model has {} layers, config wants {}", model.layers(), config.layers),
        ));
    }
    let prepared = load_prepared(config)?;
    check_model_dims(model, &prepared)?;
    let opts = mqa_options(config);
    let swap_pool: Vec<usize> = prepared
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.swap.then_some(i))
        .collect();

    let mut outcome = TrainOutcome { records: Vec::with_capacity(config.steps), skipped_draws: 0, warnings: Vec::new() };
    if config.rho > 0.0 && swap_pool.is_empty() {
        outcome.warnings.push("no swap scenes in manifest: rho branch falls back to uniform draws".into());
    }
    let mut adam = Adam::new(config.lr);
    let max_draws = config.steps.saturating_mul(100).max(100);
    let mut draws = 0usize;
    let mut step = 0usize;
    while step < config.steps {
        draws += 1;
        if draws > max_draws {
            return Err(Error::domain(format!(
                "gave up after {draws} draws: too many degenerate scenes"
            )));
        }
        let coin: f64 = rng.gen();
        let idx = if coin < config.rho && !swap_pool.is_empty() {
            swap_pool[rng.gen_range(0..swap_pool.len())]
        } else {
            rng.gen_range(0..prepared.len())
        };
        let scene = &prepared[idx];
        if !scene.usable() {
            outcome.skipped_draws += 1;
            if outcome.skipped_draws == 1 {
                outcome.warnings.push(format!("scene {idx} degenerate at every layer: skipped"));
            }
            continue;
        }
        step += 1;
        let (l_diff, l_match, l_total, grads) = train_step(model, scene, config.lambda, opts)?;
        adam.update(model.params_mut(), &grads);
        let (c_layers, c_mean) = eval_consistency(model, &prepared, opts)?;
        outcome.records.push(LossRecord { step, l_diff, l_match, l_total, c_mean, c_layers });
    }
    Ok(outcome)
}

fn check_model_dims(model: &ToyModel, prepared: &[PreparedScene]) -> Result<()> {
    let scene = &prepared[0];
    if scene.cue_tokens.cols() != model.cue_channels() || scene.target_tokens.cols() != model.channels() {
        return Err(Error::shape(
            "run_training",
            format!(
                "scene channels (cue {}, features {}) do not match model ({}, {})",
                scene.cue_tokens.cols(),
                scene.target_tokens.cols(),
                model.cue_channels(),
                model.channels()
            ),
        ));
    }
    Ok(())
}

/// Initializes a model from the config seed and trains it; initialization
/// and scene draws consume one RNG stream, so a (config, seed) pair fully
/// determines the run.
pub fn train_from_config(config: &RunConfig) -> Result<(ToyModel, TrainOutcome)> {
    config.validate()?;
    let entries = load_manifest(&config.manifest)?;
    let first = entries
        .first()
        .ok_or_else(|| Error::domain(format!("manifest {} lists no scenes", config.manifest.display())))?;
    let dir = config.manifest.parent().unwrap_or_else(|| Path::new("."));
    let probe = load_scene(dir, first)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ToyModel::init(
        probe.cue.channels(),
        probe.f_ref.channels(),
        config.layers,
        PROJECTION_DIM,
        &mut rng,
    );
    let outcome = run_training(&mut model, config, &mut rng)?;
    Ok((model, outcome))
}

// ── evaluation ──

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub scene: usize,
    pub c_layers: Vec<f64>,
    pub c_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    pub mean_c_layers: Vec<f64>,
    pub mean_c: f64,
}

/// Scores every manifest scene with fixed parameters: per-layer C, per-scene
/// mean, and dataset means.
pub fn evaluate_ic(model: &ToyModel, config: &RunConfig) -> Result<EvalReport> {
    config.validate()?;
    let entries = load_manifest(&config.manifest)?;
    if entries.is_empty() {
        return Err(Error::domain(format!(
            "manifest {} lists no scenes",
            config.manifest.display()
        )));
    }
    let dir = config.manifest.parent().unwrap_or_else(|| Path::new("."));
    let opts = mqa_options(config);
    let n_layers = model.layers();
    let mut scenes = Vec::with_capacity(entries.len());
    let mut layer_sums = vec![0.0; n_layers];
    for entry in &entries {
        let prepared = prepare_scene(&load_scene(dir, entry)?, config.layers)?;
        let mut tokens = prepared.cue_tokens.matmul(&model.generator)?;
        let mut c_layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            if l > 0 {
                tokens = prepared.pools[l - 1].matmul(&tokens)?;
            }
            let data = prepared.layers[l].as_ref().ok_or_else(|| {
                Error::domain(format!("scene {}: layer {} is degenerate", entry.scene, l + 1))
            })?;
            let (c, _) = consistency_from_tokens(
                &data.ref_tokens,
                &tokens,
                &model.w_q[l],
                &model.w_k[l],
                &data.nodes,
                opts,
            )?;
            c_layers.push(c);
            layer_sums[l] += c;
        }
        let c_mean = c_layers.iter().sum::<f64>() / n_layers as f64;
        scenes.push(SceneEval { scene: entry.scene, c_layers, c_mean });
    }
    let n = scenes.len() as f64;
    let mean_c_layers: Vec<f64> = layer_sums.iter().map(|s| s / n).collect();
    let mean_c = mean_c_layers.iter().sum::<f64>() / n_layers as f64;
    Ok(EvalReport { scenes, mean_c_layers, mean_c })
}

// ── reporting ──

/// Header `step,l_diff,l_match,l_total,c_mean,c_l1,...,c_lN`.
pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let first = records
        .first()
        .ok_or_else(|| Error::domain("no loss records to write"))?;
    let mut out = String::from("step,l_diff,l_match,l_total,c_mean");
    for l in 1..=first.c_layers.len() {
        let _ = write!(out, ",c_l{l}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{},{},{}", r.step, r.l_diff, r.l_match, r.l_total, r.c_mean);
        for c in &r.c_layers {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Header `scene,c_l1,...,c_lN,c_mean`, one row per scene plus a `mean` row.
pub fn write_eval_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let path = path.as_ref();
    let n_layers = report.mean_c_layers.len();
    let mut out = String::from("scene");
    for l in 1..=n_layers {
        let _ = write!(out, ",c_l{l}");
    }
    out.push_str(",c_mean\n");
    for s in &report.scenes {
        let _ = write!(out, "{}", s.scene);
        for c in &s.c_layers {
            let _ = write!(out, ",{c}");
        }
        let _ = writeln!(out, ",{}", s.c_mean);
    }
    out.push_str("mean");
    for c in &report.mean_c_layers {
        let _ = write!(out, ",{c}");
    }
    let _ = writeln!(out, ",{}", report.mean_c);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trailing moving average: entry i (i ≥ window−1) averages the window
/// ending at i. Empty when the series is shorter than the window.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - window + 1);
    let mut sum: f64 = xs[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..xs.len() {
        sum += xs[i] - xs[i - window];
        out.push(sum / window as f64);
    }
    out
}

// ── gradient verification ──

/// Checks tape gradients of the full loss against central differences on a
/// small seeded scene. Returns the worst relative error over all parameters.
pub fn grad_check_scene(seed: u64, eps: f64) -> Result<f64> {
    // clean cue keeps the check meaningful: a fully corrupted cue makes C
    // constant in the projections and the comparison trivially 0 vs 0
    let spec = SceneSpec {
        h: 8,
        w: 8,
        swap: true,
        corrupt_p: 0.0,
        ..SceneSpec::default()
    };
    let scene = gen_scene(&spec, seed)?;
    let loaded = LoadedScene {
        f_ref: scene.f_ref.clone(),
        cue: scene.cue.clone(),
        target: scene.target_features.clone(),
        masks_ref: scene.masks_ref.clone(),
        masks_gen: scene.masks_gen.clone(),
        gt: scene.gt.clone(),
        swap: scene.swap,
    };
    let prepared = prepare_scene(&loaded, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ab);
    let model = ToyModel::init(spec.c, spec.c, 3, PROJECTION_DIM, &mut rng);
    let lambda = 0.2;
    let opts = MqaOptions { gamma: DEFAULT_GAMMA, background_mask_enabled: false, mode: crate::graph::Mode::Fast };

    let (_, _, _, grads) = train_step(&model, &prepared, lambda, opts)?;
    let params = model.params();
    let mut worst = 0.0f64;
    for (pi, analytic) in grads.iter().enumerate() {
        let base = params[pi].clone();
        let eval = |x: &Tensor| -> Result<f64> {
            let mut probe = model.clone();
            {
                let mut ps = probe.params_mut();
                *ps[pi] = x.clone();
            }
            forward_loss_pure(&probe, &prepared, lambda, opts)
        };
        let err = crate::gradcheck::grad_check(eval, &base, analytic, eps)?;
        worst = worst.max(err);
    }
    Ok(worst)
}
