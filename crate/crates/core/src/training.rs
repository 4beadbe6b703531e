//! Loss assembly, Adam, the training loop, count metrics, gradient
//! checking, and the ablation harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{
    downsample_preserving_count, partition_scale_bands, render_density, AnnotationSet,
    DensityMap, ScaleBandPartition,
};
use crate::error::{config_err, data_err, numeric_err, Result};
use crate::network::graph::NodeId;
use crate::network::model::{normal, Backbone, FusionState, Network, NetworkConfig, Topology};
use crate::network::tensor::Tensor;

fn default_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on the side-supervision terms.
    #[serde(default = "default_lambda")]
    pub lambda_side: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_side: 1.0 }
    }
}

fn default_lr() -> f64 {
    5e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            batch_size: 1,
            rng_seed: 0,
        }
    }
}

fn validate_optim(o: &OptimConfig) -> Result<()> {
    if !o.learning_rate.is_finite() || o.learning_rate < 0.0 {
        return config_err("learning_rate must be finite and >= 0");
    }
    if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
        return config_err("betas must lie in [0, 1)");
    }
    if o.epsilon <= 0.0 {
        return config_err("epsilon must be > 0");
    }
    if o.batch_size == 0 {
        return config_err("batch_size must be >= 1");
    }
    Ok(())
}

/// One training/evaluation item: an RGB image tensor in [0,1], its point
/// annotations, and one sigma per point for ground-truth rendering.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub ann: AnnotationSet,
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub n_images: usize,
    /// (true count, predicted count) per image, dataset order.
    pub per_image: Vec<(f64, f64)>,
}

/// MAE is the mean absolute count error; MSE the root of the mean squared
/// count error, so MSE >= MAE always.
pub fn metrics_from_counts(per_image: Vec<(f64, f64)>) -> MetricsReport {
    let n = per_image.len() as f64;
    let mae = per_image.iter().map(|(y, yp)| (y - yp).abs()).sum::<f64>() / n;
    let mse = (per_image.iter().map(|(y, yp)| (y - yp) * (y - yp)).sum::<f64>() / n).sqrt();
    MetricsReport {
        mae,
        mse,
        n_images: per_image.len(),
        per_image,
    }
}

pub fn evaluate(net: &Network, dataset: &[Sample]) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return data_err("evaluate needs a non-empty dataset");
    }
    let mut per_image = Vec::with_capacity(dataset.len());
    for s in dataset {
        let state = net.forward(&s.image)?;
        per_image.push((s.ann.points.len() as f64, state.prediction.values.sum()));
    }
    Ok(metrics_from_counts(per_image))
}

/// Sum the selected band maps and sum-pool the result onto a side grid of
/// `stride` and `dims` cells.
fn band_target(
    bands: &ScaleBandPartition,
    which: &[usize],
    stride: usize,
    dims: (usize, usize),
) -> Result<DensityMap> {
    let base = &bands.band_maps[0];
    if stride % base.stride != 0 {
        return data_err(format!(
            "alignment: band maps at stride {} cannot target side stride {}",
            base.stride, stride
        ));
    }
    let mut combined = DensityMap::zeros(base.height, base.width, base.stride);
    for &k in which {
        let m = &bands.band_maps[k];
        if (m.height, m.width, m.stride) != (base.height, base.width, base.stride) {
            return data_err("alignment: band maps disagree on geometry");
        }
        for (o, v) in combined.data.iter_mut().zip(&m.data) {
            *o += v;
        }
    }
    let pooled = downsample_preserving_count(&combined, stride / base.stride)?;
    if (pooled.height, pooled.width) != dims {
        return data_err(format!(
            "alignment: pooled band target is {}x{}, side grid is {}x{}",
            pooled.height, pooled.width, dims.0, dims.1
        ));
    }
    Ok(pooled)
}

/// Pixel-mean squared error plus the seed gradient d(loss)/d(output).
fn mse_and_seed(out: &Tensor, target: &DensityMap, weight: f64) -> (f64, Tensor) {
    let n = (out.h * out.w) as f64;
    let mut seed = Tensor::zeros(out.c, out.h, out.w);
    let mut loss = 0.0;
    for i in 0..out.data.len() {
        let d = out.data[i] - target.data[i];
        loss += d * d / n;
        seed.data[i] = weight * 2.0 * d / n;
    }
    (weight * loss, seed)
}

pub(crate) fn loss_and_seeds(
    state: &FusionState,
    gt_full: &DensityMap,
    bands: &ScaleBandPartition,
    cfg: &LossConfig,
) -> Result<(f64, Vec<(NodeId, Tensor)>)> {
    if !(cfg.lambda_side >= 0.0) {
        return config_err("lambda_side must be >= 0");
    }
    let p = &state.prediction.values;
    if (gt_full.height, gt_full.width) != (p.h, p.w) || gt_full.stride != state.prediction.stride
    {
        return data_err(format!(
            "alignment: ground truth is {}x{} at stride {}, prediction is {}x{} at stride {}",
            gt_full.height,
            gt_full.width,
            gt_full.stride,
            p.h,
            p.w,
            state.prediction.stride
        ));
    }
    let (final_loss, final_seed) = mse_and_seed(p, gt_full, 1.0);
    let mut loss = final_loss;
    let mut seeds = vec![(state.prediction_node, final_seed)];
    if state.supervise_sides && cfg.lambda_side > 0.0 {
        for side in &state.side_outputs {
            let g = &side.grid.values;
            let target = band_target(bands, &side.bands, side.grid.stride, (g.h, g.w))?;
            let (term, seed) = mse_and_seed(g, &target, cfg.lambda_side);
            loss += term;
            seeds.push((side.node, seed));
        }
    }
    Ok((loss, seeds))
}

/// Final-map pixel-mean MSE plus `lambda_side` times the side terms, each
/// side supervised by the sum of its scale bands pooled to its stride.
pub fn total_loss(
    state: &FusionState,
    gt_full: &DensityMap,
    bands: &ScaleBandPartition,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(loss_and_seeds(state, gt_full, bands, cfg)?.0)
}

/// Annotations re-hosted on the padded canvas so rendered grids line up
/// with network output grids.
fn padded_ann(ann: &AnnotationSet, padded_hw: (usize, usize)) -> AnnotationSet {
    AnnotationSet::new(ann.points.clone(), padded_hw)
}

/// Ground truth for one forward pass: the stride-1 full map sum-pooled to
/// the prediction stride, plus the stride-1 band partition, both over the
/// padded canvas. Pooling (rather than rendering at the coarse stride)
/// keeps every head's mass intact even when sigma is far below the stride.
pub fn targets_for_state(
    state: &FusionState,
    ann: &AnnotationSet,
    sigmas: &[f64],
) -> Result<(DensityMap, ScaleBandPartition)> {
    let pa = padded_ann(ann, state.padded_hw);
    let full = render_density(&pa, sigmas, 1, true)?;
    let gt_full = downsample_preserving_count(&full, state.prediction.stride)?;
    let bands = partition_scale_bands(&pa, sigmas, true)?;
    Ok((gt_full, bands))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(shapes: &[usize]) -> Adam {
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &[Vec<f64>], o: &OptimConfig) {
        self.t += 1;
        let bc1 = 1.0 - o.beta1.powi(self.t as i32);
        let bc2 = 1.0 - o.beta2.powi(self.t as i32);
        for (pi, p) in net.params_mut().iter_mut().enumerate() {
            let (ms, vs) = (&mut self.m[pi], &mut self.v[pi]);
            for (((m, v), w), &g) in ms.iter_mut().zip(vs).zip(&mut p.data).zip(&grads[pi]) {
                *m = o.beta1 * *m + (1.0 - o.beta1) * g;
                *v = o.beta2 * *v + (1.0 - o.beta2) * g * g;
                *w -= o.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + o.epsilon);
            }
        }
    }
}

fn flip_image(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.c, t.h, t.w);
    for c in 0..t.c {
        let src = t.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..t.h {
            for x in 0..t.w {
                dst[y * t.w + x] = src[y * t.w + (t.w - 1 - x)];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_mse: f64,
}

/// Train in place. Per-sample augmentation: horizontal flip with
/// probability 0.5 (annotations flipped consistently) and additive
/// Gaussian pixel noise with sigma 0.01 of the unit intensity range.
/// Deterministic given `optim.rng_seed`.
pub fn train(
    net: &mut Network,
    train_set: &[Sample],
    val_set: &[Sample],
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<EpochRecord>> {
    validate_optim(optim)?;
    if train_set.is_empty() {
        return data_err("training set is empty");
    }
    if val_set.is_empty() {
        return data_err("validation set is empty");
    }
    for (i, s) in train_set.iter().enumerate() {
        if s.sigmas.len() != s.ann.points.len() {
            return data_err(format!("train sample {i}: sigma count != point count"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(optim.rng_seed);
    let shapes: Vec<usize> = net.params().iter().map(|p| p.data.len()).collect();
    let mut adam = Adam::new(&shapes);
    let mut history = Vec::with_capacity(optim.epochs);
    let mut acc: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
    for epoch in 0..optim.epochs {
        let mut epoch_loss = 0.0;
        let mut in_batch = 0usize;
        for (si, sample) in train_set.iter().enumerate() {
            let flip = rng.gen_bool(0.5);
            let (mut img, ann) = if flip {
                (flip_image(&sample.image), sample.ann.flip_horizontal())
            } else {
                (sample.image.clone(), sample.ann.clone())
            };
            for v in &mut img.data {
                *v += 0.01 * normal(&mut rng);
            }
            let traced = net.forward_traced(&img)?;
            let (gt_full, bands) = targets_for_state(&traced.state, &ann, &sample.sigmas)?;
            let (loss, seeds) = loss_and_seeds(&traced.state, &gt_full, &bands, loss_cfg)?;
            if !loss.is_finite() {
                return numeric_err(format!(
                    "training diverged: non-finite loss at epoch {epoch}, sample {si}"
                ));
            }
            epoch_loss += loss;
            let grads = traced.tape.backward(net.params(), seeds);
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
            in_batch += 1;
            if in_batch == optim.batch_size || si + 1 == train_set.len() {
                if in_batch > 1 {
                    let inv = 1.0 / in_batch as f64;
                    for a in &mut acc {
                        for x in a.iter_mut() {
                            *x *= inv;
                        }
                    }
                }
                adam.step(net, &acc, optim);
                for a in &mut acc {
                    a.fill(0.0);
                }
                in_batch = 0;
            }
        }
        let report = evaluate(net, val_set)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_mae: report.mae,
            val_mse: report.mse,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheckReport {
    /// (parameter name, relative error of the directional derivative).
    pub per_group: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Fixed scene for the gradient check: a deterministic texture with three
/// annotated points.
fn check_scene(h: usize, w: usize) -> (Tensor, AnnotationSet, Vec<f64>) {
    let mut img = Tensor::zeros(3, h, w);
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = ((i * 29 + 5) % 17) as f64 / 17.0;
    }
    let pts = [(2.2, 3.1), (5.6, 4.4), (6.3, 1.8)];
    let ann = AnnotationSet::new(
        pts.iter()
            .map(|&(x, y)| crate::density::PointAnnotation { x, y })
            .collect(),
        (h, w),
    );
    (img, ann, vec![1.5, 2.0, 1.1])
}

/// Compare the analytic directional derivative of `total_loss` against
/// central finite differences, one random direction per parameter group.
/// Steps 1e-5 then 1e-6 are tried and the better agreement kept.
pub fn gradient_check(config: &NetworkConfig, tolerance: f64) -> Result<GradientCheckReport> {
    let mut net = Network::new(config.clone())?;
    // Fresh biases are all zero and the padded canvas is all zero, which
    // parks every rectifier exactly on its kink where the subgradient and
    // the two-sided finite difference legitimately disagree. Jitter the
    // biases to move the check to a differentiable point.
    let mut jitter = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5bf0_3635_9db3_1fb1);
    for name in net.param_names() {
        if name.ends_with(".b") {
            let mut data = net.param(&name).unwrap().data.clone();
            for v in &mut data {
                *v += 0.05 * normal(&mut jitter);
            }
            net.set_param(&name, &data)?;
        }
    }
    let (img, ann, sigmas) = check_scene(8, 8);
    let loss_cfg = LossConfig::default();

    let loss_of = |net: &Network| -> Result<f64> {
        let traced = net.forward_traced(&img)?;
        let (gt, bands) = targets_for_state(&traced.state, &ann, &sigmas)?;
        total_loss(&traced.state, &gt, &bands, &loss_cfg)
    };

    let traced = net.forward_traced(&img)?;
    let (gt, bands) = targets_for_state(&traced.state, &ann, &sigmas)?;
    let (_, seeds) = loss_and_seeds(&traced.state, &gt, &bands, &loss_cfg)?;
    let grads = traced.tape.backward(net.params(), seeds);

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x9e3779b97f4a7c15);
    let names = net.param_names();
    let mut per_group = Vec::with_capacity(names.len());
    let mut max_err = 0.0f64;
    for (pi, name) in names.iter().enumerate() {
        let base = net.param(name).unwrap().data.clone();
        // Unit-norm signed direction: keeps the probe step small per entry
        // so the step cannot shove borderline rectifier inputs across zero.
        let scale = 1.0 / (base.len() as f64).sqrt();
        let dir: Vec<f64> = (0..base.len())
            .map(|_| if rng.gen_bool(0.5) { scale } else { -scale })
            .collect();
        let analytic: f64 = grads[pi].iter().zip(&dir).map(|(g, d)| g * d).sum();
        let mut best = f64::INFINITY;
        for eps in [1e-5, 1e-6] {
            let plus: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + eps * d).collect();
            net.set_param(name, &plus)?;
            let lp = loss_of(&net)?;
            let minus: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b - eps * d).collect();
            net.set_param(name, &minus)?;
            let lm = loss_of(&net)?;
            let fd = (lp - lm) / (2.0 * eps);
            best = best.min(rel_err(analytic, fd));
            if best <= tolerance / 10.0 {
                break;
            }
        }
        net.set_param(name, &base)?;
        max_err = max_err.max(best);
        per_group.push((name.clone(), best));
    }
    Ok(GradientCheckReport {
        per_group,
        max_rel_err: max_err,
        tolerance,
        passed: max_err < tolerance,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub name: String,
    pub network: NetworkConfig,
}

/// The fixed experiment ladder: flat fusion variants, plain directional
/// topologies with concat merges, then the multi-branch network with
/// concat merges, with unsupervised SCFBs, and in full.
pub fn standard_ablation_ladder(backbone: Backbone, dr_channels: usize) -> Vec<AblationConfig> {
    let base = |topology, use_scfb, sup| NetworkConfig {
        backbone,
        topology,
        dr_channels,
        use_scfb,
        use_scale_supervision: sup,
        rng_seed: 0,
    };
    vec![
        ("baseline", base(Topology::None, false, false)),
        ("fuse-a", base(Topology::FlatAdd, false, false)),
        ("fuse-c", base(Topology::FlatConcat, false, false)),
        ("BT", base(Topology::Bt, false, false)),
        ("TB", base(Topology::Tb, false, false)),
        ("BTTB", base(Topology::Bttb, false, false)),
        ("MBTTB+fuse-c", base(Topology::Mbttbf, false, false)),
        ("MBTTB+SCFB-NS", base(Topology::Mbttbf, true, false)),
        ("MBTTB+SCFB", base(Topology::Mbttbf, true, true)),
    ]
    .into_iter()
    .map(|(name, network)| AblationConfig {
        name: name.to_string(),
        network,
    })
    .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Debug, Default)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// One message per failed (config, seed) run; successful rows continue.
    pub failures: Vec<String>,
}

pub fn run_ablation(
    configs: &[AblationConfig],
    train_set: &[Sample],
    val_set: &[Sample],
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64),
) -> AblationOutcome {
    let mut out = AblationOutcome::default();
    for cfg in configs {
        for &seed in seeds {
            progress(&cfg.name, seed);
            let mut net_cfg = cfg.network.clone();
            net_cfg.rng_seed = seed;
            let mut optim_run = *optim;
            optim_run.rng_seed = seed;
            let run = || -> Result<AblationRow> {
                let mut net = Network::new(net_cfg.clone())?;
                train(&mut net, train_set, val_set, &optim_run, loss_cfg)?;
                let report = evaluate(&net, val_set)?;
                Ok(AblationRow {
                    config: cfg.name.clone(),
                    seed,
                    mae: report.mae,
                    mse: report.mse,
                })
            };
            match run() {
                Ok(row) => out.rows.push(row),
                Err(e) => out.failures.push(format!("{} seed {}: {}", cfg.name, seed, e)),
            }
        }
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-config medians over seeds, in first-appearance order.
pub fn medians_by_config(rows: &[AblationRow]) -> Vec<(String, f64, f64)> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.config.as_str()) {
            order.push(&r.config);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let maes: Vec<f64> = rows
                .iter()
                .filter(|r| r.config == name)
                .map(|r| r.mae)
                .collect();
            let mses: Vec<f64> = rows
                .iter()
                .filter(|r| r.config == name)
                .map(|r| r.mse)
                .collect();
            (name.to_string(), median(&maes), median(&mses))
        })
        .collect()
}
