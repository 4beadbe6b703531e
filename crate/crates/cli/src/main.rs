//! Command-line front end: synthetic data generation, scale estimation,
//! ground-truth rendering, training, evaluation, ablation, and panel
//! renderings.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
//! failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crowdcount::density::{partition_scale_bands, render_density, downsample_preserving_count};
use crowdcount::error::CrowdError;
use crowdcount::imgbuf::RgbImage;
use crowdcount::io::{
    load_annotations, load_manifest, load_png, load_sigmas, save_ablation_csv, save_annotations,
    save_density, save_history, save_manifest, save_png, save_sigmas, DatasetManifest,
    ManifestEntry,
};
use crowdcount::network::{load_checkpoint, save_checkpoint, Backbone, Network, Tensor, Topology};
use crowdcount::scale::{
    estimate_sigmas_constant, estimate_sigmas_knn, mrf_scale_pipeline, MrfPipelineConfig,
    SigmaAssignment, SigmaMethod,
};
use crowdcount::scene::generate_synthetic_scene;
use crowdcount::training::{
    evaluate, median, medians_by_config, run_ablation, standard_ablation_ladder, train,
    LossConfig, OptimConfig, Sample,
};
use crowdcount::{AnnotationSet, NetworkConfig};

#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "usage error: {}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(
    name = "crowdcount",
    version,
    about = "Crowd density estimation toolkit",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset with a manifest.
    Synth(SynthArgs),
    /// Estimate per-head sigmas for every manifest entry.
    EstimateScales(EstimateArgs),
    /// Render ground-truth density maps (optionally per scale band).
    GenGt(GenGtArgs),
    /// Train a network and write checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest; prints MAE/MSE.
    Eval(EvalArgs),
    /// Run the topology ablation ladder and write a CSV table.
    Ablate(AblateArgs),
    /// Render input / ground-truth / prediction panels for one image.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Constant,
    Knn,
    Mrf,
}

impl MethodArg {
    fn as_str(self) -> &'static str {
        match self {
            MethodArg::Constant => "constant",
            MethodArg::Knn => "knn",
            MethodArg::Mrf => "mrf",
        }
    }
}

/// Sigma-estimation settings: part of RunConfig, overridable by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SigmaConfig {
    /// constant | knn | mrf.
    method: String,
    sigma0: f64,
    k: usize,
    beta: f64,
    /// None picks H*W/400.
    slic_k: Option<usize>,
    compactness: f64,
    slic_iterations: usize,
    kappa: f64,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        SigmaConfig {
            method: "knn".into(),
            sigma0: 4.0,
            k: 3,
            beta: 0.3,
            slic_k: None,
            compactness: 10.0,
            slic_iterations: 10,
            kappa: 0.3,
        }
    }
}

impl SigmaConfig {
    fn pipeline(&self) -> MrfPipelineConfig {
        MrfPipelineConfig {
            slic_k: self.slic_k,
            compactness: self.compactness,
            slic_iterations: self.slic_iterations,
            kappa: self.kappa,
            ..MrfPipelineConfig::default()
        }
    }
}

/// Top-level run configuration. Every field has a default, so `{}` is a
/// valid config file; unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    network: NetworkConfig,
    optim: OptimConfig,
    loss: LossConfig,
    sigma: SigmaConfig,
    train_manifest: Option<String>,
    val_manifest: Option<String>,
    test_manifest: Option<String>,
    out_dir: Option<String>,
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CrowdError::Data(format!("{}: {e}", p.display())))?;
            let cfg: RunConfig = serde_json::from_str(&text)
                .map_err(|e| CrowdError::Config(format!("{}: {e}", p.display())))?;
            Ok(cfg)
        }
    }
}

#[derive(Args, Clone)]
struct SigmaFlags {
    /// Sigma estimation method override.
    #[arg(long, value_enum)]
    sigma_method: Option<MethodArg>,
    /// Sigma for the constant method.
    #[arg(long)]
    sigma0: Option<f64>,
    /// Neighbor count for the knn method.
    #[arg(long)]
    k: Option<usize>,
    /// Mean-distance factor for the knn method.
    #[arg(long)]
    beta: Option<f64>,
    /// Requested SLIC superpixel count (default H*W/400).
    #[arg(long)]
    slic_k: Option<usize>,
    /// SLIC compactness.
    #[arg(long)]
    compactness: Option<f64>,
    /// SLIC iteration count.
    #[arg(long)]
    slic_iterations: Option<usize>,
    /// Area-to-sigma factor for the mrf method.
    #[arg(long)]
    kappa: Option<f64>,
}

impl SigmaFlags {
    fn apply(&self, cfg: &mut SigmaConfig) {
        if let Some(m) = self.sigma_method {
            cfg.method = m.as_str().into();
        }
        if let Some(v) = self.sigma0 {
            cfg.sigma0 = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.slic_k {
            cfg.slic_k = Some(v);
        }
        if let Some(v) = self.compactness {
            cfg.compactness = v;
        }
        if let Some(v) = self.slic_iterations {
            cfg.slic_iterations = v;
        }
        if let Some(v) = self.kappa {
            cfg.kappa = v;
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Number of scenes to generate.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Manifest split tag: train | val | test.
    #[arg(long, default_value = "train")]
    split: String,
    /// Scene size as HxW.
    #[arg(long, default_value = "64x64")]
    image_size: String,
    /// Heads per scene.
    #[arg(long, default_value_t = 8)]
    n_heads: usize,
    /// Head radius range in pixels as MIN,MAX.
    #[arg(long, default_value = "2.0,4.0")]
    size_range: String,
    /// Perspective gain in [0,1).
    #[arg(long, default_value_t = 0.5)]
    perspective_gain: f64,
    /// Clutter level in [0,1].
    #[arg(long, default_value_t = 0.3)]
    clutter: f64,
    /// Base seed; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// constant | knn | mrf.
    #[arg(long, value_enum)]
    method: MethodArg,
    #[command(flatten)]
    sigma: SigmaFlags,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenGtArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding sigma files; default is next to each annotation
    /// file (<annotations>.sigmas.json naming).
    #[arg(long)]
    sigmas: Option<PathBuf>,
    /// Output grid stride.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Also write the four scale-band maps.
    #[arg(long, default_value_t = false)]
    bands: bool,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct NetworkFlags {
    /// Backbone override: vgg16_layout | tiny.
    #[arg(long)]
    backbone: Option<String>,
    /// Topology override: NONE | FLAT_ADD | FLAT_CONCAT | BT | TB | BTTB | MBTTBF.
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    dr_channels: Option<usize>,
    #[arg(long)]
    use_scfb: Option<bool>,
    #[arg(long)]
    use_scale_supervision: Option<bool>,
    /// Weight-init seed override.
    #[arg(long)]
    net_seed: Option<u64>,
}

impl NetworkFlags {
    fn apply(&self, cfg: &mut NetworkConfig) -> Result<()> {
        if let Some(b) = &self.backbone {
            cfg.backbone = b
                .parse::<Backbone>()
                .map_err(|e| usage(format!("--backbone: {e}")))?;
        }
        if let Some(t) = &self.topology {
            cfg.topology = t
                .parse::<Topology>()
                .map_err(|e| usage(format!("--topology: {e}")))?;
        }
        if let Some(v) = self.dr_channels {
            cfg.dr_channels = v;
        }
        if let Some(v) = self.use_scfb {
            cfg.use_scfb = v;
        }
        if let Some(v) = self.use_scale_supervision {
            cfg.use_scale_supervision = v;
        }
        if let Some(v) = self.net_seed {
            cfg.rng_seed = v;
        }
        Ok(())
    }
}

#[derive(Args)]
struct OptimFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training seed (augmentation order; ablate also reseeds weights).
    #[arg(long)]
    seed: Option<u64>,
    /// Side-supervision loss weight.
    #[arg(long)]
    lambda_side: Option<f64>,
}

impl OptimFlags {
    fn apply(&self, optim: &mut OptimConfig, loss: &mut LossConfig) {
        if let Some(v) = self.lr {
            optim.learning_rate = v;
        }
        if let Some(v) = self.beta1 {
            optim.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            optim.beta2 = v;
        }
        if let Some(v) = self.epsilon {
            optim.epsilon = v;
        }
        if let Some(v) = self.epochs {
            optim.epochs = v;
        }
        if let Some(v) = self.batch_size {
            optim.batch_size = v;
        }
        if let Some(v) = self.seed {
            optim.rng_seed = v;
        }
        if let Some(v) = self.lambda_side {
            loss.lambda_side = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// RunConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[command(flatten)]
    network: NetworkFlags,
    #[command(flatten)]
    optim: OptimFlags,
    #[command(flatten)]
    sigma: SigmaFlags,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    sigma: SigmaFlags,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// RunConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated topology filter for the ladder
    /// (NONE,FLAT_ADD,FLAT_CONCAT,BT,TB,BTTB,MBTTBF). Default: all rows.
    #[arg(long)]
    topologies: Option<String>,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    /// Evaluation manifest; falls back to the config's test then val split.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimFlags,
    #[command(flatten)]
    sigma: SigmaFlags,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Annotation file for the ground-truth panel; black panel when absent.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[command(flatten)]
    sigma: SigmaFlags,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(ce) = cause.downcast_ref::<CrowdError>() {
            return match ce {
                CrowdError::Numeric(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::EstimateScales(a) => cmd_estimate_scales(a),
        Cmd::GenGt(a) => cmd_gen_gt(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Render(a) => cmd_render(a),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("--image-size '{s}' is not HxW")))?;
    Ok((
        h.trim()
            .parse()
            .map_err(|_| usage(format!("--image-size '{s}' is not HxW")))?,
        w.trim()
            .parse()
            .map_err(|_| usage(format!("--image-size '{s}' is not HxW")))?,
    ))
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| usage(format!("--size-range '{s}' is not MIN,MAX")))?;
    Ok((
        a.trim()
            .parse()
            .map_err(|_| usage(format!("--size-range '{s}' is not MIN,MAX")))?,
        b.trim()
            .parse()
            .map_err(|_| usage(format!("--size-range '{s}' is not MIN,MAX")))?,
    ))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        out.push(
            part.trim()
                .parse()
                .map_err(|_| usage(format!("--seeds entry '{part}' is not an integer")))?,
        );
    }
    Ok(out)
}

fn write_effective_config<T: Serialize>(out_dir: &Path, name: &str, cfg: &T) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn entry_failures(failed: usize) -> Result<()> {
    if failed > 0 {
        return Err(CrowdError::Data(format!("{failed} entries failed")).into());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let image_size = parse_size(&a.image_size)?;
    let size_range = parse_range(&a.size_range)?;
    let img_dir = a.out_dir.join("images");
    let ann_dir = a.out_dir.join("ann");
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    fs::create_dir_all(&ann_dir).with_context(|| format!("creating {}", ann_dir.display()))?;

    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let spec = crowdcount::SyntheticSceneSpec {
            image_size,
            n_heads: a.n_heads,
            size_range,
            perspective_gain: a.perspective_gain,
            clutter_level: a.clutter,
            rng_seed: a.seed + i as u64,
        };
        let (img, ann, radii) = generate_synthetic_scene(&spec)?;
        let stem = format!("scene_{i:04}");
        save_png(&img_dir.join(format!("{stem}.png")), &img)?;
        save_annotations(&ann_dir.join(format!("{stem}.json")), &ann)?;
        fs::write(
            ann_dir.join(format!("{stem}.radii.json")),
            serde_json::to_string(&radii)?,
        )?;
        entries.push(ManifestEntry {
            image: format!("images/{stem}.png"),
            annotations: format!("ann/{stem}.json"),
        });
    }
    let manifest = DatasetManifest {
        split: a.split.clone(),
        entries,
    };
    save_manifest(&a.out_dir.join("manifest.json"), &manifest)?;

    #[derive(Serialize)]
    struct Effective<'a> {
        count: usize,
        split: &'a str,
        image_size: (usize, usize),
        n_heads: usize,
        size_range: (f64, f64),
        perspective_gain: f64,
        clutter_level: f64,
        seed: u64,
    }
    write_effective_config(
        &a.out_dir,
        "synth_config.json",
        &Effective {
            count: a.count,
            split: &a.split,
            image_size,
            n_heads: a.n_heads,
            size_range,
            perspective_gain: a.perspective_gain,
            clutter_level: a.clutter,
            seed: a.seed,
        },
    )?;
    println!(
        "wrote {} scenes under {} (split {})",
        a.count,
        a.out_dir.display(),
        a.split
    );
    Ok(())
}

fn sigma_path_for(annotations: &str) -> PathBuf {
    Path::new(annotations).with_extension("sigmas.json")
}

fn estimate_for(
    img: Option<&RgbImage>,
    ann: &AnnotationSet,
    sig: &SigmaConfig,
) -> Result<SigmaAssignment> {
    let method: SigmaMethod = sig.method.parse().map_err(CrowdError::from)?;
    let assignment = match method {
        SigmaMethod::Constant => estimate_sigmas_constant(ann, sig.sigma0)?,
        SigmaMethod::Knn => estimate_sigmas_knn(ann, sig.k, sig.beta)?,
        SigmaMethod::Mrf => {
            let img = img.ok_or_else(|| {
                CrowdError::Data("mrf sigma estimation needs the image".into())
            })?;
            mrf_scale_pipeline(img, ann, &sig.pipeline())?.0
        }
    };
    Ok(assignment)
}

fn cmd_estimate_scales(a: EstimateArgs) -> Result<()> {
    let mut sig = SigmaConfig::default();
    a.sigma.apply(&mut sig);
    sig.method = a.method.as_str().into();
    let needs_image = matches!(a.method, MethodArg::Mrf);

    let manifest = load_manifest(&a.manifest)?;
    let mut all_sigmas = Vec::new();
    let mut failed = 0usize;
    for e in &manifest.entries {
        let result = (|| -> Result<()> {
            let (ann, clamped) = load_annotations(Path::new(&e.annotations))?;
            if clamped > 0 {
                eprintln!("warning: {clamped} point(s) clamped in {}", e.annotations);
            }
            let img = if needs_image {
                Some(load_png(Path::new(&e.image))?)
            } else {
                None
            };
            let assignment = estimate_for(img.as_ref(), &ann, &sig)?;
            let out = sigma_path_for(&e.annotations);
            save_sigmas(&out, &assignment)?;
            println!(
                "{} -> {} ({} sigmas)",
                e.annotations,
                out.display(),
                assignment.sigmas.len()
            );
            all_sigmas.extend_from_slice(&assignment.sigmas);
            Ok(())
        })();
        if let Err(err) = result {
            eprintln!("{}: {err:#}", e.image);
            failed += 1;
        }
    }
    if all_sigmas.is_empty() {
        println!("no heads; no sigma statistics");
    } else {
        let mut sorted = all_sigmas.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        println!(
            "sigma min {:.4} median {:.4} max {:.4} over {} heads",
            sorted[0],
            median(&sorted),
            sorted[sorted.len() - 1],
            sorted.len()
        );
    }

    #[derive(Serialize)]
    struct Effective<'a> {
        manifest: String,
        sigma: &'a SigmaConfig,
    }
    write_effective_config(
        &a.out_dir,
        "estimate_scales_config.json",
        &Effective {
            manifest: a.manifest.display().to_string(),
            sigma: &sig,
        },
    )?;
    entry_failures(failed)
}

fn cmd_gen_gt(a: GenGtArgs) -> Result<()> {
    if a.stride == 0 {
        return Err(usage("--stride must be >= 1"));
    }
    let manifest = load_manifest(&a.manifest)?;
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut failed = 0usize;
    for e in &manifest.entries {
        let result = (|| -> Result<()> {
            let (ann, clamped) = load_annotations(Path::new(&e.annotations))?;
            if clamped > 0 {
                eprintln!("warning: {clamped} point(s) clamped in {}", e.annotations);
            }
            let sigma_path = match &a.sigmas {
                Some(dir) => dir.join(
                    sigma_path_for(&e.annotations)
                        .file_name()
                        .expect("sigma file name"),
                ),
                None => sigma_path_for(&e.annotations),
            };
            let assignment = load_sigmas(&sigma_path)?;
            if assignment.sigmas.len() != ann.points.len() {
                return Err(CrowdError::Data(format!(
                    "{}: {} sigmas for {} points",
                    sigma_path.display(),
                    assignment.sigmas.len(),
                    ann.points.len()
                ))
                .into());
            }
            let stem = Path::new(&e.image)
                .file_stem()
                .expect("image file name")
                .to_string_lossy()
                .into_owned();
            let full = render_density(&ann, &assignment.sigmas, a.stride, true)?;
            save_density(&a.out_dir.join(format!("{stem}.density")), &full)?;
            let count = ann.points.len() as f64;
            let sum: f64 = full.data.iter().sum();
            println!("{stem}: count {count} sum {sum:.6} residual {:.3e}", (sum - count).abs());
            if a.bands {
                let parts = partition_scale_bands(&ann, &assignment.sigmas, true)?;
                for (b, map) in parts.band_maps.iter().enumerate() {
                    let out = if a.stride > 1 {
                        downsample_preserving_count(map, a.stride)?
                    } else {
                        map.clone()
                    };
                    save_density(&a.out_dir.join(format!("{stem}.band{}", b + 1)), &out)?;
                }
            }
            Ok(())
        })();
        if let Err(err) = result {
            eprintln!("{}: {err:#}", e.image);
            failed += 1;
        }
    }

    #[derive(Serialize)]
    struct Effective {
        manifest: String,
        sigmas: Option<String>,
        stride: usize,
        bands: bool,
    }
    write_effective_config(
        &a.out_dir,
        "gengt_config.json",
        &Effective {
            manifest: a.manifest.display().to_string(),
            sigmas: a.sigmas.as_ref().map(|p| p.display().to_string()),
            stride: a.stride,
            bands: a.bands,
        },
    )?;
    entry_failures(failed)
}

/// Build training samples from a manifest. A `<annotations>.sigmas.json`
/// file wins when present; otherwise sigmas come from the configured
/// estimation method.
fn load_samples(manifest_path: &Path, sig: &SigmaConfig) -> Result<Vec<Sample>> {
    let manifest = load_manifest(manifest_path)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let img = load_png(Path::new(&e.image))?;
        let (ann, clamped) = load_annotations(Path::new(&e.annotations))?;
        if clamped > 0 {
            eprintln!("warning: {clamped} point(s) clamped in {}", e.annotations);
        }
        let sigma_path = sigma_path_for(&e.annotations);
        let sigmas = if sigma_path.is_file() {
            let assignment = load_sigmas(&sigma_path)?;
            if assignment.sigmas.len() != ann.points.len() {
                return Err(CrowdError::Data(format!(
                    "{}: {} sigmas for {} points",
                    sigma_path.display(),
                    assignment.sigmas.len(),
                    ann.points.len()
                ))
                .into());
            }
            assignment.sigmas
        } else {
            estimate_for(Some(&img), &ann, sig)?.sigmas
        };
        out.push(Sample {
            image: Tensor::from_image(&img),
            ann,
            sigmas,
        });
    }
    Ok(out)
}

fn require_manifest(flag: Option<PathBuf>, cfg_value: &Option<String>, key: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg_value.as_ref().map(PathBuf::from))
        .ok_or_else(|| CrowdError::Config(format!("{key} is not set")).into())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(a.config.as_deref())?;
    a.network.apply(&mut cfg.network)?;
    a.optim.apply(&mut cfg.optim, &mut cfg.loss);
    a.sigma.apply(&mut cfg.sigma);
    let train_manifest = require_manifest(a.train_manifest, &cfg.train_manifest, "train_manifest")?;
    let val_manifest = require_manifest(a.val_manifest, &cfg.val_manifest, "val_manifest")?;
    let out_dir = a
        .out_dir
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.train_manifest = Some(train_manifest.display().to_string());
    cfg.val_manifest = Some(val_manifest.display().to_string());
    cfg.out_dir = Some(out_dir.display().to_string());

    let train_set = load_samples(&train_manifest, &cfg.sigma)?;
    let val_set = load_samples(&val_manifest, &cfg.sigma)?;
    write_effective_config(&out_dir, "train_config.json", &cfg)?;

    let mut net = Network::new(cfg.network.clone())?;
    let history = train(&mut net, &train_set, &val_set, &cfg.optim, &cfg.loss)?;
    for rec in &history {
        println!(
            "epoch {} train_loss {:.6} val_mae {:.4} val_mse {:.4}",
            rec.epoch, rec.train_loss, rec.val_mae, rec.val_mse
        );
    }
    let ckpt = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&ckpt, &net)?;
    save_history(&out_dir.join("history.jsonl"), &history)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut sig = SigmaConfig::default();
    a.sigma.apply(&mut sig);
    let net = load_checkpoint(&a.checkpoint)?;
    let samples = load_samples(&a.manifest, &sig)?;
    let report = evaluate(&net, &samples)?;
    println!(
        "MAE {:.4} MSE {:.4} over {} images",
        report.mae, report.mse, report.n_images
    );
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let metrics_path = a.out_dir.join("metrics.json");
    fs::write(&metrics_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", metrics_path.display()))?;

    #[derive(Serialize)]
    struct Effective<'a> {
        checkpoint: String,
        manifest: String,
        sigma: &'a SigmaConfig,
    }
    write_effective_config(
        &a.out_dir,
        "eval_config.json",
        &Effective {
            checkpoint: a.checkpoint.display().to_string(),
            manifest: a.manifest.display().to_string(),
            sigma: &sig,
        },
    )?;
    println!("wrote {}", metrics_path.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load_run_config(a.config.as_deref())?;
    a.optim.apply(&mut cfg.optim, &mut cfg.loss);
    a.sigma.apply(&mut cfg.sigma);
    let seeds = parse_seeds(&a.seeds)?;
    if seeds.is_empty() {
        return Err(usage("--seeds needs at least one entry"));
    }
    let ladder = standard_ablation_ladder(cfg.network.backbone, cfg.network.dr_channels);
    let configs = match &a.topologies {
        None => ladder,
        Some(list) => {
            let mut wanted = Vec::new();
            for name in list.split(',') {
                let topo: Topology = name
                    .trim()
                    .parse()
                    .map_err(|e| usage(format!("--topologies: {e}")))?;
                wanted.push(topo);
            }
            ladder
                .into_iter()
                .filter(|c| wanted.contains(&c.network.topology))
                .collect()
        }
    };
    if configs.is_empty() {
        return Err(usage("--topologies selected no ladder rows"));
    }

    let train_manifest = require_manifest(a.train_manifest, &cfg.train_manifest, "train_manifest")?;
    let eval_manifest = match a.test_manifest {
        Some(p) => p,
        None => match (&cfg.test_manifest, &cfg.val_manifest) {
            (Some(p), _) => PathBuf::from(p),
            (None, Some(p)) => PathBuf::from(p),
            (None, None) => {
                return Err(CrowdError::Config("test_manifest is not set".into()).into())
            }
        },
    };
    let out_dir = a
        .out_dir
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.train_manifest = Some(train_manifest.display().to_string());
    cfg.test_manifest = Some(eval_manifest.display().to_string());
    cfg.out_dir = Some(out_dir.display().to_string());

    let train_set = load_samples(&train_manifest, &cfg.sigma)?;
    let eval_set = load_samples(&eval_manifest, &cfg.sigma)?;

    #[derive(Serialize)]
    struct Effective<'a> {
        #[serde(flatten)]
        run: &'a RunConfig,
        ladder: Vec<&'a str>,
        seeds: &'a [u64],
    }
    write_effective_config(
        &out_dir,
        "ablate_config.json",
        &Effective {
            run: &cfg,
            ladder: configs.iter().map(|c| c.name.as_str()).collect(),
            seeds: &seeds,
        },
    )?;

    let outcome = run_ablation(
        &configs,
        &train_set,
        &eval_set,
        &cfg.optim,
        &cfg.loss,
        &seeds,
        |name, seed| eprintln!("run {name} seed {seed}"),
    );
    let csv_path = out_dir.join("ablation.csv");
    save_ablation_csv(&csv_path, &outcome.rows)?;
    for (name, mae, mse) in medians_by_config(&outcome.rows) {
        println!("{name}: median MAE {mae:.4} median MSE {mse:.4}");
    }
    println!("wrote {}", csv_path.display());
    for f in &outcome.failures {
        eprintln!("failed: {f}");
    }
    entry_failures(outcome.failures.len())
}

fn density_panel(data: &[f64], h: usize, w: usize) -> RgbImage {
    let peak = data.iter().cloned().fold(0.0f64, f64::max);
    let mut img = RgbImage::new(h, w);
    if peak > 0.0 {
        for y in 0..h {
            for x in 0..w {
                let v = (data[y * w + x] / peak).clamp(0.0, 1.0);
                img.set(y, x, [v, v, v]);
            }
        }
    }
    img
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let mut sig = SigmaConfig::default();
    a.sigma.apply(&mut sig);
    let net = load_checkpoint(&a.checkpoint)?;
    let img = load_png(&a.image)?;
    let (h, w) = (img.height, img.width);

    let state = net.forward(&Tensor::from_image(&img))?;
    let pred = &state.prediction;
    let pred_count = pred.values.sum();
    let mut pred_full = vec![0.0f64; h * w];
    let plane = pred.values.plane(0);
    for y in 0..h {
        for x in 0..w {
            pred_full[y * w + x] = plane[(y / pred.stride) * pred.values.w + x / pred.stride];
        }
    }

    let (gt_panel, true_label) = match &a.annotations {
        Some(path) => {
            let (ann, clamped) = load_annotations(path)?;
            if clamped > 0 {
                eprintln!("warning: {clamped} point(s) clamped in {}", path.display());
            }
            if ann.image_size != (h, w) {
                return Err(CrowdError::Data(format!(
                    "{}: annotation canvas {:?} != image {}x{}",
                    path.display(),
                    ann.image_size,
                    h,
                    w
                ))
                .into());
            }
            let sigmas = estimate_for(Some(&img), &ann, &sig)?.sigmas;
            let gt = render_density(&ann, &sigmas, 1, true)?;
            (
                density_panel(&gt.data, h, w),
                format!("{:.1}", ann.points.len() as f64),
            )
        }
        None => (RgbImage::new(h, w), "na".to_string()),
    };
    let pred_panel = density_panel(&pred_full, h, w);

    let sep = 2usize;
    let mut panel = RgbImage::filled(h, 3 * w + 2 * sep, [1.0, 1.0, 1.0]);
    for y in 0..h {
        for x in 0..w {
            panel.set(y, x, img.get(y, x));
            panel.set(y, w + sep + x, gt_panel.get(y, x));
            panel.set(y, 2 * (w + sep) + x, pred_panel.get(y, x));
        }
    }
    let stem = a
        .image
        .file_stem()
        .expect("image file name")
        .to_string_lossy()
        .into_owned();
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let out = a
        .out_dir
        .join(format!("render_{stem}_true_{true_label}_pred_{pred_count:.1}.png"));
    save_png(&out, &panel)?;

    #[derive(Serialize)]
    struct Effective<'a> {
        checkpoint: String,
        image: String,
        annotations: Option<String>,
        sigma: &'a SigmaConfig,
    }
    write_effective_config(
        &a.out_dir,
        "render_config.json",
        &Effective {
            checkpoint: a.checkpoint.display().to_string(),
            image: a.image.display().to_string(),
            annotations: a.annotations.as_ref().map(|p| p.display().to_string()),
            sigma: &sig,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}
