//! Per-head scale (sigma) estimation.
//!
//! The full pipeline segments the image into superpixels (SLIC), grows
//! watershed basins from the annotated head points over an exact distance
//! transform, fuses the two with an MRF, bounds each head's segment by
//! color evidence, and maps the segment area to a Gaussian sigma. Constant
//! and k-nearest-neighbor baselines share the same clipping rule.

pub mod mrf;
pub mod slic;
pub mod watershed;

use crate::density::AnnotationSet;
use crate::error::{data_err, Result};
use crate::imgbuf::RgbImage;
use mrf::{mrf_refine, HeadSegmentation, MrfConfig};
use slic::slic_segment;
use watershed::{seeded_watershed, seeds_from_points};

/// Fallback sigma when no geometry is available (constant method, or kNN
/// with fewer than 2 points).
pub const DEFAULT_SIGMA: f64 = 4.0;
/// Area -> sigma factor: sigma = KAPPA * sqrt(area).
pub const KAPPA: f64 = 0.3;
/// Lower clip for estimated sigmas.
pub const SIGMA_MIN: f64 = 1.0;

/// Upper clip: a quarter of the short image side.
pub fn sigma_max(image_size: (usize, usize)) -> f64 {
    0.25 * image_size.0.min(image_size.1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMethod {
    Constant,
    Knn,
    Mrf,
}

impl SigmaMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SigmaMethod::Constant => "constant",
            SigmaMethod::Knn => "knn",
            SigmaMethod::Mrf => "mrf",
        }
    }
}

impl std::str::FromStr for SigmaMethod {
    type Err = crate::error::CrowdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(SigmaMethod::Constant),
            "knn" => Ok(SigmaMethod::Knn),
            "mrf" => Ok(SigmaMethod::Mrf),
            other => data_err(format!("unknown sigma method '{other}'")),
        }
    }
}

/// Per-head sigmas plus the method that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaAssignment {
    pub sigmas: Vec<f64>,
    pub method_tag: SigmaMethod,
}

fn clip_sigma(s: f64, image_size: (usize, usize)) -> f64 {
    s.clamp(SIGMA_MIN, sigma_max(image_size).max(SIGMA_MIN))
}

/// Every head gets `sigma0`.
pub fn estimate_sigmas_constant(ann: &AnnotationSet, sigma0: f64) -> Result<SigmaAssignment> {
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return data_err(format!("sigma0 = {sigma0} must be positive and finite"));
    }
    Ok(SigmaAssignment {
        sigmas: vec![sigma0; ann.points.len()],
        method_tag: SigmaMethod::Constant,
    })
}

/// Geometry-adaptive baseline: sigma_i = beta * mean distance to the k
/// nearest other heads, clipped. Fewer than 2 points falls back to the
/// constant default.
pub fn estimate_sigmas_knn(ann: &AnnotationSet, k: usize, beta: f64) -> Result<SigmaAssignment> {
    if k == 0 || !(beta > 0.0) {
        return data_err("knn needs k >= 1 and beta > 0");
    }
    let n = ann.points.len();
    if n < 2 {
        return Ok(SigmaAssignment {
            sigmas: vec![DEFAULT_SIGMA; n],
            method_tag: SigmaMethod::Knn,
        });
    }
    let k_eff = k.min(n - 1);
    let mut sigmas = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for (i, p) in ann.points.iter().enumerate() {
        dists.clear();
        for (j, q) in ann.points.iter().enumerate() {
            if i != j {
                dists.push(((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean: f64 = dists[..k_eff].iter().sum::<f64>() / k_eff as f64;
        sigmas.push(clip_sigma(beta * mean, ann.image_size));
    }
    Ok(SigmaAssignment {
        sigmas,
        method_tag: SigmaMethod::Knn,
    })
}

/// Sigma from segment area: sigma_h = clip(kappa * sqrt(areas[h])).
pub fn estimate_sigmas_mrf(seg: &HeadSegmentation, kappa: f64) -> SigmaAssignment {
    let size = (seg.height, seg.width);
    SigmaAssignment {
        sigmas: seg
            .areas
            .iter()
            .map(|&a| clip_sigma(kappa * (a as f64).sqrt(), size))
            .collect(),
        method_tag: SigmaMethod::Mrf,
    }
}

/// Tunables for the MRF pipeline.
#[derive(Debug, Clone)]
pub struct MrfPipelineConfig {
    /// Requested superpixel count; None picks H*W/400.
    pub slic_k: Option<usize>,
    pub compactness: f64,
    pub slic_iterations: usize,
    pub kappa: f64,
    pub mrf: MrfConfig,
}

impl Default for MrfPipelineConfig {
    fn default() -> Self {
        MrfPipelineConfig {
            slic_k: None,
            compactness: 10.0,
            slic_iterations: 10,
            kappa: KAPPA,
            mrf: MrfConfig::default(),
        }
    }
}

pub fn default_slic_k(h: usize, w: usize) -> usize {
    (h * w / 400).max(1)
}

fn color_dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

/// Bound each head's labeled area by color evidence: a superpixel counts
/// toward its head only when its mean color sits at least as close to the
/// head's anchor color (3x3 patch around the seed pixel) as to the scene
/// background estimate (mean color of seed-free superpixels). Without color
/// evidence (constant image) every comparison ties and the full labeled
/// areas are kept, so purely geometric inputs keep their cell-area
/// semantics.
pub fn color_bounded_areas(
    sp: &slic::SuperpixelMap,
    seg: &HeadSegmentation,
    img: &RgbImage,
    seeds: &[(usize, usize)],
) -> Result<Vec<usize>> {
    let (h, w) = (sp.height, sp.width);
    if img.height != h || img.width != w {
        return data_err(format!(
            "image {}x{} vs superpixel map {h}x{w}",
            img.height, img.width
        ));
    }
    if seg.superpixel_labels.len() != sp.k {
        return data_err(format!(
            "segmentation covers {} superpixels, map has {}",
            seg.superpixel_labels.len(),
            sp.k
        ));
    }
    let hw = h * w;
    let mut colors = vec![[0.0f64; 3]; sp.k];
    let mut size = vec![0usize; sp.k];
    for i in 0..hw {
        let p = sp.labels[i];
        size[p] += 1;
        colors[p][0] += img.data[i];
        colors[p][1] += img.data[hw + i];
        colors[p][2] += img.data[2 * hw + i];
    }
    for (c, &n) in colors.iter_mut().zip(&size) {
        if n > 0 {
            for ch in c.iter_mut() {
                *ch /= n as f64;
            }
        }
    }

    let mut has_seed = vec![false; sp.k];
    let mut anchors = Vec::with_capacity(seeds.len());
    for &(sy, sx) in seeds {
        if sy >= h || sx >= w {
            return data_err(format!("seed ({sy}, {sx}) outside {h}x{w}"));
        }
        has_seed[sp.labels[sy * w + sx]] = true;
        let mut acc = [0.0f64; 3];
        let mut n = 0.0;
        for y in sy.saturating_sub(1)..=(sy + 1).min(h - 1) {
            for x in sx.saturating_sub(1)..=(sx + 1).min(w - 1) {
                let px = img.get(y, x);
                for c in 0..3 {
                    acc[c] += px[c];
                }
                n += 1.0;
            }
        }
        anchors.push([acc[0] / n, acc[1] / n, acc[2] / n]);
    }

    let mut bg = [0.0f64; 3];
    let mut bg_n = 0.0;
    for p in 0..sp.k {
        if !has_seed[p] {
            for c in 0..3 {
                bg[c] += colors[p][c] * size[p] as f64;
            }
            bg_n += size[p] as f64;
        }
    }
    if bg_n == 0.0 {
        // Every superpixel holds a seed; fall back to the global mean.
        for p in 0..sp.k {
            for c in 0..3 {
                bg[c] += colors[p][c] * size[p] as f64;
            }
            bg_n += size[p] as f64;
        }
    }
    for c in bg.iter_mut() {
        *c /= bg_n;
    }

    let n_heads = seg.areas.len();
    let mut areas = vec![0usize; n_heads];
    for p in 0..sp.k {
        let head = seg.superpixel_labels[p];
        // The 1e-12 slack keeps exact-tie inputs (constant images) from
        // splitting on accumulation rounding.
        if head < n_heads
            && color_dist2(colors[p], anchors[head]) <= color_dist2(colors[p], bg) + 1e-12
        {
            areas[head] += size[p];
        }
    }
    for a in areas.iter_mut() {
        *a = (*a).max(1);
    }
    Ok(areas)
}

/// Full pipeline: SLIC + seeded watershed fused by the MRF, then area ->
/// sigma. Also returns the segmentation for inspection.
pub fn mrf_scale_pipeline(
    img: &RgbImage,
    ann: &AnnotationSet,
    cfg: &MrfPipelineConfig,
) -> Result<(SigmaAssignment, Option<HeadSegmentation>)> {
    let (h, w) = ann.image_size;
    if img.height != h || img.width != w {
        return data_err(format!(
            "image {}x{} does not match annotations {h}x{w}",
            img.height, img.width
        ));
    }
    if ann.points.is_empty() {
        return Ok((
            SigmaAssignment {
                sigmas: Vec::new(),
                method_tag: SigmaMethod::Mrf,
            },
            None,
        ));
    }
    let k = cfg.slic_k.unwrap_or_else(|| default_slic_k(h, w));
    let sp = slic_segment(img, k, cfg.compactness, cfg.slic_iterations)?;
    let seeds = seeds_from_points(&ann.points, h, w)?;
    let (ws, _field) = seeded_watershed(&ann.points, h, w)?;
    let mut seg = mrf_refine(&sp, &ws, img, &seeds, &cfg.mrf)?;
    seg.areas = color_bounded_areas(&sp, &seg, img, &seeds)?;
    let sigmas = estimate_sigmas_mrf(&seg, cfg.kappa);
    Ok((sigmas, Some(seg)))
}
