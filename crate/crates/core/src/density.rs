//! Point annotations and Gaussian density map construction.
//!
//! A density map discretizes D(x) = sum_g N(x - x_g, sigma_g) on the pixel
//! grid; its integral (sum) is the crowd count. Scale-aware ground truth
//! splits heads into four per-image sigma quartile bands whose maps sum back
//! to the full map.

use crate::error::{data_err, numeric_err, Result};

/// Flip an (annotations, map) pair together, keeping them consistent.
pub fn flip_horizontal(ann: &AnnotationSet, map: &DensityMap) -> (AnnotationSet, DensityMap) {
    (ann.flip_horizontal(), map.flip_horizontal())
}

/// Head annotation in pixel coordinates (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
}

/// All annotations for one image. `image_size` is (height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub points: Vec<PointAnnotation>,
    pub image_size: (usize, usize),
}

impl AnnotationSet {
    pub fn new(points: Vec<PointAnnotation>, image_size: (usize, usize)) -> Self {
        AnnotationSet { points, image_size }
    }

    /// Mirror annotations left-right: x -> (W-1) - x.
    pub fn flip_horizontal(&self) -> AnnotationSet {
        let w = self.image_size.1 as f64 - 1.0;
        AnnotationSet {
            points: self
                .points
                .iter()
                .map(|p| PointAnnotation { x: w - p.x, y: p.y })
                .collect(),
            image_size: self.image_size,
        }
    }
}

/// Non-negative density raster. `stride` is the downsampling factor relative
/// to the annotated image resolution (1 = full resolution). Cell values are
/// per-cell mass, so the sum is the count at any stride.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub data: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, stride: usize) -> Self {
        DensityMap {
            data: vec![0.0; height * width],
            height,
            width,
            stride,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Integral of the map = estimated count.
    pub fn count(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mirror left-right (pure permutation of cells).
    pub fn flip_horizontal(&self) -> DensityMap {
        let mut out = self.clone();
        for y in 0..self.height {
            let row = &mut out.data[y * self.width..(y + 1) * self.width];
            row.reverse();
        }
        out
    }
}

/// Integral of a density map.
pub fn count(map: &DensityMap) -> f64 {
    map.count()
}

/// Per-head scale bands (1 = smallest sigma quartile .. 4 = largest) and the
/// per-band density maps Y1..Y4. The band maps sum to the full map.
#[derive(Debug, Clone)]
pub struct ScaleBandPartition {
    /// Band index in 1..=4 for each head, parallel to the annotation order.
    pub band_indices: Vec<usize>,
    /// Band density maps, index 0 = band 1 (smallest sigmas).
    pub band_maps: [DensityMap; 4],
}

fn check_render_inputs(ann: &AnnotationSet, sigmas: &[f64]) -> Result<()> {
    let (h, w) = ann.image_size;
    if h == 0 || w == 0 {
        return data_err(format!("image size {h}x{w} is degenerate"));
    }
    if sigmas.len() != ann.points.len() {
        return data_err(format!(
            "{} sigmas for {} points",
            sigmas.len(),
            ann.points.len()
        ));
    }
    for (i, &s) in sigmas.iter().enumerate() {
        if !s.is_finite() || s <= 0.0 {
            return data_err(format!("sigma[{i}] = {s} must be finite and > 0"));
        }
    }
    for (i, p) in ann.points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite())
            || p.x < 0.0
            || p.y < 0.0
            || p.x > (w - 1) as f64
            || p.y > (h - 1) as f64
        {
            return data_err(format!(
                "point[{i}] = ({}, {}) outside image {h}x{w}",
                p.x, p.y
            ));
        }
    }
    Ok(())
}

/// Render the Gaussian density map for `ann` with per-head `sigmas` on a
/// grid downscaled by `out_stride` (1 = full resolution; coarser grids use
/// scaled coordinates and sigma/out_stride kernels).
///
/// Each head contributes an isotropic Gaussian truncated at 4 sigma. With
/// `renormalize` the in-window (and in-image) mass of every head is scaled to
/// exactly 1, so the map integral equals the head count regardless of image
/// borders; without it the analytic normalization 1/(2 pi sigma^2) is used
/// and border/truncation mass is lost.
pub fn render_density(
    ann: &AnnotationSet,
    sigmas: &[f64],
    out_stride: usize,
    renormalize: bool,
) -> Result<DensityMap> {
    check_render_inputs(ann, sigmas)?;
    if out_stride == 0 {
        return data_err("out_stride must be >= 1");
    }
    let (h, w) = ann.image_size;
    let (oh, ow) = (h.div_ceil(out_stride), w.div_ceil(out_stride));
    let s = out_stride as f64;
    let mut map = DensityMap::zeros(oh, ow, out_stride);
    let mut window = Vec::new();
    for (p, &sigma) in ann.points.iter().zip(sigmas) {
        let (cx, cy, sig) = (p.x / s, p.y / s, sigma / s);
        let r = 4.0 * sig;
        let y_lo = (cy - r).floor().max(0.0) as usize;
        let y_hi = ((cy + r).ceil() as usize).min(oh - 1);
        let x_lo = (cx - r).floor().max(0.0) as usize;
        let x_hi = ((cx + r).ceil() as usize).min(ow - 1);
        let inv2s2 = 1.0 / (2.0 * sig * sig);
        window.clear();
        let mut mass = 0.0;
        for y in y_lo..=y_hi {
            let dy = y as f64 - cy;
            for x in x_lo..=x_hi {
                let dx = x as f64 - cx;
                let g = (-(dx * dx + dy * dy) * inv2s2).exp();
                window.push(g);
                mass += g;
            }
        }
        let scale = if renormalize {
            if mass <= 0.0 {
                return numeric_err(format!(
                    "zero window mass at ({}, {}), sigma {sigma}",
                    p.x, p.y
                ));
            }
            1.0 / mass
        } else {
            inv2s2 / std::f64::consts::PI
        };
        let mut k = 0;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                map.data[y * ow + x] += window[k] * scale;
                k += 1;
            }
        }
    }
    Ok(map)
}

/// Linear-interpolation quantile (the numpy default) of a sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Band index in 1..=4 for each sigma given quartile thresholds; values equal
/// to a boundary go to the lower band.
pub fn band_index(sigma: f64, q: &[f64; 3]) -> usize {
    if sigma <= q[0] {
        1
    } else if sigma <= q[1] {
        2
    } else if sigma <= q[2] {
        3
    } else {
        4
    }
}

/// Split heads into per-image sigma quartile bands and render one density map
/// per band. Band 1 holds the smallest sigmas. The four maps sum to the full
/// `render_density` map (same `renormalize` flag) up to rounding.
pub fn partition_scale_bands(
    ann: &AnnotationSet,
    sigmas: &[f64],
    renormalize: bool,
) -> Result<ScaleBandPartition> {
    check_render_inputs(ann, sigmas)?;
    let (h, w) = ann.image_size;
    if ann.points.is_empty() {
        return Ok(ScaleBandPartition {
            band_indices: Vec::new(),
            band_maps: std::array::from_fn(|_| DensityMap::zeros(h, w, 1)),
        });
    }
    let mut sorted = sigmas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = [
        quantile_sorted(&sorted, 0.25),
        quantile_sorted(&sorted, 0.50),
        quantile_sorted(&sorted, 0.75),
    ];
    let band_indices: Vec<usize> = sigmas.iter().map(|&s| band_index(s, &q)).collect();
    let mut band_maps = Vec::with_capacity(4);
    for band in 1..=4 {
        let mut pts = Vec::new();
        let mut sg = Vec::new();
        for (i, p) in ann.points.iter().enumerate() {
            if band_indices[i] == band {
                pts.push(*p);
                sg.push(sigmas[i]);
            }
        }
        let sub = AnnotationSet::new(pts, ann.image_size);
        band_maps.push(render_density(&sub, &sg, 1, renormalize)?);
    }
    let band_maps: [DensityMap; 4] = band_maps.try_into().unwrap();
    Ok(ScaleBandPartition {
        band_indices,
        band_maps,
    })
}

/// Sum-pool by `factor`, zero-padding the bottom/right edges when the
/// dimensions do not divide. Cell mass is preserved, so the count is too.
pub fn downsample_preserving_count(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 {
        return data_err("downsample factor must be >= 1");
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let oh = map.height.div_ceil(factor);
    let ow = map.width.div_ceil(factor);
    let mut out = DensityMap::zeros(oh, ow, map.stride * factor);
    for y in 0..map.height {
        let oy = y / factor;
        let row = &map.data[y * map.width..(y + 1) * map.width];
        let orow = &mut out.data[oy * ow..(oy + 1) * ow];
        for (x, &v) in row.iter().enumerate() {
            orow[x / factor] += v;
        }
    }
    Ok(out)
}
