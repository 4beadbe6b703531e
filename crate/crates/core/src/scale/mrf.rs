//! Potts-model MRF over superpixels, fusing SLIC regions with watershed
//! basins. Unary: disagreement with the watershed partition. Pairwise:
//! color-weighted label smoothness. Solved by ICM in fixed order, which
//! together with a strict improvement threshold makes the global energy
//! trace non-increasing.

use crate::error::{data_err, Result};
use crate::imgbuf::RgbImage;
use crate::scale::slic::SuperpixelMap;
use crate::scale::watershed::WatershedLabels;

#[derive(Debug, Clone)]
pub struct MrfConfig {
    /// Pairwise weight gamma; 0 reduces the model to unary argmax.
    pub gamma: f64,
    /// Color similarity bandwidth tau for w_pq = exp(-||c_p-c_q||^2 / tau^2).
    pub color_tau: f64,
    pub max_sweeps: usize,
}

impl Default for MrfConfig {
    fn default() -> Self {
        MrfConfig {
            gamma: 1.0,
            color_tau: 0.1,
            max_sweeps: 20,
        }
    }
}

/// Head assignment per superpixel plus derived per-head pixel areas and the
/// ICM energy trace (first entry = energy of the initial labeling).
#[derive(Debug, Clone)]
pub struct HeadSegmentation {
    /// Head id per superpixel.
    pub superpixel_labels: Vec<usize>,
    /// Pixel area per head, floored at 1 so sigma stays positive.
    pub areas: Vec<usize>,
    pub energy_trace: Vec<f64>,
    /// Segmented grid size, needed downstream for sigma clipping.
    pub height: usize,
    pub width: usize,
}

/// Minimum local-energy improvement for an ICM flip; keeps the recomputed
/// global trace non-increasing under f64 rounding.
const ICM_EPS: f64 = 1e-12;

/// Fuse superpixels with watershed basins. Labels = head ids (0..seeds.len());
/// `seeds` are the rounded head pixels, in head order, used to anchor their
/// containing superpixels. Pairwise colors are superpixel means over `img`.
pub fn mrf_refine(
    sp: &SuperpixelMap,
    ws: &WatershedLabels,
    img: &RgbImage,
    seeds: &[(usize, usize)],
    cfg: &MrfConfig,
) -> Result<HeadSegmentation> {
    if sp.height != ws.height || sp.width != ws.width {
        return data_err(format!(
            "superpixel map {}x{} vs watershed {}x{}",
            sp.height, sp.width, ws.height, ws.width
        ));
    }
    if img.height != sp.height || img.width != sp.width {
        return data_err(format!(
            "image {}x{} vs superpixel map {}x{}",
            img.height, img.width, sp.height, sp.width
        ));
    }
    let n_heads = seeds.len();
    if n_heads == 0 {
        return data_err("mrf needs at least one head");
    }
    if cfg.gamma < 0.0 || cfg.color_tau <= 0.0 {
        return data_err("gamma must be >= 0 and color_tau > 0");
    }
    let n_sp = sp.k;
    if n_sp.checked_mul(n_heads).map_or(true, |v| v > 16_000_000) {
        return data_err(format!("{n_sp} superpixels x {n_heads} heads too large"));
    }
    let (h, w) = (sp.height, sp.width);
    let hw = h * w;

    // Mean color per superpixel and overlap counts with watershed basins.
    let mut colors = vec![[0.0f64; 3]; n_sp];
    let mut overlap = vec![0u32; n_sp * n_heads];
    let mut size = vec![0u32; n_sp];
    for i in 0..hw {
        let p = sp.labels[i];
        let l = ws.labels[i] as usize;
        if l >= n_heads {
            return data_err(format!("watershed label {l} out of range for {n_heads} heads"));
        }
        overlap[p * n_heads + l] += 1;
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
    let unary =
        |p: usize, l: usize| -> f64 { 1.0 - overlap[p * n_heads + l] as f64 / size[p] as f64 };

    // Superpixel adjacency with color affinities.
    let mut edge_set = std::collections::BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let a = sp.labels[i];
            if x + 1 < w {
                let b = sp.labels[i + 1];
                if a != b {
                    edge_set.insert((a.min(b), a.max(b)));
                }
            }
            if y + 1 < h {
                let b = sp.labels[i + w];
                if a != b {
                    edge_set.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    let inv_tau2 = 1.0 / (cfg.color_tau * cfg.color_tau);
    let affinity = |a: usize, b: usize| -> f64 {
        let d2: f64 = (0..3).map(|c| (colors[a][c] - colors[b][c]).powi(2)).sum();
        (-d2 * inv_tau2).exp()
    };
    let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_sp];
    for &(a, b) in &edge_set {
        let wgt = affinity(a, b);
        neighbors[a].push((b, wgt));
        neighbors[b].push((a, wgt));
    }

    // Initial labels: unary argmax (smallest head id on ties). Superpixels
    // containing a seed are frozen to that head (first writer wins).
    let mut labels: Vec<usize> = (0..n_sp)
        .map(|p| {
            let mut best = 0usize;
            for l in 1..n_heads {
                if unary(p, l) < unary(p, best) {
                    best = l;
                }
            }
            best
        })
        .collect();
    let mut frozen = vec![usize::MAX; n_sp];
    for (head, &(sy, sx)) in seeds.iter().enumerate() {
        if sy >= h || sx >= w {
            return data_err(format!("seed ({sy}, {sx}) outside {h}x{w}"));
        }
        let p = sp.labels[sy * w + sx];
        if frozen[p] == usize::MAX {
            frozen[p] = head;
        }
    }
    for p in 0..n_sp {
        if frozen[p] != usize::MAX {
            labels[p] = frozen[p];
        }
    }

    let global_energy = |labels: &[usize]| -> f64 {
        let mut e = 0.0;
        for p in 0..n_sp {
            e += unary(p, labels[p]);
        }
        for &(a, b) in &edge_set {
            if labels[a] != labels[b] {
                e += cfg.gamma * affinity(a, b);
            }
        }
        e
    };

    let mut trace = vec![global_energy(&labels)];
    for _ in 0..cfg.max_sweeps {
        let mut flips = 0usize;
        for p in 0..n_sp {
            if frozen[p] != usize::MAX {
                continue;
            }
            let local = |l: usize| -> f64 {
                let mut e = unary(p, l);
                for &(q, wgt) in &neighbors[p] {
                    if labels[q] != l {
                        e += cfg.gamma * wgt;
                    }
                }
                e
            };
            let cur = local(labels[p]);
            let mut best_l = labels[p];
            let mut best_e = cur;
            for l in 0..n_heads {
                let e = local(l);
                if e < best_e - ICM_EPS {
                    best_e = e;
                    best_l = l;
                }
            }
            if best_l != labels[p] {
                labels[p] = best_l;
                flips += 1;
            }
        }
        trace.push(global_energy(&labels));
        if flips == 0 {
            break;
        }
    }

    let mut areas = vec![0usize; n_heads];
    for p in 0..n_sp {
        areas[labels[p]] += size[p] as usize;
    }
    for a in areas.iter_mut() {
        *a = (*a).max(1);
    }
    Ok(HeadSegmentation {
        superpixel_labels: labels,
        areas,
        energy_trace: trace,
        height: h,
        width: w,
    })
}
