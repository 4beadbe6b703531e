//! SLIC superpixels: local k-means over (color, position) with a compactness
//! weight, followed by a connectivity pass so every superpixel is one
//! 4-connected region.

use crate::error::{data_err, Result};
use crate::imgbuf::RgbImage;

/// Superpixel labeling. Labels are dense in 0..k.
#[derive(Debug, Clone)]
pub struct SuperpixelMap {
    pub labels: Vec<usize>,
    pub k: usize,
    /// Mean RGB per superpixel, in [0,1].
    pub mean_colors: Vec<[f64; 3]>,
    pub height: usize,
    pub width: usize,
}

struct Cluster {
    y: f64,
    x: f64,
    color: [f64; 3],
}

/// Segment `img` into (about) `k` superpixels. `compactness` trades color
/// against spatial regularity (10 is a reasonable default for [0,1] RGB; the
/// color term is scaled by 100 so the conventional range applies). The
/// returned `k` is the post-connectivity count, which can differ slightly
/// from the request.
pub fn slic_segment(
    img: &RgbImage,
    k: usize,
    compactness: f64,
    iterations: usize,
) -> Result<SuperpixelMap> {
    let (h, w) = (img.height, img.width);
    if h == 0 || w == 0 {
        return data_err("empty image");
    }
    if k == 0 || k > h * w {
        return data_err(format!("superpixel count {k} invalid for {h}x{w} image"));
    }
    if !(compactness > 0.0) || iterations == 0 {
        return data_err("compactness must be > 0 and iterations >= 1");
    }

    let s = ((h * w) as f64 / k as f64).sqrt();
    let n_cols = ((k as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, k);
    let n_rows = k.div_ceil(n_cols);
    let mut clusters = Vec::with_capacity(k);
    'outer: for r in 0..n_rows {
        for c in 0..n_cols {
            if clusters.len() == k {
                break 'outer;
            }
            // Pixel-center aligned so the initial grid mirrors cleanly.
            let cy = ((r as f64 + 0.5) * h as f64 / n_rows as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
            let cx = ((c as f64 + 0.5) * w as f64 / n_cols as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let color = img.get(cy.round() as usize, cx.round() as usize);
            clusters.push(Cluster {
                y: cy,
                x: cx,
                color,
            });
        }
    }

    let m2 = compactness * compactness;
    let inv_s2 = 1.0 / (s * s);
    let mut labels = vec![usize::MAX; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    let hw = h * w;

    for _ in 0..iterations {
        dist.fill(f64::INFINITY);
        labels.fill(usize::MAX);
        for (ci, cl) in clusters.iter().enumerate() {
            let y_lo = (cl.y - 2.0 * s).floor().max(0.0) as usize;
            let y_hi = ((cl.y + 2.0 * s).ceil() as usize).min(h - 1);
            let x_lo = (cl.x - 2.0 * s).floor().max(0.0) as usize;
            let x_hi = ((cl.x + 2.0 * s).ceil() as usize).min(w - 1);
            for y in y_lo..=y_hi {
                let dy = y as f64 - cl.y;
                for x in x_lo..=x_hi {
                    let i = y * w + x;
                    let dx = x as f64 - cl.x;
                    let dr = img.data[i] - cl.color[0];
                    let dg = img.data[hw + i] - cl.color[1];
                    let db = img.data[2 * hw + i] - cl.color[2];
                    let dc2 = dr * dr + dg * dg + db * db;
                    let d = 10000.0 * dc2 + m2 * (dy * dy + dx * dx) * inv_s2;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = ci;
                    }
                }
            }
        }
        // Pixels outside every search window: full scan.
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if labels[i] != usize::MAX {
                    continue;
                }
                for (ci, cl) in clusters.iter().enumerate() {
                    let dy = y as f64 - cl.y;
                    let dx = x as f64 - cl.x;
                    let dr = img.data[i] - cl.color[0];
                    let dg = img.data[hw + i] - cl.color[1];
                    let db = img.data[2 * hw + i] - cl.color[2];
                    let dc2 = dr * dr + dg * dg + db * db;
                    let d = 10000.0 * dc2 + m2 * (dy * dy + dx * dx) * inv_s2;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = ci;
                    }
                }
            }
        }
        // Recenter.
        let mut acc = vec![[0.0f64; 6]; clusters.len()]; // y, x, r, g, b, n
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let a = &mut acc[labels[i]];
                a[0] += y as f64;
                a[1] += x as f64;
                a[2] += img.data[i];
                a[3] += img.data[hw + i];
                a[4] += img.data[2 * hw + i];
                a[5] += 1.0;
            }
        }
        for (cl, a) in clusters.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                cl.y = a[0] / a[5];
                cl.x = a[1] / a[5];
                cl.color = [a[2] / a[5], a[3] / a[5], a[4] / a[5]];
            }
        }
    }

    let labels = enforce_connectivity(&labels, h, w);
    let k_out = labels.iter().copied().max().unwrap() + 1;
    let mut mean_colors = vec![[0.0f64; 3]; k_out];
    let mut counts = vec![0usize; k_out];
    for i in 0..hw {
        let l = labels[i];
        mean_colors[l][0] += img.data[i];
        mean_colors[l][1] += img.data[hw + i];
        mean_colors[l][2] += img.data[2 * hw + i];
        counts[l] += 1;
    }
    for (mc, &n) in mean_colors.iter_mut().zip(&counts) {
        for ch in mc.iter_mut() {
            *ch /= n as f64;
        }
    }
    Ok(SuperpixelMap {
        labels,
        k: k_out,
        mean_colors,
        height: h,
        width: w,
    })
}

/// Keep each label's largest 4-connected component; orphan components adopt a
/// neighboring kept label (deterministic sweeps). Returns dense labels 0..k'.
fn enforce_connectivity(labels: &[usize], h: usize, w: usize) -> Vec<usize> {
    let n = h * w;
    let mut comp = vec![usize::MAX; n];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        let lab = labels[start];
        comp_label.push(lab);
        comp_size.push(0usize);
        stack.push(start);
        comp[start] = id;
        while let Some(i) = stack.pop() {
            comp_size[id] += 1;
            let (y, x) = (i / w, i % w);
            let mut try_push = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == lab {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if y > 0 {
                try_push(i - w);
            }
            if y + 1 < h {
                try_push(i + w);
            }
            if x > 0 {
                try_push(i - 1);
            }
            if x + 1 < w {
                try_push(i + 1);
            }
        }
    }
    // Largest component per label wins (first on size ties, by component id).
    let mut best: Vec<Option<usize>> = vec![None; labels.iter().copied().max().unwrap() + 1];
    for id in 0..comp_label.len() {
        let lab = comp_label[id];
        match best[lab] {
            Some(b) if comp_size[b] >= comp_size[id] => {}
            _ => best[lab] = Some(id),
        }
    }
    let mut final_of_comp = vec![usize::MAX; comp_label.len()];
    let mut next = 0usize;
    for id in 0..comp_label.len() {
        if best[comp_label[id]] == Some(id) {
            final_of_comp[id] = next;
            next += 1;
        }
    }
    let mut out: Vec<usize> = (0..n).map(|i| final_of_comp[comp[i]]).collect();
    // Orphans adopt a finalized neighbor; sweep until stable.
    loop {
        let mut changed = false;
        for i in 0..n {
            if out[i] != usize::MAX {
                continue;
            }
            let (y, x) = (i / w, i % w);
            let neighbors = [
                (y > 0).then(|| i - w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y + 1 < h).then(|| i + w),
            ];
            for j in neighbors.into_iter().flatten() {
                if out[j] != usize::MAX {
                    out[i] = out[j];
                    changed = true;
                    break;
                }
            }
        }
        if out.iter().all(|&l| l != usize::MAX) {
            break;
        }
        // A fully orphaned image cannot happen: at least one kept component
        // exists, and the grid is connected, so sweeps always make progress.
        debug_assert!(changed);
    }
    out
}
