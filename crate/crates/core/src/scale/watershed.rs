//! Exact Euclidean distance transform (two-pass parabolic envelope) and the
//! seeded watershed of that field: each pixel joins the basin of its nearest
//! seed, processed in (distance, row, column, seed id) order, so distance
//! ties go to the smallest seed id.
//!
//! With integer seed pixels the squared distances are integers represented
//! exactly in f64, so ties are exact and the labeling fully deterministic.

use crate::density::PointAnnotation;
use crate::error::{data_err, Result};

/// Squared Euclidean distance to the nearest seed, per pixel.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub d2: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

/// Per-pixel seed index (watershed catchment basins).
#[derive(Debug, Clone)]
pub struct WatershedLabels {
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
}

/// 1-D squared-distance transform of sampled function `f` (parabola lower
/// envelope). Infinite cells carry no parabola.
fn dt1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq == f64::INFINITY {
            continue;
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            z.push(f64::INFINITY);
            continue;
        }
        let sep = |p: usize, q: usize| -> f64 {
            ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64
        };
        let mut s = sep(*v.last().unwrap(), q);
        while v.len() > 1 && s <= z[v.len() - 1] {
            v.pop();
            z.pop();
            s = sep(*v.last().unwrap(), q);
        }
        if v.len() == 1 && s == f64::NEG_INFINITY {
            // Degenerate: q dominates everywhere (cannot happen with finite f).
            v[0] = q;
        } else {
            *z.last_mut().unwrap() = s;
            v.push(q);
            z.push(f64::INFINITY);
        }
    }
    if v.is_empty() {
        out[..n].fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance transform for a set of seed pixels.
pub fn distance_transform(seeds: &[(usize, usize)], h: usize, w: usize) -> Result<DistanceField> {
    if h == 0 || w == 0 {
        return data_err("empty domain");
    }
    if seeds.is_empty() {
        return data_err("distance transform needs at least one seed");
    }
    for &(y, x) in seeds {
        if y >= h || x >= w {
            return data_err(format!("seed ({y}, {x}) outside {h}x{w} grid"));
        }
    }
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    let mut v = Vec::new();
    let mut z = Vec::new();
    // Rows.
    let mut tmp = vec![0.0; w.max(h)];
    for y in 0..h {
        dt1d(&grid[y * w..(y + 1) * w].to_vec(), &mut tmp[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&tmp[..w]);
    }
    // Columns.
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        dt1d(&col, &mut tmp[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    Ok(DistanceField {
        d2: grid,
        height: h,
        width: w,
    })
}

/// Round head points to seed pixels, preserving order. Duplicate rounded
/// positions are perturbed +1 px in x (wrapping within the row).
pub fn seeds_from_points(
    points: &[PointAnnotation],
    h: usize,
    w: usize,
) -> Result<Vec<(usize, usize)>> {
    if h == 0 || w == 0 {
        return data_err("empty domain");
    }
    let mut occupied = std::collections::HashSet::new();
    let mut seeds = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return data_err(format!("point[{i}] not finite"));
        }
        let y = (p.y.round().max(0.0) as usize).min(h - 1);
        let mut x = (p.x.round().max(0.0) as usize).min(w - 1);
        let mut tries = 0;
        while occupied.contains(&(y, x)) {
            x = (x + 1) % w;
            tries += 1;
            if tries > w {
                return data_err(format!("row {y} cannot hold all duplicate seeds"));
            }
        }
        occupied.insert((y, x));
        seeds.push((y, x));
    }
    Ok(seeds)
}

/// Watershed of the distance field: each pixel joins its nearest seed's
/// basin; ties resolve to the smallest seed id.
pub fn seeded_watershed(
    points: &[PointAnnotation],
    h: usize,
    w: usize,
) -> Result<(WatershedLabels, DistanceField)> {
    let seeds = seeds_from_points(points, h, w)?;
    let field = distance_transform(&seeds, h, w)?;
    let labels = nearest_labels(&seeds, &field);
    Ok((
        WatershedLabels {
            labels,
            height: h,
            width: w,
        },
        field,
    ))
}

/// Labels from the exact field: seeds within the row window
/// |sy - y| <= isqrt(d2) are the only candidates for attaining d2, so the
/// scan finds the full argmin set and keeps the smallest id.
fn nearest_labels(seeds: &[(usize, usize)], field: &DistanceField) -> Vec<u32> {
    let (h, w) = (field.height, field.width);
    // (row, col, id) sorted by row, id ascending within a row.
    let mut by_row: Vec<(usize, usize, u32)> = seeds
        .iter()
        .enumerate()
        .map(|(id, &(y, x))| (y, x, id as u32))
        .collect();
    by_row.sort_by_key(|&(y, _, id)| (y, id));
    let mut labels = vec![u32::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d2 = field.d2[i];
            // d2 is an exact integer, so isqrt gives the exact row radius.
            let r = (d2 as u64).isqrt() as usize;
            let lo = by_row.partition_point(|&(sy, _, _)| sy < y.saturating_sub(r));
            let mut best = u32::MAX;
            for &(sy, sx, id) in &by_row[lo..] {
                if sy > y + r {
                    break;
                }
                if id >= best {
                    continue;
                }
                let dy = y as f64 - sy as f64;
                let dx = x as f64 - sx as f64;
                if dy * dy + dx * dx == d2 {
                    best = id;
                }
            }
            debug_assert!(best != u32::MAX);
            labels[i] = best;
        }
    }
    labels
}

/// Brute-force reference: per pixel, min squared distance and the full set of
/// seeds attaining it. Oracle for tests only; quadratic in grid size.
pub fn voronoi_brute_force(
    seeds: &[(usize, usize)],
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<Vec<u32>>) {
    let mut d2 = vec![f64::INFINITY; h * w];
    let mut arg: Vec<Vec<u32>> = vec![Vec::new(); h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (id, &(sy, sx)) in seeds.iter().enumerate() {
                let dy = y as f64 - sy as f64;
                let dx = x as f64 - sx as f64;
                let d = dy * dy + dx * dx;
                if d < d2[i] {
                    d2[i] = d;
                    arg[i].clear();
                    arg[i].push(id as u32);
                } else if d == d2[i] {
                    arg[i].push(id as u32);
                }
            }
        }
    }
    (d2, arg)
}
