//! Synthetic congested-scene generator: dark soft-edged head discs on a
//! light textured background, radii tied to image row by a linear
//! perspective ramp. Supplies known counts and true head sizes for
//! desk-scale verification of the scale estimators and the training
//! harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{AnnotationSet, PointAnnotation};
use crate::error::{data_err, Result};
use crate::imgbuf::RgbImage;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    /// (H, W) in pixels.
    pub image_size: (usize, usize),
    pub n_heads: usize,
    /// Base radius range (r_min, r_max) in px, before the perspective ramp.
    pub size_range: (f64, f64),
    /// Vertical ramp strength: radius multiplier scale(y) = (1-g) + g*y/(H-1).
    /// 0 disables perspective; must stay below 1 so every scale is positive.
    pub perspective_gain: f64,
    /// In [0,1]; drives background noise amplitude and distractor blob count.
    pub clutter_level: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            image_size: (64, 64),
            n_heads: 8,
            size_range: (2.0, 4.0),
            perspective_gain: 0.5,
            clutter_level: 0.3,
            rng_seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return data_err(format!("scene {h}x{w} too small; need at least 16x16"));
        }
        let (r_min, r_max) = self.size_range;
        if !(r_min >= 2.0) || !(r_max >= r_min) || !r_max.is_finite() {
            return data_err(format!(
                "size_range ({r_min}, {r_max}) needs 2 <= r_min <= r_max"
            ));
        }
        if !(0.0..1.0).contains(&self.perspective_gain) {
            return data_err(format!(
                "perspective_gain {} outside [0, 1)",
                self.perspective_gain
            ));
        }
        if !(0.0..=1.0).contains(&self.clutter_level) {
            return data_err(format!(
                "clutter_level {} outside [0, 1]",
                self.clutter_level
            ));
        }
        Ok(())
    }
}

/// Radius multiplier at row y.
fn perspective_scale(g: f64, y: f64, h: usize) -> f64 {
    (1.0 - g) + g * y / (h - 1) as f64
}

/// Inverse-CDF sample of the row fraction t in [0,1] with density
/// proportional to 1/scale(t)^2: a planar crowd under perspective is denser
/// exactly where heads are smaller. g = 0 reduces to uniform.
fn sample_row_fraction(g: f64, u: f64) -> f64 {
    u * (1.0 - g) / (1.0 - u * g)
}

/// Alpha-composite a disc with a 1 px linear edge ramp.
fn paint_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, rgb: [f64; 3]) {
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil().max(0.0) as usize).min(img.height - 1);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil().max(0.0) as usize).min(img.width - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let a = (r + 0.5 - d).clamp(0.0, 1.0);
            if a > 0.0 {
                let cur = img.get(y, x);
                img.set(
                    y,
                    x,
                    [
                        cur[0] + a * (rgb[0] - cur[0]),
                        cur[1] + a * (rgb[1] - cur[1]),
                        cur[2] + a * (rgb[2] - cur[2]),
                    ],
                );
            }
        }
    }
}

/// Render a scene: non-overlapping head discs (rejection-sampled placement
/// with a global attempt budget), light distractor blobs, textured
/// background. Returns the image, the head annotations, and the effective
/// per-head radii. Deterministic in every field of `spec`, seed included.
pub fn generate_synthetic_scene(
    spec: &SyntheticSceneSpec,
) -> Result<(RgbImage, AnnotationSet, Vec<f64>)> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let g = spec.perspective_gain;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(spec.n_heads);
    let mut radii: Vec<f64> = Vec::with_capacity(spec.n_heads);
    let budget = 500 * spec.n_heads + 500;
    let mut attempts = 0usize;
    while centers.len() < spec.n_heads {
        if attempts >= budget {
            return data_err(format!(
                "placed {} of {} heads after {budget} attempts; scene {h}x{w} too crowded for size_range {:?}",
                centers.len(),
                spec.n_heads,
                spec.size_range,
            ));
        }
        attempts += 1;
        let y = sample_row_fraction(g, rng.gen::<f64>()) * (h - 1) as f64;
        let x = rng.gen::<f64>() * (w - 1) as f64;
        let base = rng.gen_range(spec.size_range.0..=spec.size_range.1);
        let r = base * perspective_scale(g, y, h);
        let margin = (r + 1.0).max(2.0);
        if x < margin
            || x > (w - 1) as f64 - margin
            || y < margin
            || y > (h - 1) as f64 - margin
        {
            continue;
        }
        let clear = centers
            .iter()
            .zip(&radii)
            .all(|(&(cx, cy), &cr)| (x - cx).hypot(y - cy) >= r + cr + 1.0);
        if clear {
            centers.push((x, y));
            radii.push(r);
        }
    }

    let mut img = RgbImage::new(h, w);
    let noise_amp = 0.02 + 0.06 * spec.clutter_level;
    for y in 0..h {
        let ramp = 0.03 * y as f64 / (h - 1) as f64;
        for x in 0..w {
            let n = noise_amp * (rng.gen::<f64>() - 0.5);
            let l = 0.82 + ramp + n;
            img.set(y, x, [l + 0.02, l + 0.01, l - 0.01]);
        }
    }

    // Distractor blobs are decorative: best effort, silently dropped when
    // they cannot clear the heads.
    let n_blobs = (spec.clutter_level * (h * w) as f64 / 1024.0).round() as usize;
    for _ in 0..n_blobs {
        for _ in 0..50 {
            let by = rng.gen::<f64>() * (h - 1) as f64;
            let bx = rng.gen::<f64>() * (w - 1) as f64;
            let br = rng.gen_range(1.5..=3.0);
            let shade = 0.68 + 0.08 * rng.gen::<f64>();
            let clear = centers
                .iter()
                .zip(&radii)
                .all(|(&(cx, cy), &cr)| (bx - cx).hypot(by - cy) >= br + cr + 1.0);
            if clear {
                paint_disc(&mut img, bx, by, br, [shade, shade, shade - 0.02]);
                break;
            }
        }
    }

    for (&(cx, cy), &r) in centers.iter().zip(&radii) {
        let shade = 0.10 + 0.12 * rng.gen::<f64>();
        paint_disc(&mut img, cx, cy, r, [shade, shade + 0.02, shade + 0.05]);
    }

    let ann = AnnotationSet::new(
        centers
            .iter()
            .map(|&(x, y)| PointAnnotation { x, y })
            .collect(),
        (h, w),
    );
    Ok((img, ann, radii))
}

/// Pearson correlation; 0 when either side is degenerate.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// The sigma a perfect segmentation of a radius-r disc should induce under
/// the area mapping: kappa * sqrt(pi * r^2).
pub fn disc_sigma(kappa: f64, radius: f64) -> f64 {
    kappa * std::f64::consts::PI.sqrt() * radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale::{mrf_scale_pipeline, MrfPipelineConfig};

    #[test]
    fn same_spec_and_seed_give_identical_scenes() {
        let spec = SyntheticSceneSpec {
            n_heads: 12,
            rng_seed: 42,
            ..Default::default()
        };
        let (img1, ann1, r1) = generate_synthetic_scene(&spec).unwrap();
        let (img2, ann2, r2) = generate_synthetic_scene(&spec).unwrap();
        assert_eq!(img1, img2);
        assert_eq!(ann1, ann2);
        assert_eq!(r1, r2);
        let other = SyntheticSceneSpec {
            rng_seed: 43,
            ..spec
        };
        let (img3, _, _) = generate_synthetic_scene(&other).unwrap();
        assert_ne!(img1, img3);
    }

    #[test]
    fn zero_heads_is_background_only() {
        let spec = SyntheticSceneSpec {
            n_heads: 0,
            clutter_level: 0.0,
            ..Default::default()
        };
        let (img, ann, radii) = generate_synthetic_scene(&spec).unwrap();
        assert!(ann.points.is_empty());
        assert!(radii.is_empty());
        assert!(img.data.iter().all(|&v| v > 0.5), "no dark head pixels");
    }

    #[test]
    fn perspective_correlates_radius_with_row() {
        let spec = SyntheticSceneSpec {
            image_size: (96, 96),
            n_heads: 55,
            size_range: (2.0, 2.6),
            perspective_gain: 0.8,
            clutter_level: 0.2,
            rng_seed: 7,
        };
        let (_, ann, radii) = generate_synthetic_scene(&spec).unwrap();
        assert_eq!(ann.points.len(), 55);
        let ys: Vec<f64> = ann.points.iter().map(|p| p.y).collect();
        let r = pearson(&radii, &ys);
        assert!(r >= 0.9, "radius/row correlation {r}");
    }

    #[test]
    fn heads_are_dark_disjoint_and_inside_borders() {
        let spec = SyntheticSceneSpec {
            n_heads: 10,
            rng_seed: 3,
            ..Default::default()
        };
        let (img, ann, radii) = generate_synthetic_scene(&spec).unwrap();
        let (h, w) = spec.image_size;
        for (p, &r) in ann.points.iter().zip(&radii) {
            assert!(p.x >= 2.0 && p.x <= (w - 1) as f64 - 2.0);
            assert!(p.y >= 2.0 && p.y <= (h - 1) as f64 - 2.0);
            let px = img.get(p.y.round() as usize, p.x.round() as usize);
            assert!(px[0] < 0.4, "head center should be dark, got {px:?}");
            assert!(r >= 1.0 && r <= spec.size_range.1);
        }
        for i in 0..ann.points.len() {
            for j in 0..i {
                let (a, b) = (&ann.points[i], &ann.points[j]);
                let d = (a.x - b.x).hypot(a.y - b.y);
                assert!(d >= radii[i] + radii[j] + 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn overcrowded_spec_errors_at_the_retry_cap() {
        let spec = SyntheticSceneSpec {
            image_size: (32, 32),
            n_heads: 60,
            size_range: (8.0, 10.0),
            perspective_gain: 0.0,
            clutter_level: 0.0,
            rng_seed: 0,
        };
        let err = generate_synthetic_scene(&spec).unwrap_err().to_string();
        assert!(err.contains("attempts"), "{err}");
    }

    #[test]
    fn bad_specs_are_rejected() {
        let ok = SyntheticSceneSpec::default();
        assert!(generate_synthetic_scene(&SyntheticSceneSpec {
            size_range: (1.5, 3.0),
            ..ok.clone()
        })
        .is_err());
        assert!(generate_synthetic_scene(&SyntheticSceneSpec {
            size_range: (3.0, 2.0),
            ..ok.clone()
        })
        .is_err());
        assert!(generate_synthetic_scene(&SyntheticSceneSpec {
            perspective_gain: 1.0,
            ..ok.clone()
        })
        .is_err());
        assert!(generate_synthetic_scene(&SyntheticSceneSpec {
            clutter_level: 1.2,
            ..ok.clone()
        })
        .is_err());
        assert!(generate_synthetic_scene(&SyntheticSceneSpec {
            image_size: (8, 64),
            ..ok
        })
        .is_err());
    }

    #[test]
    fn pearson_hand_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
        let c = [-2.0, -4.0, -6.0, -8.0];
        assert!((pearson(&a, &c) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[5.0; 4]), 0.0);
        assert_eq!(pearson(&[], &[]), 0.0);
    }

    #[test]
    fn mrf_sigmas_track_radii_on_a_generated_scene() {
        let spec = SyntheticSceneSpec {
            image_size: (64, 64),
            n_heads: 20,
            size_range: (2.0, 3.0),
            perspective_gain: 0.6,
            clutter_level: 0.2,
            rng_seed: 11,
        };
        let (img, ann, radii) = generate_synthetic_scene(&spec).unwrap();
        let cfg = MrfPipelineConfig {
            slic_k: Some(64 * 64 / 25),
            ..Default::default()
        };
        let (s, _) = mrf_scale_pipeline(&img, &ann, &cfg).unwrap();
        assert_eq!(s.sigmas.len(), 20);
        let r = pearson(&s.sigmas, &radii);
        assert!(r > 0.3, "sigma/radius correlation too weak: {r}");
    }
}
