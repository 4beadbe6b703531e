//! On-disk formats: point annotations, density rasters (raw f32 payload +
//! JSON sidecar), sigma assignments, dataset manifests, PNG images,
//! training history, and ablation tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::density::{AnnotationSet, DensityMap, PointAnnotation};
use crate::error::{data_err, Result};
use crate::imgbuf::RgbImage;
use crate::scale::{SigmaAssignment, SigmaMethod};
use crate::training::{AblationRow, EpochRecord};

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    /// [H, W].
    image_size: [usize; 2],
    /// [x, y] pairs in file order.
    points: Vec<[f64; 2]>,
}

/// Read a point-annotation JSON file. Out-of-bounds points are clamped to
/// the image border; the second return value counts clamped points.
pub fn load_annotations(path: &Path) -> Result<(AnnotationSet, usize)> {
    let text = fs::read_to_string(path)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", path.display())))?;
    let file: AnnotationFile = serde_json::from_str(&text)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", path.display())))?;
    let [h, w] = file.image_size;
    if h == 0 || w == 0 {
        return data_err(format!("{}: image_size {h}x{w}", path.display()));
    }
    let mut clamped = 0usize;
    let mut points = Vec::with_capacity(file.points.len());
    for (i, &[x, y]) in file.points.iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return data_err(format!(
                "{}: point {i} has non-finite coordinate ({x}, {y})",
                path.display()
            ));
        }
        let cx = x.clamp(0.0, (w - 1) as f64);
        let cy = y.clamp(0.0, (h - 1) as f64);
        if cx != x || cy != y {
            clamped += 1;
        }
        points.push(PointAnnotation { x: cx, y: cy });
    }
    Ok((AnnotationSet::new(points, (h, w)), clamped))
}

pub fn save_annotations(path: &Path, ann: &AnnotationSet) -> Result<()> {
    let file = AnnotationFile {
        image_size: [ann.image_size.0, ann.image_size.1],
        points: ann.points.iter().map(|p| [p.x, p.y]).collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DensitySidecar {
    height: usize,
    width: usize,
    stride: usize,
}

fn append_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Write `<base>.bin` (row-major little-endian f32) plus `<base>.json`
/// (the {height, width, stride} sidecar). The suffixes are appended, so a
/// dotted `base` like `scene.band1` stays distinct from `scene.density`.
pub fn save_density(base: &Path, map: &DensityMap) -> Result<()> {
    let mut payload = Vec::with_capacity(map.data.len() * 4);
    for &v in &map.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(append_ext(base, "bin"), payload)?;
    let sidecar = DensitySidecar {
        height: map.height,
        width: map.width,
        stride: map.stride,
    };
    fs::write(
        append_ext(base, "json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Read a density raster from its `.bin` path; the sidecar path is derived
/// by swapping the extension.
pub fn load_density(bin_path: &Path) -> Result<DensityMap> {
    let sidecar_path = bin_path.with_extension("json");
    let text = fs::read_to_string(&sidecar_path)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", sidecar_path.display())))?;
    let sc: DensitySidecar = serde_json::from_str(&text)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", sidecar_path.display())))?;
    if sc.height == 0 || sc.width == 0 || sc.stride == 0 {
        return data_err(format!(
            "{}: degenerate dims {}x{} stride {}",
            sidecar_path.display(),
            sc.height,
            sc.width,
            sc.stride
        ));
    }
    let payload = fs::read(bin_path)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", bin_path.display())))?;
    let expect = sc.height * sc.width * 4;
    if payload.len() != expect {
        return data_err(format!(
            "{}: payload is {} bytes, sidecar implies {expect}",
            bin_path.display(),
            payload.len()
        ));
    }
    let mut data = Vec::with_capacity(sc.height * sc.width);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() || v < 0.0 {
            return data_err(format!(
                "{}: density value {v} is not a finite non-negative number",
                bin_path.display()
            ));
        }
        data.push(v);
    }
    Ok(DensityMap {
        data,
        height: sc.height,
        width: sc.width,
        stride: sc.stride,
    })
}

#[derive(Serialize, Deserialize)]
struct SigmaFile {
    method: String,
    sigmas: Vec<f64>,
}

pub fn save_sigmas(path: &Path, s: &SigmaAssignment) -> Result<()> {
    let file = SigmaFile {
        method: s.method_tag.as_str().to_string(),
        sigmas: s.sigmas.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_sigmas(path: &Path) -> Result<SigmaAssignment> {
    let text = fs::read_to_string(path)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", path.display())))?;
    let file: SigmaFile = serde_json::from_str(&text)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", path.display())))?;
    let method: SigmaMethod = file.method.parse()?;
    for (i, s) in file.sigmas.iter().enumerate() {
        if !(*s > 0.0) || !s.is_finite() {
            return data_err(format!("{}: sigma {i} = {s}", path.display()));
        }
    }
    Ok(SigmaAssignment {
        sigmas: file.sigmas,
        method_tag: method,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub annotations: String,
}

/// A dataset split. On disk the entry paths are relative to the manifest's
/// directory; `load_manifest` rewrites them to full paths, sorts entries
/// lexicographically, and verifies every referenced file exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    if !SPLITS.contains(&manifest.split.as_str()) {
        return data_err(format!(
            "split '{}' is not one of {SPLITS:?}",
            manifest.split
        ));
    }
    let mut sorted = manifest.clone();
    sorted
        .entries
        .sort_by(|a, b| (&a.image, &a.annotations).cmp(&(&b.image, &b.annotations)));
    fs::write(path, serde_json::to_string_pretty(&sorted)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", path.display())))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", path.display())))?;
    if !SPLITS.contains(&manifest.split.as_str()) {
        return data_err(format!(
            "{}: split '{}' is not one of {SPLITS:?}",
            path.display(),
            manifest.split
        ));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    for e in manifest.entries.iter_mut() {
        let img = join_relative(dir, &e.image);
        let ann = join_relative(dir, &e.annotations);
        for p in [&img, &ann] {
            if !p.is_file() {
                return data_err(format!("{}: missing file {}", path.display(), p.display()));
            }
        }
        e.image = img.to_string_lossy().into_owned();
        e.annotations = ann.to_string_lossy().into_owned();
    }
    manifest
        .entries
        .sort_by(|a, b| (&a.image, &a.annotations).cmp(&(&b.image, &b.annotations)));
    Ok(manifest)
}

fn join_relative(dir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dir.join(path)
    }
}

/// Write an 8-bit RGB raster; the format follows the file extension (PNG is
/// the built-in one).
pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for v in img.get(y, x) {
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer sized from dimensions");
    buf.save(path)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let decoded = image::open(path)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return data_err(format!("{}: empty image", path.display()));
    }
    let mut img = RgbImage::new(h, w);
    for (x, y, px) in decoded.enumerate_pixels() {
        img.set(
            y as usize,
            x as usize,
            [
                px.0[0] as f64 / 255.0,
                px.0[1] as f64 / 255.0,
                px.0[2] as f64 / 255.0,
            ],
        );
    }
    Ok(img)
}

/// One JSON object per line.
pub fn save_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| crate::error::CrowdError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpochRecord = serde_json::from_str(line)
            .map_err(|e| crate::error::CrowdError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("config,seed,mae,mse\n");
    for r in rows {
        if r.config.contains(',') {
            return data_err(format!("config name '{}' contains a comma", r.config));
        }
        out.push_str(&format!("{},{},{},{}\n", r.config, r.seed, r.mae, r.mse));
    }
    fs::write(path, out)?;
    Ok(())
}
