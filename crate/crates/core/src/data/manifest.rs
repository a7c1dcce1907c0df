//! On-disk datasets: a JSON manifest naming class folders plus an attribute CSV.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use super::{AttributeVector, ClassRecord, Dataset, Image};
use crate::error::{ArlError, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestClass {
    pub id: i64,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub classes: Vec<ManifestClass>,
    pub attributes_csv: PathBuf,
    pub image_size: usize,
}

fn default_version() -> u32 {
    1
}

fn read_attribute_csv(path: &Path) -> Result<(usize, BTreeMap<i64, Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.get(0).map(str::trim) != Some("class_id") {
        return Err(ArlError::Format(format!(
            "{}: first column must be `class_id`",
            path.display()
        )));
    }
    let dim = header.len() - 1;
    let mut rows = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ArlError::Format(format!("{}: {}", path.display(), e)))?;
        if rec.len() != dim + 1 {
            return Err(ArlError::Format(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                line + 2,
                rec.len(),
                dim + 1
            )));
        }
        let id: i64 = rec[0].trim().parse().map_err(|_| {
            ArlError::Format(format!("{}: bad class id `{}`", path.display(), &rec[0]))
        })?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| ArlError::Format(format!("{}: bad value `{}` for class {}", path.display(), v, id)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.insert(id, vals);
    }
    Ok((dim, rows))
}

/// Column-wise min-max scaling to `[0, 1]`; constant columns map to 0.
pub(crate) fn min_max_normalize(rows: &mut [Vec<f64>]) {
    let Some(dim) = rows.first().map(Vec::len) else { return };
    for k in 0..dim {
        let lo = rows.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
        for r in rows.iter_mut() {
            r[k] = if hi > lo { (r[k] - lo) / (hi - lo) } else { 0.0 };
        }
    }
}

fn load_image(path: &Path, size: usize) -> Result<Image> {
    let mut rgb = image::open(path)?.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    Ok(Image::from_rgb8(size, size, rgb.as_raw()))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Classes are split 60/20/20 in manifest order.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let (dim, mut rows) = read_attribute_csv(&root.join(&manifest.attributes_csv))?;
    let on_disk: Vec<i64> = manifest.classes.iter().map(|c| c.id).collect();
    if let Some(extra) = rows.keys().find(|id| !on_disk.contains(id)) {
        return Err(ArlError::Format(format!(
            "attribute CSV lists class {} which has no image folder in the manifest",
            extra
        )));
    }
    let mut attrs = Vec::with_capacity(manifest.classes.len());
    for c in &manifest.classes {
        attrs.push(rows.remove(&c.id).ok_or(ArlError::AttributeMissing(c.id))?);
    }
    if dim == 0 {
        return Err(ArlError::Format("attribute CSV has no attribute columns".into()));
    }
    min_max_normalize(&mut attrs);
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for (c, attribute) in manifest.classes.iter().zip(attrs) {
        let images = image_files(&root.join(&c.dir))?
            .iter()
            .map(|p| load_image(p, manifest.image_size))
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassRecord {
            id: c.id,
            attribute: AttributeVector(attribute),
            images,
        });
    }
    Dataset::new(classes)
}

fn write_png(path: &Path, im: &Image) -> Result<()> {
    let buf = RgbImage::from_raw(im.width as u32, im.height as u32, im.to_rgb8())
        .ok_or_else(|| ArlError::Format("image buffer size mismatch".into()))?;
    let file = fs::File::create(path)?;
    image::codecs::png::PngEncoder::new_with_quality(
        std::io::BufWriter::new(file),
        image::codecs::png::CompressionType::Default,
        image::codecs::png::FilterType::NoFilter,
    )
    .write_image(buf.as_raw(), buf.width(), buf.height(), image::ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Write PNG class folders, `attributes.csv` and `manifest.json` under `out`.
pub fn write_dataset(ds: &Dataset, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let mut manifest = Manifest {
        format_version: default_version(),
        classes: Vec::new(),
        attributes_csv: PathBuf::from("attributes.csv"),
        image_size: ds.image_shape().map(|s| s.1).unwrap_or(0),
    };
    let mut csv = String::from("class_id");
    for k in 0..ds.attribute_dim() {
        csv.push_str(&format!(",a_{}", k));
    }
    csv.push('\n');
    for class in ds.classes() {
        let dir = PathBuf::from("images").join(format!("class_{:03}", class.id));
        fs::create_dir_all(out.join(&dir))?;
        for (k, im) in class.images.iter().enumerate() {
            write_png(&out.join(&dir).join(format!("{:04}.png", k)), im)?;
        }
        csv.push_str(&class.id.to_string());
        for v in class.attribute.as_slice() {
            csv.push_str(&format!(",{}", v));
        }
        csv.push('\n');
        manifest.classes.push(ManifestClass { id: class.id, dir });
    }
    fs::write(out.join("attributes.csv"), csv)?;
    let path = out.join("manifest.json");
    let mut f = fs::File::create(&path)?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(path)
}
