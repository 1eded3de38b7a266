//! On-disk bundle layout.
//!
//! A bundle is a directory holding `manifest.json` and one raw array file
//! per array. Array files start with a 16-byte little-endian header
//!
//! ```text
//! offset  size  field
//!      0     4  magic "GIDB"
//!      4     1  version (1)
//!      5     1  channel count
//!      6     2  reserved, 0
//!      8     4  height
//!     12     4  width
//! ```
//!
//! followed by `height * width * channels` little-endian `f32` values,
//! row-major with channels interleaved.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use super::{Camera, IntrinsicMap, Modality, SceneBundle, ViewFrame};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const ARRAY_MAGIC: [u8; 4] = *b"GIDB";
pub const ARRAY_VERSION: u8 = 1;
const HEADER_LEN: usize = 16;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    scene_id: String,
    seed: u64,
    views: Vec<ViewManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewManifest {
    width: usize,
    height: usize,
    /// Row-major 3x3.
    intrinsics: Vec<f64>,
    /// Row-major 4x4, world to camera.
    extrinsics: Vec<f64>,
    modalities: Vec<Modality>,
    files: ViewFiles,
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewFiles {
    points: String,
    depth: String,
    confidence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_confidence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rgb: Option<String>,
    predictions: BTreeMap<Modality, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    gt: BTreeMap<Modality, String>,
}

/// Encodes a raster as a GIDB byte buffer.
pub fn encode_array(a: &Raster<f32>) -> Result<Vec<u8>> {
    let channels = u8::try_from(a.channels())
        .map_err(|_| Error::ShapeMismatch(format!("{} channels exceed the format limit", a.channels())))?;
    let height = u32::try_from(a.height()).map_err(|_| Error::ShapeMismatch("height overflows u32".into()))?;
    let width = u32::try_from(a.width()).map_err(|_| Error::ShapeMismatch("width overflows u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * a.data().len());
    out.extend_from_slice(&ARRAY_MAGIC);
    out.push(ARRAY_VERSION);
    out.push(channels);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    for v in a.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_array(bytes: &[u8], path: &Path) -> Result<Raster<f32>> {
    let bad = |reason: String| Error::ArrayFormat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[0..4] != ARRAY_MAGIC {
        return Err(bad("bad magic".into()));
    }
    if bytes[4] != ARRAY_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let channels = bytes[5] as usize;
    if u16::from_le_bytes([bytes[6], bytes[7]]) != 0 {
        return Err(bad("reserved field is not zero".into()));
    }
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let count = height * width * channels;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * count {
        return Err(bad(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            4 * count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Raster::new(height, width, channels, data).map_err(|e| bad(e.to_string()))
}

pub fn write_array(path: &Path, a: &Raster<f32>) -> Result<()> {
    fs::write(path, encode_array(a)?).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<Raster<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes, path)
}

fn view_file(index: usize, name: &str) -> String {
    format!("view{index:03}_{name}.gidb")
}

/// Writes `bundle` under `dir`, creating it if needed. Output is a pure
/// function of the bundle contents.
pub fn save_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut views = Vec::with_capacity(bundle.views.len());
    for (i, view) in bundle.views.iter().enumerate() {
        let put = |name: &str, a: &Raster<f32>| -> Result<String> {
            let file = view_file(i, name);
            write_array(&dir.join(&file), a)?;
            Ok(file)
        };
        let points = put("points", &view.points)?;
        let depth = put("depth", &view.depth)?;
        let confidence = put("confidence", &view.confidence)?;
        let depth_confidence = view
            .depth_confidence
            .as_ref()
            .map(|a| put("depth_confidence", a))
            .transpose()?;
        let rgb = view.rgb.as_ref().map(|a| put("rgb", a)).transpose()?;
        let mut predictions = BTreeMap::new();
        for (m, map) in &view.predictions {
            predictions.insert(*m, put(&format!("pred_{m}"), map.raster())?);
        }
        let mut gt = BTreeMap::new();
        for (m, map) in &view.gt {
            gt.insert(*m, put(&format!("gt_{m}"), map.raster())?);
        }
        views.push(ViewManifest {
            width: view.camera.width,
            height: view.camera.height,
            intrinsics: row_major(view.camera.intrinsics.as_slice(), 3),
            extrinsics: row_major(view.camera.extrinsics.as_slice(), 4),
            modalities: view.predictions.keys().copied().collect(),
            files: ViewFiles {
                points,
                depth,
                confidence,
                depth_confidence,
                rgb,
                predictions,
                gt,
            },
        });
    }
    let manifest = Manifest {
        scene_id: bundle.scene_id.clone(),
        seed: bundle.seed,
        views,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    text.push('\n');
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// nalgebra stores column-major; the manifest is row-major.
fn row_major(col_major: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|k| col_major[(k % n) * n + k / n]).collect()
}

pub fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let mut views = Vec::with_capacity(manifest.views.len());
    for (i, vm) in manifest.views.into_iter().enumerate() {
        if vm.intrinsics.len() != 9 || vm.extrinsics.len() != 16 {
            return Err(Error::InvalidCamera {
                view: i,
                reason: format!(
                    "expected 9 intrinsics and 16 extrinsics entries, got {} and {}",
                    vm.intrinsics.len(),
                    vm.extrinsics.len()
                ),
            });
        }
        let camera = Camera::new(
            Matrix3::from_row_slice(&vm.intrinsics),
            Matrix4::from_row_slice(&vm.extrinsics),
            vm.width,
            vm.height,
        );
        let read = |file: &str| read_array(&dir.join(file));
        let listed: Vec<Modality> = vm.files.predictions.keys().copied().collect();
        let mut declared = vm.modalities.clone();
        declared.sort();
        if declared != listed {
            return Err(Error::Manifest(format!(
                "view {i}: modalities {:?} do not match prediction files {listed:?}",
                vm.modalities
            )));
        }
        let mut predictions = BTreeMap::new();
        for (m, file) in &vm.files.predictions {
            predictions.insert(*m, load_map(i, "prediction", *m, read(file)?)?);
        }
        let mut gt = BTreeMap::new();
        for (m, file) in &vm.files.gt {
            gt.insert(*m, load_map(i, "gt", *m, read(file)?)?);
        }
        views.push(ViewFrame {
            camera,
            points: read(&vm.files.points)?,
            depth: read(&vm.files.depth)?,
            confidence: read(&vm.files.confidence)?,
            depth_confidence: vm.files.depth_confidence.as_deref().map(read).transpose()?,
            predictions,
            gt,
            rgb: vm.files.rgb.as_deref().map(read).transpose()?,
        });
    }
    let bundle = SceneBundle {
        scene_id: manifest.scene_id,
        seed: manifest.seed,
        views,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn load_map(view: usize, kind: &str, m: Modality, data: Raster<f32>) -> Result<IntrinsicMap> {
    let name = format!("{kind}/{m}");
    if data.channels() != m.channels() {
        return Err(Error::invalid_array(
            view,
            name,
            format!("expected {} channels, got {}", m.channels(), data.channels()),
        ));
    }
    if let Some(i) = data.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid_array(view, name, format!("non-finite value at element {i}")));
    }
    IntrinsicMap::new(m, data).map_err(|e| Error::invalid_array(view, name, e.to_string()))
}
