//! Raster container, band normalization, NDWI, and patch geometry.
//!
//! Rasters live in `.mbr` files: magic `MBR1`, u32 LE width, u32 LE height,
//! u16 LE band count, u16 LE name-block length, comma-separated band names
//! as UTF-8, then the pixel payload as little-endian f32, band-sequential
//! and row-major within each band. Labels are a single `LABEL` band with
//! values 0, 1, or 255 for pixels without ground truth.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::loss::NODATA_LABEL;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RASTER_MAGIC: [u8; 4] = *b"MBR1";
/// Side length of every training/evaluation patch.
pub const PATCH: usize = 128;
/// Dense training stride (overlapping patches).
pub const TRAIN_STRIDE: usize = 64;
/// Evaluation stride (disjoint tiling).
pub const EVAL_STRIDE: usize = 128;
/// Band name carrying ground truth in label rasters.
pub const LABEL_BAND: &str = "LABEL";

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: u32,
    height: u32,
    band_names: Vec<String>,
    /// Band-sequential, row-major within each band.
    data: Vec<f32>,
}

impl Raster {
    pub fn new(
        width: u32,
        height: u32,
        band_names: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if band_names.is_empty() || band_names.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidConfig(format!(
                "raster must have between 1 and {} bands, got {}",
                u16::MAX,
                band_names.len()
            )));
        }
        if band_names.iter().any(|n| n.is_empty() || n.contains(',')) {
            return Err(Error::InvalidConfig(
                "band names must be nonempty and comma-free".into(),
            ));
        }
        let expected = width as usize * height as usize * band_names.len();
        if data.len() != expected {
            return Err(Error::DataLength {
                op: "Raster::new",
                expected,
                got: data.len(),
            });
        }
        Ok(Raster {
            width,
            height,
            band_names,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    pub fn bands(&self) -> usize {
        self.band_names.len()
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn band_index(&self, name: &str) -> Result<usize> {
        self.band_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::BandNotFound { band: name.into() })
    }

    pub fn band(&self, idx: usize) -> &[f32] {
        let plane = self.width() * self.height();
        &self.data[idx * plane..(idx + 1) * plane]
    }

    pub fn at(&self, band: usize, row: usize, col: usize) -> f32 {
        self.band(band)[row * self.width() + col]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

pub fn save_raster(raster: &Raster, path: &Path) -> Result<()> {
    let names = raster.band_names.join(",");
    if names.len() > usize::from(u16::MAX) {
        return Err(Error::InvalidConfig(
            "band name block exceeds the u16 length field".into(),
        ));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&RASTER_MAGIC)?;
    out.write_all(&raster.width.to_le_bytes())?;
    out.write_all(&raster.height.to_le_bytes())?;
    out.write_all(&(raster.bands() as u16).to_le_bytes())?;
    out.write_all(&(names.len() as u16).to_le_bytes())?;
    out.write_all(names.as_bytes())?;
    let mut buf = Vec::with_capacity(4 * raster.data.len());
    for v in &raster.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path)?;
    let truncated = || Error::Truncated {
        path: path.to_path_buf(),
    };
    if bytes.len() < 16 {
        return Err(truncated());
    }
    if bytes[0..4] != RASTER_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(&RASTER_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let bands = u16::from_le_bytes(bytes[12..14].try_into().unwrap());
    let names_len = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
    let payload_start = 16 + names_len;
    if payload_start > bytes.len() {
        return Err(truncated());
    }
    let names_text =
        std::str::from_utf8(&bytes[16..payload_start]).map_err(|_| Error::ManifestParse {
            path: path.to_path_buf(),
            line: "<band names are not valid UTF-8>".into(),
        })?;
    let band_names: Vec<String> = names_text.split(',').map(String::from).collect();
    if band_names.len() != usize::from(bands) {
        return Err(Error::ManifestParse {
            path: path.to_path_buf(),
            line: format!("{bands} bands declared but names are {names_text:?}"),
        });
    }

    let pixel_count = (width as u64)
        .checked_mul(height as u64)
        .and_then(|p| p.checked_mul(bands as u64))
        .and_then(|p| p.checked_mul(4))
        .ok_or(Error::DimensionOverflow {
            path: path.to_path_buf(),
        })?;
    if pixel_count > usize::MAX as u64 {
        return Err(Error::DimensionOverflow {
            path: path.to_path_buf(),
        });
    }
    let expected = pixel_count as usize;
    let got = bytes.len() - payload_start;
    if got < expected {
        return Err(truncated());
    }
    if got > expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected: expected as u64,
            got: got as u64,
        });
    }
    let data: Vec<f32> = bytes[payload_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Raster::new(width, height, band_names, data)
}

/// Valid top-left offsets along one axis: `{0, stride, 2*stride, ...}` while
/// the whole patch stays inside. No padding, no partial patches.
pub fn patch_offsets(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(stride > 0, "stride must be positive");
    (0..)
        .map(|i| i * stride)
        .take_while(|off| off + patch <= dim)
        .collect()
}

/// All (row, col) patch origins for a raster of the given size.
pub fn patch_grid(
    width: usize,
    height: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    if width < patch || height < patch {
        return Err(Error::InvalidConfig(format!(
            "raster {width}x{height} is smaller than the {patch}x{patch} patch"
        )));
    }
    let rows = patch_offsets(height, patch, stride);
    let cols = patch_offsets(width, patch, stride);
    let mut grid = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            grid.push((r, c));
        }
    }
    Ok(grid)
}

/// Keep a patch unless strictly more than half of its label pixels are
/// nodata.
pub fn keep_patch(label_patch: &[f32]) -> bool {
    let invalid = label_patch
        .iter()
        .filter(|&&v| f64::from(v) == NODATA_LABEL)
        .count();
    2 * invalid <= label_patch.len()
}

/// Divide by `scale` and clamp into [0, 1].
pub fn normalize_bands<F: Scalar>(raster: &Raster, scale: f64) -> Result<Tensor<F>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "normalization scale must be positive, got {scale}"
        )));
    }
    let data = raster
        .data
        .iter()
        .map(|&v| F::from_f64((f64::from(v) / scale).clamp(0.0, 1.0)))
        .collect();
    Tensor::from_vec(
        [1, raster.bands(), raster.height(), raster.width()],
        data,
    )
}

/// Normalized difference water index, `(G - NIR) / (G + NIR)`, with the 0/0
/// case defined as 0. Water reflects green but absorbs near-infrared, so
/// water pixels push toward +1.
pub fn ndwi<F: Scalar>(green: &Tensor<F>, nir: &Tensor<F>) -> Result<Tensor<F>> {
    if green.shape() != nir.shape() {
        return Err(Error::ShapeMismatch {
            op: "ndwi",
            left: format!("{:?}", green.shape()),
            right: format!("{:?}", nir.shape()),
        });
    }
    let data = green
        .data()
        .iter()
        .zip(nir.data())
        .map(|(&g, &n)| {
            let (g, n) = (g.as_f64(), n.as_f64());
            let denom = g + n;
            if denom == 0.0 {
                F::zero()
            } else {
                F::from_f64((g - n) / denom)
            }
        })
        .collect();
    Tensor::from_vec(green.shape(), data)
}

/// An image raster with its label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub image: Raster,
    pub label: Raster,
}

impl ScenePair {
    pub fn validate(&self) -> Result<()> {
        if self.image.width != self.label.width || self.image.height != self.label.height {
            return Err(Error::ShapeMismatch {
                op: "ScenePair",
                left: format!("{}x{}", self.image.width, self.image.height),
                right: format!("{}x{}", self.label.width, self.label.height),
            });
        }
        self.label.band_index(LABEL_BAND)?;
        Ok(())
    }
}

pub fn scene_file_names(index: usize) -> (String, String) {
    (
        format!("scene_{index:03}.mbr"),
        format!("scene_{index:03}_label.mbr"),
    )
}

pub fn save_scene(dir: &Path, index: usize, scene: &ScenePair) -> Result<()> {
    let (img, lbl) = scene_file_names(index);
    save_raster(&scene.image, &dir.join(img))?;
    save_raster(&scene.label, &dir.join(lbl))
}

/// Load every `scene_*.mbr` / `scene_*_label.mbr` pair in a directory,
/// ordered by file name so directory iteration order cannot leak in.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<ScenePair>> {
    let mut image_paths: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if name.ends_with(".mbr") && !name.ends_with("_label.mbr") {
            image_paths.push(path);
        }
    }
    image_paths.sort();
    let mut scenes = Vec::with_capacity(image_paths.len());
    for img_path in image_paths {
        let stem = img_path
            .file_stem()
            .and_then(|s| s.to_str())
            .expect("checked utf-8 above");
        let label_path = img_path.with_file_name(format!("{stem}_label.mbr"));
        let pair = ScenePair {
            image: load_raster(&img_path)?,
            label: load_raster(&label_path)?,
        };
        pair.validate()?;
        scenes.push(pair);
    }
    Ok(scenes)
}

/// One patch origin inside one scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRef {
    pub scene: usize,
    pub row: usize,
    pub col: usize,
}

/// Patch geometry over a scene list.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch: usize,
    pub stride: usize,
    pub refs: Vec<PatchRef>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

/// Enumerate patches over all scenes; with `filter` on, drop patches whose
/// label window is mostly nodata.
pub fn build_patch_set(
    scenes: &[ScenePair],
    patch: usize,
    stride: usize,
    filter: bool,
) -> Result<PatchSet> {
    let mut refs = Vec::new();
    for (scene_idx, scene) in scenes.iter().enumerate() {
        scene.validate()?;
        let label_band = scene.label.band_index(LABEL_BAND)?;
        let grid = patch_grid(scene.image.width(), scene.image.height(), patch, stride)?;
        for (row, col) in grid {
            if filter {
                let window = copy_window(&scene.label, label_band, row, col, patch);
                if !keep_patch(&window) {
                    continue;
                }
            }
            refs.push(PatchRef {
                scene: scene_idx,
                row,
                col,
            });
        }
    }
    Ok(PatchSet {
        patch,
        stride,
        refs,
    })
}

fn copy_window(raster: &Raster, band: usize, row: usize, col: usize, patch: usize) -> Vec<f32> {
    let plane = raster.band(band);
    let w = raster.width();
    let mut out = Vec::with_capacity(patch * patch);
    for r in row..row + patch {
        out.extend_from_slice(&plane[r * w + col..r * w + col + patch]);
    }
    out
}

/// Stack the selected patches into a (n, bands, patch, patch) input tensor,
/// normalized by `scale`. Band order follows `bands`, resolved per scene.
pub fn gather_inputs<F: Scalar>(
    scenes: &[ScenePair],
    set: &PatchSet,
    indices: &[usize],
    bands: &[String],
    scale: f64,
) -> Result<Tensor<F>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "normalization scale must be positive, got {scale}"
        )));
    }
    let p = set.patch;
    let mut data = Vec::with_capacity(indices.len() * bands.len() * p * p);
    for &idx in indices {
        let r = set.refs[idx];
        let scene = &scenes[r.scene];
        for band in bands {
            let bi = scene.image.band_index(band)?;
            for v in copy_window(&scene.image, bi, r.row, r.col, p) {
                data.push(F::from_f64((f64::from(v) / scale).clamp(0.0, 1.0)));
            }
        }
    }
    Tensor::from_vec([indices.len(), bands.len(), p, p], data)
}

/// Stack the selected label windows into a (n, 1, patch, patch) tensor,
/// keeping 0/1/nodata values as they are.
pub fn gather_labels<F: Scalar>(
    scenes: &[ScenePair],
    set: &PatchSet,
    indices: &[usize],
) -> Result<Tensor<F>> {
    let p = set.patch;
    let mut data = Vec::with_capacity(indices.len() * p * p);
    for &idx in indices {
        let r = set.refs[idx];
        let scene = &scenes[r.scene];
        let bi = scene.label.band_index(LABEL_BAND)?;
        data.extend(
            copy_window(&scene.label, bi, r.row, r.col, p)
                .into_iter()
                .map(F::from_f32),
        );
    }
    Tensor::from_vec([indices.len(), 1, p, p], data)
}
