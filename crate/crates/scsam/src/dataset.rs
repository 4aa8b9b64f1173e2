//! Slice volumes on disk.
//!
//! A volume is a numbered sequence of grayscale image files per cell, with
//! one binary mask file per class next to each slice. File locations come
//! from path templates with `{cell}`, `{slice}` and `{class}` placeholders,
//! relative to the dataset root. `{slice}` is zero-padded to `index_digits`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use scsam_core::emdata::{slice_window, LabeledSlice, DEFAULT_CLASSES, DEFAULT_SLICES_PER_CELL};
use scsam_core::grid::{Image, Mask, Plane};
use scsam_core::synthetic::{synthetic_dataset, SyntheticConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: PathBuf,
    #[serde(default = "default_classes")]
    pub classes: Vec<String>,
    #[serde(default = "default_slices_per_cell")]
    pub slices_per_cell: usize,
    #[serde(default = "default_image_template")]
    pub image: String,
    #[serde(default = "default_mask_template")]
    pub mask: String,
    #[serde(default = "default_index_digits")]
    pub index_digits: usize,
    #[serde(default)]
    pub split: Split,
}

/// Cell ids assigned to training and validation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
}

fn default_classes() -> Vec<String> {
    DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn default_slices_per_cell() -> usize {
    DEFAULT_SLICES_PER_CELL
}

fn default_image_template() -> String {
    "{cell}/image/{slice}.png".into()
}

fn default_mask_template() -> String {
    "{cell}/{class}/{slice}.png".into()
}

fn default_index_digits() -> usize {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            classes: default_classes(),
            slices_per_cell: default_slices_per_cell(),
            image: default_image_template(),
            mask: default_mask_template(),
            index_digits: default_index_digits(),
            split: Split::default(),
        }
    }

    pub fn validate(&self) -> Result<(), scsam_core::Error> {
        if self.classes.is_empty() {
            return Err(scsam_core::Error::Validation("dataset class list is empty".into()));
        }
        if self.slices_per_cell == 0 {
            return Err(scsam_core::Error::Validation("slices_per_cell must be at least 1".into()));
        }
        if !self.image.contains("{slice}") || !self.mask.contains("{slice}") || !self.mask.contains("{class}") {
            return Err(scsam_core::Error::Validation(
                "path templates need {slice} (and {class} for masks)".into(),
            ));
        }
        Ok(())
    }

    fn fill(&self, template: &str, cell: &str, slice: usize, class: &str) -> PathBuf {
        let index = format!("{slice:0width$}", width = self.index_digits);
        self.root.join(
            template
                .replace("{cell}", cell)
                .replace("{slice}", &index)
                .replace("{class}", class),
        )
    }

    pub fn image_path(&self, cell: &str, slice: usize) -> PathBuf {
        self.fill(&self.image, cell, slice, "")
    }

    pub fn mask_path(&self, cell: &str, slice: usize, class: &str) -> PathBuf {
        self.fill(&self.mask, cell, slice, class)
    }

    /// Number of consecutive slices starting at index 0.
    pub fn depth(&self, cell: &str) -> usize {
        (0..).take_while(|&i| self.image_path(cell, i).is_file()).count()
    }

    pub fn cells(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.split.train,
            SplitName::Val => &self.split.val,
        }
    }
}

/// The centred window of a cell's slices with every configured mask.
pub fn load_volume(spec: &DatasetSpec, cell: &str) -> Result<Vec<LabeledSlice>> {
    spec.validate()?;
    let depth = spec.depth(cell);
    if depth == 0 {
        let first = spec.image_path(cell, 0);
        return Err(CliError::io(
            &first,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("no slices for cell {cell}")),
        ));
    }
    let (window, clamped) = slice_window(depth, spec.slices_per_cell);
    if clamped {
        log::warn!(
            "cell {cell} has {depth} slices, fewer than the requested {}; using all of them",
            spec.slices_per_cell
        );
    }
    let mut out = Vec::with_capacity(window.len());
    for index in window {
        let image = read_image(&spec.image_path(cell, index))?;
        let mut masks = BTreeMap::new();
        for class in &spec.classes {
            masks.insert(class.clone(), read_mask(&spec.mask_path(cell, index, class))?);
        }
        let slice = LabeledSlice {
            image,
            masks,
            cell_id: cell.to_string(),
            slice_index: index,
        };
        slice.validate()?;
        out.push(slice);
    }
    Ok(out)
}

/// Where slices come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Generated organelle-like images; both splits are the whole set.
    Synthetic(SyntheticConfig),
    Files(DatasetSpec),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticConfig::default())
    }
}

impl DataConfig {
    pub fn load(&self, split: SplitName) -> Result<Vec<LabeledSlice>> {
        match self {
            DataConfig::Synthetic(cfg) => Ok(synthetic_dataset(cfg)?),
            DataConfig::Files(spec) => {
                let cells = spec.cells(split);
                if cells.is_empty() {
                    return Err(scsam_core::Error::Validation(format!("the {split:?} split lists no cells")).into());
                }
                let mut out = Vec::new();
                for cell in cells {
                    out.extend(load_volume(spec, cell)?);
                }
                Ok(out)
            }
        }
    }

    /// Every slice of both splits, each once.
    pub fn load_all(&self) -> Result<Vec<LabeledSlice>> {
        match self {
            DataConfig::Synthetic(_) => self.load(SplitName::Train),
            DataConfig::Files(spec) => {
                let mut cells: Vec<&String> = spec.split.train.iter().chain(&spec.split.val).collect();
                cells.sort();
                cells.dedup();
                let mut out = Vec::new();
                for cell in cells {
                    out.extend(load_volume(spec, cell)?);
                }
                Ok(out)
            }
        }
    }

    pub fn set_slices_per_cell(&mut self, n: usize) {
        match self {
            DataConfig::Files(spec) => spec.slices_per_cell = n,
            DataConfig::Synthetic(_) => log::warn!("--slices-per-cell has no effect on synthetic data"),
        }
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Grayscale intensities as stored (0..255 or 0..65535). Colour files are
/// converted to luma.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f32::from).collect(),
        other => {
            log::warn!("{}: not grayscale, converting to luma", path.display());
            other.into_luma16().into_raw().into_iter().map(f32::from).collect()
        }
    };
    Ok(Plane::from_vec(h, w, data)?)
}

/// Any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| u8::from(v != 0)).collect();
    Ok(Plane::from_vec(h, w, data)?)
}

/// 8-bit PNG with foreground 255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) != 0 { 255 } else { 0 }])
    });
    save(path, &DynamicImage::ImageLuma8(img))
}

/// 16-bit PNG of rounded, clamped intensities.
pub fn write_image16(path: &Path, image: &Image) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(image.width() as u32, image.height() as u32, |x, y| {
            Luma([image.get(y as usize, x as usize).round().clamp(0.0, 65535.0) as u16])
        });
    save(path, &DynamicImage::ImageLuma16(img))
}

pub(crate) fn save(path: &Path, img: &DynamicImage) -> Result<()> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    crate::error::write_atomic(path, &bytes.into_inner())
}

/// Writes slices as a volume following `spec`'s templates. Slice indices
/// are taken from the slices themselves.
pub fn write_volume(spec: &DatasetSpec, slices: &[LabeledSlice]) -> Result<()> {
    for s in slices {
        write_image16(&spec.image_path(&s.cell_id, s.slice_index), &s.image)?;
        for (class, mask) in &s.masks {
            write_mask(&spec.mask_path(&s.cell_id, s.slice_index, class), mask)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(cell: &str, index: usize, value: f32) -> LabeledSlice {
        let image = Plane::from_fn(6, 5, |y, x| value + (y * 5 + x) as f32);
        let mask = Plane::from_fn(6, 5, |y, x| u8::from(y == x));
        LabeledSlice {
            image,
            masks: [("nucleus".to_string(), mask)].into(),
            cell_id: cell.into(),
            slice_index: index,
        }
    }

    fn spec(root: &Path) -> DatasetSpec {
        DatasetSpec {
            classes: vec!["nucleus".into()],
            slices_per_cell: 4,
            ..DatasetSpec::new(root)
        }
    }

    #[test]
    fn volume_round_trip_and_centred_window() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec(dir.path());
        let slices: Vec<_> = (0..10).map(|i| slice("c1", i, 100.0 * i as f32)).collect();
        write_volume(&spec, &slices).unwrap();
        assert_eq!(spec.depth("c1"), 10);
        let got = load_volume(&spec, "c1").unwrap();
        let idx: Vec<_> = got.iter().map(|s| s.slice_index).collect();
        assert_eq!(idx, [3, 4, 5, 6]);
        assert_eq!(got[0], slices[3]);
    }

    #[test]
    fn reversed_volume_loads_reversed() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec(dir.path());
        let fwd: Vec<_> = (0..10).map(|i| slice("a", i, 10.0 * i as f32)).collect();
        let rev: Vec<_> = fwd
            .iter()
            .rev()
            .enumerate()
            .map(|(i, s)| LabeledSlice {
                cell_id: "b".into(),
                slice_index: i,
                ..s.clone()
            })
            .collect();
        write_volume(&spec, &fwd).unwrap();
        write_volume(&spec, &rev).unwrap();
        let a = load_volume(&spec, "a").unwrap();
        let b = load_volume(&spec, "b").unwrap();
        let a_images: Vec<_> = a.iter().rev().map(|s| s.image.clone()).collect();
        let b_images: Vec<_> = b.iter().map(|s| s.image.clone()).collect();
        assert_eq!(a_images, b_images);
    }

    #[test]
    fn short_volume_is_clamped_and_missing_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec(dir.path());
        spec.slices_per_cell = 350;
        write_volume(&spec, &[slice("c", 0, 0.0), slice("c", 1, 1.0)]).unwrap();
        assert_eq!(load_volume(&spec, "c").unwrap().len(), 2);
        assert_eq!(load_volume(&spec, "nope").unwrap_err().exit_code(), 4);
        std::fs::remove_file(spec.mask_path("c", 1, "nucleus")).unwrap();
        assert_eq!(load_volume(&spec, "c").unwrap_err().exit_code(), 4);
    }

    #[test]
    fn mask_shape_mismatch_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec(dir.path());
        write_volume(&spec, &[slice("c", 0, 0.0)]).unwrap();
        write_mask(&spec.mask_path("c", 0, "nucleus"), &Plane::new(3, 3)).unwrap();
        assert_eq!(load_volume(&spec, "c").unwrap_err().exit_code(), 3);
    }

    #[test]
    fn data_config_is_tagged() {
        let d: DataConfig = serde_json::from_str(r#"{"kind":"files","root":"x","split":{"train":["a"]}}"#).unwrap();
        assert!(matches!(d, DataConfig::Files(ref s) if s.split.train == ["a"]));
        assert!(serde_json::from_str::<DataConfig>(r#"{"kind":"files","root":"x","bogus":1}"#).is_err());
    }
}
