//! Teacher feature grids and the pooled alignment targets derived from them.

mod grid;
mod io;
mod letterbox;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use grid::{
    build_alignment_target, pool_grid, AlignmentTarget, GranularityOrder, GridSource, TargetEntry,
    TeacherFeatureGrid, DEFAULT_GRID, TEACHER_PATCH,
};
pub use io::{
    decode_feature_grid, decode_float_grid, encode_feature_grid, encode_float_grid, load_feature_grid,
    save_feature_grid, FEATURE_MAGIC, GRID_VERSION, HEATMAP_MAGIC,
};
pub use letterbox::{letterbox, LetterboxMap, CANVAS};
pub use synth::{position_code, SyntheticTeacher};

use crate::error::Result;
use crate::image::Image;
use crate::registry::Registry;

/// Where teacher grids come from. `key` identifies the sample so that
/// dumped features can be looked up; synthetic teachers ignore it.
pub trait TeacherSource: Send + Sync {
    fn name(&self) -> &'static str;
    fn grid(&self, canvas: &Image, key: u64) -> Result<TeacherFeatureGrid>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub kind: String,
    pub seed: u64,
    pub dim: usize,
    /// Directory of `<key as 16 hex digits>.brtf` dumps for the file source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl TeacherSpec {
    pub fn synthetic(seed: u64, dim: usize) -> Self {
        Self {
            kind: "synthetic".into(),
            seed,
            dim,
            dir: None,
        }
    }
}

impl TeacherSource for SyntheticTeacher {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn grid(&self, canvas: &Image, _key: u64) -> Result<TeacherFeatureGrid> {
        SyntheticTeacher::grid(self, canvas)
    }
}

/// Features dumped from a real encoder, one file per sample.
pub struct FileTeacher {
    dir: PathBuf,
}

impl FileTeacher {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn path_for(&self, key: u64) -> PathBuf {
        self.dir.join(format!("{key:016x}.brtf"))
    }
}

impl TeacherSource for FileTeacher {
    fn name(&self) -> &'static str {
        "file"
    }

    fn grid(&self, _canvas: &Image, key: u64) -> Result<TeacherFeatureGrid> {
        load_feature_grid(&self.path_for(key))
    }
}

pub type TeacherCtor = fn(&TeacherSpec, usize) -> Result<Box<dyn TeacherSource>>;

/// Registered teacher sources; the `usize` argument is the image channel count.
pub fn teacher_registry() -> Registry<TeacherCtor> {
    Registry::<TeacherCtor>::new("teacher source")
        .register("synthetic", |spec: &TeacherSpec, channels| {
            Ok(Box::new(SyntheticTeacher::new(spec.seed, spec.dim, channels)))
        })
        .register("file", |spec: &TeacherSpec, _| {
            let dir = spec.dir.clone().ok_or_else(|| {
                crate::Error::Input("file teacher source needs a `dir`".into())
            })?;
            Ok(Box::new(FileTeacher::new(dir)))
        })
}

pub fn make_teacher(spec: &TeacherSpec, channels: usize) -> Result<Box<dyn TeacherSource>> {
    (teacher_registry().get(&spec.kind)?)(spec, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_builds_both_sources() {
        let syn = make_teacher(&TeacherSpec::synthetic(1, 8), 3).unwrap();
        assert_eq!(syn.name(), "synthetic");
        let grid = syn.grid(&Image::zeros(28, 28, 3), 0).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let spec = TeacherSpec {
            kind: "file".into(),
            seed: 0,
            dim: 8,
            dir: Some(dir.path().to_path_buf()),
        };
        let file = make_teacher(&spec, 3).unwrap();
        save_feature_grid(&grid, &FileTeacher::new(dir.path().into()).path_for(42)).unwrap();
        let loaded = file.grid(&Image::zeros(28, 28, 3), 42).unwrap();
        assert_eq!(loaded.features(), grid.features());
        assert!(file.grid(&Image::zeros(28, 28, 3), 43).is_err());

        let bad = TeacherSpec {
            kind: "clip".into(),
            ..TeacherSpec::synthetic(0, 8)
        };
        assert!(make_teacher(&bad, 3).is_err());
    }
}
