//! Dataset directories:
//!
//! ```text
//! cams.cfg                 cameras (TOML)
//! frames/<cam>/<frame>.png 8-bit RGB, cameras from 0, frames from 1
//! labels.cfg               generator spec and ground-truth component labels (TOML)
//! points.ply               initial point cloud
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ply::{export_ply, import_ply};
use super::{read_png, write_png};
use crate::error::{Error, Result};
use crate::scene::{Camera, FrameSet, GaussianCloud, Intrinsics, Vec3};
use crate::synth::{ComponentLabel, SceneSpec, SyntheticScene};

pub const CAMERAS_FILE: &str = "cams.cfg";
pub const LABELS_FILE: &str = "labels.cfg";
pub const POINTS_FILE: &str = "points.ply";
pub const FRAMES_DIR: &str = "frames";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CameraEntry {
    #[serde(flatten)]
    intrinsics: Intrinsics,
    /// World-to-camera rotation, row-major.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CamerasFile {
    camera: Vec<CameraEntry>,
}

/// Ground truth written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub scene: SceneSpec,
    pub components: Vec<ComponentLabel>,
    /// Component of each Gaussian in `points.ply`.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: FrameSet,
    pub points: Option<GaussianCloud>,
    pub labels: Option<Labels>,
}

pub fn frame_path(dir: &Path, camera: usize, frame: usize) -> PathBuf {
    dir.join(FRAMES_DIR)
        .join(camera.to_string())
        .join(format!("{frame}.png"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn toml_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let file = CamerasFile {
        camera: cameras
            .iter()
            .map(|c| CameraEntry {
                intrinsics: c.intrinsics,
                rotation: std::array::from_fn(|r| std::array::from_fn(|k| c.rotation[(r, k)])),
                translation: c.translation.into(),
            })
            .collect(),
    };
    write_text(
        path,
        &toml::to_string(&file).map_err(|e| toml_error(path, e))?,
    )
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let file: CamerasFile = toml::from_str(&read_text(path)?).map_err(|e| toml_error(path, e))?;
    file.camera
        .into_iter()
        .map(|c| {
            let rotation = Matrix3::from_fn(|r, k| c.rotation[r][k]);
            Camera::new(c.intrinsics, rotation, Vec3::from(c.translation))
        })
        .collect()
}

/// Write a generated scene. Output bytes depend only on the scene.
pub fn write_dataset(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    let frames = &scene.frames;
    for c in 0..frames.cameras.len() {
        let d = dir.join(FRAMES_DIR).join(c.to_string());
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_cameras(&dir.join(CAMERAS_FILE), &frames.cameras)?;
    let labels = Labels {
        scene: scene.spec.clone(),
        components: scene.components.clone(),
        labels: scene.labels.clone(),
    };
    let path = dir.join(LABELS_FILE);
    write_text(
        &path,
        &toml::to_string(&labels).map_err(|e| toml_error(&path, e))?,
    )?;
    export_ply(&dir.join(POINTS_FILE), &scene.cloud)?;
    let jobs: Vec<(usize, usize)> = (0..frames.cameras.len())
        .flat_map(|c| (1..=frames.frame_count).map(move |f| (c, f)))
        .collect();
    jobs.par_iter()
        .try_for_each(|&(c, f)| write_png(&frame_path(dir, c, f), frames.image(c, f)))
}

/// Read a dataset directory. `points.ply` and `labels.cfg` are optional.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let cameras = read_cameras(&dir.join(CAMERAS_FILE))?;
    let first = dir.join(FRAMES_DIR).join("0");
    let mut frame_count = 0;
    while frame_path(dir, 0, frame_count + 1).is_file() {
        frame_count += 1;
    }
    if cameras.is_empty() || frame_count == 0 {
        return Err(Error::config(format!(
            "no frames found under {}",
            first.display()
        )));
    }
    let images = (0..cameras.len())
        .into_par_iter()
        .map(|c| {
            (1..=frame_count)
                .map(|f| read_png(&frame_path(dir, c, f)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let frames = FrameSet::new(cameras, images)?;
    let points_path = dir.join(POINTS_FILE);
    let points = points_path
        .is_file()
        .then(|| import_ply(&points_path))
        .transpose()?;
    let labels_path = dir.join(LABELS_FILE);
    let labels = match labels_path.is_file() {
        true => Some(
            toml::from_str(&read_text(&labels_path)?).map_err(|e| toml_error(&labels_path, e))?,
        ),
        false => None,
    };
    Ok(Dataset {
        frames,
        points,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, DeskMotion};

    fn tiny_scene() -> SyntheticScene {
        let mut spec = SceneSpec::desk(4, DeskMotion::Linear);
        spec.image_size = 16;
        spec.frame_count = 3;
        spec.cameras.focal = 17.5;
        generate_scene(&spec).unwrap()
    }

    fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((
                        p.strip_prefix(dir).unwrap().to_path_buf(),
                        std::fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn write_read_round_trip() {
        let scene = tiny_scene();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scene).unwrap();
        assert!(frame_path(dir.path(), 7, 3).is_file());
        let data = read_dataset(dir.path()).unwrap();
        assert_eq!(data.frames.cameras, scene.frames.cameras);
        assert_eq!(data.frames.frame_count, 3);
        for c in 0..8 {
            for f in 1..=3 {
                let (a, b) = (data.frames.image(c, f), scene.frames.image(c, f));
                assert!(a
                    .data
                    .iter()
                    .zip(&b.data)
                    .all(|(x, y)| (x - y.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-12));
            }
        }
        assert_eq!(data.points.unwrap(), scene.cloud);
        let labels = data.labels.unwrap();
        assert_eq!(labels.scene, scene.spec);
        assert_eq!(labels.labels, scene.labels);
    }

    #[test]
    fn writing_twice_gives_identical_files() {
        let scene = tiny_scene();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &scene).unwrap();
        write_dataset(b.path(), &generate_scene(&scene.spec).unwrap()).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
    }

    #[test]
    fn missing_pieces_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
        write_cameras(&dir.path().join(CAMERAS_FILE), &tiny_scene().frames.cameras).unwrap();
        assert!(read_dataset(dir.path()).is_err());
        std::fs::write(dir.path().join(CAMERAS_FILE), "camera = 3").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }
}
