//! Files on disk: PNG images, dataset directories, checkpoints and PLY.

mod checkpoint;
mod dataset;
mod ply;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, config_digest, load_checkpoint, save_checkpoint,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{
    frame_path, read_cameras, read_dataset, write_cameras, write_dataset, Dataset, Labels,
    CAMERAS_FILE, FRAMES_DIR, LABELS_FILE, POINTS_FILE,
};
pub use ply::{export_ply, import_ply, read_ply, write_ply, SH_C0};

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "RELAY_SPLAT_THREADS";

/// Thread count requested through [`THREADS_ENV`]; `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Err(Error::config(format!("{THREADS_ENV} is not valid Unicode"))),
    }
}

/// Save as 8-bit RGB PNG, creating parent directories.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(
        path,
        &image.to_rgb8(),
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Load any PNG as RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.png");
        let img = Image::from_data(2, 1, vec![0.0, 0.5, 1.0, 0.25, 1.5, -0.2]).unwrap();
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert_eq!(back.data[2], 1.0);
        assert_eq!(back.data[5], 0.0);
        assert!(read_png(&dir.path().join("none.png")).is_err());
    }
}
