//! Binary checkpoints: every parameter group as a named `f64` array plus the
//! optimizer state, the segment table and the configuration that produced
//! them. Integers and floats are little-endian.

use std::path::Path;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{read_motion_values, write_motion_values, Model, Progress};
use crate::motion::MotionField;
use crate::optim::layout::{read_camera_values, write_camera_values};
use crate::optim::{AdamState, CloudLayout, ParameterStore};
use crate::scene::{
    Camera, GaussianCloud, GaussianPrimitive, Group, Intrinsics, TemporalSegment, Vec3,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RGS1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained (or partly trained) model with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub model: Model,
    pub adam: AdamState,
}

/// SHA-256 of the configuration's canonical TOML form.
pub fn config_digest(config: &PipelineConfig) -> Result<[u8; 32]> {
    Ok(Sha256::digest(config.to_toml()?.as_bytes()).into())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter()
            .for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    /// A length or count, bounded by the bytes left so corrupt files cannot
    /// request huge allocations.
    fn len(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.data.len() - self.pos) as u64;
        if n.saturating_mul(item_bytes.max(1) as u64) > left {
            return Err(Error::Format(format!(
                "checkpoint truncated: {n} items announced at byte {}",
                self.pos
            )));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("array too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::from_vec(self.f64s(3)?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

/// Parameter groups of `model` in a fixed order.
fn model_store(model: &Model) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    CloudLayout::new(&model.cloud).write_values(&model.cloud, &mut store)?;
    write_camera_values(&model.cameras, &mut store)?;
    if let Some(m) = &model.motion {
        write_motion_values(m, &mut store)?;
    }
    Ok(store)
}

/// Serialize a checkpoint. The output depends only on the checkpoint's
/// contents.
pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ck.model;
    let mut w = Writer::default();
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.0.extend_from_slice(&config_digest(&ck.config)?);
    w.str(&ck.config.to_toml()?);
    w.u8(model.progress.completed_stage());
    w.usize(model.frame_count);
    w.u64(model.cloud.generation);

    w.usize(model.cameras.len());
    for c in &model.cameras {
        let k = &c.intrinsics;
        w.f64s(&[k.focal_x, k.focal_y, k.principal_x, k.principal_y]);
        w.usize(k.width);
        w.usize(k.height);
        w.f64s(c.rotation.transpose().as_slice());
        w.f64s(c.translation.as_slice());
    }

    w.usize(model.segments.len());
    for s in &model.segments {
        w.usize(s.index);
        w.usize(s.start);
        w.usize(s.end);
        w.usize(s.selected_frames.len());
        s.selected_frames.iter().for_each(|&f| w.usize(f));
    }

    w.usize(model.cloud.len());
    for g in &model.cloud.gaussians {
        w.u32(g.group().tag());
        w.i64(g.group().segment().map_or(-1, |s| s as i64));
    }

    match &model.motion {
        Some(m) => {
            w.u8(1);
            w.f64s(m.grid.bounds_min.as_slice());
            w.f64s(m.grid.bounds_max.as_slice());
        }
        None => w.u8(0),
    }

    let store = model_store(model)?;
    w.usize(store.groups().len());
    for g in store.groups() {
        w.str(&g.name);
        w.usize(g.rows());
        w.usize(g.width);
        w.f64s(&g.values);
    }

    let a = &ck.adam;
    w.f64s(&[a.beta1, a.beta2, a.epsilon]);
    w.u64(a.step);
    w.usize(a.moments.len());
    for (name, (m, v)) in &a.moments {
        w.str(name);
        w.usize(m.len());
        w.f64s(m);
        w.f64s(v);
    }
    Ok(w.0)
}

/// Parse a checkpoint. When `expected` is given and its digest differs from
/// the stored one, a warning is logged and the stored configuration is used.
pub fn checkpoint_from_bytes(
    bytes: &[u8],
    expected: Option<&PipelineConfig>,
) -> Result<Checkpoint> {
    let mut r = Reader {
        data: bytes,
        pos: 0,
    };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let digest: [u8; 32] = r.array()?;
    let text = r.str()?;
    if <[u8; 32]>::from(Sha256::digest(text.as_bytes())) != digest {
        return Err(Error::Format(
            "stored configuration does not match its digest".into(),
        ));
    }
    let config = PipelineConfig::from_toml(&text)?;
    if let Some(e) = expected {
        if config_digest(e)? != digest {
            log::warn!("checkpoint was written with a different configuration; continuing with the checkpoint's own");
        }
    }
    let progress = Progress::from_stage(r.u8()?)?;
    let frame_count = r.u64()? as usize;
    let generation = r.u64()?;

    let n = r.len(15 * 8)?;
    let mut cameras = Vec::with_capacity(n);
    for _ in 0..n {
        let k = r.f64s(4)?;
        let (width, height) = (r.u64()? as usize, r.u64()? as usize);
        let intrinsics = Intrinsics {
            focal_x: k[0],
            focal_y: k[1],
            principal_x: k[2],
            principal_y: k[3],
            width,
            height,
        };
        let rotation = Matrix3::from_row_slice(&r.f64s(9)?);
        cameras.push(Camera::new(intrinsics, rotation, r.vec3()?)?);
    }

    let n = r.len(32)?;
    let mut segments = Vec::with_capacity(n);
    for _ in 0..n {
        let (index, start, end) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
        let k = r.len(8)?;
        let selected_frames = (0..k)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<_>>()?;
        segments.push(TemporalSegment {
            index,
            start,
            end,
            selected_frames,
        });
    }

    let n = r.len(12)?;
    let mut gaussians = Vec::with_capacity(n);
    for _ in 0..n {
        let group = Group::from_tag(r.u32()?, r.i64()?)?;
        gaussians.push(
            GaussianPrimitive::new(Vec3::zeros(), Vec3::zeros(), 0.5, Vec3::zeros())
                .with_group(group),
        );
    }
    let mut cloud = GaussianCloud::new(gaussians);
    cloud.generation = generation;

    let bounds = match r.u8()? {
        0 => None,
        1 => Some((r.vec3()?, r.vec3()?)),
        b => return Err(Error::Format(format!("bad motion flag {b}"))),
    };

    let n = r.len(24)?;
    let mut store = ParameterStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let (rows, width) = (r.u64()? as usize, r.u64()? as usize);
        let count = rows
            .checked_mul(width)
            .ok_or_else(|| Error::Format("group too large".into()))?;
        store.set(&name, width, r.f64s(count)?)?;
    }
    let layout = CloudLayout::new(&cloud);
    layout.read_values(&store, &mut cloud)?;
    read_camera_values(&store, &mut cameras)?;

    let motion = match bounds {
        None => None,
        Some((lo, hi)) => {
            // Parameters are overwritten below; the generator only sizes them.
            let mut m = MotionField::new(
                &config.deform.field,
                lo,
                hi,
                &mut ChaCha8Rng::seed_from_u64(0),
            )?;
            for (name, len) in [
                (crate::model::HEXPLANE_GROUP, m.grid.data.len()),
                (crate::model::MLP_BG_GROUP, m.heads_bg.params.len()),
                (crate::model::MLP_FG_GROUP, m.heads_fg.params.len()),
            ] {
                if store.values(name)?.len() != len {
                    return Err(Error::Format(format!(
                        "`{name}` does not match the motion configuration"
                    )));
                }
            }
            read_motion_values(&store, &mut m)?;
            Some(m)
        }
    };

    let mut adam = AdamState::new();
    let b = r.f64s(3)?;
    (adam.beta1, adam.beta2, adam.epsilon) = (b[0], b[1], b[2]);
    adam.step = r.u64()?;
    let n = r.len(24)?;
    for _ in 0..n {
        let name = r.str()?;
        let len = r.len(16)?;
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        adam.moments.insert(name, (m, v));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let model = Model {
        cloud,
        cameras,
        segments,
        motion,
        frame_count,
        progress,
    };
    Ok(Checkpoint {
        config,
        model,
        adam,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_to_bytes(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&PipelineConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{HeadsConfig, HexPlaneConfig, MotionConfig};
    use crate::scene::{segment_frames, Quat};

    fn small_checkpoint() -> Checkpoint {
        let mut config = PipelineConfig::desk();
        config.deform.field = MotionConfig {
            hexplane: HexPlaneConfig {
                levels: 1,
                base_resolution: 4,
                time_resolution: 3,
                upsample: 2,
                features: 2,
                init_range: (0.1, 0.5),
            },
            heads: HeadsConfig { hidden: 4 },
            ..MotionConfig::default()
        };
        let mk = |x: f64, group| {
            let mut g = GaussianPrimitive::new(
                Vec3::new(x, 0.5 * x, 1.0),
                Vec3::repeat(-2.0 + 0.1 * x),
                0.4,
                Vec3::new(0.2, 0.3, x / 10.0),
            )
            .with_group(group);
            g.mask_logit = x - 1.5;
            g.set_gamma(Vec3::new(0.1 * x, -0.2, 1.0 / 3.0));
            g.sh1[2] = Vec3::new(x, -x, 0.125);
            g.rotation = Quat::new(1.0, 0.1 * x, 0.0, -0.3);
            g
        };
        let mut cloud = GaussianCloud::new(vec![
            mk(0.0, Group::Background),
            mk(1.0, Group::Relay(1)),
            mk(2.0, Group::Background),
            mk(3.0, Group::Relay(0)),
            mk(4.0, Group::Foreground),
        ]);
        cloud.generation = 7;
        let k = Intrinsics::centered(20.0, 16, 12);
        let mut cameras: Vec<Camera> = (0..3)
            .map(|i| {
                let a = i as f64 * 2.0;
                Camera::look_at(
                    k,
                    Vec3::new(5.0 * a.cos(), 5.0 * a.sin(), 2.0),
                    Vec3::zeros(),
                    Vec3::z(),
                )
                .unwrap()
            })
            .collect();
        cameras[1].color_gain = Vec3::new(1.1, 0.9, 1.0 / 7.0);
        cameras[2].color_bias = Vec3::new(-0.01, 0.02, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let motion = MotionField::for_cloud(&config.deform.field, &cloud, &mut rng).unwrap();
        let mut model = Model::new(cloud, cameras, 32);
        model.segments = segment_frames(32, 16, 3).unwrap();
        model.motion = Some(motion);
        model.progress = Progress::Deformable;
        let mut adam = AdamState::new();
        adam.step = 42;
        adam.moments.insert(
            "gamma".into(),
            (vec![0.1, 0.2, 0.3], vec![1e-3, 2e-3, 3e-3]),
        );
        adam.moments
            .insert("hexplane".into(), (vec![-1.0; 4], vec![0.5; 4]));
        Checkpoint {
            config,
            model,
            adam,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = small_checkpoint();
        let bytes = checkpoint_to_bytes(&ck).unwrap();
        assert_eq!(&bytes[..4], b"RGS1");
        let back = checkpoint_from_bytes(&bytes, Some(&ck.config)).unwrap();
        assert_eq!(back, ck);
        assert_eq!(checkpoint_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.rgs");
        let ck = small_checkpoint();
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path, None).unwrap(), ck);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing"), None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = checkpoint_to_bytes(&small_checkpoint()).unwrap();
        for n in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
            assert!(
                checkpoint_from_bytes(&bytes[..n], None).is_err(),
                "prefix {n} accepted"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(checkpoint_from_bytes(&long, None).is_err());
    }

    #[test]
    fn header_errors() {
        let mut bytes = checkpoint_to_bytes(&small_checkpoint()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bad_magic, None),
            Err(Error::Format(_))
        ));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bytes, None),
            Err(Error::Version {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn corrupted_config_is_detected() {
        let bytes = checkpoint_to_bytes(&small_checkpoint()).unwrap();
        let mut bad = bytes.clone();
        // First byte of the config text.
        bad[4 + 4 + 32 + 8] ^= 1;
        assert!(checkpoint_from_bytes(&bad, None).is_err());
    }

    #[test]
    fn other_config_proceeds_with_stored_one() {
        let ck = small_checkpoint();
        let bytes = checkpoint_to_bytes(&ck).unwrap();
        let mut other = ck.config.clone();
        other.seed += 1;
        assert_ne!(
            config_digest(&other).unwrap(),
            config_digest(&ck.config).unwrap()
        );
        let back = checkpoint_from_bytes(&bytes, Some(&other)).unwrap();
        assert_eq!(back.config, ck.config);
    }

    #[test]
    fn models_without_motion_round_trip() {
        let mut ck = small_checkpoint();
        ck.model.motion = None;
        ck.model.segments.clear();
        ck.model.progress = Progress::Masked;
        let bytes = checkpoint_to_bytes(&ck).unwrap();
        assert_eq!(checkpoint_from_bytes(&bytes, None).unwrap(), ck);
    }
}
