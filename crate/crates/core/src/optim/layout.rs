use super::store::{AdamState, ParameterStore};
use crate::error::Result;
use crate::render::{CameraGrad, GaussianGrad};
use crate::scene::{Camera, GaussianCloud, GaussianPrimitive, Group, Vec3};

pub const OWNERS: [&str; 3] = ["bg-gaussians", "fg-gaussians", "relay-gaussians"];
pub const FIELDS: [(&str, usize); 6] = [
    ("position", 3),
    ("log_scale", 3),
    ("rotation", 4),
    ("opacity", 1),
    ("color", 3),
    ("sh1", 9),
];
pub const MASK_GROUP: &str = "mask-logits";
pub const GAMMA_GROUP: &str = "gamma";
pub const CAMERA_GROUP: &str = "camera-color";

pub fn owner_of(group: Group) -> usize {
    match group {
        Group::Background => 0,
        Group::Foreground => 1,
        Group::Relay(_) => 2,
    }
}

pub fn group_name(owner: usize, field: &str) -> String {
    format!("{}/{field}", OWNERS[owner])
}

fn read_field(g: &GaussianPrimitive, field: &str, out: &mut Vec<f64>) {
    match field {
        "position" => out.extend_from_slice(g.position.as_slice()),
        "log_scale" => out.extend_from_slice(g.log_scale.as_slice()),
        "rotation" => out.extend_from_slice(g.rotation.as_slice()),
        "opacity" => out.push(g.opacity_logit),
        "color" => out.extend_from_slice(g.color.as_slice()),
        "sh1" => g
            .sh1
            .iter()
            .for_each(|c| out.extend_from_slice(c.as_slice())),
        _ => unreachable!("unknown field {field}"),
    }
}

fn write_field(g: &mut GaussianPrimitive, field: &str, v: &[f64]) {
    match field {
        "position" => g.position.copy_from_slice(v),
        "log_scale" => g.log_scale.copy_from_slice(v),
        "rotation" => g.rotation.copy_from_slice(v),
        "opacity" => g.opacity_logit = v[0],
        "color" => g.color.copy_from_slice(v),
        "sh1" => {
            for k in 0..3 {
                g.sh1[k].copy_from_slice(&v[k * 3..k * 3 + 3]);
            }
        }
        _ => unreachable!("unknown field {field}"),
    }
}

fn grad_field(g: &GaussianGrad, field: &str, out: &mut [f64]) {
    match field {
        "position" => out.copy_from_slice(g.position.as_slice()),
        "log_scale" => out.copy_from_slice(g.log_scale.as_slice()),
        "rotation" => out.copy_from_slice(g.rotation.as_slice()),
        "opacity" => out[0] = g.opacity_logit,
        "color" => out.copy_from_slice(g.color.as_slice()),
        "sh1" => {
            for k in 0..3 {
                out[k * 3..k * 3 + 3].copy_from_slice(g.sh1[k].as_slice());
            }
        }
        _ => unreachable!("unknown field {field}"),
    }
}

/// Which cloud index sits in which row of which store group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CloudLayout {
    /// Cloud indices per owner (background, foreground, relay).
    pub owners: [Vec<usize>; 3],
    /// Cloud indices of Gaussians carrying gamma.
    pub gamma_rows: Vec<usize>,
    pub len: usize,
}

impl CloudLayout {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let mut owners: [Vec<usize>; 3] = Default::default();
        let mut gamma_rows = Vec::new();
        for (i, g) in cloud.gaussians.iter().enumerate() {
            owners[owner_of(g.group())].push(i);
            if g.gamma().is_some() {
                gamma_rows.push(i);
            }
        }
        Self {
            owners,
            gamma_rows,
            len: cloud.len(),
        }
    }

    /// (Re)create every Gaussian group in `store` from `cloud`.
    pub fn write_values(&self, cloud: &GaussianCloud, store: &mut ParameterStore) -> Result<()> {
        for (o, rows) in self.owners.iter().enumerate() {
            for (field, width) in FIELDS {
                let mut v = Vec::with_capacity(rows.len() * width);
                rows.iter()
                    .for_each(|&i| read_field(&cloud.gaussians[i], field, &mut v));
                store.set(&group_name(o, field), width, v)?;
            }
        }
        store.set(
            MASK_GROUP,
            1,
            cloud.gaussians.iter().map(|g| g.mask_logit).collect(),
        )?;
        let gamma = self
            .gamma_rows
            .iter()
            .flat_map(|&i| {
                let v = cloud.gaussians[i].gamma().copied().unwrap_or_default();
                [v.x, v.y, v.z]
            })
            .collect();
        store.set(GAMMA_GROUP, 3, gamma)
    }

    /// Copy store values back into `cloud`.
    pub fn read_values(&self, store: &ParameterStore, cloud: &mut GaussianCloud) -> Result<()> {
        for (o, rows) in self.owners.iter().enumerate() {
            for (field, width) in FIELDS {
                let v = store.values(&group_name(o, field))?;
                for (r, &i) in rows.iter().enumerate() {
                    write_field(
                        &mut cloud.gaussians[i],
                        field,
                        &v[r * width..(r + 1) * width],
                    );
                }
            }
        }
        let m = store.values(MASK_GROUP)?;
        for (g, v) in cloud.gaussians.iter_mut().zip(m) {
            g.mask_logit = *v;
        }
        let gamma = store.values(GAMMA_GROUP)?;
        for (r, &i) in self.gamma_rows.iter().enumerate() {
            cloud.gaussians[i].set_gamma(Vec3::from_row_slice(&gamma[r * 3..r * 3 + 3]));
        }
        Ok(())
    }

    /// Add per-Gaussian gradients (indexed like the cloud) into the store.
    pub fn accumulate_grads(
        &self,
        grads: &[GaussianGrad],
        store: &mut ParameterStore,
    ) -> Result<()> {
        for (o, rows) in self.owners.iter().enumerate() {
            for (field, width) in FIELDS {
                let dst = store.grads_mut(&group_name(o, field))?;
                let mut buf = [0.0; 9];
                for (r, &i) in rows.iter().enumerate() {
                    grad_field(&grads[i], field, &mut buf[..width]);
                    for k in 0..width {
                        dst[r * width + k] += buf[k];
                    }
                }
            }
        }
        let dst = store.grads_mut(MASK_GROUP)?;
        for (d, g) in dst.iter_mut().zip(grads) {
            *d += g.mask_logit;
        }
        let dst = store.grads_mut(GAMMA_GROUP)?;
        for (r, &i) in self.gamma_rows.iter().enumerate() {
            for k in 0..3 {
                dst[r * 3 + k] += grads[i].gamma[k];
            }
        }
        Ok(())
    }

    /// Carry Adam moments across a change of cloud layout. `source[i]` is the
    /// old cloud index of new Gaussian `i`.
    pub fn remap_moments(
        old: &CloudLayout,
        new: &CloudLayout,
        source: &[Option<usize>],
        state: &mut AdamState,
    ) {
        let inverse = |rows: &[usize]| {
            let mut inv = vec![None; old.len];
            for (r, &i) in rows.iter().enumerate() {
                inv[i] = Some(r);
            }
            inv
        };
        let map_rows = |old_rows: &[usize], new_rows: &[usize]| -> Vec<Option<usize>> {
            let inv = inverse(old_rows);
            new_rows
                .iter()
                .map(|&i| source[i].and_then(|j| inv[j]))
                .collect()
        };
        for o in 0..3 {
            let rows = map_rows(&old.owners[o], &new.owners[o]);
            for (field, width) in FIELDS {
                state.remap_rows(&group_name(o, field), width, &rows);
            }
        }
        let all_old: Vec<usize> = (0..old.len).collect();
        let all_new: Vec<usize> = (0..new.len).collect();
        state.remap_rows(MASK_GROUP, 1, &map_rows(&all_old, &all_new));
        state.remap_rows(GAMMA_GROUP, 3, &map_rows(&old.gamma_rows, &new.gamma_rows));
    }
}

pub fn write_camera_values(cameras: &[Camera], store: &mut ParameterStore) -> Result<()> {
    let v = cameras
        .iter()
        .flat_map(|c| {
            c.color_gain
                .iter()
                .chain(c.color_bias.iter())
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    store.set(CAMERA_GROUP, 6, v)
}

pub fn read_camera_values(store: &ParameterStore, cameras: &mut [Camera]) -> Result<()> {
    let v = store.values(CAMERA_GROUP)?;
    for (c, row) in cameras.iter_mut().zip(v.chunks_exact(6)) {
        c.color_gain.copy_from_slice(&row[..3]);
        c.color_bias.copy_from_slice(&row[3..]);
    }
    Ok(())
}

pub fn accumulate_camera_grad(
    camera: usize,
    grad: &CameraGrad,
    store: &mut ParameterStore,
) -> Result<()> {
    let dst = store.grads_mut(CAMERA_GROUP)?;
    for k in 0..3 {
        dst[camera * 6 + k] += grad.gain[k];
        dst[camera * 6 + 3 + k] += grad.bias[k];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> GaussianCloud {
        let mk = |x: f64, group| {
            let mut g = GaussianPrimitive::new(
                Vec3::new(x, 0.0, 0.0),
                Vec3::repeat(-2.0),
                0.5,
                Vec3::repeat(0.3),
            )
            .with_group(group);
            g.mask_logit = x;
            g.set_gamma(Vec3::repeat(x));
            g
        };
        GaussianCloud::new(vec![
            mk(0.0, Group::Background),
            mk(1.0, Group::Relay(1)),
            mk(2.0, Group::Foreground),
            mk(3.0, Group::Relay(0)),
        ])
    }

    #[test]
    fn values_round_trip() {
        let c = cloud();
        let layout = CloudLayout::new(&c);
        let mut store = ParameterStore::new();
        layout.write_values(&c, &mut store).unwrap();
        assert_eq!(
            store.values("relay-gaussians/position").unwrap(),
            &[1.0, 0.0, 0.0, 3.0, 0.0, 0.0]
        );
        assert_eq!(store.values(GAMMA_GROUP).unwrap().len(), 9);
        let mut back = c.clone();
        back.gaussians.iter_mut().for_each(|g| {
            g.position = Vec3::zeros();
            g.mask_logit = 9.0;
            g.set_gamma(Vec3::zeros());
        });
        layout.read_values(&store, &mut back).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn gradients_land_in_their_rows() {
        let c = cloud();
        let layout = CloudLayout::new(&c);
        let mut store = ParameterStore::new();
        layout.write_values(&c, &mut store).unwrap();
        let mut grads = vec![GaussianGrad::default(); 4];
        grads[3].opacity_logit = 7.0;
        grads[2].gamma = Vec3::new(1.0, 2.0, 3.0);
        grads[0].mask_logit = -1.0;
        layout.accumulate_grads(&grads, &mut store).unwrap();
        assert_eq!(
            store.group("relay-gaussians/opacity").unwrap().grads,
            vec![0.0, 7.0]
        );
        assert_eq!(
            store.group(GAMMA_GROUP).unwrap().grads[3..6],
            [1.0, 2.0, 3.0]
        );
        assert_eq!(store.group(MASK_GROUP).unwrap().grads[0], -1.0);
    }

    #[test]
    fn moments_follow_their_gaussians() {
        let c = cloud();
        let old = CloudLayout::new(&c);
        let mut state = AdamState::new();
        state.moments.insert(
            "relay-gaussians/opacity".into(),
            (vec![10.0, 30.0], vec![1.0, 3.0]),
        );
        // Drop gaussian 1 and append a clone of gaussian 3.
        let mut next = c.clone();
        next.gaussians.remove(1);
        next.gaussians.push(c.gaussians[3].clone());
        let source = vec![Some(0), Some(2), Some(3), None];
        let new = CloudLayout::new(&next);
        CloudLayout::remap_moments(&old, &new, &source, &mut state);
        assert_eq!(state.moments["relay-gaussians/opacity"].0, vec![30.0, 0.0]);
    }

    #[test]
    fn camera_values_round_trip() {
        use crate::scene::Intrinsics;
        use nalgebra::Matrix3;
        let intr = Intrinsics {
            focal_x: 10.0,
            focal_y: 10.0,
            principal_x: 4.0,
            principal_y: 4.0,
            width: 8,
            height: 8,
        };
        let mut cams = vec![Camera::new(intr, Matrix3::identity(), Vec3::zeros()).unwrap(); 2];
        cams[1].color_bias = Vec3::new(0.1, 0.2, 0.3);
        let mut store = ParameterStore::new();
        write_camera_values(&cams, &mut store).unwrap();
        let mut back = vec![Camera::new(intr, Matrix3::identity(), Vec3::zeros()).unwrap(); 2];
        read_camera_values(&store, &mut back).unwrap();
        assert_eq!(back, cams);
    }
}
