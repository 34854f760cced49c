//! Scene sampling: two posed hands and an optional box in a pinhole camera.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::object::{object_catalog, rigid, ObjectModel};
use super::render::{rasterize, Owner};
use super::skeleton::{mirror_axis_angle, uniform_shape, Hand, HandSkeletonTemplate, NUM_ARTICULATED, NUM_JOINTS};
use crate::error::{KptError, Result};

pub const MAX_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandMode {
    Single,
    Inter,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub hands: HandMode,
    pub object: bool,
    /// Catalog index; `None` draws one per scene.
    pub object_id: Option<u8>,
    pub zero_pose: bool,
    /// Root depth range in millimetres.
    pub depth_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            hands: HandMode::Inter,
            object: true,
            object_id: None,
            zero_pose: false,
            depth_range: (420.0, 520.0),
        }
    }
}

/// One annotated frame. Geometry is stored in f64 so that annotations are
/// exact; the image is f32, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub rng_seed: u64,
    pub width: usize,
    pub height: usize,
    pub image: Vec<f32>,
    pub joints3d: [[[f64; 3]; NUM_JOINTS]; 2],
    pub joints2d: [[[f64; 2]; NUM_JOINTS]; 2],
    pub visibility: [[bool; NUM_JOINTS]; 2],
    pub hand_present: [bool; 2],
    pub intrinsics: [[f64; 3]; 3],
    pub z_root: [f64; 2],
    pub theta: [[[f64; 3]; NUM_ARTICULATED]; 2],
    pub shape_scale: f64,
    pub object_present: bool,
    pub object_id: u8,
    pub object_pose: [[f64; 4]; 4],
}

pub fn project(k: &[[f64; 3]; 3], p: &[f64; 3]) -> [f64; 2] {
    let x = k[0][0] * p[0] + k[0][1] * p[1] + k[0][2] * p[2];
    let y = k[1][0] * p[0] + k[1][1] * p[1] + k[1][2] * p[2];
    let w = k[2][0] * p[0] + k[2][1] * p[1] + k[2][2] * p[2];
    [x / w, y / w]
}

/// Intrinsics for a square frame of `size` pixels; pixel centres sit at
/// integer coordinates so the principal point is `(size - 1) / 2`.
pub fn default_intrinsics(size: usize) -> [[f64; 3]; 3] {
    let f = 1.15 * size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    [[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]]
}

/// Maps a pixel coordinate between resolutions under the pixel-centre
/// convention.
pub fn rescale_pixel(p: f64, from: usize, to: usize) -> f64 {
    (p + 0.5) * (to as f64 / from as f64) - 0.5
}

/// Intrinsics re-expressed for a `to_w × to_h` raster of the same view.
pub fn rescale_intrinsics(k: &[[f64; 3]; 3], from: (usize, usize), to: (usize, usize)) -> [[f64; 3]; 3] {
    let sx = to.0 as f64 / from.0 as f64;
    let sy = to.1 as f64 / from.1 as f64;
    let mut out = *k;
    for c in 0..3 {
        out[0][c] = sx * k[0][c] + (0.5 * sx - 0.5) * k[2][c];
        out[1][c] = sy * k[1][c] + (0.5 * sy - 0.5) * k[2][c];
    }
    out
}

impl SceneSample {
    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.intrinsics[i][j])
    }

    pub fn object_pose_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.object_pose[i][j])
    }

    pub fn interacting(&self) -> bool {
        self.hand_present[0] && self.hand_present[1]
    }

    pub fn joint(&self, hand: usize, j: usize) -> Vector3<f64> {
        Vector3::from(self.joints3d[hand][j])
    }

    /// Joints of one hand relative to its own root.
    pub fn root_relative(&self, hand: usize) -> [Vector3<f64>; NUM_JOINTS] {
        let root = self.joint(hand, 0);
        std::array::from_fn(|j| self.joint(hand, j) - root)
    }

    /// Left root expressed relative to the right root.
    pub fn t_lr(&self) -> Vector3<f64> {
        self.joint(0, 0) - self.joint(1, 0)
    }

    pub fn num_visible(&self) -> usize {
        self.visibility.iter().flatten().filter(|&&v| v).count()
    }

    pub fn empty(width: usize, height: usize, intrinsics: [[f64; 3]; 3]) -> Self {
        let mut identity = [[0.0; 4]; 4];
        for (i, row) in identity.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            rng_seed: 0,
            width,
            height,
            image: Vec::new(),
            joints3d: [[[0.0; 3]; NUM_JOINTS]; 2],
            joints2d: [[[0.0; 2]; NUM_JOINTS]; 2],
            visibility: [[false; NUM_JOINTS]; 2],
            hand_present: [false; 2],
            intrinsics,
            z_root: [0.0; 2],
            theta: [[[0.0; 3]; NUM_ARTICULATED]; 2],
            shape_scale: 1.0,
            object_present: false,
            object_id: 0,
            object_pose: identity,
        }
    }

    /// Re-derives 2D joints, z_root, the image and the visibility flags
    /// from the 3D geometry.
    pub fn finalize(&mut self) {
        for h in 0..2 {
            if self.hand_present[h] {
                for j in 0..NUM_JOINTS {
                    self.joints2d[h][j] = project(&self.intrinsics, &self.joints3d[h][j]);
                }
                self.z_root[h] = self.joints3d[h][0][2];
            }
        }
        let raster = rasterize(self, self.width, self.height, &self.intrinsics);
        for h in 0..2 {
            for j in 0..NUM_JOINTS {
                self.visibility[h][j] = self.hand_present[h] && {
                    let [x, y] = self.joints2d[h][j];
                    let (px, py) = (x.round(), y.round());
                    px >= 0.0
                        && py >= 0.0
                        && (px as usize) < self.width
                        && (py as usize) < self.height
                        && raster.owner[py as usize * self.width + px as usize] == Owner::Joint { hand: h as u8, joint: j as u8 }.code()
                };
            }
        }
        self.image = raster.image;
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sample_theta(rng: &mut ChaCha8Rng, template: &HandSkeletonTemplate, zero: bool) -> [Vector3<f64>; NUM_ARTICULATED] {
    std::array::from_fn(|a| {
        if zero {
            Vector3::zeros()
        } else {
            let l = template.joint_angle_limits[a];
            Vector3::new(uniform(rng, l[0]), uniform(rng, l[1]), uniform(rng, l[2]))
        }
    })
}

fn in_frame(p: [f64; 2], size: usize, margin: f64) -> bool {
    let hi = size as f64 - 1.0 - margin;
    p[0] >= margin && p[1] >= margin && p[0] <= hi && p[1] <= hi
}

/// Draws a deterministic scene for `seed`.
pub fn sample_scene(seed: u64, config: &SceneConfig) -> Result<SceneSample> {
    if config.image_size < 8 {
        return Err(KptError::InvalidConfig(format!("image_size {} is too small", config.image_size)));
    }
    let catalog = object_catalog();
    if let Some(id) = config.object_id {
        if id as usize >= catalog.len() {
            return Err(KptError::InvalidConfig(format!("object_id {id} outside catalog of {}", catalog.len())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_TRIES {
        if let Some(mut sample) = try_scene(&mut rng, config, &catalog) {
            sample.rng_seed = seed;
            sample.finalize();
            return Ok(sample);
        }
    }
    Err(KptError::GenerationFailure { tries: MAX_TRIES })
}

fn try_scene(rng: &mut ChaCha8Rng, config: &SceneConfig, catalog: &[ObjectModel]) -> Option<SceneSample> {
    let size = config.image_size;
    let k = default_intrinsics(size);
    let mut s = SceneSample::empty(size, size, k);
    let present = match config.hands {
        HandMode::Inter => [true, true],
        HandMode::Single => {
            let right = rng.gen_bool(0.5);
            [!right, right]
        }
        HandMode::Mixed => {
            if rng.gen_bool(0.5) {
                [true, true]
            } else {
                let right = rng.gen_bool(0.5);
                [!right, right]
            }
        }
    };
    s.hand_present = present;
    s.shape_scale = if config.zero_pose { 1.0 } else { rng.gen_range(0.85..1.15) };
    let beta = uniform_shape(s.shape_scale);
    let both = present[0] && present[1];
    let right_template = HandSkeletonTemplate::new(Hand::Right);
    let mut roots = [Vector3::zeros(); 2];
    for hand in Hand::BOTH {
        let h = hand.index();
        if !present[h] {
            continue;
        }
        // sampled in the right-hand convention and mirrored for the left
        let theta_r = sample_theta(rng, &right_template, config.zero_pose);
        let theta = match hand {
            Hand::Right => theta_r,
            Hand::Left => theta_r.map(mirror_axis_angle),
        };
        let x = if both { rng.gen_range(25.0..60.0) } else { rng.gen_range(-15.0..15.0) };
        let x = if hand == Hand::Left { -x } else { x };
        let root = Vector3::new(x, rng.gen_range(55.0..85.0), uniform(rng, config.depth_range));
        roots[h] = root;
        let template = HandSkeletonTemplate::new(hand);
        let joints = template.forward_kinematics(&theta, &beta);
        for j in 0..NUM_JOINTS {
            s.joints3d[h][j] = (root + joints[j]).into();
            if !in_frame(project(&k, &s.joints3d[h][j]), size, 1.0) {
                return None;
            }
        }
        for (a, t) in theta.iter().enumerate() {
            s.theta[h][a] = (*t).into();
        }
    }
    if config.object {
        let id = config.object_id.unwrap_or_else(|| rng.gen_range(0..catalog.len() as u8));
        let model = &catalog[id as usize];
        let n = present.iter().filter(|&&p| p).count() as f64;
        let mean_root = (roots[0] + roots[1]) / n;
        let min_z = (0..2).filter(|&h| present[h]).map(|h| roots[h].z).fold(f64::INFINITY, f64::min);
        let center = Vector3::new(
            mean_root.x + rng.gen_range(-15.0..15.0),
            mean_root.y - rng.gen_range(50.0..90.0),
            min_z - rng.gen_range(40.0..80.0),
        );
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
        let pose = rigid(q.to_rotation_matrix().matrix(), &center);
        for c in model.transformed_corners(&pose) {
            if c.z < 50.0 || !in_frame(project(&k, &c.into()), size, 0.0) {
                return None;
            }
        }
        s.object_present = true;
        s.object_id = id;
        s.object_pose = std::array::from_fn(|i| std::array::from_fn(|j| pose[(i, j)]));
    }
    Some(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescaled_intrinsics_match_pixel_map() {
        let k = default_intrinsics(64);
        let k2 = rescale_intrinsics(&k, (64, 64), (32, 32));
        let p = [12.0, -30.0, 450.0];
        let a = project(&k, &p);
        let b = project(&k2, &p);
        assert!((rescale_pixel(a[0], 64, 32) - b[0]).abs() < 1e-12);
        assert!((rescale_pixel(a[1], 64, 32) - b[1]).abs() < 1e-12);
    }

    #[test]
    fn modes_set_presence() {
        let inter = sample_scene(3, &SceneConfig::default()).unwrap();
        assert_eq!(inter.hand_present, [true, true]);
        let single = sample_scene(3, &SceneConfig { hands: HandMode::Single, ..Default::default() }).unwrap();
        assert_eq!(single.hand_present.iter().filter(|&&p| p).count(), 1);
    }

    #[test]
    fn invalid_object_id_rejected() {
        let cfg = SceneConfig { object_id: Some(99), ..Default::default() };
        assert!(matches!(sample_scene(0, &cfg), Err(KptError::InvalidConfig(_))));
    }
}
