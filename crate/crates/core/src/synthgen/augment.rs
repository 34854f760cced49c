//! Geometric augmentation applied consistently to pixels and annotations.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::BACKGROUND;
use super::scene::{project, SceneSample};
use super::skeleton::{mirror_axis_angle, NUM_JOINTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// In-plane rotation about the principal point; magnitude in degrees.
    Rotate,
    /// Zoom about the principal point; magnitude is the scale factor.
    Scale,
    /// Horizontal flip; magnitude ignored.
    Mirror,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mirror_prob: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, mirror_prob: 0.5, max_rotation_deg: 30.0, scale_range: (0.8, 1.2) }
    }
}

fn to_array3(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn reproject(s: &mut SceneSample, keep_visibility: bool) {
    for h in 0..2 {
        if !s.hand_present[h] {
            continue;
        }
        for j in 0..NUM_JOINTS {
            let p = project(&s.intrinsics, &s.joints3d[h][j]);
            s.joints2d[h][j] = p;
            let (x, y) = (p[0].round(), p[1].round());
            let inside = x >= 0.0 && y >= 0.0 && x < s.width as f64 && y < s.height as f64;
            s.visibility[h][j] = keep_visibility && s.visibility[h][j] && inside;
        }
        s.z_root[h] = s.joints3d[h][0][2];
    }
}

/// Resamples the image: `out(p) = in(map(p))`, background outside.
fn resample(s: &SceneSample, map: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f32> {
    let (w, h) = (s.width, s.height);
    let n = w * h;
    let mut out = vec![0.0f32; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64, y as f64);
            let i = y * w + x;
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                for c in 0..3 {
                    out[c * n + i] = BACKGROUND[c];
                }
                continue;
            }
            let px = sx.clamp(0.0, w as f64 - 1.0);
            let py = sy.clamp(0.0, h as f64 - 1.0);
            let x0 = (px.floor() as usize).min(w - 1);
            let y0 = (py.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = (px - x0 as f64) as f32;
            let fy = (py - y0 as f64) as f32;
            for c in 0..3 {
                let img = &s.image[c * n..(c + 1) * n];
                let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
                let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
                out[c * n + i] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn principal_point(s: &SceneSample) -> (f64, f64) {
    (s.intrinsics[0][2], s.intrinsics[1][2])
}

fn rotate(s: &SceneSample, degrees: f64) -> SceneSample {
    let phi = degrees.to_radians();
    let (sin, cos) = phi.sin_cos();
    let rz = Matrix3::new(cos, -sin, 0.0, sin, cos, 0.0, 0.0, 0.0, 1.0);
    let mut out = s.clone();
    for h in 0..2 {
        if !s.hand_present[h] {
            continue;
        }
        for j in 0..NUM_JOINTS {
            out.joints3d[h][j] = (rz * Vector3::from(s.joints3d[h][j])).into();
        }
        let wrist = Rotation3::new(Vector3::from(s.theta[h][0]));
        let composed = Rotation3::from_matrix_unchecked(rz * wrist.matrix());
        out.theta[h][0] = composed.scaled_axis().into();
    }
    if s.object_present {
        let mut r4 = Matrix4::identity();
        r4.fixed_view_mut::<3, 3>(0, 0).copy_from(&rz);
        out.object_pose = to_array3(&(r4 * s.object_pose_matrix()));
    }
    reproject(&mut out, true);
    let (cx, cy) = principal_point(s);
    out.image = resample(s, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
    });
    out
}

fn scale(s: &SceneSample, factor: f64) -> SceneSample {
    let mut out = s.clone();
    out.intrinsics[0][0] *= factor;
    out.intrinsics[1][1] *= factor;
    out.intrinsics[0][1] *= factor;
    reproject(&mut out, true);
    let (cx, cy) = principal_point(s);
    out.image = resample(s, |x, y| (cx + (x - cx) / factor, cy + (y - cy) / factor));
    out
}

fn mirror(s: &SceneSample) -> SceneSample {
    let mut out = s.clone();
    let flip = |p: [f64; 3]| [-p[0], p[1], p[2]];
    for h in 0..2 {
        let src = 1 - h;
        out.hand_present[h] = s.hand_present[src];
        out.visibility[h] = s.visibility[src];
        out.z_root[h] = s.z_root[src];
        out.joints3d[h] = s.joints3d[src].map(flip);
        out.theta[h] = s.theta[src].map(|t| mirror_axis_angle(Vector3::from(t)).into());
        out.joints2d[h] = s.joints2d[src];
    }
    out.intrinsics[0][2] = s.width as f64 - 1.0 - s.intrinsics[0][2];
    out.intrinsics[0][1] = -s.intrinsics[0][1];
    if s.object_present {
        let m = Matrix4::from_diagonal(&nalgebra::Vector4::new(-1.0, 1.0, 1.0, 1.0));
        out.object_pose = to_array3(&(m * s.object_pose_matrix() * m));
    }
    reproject(&mut out, true);
    let (w, h) = (s.width, s.height);
    let n = w * h;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.image[c * n + y * w + x] = s.image[c * n + y * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Applies one augmentation. Mirroring swaps the hand labels, so the
/// relative translation between the roots changes sign in x.
pub fn augment(sample: &SceneSample, kind: AugmentKind, magnitude: f64) -> SceneSample {
    match kind {
        AugmentKind::Rotate => rotate(sample, magnitude),
        AugmentKind::Scale => scale(sample, magnitude),
        AugmentKind::Mirror => mirror(sample),
    }
}

/// Draws mirror, rotation and scale from the configured ranges for `seed`
/// and applies them in that order.
pub fn random_augment(sample: &SceneSample, config: &AugmentConfig, seed: u64) -> SceneSample {
    if !config.enabled {
        return sample.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    if rng.gen_bool(config.mirror_prob.clamp(0.0, 1.0)) {
        out = mirror(&out);
    }
    if config.max_rotation_deg > 0.0 {
        let a = rng.gen_range(-config.max_rotation_deg..=config.max_rotation_deg);
        out = rotate(&out, a);
    }
    let (lo, hi) = config.scale_range;
    if hi > lo {
        out = scale(&out, rng.gen_range(lo..=hi));
    }
    out
}
