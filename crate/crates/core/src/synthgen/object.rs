//! Box-shaped rigid objects with discrete symmetry groups.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{KptError, Result};

const GROUP_TOL: f64 = 1e-9;
const MAX_GROUP_SIZE: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub name: String,
    pub half_extents: Vector3<f64>,
    /// Closed under composition; identity first.
    pub symmetries: Vec<Matrix3<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ObjectFile {
    name: String,
    half_extents: [f64; 3],
    symmetries: Vec<[[f64; 3]; 3]>,
}

fn close_enough(a: &Matrix3<f64>, b: &Matrix3<f64>) -> bool {
    (a - b).abs().max() < GROUP_TOL.sqrt()
}

/// Closes a set of rotations under composition, starting from identity.
/// Reports an error if the closure does not terminate within a bounded size.
pub fn close_group(generators: &[Matrix3<f64>]) -> Result<Vec<Matrix3<f64>>> {
    let mut group = vec![Matrix3::identity()];
    for g in generators {
        if !group.iter().any(|h| close_enough(h, g)) {
            group.push(*g);
        }
    }
    let mut frontier = 0;
    while frontier < group.len() {
        let a = group[frontier];
        let mut k = 0;
        while k < group.len() {
            for prod in [a * group[k], group[k] * a] {
                if !group.iter().any(|h| close_enough(h, &prod)) {
                    group.push(prod);
                    if group.len() > MAX_GROUP_SIZE {
                        return Err(KptError::InvalidModel("symmetry set does not close to a finite group".into()));
                    }
                }
            }
            k += 1;
        }
        frontier += 1;
    }
    Ok(group)
}

fn check_rotation(m: &Matrix3<f64>) -> Result<()> {
    let residual = (m.transpose() * m - Matrix3::identity()).abs().max();
    if residual > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
        return Err(KptError::InvalidModel(format!("symmetry {m:?} is not a proper rotation")));
    }
    Ok(())
}

fn rot(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::new(axis * angle).into_inner()
}

impl ObjectModel {
    pub fn new(name: &str, half_extents: [f64; 3], generators: &[Matrix3<f64>]) -> Result<Self> {
        if half_extents.iter().any(|&e| !(e > 0.0)) {
            return Err(KptError::InvalidModel(format!("half extents must be positive, got {half_extents:?}")));
        }
        for g in generators {
            check_rotation(g)?;
        }
        Ok(Self {
            name: name.to_string(),
            half_extents: Vector3::from(half_extents),
            symmetries: close_group(generators)?,
        })
    }

    /// The 8 sign combinations of the half extents; bit k of the index
    /// selects the sign of axis k.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        std::array::from_fn(|i| {
            let s = |k: usize| if i >> k & 1 == 1 { 1.0 } else { -1.0 };
            Vector3::new(s(0) * self.half_extents.x, s(1) * self.half_extents.y, s(2) * self.half_extents.z)
        })
    }

    pub fn diagonal(&self) -> f64 {
        2.0 * self.half_extents.norm()
    }

    /// Corners in the camera frame under a rigid transform.
    pub fn transformed_corners(&self, pose: &Matrix4<f64>) -> [Vector3<f64>; 8] {
        self.corners().map(|c| transform_point(pose, &c))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KptError::io(path, e))?;
        let file: ObjectFile = serde_json::from_str(&text).map_err(|e| KptError::Parse(format!("{}: {e}", path.display())))?;
        let gens: Vec<Matrix3<f64>> = file.symmetries.iter().map(|r| Matrix3::from_fn(|i, j| r[i][j])).collect();
        Self::new(&file.name, file.half_extents, &gens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ObjectFile {
            name: self.name.clone(),
            half_extents: self.half_extents.into(),
            symmetries: self.symmetries.iter().map(|m| std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))).collect(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| KptError::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| KptError::io(path, e))
    }
}

pub fn transform_point(pose: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let r = pose.fixed_view::<3, 3>(0, 0);
    let t = pose.fixed_view::<3, 1>(0, 3);
    r * p + t
}

pub fn rigid(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    m
}

/// Pose with the rotation post-multiplied by a symmetry: `P · S`.
pub fn compose_symmetry(pose: &Matrix4<f64>, sym: &Matrix3<f64>) -> Matrix4<f64> {
    pose * rigid(sym, &Vector3::zeros())
}

/// Built-in catalog; the index is the object id stored in samples.
pub fn object_catalog() -> Vec<ObjectModel> {
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    let pi = std::f64::consts::PI;
    let build = |name: &str, ext: [f64; 3], gens: Vec<Matrix3<f64>>| ObjectModel::new(name, ext, &gens).expect("catalog model is valid");
    vec![
        build("box", [22.0, 15.0, 33.0], vec![]),
        build("bottle", [18.0, 18.0, 45.0], vec![rot(z, pi)]),
        build("cracker", [27.0, 12.0, 37.0], vec![rot(x, pi), rot(y, pi), rot(z, pi)]),
        build("bowl", [30.0, 30.0, 15.0], vec![rot(z, 2.0 * pi / 36.0)]),
    ]
}
