//! 21-joint hand skeleton with a linear bone-length shape basis.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub const NUM_JOINTS: usize = 21;
pub const NUM_BONES: usize = 20;
pub const NUM_ARTICULATED: usize = 16;
pub const SHAPE_DIM: usize = 10;

/// Parent of each joint; the wrist (0) is the root. Fingers are ordered
/// thumb, index, middle, ring, pinky, four joints each, base to tip.
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(0),
    Some(5),
    Some(6),
    Some(7),
    Some(0),
    Some(9),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
    Some(15),
    Some(0),
    Some(17),
    Some(18),
    Some(19),
];

/// Joints that carry a rotation: the wrist and the first three joints of
/// every finger. Fingertips are not articulated.
pub const ARTICULATED: [usize; NUM_ARTICULATED] = [0, 1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19];

/// Index into [`ARTICULATED`] for a joint, if it is articulated.
pub fn articulation_index(joint: usize) -> Option<usize> {
    ARTICULATED.iter().position(|&j| j == joint)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Hand {
    Left = 0,
    Right = 1,
}

impl Hand {
    pub const BOTH: [Hand; 2] = [Hand::Left, Hand::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> Hand {
        match self {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
        }
    }
}

/// Right-hand rest pose in millimetres: x right, y down, z away from the
/// camera; fingers point up (−y) with the palm facing the camera.
const RIGHT_REST: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [20.0, -15.0, -5.0],
    [35.0, -30.0, -8.0],
    [45.0, -45.0, -10.0],
    [52.0, -58.0, -11.0],
    [22.0, -75.0, 0.0],
    [25.0, -112.0, 0.0],
    [26.0, -135.0, 0.0],
    [27.0, -155.0, 0.0],
    [5.0, -78.0, 0.0],
    [6.0, -120.0, 0.0],
    [6.0, -147.0, 0.0],
    [6.0, -168.0, 0.0],
    [-11.0, -74.0, 0.0],
    [-13.0, -112.0, 0.0],
    [-14.0, -137.0, 0.0],
    [-15.0, -157.0, 0.0],
    [-25.0, -66.0, 0.0],
    [-29.0, -96.0, 0.0],
    [-31.0, -115.0, 0.0],
    [-32.0, -131.0, 0.0],
];

/// Per-component axis-angle bounds `(lo, hi)` for each articulated joint,
/// in the right-hand convention.
fn right_limits() -> [[(f64, f64); 3]; NUM_ARTICULATED] {
    let wrist = [(-0.5, 0.5), (-0.5, 0.5), (-0.7, 0.7)];
    let thumb = [
        [(-0.2, 0.6), (-0.4, 0.4), (-0.3, 0.3)],
        [(0.0, 0.8), (-0.1, 0.1), (-0.2, 0.2)],
        [(0.0, 1.0), (-0.05, 0.05), (-0.05, 0.05)],
    ];
    let finger = [
        [(-0.2, 1.2), (-0.05, 0.05), (-0.25, 0.25)],
        [(0.0, 1.4), (-0.05, 0.05), (-0.05, 0.05)],
        [(0.0, 1.0), (-0.05, 0.05), (-0.05, 0.05)],
    ];
    let mut out = [[(0.0, 0.0); 3]; NUM_ARTICULATED];
    out[0] = wrist;
    for f in 0..5 {
        for k in 0..3 {
            out[1 + 3 * f + k] = if f == 0 { thumb[k] } else { finger[k] };
        }
    }
    out
}

/// Mirror `x → −x` as it acts on positions.
pub fn mirror_point(p: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-p.x, p.y, p.z)
}

/// Mirror as it acts on an axis-angle vector (a pseudo-vector).
pub fn mirror_axis_angle(w: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(w.x, -w.y, -w.z)
}

pub fn axis_angle_matrix(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandSkeletonTemplate {
    pub hand: Hand,
    pub parent: [Option<usize>; NUM_JOINTS],
    pub rest_joints: [Vector3<f64>; NUM_JOINTS],
    pub rest_bone_lengths: [f64; NUM_BONES],
    pub joint_angle_limits: [[(f64, f64); 3]; NUM_ARTICULATED],
}

impl HandSkeletonTemplate {
    pub fn new(hand: Hand) -> Self {
        let mut rest_joints = [Vector3::zeros(); NUM_JOINTS];
        for (j, p) in RIGHT_REST.iter().enumerate() {
            let v = Vector3::new(p[0], p[1], p[2]);
            rest_joints[j] = match hand {
                Hand::Right => v,
                Hand::Left => mirror_point(v),
            };
        }
        let mut rest_bone_lengths = [0.0; NUM_BONES];
        for j in 1..NUM_JOINTS {
            let p = PARENTS[j].expect("non-root");
            rest_bone_lengths[j - 1] = (rest_joints[j] - rest_joints[p]).norm();
        }
        let mut limits = right_limits();
        if hand == Hand::Left {
            for l in &mut limits {
                l[1] = (-l[1].1, -l[1].0);
                l[2] = (-l[2].1, -l[2].0);
            }
        }
        Self {
            hand,
            parent: PARENTS,
            rest_joints,
            rest_bone_lengths,
            joint_angle_limits: limits,
        }
    }

    /// Rest offset of joint `j` from its parent (zero for the root).
    pub fn rest_offset(&self, j: usize) -> Vector3<f64> {
        match self.parent[j] {
            Some(p) => self.rest_joints[j] - self.rest_joints[p],
            None => Vector3::zeros(),
        }
    }

    pub fn mean_bone_length(&self) -> f64 {
        self.rest_bone_lengths.iter().sum::<f64>() / NUM_BONES as f64
    }

    /// Root-relative joints for axis-angle `theta` (one per articulated
    /// joint) and shape `beta`.
    pub fn forward_kinematics(&self, theta: &[Vector3<f64>; NUM_ARTICULATED], beta: &[f64; SHAPE_DIM]) -> [Vector3<f64>; NUM_JOINTS] {
        let basis = shape_basis();
        let mut global = [Matrix3::identity(); NUM_JOINTS];
        let mut pos = [Vector3::zeros(); NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let local = articulation_index(j).map_or(Matrix3::identity(), |a| axis_angle_matrix(&theta[a]));
            match self.parent[j] {
                None => global[j] = local,
                Some(p) => {
                    let scale = 1.0 + (0..SHAPE_DIM).map(|k| basis[j - 1][k] * beta[k]).sum::<f64>();
                    pos[j] = pos[p] + global[p] * (self.rest_offset(j) * scale);
                    global[j] = global[p] * local;
                }
            }
        }
        pos
    }
}

/// Linear bone-length basis, one row per bone. Column 0 scales every bone;
/// columns 1–5 scale one finger each (thumb..pinky); columns 6–9 scale one
/// segment level across all fingers (metacarpal, proximal, middle, distal).
pub fn shape_basis() -> [[f64; SHAPE_DIM]; NUM_BONES] {
    let mut w = [[0.0; SHAPE_DIM]; NUM_BONES];
    for (b, row) in w.iter_mut().enumerate() {
        let finger = b / 4;
        let level = b % 4;
        row[0] = 1.0;
        row[1 + finger] = 1.0;
        row[6 + level] = 1.0;
    }
    w
}

/// Shape vector that scales every bone uniformly by `scale`.
pub fn uniform_shape(scale: f64) -> [f64; SHAPE_DIM] {
    let mut beta = [0.0; SHAPE_DIM];
    beta[0] = scale - 1.0;
    beta
}
