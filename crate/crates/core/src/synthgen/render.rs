//! Painter's-order rasterizer: joint discs, bone segments, box silhouettes.

use nalgebra::Vector3;

use super::object::object_catalog;
use super::scene::{project, SceneSample};
use super::skeleton::{NUM_JOINTS, PARENTS};

pub const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.1];
pub const OBJECT_COLOR: [f32; 3] = [0.2, 0.85, 0.35];
const HAND_BASE: [[f32; 3]; 2] = [[0.25, 0.55, 0.95], [0.95, 0.45, 0.25]];

const JOINT_RADIUS_MM: f64 = 8.0;
const BONE_HALF_WIDTH_MM: f64 = 4.0;
/// Bones are pushed behind both endpoints so a joint disc always covers
/// its incident bones.
const BONE_DEPTH_BIAS_MM: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Background,
    Object,
    Joint { hand: u8, joint: u8 },
    Bone { hand: u8, joint: u8 },
}

impl Owner {
    pub fn code(self) -> u16 {
        match self {
            Owner::Background => 0,
            Owner::Object => 1,
            Owner::Joint { hand, joint } => 2 + hand as u16 * 64 + joint as u16,
            Owner::Bone { hand, joint } => 2 + hand as u16 * 64 + 32 + joint as u16,
        }
    }
}

pub fn joint_color(hand: usize, joint: usize) -> [f32; 3] {
    let shade = 0.7 + 0.3 * joint as f32 / (NUM_JOINTS - 1) as f32;
    HAND_BASE[hand].map(|c| c * shade)
}

pub fn bone_color(hand: usize) -> [f32; 3] {
    HAND_BASE[hand].map(|c| c * 0.6)
}

pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Channel-major RGB.
    pub image: Vec<f32>,
    pub owner: Vec<u16>,
}

impl Raster {
    fn new(width: usize, height: usize) -> Self {
        let mut image = vec![0.0; 3 * width * height];
        for (c, &v) in BACKGROUND.iter().enumerate() {
            image[c * width * height..(c + 1) * width * height].fill(v);
        }
        Self { width, height, image, owner: vec![0; width * height] }
    }

    fn blend(&mut self, x: usize, y: usize, color: [f32; 3], alpha: f32, owner: Owner) {
        if alpha <= 0.0 {
            return;
        }
        let n = self.width * self.height;
        let i = y * self.width + x;
        for (c, &v) in color.iter().enumerate() {
            let px = &mut self.image[c * n + i];
            *px = *px * (1.0 - alpha) + v * alpha;
        }
        self.owner[i] = owner.code();
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.image[i], self.image[n + i], self.image[2 * n + i]]
    }

    fn bbox(&self, lo: [f64; 2], hi: [f64; 2]) -> Option<(usize, usize, usize, usize)> {
        let x0 = lo[0].floor().max(0.0);
        let y0 = lo[1].floor().max(0.0);
        let x1 = hi[0].ceil().min(self.width as f64 - 1.0);
        let y1 = hi[1].ceil().min(self.height as f64 - 1.0);
        (x0 <= x1 && y0 <= y1).then(|| (x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

enum Shape {
    Disc { c: [f64; 2], r: f64, color: [f32; 3] },
    Segment { a: [f64; 2], b: [f64; 2], hw: f64, color: [f32; 3] },
    Polygon { pts: Vec<[f64; 2]> },
}

struct Element {
    depth: f64,
    owner: Owner,
    shape: Shape,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Monotone-chain convex hull, counter-clockwise in (x, y).
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

fn coverage(edge: f64, d: f64) -> f32 {
    (edge + 0.5 - d).clamp(0.0, 1.0) as f32
}

fn draw(raster: &mut Raster, e: &Element) {
    match &e.shape {
        Shape::Disc { c, r, color } => {
            let Some((x0, y0, x1, y1)) = raster.bbox([c[0] - r - 1.0, c[1] - r - 1.0], [c[0] + r + 1.0, c[1] + r + 1.0]) else {
                return;
            };
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2)).sqrt();
                    let shade = (1.0 - 0.35 * (d / r).min(1.0).powi(2)) as f32;
                    raster.blend(x, y, color.map(|v| v * shade), coverage(*r, d), e.owner);
                }
            }
        }
        Shape::Segment { a, b, hw, color } => {
            let lo = [a[0].min(b[0]) - hw - 1.0, a[1].min(b[1]) - hw - 1.0];
            let hi = [a[0].max(b[0]) + hw + 1.0, a[1].max(b[1]) + hw + 1.0];
            let Some((x0, y0, x1, y1)) = raster.bbox(lo, hi) else { return };
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = segment_distance([x as f64, y as f64], *a, *b);
                    raster.blend(x, y, *color, coverage(*hw, d), e.owner);
                }
            }
        }
        Shape::Polygon { pts } => {
            let lo = pts.iter().fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
            let hi = pts.iter().fold([f64::NEG_INFINITY; 2], |m, p| [m[0].max(p[0]), m[1].max(p[1])]);
            let Some((x0, y0, x1, y1)) = raster.bbox(lo, hi) else { return };
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = [x as f64, y as f64];
                    let inside = (0..pts.len()).all(|i| cross(pts[i], pts[(i + 1) % pts.len()], p) >= 0.0);
                    if inside {
                        raster.blend(x, y, OBJECT_COLOR, 1.0, e.owner);
                    }
                }
            }
        }
    }
}

/// Rasterizes the scene geometry of `sample` into a `width × height` frame
/// seen through intrinsics `k`.
pub fn rasterize(sample: &SceneSample, width: usize, height: usize, k: &[[f64; 3]; 3]) -> Raster {
    let mut raster = Raster::new(width, height);
    let focal = k[0][0];
    let mut elements = Vec::new();
    for h in 0..2 {
        if !sample.hand_present[h] {
            continue;
        }
        let joints = &sample.joints3d[h];
        for j in 0..NUM_JOINTS {
            let z = joints[j][2];
            if z <= 1.0 {
                continue;
            }
            elements.push(Element {
                depth: z,
                owner: Owner::Joint { hand: h as u8, joint: j as u8 },
                shape: Shape::Disc {
                    c: project(k, &joints[j]),
                    r: (JOINT_RADIUS_MM * focal / z).max(0.75),
                    color: joint_color(h, j),
                },
            });
            if let Some(p) = PARENTS[j] {
                let zp = joints[p][2];
                if zp <= 1.0 {
                    continue;
                }
                elements.push(Element {
                    depth: z.max(zp) + BONE_DEPTH_BIAS_MM,
                    owner: Owner::Bone { hand: h as u8, joint: j as u8 },
                    shape: Shape::Segment {
                        a: project(k, &joints[p]),
                        b: project(k, &joints[j]),
                        hw: (BONE_HALF_WIDTH_MM * focal / (0.5 * (z + zp))).max(0.4),
                        color: bone_color(h),
                    },
                });
            }
        }
    }
    if sample.object_present {
        let catalog = object_catalog();
        if let Some(model) = catalog.get(sample.object_id as usize) {
            let pose = sample.object_pose_matrix();
            let corners = model.transformed_corners(&pose);
            if corners.iter().all(|c| c.z > 1.0) {
                let center: Vector3<f64> = pose.fixed_view::<3, 1>(0, 3).into();
                elements.push(Element {
                    depth: center.z,
                    owner: Owner::Object,
                    shape: Shape::Polygon { pts: convex_hull(corners.iter().map(|c| project(k, &(*c).into())).collect()) },
                });
            }
        }
    }
    elements.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for e in &elements {
        draw(&mut raster, e);
    }
    raster
}

pub fn render_image(sample: &SceneSample) -> Vec<f32> {
    rasterize(sample, sample.width, sample.height, &sample.intrinsics).image
}
