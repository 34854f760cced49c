//! Ground-truth heatmaps and segmentation masks at an arbitrary resolution.

use super::render::{rasterize, Owner};
use super::scene::{rescale_intrinsics, rescale_pixel, SceneSample};
use super::skeleton::NUM_JOINTS;

pub const DEFAULT_SIGMA: f64 = 2.0;

/// Max-combined Gaussians, `exp(−d²/2σ²)` per visible point, row-major
/// `h × w`. Points are in pixels of the target resolution.
pub fn gaussian_heatmap(points: &[[f64; 2]], visible: &[bool], sigma: f64, w: usize, h: usize) -> Vec<f32> {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut map = vec![0.0f32; w * h];
    let reach = (4.0 * sigma).ceil();
    for (p, _) in points.iter().zip(visible).filter(|(_, &v)| v) {
        let x0 = (p[0] - reach).floor().max(0.0) as usize;
        let y0 = (p[1] - reach).floor().max(0.0) as usize;
        let x1 = ((p[0] + reach).ceil().max(-1.0) as isize).min(w as isize - 1);
        let y1 = ((p[1] + reach).ceil().max(-1.0) as isize).min(h as isize - 1);
        for y in y0 as isize..=y1 {
            for x in x0 as isize..=x1 {
                let d2 = (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                let cell = &mut map[y as usize * w + x as usize];
                *cell = cell.max(v);
            }
        }
    }
    map
}

/// Joint reprojections mapped to a `w × h` raster (pixel-centre convention).
pub fn joints_at_resolution(sample: &SceneSample, w: usize, h: usize) -> [[[f64; 2]; NUM_JOINTS]; 2] {
    sample.joints2d.map(|hand| hand.map(|p| [rescale_pixel(p[0], sample.width, w), rescale_pixel(p[1], sample.height, h)]))
}

/// Ground-truth hand heatmap over all visible joints of both hands.
pub fn sample_heatmap(sample: &SceneSample, sigma: f64, w: usize, h: usize) -> Vec<f32> {
    let pts = joints_at_resolution(sample, w, h);
    let flat: Vec<[f64; 2]> = pts.iter().flatten().copied().collect();
    let vis: Vec<bool> = sample.visibility.iter().flatten().copied().collect();
    gaussian_heatmap(&flat, &vis, sigma, w, h)
}

/// Binary mask of object pixels not hidden by nearer hand elements.
pub fn object_segmentation_mask(sample: &SceneSample, w: usize, h: usize) -> Vec<f32> {
    if !sample.object_present {
        return vec![0.0; w * h];
    }
    let k = rescale_intrinsics(&sample.intrinsics, (sample.width, sample.height), (w, h));
    let raster = rasterize(sample, w, h, &k);
    let object = Owner::Object.code();
    raster.owner.iter().map(|&o| if o == object { 1.0 } else { 0.0 }).collect()
}
