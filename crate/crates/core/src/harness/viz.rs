//! SVG renderings of one sample's inference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::eval::SampleTrace;
use crate::error::{KptError, Result};
use crate::frontend::Keypoint;
use crate::synthgen::{project, SceneSample, NUM_JOINTS, PARENTS};

/// Display pixels per image pixel.
const ZOOM: f64 = 6.0;
/// Radius of a circle for the strongest attention weight, in image pixels.
const MAX_RADIUS: f64 = 3.0;

/// Keypoint location in image pixel coordinates.
pub fn keypoint_center(k: &Keypoint, image_w: usize, image_h: usize) -> [f64; 2] {
    k.pixel(image_w, image_h)
}

/// Circle radii proportional to the weights, the largest weight mapping to
/// `max_radius`. All radii are zero for an all-zero row.
pub fn attention_radii(weights: &[f64], max_radius: f64) -> Vec<f64> {
    let max = weights.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0.0; weights.len()];
    }
    weights.iter().map(|w| max_radius * w.max(0.0) / max).collect()
}

fn open(out: &mut String, w: usize, h: usize) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="-0.5 -0.5 {w} {h}">"#,
        w as f64 * ZOOM,
        h as f64 * ZOOM
    );
}

fn image_layer(out: &mut String, s: &SceneSample) {
    let plane = s.width * s.height;
    for y in 0..s.height {
        for x in 0..s.width {
            let i = y * s.width + x;
            let c = [0, 1, 2].map(|ch| (s.image[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            let _ = writeln!(out, r#"<rect x="{}" y="{}" width="1" height="1" fill="rgb({},{},{})"/>"#, x as f64 - 0.5, y as f64 - 0.5, c[0], c[1], c[2]);
        }
    }
}

fn hand_color(h: usize) -> &'static str {
    if h == 0 {
        "#3b82f6"
    } else {
        "#ef4444"
    }
}

/// Predicted heatmap in red over the image, detected keypoints as rings.
pub fn heatmap_svg(s: &SceneSample, t: &SampleTrace, heatmap_size: usize) -> String {
    let mut out = String::new();
    open(&mut out, s.width, s.height);
    image_layer(&mut out, s);
    let cell = s.width as f64 / heatmap_size as f64;
    for y in 0..heatmap_size {
        for x in 0..heatmap_size {
            let v = t.heatmap[y * heatmap_size + x].clamp(0.0, 1.0);
            if v > 0.01 {
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.3}" y="{:.3}" width="{cell}" height="{cell}" fill="red" fill-opacity="{v:.3}"/>"#,
                    x as f64 * cell - 0.5,
                    y as f64 * cell - 0.5
                );
            }
        }
    }
    for k in &t.keypoints {
        let [cx, cy] = keypoint_center(k, s.width, s.height);
        let _ = writeln!(out, r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="1" fill="none" stroke="yellow" stroke-width="0.3"/>"#);
    }
    out.push_str("</svg>\n");
    out
}

fn skeleton(out: &mut String, pts: &[[f64; 2]; NUM_JOINTS], color: &str, dash: bool) {
    let style = if dash { r#" stroke-dasharray="1 0.5""# } else { "" };
    for (j, p) in PARENTS.iter().enumerate() {
        if let Some(p) = p {
            let (a, b) = (pts[*p], pts[j]);
            let _ = writeln!(out, r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{color}" stroke-width="0.4"{style}/>"#, a[0], a[1], b[0], b[1]);
        }
    }
}

/// Ground truth solid, prediction dashed. The predicted root-relative
/// hands are placed at the ground-truth roots before projection.
pub fn skeleton_svg(s: &SceneSample, t: &SampleTrace) -> String {
    let mut out = String::new();
    open(&mut out, s.width, s.height);
    image_layer(&mut out, s);
    for h in 0..2 {
        if !s.hand_present[h] {
            continue;
        }
        let gt: [[f64; 2]; NUM_JOINTS] = std::array::from_fn(|j| s.joints2d[h][j]);
        skeleton(&mut out, &gt, hand_color(h), false);
        let root = s.joints3d[h][0];
        let pr = &t.prediction.hands[h];
        let pred: [[f64; 2]; NUM_JOINTS] = std::array::from_fn(|j| project(&s.intrinsics, &std::array::from_fn(|c| pr[j][c] - pr[0][c] + root[c])));
        skeleton(&mut out, &pred, "white", true);
    }
    out.push_str("</svg>\n");
    out
}

/// One group of colored circles per query, radius scaled to its weights.
pub fn attention_svg(s: &SceneSample, t: &SampleTrace, queries: &[usize]) -> String {
    let mut out = String::new();
    open(&mut out, s.width, s.height);
    image_layer(&mut out, s);
    let n = queries.len().max(1) as f64;
    for (qi, &q) in queries.iter().enumerate() {
        let Some(row) = t.cross_attention.get(q) else { continue };
        let hue = 360.0 * qi as f64 / n;
        let _ = writeln!(out, r#"<g id="query-{q}">"#);
        for (k, r) in t.keypoints.iter().zip(attention_radii(row, MAX_RADIUS)) {
            if r > 0.0 {
                let [cx, cy] = keypoint_center(k, s.width, s.height);
                let _ = writeln!(out, r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="{r:.4}" fill="hsl({hue:.0},90%,55%)" fill-opacity="0.45"/>"#);
            }
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Serialize)]
struct AttentionDump<'a> {
    keypoints: &'a [Keypoint],
    weights: &'a [Vec<f64>],
}

/// Writes `heatmap.svg`, `skeleton.svg`, `attention.svg` and
/// `attention.json` into `dir`.
pub fn write_all(dir: &Path, s: &SceneSample, t: &SampleTrace, heatmap_size: usize, queries: &[usize]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| KptError::io(dir, e))?;
    let json = serde_json::to_string_pretty(&AttentionDump { keypoints: &t.keypoints, weights: &t.cross_attention }).expect("attention serializes");
    let files = [
        ("heatmap.svg", heatmap_svg(s, t, heatmap_size)),
        ("skeleton.svg", skeleton_svg(s, t)),
        ("attention.svg", attention_svg(s, t, queries)),
        ("attention.json", json),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| KptError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radii_scale_to_max() {
        let r = attention_radii(&[0.5, 0.25, 0.25], 2.0);
        assert_eq!(r, vec![2.0, 1.0, 1.0]);
        assert_eq!(attention_radii(&[0.0, 0.0], 2.0), vec![0.0, 0.0]);
    }
}
