//! U-Net-lite backbone, keypoint extraction and keypoint tokens.

use kpt_tensor::nn::{Bindings, Conv2d, Mlp, ParamGroup, ParamStore};
use kpt_tensor::{Graph, NodeId, Real, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KptError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub image_size: usize,
    pub heatmap_size: usize,
    /// Encoder widths, finest first; the decoder mirrors them.
    pub channels: [usize; 3],
    pub d_app: usize,
    pub d_pos: usize,
    pub token_hidden: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { image_size: 64, heatmap_size: 32, channels: [16, 32, 64], d_app: 48, d_pos: 16, token_hidden: 64 }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 || self.heatmap_size * 2 != self.image_size {
            return Err(KptError::InvalidConfig(format!(
                "image size {} must be a multiple of 8 with heatmap size {} at half resolution",
                self.image_size, self.heatmap_size
            )));
        }
        if self.d_pos % 4 != 0 || self.d_pos == 0 {
            return Err(KptError::InvalidConfig(format!("positional width {} must be a positive multiple of 4", self.d_pos)));
        }
        Ok(())
    }

    pub fn token_width(&self) -> usize {
        self.d_app + self.d_pos
    }

    /// Decoder widths, coarsest first: `[c2, c1, c0]`.
    pub fn pyramid_channels(&self) -> [usize; 3] {
        [self.channels[1], self.channels[1], self.channels[0]]
    }

    /// Sampled appearance width before the token MLP.
    pub fn concat_width(&self) -> usize {
        self.pyramid_channels().iter().sum()
    }

    /// Decoder map sizes, coarsest first.
    pub fn pyramid_sizes(&self) -> [usize; 3] {
        let s = self.image_size;
        [s / 8, s / 4, s / 2]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    enc: [Conv2d; 3],
    dec: [Conv2d; 3],
    heatmap_head: Conv2d,
    seg_head: Conv2d,
    pub config: FrontendConfig,
}

pub struct BackboneOutput {
    /// `N×1×h×w`, sigmoid activated.
    pub heatmap: NodeId,
    pub segmap: NodeId,
    /// Decoder maps, coarsest to finest.
    pub pyramid: Vec<NodeId>,
    /// Last encoder map, used by grid tokens.
    pub coarsest_encoder: NodeId,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, config: &FrontendConfig) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Backbone;
        let [c0, c1, c2] = config.channels;
        let enc = [
            Conv2d::new(store, rng, "backbone.enc0", g, 3, c0, 3, 2, 1),
            Conv2d::new(store, rng, "backbone.enc1", g, c0, c1, 3, 2, 1),
            Conv2d::new(store, rng, "backbone.enc2", g, c1, c2, 3, 2, 1),
        ];
        let dec = [
            Conv2d::new(store, rng, "backbone.dec2", g, c2, c1, 3, 1, 1),
            Conv2d::new(store, rng, "backbone.dec1", g, c1 + c1, c1, 3, 1, 1),
            Conv2d::new(store, rng, "backbone.dec0", g, c1 + c0, c0, 3, 1, 1),
        ];
        let heatmap_head = Conv2d::new(store, rng, "backbone.heatmap", g, c0, 1, 1, 1, 0);
        let seg_head = Conv2d::new(store, rng, "backbone.segmap", g, c0, 1, 1, 1, 0);
        for head in [&heatmap_head, &seg_head] {
            store.get_mut(head.bias).tensor.data_mut().fill(T::from_f64(-2.0));
        }
        Ok(Self { enc, dec, heatmap_head, seg_head, config: config.clone() })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, image: NodeId) -> Result<BackboneOutput> {
        let s = g.shape(image).to_vec();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(KptError::InvalidConfig(format!("backbone expects N×3×{size}×{size} input, got {s:?}")));
        }
        let mut x = image;
        let mut skips = Vec::with_capacity(3);
        for conv in &self.enc {
            let y = conv.forward(g, p, x)?;
            x = g.relu(y);
            skips.push(x);
        }
        let coarsest_encoder = x;
        let y = self.dec[0].forward(g, p, x)?;
        let mut d = g.relu(y);
        let mut pyramid = vec![d];
        for (level, conv) in self.dec[1..].iter().enumerate() {
            let up = g.upsample_nearest(d, 2)?;
            let skip = skips[1 - level];
            let cat = g.concat(&[up, skip], 1)?;
            let y = conv.forward(g, p, cat)?;
            d = g.relu(y);
            pyramid.push(d);
        }
        let hm = self.heatmap_head.forward(g, p, d)?;
        let heatmap = g.sigmoid(hm);
        let sg = self.seg_head.forward(g, p, d)?;
        let segmap = g.sigmoid(sg);
        Ok(BackboneOutput { heatmap, segmap, pyramid, coarsest_encoder })
    }
}

/// Mean squared error between predicted and target maps.
pub fn heatmap_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    Ok(g.mse_loss(pred, gt)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointSource {
    HandHeatmap,
    ObjectSegmentation,
    /// A cell of the coarse grid (grid-token ablation).
    GridCell,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub uv: [f64; 2],
    pub score: f64,
    pub source: KeypointSource,
}

impl Keypoint {
    /// Location in pixels of a `w × h` raster.
    pub fn pixel(&self, w: usize, h: usize) -> [f64; 2] {
        [self.uv[0] * w as f64 - 0.5, self.uv[1] * h as f64 - 0.5]
    }

    pub fn from_pixel(x: f64, y: f64, w: usize, h: usize, score: f64, source: KeypointSource) -> Self {
        Self { uv: [(x + 0.5) / w as f64, (y + 0.5) / h as f64], score, source }
    }
}

/// Strict 3×3 local maxima at or above `threshold`, best first, at most
/// `max_n`.
pub fn nms_peaks(map: &[f32], w: usize, h: usize, max_n: usize, threshold: f64) -> Vec<Keypoint> {
    let mut peaks: Vec<(f32, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map[y * w + x];
            if (v as f64) < threshold {
                continue;
            }
            let mut strict = true;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if map[ny as usize * w + nx as usize] >= v {
                        strict = false;
                        break 'scan;
                    }
                }
            }
            if strict {
                peaks.push((v, y * w + x));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    peaks.truncate(max_n);
    peaks
        .into_iter()
        .map(|(v, i)| Keypoint::from_pixel((i % w) as f64, (i / w) as f64, w, h, v as f64, KeypointSource::HandHeatmap))
        .collect()
}

/// `n_obj` mask pixels (value ≥ 0.5) drawn without replacement, or with
/// replacement when the mask has fewer pixels.
pub fn sample_object_keypoints(mask: &[f32], w: usize, h: usize, n_obj: usize, seed: u64) -> Vec<Keypoint> {
    let on: Vec<usize> = (0..w * h).filter(|&i| mask[i] >= 0.5).collect();
    if on.is_empty() || n_obj == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if on.len() >= n_obj {
        sample_indices(&mut rng, on.len(), n_obj).into_iter().map(|k| on[k]).collect()
    } else {
        (0..n_obj).map(|_| on[rng.gen_range(0..on.len())]).collect()
    };
    picks
        .into_iter()
        .map(|i| Keypoint::from_pixel((i % w) as f64, (i / w) as f64, w, h, mask[i] as f64, KeypointSource::ObjectSegmentation))
        .collect()
}

/// Sine encoding: per axis `d_pos / 4` frequencies spaced geometrically
/// from 1 to `grid / 2` cycles, each contributing `(sin, cos)`; x then y.
pub fn positional_encoding(uv: [f64; 2], d_pos: usize, grid: usize) -> Vec<f64> {
    let pairs = d_pos / 4;
    let top = (grid as f64 / 2.0).max(1.0);
    let mut out = Vec::with_capacity(d_pos);
    for &c in &uv {
        for k in 0..pairs {
            let f = if pairs > 1 { top.powf(k as f64 / (pairs - 1) as f64) } else { 1.0 };
            let a = 2.0 * std::f64::consts::PI * f * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Maps sampled multi-scale features to appearance vectors and appends
/// the positional encoding.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    pub mlp: Mlp,
    pub d_pos: usize,
    pub grid: usize,
}

impl TokenEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, in_dim: usize, config: &FrontendConfig) -> Self {
        let dims = [in_dim, config.token_hidden, config.token_hidden, config.d_app];
        Self { mlp: Mlp::new(store, rng, name, ParamGroup::Transformer, &dims), d_pos: config.d_pos, grid: config.heatmap_size }
    }

    fn finish<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, appearance_in: NodeId, uvs: &[[f64; 2]]) -> Result<NodeId> {
        let app = self.mlp.forward(g, p, appearance_in)?;
        let pe: Vec<f64> = uvs.iter().flat_map(|&uv| positional_encoding(uv, self.d_pos, self.grid)).collect();
        let pe = g.constant(Tensor::from_f64(&[uvs.len(), self.d_pos], &pe)?);
        Ok(g.concat(&[app, pe], 1)?)
    }

    /// Tokens `K × (d_app + d_pos)` for keypoints given as
    /// `(batch index, keypoint)`, in order.
    pub fn build_tokens<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, pyramid: &[NodeId], keypoints: &[(usize, Keypoint)]) -> Result<NodeId> {
        if keypoints.is_empty() {
            return Err(KptError::InvalidConfig("cannot build tokens from zero keypoints".into()));
        }
        let sites: Vec<(usize, [f64; 2])> = keypoints.iter().map(|(b, k)| (*b, k.uv)).collect();
        let sampled: Vec<NodeId> = pyramid.iter().map(|&fm| g.bilinear_sample(fm, &sites)).collect::<std::result::Result<_, _>>()?;
        let cat = g.concat(&sampled, 1)?;
        let uvs: Vec<[f64; 2]> = sites.iter().map(|s| s.1).collect();
        self.finish(g, p, cat, &uvs)
    }

    /// One token per cell of the coarsest encoder map of sample `batch`.
    pub fn grid_tokens<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, coarsest: NodeId, batch: usize) -> Result<(NodeId, Vec<Keypoint>)> {
        let s = g.shape(coarsest).to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        let one = g.slice(coarsest, 0, batch, 1)?;
        let cells = g.reshape(one, &[c, h * w])?;
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let eye = g.constant(Tensor::from_f64(&[c, c], &eye)?);
        let rows = g.matmul_t(cells, eye, true, false)?;
        let kps: Vec<Keypoint> = (0..h * w).map(|i| Keypoint::from_pixel((i % w) as f64, (i / w) as f64, w, h, 1.0, KeypointSource::GridCell)).collect();
        let uvs: Vec<[f64; 2]> = kps.iter().map(|k| k.uv).collect();
        Ok((self.finish(g, p, rows, &uvs)?, kps))
    }
}
