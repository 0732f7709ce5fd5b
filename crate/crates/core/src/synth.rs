//! Synthetic latent videos with analytically known ground-truth motion,
//! plus the step-consistent noising used during inversion.

use serde::{Deserialize, Serialize};

use crate::error::{AmfError, Result};
use crate::rng::Stream;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Dense latent video, shape (F, C, h, w).
#[derive(Debug, Clone)]
pub struct LatentVideo<F: Real> {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Tensor<F>,
}

impl<F: Real> LatentVideo<F> {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if frames < 2 {
            return Err(AmfError::invalid("LatentVideo requires F >= 2"));
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(AmfError::invalid("zero-area latent grid"));
        }
        Ok(LatentVideo {
            frames,
            channels,
            height,
            width,
            values: Tensor::zeros(&[frames, channels, height, width]),
        })
    }

    pub fn from_tensor(values: Tensor<F>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 {
            return Err(AmfError::shape(format!("latent must be rank 4, got {s:?}")));
        }
        let v = LatentVideo {
            frames: s[0],
            channels: s[1],
            height: s[2],
            width: s[3],
            values,
        };
        if v.frames < 2 {
            return Err(AmfError::invalid("LatentVideo requires F >= 2"));
        }
        Ok(v)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Permutation mapping token-major (S, C) layout of frame `f` onto the
    /// flat (F, C, h, w) storage. Used to gather frame tokens on the tape.
    pub fn token_perm(&self, f: usize) -> Vec<usize> {
        let (c_n, h, w) = (self.channels, self.height, self.width);
        let mut perm = Vec::with_capacity(h * w * c_n);
        for y in 0..h {
            for x in 0..w {
                for c in 0..c_n {
                    perm.push(((f * c_n + c) * h + y) * w + x);
                }
            }
        }
        perm
    }

    pub fn at(&self, f: usize, c: usize, y: usize, x: usize) -> F {
        self.values.at(&[f, c, y, x])
    }
}

/// Axis-aligned region at frame 0, moving rigidly with its velocity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Region {
    pub y0: i64,
    pub x0: i64,
    pub height: usize,
    pub width: usize,
}

impl Region {
    fn at_frame(&self, t: i64, vy: i64, vx: i64) -> Region {
        Region {
            y0: self.y0 + t * vy,
            x0: self.x0 + t * vx,
            ..*self
        }
    }

    fn contains(&self, y: i64, x: i64) -> bool {
        y >= self.y0 && y < self.y0 + self.height as i64 && x >= self.x0 && x < self.x0 + self.width as i64
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.y0 < other.y0 + other.height as i64
            && other.y0 < self.y0 + self.height as i64
            && self.x0 < other.x0 + other.width as i64
            && other.x0 < self.x0 + self.width as i64
    }

    fn in_bounds(&self, h: usize, w: usize) -> bool {
        self.y0 >= 0
            && self.x0 >= 0
            && self.y0 + self.height as i64 <= h as i64
            && self.x0 + self.width as i64 <= w as i64
    }
}

/// Motion model behind a synthetic video; the oracle for motion fidelity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MotionModel {
    /// Whole-frame rigid translation, cells per frame.
    Translating { vy: f64, vx: f64 },
    /// Per-object translation over a static background.
    MultiObject { objects: Vec<(Region, (i64, i64))> },
}

/// Ground-truth displacement field; queried per frame pair and position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthFlow {
    pub model: MotionModel,
}

impl GroundTruthFlow {
    /// Displacement (dy, dx) from frame i to frame j at grid position
    /// (y, x) of frame i.
    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> (f64, f64) {
        let d = j as f64 - i as f64;
        match &self.model {
            MotionModel::Translating { vy, vx } => (d * vy, d * vx),
            MotionModel::MultiObject { objects } => {
                for (region, (vy, vx)) in objects {
                    if region.at_frame(i as i64, *vy, *vx).contains(y as i64, x as i64) {
                        return (d * *vy as f64, d * *vx as f64);
                    }
                }
                (0.0, 0.0)
            }
        }
    }
}

/// Band-limited texture: sum of random-phase sinusoids per channel, then
/// each position's cross-channel vector is rescaled to the common norm
/// amplitude * sqrt(C). Equal norms make the matched token's inner product
/// strictly maximal (cosine < 1 everywhere else), which is what keeps
/// query-key similarity sharply peaked at the true correspondence.
fn texture_frame<F: Real>(
    channels: usize,
    h: usize,
    w: usize,
    seed: u64,
    amplitude: f64,
) -> Vec<F> {
    const WAVES: usize = 12;
    let mut raw = vec![0.0f64; channels * h * w];
    let norm = (2.0 / WAVES as f64).sqrt();
    for c in 0..channels {
        let mut s = Stream::indexed(seed, "texture", c as u64);
        let waves: Vec<(f64, f64, f64)> = (0..WAVES)
            .map(|_| {
                let fy = s.uniform_range(-0.45, 0.45);
                let fx = s.uniform_range(-0.45, 0.45);
                let phase = s.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                (fy, fx, phase)
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for &(fy, fx, phase) in &waves {
                    v += (2.0 * std::f64::consts::PI * (fy * y as f64 + fx * x as f64) + phase)
                        .cos();
                }
                raw[(c * h + y) * w + x] = norm * v;
            }
        }
    }
    let target = amplitude * (channels as f64).sqrt();
    let mut data = vec![F::zero(); channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut sq = 0.0;
            for c in 0..channels {
                sq += raw[(c * h + y) * w + x].powi(2);
            }
            let scale = if sq > 1e-24 { target / sq.sqrt() } else { 0.0 };
            for c in 0..channels {
                data[(c * h + y) * w + x] = F::lit(scale * raw[(c * h + y) * w + x]);
            }
        }
    }
    data
}

/// Sample a (C, h, w) frame at a real-valued shift, circular in both axes.
/// Integer shifts reduce to an exact circular shift; fractional shifts use
/// bilinear interpolation.
fn shifted_frame<F: Real>(
    base: &[F],
    channels: usize,
    h: usize,
    w: usize,
    dy: f64,
    dx: f64,
) -> Vec<F> {
    let mut out = vec![F::zero(); channels * h * w];
    let iy = dy.round();
    let ix = dx.round();
    let integer = (dy - iy).abs() < 1e-12 && (dx - ix).abs() < 1e-12;
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let v = if integer {
                    let sy = (y as i64 - iy as i64).rem_euclid(h as i64) as usize;
                    let sx = (x as i64 - ix as i64).rem_euclid(w as i64) as usize;
                    base[(c * h + sy) * w + sx]
                } else {
                    let sy = y as f64 - dy;
                    let sx = x as f64 - dx;
                    let y0 = sy.floor();
                    let x0 = sx.floor();
                    let ty = sy - y0;
                    let tx = sx - x0;
                    let fetch = |yy: i64, xx: i64| -> f64 {
                        let yy = yy.rem_euclid(h as i64) as usize;
                        let xx = xx.rem_euclid(w as i64) as usize;
                        base[(c * h + yy) * w + xx].to_f64_lossy()
                    };
                    let v00 = fetch(y0 as i64, x0 as i64);
                    let v01 = fetch(y0 as i64, x0 as i64 + 1);
                    let v10 = fetch(y0 as i64 + 1, x0 as i64);
                    let v11 = fetch(y0 as i64 + 1, x0 as i64 + 1);
                    F::lit(
                        v00 * (1.0 - ty) * (1.0 - tx)
                            + v01 * (1.0 - ty) * tx
                            + v10 * ty * (1.0 - tx)
                            + v11 * ty * tx,
                    )
                };
                out[(c * h + y) * w + x] = v;
            }
        }
    }
    out
}

/// Whole-frame rigid translation with exact ground truth.
pub fn generate_translating<F: Real>(
    frames: usize,
    channels: usize,
    h: usize,
    w: usize,
    velocity: (f64, f64),
    texture_seed: u64,
    amplitude: f64,
) -> Result<(LatentVideo<F>, GroundTruthFlow)> {
    if h == 0 || w == 0 || channels == 0 {
        return Err(AmfError::invalid("zero-area grid"));
    }
    let (vy, vx) = velocity;
    if vy.abs() * (frames as f64 - 1.0) >= h as f64 || vx.abs() * (frames as f64 - 1.0) >= w as f64
    {
        return Err(AmfError::invalid(format!(
            "velocity ({vy},{vx}) leaves the {h}x{w} grid over {frames} frames"
        )));
    }
    let mut video = LatentVideo::new(frames, channels, h, w)?;
    let base = texture_frame::<F>(channels, h, w, texture_seed, amplitude);
    let per_frame = channels * h * w;
    for t in 0..frames {
        let frame = shifted_frame(&base, channels, h, w, t as f64 * vy, t as f64 * vx);
        video.values.data_mut()[t * per_frame..(t + 1) * per_frame].copy_from_slice(&frame);
    }
    Ok((
        video,
        GroundTruthFlow {
            model: MotionModel::Translating { vy, vx },
        },
    ))
}

/// Independently moving textured objects over a static textured background.
pub fn generate_multi_object<F: Real>(
    frames: usize,
    channels: usize,
    h: usize,
    w: usize,
    objects: &[(Region, (i64, i64))],
    seed: u64,
    amplitude: f64,
) -> Result<(LatentVideo<F>, GroundTruthFlow)> {
    if h == 0 || w == 0 || channels == 0 {
        return Err(AmfError::invalid("zero-area grid"));
    }
    // Trajectories must stay in-bounds and pairwise disjoint at every frame.
    for t in 0..frames as i64 {
        for (a, (avy, avx)) in objects {
            let ra = a.at_frame(t, *avy, *avx);
            if !ra.in_bounds(h, w) {
                return Err(AmfError::invalid(format!(
                    "object leaves grid at frame {t}: {ra:?}"
                )));
            }
        }
        for (ia, (a, (avy, avx))) in objects.iter().enumerate() {
            for (b, (bvy, bvx)) in objects.iter().skip(ia + 1).map(|o| (&o.0, &o.1)) {
                let ra = a.at_frame(t, *avy, *avx);
                let rb = b.at_frame(t, *bvy, *bvx);
                if ra.overlaps(&rb) {
                    return Err(AmfError::invalid(format!(
                        "object trajectories overlap at frame {t} (ambiguous ground truth)"
                    )));
                }
            }
        }
    }

    let mut video = LatentVideo::new(frames, channels, h, w)?;
    let background = texture_frame::<F>(channels, h, w, seed, amplitude);
    let patches: Vec<Vec<F>> = objects
        .iter()
        .enumerate()
        .map(|(k, (r, _))| {
            texture_frame::<F>(channels, r.height, r.width, seed.wrapping_add(k as u64 + 1), amplitude)
        })
        .collect();
    let per_frame = channels * h * w;
    for t in 0..frames {
        let frame = &mut video.values.data_mut()[t * per_frame..(t + 1) * per_frame];
        frame.copy_from_slice(&background);
        for ((region, (vy, vx)), patch) in objects.iter().zip(&patches) {
            let r = region.at_frame(t as i64, *vy, *vx);
            for c in 0..channels {
                for py in 0..region.height {
                    for px in 0..region.width {
                        let y = (r.y0 + py as i64) as usize;
                        let x = (r.x0 + px as i64) as usize;
                        frame[(c * h + y) * w + x] = patch[(c * region.height + py) * region.width + px];
                    }
                }
            }
        }
    }
    Ok((
        video,
        GroundTruthFlow {
            model: MotionModel::MultiObject {
                objects: objects.to_vec(),
            },
        },
    ))
}

/// Step-consistent noising: x_t = (1 - sigma_t) x_clean + sigma_t eps,
/// with eps a pure function of (t_index, seed).
pub fn add_inversion_noise<F: Real>(
    clean: &LatentVideo<F>,
    t_index: usize,
    schedule: &[f64],
    seed: u64,
) -> Result<LatentVideo<F>> {
    let sigma = *schedule
        .get(t_index)
        .ok_or_else(|| AmfError::invalid(format!("t_index {t_index} out of schedule range")))?;
    let mut s = Stream::indexed(seed, "inversion-noise", t_index as u64);
    let n = clean.values.numel();
    let eps: Vec<F> = s.gaussian_vec(n);
    let one_minus = F::lit(1.0 - sigma);
    let sig = F::lit(sigma);
    let data: Vec<F> = clean
        .values
        .data()
        .iter()
        .zip(&eps)
        .map(|(&x, &e)| one_minus * x + sig * e)
        .collect();
    let mut out = clean.clone();
    out.values.data_mut().copy_from_slice(&data);
    Ok(out)
}
