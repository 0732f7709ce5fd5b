//! Query/key projection, tile partitioning, representative attention,
//! window-center estimation, and sliding-window plans.

use serde::Serialize;

use crate::error::{AmfError, Result};
use crate::rng::Stream;
use crate::scalar::Real;
use crate::synth::LatentVideo;
use crate::tensor::{softmax_last_axis, Tensor};

/// Counts scalar attention scores actually computed.
#[derive(Debug, Default, Clone, Copy)]
pub struct ScoreCounter(pub u64);

impl ScoreCounter {
    pub fn add(&mut self, n: u64) {
        self.0 += n;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Seeded orthonormal-column projections.
    Seeded,
    /// Identity projection (test mode, requires D_h == C).
    Identity,
}

/// Per-frame query/key tensors plus the fixed projection parameters.
#[derive(Debug, Clone)]
pub struct AttentionContext<F: Real> {
    /// Per frame, shape (S, D_h).
    pub q: Vec<Tensor<F>>,
    pub k: Vec<Tensor<F>>,
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub d_h: usize,
    pub tau: f64,
}

impl<F: Real> AttentionContext<F> {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// tau / sqrt(D_h), the score scale of the attention map.
    pub fn score_scale(&self) -> F {
        F::lit(self.tau / (self.d_h as f64).sqrt())
    }
}

/// Orthonormal-column projection matrix (C x D_h) from a seeded stream.
fn orthonormal_columns<F: Real>(c: usize, d_h: usize, stream: &mut Stream) -> Result<Tensor<F>> {
    if d_h > c {
        return Err(AmfError::invalid(format!(
            "orthonormal projection needs D_h <= C, got D_h={d_h}, C={c}"
        )));
    }
    // Gram-Schmidt over Gaussian columns, in f64 regardless of F.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d_h);
    for _ in 0..d_h {
        loop {
            let mut v: Vec<f64> = (0..c).map(|_| stream.gaussian()).collect();
            for prev in &cols {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= dot * pi;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for vi in v.iter_mut() {
                    *vi /= norm;
                }
                cols.push(v);
                break;
            }
        }
    }
    let mut data = vec![F::zero(); c * d_h];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * d_h + j] = F::lit(v);
        }
    }
    Tensor::from_vec(&[c, d_h], data)
}

fn identity_projection<F: Real>(c: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[c, c]);
    for i in 0..c {
        t.set(&[i, i], F::one());
    }
    t
}

/// Gather the (S, C) token matrix of one frame.
pub fn frame_tokens<F: Real>(video: &LatentVideo<F>, f: usize) -> Tensor<F> {
    let perm = video.token_perm(f);
    let data: Vec<F> = perm.iter().map(|&i| video.values.data()[i]).collect();
    Tensor::from_vec(&[video.tokens(), video.channels], data).unwrap()
}

fn project_frame<F: Real>(tokens: &Tensor<F>, w: &Tensor<F>) -> Tensor<F> {
    let (s, c) = (tokens.shape()[0], tokens.shape()[1]);
    let d_h = w.shape()[1];
    let mut out = vec![F::zero(); s * d_h];
    for i in 0..s {
        for p in 0..c {
            let t = tokens.data()[i * c + p];
            if t == F::zero() {
                continue;
            }
            for j in 0..d_h {
                out[i * d_h + j] += t * w.data()[p * d_h + j];
            }
        }
    }
    Tensor::from_vec(&[s, d_h], out).unwrap()
}

/// Project latents to per-token queries and keys with fixed seeded
/// projection matrices.
pub fn project_qk<F: Real>(
    video: &LatentVideo<F>,
    seed: u64,
    d_h: usize,
    tau: f64,
    kind: ProjectionKind,
) -> Result<AttentionContext<F>> {
    if d_h < 1 || video.channels < 1 {
        return Err(AmfError::invalid("C and D_h must be >= 1"));
    }
    if tau <= 0.0 {
        return Err(AmfError::invalid("temperature must be positive"));
    }
    let (w_q, w_k) = match kind {
        ProjectionKind::Seeded => {
            // one shared orthonormal projection: queries and keys must
            // land in the same subspace or matched tokens lose their
            // score peak
            let mut s = Stream::new(seed, "projection-qk");
            let w = orthonormal_columns::<F>(video.channels, d_h, &mut s)?;
            (w.clone(), w)
        }
        ProjectionKind::Identity => {
            if d_h != video.channels {
                return Err(AmfError::invalid("identity projection requires D_h == C"));
            }
            (
                identity_projection::<F>(video.channels),
                identity_projection::<F>(video.channels),
            )
        }
    };
    let mut q = Vec::with_capacity(video.frames);
    let mut k = Vec::with_capacity(video.frames);
    for f in 0..video.frames {
        let tokens = frame_tokens(video, f);
        q.push(project_frame(&tokens, &w_q));
        k.push(project_frame(&tokens, &w_k));
    }
    Ok(AttentionContext {
        q,
        k,
        w_q,
        w_k,
        frames: video.frames,
        height: video.height,
        width: video.width,
        d_h,
        tau,
    })
}

/// One spatial tile with its representative (center) token.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tile {
    pub y0: usize,
    pub x0: usize,
    pub rep_y: usize,
    pub rep_x: usize,
}

/// Partition of the latent grid into tiles.
#[derive(Debug, Clone, Serialize)]
pub struct TileGrid {
    pub height: usize,
    pub width: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub tiles: Vec<Tile>,
}

fn axis_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    // ceil((extent - tile) / stride) + 1 positions, last clamped to the edge.
    let mut origins = Vec::new();
    let mut o = 0usize;
    loop {
        let clamped = o.min(extent - tile);
        origins.push(clamped);
        if clamped == extent - tile {
            break;
        }
        o += stride;
    }
    origins
}

impl TileGrid {
    pub fn new(
        height: usize,
        width: usize,
        tile_h: usize,
        tile_w: usize,
        stride_h: usize,
        stride_w: usize,
    ) -> Result<Self> {
        if tile_h == 0 || tile_w == 0 {
            return Err(AmfError::invalid("empty tile"));
        }
        if stride_h == 0 || stride_w == 0 {
            return Err(AmfError::invalid("zero tile stride"));
        }
        if tile_h > height || tile_w > width {
            return Err(AmfError::invalid(format!(
                "tile ({tile_h},{tile_w}) exceeds grid ({height},{width})"
            )));
        }
        if stride_h > tile_h || stride_w > tile_w {
            return Err(AmfError::invalid("stride larger than tile leaves uncovered tokens"));
        }
        let mut tiles = Vec::new();
        for &y0 in &axis_origins(height, tile_h, stride_h) {
            for &x0 in &axis_origins(width, tile_w, stride_w) {
                tiles.push(Tile {
                    y0,
                    x0,
                    rep_y: y0 + tile_h / 2,
                    rep_x: x0 + tile_w / 2,
                });
            }
        }
        Ok(TileGrid {
            height,
            width,
            tile_h,
            tile_w,
            stride_h,
            stride_w,
            tiles,
        })
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles.len()
    }

    /// (tile rows, tile cols) of the grid layout.
    pub fn grid_dims(&self) -> (usize, usize) {
        let rows = axis_origins(self.height, self.tile_h, self.stride_h).len();
        let cols = axis_origins(self.width, self.tile_w, self.stride_w).len();
        (rows, cols)
    }

    /// Flat token index of a tile's representative query.
    pub fn rep_index(&self, p: usize) -> usize {
        let t = &self.tiles[p];
        t.rep_y * self.width + t.rep_x
    }
}

/// Representative cross-frame attention map: rows are tiles, columns are
/// all S tokens of the target frame, softmax-normalized.
pub fn representative_attention<F: Real>(
    ctx: &AttentionContext<F>,
    tiles: &TileGrid,
    i: usize,
    j: usize,
    counter: &mut ScoreCounter,
) -> Result<Tensor<F>> {
    let s = ctx.tokens();
    let scale = ctx.score_scale();
    let d_h = ctx.d_h;
    let mut scores = vec![F::zero(); tiles.n_tiles() * s];
    let qf = &ctx.q[i];
    let kf = &ctx.k[j];
    for (p, _) in tiles.tiles.iter().enumerate() {
        let rep = tiles.rep_index(p);
        let qrow = &qf.data()[rep * d_h..(rep + 1) * d_h];
        for t in 0..s {
            let krow = &kf.data()[t * d_h..(t + 1) * d_h];
            let mut dot = F::zero();
            for (a, b) in qrow.iter().zip(krow) {
                dot += *a * *b;
            }
            scores[p * s + t] = dot * scale;
        }
    }
    counter.add((tiles.n_tiles() * s) as u64);
    softmax_last_axis(&Tensor::from_vec(&[tiles.n_tiles(), s], scores)?)
}

/// Attention-weighted mean token position per tile (expectation center).
pub fn estimate_center_expectation<F: Real>(
    a_rep: &Tensor<F>,
    height: usize,
    width: usize,
) -> Vec<(f64, f64)> {
    let s = height * width;
    a_rep
        .data()
        .chunks(s)
        .map(|row| {
            let mut cy = 0.0;
            let mut cx = 0.0;
            for (t, &a) in row.iter().enumerate() {
                let w = a.to_f64_lossy();
                cy += w * (t / width) as f64;
                cx += w * (t % width) as f64;
            }
            (cy, cx)
        })
        .collect()
}

/// Argmax center per tile: P_block plus the displacement of the best
/// query-key score. Ties break to the smallest flat index.
pub fn estimate_center_argmax<F: Real>(
    ctx: &AttentionContext<F>,
    tiles: &TileGrid,
    i: usize,
    j: usize,
    counter: &mut ScoreCounter,
) -> Vec<(i64, i64)> {
    let s = ctx.tokens();
    let d_h = ctx.d_h;
    let width = ctx.width as i64;
    let mut centers = Vec::with_capacity(tiles.n_tiles());
    for p in 0..tiles.n_tiles() {
        let rep = tiles.rep_index(p);
        let qrow = &ctx.q[i].data()[rep * d_h..(rep + 1) * d_h];
        let mut best = F::neg_infinity();
        let mut best_t = 0usize;
        for t in 0..s {
            let krow = &ctx.k[j].data()[t * d_h..(t + 1) * d_h];
            let mut dot = F::zero();
            for (a, b) in qrow.iter().zip(krow) {
                dot += *a * *b;
            }
            if dot > best {
                best = dot;
                best_t = t;
            }
        }
        let tile = &tiles.tiles[p];
        let disp_y = (best_t as i64 / width) - rep as i64 / width;
        let disp_x = (best_t as i64 % width) - rep as i64 % width;
        centers.push((tile.rep_y as i64 + disp_y, tile.rep_x as i64 + disp_x));
    }
    counter.add((tiles.n_tiles() * s) as u64);
    centers
}

/// Inclusive window rectangle, clamped (never wrapped) at the borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl WindowRect {
    fn around(center: (i64, i64), radius: i64, height: usize, width: usize) -> Self {
        let cy = center.0.clamp(0, height as i64 - 1);
        let cx = center.1.clamp(0, width as i64 - 1);
        WindowRect {
            y0: (cy - radius).max(0) as usize,
            y1: (cy + radius).min(height as i64 - 1) as usize,
            x0: (cx - radius).max(0) as usize,
            x1: (cx + radius).min(width as i64 - 1) as usize,
        }
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)
    }

    pub fn contains(&self, y: i64, x: i64) -> bool {
        y >= self.y0 as i64 && y <= self.y1 as i64 && x >= self.x0 as i64 && x <= self.x1 as i64
    }

    pub fn token_indices(&self, width: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.area());
        for y in self.y0..=self.y1 {
            for x in self.x0..=self.x1 {
                idx.push(y * width + x);
            }
        }
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CenterMode {
    Argmax,
    Expectation,
}

/// Window plan: for each (anchor, target) pair and tile, the window center
/// and clamped index rectangle.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub s_f: usize,
    pub l: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tiles: TileGrid,
    pub center_mode: CenterMode,
    /// Canonical pair order (see [`motion_pairs`]).
    pub pairs: Vec<(usize, usize)>,
    /// centers[pair][tile]
    pub centers: Vec<Vec<(i64, i64)>>,
    /// rects[pair][tile]
    pub rects: Vec<Vec<WindowRect>>,
}

/// Canonical pair enumeration: anchors i in [0, F-2], targets
/// j in [i+1, min(i+s_f, F-1)].
pub fn motion_pairs(frames: usize, s_f: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..frames.saturating_sub(1) {
        for j in i + 1..=(i + s_f).min(frames - 1) {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Assemble a window plan from caller-provided per-pair centers.
pub fn build_window_plan(
    centers: &[Vec<(i64, i64)>],
    s_f: usize,
    l: usize,
    frames: usize,
    height: usize,
    width: usize,
    tiles: &TileGrid,
    center_mode: CenterMode,
) -> Result<WindowPlan> {
    if l % 2 == 0 {
        return Err(AmfError::invalid("window side l must be odd"));
    }
    if l > height.min(width) {
        return Err(AmfError::invalid(format!(
            "window side {l} exceeds grid min extent {}",
            height.min(width)
        )));
    }
    if s_f < 1 {
        return Err(AmfError::invalid("temporal span s_f must be >= 1"));
    }
    let pairs = motion_pairs(frames, s_f);
    if centers.len() != pairs.len() {
        return Err(AmfError::shape(format!(
            "expected centers for {} pairs, got {}",
            pairs.len(),
            centers.len()
        )));
    }
    let radius = (l / 2) as i64;
    let mut rects = Vec::with_capacity(pairs.len());
    for per_pair in centers {
        if per_pair.len() != tiles.n_tiles() {
            return Err(AmfError::shape("centers per pair must cover all tiles"));
        }
        rects.push(
            per_pair
                .iter()
                .map(|&c| WindowRect::around(c, radius, height, width))
                .collect::<Vec<_>>(),
        );
    }
    Ok(WindowPlan {
        s_f,
        l,
        frames,
        height,
        width,
        tiles: tiles.clone(),
        center_mode,
        pairs,
        centers: centers.to_vec(),
        rects,
    })
}

impl WindowPlan {
    pub fn pair_index(&self, i: usize, j: usize) -> Option<usize> {
        self.pairs.iter().position(|&p| p == (i, j))
    }

    /// Exact number of attention scores a windowed extraction computes.
    pub fn score_ops(&self) -> u64 {
        self.rects
            .iter()
            .flatten()
            .map(|r| r.area() as u64)
            .sum()
    }
}

/// Sliding plan: per (tile, anchor) the frame-to-frame displacement is
/// estimated by a windowed argmax on the adjacent pair, then extrapolated
/// to farther targets. No full-attention pass is needed.
pub fn plan_sliding<F: Real>(
    ctx: &AttentionContext<F>,
    tiles: &TileGrid,
    s_f: usize,
    l: usize,
    counter: &mut ScoreCounter,
) -> Result<WindowPlan> {
    if l % 2 == 0 {
        return Err(AmfError::invalid("window side l must be odd"));
    }
    if l > ctx.height.min(ctx.width) {
        return Err(AmfError::invalid("window side exceeds grid"));
    }
    let radius = (l / 2) as i64;
    let d_h = ctx.d_h;
    let width = ctx.width;
    let frames = ctx.frames;

    // Per-anchor adjacent-frame velocity estimates, one per tile.
    let mut velocities: Vec<Vec<(i64, i64)>> = Vec::with_capacity(frames.saturating_sub(1));
    for i in 0..frames.saturating_sub(1) {
        let mut per_tile = Vec::with_capacity(tiles.n_tiles());
        for p in 0..tiles.n_tiles() {
            let rep = tiles.rep_index(p);
            let tile = &tiles.tiles[p];
            let rect = WindowRect::around(
                (tile.rep_y as i64, tile.rep_x as i64),
                radius,
                ctx.height,
                width,
            );
            let qrow = &ctx.q[i].data()[rep * d_h..(rep + 1) * d_h];
            let mut best = F::neg_infinity();
            let mut best_t = rep;
            for t in rect.token_indices(width) {
                let krow = &ctx.k[i + 1].data()[t * d_h..(t + 1) * d_h];
                let mut dot = F::zero();
                for (a, b) in qrow.iter().zip(krow) {
                    dot += *a * *b;
                }
                if dot > best {
                    best = dot;
                    best_t = t;
                }
            }
            counter.add(rect.area() as u64);
            let vy = best_t as i64 / width as i64 - tile.rep_y as i64;
            let vx = best_t as i64 % width as i64 - tile.rep_x as i64;
            per_tile.push((vy, vx));
        }
        velocities.push(per_tile);
    }

    let pairs = motion_pairs(frames, s_f);
    let centers: Vec<Vec<(i64, i64)>> = pairs
        .iter()
        .map(|&(i, j)| {
            let d = (j - i) as i64;
            (0..tiles.n_tiles())
                .map(|p| {
                    let tile = &tiles.tiles[p];
                    let (vy, vx) = velocities[i][p];
                    (tile.rep_y as i64 + d * vy, tile.rep_x as i64 + d * vx)
                })
                .collect()
        })
        .collect();
    build_window_plan(
        &centers,
        s_f,
        l,
        frames,
        ctx.height,
        ctx.width,
        tiles,
        CenterMode::Argmax,
    )
}

/// Exact score-op cost of [`plan_sliding`]'s velocity-estimation pass:
/// one clamped radius-⌊l/2⌋ window per (anchor, tile).
pub fn planning_score_ops(
    tiles: &TileGrid,
    l: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> u64 {
    let radius = (l / 2) as i64;
    let per_anchor: u64 = tiles
        .tiles
        .iter()
        .map(|t| {
            WindowRect::around((t.rep_y as i64, t.rep_x as i64), radius, height, width).area()
                as u64
        })
        .sum();
    frames.saturating_sub(1) as u64 * per_anchor
}

/// Analytic score-operation accounting for the complexity comparison.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScoreOpCounts {
    /// All frame pairs, F(F-1)/2.
    pub full_pairs: u64,
    /// Pairs within the temporal span.
    pub windowed_pairs: u64,
    /// Dense per-token accounting of prior methods: pairs * S * S.
    pub full_dense_ops: u64,
    /// Representative-query full attention: pairs * N_tiles * S. This is
    /// what the brute-force oracle actually computes.
    pub full_rep_ops: u64,
    /// Windowed accounting assuming unclamped windows:
    /// pairs * N_tiles * l^2.
    pub windowed_ops: u64,
    /// full_rep_ops / windowed_ops.
    pub ratio: f64,
}

pub fn count_score_ops(
    frames: usize,
    height: usize,
    width: usize,
    s_f: usize,
    l: usize,
    n_tiles: usize,
) -> ScoreOpCounts {
    let s = (height * width) as u64;
    let full_pairs = (frames * (frames - 1) / 2) as u64;
    let windowed_pairs = motion_pairs(frames, s_f).len() as u64;
    let full_dense_ops = full_pairs * s * s;
    let full_rep_ops = full_pairs * n_tiles as u64 * s;
    let windowed_ops = windowed_pairs * n_tiles as u64 * (l * l) as u64;
    ScoreOpCounts {
        full_pairs,
        windowed_pairs,
        full_dense_ops,
        full_rep_ops,
        windowed_ops,
        ratio: full_rep_ops as f64 / windowed_ops as f64,
    }
}
