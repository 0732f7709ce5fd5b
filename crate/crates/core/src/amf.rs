//! Attention motion flow extraction (full-attention oracle and windowed)
//! and the weighted AMF / corresponding-window / total losses, both as
//! plain evaluations and as a differentiable tape graph.

use std::rc::Rc;

use crate::attention::{AttentionContext, ScoreCounter, TileGrid, WindowPlan};
use crate::error::{AmfError, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_last_axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowMode {
    /// Argmax displacement; integer components, zero gradient a.e.
    Hard,
    /// Attention-weighted expected displacement; differentiable.
    Soft,
}

/// Displacement field per (tile, frame pair), in latent cells.
#[derive(Debug, Clone)]
pub struct MotionFlow<F> {
    pub pairs: Vec<(usize, usize)>,
    /// disp[pair][tile] = (dy, dx)
    pub disp: Vec<Vec<(F, F)>>,
    pub mode: FlowMode,
}

impl<F: Real> MotionFlow<F> {
    pub fn n_tiles(&self) -> usize {
        self.disp.first().map_or(0, Vec::len)
    }

    /// Flatten to an (n_pairs, n_tiles, 2) tensor for serialization.
    pub fn to_tensor(&self) -> Tensor<F> {
        let p = self.pairs.len();
        let t = self.n_tiles();
        let mut data = Vec::with_capacity(p * t * 2);
        for per_pair in &self.disp {
            for &(dy, dx) in per_pair {
                data.push(dy);
                data.push(dx);
            }
        }
        Tensor::from_vec(&[p, t, 2], data).unwrap()
    }
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Brute-force oracle: representative attention over all S target tokens.
pub fn extract_amf_full<F: Real>(
    ctx: &AttentionContext<F>,
    tiles: &TileGrid,
    pairs: &[(usize, usize)],
    mode: FlowMode,
    counter: &mut ScoreCounter,
) -> Result<MotionFlow<F>> {
    for &(i, j) in pairs {
        if j <= i || j >= ctx.frames {
            return Err(AmfError::invalid(format!("bad pair ({i},{j})")));
        }
    }
    let s = ctx.tokens();
    let width = ctx.width;
    let d_h = ctx.d_h;
    let scale = ctx.score_scale();
    let mut disp = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let mut per_tile = Vec::with_capacity(tiles.n_tiles());
        for p in 0..tiles.n_tiles() {
            let rep = tiles.rep_index(p);
            let qrow = &ctx.q[i].data()[rep * d_h..(rep + 1) * d_h];
            let mut scores = Vec::with_capacity(s);
            for t in 0..s {
                let krow = &ctx.k[j].data()[t * d_h..(t + 1) * d_h];
                scores.push(dot(qrow, krow) * scale);
            }
            counter.add(s as u64);
            let (qy, qx) = (rep / width, rep % width);
            per_tile.push(displacement_from_scores(
                &scores,
                |t| ((t / width) as f64, (t % width) as f64),
                qy as f64,
                qx as f64,
                mode,
            )?);
        }
        disp.push(per_tile);
    }
    Ok(MotionFlow {
        pairs: pairs.to_vec(),
        disp,
        mode,
    })
}

/// Windowed extraction: scores only over each planned window; soft mode
/// renormalizes the softmax over the window.
pub fn extract_amf_windowed<F: Real>(
    ctx: &AttentionContext<F>,
    plan: &WindowPlan,
    mode: FlowMode,
    counter: &mut ScoreCounter,
) -> Result<MotionFlow<F>> {
    if plan.height != ctx.height || plan.width != ctx.width || plan.frames != ctx.frames {
        return Err(AmfError::shape("plan grid does not match context"));
    }
    let width = ctx.width;
    let d_h = ctx.d_h;
    let scale = ctx.score_scale();
    let mut disp = Vec::with_capacity(plan.pairs.len());
    for (pi, &(i, j)) in plan.pairs.iter().enumerate() {
        let mut per_tile = Vec::with_capacity(plan.tiles.n_tiles());
        for p in 0..plan.tiles.n_tiles() {
            let rep = plan.tiles.rep_index(p);
            let qrow = &ctx.q[i].data()[rep * d_h..(rep + 1) * d_h];
            let rect = &plan.rects[pi][p];
            let idx = rect.token_indices(width);
            let mut scores = Vec::with_capacity(idx.len());
            for &t in &idx {
                let krow = &ctx.k[j].data()[t * d_h..(t + 1) * d_h];
                scores.push(dot(qrow, krow) * scale);
            }
            counter.add(idx.len() as u64);
            let (qy, qx) = (rep / width, rep % width);
            per_tile.push(displacement_from_scores(
                &scores,
                |n| ((idx[n] / width) as f64, (idx[n] % width) as f64),
                qy as f64,
                qx as f64,
                mode,
            )?);
        }
        disp.push(per_tile);
    }
    Ok(MotionFlow {
        pairs: plan.pairs.clone(),
        disp,
        mode,
    })
}

fn displacement_from_scores<F: Real>(
    scores: &[F],
    pos: impl Fn(usize) -> (f64, f64),
    qy: f64,
    qx: f64,
    mode: FlowMode,
) -> Result<(F, F)> {
    match mode {
        FlowMode::Hard => {
            let mut best = F::neg_infinity();
            let mut best_n = 0usize;
            for (n, &v) in scores.iter().enumerate() {
                if v > best {
                    best = v;
                    best_n = n;
                }
            }
            let (py, px) = pos(best_n);
            Ok((F::lit(py - qy), F::lit(px - qx)))
        }
        FlowMode::Soft => {
            let t = Tensor::from_vec(&[scores.len()], scores.to_vec())?;
            let a = softmax_last_axis(&t)?;
            let mut cy = 0.0;
            let mut cx = 0.0;
            for (n, &w) in a.data().iter().enumerate() {
                let (py, px) = pos(n);
                let w = w.to_f64_lossy();
                cy += w * py;
                cx += w * px;
            }
            Ok((F::lit(cy - qy), F::lit(cx - qx)))
        }
    }
}

/// Linear-decay frame-distance weight: 1 - alpha (d-1)/(s_f-1) for
/// d <= s_f, else 0. s_f = 1 has the removable singularity w_1 = 1.
pub fn distance_weight(d: usize, s_f: usize, alpha: f64) -> Result<f64> {
    if d == 0 {
        return Err(AmfError::invalid("frame distance d must be >= 1"));
    }
    if d > s_f {
        return Ok(0.0);
    }
    if s_f == 1 {
        return Ok(1.0);
    }
    Ok(1.0 - alpha * (d - 1) as f64 / (s_f - 1) as f64)
}

/// Weighted AMF loss: (1/|F|) sum over pairs of w_d times the mean over
/// tiles of the squared displacement difference.
pub fn amf_loss<F: Real>(
    flow_ref: &MotionFlow<F>,
    flow_gen: &MotionFlow<F>,
    s_f: usize,
    alpha: f64,
) -> Result<F> {
    if flow_ref.pairs != flow_gen.pairs {
        return Err(AmfError::invalid("mismatched pair sets between flows"));
    }
    if flow_ref.pairs.is_empty() {
        return Ok(F::zero());
    }
    let mut total = F::zero();
    for (pi, &(i, j)) in flow_ref.pairs.iter().enumerate() {
        let w = distance_weight(j - i, s_f, alpha)?;
        let tiles = flow_ref.disp[pi].len();
        let mut pair_sum = F::zero();
        for (&(ry, rx), &(gy, gx)) in flow_ref.disp[pi].iter().zip(&flow_gen.disp[pi]) {
            let dy = ry - gy;
            let dx = rx - gx;
            pair_sum += dy * dy + dx * dx;
        }
        total += F::lit(w) * pair_sum / F::lit(tiles as f64);
    }
    Ok(total / F::lit(flow_ref.pairs.len() as f64))
}

/// Mean key vector within one planned window.
fn mean_window_key<F: Real>(ctx: &AttentionContext<F>, plan: &WindowPlan, pair_idx: usize, tile: usize) -> Vec<F> {
    let (_, j) = plan.pairs[pair_idx];
    let d_h = ctx.d_h;
    let idx = plan.rects[pair_idx][tile].token_indices(ctx.width);
    let mut mean = vec![F::zero(); d_h];
    for &t in &idx {
        let krow = &ctx.k[j].data()[t * d_h..(t + 1) * d_h];
        for (m, &v) in mean.iter_mut().zip(krow) {
            *m += v;
        }
    }
    let inv = F::one() / F::lit(idx.len() as f64);
    for m in mean.iter_mut() {
        *m *= inv;
    }
    mean
}

/// Corresponding-window loss: squared drift of mean window keys across
/// consecutive targets of each anchor, averaged over tiles and over the
/// anchors that have at least two targets.
pub fn window_loss<F: Real>(ctx: &AttentionContext<F>, plan: &WindowPlan) -> Result<F> {
    let n_tiles = plan.tiles.n_tiles();
    let mut total = F::zero();
    let mut anchors_used = 0usize;
    for i in 0..plan.frames.saturating_sub(1) {
        let targets: Vec<usize> = plan
            .pairs
            .iter()
            .enumerate()
            .filter(|(_, &(a, _))| a == i)
            .map(|(idx, _)| idx)
            .collect();
        if targets.len() < 2 {
            continue;
        }
        anchors_used += 1;
        let mut anchor_sum = F::zero();
        for p in 0..n_tiles {
            let mut tile_sum = F::zero();
            for t in 0..targets.len() - 1 {
                let a = mean_window_key(ctx, plan, targets[t], p);
                let b = mean_window_key(ctx, plan, targets[t + 1], p);
                let mut sq = F::zero();
                for (x, y) in a.iter().zip(&b) {
                    let d = *y - *x;
                    sq += d * d;
                }
                tile_sum += sq;
            }
            anchor_sum += tile_sum / F::lit((targets.len() - 1) as f64);
        }
        total += anchor_sum / F::lit(n_tiles as f64);
    }
    if anchors_used == 0 {
        return Ok(F::zero());
    }
    Ok(total / F::lit(anchors_used as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<F> {
    pub l_amf: F,
    pub l_window: F,
    pub l_total: F,
    pub lambda_amf: f64,
    pub lambda_window: f64,
}

/// Total loss over an already-extracted reference flow and a generated
/// context; the generated flow is re-extracted (soft mode) here.
pub fn total_loss<F: Real>(
    flow_ref: &MotionFlow<F>,
    ctx_gen: &AttentionContext<F>,
    plan: &WindowPlan,
    s_f: usize,
    alpha: f64,
    lambda_amf: f64,
    lambda_window: f64,
    counter: &mut ScoreCounter,
) -> Result<LossBreakdown<F>> {
    if lambda_amf < 0.0 || lambda_window < 0.0 {
        return Err(AmfError::invalid("loss weights must be nonnegative"));
    }
    let flow_gen = extract_amf_windowed(ctx_gen, plan, FlowMode::Soft, counter)?;
    let l_amf = amf_loss(flow_ref, &flow_gen, s_f, alpha)?;
    let l_window = window_loss(ctx_gen, plan)?;
    let l_total = F::lit(lambda_amf) * l_amf + F::lit(lambda_window) * l_window;
    Ok(LossBreakdown {
        l_amf,
        l_window,
        l_total,
        lambda_amf,
        lambda_window,
    })
}

/// Everything needed to evaluate L_total differentiably with respect to a
/// generated latent, with the window plan held fixed.
pub struct LossGraphSpec<'a, F: Real> {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub w_q: &'a Tensor<F>,
    pub w_k: &'a Tensor<F>,
    pub d_h: usize,
    pub tau: f64,
    pub plan: &'a WindowPlan,
    pub flow_ref: &'a MotionFlow<F>,
    pub s_f: usize,
    pub alpha: f64,
    pub lambda_amf: f64,
    pub lambda_window: f64,
}

pub struct LossGraph<F: Real> {
    pub tape: Tape<F>,
    pub latent: Var,
    pub l_amf: Var,
    pub l_window: Var,
    pub l_total: Var,
}

impl<'a, F: Real> LossGraphSpec<'a, F> {
    fn token_perm(&self, f: usize) -> Vec<usize> {
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

    /// Record the full loss graph on a fresh tape.
    pub fn build(&self, latent: &Tensor<F>) -> Result<LossGraph<F>> {
        if self.lambda_amf < 0.0 || self.lambda_window < 0.0 {
            return Err(AmfError::invalid("loss weights must be nonnegative"));
        }
        let expect = [self.frames, self.channels, self.height, self.width];
        if latent.shape() != expect {
            return Err(AmfError::shape(format!(
                "latent shape {:?}, expected {:?}",
                latent.shape(),
                expect
            )));
        }
        if self.flow_ref.pairs != self.plan.pairs {
            return Err(AmfError::invalid("reference flow pairs do not match plan"));
        }
        let plan = self.plan;
        let s = self.height * self.width;
        let d_h = self.d_h;
        let width = self.width;
        let scale = F::lit(self.tau / (d_h as f64).sqrt());

        let mut tape = Tape::new();
        let latent_var = tape.leaf(latent.clone());
        let wq = tape.constant(self.w_q.clone());
        let wk = tape.constant(self.w_k.clone());

        // Per-frame projected queries/keys as (S, D_h) nodes.
        let mut q_vars = Vec::with_capacity(self.frames);
        let mut k_vars = Vec::with_capacity(self.frames);
        for f in 0..self.frames {
            let perm = Rc::new(self.token_perm(f));
            let tokens = tape.reorder(latent_var, perm, &[s, self.channels]);
            q_vars.push(tape.matmul(tokens, wq));
            k_vars.push(tape.matmul(tokens, wk));
        }

        let gather_row =
            |tape: &mut Tape<F>, frame: Var, row: usize| -> Var {
                let perm = Rc::new((row * d_h..(row + 1) * d_h).collect::<Vec<_>>());
                tape.reorder(frame, perm, &[1, d_h])
            };

        // Weighted AMF loss over soft windowed displacements.
        let n_tiles = plan.tiles.n_tiles();
        let inv_tiles = F::one() / F::lit(n_tiles as f64);
        let mut amf_acc: Option<Var> = None;
        // Cache of mean window keys for the window loss, keyed by
        // (pair index, tile).
        let mut mean_keys: Vec<Vec<Option<Var>>> = vec![vec![None; n_tiles]; plan.pairs.len()];

        for (pi, &(i, j)) in plan.pairs.iter().enumerate() {
            let w_d = distance_weight(j - i, self.s_f, self.alpha)?;
            let mut pair_acc: Option<Var> = None;
            for p in 0..n_tiles {
                let rep = plan.tiles.rep_index(p);
                let rect = &plan.rects[pi][p];
                let idx = rect.token_indices(width);
                let m = idx.len();
                let q_row = gather_row(&mut tape, q_vars[i], rep);
                // keys gathered column-major as (D_h, m) for q . K^T
                let mut perm_t = Vec::with_capacity(d_h * m);
                for r in 0..d_h {
                    for &t in &idx {
                        perm_t.push(t * d_h + r);
                    }
                }
                let k_t = tape.reorder(k_vars[j], Rc::new(perm_t), &[d_h, m]);
                let raw = tape.matmul(q_row, k_t);
                let scaled = tape.scale(raw, scale);
                let attn = tape.softmax_last(scaled)?;
                // positions of window tokens, constant (m, 2)
                let mut pos = Vec::with_capacity(m * 2);
                for &t in &idx {
                    pos.push(F::lit((t / width) as f64));
                    pos.push(F::lit((t % width) as f64));
                }
                let pos_c = tape.constant(Tensor::from_vec(&[m, 2], pos)?);
                let center = tape.matmul(attn, pos_c);
                let qpos = tape.constant(Tensor::from_vec(
                    &[1, 2],
                    vec![F::lit((rep / width) as f64), F::lit((rep % width) as f64)],
                )?);
                let d_gen = tape.sub(center, qpos);
                let (ry, rx) = self.flow_ref.disp[pi][p];
                let d_ref = tape.constant(Tensor::from_vec(&[1, 2], vec![ry, rx])?);
                let diff = tape.sub(d_gen, d_ref);
                let term = tape.squared_l2(diff);
                pair_acc = Some(match pair_acc {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });

                // Mean window key, reused by the window loss below.
                let mut perm_k = Vec::with_capacity(m * d_h);
                for &t in &idx {
                    for r in 0..d_h {
                        perm_k.push(t * d_h + r);
                    }
                }
                let k_w = tape.reorder(k_vars[j], Rc::new(perm_k), &[m, d_h]);
                let ones = tape.constant(Tensor::filled(&[1, m], F::one() / F::lit(m as f64)));
                mean_keys[pi][p] = Some(tape.matmul(ones, k_w));
            }
            let pair_term = tape.scale(pair_acc.expect("plan has tiles"), F::lit(w_d) * inv_tiles);
            amf_acc = Some(match amf_acc {
                Some(acc) => tape.add(acc, pair_term),
                None => pair_term,
            });
        }
        let l_amf = {
            let acc = amf_acc.ok_or_else(|| AmfError::invalid("plan has no pairs"))?;
            tape.scale(acc, F::one() / F::lit(plan.pairs.len() as f64))
        };

        // Corresponding-window loss on the same tape.
        let mut win_acc: Option<Var> = None;
        let mut anchors_used = 0usize;
        for i in 0..self.frames.saturating_sub(1) {
            let targets: Vec<usize> = plan
                .pairs
                .iter()
                .enumerate()
                .filter(|(_, &(a, _))| a == i)
                .map(|(idx, _)| idx)
                .collect();
            if targets.len() < 2 {
                continue;
            }
            anchors_used += 1;
            let mut anchor_acc: Option<Var> = None;
            for p in 0..n_tiles {
                for t in 0..targets.len() - 1 {
                    let a = mean_keys[targets[t]][p].expect("cached");
                    let b = mean_keys[targets[t + 1]][p].expect("cached");
                    let d = tape.sub(b, a);
                    let sq = tape.squared_l2(d);
                    let scaled = tape.scale(sq, F::one() / F::lit((targets.len() - 1) as f64));
                    anchor_acc = Some(match anchor_acc {
                        Some(acc) => tape.add(acc, scaled),
                        None => scaled,
                    });
                }
            }
            let anchor_term = tape.scale(anchor_acc.expect("tiles"), inv_tiles);
            win_acc = Some(match win_acc {
                Some(acc) => tape.add(acc, anchor_term),
                None => anchor_term,
            });
        }
        let l_window = match win_acc {
            Some(acc) => tape.scale(acc, F::one() / F::lit(anchors_used as f64)),
            None => tape.constant(Tensor::scalar(F::zero())),
        };

        let la = tape.scale(l_amf, F::lit(self.lambda_amf));
        let lw = tape.scale(l_window, F::lit(self.lambda_window));
        let l_total = tape.add(la, lw);

        Ok(LossGraph {
            tape,
            latent: latent_var,
            l_amf,
            l_window,
            l_total,
        })
    }

    /// Evaluate loss and gradient with respect to the latent.
    pub fn eval(&self, latent: &Tensor<F>) -> Result<(LossBreakdown<F>, Tensor<F>)> {
        let graph = self.build(latent)?;
        let breakdown = LossBreakdown {
            l_amf: graph.tape.value(graph.l_amf).scalar_value(),
            l_window: graph.tape.value(graph.l_window).scalar_value(),
            l_total: graph.tape.value(graph.l_total).scalar_value(),
            lambda_amf: self.lambda_amf,
            lambda_window: self.lambda_window,
        };
        let grads = graph.tape.backward(graph.l_total)?;
        let g = grads
            .grad(graph.latent)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(latent.shape()));
        Ok((breakdown, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{
        build_window_plan, motion_pairs, plan_sliding, project_qk, CenterMode, ProjectionKind,
        TileGrid,
    };
    use crate::synth::generate_translating;
    use proptest::prelude::*;

    fn setup(
        velocity: (f64, f64),
        seed: u64,
    ) -> (
        crate::synth::LatentVideo<f64>,
        AttentionContext<f64>,
        TileGrid,
    ) {
        let (v, _) = generate_translating::<f64>(5, 8, 16, 16, velocity, seed, 1.0).unwrap();
        let ctx = project_qk(&v, 31, 8, 1.0, ProjectionKind::Seeded).unwrap();
        let tiles = TileGrid::new(16, 16, 4, 4, 4, 4).unwrap();
        (v, ctx, tiles)
    }

    #[test]
    fn static_video_has_zero_hard_flow() {
        let (_, ctx, tiles) = setup((0.0, 0.0), 41);
        let pairs = motion_pairs(5, 2);
        let mut c = ScoreCounter::default();
        let flow = extract_amf_full(&ctx, &tiles, &pairs, FlowMode::Hard, &mut c).unwrap();
        for per_pair in &flow.disp {
            for &(dy, dx) in per_pair {
                assert_eq!((dy, dx), (0.0, 0.0));
            }
        }
        assert_eq!(c.0, (pairs.len() * tiles.n_tiles() * 256) as u64);
    }

    #[test]
    fn translating_video_hard_flow_matches_gt() {
        let (_, ctx, tiles) = setup((0.0, 1.0), 42);
        let mut c = ScoreCounter::default();
        let flow =
            extract_amf_full(&ctx, &tiles, &[(0, 2)], FlowMode::Hard, &mut c).unwrap();
        for (p, &(dy, dx)) in flow.disp[0].iter().enumerate() {
            let t = &tiles.tiles[p];
            if t.rep_x + 2 >= 16 {
                continue; // wrapped correspondence
            }
            assert_eq!((dy, dx), (0.0, 2.0), "tile {p}");
        }
    }

    #[test]
    fn soft_flow_close_to_hard_on_peaked_attention() {
        let (_, ctx, tiles) = setup((0.0, 1.0), 43);
        let mut c = ScoreCounter::default();
        // sharpened attention so the expectation concentrates
        let mut ctx2 = ctx.clone();
        ctx2.tau = 16.0;
        let hard = extract_amf_full(&ctx2, &tiles, &[(0, 1)], FlowMode::Hard, &mut c).unwrap();
        let soft = extract_amf_full(&ctx2, &tiles, &[(0, 1)], FlowMode::Soft, &mut c).unwrap();
        for (p, (&(hy, hx), &(sy, sx))) in hard.disp[0].iter().zip(&soft.disp[0]).enumerate() {
            let t = &tiles.tiles[p];
            if t.rep_x + 1 >= 16 {
                continue;
            }
            assert!((hy - sy).abs() < 0.1 && (hx - sx).abs() < 0.1, "tile {p}");
        }
    }

    #[test]
    fn windowed_equals_full_when_window_covers_grid() {
        let (_, ctx, tiles) = setup((0.0, 1.0), 44);
        let pairs = motion_pairs(5, 2);
        // l = 15 centered mid-grid covers rows/cols 1..15; use centers at
        // the grid middle so interior tiles see the whole relevant area.
        let l = 15;
        let centers = vec![vec![(8i64, 8i64); tiles.n_tiles()]; pairs.len()];
        let plan =
            build_window_plan(&centers, 2, l, 5, 16, 16, &tiles, CenterMode::Argmax).unwrap();
        let mut c = ScoreCounter::default();
        let full = extract_amf_full(&ctx, &tiles, &pairs, FlowMode::Hard, &mut c).unwrap();
        let win = extract_amf_windowed(&ctx, &plan, FlowMode::Hard, &mut c).unwrap();
        for (pi, (fp, wp)) in full.disp.iter().zip(&win.disp).enumerate() {
            for (p, (f, w)) in fp.iter().zip(wp).enumerate() {
                let t = &tiles.tiles[p];
                // interior tiles only: window rows 1..15 x cols 1..15
                let (i, j) = pairs[pi];
                let fy = t.rep_y as i64 + f.0 as i64;
                let fx = t.rep_x as i64 + f.1 as i64;
                let _ = (i, j);
                if fy >= 1 && fy <= 15 && fx >= 1 && fx <= 15 {
                    assert_eq!(f, w, "pair {pi} tile {p}");
                }
            }
        }
    }

    #[test]
    fn mis_centered_windows_disagree_with_full() {
        let (_, ctx, tiles) = setup((0.0, 1.0), 45);
        let pairs = motion_pairs(5, 1);
        // centers far from any true correspondence
        let off: Vec<(i64, i64)> = tiles
            .tiles
            .iter()
            .map(|t| (t.rep_y as i64 + 10, t.rep_x as i64 + 10))
            .collect();
        let centers = vec![off; pairs.len()];
        let plan =
            build_window_plan(&centers, 1, 3, 5, 16, 16, &tiles, CenterMode::Argmax).unwrap();
        let mut c = ScoreCounter::default();
        let full = extract_amf_full(&ctx, &tiles, &pairs, FlowMode::Hard, &mut c).unwrap();
        let win = extract_amf_windowed(&ctx, &plan, FlowMode::Hard, &mut c).unwrap();
        let disagreements = full
            .disp
            .iter()
            .flatten()
            .zip(win.disp.iter().flatten())
            .filter(|(f, w)| f != w)
            .count();
        assert!(disagreements > 0, "mis-centered windows must disagree somewhere");
    }

    #[test]
    fn distance_weight_values() {
        assert_eq!(distance_weight(1, 3, 0.2).unwrap(), 1.0);
        assert_eq!(distance_weight(3, 3, 0.2).unwrap(), 0.8);
        assert_eq!(distance_weight(4, 3, 0.2).unwrap(), 0.0);
        assert_eq!(distance_weight(1, 1, 0.2).unwrap(), 1.0);
        assert!(distance_weight(0, 3, 0.2).is_err());
    }

    fn flow_of(pairs: Vec<(usize, usize)>, disp: Vec<Vec<(f64, f64)>>) -> MotionFlow<f64> {
        MotionFlow {
            pairs,
            disp,
            mode: FlowMode::Hard,
        }
    }

    #[test]
    fn amf_loss_hand_values() {
        // identical flows -> 0
        let a = flow_of(vec![(0, 1)], vec![vec![(0.0, 1.0)]]);
        assert_eq!(amf_loss(&a, &a, 3, 0.2).unwrap(), 0.0);
        // single pair d=1, one tile, unit squared error -> 1.0
        let b = flow_of(vec![(0, 1)], vec![vec![(0.0, 0.0)]]);
        assert_eq!(amf_loss(&a, &b, 3, 0.2).unwrap(), 1.0);
        // pairs d=1 and d=s_f with unit squared errors, alpha=0.2 -> 0.9
        let r = flow_of(vec![(0, 1), (0, 3)], vec![vec![(0.0, 1.0)], vec![(0.0, 1.0)]]);
        let g = flow_of(vec![(0, 1), (0, 3)], vec![vec![(0.0, 0.0)], vec![(0.0, 0.0)]]);
        assert!((amf_loss(&r, &g, 3, 0.2).unwrap() - 0.9).abs() < 1e-15);
        // mismatched pair sets rejected
        let c = flow_of(vec![(0, 2)], vec![vec![(0.0, 0.0)]]);
        assert!(amf_loss(&a, &c, 3, 0.2).is_err());
    }

    #[test]
    fn window_loss_static_video_is_zero() {
        let (_, ctx, tiles) = setup((0.0, 0.0), 46);
        let mut c = ScoreCounter::default();
        let plan = plan_sliding(&ctx, &tiles, 3, 5, &mut c).unwrap();
        let l = window_loss(&ctx, &plan).unwrap();
        assert!(l < 1e-20, "loss {l}");
    }

    #[test]
    fn window_loss_zero_when_span_is_one() {
        let (_, ctx, tiles) = setup((0.0, 1.0), 47);
        let mut c = ScoreCounter::default();
        let plan = plan_sliding(&ctx, &tiles, 1, 5, &mut c).unwrap();
        assert_eq!(window_loss(&ctx, &plan).unwrap(), 0.0);
    }

    #[test]
    fn tracking_windows_beat_frozen_windows() {
        let (v, _) = generate_translating::<f64>(5, 8, 32, 32, (0.0, 1.0), 48, 1.0).unwrap();
        let ctx = project_qk(&v, 31, 8, 1.0, ProjectionKind::Seeded).unwrap();
        let tiles = TileGrid::new(32, 32, 8, 8, 8, 8).unwrap();
        let mut c = ScoreCounter::default();
        let tracking = plan_sliding(&ctx, &tiles, 3, 7, &mut c).unwrap();
        // frozen: windows stay at P_block for every target
        let pairs = motion_pairs(5, 3);
        let centers = vec![tiles
            .tiles
            .iter()
            .map(|t| (t.rep_y as i64, t.rep_x as i64))
            .collect::<Vec<_>>(); pairs.len()];
        let frozen =
            build_window_plan(&centers, 3, 7, 5, 32, 32, &tiles, CenterMode::Argmax).unwrap();
        let lt = window_loss(&ctx, &tracking).unwrap();
        let lf = window_loss(&ctx, &frozen).unwrap();
        // border windows clamp against the grid edge, so tracking drift is
        // small but not zero; frozen windows must be clearly worse
        assert!(lt < 0.25 * lf, "tracking {lt} vs frozen {lf}");
    }

    #[test]
    fn total_loss_combines_components() {
        let (_, ctx, tiles) = setup((0.0, 0.0), 49);
        let mut c = ScoreCounter::default();
        let plan = plan_sliding(&ctx, &tiles, 2, 5, &mut c).unwrap();
        let flow_ref = extract_amf_windowed(&ctx, &plan, FlowMode::Hard, &mut c).unwrap();
        let b = total_loss(&flow_ref, &ctx, &plan, 2, 0.2, 5.0, 1.0, &mut c).unwrap();
        assert!((b.l_total - (5.0 * b.l_amf + b.l_window)).abs() < 1e-15);
        assert!(total_loss(&flow_ref, &ctx, &plan, 2, 0.2, -1.0, 1.0, &mut c).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_evaluation() {
        let (v, _) = generate_translating::<f64>(4, 6, 12, 12, (0.0, 1.0), 50, 1.0).unwrap();
        let ctx = project_qk(&v, 31, 6, 1.0, ProjectionKind::Seeded).unwrap();
        let tiles = TileGrid::new(12, 12, 4, 4, 4, 4).unwrap();
        let mut c = ScoreCounter::default();
        let plan = plan_sliding(&ctx, &tiles, 2, 5, &mut c).unwrap();
        let flow_ref = extract_amf_windowed(&ctx, &plan, FlowMode::Hard, &mut c).unwrap();
        let spec = LossGraphSpec {
            frames: 4,
            channels: 6,
            height: 12,
            width: 12,
            w_q: &ctx.w_q,
            w_k: &ctx.w_k,
            d_h: 6,
            tau: 1.0,
            plan: &plan,
            flow_ref: &flow_ref,
            s_f: 2,
            alpha: 0.2,
            lambda_amf: 5.0,
            lambda_window: 1.0,
        };
        let (breakdown, _) = spec.eval(&v.values).unwrap();

        // Independent plain-path evaluation.
        let soft = extract_amf_windowed(&ctx, &plan, FlowMode::Soft, &mut c).unwrap();
        let plain_amf = amf_loss(&flow_ref, &soft, 2, 0.2).unwrap();
        let plain_win = window_loss(&ctx, &plan).unwrap();
        assert!((breakdown.l_amf - plain_amf).abs() < 1e-12, "{} vs {plain_amf}", breakdown.l_amf);
        assert!((breakdown.l_window - plain_win).abs() < 1e-12);
        assert!((breakdown.l_total - (5.0 * plain_amf + plain_win)).abs() < 1e-12);
    }

    #[test]
    fn tape_gradient_passes_finite_differences() {
        let (v, _) = generate_translating::<f64>(2, 4, 8, 8, (0.0, 1.0), 51, 1.0).unwrap();
        let ctx = project_qk(&v, 31, 4, 1.0, ProjectionKind::Seeded).unwrap();
        let tiles = TileGrid::new(8, 8, 4, 4, 4, 4).unwrap();
        let mut c = ScoreCounter::default();
        let plan = plan_sliding(&ctx, &tiles, 1, 5, &mut c).unwrap();
        let flow_ref = extract_amf_windowed(&ctx, &plan, FlowMode::Hard, &mut c).unwrap();
        let spec = LossGraphSpec {
            frames: 2,
            channels: 4,
            height: 8,
            width: 8,
            w_q: &ctx.w_q,
            w_k: &ctx.w_k,
            d_h: 4,
            tau: 1.0,
            plan: &plan,
            flow_ref: &flow_ref,
            s_f: 1,
            alpha: 0.2,
            lambda_amf: 5.0,
            lambda_window: 1.0,
        };
        // Perturb the latent so the loss is not at a stationary point.
        let mut x = v.values.clone();
        let mut s = crate::rng::Stream::new(52, "perturb");
        for v in x.data_mut() {
            *v += 0.1 * s.gaussian();
        }
        let (_, grad) = spec.eval(&x).unwrap();
        let err = crate::tape::check_gradient(
            |t| spec.eval(t).map(|(b, _)| b.l_total),
            &x,
            &grad,
            1e-3,
            64,
            53,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    proptest! {
        #[test]
        fn amf_loss_is_symmetric_and_quadratic(seed in any::<u64>(), c in 0.1f64..3.0) {
            let mut s = crate::rng::Stream::new(seed, "proptest-amfloss");
            let pairs = vec![(0usize, 1usize), (1usize, 3usize)];
            let mk = |s: &mut crate::rng::Stream| -> Vec<Vec<(f64, f64)>> {
                pairs.iter().map(|_| (0..4).map(|_| (s.uniform_range(-2.0, 2.0), s.uniform_range(-2.0, 2.0))).collect()).collect()
            };
            let a = flow_of(pairs.clone(), mk(&mut s));
            let b = flow_of(pairs.clone(), mk(&mut s));
            let lab = amf_loss(&a, &b, 3, 0.2).unwrap();
            let lba = amf_loss(&b, &a, 3, 0.2).unwrap();
            prop_assert!((lab - lba).abs() < 1e-12);
            prop_assert!(lab >= 0.0);
            // scaling all displacement differences by c scales the loss by c^2
            let scaled_disp: Vec<Vec<(f64, f64)>> = a.disp.iter().zip(&b.disp).map(
                |(ra, rb)| ra.iter().zip(rb).map(
                    |(&(ay, ax), &(by, bx))| (by + c * (ay - by), bx + c * (ax - bx))).collect()).collect();
            let a_scaled = flow_of(pairs.clone(), scaled_disp);
            let ls = amf_loss(&a_scaled, &b, 3, 0.2).unwrap();
            prop_assert!((ls - c * c * lab).abs() < 1e-9 * (1.0 + ls.abs()));
        }

        // w_d is nonincreasing on [1, s_f], 1 at d=1, 0 beyond s_f.
        #[test]
        fn distance_weight_monotone(s_f in 1usize..8, alpha in 0.0f64..1.0) {
            prop_assert_eq!(distance_weight(1, s_f, alpha).unwrap(), 1.0);
            let mut prev = 1.0;
            for d in 1..=s_f {
                let w = distance_weight(d, s_f, alpha).unwrap();
                prop_assert!(w <= prev + 1e-15);
                prev = w;
            }
            prop_assert_eq!(distance_weight(s_f + 1, s_f, alpha).unwrap(), 0.0);
        }
    }
}
