//! Inner latent-only optimization: AdamW updates with linear learning-rate
//! decay and step-skipping gradient reuse.

use std::time::Instant;

use crate::amf::LossBreakdown;
use crate::error::{AmfError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    /// inner optimization steps per guided outer step
    pub inner_steps: usize,
    /// gradient recomputation interval; 1 disables skipping
    pub delta_skip: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// compute a fresh gradient every step regardless of delta_skip
    pub force_full_gradients: bool,
    /// update optimizer moments on reuse steps too (default true)
    pub moments_on_reuse: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            inner_steps: 10,
            delta_skip: 3,
            lr_start: 0.003,
            lr_end: 0.002,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            force_full_gradients: false,
            moments_on_reuse: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps < 1 {
            return Err(AmfError::invalid("inner_steps must be >= 1"));
        }
        if self.delta_skip < 1 {
            return Err(AmfError::invalid("delta_skip must be >= 1"));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(AmfError::invalid("need lr_start >= lr_end > 0"));
        }
        Ok(())
    }
}

/// Linear decay from lr_start to lr_end across steps 0..J-1.
pub fn lr_at(j: usize, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total <= 1 {
        return lr_start;
    }
    lr_start + (lr_end - lr_start) * j as f64 / (total - 1) as f64
}

/// True when step j recomputes the gradient instead of reusing the cache.
pub fn should_compute_gradient(j: usize, delta_skip: usize, force_full: bool) -> bool {
    force_full || j % delta_skip == 0
}

#[derive(Debug, Clone, Default)]
pub struct GradientCache<F> {
    pub g: Option<Tensor<F>>,
    pub computed_at_step: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One AdamW update in place: decoupled weight decay, bias-corrected
/// first/second moments.
pub fn adamw_step<F: Real>(
    latent: &mut Tensor<F>,
    g: &Tensor<F>,
    state: &mut AdamState<F>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if latent.shape() != g.shape() {
        return Err(AmfError::shape("gradient shape does not match latent"));
    }
    state.t += 1;
    let (b1, b2) = (F::lit(betas.0), F::lit(betas.1));
    let bc1 = F::lit(1.0 - betas.0.powi(state.t as i32));
    let bc2 = F::lit(1.0 - betas.1.powi(state.t as i32));
    let lr_f = F::lit(lr);
    let eps_f = F::lit(eps);
    let wd = F::lit(weight_decay);
    let one = F::one();
    for (((x, gi), mi), vi) in latent
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(state.m.data_mut().iter_mut())
        .zip(state.v.data_mut().iter_mut())
    {
        *mi = b1 * *mi + (one - b1) * *gi;
        *vi = b2 * *vi + (one - b2) * *gi * *gi;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *x -= lr_f * (m_hat / (v_hat.sqrt() + eps_f) + wd * *x);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub computed: bool,
    /// loss is only known on computed steps
    pub loss: Option<f64>,
    pub l_amf: Option<f64>,
    pub l_window: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_time_ns: u128,
}

pub struct InnerResult<F> {
    pub latent: Tensor<F>,
    pub cache: GradientCache<F>,
    pub trace: Vec<TraceRow>,
    pub compute_count: usize,
    pub reuse_count: usize,
    /// breakdown from the most recent computed step
    pub last_breakdown: Option<LossBreakdown<F>>,
    /// fresh gradients, recorded only when collect_gradients is set
    pub gradients: Vec<Tensor<F>>,
}

/// Run J inner steps of gradient-guided latent optimization.  The loss
/// evaluator is called exactly once per computed step; reuse steps apply
/// the cached gradient.
pub fn inner_optimize<F: Real>(
    latent: &Tensor<F>,
    mut evaluator: impl FnMut(&Tensor<F>) -> Result<(LossBreakdown<F>, Tensor<F>)>,
    config: &GuidanceConfig,
    collect_gradients: bool,
) -> Result<InnerResult<F>> {
    config.validate()?;
    let mut x = latent.clone();
    let mut state = AdamState::new(latent.shape());
    let mut cache = GradientCache::default();
    let mut trace = Vec::with_capacity(config.inner_steps);
    let mut compute_count = 0usize;
    let mut reuse_count = 0usize;
    let mut last_breakdown = None;
    let mut gradients = Vec::new();

    for j in 0..config.inner_steps {
        let t0 = Instant::now();
        let lr = lr_at(j, config.inner_steps, config.lr_start, config.lr_end);
        let computed = should_compute_gradient(j, config.delta_skip, config.force_full_gradients);
        let (loss_info, g): (Option<LossBreakdown<F>>, &Tensor<F>) = if computed {
            let (b, g) = evaluator(&x)?;
            if !b.l_total.is_finite() {
                return Err(AmfError::Numerical(format!(
                    "non-finite loss at inner step {j}"
                )));
            }
            if !g.all_finite() {
                return Err(AmfError::Numerical(format!(
                    "non-finite gradient at inner step {j}"
                )));
            }
            compute_count += 1;
            cache.g = Some(g);
            cache.computed_at_step = Some(j);
            if collect_gradients {
                gradients.push(cache.g.as_ref().unwrap().clone());
            }
            last_breakdown = Some(b);
            (Some(b), cache.g.as_ref().unwrap())
        } else {
            reuse_count += 1;
            let g = cache
                .g
                .as_ref()
                .ok_or_else(|| AmfError::invalid("reuse step before any gradient computation"))?;
            (None, g)
        };
        let grad_norm = g.norm().to_f64_lossy();
        // moments update on reuse steps is the default; freezing them is
        // an ablation knob
        if computed || config.moments_on_reuse {
            let g = g.clone();
            adamw_step(
                &mut x,
                &g,
                &mut state,
                lr,
                config.betas,
                config.eps,
                config.weight_decay,
            )?;
        } else {
            // frozen-moment variant: plain cached-gradient descent step
            let g = g.clone();
            let lr_f = F::lit(lr);
            let wd = F::lit(config.weight_decay);
            for (xi, gi) in x.data_mut().iter_mut().zip(g.data()) {
                *xi -= lr_f * (*gi + wd * *xi);
            }
        }
        if !x.all_finite() {
            return Err(AmfError::Numerical(format!(
                "non-finite latent after inner step {j}"
            )));
        }
        trace.push(TraceRow {
            step: j,
            computed,
            loss: loss_info.map(|b| b.l_total.to_f64_lossy()),
            l_amf: loss_info.map(|b| b.l_amf.to_f64_lossy()),
            l_window: loss_info.map(|b| b.l_window.to_f64_lossy()),
            grad_norm,
            lr,
            wall_time_ns: t0.elapsed().as_nanos(),
        });
    }

    Ok(InnerResult {
        latent: x,
        cache,
        trace,
        compute_count,
        reuse_count,
        last_breakdown,
        gradients,
    })
}

/// Pairwise cosine similarities between step gradients; returns the J×J
/// matrix and a flag set when any gradient had zero norm (its row/column
/// entries are recorded as 0).
pub fn gradient_similarity_diag<F: Real>(grads: &[Tensor<F>]) -> Result<(Tensor<F>, bool)> {
    let n = grads.len();
    if n == 0 {
        return Err(AmfError::invalid("no gradients to compare"));
    }
    for g in grads {
        if g.shape() != grads[0].shape() {
            return Err(AmfError::shape("gradient shapes differ"));
        }
    }
    let norms: Vec<F> = grads.iter().map(Tensor::norm).collect();
    let mut zero_flag = false;
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = if norms[i] == F::zero() || norms[j] == F::zero() {
                zero_flag = true;
                F::zero()
            } else {
                grads[i].dot(&grads[j])? / (norms[i] * norms[j])
            };
            out.set(&[i, j], v);
        }
    }
    Ok((out, zero_flag))
}

/// Median of the first superdiagonal (adjacent-step similarities).
pub fn median_adjacent_similarity<F: Real>(matrix: &Tensor<F>) -> Option<f64> {
    let n = matrix.shape()[0];
    if n < 2 {
        return None;
    }
    let mut vals: Vec<f64> = (0..n - 1)
        .map(|i| matrix.at(&[i, i + 1]).to_f64_lossy())
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = vals.len();
    Some(if m % 2 == 1 {
        vals[m / 2]
    } else {
        0.5 * (vals[m / 2 - 1] + vals[m / 2])
    })
}
