//! CLI entry point: synth / transfer / bench / gradcheck / diag.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage/config error.
//! Failures print a machine-readable JSON object to stderr.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use amflow::amf::{extract_amf_full, extract_amf_windowed, FlowMode, LossGraphSpec, MotionFlow};
use amflow::attention::{
    count_score_ops, plan_sliding, planning_score_ops, project_qk, ProjectionKind, ScoreCounter,
};
use amflow::config::{RunConfig, Scenario};
use amflow::error::AmfError;
use amflow::guidance::{
    gradient_similarity_diag, inner_optimize, median_adjacent_similarity, GuidanceConfig,
};
use amflow::pipeline::{invert_reference, run_transfer, TransferJob};
use amflow::rng::{stream_seed, Stream};
use amflow::synth::{generate_multi_object, generate_translating, GroundTruthFlow, Region};
use amflow::tape::check_gradient;
use amflow::tensor::Tensor;
use amflow::{LatentVideo64, Result, Tensor64};

#[derive(Parser)]
#[command(name = "amflow", version, about = "sliding-window attention motion flow engine")]
struct Cli {
    /// flat key=value config file; defaults used when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// inline overrides, e.g. --set delta_skip=3 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// root seed override
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// generate a synthetic latent video plus ground-truth flow artifacts
    Synth,
    /// run the full guided transfer and write latent, report, trace
    Transfer,
    /// paired full-vs-windowed op counts and a delta_skip sweep
    Bench,
    /// finite-difference check of the total-loss gradient
    Gradcheck,
    /// inspection artifacts
    Diag {
        #[arg(value_enum)]
        what: DiagWhat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagWhat {
    /// window-plan rectangles for the clean reference
    Windows,
    /// extracted reference flow as CSV
    Flow,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match &e {
                AmfError::Config { .. } | AmfError::InvalidArgument(_) => 2u8,
                _ => 1u8,
            };
            let payload = json!({
                "error": { "kind": error_kind(&e), "message": e.to_string() },
                "exit_code": code,
            });
            eprintln!("{payload}");
            ExitCode::from(code)
        }
    }
}

fn error_kind(e: &AmfError) -> &'static str {
    match e {
        AmfError::Shape(_) => "shape",
        AmfError::NonFinite(_) => "non_finite",
        AmfError::InvalidArgument(_) => "invalid_argument",
        AmfError::Config { .. } => "config",
        AmfError::Io(_) => "io",
        AmfError::Container(_) => "container",
        AmfError::Numerical(_) => "numerical",
        AmfError::Serialize(_) => "serialize",
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| AmfError::Config {
            key: s.clone(),
            message: "--set expects KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_reference(cfg: &RunConfig) -> Result<(LatentVideo64, GroundTruthFlow)> {
    let tex = stream_seed(cfg.seed, "texture-reference");
    match cfg.scenario {
        Scenario::Translating => generate_translating(
            cfg.frames,
            cfg.channels,
            cfg.height,
            cfg.width,
            (cfg.velocity_y, cfg.velocity_x),
            tex,
            cfg.amplitude,
        ),
        Scenario::Static => generate_translating(
            cfg.frames,
            cfg.channels,
            cfg.height,
            cfg.width,
            (0.0, 0.0),
            tex,
            cfg.amplitude,
        ),
        Scenario::MultiObject => {
            let (vy, vx) = (cfg.velocity_y.round() as i64, cfg.velocity_x.round() as i64);
            let objects = default_objects(cfg.frames, cfg.height, cfg.width, vy, vx)?;
            generate_multi_object(
                cfg.frames,
                cfg.channels,
                cfg.height,
                cfg.width,
                &objects,
                tex,
                cfg.amplitude,
            )
        }
    }
}

/// Two interior patches moving in opposite directions, sized so their
/// whole trajectories stay inside the grid and apart from each other.
fn default_objects(
    frames: usize,
    h: usize,
    w: usize,
    vy: i64,
    vx: i64,
) -> Result<Vec<(Region, (i64, i64))>> {
    let span = (frames - 1) as i64;
    let side = (h.min(w) / 4).max(2);
    let a = Region {
        y0: 1,
        x0: 1,
        height: side,
        width: side,
    };
    let b = Region {
        y0: (h as i64) - 1 - side as i64 - span * vy.abs(),
        x0: (w as i64) - 1 - side as i64 - span * vx.abs(),
        height: side,
        width: side,
    };
    Ok(vec![(a, (vy, vx)), (b, (-vy, -vx))])
}

fn make_content(cfg: &RunConfig) -> Result<LatentVideo64> {
    let tex = stream_seed(cfg.seed, "texture-content");
    // appearance stand-in: static textured video with its own texture
    let (v, _) = generate_translating(
        cfg.frames,
        cfg.channels,
        cfg.height,
        cfg.width,
        (0.0, 0.0),
        tex,
        cfg.amplitude,
    )?;
    Ok(v)
}

fn build_job(cfg: &RunConfig) -> Result<TransferJob<f64>> {
    Ok(TransferJob {
        reference: make_reference(cfg)?.0,
        content_target: make_content(cfg)?,
        outer_steps: cfg.outer_steps,
        guided_fraction: cfg.guided_fraction,
        seed: cfg.seed,
        guidance: cfg.guidance(),
        stack: cfg.stack(),
    })
}

fn prepare_out(cli: &Cli, cfg: &RunConfig, subcommand: &str, artifacts: &[&str]) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("config.txt"), cfg.echo())?;
    let manifest = json!({
        "tool": "amflow",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "seed": cfg.seed,
        "config": "config.txt",
        "artifacts": artifacts,
    });
    std::fs::write(
        cli.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

fn flow_rows(flow: &MotionFlow<f64>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (pi, &(i, j)) in flow.pairs.iter().enumerate() {
        for (p, &(dy, dx)) in flow.disp[pi].iter().enumerate() {
            rows.push(vec![
                i.to_string(),
                j.to_string(),
                p.to_string(),
                format!("{dy}"),
                format!("{dx}"),
            ]);
        }
    }
    rows
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match cli.cmd {
        Cmd::Synth => cmd_synth(cli, &cfg),
        Cmd::Transfer => cmd_transfer(cli, &cfg),
        Cmd::Bench => cmd_bench(cli, &cfg),
        Cmd::Gradcheck => cmd_gradcheck(cli, &cfg),
        Cmd::Diag { what } => cmd_diag(cli, &cfg, what),
    }
}

fn reference_flow(
    cfg: &RunConfig,
    video: &LatentVideo64,
) -> Result<(MotionFlow<f64>, amflow::attention::WindowPlan)> {
    let stack = cfg.stack();
    let tiles = stack.tile_grid(cfg.height, cfg.width)?;
    let ctx = project_qk(
        video,
        stream_seed(cfg.seed, "projection"),
        stack.d_h,
        stack.tau,
        ProjectionKind::Seeded,
    )?;
    let mut counter = ScoreCounter::default();
    let plan = plan_sliding(&ctx, &tiles, stack.s_f, stack.window_l, &mut counter)?;
    let flow = extract_amf_windowed(&ctx, &plan, cfg.flow_mode, &mut counter)?;
    Ok((flow, plan))
}

fn cmd_synth(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let (video, _gt) = make_reference(cfg)?;
    let (flow, _) = reference_flow(cfg, &video)?;
    prepare_out(cli, cfg, "synth", &["reference.amft", "flow.csv", "flow_magnitude.pgm"])?;
    amflow::io::write_tensor(&cli.out.join("reference.amft"), &video.values)?;
    amflow::io::write_csv(
        &cli.out.join("flow.csv"),
        &["frame_i", "frame_j", "tile", "dy", "dx"],
        &flow_rows(&flow),
    )?;
    // per-tile magnitude image for the first pair
    let stack = cfg.stack();
    let tiles = stack.tile_grid(cfg.height, cfg.width)?;
    let (ty, tx) = tiles.grid_dims();
    let mags: Vec<f64> = flow.disp[0]
        .iter()
        .map(|&(dy, dx)| (dy * dy + dx * dx).sqrt())
        .collect();
    amflow::io::write_pgm(&cli.out.join("flow_magnitude.pgm"), tx, ty, &mags)?;
    println!(
        "synth: wrote {} frames, {} flow slots to {}",
        cfg.frames,
        flow.pairs.len() * flow.n_tiles(),
        cli.out.display()
    );
    Ok(())
}

fn cmd_transfer(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let job = build_job(cfg)?;
    let t0 = Instant::now();
    let out = run_transfer(&job)?;
    let wall = t0.elapsed();

    // Gradient-similarity diagnostic: forced-full inner run against the
    // first cached reference entry, from the same initial noise.
    let sim = {
        let mut s = Stream::new(cfg.seed, "init-noise");
        let n = job.content_target.values.numel();
        let x0: Tensor64 =
            Tensor::from_vec(job.content_target.values.shape(), s.gaussian_vec::<f64>(n))?;
        let xv = {
            let mut v = LatentVideo64::new(cfg.frames, cfg.channels, cfg.height, cfg.width)?;
            v.values = x0.clone();
            v
        };
        let ctx = project_qk(
            &xv,
            stream_seed(cfg.seed, "projection"),
            cfg.d_h,
            cfg.tau,
            ProjectionKind::Seeded,
        )?;
        let stack = cfg.stack();
        let tiles = stack.tile_grid(cfg.height, cfg.width)?;
        let mut c = ScoreCounter::default();
        let plan = plan_sliding(&ctx, &tiles, cfg.s_f, cfg.window_l, &mut c)?;
        let entry = &out.cache.entries[0];
        let spec = LossGraphSpec {
            frames: cfg.frames,
            channels: cfg.channels,
            height: cfg.height,
            width: cfg.width,
            w_q: &ctx.w_q,
            w_k: &ctx.w_k,
            d_h: cfg.d_h,
            tau: cfg.tau,
            plan: &plan,
            flow_ref: &entry.flow,
            s_f: cfg.s_f,
            alpha: cfg.alpha,
            lambda_amf: cfg.lambda_amf,
            lambda_window: cfg.lambda_window,
        };
        let gcfg = GuidanceConfig {
            force_full_gradients: true,
            ..cfg.guidance()
        };
        let r = inner_optimize(&x0, |x| spec.eval(x), &gcfg, true)?;
        let (matrix, zero_flag) = gradient_similarity_diag(&r.gradients)?;
        let median = median_adjacent_similarity(&matrix);
        let n = matrix.shape()[0];
        let rows: Vec<Vec<String>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| format!("{}", matrix.at(&[i, j])))
                    .collect()
            })
            .collect();
        let header: Vec<String> = (0..n).map(|j| format!("g{j}")).collect();
        amflow::io::write_csv(
            &cli.out.join("gradient_similarity.csv"),
            &header.iter().map(String::as_str).collect::<Vec<_>>(),
            &rows,
        )
        .or_else(|_| {
            std::fs::create_dir_all(&cli.out)?;
            amflow::io::write_csv(
                &cli.out.join("gradient_similarity.csv"),
                &header.iter().map(String::as_str).collect::<Vec<_>>(),
                &rows,
            )
        })?;
        json!({
            "median_adjacent_similarity": median,
            "zero_norm_flag": zero_flag,
            "steps": n,
        })
    };

    prepare_out(
        cli,
        cfg,
        "transfer",
        &[
            "generated.amft",
            "guided.amft",
            "report.json",
            "trace.csv",
            "gradient_similarity.csv",
        ],
    )?;
    amflow::io::write_tensor(&cli.out.join("generated.amft"), &out.generated.values)?;
    amflow::io::write_tensor(&cli.out.join("guided.amft"), &out.guided_latent.values)?;

    let mut rows = Vec::new();
    for (t, trace) in &out.traces {
        for r in trace {
            rows.push(vec![
                t.to_string(),
                r.step.to_string(),
                r.computed.to_string(),
                r.loss.map(|v| format!("{v}")).unwrap_or_default(),
                r.l_amf.map(|v| format!("{v}")).unwrap_or_default(),
                r.l_window.map(|v| format!("{v}")).unwrap_or_default(),
                format!("{}", r.grad_norm),
                format!("{}", r.lr),
                r.wall_time_ns.to_string(),
            ]);
        }
    }
    amflow::io::write_csv(
        &cli.out.join("trace.csv"),
        &[
            "outer_step",
            "inner_step",
            "computed",
            "loss",
            "l_amf",
            "l_window",
            "grad_norm",
            "lr",
            "wall_time_ns",
        ],
        &rows,
    )?;

    // wall time lives in its own file so report.json stays deterministic
    std::fs::write(
        cli.out.join("timing.txt"),
        format!("transfer_wall_ms={}\n", wall.as_millis()),
    )?;
    let report = json!({
        "transfer": out.report,
        "gradient_similarity": sim,
    });
    std::fs::write(
        cli.out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    println!(
        "transfer: epe_soft={:.4} epe_hard={:.4} final_l_amf={:.6} grads={} ({} ms)",
        out.report.fidelity_soft_vs_ref.mean_epe,
        out.report.fidelity_hard_vs_ref.mean_epe,
        out.report.final_l_amf,
        out.report.grad_computations,
        wall.as_millis()
    );
    Ok(())
}

fn cmd_bench(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let (video, _) = make_reference(cfg)?;
    let stack = cfg.stack();
    let tiles = stack.tile_grid(cfg.height, cfg.width)?;
    let ctx = project_qk(
        &video,
        stream_seed(cfg.seed, "projection"),
        stack.d_h,
        stack.tau,
        ProjectionKind::Seeded,
    )?;

    // full (all pairs, representative queries) vs windowed extraction
    let all_pairs: Vec<(usize, usize)> = (0..cfg.frames)
        .flat_map(|i| (i + 1..cfg.frames).map(move |j| (i, j)))
        .collect();
    let mut c_full = ScoreCounter::default();
    let t0 = Instant::now();
    let _ = extract_amf_full(&ctx, &tiles, &all_pairs, cfg.flow_mode, &mut c_full)?;
    let full_ms = t0.elapsed().as_secs_f64() * 1e3;

    let mut c_win = ScoreCounter::default();
    let t1 = Instant::now();
    let plan = plan_sliding(&ctx, &tiles, cfg.s_f, cfg.window_l, &mut c_win)?;
    let _ = extract_amf_windowed(&ctx, &plan, cfg.flow_mode, &mut c_win)?;
    let win_ms = t1.elapsed().as_secs_f64() * 1e3;

    let analytic = count_score_ops(
        cfg.frames,
        cfg.height,
        cfg.width,
        cfg.s_f,
        cfg.window_l,
        tiles.n_tiles(),
    );

    // delta_skip sweep on the configured transfer job
    let mut sweep = Vec::new();
    for delta in [1usize, 2, 3, 5] {
        let mut job = build_job(cfg)?;
        job.guidance.delta_skip = delta;
        let t = Instant::now();
        let out = run_transfer(&job)?;
        sweep.push(json!({
            "delta_skip": delta,
            "grad_computations": out.report.grad_computations,
            "loss_evaluations": out.report.loss_evaluations,
            "final_l_amf": out.report.final_l_amf,
            "final_l_total": out.report.final_l_total,
            "wall_ms": t.elapsed().as_secs_f64() * 1e3,
        }));
    }

    prepare_out(cli, cfg, "bench", &["bench.json"])?;
    let table = json!({
        "attention": {
            "full_ops_instrumented": c_full.0,
            "full_ops_expected": analytic.full_rep_ops,
            "windowed_ops_instrumented": c_win.0,
            "windowed_ops_expected": plan.score_ops()
                + planning_score_ops(&tiles, cfg.window_l, cfg.frames, cfg.height, cfg.width),
            "windowed_extraction_ops_expected": plan.score_ops(),
            "analytic": analytic,
            "full_wall_ms": full_ms,
            "windowed_wall_ms": win_ms,
            "op_ratio_full_over_windowed": c_full.0 as f64 / c_win.0 as f64,
        },
        "delta_skip_sweep": sweep,
    });
    std::fs::write(
        cli.out.join("bench.json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    println!(
        "bench: full {} ops vs windowed {} ops (ratio {:.2})",
        c_full.0,
        c_win.0,
        c_full.0 as f64 / c_win.0 as f64
    );
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    // small instance: 2 frames, 16x16, config's remaining parameters
    let mut small = cfg.clone();
    small.frames = 2;
    small.height = 16;
    small.width = 16;
    small.s_f = 1;
    let (video, _) = make_reference(&small)?;
    let stack = small.stack();
    let tiles = stack.tile_grid(small.height, small.width)?;
    let ctx = project_qk(
        &video,
        stream_seed(small.seed, "projection"),
        stack.d_h,
        stack.tau,
        ProjectionKind::Seeded,
    )?;
    let mut c = ScoreCounter::default();
    let plan = plan_sliding(&ctx, &tiles, small.s_f, small.window_l, &mut c)?;
    let flow_ref = extract_amf_windowed(&ctx, &plan, FlowMode::Hard, &mut c)?;
    let spec = LossGraphSpec {
        frames: small.frames,
        channels: small.channels,
        height: small.height,
        width: small.width,
        w_q: &ctx.w_q,
        w_k: &ctx.w_k,
        d_h: stack.d_h,
        tau: stack.tau,
        plan: &plan,
        flow_ref: &flow_ref,
        s_f: small.s_f,
        alpha: stack.alpha,
        lambda_amf: stack.lambda_amf,
        lambda_window: stack.lambda_window,
    };
    // Evaluate at a noise-dominated point, like a guided-step latent:
    // on the clean video the softmax saturates and the gradient vanishes,
    // which would make the check vacuous.
    let mut s = Stream::new(small.seed, "gradcheck-perturb");
    let mut x = video.values.clone();
    for v in x.data_mut() {
        *v = 0.1 * *v + s.gaussian();
    }
    let (_, grad) = spec.eval(&x)?;
    let err = check_gradient(
        |t| spec.eval(t).map(|(b, _)| b.l_total),
        &x,
        &grad,
        1e-3,
        128,
        stream_seed(small.seed, "gradcheck-sample"),
    )?;
    prepare_out(cli, &small, "gradcheck", &[])?;
    println!("gradcheck: max relative error {err:.3e} at step 1e-3");
    if err < 1e-4 {
        Ok(())
    } else {
        Err(AmfError::Numerical(format!(
            "gradient check failed: max relative error {err:.3e} >= 1e-4"
        )))
    }
}

fn cmd_diag(cli: &Cli, cfg: &RunConfig, what: DiagWhat) -> Result<()> {
    let (video, _) = make_reference(cfg)?;
    match what {
        DiagWhat::Windows => {
            let job = build_job(cfg)?;
            let cache = invert_reference(&job)?;
            let mut rows = Vec::new();
            for e in &cache.entries {
                for (pi, &(i, j)) in e.plan.pairs.iter().enumerate() {
                    for (p, r) in e.plan.rects[pi].iter().enumerate() {
                        rows.push(vec![
                            e.t.to_string(),
                            i.to_string(),
                            j.to_string(),
                            p.to_string(),
                            r.y0.to_string(),
                            r.y1.to_string(),
                            r.x0.to_string(),
                            r.x1.to_string(),
                        ]);
                    }
                }
            }
            prepare_out(cli, cfg, "diag-windows", &["windows.csv"])?;
            amflow::io::write_csv(
                &cli.out.join("windows.csv"),
                &["t", "frame_i", "frame_j", "tile", "y0", "y1", "x0", "x1"],
                &rows,
            )?;
            println!("diag: wrote {} window rows", rows.len());
        }
        DiagWhat::Flow => {
            let (flow, _) = reference_flow(cfg, &video)?;
            prepare_out(cli, cfg, "diag-flow", &["flow.csv"])?;
            amflow::io::write_csv(
                &cli.out.join("flow.csv"),
                &["frame_i", "frame_j", "tile", "dy", "dx"],
                &flow_rows(&flow),
            )?;
            println!("diag: wrote {} flow rows", flow.pairs.len() * flow.n_tiles());
        }
    }
    Ok(())
}
