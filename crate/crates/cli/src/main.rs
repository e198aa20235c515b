//! Command-line driver for the avatar pipeline: synthetic subject
//! generation, single-subject training, reconstruction with trained
//! weights, animation rendering, and self-checks.
//!
//! Every subcommand that writes an output directory drops a `run.json`
//! echoing the command, arguments, and resolved configuration, so any
//! artifact can be traced back to the invocation that produced it. All
//! outputs are deterministic for fixed arguments; `AVATARFORGE_THREADS`
//! changes wall time, never results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use avatarforge_core::assets::{
    load_image, load_mesh, load_pfm, load_subject, make_mini_rig, make_synthetic_subject,
    save_image, save_mesh, save_pfm, save_subject, Image,
};
use avatarforge_core::checks;
use avatarforge_core::headmodel::{load_params, save_params};
use avatarforge_core::losses::{psnr, ssim};
use avatarforge_core::raster::{rasterize, render_mask, render_normals, shade_texture};
use avatarforge_core::{
    headmodel, pipeline, Config, Error, Model, PoseParams, Profile, Result, RiggedMesh, UvImage,
};

#[derive(Parser)]
#[command(
    name = "avatarforge",
    version,
    about = "Feed-forward reconstruction of rigged head avatars from a single photo"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic subject bundle (photo, supervision maps,
    /// ground-truth mesh and texture).
    Synth(SynthArgs),
    /// Optimize the network against one subject and export the avatar.
    Train(TrainArgs),
    /// Reconstruct an avatar from a subject using trained weights.
    Infer(InferArgs),
    /// Render an animation sweep of a reconstructed avatar.
    Render(RenderArgs),
    /// Run the self-check suites (gradients, geometry, raster, formats).
    Check(CheckArgs),
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    match s {
        "desk" => Ok(Profile::Desk),
        "paper" => Ok(Profile::Paper),
        other => Err(format!("unknown profile '{other}' (expected desk or paper)")),
    }
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Output directory for the subject bundle.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed; same seed, same subject.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Square image resolution.
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Rig scale: desk | paper.
    #[arg(long, default_value = "desk", value_parser = parse_profile)]
    profile: Profile,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Subject bundle directory (from `synth`).
    #[arg(long)]
    subject: PathBuf,
    /// Output directory for weights, metrics, and the final avatar.
    #[arg(long)]
    out: PathBuf,
    /// Optimization steps.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Configuration JSON; defaults to the desk configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configuration's parameter-init seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configuration's refinement iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the configuration's base learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Serialize)]
struct InferArgs {
    /// Subject bundle directory.
    #[arg(long)]
    subject: PathBuf,
    /// Trained checkpoint (weights.bin from `train`).
    #[arg(long)]
    weights: PathBuf,
    /// Output directory for the reconstructed avatar.
    #[arg(long)]
    out: PathBuf,
    /// Configuration JSON; must match the checkpoint. Defaults to the
    /// desk configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also export every refinement iteration's intermediate images.
    #[arg(long, default_value_t = false)]
    dump_state: bool,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    /// Avatar directory (from `train` or `infer`): mesh.obj,
    /// texture.pfm/png, params.json.
    #[arg(long)]
    avatar: PathBuf,
    /// Output directory for the frames.
    #[arg(long)]
    out: PathBuf,
    /// Number of frames in the sweep; frame 0 is the unmodified pose.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Square frame resolution.
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Also write per-frame depth/normal/mask/part geometry buffers.
    #[arg(long, default_value_t = false)]
    dump_gbuffer: bool,
}

#[derive(Args, Serialize)]
struct CheckArgs {
    /// Which suite to run: grad | geometry | raster | roundtrip | all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Seed for the randomized fixtures.
    #[arg(long, default_value_t = 77)]
    seed: u64,
    /// Random shapes per operation in the gradient suite.
    #[arg(long, default_value_t = 3)]
    grad_reps: usize,
    /// Fixtures in the geometry suite.
    #[arg(long, default_value_t = 25)]
    fixtures: usize,
    /// Random meshes in the raster coverage check.
    #[arg(long, default_value_t = 10)]
    meshes: usize,
    /// Poses in the unwrap fidelity check.
    #[arg(long, default_value_t = 5)]
    unwraps: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Synth(args) => cmd_synth(&args),
        Cmd::Train(args) => cmd_train(&args),
        Cmd::Infer(args) => cmd_infer(&args),
        Cmd::Render(args) => cmd_render(&args),
        Cmd::Check(args) => return cmd_check(&args),
    }?;
    Ok(ExitCode::SUCCESS)
}

/// Echo of the invocation next to its outputs. Deliberately free of
/// timestamps and host details so reruns are byte-identical.
fn write_run_json<A: Serialize>(
    dir: &Path,
    command: &str,
    args: &A,
    config: Option<&Config>,
) -> Result<()> {
    let doc = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "config": config,
    });
    let text = serde_json::to_string_pretty(&doc).expect("run echo serializes");
    let path = dir.join("run.json");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn resolve_config(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    iterations: Option<usize>,
    lr: Option<f64>,
) -> Result<Config> {
    let mut cfg = match config {
        Some(path) => Config::load(path)?,
        None => Config::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(k) = iterations {
        cfg.iterations = k;
    }
    if let Some(l) = lr {
        cfg.lr = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let rig = make_mini_rig(args.profile);
    let subject = make_synthetic_subject(args.seed, &rig, args.res)?;
    save_subject(&subject, &args.out)?;
    write_run_json(&args.out, "synth", args, None)?;
    println!(
        "subject seed {} at {}x{} -> {}",
        args.seed,
        args.res,
        args.res,
        args.out.display()
    );
    Ok(())
}

/// Writes the reconstructed avatar (mesh, texture, reconstruction pose,
/// posed render, configuration) into `dir`.
fn export_avatar(
    dir: &Path,
    cfg: &Config,
    mesh: &RiggedMesh,
    texture: &UvImage,
    render: &Image,
    params: &PoseParams,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_mesh(mesh, &dir.join("mesh.obj"))?;
    save_pfm(&texture.color, &dir.join("texture.pfm"))?;
    save_image(&texture.color, &dir.join("texture.png"))?;
    save_params(params, &dir.join("params.json"))?;
    save_pfm(render, &dir.join("render.pfm"))?;
    save_image(render, &dir.join("render.png"))?;
    cfg.save(&dir.join("config.json"))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, args.seed, args.iterations, args.lr)?;
    let subject = load_subject(&args.subject)?;
    let mut model = Model::<f32>::new(cfg.clone())?;
    let report = pipeline::train_overfit(&mut model, &subject, args.steps, Some(&args.out))?;

    // Export the avatar the *trained* weights produce.
    let run = model.forward(&subject)?;
    export_avatar(
        &args.out,
        &cfg,
        &run.final_mesh,
        &run.final_texture,
        &run.final_render,
        &subject.pose_params,
    )?;
    write_run_json(&args.out, "train", args, Some(&cfg))?;

    let quality = psnr(&run.final_render, &subject.input_image, &subject.fg_mask)?;
    let structure = ssim(&run.final_render, &subject.input_image, &subject.fg_mask)?;
    println!(
        "trained {} steps: loss {:.6e}, psnr {:.2} dB, ssim {:.4} -> {}",
        args.steps,
        if report.rows.is_empty() {
            run.value(run.loss)
        } else {
            report.final_loss
        },
        quality,
        structure,
        args.out.display()
    );
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, None, None, None)?;
    let subject = load_subject(&args.subject)?;
    let mut model = Model::<f32>::new(cfg.clone())?;
    model.load_weights(&args.weights)?;
    let run = model.forward(&subject)?;

    export_avatar(
        &args.out,
        &cfg,
        &run.final_mesh,
        &run.final_texture,
        &run.final_render,
        &subject.pose_params,
    )?;
    if args.dump_state {
        for st in &run.states {
            let t = st.t;
            save_image(&st.rendered, &args.out.join(format!("iter{t}_render.png")))?;
            save_image(&st.texture, &args.out.join(format!("iter{t}_texture.png")))?;
            save_image(
                &st.unwrapped.color,
                &args.out.join(format!("iter{t}_unwrapped.png")),
            )?;
            save_pfm(
                &st.unwrapped.validity,
                &args.out.join(format!("iter{t}_validity.pfm")),
            )?;
            save_mesh(&st.mesh, &args.out.join(format!("iter{t}_mesh.obj")))?;
        }
    }
    write_run_json(&args.out, "infer", args, Some(&cfg))?;

    let quality = psnr(&run.final_render, &subject.input_image, &subject.fg_mask)?;
    let structure = ssim(&run.final_render, &subject.input_image, &subject.fg_mask)?;
    println!(
        "reconstructed: loss {:.6e}, psnr {:.2} dB, ssim {:.4} -> {}",
        run.value(run.loss),
        quality,
        structure,
        args.out.display()
    );
    Ok(())
}

/// The animation sweep applied on top of the reconstruction pose: a yaw
/// swing, a faster shallow pitch nod, and an expression pulse. At `s = 0`
/// every offset is zero, so frame 0 reproduces the reconstruction pose.
fn sweep_pose(base: &PoseParams, s: f64) -> PoseParams {
    use std::f64::consts::TAU;
    let mut p = base.clone();
    if let Some(rot) = p.joint_rotations.get_mut(1) {
        rot[1] += 0.35 * (TAU * s).sin();
        rot[0] += 0.12 * (2.0 * TAU * s).sin();
    }
    if let Some(c) = p.expr_coeffs.first_mut() {
        *c += 0.5 * (TAU * s).sin();
    }
    p
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    if args.frames == 0 {
        return Err(Error::invariant("need at least one frame"));
    }
    let mesh = load_mesh(&args.avatar.join("mesh.obj"))?;
    let pfm_path = args.avatar.join("texture.pfm");
    let color = if pfm_path.exists() {
        load_pfm(&pfm_path)?
    } else {
        load_image(&args.avatar.join("texture.png"))?
    };
    let texture = UvImage::full(color);
    let params_path = args.avatar.join("params.json");
    let base = if params_path.exists() {
        load_params(&params_path)?
    } else {
        PoseParams::rest(&mesh, args.res)
    };
    base.validate_for(&mesh)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    for f in 0..args.frames {
        let s = f as f64 / args.frames as f64;
        let params = sweep_pose(&base, s);
        let posed = headmodel::animate(&mesh, &mesh.vertices, &params)?;
        let rm = rasterize(&posed, &params.camera, args.res, args.res)?;
        let frame = shade_texture(&rm, &texture);
        save_image(&frame, &args.out.join(format!("frame_{f:03}.png")))?;
        if args.dump_gbuffer {
            let mut depth = Image::new(rm.height, rm.width, 1);
            for (o, &d) in depth.data.iter_mut().zip(&rm.depth) {
                *o = d as f32;
            }
            let mut part = Image::new(rm.height, rm.width, 1);
            for (o, &p) in part.data.iter_mut().zip(&rm.part) {
                *o = p as f32;
            }
            save_pfm(&depth, &args.out.join(format!("frame_{f:03}_depth.pfm")))?;
            save_pfm(
                &render_normals(&rm),
                &args.out.join(format!("frame_{f:03}_normal.pfm")),
            )?;
            save_pfm(
                &render_mask(&rm),
                &args.out.join(format!("frame_{f:03}_mask.pfm")),
            )?;
            save_pfm(&part, &args.out.join(format!("frame_{f:03}_part.pfm")))?;
        }
    }
    write_run_json(&args.out, "render", args, None)?;
    println!(
        "rendered {} frames at {}x{} -> {}",
        args.frames,
        args.res,
        args.res,
        args.out.display()
    );
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<ExitCode> {
    let mut reports = Vec::new();
    let suite = args.suite.as_str();
    let known = ["grad", "geometry", "raster", "roundtrip", "all"];
    if !known.contains(&suite) {
        return Err(Error::invariant(format!(
            "unknown suite '{suite}' (expected one of {})",
            known.join(", ")
        )));
    }
    if suite == "grad" || suite == "all" {
        reports.extend(checks::grad_suite(args.grad_reps, args.seed));
    }
    if suite == "geometry" || suite == "all" {
        reports.extend(checks::geometry_suite(args.fixtures, args.seed));
    }
    if suite == "raster" || suite == "all" {
        reports.extend(checks::raster_suite(args.seed, args.meshes, args.unwraps));
    }
    if suite == "roundtrip" || suite == "all" {
        let scratch = std::env::temp_dir().join(format!("avatarforge-check-{}", std::process::id()));
        reports.extend(checks::roundtrip_suite(args.seed, &scratch));
        let _ = std::fs::remove_dir_all(&scratch);
    }

    let mut failed = 0usize;
    for r in &reports {
        println!(
            "[{}] {} — {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.pass {
            failed += 1;
        }
    }
    println!(
        "{} checks, {} failed ({} suite)",
        reports.len(),
        failed,
        suite
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
