//! `ttp`: synthetic-data generation, fitting, gradient checking, batch
//! benchmarks and loss evaluation for the weak-perspective pose and
//! deformation fitter.
//!
//! Exit codes: 0 success, 1 input error, 2 fit not converged (or not
//! stationary enough to differentiate), 3 singular Hessian in gradcheck.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttp_cli::bench::{run as run_bench, BenchConfig};
use ttp_cli::formats::{self, config::FileConfig};
use ttp_cli::jsonio::{fmt_f64, JsonWriter};
use ttp_cli::synth::{generate, MeshSource, SyntheticScenario, VisibilityMode};
use ttp_core::deform::{arap_energy, l2_deformation_penalty, ArapVariant, DeformationBasis};
use ttp_core::diff::{fd_oracle, solver_vjp, DiffError, InputBlock, VjpOptions};
use ttp_core::geometry::{exp_map, WeakPerspectiveCamera};
use ttp_core::lbfgs::LbfgsParams;
use ttp_core::losses::{chamfer_loss, cycle_loss, silhouette_iou, visibility_loss, DistanceField};
use ttp_core::mesh::{MeshOptions, TemplateMesh};
use ttp_core::raster::{rasterize_silhouette, render_visibility, RasterWindow};
use ttp_core::solver::{fit, FitProblem, FitResult, FitSettings, Observation};

#[derive(Parser)]
#[command(name = "ttp", version, about = "Weak-perspective pose and deformation fitting toolkit")]
struct Cli {
    /// JSON config file mirroring the flags; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic problem (mesh, basis, observation, ground truth).
    Synth(SynthArgs),
    /// Fit pose and deformation to an observation.
    Fit(FitArgs),
    /// Compare implicit-function-theorem gradients against finite
    /// differences through the full fit.
    Gradcheck(GradcheckArgs),
    /// Batch-fit independent synthetic scenarios and report error metrics.
    Bench(BenchArgs),
    /// Evaluate the geometric loss suite on a fit result.
    Losses(LossesArgs),
}

/// Scenario flags shared by `synth` and `bench`.
#[derive(Args, Clone)]
struct ScenarioArgs {
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Template source: tetra | icosphere:N | grid:WxH | path.obj.
    #[arg(long)]
    mesh: Option<String>,
    /// Number of deformation basis components.
    #[arg(long)]
    k: Option<usize>,
    /// Observation noise as a fraction of the camera scale.
    #[arg(long)]
    noise: Option<f64>,
    /// Fraction of points with visibility forced to zero.
    #[arg(long)]
    occlusion: Option<f64>,
    /// Ground-truth rotation cone about the default initialization, degrees.
    #[arg(long)]
    cone: Option<f64>,
    /// Visibility source: all | raster.
    #[arg(long)]
    vis_mode: Option<String>,
    /// Rasterizer resolution.
    #[arg(long)]
    res: Option<usize>,
}

impl ScenarioArgs {
    fn scenario(&self, config: &FileConfig) -> Result<SyntheticScenario> {
        let mesh_text = self
            .mesh
            .clone()
            .or_else(|| config.mesh.clone())
            .unwrap_or_else(|| "icosphere:2".to_string());
        let vis_text = self
            .vis_mode
            .clone()
            .or_else(|| config.vis_mode.clone())
            .unwrap_or_else(|| "all".to_string());
        Ok(SyntheticScenario {
            seed: self.seed.or(config.seed).unwrap_or(0),
            mesh: mesh_text.parse::<MeshSource>().map_err(anyhow::Error::msg)?,
            components: self.k.or(config.k).unwrap_or(16),
            cone: self
                .cone
                .or(config.cone_degrees)
                .unwrap_or(60.0)
                .to_radians(),
            noise: self.noise.or(config.noise).unwrap_or(0.0),
            occlusion: self.occlusion.or(config.occlusion).unwrap_or(0.0),
            visibility: vis_text
                .parse::<VisibilityMode>()
                .map_err(anyhow::Error::msg)?,
            resolution: self.res.or(config.res).unwrap_or(256),
            ..Default::default()
        })
    }
}

/// Solver flags shared by `fit`, `gradcheck` and `bench`.
#[derive(Args, Clone)]
struct SolverArgs {
    /// Outer alternation count.
    #[arg(long)]
    iters: Option<usize>,
    /// Coefficient regularizer weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// L-BFGS evaluation budget per pose subproblem.
    #[arg(long)]
    max_evals: Option<usize>,
    /// L-BFGS gradient tolerance.
    #[arg(long)]
    grad_tol: Option<f64>,
}

impl SolverArgs {
    fn settings(&self, config: &FileConfig, default_iters: usize) -> FitSettings {
        FitSettings {
            gamma: self.gamma.or(config.gamma).unwrap_or(1e-3),
            iterations: self.iters.or(config.iters).unwrap_or(default_iters),
            lbfgs: LbfgsParams {
                max_evals: self.max_evals.unwrap_or(200),
                gradient_tolerance: self.grad_tol.unwrap_or(1e-9),
                history: 10,
            },
            scale_rule: Default::default(),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also render the ground-truth silhouette (RLE JSON + PGM).
    #[arg(long)]
    emit_mask: bool,
    /// Write the basis in the binary TTPB format instead of JSON.
    #[arg(long)]
    binary_basis: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    basis: PathBuf,
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Restart from a 24-rotation grid and keep the best objective.
    #[arg(long)]
    global_grid: bool,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    basis: PathBuf,
    #[arg(long)]
    obs: PathBuf,
    /// Central-difference step.
    #[arg(long)]
    step: Option<f64>,
    /// Maximum accepted relative error per input block.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Seed for the random downstream gradient.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Number of independent samples (seed + index).
    #[arg(long)]
    samples: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Re-evaluate metrics at every outer iteration.
    #[arg(long)]
    per_iteration: bool,
    /// Omit the metadata block from report.json.
    #[arg(long)]
    no_meta: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct LossesArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    basis: PathBuf,
    #[arg(long)]
    obs: PathBuf,
    /// Fit result to evaluate.
    #[arg(long)]
    fit: PathBuf,
    /// Reference silhouette (RLE JSON) for chamfer and overlap terms.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Keypoint regressor JSON.
    #[arg(long)]
    keypoints: Option<PathBuf>,
    /// Keypoint annotations JSON.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    res: Option<usize>,
    /// Write the loss report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(path) => formats::config::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Synth(args) => synth_cmd(args, &config),
        Command::Fit(args) => fit_cmd(args, &config),
        Command::Gradcheck(args) => gradcheck_cmd(args, &config),
        Command::Bench(args) => bench_cmd(args, &config),
        Command::Losses(args) => losses_cmd(args, &config),
    }
}

fn out_dir(requested: Option<PathBuf>, config: &FileConfig) -> Result<PathBuf> {
    let dir = requested
        .or_else(|| config.out_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn load_problem_files(
    mesh: &Path,
    basis: &Path,
    obs: &Path,
) -> Result<(TemplateMesh, DeformationBasis, Observation)> {
    let mesh = formats::obj::load_obj(mesh, MeshOptions::default())?;
    let basis = formats::basis::load(basis)?;
    let observation = formats::observation::load(obs)?;
    Ok((mesh, basis, observation))
}

fn synth_cmd(args: SynthArgs, config: &FileConfig) -> Result<ExitCode> {
    let scenario = args.scenario.scenario(config)?;
    let dir = out_dir(args.out_dir, config)?;
    let problem = generate(&scenario)?;
    std::fs::write(dir.join("mesh.obj"), formats::obj::write_obj(&problem.mesh))?;
    if args.binary_basis {
        std::fs::write(dir.join("basis.ttpb"), formats::basis::to_binary(&problem.basis))?;
    } else {
        std::fs::write(dir.join("basis.json"), formats::basis::to_json(&problem.basis))?;
    }
    std::fs::write(
        dir.join("observation.json"),
        formats::observation::to_json(&problem.observation),
    )?;
    std::fs::write(
        dir.join("ground_truth.json"),
        formats::result::ground_truth_to_json(&problem.truth),
    )?;
    if args.emit_mask {
        let truth = &problem.truth;
        let cam = WeakPerspectiveCamera::new(truth.scale, truth.translation).unwrap();
        let window = RasterWindow::from_camera(&cam);
        let vertices: Vec<Vector3<f64>> = problem
            .mesh
            .vertices()
            .iter()
            .zip(problem.basis.blocks())
            .map(|(v, b)| v + b * &truth.coefficients)
            .collect();
        let mask = rasterize_silhouette(
            &vertices,
            problem.mesh.faces(),
            &cam,
            &exp_map(&truth.rotation),
            &window,
            scenario.resolution,
        );
        std::fs::write(dir.join("mask.json"), formats::mask::to_rle_json(&mask, Some(&window)))?;
        std::fs::write(dir.join("mask.pgm"), formats::mask::to_pgm(&mask))?;
    }
    println!(
        "synth: wrote N={} K={} problem to {}",
        problem.mesh.vertex_count(),
        problem.basis.components(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn initial_objective(problem: &FitProblem, result: &FitResult) -> f64 {
    let obs = problem.observation;
    let mut wsum = 0.0;
    let mut centroid = Vector2::zeros();
    for (u, &v) in obs.points.iter().zip(&obs.visibility) {
        wsum += v;
        centroid += u * v;
    }
    let centroid = if wsum > 0.0 {
        centroid / wsum
    } else {
        obs.points.iter().sum::<Vector2<f64>>() / obs.len().max(1) as f64
    };
    ttp_core::solver::objective_value(
        problem,
        result.scale,
        &Vector3::zeros(),
        &centroid,
        &DVector::zeros(problem.basis.components()),
    )
}

fn fit_cmd(args: FitArgs, config: &FileConfig) -> Result<ExitCode> {
    let (mesh, basis, observation) = load_problem_files(&args.mesh, &args.basis, &args.obs)?;
    let settings = args.solver.settings(config, 4);
    let problem = FitProblem::new(&mesh, &basis, &observation, settings)?;
    let result = if args.global_grid {
        ttp_cli::multistart::fit_global_grid(&problem)?
    } else {
        fit(&problem, None)?
    };
    let dir = out_dir(args.out_dir, config)?;
    std::fs::write(dir.join("result.json"), formats::result::to_json(&result))?;
    let mut trace_csv = String::from("iteration,objective\n");
    trace_csv.push_str(&format!("0,{}\n", fmt_f64(initial_objective(&problem, &result))));
    for (idx, value) in result.objective_trace.iter().enumerate() {
        trace_csv.push_str(&format!("{},{}\n", idx + 1, fmt_f64(*value)));
    }
    std::fs::write(dir.join("trace.csv"), trace_csv)?;
    println!(
        "fit: objective {} after {} iterations, converged={} ({} evals)",
        fmt_f64(*result.objective_trace.last().unwrap()),
        settings.iterations,
        result.converged,
        result.evals
    );
    Ok(if result.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn gradcheck_cmd(args: GradcheckArgs, config: &FileConfig) -> Result<ExitCode> {
    let (mesh, basis, observation) = load_problem_files(&args.mesh, &args.basis, &args.obs)?;
    let mut settings = args.solver.settings(config, 16);
    // The probe re-fits must land very near their optima.
    if args.solver.grad_tol.is_none() {
        settings.lbfgs.gradient_tolerance = 1e-7;
    }
    if args.solver.max_evals.is_none() {
        settings.lbfgs.max_evals = 600;
    }
    let step = args.step.or(config.step).unwrap_or(1e-5);
    let tolerance = args.tolerance.or(config.tolerance).unwrap_or(1e-3);
    let problem = FitProblem::new(&mesh, &basis, &observation, settings)?;
    let result = match fit(&problem, None) {
        Ok(result) => result,
        // A gamma = 0 run on a rank-deficient basis dies in the normal
        // equations; that is the singular diagnostic, not an input error.
        Err(ttp_core::solver::SolveError::SingularSystem) => {
            eprintln!("gradcheck: singular normal equations (gamma = 0 with rank-deficient basis)");
            return Ok(ExitCode::from(3));
        }
        Err(e) => return Err(e.into()),
    };
    let dim = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.or(config.seed).unwrap_or(0));
    let g = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let analytic = match solver_vjp(&problem, &result, &g, VjpOptions::default()) {
        Ok(out) => out,
        Err(DiffError::SingularHessian { condition }) => {
            eprintln!("gradcheck: singular Hessian (condition number {condition:.3e})");
            return Ok(ExitCode::from(3));
        }
        Err(DiffError::NotStationary { converged, gradient_norm }) => {
            eprintln!(
                "gradcheck: fit is not stationary (converged={converged}, gradient norm {gradient_norm:.3e})"
            );
            return Ok(ExitCode::from(2));
        }
        Err(e) => return Err(e.into()),
    };
    let loss = {
        let g = g.clone();
        move |fr: &FitResult| -> f64 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += g[i] * fr.rotation[i];
            }
            acc += g[3] * fr.translation.x + g[4] * fr.translation.y;
            for j in 0..fr.coefficients.len() {
                acc += g[5 + j] * fr.coefficients[j];
            }
            acc
        }
    };
    let n = mesh.vertex_count();
    let k = basis.components();
    let subsample = |total: usize, cap: usize| -> Vec<usize> {
        if total <= cap {
            (0..total).collect()
        } else {
            (0..cap).map(|i| i * total / cap).collect()
        }
    };
    // Differences are normalized by the peak gradient magnitude across all
    // blocks; a per-block denominator is meaningless where a block's true
    // gradient vanishes.
    let blocks: &[(InputBlock, usize, usize, &str)] = &[
        (InputBlock::Points, 2 * n, 64, "points"),
        (InputBlock::Visibility, n, 32, "visibility"),
        (InputBlock::Basis, 3 * n * k, 48, "basis"),
    ];
    let mut compared: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
    let mut peak = 0.0_f64;
    for (slot, &(block, total, cap, _)) in blocks.iter().enumerate() {
        if total == 0 {
            compared.push((slot, Vec::new()));
            continue;
        }
        let coords = subsample(total, cap);
        let fd = fd_oracle(
            &mesh,
            &basis,
            &observation,
            settings,
            result.scale,
            None,
            &loss,
            block,
            &coords,
            step,
        )?;
        let mut pairs = Vec::with_capacity(coords.len());
        for (idx, &coord) in coords.iter().enumerate() {
            let a = match block {
                InputBlock::Points => analytic.points[coord / 2][coord % 2],
                InputBlock::Visibility => analytic.visibility[coord],
                InputBlock::Basis => {
                    let (flat_row, col) = (coord / k, coord % k);
                    analytic.basis[flat_row / 3][(flat_row % 3, col)]
                }
            };
            peak = peak.max(a.abs()).max(fd[idx].abs());
            pairs.push((a, fd[idx]));
        }
        compared.push((slot, pairs));
    }
    let mut all_pass = true;
    for (slot, pairs) in &compared {
        let name = blocks[*slot].3;
        if pairs.is_empty() {
            println!("{name}: empty block, skipped");
            continue;
        }
        let max_rel = pairs
            .iter()
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs() / (1e-12 + peak)));
        let verdict = if max_rel < tolerance { "pass" } else { "FAIL" };
        println!(
            "{name}: max relative error {max_rel:.3e} over {} coordinates [{verdict}]",
            pairs.len()
        );
        all_pass &= max_rel < tolerance;
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn bench_cmd(args: BenchArgs, config: &FileConfig) -> Result<ExitCode> {
    let scenario = args.scenario.scenario(config)?;
    let settings = args.solver.settings(config, 4);
    let samples = args.samples.or(config.samples).unwrap_or(20);
    anyhow::ensure!(samples >= 1, "samples must be at least 1");
    let threads = args.threads.or(config.threads).unwrap_or(1);
    let resolution = scenario.resolution;
    let dir = out_dir(args.out_dir, config)?;
    let bench = BenchConfig {
        scenario: scenario.clone(),
        samples,
        threads,
        settings,
        per_iteration: args.per_iteration,
        resolution,
    };
    let report = run_bench(&bench);
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    let meta: Vec<(String, String)> = vec![
        ("command".into(), "bench".into()),
        ("version".into(), env!("CARGO_PKG_VERSION").into()),
        ("seed".into(), scenario.seed.to_string()),
        ("samples".into(), samples.to_string()),
        ("mesh".into(), format!("{:?}", scenario.mesh)),
        ("k".into(), scenario.components.to_string()),
        ("noise".into(), fmt_f64(scenario.noise)),
        ("occlusion".into(), fmt_f64(scenario.occlusion)),
        ("iters".into(), settings.iterations.to_string()),
        ("gamma".into(), fmt_f64(settings.gamma)),
    ];
    let summary = report.summary_json(if args.no_meta { None } else { Some(&meta) });
    std::fs::write(dir.join("report.json"), summary)?;
    if args.per_iteration {
        std::fs::write(dir.join("per_iteration.csv"), report.per_iteration_csv())?;
    }
    let failures = report.rows.iter().filter(|r| r.outcome.is_err()).count();
    println!(
        "bench: {} samples, {} failures, report in {}",
        samples,
        failures,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn losses_cmd(args: LossesArgs, config: &FileConfig) -> Result<ExitCode> {
    let (mesh, basis, observation) = load_problem_files(&args.mesh, &args.basis, &args.obs)?;
    let result = formats::result::load(&args.fit)?;
    anyhow::ensure!(
        result.coefficients.len() == basis.components(),
        "fit result has {} coefficients, basis has {} components",
        result.coefficients.len(),
        basis.components()
    );
    let resolution = args.res.or(config.res).unwrap_or(256);
    let vertices: Vec<Vector3<f64>> = mesh
        .vertices()
        .iter()
        .zip(basis.blocks())
        .map(|(v, b)| v + b * &result.coefficients)
        .collect();
    let cam = WeakPerspectiveCamera::new(result.scale, result.translation)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let rot = exp_map(&result.rotation);
    let projected = cam.project(&rot, &vertices);

    let mut w = JsonWriter::new();
    w.begin_object();
    w.key("cycle")
        .value_f64(cycle_loss(&observation.points, &projected).map_err(|e| anyhow::anyhow!("{e}"))?);
    let window = RasterWindow::from_camera(&cam);
    let v_gt = render_visibility(&vertices, mesh.faces(), &cam, &rot, &window, resolution);
    w.key("visibility")
        .value_f64(visibility_loss(&observation.visibility, &v_gt).map_err(|e| anyhow::anyhow!("{e}"))?);
    w.key("arap")
        .value_f64(arap_energy(&mesh, &vertices, ArapVariant::Unsquared));
    w.key("l2_deformation")
        .value_f64(l2_deformation_penalty(&basis, &result.coefficients));

    if let Some(mask_path) = &args.mask {
        let (mask, mask_window) = formats::mask::load_rle(mask_path)?;
        let mask_window = mask_window.unwrap_or(window);
        let field = DistanceField::from_mask(&mask).map_err(|e| anyhow::anyhow!("{e}"))?;
        let points_px: Vec<Vector2<f64>> = observation
            .points
            .iter()
            .map(|p| mask_window.to_pixel(p, mask.width))
            .collect();
        let (consistency, coverage) =
            chamfer_loss(&points_px, &mask, &field).map_err(|e| anyhow::anyhow!("{e}"))?;
        w.key("chamfer_consistency").value_f64(consistency);
        w.key("chamfer_coverage").value_f64(coverage);
        let rendered = rasterize_silhouette(
            &vertices,
            mesh.faces(),
            &cam,
            &rot,
            &mask_window,
            mask.width,
        );
        let (iou, absdiff) =
            silhouette_iou(&rendered, &mask).map_err(|e| anyhow::anyhow!("{e}"))?;
        w.key("silhouette_iou").value_f64(iou);
        w.key("silhouette_absdiff").value_usize(absdiff);
    }
    if let (Some(reg_path), Some(ann_path)) = (&args.keypoints, &args.annotations) {
        let regressor = formats::keypoints::load_regressor(reg_path)?;
        let annotations = formats::keypoints::load_annotations(ann_path)?;
        let loss =
            ttp_core::losses::keypoint_loss(&regressor, &vertices, &cam, &rot, &annotations)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
        w.key("keypoint").value_f64(loss);
    }
    w.end_object();
    let text = w.finish();
    if let Some(out) = &args.out {
        std::fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}
