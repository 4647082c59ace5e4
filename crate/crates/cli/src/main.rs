//! `scalelens` command-line front end.
//!
//! Exit status: 0 on success, 1 on validation errors (bad flags, missing or
//! malformed inputs), 2 on runtime failures.

use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scalelens::breakpoint_fit::fit_piecewise;
use scalelens::predictor::protocol::serve;
use scalelens::predictor::{BuiltinScorer, Endpoint, ExternalScorer};
use scalelens::report::artifacts::{read_curve_points, write_fit_json, FitArtifact};
use scalelens::report::plot::write_curve_png;
use scalelens::report::{run_report, with_jobs, RunConfig};
use scalelens::scale_transforms::{Axis, LevelLadder};
use scalelens::slide_io::{generate_phantom, load_manifest, PhantomSpec};
use scalelens::sweep::{make_splits, prepare_cohort, run_sweep, tile_seed};
use scalelens::tiling::{build_tissue_mask, sample_tiles, write_tile_coords, TileCoord};
use scalelens::{Error, Result};

#[derive(Parser)]
#[command(name = "scalelens", version, about = "Length-scale ablation of tile classifiers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic two-class dataset with known length scales.
    Phantom(PhantomArgs),
    /// Build tissue masks and sample tile positions for every case.
    Tile(TileArgs),
    /// Run accuracy-versus-length sweeps.
    Sweep(RunArgs),
    /// Fit a two-segment L1 model to a curve CSV.
    Fit(FitArgs),
    /// Train the sweep models, then write per-tile slope maps and overlays.
    Slopemap(RunArgs),
    /// Sweeps, fits, curves and slope maps with a digest index.
    Report(RunArgs),
    /// Ping an external scorer.
    ServeCheck(ServeCheckArgs),
    /// Serve the built-in scorer over the wire protocol.
    Serve(ServeArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    cases_pos: usize,
    #[arg(long, default_value_t = 6)]
    cases_neg: usize,
    #[arg(long, default_value_t = 4.0)]
    micro_period_um: f64,
    #[arg(long, default_value_t = 40.0)]
    macro_scale_um: f64,
    #[arg(long, default_value_t = 0.0)]
    color_shift: f64,
    #[arg(long, default_value_t = 0.10)]
    texture_amplitude: f64,
    #[arg(long, default_value_t = 0.25)]
    macro_contrast: f64,
    #[arg(long, default_value_t = 1.0)]
    texture_coverage: f64,
    #[arg(long, default_value_t = 0.6)]
    tissue_fraction: f64,
    #[arg(long, default_value_t = 4480)]
    slide_px: u32,
    #[arg(long, default_value_t = 0.51)]
    pitch_um: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 50)]
    tiles_per_case: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// rfl, mfl or both.
    #[arg(long)]
    axis: Option<String>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    tiles_per_case: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// builtin or external=ADDR.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stain_norm: Option<bool>,
    /// Comma-separated case ids, `auto` or `none`.
    #[arg(long)]
    map_slides: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    /// CSV with `x,y` or `length_um,mean_accuracy` columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    axis: Option<Axis>,
}

#[derive(Args)]
struct ServeCheckArgs {
    /// `host:port`, `tcp://host:port`, `exec:CMD` or `external=ADDR`.
    #[arg(long)]
    scorer: String,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen on `host:port` instead of stdin/stdout.
    #[arg(long)]
    listen: Option<String>,
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let path = |p: &Path| p.display().to_string();
    let flags: [(&str, Option<String>); 11] = [
        ("manifest", a.manifest.as_deref().map(path)),
        ("axis", a.axis.clone()),
        ("levels", a.levels.map(|v| v.to_string())),
        ("tiles_per_case", a.tiles_per_case.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("scorer", a.scorer.clone()),
        ("epsilon", a.epsilon.map(|v| v.to_string())),
        ("jobs", a.jobs.map(|v| v.to_string())),
        ("out", a.out.as_deref().map(path)),
        ("stain_norm", a.stain_norm.map(|v| v.to_string())),
        ("map_slides", a.map_slides.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(|e| match e {
                Error::InvalidConfig { reason, .. } => Error::InvalidConfig {
                    key: format!("--{}", k.replace('_', "-")),
                    reason,
                },
                other => other,
            })?;
        }
    }
    Ok(cfg)
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec {
        name: a.out.file_name().map_or("phantom".into(), |n| n.to_string_lossy().into_owned()),
        n_cases_pos: a.cases_pos,
        n_cases_neg: a.cases_neg,
        micro_period_um: a.micro_period_um,
        macro_scale_um: a.macro_scale_um,
        color_shift: a.color_shift,
        tissue_fraction: a.tissue_fraction,
        seed: a.seed,
        pitch_um: a.pitch_um,
        slide_px: a.slide_px,
        texture_amplitude: a.texture_amplitude,
        macro_contrast: a.macro_contrast,
        texture_coverage: a.texture_coverage,
    };
    let m = generate_phantom(&spec, &a.out)?;
    println!("wrote {} cases to {}", m.cases.len(), a.out.join("manifest.tsv").display());
    Ok(())
}

fn cmd_tile(a: &TileArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let mut coords = Vec::new();
    for case in &manifest.cases {
        let slide = manifest.load_slide(case)?;
        let mask = build_tissue_mask(&slide)?;
        scalelens::fsutil::write_gray_png(&a.out.join(format!("{}_tissue.png", case.id)), &mask.mask.to_gray())?;
        let tiles = sample_tiles(&mask, &slide, a.tiles_per_case, tile_seed(a.seed, &case.id))?;
        coords.extend(tiles.iter().map(|t| TileCoord {
            slide_id: case.id.clone(),
            x: t.x,
            y: t.y,
        }));
    }
    write_tile_coords(&a.out.join("tiles.csv"), &coords)?;
    println!("sampled {} tiles from {} cases", coords.len(), manifest.cases.len());
    Ok(())
}

fn cmd_sweep(a: &RunArgs) -> Result<()> {
    let cfg = run_config(a)?;
    cfg.validate()?;
    let scorer = scalelens::predictor::make_scorer(&cfg.scorer.kind)?;
    with_jobs(cfg.jobs, || {
        use scalelens::report::artifacts::{write_scores_csv, write_sweep_csv, write_sweep_mean_csv};
        let manifest = load_manifest(&cfg.manifest)?;
        let pitch = scalelens::report::manifest_pitch(&manifest)?;
        let splits = make_splits(&manifest, cfg.seed)?;
        let cohort = prepare_cohort(&manifest, &cfg.sweep_config())?;
        for &axis in &cfg.axes {
            let ladder = LevelLadder::new(axis, pitch, cfg.levels_for(axis))?;
            let dir = cfg.out.join(axis.to_string());
            let r = run_sweep(&cohort, &splits, &ladder, scorer.as_ref(), &cfg.sweep_config(), Some(&dir.join("checkpoints")))?;
            ladder.write_csv(&dir.join("ladder.csv"))?;
            write_sweep_csv(&dir.join("sweep.csv"), &r)?;
            write_sweep_mean_csv(&dir.join("sweep_mean.csv"), &r)?;
            write_scores_csv(&dir.join("scores.csv"), &r.scores)?;
            for (len, acc) in r.mean_curve() {
                println!("{axis} {len:>9.3} um  {acc:.4}");
            }
            let failed = r.failed_levels();
            if !failed.is_empty() {
                eprintln!("warning: {axis} levels {failed:?} failed; see {}", dir.join("checkpoints").display());
            }
        }
        Ok(())
    })
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let pts = read_curve_points(&a.input)?;
    let fit = fit_piecewise(&pts)?;
    write_fit_json(&a.out.join("fit.json"), &FitArtifact::new(a.axis, &fit, &pts))?;
    write_curve_png(&a.out.join("curve.png"), &[], &pts, Some(&fit))?;
    println!(
        "break {} residual {} (single line {})",
        fit.break_x, fit.residual_l1, fit.single_line_residual
    );
    Ok(())
}

fn cmd_report(a: &RunArgs, maps_only: bool) -> Result<()> {
    let mut cfg = run_config(a)?;
    if maps_only && a.map_slides.is_none() && a.config.is_none() {
        cfg.map_slides = scalelens::report::MapSlides::Auto;
    }
    let s = run_report(&cfg)?;
    for ax in &s.axes {
        match &ax.fit {
            Some(f) => println!("{}: break {:.3} um", ax.sweep.axis, f.break_x),
            None => println!("{}: too few levels for a fit", ax.sweep.axis),
        }
        for m in &ax.maps {
            let sensitive = m.cells.iter().filter(|c| c.sensitive).count();
            println!("  {} {}: {sensitive}/{} sensitive tiles", ax.sweep.axis, m.slide_id, m.cells.len());
        }
    }
    println!("index: {}", s.out.join("index.md").display());
    Ok(())
}

fn cmd_serve_check(a: &ServeCheckArgs) -> Result<()> {
    let addr = a.scorer.strip_prefix("external=").unwrap_or(&a.scorer);
    let scorer = ExternalScorer::new(Endpoint::parse(addr)?);
    scorer.ping()?;
    println!("ok {}", scorer.endpoint().describe());
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let scorer = BuiltinScorer::new();
    let io_err = |what: &str, e: std::io::Error| Error::io(Path::new(what), e);
    match &a.listen {
        None => {
            let stdin = std::io::stdin();
            serve(stdin.lock(), std::io::stdout().lock(), &scorer).map_err(|e| io_err("stdio", e))
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| io_err(addr, e))?;
            let local = listener.local_addr().map_err(|e| io_err(addr, e))?;
            println!("listening on {local}");
            std::io::stdout().flush().ok();
            std::thread::scope(|s| {
                for conn in listener.incoming() {
                    let Ok(conn) = conn else { continue };
                    let scorer = &scorer;
                    s.spawn(move || {
                        if let Ok(read) = conn.try_clone() {
                            let _ = serve(BufReader::new(read), conn, scorer);
                        }
                    });
                }
            });
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Tile(a) => cmd_tile(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Slopemap(a) => cmd_report(a, true),
        Cmd::Report(a) => cmd_report(a, false),
        Cmd::ServeCheck(a) => cmd_serve_check(a),
        Cmd::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
