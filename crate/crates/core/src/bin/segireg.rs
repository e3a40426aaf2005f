use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segireg::io::{self, resolve_output, Plane};
use segireg::optim::register_with_observer;
use segireg::phantom::generate_pair;
use segireg::warp::{resample_to_grid, warp_with};
use segireg::{
    evaluate_labels, segi, Error, PhantomSpec, Polarity, RegistrationConfig, Volume64, VolumeKind,
};

#[derive(Parser)]
#[command(
    name = "segireg",
    version,
    about = "Multi-modality deformable registration of 3-D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving volume onto a fixed one.
    Register(RegisterArgs),
    /// Warp a volume with a displacement field.
    Warp(WarpArgs),
    /// Dice and surface distance between two label maps.
    Eval(EvalArgs),
    /// Generate a synthetic pair with a known deformation.
    Phantom(PhantomArgs),
    /// Write the multi-scale gradient encoding of a volume.
    SegiDump(SegiDumpArgs),
    /// Render a slice with label contours as a PPM image.
    Overlay(OverlayArgs),
}

/// Comma-separated values such as `1,1.5,3`.
#[derive(Clone, Debug)]
struct List<T>(Vec<T>);

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<List<T>, String> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| format!("cannot parse `{x}`"))
        })
        .collect::<Result<_, _>>()
        .map(List)
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    out_ddf_forward: PathBuf,
    #[arg(long)]
    out_ddf_backward: PathBuf,
    #[arg(long)]
    out_moved: PathBuf,
    /// TOML file with RegistrationConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_list::<f64>)]
    sigmas: Option<List<f64>>,
    #[arg(long)]
    lambda1: Option<f64>,
    /// Smoothness weight (1 by default; 10 suits cardiac-like data).
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also score the backward direction in the similarity term.
    #[arg(long)]
    symmetric: bool,
    #[arg(long, value_enum)]
    polarity: Option<Polarity>,
    /// Write the per-iteration trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Regrid the moving volume onto the fixed grid first.
    #[arg(long)]
    resample_to_fixed: bool,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ddf: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Nearest-neighbour sampling (implied for label volumes).
    #[arg(long)]
    nearest: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Structure ids; every nonzero id present when omitted.
    #[arg(long, value_parser = parse_list::<u32>)]
    ids: Option<List<u32>>,
    /// Text report path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    /// TOML phantom specification.
    #[arg(long)]
    spec: PathBuf,
    /// Defaults to $SEGIREG_OUT_DIR, else the current directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SegiDumpArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_parser = parse_list::<f64>, default_value = "1,1.5,3")]
    sigmas: List<f64>,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlayArgs {
    /// Background volume, windowed to [0, 1].
    #[arg(long)]
    fixed: PathBuf,
    /// Label volumes drawn as contours (blue, red, green, ...), repeatable.
    #[arg(long)]
    labels: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Plane::Axial)]
    plane: Plane,
    /// Slice index; the middle slice when omitted.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// An error tagged with the pipeline stage that raised it.
struct Failure {
    stage: &'static str,
    error: Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for Result<T, Error> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

fn read_labels(path: &Path) -> Result<Volume64, Error> {
    io::read_volume::<f64>(path)?.into_kind(VolumeKind::Label)
}

fn run_register(args: RegisterArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => io::load_config(path).stage("config")?,
        None => RegistrationConfig::default(),
    };
    if let Some(s) = args.sigmas {
        cfg.sigmas = s.0;
    }
    if let Some(x) = args.lambda1 {
        cfg.lambda1 = x;
    }
    if let Some(x) = args.lambda2 {
        cfg.lambda2 = x;
    }
    if let Some(x) = args.levels {
        cfg.levels = x;
    }
    if let Some(x) = args.iters {
        cfg.iters_per_level = x;
    }
    if let Some(x) = args.seed {
        cfg.seed = x;
    }
    if args.symmetric {
        cfg.symmetric_similarity = true;
    }
    if let Some(p) = args.polarity {
        cfg.polarity = p;
    }
    cfg.validate().stage("config")?;

    let fixed = io::read_volume::<f64>(&args.fixed).stage("read fixed")?;
    let mut moving = io::read_volume::<f64>(&args.moving).stage("read moving")?;
    if args.resample_to_fixed {
        moving = resample_to_grid(&moving, &fixed).stage("resample")?;
    }
    let result = register_with_observer(&moving, &fixed, &cfg, |_| {}).stage("register")?;
    let moved = warp_with(&moving, &result.u, false)
        .stage("warp")?
        .with_geometry(fixed.spacing(), fixed.origin())
        .stage("warp")?;

    io::write_field(&result.u, &resolve_output(&args.out_ddf_forward))
        .stage("write forward field")?;
    io::write_field(&result.v, &resolve_output(&args.out_ddf_backward))
        .stage("write backward field")?;
    io::write_volume(&moved, &resolve_output(&args.out_moved)).stage("write moved volume")?;
    if let Some(path) = &args.trace {
        io::write_trace(&result.trace, &resolve_output(path)).stage("write trace")?;
    }
    Ok(())
}

fn run_warp(args: WarpArgs) -> Result<(), Failure> {
    let vol = io::read_volume::<f64>(&args.input).stage("read volume")?;
    let ddf = io::read_field::<f64>(&args.ddf).stage("read field")?;
    let nearest = args.nearest || vol.kind() == VolumeKind::Label;
    let out = warp_with(&vol, &ddf, nearest).stage("warp")?;
    io::write_volume(&out, &resolve_output(&args.out)).stage("write volume")
}

fn run_eval(args: EvalArgs) -> Result<(), Failure> {
    let a = read_labels(&args.a).stage("read labels a")?;
    let b = read_labels(&args.b).stage("read labels b")?;
    let ids = match args.ids {
        Some(List(ids)) => ids,
        None => {
            let mut ids = a.label_ids();
            ids.extend(b.label_ids());
            ids.sort_unstable();
            ids.dedup();
            ids.retain(|&id| id != 0);
            ids
        }
    };
    let report = evaluate_labels(&a, &b, &ids, a.spacing()).stage("evaluate")?;
    let table = report.to_table();
    print!("{table}");
    io::write_atomic(&resolve_output(&args.out), table.as_bytes()).stage("write report")?;
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        io::write_atomic(&resolve_output(path), json.as_bytes()).stage("write report")?;
    }
    Ok(())
}

fn run_phantom(args: PhantomArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.spec)
        .map_err(|e| Error::Io {
            path: args.spec.clone(),
            source: e,
        })
        .stage("read spec")?;
    let spec: PhantomSpec = toml::from_str(&text)
        .map_err(|e| Error::Config {
            path: args.spec.clone(),
            reason: e.message().to_string(),
        })
        .stage("read spec")?;
    let pair = generate_pair::<f64>(&spec).stage("generate phantom")?;
    let dir = match args.out_dir {
        Some(d) => resolve_output(&d),
        None => std::env::var_os(io::OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let write = |name: &str, vol: &Volume64| io::write_volume(vol, &dir.join(name));
    write("moving.toml", &pair.moving).stage("write phantom")?;
    write("fixed.toml", &pair.fixed).stage("write phantom")?;
    write("moving_label.toml", &pair.moving_label).stage("write phantom")?;
    write("fixed_label.toml", &pair.fixed_label).stage("write phantom")?;
    io::write_field(&pair.truth, &dir.join("truth.toml")).stage("write phantom")?;
    io::write_field(&pair.truth_inverse, &dir.join("truth_inverse.toml")).stage("write phantom")?;
    Ok(())
}

fn run_segi_dump(args: SegiDumpArgs) -> Result<(), Failure> {
    let vol = io::read_volume::<f64>(&args.input).stage("read volume")?;
    let field = segi(&vol, &args.sigmas.0, args.eps).stage("segi")?;
    io::write_segi(&field, vol.spacing(), &resolve_output(&args.out)).stage("write segi")
}

fn run_overlay(args: OverlayArgs) -> Result<(), Failure> {
    let fixed = io::read_volume::<f64>(&args.fixed).stage("read fixed")?;
    let labels = args
        .labels
        .iter()
        .map(|p| read_labels(p))
        .collect::<Result<Vec<_>, _>>()
        .stage("read labels")?;
    let axis = match args.plane {
        Plane::Axial => 2,
        Plane::Coronal => 1,
        Plane::Sagittal => 0,
    };
    let index = args.index.unwrap_or(fixed.dims()[axis] / 2);
    let refs: Vec<&Volume64> = labels.iter().collect();
    io::emit_overlay(&fixed, &refs, args.plane, index, &resolve_output(&args.out)).stage("overlay")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Register(a) => run_register(a),
        Command::Warp(a) => run_warp(a),
        Command::Eval(a) => run_eval(a),
        Command::Phantom(a) => run_phantom(a),
        Command::SegiDump(a) => run_segi_dump(a),
        Command::Overlay(a) => run_overlay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { stage, error }) => {
            eprintln!("segireg: {stage} failed: {error}");
            ExitCode::FAILURE
        }
    }
}
