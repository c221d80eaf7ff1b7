//! `cascade`: data generation, training, completion and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cascade_core::cloud::{read_cloud, write_cloud, CloudFormat, Normalization, Point, PointCloud};
use cascade_core::config::TrainConfig;
use cascade_core::container::{sha256_hex, write_atomic};
use cascade_core::dataset::{load_manifest, synthesize, write_dataset, Dataset, Split, SynthSpec};
use cascade_core::error::Error as CoreError;
use cascade_core::eval::{evaluate, occlusion_sweep, occlusion_to_tsv, validate_levels, CompletionModel, OCCLUSION_LEVELS};
use cascade_core::generator::iterations_for;
use cascade_core::synth::{category_name, Category};
use cascade_core::trainer::{StepReport, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};

const DATA_ROOT_ENV: &str = "CASCADE_DATA_ROOT";

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "cascade", version, about = "Coarse-to-fine point cloud completion")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a loss trace.
    Train(TrainArgs),
    /// Complete one partial cloud.
    Complete(CompleteArgs),
    /// Score a checkpoint on the test split of a manifest.
    Eval(EvalArgs),
    /// Score completions of increasingly occluded test partials.
    OccludeEval(OccludeArgs),
    /// Decode evenly spaced latent codes between two partial clouds.
    Interpolate(InterpolateArgs),
}

#[derive(Args, Debug)]
struct DataRoot {
    /// Dataset manifest; defaults to manifest.tsv under $CASCADE_DATA_ROOT.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl DataRoot {
    fn path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.manifest {
            return Ok(p.clone());
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => Ok(PathBuf::from(root).join("manifest.tsv")),
            None => Err(usage(format!("no --manifest given and ${DATA_ROOT_ENV} is not set"))),
        }
    }

    fn load(&self) -> Result<Dataset> {
        let path = self.path()?;
        let data = load_manifest(&path).with_context(|| format!("loading dataset manifest {}", path.display()))?;
        log::info!("loaded {} pairs from {}", data.pairs.len(), path.display());
        Ok(data)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory; defaults to $CASCADE_DATA_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated category names; all by default.
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    #[arg(long, default_value_t = 40)]
    train_per_category: usize,
    #[arg(long, default_value_t = 10)]
    test_per_category: usize,
    /// Points in each complete cloud.
    #[arg(long, default_value_t = 2048)]
    complete_points: usize,
    /// Points sampled before the visibility cut for each partial.
    #[arg(long, default_value_t = 512)]
    scan_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size architecture and schedule.
    Default,
    /// Reduced widths and budget for a single CPU.
    Desk,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` configuration file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    data: DataRoot,
    /// Output directory for model.ckpt, trace.tsv and config.txt.
    #[arg(long)]
    out: PathBuf,
    /// Log a progress line every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output point count: 2048, 4096, 8192 or 16384.
    #[arg(long, default_value_t = 2048)]
    resolution: usize,
}

impl ModelArgs {
    fn load(&self) -> Result<CompletionModel> {
        let model = CompletionModel::load(&self.checkpoint)
            .with_context(|| format!("loading checkpoint {}", self.checkpoint.display()))?;
        iterations_for(self.resolution, model.cfg.n_coarse)?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Xyz,
    Pcb,
}

impl From<Format> for CloudFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Xyz => CloudFormat::XyzAscii,
            Format::Pcb => CloudFormat::PcbBinary,
        }
    }
}

fn format_for(path: &Path, forced: Option<Format>) -> CloudFormat {
    forced.map_or_else(|| CloudFormat::from_path(path), Into::into)
}

#[derive(Args, Debug)]
struct CompleteArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Partial cloud (.pcb binary, anything else ASCII xyz).
    #[arg(long)]
    input: PathBuf,
    /// Destination of the dense completion.
    #[arg(long)]
    output: PathBuf,
    /// Also write the coarse cloud next to the output as `<stem>.coarse.<ext>`.
    #[arg(long)]
    coarse: bool,
    /// Category name or id used to pick the mean shape.
    #[arg(long)]
    category: Option<String>,
    /// Manifest listing the input as a partial; outputs are mapped back to
    /// original coordinates with its recorded normalization.
    #[arg(long, conflicts_with = "normalize")]
    manifest: Option<PathBuf>,
    /// Treat the input as raw coordinates: normalize it, then map outputs back.
    #[arg(long)]
    normalize: bool,
    /// Output format; inferred from the extension otherwise.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataRoot,
    /// Also compute the Frechet distance between feature statistics.
    #[arg(long)]
    fpd: bool,
    /// Machine-readable report destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OccludeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataRoot,
    /// Percentages of points removed, each in (0, 100).
    #[arg(long, value_delimiter = ',', default_values_t = OCCLUSION_LEVELS.to_vec())]
    levels: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Start partial; it also conditions the skip path.
    #[arg(long)]
    a: PathBuf,
    /// End partial.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long)]
    category: Option<String>,
    /// Directory for `step_<i>.<ext>` files and alphas.tsv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Pcb)]
    format: Format,
}

/// An error that should exit with the usage code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                _ if e.is_numeric() => EXIT_NUMERIC,
                CoreError::Contract(_) | CoreError::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn parse_category(s: &str) -> Result<u32> {
    s.parse::<Category>()
        .map(Category::id)
        .or_else(|_| s.parse::<u32>())
        .map_err(|_| {
            let names: Vec<&str> = Category::ALL.iter().map(|c| c.name()).collect();
            usage(format!("unknown category {s:?}; known: {}", names.join(", ")))
        })
}

fn write_points(path: &Path, points: Vec<Point>, format: CloudFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_cloud(path, &PointCloud::new(points)?, format)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn read_input(path: &Path) -> Result<PointCloud> {
    read_cloud(path, CloudFormat::from_path(path)).with_context(|| format!("reading {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let out = match a.out {
        Some(o) => o,
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("no --out given and ${DATA_ROOT_ENV} is not set")))?,
    };
    let categories = if a.categories.is_empty() {
        Category::ALL.to_vec()
    } else {
        a.categories
            .iter()
            .map(|s| parse_category(s).map(|id| Category::from_id(id).expect("parsed ids are known")))
            .collect::<Result<_>>()?
    };
    let spec = SynthSpec {
        categories,
        train_per_category: a.train_per_category,
        test_per_category: a.test_per_category,
        complete_points: a.complete_points,
        scan_points: a.scan_points,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let data = synthesize(&spec)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = write_dataset(&out, &data)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match a.preset {
        Preset::Default => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    };
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
    }
    cfg.apply_overrides(&a.set)?;
    let data = a.data.load()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_text(&a.out.join("config.txt"), &cfg.to_text())?;

    let steps = cfg.steps;
    let mut trainer = Trainer::new(cfg, &data)?;
    let mut trace = StepReport::tsv_header() + "\n";
    let start = Instant::now();
    for _ in 0..steps {
        let r = trainer.train_step()?;
        trace.push_str(&r.to_tsv());
        trace.push('\n');
        if a.log_every > 0 && (r.step + 1) % a.log_every == 0 {
            log::info!(
                "step {} rec {:.5} cd_fine {:.5} gan_g {:.4} gan_d {:.4} ({:.1?})",
                r.step + 1,
                r.rec,
                r.cd_fine,
                r.gan_g,
                r.gan_d,
                start.elapsed()
            );
        }
    }
    let ckpt = a.out.join("model.ckpt");
    trainer.save(&ckpt)?;
    write_text(&a.out.join("trace.tsv"), &trace)?;
    let bytes = std::fs::read(&ckpt).with_context(|| format!("reading back {}", ckpt.display()))?;
    println!("{}\t{}", ckpt.display(), &sha256_hex(&bytes)[..16]);
    Ok(())
}

/// Path of the coarse companion file: `dir/name.ext` becomes `dir/name.coarse.ext`.
fn coarse_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().unwrap_or_default().to_string_lossy();
    let name = match output.extension() {
        Some(ext) => format!("{stem}.coarse.{}", ext.to_string_lossy()),
        None => format!("{stem}.coarse"),
    };
    output.with_file_name(name)
}

/// Finds the manifest row whose partial is `input`.
fn manifest_entry(manifest: &Path, input: &Path) -> Result<(Normalization, u32)> {
    let data = load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let want = input.canonicalize().with_context(|| format!("resolving {}", input.display()))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let rows = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    for (pair, line) in data.pairs.iter().zip(rows) {
        let rel = line.split('\t').nth(3).unwrap_or_default();
        if root.join(rel).canonicalize().ok().as_deref() == Some(want.as_path()) {
            return Ok((pair.normalization, pair.category));
        }
    }
    bail!("{} is not a partial listed in {}", input.display(), manifest.display())
}

fn complete(a: CompleteArgs) -> Result<()> {
    let model = a.model.load()?;
    let input = read_input(&a.input)?;
    // Manifest partials are stored normalized, so only the output is mapped.
    let (partial, norm, mut category) = match (&a.manifest, a.normalize) {
        (Some(m), _) => {
            let (n, c) = manifest_entry(m, &a.input)?;
            (input.points, n, Some(c))
        }
        (None, true) => {
            let n = Normalization::fit(&input.points);
            (input.points.iter().map(|&p| n.apply(p)).collect(), n, None)
        }
        (None, false) => (input.points, Normalization::IDENTITY, None),
    };
    if let Some(c) = &a.category {
        category = Some(parse_category(c)?);
    }
    let out = model.complete(&partial, category, a.model.resolution)?;
    let back = |pts: Vec<Point>| pts.into_iter().map(|p| norm.invert(p)).collect::<Vec<_>>();
    let format = format_for(&a.output, a.format);
    write_points(&a.output, back(out.fine), format)?;
    if a.coarse {
        write_points(&coarse_path(&a.output), back(out.coarse), format)?;
    }
    Ok(())
}

/// Test pairs, warning about categories that only appear in training.
fn test_split(data: &Dataset) -> Result<Vec<&cascade_core::dataset::DatasetPair>> {
    let test = data.split(Split::Test);
    for c in data.categories() {
        if !test.iter().any(|p| p.category == c) {
            log::warn!("category {} has no test instances; omitted from the report", category_name(c));
        }
    }
    if test.is_empty() {
        return Err(CoreError::Empty("manifest has no test pairs".into()).into());
    }
    Ok(test)
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = a.model.load()?;
    let data = a.data.load()?;
    let report = evaluate(&model, &test_split(&data)?, a.model.resolution, a.fpd)?;
    if let Some(out) = &a.out {
        write_text(out, &report.to_tsv())?;
    }
    print!("{}", report.to_pretty());
    Ok(())
}

fn occlude_eval(a: OccludeArgs) -> Result<()> {
    validate_levels(&a.levels)?;
    let model = a.model.load()?;
    let data = a.data.load()?;
    let rows = occlusion_sweep(&model, &test_split(&data)?, &a.levels, a.model.resolution)?;
    let tsv = occlusion_to_tsv(&rows);
    if let Some(out) = &a.out {
        write_text(out, &tsv)?;
    }
    println!("{:>8}  {:>6}  {:>14}  {:>14}", "occluded", "count", "CD-T (x1e-4)", "CD-P (x1e-3)");
    for r in &rows {
        println!("{:>7}%  {:>6}  {:>14.4}  {:>14.4}", r.percent, r.count, r.cd_t * 1e4, r.cd_p * 1e3);
    }
    Ok(())
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    if a.steps < 2 {
        return Err(usage(format!("--steps must be at least 2, got {}", a.steps)));
    }
    let model = a.model.load()?;
    let category = a.category.as_deref().map(parse_category).transpose()?;
    let pa = read_input(&a.a)?;
    let pb = read_input(&a.b)?;
    let frames = model.interpolate(&pa.points, &pb.points, category, a.steps, a.model.resolution)?;
    let format: CloudFormat = a.format.into();
    let ext = match a.format {
        Format::Xyz => "xyz",
        Format::Pcb => "pcb",
    };
    let width = (a.steps - 1).to_string().len();
    let mut alphas = String::from("step\talpha\tfile\n");
    for (i, (alpha, points)) in frames.into_iter().enumerate() {
        let name = format!("step_{i:0width$}.{ext}");
        write_points(&a.out_dir.join(&name), points, format)?;
        alphas.push_str(&format!("{i}\t{alpha}\t{name}\n"));
    }
    write_text(&a.out_dir.join("alphas.tsv"), &alphas)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Complete(a) => complete(a),
        Command::Eval(a) => eval(a),
        Command::OccludeEval(a) => occlude_eval(a),
        Command::Interpolate(a) => interpolate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn coarse_path_inserts_suffix_before_extension() {
        assert_eq!(coarse_path(Path::new("out/a.pcb")), PathBuf::from("out/a.coarse.pcb"));
        assert_eq!(coarse_path(Path::new("a")), PathBuf::from("a.coarse"));
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        let numeric: anyhow::Error = CoreError::Numeric { op: "log", node: 3 }.into();
        assert_eq!(exit_code(&numeric), EXIT_NUMERIC);
        assert_eq!(exit_code(&CoreError::Contract("x".into()).into()), EXIT_USAGE);
        assert_eq!(exit_code(&CoreError::Empty("x".into()).into()), EXIT_DATA);
        assert_eq!(exit_code(&usage("x").context("outer")), EXIT_USAGE);
        assert_eq!(exit_code(&anyhow!("plain")), EXIT_DATA);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
