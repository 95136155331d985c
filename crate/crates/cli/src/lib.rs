//! Subcommands shared by the `pyraflow` and `bench` binaries.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pyraflow::bench::{memory_scenario, run_benchmark, summarize, MemoryConfig, MemoryScenario};
use pyraflow::models::ModelRegistry;
use pyraflow::orchestration::{builtin_pipelines, parse_pipeline, prepare_run, run_for_project, write_results, PipelineSpec, ProjectOptions};
use pyraflow::patchflow::{RunConfig, RunObserver, RunProgress};
use pyraflow::pyramid::{generate_synthetic_slide, import_flat_image, open_container, save_container, PyramidPolicy, SyntheticSpec};
use pyraflow_server::ServerConfig;

pub type CliResult = Result<(), Box<dyn std::error::Error>>;

#[derive(Parser, Debug)]
#[command(name = "pyraflow", version, about = "Whole-slide pyramids, patch pipelines and a tile server")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Serve the HTTP API
    Serve(ServeArgs),
    /// Convert a flat image (PNG, TIFF, JPEG) into a pyramid container
    Import(ImportArgs),
    /// Write a deterministic synthetic slide as a container
    Synth(SynthArgs),
    /// Run a pipeline on one slide and write its results
    Run(RunArgs),
    /// Run a pipeline over every slide of a project
    Project(ProjectArgs),
    /// Runtime and memory benchmarks
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Defaults to $PYRAFLOW_DATA_DIR, then ./data
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub cache_mb: u64,
    #[arg(long, default_value_t = 1)]
    pub max_runs: usize,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    pub image: PathBuf,
    pub out: PathBuf,
    #[arg(long, default_value_t = 40.0)]
    pub magnification: f64,
    #[arg(long, default_value_t = 256)]
    pub tile_size: u32,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    pub out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    pub width: u32,
    #[arg(long, default_value_t = 4096)]
    pub height: u32,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Number of tissue blobs; 0 gives an empty (white) slide
    #[arg(long)]
    pub blobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Pipeline script path, or the name of a built-in pipeline
    #[arg(long)]
    pub pipeline: String,
    /// Slide container directory
    #[arg(long)]
    pub slide: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// Project root holding project.json
    pub root: PathBuf,
    #[arg(long)]
    pub pipeline: String,
    /// Skip slides whose results already exist
    #[arg(long)]
    pub resume: bool,
}

#[derive(Subcommand, Debug)]
pub enum BenchCommand {
    /// Time a pipeline: warmup runs, then measured runs with per-stage samples
    Run(BenchRunArgs),
    /// Resident-set profile of a viewing scenario
    Memory(BenchMemoryArgs),
}

#[derive(Args, Debug)]
pub struct BenchRunArgs {
    #[arg(long)]
    pub pipeline: String,
    #[arg(long)]
    pub slide: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub warmups: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Per-stage samples as CSV (run,stage,sample_ms)
    #[arg(long, default_value = "results.csv")]
    pub out: PathBuf,
    /// Also write the summary as JSON
    #[arg(long)]
    pub summary_json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ScenarioArg {
    Startup,
    OpenSlide,
    ZoomPan,
}

#[derive(Args, Debug)]
pub struct BenchMemoryArgs {
    #[arg(long, value_enum, default_value_t = ScenarioArg::ZoomPan)]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 150.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 256)]
    pub budget_mb: u64,
    /// Sleep between steps so the trace takes its nominal wall time
    #[arg(long)]
    pub paced: bool,
    #[arg(long, default_value_t = 100_000)]
    pub width: u32,
    #[arg(long, default_value_t = 100_000)]
    pub height: u32,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

/// Reads a pipeline script, or falls back to the built-in with that name.
pub fn load_pipeline(arg: &str) -> Result<PipelineSpec, Box<dyn std::error::Error>> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("pipeline");
        return Ok(parse_pipeline(name, &text).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    let (name, text) = builtin_pipelines()
        .into_iter()
        .find(|(n, _)| *n == arg)
        .ok_or_else(|| format!("`{arg}` is neither a pipeline file nor a built-in pipeline"))?;
    Ok(parse_pipeline(name, text)?)
}

struct LogProgress;

impl RunObserver for LogProgress {
    fn on_progress(&self, p: &RunProgress) {
        log::debug!("{}/{} patches", p.done, p.total);
    }
}

pub fn execute(cli: Cli) -> CliResult {
    match cli.command {
        Command::Serve(a) => serve(a),
        Command::Import(a) => {
            let policy = PyramidPolicy { tile_size: a.tile_size, ..Default::default() };
            let p = import_flat_image(&a.image, &policy, a.magnification)?;
            save_container(&p, &a.out)?;
            println!("{}: {}x{}, {} levels", a.out.display(), p.width(), p.height(), p.level_count());
            Ok(())
        }
        Command::Synth(a) => {
            let mut spec = SyntheticSpec::default();
            if let Some(b) = a.blobs {
                spec.blobs = b;
            }
            let p = generate_synthetic_slide(a.seed, a.width, a.height, &spec)?;
            save_container(&p, &a.out)?;
            println!("{}: {}x{}, {} levels", a.out.display(), p.width(), p.height(), p.level_count());
            Ok(())
        }
        Command::Run(a) => {
            let registry = ModelRegistry::<f32>::with_mocks();
            let compiled = load_pipeline(&a.pipeline)?.compile(&registry)?;
            let slide = Arc::new(open_container(&a.slide)?);
            let run = prepare_run(&compiled, slide, &registry, RunConfig::default())?;
            let summary = run.run(&LogProgress)?;
            let files = write_results(run.layer(), &compiled.exports, &a.out)?;
            println!("{}", serde_json::json!({ "summary": summary, "files": files }));
            Ok(())
        }
        Command::Project(a) => {
            let registry = ModelRegistry::<f32>::with_mocks();
            let spec = load_pipeline(&a.pipeline)?;
            let m = run_for_project(&a.root, &spec, &registry, ProjectOptions { resume: a.resume })?;
            for s in &m.slides {
                match &s.error {
                    None => println!("{}: {:?}", s.stem, s.status),
                    Some(e) => println!("{}: {:?} ({e})", s.stem, s.status),
                }
            }
            println!("{} succeeded, {} failed", m.successes(), m.failures());
            Ok(())
        }
        Command::Bench(b) => bench(b),
    }
}

fn serve(a: ServeArgs) -> CliResult {
    let mut config = match a.data_dir {
        Some(d) => ServerConfig::new(d),
        None => ServerConfig::from_env(),
    };
    config.cache_budget = a.cache_mb << 20;
    config.max_concurrent_runs = a.max_runs;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(pyraflow_server::serve(config, a.port))?;
    Ok(())
}

pub fn bench(cmd: BenchCommand) -> CliResult {
    match cmd {
        BenchCommand::Run(a) => {
            let registry = ModelRegistry::<f32>::with_mocks();
            let compiled = load_pipeline(&a.pipeline)?.compile(&registry)?;
            let slide = Arc::new(open_container(&a.slide)?);
            let timings = run_benchmark(
                || -> Result<_, Box<dyn std::error::Error>> {
                    Ok(prepare_run(&compiled, slide.clone(), &registry, RunConfig::default())?.run(&())?)
                },
                a.warmups,
                a.runs,
            )?;
            timings.write_csv(std::fs::File::create(&a.out)?)?;
            let summary = summarize(&timings);
            println!("{:<16} {:>12} {:>12}", "stage", "mean_ms", "ci95_ms");
            for s in &summary.stages {
                println!("{:<16} {:>12.3} {:>12.3}", s.stage, s.ci.mean, s.ci.half_width);
            }
            println!("{:<16} {:>12.3} {:>12.3}", "total_s", summary.total_s.mean, summary.total_s.half_width);
            if let Some(p) = a.summary_json {
                std::fs::write(p, serde_json::to_vec_pretty(&summary)?)?;
            }
            Ok(())
        }
        BenchCommand::Memory(a) => {
            let cfg = MemoryConfig {
                slide_width: a.width,
                slide_height: a.height,
                seed: a.seed,
                budget_bytes: a.budget_mb << 20,
                paced: a.paced,
                ..Default::default()
            };
            let scenario = match a.scenario {
                ScenarioArg::Startup => MemoryScenario::Startup,
                ScenarioArg::OpenSlide => MemoryScenario::OpenSlide,
                ScenarioArg::ZoomPan => MemoryScenario::ZoomPan { seconds: a.seconds },
            };
            let report = memory_scenario(scenario, &cfg)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
    }
}

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
}
