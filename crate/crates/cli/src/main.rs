use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use entity_refine::backend::external::{serve, ExternalProvider};
use entity_refine::backend::oracle::SyntheticOracle;
use entity_refine::backend::precomputed::{record, PrecomputedProvider};
use entity_refine::backend::scene::{SceneGenerator, SceneSpec};
use entity_refine::backend::{BackendError, Segmenter};
use entity_refine::bench::{self, BenchSpec, NoiseKind};
use entity_refine::config::{PipelineConfig, ProviderSpec};
use entity_refine::eval::{self, ImageRecord};
use entity_refine::pipeline::{self, Stages};
use entity_refine::raster::ColorImage;
use entity_refine::{viz, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_PROVIDER: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "entity-refine", version, about = "Entity-level refinement of promptable-segmenter masks")]
struct Cli {
    /// Flat `key = value` config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable: `--set theta_o=0.75`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one image or synthetic scene into an entity map.
    Run(RunArgs),
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Print the result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Benchmark pipeline variants on seeded synthetic scenes.
    SynthBench {
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Noise::Noisy)]
        noise: Noise,
        /// Comma-separated variant names; all eight when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Scene side length in pixels.
        #[arg(long, default_value_t = 128)]
        size: u32,
    },
    /// Render an entity map over its image.
    Viz {
        /// Prediction ndjson; the first line is rendered unless `--image-id` is given.
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a 16-bit label PNG.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        image_id: Option<String>,
    },
    /// Record a provider's grid answers as a precomputed directory.
    Record {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, value_delimiter = ',', default_value = "32,64")]
        grids: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer the worker protocol on stdin/stdout with the synthetic oracle.
    #[command(hide = true)]
    ServeOracle {
        #[command(flatten)]
        scene: SceneArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Noisy,
    Noiseless,
}

impl From<Noise> for NoiseKind {
    fn from(n: Noise) -> Self {
        match n {
            Noise::Noisy => NoiseKind::Noisy,
            Noise::Noiseless => NoiseKind::Noiseless,
        }
    }
}

#[derive(Args, Clone)]
struct SceneArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Scene description (JSON); generated from the seed when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Noise::Noisy)]
    noise: Noise,
    #[arg(long, default_value_t = 128)]
    size: u32,
}

#[derive(Args, Clone)]
struct SourceArgs {
    /// `oracle`, `dir:<path>` or `exec:<command>`.
    #[arg(long)]
    provider: Option<String>,
    /// Input image, required by `exec:` providers.
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Prediction ndjson to write.
    #[arg(long, default_value = "predictions.ndjson")]
    out: PathBuf,
    /// Also write the oracle's ground truth (oracle provider only).
    #[arg(long)]
    gt_out: Option<PathBuf>,
    /// Directory for per-stage entity maps.
    #[arg(long)]
    dump_stages: Option<PathBuf>,
    #[arg(long)]
    image_id: Option<String>,
    #[arg(long)]
    no_mmg: bool,
    #[arg(long)]
    no_emr: bool,
    #[arg(long)]
    no_usr: bool,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_USAGE, error }
}

fn io_failure(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_IO, error: error.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Backend(BackendError::Io(_) | BackendError::Raster(_)) => EXIT_IO,
            Error::Backend(_) => EXIT_PROVIDER,
            Error::Io(_) | Error::Raster(_) | Error::Json(_) => EXIT_IO,
            Error::Eval(eval::EvalError::Io(_) | eval::EvalError::Parse { .. }) => EXIT_IO,
            Error::Config(_) | Error::Validation(_) | Error::Eval(_) => EXIT_USAGE,
            Error::Mask(_) | Error::Superpixel(_) => EXIT_PROVIDER,
        };
        Failure { code, error: e.into() }
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        Error::from(e).into()
    }
}

impl From<eval::EvalError> for Failure {
    fn from(e: eval::EvalError) -> Self {
        Error::from(e).into()
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(io_failure)?;
            PipelineConfig::parse(&text).map_err(|e| usage(e.into()))?
        }
        None => PipelineConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.into()))?;
    }
    Ok(cfg)
}

fn scene_spec(args: &SceneArgs, seed: u64) -> Result<SceneSpec, Failure> {
    match &args.scene {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display())).map_err(io_failure)?;
            serde_json::from_reader(BufReader::new(file))
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(usage)
        }
        None => {
            let g = SceneGenerator { height: args.size, width: args.size, ..SceneGenerator::default() };
            Ok(g.generate(seed, NoiseKind::from(args.noise).profile(seed)))
        }
    }
}

struct Source {
    provider: Box<dyn Segmenter>,
    image: ColorImage,
    image_id: String,
    scene: Option<SceneSpec>,
}

fn open_source(args: &SourceArgs, cfg: &mut PipelineConfig) -> Result<Source, Failure> {
    if let Some(p) = &args.provider {
        cfg.set("provider", p).map_err(|e| usage(e.into()))?;
    }
    if let Some(seed) = args.scene.seed {
        cfg.seed = seed;
    }
    match cfg.provider.clone() {
        ProviderSpec::Oracle => {
            let scene = scene_spec(&args.scene, cfg.seed)?;
            let oracle = SyntheticOracle::new(scene.clone())?;
            let image = oracle.image().clone();
            Ok(Source { provider: Box::new(oracle), image, image_id: format!("scene-{}", cfg.seed), scene: Some(scene) })
        }
        ProviderSpec::Dir(dir) => {
            let p = PrecomputedProvider::open(&dir)?;
            let image = p.image().clone();
            Ok(Source { provider: Box::new(p), image, image_id: stem(&dir), scene: None })
        }
        ProviderSpec::Exec(cmd) => {
            let path = args.image.as_ref().ok_or_else(|| usage(anyhow!("exec providers need --image")))?;
            let image = ColorImage::load(path).map_err(|e| Failure::from(Error::from(e)))?;
            let p = ExternalProvider::spawn(&cmd, path)?;
            Ok(Source { provider: Box::new(p), image, image_id: stem(path), scene: None })
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn write_ndjson(path: &Path, records: &[ImageRecord]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_failure)?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(io_failure)?;
    eval::write_records(BufWriter::new(file), records)?;
    Ok(())
}

fn read_ndjson(path: &Path) -> Result<Vec<ImageRecord>, Failure> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display())).map_err(io_failure)?;
    Ok(eval::read_records(BufReader::new(file))?)
}

fn cmd_run(args: &RunArgs, mut cfg: PipelineConfig) -> Result<(), Failure> {
    let mut src = open_source(&args.source, &mut cfg)?;
    let stages = Stages { mmg: !args.no_mmg, emr: !args.no_emr, usr: !args.no_usr };
    let out = pipeline::run(src.provider.as_mut(), &src.image, &cfg, stages)?;
    let id = args.image_id.clone().unwrap_or(src.image_id);
    write_ndjson(&args.out, &[ImageRecord::from_map(&id, &out.entity_map, true)])?;
    info!("wrote {} entities to {}", out.entity_map.len(), args.out.display());
    if let Some(dir) = &args.dump_stages {
        for (name, map) in &out.stages {
            write_ndjson(&dir.join(format!("{name}.ndjson")), &[ImageRecord::from_map(&id, map, true)])?;
        }
    }
    if let Some(path) = &args.gt_out {
        let scene = src.scene.as_ref().ok_or_else(|| usage(anyhow!("--gt-out needs the oracle provider")))?;
        let gt = scene.ground_truth()?;
        write_ndjson(path, &[ImageRecord::from_map(&id, &gt, false)])?;
    }
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, json: bool) -> Result<(), Failure> {
    let res = eval::evaluate_records(&read_ndjson(pred)?, &read_ndjson(gt)?)?;
    if json {
        println!("{}", serde_json::to_string(&res).map_err(io_failure)?);
    } else {
        println!("AP {:.2}  AP50 {:.2}  AP75 {:.2}", 100.0 * res.ap, 100.0 * res.ap50, 100.0 * res.ap75);
        for (t, ap) in &res.per_threshold {
            println!("  @{t:.2}  {:.2}", 100.0 * ap);
        }
    }
    Ok(())
}

fn cmd_bench(scenes: usize, seed: u64, noise: Noise, names: &[String], size: u32, cfg: &PipelineConfig) -> Result<(), Failure> {
    if scenes == 0 {
        return Err(usage(anyhow!("--scenes must be at least 1")));
    }
    let variants = if names.is_empty() {
        bench::VARIANTS.to_vec()
    } else {
        names
            .iter()
            .map(|n| bench::variant(n).ok_or_else(|| usage(anyhow!("unknown variant `{n}`"))))
            .collect::<Result<Vec<_>, _>>()?
    };
    let spec = BenchSpec {
        scenes,
        seed,
        noise: noise.into(),
        generator: SceneGenerator { height: size, width: size, ..SceneGenerator::default() },
    };
    let rows = bench::synth_bench(&spec, cfg, &variants)?;
    print!("{}", bench::format_table(&rows));
    Ok(())
}

fn cmd_viz(entities: &Path, image: &Path, out: &Path, labels: Option<&Path>, image_id: Option<&str>) -> Result<(), Failure> {
    let records = read_ndjson(entities)?;
    let rec = match image_id {
        Some(id) => records.iter().find(|r| r.image_id == id),
        None => records.first(),
    }
    .ok_or_else(|| usage(anyhow!("no matching entity map in {}", entities.display())))?;
    let map = rec.to_map().map_err(|e| usage(e.into()))?;
    let img = ColorImage::load(image).map_err(|e| Failure::from(Error::from(e)))?;
    let rendered = viz::overlay(&img, &map)?;
    rendered.save(out).with_context(|| format!("writing {}", out.display())).map_err(io_failure)?;
    if let Some(path) = labels {
        viz::label_image(&map).save(path).with_context(|| format!("writing {}", path.display())).map_err(io_failure)?;
    }
    Ok(())
}

fn cmd_record(source: &SourceArgs, grids: &[u32], out: &Path, mut cfg: PipelineConfig) -> Result<(), Failure> {
    let mut src = open_source(source, &mut cfg)?;
    record(src.provider.as_mut(), &src.image, grids, out)?;
    Ok(())
}

fn cmd_serve_oracle(args: &SceneArgs) -> Result<(), Failure> {
    let scene = scene_spec(args, args.seed.unwrap_or(0))?;
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    serve(stdin, stdout, |_| Ok(Box::new(SyntheticOracle::new(scene.clone())?)))?;
    Ok(())
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("ENTITY_REFINE_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| usage(anyhow!("ENTITY_REFINE_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(usage(anyhow!("ENTITY_REFINE_THREADS must be positive")));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| usage(e.into()))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Run(args) => cmd_run(args, cfg),
        Command::Eval { pred, gt, json } => cmd_eval(pred, gt, *json),
        Command::SynthBench { scenes, seed, noise, variants, size } => {
            cmd_bench(*scenes, *seed, *noise, variants, *size, &cfg)
        }
        Command::Viz { entities, image, out, labels, image_id } => {
            cmd_viz(entities, image, out, labels.as_deref(), image_id.as_deref())
        }
        Command::Record { source, grids, out } => cmd_record(source, grids, out, cfg),
        Command::ServeOracle { scene } => cmd_serve_oracle(scene),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            // thiserror messages already embed their source, so skip repeats
            let mut msg = String::new();
            for cause in f.error.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(f.code)
        }
    }
}
