mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use graph_transfer::config::{parse_synth_config, synth_to_kv, Ablation, TrainConfig, TrainMode};
use graph_transfer::data::{generate_domain_pair, DomainPair, SynthConfig, CORRUPTION_FILE};
use graph_transfer::noise::{NoiseKind, NoiseSpec};
use graph_transfer::params::ModelParams;
use graph_transfer::spectral::FactorCache;
use graph_transfer::trainer::{
    evaluate, export_embeddings, fit_prepared, report_json, PreparedPair, REPORT_FILE,
};
use graph_transfer::{Error, Result};

use manifest::RunManifest;

const OUTPUT_ROOT_ENV: &str = "GRAPH_TRANSFER_OUTPUT_ROOT";
const THREADS_ENV: &str = "GRAPH_TRANSFER_THREADS";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "graph-transfer", version, about = "Graph transfer learning under label noise")]
struct Cli {
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair.
    Generate {
        /// Flat key-value synthetic config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Corrupt the training labels of a pair directory.
    Corrupt {
        #[arg(long)]
        pair: PathBuf,
        #[arg(long, default_value = "uniform")]
        kind: NoiseKind,
        /// Flip probability in [0, 1].
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train on a pair and evaluate on its target graph.
    Train {
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Ablation variant: w/o-G, w/o-B or w/o-M.
        #[arg(long)]
        ablate: Option<String>,
        /// Comma-separated noise rates in percent; one run per rate.
        #[arg(long, value_delimiter = ',')]
        noise_rates: Option<Vec<f64>>,
        #[arg(long, default_value = "uniform")]
        noise_kind: NoiseKind,
        /// Defaults to the training seed.
        #[arg(long)]
        noise_seed: Option<u64>,
        /// Directory for cached SVD factors.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a pair's target graph.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pair: PathBuf,
        /// Training config; defaults to `config.txt` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write node embeddings of both graphs as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Grid over variants, noise rates and seeds.
    Sweep {
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40")]
        noise_rates: Vec<f64>,
        #[arg(long, default_value = "uniform")]
        noise_kind: NoiseKind,
        /// Any of full, source-only, w/o-G, w/o-B, w/o-M.
        #[arg(long, value_delimiter = ',', default_value = "full,source-only")]
        variants: Vec<String>,
        #[arg(long)]
        force: bool,
    },
}

/// Overrides for [`TrainConfig`] fields.
#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// Flat key-value training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    oversampling: Option<usize>,
    #[arg(long)]
    power_iterations: Option<usize>,
    #[arg(long)]
    self_loops: Option<bool>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    epochs_per_round: Option<usize>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    plateau_tolerance: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_per_class: Option<usize>,
    #[arg(long)]
    mi_inner_steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    encoder_dims: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => TrainConfig::parse(&read(path)?)?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$field = v; })*
            };
        }
        apply!(
            mode,
            q,
            oversampling,
            power_iterations,
            self_loops,
            alpha,
            tau,
            anchors,
            rounds,
            warmup_epochs,
            epochs_per_round,
            plateau_patience,
            plateau_tolerance,
            learning_rate,
            batch_per_class,
            mi_inner_steps,
            encoder_dims,
            seed
        );
        c.validate()?;
        Ok(c)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Relative output paths are placed under the output-root variable when set.
fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.is_dir() && std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if occupied && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn load_pair(dir: &Path, split_seed: u64) -> Result<DomainPair> {
    DomainPair::load(dir, split_seed)
}

fn cmd_generate(config: Option<&Path>, seed: Option<u64>, out: &Path, force: bool) -> Result<()> {
    let mut cfg = match config {
        Some(p) => parse_synth_config(&read(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    prepare_dir(out, force)?;
    let pair = generate_domain_pair(&cfg)?;
    pair.save(out)?;
    let mut m = RunManifest::new("generate", Some(cfg.seed));
    m.config(synth_to_kv(&cfg));
    if let Some(p) = config {
        m.input(p)?;
    }
    m.output(out);
    m.write(&out.join("generate.manifest.json"))?;
    log::info!("wrote pair to {}", out.display());
    Ok(())
}

fn noise_spec(kind: NoiseKind, rate: f64, seed: u64) -> NoiseSpec {
    NoiseSpec { kind, rate, pair_map: None, seed }
}

fn corrupt_pair(pair: DomainPair, spec: &NoiseSpec) -> Result<DomainPair> {
    let record = spec.apply(pair.source_true_labels(), pair.num_classes(), Some(&pair.splits.train))?;
    pair.with_corruption(record)
}

fn cmd_corrupt(dir: &Path, kind: NoiseKind, rate: f64, seed: u64, force: bool) -> Result<()> {
    let target = dir.join(CORRUPTION_FILE);
    prepare_file(&target, force)?;
    let mut m = RunManifest::new("corrupt", Some(seed));
    m.input(dir)?;
    let pair = load_pair(dir, seed)?;
    let spec = noise_spec(kind, rate, seed);
    let pair = corrupt_pair(pair, &spec)?;
    let record = pair.corruption.as_ref().expect("just corrupted");
    record.save(&target)?;
    m.config([("kind", kind.to_string()), ("rate", rate.to_string()), ("seed", seed.to_string())]);
    m.output(&target);
    m.write(&dir.join("corrupt.manifest.json"))?;
    println!("flipped {} of {} training labels", record.flip_count(), pair.splits.train.len());
    Ok(())
}

fn train_once(pair: &DomainPair, cfg: &TrainConfig, cache: Option<&FactorCache>, out: &Path) -> Result<Vec<PathBuf>> {
    let prep = PreparedPair::with_cache(pair, cfg, cache)?;
    let result = fit_prepared(pair, &prep, cfg)?;
    let mut written = result.save(out, pair)?;
    let config_path = out.join(CONFIG_FILE);
    write(&config_path, &cfg.to_text())?;
    written.push(config_path);
    log::info!("{}: target accuracy {:.4}", out.display(), result.report.target_accuracy);
    Ok(written)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    dir: &Path,
    out: &Path,
    args: &TrainArgs,
    ablate: Option<&str>,
    noise_rates: Option<&[f64]>,
    noise_kind: NoiseKind,
    noise_seed: Option<u64>,
    cache_dir: Option<&Path>,
    force: bool,
) -> Result<()> {
    let mut cfg = args.resolve()?;
    if let Some(a) = ablate {
        cfg.ablation = Ablation::from_variant(a)?;
    }
    prepare_dir(out, force)?;
    let mut m = RunManifest::new("train", Some(cfg.seed));
    m.input(dir)?;
    if let Some(p) = &args.config {
        m.input(p)?;
    }
    m.config(cfg.to_kv());
    let pair = load_pair(dir, cfg.seed)?;
    let cache = cache_dir.map(FactorCache::new);
    match noise_rates {
        None => {
            for p in train_once(&pair, &cfg, cache.as_ref(), out)? {
                m.output(&p);
            }
        }
        Some(rates) => {
            let seed = noise_seed.unwrap_or(cfg.seed);
            m.config([
                ("noise_kind", noise_kind.to_string()),
                ("noise_seed", seed.to_string()),
                ("noise_rates", rates.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
            ]);
            for &rate in rates {
                let noisy = corrupt_pair(pair.clone(), &noise_spec(noise_kind, rate / 100.0, seed))?;
                let sub = out.join(format!("noise{rate}"));
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                noisy.corruption.as_ref().expect("corrupted").save(sub.join(CORRUPTION_FILE))?;
                for p in train_once(&noisy, &cfg, cache.as_ref(), &sub)? {
                    m.output(&p);
                }
            }
        }
    }
    m.write(&out.join("train.manifest.json"))
}

fn inference_setup(checkpoint: &Path, dir: &Path, config: Option<&Path>) -> Result<(ModelParams, DomainPair, TrainConfig)> {
    if !checkpoint.is_file() {
        return Err(Error::Data(format!("checkpoint {} not found", checkpoint.display())));
    }
    let params = ModelParams::load_checkpoint(checkpoint)?;
    let default_config = checkpoint.with_file_name(CONFIG_FILE);
    let cfg = match config {
        Some(p) => TrainConfig::parse(&read(p)?)?,
        None if default_config.is_file() => TrainConfig::parse(&read(&default_config)?)?,
        None => TrainConfig::default(),
    };
    let pair = load_pair(dir, cfg.seed)?;
    Ok((params, pair, cfg))
}

fn cmd_evaluate(checkpoint: &Path, dir: &Path, config: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    prepare_file(out, force)?;
    let (params, pair, cfg) = inference_setup(checkpoint, dir, config)?;
    let prep = PreparedPair::for_inference(&pair, &cfg)?;
    let report = evaluate(&params, &pair, &prep)?;
    let json = report_json(&report)?;
    write(out, &json)?;
    print!("{json}");
    let mut m = RunManifest::new("evaluate", Some(cfg.seed));
    m.input(checkpoint)?;
    m.input(dir)?;
    m.config(cfg.to_kv());
    m.output(out);
    m.write(&sibling(out, ".manifest.json"))
}

fn cmd_export(checkpoint: &Path, dir: &Path, config: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    prepare_file(out, force)?;
    let (params, pair, cfg) = inference_setup(checkpoint, dir, config)?;
    let prep = PreparedPair::for_inference(&pair, &cfg)?;
    export_embeddings(&params, &pair, &prep, out)?;
    let mut m = RunManifest::new("export", Some(cfg.seed));
    m.input(checkpoint)?;
    m.input(dir)?;
    m.config(cfg.to_kv());
    m.output(out);
    m.write(&sibling(out, ".manifest.json"))
}

struct Cell {
    variant: String,
    rate: f64,
    seed: u64,
}

fn variant_config(base: &TrainConfig, variant: &str, seed: u64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig { seed, ..base.clone() };
    match variant {
        "source-only" | "source_only" => cfg.mode = TrainMode::SourceOnly,
        other => {
            cfg.mode = TrainMode::Alex;
            cfg.ablation = Ablation::from_variant(other)?;
        }
    }
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    dir: &Path,
    out: &Path,
    args: &TrainArgs,
    seeds: &[u64],
    rates: &[f64],
    kind: NoiseKind,
    variants: &[String],
    force: bool,
) -> Result<()> {
    let base = args.resolve()?;
    for v in variants {
        variant_config(&base, v, 0)?;
    }
    prepare_dir(out, force)?;
    let pair = load_pair(dir, base.seed)?;
    let threads: usize = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(1).max(1);
    let mut cells = Vec::new();
    for v in variants {
        for &rate in rates {
            for &seed in seeds {
                cells.push(Cell { variant: v.clone(), rate, seed });
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<(f64, f64, Vec<PathBuf>)>)>> = Mutex::new(Vec::new());
    let run_cell = |cell: &Cell| -> Result<(f64, f64, Vec<PathBuf>)> {
        let cfg = variant_config(&base, &cell.variant, cell.seed)?;
        let noisy = corrupt_pair(pair.clone(), &noise_spec(kind, cell.rate / 100.0, cell.seed))?;
        let sub = out
            .join(cell.variant.replace('/', ""))
            .join(format!("noise{}", cell.rate))
            .join(format!("seed{}", cell.seed));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let written = train_once(&noisy, &cfg, None, &sub)?;
        let report: graph_transfer::trainer::EvalReport = serde_json::from_str(&read(&sub.join(REPORT_FILE))?)?;
        Ok((report.target_accuracy, report.macro_f1, written))
    };
    std::thread::scope(|s| {
        for _ in 0..threads.min(cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let r = run_cell(cell);
                results.lock().expect("results lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    let mut m = RunManifest::new("sweep", Some(base.seed));
    m.input(dir)?;
    m.config(base.to_kv());
    m.config([
        ("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
        ("noise_rates", rates.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
        ("noise_kind", kind.to_string()),
        ("variants", variants.join(",")),
    ]);
    let mut summary = String::from("variant,noise_rate,seed,accuracy,macro_f1\n");
    for (i, r) in results {
        let (acc, f1, written) = r?;
        let c = &cells[i];
        summary.push_str(&format!("{},{},{},{acc:?},{f1:?}\n", c.variant, c.rate, c.seed));
        for p in written {
            m.output(&p);
        }
    }
    let summary_path = out.join("summary.csv");
    write(&summary_path, &summary)?;
    print!("{summary}");
    m.output(&summary_path);
    m.write(&out.join("sweep.manifest.json"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, out, force } => cmd_generate(config.as_deref(), seed, &output_path(&out), force),
        Command::Corrupt { pair, kind, rate, seed, force } => cmd_corrupt(&pair, kind, rate, seed, force),
        Command::Train { pair, out, train, ablate, noise_rates, noise_kind, noise_seed, cache_dir, force } => cmd_train(
            &pair,
            &output_path(&out),
            &train,
            ablate.as_deref(),
            noise_rates.as_deref(),
            noise_kind,
            noise_seed,
            cache_dir.as_deref(),
            force,
        ),
        Command::Evaluate { checkpoint, pair, config, out, force } => {
            cmd_evaluate(&checkpoint, &pair, config.as_deref(), &output_path(&out), force)
        }
        Command::Export { checkpoint, pair, config, out, force } => {
            cmd_export(&checkpoint, &pair, config.as_deref(), &output_path(&out), force)
        }
        Command::Sweep { pair, out, train, seeds, noise_rates, noise_kind, variants, force } => cmd_sweep(
            &pair,
            &output_path(&out),
            &train,
            &seeds,
            &noise_rates,
            noise_kind,
            &variants,
            force,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
