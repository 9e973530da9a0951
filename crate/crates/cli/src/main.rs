use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use gaflow::config::Config;
use gaflow::gaf::GatingVariant;
use gaflow::gradcheck::{self, CheckSettings};
use gaflow::imageio::save_ppm;
use gaflow::pipeline::{self, TryOnModel, FINAL_CHECKPOINT};
use gaflow::sample::CLOTHING_CLASSES;
use gaflow::synthdata;
use gaflow::{Error, Tensor};

/// Gated appearance-flow virtual try-on on synthetic data.
#[derive(Parser)]
#[command(name = "gaflow", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Configuration file of `key = value` lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Gating variant: convgru, convlstm, residual or single
    #[arg(long, global = true)]
    gating: Option<String>,
    /// Pyramid levels above the finest
    #[arg(long = "K", global = true)]
    k: Option<usize>,
    /// Image size as HxW
    #[arg(long, global = true)]
    resolution: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Warm-up epochs before joint training
    #[arg(long, global = true)]
    tau: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <out>/data
    GenData,
    /// Train warm-up then joint phases, writing checkpoints and metrics.csv
    Train,
    /// Evaluate a checkpoint on the held-out set
    Eval {
        /// Defaults to <out>/final.zflw
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every operator
    Gradcheck,
    /// Write warped garment, segmentation and try-on images for held-out samples
    Infer {
        /// Defaults to <out>/final.zflw
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Held-out sample indices
        #[arg(value_delimiter = ',', default_value = "0")]
        indices: Vec<usize>,
    },
    /// Train the warp stage once per gating variant and tabulate the results
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "single,residual,convgru,convlstm")]
        variants: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Numerical(_) | Error::Solver(_) => 3,
        Error::Config(_) | Error::Dimension { .. } | Error::Contract { .. } => 1,
    }
}

fn resolve(o: &Overrides) -> gaflow::Result<Config> {
    let mut config = match &o.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let pairs = [
        ("seed", o.seed.map(|v| v.to_string())),
        ("out.dir", o.out.as_ref().map(|p| p.display().to_string())),
        ("gating", o.gating.clone()),
        ("k", o.k.map(|v| v.to_string())),
        ("resolution", o.resolution.clone()),
        ("epochs", o.epochs.map(|v| v.to_string())),
        ("tau", o.tau.map(|v| v.to_string())),
    ];
    for (key, value) in pairs {
        if let Some(v) = value {
            config.set(key, &v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn configure_threads() -> gaflow::Result<()> {
    let Ok(value) = std::env::var("GAFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Error::Config(format!("GAFLOW_THREADS: invalid thread count {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("GAFLOW_THREADS: {e}")))
}

fn create_dir(dir: &Path) -> gaflow::Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> gaflow::Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

const PALETTE: [[f32; 3]; CLOTHING_CLASSES] = [
    [0.0, 0.0, 0.0],
    [0.9, 0.2, 0.2],
    [0.95, 0.8, 0.6],
    [0.2, 0.4, 0.9],
    [0.2, 0.8, 0.3],
    [0.9, 0.8, 0.1],
    [0.7, 0.3, 0.8],
];

/// Maps each pixel of a class-probability map to the colour of its argmax.
fn colorize(probs: &Tensor<f32>) -> gaflow::Result<Tensor<f32>> {
    let (c, h, w) = probs.dims3()?;
    let plane = h * w;
    let labels: Vec<usize> = (0..plane)
        .map(|p| {
            (0..c)
                .max_by(|&a, &b| probs.data()[a * plane + p].total_cmp(&probs.data()[b * plane + p]))
                .unwrap_or(0)
        })
        .collect();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        PALETTE[labels[i % plane] % PALETTE.len()][i / plane]
    }))
}

fn run(command: Command, config: Config) -> gaflow::Result<()> {
    let out = config.out_dir.clone();
    match command {
        Command::GenData => {
            let synth = config.synth();
            let mut samples = synthdata::generate(&synth, config.seed, 0, config.train_samples)?;
            samples.extend(synthdata::generate(
                &synth,
                config.seed,
                synthdata::HELD_OUT_OFFSET,
                config.held_out_samples,
            )?);
            let dir = out.join("data");
            synthdata::save_dataset(&dir, &samples)?;
            println!("wrote {} samples to {}", samples.len(), dir.display());
        }
        Command::Train => {
            create_dir(&out)?;
            write_text(&out.join("config.txt"), &config.to_text())?;
            let (train, held_out) = pipeline::load_data(&config)?;
            let (_, outcome) = pipeline::train_schedule(&config, &train, &held_out, Some(&out), |line| {
                println!("{line}")
            })?;
            let last = outcome.held_out.last().expect("initial evaluation");
            println!("{}", pipeline::METRICS_HEADER);
            println!("{}", pipeline::metrics_row(outcome.epochs.len(), "held_out", last));
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| out.join(FINAL_CHECKPOINT));
            let model = TryOnModel::<f32>::load(&config, &path)?;
            let (_, held_out) = pipeline::load_data(&config)?;
            let r = pipeline::evaluate(&model, &held_out)?;
            println!("{}", pipeline::METRICS_HEADER);
            println!("{}", pipeline::metrics_row(0, "held_out", &r));
        }
        Command::Gradcheck => {
            let settings = CheckSettings {
                seed: config.seed,
                ..CheckSettings::default()
            };
            let results = gradcheck::run_suite(&settings, |c| {
                println!(
                    "{:<28} {:>4} coords {:>2} kinks  max rel err {:.2e}  {}",
                    c.name,
                    c.coords,
                    c.kinks,
                    c.max_rel_error,
                    if c.passed { "ok" } else { "FAIL" }
                )
            })?;
            let failed: Vec<&str> = results.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Numerical(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
            println!("{} cases passed", results.len());
        }
        Command::Infer { checkpoint, indices } => {
            let path = checkpoint.unwrap_or_else(|| out.join(FINAL_CHECKPOINT));
            let model = TryOnModel::<f32>::load(&config, &path)?;
            let (_, held_out) = pipeline::load_data(&config)?;
            let dir = out.join("infer");
            create_dir(&dir)?;
            for i in indices {
                let sample = held_out.get(i).ok_or_else(|| {
                    Error::Config(format!("sample {i} out of range, held-out set has {}", held_out.len()))
                })?;
                let p = model.predict(sample)?;
                save_ppm(&dir.join(format!("{i:03}_warped.ppm")), &p.warped)?;
                save_ppm(&dir.join(format!("{i:03}_segmentation.ppm")), &colorize(&p.m_exp)?)?;
                save_ppm(&dir.join(format!("{i:03}_tryon.ppm")), &p.tryon)?;
            }
            println!("wrote images to {}", dir.display());
        }
        Command::Ablate { variants } => {
            let variants = variants
                .iter()
                .map(|v| v.parse::<GatingVariant>())
                .collect::<gaflow::Result<Vec<_>>>()?;
            let (train, held_out) = pipeline::load_data(&config)?;
            let rows = pipeline::ablate(&config, &variants, &train, &held_out, |line| println!("{line}"))?;
            let table = pipeline::ablation_table(&rows);
            create_dir(&out)?;
            write_text(&out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let command = Cli::command().after_help(format!("Configuration keys:\n{}", Config::describe_keys()));
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads()
        .and_then(|()| resolve(&cli.overrides))
        .and_then(|config| run(cli.command, config));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
