use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use blendcon_core::ablation::{self, Grid};
use blendcon_core::config::TrainConfig;
use blendcon_core::data::{encode_image, encode_pgm, generate_to_disk, load_dataset, DatasetSpec, Split};
use blendcon_core::sdb::{blend_batch, moment_report, BlendBatchPair, EtaDistribution, DEFAULT_EPS};
use blendcon_core::seeding::{purpose, rng_for};
use blendcon_core::trainer;
use clap::{Parser, Subcommand};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "blendcon", version, about = "Semi-supervised segmentation with style blending and prototype cross-contrast")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to disk.
    GenerateData {
        /// Dataset spec (JSON); defaults are used for missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-split and per-class intensity moments as CSV.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Style-blend every labeled image with a random unlabeled one.
    Blend {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// `uniform`, `beta`, `bernoulli`, a constant, or a JSON object.
        #[arg(long, default_value = "uniform")]
        eta: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Extra `key=value` overrides; dotted keys reach nested fields.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a checkpoint; prints the report as JSON.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: Split,
        /// Use this configuration instead of the embedded one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write metrics.csv and metrics.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per grid row and tabulate the results.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Grid file, or one of: components, components-bank, eta, directions, bank.
        #[arg(long)]
        grid: String,
        /// Repeat every row for these seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: &Path, set: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    for kv in set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override `{kv}` is not KEY=VALUE");
        };
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        cfg = cfg.with_override(k, &value)?;
    }
    Ok(cfg)
}

fn parse_eta(s: &str) -> Result<EtaDistribution> {
    let eta = match s {
        "uniform" => EtaDistribution::Uniform,
        "beta" => EtaDistribution::beta(),
        "bernoulli" => EtaDistribution::bernoulli(),
        _ => match s.parse::<f64>() {
            Ok(value) => EtaDistribution::Constant { value },
            Err(_) => serde_json::from_str(s).with_context(|| format!("bad eta `{s}`"))?,
        },
    };
    eta.validate()?;
    Ok(eta)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn blend(data: &Path, out: &Path, classes: usize, eta: &str, seed: u64) -> Result<()> {
    let eta = parse_eta(eta)?;
    let ds = load_dataset(data, classes)?;
    let labeled = ds
        .labeled
        .iter()
        .map(|s| Ok((s.image.clone(), s.mask.clone().context("labeled sample without mask")?)))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled: Vec<_> = ds.unlabeled.iter().map(|s| s.image.clone()).collect();
    let mut rng = rng_for(seed, &[purpose::BLEND]);
    let blended = blend_batch(
        BlendBatchPair {
            labeled: &labeled,
            unlabeled: &unlabeled,
        },
        &eta,
        DEFAULT_EPS,
        &mut rng,
    )?;
    let (img_dir, mask_dir) = (out.join("img"), out.join("mask"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&mask_dir)?;
    let mut table = String::from("id,style_source,eta,mu,sigma\n");
    for (s, b) in ds.labeled.iter().zip(&blended) {
        write(&img_dir.join(format!("{}.pgm", s.id)), encode_image(&b.image)?)?;
        write(
            &mask_dir.join(format!("{}.pgm", s.id)),
            encode_pgm(b.mask.height(), b.mask.width(), b.mask.data()),
        )?;
        let src = &ds.unlabeled[b.style_source].id;
        table.push_str(&format!("{},{src},{},{},{}\n", s.id, b.eta, b.mixed.mu, b.mixed.sigma));
    }
    write(&out.join("blend.csv"), table)?;
    println!("blended {} images into {}", blended.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { spec, out, seed } => {
            let mut spec: DatasetSpec = match spec {
                Some(p) => serde_json::from_str(&read(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => DatasetSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let m = generate_to_disk(&spec, &out)?;
            println!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Stats { data, classes, out } => {
            let ds = load_dataset(&data, classes)?;
            let splits: Vec<(&str, &[_])> = Split::ALL.iter().map(|&s| (s.as_str(), ds.split(s))).collect();
            let csv = moment_report(&splits, DEFAULT_EPS)?.to_csv();
            match out {
                Some(p) => write(&p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Blend {
            data,
            out,
            classes,
            eta,
            seed,
        } => blend(&data, &out, classes, &eta, seed)?,
        Command::Train { config, resume, set } => {
            let cfg = load_config(&config, &set)?;
            let outcome = trainer::train(&cfg, resume.as_deref())?;
            println!(
                "final test DSC {:.4}, ASD {}; checkpoint {}",
                outcome.report.mean_dsc,
                outcome.report.mean_asd.map_or("n/a".into(), |a| format!("{a:.3}")),
                outcome.final_checkpoint.display()
            );
        }
        Command::Evaluate {
            ckpt,
            split,
            config,
            out,
        } => {
            let cfg = config.map(|p| load_config(&p, &[])).transpose()?;
            let report = trainer::evaluate(&ckpt, split, cfg.as_ref())?;
            let json = report.to_json()?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write(&dir.join("metrics.json"), &json)?;
                write(&dir.join("metrics.csv"), report.to_csv())?;
            }
            println!("{json}");
        }
        Command::Ablate {
            config,
            grid,
            seeds,
            set,
        } => {
            let cfg = load_config(&config, &set)?;
            let path = Path::new(&grid);
            let mut grid = if path.exists() {
                Grid::from_json(&read(path)?)?
            } else {
                Grid::preset(&grid)?
            };
            if !seeds.is_empty() {
                grid = grid.with_seeds(&seeds);
            }
            let rows = ablation::ablate(&cfg, &grid)?;
            print!("{}", ablation::to_csv(&rows)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
