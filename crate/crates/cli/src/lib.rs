//! Command implementations behind the `m3l` binary.

pub mod overrides;
pub mod plot;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use m3l_core::checkpoint::Checkpoint;
use m3l_core::config::ExperimentConfig;
use m3l_core::experiment::{self, GridSpec, PRESETS};
use m3l_core::synthdata::{self, DomainDataset};

#[derive(Debug, Parser)]
#[command(
    name = "m3l",
    version,
    about = "Multi-source meta-learning experiments on synthetic domains"
)]
pub struct Cli {
    /// Root for run outputs. Falls back to $M3L_OUTPUT_ROOT, then ./runs.
    #[arg(long, global = true)]
    pub out_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic domains of a config in columnar text form.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file (default: <out-root>/data/<name>-<hash>.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one config and evaluate it on the held-out domain.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Read domains from a columnar file instead of generating them.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validate and print the resolved plan without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a saved checkpoint on the held-out domain.
    Evaluate {
        /// Run directory holding config.toml and checkpoint.json.
        #[arg(long, conflicts_with_all = ["checkpoint", "config"])]
        run: Option<PathBuf>,
        #[arg(long, requires = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a preset or a grid file over several seeds and tabulate.
    Grid {
        /// One of: modes, classifiers, sources, id-count, leave-one-out.
        #[arg(long, conflicts_with = "grid")]
        preset: Option<String>,
        /// Grid description in TOML.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Draw loss and evaluation curves; several runs are overlaid.
    Plot {
        /// Run directories or metrics.jsonl files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory (default: the run directory, or <out-root>/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus per-key overrides.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// Experiment config in TOML; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub name: Option<String>,
    /// baseline, meta or meta+metabn.
    #[arg(long)]
    pub mode: Option<String>,
    /// memory, fc_global or fc_parallel.
    #[arg(long)]
    pub classifier: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub held_out: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let mut sets = Vec::new();
        let quoted = |s: &str| toml::Value::String(s.to_string()).to_string();
        if let Some(v) = &self.name {
            sets.push(format!("name={}", quoted(v)));
        }
        if let Some(v) = &self.mode {
            sets.push(format!("train.mode={}", quoted(v)));
        }
        if let Some(v) = &self.classifier {
            sets.push(format!("train.classifier={}", quoted(v)));
        }
        if let Some(v) = self.epochs {
            sets.push(format!("train.epochs={v}"));
        }
        if let Some(v) = self.seed {
            sets.push(format!("train.seed={v}"));
        }
        if let Some(v) = self.data_seed {
            sets.push(format!("data.seed={v}"));
        }
        if let Some(v) = self.held_out {
            sets.push(format!("held_out={v}"));
        }
        sets.extend(self.set.iter().cloned());
        let cfg = overrides::apply(&base, &sets)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_domains(config: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<DomainDataset>> {
    match data {
        Some(p) => {
            let file = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let mut domains = synthdata::read_columnar(std::io::BufReader::new(file))?;
            domains.sort_by_key(|d| d.domain_id);
            if domains.iter().enumerate().any(|(i, d)| d.domain_id != i) {
                bail!("{} must hold domains 0..n without gaps", p.display());
            }
            Ok(domains)
        }
        None => Ok(config.data.generate()?),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let root = cli.out_root.clone().unwrap_or_else(experiment::output_root);
    match cli.command {
        Command::GenerateData { config, out: path } => {
            let cfg = config.resolve()?;
            let domains = cfg.data.generate()?;
            let path = path.unwrap_or_else(|| root.join("data").join(format!("{}-{}.txt", cfg.name, cfg.hash())));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let file = std::io::BufWriter::new(std::fs::File::create(&path)?);
            synthdata::write_columnar(&domains, file)?;
            let samples: usize = domains.iter().map(DomainDataset::len).sum();
            writeln!(
                out,
                "wrote {} domains, {samples} samples to {}",
                domains.len(),
                path.display()
            )?;
        }
        Command::Train { config, data, dry_run } => {
            let cfg = config.resolve()?;
            if dry_run {
                write!(out, "{}", experiment::describe_plan(&cfg)?)?;
                writeln!(
                    out,
                    "outputs would go to {}",
                    root.join(format!("{}-{}", cfg.name, cfg.hash())).display()
                )?;
                return Ok(());
            }
            let domains = load_domains(&cfg, data.as_deref())?;
            let result = experiment::run_on(&cfg, &domains, Some(&root))?;
            writeln!(
                out,
                "{} {}: mAP {:.2} Rank-1 {:.2} after {} iterations",
                result.name,
                result.mode.label(),
                100.0 * result.report.map,
                100.0 * result.report.rank1,
                result.iterations
            )?;
            if let Some(dir) = &result.run_dir {
                writeln!(out, "run directory {}", dir.display())?;
            }
        }
        Command::Evaluate {
            run,
            checkpoint,
            config,
            data,
        } => {
            let (cfg_path, ck_path) = match (run, checkpoint, config) {
                (Some(dir), _, _) => (dir.join("config.toml"), dir.join("checkpoint.json")),
                (None, Some(ck), Some(cfg)) => (cfg, ck),
                _ => bail!("pass --run DIR or both --checkpoint and --config"),
            };
            let cfg = ExperimentConfig::load(&cfg_path).with_context(|| format!("loading {}", cfg_path.display()))?;
            let ck = Checkpoint::load(&ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
            if let Some(h) = &ck.config_hash {
                if *h != cfg.hash() {
                    log::warn!("checkpoint was written for config {h}, evaluating with {}", cfg.hash());
                }
            }
            let domains = load_domains(&cfg, data.as_deref())?;
            let prepared = experiment::prepare_data(&cfg, &domains)?;
            let (params, _) = ck.restore()?;
            let report = m3l_core::trainer::evaluate_encoder(&params.encoder, &prepared.query, &prepared.gallery)?;
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
        }
        Command::Grid {
            preset,
            grid,
            config,
            seeds,
        } => {
            let (name, cells, file_seeds) = match (preset, grid) {
                (Some(p), None) => {
                    let base = config.resolve()?;
                    (p.clone(), experiment::preset(&p, &base)?, Vec::new())
                }
                (None, Some(path)) => {
                    let spec = GridSpec::load(&path).with_context(|| format!("loading {}", path.display()))?;
                    (spec.name.clone(), spec.resolve()?, spec.seeds.clone())
                }
                _ => bail!("pass --preset ({}) or --grid FILE", PRESETS.join(", ")),
            };
            let seeds = seeds
                .filter(|s| !s.is_empty())
                .or((!file_seeds.is_empty()).then_some(file_seeds))
                .unwrap_or_else(|| (0..5).collect());
            let dir = root.join("grids").join(&name);
            let report = experiment::run_ablation_grid(&name, &cells, &seeds, Some(&dir))?;
            report.save(&dir)?;
            write!(out, "{}", report.to_text())?;
            writeln!(out, "tables in {}", dir.display())?;
        }
        Command::Plot { runs, out: out_dir } => {
            let mut curves = Vec::new();
            let mut stems = Vec::new();
            for r in &runs {
                let (metrics, dir) = if r.is_dir() {
                    (r.join("metrics.jsonl"), r.clone())
                } else {
                    (r.clone(), r.parent().map(Path::to_path_buf).unwrap_or_default())
                };
                let (label, stem) = match ExperimentConfig::load(&dir.join("config.toml")) {
                    Ok(cfg) => (format!("{} ({})", cfg.name, cfg.train.mode.label()), cfg.hash()),
                    Err(_) => {
                        let n = dir
                            .file_name()
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_else(|| "run".into());
                        (n.clone(), n)
                    }
                };
                curves.push(plot::Curves::from_events(&label, &plot::read_metrics(&metrics)?));
                stems.push(stem);
            }
            let out_dir = match (out_dir, runs.len()) {
                (Some(d), _) => d,
                (None, 1) => {
                    let r = &runs[0];
                    if r.is_dir() {
                        r.clone()
                    } else {
                        r.parent().map(Path::to_path_buf).unwrap_or_default()
                    }
                }
                (None, _) => root.join("plots"),
            };
            let stem = stems.join("+");
            for p in plot::plot_runs(&curves, &out_dir, &stem)? {
                writeln!(out, "wrote {}", p.display())?;
            }
        }
    }
    Ok(())
}
