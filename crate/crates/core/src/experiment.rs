//! Runs and grids: data preparation, training, persisted artifacts and
//! comparison tables.
//!
//! A run directory is `<root>/<name>-<hash>/` and holds `config.toml`,
//! `metrics.jsonl`, `result.json` and `checkpoint.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalkit::RetrievalReport;
use crate::model::ClassifierKind;
use crate::stats;
use crate::synthdata::{self, DomainDataset, LabeledSet};
use crate::trainer::{self, EvalSets, RunMode};

/// Environment variable naming the directory that receives run outputs.
pub const OUTPUT_ROOT_ENV: &str = "M3L_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Training-side sources and the held-out domain's query and gallery.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub sources: Vec<DomainDataset>,
    pub query: LabeledSet,
    pub gallery: LabeledSet,
}

pub fn prepare_data(config: &ExperimentConfig, domains: &[DomainDataset]) -> Result<PreparedData> {
    if domains.len() != config.data.n_domains {
        return Err(Error::Config(format!(
            "config expects {} domains, data has {}",
            config.data.n_domains,
            domains.len()
        )));
    }
    let sources = config
        .source_domains()
        .iter()
        .map(|&d| synthdata::split_domain(&domains[d], config.train_fraction).map(|s| s.train))
        .collect::<Result<Vec<_>>>()?;
    let held = synthdata::split_domain(&domains[config.held_out], config.train_fraction)?;
    Ok(PreparedData {
        sources,
        query: held.query,
        gallery: held.gallery,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub config_hash: String,
    pub mode: RunMode,
    pub classifier: ClassifierKind,
    pub seed: u64,
    pub data_seed: u64,
    pub held_out: usize,
    pub sources: Vec<usize>,
    pub epochs: usize,
    pub iterations: usize,
    #[serde(flatten)]
    pub report: RetrievalReport,
    pub run_dir: Option<PathBuf>,
}

/// Human-readable summary of what a config would do.
pub fn describe_plan(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let domains = config.data.generate()?;
    let data = prepare_data(config, &domains)?;
    let per_epoch = trainer::iterations_per_epoch(&data.sources, config.train.pk);
    let mut s = String::new();
    let _ = writeln!(s, "run {} ({})", config.name, config.hash());
    let _ = writeln!(
        s,
        "mode {} with {} classifier, seed {}",
        config.train.mode.label(),
        config.train.classifier.label(),
        config.train.seed
    );
    let _ = writeln!(
        s,
        "sources {:?} ({} train samples each at least), held-out domain {}",
        config.source_domains(),
        data.sources.iter().map(DomainDataset::len).min().unwrap_or(0),
        config.held_out
    );
    let _ = writeln!(
        s,
        "held-out query {} / gallery {}",
        data.query.labels.len(),
        data.gallery.labels.len()
    );
    let _ = writeln!(
        s,
        "{} epochs x {} iterations, batch {}x{}, eval every {} epochs",
        config.train.epochs, per_epoch, config.train.pk.p, config.train.pk.k, config.train.eval_every
    );
    Ok(s)
}

/// Trains and evaluates one config. With `out_root`, artifacts land in
/// `<out_root>/<name>-<hash>/`.
pub fn run_experiment(config: &ExperimentConfig, out_root: Option<&Path>) -> Result<RunResult> {
    config.validate()?;
    let domains = config.data.generate()?;
    run_on(config, &domains, out_root)
}

/// Like [`run_experiment`] with pre-generated domains.
pub fn run_on(config: &ExperimentConfig, domains: &[DomainDataset], out_root: Option<&Path>) -> Result<RunResult> {
    config.validate()?;
    let hash = config.hash();
    let data = prepare_data(config, domains)?;
    let run_dir = out_root.map(|root| root.join(format!("{}-{hash}", config.name)));
    let mut metrics = match &run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
            Some(BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let every = config.train.checkpoint_every;
    let outcome = trainer::train_with(
        &config.train,
        &config.encoder,
        &data.sources,
        Some(EvalSets {
            query: &data.query,
            gallery: &data.gallery,
        }),
        |event| {
            if let Some(out) = metrics.as_mut() {
                serde_json::to_writer(&mut *out, event)?;
                out.write_all(b"\n")?;
            }
            Ok(())
        },
        |state| {
            let (Some(dir), true) = (&run_dir, every > 0 && (state.epoch + 1) % every == 0) else {
                return Ok(());
            };
            let ck = Checkpoint::capture(
                &state.params,
                &state.memories,
                state.epoch + 1,
                state.iteration,
                Some(hash.clone()),
            )?;
            let sub = dir.join("checkpoints");
            std::fs::create_dir_all(&sub)?;
            ck.save(&sub.join(format!("epoch-{:04}.json", state.epoch + 1)))
        },
    )?;
    if let Some(mut out) = metrics {
        out.flush()?;
    }
    let report = match outcome.final_report {
        Some(r) => r,
        None => trainer::evaluate_encoder(&outcome.state.params.encoder, &data.query, &data.gallery)?,
    };
    let result = RunResult {
        name: config.name.clone(),
        config_hash: hash.clone(),
        mode: config.train.mode,
        classifier: config.train.classifier,
        seed: config.train.seed,
        data_seed: config.data.seed,
        held_out: config.held_out,
        sources: config.source_domains(),
        epochs: config.train.epochs,
        iterations: outcome.state.iteration,
        report,
        run_dir: run_dir.clone(),
    };
    if let Some(dir) = &run_dir {
        let ck = Checkpoint::capture(
            &outcome.state.params,
            &outcome.state.memories,
            outcome.state.epoch,
            outcome.state.iteration,
            Some(hash),
        )?;
        ck.save(&dir.join("checkpoint.json"))?;
        std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    }
    Ok(result)
}

/// Scores a checkpoint on the held-out domain described by `config`.
pub fn evaluate_checkpoint(config: &ExperimentConfig, checkpoint: &Checkpoint) -> Result<RetrievalReport> {
    config.validate()?;
    let (params, _) = checkpoint.restore()?;
    let domains = config.data.generate()?;
    let data = prepare_data(config, &domains)?;
    trainer::evaluate_encoder(&params.encoder, &data.query, &data.gallery)
}

/// One row of a grid: a config plus the label of the row it is compared to.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub reference: Option<String>,
    pub config: ExperimentConfig,
}

/// Grid file layout: `name`, `seeds`, a partial `[base]` config and
/// `[[cells]]` each with `label`, optional `reference` and a partial `set`
/// table merged over the base.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: toml::Table,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub cells: Vec<CellSpec>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub label: String,
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub set: toml::Table,
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl GridSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn base_config(&self) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::Value::Table(self.base.clone()).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Preset cells (if any) followed by explicit cells.
    pub fn resolve(&self) -> Result<Vec<GridCell>> {
        let mut cells = match &self.preset {
            Some(p) => preset(p, &self.base_config()?)?,
            None => Vec::new(),
        };
        for c in &self.cells {
            let mut table = self.base.clone();
            merge(&mut table, &c.set);
            let mut config: ExperimentConfig = toml::Value::Table(table).try_into()?;
            if config.name == ExperimentConfig::default().name {
                config.name = format!("{}-{}", self.name, slug(&c.label));
            }
            config.validate()?;
            cells.push(GridCell {
                label: c.label.clone(),
                reference: c.reference.clone(),
                config,
            });
        }
        if cells.is_empty() {
            return Err(Error::Config(format!("grid {} has no cells", self.name)));
        }
        Ok(cells)
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect()
}

pub const PRESETS: &[&str] = &["modes", "classifiers", "sources", "id-count", "leave-one-out"];

fn cell(
    base: &ExperimentConfig,
    grid: &str,
    label: &str,
    reference: Option<&str>,
    edit: impl FnOnce(&mut ExperimentConfig),
) -> GridCell {
    let mut config = base.clone();
    edit(&mut config);
    config.name = format!("{grid}-{}", slug(label));
    GridCell {
        label: label.to_string(),
        reference: reference.map(str::to_string),
        config,
    }
}

/// Named grids over a shared base config.
///
/// * `modes`: baseline, meta, meta+metabn with the memory classifier.
/// * `classifiers`: each classifier with and without meta-learning.
/// * `sources`: all sources against every subset with one source fewer.
/// * `id-count`: identities per domain in {25, 50, 100} for each classifier.
/// * `leave-one-out`: every domain held out in turn, baseline and meta+metabn.
pub fn preset(name: &str, base: &ExperimentConfig) -> Result<Vec<GridCell>> {
    let classifiers = [
        ClassifierKind::FcGlobal,
        ClassifierKind::FcParallel,
        ClassifierKind::Memory,
    ];
    let cells = match name {
        "modes" => [RunMode::Baseline, RunMode::Meta, RunMode::MetaBn]
            .into_iter()
            .map(|mode| {
                let reference = (mode != RunMode::Baseline).then_some("baseline");
                cell(base, name, mode.label(), reference, |c| {
                    c.train.mode = mode;
                    c.train.classifier = ClassifierKind::Memory;
                })
            })
            .collect(),
        "classifiers" => classifiers
            .iter()
            .flat_map(|&clf| {
                let plain = format!("{}/baseline", clf.label());
                let meta = format!("{}/meta+metabn", clf.label());
                [
                    cell(base, name, &plain, None, |c| {
                        c.train.mode = RunMode::Baseline;
                        c.train.classifier = clf;
                    }),
                    cell(base, name, &meta, Some(&plain), |c| {
                        c.train.mode = RunMode::MetaBn;
                        c.train.classifier = clf;
                    }),
                ]
            })
            .collect(),
        "sources" => {
            let all = base.source_domains();
            if all.len() < 3 {
                return Err(Error::Config(
                    "the sources preset needs at least 3 source domains".into(),
                ));
            }
            let label = |s: &[usize]| {
                format!(
                    "sources {}",
                    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("+")
                )
            };
            let full = label(&all);
            let mut cells = vec![cell(base, name, &full, None, |c| c.sources = Some(all.clone()))];
            for skip in 0..all.len() {
                let subset: Vec<usize> = all
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != skip)
                    .map(|(_, &d)| d)
                    .collect();
                cells.push(cell(base, name, &label(&subset), Some(&full), |c| {
                    c.sources = Some(subset.clone())
                }));
            }
            cells
        }
        "id-count" => [25usize, 50, 100]
            .into_iter()
            .flat_map(|ids| {
                classifiers.iter().map(move |&clf| {
                    cell(base, name, &format!("{ids} ids/{}", clf.label()), None, |c| {
                        c.data.ids_per_domain = ids;
                        c.train.classifier = clf;
                    })
                })
            })
            .collect(),
        "leave-one-out" => (0..base.data.n_domains)
            .flat_map(|held| {
                let plain = format!("target {held}/baseline");
                let meta = format!("target {held}/meta+metabn");
                [
                    cell(base, name, &plain, None, |c| {
                        c.held_out = held;
                        c.sources = None;
                        c.train.mode = RunMode::Baseline;
                    }),
                    cell(base, name, &meta, Some(&plain), |c| {
                        c.held_out = held;
                        c.sources = None;
                        c.train.mode = RunMode::MetaBn;
                    }),
                ]
            })
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    let cells: Vec<GridCell> = cells;
    for c in &cells {
        c.config.validate()?;
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub mode: RunMode,
    pub classifier: ClassifierKind,
    pub n_sources: usize,
    pub held_out: usize,
    pub ids_per_domain: usize,
    pub n_seeds: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub reference: Option<String>,
    pub delta_map: Option<f64>,
    pub delta_rank1: Option<f64>,
    /// One-sided paired t-test of this row's mAP exceeding the reference's.
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub label: String,
    #[serde(flatten)]
    pub result: RunResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub name: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<GridRow>,
    pub runs: Vec<GridRun>,
}

impl GridReport {
    pub fn row(&self, label: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Held-out mAP per seed for `label`, in seed order.
    pub fn maps(&self, label: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.result.report.map)
            .collect()
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "label",
            "mode",
            "classifier",
            "n_sources",
            "held_out",
            "ids_per_domain",
            "n_seeds",
            "map_mean",
            "map_std",
            "rank1_mean",
            "rank1_std",
            "reference",
            "delta_map",
            "delta_rank1",
            "p_value",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.mode.label().to_string(),
                r.classifier.label().to_string(),
                r.n_sources.to_string(),
                r.held_out.to_string(),
                r.ids_per_domain.to_string(),
                r.n_seeds.to_string(),
                format!("{:.6}", r.map_mean),
                format!("{:.6}", r.map_std),
                format!("{:.6}", r.rank1_mean),
                format!("{:.6}", r.rank1_std),
                r.reference.clone().unwrap_or_default(),
                opt(r.delta_map),
                opt(r.delta_rank1),
                opt(r.p_value),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "label",
            "seed",
            "config_hash",
            "map",
            "rank1",
            "n_query",
            "n_gallery",
            "metrics",
        ])
        .map_err(csv_err)?;
        for r in &self.runs {
            let metrics = r
                .result
                .run_dir
                .as_ref()
                .map(|d| d.join("metrics.jsonl").display().to_string())
                .unwrap_or_default();
            w.write_record([
                r.label.clone(),
                r.result.seed.to_string(),
                r.result.config_hash.clone(),
                format!("{:.6}", r.result.report.map),
                format!("{:.6}", r.result.report.rank1),
                r.result.report.n_query.to_string(),
                r.result.report.n_gallery.to_string(),
                metrics,
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fixed-width text table, mAP and Rank-1 in percent.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{} ({} seeds)", self.name, self.seeds.len());
        let _ = writeln!(
            s,
            "{:<width$}  {:>13}  {:>13}  {:>8}  {:>8}",
            "label", "mAP", "Rank-1", "dmAP", "p"
        );
        for r in &self.rows {
            let delta = r
                .delta_map
                .map(|d| format!("{:+.2}", 100.0 * d))
                .unwrap_or_else(|| "-".into());
            let p = r.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<width$}  {:>6.2} ±{:>5.2}  {:>6.2} ±{:>5.2}  {:>8}  {:>8}",
                r.label,
                100.0 * r.map_mean,
                100.0 * r.map_std,
                100.0 * r.rank1_mean,
                100.0 * r.rank1_std,
                delta,
                p
            );
        }
        s
    }

    /// Writes `summary.csv`, `runs.csv` and `summary.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_summary_csv(std::fs::File::create(dir.join("summary.csv"))?)?;
        self.write_runs_csv(std::fs::File::create(dir.join("runs.csv"))?)?;
        std::fs::write(dir.join("summary.txt"), self.to_text())?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Runs every cell for every seed and tabulates the results.
pub fn run_ablation_grid(name: &str, cells: &[GridCell], seeds: &[u64], out_root: Option<&Path>) -> Result<GridReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("grid needs at least one cell and one seed".into()));
    }
    let data_seed = cells[0].config.data.seed;
    if let Some(c) = cells.iter().find(|c| c.config.data.seed != data_seed) {
        return Err(Error::Config(format!(
            "cell {:?} uses data seed {} but the grid uses {data_seed}",
            c.label, c.config.data.seed
        )));
    }
    let mut labels = BTreeMap::new();
    for c in cells {
        if labels.insert(c.label.as_str(), ()).is_some() {
            return Err(Error::Config(format!("duplicate cell label {:?}", c.label)));
        }
    }
    for c in cells {
        if let Some(r) = &c.reference {
            if !labels.contains_key(r.as_str()) {
                return Err(Error::Config(format!("cell {:?} references unknown {r:?}", c.label)));
            }
        }
    }
    let mut data_cache: Vec<(crate::synthdata::SyntheticConfig, Vec<DomainDataset>)> = Vec::new();
    let mut runs = Vec::new();
    for c in cells {
        let domains = match data_cache.iter().position(|(cfg, _)| cfg == &c.config.data) {
            Some(i) => &data_cache[i].1,
            None => {
                data_cache.push((c.config.data.clone(), c.config.data.generate()?));
                &data_cache.last().expect("just pushed").1
            }
        };
        for &seed in seeds {
            let mut config = c.config.clone();
            config.train.seed = seed;
            let result = run_on(&config, domains, out_root)?;
            log::info!(
                "{name}: {} seed {seed}: mAP {:.4} rank1 {:.4}",
                c.label,
                result.report.map,
                result.report.rank1
            );
            runs.push(GridRun {
                label: c.label.clone(),
                result,
            });
        }
    }
    let maps = |label: &str| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.label == label)
            .map(|r| r.result.report.map)
            .collect()
    };
    let r1s = |label: &str| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.label == label)
            .map(|r| r.result.report.rank1)
            .collect()
    };
    let mut rows = Vec::new();
    for c in cells {
        let m = maps(&c.label);
        let r1 = r1s(&c.label);
        let (delta_map, delta_rank1, p_value) = match &c.reference {
            Some(reference) => {
                let rm = maps(reference);
                let rr = r1s(reference);
                let p = if m.len() >= 2 {
                    Some(stats::paired_t_test(&m, &rm)?.p_greater)
                } else {
                    None
                };
                (
                    Some(stats::mean(&m) - stats::mean(&rm)),
                    Some(stats::mean(&r1) - stats::mean(&rr)),
                    p,
                )
            }
            None => (None, None, None),
        };
        rows.push(GridRow {
            label: c.label.clone(),
            mode: c.config.train.mode,
            classifier: c.config.train.classifier,
            n_sources: c.config.source_domains().len(),
            held_out: c.config.held_out,
            ids_per_domain: c.config.data.ids_per_domain,
            n_seeds: m.len(),
            map_mean: stats::mean(&m),
            map_std: stats::std_dev(&m),
            rank1_mean: stats::mean(&r1),
            rank1_std: stats::std_dev(&r1),
            reference: c.reference.clone(),
            delta_map,
            delta_rank1,
            p_value,
        });
    }
    Ok(GridReport {
        name: name.to_string(),
        seeds: seeds.to_vec(),
        rows,
        runs,
    })
}
