//! End-to-end runs: data, training, descriptor export and evaluation, plus
//! variant ablations and one-parameter sweeps.
//!
//! A run writes under `<out>/<config hash>-s<seed>/`:
//!
//! ```text
//! config.txt        the resolved configuration
//! data/             generated dataset (unless data.root is set)
//! checkpoint.ckpt   latest epoch
//! train_log.tsv
//! gallery.desc, probe.desc
//! metrics.txt, metrics.kv, cmc.tsv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{ExperimentConfig, Variant};
use crate::descfile::DescriptorSet;
use crate::eval::{evaluate_retrieval, MetricReport};
use crate::io::write_file;
use crate::model::{save_checkpoint, Model};
use crate::synthdata::{generate_samples, load_split, write_dataset, DatasetManifest, ManifestEntry, SampleRecord, Split};
use crate::train::{extract_descriptors, train, Described, LossSpec, TrainLog, TrainOptions, TrainSet};
use crate::align::DistanceConfig;
use crate::{Error, Result};

/// Samples of all three splits, in manifest order.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<(ManifestEntry, SampleRecord)>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &(ManifestEntry, SampleRecord)> {
        self.samples.iter().filter(move |(e, _)| e.split == split)
    }

    /// Reads a dataset written by [`crate::synthdata::generate_dataset`].
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(root)?;
        manifest.check_split_hygiene()?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for split in [Split::Train, Split::Gallery, Split::Probe] {
            samples.extend(load_split(root, &manifest, split)?);
        }
        Ok(Self { manifest, samples })
    }

    /// Renders the configured dataset and writes it under `root`.
    pub fn generate(config: &ExperimentConfig, root: &Path) -> Result<Self> {
        let samples = generate_samples(&config.data)?;
        let manifest = write_dataset(&config.data, &samples, root)?;
        Ok(Self { manifest, samples })
    }
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub model: Model,
    pub log: TrainLog,
    pub gallery: DescriptorSet,
    pub probe: DescriptorSet,
    pub report: MetricReport,
}

pub fn train_options(config: &ExperimentConfig) -> TrainOptions {
    TrainOptions {
        model: config.model(),
        train: config.train.clone(),
        loss: LossSpec {
            weights: config.weights,
            source: config.source(),
            method: config.method,
            distance: DistanceConfig::default(),
            id_weight_gradient: false,
        },
        seed: config.seed,
    }
}

/// Gallery and probe descriptor sets for a trained model.
pub fn export_descriptors(model: &Model, config: &ExperimentConfig, data: &Dataset) -> Result<(DescriptorSet, DescriptorSet)> {
    let ids: Vec<String> = data.samples.iter().map(|(e, _)| e.image_id()).collect();
    let mut out = Vec::with_capacity(2);
    for split in [Split::Gallery, Split::Probe] {
        let items: Vec<Described<'_>> = data
            .samples
            .iter()
            .zip(&ids)
            .filter(|((e, _), _)| e.split == split)
            .map(|((e, s), id)| Described {
                image_id: id,
                identity: e.identity,
                image: &s.image,
            })
            .collect();
        let records = extract_descriptors(model, &items, config.method, config.source())?;
        out.push(DescriptorSet::new(model.config.n_regions, model.config.reduced_channels, records)?.quantized());
    }
    let probe = out.pop().expect("two splits");
    let gallery = out.pop().expect("two splits");
    Ok((gallery, probe))
}

pub fn evaluate_sets(gallery: &DescriptorSet, probe: &DescriptorSet, config: &ExperimentConfig) -> Result<MetricReport> {
    evaluate_retrieval(
        &gallery.records,
        &probe.records,
        config.distance,
        &DistanceConfig::default(),
        config.max_rank.min(gallery.records.len()),
    )
}

pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    write_file(&dir.join("metrics.txt"), report.to_text().as_bytes())?;
    write_file(&dir.join("metrics.kv"), report.to_kv().as_bytes())?;
    write_file(&dir.join("cmc.tsv"), report.cmc_table().as_bytes())
}

/// Trains on an already loaded dataset and evaluates, writing artifacts to
/// `run_dir`.
pub fn run_with_data(config: &ExperimentConfig, data: &Dataset, run_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    write_file(&run_dir.join("config.txt"), config.to_text().as_bytes())?;
    let train_set = TrainSet::new(data.split(Split::Train).map(|(_, s)| s));
    let checkpoint = run_dir.join("checkpoint.ckpt");
    let (model, log) = train(&train_options(config), &train_set, |model, _| save_checkpoint(model, &checkpoint))?;
    write_file(&run_dir.join("train_log.tsv"), log.to_tsv().as_bytes())?;
    let (gallery, probe) = export_descriptors(&model, config, data)?;
    gallery.write(&run_dir.join("gallery.desc"))?;
    probe.write(&run_dir.join("probe.desc"))?;
    let report = evaluate_sets(&gallery, &probe, config)?;
    write_report(&report, run_dir)?;
    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        model,
        log,
        gallery,
        probe,
        report,
    })
}

/// Full run under `<out_root>/<hash>-s<seed>`.
pub fn run(config: &ExperimentConfig, out_root: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let run_dir = out_root.join(config.run_name());
    let data = match &config.data_root {
        Some(root) => Dataset::load(root)?,
        None => Dataset::generate(config, &run_dir.join("data"))?,
    };
    run_with_data(config, &data, &run_dir)
}

pub fn run_variant(config: &ExperimentConfig, variant: Variant, out_root: &Path) -> Result<RunOutcome> {
    let mut cfg = config.clone();
    cfg.variant = variant;
    run(&cfg, out_root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Tau,
    Lambda,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(Error::InvalidConfig(format!("cannot sweep `{other}` (tau or lambda)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Lambda => "lambda",
        }
    }

    pub fn apply(self, config: &mut ExperimentConfig, value: f64) {
        match self {
            SweepParam::Tau => config.tau = value,
            SweepParam::Lambda => config.weights.lambda = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub result: std::result::Result<MetricReport, String>,
    /// Wall-clock since the sweep started, at the end of this row.
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub name: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\trank1\tmap\tpr_auc\telapsed_s\terror\n", self.name);
        for r in &self.rows {
            match &r.result {
                Ok(m) => {
                    let _ = writeln!(s, "{}\t{:?}\t{:?}\t{:?}\t{:.3}\t", r.label, m.rank1(), m.map, m.pr_auc, r.elapsed);
                }
                Err(e) => {
                    let _ = writeln!(s, "{}\tnan\tnan\tnan\t{:.3}\t{}", r.label, r.elapsed, e.replace(['\t', '\n'], " "));
                }
            }
        }
        s
    }

    /// Two-column `<value> <metric>` table for one metric.
    pub fn metric_column(&self, metric: impl Fn(&MetricReport) -> f64) -> String {
        let mut s = format!("{}\tvalue\n", self.name);
        for r in &self.rows {
            if let Ok(m) = &r.result {
                let _ = writeln!(s, "{}\t{:?}", r.label, metric(m));
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("table.tsv"), self.to_tsv().as_bytes())?;
        write_file(&dir.join("rank1.tsv"), self.metric_column(MetricReport::rank1).as_bytes())?;
        write_file(&dir.join("map.tsv"), self.metric_column(|m| m.map).as_bytes())?;
        write_file(&dir.join("pr_auc.tsv"), self.metric_column(|m| m.pr_auc).as_bytes())
    }
}

fn run_cells(
    name: &str,
    cells: Vec<(String, ExperimentConfig)>,
    out_dir: &Path,
    data: Option<&Dataset>,
) -> Result<SweepTable> {
    let started = Instant::now();
    let mut rows = Vec::with_capacity(cells.len());
    for (label, cfg) in cells {
        let result = match data {
            Some(d) => run_with_data(&cfg, d, &out_dir.join(cfg.run_name())),
            None => run(&cfg, out_dir),
        };
        rows.push(SweepRow {
            label,
            result: result.map(|o| o.report).map_err(|e| e.to_string()),
            elapsed: started.elapsed().as_secs_f64(),
        });
    }
    let table = SweepTable {
        name: name.to_string(),
        rows,
    };
    table.write(out_dir)?;
    Ok(table)
}

fn sweep_dir(config: &ExperimentConfig, out_root: &Path, what: &str) -> PathBuf {
    out_root.join(format!("sweep-{what}-{}", config.run_name()))
}

/// One run per value with a shared seed; failed cells are recorded and the
/// sweep continues.
pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64], out_root: &Path) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    let dir = sweep_dir(config, out_root, param.as_str());
    let data = shared_data(config, &dir)?;
    let cells = values
        .iter()
        .map(|&v| {
            let mut cfg = config.clone();
            param.apply(&mut cfg, v);
            (format!("{v}"), cfg)
        })
        .collect();
    run_cells(param.as_str(), cells, &dir, data.as_ref())
}

/// One run per variant.
pub fn ablate_variants(config: &ExperimentConfig, variants: &[Variant], out_root: &Path) -> Result<SweepTable> {
    let dir = sweep_dir(config, out_root, "variant");
    let data = shared_data(config, &dir)?;
    let cells = variants
        .iter()
        .map(|&v| {
            let mut cfg = config.clone();
            cfg.variant = v;
            (v.as_str().to_string(), cfg)
        })
        .collect();
    run_cells("variant", cells, &dir, data.as_ref())
}

/// Generates the dataset once for every cell of a sweep.
fn shared_data(config: &ExperimentConfig, dir: &Path) -> Result<Option<Dataset>> {
    match &config.data_root {
        Some(root) => Dataset::load(root).map(Some),
        None => Dataset::generate(config, &dir.join("data")).map(Some),
    }
}
