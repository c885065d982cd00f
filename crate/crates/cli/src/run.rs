//! Subcommand implementations. Every command writes into one fresh run
//! directory under the output root.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use cbamnet::backbone::{Model, ModelSpec, PlacementSet};
use cbamnet::baselines::compare_to_baselines;
use cbamnet::checkpoint::{restore, Checkpoint};
use cbamnet::data::imaging::{load_tensor_set, tensor_set};
use cbamnet::data::synth::synth_generate;
use cbamnet::data::{load_manifest_with, patient_split, TensorSet, CANONICAL_CLASSES};
use cbamnet::losses::LossKind;
use cbamnet::metrics::{evaluate, EvalReport};
use cbamnet::report::{heatmap, report_csv, roc_svg, slug, SummaryTable, AUC_DIGITS};
use cbamnet::tensor::ops::NormMode;
use cbamnet::tensor::Element;
use cbamnet::train::{predict, run_plan, EpochRecord, Precision, RunHistory, Strategy, TrainingPlan};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, DatasetSource, LoadedConfig};
use crate::CliError;

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const REPORT_NAME: &str = "report.csv";
pub const HISTORY_NAME: &str = "history.jsonl";
pub const RUN_META_NAME: &str = "run.json";
pub const PLACEMENT_SUMMARY: &str = "placement_summary";
pub const STRATEGY_MATRIX: &str = "strategy_matrix";

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Options {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub workers: usize,
    pub quiet: bool,
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn mkdir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Loads, applies the seed override and validates.
pub fn load_config(opts: &Options) -> CliResult<(LoadedConfig, ModelSpec)> {
    let mut loaded = LoadedConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        loaded.config.seed = seed;
    }
    loaded.config.training.seed = loaded.config.seed;
    let spec = loaded.config.validate(&loaded)?;
    Ok((loaded, spec))
}

/// `<root>/<command>-<digest prefix>-<UTC timestamp>`, suffixed when taken.
pub fn create_run_dir(root: &Path, command: &str, digest: &str) -> CliResult<PathBuf> {
    mkdir(root)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{command}-{}-{stamp}", &digest[..12]);
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let path = root.join(name);
        match std::fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&path, e)),
        }
    }
    unreachable!()
}

fn start_run(opts: &Options, loaded: &LoadedConfig, command: &str) -> CliResult<PathBuf> {
    let dir = create_run_dir(&opts.out, command, &loaded.run_digest())?;
    write(&dir.join("config.toml"), &loaded.source)?;
    Ok(dir)
}

/// Preprocessed splits, resized to the model input.
pub struct Splits {
    pub class_names: Vec<String>,
    pub train: TensorSet,
    pub val: TensorSet,
    pub test: TensorSet,
}

pub fn load_splits(loaded: &LoadedConfig, spec: &ModelSpec) -> CliResult<Splits> {
    let cfg = &loaded.config;
    let size = spec.input.height;
    let class_names = cfg.class_names();
    let sets = match cfg.dataset.source()? {
        DatasetSource::Synthetic(synth) => {
            let data = synth_generate(synth, cfg.seed)?;
            let split = patient_split(&data.manifest, cfg.split, cfg.seed)?;
            let index: HashMap<&str, usize> = data
                .manifest
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| (r.sample_id.as_str(), i))
                .collect();
            let build = |m: &cbamnet::data::DatasetManifest| {
                let images: Vec<_> = m.records.iter().map(|r| data.images[index[r.sample_id.as_str()]].clone()).collect();
                tensor_set(m, &images, size)
            };
            [build(&split.train)?, build(&split.val)?, build(&split.test)?]
        }
        DatasetSource::Manifest(source) => {
            let names: Vec<&str> = class_names.iter().map(String::as_str).collect();
            let m = load_manifest_with(&loaded.resolve(&source.path), &names)?;
            let split = patient_split(&m, cfg.split, cfg.seed)?;
            let root = loaded.resolve(&source.image_root);
            [
                load_tensor_set(&split.train, &root, size)?,
                load_tensor_set(&split.val, &root, size)?,
                load_tensor_set(&split.test, &root, size)?,
            ]
        }
    };
    let [train, val, test] = sets;
    Ok(Splits {
        class_names,
        train,
        val,
        test,
    })
}

fn log_epoch(prefix: &str, quiet: bool) -> impl FnMut(&EpochRecord) + '_ {
    move |r: &EpochRecord| {
        if quiet {
            return;
        }
        let val = r.val_mean_auc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        eprintln!(
            "{prefix}stage {} epoch {}: loss {:.5} val mean AUC {val} ({:.1}s)",
            r.stage, r.epoch, r.loss, r.seconds
        );
    }
}

/// Result of training and evaluating one model.
pub struct CellOutcome {
    pub report: EvalReport,
    pub history: RunHistory,
    pub checkpoint: Vec<u8>,
}

fn train_cell<T: Element>(
    spec: &ModelSpec,
    splits: &Splits,
    plan: &TrainingPlan,
    loaded: &LoadedConfig,
    prefix: &str,
    quiet: bool,
) -> CliResult<CellOutcome> {
    let cfg = &loaded.config;
    let model = Model::<T>::new(spec, cfg.seed)?;
    let val = cfg.evaluation.validate_each_epoch.then_some(&splits.val);
    let history = run_plan(&model, &splits.train, val, plan, &mut log_epoch(prefix, quiet))?;
    let scores = predict(&model, &splits.test, cfg.evaluation.batch_size, &splits.class_names)?;
    let report = evaluate(&scores)?;
    let checkpoint = Checkpoint::from_model(&model).encode();
    Ok(CellOutcome {
        report,
        history,
        checkpoint,
    })
}

fn run_cell(
    spec: &ModelSpec,
    splits: &Splits,
    plan: &TrainingPlan,
    loaded: &LoadedConfig,
    prefix: &str,
    quiet: bool,
) -> CliResult<CellOutcome> {
    match plan.precision {
        Precision::F32 => train_cell::<f32>(spec, splits, plan, loaded, prefix, quiet),
        Precision::F64 => train_cell::<f64>(spec, splits, plan, loaded, prefix, quiet),
    }
}

fn is_canonical(names: &[String]) -> bool {
    names.len() == CANONICAL_CLASSES.len() && names.iter().all(|n| CANONICAL_CLASSES.contains(&n.as_str()))
}

/// Writes `report.csv` (with baseline deltas for the canonical classes)
/// and optionally one ROC SVG per non-degenerate class.
pub fn write_report(dir: &Path, report: &EvalReport, svgs: bool) -> CliResult<()> {
    let names: Vec<String> = report.classes.iter().map(|c| c.name.clone()).collect();
    let deltas = if is_canonical(&names) {
        Some(compare_to_baselines(report)?)
    } else {
        None
    };
    write(&dir.join(REPORT_NAME), report_csv(report, deltas.as_ref())?)?;
    if svgs {
        let roc_dir = dir.join("roc");
        mkdir(&roc_dir)?;
        for c in &report.classes {
            if let Some(svg) = roc_svg(c) {
                write(&roc_dir.join(format!("{}.svg", slug(&c.name))), svg)?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    config_digest: &'a str,
    seed: u64,
    model_spec_digest: String,
    placement: String,
    parameter_digest: Option<String>,
    mean_auc: Option<f64>,
    degenerate_classes: Option<usize>,
}

fn write_meta(dir: &Path, meta: &RunMeta) -> CliResult<()> {
    let json = serde_json::to_string_pretty(meta).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&dir.join(RUN_META_NAME), json + "\n")
}

fn pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn finish(dir: &Path) {
    println!("{}", dir.display());
}

pub fn cmd_train(opts: &Options) -> CliResult<PathBuf> {
    let (loaded, spec) = load_config(opts)?;
    let dir = start_run(opts, &loaded, "train")?;
    let splits = load_splits(&loaded, &spec)?;
    let outcome = run_cell(&spec, &splits, &loaded.config.training, &loaded, "", opts.quiet)?;
    write(&dir.join(CHECKPOINT_NAME), &outcome.checkpoint)?;
    outcome
        .history
        .write_jsonl(&dir.join(HISTORY_NAME))
        .map_err(CliError::from)?;
    write_report(&dir, &outcome.report, loaded.config.evaluation.roc_svg)?;
    write_meta(
        &dir,
        &RunMeta {
            command: "train",
            config_digest: &loaded.digest,
            seed: loaded.config.seed,
            model_spec_digest: spec.digest(),
            placement: spec.placement.to_string(),
            parameter_digest: outcome.history.stages.last().map(|s| s.end_digest.clone()),
            mean_auc: Some(outcome.report.mean_auc),
            degenerate_classes: Some(outcome.report.degenerate),
        },
    )?;
    if !opts.quiet {
        eprintln!("test mean AUC {:.4}", outcome.report.mean_auc);
    }
    finish(&dir);
    Ok(dir)
}

fn placements_for(loaded: &LoadedConfig, spec: &ModelSpec, overrides: &[PlacementSet], fallback: Vec<PlacementSet>) -> CliResult<Vec<PlacementSet>> {
    let list = if !overrides.is_empty() {
        overrides.to_vec()
    } else if let Some(p) = &loaded.config.ablation.placements {
        p.clone()
    } else {
        fallback
    };
    let blocks = spec.backbone.num_blocks();
    for p in &list {
        p.validate(blocks).map_err(|e| ConfigError::new("--placement", e))?;
    }
    Ok(list)
}

fn backbone_label(loaded: &LoadedConfig, spec: &ModelSpec) -> String {
    match &loaded.config.model.preset {
        Some(name) => name.split("-s").next().unwrap_or(name).trim_end_matches("-plain").to_string(),
        None => spec.backbone.family().to_string(),
    }
}

fn fmt_mean(v: f64) -> String {
    format!("{v:.AUC_DIGITS$}")
}

fn write_table(dir: &Path, stem: &str, table: &SummaryTable) -> CliResult<()> {
    write(&dir.join(format!("{stem}.csv")), table.to_csv()?)?;
    write(&dir.join(format!("{stem}.txt")), table.to_text())
}

fn write_cell(dir: &Path, name: &str, outcome: &CellOutcome, svgs: bool) -> CliResult<()> {
    let cell_dir = dir.join("cells").join(name);
    mkdir(&cell_dir)?;
    write_report(&cell_dir, &outcome.report, svgs)?;
    outcome
        .history
        .write_jsonl(&cell_dir.join(HISTORY_NAME))
        .map_err(CliError::from)
}

pub fn cmd_ablate_placement(opts: &Options, overrides: &[PlacementSet]) -> CliResult<PathBuf> {
    let (loaded, spec) = load_config(opts)?;
    let family = spec.backbone.family();
    let placements = placements_for(&loaded, &spec, overrides, cbamnet::backbone::placement_options(family))?;
    let dir = start_run(opts, &loaded, "ablate-placement")?;
    let splits = load_splits(&loaded, &spec)?;
    let plan = &loaded.config.training;
    let outcomes: Vec<CliResult<CellOutcome>> = pool(opts.workers)?.install(|| {
        placements
            .par_iter()
            .map(|p| {
                let cell = ModelSpec {
                    placement: p.clone(),
                    ..spec.clone()
                };
                run_cell(&cell, &splits, plan, &loaded, &format!("[{p}] "), opts.quiet)
            })
            .collect()
    });
    let mut rows = Vec::new();
    for (p, outcome) in placements.iter().zip(outcomes) {
        let outcome = outcome?;
        write_cell(&dir, &format!("placement-{}", p.label().replace(',', "")), &outcome, false)?;
        rows.push((p.clone(), outcome.report.mean_auc));
    }
    // Highest mean AUC first; ties keep the requested order.
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    let label = backbone_label(&loaded, &spec);
    let mut table = SummaryTable::new(&["backbone", "placement", "mean_auc"]);
    for (p, auc) in &rows {
        table.push(vec![label.clone(), p.to_string(), fmt_mean(*auc)]);
    }
    write_table(&dir, PLACEMENT_SUMMARY, &table)?;
    if !opts.quiet {
        eprint!("{}", table.to_text());
    }
    finish(&dir);
    Ok(dir)
}

pub fn cmd_ablate_strategy(opts: &Options, overrides: &[PlacementSet]) -> CliResult<PathBuf> {
    let (loaded, spec) = load_config(opts)?;
    let strategy = loaded
        .config
        .ablation
        .strategy
        .clone()
        .ok_or_else(|| ConfigError::new("ablation.strategy", "required by ablate-strategy"))?;
    let placements = placements_for(&loaded, &spec, overrides, vec![spec.placement.clone()])?;
    let dir = start_run(opts, &loaded, "ablate-strategy")?;
    let splits = load_splits(&loaded, &spec)?;
    let cfg = &loaded.config;
    let template = cfg.training.stages[0];
    let focal = LossKind::Focal {
        alpha: strategy.focal.alpha,
        gamma: strategy.focal.gamma,
    };
    let cells: Vec<(PlacementSet, Strategy)> = placements
        .iter()
        .flat_map(|p| Strategy::ALL.iter().map(move |s| (p.clone(), *s)))
        .collect();
    let outcomes: Vec<CliResult<CellOutcome>> = pool(opts.workers)?.install(|| {
        cells
            .par_iter()
            .map(|(p, s)| {
                let cell = ModelSpec {
                    placement: p.clone(),
                    ..spec.clone()
                };
                let plan = TrainingPlan {
                    precision: cfg.training.precision,
                    ..s.plan(template, strategy.epochs, focal, cfg.seed)
                };
                run_cell(&cell, &splits, &plan, &loaded, &format!("[{p} {}] ", s.header()), opts.quiet)
            })
            .collect()
    });
    let mut headers = vec!["backbone", "placement"];
    headers.extend(Strategy::ALL.iter().map(|s| s.header()));
    let mut table = SummaryTable::new(&headers);
    let label = backbone_label(&loaded, &spec);
    let mut outcomes = outcomes.into_iter();
    for p in &placements {
        let mut row = vec![label.clone(), p.to_string()];
        for s in Strategy::ALL {
            let outcome = outcomes.next().expect("one outcome per cell")?;
            let name = format!("placement-{}-{}", p.label().replace(',', ""), slug(s.header()));
            write_cell(&dir, &name, &outcome, false)?;
            row.push(fmt_mean(outcome.report.mean_auc));
        }
        table.push(row);
    }
    write_table(&dir, STRATEGY_MATRIX, &table)?;
    if !opts.quiet {
        eprint!("{}", table.to_text());
    }
    finish(&dir);
    Ok(dir)
}

fn report_with<T: Element>(loaded: &LoadedConfig, spec: &ModelSpec, checkpoint: &Path, dir: &Path) -> CliResult<EvalReport> {
    let model = restore::<T>(checkpoint, spec)?;
    let splits = load_splits(loaded, spec)?;
    let cfg = &loaded.config;
    let scores = predict(&model, &splits.test, cfg.evaluation.batch_size, &splits.class_names)?;
    let report = evaluate(&scores)?;
    write_report(dir, &report, cfg.evaluation.roc_svg)?;

    let n = cfg.evaluation.attention_samples.min(splits.test.len());
    if n > 0 && !spec.placement.is_empty() {
        let attn_dir = dir.join("attention");
        mkdir(&attn_dir)?;
        let indices: Vec<usize> = (0..n).collect();
        let (x, _) = splits.test.batch::<T>(&indices, None);
        model.set_mode(NormMode::Eval);
        let (_, maps) = model.classify_with_maps(&x)?;
        for (k, m) in maps {
            let channel = m.channel.to_f64_vec();
            let spatial = m.spatial.to_f64_vec();
            let (c, h, w) = (m.channel.shape()[1], m.spatial.shape()[2], m.spatial.shape()[3]);
            for i in 0..n {
                let ch = heatmap(&channel[i * c..(i + 1) * c], 1, c);
                let sp = heatmap(&spatial[i * h * w..(i + 1) * h * w], h, w);
                for (kind, img) in [("channel", ch), ("spatial", sp)] {
                    let path = attn_dir.join(format!("sample{i}_block{k}_{kind}.png"));
                    cbamnet::data::imaging::save_png(&img, &path)?;
                }
            }
        }
    }
    Ok(report)
}

pub fn cmd_report(opts: &Options, checkpoint: &Path) -> CliResult<PathBuf> {
    let (loaded, spec) = load_config(opts)?;
    if !checkpoint.is_file() {
        return Err(ConfigError::new("--checkpoint", format!("{} is not a file", checkpoint.display())).into());
    }
    // Fail on a mismatched checkpoint before creating any output.
    match loaded.config.training.precision {
        Precision::F32 => restore::<f32>(checkpoint, &spec).map(drop)?,
        Precision::F64 => restore::<f64>(checkpoint, &spec).map(drop)?,
    }
    let dir = start_run(opts, &loaded, "report")?;
    let report = match loaded.config.training.precision {
        Precision::F32 => report_with::<f32>(&loaded, &spec, checkpoint, &dir)?,
        Precision::F64 => report_with::<f64>(&loaded, &spec, checkpoint, &dir)?,
    };
    write_meta(
        &dir,
        &RunMeta {
            command: "report",
            config_digest: &loaded.digest,
            seed: loaded.config.seed,
            model_spec_digest: spec.digest(),
            placement: spec.placement.to_string(),
            parameter_digest: None,
            mean_auc: Some(report.mean_auc),
            degenerate_classes: Some(report.degenerate),
        },
    )?;
    finish(&dir);
    Ok(dir)
}

pub fn cmd_synth_data(opts: &Options) -> CliResult<PathBuf> {
    let (loaded, _) = load_config(opts)?;
    let DatasetSource::Synthetic(spec) = loaded.config.dataset.source()? else {
        return Err(ConfigError::new("dataset.synthetic", "synth-data needs a synthetic dataset").into());
    };
    let data = synth_generate(spec, loaded.config.seed)?;
    let dir = start_run(opts, &loaded, "synth-data")?;
    data.export(&dir)?;
    if !opts.quiet {
        eprintln!("{} samples, classes {}", data.manifest.len(), spec.class_names().join(", "));
    }
    finish(&dir);
    Ok(dir)
}
