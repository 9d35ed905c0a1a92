use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use ovafuse_core::fusion::optimize_weights;
use ovafuse_core::fusion::FusionError;
use ovafuse_core::ingest::{
    clean_dataset, holdout_split, scan_dataset_with_workers, CleanMode, DatasetManifest, ImageRecord,
};
use ovafuse_core::report::emit_reports;
use ovafuse_core::synth::generate_corpus;
use ovafuse_core::{BackboneKind, ClassLabel, EnsembleSpec, LogitDump, Split};
use ovafuse_models::inference::{evaluate_ensemble, logits_all, logits_on, metrics_from_dump, split_records};
use ovafuse_models::{build_model_seeded, open_checkpoint, train, BackboneSpec, ImageSet, ModelHandle, Scale};

use crate::config::{echo, sidecar_name, RunConfig, RunRecord, RUN_CONFIG_FILE};
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLEAN_REPORT_FILE: &str = "clean_report.json";

/// Record subsets a logit dump can cover. `fit` and `holdout` partition `train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DumpSplit {
    Train,
    Fit,
    Holdout,
    Test,
}

fn record(command: &str, seed: Option<u64>, cfg: &RunConfig) -> RunRecord {
    RunRecord {
        command: command.to_string(),
        seed,
        config: cfg.clone(),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn summary(manifest: &DatasetManifest) -> String {
    let mut parts = Vec::new();
    for split in Split::ALL {
        for label in ClassLabel::ALL {
            parts.push(format!("{split}/{label}={}", manifest.count(split, label)));
        }
    }
    parts.push(format!("flagged={}", manifest.flagged_records().count()));
    parts.join(" ")
}

pub fn scan(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let root = cfg.root()?;
    let manifest = scan_dataset_with_workers(root, cfg.train.workers)?;
    let out = out.unwrap_or_else(|| root.join(MANIFEST_FILE));
    manifest.save(&out)?;
    echo(parent_dir(&out), &sidecar_name(&out), &record("scan", None, cfg))?;
    println!("{}", summary(&manifest));
    println!("manifest: {}", out.display());
    Ok(())
}

pub fn clean(cfg: &RunConfig, mode: CleanMode, out: Option<PathBuf>) -> Result<(), CliError> {
    let root = cfg.root()?;
    let mut manifest = scan_dataset_with_workers(root, cfg.train.workers)?;
    let report = clean_dataset(&mut manifest, mode)?;
    let out = out.unwrap_or_else(|| root.to_path_buf());
    write_json(&out.join(CLEAN_REPORT_FILE), &report)?;
    if mode != CleanMode::DryRun {
        manifest.save(&out.join(MANIFEST_FILE))?;
    }
    echo(&out, RUN_CONFIG_FILE, &record("clean", None, cfg))?;
    for entry in &report.entries {
        println!("{:?} {}", entry.reason, entry.path.display());
    }
    println!("flagged={} removed={} mode={mode:?}", report.entries.len(), report.removed);
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = generate_corpus(&cfg.synth, out)?;
    echo(out, RUN_CONFIG_FILE, &record("synth", Some(cfg.synth.seed), cfg))?;
    println!("{}", summary(&manifest));
    Ok(())
}

pub fn train_backbone(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.root()?;
    let kind = cfg
        .backbone
        .kind
        .ok_or_else(|| CliError::Config("no backbone: pass --backbone or set `backbone.kind`".into()))?;
    let spec = match cfg.backbone.scale {
        Scale::Tiny => BackboneSpec::tiny(kind),
        Scale::Paper => BackboneSpec::paper(kind, cfg.backbone.pretrained),
    };
    cfg.train.validate()?;
    let manifest = scan_dataset_with_workers(root, cfg.train.workers)?;
    let mut model = build_model_seeded(spec, cfg.train.seed)?;
    info!("{} parameters", model.parameter_count());
    echo(&cfg.train.checkpoint_dir, RUN_CONFIG_FILE, &record("train", Some(cfg.train.seed), cfg))?;
    let report = train(&mut model, &manifest, &cfg.train)?;
    for (epoch, loss) in report.per_epoch_loss.iter().enumerate() {
        println!("epoch {} loss {loss:.6}", epoch + 1);
    }
    println!("checkpoint: {}", report.final_checkpoint.display());
    Ok(())
}

fn records_for(cfg: &RunConfig, manifest: &DatasetManifest, split: DumpSplit) -> Vec<ImageRecord> {
    match split {
        DumpSplit::Train => split_records(manifest, Split::Train),
        DumpSplit::Test => split_records(manifest, Split::Test),
        DumpSplit::Fit | DumpSplit::Holdout => {
            let parts = holdout_split(manifest, cfg.train.holdout_fraction, cfg.train.holdout_seed);
            if split == DumpSplit::Fit {
                parts.fit
            } else {
                parts.holdout
            }
        }
    }
}

fn load_images(cfg: &RunConfig, split: DumpSplit) -> Result<ImageSet, CliError> {
    let manifest = scan_dataset_with_workers(cfg.root()?, cfg.train.workers)?;
    let records = records_for(cfg, &manifest, split);
    ImageSet::load(&manifest, &records, &cfg.train.preprocess, cfg.train.workers)
        .map_err(|e| CliError::Inference(e.into()))
}

fn open_eval(path: &Path) -> Result<ModelHandle, CliError> {
    let mut model = open_checkpoint(path)?;
    model.eval();
    Ok(model)
}

pub fn dump_logits(cfg: &RunConfig, checkpoint: &Path, split: DumpSplit, out: &Path) -> Result<(), CliError> {
    let model = open_eval(checkpoint)?;
    let data = load_images(cfg, split)?;
    let dump = logits_on(&model, &data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let file = fs::File::create(out).map_err(|e| CliError::io(out, e))?;
    dump.write_csv(file)?;
    echo(parent_dir(out), &sidecar_name(out), &record("dump-logits", None, cfg))?;
    println!("{} rows of {} -> {}", dump.rows.len(), dump.model_id, out.display());
    Ok(())
}

/// `ID=FILE` names the member explicitly; a bare `FILE` uses the file stem.
fn parse_logits_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((id, path)) if !id.is_empty() => (id.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or(arg).to_string();
            (id, path)
        }
    }
}

/// Reads the dumps and aligns them to the first dump's record order, taking labels
/// from the manifest.
fn load_dumps(args: &[String], manifest: &DatasetManifest) -> Result<(Vec<LogitDump>, Vec<ClassLabel>), CliError> {
    let labels_by_id: HashMap<String, ClassLabel> = manifest.records.iter().map(|r| (r.id(), r.label)).collect();
    let mut dumps = Vec::new();
    for arg in args {
        let (id, path) = parse_logits_arg(arg);
        let file = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
        dumps.push(LogitDump::read_csv(id, file)?);
    }
    let first = dumps.first().ok_or_else(|| CliError::Config("no logit files given".into()))?;
    let order: Vec<String> = first.rows.iter().map(|r| r.record_id.clone()).collect();
    let mut labels = Vec::with_capacity(order.len());
    for id in &order {
        let label = labels_by_id
            .get(id)
            .ok_or_else(|| FusionError::LabelMismatch(format!("record `{id}` is not in the manifest")))?;
        labels.push(*label);
    }
    let mut aligned = Vec::with_capacity(dumps.len());
    for dump in dumps {
        let mut by_id: HashMap<&str, _> = dump.rows.iter().map(|r| (r.record_id.as_str(), r)).collect();
        if by_id.len() != order.len() {
            return Err(FusionError::LabelMismatch(format!("`{}` covers a different record set", dump.model_id)).into());
        }
        let mut rows = Vec::with_capacity(order.len());
        for (id, label) in order.iter().zip(&labels) {
            let row = by_id
                .remove(id.as_str())
                .ok_or_else(|| FusionError::LabelMismatch(format!("`{}` has no row for `{id}`", dump.model_id)))?;
            if row.label != *label {
                return Err(FusionError::LabelMismatch(format!(
                    "`{}` labels `{id}` as {} but the manifest says {label}",
                    dump.model_id, row.label
                ))
                .into());
            }
            rows.push(row.clone());
        }
        aligned.push(LogitDump {
            model_id: dump.model_id.clone(),
            rows,
        });
    }
    Ok((aligned, labels))
}

pub fn optimize(cfg: &RunConfig, logits: &[String], labels_from: &Path, out: &Path) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(labels_from)?;
    let (dumps, labels) = load_dumps(logits, &manifest)?;
    let matrices: Vec<_> = dumps.iter().map(LogitDump::matrix).collect();
    let search = optimize_weights(&matrices, &labels, cfg.fusion.objective, cfg.fusion.step)?;
    let mut spec = EnsembleSpec::uniform(dumps.iter().map(|d| canonical_member(&d.model_id)).collect()).with_weights(search.weights)?;
    spec.mode = cfg.fusion.mode;
    write_json(out, &spec)?;
    echo(parent_dir(out), &sidecar_name(out), &record("optimize-weights", None, cfg))?;
    for (member, w) in spec.members.iter().zip(&spec.weights) {
        println!("{member} {w:.4}");
    }
    println!(
        "{:?} {:.6} over {} lattice points -> {}",
        cfg.fusion.objective,
        search.objective,
        search.evaluated,
        out.display()
    );
    Ok(())
}

/// Backbone aliases such as `swin` name the model of that kind; other ids pass through.
fn canonical_member(id: &str) -> String {
    id.parse::<BackboneKind>()
        .map(|k| k.as_str().to_string())
        .unwrap_or_else(|_| id.to_string())
}

pub fn evaluate(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    ensemble: Option<&Path>,
    split: DumpSplit,
    out: &Path,
) -> Result<(), CliError> {
    let (spec, ensemble_id) = match (ensemble, cfg.fusion.preset.as_deref()) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("ensemble");
            (Some(EnsembleSpec::from_json(&text)?), stem.to_string())
        }
        (None, Some(name)) => {
            let spec = EnsembleSpec::preset(name)
                .ok_or_else(|| CliError::Config(format!("unknown preset `{name}`; expected denconst or denconrest")))?;
            (Some(spec), name.to_ascii_lowercase())
        }
        (None, None) => (None, String::new()),
    };
    let spec = spec.map(|mut spec| {
        for m in &mut spec.members {
            *m = canonical_member(m);
        }
        spec
    });
    if let Some(spec) = &spec {
        spec.validate()?;
    }
    if checkpoints.is_empty() {
        return Err(CliError::Config("no checkpoints given".into()));
    }
    let models = checkpoints.iter().map(|p| open_eval(p)).collect::<Result<Vec<_>, _>>()?;
    let data = load_images(cfg, split)?;
    let refs: Vec<&ModelHandle> = models.iter().collect();
    let reports = match &spec {
        Some(spec) => evaluate_ensemble(spec, &refs, &data, &ensemble_id)?,
        None => logits_all(&refs, &data)?
            .iter()
            .map(metrics_from_dump)
            .collect::<Result<Vec<_>, _>>()?,
    };
    let files = emit_reports(&reports, out)?;
    echo(out, RUN_CONFIG_FILE, &record("evaluate", None, cfg))?;
    for r in &reports {
        println!(
            "{:<32} acc {:.4} prec {:.4} rec {:.4} f1 {:.4}",
            r.model_id, r.accuracy, r.precision, r.recall, r.f1
        );
    }
    println!("wrote {}, {}, {}", files.json.display(), files.csv.display(), files.heatmap.display());
    Ok(())
}
