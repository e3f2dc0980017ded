//! Command implementations behind the `facepipe` binary.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/normalized/<id>_norm.png, <id>_norm_top.png, <id>_norm_bottom.png
//! <out>/manifest_normalized.csv      (run-all: records that normalized cleanly)
//! <out>/folds.json
//! <out>/models/model_<condition>.fpmd, history_<condition>.csv
//! <out>/reports/report_<condition>.{json,csv,svg}, predictions_<condition>.csv,
//!               cv_history_<condition>.csv
//! <out>/summary.csv, summary.txt, summary.svg
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    class_counts, filter_single_label, parse_manifest, stratified_kfold, EmotionLabel, FoldPlan,
    Manifest, SampleRecord,
};
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;
use crate::metrics::{build_report, confusion, render_table_text, write_table_csv, MetricsReport};
use crate::pipeline::{normalize_face, Condition, MaskMode, NormalizeConfig};
use crate::report::{write_svg, ChartSpec};
use crate::trainer::{run_cv, train_full, ClassWeighting, DirImageSource, TrainConfig};

pub const THREADS_ENV: &str = "FACEPIPE_THREADS";

/// Settings that may come from a JSON config file; command-line flags take
/// precedence over file values, file values over defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub condition: Option<Condition>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub zoom: Option<f64>,
    pub size: Option<u32>,
    pub bs: Option<usize>,
    pub epochs_a: Option<usize>,
    pub epochs_b: Option<usize>,
    pub rho: Option<f64>,
    pub lr: Option<f64>,
    pub weighting: Option<ClassWeighting>,
    pub patience: Option<usize>,
    pub input_edge: Option<u32>,
    pub hidden: Option<Vec<usize>>,
    pub val_fraction: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `self` with every value set in `flags` replaced.
    pub fn overridden_by(self, flags: ConfigFile) -> ConfigFile {
        macro_rules! pick {
            ($($f:ident),*) => { ConfigFile { $($f: flags.$f.or(self.$f)),* } };
        }
        pick!(
            manifest,
            images,
            out,
            condition,
            k,
            seed,
            zoom,
            size,
            bs,
            epochs_a,
            epochs_b,
            rho,
            lr,
            weighting,
            patience,
            input_edge,
            hidden,
            val_fraction
        )
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub out: PathBuf,
    pub condition: Condition,
    pub k: usize,
    pub seed: u64,
    pub normalize: NormalizeConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn resolve(cfg: ConfigFile) -> Result<Self> {
        let defaults = TrainConfig::default();
        let seed = cfg.seed.unwrap_or(0);
        let normalize = NormalizeConfig {
            zoom_factor: cfg.zoom.unwrap_or(1.10),
            output_size: cfg.size.unwrap_or(64),
            mask_mode: MaskMode::None,
        };
        normalize.validate()?;
        let train = TrainConfig {
            batch_size: cfg.bs.unwrap_or(defaults.batch_size),
            stage_a_epochs: cfg.epochs_a.unwrap_or(defaults.stage_a_epochs),
            stage_b_epochs: cfg.epochs_b.unwrap_or(defaults.stage_b_epochs),
            learning_rate: cfg.lr.unwrap_or(defaults.learning_rate),
            sam_rho: cfg.rho.unwrap_or(defaults.sam_rho),
            class_weighting: cfg.weighting.unwrap_or(defaults.class_weighting),
            early_stop_patience: cfg.patience.unwrap_or(defaults.early_stop_patience),
            seed,
            input_edge: cfg.input_edge.unwrap_or(normalize.output_size),
            hidden_widths: cfg.hidden.unwrap_or(defaults.hidden_widths),
            val_fraction: cfg.val_fraction.unwrap_or(defaults.val_fraction),
            ..defaults
        };
        train.validate()?;
        let k = cfg.k.unwrap_or(5);
        if k < 2 {
            return Err(Error::InvalidConfig(format!(
                "k must be at least 2, got {k}"
            )));
        }
        Ok(Self {
            manifest: cfg.manifest,
            images: cfg.images,
            out: cfg.out.unwrap_or_else(|| PathBuf::from("out")),
            condition: cfg.condition.unwrap_or(Condition::Full),
            k,
            seed,
            normalize,
            train,
        })
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--manifest is required".into()))
    }

    pub fn images_dir(&self) -> Result<&Path> {
        self.images
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--images is required".into()))
    }

    pub fn normalized_dir(&self) -> PathBuf {
        self.out.join("normalized")
    }

    pub fn folds_path(&self) -> PathBuf {
        self.out.join("folds.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs `f` on a pool capped by `FACEPIPE_THREADS` when set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV)
        .ok()
        .filter(|v| !v.trim().is_empty())
    {
        None => Ok(f()),
        Some(v) => {
            let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer"))
            })?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Loads the manifest and keeps single-label records of the eight classes.
pub fn load_filtered(path: &Path) -> Result<Manifest> {
    let raw = parse_manifest(path)?;
    Ok(filter_single_label(
        &raw,
        &EmotionLabel::ekman_with_neutral(),
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizeSummary {
    pub processed: Vec<String>,
    /// `(id, reason)` of samples that could not be normalized.
    pub failed: Vec<(String, String)>,
}

impl NormalizeSummary {
    pub fn line(&self) -> String {
        format!(
            "normalize: {} processed, {} failed",
            self.processed.len(),
            self.failed.len()
        )
    }
}

enum SampleOutcome {
    Done(String, [ImageBuffer; 3]),
    Failed(String, String),
}

fn normalize_record(record: &SampleRecord, images: &Path, cfg: &NormalizeConfig) -> SampleOutcome {
    let fail = |msg: String| SampleOutcome::Failed(record.id.clone(), msg);
    let (Some(b), Some(lm)) = (record.bbox, record.landmarks) else {
        return fail("missing landmarks or face box".into());
    };
    let img = match ImageBuffer::load_png(images.join(&record.image_path)) {
        Ok(img) => img,
        Err(e) => return fail(e.to_string()),
    };
    match normalize_face(&img, &b, &lm, cfg) {
        Ok(sample) => {
            let variants = Condition::ALL.map(|c| c.apply(&sample.image));
            SampleOutcome::Done(record.id.clone(), variants)
        }
        Err(e) => fail(e.to_string()),
    }
}

/// Normalizes every record of the manifest and writes the full, top, and
/// bottom variants. Per-sample failures are collected, not fatal; write
/// failures are.
pub fn cmd_normalize(cfg: &RunConfig) -> Result<NormalizeSummary> {
    let manifest = parse_manifest(cfg.manifest_path()?)?;
    let images = cfg.images_dir()?.to_path_buf();
    let out = cfg.normalized_dir();
    create_dir(&out)?;
    let norm_cfg = NormalizeConfig {
        mask_mode: MaskMode::None,
        ..cfg.normalize.clone()
    };
    let outcomes: Vec<SampleOutcome> = with_thread_cap(|| {
        manifest
            .records()
            .par_iter()
            .map(|r| normalize_record(r, &images, &norm_cfg))
            .collect()
    })?;
    let mut summary = NormalizeSummary::default();
    for outcome in outcomes {
        match outcome {
            SampleOutcome::Done(id, variants) => {
                for (cond, img) in Condition::ALL.iter().zip(&variants) {
                    img.save_png(out.join(cond.file_name(&id)))?;
                }
                summary.processed.push(id);
            }
            SampleOutcome::Failed(id, reason) => {
                eprintln!("normalize: {id}: {reason}");
                summary.failed.push((id, reason));
            }
        }
    }
    eprintln!("{}", summary.line());
    Ok(summary)
}

pub fn cmd_split(cfg: &RunConfig) -> Result<FoldPlan> {
    let manifest = load_filtered(cfg.manifest_path()?)?;
    let plan = stratified_kfold(&manifest, cfg.k, cfg.seed)?;
    create_dir(&cfg.out)?;
    plan.save(cfg.folds_path())?;
    eprintln!(
        "split: {} records into {} folds (seed {})",
        plan.assignment.len(),
        plan.k,
        plan.seed
    );
    Ok(plan)
}

fn load_plan_for(cfg: &RunConfig, manifest: &Manifest) -> Result<FoldPlan> {
    let path = cfg.folds_path();
    if !path.is_file() {
        return Err(Error::InvalidConfig(format!(
            "fold plan {} not found; run `split` first",
            path.display()
        )));
    }
    let plan = FoldPlan::load(&path)?;
    if let Some(r) = manifest
        .records()
        .iter()
        .find(|r| plan.fold_of(&r.id).is_none())
    {
        return Err(Error::InvalidConfig(format!(
            "record {:?} is not in {}",
            r.id,
            path.display()
        )));
    }
    Ok(plan)
}

/// Fails before training if any normalized image is missing.
fn check_images(manifest: &Manifest, dir: &Path, condition: Condition) -> Result<()> {
    for r in manifest.records() {
        let path = dir.join(condition.file_name(&r.id));
        if !path.is_file() {
            return Err(Error::MissingImage {
                id: r.id.clone(),
                path,
            });
        }
    }
    Ok(())
}

/// Cross-validated training and evaluation of one condition. Writes the
/// JSON/CSV report, per-sample predictions, fold histories and an SVG chart.
pub fn cmd_train_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let manifest = load_filtered(cfg.manifest_path()?)?;
    let plan = load_plan_for(cfg, &manifest)?;
    let norm_dir = cfg.normalized_dir();
    check_images(&manifest, &norm_dir, cfg.condition)?;

    let source = DirImageSource { dir: norm_dir };
    let outcome = run_cv(&manifest, &plan, &cfg.train, cfg.condition, &source)?;
    let cm = confusion(&outcome.pairs, &outcome.classes)?;
    let report = build_report(&cm)?;

    let dir = cfg.reports_dir();
    create_dir(&dir)?;
    let name = cfg.condition.name();
    report.save_json(dir.join(format!("report_{name}.json")))?;
    report.save_csv(name, dir.join(format!("report_{name}.csv")))?;
    write_svg(
        &ChartSpec::from_reports(
            &format!("Per-class sensitivity ({name})"),
            &[(name.to_string(), report.clone())],
        ),
        dir.join(format!("report_{name}.svg")),
    )?;

    let mut preds = String::from("id,predicted,true\n");
    for (id, (p, t)) in outcome.ids.iter().zip(&outcome.pairs) {
        preds.push_str(&format!("{id},{p},{t}\n"));
    }
    let p = dir.join(format!("predictions_{name}.csv"));
    std::fs::write(&p, preds).map_err(|e| Error::io(&p, e))?;

    let mut hist = String::from("fold,");
    hist.push_str("stage,epoch,train_loss,val_loss,val_accuracy\n");
    for (fold, h) in outcome.histories.iter().enumerate() {
        for line in h.to_csv().lines().skip(1) {
            hist.push_str(&format!("{fold},{line}\n"));
        }
    }
    let p = dir.join(format!("cv_history_{name}.csv"));
    std::fs::write(&p, hist).map_err(|e| Error::io(&p, e))?;

    eprintln!(
        "eval[{name}]: accuracy {:.3}, mean sensitivity {:.3}",
        report.accuracy, report.mean_sensitivity
    );
    Ok(report)
}

/// Trains one model on the whole filtered manifest.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let manifest = load_filtered(cfg.manifest_path()?)?;
    let norm_dir = cfg.normalized_dir();
    check_images(&manifest, &norm_dir, cfg.condition)?;
    let (params, history) = train_full(
        &manifest,
        &cfg.train,
        cfg.condition,
        &DirImageSource { dir: norm_dir },
    )?;
    let dir = cfg.models_dir();
    create_dir(&dir)?;
    let name = cfg.condition.name();
    let model_path = dir.join(format!("model_{name}.fpmd"));
    params.save(&model_path)?;
    let p = dir.join(format!("history_{name}.csv"));
    std::fs::write(&p, history.to_csv()).map_err(|e| Error::io(&p, e))?;
    eprintln!(
        "train[{name}]: {} epochs, model at {}",
        history.epochs.len(),
        model_path.display()
    );
    Ok(model_path)
}

/// Run name of a report file: the file stem without a `report_` prefix.
pub fn run_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.strip_prefix("report_")
        .map(str::to_string)
        .unwrap_or(stem)
}

/// Merges JSON reports into one table (CSV + aligned text) and a chart.
pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::EmptyInput("report list"));
    }
    let rows = paths
        .iter()
        .map(|p| Ok((run_name(p), MetricsReport::load_json(p)?)))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    write_table_csv(&rows, out.join("summary.csv"))?;
    let text = render_table_text(&rows);
    let p = out.join("summary.txt");
    std::fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    write_svg(
        &ChartSpec::from_reports("Per-class sensitivity by condition", &rows),
        out.join("summary.svg"),
    )?;
    Ok(text)
}

#[derive(Debug, Clone)]
pub struct RunAllSummary {
    pub normalize: NormalizeSummary,
    pub reports: Vec<(Condition, MetricsReport)>,
    pub table: String,
}

/// normalize, split, train-eval for full/top/bottom, report.
pub fn cmd_run_all(cfg: &RunConfig) -> Result<RunAllSummary> {
    let normalize = cmd_normalize(cfg)?;
    let raw = parse_manifest(cfg.manifest_path()?)?;
    let ok: BTreeSet<&str> = normalize.processed.iter().map(String::as_str).collect();
    let kept: Vec<SampleRecord> = raw
        .records()
        .iter()
        .filter(|r| ok.contains(r.id.as_str()))
        .cloned()
        .collect();
    let kept = Manifest::new(kept, raw.label_universe().clone())?;
    let manifest_path = cfg.out.join("manifest_normalized.csv");
    kept.write_csv(&manifest_path)?;

    let cfg = RunConfig {
        manifest: Some(manifest_path),
        ..cfg.clone()
    };
    cmd_split(&cfg)?;
    let filtered = load_filtered(cfg.manifest_path()?)?;
    for (label, n) in class_counts(&filtered) {
        eprintln!("run-all: {label}: {n}");
    }
    let mut reports = Vec::new();
    let mut paths = Vec::new();
    for condition in Condition::ALL {
        let c = RunConfig {
            condition,
            ..cfg.clone()
        };
        reports.push((condition, cmd_train_eval(&c)?));
        paths.push(
            c.reports_dir()
                .join(format!("report_{}.json", condition.name())),
        );
    }
    let table = cmd_report(&paths, &cfg.out)?;
    Ok(RunAllSummary {
        normalize,
        reports,
        table,
    })
}

/// Masks one PNG or every PNG in a directory, writing `<stem>_top.png` and/or
/// `<stem>_bottom.png` into `out`.
pub fn cmd_mask(input: &Path, out: &Path, halves: &[Condition]) -> Result<usize> {
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    create_dir(out)?;
    for f in &files {
        let img = ImageBuffer::load_png(f)?;
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for &c in halves {
            c.apply(&img)
                .save_png(out.join(format!("{stem}_{}.png", c.name())))?;
        }
    }
    Ok(files.len())
}
