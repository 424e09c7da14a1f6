//! Command implementations behind the `mm3d` binary: dataset generation,
//! training, evaluation, weight transfer, manifest checks, and
//! data/annotation-fraction sweeps.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::baselines::{evaluate_cases, AggregationConfig};
use crate::config::ExperimentConfig;
use crate::detector::{
    load_checkpoint, save_checkpoint, transfer_weights, Fusion, Mode, Model, TransferReport,
};
use crate::error::{MmError, Result};
use crate::metrics::EvalReport;
use crate::phantom::{
    dataset_fingerprint, generate_dataset, read_dataset, write_dataset, Dataset, Label, Split,
};
use crate::tensor::Rng;
use crate::training::{self, TrainDataMode, TrainOutcome};

const DATA_FRACTION_SALT: u64 = 0xDA7A_F4AC_0000_0001;
const ANNOTATION_SALT: u64 = 0x0A77_07A7_0000_0002;

/// Worker cap for sweep cells, from MM3D_THREADS (default 1).
pub fn worker_threads() -> usize {
    std::env::var("MM3D_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Deterministically keep a fraction of the train split, stratified by
/// label. The kept set depends only on the dataset and the fraction (nested
/// across fractions), never on the method under test.
pub fn apply_data_fraction(dataset: &mut Dataset, fraction: f64) {
    if fraction >= 1.0 {
        return;
    }
    let mut keep: Vec<bool> = dataset.cases.iter().map(|c| c.split != Split::Train).collect();
    for label in [Label::Malignant, Label::Benign, Label::Negative] {
        let mut idx: Vec<usize> = dataset
            .cases
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == Split::Train && c.label == label)
            .map(|(i, _)| i)
            .collect();
        let mut rng = Rng::new(DATA_FRACTION_SALT ^ idx.len() as u64);
        rng.shuffle(&mut idx);
        let kept = ((fraction * idx.len() as f64).round() as usize).max(1).min(idx.len());
        for &i in idx.iter().take(kept) {
            keep[i] = true;
        }
    }
    let mut cases = Vec::new();
    for (i, case) in dataset.cases.drain(..).enumerate() {
        if keep[i] {
            cases.push(case);
        }
    }
    dataset.cases = cases;
}

/// Deterministically keep annotations on a fraction of annotated malignant
/// train cases, dropping only boxes (dataset size is unchanged). Nested:
/// smaller fractions keep a subset of larger ones.
pub fn apply_annotation_fraction(dataset: &mut Dataset, fraction: f64) {
    if fraction >= 1.0 {
        return;
    }
    let mut idx: Vec<usize> = dataset
        .cases
        .iter()
        .enumerate()
        .filter(|(_, c)| c.split == Split::Train && c.label == Label::Malignant && c.annotated)
        .map(|(i, _)| i)
        .collect();
    let mut rng = Rng::new(ANNOTATION_SALT ^ idx.len() as u64);
    rng.shuffle(&mut idx);
    let keep = (fraction * idx.len() as f64).ceil() as usize;
    for &i in idx.iter().skip(keep) {
        dataset.cases[i].annotated = false;
    }
}

fn ensure_fresh(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        if force {
            if path.is_dir() {
                fs::remove_dir_all(path).map_err(|e| MmError::io(path, e))?;
            } else {
                fs::remove_file(path).map_err(|e| MmError::io(path, e))?;
            }
        } else {
            return Err(MmError::Config(format!(
                "{} already exists (use --force to overwrite)",
                path.display()
            )));
        }
    }
    Ok(())
}

fn split_summary(dataset: &Dataset) -> String {
    let mut out = String::from("split     malignant  benign  negative  annotated\n");
    for split in [Split::Train, Split::Val, Split::Test] {
        let of = |label: Label| {
            dataset
                .cases
                .iter()
                .filter(|c| c.split == split && c.label == label)
                .count()
        };
        let annotated = dataset
            .cases
            .iter()
            .filter(|c| c.split == split && c.label == Label::Malignant && c.annotated)
            .count();
        out.push_str(&format!(
            "{:<9} {:>9}  {:>6}  {:>8}  {:>9}\n",
            split.as_str(),
            of(Label::Malignant),
            of(Label::Benign),
            of(Label::Negative),
            annotated
        ));
    }
    out
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, seed: u64, force: bool) -> Result<String> {
    cfg.validate()?;
    ensure_fresh(out, force)?;
    let dataset = generate_dataset(&cfg.phantom, seed, cfg.dataset.cases, cfg.dataset.split)?;
    write_dataset(&dataset, out)?;
    let hash = dataset_fingerprint(out)?;
    Ok(format!(
        "generated {} cases into {}\n{}fingerprint {hash:016x}\n",
        dataset.cases.len(),
        out.display(),
        split_summary(&dataset)
    ))
}

/// Load a dataset and apply the configured data/annotation fractions.
pub fn load_prepared(cfg: &ExperimentConfig, data: &Path) -> Result<Dataset> {
    let mut dataset = read_dataset(data)?;
    apply_data_fraction(&mut dataset, cfg.data_fraction);
    apply_annotation_fraction(&mut dataset, cfg.annotation_fraction);
    Ok(dataset)
}

fn dataset_extent(dataset: &Dataset) -> Result<(usize, usize)> {
    let first = dataset
        .cases
        .first()
        .ok_or_else(|| MmError::Dataset("empty dataset".into()))?;
    Ok((first.cc.height, first.cc.width))
}

pub fn build_model(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Model> {
    let (h, w) = dataset_extent(dataset)?;
    let mc = cfg.model.build(h, w);
    mc.validate()?;
    Ok(Model::new(mc))
}

pub fn train_data_mode(cfg: &ExperimentConfig) -> TrainDataMode {
    match cfg.model.mode {
        Mode::ThreeD => TrainDataMode::Volume3d,
        Mode::Mip | Mode::TwoD => TrainDataMode::Mip,
        Mode::Slicewise => {
            if cfg.train.slicewise_annotated_only {
                TrainDataMode::SlicewiseAnnotated
            } else {
                TrainDataMode::SlicewiseRandom
            }
        }
    }
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    data: &Path,
    out_ckpt: &Path,
    force: bool,
) -> Result<(TrainOutcome, String)> {
    cfg.validate()?;
    ensure_fresh(out_ckpt, force)?;
    let dataset = load_prepared(cfg, data)?;
    let mut model = build_model(cfg, &dataset)?;
    let outcome = training::train(&mut model, &dataset, &cfg.train.build(), train_data_mode(cfg))?;
    save_checkpoint(&model.store, out_ckpt)?;
    let log_path = out_ckpt.with_extension("log");
    let mut log_text = String::new();
    for line in &outcome.log {
        log_text.push_str(&line.render());
        log_text.push('\n');
    }
    log_text.push_str(&format!(
        "best_epoch={} best_score={:.6} train_cases={} train_malignant={}\n",
        outcome.best_epoch, outcome.best_score, outcome.train_cases, outcome.train_malignant
    ));
    fs::write(&log_path, &log_text).map_err(|e| MmError::io(&log_path, e))?;
    let summary = format!(
        "trained {} epochs on {} cases; checkpoint {} (log {})\n",
        cfg.train.epochs,
        outcome.train_cases,
        out_ckpt.display(),
        log_path.display()
    );
    Ok((outcome, summary))
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    data: &Path,
    split: Split,
    out_dir: Option<&Path>,
) -> Result<(EvalReport, String)> {
    cfg.validate()?;
    let dataset = load_prepared(cfg, data)?;
    let mut model = build_model(cfg, &dataset)?;
    let loaded = load_checkpoint(ckpt)?;
    let report = transfer_weights(&loaded, &mut model.store)?;
    if !report.is_exact() {
        return Err(MmError::Config(format!(
            "checkpoint does not match the configured architecture:\n{report}"
        )));
    }
    let cases = dataset.split_cases(split);
    if cases.is_empty() {
        return Err(MmError::Dataset(format!("split {} is empty", split.as_str())));
    }
    let agg = AggregationConfig { iou_threshold: cfg.train.nms_tau };
    let eval = evaluate_cases(&model, &cases, cfg.model.mode, &agg, &cfg.eval.protocol())?;
    let text = eval.render();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| MmError::io(dir, e))?;
        let report_path = dir.join("report.txt");
        fs::write(&report_path, &text).map_err(|e| MmError::io(&report_path, e))?;
        for (name, block) in [("loc2d", &eval.loc_2d), ("loc3d", &eval.loc_3d)] {
            if let Some(metrics) = block {
                let csv_path = dir.join(format!("curve_{name}.csv"));
                fs::write(&csv_path, EvalReport::curve_csv(metrics))
                    .map_err(|e| MmError::io(&csv_path, e))?;
            }
        }
    }
    Ok((eval, text))
}

pub fn cmd_transfer(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    out_ckpt: Option<&Path>,
) -> Result<(TransferReport, String)> {
    cfg.validate()?;
    let mc = cfg.model.build(cfg.phantom.height, cfg.phantom.width);
    mc.validate()?;
    let mut model = Model::new(mc);
    let loaded = load_checkpoint(ckpt)?;
    let report = transfer_weights(&loaded, &mut model.store)?;
    if let Some(out) = out_ckpt {
        save_checkpoint(&model.store, out)?;
    }
    let text = format!("{report}");
    Ok((report, text))
}

/// Manifest diff between two configurations. Returns (identical, text).
pub fn cmd_param_check(cfg_a: &ExperimentConfig, cfg_b: &ExperimentConfig) -> Result<(bool, String)> {
    cfg_a.validate()?;
    cfg_b.validate()?;
    let a = Model::new(cfg_a.model.build(cfg_a.phantom.height, cfg_a.phantom.width)).manifest();
    let b = Model::new(cfg_b.model.build(cfg_b.phantom.height, cfg_b.phantom.width)).manifest();
    if a == b {
        return Ok((true, format!("manifests identical ({} parameters)\n", a.0.len())));
    }
    let (missing, extra) = a.diff(&b);
    let mut text = String::new();
    text.push_str(&format!(
        "manifests differ: {} vs {} parameters\n",
        a.0.len(),
        b.0.len()
    ));
    for name in &missing {
        text.push_str(&format!("  only in b: {name}\n"));
    }
    for name in &extra {
        text.push_str(&format!("  only in a: {name}\n"));
    }
    for (name, sa) in &a.0 {
        if let Some((_, sb)) = b.0.iter().find(|(n, _)| n == name) {
            if sa != sb {
                text.push_str(&format!("  shape mismatch {name}: {sa:?} vs {sb:?}\n"));
            }
        }
    }
    Ok((false, text))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    DataFraction,
    AnnotationFraction,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "data_fraction" => Some(SweepAxis::DataFraction),
            "annotation_fraction" => Some(SweepAxis::AnnotationFraction),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub method: Fusion,
    pub value: f64,
    pub r_at_025: Option<f64>,
    pub auc: Option<f64>,
    pub status: String,
    pub train_cases: usize,
}

pub const SWEEP_METHODS: [Fusion; 4] = [
    Fusion::Weighted,
    Fusion::TimeSform,
    Fusion::QuerySummary,
    Fusion::MlpRegress,
];

fn run_sweep_cell(
    cfg: &ExperimentConfig,
    base: &Dataset,
    axis: SweepAxis,
    method: Fusion,
    value: f64,
) -> Result<SweepCell> {
    let mut dataset = base.clone();
    match axis {
        SweepAxis::DataFraction => apply_data_fraction(&mut dataset, value),
        SweepAxis::AnnotationFraction => apply_annotation_fraction(&mut dataset, value),
    }
    let train_cases = dataset.cases.iter().filter(|c| c.split == Split::Train).count();
    let mut cell_cfg = cfg.clone();
    cell_cfg.model.fusion = method;
    cell_cfg.model.mode = Mode::ThreeD;
    let mut model = build_model(&cell_cfg, &dataset)?;
    training::train(&mut model, &dataset, &cell_cfg.train.build(), TrainDataMode::Volume3d)?;
    let cases = dataset.split_cases(Split::Test);
    let agg = AggregationConfig { iou_threshold: cfg.train.nms_tau };
    let eval = evaluate_cases(&model, &cases, Mode::ThreeD, &agg, &cfg.eval.protocol())?;
    Ok(SweepCell {
        method,
        value,
        r_at_025: eval.loc_3d.as_ref().map(|m| m.r_at_025),
        auc: Some(eval.auc),
        status: "ok".into(),
        train_cases,
    })
}

/// Train one model per (method, value) cell and collect test metrics.
/// Cells share one base dataset and subsample it deterministically; a
/// failing cell is recorded and the sweep continues. Worker parallelism is
/// capped by MM3D_THREADS.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    data: &Path,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    if values.is_empty() || values.iter().any(|&v| v <= 0.0 || v > 1.0) {
        return Err(MmError::Config("sweep values must lie in (0, 1]".into()));
    }
    let base = read_dataset(data)?;
    let mut jobs = Vec::new();
    for &method in &SWEEP_METHODS {
        for &value in values {
            jobs.push((method, value));
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, SweepCell)>> = Mutex::new(Vec::new());
    let workers = worker_threads().min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (method, value) = jobs[i];
                let cell = match run_sweep_cell(cfg, &base, axis, method, value) {
                    Ok(cell) => cell,
                    Err(e) => SweepCell {
                        method,
                        value,
                        r_at_025: None,
                        auc: None,
                        status: format!("failed: {e}"),
                        train_cases: 0,
                    },
                };
                results.lock().expect("sweep results").push((i, cell));
            });
        }
    });
    let mut cells = results.into_inner().expect("sweep results");
    cells.sort_by_key(|(i, _)| *i);
    Ok(cells.into_iter().map(|(_, c)| c).collect())
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("method,value,train_cases,r_at_025,auc,status\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.method.as_str(),
            c.value,
            c.train_cases,
            c.r_at_025.map_or("na".into(), |v| format!("{v}")),
            c.auc.map_or("na".into(), |v| format!("{v}")),
            c.status
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::PhantomConfig;
    use std::path::PathBuf;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.cases = 40;
        cfg.dataset.split = [0.6, 0.2, 0.2];
        cfg.phantom = PhantomConfig {
            slices: 8,
            malignant_fraction: 0.5,
            benign_fraction: 0.2,
            annotation_fraction: 1.0,
            ..PhantomConfig::default()
        };
        cfg.model.proposals = 4;
        cfg.model.dim = 8;
        cfg.model.roi = 2;
        cfg.model.heads = 2;
        cfg.model.z_target = 4;
        cfg.train.epochs = 1;
        cfg.train.lr = 1e-3;
        cfg.train.val_every = 0;
        cfg
    }

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mm3d_cli_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn generate_writes_all_splits_and_is_seed_stable() {
        let cfg = tiny_cfg();
        let dir = tmpdir("gen");
        let summary = cmd_generate(&cfg, &dir, 5, false).expect("generate");
        assert!(summary.contains("train"));
        let h1 = dataset_fingerprint(&dir).expect("hash");
        let dir2 = tmpdir("gen2");
        cmd_generate(&cfg, &dir2, 5, false).expect("generate");
        let h2 = dataset_fingerprint(&dir2).expect("hash");
        assert_eq!(h1, h2);
        // refuses to overwrite without --force
        assert!(cmd_generate(&cfg, &dir, 5, false).is_err());
        cmd_generate(&cfg, &dir, 6, true).expect("force overwrite");
        let h3 = dataset_fingerprint(&dir).expect("hash");
        assert_ne!(h1, h3, "different seed must change the dataset");
        fs::remove_dir_all(&dir).ok();
        fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn data_fraction_subsamples_train_split_only() {
        let cfg = tiny_cfg();
        let dataset = generate_dataset(&cfg.phantom, 9, 60, [0.6, 0.2, 0.2]).expect("dataset");
        let mut half = dataset.clone();
        apply_data_fraction(&mut half, 0.5);
        let count = |ds: &Dataset, split: Split| ds.cases.iter().filter(|c| c.split == split).count();
        assert_eq!(count(&half, Split::Val), count(&dataset, Split::Val));
        assert_eq!(count(&half, Split::Test), count(&dataset, Split::Test));
        let full_train = count(&dataset, Split::Train);
        let half_train = count(&half, Split::Train);
        assert!(
            (half_train as f64 - 0.5 * full_train as f64).abs() <= 2.0,
            "{half_train} vs half of {full_train}"
        );
        // nested: the 0.3 subset is contained in the 0.6 subset
        let mut a = dataset.clone();
        apply_data_fraction(&mut a, 0.3);
        let mut b = dataset.clone();
        apply_data_fraction(&mut b, 0.6);
        let ids = |ds: &Dataset| {
            ds.cases
                .iter()
                .filter(|c| c.split == Split::Train)
                .map(|c| c.id.clone())
                .collect::<std::collections::BTreeSet<_>>()
        };
        assert!(ids(&a).is_subset(&ids(&b)));
    }

    #[test]
    fn annotation_fraction_drops_boxes_not_cases() {
        let cfg = tiny_cfg();
        let dataset = generate_dataset(&cfg.phantom, 9, 60, [0.6, 0.2, 0.2]).expect("dataset");
        let mut masked = dataset.clone();
        apply_annotation_fraction(&mut masked, 0.4);
        assert_eq!(masked.cases.len(), dataset.cases.len());
        let annotated = |ds: &Dataset| {
            ds.cases
                .iter()
                .filter(|c| c.split == Split::Train && c.label == Label::Malignant && c.annotated)
                .count()
        };
        let total = dataset
            .cases
            .iter()
            .filter(|c| c.split == Split::Train && c.label == Label::Malignant)
            .count();
        assert_eq!(annotated(&masked), (0.4f64 * total as f64).ceil() as usize);
        // findings are still recorded; only the flag is dropped
        assert!(masked
            .cases
            .iter()
            .all(|c| c.findings_cc.len() == dataset.cases.iter().find(|d| d.id == c.id).expect("case").findings_cc.len()));
    }

    #[test]
    fn param_check_flags_variant_configs() {
        let cfg = tiny_cfg();
        let (same, _) = cmd_param_check(&cfg, &cfg).expect("check");
        assert!(same);
        let mut qcfg = cfg.clone();
        qcfg.model.fusion = Fusion::QuerySummary;
        let (same2, text) = cmd_param_check(&cfg, &qcfg).expect("check");
        assert!(!same2);
        assert!(text.contains("fusion.queries"), "{text}");
    }

    #[test]
    fn train_eval_transfer_end_to_end() {
        let cfg = tiny_cfg();
        let dir = tmpdir("pipeline");
        cmd_generate(&cfg, &dir, 11, false).expect("generate");
        let ckpt = dir.join("model.ckpt");
        let (_, summary) = cmd_train(&cfg, &dir, &ckpt, false).expect("train");
        assert!(summary.contains("checkpoint"));
        assert!(ckpt.with_extension("log").exists());
        let (report, text) = cmd_eval(&cfg, &ckpt, &dir, Split::Test, Some(&dir.join("eval"))).expect("eval");
        assert!(report.auc.is_finite());
        assert!(text.contains("3d-localization"));
        assert!(dir.join("eval/report.txt").exists());
        // transfer into the same architecture is exact
        let (treport, _) = cmd_transfer(&cfg, &ckpt, None).expect("transfer");
        assert!(treport.is_exact());
        // transfer into a variant reports its extra parameters as missing
        let mut qcfg = cfg.clone();
        qcfg.model.fusion = Fusion::QuerySummary;
        let (vreport, _) = cmd_transfer(&qcfg, &ckpt, None).expect("transfer");
        assert!(!vreport.missing.is_empty());
        assert!(vreport.missing.iter().all(|n| n.contains("fusion")));
        assert!(vreport.unexpected.is_empty());
        fs::remove_dir_all(&dir).ok();
    }
}
