// Scratch harness for benchmark calibration runs.
use std::time::Instant;

use mm3d::baselines::{collect_outputs, evaluate_cases, AggregationConfig};
use mm3d::config::ExperimentConfig;
use mm3d::detector::Mode;
use mm3d::metrics::{froc_curve, match_tp};
use mm3d::phantom::{generate_dataset, PhantomConfig, Split};
use mm3d::training::{train, TrainDataMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cases: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let mode_s = args.get(4).cloned().unwrap_or_else(|| "3d".into());
    let lam_z: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lam_box: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(2.0);

    let mut cfg = ExperimentConfig::default();
    cfg.phantom = PhantomConfig { annotation_fraction: 0.4, ..PhantomConfig::default() };
    cfg.train.lr = lr;
    cfg.train.epochs = epochs;
    cfg.train.val_every = 2;
    cfg.train.lambda_z = lam_z;
    cfg.train.lambda_box = lam_box;

    let t0 = Instant::now();
    let dataset = generate_dataset(&cfg.phantom, 42, cases, [0.75, 0.1, 0.15]).expect("dataset");
    println!("generated {} cases in {:.1}s", dataset.cases.len(), t0.elapsed().as_secs_f64());

    let (mode, dmode) = match mode_s.as_str() {
        "slicewise" => (Mode::Slicewise, TrainDataMode::SlicewiseRandom),
        "mip" => (Mode::Mip, TrainDataMode::Mip),
        _ => (Mode::ThreeD, TrainDataMode::Volume3d),
    };

    let mut model = mm3d::cli::build_model(&cfg, &dataset).expect("model");
    let t1 = Instant::now();
    let outcome = train(&mut model, &dataset, &cfg.train.build(), dmode).expect("train");
    println!("trained {} epochs in {:.1}s (best epoch {})", epochs, t1.elapsed().as_secs_f64(), outcome.best_epoch);
    for l in &outcome.log {
        println!("{}", l.render());
    }

    let test = dataset.split_cases(Split::Test);
    let agg = AggregationConfig::default();
    let report = evaluate_cases(&model, &test, mode, &agg, &cfg.eval.protocol()).expect("eval");
    println!("{}", report.render());

    // diagnostics: achievable recall (unlimited FP) and per-finding best IoU
    let (volumes, _, _) = collect_outputs(&model, &test, mode, &agg);
    let c2d = froc_curve(&volumes, false, 0.25, false).expect("curve");
    let c3d = froc_curve(&volumes, true, 0.25, false).expect("curve");
    println!("achievable recall (FP unbounded): 2d {:.3} 3d {:.3}", c2d.recall_at(1e9), c3d.recall_at(1e9));
    let mut best_ious = Vec::new();
    for v in &volumes {
        for f in &v.findings {
            let best = v
                .dets
                .iter()
                .map(|d| mm3d::metrics::iou_2d(&d.bbox, &f.bbox))
                .fold(0.0f64, f64::max);
            best_ious.push(best);
        }
        let _ = match_tp(&v.dets, &v.findings, false, 0.25);
    }
    best_ious.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| best_ious[((best_ious.len() - 1) as f64 * p) as usize];
    println!(
        "best-IoU per finding: p10 {:.2} median {:.2} p90 {:.2} (n={})",
        q(0.1), q(0.5), q(0.9), best_ious.len()
    );
}
