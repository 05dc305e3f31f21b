use std::path::Path;

use emg_allconv::data::{
    generate_synthetic, load_images, make_splits, AdaptationBudget, DatasetManifest, Fold, Scenario, SyntheticConfig,
};
use emg_allconv::experiment::{
    compare, evaluate_voted, improvements_csv, parse_k_range, run_experiment, transfusion_sweep, AdaptConfig,
    AdaptMode, EpochLog, EvalReport, EvalResult, ExperimentSpec, ResultRow, TrainConfig, EPOCH_CHECKPOINTS,
    UNADAPTED,
};
use emg_allconv::model::{AllConvNet, Checkpoint};
use emg_allconv::nn::Tensor;
use emg_allconv::signal::{filter_trial, frame_to_image, mains_filter, mirror, write_pgm, TrialMeta, IMAGE_SIDE};
use emg_allconv::{Error, Result};

use crate::{AdaptArgs, Common, Data, EvalArgs, FoldSelect, PretrainArgs, ReportArgs, SweepArgs, SynthArgs};

fn seed(c: &Common) -> u64 {
    c.seed.unwrap_or(0)
}

fn scenario(d: &Data) -> Result<Scenario> {
    d.scenario.parse()
}

fn write_log(path: &Path, log: &EpochLog) -> Result<()> {
    std::fs::write(path, log.to_csv())?;
    Ok(())
}

/// Fails with an architecture error when the checkpoint's head does not fit
/// the dataset.
fn load_checkpoint(path: &Path, manifest: &DatasetManifest) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_gestures(manifest.gestures)?;
    Ok(ckpt)
}

fn select_fold(manifest: &DatasetManifest, data: &Data, select: &FoldSelect) -> Result<(Fold, AdaptationBudget)> {
    let budget: AdaptationBudget = select.budget.parse()?;
    let plan = make_splits(manifest, scenario(data)?, budget)?;
    let n = plan.folds.len();
    let fold = plan
        .folds
        .into_iter()
        .find(|f| f.index == select.fold)
        .ok_or_else(|| Error::Config(format!("fold {} not in 0..{n}", select.fold)))?;
    Ok((fold, budget))
}

fn rows(data: &Data, tag: &str, fold: &Fold, budget: &str, r: &EvalResult) -> Vec<ResultRow> {
    data.windows
        .iter()
        .map(|&w| ResultRow {
            scenario: data.scenario.parse::<Scenario>().map(|s| s.to_string()).unwrap_or_default(),
            tag: tag.to_string(),
            subject: fold.subject,
            fold: fold.index,
            budget: budget.to_string(),
            window: w,
            per_frame_acc: r.per_frame_accuracy,
            voted_acc: r.voted_at(w),
        })
        .collect()
}

/// One row: per-frame accuracy then one voted column per window.
fn windows_csv(r: &EvalResult) -> String {
    let mut head = String::from("per_frame");
    let mut row = format!("{:.6}", r.per_frame_accuracy);
    for w in &r.voted {
        head.push_str(&format!(",voted_{}", w.window));
        row.push_str(&format!(",{}", w.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default()));
    }
    format!("{head}\n{row}\n")
}

fn confusion_csv(r: &EvalResult) -> String {
    let g = r.confusion.len();
    let mut out = String::from("true");
    for p in 0..g {
        out.push_str(&format!(",pred_{p}"));
    }
    out.push('\n');
    for (t, row) in r.confusion.iter().enumerate() {
        out.push_str(&t.to_string());
        for c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

fn exit_code_for(report: &EvalReport) -> i32 {
    report.failures.iter().map(|f| f.exit_code).max().unwrap_or(0)
}

/// Effective synthetic configuration: `--seed` or the environment override
/// the file's seed.
pub fn synth_config(a: &SynthArgs, seed_given: bool) -> Result<SyntheticConfig> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => SyntheticConfig::default(),
    };
    if seed_given {
        cfg.seed = seed(&a.common);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(a: &SynthArgs) -> Result<i32> {
    let cfg = match &a.resolved {
        Some(c) => c.clone(),
        None => synth_config(a, true)?,
    };
    let manifest = generate_synthetic(&cfg, &a.common.out)?;
    let path = a.common.out.join("manifest.json");
    log::info!("{} trials written", manifest.trials.len());
    println!("{}", path.display());
    Ok(0)
}

pub fn pretrain(a: &PretrainArgs) -> Result<i32> {
    let manifest = DatasetManifest::load(&a.data.manifest)?;
    let s = seed(&a.common);
    let spec = ExperimentSpec {
        scenario: scenario(&a.data)?,
        tag: manifest.tag.clone(),
        budgets: Vec::new(),
        windows: a.data.windows.clone(),
        train: TrainConfig {
            learning_rate: a.optim.learning_rate,
            batch_size: a.optim.batch_size,
            max_epochs: a.optim.epochs,
            patience: a.patience,
            seed: s,
            deterministic: a.common.deterministic,
            ..Default::default()
        },
        train_stride: a.data.train_stride,
        validation_stride: a.data.validation_stride,
        eval_stride: a.data.eval_stride,
        seed: s,
        jobs: a.jobs,
        ..Default::default()
    };
    let outcome = run_experiment(&manifest, &manifest, &spec)?;
    let out = &a.common.out;
    outcome.report.write(out)?;
    for f in &outcome.folds {
        f.checkpoint.save(out.join(format!("fold{:02}.ckpt", f.index)))?;
        write_log(&out.join(format!("epochs_fold{:02}.csv", f.index)), &f.log)?;
    }
    let summary = outcome.report.summary();
    for g in &summary.groups {
        println!(
            "{} window {}: per-frame {:.4} ± {:.4} over {} folds",
            g.budget, g.window, g.per_frame.mean, g.per_frame.std, g.per_frame.n
        );
    }
    for f in &outcome.report.failures {
        eprintln!("fold {} (subject {}) incomplete: {}", f.fold, f.subject, f.error);
    }
    Ok(exit_code_for(&outcome.report))
}

pub fn adapt(a: &AdaptArgs) -> Result<i32> {
    let manifest = DatasetManifest::load(&a.data.manifest)?;
    let ckpt = load_checkpoint(&a.select.checkpoint, &manifest)?;
    let (fold, budget) = select_fold(&manifest, &a.data, &a.select)?;
    let filter = mains_filter(manifest.sample_rate as f64)?;
    let data = load_images(&manifest, &fold.adaptation, &filter, a.data.train_stride)?;
    let test = load_images(&manifest, &fold.test, &filter, a.data.eval_stride)?;
    let s = seed(&a.common);
    let config = AdaptConfig {
        mode: AdaptMode::parse(&a.mode, a.k)?,
        epochs: a.optim.epochs,
        budget: Some(budget),
        learning_rate: a.optim.learning_rate,
        batch_size: a.optim.batch_size,
        seed: s,
        deterministic: a.common.deterministic,
        ..Default::default()
    };
    let tuned = emg_allconv::experiment::adapt(&ckpt, &data, &config)?;
    let r = evaluate_voted(&tuned.net, &test, &a.data.windows)?;
    let out = &a.common.out;
    tuned
        .checkpoint(s, &format!("{}/{}/{budget}", manifest.tag, config.mode))
        .save(out.join("adapted.ckpt"))?;
    write_log(&out.join("epochs.csv"), &tuned.log)?;
    let report = EvalReport {
        rows: rows(&a.data, &manifest.tag, &fold, &budget.to_string(), &r),
        failures: Vec::new(),
    };
    report.write(out)?;
    std::fs::write(out.join("windows.csv"), windows_csv(&r))?;
    println!(
        "{} {budget}: per-frame {:.4}, {} of {} layers frozen",
        config.mode,
        r.per_frame_accuracy,
        tuned.net.mask().frozen_conv_layers(),
        emg_allconv::model::CONV_LAYERS
    );
    Ok(0)
}

pub fn eval(a: &EvalArgs) -> Result<i32> {
    let manifest = DatasetManifest::load(&a.data.manifest)?;
    let ckpt = load_checkpoint(&a.select.checkpoint, &manifest)?;
    let (fold, budget) = select_fold(&manifest, &a.data, &a.select)?;
    let filter = mains_filter(manifest.sample_rate as f64)?;
    let test = load_images(&manifest, &fold.test, &filter, a.data.eval_stride)?;
    let net = AllConvNet::from_checkpoint(&ckpt)?;
    let r = evaluate_voted(&net, &test, &a.data.windows)?;
    let label = if scenario(&a.data)? == Scenario::IntraSession {
        UNADAPTED.to_string()
    } else {
        budget.to_string()
    };
    let report = EvalReport {
        rows: rows(&a.data, &manifest.tag, &fold, &label, &r),
        failures: Vec::new(),
    };
    let out = &a.common.out;
    report.write(out)?;
    std::fs::write(out.join("windows.csv"), windows_csv(&r))?;
    std::fs::write(out.join("confusion.csv"), confusion_csv(&r))?;
    print!("{}", windows_csv(&r));
    Ok(0)
}

pub fn sweep(a: &SweepArgs) -> Result<i32> {
    let manifest = DatasetManifest::load(&a.data.manifest)?;
    let ckpt = load_checkpoint(&a.select.checkpoint, &manifest)?;
    let (fold, budget) = select_fold(&manifest, &a.data, &a.select)?;
    let filter = mains_filter(manifest.sample_rate as f64)?;
    let data = load_images(&manifest, &fold.adaptation, &filter, a.data.train_stride)?;
    let test = load_images(&manifest, &fold.test, &filter, a.data.eval_stride)?;
    let ks = parse_k_range(&a.k_range)?;
    let mut checkpoints: Vec<usize> = EPOCH_CHECKPOINTS.iter().copied().filter(|e| *e <= a.optim.epochs).collect();
    if checkpoints.is_empty() {
        checkpoints.push(a.optim.epochs);
    }
    let window = *a
        .data
        .windows
        .last()
        .ok_or_else(|| Error::Config("sweep needs a voting window".into()))?;
    let base = AdaptConfig {
        mode: AdaptMode::Transfusion(0),
        budget: Some(budget),
        learning_rate: a.optim.learning_rate,
        batch_size: a.optim.batch_size,
        seed: seed(&a.common),
        deterministic: a.common.deterministic,
        ..Default::default()
    };
    let table = transfusion_sweep(&ckpt, &data, &test, &ks, &checkpoints, window, &base)?;
    let out = &a.common.out;
    std::fs::write(out.join("sweep.csv"), table.to_csv())?;
    std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    print!("{}", table.to_csv());
    Ok(0)
}

fn parse_frame(spec: &str) -> Result<(TrialMeta, usize)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("frame '{spec}' is not subject:session:gesture:trial:frame"));
    if parts.len() != 5 {
        return Err(bad());
    }
    let meta = TrialMeta {
        subject: parts[0].parse().map_err(|_| bad())?,
        session: parts[1].parse().map_err(|_| bad())?,
        gesture: parts[2].parse().map_err(|_| bad())?,
        trial: parts[3].parse().map_err(|_| bad())?,
    };
    Ok((meta, parts[4].parse().map_err(|_| bad())?))
}

/// Writes the input image and one tiled PGM per conv layer, channels laid
/// out eight to a row and each rescaled to the full grey range.
fn dump_activations(ckpt_path: &Path, manifest_path: &Path, frame: &str, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let ckpt = load_checkpoint(ckpt_path, &manifest)?;
    let net = AllConvNet::from_checkpoint(&ckpt)?;
    let (meta, t) = parse_frame(frame)?;
    let raw = manifest.read(&meta)?;
    if t >= raw.num_frames() {
        return Err(Error::Config(format!("frame {t} beyond {} frames", raw.num_frames())));
    }
    let filtered = filter_trial(&raw, &mains_filter(manifest.sample_rate as f64)?)?;
    let image = mirror(&frame_to_image(filtered.trial().frame(t))?)?;
    let dir = out.join("activations");
    std::fs::create_dir_all(&dir)?;
    write_pgm(&dir.join("input.pgm"), IMAGE_SIDE, IMAGE_SIDE, image.pixels())?;
    let x = Tensor::from_vec(&[1, 1, IMAGE_SIDE, IMAGE_SIDE], image.pixels().iter().map(|v| v / 255.0).collect())?;
    for (i, map) in net.activation_maps(&x)?.iter().enumerate() {
        let (_, c, h, w) = map.dims4()?;
        let cols = c.min(8);
        let rows = c.div_ceil(cols);
        let (width, height) = (cols * (w + 1), rows * (h + 1));
        let mut canvas = vec![0.0f32; width * height];
        for ch in 0..c {
            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
            let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
            let (ty, tx) = (ch / cols * (h + 1), ch % cols * (w + 1));
            for y in 0..h {
                for xx in 0..w {
                    canvas[(ty + y) * width + tx + xx] = (plane[y * w + xx] - lo) * scale;
                }
            }
        }
        write_pgm(&dir.join(format!("conv{}.pgm", i + 1)), width, height, &canvas)?;
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<i32> {
    let reports = a
        .inputs
        .iter()
        .map(|p| {
            EvalReport::read_csv(p).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut merged = EvalReport::default();
    for r in &reports {
        merged.merge(r.clone());
    }
    if !a.windows.is_empty() {
        merged.rows.retain(|r| a.windows.contains(&r.window));
    }
    let out = &a.common.out;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&merged.summary())? + "\n")?;
    std::fs::write(out.join("curve.csv"), merged.window_curve_csv())?;
    let mut deltas = Vec::new();
    for other in &reports[1..] {
        let mut o = other.clone();
        let mut base = reports[0].clone();
        if !a.windows.is_empty() {
            o.rows.retain(|r| a.windows.contains(&r.window));
            base.rows.retain(|r| a.windows.contains(&r.window));
        }
        deltas.extend(compare(&base, &o));
    }
    std::fs::write(out.join("improvements.csv"), improvements_csv(&deltas))?;
    if let (Some(c), Some(m), Some(f)) = (&a.activations, &a.manifest, &a.frame) {
        dump_activations(c, m, f, out)?;
    }
    print!("{}", merged.window_curve_csv());
    Ok(0)
}
