use serde::{Deserialize, Serialize};

use crate::data::{load_images, make_splits, AdaptationBudget, Fold, ImageSet, Scenario, TrialSource};
use crate::error::{Error, Result};
use crate::experiment::adapt::{adapt_with, AdaptConfig};
use crate::experiment::eval::{evaluate_voted, EvalResult};
use crate::experiment::report::{EvalReport, FoldFailure, ResultRow, UNADAPTED};
use crate::experiment::train::{train_guarded, EpochLog, LeakGuard, TrainConfig};
use crate::model::{AllConvNet, ArchitectureSpec, Checkpoint};
use crate::nn::RngStream;
use crate::signal::{mains_filter, BandstopFilter};

/// Everything needed to reproduce one experiment over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub tag: String,
    /// Adaptation budgets to run; ignored for intra-session. Empty means
    /// pretrain and evaluate only.
    pub budgets: Vec<AdaptationBudget>,
    pub windows: Vec<usize>,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    /// Share of pretraining frames held out for early stopping when the
    /// split has no validation trials.
    pub validation_fraction: f64,
    /// Keep every n-th frame of training and adaptation trials.
    pub train_stride: usize,
    /// Keep every n-th frame of validation trials.
    pub validation_stride: usize,
    /// Keep every n-th frame of test trials.
    pub eval_stride: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            scenario: Scenario::IntraSession,
            tag: "dataset".into(),
            budgets: AdaptationBudget::ALL.to_vec(),
            windows: vec![1, 32, 64, 150, 160],
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            validation_fraction: 0.1,
            train_stride: 1,
            validation_stride: 1,
            eval_stride: 1,
            seed: 0,
            jobs: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.adapt.validate()?;
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config("voting windows must be non-empty and at least 1".into()));
        }
        if self.train_stride == 0 || self.validation_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("frame strides must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// Seed of fold `index`: the experiment seed xor the index.
    pub fn fold_seed(&self, index: usize) -> u64 {
        self.seed ^ index as u64
    }
}

#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub budget: AdaptationBudget,
    pub checkpoint: Checkpoint,
    pub log: EpochLog,
    pub result: EvalResult,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub index: usize,
    pub subject: u16,
    pub checkpoint: Checkpoint,
    pub log: EpochLog,
    /// Validation accuracy of the kept epoch.
    pub validation_accuracy: Option<f64>,
    /// Test result of the trained model before any adaptation.
    pub result: EvalResult,
    pub adapted: Vec<AdaptedModel>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub folds: Vec<FoldOutcome>,
}

struct FoldRunner<'a> {
    source: &'a dyn TrialSource,
    spec: &'a ExperimentSpec,
    filter: BandstopFilter,
    /// Adaptation trials per budget, by fold index.
    adaptation: Vec<(AdaptationBudget, Vec<Fold>)>,
}

impl FoldRunner<'_> {
    fn load(&self, metas: &[crate::signal::TrialMeta], stride: usize) -> Result<ImageSet> {
        load_images(self.source, metas, &self.filter, stride)
    }

    fn rows(&self, fold: &Fold, budget: &str, r: &EvalResult) -> Vec<ResultRow> {
        self.spec
            .windows
            .iter()
            .map(|&w| ResultRow {
                scenario: self.spec.scenario.to_string(),
                tag: self.spec.tag.clone(),
                subject: fold.subject,
                fold: fold.index,
                budget: budget.to_string(),
                window: w,
                per_frame_acc: r.per_frame_accuracy,
                voted_acc: r.voted_at(w),
            })
            .collect()
    }

    fn run(&self, fold: &Fold) -> Result<(FoldOutcome, Vec<ResultRow>)> {
        let spec = self.spec;
        let seed = spec.fold_seed(fold.index);
        let guard = LeakGuard::new(fold.test.iter().copied());
        let pretrain = self.load(&fold.pretrain, spec.train_stride)?;
        let (train_set, val_set) = if fold.validation.is_empty() {
            let mut rng = RngStream::new("validation-split", seed);
            pretrain.split_random(spec.validation_fraction, &mut rng)
        } else {
            (pretrain, self.load(&fold.validation, spec.validation_stride)?)
        };
        let test = self.load(&fold.test, spec.eval_stride)?;

        let arch = ArchitectureSpec::full(self.source.gestures())?;
        let net = AllConvNet::new(arch, &mut RngStream::new("init", seed))?;
        let config = TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let trained = train_guarded(net, &train_set, &val_set, &config, Some(&guard))?;
        let validation_accuracy = trained.log.best().and_then(|r| r.val_accuracy);
        let result = evaluate_voted(&trained.net, &test, &spec.windows)?;
        let checkpoint = trained.checkpoint(seed, &format!("{}/fold{}", spec.tag, fold.index));
        let mut rows = self.rows(fold, UNADAPTED, &result);
        log::info!(
            "fold {} (subject {}): per-frame {:.4}",
            fold.index,
            fold.subject,
            result.per_frame_accuracy
        );

        let mut adapted = Vec::new();
        for (budget, folds) in &self.adaptation {
            let metas = &folds
                .iter()
                .find(|f| f.index == fold.index)
                .ok_or_else(|| Error::Split(format!("fold {} missing for budget {budget}", fold.index)))?
                .adaptation;
            let data = self.load(metas, spec.train_stride)?;
            let config = AdaptConfig {
                budget: Some(*budget),
                seed,
                ..spec.adapt.clone()
            };
            let tuned = adapt_with(&checkpoint, &data, &config, Some(&guard), None)?;
            let r = evaluate_voted(&tuned.net, &test, &spec.windows)?;
            log::info!("fold {} budget {budget}: per-frame {:.4}", fold.index, r.per_frame_accuracy);
            rows.extend(self.rows(fold, &budget.to_string(), &r));
            adapted.push(AdaptedModel {
                budget: *budget,
                checkpoint: tuned.checkpoint(seed, &format!("{}/fold{}/{budget}", spec.tag, fold.index)),
                log: tuned.log,
                result: r,
            });
        }
        let mut result = result;
        result.subject = Some(fold.subject);
        result.fold = Some(fold.index);
        Ok((
            FoldOutcome {
                index: fold.index,
                subject: fold.subject,
                checkpoint,
                log: trained.log,
                validation_accuracy,
                result,
                adapted,
            },
            rows,
        ))
    }
}

/// Runs every fold of the scenario: train (or pretrain), evaluate, then adapt
/// and evaluate at each budget. Failed folds are recorded in the report.
pub fn run_experiment(source: &dyn TrialSource, manifest: &crate::data::DatasetManifest, spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let first_budget = spec.budgets.first().copied().unwrap_or(AdaptationBudget::T5);
    let plan = make_splits(manifest, spec.scenario, first_budget)?;
    let adaptation = if spec.scenario == Scenario::IntraSession {
        Vec::new()
    } else {
        spec.budgets
            .iter()
            .map(|b| make_splits(manifest, spec.scenario, *b).map(|p| (*b, p.folds)))
            .collect::<Result<_>>()?
    };
    let runner = FoldRunner {
        source,
        spec,
        filter: mains_filter(source.sample_rate() as f64)?,
        adaptation,
    };
    let jobs = spec.jobs.max(1).min(plan.folds.len().max(1));
    let mut results: Vec<Option<Result<(FoldOutcome, Vec<ResultRow>)>>> = (0..plan.folds.len()).map(|_| None).collect();
    if jobs == 1 {
        for (slot, fold) in results.iter_mut().zip(&plan.folds) {
            *slot = Some(runner.run(fold));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(fold) = plan.folds.get(i) else { break };
                    let r = runner.run(fold);
                    done.lock().expect("no panics while holding the lock")[i] = Some(r);
                });
            }
        });
    }

    let mut outcome = ExperimentOutcome::default();
    for (fold, r) in plan.folds.iter().zip(results) {
        match r.expect("every fold ran") {
            Ok((f, rows)) => {
                outcome.report.rows.extend(rows);
                outcome.folds.push(f);
            }
            Err(e) => {
                log::error!("fold {} (subject {}) failed: {e}", fold.index, fold.subject);
                outcome.report.failures.push(FoldFailure {
                    subject: fold.subject,
                    fold: fold.index,
                    error: e.to_string(),
                    exit_code: e.exit_code(),
                });
            }
        }
    }
    Ok(outcome)
}
