//! End-to-end driver: build the synthetic world from a configuration, train
//! both stages, and evaluate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{MixtureSample, SynthWorld};
use crate::error::Result;
use crate::eval::{evaluate, EvalPlan, EvalReport};
use crate::pipeline::{train_backbone, train_kce, JsonlLog, Models, StepLog, TrainData, TrainSummary};
use crate::scalar::Scalar;

pub const KCE_LOG: &str = "train_kce.jsonl";
pub const TSE_LOG: &str = "train_tse.jsonl";
pub const REPORT_JSON: &str = "report.json";

pub struct Experiment {
    config: ExperimentConfig,
    world: SynthWorld,
    kce_pool: Vec<usize>,
    tse_pool: Vec<usize>,
}

/// Everything a complete run produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub kce_fingerprint: u64,
    pub tse_fingerprint: u64,
    pub kce_training: TrainSummary,
    pub tse_training: TrainSummary,
    pub report: EvalReport,
    pub seconds: f64,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let world = SynthWorld::new(config.synth_spec())?;
        Ok(Self {
            kce_pool: config.kce_pool(),
            tse_pool: config.tse_pool(),
            config,
            world,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn world(&self) -> &SynthWorld {
        &self.world
    }

    pub fn init_models<T: Scalar>(&self) -> Result<Models<T>> {
        Models::init(self.config.kce_config(), self.config.backbone_config()?, self.config.init_seed())
    }

    /// Loads models from `dir`; a missing backbone is freshly initialized.
    pub fn load_models<T: Scalar>(&self, dir: &Path) -> Result<Models<T>> {
        Models::load(dir, self.config.backbone_config()?, self.config.init_seed())
    }

    pub fn train_kce<T: Scalar>(&self, models: &mut Models<T>, log: Option<&Path>) -> Result<TrainSummary> {
        let data = TrainData {
            world: &self.world,
            pool: &self.kce_pool,
            protocol: self.config.corpus.protocol,
        };
        let cfg = self.config.kce_train();
        with_log(log, |sink| {
            train_kce(&models.kce, &mut models.kce_params, data, &cfg, &models.fbank, sink)
        })
    }

    pub fn train_tse<T: Scalar>(&self, models: &mut Models<T>, log: Option<&Path>) -> Result<TrainSummary> {
        let data = TrainData {
            world: &self.world,
            pool: &self.tse_pool,
            protocol: self.config.corpus.protocol,
        };
        let cfg = self.config.tse_train();
        let m = models;
        with_log(log, |sink| {
            train_backbone(&m.kce, &m.kce_params, &m.extractor, &mut m.tse_params, data, &cfg, &m.fbank, sink)
        })
    }

    pub fn eval_plan(&self) -> EvalPlan {
        EvalPlan {
            positives: self.config.eval.positives,
            detection_samples: self.config.eval.detection_samples,
            seed: self.config.eval_seed(),
            protocol: self.config.corpus.protocol,
            pool: self.tse_pool.clone(),
            threshold: self.config.detector.threshold,
            scoring: self.config.detector.scoring,
            grid: self.config.eval.thresholds.clone(),
        }
    }

    pub fn evaluate<T: Scalar>(&self, models: &Models<T>) -> Result<EvalReport> {
        evaluate(models, &self.world, &self.eval_plan())
    }

    /// The held-out detection set (about half negatives).
    pub fn detection_set<T: Scalar>(&self, n: usize) -> Result<Vec<MixtureSample<T>>> {
        let plan = self.eval_plan();
        self.world
            .make_eval_set(n, plan.seed.wrapping_add(1), plan.protocol, &plan.pool)
    }

    /// Trains both stages from scratch and evaluates. With `out`, the
    /// checkpoints, step logs and report are written there.
    pub fn run(&self, out: Option<&Path>) -> Result<Outcome> {
        let clock = Instant::now();
        let path = |name: &str| out.map(|d| d.join(name));
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        }
        let mut models: Models<f64> = self.init_models()?;
        let kce_training = self.train_kce(&mut models, path(KCE_LOG).as_deref())?;
        let tse_training = self.train_tse(&mut models, path(TSE_LOG).as_deref())?;
        if let Some(dir) = out {
            models.save(dir)?;
        }
        let report = self.evaluate(&models)?;
        let outcome = Outcome {
            kce_fingerprint: models.kce_params.fingerprint(),
            tse_fingerprint: models.tse_params.fingerprint(),
            kce_training,
            tse_training,
            report,
            seconds: clock.elapsed().as_secs_f64(),
        };
        if let Some(p) = path(REPORT_JSON) {
            write_report(&p, &outcome.report)?;
        }
        Ok(outcome)
    }
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| crate::Error::io(path, e))
}

fn with_log<F>(log: Option<&Path>, train: F) -> Result<TrainSummary>
where
    F: FnOnce(&mut dyn FnMut(&StepLog) -> Result<()>) -> Result<TrainSummary>,
{
    match log {
        Some(path) => {
            let mut writer = JsonlLog::create(path)?;
            let summary = train(&mut |l| writer.write(l))?;
            writer.finish()?;
            Ok(summary)
        }
        None => train(&mut |_| Ok(())),
    }
}

/// Output root: the explicit directory, else `$KEYGUIDE_OUT`, else `runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("KEYGUIDE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}
