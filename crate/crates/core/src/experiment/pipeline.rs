//! In-memory execution of every stage for one configuration.
//!
//! Both datasets are normalized with statistics of the source train split
//! of fold 0. Per seed, one teacher is trained on that split; per seed and
//! target fold, pseudo-labels and a student are derived from it. Naive
//! transfer reuses the teacher's encoder.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::augment::augment_source_with;
use crate::data::{fit_source_stats, ingest, normalize_bundle, ChannelStats, DatasetBundle, SensorWindow, Split, SyntheticDomain};
use crate::error::{Error, Result};
use crate::evaluation::report::{MetricsReport, RunRecord};
use crate::experiment::config::{DataConfig, ExperimentConfig, Method, StageName, SYNTHETIC_SOURCE, SYNTHETIC_TARGET};
use crate::models::cpc_stack_spec;
use crate::nn::Network;
use crate::rng::derive_seed;
use crate::training::baselines::{downstream_encoder, init_classifier};
use crate::training::{
    fewshot_finetune, pretrain_cpc, pretrain_simclr, pseudo_label, train_conv_classifier, train_student, train_teacher, Classifier,
    FewshotData, PseudoLabelSet, RunContext, StageResult, StudentInputs,
};

/// Loads a dataset by id from `<datasets_root>/<id>`. The synthetic ids
/// are generated in memory when no such directory exists.
pub fn load_dataset(id: &str, data: &DataConfig, datasets_root: Option<&Path>) -> Result<DatasetBundle> {
    let on_disk = datasets_root.map(|r| r.join(id)).filter(|d| d.is_dir());
    let synthetic = match id {
        _ if on_disk.is_some() => None,
        SYNTHETIC_SOURCE => Some(SyntheticDomain::source()),
        SYNTHETIC_TARGET => Some(SyntheticDomain::target()),
        _ => None,
    };
    if let Some(mut domain) = synthetic {
        domain.rate_hz = data.rate_hz;
        return domain.generate(data.window_len, data.overlap, data.folds(), data.fold_seed);
    }
    let root = datasets_root.ok_or_else(|| {
        Error::Config(format!("dataset `{id}` is not built in; set a datasets root"))
    })?;
    let (bundle, report) = ingest(&root.join(id), &data.schema())?;
    if !report.rejected.is_empty() {
        log::warn!("{id}: {} rows rejected during ingestion", report.rejected.len());
    }
    Ok(bundle)
}

/// Source and target bundles normalized with source statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source: DatasetBundle,
    pub target: DatasetBundle,
    pub stats: ChannelStats,
}

impl Prepared {
    pub fn new(source: &DatasetBundle, target: &DatasetBundle) -> Result<Self> {
        if source.window_shape() != target.window_shape() {
            return Err(Error::Shape(format!(
                "source windows {:?} and target windows {:?} differ",
                source.window_shape(),
                target.window_shape()
            )));
        }
        let stats = fit_source_stats(source, source.fold(0)?)?;
        Ok(Self {
            source: normalize_bundle(source, &stats),
            target: normalize_bundle(target, &stats),
            stats,
        })
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.paths.datasets_root.as_deref();
        let source = load_dataset(&cfg.source, &cfg.data, root)?;
        let target = load_dataset(&cfg.target, &cfg.data, root)?;
        Self::new(&source, &target)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.source.window_shape().unwrap_or((0, 0))
    }

    /// Ids of the target folds.
    pub fn folds(&self) -> Vec<usize> {
        self.target.folds.iter().map(|f| f.fold_id).collect()
    }

    fn source_split(&self, split: Split) -> Result<Vec<SensorWindow>> {
        Ok(self.source.split_windows(self.source.fold(0)?, split))
    }

    /// Target train windows of `fold` with their labels removed.
    pub fn unlabeled_target(&self, fold: usize) -> Result<Vec<SensorWindow>> {
        let mut w = self.target.split_windows(self.target.fold(fold)?, Split::Train);
        for x in &mut w {
            x.label = None;
        }
        Ok(w)
    }
}

/// Source training windows for `seed`: the raw train split plus one copy
/// per suite transform, unless source augmentation is switched off.
pub fn source_training_set(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<Vec<SensorWindow>> {
    let raw = prep.source_split(Split::Train)?;
    if cfg.ablation.no_source_aug || cfg.augment.source_suite.is_empty() {
        return Ok(raw);
    }
    let mut bundle = prep.source.clone();
    bundle.windows = raw;
    Ok(augment_source_with(&bundle, &cfg.augment.source_suite, derive_seed(seed, "source-aug", 0))?.windows)
}

fn ctx(cfg: &ExperimentConfig, stage: StageName, seed: u64) -> RunContext {
    RunContext::new(seed, cfg.stage_hash(stage))
}

pub fn fit_teacher(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<(Classifier, StageResult)> {
    let train = source_training_set(cfg, prep, seed)?;
    let val = prep.source_split(Split::Val)?;
    let init = init_classifier(cfg.encoder, prep.shape(), prep.source.n_classes(), seed)?;
    train_teacher(init, &train, &val, &cfg.teacher, &ctx(cfg, StageName::Teacher, seed))
}

pub fn fit_pseudo_labels(cfg: &ExperimentConfig, prep: &Prepared, teacher: &Classifier, seed: u64, fold: usize) -> Result<PseudoLabelSet> {
    let target = prep.unlabeled_target(fold)?;
    pseudo_label(
        &mut teacher.clone(),
        prep.source.n_classes(),
        &target,
        &cfg.effective_weak(),
        cfg.pseudo_threshold,
        derive_seed(seed, "pseudo", fold as u64),
    )
}

pub fn fit_student(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    teacher: &Classifier,
    pseudo: &PseudoLabelSet,
    seed: u64,
    fold: usize,
) -> Result<(Classifier, StageResult)> {
    let target = prep.unlabeled_target(fold)?;
    let inputs = StudentInputs {
        target: &target,
        pseudo,
        weights: cfg.effective_loss(),
        strong: cfg.effective_strong(),
        view_pool: cfg.augment.view_pool.clone(),
    };
    let train = source_training_set(cfg, prep, seed)?;
    let val = prep.source_split(Split::Val)?;
    let ctx = ctx(cfg, StageName::Student, derive_seed(seed, "student", fold as u64));
    train_student(teacher, &train, &val, &inputs, &cfg.student, &ctx)
}

/// Seed of the few-shot runs of `(seed, fold)`; shared by every `n`, so
/// smaller label sets are prefixes of larger ones.
pub fn fewshot_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, "fewshot", fold as u64)
}

/// Fine-tunes a fresh head per `n` on the frozen encoder and scores it on
/// the fold's test users.
pub fn fewshot_runs(cfg: &ExperimentConfig, prep: &Prepared, encoder: &Network, seed: u64, fold: usize) -> Result<Vec<RunRecord>> {
    let data = FewshotData::build(encoder, &prep.target, prep.target.fold(fold)?)?;
    let n_classes = prep.target.n_classes();
    cfg.n_per_class
        .iter()
        .map(|&n| {
            let out = fewshot_finetune(&data, n, fewshot_seed(seed, fold), &cfg.fewshot)?;
            let (_, f1) = out.evaluate(data.test(), n_classes)?;
            Ok(RunRecord {
                seed,
                fold,
                n_per_class: n,
                f1,
            })
        })
        .collect()
}

fn conv_classifier_runs(cfg: &ExperimentConfig, prep: &Prepared, seed: u64, fold: usize) -> Result<Vec<RunRecord>> {
    let spec = prep.target.fold(fold)?;
    let test = prep.target.split_windows(spec, Split::Test);
    let test_refs: Vec<&SensorWindow> = test.iter().filter(|w| w.label.is_some()).collect();
    cfg.n_per_class
        .iter()
        .map(|&n| {
            let ctx = ctx(cfg, StageName::Baseline, fewshot_seed(seed, fold));
            let (mut model, _, _) = train_conv_classifier(cfg.encoder, &prep.target, spec, n, &cfg.baselines.classifier, &ctx)?;
            let (_, f1) = model.evaluate(&test_refs)?;
            Ok(RunRecord {
                seed,
                fold,
                n_per_class: n,
                f1,
            })
        })
        .collect()
}

/// Runs stages in memory and memoizes teachers per seed.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub prepared: Prepared,
    teachers: BTreeMap<u64, Classifier>,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        crate::experiment::config::ensure_valid(&config)?;
        let prepared = Prepared::load(&config)?;
        Ok(Self::with_data(config, prepared))
    }

    pub fn with_data(config: ExperimentConfig, prepared: Prepared) -> Self {
        Self {
            config,
            prepared,
            teachers: BTreeMap::new(),
        }
    }

    /// Supplies a previously trained teacher for `seed`.
    pub fn insert_teacher(&mut self, seed: u64, teacher: Classifier) {
        self.teachers.insert(seed, teacher);
    }

    pub fn teacher(&mut self, seed: u64) -> Result<Classifier> {
        if let Some(t) = self.teachers.get(&seed) {
            return Ok(t.clone());
        }
        let (t, result) = fit_teacher(&self.config, &self.prepared, seed)?;
        log::info!(
            "teacher seed {seed}: best epoch {:?}, val F1 {:?}, {:.1}s",
            result.best_epoch,
            result.best_val_f1,
            result.wall_time_s
        );
        self.teachers.insert(seed, t.clone());
        Ok(t)
    }

    /// Runs of `method` for one seed over every target fold.
    fn runs_for_seed(&mut self, method: Method, seed: u64) -> Result<Vec<RunRecord>> {
        let teacher = match method {
            Method::CrossDomainHar | Method::NaiveTransfer => Some(self.teacher(seed)?),
            _ => None,
        };
        let (cfg, prep) = (&self.config, &self.prepared);
        let folds = prep.folds();
        let per_fold: Vec<Vec<RunRecord>> = match (method, teacher) {
            (Method::CrossDomainHar, Some(teacher)) => {
                folds
                    .par_iter()
                    .map(|&f| {
                        let pseudo = fit_pseudo_labels(cfg, prep, &teacher, seed, f)?;
                        let (student, r) = fit_student(cfg, prep, &teacher, &pseudo, seed, f)?;
                        log::info!(
                            "student seed {seed} fold {f}: {} pseudo-labels, best epoch {:?}, {:.1}s",
                            pseudo.entries.len(),
                            r.best_epoch,
                            r.wall_time_s
                        );
                        fewshot_runs(cfg, prep, &student.encoder, seed, f)
                    })
                    .collect::<Result<_>>()?
            }
            (Method::NaiveTransfer, Some(teacher)) => {
                folds
                    .par_iter()
                    .map(|&f| fewshot_runs(cfg, prep, &teacher.encoder, seed, f))
                    .collect::<Result<_>>()?
            }
            (Method::ConvClassifier, _) => {
                folds
                    .par_iter()
                    .map(|&f| conv_classifier_runs(cfg, prep, seed, f))
                    .collect::<Result<_>>()?
            }
            (Method::Simclr | Method::Cpc, _) => {
                let ctx = ctx(cfg, StageName::Baseline, derive_seed(seed, method.tag(), 0));
                let result = if method == Method::Simclr {
                    pretrain_simclr(cfg.encoder, &prep.source_split(Split::Train)?, &cfg.baselines.simclr, &ctx)?
                } else {
                    let (steps, channels) = prep.shape();
                    let stack = cpc_stack_spec(steps, channels, cfg.baselines.cpc.prediction_steps)?;
                    pretrain_cpc(&stack, &source_training_set(cfg, prep, seed)?, &cfg.baselines.cpc, &ctx)?
                };
                let encoder = downstream_encoder(&result.checkpoint)?;
                folds
                    .par_iter()
                    .map(|&f| fewshot_runs(cfg, prep, &encoder, seed, f))
                    .collect::<Result<_>>()?
            }
            (Method::CrossDomainHar | Method::NaiveTransfer, None) => unreachable!("teacher trained above"),
        };
        Ok(per_fold.into_iter().flatten().collect())
    }

    /// The full few-shot protocol of one method over every seed and fold.
    pub fn run_method(&mut self, method: Method) -> Result<MetricsReport> {
        self.run_method_as(method, method.tag())
    }

    /// Like [`Pipeline::run_method`], reported under `tag`.
    pub fn run_method_as(&mut self, method: Method, tag: &str) -> Result<MetricsReport> {
        let mut runs = Vec::new();
        for seed in self.config.seeds.clone() {
            runs.extend(self.runs_for_seed(method, seed)?);
        }
        MetricsReport::from_runs(
            tag,
            self.config.target.clone(),
            self.config.hash(),
            &self.config.seeds,
            &self.prepared.folds(),
            &self.config.n_per_class,
            runs,
        )
    }
}
