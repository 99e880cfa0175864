//! Stage-by-stage execution with artifacts under a run directory.
//!
//! Layout:
//!
//! ```text
//! <run_dir>/<stage>/manifest.json            stage hash, seeds, input and output hashes
//! <run_dir>/ingest/{source,target}.cdhb      processed bundles (not normalized)
//! <run_dir>/teacher/seed<s>/teacher.ckpt     plus epochs.csv / steps.csv
//! <run_dir>/pseudolabel/seed<s>/fold<f>.json
//! <run_dir>/student/seed<s>/fold<f>/student.ckpt
//! <run_dir>/results/<method>/<target>/{report.csv,summary.json}
//! <run_dir>/results/comparison.csv, <target>_fewshot.svg
//! <run_dir>/search/result.json
//! ```
//!
//! A stage whose manifest carries the current stage hash, whose outputs
//! are intact and whose inputs still match upstream is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_bundle, write_bundle, CacheKey};
use crate::error::{Error, Result};
use crate::evaluation::ablation::ablation_suite_with;
use crate::evaluation::report::{compare_methods, MetricsReport, RunRecord};
use crate::experiment::config::{ensure_valid, ExperimentConfig, Method, SearchStage, StageName};
use crate::experiment::pipeline::{
    fewshot_runs, fewshot_seed, fit_pseudo_labels, fit_student, fit_teacher, load_dataset, Pipeline, Prepared,
};
use crate::models::Checkpoint;
use crate::training::{fewshot_finetune, hyperparameter_search, Classifier, FewshotData, PseudoLabelSet, SearchOutcome, SearchSpace};

/// Environment variable consulted when no datasets root is given.
pub const DATASETS_ROOT_ENV: &str = "CDHAR_DATASETS_ROOT";

const MANIFEST: &str = "manifest.json";

/// Provenance record written next to every stage's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: StageName,
    pub stage_hash: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Upstream artifacts consumed, relative path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Artifacts produced, relative path → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Ran(StageManifest),
    Cached(StageManifest),
}

impl StageOutcome {
    pub fn manifest(&self) -> &StageManifest {
        match self {
            StageOutcome::Ran(m) | StageOutcome::Cached(m) => m,
        }
    }

    pub fn is_cached(&self) -> bool {
        matches!(self, StageOutcome::Cached(_))
    }
}

/// Best candidate of a search, as ready-to-use overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub stage: SearchStage,
    pub outcome: SearchOutcome,
    pub overrides: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub struct Runner {
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
}

impl Runner {
    /// Validates the config and resolves the datasets root from the config
    /// or, failing that, [`DATASETS_ROOT_ENV`].
    pub fn new(mut config: ExperimentConfig, run_dir: impl Into<PathBuf>) -> Result<Self> {
        for d in ensure_valid(&config)? {
            log::info!("{d}");
        }
        if config.paths.datasets_root.is_none() {
            config.paths.datasets_root = std::env::var_os(DATASETS_ROOT_ENV).map(PathBuf::from);
        }
        Ok(Self {
            config,
            run_dir: run_dir.into(),
        })
    }

    fn stage_dir(&self, stage: StageName) -> PathBuf {
        self.run_dir.join(stage.as_str())
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.run_dir).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn abs(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    pub fn manifest(&self, stage: StageName) -> Option<StageManifest> {
        read_json(&self.stage_dir(stage).join(MANIFEST)).ok()
    }

    fn outputs_intact(&self, m: &StageManifest) -> bool {
        m.outputs
            .iter()
            .all(|(rel, hash)| sha256_file(&self.abs(rel)).map(|h| &h == hash).unwrap_or(false))
    }

    /// Upstream manifest that is present, current and intact.
    fn require(&self, stage: StageName) -> Result<StageManifest> {
        let dependency = |detail: String| Error::Dependency {
            stage: stage.to_string(),
            detail,
        };
        let m = self
            .manifest(stage)
            .ok_or_else(|| dependency(format!("no artifacts under {}", self.stage_dir(stage).display())))?;
        if m.stage_hash != self.config.stage_hash(stage) {
            return Err(dependency("artifacts were produced by a different configuration".into()));
        }
        if !self.outputs_intact(&m) {
            return Err(dependency("artifacts are missing or modified".into()));
        }
        Ok(m)
    }

    fn cached(&self, stage: StageName, inputs: &BTreeMap<String, String>) -> Option<StageManifest> {
        let m = self.manifest(stage)?;
        (m.stage_hash == self.config.stage_hash(stage) && &m.inputs == inputs && self.outputs_intact(&m)).then_some(m)
    }

    fn finish(&self, stage: StageName, inputs: BTreeMap<String, String>, outputs: &[PathBuf], start: Instant) -> Result<StageOutcome> {
        let outputs = outputs
            .iter()
            .map(|p| Ok((self.rel(p), sha256_file(p)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let m = StageManifest {
            stage,
            stage_hash: self.config.stage_hash(stage),
            config_hash: self.config.hash(),
            seeds: self.config.seeds.clone(),
            inputs,
            outputs,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        write_json(&self.stage_dir(stage).join(MANIFEST), &m)?;
        Ok(StageOutcome::Ran(m))
    }

    /// Runs one stage, reusing its artifacts when nothing changed.
    pub fn run(&self, stage: StageName) -> Result<StageOutcome> {
        use StageName::*;
        let deps: Vec<StageName> = match stage {
            Ingest => vec![],
            Teacher | Ablate => vec![Ingest],
            Pseudolabel | Baseline => vec![Ingest, Teacher],
            Student => vec![Ingest, Teacher, Pseudolabel],
            Fewshot => vec![Ingest, Student],
            Report => vec![Fewshot],
            Search => match self.config.search.stage {
                SearchStage::Fewshot => vec![Ingest, Student],
                SearchStage::Student => vec![Ingest, Teacher, Pseudolabel],
            },
        };
        let mut inputs = BTreeMap::new();
        for d in deps {
            inputs.extend(self.require(d)?.outputs);
        }
        if stage != Report {
            if let Some(m) = self.cached(stage, &inputs) {
                log::info!("{stage}: cache hit, reusing {}", self.stage_dir(stage).display());
                return Ok(StageOutcome::Cached(m));
            }
        }
        let start = Instant::now();
        let outputs = match stage {
            Ingest => self.ingest()?,
            Teacher => self.teacher()?,
            Pseudolabel => self.pseudolabel()?,
            Student => self.student()?,
            Fewshot => self.fewshot()?,
            Baseline => self.baseline()?,
            Ablate => self.ablate()?,
            Report => self.report()?,
            Search => self.search()?,
        };
        self.finish(stage, inputs, &outputs, start)
    }

    fn bundle_path(&self, role: &str) -> PathBuf {
        self.stage_dir(StageName::Ingest).join(format!("{role}.cdhb"))
    }

    fn ingest(&self) -> Result<Vec<PathBuf>> {
        let cfg = &self.config;
        let root = cfg.paths.datasets_root.as_deref();
        let mut out = Vec::new();
        for (role, id) in [("source", &cfg.source), ("target", &cfg.target)] {
            let bundle = load_dataset(id, &cfg.data, root)?;
            let key = CacheKey {
                dataset: id.clone(),
                window_len: cfg.data.window_len,
                overlap: cfg.data.overlap,
                rate_hz: cfg.data.rate_hz,
            };
            let path = self.bundle_path(role);
            fs::create_dir_all(self.stage_dir(StageName::Ingest)).map_err(|e| Error::io(&path, e))?;
            write_bundle(&path, &key, &bundle)?;
            log::info!("ingest: {id} -> {} windows, {} classes", bundle.windows.len(), bundle.n_classes());
            out.push(path);
        }
        Ok(out)
    }

    fn prepared(&self) -> Result<Prepared> {
        let (_, source) = read_bundle(&self.bundle_path("source"))?;
        let (_, target) = read_bundle(&self.bundle_path("target"))?;
        Prepared::new(&source, &target)
    }

    fn teacher_path(&self, seed: u64) -> PathBuf {
        self.stage_dir(StageName::Teacher).join(format!("seed{seed}")).join("teacher.ckpt")
    }

    fn pseudo_path(&self, seed: u64, fold: usize) -> PathBuf {
        self.stage_dir(StageName::Pseudolabel).join(format!("seed{seed}")).join(format!("fold{fold}.json"))
    }

    fn student_path(&self, seed: u64, fold: usize) -> PathBuf {
        self.stage_dir(StageName::Student)
            .join(format!("seed{seed}"))
            .join(format!("fold{fold}"))
            .join("student.ckpt")
    }

    fn load_classifier(path: &Path) -> Result<Classifier> {
        Classifier::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn teacher(&self) -> Result<Vec<PathBuf>> {
        let prep = self.prepared()?;
        let mut out = Vec::new();
        for &seed in &self.config.seeds {
            let (_, result) = fit_teacher(&self.config, &prep, seed)?;
            let path = self.teacher_path(seed);
            result.write_curves(path.parent().expect("seed dir"))?;
            result.checkpoint.save(&path)?;
            log::info!("teacher seed {seed}: best epoch {:?}, val F1 {:?}", result.best_epoch, result.best_val_f1);
            out.push(path);
        }
        Ok(out)
    }

    fn pseudolabel(&self) -> Result<Vec<PathBuf>> {
        let prep = self.prepared()?;
        let mut out = Vec::new();
        for &seed in &self.config.seeds {
            let teacher = Self::load_classifier(&self.teacher_path(seed))?;
            for fold in prep.folds() {
                let set = fit_pseudo_labels(&self.config, &prep, &teacher, seed, fold)?;
                let path = self.pseudo_path(seed, fold);
                write_json(&path, &set)?;
                out.push(path);
            }
        }
        Ok(out)
    }

    fn student(&self) -> Result<Vec<PathBuf>> {
        let prep = self.prepared()?;
        let mut out = Vec::new();
        for &seed in &self.config.seeds {
            let teacher = Self::load_classifier(&self.teacher_path(seed))?;
            for fold in prep.folds() {
                let pseudo: PseudoLabelSet = read_json(&self.pseudo_path(seed, fold))?;
                let (_, result) = fit_student(&self.config, &prep, &teacher, &pseudo, seed, fold)?;
                let path = self.student_path(seed, fold);
                result.write_curves(path.parent().expect("fold dir"))?;
                result.checkpoint.save(&path)?;
                log::info!("student seed {seed} fold {fold}: best epoch {:?}", result.best_epoch);
                out.push(path);
            }
        }
        Ok(out)
    }

    /// `<run_dir>/results/<method>/<target>`.
    pub fn results_dir(&self, method: &str) -> PathBuf {
        self.run_dir.join("results").join(method).join(&self.config.target)
    }

    fn write_report(&self, report: &MetricsReport) -> Result<Vec<PathBuf>> {
        let dir = self.results_dir(&report.method);
        report.write(&dir)?;
        for s in &report.summary {
            log::info!("{} n={}: F1 {:.4} ± {:.4}", report.method, s.n_per_class, s.mean_f1, s.std_f1);
        }
        Ok(vec![dir.join("report.csv"), dir.join("summary.json")])
    }

    fn fewshot(&self) -> Result<Vec<PathBuf>> {
        let prep = self.prepared()?;
        let mut runs: Vec<RunRecord> = Vec::new();
        for &seed in &self.config.seeds {
            for fold in prep.folds() {
                let student = Self::load_classifier(&self.student_path(seed, fold))?;
                runs.extend(fewshot_runs(&self.config, &prep, &student.encoder, seed, fold)?);
            }
        }
        let report = MetricsReport::from_runs(
            Method::CrossDomainHar.tag(),
            self.config.target.clone(),
            self.config.hash(),
            &self.config.seeds,
            &prep.folds(),
            &self.config.n_per_class,
            runs,
        )?;
        self.write_report(&report)
    }

    fn baseline(&self) -> Result<Vec<PathBuf>> {
        let mut pipeline = Pipeline::with_data(self.config.clone(), self.prepared()?);
        for &seed in &self.config.seeds {
            pipeline.insert_teacher(seed, Self::load_classifier(&self.teacher_path(seed))?);
        }
        let mut out = Vec::new();
        for &method in &self.config.baselines.methods {
            if method == Method::CrossDomainHar {
                continue;
            }
            out.extend(self.write_report(&pipeline.run_method(method)?)?);
        }
        Ok(out)
    }

    fn ablate(&self) -> Result<Vec<PathBuf>> {
        let prep = self.prepared()?;
        let mut out = Vec::new();
        for (_, report) in ablation_suite_with(&self.config, &prep)? {
            out.extend(self.write_report(&report)?);
        }
        Ok(out)
    }

    fn report(&self) -> Result<Vec<PathBuf>> {
        let results = self.run_dir.join("results");
        let mut reports = Vec::new();
        let mut methods: Vec<PathBuf> = fs::read_dir(&results)
            .map_err(|e| Error::io(&results, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        methods.sort();
        for dir in methods {
            let target_dir = dir.join(&self.config.target);
            if target_dir.join("summary.json").exists() {
                reports.push(MetricsReport::read(&target_dir)?);
            }
        }
        let cmp = compare_methods(&reports, &results)?;
        log::info!("report: {} rows, plots {:?}", cmp.rows, cmp.plots);
        let mut out = vec![cmp.table];
        out.extend(cmp.plots);
        Ok(out)
    }

    fn search(&self) -> Result<Vec<PathBuf>> {
        let cfg = &self.config;
        let s = cfg.search;
        let prep = self.prepared()?;
        let seed = cfg.seeds[0];
        let fold = s.fold;
        let score = |cfg: &ExperimentConfig, student: &Classifier| -> Result<f64> {
            let data = FewshotData::build(&student.encoder, &prep.target, prep.target.fold(fold)?)?;
            let out = fewshot_finetune(&data, s.n_per_class, fewshot_seed(seed, fold), &cfg.fewshot)?;
            Ok(out.evaluate(data.val(), data.n_classes)?.1)
        };
        let report = match s.stage {
            SearchStage::Fewshot => {
                let student = Self::load_classifier(&self.student_path(seed, fold))?;
                let outcome = hyperparameter_search(&SearchSpace::fewshot(), s.budget, seed, |c| {
                    let mut trial = cfg.clone();
                    trial.fewshot.lr = c.get("lr")? as f32;
                    trial.fewshot.weight_decay = c.get("weight_decay")? as f32;
                    score(&trial, &student)
                })?;
                let overrides = vec![
                    format!("fewshot.lr={}", outcome.best.get("lr")?),
                    format!("fewshot.weight_decay={}", outcome.best.get("weight_decay")?),
                ];
                SearchReport {
                    stage: s.stage,
                    outcome,
                    overrides,
                }
            }
            SearchStage::Student => {
                let teacher = Self::load_classifier(&self.teacher_path(seed))?;
                let pseudo: PseudoLabelSet = read_json(&self.pseudo_path(seed, fold))?;
                let outcome = hyperparameter_search(&SearchSpace::student(), s.budget, seed, |c| {
                    let mut trial = cfg.clone();
                    trial.student.lr = c.get("lr")? as f32;
                    trial.student.weight_decay = c.get("weight_decay")? as f32;
                    trial.student.batch_size = c.get("batch_size")? as usize;
                    trial.loss.lambda1 = c.get("lambda1")?;
                    trial.loss.lambda2 = c.get("lambda2")?;
                    let (student, _) = fit_student(&trial, &prep, &teacher, &pseudo, seed, fold)?;
                    score(&trial, &student)
                })?;
                let overrides = ["lr", "weight_decay", "batch_size"]
                    .iter()
                    .map(|k| Ok(format!("student.{k}={}", outcome.best.get(k)?)))
                    .chain(["lambda1", "lambda2"].iter().map(|k| Ok(format!("loss.{k}={}", outcome.best.get(k)?))))
                    .collect::<Result<Vec<_>>>()?;
                SearchReport {
                    stage: s.stage,
                    outcome,
                    overrides,
                }
            }
        };
        let path = self.stage_dir(StageName::Search).join("result.json");
        write_json(&path, &report)?;
        log::info!("search: best score {:.4} with {:?}", report.outcome.best_score, report.overrides);
        Ok(vec![path])
    }
}
