//! Experiment recipe, its canonical hash, `key=value` overrides and range
//! checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{source_suite, strong_policy, weak_policy, AugmentationSpec};
use crate::data::{FoldConfig, IngestionSchema};
use crate::error::{Error, Result};
use crate::training::{CpcHyper, EncoderKind, LossWeights, OptimHyper, SimclrHyper, DEFAULT_THRESHOLD};

/// Windowing and fold layout shared by both datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub rate_hz: f64,
    pub window_len: usize,
    pub overlap: f64,
    pub n_folds: usize,
    pub val_frac: f64,
    pub fold_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            rate_hz: 50.0,
            window_len: 50,
            overlap: 0.5,
            n_folds: 5,
            val_frac: 0.2,
            fold_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn folds(&self) -> FoldConfig {
        FoldConfig {
            n_folds: self.n_folds,
            test_frac: 1.0 / self.n_folds.max(1) as f64,
            val_frac: self.val_frac,
        }
    }

    pub fn schema(&self) -> IngestionSchema {
        IngestionSchema {
            target_rate_hz: self.rate_hz,
            window_len: self.window_len,
            overlap: self.overlap,
            folds: self.folds(),
            fold_seed: self.fold_seed,
        }
    }
}

/// Transform policies of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Copies added to the source training set, one per transform.
    pub source_suite: Vec<AugmentationSpec>,
    /// Applied to target windows before pseudo-labeling.
    pub weak: AugmentationSpec,
    /// Applied to target windows in the consistency term.
    pub strong: AugmentationSpec,
    /// Transforms the contrastive views are drawn from.
    pub view_pool: Vec<AugmentationSpec>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            source_suite: source_suite(),
            weak: weak_policy(),
            strong: strong_policy(),
            view_pool: source_suite(),
        }
    }
}

/// Methods the protocol can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CrossDomainHar,
    NaiveTransfer,
    ConvClassifier,
    Simclr,
    Cpc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::CrossDomainHar,
        Method::NaiveTransfer,
        Method::ConvClassifier,
        Method::Simclr,
        Method::Cpc,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::CrossDomainHar => "cross_domain_har",
            Method::NaiveTransfer => "naive_transfer",
            Method::ConvClassifier => "conv_classifier",
            Method::Simclr => "simclr",
            Method::Cpc => "cpc",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub methods: Vec<Method>,
    /// End-to-end classifier trained on the sampled target windows.
    pub classifier: OptimHyper,
    pub simclr: SimclrHyper,
    pub cpc: CpcHyper,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::NaiveTransfer, Method::ConvClassifier, Method::Simclr, Method::Cpc],
            classifier: OptimHyper::teacher(),
            simclr: SimclrHyper::default(),
            cpc: CpcHyper::default(),
        }
    }
}

/// Component switches used by the ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Drop the contrastive term.
    pub no_simclr: bool,
    /// Use unperturbed target windows for pseudo-labels and consistency.
    pub no_consistency: bool,
    /// Train the teacher on the raw source only.
    pub no_source_aug: bool,
}

/// Which stage `search` tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStage {
    Student,
    #[default]
    Fewshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub stage: SearchStage,
    pub budget: usize,
    /// Labeled windows per class used to score candidates.
    pub n_per_class: usize,
    pub fold: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            stage: SearchStage::Fewshot,
            budget: 15,
            n_per_class: 25,
            fold: 0,
        }
    }
}

/// Locations; never part of any hash.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub datasets_root: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: String,
    pub target: String,
    pub encoder: EncoderKind,
    pub seeds: Vec<u64>,
    pub n_per_class: Vec<usize>,
    pub pseudo_threshold: f64,
    pub data: DataConfig,
    pub teacher: OptimHyper,
    pub student: OptimHyper,
    pub fewshot: OptimHyper,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub baselines: BaselineConfig,
    pub ablation: AblationFlags,
    pub search: SearchConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: SYNTHETIC_SOURCE.into(),
            target: SYNTHETIC_TARGET.into(),
            encoder: EncoderKind::Conv,
            seeds: vec![0, 1, 2, 3, 4],
            n_per_class: vec![2, 5, 10, 50, 100],
            pseudo_threshold: DEFAULT_THRESHOLD,
            data: DataConfig::default(),
            teacher: OptimHyper::teacher(),
            student: OptimHyper::teacher(),
            fewshot: OptimHyper::fewshot(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            baselines: BaselineConfig::default(),
            ablation: AblationFlags::default(),
            search: SearchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Short schedule for the bundled synthetic pair: three seeds, three
    /// label budgets and capped epochs, so a full run takes minutes.
    pub fn synthetic_quick() -> Self {
        let mut cfg = Self {
            seeds: vec![0, 1, 2],
            n_per_class: vec![2, 10, 50],
            ..Self::default()
        };
        cfg.teacher.max_epochs = 30;
        cfg.teacher.patience = 10;
        cfg.student.max_epochs = 10;
        cfg.student.patience = 10;
        cfg
    }
}

/// Built-in dataset ids served by the synthetic generators.
pub const SYNTHETIC_SOURCE: &str = "synthetic-source";
pub const SYNTHETIC_TARGET: &str = "synthetic-target";

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Ingest,
    Teacher,
    Pseudolabel,
    Student,
    Fewshot,
    Baseline,
    Ablate,
    Report,
    Search,
}

impl StageName {
    pub const ALL: [StageName; 9] = [
        StageName::Ingest,
        StageName::Teacher,
        StageName::Pseudolabel,
        StageName::Student,
        StageName::Fewshot,
        StageName::Baseline,
        StageName::Ablate,
        StageName::Report,
        StageName::Search,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Ingest => "ingest",
            StageName::Teacher => "teacher",
            StageName::Pseudolabel => "pseudolabel",
            StageName::Student => "student",
            StageName::Fewshot => "fewshot",
            StageName::Baseline => "baseline",
            StageName::Ablate => "ablate",
            StageName::Report => "report",
            StageName::Search => "search",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown stage `{s}`")))
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes through `serde_json::Value`, whose maps are key-sorted, so
/// the text does not depend on field or key order.
fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

fn hash_of<T: Serialize>(value: &T) -> String {
    sha256_hex(canonical_json(value).as_bytes())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON of everything except `paths`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        hash_of(&c)
    }

    /// Hash of the settings `stage` depends on, chained through its
    /// upstream stages, so a change only invalidates downstream work.
    pub fn stage_hash(&self, stage: StageName) -> String {
        let up = |s: StageName| self.stage_hash(s);
        let own = match stage {
            StageName::Ingest => canonical_json(&(&self.source, &self.target, &self.data)),
            StageName::Teacher => canonical_json(&(
                up(StageName::Ingest),
                self.encoder,
                &self.seeds,
                &self.teacher,
                &self.augment.source_suite,
                self.ablation.no_source_aug,
            )),
            StageName::Pseudolabel => canonical_json(&(
                up(StageName::Teacher),
                self.pseudo_threshold,
                &self.effective_weak(),
            )),
            StageName::Student => canonical_json(&(
                up(StageName::Pseudolabel),
                &self.student,
                &self.effective_loss(),
                &self.effective_strong(),
                &self.augment.view_pool,
            )),
            StageName::Fewshot => canonical_json(&(up(StageName::Student), &self.fewshot, &self.n_per_class)),
            StageName::Baseline => canonical_json(&(up(StageName::Teacher), &self.fewshot, &self.n_per_class, &self.baselines)),
            StageName::Ablate => canonical_json(&(up(StageName::Fewshot), &self.ablation)),
            StageName::Report => canonical_json(&(up(StageName::Fewshot), up(StageName::Baseline))),
            StageName::Search => canonical_json(&(up(StageName::Student), &self.search)),
        };
        sha256_hex(format!("{stage}:{own}").as_bytes())
    }

    /// Loss weights after the ablation switches.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss;
        if self.ablation.no_simclr {
            w.lambda2 = 0.0;
        }
        w
    }

    pub fn effective_weak(&self) -> AugmentationSpec {
        if self.ablation.no_consistency {
            AugmentationSpec::identity()
        } else {
            self.augment.weak.clone()
        }
    }

    pub fn effective_strong(&self) -> AugmentationSpec {
        if self.ablation.no_consistency {
            AugmentationSpec::identity()
        } else {
            self.augment.strong.clone()
        }
    }

    /// Applies one `key=value` override. Keys are dotted paths into the
    /// config (`student.lr`, `loss.lambda2`); values use TOML syntax and
    /// bare words are taken as strings. `seed=N` is shorthand for
    /// `seeds=[N]`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let (key, raw) = if key == "seed" {
            ("seeds", format!("[{raw}]"))
        } else {
            (key, raw.to_string())
        };
        let value = parse_toml_value(&raw);
        let mut root: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        set_path(&mut root, key, value)?;
        let text = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
        *self = toml::from_str(&text).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        assignments.iter().try_for_each(|a| self.apply_override(a.as_ref()))
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Known keys are those present in the serialized defaults, plus optional
/// path fields that serialize as absent.
fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Usage(format!("unknown config key `{key}`"));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().ok_or_else(unknown)?;
    root.entry("paths").or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let mut table = root;
    for p in parents {
        table = match table.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(unknown()),
        };
    }
    let optional_path = parents == ["paths"] && matches!(*last, "datasets_root" | "run_dir");
    if !table.contains_key(*last) && !optional_path {
        return Err(unknown());
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.severity {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}: {}", self.key, self.message)
    }
}

/// Range checks plus notes on departures from the reference defaults.
pub fn validate_config(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |severity, key: &str, message: String| {
        out.push(Diagnostic {
            severity,
            key: key.to_string(),
            message,
        })
    };
    use Severity::*;
    let reference = ExperimentConfig::default();

    if !(cfg.pseudo_threshold > 0.0 && cfg.pseudo_threshold < 1.0) {
        push(Error, "pseudo_threshold", format!("{} is outside (0, 1)", cfg.pseudo_threshold));
    } else if cfg.pseudo_threshold != DEFAULT_THRESHOLD {
        push(Warning, "pseudo_threshold", format!("{} differs from the reference {DEFAULT_THRESHOLD}", cfg.pseudo_threshold));
    }
    for (key, value, default) in [
        ("loss.lambda1", cfg.loss.lambda1, reference.loss.lambda1),
        ("loss.lambda2", cfg.loss.lambda2, reference.loss.lambda2),
    ] {
        if !(value >= 0.0 && value.is_finite()) {
            push(Error, key, format!("{value} must be a finite value >= 0"));
        } else if value == default {
            push(Info, key, format!("{value} matches the reference default"));
        } else {
            push(Warning, key, format!("{value} differs from the reference {default}"));
        }
    }
    if !(cfg.loss.temperature > 0.0) {
        push(Error, "loss.temperature", "must be > 0".into());
    }
    if cfg.seeds.is_empty() {
        push(Error, "seeds", "at least one seed is required".into());
    }
    let mut uniq = cfg.seeds.clone();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != cfg.seeds.len() {
        push(Error, "seeds", "seeds must be distinct".into());
    }
    if cfg.n_per_class.is_empty() || cfg.n_per_class.contains(&0) {
        push(Error, "n_per_class", "values must be positive and the list nonempty".into());
    }
    if cfg.source.is_empty() || cfg.target.is_empty() {
        push(Error, "source", "dataset ids must be nonempty".into());
    }
    let d = &cfg.data;
    if !(d.rate_hz > 0.0) || d.window_len == 0 || !(0.0..1.0).contains(&d.overlap) {
        push(Error, "data", "rate must be > 0, window_len > 0 and overlap in [0, 1)".into());
    }
    if d.n_folds < 2 {
        push(Error, "data.n_folds", "at least two folds are required".into());
    }
    if !(0.0..1.0).contains(&d.val_frac) {
        push(Error, "data.val_frac", "must be in [0, 1)".into());
    }
    for (key, hp) in [
        ("teacher", &cfg.teacher),
        ("student", &cfg.student),
        ("fewshot", &cfg.fewshot),
        ("baselines.classifier", &cfg.baselines.classifier),
        ("baselines.simclr.optim", &cfg.baselines.simclr.optim),
        ("baselines.cpc.optim", &cfg.baselines.cpc.optim),
    ] {
        if let Err(e) = hp.validate(key) {
            push(Error, key, e.to_string());
        }
        if hp.max_epochs == 0 {
            push(Warning, key, "max_epochs is 0; the stage keeps its initial weights".into());
        }
    }
    let a = &cfg.augment;
    for (key, spec) in std::iter::once(("augment.weak", &a.weak))
        .chain(std::iter::once(("augment.strong", &a.strong)))
        .chain(a.source_suite.iter().map(|s| ("augment.source_suite", s)))
        .chain(a.view_pool.iter().map(|s| ("augment.view_pool", s)))
    {
        if let Err(e) = spec.validate() {
            push(Error, key, e.to_string());
        }
    }
    if a.view_pool.len() < 2 {
        push(Error, "augment.view_pool", "needs at least two transforms".into());
    }
    if cfg.search.budget == 0 || cfg.search.n_per_class == 0 {
        push(Error, "search", "budget and n_per_class must be positive".into());
    }
    if cfg.search.fold >= d.n_folds {
        push(Error, "search.fold", format!("fold {} does not exist", cfg.search.fold));
    }
    out
}

/// Fails on the first error-level diagnostic.
pub fn ensure_valid(cfg: &ExperimentConfig) -> Result<Vec<Diagnostic>> {
    let diags = validate_config(cfg);
    if let Some(d) = diags.iter().find(|d| d.severity == Severity::Error) {
        return Err(Error::Config(d.to_string()));
    }
    Ok(diags)
}
