//! Experiment configuration, pipeline stages and their on-disk artifacts.
//!
//! One experiment lives in one output directory:
//!
//! ```text
//! <out>/config.toml            resolved configuration
//! <out>/checkpoints/*.ckpt     backbone checkpoints
//! <out>/bpda/bpda-<kind>.bin   BPDA surrogates
//! <out>/adv/<variant>.adv      adversarial archives
//! <out>/results.csv            one row per stage result
//! <out>/stats.csv              per-input gradient statistics
//! <out>/plotdata/*.csv         curves and bars for plotting
//! <out>/tuning/history.csv     tuner trials (resumable)
//! ```
//!
//! CSV files open with a versioned `#` comment line. The only
//! non-deterministic column anywhere is `timestamp` in `results.csv`.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{self, AttackConfig, Objective, RunOptions};
use crate::backbone::{self, Backbone, BackboneArch, Classifier, TrainConfig};
use crate::bpda::{self, BpdaTrainConfig, SurrogateSet};
use crate::data::{Dataset, DatasetSpec};
use crate::defense::{self, DecisionRule, DefenseConfig};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::transforms::{Group, TransformKind, TransformSpec};
use crate::tuner::{self, TunerConfig, TunerState};

pub const RESULTS_HEADER: &str = "# rtgauntlet results v1";
pub const STATS_HEADER: &str = "# rtgauntlet stats v1";
pub const PLOT_HEADER: &str = "# rtgauntlet plotdata v1";
pub const ARCHIVE_MAGIC: &[u8] = b"RTGAUNTLET-ADV-v1\n";

/// Kinds of the shipped desk defense: noise, blur, colour, stylization and
/// geometric transforms that a small classifier can be trained through.
pub const DESK_KINDS: [TransformKind; 8] = [
    TransformKind::GaussianNoise,
    TransformKind::UniformNoise,
    TransformKind::GaussianBlur,
    TransformKind::ColorJitter,
    TransformKind::Gamma,
    TransformKind::Affine,
    TransformKind::Crop,
    TransformKind::HFlip,
];

pub fn desk_defense() -> DefenseConfig {
    DefenseConfig::new(DESK_KINDS.iter().map(|&k| TransformSpec::default_for(k)).collect(), 4)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Train,
    AdvTrain,
    Attack,
    Evaluate,
    Tune,
    BpdaTrain,
    Diagnose,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Train,
        Stage::AdvTrain,
        Stage::Attack,
        Stage::Evaluate,
        Stage::Tune,
        Stage::BpdaTrain,
        Stage::Diagnose,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::AdvTrain => "adv-train",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
            Stage::Tune => "tune",
            Stage::BpdaTrain => "bpda-train",
            Stage::Diagnose => "diagnose",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Named bundles of attack/defense variants run against one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// EoT baseline, linear loss, and linear loss with SGM and AggMo.
    Table2Desk,
    /// The strong attack evaluated under each decision rule.
    Rules,
    /// The defense restricted to one transform group at a time.
    Groups,
    /// Chain lengths 2, 6 and 10 (capped at K).
    SSweep,
}

/// Which checkpoint the attack-side stages use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    #[default]
    Clean,
    Adv,
    Tuned,
}

impl ModelChoice {
    pub fn file(self) -> &'static str {
        match self {
            ModelChoice::Clean => "model.ckpt",
            ModelChoice::Adv => "model-adv.ckpt",
            ModelChoice::Tuned => "model-tuned.ckpt",
        }
    }

    fn producer(self) -> Stage {
        match self {
            ModelChoice::Clean => Stage::Train,
            ModelChoice::Adv => Stage::AdvTrain,
            ModelChoice::Tuned => Stage::Tune,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Independent defense evaluations per adversarial set.
    pub n_runs: usize,
    pub at_least_once_trials: Option<usize>,
    /// Test inputs drawn (seeded) from the test split.
    pub test_size: usize,
    pub model: ModelChoice,
    /// Attack steps at which accuracy-vs-steps points are recorded.
    pub curve_steps: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_runs: 10, at_least_once_trials: None, test_size: 500, model: ModelChoice::Clean, curve_steps: Vec::new() }
    }
}

/// One objective variant measured by the `diagnose` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagVariant {
    pub objective: Objective,
    #[serde(default = "one")]
    pub sgm_scale: f64,
    #[serde(default)]
    pub fixed_perm: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub inputs: usize,
    pub variants: Vec<DiagVariant>,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        let mut variants: Vec<DiagVariant> = Objective::ALL
            .iter()
            .map(|&objective| DiagVariant { objective, sgm_scale: 1.0, fixed_perm: false })
            .collect();
        variants.push(DiagVariant { objective: Objective::Linear, sgm_scale: 0.5, fixed_perm: false });
        DiagnoseConfig { inputs: 100, variants }
    }
}

/// Tuning loop settings around the generic optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    #[serde(flatten)]
    pub search: TunerConfig,
    /// Fraction of the training split used to train each trial model.
    pub train_fraction: f64,
    /// Held-out images the trial attack is evaluated on.
    pub val_samples: usize,
    pub trial_epochs: usize,
    pub trial_attack_steps: usize,
    pub trial_attack_n: usize,
    /// Retrain the best point on all data and evaluate it.
    pub finalize: bool,
    pub final_n_train: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            search: TunerConfig::default(),
            train_fraction: 0.2,
            val_samples: 200,
            trial_epochs: 10,
            trial_attack_steps: 100,
            trial_attack_n: 10,
            finalize: true,
            final_n_train: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: Option<Preset>,
    pub dataset: DatasetSpec,
    pub arch: BackboneArch,
    pub defense: DefenseConfig,
    pub attack: AttackConfig,
    pub train: TrainConfig,
    pub bpda: BpdaTrainConfig,
    pub tuner: TuneConfig,
    pub eval: EvalConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            preset: None,
            dataset: DatasetSpec::default(),
            arch: BackboneArch::default(),
            defense: desk_defense(),
            attack: AttackConfig::default(),
            train: TrainConfig::default(),
            bpda: BpdaTrainConfig::default(),
            tuner: TuneConfig::default(),
            eval: EvalConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    // `serde_json::Value` objects keep keys sorted, which makes the
    // serialisation canonical.
    let canonical = serde_json::to_value(value).expect("config serialises");
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.arch.validate()?;
        self.defense.validate()?;
        self.attack.validate()?;
        self.train.validate()?;
        self.tuner.search.validate()?;
        if self.dataset.image_size() != self.arch.image_size {
            return Err(Error::Config(format!(
                "dataset image size {} differs from the architecture's {}",
                self.dataset.image_size(),
                self.arch.image_size
            )));
        }
        if self.eval.n_runs == 0 || self.eval.test_size == 0 {
            return Err(Error::Config("eval.n_runs and eval.test_size must be positive".into()));
        }
        if self.eval.at_least_once_trials == Some(0) {
            return Err(Error::Config("eval.at_least_once_trials must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tuner.train_fraction) || self.tuner.final_n_train == 0 {
            return Err(Error::Config("tuner.train_fraction must lie in [0, 1] and final_n_train >= 1".into()));
        }
        Ok(())
    }

    /// Parses TOML text and applies `key.path=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Artifact { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    /// Digest of the whole configuration.
    pub fn digest(&self) -> String {
        sha256_json(self)
    }

    /// Digest of everything that determines the trained weights.
    pub fn model_digest(&self, choice: ModelChoice) -> String {
        #[derive(Serialize)]
        struct ModelKey<'a> {
            seed: u64,
            dataset: &'a DatasetSpec,
            arch: &'a BackboneArch,
            defense: &'a DefenseConfig,
            train: &'a TrainConfig,
            tuner: Option<&'a TuneConfig>,
            choice: ModelChoice,
        }
        sha256_json(&ModelKey {
            seed: self.seed,
            dataset: &self.dataset,
            arch: &self.arch,
            defense: &self.defense,
            train: &self.train,
            tuner: (choice == ModelChoice::Tuned).then_some(&self.tuner),
            choice,
        })
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` does not address a section")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Accuracy over `n_runs` independent defense evaluations of the same
/// inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    /// 95% half-width; `None` with fewer than two runs.
    pub ci_half_width: Option<f64>,
    pub runs: Vec<f64>,
    pub config_digest: String,
}

impl EvalResult {
    pub fn from_runs(runs: Vec<f64>, config_digest: String) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let ci_half_width = (runs.len() >= 2).then(|| {
            let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        });
        EvalResult { mean, ci_half_width, runs, config_digest }
    }

    pub fn interval(&self) -> (f64, f64) {
        let h = self.ci_half_width.unwrap_or(0.0);
        (self.mean - h, self.mean + h)
    }

    /// Whether the two confidence intervals are disjoint.
    pub fn separated_from(&self, other: &EvalResult) -> bool {
        let (a, b) = (self.interval(), other.interval());
        a.1 < b.0 || b.1 < a.0
    }
}

/// Run `r` re-seeds only the transform sampling, with `(seed, r)`.
pub fn evaluate_with_ci(
    model: &(impl Classifier + ?Sized),
    defense: &DefenseConfig,
    inputs: &Tensor<f32>,
    labels: &[usize],
    n_runs: usize,
    seed: u64,
) -> Result<EvalResult> {
    if n_runs == 0 {
        return Err(Error::Parameter("n_runs must be at least 1".into()));
    }
    let runs = (0..n_runs)
        .map(|r| defense::accuracy(model, inputs, labels, defense, rng::derive(seed, &[r as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_runs(runs, String::new()))
}

/// An input counts as correct only if all `m_trials` stochastic
/// evaluations classify it correctly.
pub fn at_least_once_eval(
    model: &(impl Classifier + ?Sized),
    defense: &DefenseConfig,
    inputs: &Tensor<f32>,
    labels: &[usize],
    m_trials: usize,
    seed: u64,
) -> Result<f64> {
    if m_trials == 0 {
        return Err(Error::Parameter("m_trials must be at least 1".into()));
    }
    let mut ok = vec![true; labels.len()];
    for t in 0..m_trials {
        let pred = defense::predict_batch(model, inputs, defense, rng::derive(seed, &[t as u64]))?;
        for ((o, p), y) in ok.iter_mut().zip(&pred).zip(labels) {
            *o &= p == y;
        }
    }
    Ok(ok.iter().filter(|&&o| o).count() as f64 / labels.len().max(1) as f64)
}

/// One attack/defense pairing run against a single model.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
}

/// Variants of a preset, or the configured attack alone.
pub fn variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let main = |name: &str, attack: AttackConfig, defense: DefenseConfig| Variant { name: name.into(), attack, defense };
    let eps = cfg.attack.epsilon;
    let base = &cfg.attack;
    match cfg.preset {
        None => vec![main("main", base.clone(), cfg.defense.clone())],
        Some(Preset::Table2Desk) => {
            let budget = |a: AttackConfig| AttackConfig {
                steps: base.steps,
                n_attack: base.n_attack,
                gradient_mode: base.gradient_mode,
                ..a
            };
            let linear = AttackConfig { objective: Objective::Linear, ..AttackConfig::eot_baseline(eps) };
            vec![
                main("eot_ce", budget(AttackConfig::eot_baseline(eps)), cfg.defense.clone()),
                main("linear", budget(linear), cfg.defense.clone()),
                main("linear+sgm+aggmo", budget(AttackConfig::strong(eps)), cfg.defense.clone()),
            ]
        }
        Some(Preset::Rules) => [DecisionRule::SoftmaxMean, DecisionRule::LogitsMean, DecisionRule::MajorityVote]
            .into_iter()
            .map(|rule| {
                let name = serde_json::to_value(rule).expect("rule").as_str().expect("name").to_string();
                main(&name, base.clone(), DefenseConfig { rule, ..cfg.defense.clone() })
            })
            .collect(),
        Some(Preset::Groups) => Group::ALL
            .into_iter()
            .filter_map(|g| {
                let specs: Vec<TransformSpec> = cfg.defense.specs.iter().filter(|s| s.group == g).cloned().collect();
                (!specs.is_empty()).then(|| {
                    let s = cfg.defense.s.min(specs.len());
                    main(g.name(), base.clone(), DefenseConfig { specs, s, ..cfg.defense.clone() })
                })
            })
            .collect(),
        Some(Preset::SSweep) => {
            let k = cfg.defense.k();
            let mut seen = Vec::new();
            [2usize, 6, 10]
                .into_iter()
                .map(|s| s.min(k))
                .filter(|s| {
                    let fresh = !seen.contains(s);
                    seen.push(*s);
                    fresh
                })
                .map(|s| main(&format!("s{s}"), base.clone(), DefenseConfig { s, ..cfg.defense.clone() }))
                .collect()
        }
    }
}

/// Adversarial examples with the identity of their sources.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvArchive {
    pub variant: String,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub config_digest: String,
    pub model_digest: String,
    pub images: Tensor<f32>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    variant: String,
    ids: Vec<String>,
    labels: Vec<usize>,
    seed: u64,
    config_digest: String,
    model_digest: String,
    shape: Vec<usize>,
}

impl AdvArchive {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let header = serde_json::to_vec(&ArchiveHeader {
            variant: self.variant.clone(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            seed: self.seed,
            config_digest: self.config_digest.clone(),
            model_digest: self.model_digest.clone(),
            shape: self.images.shape().to_vec(),
        })?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(ARCHIVE_MAGIC)?;
        f.write_u64::<LittleEndian>(header.len() as u64)?;
        f.write_all(&header)?;
        for &v in self.images.data() {
            f.write_f32::<LittleEndian>(v)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Artifact { path: path.to_path_buf(), reason: reason.into() };
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = vec![0u8; ARCHIVE_MAGIC.len()];
        f.read_exact(&mut magic).map_err(|_| bad("truncated archive"))?;
        if magic != ARCHIVE_MAGIC {
            return Err(bad("not an adversarial archive"));
        }
        let len = f.read_u64::<LittleEndian>()? as usize;
        let mut header = vec![0u8; len];
        f.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        let h: ArchiveHeader = serde_json::from_slice(&header)?;
        let count: usize = h.shape.iter().product();
        if h.shape.first() != Some(&h.ids.len()) || h.ids.len() != h.labels.len() {
            return Err(bad("header sizes disagree"));
        }
        let mut data = vec![0f32; count];
        f.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated image data"))?;
        Ok(AdvArchive {
            variant: h.variant,
            ids: h.ids,
            labels: h.labels,
            seed: h.seed,
            config_digest: h.config_digest,
            model_digest: h.model_digest,
            images: Tensor::new(&h.shape, data),
        })
    }
}

/// One row of `results.csv`. Metrics that do not apply stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub stage: String,
    pub variant: String,
    pub model: String,
    pub objective: String,
    pub modifier: String,
    pub epsilon: String,
    pub steps: String,
    pub n_attack: String,
    pub s: String,
    pub rule: String,
    pub n_inputs: usize,
    pub metric: String,
    pub value: f64,
    pub ci_half_width: String,
    pub runs: String,
    pub config_digest: String,
    pub timestamp: String,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn now() -> String {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs().to_string()).unwrap_or_default()
}

/// Writes a CSV whose first line is `header`.
fn write_csv<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    read_csv(path)
}

/// Replaces the rows of `stage` in `results.csv`, keeping other stages'.
fn update_results(out: &Path, stage: Stage, rows: Vec<ResultRow>) -> Result<()> {
    let path = out.join("results.csv");
    let mut all: Vec<ResultRow> = if path.exists() { read_results(&path)? } else { Vec::new() };
    all.retain(|r| r.stage != stage.name());
    all.extend(rows);
    let order = |r: &ResultRow| Stage::ALL.iter().position(|s| s.name() == r.stage).unwrap_or(usize::MAX);
    all.sort_by_key(order);
    write_csv(&path, RESULTS_HEADER, &all)
}

/// `stats.csv` row: spread of the gradient samples at one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub input_id: String,
    pub objective: String,
    pub modifier: String,
    pub n: usize,
    pub variance: f64,
    pub cosine: Option<f64>,
    pub sign_match: f64,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    variant: &'a str,
    step: usize,
    adv_acc: f64,
}

#[derive(Serialize)]
struct BarRow {
    objective: String,
    modifier: String,
    inputs: usize,
    median_variance: f64,
    q25_variance: f64,
    q75_variance: f64,
    median_cosine: f64,
    median_sign_match: f64,
}

#[derive(Serialize)]
struct HistoryRow {
    model: &'static str,
    epoch: usize,
    lr: f64,
    loss: f64,
    train_acc: f64,
    val_acc: f64,
}

#[derive(Serialize)]
struct SurrogateLossRow {
    kind: String,
    epoch: usize,
    mse: f64,
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// A prepared experiment directory.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("config.toml"), cfg.to_toml())?;
        Ok(Experiment { cfg, out })
    }

    fn checkpoint(&self, choice: ModelChoice) -> PathBuf {
        self.out.join("checkpoints").join(choice.file())
    }

    fn archive(&self, variant: &str) -> PathBuf {
        self.out.join("adv").join(format!("{}.adv", variant.replace(['/', '+'], "_")))
    }

    fn data(&self) -> Result<(Dataset, Dataset)> {
        self.cfg.dataset.load(rng::derive(self.cfg.seed, &[rng::tag("data")]))
    }

    /// The seeded evaluation subset of the test split.
    pub fn test_inputs(&self) -> Result<Dataset> {
        let (_, test) = self.data()?;
        Ok(if test.len() > self.cfg.eval.test_size {
            test.sample(self.cfg.eval.test_size, &mut rng::stream(self.cfg.seed, &[rng::tag("test-subset")]))
        } else {
            test
        })
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        rng::derive(self.cfg.seed, &[rng::tag(stage.name())])
    }

    pub fn load_model(&self, choice: ModelChoice, stage: Stage) -> Result<Backbone> {
        let path = self.checkpoint(choice);
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: stage.name().into(),
                missing: format!("checkpoint {} (run `{}` first)", path.display(), choice.producer()),
            });
        }
        let model = Backbone::load(&path)?;
        let expected = self.cfg.model_digest(choice);
        if model.config_digest != expected {
            return Err(Error::DigestMismatch { expected, found: model.config_digest });
        }
        Ok(model)
    }

    fn surrogates(&self, variants: &[Variant], stage: Stage) -> Result<Option<SurrogateSet>> {
        let mut kinds: Vec<TransformKind> = variants
            .iter()
            .flat_map(|v| bpda::required_surrogates(&v.defense.specs, v.attack.gradient_mode))
            .collect();
        kinds.sort();
        kinds.dedup();
        if kinds.is_empty() {
            return Ok(None);
        }
        let dir = self.out.join("bpda");
        for &k in &kinds {
            if !dir.join(bpda::surrogate_file(k)).exists() {
                return Err(Error::MissingStage {
                    stage: stage.name().into(),
                    missing: format!("a BPDA surrogate for `{k}` (run `bpda-train` first)"),
                });
            }
        }
        Ok(Some(bpda::load_surrogates(&dir, &kinds)?))
    }

    fn row(&self, stage: Stage, variant: &str, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            stage: stage.name().into(),
            variant: variant.into(),
            model: String::new(),
            metric: metric.into(),
            value,
            config_digest: self.cfg.digest(),
            timestamp: now(),
            ..Default::default()
        }
    }

    fn attack_row(&self, stage: Stage, v: &Variant, metric: &str, value: f64, n_inputs: usize) -> ResultRow {
        let model = serde_json::to_value(self.cfg.eval.model).expect("choice");
        ResultRow {
            model: model.as_str().unwrap_or_default().into(),
            objective: v.attack.objective.name().into(),
            modifier: v.attack.modifier_label(),
            epsilon: fmt_f(v.attack.epsilon),
            steps: v.attack.steps.to_string(),
            n_attack: v.attack.n_attack.to_string(),
            s: v.defense.s.to_string(),
            rule: serde_json::to_value(v.defense.rule).expect("rule").as_str().unwrap_or_default().into(),
            n_inputs,
            ..self.row(stage, &v.name, metric, value)
        }
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        log::info!("stage {stage} in {}", self.out.display());
        match stage {
            Stage::Train => self.train(),
            Stage::AdvTrain => self.adv_train(),
            Stage::Attack => self.attack(),
            Stage::Evaluate => self.evaluate().map(|_| ()),
            Stage::Tune => self.tune(),
            Stage::BpdaTrain => self.bpda_train(),
            Stage::Diagnose => self.diagnose(),
            Stage::Report => self.report(),
        }
    }

    fn write_history(&self, model: &'static str, h: &backbone::TrainHistory) -> Result<()> {
        let rows: Vec<HistoryRow> = h
            .epochs
            .iter()
            .map(|e| HistoryRow { model, epoch: e.epoch, lr: e.lr, loss: e.loss, train_acc: e.train_acc, val_acc: e.val_acc })
            .collect();
        write_csv(&self.out.join("plotdata").join(format!("train_history_{model}.csv")), PLOT_HEADER, &rows)
    }

    fn clean_rows(&self, stage: Stage, name: &str, model: &Backbone) -> Result<Vec<ResultRow>> {
        let test = self.test_inputs()?;
        let rt = evaluate_with_ci(model, &self.cfg.defense, &test.images, &test.labels, self.cfg.eval.n_runs, self.stage_seed(Stage::Evaluate))?;
        let mut plain = self.row(stage, name, "clean_acc_plain", model.accuracy(&test));
        plain.n_inputs = test.len();
        let mut rt_row = self.row(stage, name, "clean_acc_rt", rt.mean);
        rt_row.n_inputs = test.len();
        rt_row.ci_half_width = rt.ci_half_width.map(fmt_f).unwrap_or_default();
        rt_row.runs = rt.runs.len().to_string();
        rt_row.s = self.cfg.defense.s.to_string();
        Ok(vec![plain, rt_row])
    }

    fn train(&self) -> Result<()> {
        let (train, _) = self.data()?;
        let mut model = Backbone::new(self.cfg.arch.clone(), rng::derive(self.cfg.seed, &[rng::tag("init")]))?;
        model.config_digest = self.cfg.model_digest(ModelChoice::Clean);
        let h = backbone::train_clean(&mut model, &train, &self.cfg.train, Some(&self.cfg.defense), self.stage_seed(Stage::Train))?;
        model.save(&self.checkpoint(ModelChoice::Clean))?;
        self.write_history("clean", &h)?;
        let mut rows = self.clean_rows(Stage::Train, "clean", &model)?;
        rows.push(self.row(Stage::Train, "clean", "best_val_acc", h.best_val_acc));
        update_results(&self.out, Stage::Train, rows)
    }

    fn adv_train(&self) -> Result<()> {
        let (train, _) = self.data()?;
        let mut tcfg = self.cfg.train.clone();
        let adv = tcfg.adv.get_or_insert_with(Default::default);
        let pretrained = self.checkpoint(ModelChoice::Clean);
        let mut model = if adv.pretrain_clean && pretrained.exists() {
            self.load_model(ModelChoice::Clean, Stage::AdvTrain)?
        } else {
            Backbone::new(self.cfg.arch.clone(), rng::derive(self.cfg.seed, &[rng::tag("init")]))?
        };
        let h = backbone::adv_train(&mut model, &train, &tcfg, Some(&self.cfg.defense), self.stage_seed(Stage::AdvTrain))?;
        model.config_digest = self.cfg.model_digest(ModelChoice::Adv);
        model.save(&self.checkpoint(ModelChoice::Adv))?;
        self.write_history("adv", &h)?;
        let mut rows = self.clean_rows(Stage::AdvTrain, "adv", &model)?;
        rows.push(self.row(Stage::AdvTrain, "adv", "best_val_acc", h.best_val_acc));
        update_results(&self.out, Stage::AdvTrain, rows)
    }

    fn attack(&self) -> Result<()> {
        let model = self.load_model(self.cfg.eval.model, Stage::Attack)?;
        let test = self.test_inputs()?;
        let vars = variants(&self.cfg);
        let surrogates = self.surrogates(&vars, Stage::Attack)?;
        let seed = self.stage_seed(Stage::Attack);
        let mut curve = Vec::new();
        let mut rows = Vec::new();
        let mut names = Vec::new();
        for v in &vars {
            let opts = RunOptions { surrogates: surrogates.as_ref(), snapshot_steps: self.cfg.eval.curve_steps.clone() };
            let run = attack::pgd_run(&model, &test.images, &test.labels, &v.defense, &v.attack, seed, &opts)?;
            let eval_seed = self.stage_seed(Stage::Evaluate);
            for (step, snap) in &run.snapshots {
                let acc = defense::accuracy(&model, snap, &test.labels, &v.defense, eval_seed)?;
                curve.push((v.name.clone(), *step, acc));
            }
            let acc = defense::accuracy(&model, &run.x_adv, &test.labels, &v.defense, eval_seed)?;
            rows.push(self.attack_row(Stage::Attack, v, "adv_acc_single_run", acc, test.len()));
            AdvArchive {
                variant: v.name.clone(),
                ids: test.ids.clone(),
                labels: test.labels.clone(),
                seed,
                config_digest: self.cfg.digest(),
                model_digest: model.config_digest.clone(),
                images: run.x_adv,
            }
            .save(&self.archive(&v.name))?;
            names.push(v.name.clone());
        }
        if !self.cfg.eval.curve_steps.is_empty() {
            let rows: Vec<CurveRow> =
                curve.iter().map(|(v, step, acc)| CurveRow { variant: v, step: *step, adv_acc: *acc }).collect();
            write_csv(&self.out.join("plotdata").join("accuracy_vs_steps.csv"), PLOT_HEADER, &rows)?;
        }
        update_results(&self.out, Stage::Attack, rows)
    }

    /// Evaluates every variant's archive; returns `(variant, result)`.
    pub fn evaluate(&self) -> Result<Vec<(String, EvalResult)>> {
        let model = self.load_model(self.cfg.eval.model, Stage::Evaluate)?;
        let test = self.test_inputs()?;
        let mut rows = Vec::new();
        let mut out = Vec::new();
        for v in variants(&self.cfg) {
            let path = self.archive(&v.name);
            if !path.exists() {
                return Err(Error::MissingStage {
                    stage: Stage::Evaluate.name().into(),
                    missing: format!("adversarial archive {} (run `attack` first)", path.display()),
                });
            }
            let archive = AdvArchive::load(&path)?;
            if archive.model_digest != model.config_digest {
                return Err(Error::DigestMismatch { expected: model.config_digest.clone(), found: archive.model_digest });
            }
            if archive.ids != test.ids {
                return Err(Error::Artifact { path, reason: "archive inputs differ from the configured test subset".into() });
            }
            let seed = self.stage_seed(Stage::Evaluate);
            let mut res = evaluate_with_ci(&model, &v.defense, &archive.images, &archive.labels, self.cfg.eval.n_runs, seed)?;
            res.config_digest = archive.config_digest.clone();
            let mut row = self.attack_row(Stage::Evaluate, &v, "adv_acc", res.mean, archive.labels.len());
            row.ci_half_width = res.ci_half_width.map(fmt_f).unwrap_or_default();
            row.runs = res.runs.len().to_string();
            row.config_digest = archive.config_digest.clone();
            rows.push(row);
            if let Some(m) = self.cfg.eval.at_least_once_trials {
                let acc = at_least_once_eval(&model, &v.defense, &archive.images, &archive.labels, m, seed)?;
                let mut row = self.attack_row(Stage::Evaluate, &v, &format!("adv_acc_all_of_{m}"), acc, archive.labels.len());
                row.config_digest = archive.config_digest.clone();
                rows.push(row);
            }
            out.push((v.name, res));
        }
        update_results(&self.out, Stage::Evaluate, rows)?;
        Ok(out)
    }

    fn bpda_train(&self) -> Result<()> {
        let (train, _) = self.data()?;
        let kinds: Vec<TransformKind> = {
            let mut k: Vec<TransformKind> =
                self.cfg.defense.specs.iter().filter(|s| !s.differentiable).map(|s| s.kind).collect();
            k.dedup();
            k
        };
        if kinds.is_empty() {
            log::warn!("defense has no non-differentiable kinds; nothing to train");
        }
        let dir = self.out.join("bpda");
        let mut rows = Vec::new();
        let mut losses = Vec::new();
        for spec in self.cfg.defense.specs.iter().filter(|s| kinds.contains(&s.kind)) {
            let seed = rng::derive(self.stage_seed(Stage::BpdaTrain), &[rng::tag(spec.kind.name())]);
            let (net, hist) = bpda::train_bpda(spec, &train, &self.cfg.bpda, seed)?;
            net.save(&dir.join(bpda::surrogate_file(spec.kind)))?;
            let test = self.test_inputs()?;
            let mse = bpda::surrogate_mse(&net, spec, &test, seed)?;
            let mut row = self.row(Stage::BpdaTrain, spec.kind.name(), "surrogate_mse", mse);
            row.n_inputs = test.len();
            rows.push(row);
            losses.extend(
                hist.epoch_loss
                    .iter()
                    .enumerate()
                    .map(|(epoch, &mse)| SurrogateLossRow { kind: spec.kind.name().into(), epoch, mse }),
            );
        }
        write_csv(&self.out.join("plotdata").join("bpda_loss.csv"), PLOT_HEADER, &losses)?;
        update_results(&self.out, Stage::BpdaTrain, rows)
    }

    fn diagnose(&self) -> Result<()> {
        let model = self.load_model(self.cfg.eval.model, Stage::Diagnose)?;
        let test = self.test_inputs()?;
        let n = self.cfg.diagnose.inputs.min(test.len());
        let inputs = test.subset(&(0..n).collect::<Vec<_>>());
        let seed = self.stage_seed(Stage::Diagnose);
        let mut stats_rows = Vec::new();
        let mut bars = Vec::new();
        let attack_cfgs: Vec<AttackConfig> = self
            .cfg
            .diagnose
            .variants
            .iter()
            .map(|d| AttackConfig {
                objective: d.objective,
                sgm_scale: d.sgm_scale,
                fixed_perm: d.fixed_perm,
                targeted: false,
                target: None,
                linbp: false,
                ..self.cfg.attack.clone()
            })
            .collect();
        let vars: Vec<Variant> = attack_cfgs
            .iter()
            .map(|a| Variant { name: String::new(), attack: a.clone(), defense: self.cfg.defense.clone() })
            .collect();
        let surrogates = self.surrogates(&vars, Stage::Diagnose)?;
        for acfg in &attack_cfgs {
            let stats = diagnostics::diagnose_batch(
                &model,
                &inputs.images,
                &inputs.labels,
                &self.cfg.defense,
                acfg,
                seed,
                surrogates.as_ref(),
            )?;
            let modifier = acfg.modifier_label();
            for (id, s) in inputs.ids.iter().zip(&stats) {
                stats_rows.push(StatsRow {
                    input_id: id.clone(),
                    objective: acfg.objective.name().into(),
                    modifier: modifier.clone(),
                    n: s.n,
                    variance: s.variance,
                    cosine: s.cosine,
                    sign_match: s.sign_match,
                });
            }
            let var: Vec<f64> = stats.iter().map(|s| s.variance).collect();
            let cos: Vec<f64> = stats.iter().map(|s| s.cosine.unwrap_or(f64::NAN)).collect();
            let sm: Vec<f64> = stats.iter().map(|s| s.sign_match).collect();
            bars.push(BarRow {
                objective: acfg.objective.name().into(),
                modifier,
                inputs: stats.len(),
                median_variance: diagnostics::median(&var),
                q25_variance: quantile(&var, 0.25),
                q75_variance: quantile(&var, 0.75),
                median_cosine: diagnostics::median(&cos),
                median_sign_match: diagnostics::median(&sm),
            });
        }
        write_csv(&self.out.join("stats.csv"), STATS_HEADER, &stats_rows)?;
        write_csv(&self.out.join("plotdata").join("variance_bars.csv"), PLOT_HEADER, &bars)?;
        let rows = bars
            .iter()
            .flat_map(|b| {
                let name = format!("{}{}", b.objective, if b.modifier.is_empty() { String::new() } else { format!("+{}", b.modifier) });
                [("median_variance", b.median_variance), ("median_cosine", b.median_cosine), ("median_sign_match", b.median_sign_match)]
                    .map(|(m, v)| {
                        let mut r = self.row(Stage::Diagnose, &name, m, v);
                        r.objective = b.objective.clone();
                        r.modifier = b.modifier.clone();
                        r.n_inputs = b.inputs;
                        r
                    })
            })
            .collect();
        update_results(&self.out, Stage::Diagnose, rows)
    }

    fn tune(&self) -> Result<()> {
        let (train, _) = self.data()?;
        let tc = &self.cfg.tuner;
        let seed = self.stage_seed(Stage::Tune);
        let (fit, val) = tuning_split(&train, tc, seed);
        if fit.is_empty() || val.is_empty() {
            return Err(Error::Data("tuning split left no training or validation images".into()));
        }
        let k = self.cfg.defense.k();
        let history = self.out.join("tuning").join("history.csv");
        let resume = if history.exists() { Some(TunerState::read_csv(&history, &tc.search)?) } else { None };
        let objective = |v: &[f64]| trial_objective(&self.cfg, v, &fit, &val, seed);
        let state = tuner::tune(k, &tc.search, objective, seed, resume, Some(&history))?;
        let best = state.best().ok_or_else(|| Error::Undefined("no successful tuning trial".into()))?.clone();
        let tuned = tuned_defense(&self.cfg.defense, &best.values)?;
        std::fs::write(self.out.join("tuning").join("best_defense.json"), serde_json::to_string_pretty(&tuned)?)?;
        let mut rows = vec![self.row(Stage::Tune, "best", "trial_adv_acc", best.objective.unwrap_or(f64::NAN))];
        rows.push(self.row(Stage::Tune, "best", "trials", state.history.len() as f64));
        if tc.finalize {
            let test = self.test_inputs()?;
            let (model, clean, adv) = finalize(&self.cfg, &tuned, &train, &test, seed)?;
            let mut model = model;
            model.config_digest = self.cfg.model_digest(ModelChoice::Tuned);
            model.save(&self.checkpoint(ModelChoice::Tuned))?;
            for (metric, r) in [("final_clean_acc", clean), ("final_adv_acc", adv)] {
                let mut row = self.row(Stage::Tune, "final", metric, r.mean);
                row.ci_half_width = r.ci_half_width.map(fmt_f).unwrap_or_default();
                row.runs = r.runs.len().to_string();
                row.n_inputs = test.len();
                rows.push(row);
            }
        }
        update_results(&self.out, Stage::Tune, rows)
    }

    /// Summarises `results.csv` as a Markdown table in `report.md`.
    fn report(&self) -> Result<()> {
        let path = self.out.join("results.csv");
        if !path.exists() {
            return Err(Error::MissingStage { stage: Stage::Report.name().into(), missing: "results.csv (run any stage first)".into() });
        }
        let rows = read_results(&path)?;
        let mut md = String::from("| stage | variant | metric | value | 95% CI | inputs |\n|---|---|---|---|---|---|\n");
        for r in &rows {
            let ci = if r.ci_half_width.is_empty() { String::new() } else { format!("± {}", r.ci_half_width) };
            md.push_str(&format!("| {} | {} | {} | {:.4} | {} | {} |\n", r.stage, r.variant, r.metric, r.value, ci, r.n_inputs));
        }
        std::fs::write(self.out.join("report.md"), &md)?;
        Ok(())
    }
}

/// Training subset and validation images for tuning trials.
pub fn tuning_split(train: &Dataset, tc: &TuneConfig, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng::stream(seed, &[rng::tag("tune-split")]));
    let n_fit = ((train.len() as f64) * tc.train_fraction).round() as usize;
    let n_val = tc.val_samples.min(train.len() - n_fit);
    let mut fit = idx[..n_fit].to_vec();
    let mut val = idx[n_fit..n_fit + n_val].to_vec();
    fit.sort_unstable();
    val.sort_unstable();
    (train.subset(&fit), train.subset(&val))
}

/// The defense with every spec's tuned coordinate set from `values`.
pub fn tuned_defense(base: &DefenseConfig, values: &[f64]) -> Result<DefenseConfig> {
    if values.len() != base.k() {
        return Err(Error::Parameter(format!("{} tuning values for K={}", values.len(), base.k())));
    }
    let specs = base.specs.iter().zip(values).map(|(s, &v)| s.with_tuned_value(v)).collect::<Result<Vec<_>>>()?;
    Ok(DefenseConfig { specs, ..base.clone() })
}

/// Trial attack: the configured one at the tuner's reduced budget.
fn trial_attack(cfg: &ExperimentConfig) -> AttackConfig {
    AttackConfig { steps: cfg.tuner.trial_attack_steps, n_attack: cfg.tuner.trial_attack_n, ..cfg.attack.clone() }
}

/// Short-trains an RT model at `values` and returns its adversarial
/// accuracy on `val` under the trial attack.
pub fn trial_objective(cfg: &ExperimentConfig, values: &[f64], fit: &Dataset, val: &Dataset, seed: u64) -> Result<f64> {
    let defense = tuned_defense(&cfg.defense, values)?;
    let trial_seed = rng::derive(seed, &values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let mut model = Backbone::new(cfg.arch.clone(), rng::derive(cfg.seed, &[rng::tag("init")]))?;
    let tcfg = TrainConfig { epochs: cfg.tuner.trial_epochs, n_train: 1, adv: None, val_fraction: 0.0, ..cfg.train.clone() };
    backbone::train_clean(&mut model, fit, &tcfg, Some(&defense), trial_seed)?;
    let attack = trial_attack(cfg);
    let adv = attack::pgd_batch(&model, &val.images, &val.labels, &defense, &attack, trial_seed)?;
    defense::accuracy(&model, &adv, &val.labels, &defense, rng::derive(trial_seed, &[1]))
}

/// Full-data training of the tuned defense with `final_n_train` augmentation
/// samples, then clean and strong-attack evaluation on `test`.
pub fn finalize(
    cfg: &ExperimentConfig,
    tuned: &DefenseConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<(Backbone, EvalResult, EvalResult)> {
    let mut model = Backbone::new(cfg.arch.clone(), rng::derive(cfg.seed, &[rng::tag("init")]))?;
    let tcfg = TrainConfig { n_train: cfg.tuner.final_n_train, adv: None, ..cfg.train.clone() };
    let fseed = rng::derive(seed, &[rng::tag("finalize")]);
    backbone::train_clean(&mut model, train, &tcfg, Some(tuned), fseed)?;
    let clean = evaluate_with_ci(&model, tuned, &test.images, &test.labels, cfg.eval.n_runs, fseed)?;
    let adv = attack::pgd_batch(&model, &test.images, &test.labels, tuned, &cfg.attack, fseed)?;
    let robust = evaluate_with_ci(&model, tuned, &adv, &test.labels, cfg.eval.n_runs, fseed)?;
    Ok((model, clean, robust))
}

#[cfg(test)]
mod tests;
