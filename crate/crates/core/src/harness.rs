//! Config-driven experiment runs, result persistence, comparisons and sweeps.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{cross_validated_run, ClassifierOptions, CvPlan, ScoreReport, Summary};
use crate::misa::{AugReduction, EpochLosses, MisaConfig, TrainOptions};
use crate::missingness::{Mechanism, MechanismSpec, DEFAULT_OBSERVED_FRACTION};
use crate::models::{DaeLossSupport, ModelConfig, ModelKind};

pub const VERSION: &str = concat!("misa ", env!("CARGO_PKG_VERSION"));
pub const RESULTS_FILE: &str = "results.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Augmentation weight: a number or `"auto"`. Absent means the model default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alpha {
    Value(f64),
    Auto,
}

impl std::str::FromStr for Alpha {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Alpha::Auto);
        }
        s.parse::<f64>()
            .map(Alpha::Value)
            .map_err(|_| Error::config(format!("alpha must be a number or `auto`, got `{s}`")))
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Value(v) => write!(f, "{v}"),
            Alpha::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Number(f64),
    Word(String),
}

impl Serialize for Alpha {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Alpha::Value(v) => AlphaRepr::Number(v),
            Alpha::Auto => AlphaRepr::Word("auto".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match AlphaRepr::deserialize(d)? {
            AlphaRepr::Number(v) => Ok(Alpha::Value(v)),
            AlphaRepr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One flat JSON document describing a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub schema: PathBuf,
    pub mechanism: Mechanism,
    pub missing_rate: f64,
    pub observed_fraction: f64,
    pub model: ModelKind,
    pub misa: bool,
    pub alpha: Option<Alpha>,
    pub stop_gradient: bool,
    pub aug_reduction: AugReduction,
    /// `None` picks 2000 epochs below 500 rows and 300 otherwise.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub corruption: f64,
    pub dae_loss: DaeLossSupport,
    pub hint_rate: f64,
    pub reconstruction_weight: f64,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub accuracy: bool,
    pub classifier_epochs: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            dataset: PathBuf::new(),
            schema: PathBuf::new(),
            mechanism: Mechanism::Mcar,
            missing_rate: 0.5,
            observed_fraction: DEFAULT_OBSERVED_FRACTION,
            model: ModelKind::Gain,
            misa: false,
            alpha: None,
            stop_gradient: true,
            aug_reduction: AugReduction::default(),
            epochs: None,
            batch_size: 64,
            learning_rate: model.learning_rate,
            corruption: model.corruption,
            dae_loss: model.dae_loss,
            hint_rate: model.hint_rate,
            reconstruction_weight: model.reconstruction_weight,
            folds: 5,
            repeats: 10,
            seed: 0,
            accuracy: false,
            classifier_epochs: ClassifierOptions::default().epochs,
            out: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("dataset", &self.dataset), ("schema", &self.schema)] {
            if !p.is_file() {
                return Err(Error::config(format!("{what} file {} does not exist", p.display())));
            }
        }
        if let Some(Alpha::Value(a)) = self.alpha {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::config(format!("alpha must be finite and non-negative, got {a}")));
            }
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::config("at least two folds are needed"));
        }
        if self.batch_size == 0 || self.epochs == Some(0) || self.classifier_epochs == 0 {
            return Err(Error::config("batch size and epoch counts must be positive"));
        }
        self.mechanism_spec().validate()?;
        self.model_config().validate()
    }

    pub fn mechanism_spec(&self) -> MechanismSpec {
        MechanismSpec {
            kind: self.mechanism,
            target_rate: self.missing_rate,
            observed_fraction: self.observed_fraction,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            learning_rate: self.learning_rate,
            corruption: self.corruption,
            dae_loss: self.dae_loss,
            hint_rate: self.hint_rate,
            reconstruction_weight: self.reconstruction_weight,
            ..ModelConfig::default()
        }
    }

    /// Augmentation settings, or `None` for a baseline run.
    pub fn misa_config(&self) -> Option<MisaConfig> {
        self.misa.then(|| {
            let (alpha, auto_alpha) = match self.alpha {
                None => (self.model.default_alpha(), false),
                Some(Alpha::Value(a)) => (a, false),
                Some(Alpha::Auto) => (self.model.default_alpha(), true),
            };
            MisaConfig {
                alpha,
                auto_alpha,
                stop_gradient: self.stop_gradient,
                reduction: self.aug_reduction,
                fill: None,
            }
        })
    }

    pub fn plan(&self, n: usize) -> CvPlan {
        let mut train = TrainOptions::for_rows(n);
        if let Some(e) = self.epochs {
            train.epochs = e;
        }
        train.batch_size = self.batch_size;
        CvPlan {
            folds: self.folds,
            repeats: self.repeats,
            seed: self.seed,
            train,
            accuracy: self.accuracy,
            classifier: ClassifierOptions {
                epochs: self.classifier_epochs,
                ..ClassifierOptions::default()
            },
        }
    }

    /// Hex digest of the serialized config, ignoring the output directory.
    pub fn run_id(&self) -> String {
        let keyed = Self {
            out: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&keyed).expect("config serializes");
        Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Row label used in tables: the model name, with `+` when augmented.
    pub fn label(&self) -> String {
        if self.misa {
            format!("{}+", self.model)
        } else {
            self.model.to_string()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub version: String,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub dataset: DatasetInfo,
    pub epochs: usize,
    pub rmse: Summary,
    pub fold_rmse: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Summary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_accuracy: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alphas: Vec<f64>,
    pub losses_csv: String,
    pub timing: Timing,
    #[serde(skip)]
    pub curve: Vec<EpochLosses>,
}

impl ExperimentResult {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn load_stage(config: &ExperimentConfig) -> Result<Dataset> {
    config.validate().map_err(|e| e.at_stage("config"))?;
    load_dataset(&config.dataset, &config.schema).map_err(|e| e.at_stage("load"))
}

/// Runs the experiment in memory without writing anything.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let data = load_stage(config)?;
    execute_on(config, &data)
}

/// [`execute`] on an already loaded dataset.
pub fn execute_on(config: &ExperimentConfig, data: &Dataset) -> Result<ExperimentResult> {
    config.validate().map_err(|e| e.at_stage("config"))?;
    let started = Instant::now();
    let plan = config.plan(data.n());
    let misa = config.misa_config();
    let report: ScoreReport = cross_validated_run(
        data,
        &config.mechanism_spec(),
        config.model,
        &config.model_config(),
        misa.as_ref(),
        &plan,
    )?;
    let seconds = (started.elapsed().as_secs_f64() * 1000.0).round() / 1000.0;
    Ok(ExperimentResult {
        version: VERSION.to_string(),
        run_id: config.run_id(),
        config: config.clone(),
        dataset: DatasetInfo {
            n: data.n(),
            d: data.d(),
            classes: data.num_classes(),
        },
        epochs: plan.train.epochs,
        rmse: report.rmse,
        fold_rmse: report.fold_rmse,
        accuracy: report.accuracy,
        fold_accuracy: report.fold_accuracy,
        alphas: report.alphas,
        losses_csv: LOSSES_FILE.to_string(),
        timing: Timing { seconds },
        curve: report.curve,
    })
}

/// Executes the run and writes `results.json` and `losses.csv` under
/// `config.out`. Each file is written to a temporary sibling and renamed;
/// on failure, files already placed by this run are removed.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let result = execute(config)?;
    persist(&result, &config.out).map_err(|e| e.at_stage("write"))?;
    Ok(result)
}

pub fn persist(result: &ExperimentResult, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut losses = Vec::new();
    write_losses_csv(&result.curve, &mut losses)?;
    let json = serde_json::to_vec_pretty(result)?;
    let mut placed = Vec::new();
    let outcome = (|| {
        for (name, bytes) in [(LOSSES_FILE, &losses), (RESULTS_FILE, &json)] {
            let target = out.join(name);
            write_atomic(&target, bytes)?;
            placed.push(target);
        }
        Ok(())
    })();
    if outcome.is_err() {
        for p in &placed {
            let _ = std::fs::remove_file(p);
        }
    }
    outcome
}

/// Writes `bytes` to a temporary file next to `target`, then renames it.
pub fn write_atomic(target: &Path, bytes: &[u8]) -> Result<()> {
    let dir = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(target).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_losses_csv<W: Write>(curve: &[EpochLosses], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "l_ori", "l_aug", "hybrid"])?;
    for e in curve {
        wr.write_record([
            e.epoch.to_string(),
            e.l_ori.to_string(),
            e.l_aug.map(|v| v.to_string()).unwrap_or_default(),
            e.hybrid.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Results JSON with the timing object removed, for reproducibility checks.
pub fn without_timing(json: &str) -> Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timing");
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    /// Relative RMSE reduction versus the baseline row, in percent.
    pub improvement_pct: Option<f64>,
}

/// Baseline row followed by the augmented row.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub fn improvement_pct(baseline: f64, augmented: f64) -> f64 {
    (baseline - augmented) / baseline * 100.0
}

pub fn compare(baseline: &ExperimentResult, augmented: &ExperimentResult) -> Comparison {
    compare_summaries(
        &baseline.config.label(),
        &baseline.rmse,
        &augmented.config.label(),
        &augmented.rmse,
    )
}

pub fn compare_summaries(base_label: &str, base: &Summary, aug_label: &str, aug: &Summary) -> Comparison {
    Comparison {
        rows: vec![
            ComparisonRow {
                model: base_label.to_string(),
                rmse_mean: base.mean,
                rmse_std: base.std,
                improvement_pct: None,
            },
            ComparisonRow {
                model: aug_label.to_string(),
                rmse_mean: aug.mean,
                rmse_std: aug.std,
                improvement_pct: Some(improvement_pct(base.mean, aug.mean)),
            },
        ],
    }
}

impl Comparison {
    pub fn improvement(&self) -> f64 {
        self.rows.last().and_then(|r| r.improvement_pct).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            wr.serialize(r)?;
        }
        let bytes = wr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let rows = rd.deserialize().collect::<std::result::Result<Vec<ComparisonRow>, _>>()?;
        Ok(Self { rows })
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>18} {:>12}", "model", "RMSE", "improvement")?;
        for r in &self.rows {
            let imp = r.improvement_pct.map(|p| format!("{p:.2}%")).unwrap_or_default();
            writeln!(f, "{:<8} {:>9.4} ± {:<6.4} {:>12}", r.model, r.rmse_mean, r.rmse_std, imp)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub alpha: Option<f64>,
    pub missing_rate: f64,
    pub seed: u64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            wr.serialize(r)?;
        }
        let bytes = wr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn baseline(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.alpha.is_none())
    }

    pub fn augmented(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.alpha.is_some())
    }

    /// Whether baseline RMSE at the highest rate is at least that at the
    /// lowest. `None` with fewer than two rates.
    pub fn baseline_rises_with_rate(&self) -> Option<bool> {
        let base: Vec<&SweepRow> = self.baseline().collect();
        let lo = base.iter().min_by(|a, b| a.missing_rate.total_cmp(&b.missing_rate))?;
        let hi = base.iter().max_by(|a, b| a.missing_rate.total_cmp(&b.missing_rate))?;
        (lo.missing_rate < hi.missing_rate).then(|| hi.rmse_mean >= lo.rmse_mean)
    }
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>7} {:>6} {:>20} {:>18}", "model", "alpha", "rate", "seed", "RMSE")?;
        for r in &self.rows {
            let alpha = r.alpha.map(|a| a.to_string()).unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:<8} {:>7} {:>6} {:>20} {:>9.4} ± {:.4}",
                r.model, alpha, r.missing_rate, r.seed, r.rmse_mean, r.rmse_std
            )?;
        }
        Ok(())
    }
}

fn sweep_row(config: &ExperimentConfig, result: &ExperimentResult) -> SweepRow {
    SweepRow {
        model: config.label(),
        alpha: config.misa_config().map(|m| result.alphas.first().copied().unwrap_or(m.alpha)),
        missing_rate: config.missing_rate,
        seed: config.seed,
        rmse_mean: result.rmse.mean,
        rmse_std: result.rmse.std,
    }
}

/// One baseline run plus one augmented run per weight.
pub fn sweep_alpha(config: &ExperimentConfig, alphas: &[f64]) -> Result<SweepTable> {
    let data = load_stage(config)?;
    let mut rows = Vec::with_capacity(alphas.len() + 1);
    let base = ExperimentConfig {
        misa: false,
        ..config.clone()
    };
    rows.push(sweep_row(&base, &execute_on(&base, &data)?));
    for &a in alphas {
        let c = ExperimentConfig {
            misa: true,
            alpha: Some(Alpha::Value(a)),
            ..config.clone()
        };
        rows.push(sweep_row(&c, &execute_on(&c, &data)?));
    }
    Ok(SweepTable { rows })
}

/// One baseline and one augmented run per missing rate.
pub fn sweep_missing_rate(config: &ExperimentConfig, rates: &[f64]) -> Result<SweepTable> {
    let data = load_stage(config)?;
    let mut rows = Vec::with_capacity(2 * rates.len());
    for &rate in rates {
        for misa in [false, true] {
            let c = ExperimentConfig {
                misa,
                missing_rate: rate,
                ..config.clone()
            };
            rows.push(sweep_row(&c, &execute_on(&c, &data)?));
        }
    }
    Ok(SweepTable { rows })
}
