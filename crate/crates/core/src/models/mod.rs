//! Generative imputers: a denoising autoencoder and an adversarial imputer
//! with a hint matrix, both behind [`GeneratorModel`].

mod dae;
mod gain;
mod mlp;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{clip_global_norm, Graph, Matrix, Var, DEFAULT_CLIP_NORM};
use crate::missingness::{combine, FillSpec, Mask};
use crate::seed::StreamRng;

pub use dae::{dae_spec, Dae, DaeLossSupport};
pub use gain::{gain_spec, sample_hint, Gain};
pub use mlp::{Activation, Mlp, MlpSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dae,
    Gain,
}

impl ModelKind {
    /// Augmentation weight used when none is configured.
    pub fn default_alpha(self) -> f64 {
        match self {
            ModelKind::Dae => 5.0,
            ModelKind::Gain => 100.0,
        }
    }

    /// Value written into missing entries before they reach the network.
    pub fn fill(self) -> FillSpec {
        match self {
            ModelKind::Dae => FillSpec::Zeros,
            ModelKind::Gain => FillSpec::SMALL_NOISE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dae => "dae",
            ModelKind::Gain => "gain",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dae" => Ok(ModelKind::Dae),
            "gain" => Ok(ModelKind::Gain),
            other => Err(Error::config(format!("unknown model `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Probability of dropping an observed entry during denoising training.
    pub corruption: f64,
    pub dae_loss: DaeLossSupport,
    pub hint_rate: f64,
    pub reconstruction_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            clip_norm: DEFAULT_CLIP_NORM,
            corruption: 0.5,
            dae_loss: DaeLossSupport::default(),
            hint_rate: 0.9,
            reconstruction_weight: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        prob("corruption", self.corruption)?;
        prob("hint_rate", self.hint_rate)?;
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) || !(self.reconstruction_weight >= 0.0) {
            return Err(Error::config(
                "learning_rate and clip_norm must be positive, reconstruction_weight non-negative",
            ));
        }
        Ok(())
    }
}

/// A mini-batch: data with missing entries already filled, and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub m: Mask,
}

impl Batch {
    pub fn new(x: Matrix, m: Mask) -> Result<Self> {
        x.check_same(m.as_matrix(), "batch")?;
        Ok(Self { x, m })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }
}

/// The generator-side baseline loss recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub loss: Var,
    /// `G(x_m, m)` with trainable generator weights, when the baseline loss
    /// already evaluates it.
    pub full_output: Option<Var>,
}

pub trait GeneratorModel: Send {
    fn kind(&self) -> ModelKind;

    fn config(&self) -> &ModelConfig;

    fn generator(&self) -> &Mlp;

    fn generator_mut(&mut self) -> &mut Mlp;

    /// Applies any auxiliary update (the discriminator step for the
    /// adversarial model) and records the generator's baseline loss on `g`.
    fn baseline_objective(&mut self, g: &mut Graph, batch: &Batch, rng: &mut StreamRng) -> Result<Objective>;

    /// One optimizer step on the generator from raw gradients.
    fn step_generator(&mut self, grads: &mut [Matrix]) -> Result<()>;

    fn checkpoint(&self) -> Checkpoint;

    fn clone_box(&self) -> Box<dyn GeneratorModel>;

    fn dim(&self) -> usize {
        self.generator().spec.output_width()
    }

    fn fill(&self) -> FillSpec {
        self.kind().fill()
    }

    /// `G(x, m)` recorded on `g` with input `[x ‖ m]`.
    fn generate(&self, g: &mut Graph, x: Var, m: Var, trainable: bool) -> Result<Var> {
        let input = g.hconcat(x, m)?;
        self.generator().forward(g, input, trainable)
    }

    /// Raw generator output for filled data.
    fn impute_raw(&self, x_filled: &Matrix, m: &Mask) -> Result<Matrix> {
        x_filled.check_same(m.as_matrix(), "impute")?;
        self.generator().predict(&x_filled.hconcat(m.as_matrix())?)
    }

    /// Generator output at missing entries, observed values elsewhere.
    fn impute(&self, x_filled: &Matrix, m: &Mask) -> Result<Matrix> {
        let raw = self.impute_raw(x_filled, m)?;
        compose_imputation(x_filled, m, &raw)
    }
}

impl Clone for Box<dyn GeneratorModel> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

pub fn build_model(kind: ModelKind, d: usize, config: &ModelConfig, rng: &mut StreamRng) -> Result<Box<dyn GeneratorModel>> {
    config.validate()?;
    if d == 0 {
        return Err(Error::config("model needs at least one column"));
    }
    Ok(match kind {
        ModelKind::Dae => Box::new(Dae::new(d, config.clone(), rng)?),
        ModelKind::Gain => Box::new(Gain::new(d, config.clone(), rng)?),
    })
}

/// `(1 − m) ⊙ g_out + m ⊙ x_m`; observed entries are copied exactly.
pub fn compose_imputation(x_m: &Matrix, m: &Mask, g_out: &Matrix) -> Result<Matrix> {
    x_m.check_same(m.as_matrix(), "compose_imputation")?;
    x_m.check_same(g_out, "compose_imputation")?;
    Ok(combine(m.as_matrix(), x_m, g_out))
}

/// Graph form of [`compose_imputation`]; gradients reach `g_out` only at
/// entries where `m = 0`.
pub fn compose_on_graph(g: &mut Graph, x_m: &Matrix, m: &Matrix, g_out: Var) -> Result<Var> {
    let observed = g.constant(m.hadamard(x_m)?);
    let hidden = g.constant(m.map(|v| 1.0 - v));
    let filled = g.mul(hidden, g_out)?;
    g.add(filled, observed)
}

/// `‖w ⊙ (pred − target)‖² / Σw` for a binary weight; 0 when `Σw = 0`.
pub fn masked_mse(g: &mut Graph, pred: Var, target: &Matrix, weight: &Matrix) -> Result<Var> {
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t)?;
    let w = g.constant(weight.clone());
    let kept = g.mul(diff, w)?;
    let ss = g.reduce_sum_squares(kept);
    let count = weight.sum();
    Ok(g.scale(ss, if count > 0.0 { 1.0 / count } else { 0.0 }))
}

pub(crate) fn clipped_step(
    opt: &mut crate::gradcore::Adam,
    params: &mut crate::gradcore::ParamSet,
    grads: &mut [Matrix],
    clip_norm: f64,
) -> Result<()> {
    use crate::gradcore::Optimizer;
    let norm = clip_global_norm(grads, clip_norm);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    opt.step(params, grads)
}

/// Serializable parameters of a trained model. Optimizer state is not kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub generator: Mlp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<Mlp>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn into_model(self) -> Result<Box<dyn GeneratorModel>> {
        self.config.validate()?;
        Ok(match self.kind {
            ModelKind::Dae => Box::new(Dae::from_parts(self.generator, self.config)?),
            ModelKind::Gain => {
                let disc = self
                    .discriminator
                    .ok_or_else(|| Error::config("adversarial checkpoint without discriminator"))?;
                Box::new(Gain::from_parts(self.generator, disc, self.config)?)
            }
        })
    }
}
