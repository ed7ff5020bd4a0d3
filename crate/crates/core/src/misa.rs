//! Missingness augmentation: re-masks the model's own imputations with an
//! artificial mask, imputes them again, and penalizes the error on entries
//! that were observed in the raw data but hidden by the artificial mask.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Matrix, Var};
use crate::missingness::{combine, fill_missing, FillSpec, Mask};
use crate::models::{compose_imputation, compose_on_graph, masked_mse, Batch, GeneratorModel};
use crate::seed::StreamRng;

/// Candidate weights for automatic selection.
pub const ALPHA_GRID: [f64; 7] = [1.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0];

/// How the augmented reconstruction error is reduced over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugReduction {
    /// Squared error averaged over the support entries of the batch.
    #[default]
    SupportMean,
    /// Squared error summed within each row, averaged over rows.
    RowSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MisaConfig {
    pub alpha: f64,
    /// Pick `alpha` from [`ALPHA_GRID`] on the first batch instead.
    pub auto_alpha: bool,
    /// Treat the first imputation as a constant when re-masking it.
    pub stop_gradient: bool,
    pub reduction: AugReduction,
    /// Fill for artificially hidden entries; `None` reuses the model's fill.
    pub fill: Option<FillSpec>,
}

impl Default for MisaConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            auto_alpha: false,
            stop_gradient: true,
            reduction: AugReduction::default(),
            fill: None,
        }
    }
}

impl MisaConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Artificial mask, augmented sample and the fill used to build it.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub m_tilde: Mask,
    pub x_tilde: Matrix,
    pub z: Matrix,
}

/// One artificial mask row: each entry kept with probability equal to the
/// row's observed fraction.
pub fn sample_artificial_mask_row<R: Rng + ?Sized>(m: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Err(Error::config("cannot sample an artificial mask for an empty row"));
    }
    let keep = m.iter().sum::<f64>() / m.len() as f64;
    Ok(m.iter().map(|_| if rng.gen::<f64>() < keep { 1.0 } else { 0.0 }).collect())
}

pub fn sample_artificial_mask<R: Rng + ?Sized>(m: &Mask, rng: &mut R) -> Result<Mask> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = sample_artificial_mask_row(m.as_matrix().row(i), rng)?;
        out.row_mut(i).copy_from_slice(&row);
    }
    Mask::from_matrix(out)
}

/// `m̃ ⊙ x_G + (1 − m̃) ⊙ z`.
pub fn build_augmented(x_g: &Matrix, m_tilde: &Mask, z: &Matrix) -> Result<Matrix> {
    x_g.check_same(m_tilde.as_matrix(), "build_augmented")?;
    x_g.check_same(z, "build_augmented")?;
    Ok(combine(m_tilde.as_matrix(), x_g, z))
}

/// Samples `m̃` and `z` and builds the augmented sample from `x_g`.
pub fn augment(x_g: &Matrix, m: &Mask, fill: FillSpec, rng: &mut StreamRng) -> Result<AugmentedBatch> {
    let m_tilde = sample_artificial_mask(m, rng)?;
    let z = fill.sample(x_g.rows(), x_g.cols(), rng);
    let x_tilde = build_augmented(x_g, &m_tilde, &z)?;
    Ok(AugmentedBatch { m_tilde, x_tilde, z })
}

/// `(1 − m̃) ⊙ G(x̃, m̃) + m̃ ⊙ x̃`.
pub fn augmented_impute(model: &dyn GeneratorModel, x_tilde: &Matrix, m_tilde: &Mask) -> Result<Matrix> {
    model.impute(x_tilde, m_tilde)
}

/// Entries observed in the raw data but hidden by the artificial mask.
pub fn aug_support(m: &Mask, m_tilde: &Mask) -> Result<Matrix> {
    m.as_matrix().zip_map(m_tilde.as_matrix(), |a, b| a * (1.0 - b))
}

/// Augmented reconstruction loss recorded on a graph.
pub fn aug_loss(
    g: &mut Graph,
    x_tilde_g: Var,
    x_m: &Matrix,
    m_tilde: &Mask,
    m: &Mask,
    reduction: AugReduction,
) -> Result<Var> {
    let support = aug_support(m, m_tilde)?;
    match reduction {
        AugReduction::SupportMean => masked_mse(g, x_tilde_g, x_m, &support),
        AugReduction::RowSum => {
            let t = g.constant(x_m.clone());
            let diff = g.sub(x_tilde_g, t)?;
            let w = g.constant(support);
            let kept = g.mul(diff, w)?;
            let ss = g.reduce_sum_squares(kept);
            Ok(g.scale(ss, 1.0 / x_m.rows().max(1) as f64))
        }
    }
}

/// Matrix form of [`aug_loss`].
pub fn aug_loss_value(x_tilde_g: &Matrix, x_m: &Matrix, m_tilde: &Mask, m: &Mask, reduction: AugReduction) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(x_tilde_g.clone());
    let l = aug_loss(&mut g, v, x_m, m_tilde, m, reduction)?;
    Ok(g.value(l).get(0, 0))
}

/// `m ⊙ a + (1 − m) ⊙ b` on the graph.
fn blend(g: &mut Graph, m: &Matrix, a: Var, b: Var) -> Result<Var> {
    let keep = g.constant(m.clone());
    let hide = g.constant(m.map(|v| 1.0 - v));
    let ka = g.mul(keep, a)?;
    let hb = g.mul(hide, b)?;
    g.add(ka, hb)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_ori: f64,
    pub l_aug: f64,
    pub hybrid: f64,
}

/// The recorded objective `L_ori + alpha · L_aug` of one step.
pub struct HybridObjective {
    pub graph: Graph,
    pub l_ori: Var,
    pub l_aug: Var,
    pub total: Var,
}

/// Records the hybrid objective without updating the generator. Runs the
/// model's auxiliary update (the discriminator step) as a side effect.
pub fn hybrid_objective(
    model: &mut dyn GeneratorModel,
    batch: &Batch,
    cfg: &MisaConfig,
    alpha: f64,
    base: &mut StreamRng,
    aug: &mut StreamRng,
) -> Result<HybridObjective> {
    let mut g = Graph::new();
    let obj = model.baseline_objective(&mut g, batch, base)?;
    let m = batch.m.as_matrix();
    let x_g = if cfg.stop_gradient {
        let raw = match obj.full_output {
            Some(v) => g.value(v).clone(),
            None => model.impute_raw(&batch.x, &batch.m)?,
        };
        g.constant(compose_imputation(&batch.x, &batch.m, &raw)?)
    } else {
        let out = match obj.full_output {
            Some(v) => v,
            None => {
                let xv = g.constant(batch.x.clone());
                let mv = g.constant(m.clone());
                model.generate(&mut g, xv, mv, true)?
            }
        };
        compose_on_graph(&mut g, &batch.x, m, out)?
    };

    let fill = cfg.fill.unwrap_or_else(|| model.fill());
    let m_tilde = sample_artificial_mask(&batch.m, aug)?;
    let z = g.constant(fill.sample(batch.x.rows(), batch.x.cols(), aug));
    let x_tilde = blend(&mut g, m_tilde.as_matrix(), x_g, z)?;
    let mt = g.constant(m_tilde.as_matrix().clone());
    let out = model.generate(&mut g, x_tilde, mt, true)?;
    let x_tilde_g = blend(&mut g, m_tilde.as_matrix(), x_tilde, out)?;
    let l_aug = aug_loss(&mut g, x_tilde_g, &batch.x, &m_tilde, &batch.m, cfg.reduction)?;

    let weighted = g.scale(l_aug, alpha);
    let total = g.add(obj.loss, weighted)?;
    Ok(HybridObjective {
        graph: g,
        l_ori: obj.loss,
        l_aug,
        total,
    })
}

/// One generator update on `L_ori + alpha · L_aug`. The baseline path draws
/// only from `base` and the augmentation only from `aug`, so `alpha = 0`
/// reproduces [`baseline_step`] exactly.
pub fn hybrid_step(
    model: &mut dyn GeneratorModel,
    batch: &Batch,
    cfg: &MisaConfig,
    alpha: f64,
    base: &mut StreamRng,
    aug: &mut StreamRng,
) -> Result<StepLosses> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    let h = hybrid_objective(model, batch, cfg, alpha, base, aug)?;
    let grads = h.graph.backward(h.total)?;
    let mut pg = h.graph.param_grads(&grads, &model.generator().params);
    model.step_generator(&mut pg)?;
    let scalar = |v| h.graph.value(v).get(0, 0);
    Ok(StepLosses {
        l_ori: scalar(h.l_ori),
        l_aug: scalar(h.l_aug),
        hybrid: scalar(h.total),
    })
}

/// One generator update on the baseline loss alone.
pub fn baseline_step(model: &mut dyn GeneratorModel, batch: &Batch, base: &mut StreamRng) -> Result<f64> {
    let mut g = Graph::new();
    let obj = model.baseline_objective(&mut g, batch, base)?;
    let grads = g.backward(obj.loss)?;
    let mut pg = g.param_grads(&grads, &model.generator().params);
    model.step_generator(&mut pg)?;
    Ok(g.value(obj.loss).get(0, 0))
}

/// Grid value closest to `l_ori / l_aug` in log-space. Falls back to 1 when
/// the augmented loss is zero.
pub fn choose_alpha(l_ori: f64, l_aug: f64) -> f64 {
    if !(l_aug > 0.0) || !(l_ori > 0.0) || !l_ori.is_finite() {
        log::warn!("cannot balance losses (l_ori = {l_ori}, l_aug = {l_aug}); using alpha = 1");
        return 1.0;
    }
    let r = (l_ori / l_aug).ln();
    ALPHA_GRID
        .iter()
        .copied()
        .min_by(|a, b| (a.ln() - r).abs().total_cmp(&(b.ln() - r).abs()))
        .expect("non-empty grid")
}

/// Both losses on `batch` before any update, evaluated on copies of the
/// model and streams, and the weight that balances them.
pub fn auto_alpha(
    model: &dyn GeneratorModel,
    batch: &Batch,
    cfg: &MisaConfig,
    base: &StreamRng,
    aug: &StreamRng,
) -> Result<(f64, StepLosses)> {
    let mut probe = model.clone_box();
    let h = hybrid_objective(probe.as_mut(), batch, cfg, 0.0, &mut base.clone(), &mut aug.clone())?;
    let l_ori = h.graph.value(h.l_ori).get(0, 0);
    let l_aug = h.graph.value(h.l_aug).get(0, 0);
    Ok((
        choose_alpha(l_ori, l_aug),
        StepLosses {
            l_ori,
            l_aug,
            hybrid: l_ori,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
}

impl TrainOptions {
    /// 2000 epochs below 500 rows, 300 otherwise; batches of 64.
    pub fn for_rows(n: usize) -> Self {
        Self {
            epochs: if n < 500 { 2000 } else { 300 },
            batch_size: 64,
        }
    }
}

/// Mean losses of one epoch. `l_aug` is absent for runs without augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_ori: f64,
    pub l_aug: Option<f64>,
    pub hybrid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochLosses>,
    /// Weight actually used; `None` without augmentation.
    pub alpha: Option<f64>,
}

/// Baseline and augmentation random streams of one training run.
#[derive(Clone, Debug)]
pub struct Streams {
    pub base: StreamRng,
    pub aug: StreamRng,
}

/// Trains on rows of `x` (missing entries may hold anything) under mask `m`.
/// Rows are reshuffled every epoch and missing entries re-filled per batch.
pub fn train(
    model: &mut dyn GeneratorModel,
    x: &Matrix,
    m: &Mask,
    opts: &TrainOptions,
    misa: Option<&MisaConfig>,
    streams: &mut Streams,
) -> Result<TrainReport> {
    x.check_same(m.as_matrix(), "train")?;
    if x.rows() == 0 || opts.batch_size == 0 {
        return Err(Error::config("training needs rows and a positive batch size"));
    }
    if let Some(cfg) = misa {
        cfg.validate()?;
    }
    let n = x.rows();
    let bs = opts.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut alpha = misa.map(|c| c.alpha);
    let mut curve = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut streams.base);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for rows in order.chunks(bs) {
            let bm = m.select_rows(rows);
            let bx = fill_missing(&x.select_rows(rows), &bm, model.fill(), &mut streams.base)?;
            let batch = Batch::new(bx, bm)?;
            match misa {
                Some(cfg) => {
                    if epoch == 0 && batches == 0 && cfg.auto_alpha {
                        let (a, probe) = auto_alpha(model, &batch, cfg, &streams.base, &streams.aug)?;
                        log::info!(
                            "auto alpha = {a} (l_ori = {:.6}, l_aug = {:.6})",
                            probe.l_ori,
                            probe.l_aug
                        );
                        alpha = Some(a);
                    }
                    let a = alpha.expect("set for augmented runs");
                    let s = hybrid_step(model, &batch, cfg, a, &mut streams.base, &mut streams.aug)?;
                    sums.0 += s.l_ori;
                    sums.1 += s.l_aug;
                    sums.2 += s.hybrid;
                }
                None => {
                    let l = baseline_step(model, &batch, &mut streams.base)?;
                    sums.0 += l;
                    sums.2 += l;
                }
            }
            batches += 1;
        }
        let k = batches as f64;
        let losses = EpochLosses {
            epoch,
            l_ori: sums.0 / k,
            l_aug: misa.map(|_| sums.1 / k),
            hybrid: sums.2 / k,
        };
        if !losses.hybrid.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}")));
        }
        curve.push(losses);
    }
    Ok(TrainReport { curve, alpha })
}
