//! Imputation error, downstream classification accuracy, and the repeated
//! cross-validation loop that produces both.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataio::{make_folds, minmax_scale, Dataset, ScaleParams};
use crate::error::{Error, Result};
use crate::gradcore::{clip_global_norm, Adam, Graph, Matrix, Optimizer, DEFAULT_CLIP_NORM};
use crate::misa::{train, EpochLosses, MisaConfig, Streams, TrainOptions};
use crate::missingness::{fill_missing, generate_mask, Mask, MechanismSpec};
use crate::models::{build_model, Activation, Mlp, MlpSpec, ModelConfig, ModelKind};
use crate::seed::{derive_seed, stream, StreamRng};

/// RMSE over the entries where `m = 0`.
pub fn rmse_missing(x_true: &Matrix, x_imputed: &Matrix, m: &Mask) -> Result<f64> {
    x_true.check_same(x_imputed, "rmse")?;
    x_true.check_same(m.as_matrix(), "rmse")?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&t, &p), &mv) in x_true
        .as_slice()
        .iter()
        .zip(x_imputed.as_slice())
        .zip(m.as_matrix().as_slice())
    {
        if mv == 0.0 {
            sum += (t - p) * (t - p);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Undefined("RMSE needs at least one missing entry".into()));
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOptions {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// Trains a d → hidden (relu) → C classifier with softmax cross-entropy on
/// the training rows and returns its accuracy on the test rows.
pub fn post_impute_accuracy(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    opts: &ClassifierOptions,
    seed: u64,
) -> Result<f64> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_x.cols() != test_x.cols() {
        return Err(Error::Dimension {
            op: "post_impute_accuracy",
            left: train_x.shape(),
            right: test_x.shape(),
        });
    }
    let classes = train_y.iter().chain(test_y).copied().max().map_or(0, |c| c + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        train_y.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::config("classification needs at least two classes in the training rows"));
    }
    if test_y.is_empty() || opts.batch_size == 0 {
        return Err(Error::config("classification needs test rows and a positive batch size"));
    }

    let mut rng = StreamRng::seed_from_u64(seed);
    let spec = MlpSpec::new(vec![train_x.cols(), opts.hidden, classes], Activation::Relu, Activation::Identity)?;
    let mut net = Mlp::new(spec, &mut rng);
    let mut opt = Adam::new(opts.learning_rate);
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(opts.batch_size.min(order.len())) {
            let labels: Vec<usize> = rows.iter().map(|&i| train_y[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(train_x.select_rows(rows));
            let logits = net.forward(&mut g, x, true)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            let mut pg = g.param_grads(&grads, &net.params);
            clip_global_norm(&mut pg, DEFAULT_CLIP_NORM);
            opt.step(&mut net.params, &pg)?;
        }
    }
    let logits = net.predict(test_x)?;
    let correct = (0..test_x.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let pred = (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            pred == test_y[i]
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

/// Mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Per-repeat mean of fold RMSEs. With a single repeat the spread is
    /// taken over folds instead.
    pub rmse: Summary,
    pub fold_rmse: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Summary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_accuracy: Vec<Vec<f64>>,
    /// Augmentation weight used by each fold run, when augmented.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alphas: Vec<f64>,
    /// Epoch losses averaged over every fold run.
    pub curve: Vec<EpochLosses>,
}

fn summarize(per_fold: &[Vec<f64>]) -> Summary {
    if per_fold.len() == 1 {
        let s = Summary::of(per_fold[0].clone());
        return Summary {
            values: vec![s.mean],
            ..s
        };
    }
    Summary::of(per_fold.iter().map(|f| f.iter().sum::<f64>() / f.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub train: TrainOptions,
    /// Also score downstream classification (needs labels).
    pub accuracy: bool,
    pub classifier: ClassifierOptions,
}

impl CvPlan {
    pub fn new(n: usize, repeats: usize, seed: u64) -> Self {
        Self {
            folds: 5,
            repeats,
            seed,
            train: TrainOptions::for_rows(n),
            accuracy: false,
            classifier: ClassifierOptions::default(),
        }
    }
}

/// Stream labels shared by every run, so baseline and augmented runs with
/// one master seed see the same masks, folds, initial weights and batches.
pub mod labels {
    pub const MASK: &str = "mask";
    pub const FOLDS: &str = "folds";
    pub const INIT: &str = "init";
    pub const TRAIN: &str = "train";
    pub const AUGMENT: &str = "augment";
    pub const IMPUTE: &str = "impute";
    pub const CLASSIFIER: &str = "classifier";
}

/// For every repeat: mask the full (scaled) dataset, split rows into folds,
/// and for each fold train on the other folds and score the held-out rows.
/// Scaling is refit on each fold's observed training entries.
pub fn cross_validated_run(
    data: &Dataset,
    mechanism: &MechanismSpec,
    kind: ModelKind,
    model_cfg: &ModelConfig,
    misa: Option<&MisaConfig>,
    plan: &CvPlan,
) -> Result<ScoreReport> {
    if plan.repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    let labels_y = match (plan.accuracy, &data.labels) {
        (true, None) => return Err(Error::config("accuracy scoring needs a label column")),
        (true, Some(y)) => Some(y.as_slice()),
        (false, _) => None,
    };
    let (scaled, _) = minmax_scale(data).map_err(|e| e.at_stage("scale"))?;
    let raw = &data.features;
    let mut fold_rmse = Vec::with_capacity(plan.repeats);
    let mut fold_acc = Vec::new();
    let mut alphas = Vec::new();
    let mut curve_sum: Vec<EpochLosses> = Vec::new();
    let mut runs = 0usize;

    for r in 0..plan.repeats {
        let spec = MechanismSpec {
            seed: derive_seed(plan.seed, labels::MASK, r as u64),
            ..mechanism.clone()
        };
        let mask = generate_mask(&scaled.features, &spec).map_err(|e| e.at_stage("mask"))?;
        let folds = make_folds(data.n(), plan.folds, derive_seed(plan.seed, labels::FOLDS, r as u64))
            .map_err(|e| e.at_stage("folds"))?;
        let mut rmses = Vec::with_capacity(plan.folds);
        let mut accs = Vec::new();
        for f in 0..plan.folds {
            let idx = (r * plan.folds + f) as u64;
            let train_rows = folds.train_rows(f);
            let test_rows = folds.test_rows(f);
            let scaled_split = (|| {
                let params = ScaleParams::fit_rows(raw, &train_rows, Some(mask.as_matrix()))?;
                Ok::<_, Error>((
                    params.transform(&raw.select_rows(&train_rows))?,
                    params.transform(&raw.select_rows(&test_rows))?,
                ))
            })();
            let (x_train, x_test) = scaled_split.map_err(|e| e.at_stage("scale"))?;
            let m_train = mask.select_rows(&train_rows);
            let m_test = mask.select_rows(&test_rows);

            let mut model = build_model(kind, data.d(), model_cfg, &mut stream(plan.seed, labels::INIT, idx))
                .map_err(|e| e.at_stage("model"))?;
            let mut streams = Streams {
                base: stream(plan.seed, labels::TRAIN, idx),
                aug: stream(plan.seed, labels::AUGMENT, idx),
            };
            // the trainer must never see hidden values
            let hidden_train = x_train.hadamard(m_train.as_matrix())?;
            let report = train(model.as_mut(), &hidden_train, &m_train, &plan.train, misa, &mut streams)
                .map_err(|e| e.at_stage("train"))?;
            if let Some(a) = report.alpha {
                alphas.push(a);
            }
            accumulate_curve(&mut curve_sum, &report.curve);
            runs += 1;

            let mut imp_rng = stream(plan.seed, labels::IMPUTE, idx);
            let scored = (|| {
                let test_in = fill_missing(&x_test, &m_test, model.fill(), &mut imp_rng)?;
                let test_imp = model.impute(&test_in, &m_test)?;
                let rmse = rmse_missing(&x_test, &test_imp, &m_test)?;
                Ok::<_, Error>((test_imp, rmse))
            })();
            let (test_imp, rmse) = scored.map_err(|e| e.at_stage("score"))?;
            log::info!("repeat {r} fold {f}: rmse {rmse:.4}");
            rmses.push(rmse);

            if let Some(y) = labels_y {
                let acc = (|| {
                    let train_in = fill_missing(&x_train, &m_train, model.fill(), &mut imp_rng)?;
                    let train_imp = model.impute(&train_in, &m_train)?;
                    let ty: Vec<usize> = train_rows.iter().map(|&i| y[i]).collect();
                    let sy: Vec<usize> = test_rows.iter().map(|&i| y[i]).collect();
                    let seed = derive_seed(plan.seed, labels::CLASSIFIER, idx);
                    post_impute_accuracy(&train_imp, &ty, &test_imp, &sy, &plan.classifier, seed)
                })();
                accs.push(acc.map_err(|e| e.at_stage("classify"))?);
            }
        }
        fold_rmse.push(rmses);
        if labels_y.is_some() {
            fold_acc.push(accs);
        }
    }

    for e in &mut curve_sum {
        let k = runs as f64;
        e.l_ori /= k;
        e.hybrid /= k;
        e.l_aug = e.l_aug.map(|v| v / k);
    }
    Ok(ScoreReport {
        rmse: summarize(&fold_rmse),
        accuracy: labels_y.map(|_| summarize(&fold_acc)),
        fold_rmse,
        fold_accuracy: fold_acc,
        alphas,
        curve: curve_sum,
    })
}

fn accumulate_curve(sum: &mut Vec<EpochLosses>, curve: &[EpochLosses]) {
    if sum.is_empty() {
        sum.extend_from_slice(curve);
        return;
    }
    for (s, c) in sum.iter_mut().zip(curve) {
        s.l_ori += c.l_ori;
        s.hybrid += c.hybrid;
        s.l_aug = s.l_aug.zip(c.l_aug).map(|(a, b)| a + b);
    }
}
