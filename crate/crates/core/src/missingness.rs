//! Missingness mechanisms over complete data and fill rules for model input.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Matrix;
use crate::seed::StreamRng;

/// Binary matrix aligned with a data matrix: 1 = observed, 0 = missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask(Matrix);

impl Mask {
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("mask entries must be 0 or 1".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::from_matrix(Matrix::from_rows(rows))
    }

    pub fn ones(n: usize, d: usize) -> Self {
        Self(Matrix::filled(n, d, 1.0))
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self(Matrix::zeros(n, d))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// `1 − m`.
    pub fn complement(&self) -> Matrix {
        self.0.map(|v| 1.0 - v)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j) == 1.0
    }

    pub fn observed_count(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn missing_count(&self) -> usize {
        self.0.len() - self.observed_count()
    }

    pub fn missing_rate(&self) -> f64 {
        self.missing_count() as f64 / self.0.len().max(1) as f64
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mask {
        Mask(self.0.select_rows(idx))
    }

    /// Elementwise AND.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        Ok(Mask(self.0.hadamard(&other.0)?))
    }

    /// CSV of 0/1 integers, one mask row per line, no header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.rows() {
            let line: Vec<&str> = self
                .0
                .row(i)
                .iter()
                .map(|&v| if v == 1.0 { "1" } else { "0" })
                .collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Mask> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|c| match c.trim() {
                    "0" => Ok(0.0),
                    "1" => Ok(1.0),
                    other => Err(Error::Contract(format!("line {}: bad mask cell `{other}`", i + 1))),
                })
                .collect::<Result<Vec<f64>>>()?;
            if rows.first().is_some_and(|f| f.len() != row.len()) {
                return Err(Error::Contract(format!("line {}: ragged mask row", i + 1)));
            }
            rows.push(row);
        }
        Mask::from_rows(&rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "mnar" => Ok(Mechanism::Mnar),
            other => Err(Error::config(format!("unknown mechanism `{other}`"))),
        }
    }
}

pub const DEFAULT_OBSERVED_FRACTION: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub kind: Mechanism,
    pub target_rate: f64,
    /// Fraction of columns that feed the logistic model (MAR/MNAR only).
    pub observed_fraction: f64,
    pub seed: u64,
}

impl MechanismSpec {
    pub fn mcar(rate: f64, seed: u64) -> Self {
        Self {
            kind: Mechanism::Mcar,
            target_rate: rate,
            observed_fraction: DEFAULT_OBSERVED_FRACTION,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.target_rate)?;
        if self.kind != Mechanism::Mcar && !(self.observed_fraction > 0.0 && self.observed_fraction < 1.0) {
            return Err(Error::config(format!(
                "observed_fraction must lie in (0, 1), got {}",
                self.observed_fraction
            )));
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("missing rate must lie in (0, 1), got {rate}")))
    }
}

/// Builds the mask for `x` described by `spec`. Deterministic in `(x, spec)`.
pub fn generate_mask(x: &Matrix, spec: &MechanismSpec) -> Result<Mask> {
    spec.validate()?;
    match spec.kind {
        Mechanism::Mcar => {
            let mut rng = StreamRng::seed_from_u64(spec.seed);
            mcar_mask(x.rows(), x.cols(), spec.target_rate, &mut rng)
        }
        Mechanism::Mar => mar_mask(x, spec),
        Mechanism::Mnar => mnar_mask(x, spec),
    }
}

/// Each entry independently missing with probability `rate`.
pub fn mcar_mask<R: Rng + ?Sized>(n: usize, d: usize, rate: f64, rng: &mut R) -> Result<Mask> {
    check_rate(rate)?;
    let m = Matrix::from_fn(n, d, |_, _| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 });
    Ok(Mask(m))
}

/// Column split used by the logistic mechanisms.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticLayout {
    /// Columns feeding the logistic model.
    pub inputs: Vec<usize>,
    /// Columns that receive logistic missingness.
    pub maskable: Vec<usize>,
}

fn logistic_layout<R: Rng>(d: usize, fraction: f64, rng: &mut R) -> Result<LogisticLayout> {
    let n_in = (fraction * d as f64).ceil() as usize;
    if n_in == 0 || n_in >= d {
        return Err(Error::config(format!(
            "{d} columns leave no maskable column at observed_fraction {fraction}"
        )));
    }
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(rng);
    let mut inputs = perm[..n_in].to_vec();
    let mut maskable = perm[n_in..].to_vec();
    inputs.sort_unstable();
    maskable.sort_unstable();
    Ok(LogisticLayout { inputs, maskable })
}

/// Layout chosen by [`mar_mask`]/[`mnar_mask`] for `(d, spec)`.
pub fn layout_for(d: usize, spec: &MechanismSpec) -> Result<LogisticLayout> {
    let mut rng = StreamRng::seed_from_u64(spec.seed);
    logistic_layout(d, spec.observed_fraction, &mut rng)
}

fn logistic_mask(x: &Matrix, spec: &MechanismSpec, self_mask_inputs: bool) -> Result<Mask> {
    spec.validate()?;
    let (n, d) = x.shape();
    let mut rng = StreamRng::seed_from_u64(spec.seed);
    let layout = logistic_layout(d, spec.observed_fraction, &mut rng)?;
    let k = layout.inputs.len();
    let scale = 1.0 / (k as f64).sqrt();
    let weights = Matrix::from_fn(k, layout.maskable.len(), |_, _| {
        rng.sample::<f64, _>(StandardNormal) * scale
    });

    let mut out = Matrix::filled(n, d, 1.0);
    let mut inputs = x.select_cols(&layout.inputs);
    if self_mask_inputs {
        // inputs hidden by MCAR enter the logistic model as zeros
        let hide = mcar_mask(n, k, spec.target_rate, &mut rng)?;
        for i in 0..n {
            for (c, &col) in layout.inputs.iter().enumerate() {
                if !hide.is_observed(i, c) {
                    inputs.set(i, c, 0.0);
                    out.set(i, col, 0.0);
                }
            }
        }
    }
    let scores = inputs.matmul(&weights)?;
    let bias = fit_bias(scores.as_slice(), spec.target_rate)?;
    for i in 0..n {
        for (c, &col) in layout.maskable.iter().enumerate() {
            let p = sigmoid(scores.get(i, c) + bias);
            if rng.gen::<f64>() < p {
                out.set(i, col, 0.0);
            }
        }
    }
    Ok(Mask(out))
}

/// Logistic MAR: a random column subset stays fully observed and drives the
/// missingness of the remaining columns.
pub fn mar_mask(x: &Matrix, spec: &MechanismSpec) -> Result<Mask> {
    logistic_mask(x, spec, false)
}

/// Logistic MNAR: as [`mar_mask`], but the input columns are first hidden
/// MCAR at the target rate, so missingness depends on unobserved inputs.
pub fn mnar_mask(x: &Matrix, spec: &MechanismSpec) -> Result<Mask> {
    logistic_mask(x, spec, true)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const BIAS_TOLERANCE: f64 = 1e-4;
const BIAS_ITERATIONS: usize = 200;

/// Bisection for `b` with `mean(sigmoid(s + b)) = target` on `b ∈ [−30, 30]`.
pub fn fit_bias(scores: &[f64], target: f64) -> Result<f64> {
    check_rate(target)?;
    if scores.is_empty() {
        return Err(Error::Numeric("no scores to fit a bias on".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite logistic score".into()));
    }
    let mean_prob = |b: f64| scores.iter().map(|&s| sigmoid(s + b)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    for _ in 0..BIAS_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let b = 0.5 * (lo + hi);
    let achieved = mean_prob(b);
    if (achieved - target).abs() > BIAS_TOLERANCE {
        return Err(Error::Numeric(format!(
            "bias search stalled at b = {b}: rate {achieved} vs target {target}"
        )));
    }
    Ok(b)
}

/// How missing entries are filled before entering a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FillSpec {
    Zeros,
    Uniform { low: f64, high: f64 },
}

impl FillSpec {
    pub const SMALL_NOISE: FillSpec = FillSpec::Uniform { low: 0.0, high: 0.01 };

    /// A matrix of fill values (zeros or fresh noise).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, d: usize, rng: &mut R) -> Matrix {
        match *self {
            FillSpec::Zeros => Matrix::zeros(n, d),
            FillSpec::Uniform { low, high } => Matrix::from_fn(n, d, |_, _| rng.gen_range(low..=high)),
        }
    }
}

/// Observed entries copied from `x`, missing ones replaced per `fill`.
pub fn fill_missing<R: Rng + ?Sized>(x: &Matrix, m: &Mask, fill: FillSpec, rng: &mut R) -> Result<Matrix> {
    x.check_same(m.as_matrix(), "fill_missing")?;
    let z = fill.sample(x.rows(), x.cols(), rng);
    Ok(combine(m.as_matrix(), x, &z))
}

/// `m ⊙ a + (1 − m) ⊙ b` for a binary `m`.
pub(crate) fn combine(m: &Matrix, a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        let mi = m.get(i, j);
        mi * a.get(i, j) + (1.0 - mi) * b.get(i, j)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    fn uniform_data(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        Matrix::from_fn(n, d, |_, _| r.gen::<f64>())
    }

    #[test]
    fn mcar_limits() {
        let all = mcar_mask(20, 20, 1e-12, &mut rng(0)).unwrap();
        assert_eq!(all.missing_count(), 0);
        let none = mcar_mask(20, 20, 1.0 - 1e-12, &mut rng(0)).unwrap();
        assert_eq!(none.observed_count(), 0);
    }

    #[test]
    fn mcar_rejects_bad_rate() {
        for r in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(mcar_mask(2, 2, r, &mut rng(0)), Err(Error::Config(_))));
        }
    }

    #[test]
    fn mcar_rate_concentrates() {
        let m = mcar_mask(1000, 100, 0.5, &mut rng(11)).unwrap();
        let rate = m.missing_rate();
        assert!((0.49..=0.51).contains(&rate), "{rate}");
    }

    #[test]
    fn fit_bias_examples() {
        let zeros = vec![0.0; 50];
        assert!(fit_bias(&zeros, 0.5).unwrap().abs() < 1e-4);
        assert!((fit_bias(&zeros, 0.8).unwrap() - 4f64.ln()).abs() < 1e-3);

        let mut r = rng(3);
        let scores: Vec<f64> = (0..2000).map(|_| r.sample(StandardNormal)).collect();
        let b = fit_bias(&scores, 0.3).unwrap();
        let achieved = scores.iter().map(|&s| sigmoid(s + b)).sum::<f64>() / scores.len() as f64;
        assert!((achieved - 0.3).abs() < 1e-4);
    }

    #[test]
    fn fit_bias_errors() {
        assert!(matches!(fit_bias(&[f64::NAN], 0.5), Err(Error::Numeric(_))));
        // unreachable target inside [-30, 30]
        assert!(matches!(fit_bias(&[-1000.0], 0.5), Err(Error::Numeric(_))));
    }

    #[test]
    fn mar_keeps_input_columns_observed() {
        let x = uniform_data(5000, 10, 1);
        let spec = MechanismSpec {
            kind: Mechanism::Mar,
            target_rate: 0.4,
            observed_fraction: 0.3,
            seed: 17,
        };
        let m = mar_mask(&x, &spec).unwrap();
        let layout = layout_for(10, &spec).unwrap();
        assert_eq!(layout.inputs.len(), 3);
        for i in 0..x.rows() {
            for &c in &layout.inputs {
                assert!(m.is_observed(i, c));
            }
        }
        let missing: usize = (0..x.rows())
            .map(|i| layout.maskable.iter().filter(|&&c| !m.is_observed(i, c)).count())
            .sum();
        let rate = missing as f64 / (x.rows() * layout.maskable.len()) as f64;
        assert!((rate - 0.4).abs() <= 0.02, "{rate}");
        assert_eq!(m, mar_mask(&x, &spec).unwrap());
    }

    #[test]
    fn mar_zero_scores_give_zero_bias() {
        // all-zero data makes every logistic score zero
        let x = Matrix::zeros(10, 4);
        let spec = MechanismSpec {
            kind: Mechanism::Mar,
            target_rate: 0.5,
            observed_fraction: 0.3,
            seed: 1,
        };
        let layout = layout_for(4, &spec).unwrap();
        let scores = vec![0.0; 10 * layout.maskable.len()];
        assert!(fit_bias(&scores, 0.5).unwrap().abs() < 1e-4);
        assert!(mar_mask(&x, &spec).is_ok());
    }

    #[test]
    fn mar_needs_a_maskable_column() {
        let x = Matrix::zeros(5, 1);
        let spec = MechanismSpec {
            kind: Mechanism::Mar,
            target_rate: 0.5,
            observed_fraction: 0.3,
            seed: 1,
        };
        assert!(matches!(mar_mask(&x, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn mnar_rate_and_binary_output() {
        let x = uniform_data(5000, 10, 2);
        let spec = MechanismSpec {
            kind: Mechanism::Mnar,
            target_rate: 0.4,
            observed_fraction: 0.3,
            seed: 5,
        };
        let m = mnar_mask(&x, &spec).unwrap();
        assert!(m.as_matrix().as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        let layout = layout_for(10, &spec).unwrap();
        let missing: usize = (0..x.rows())
            .map(|i| layout.maskable.iter().filter(|&&c| !m.is_observed(i, c)).count())
            .sum();
        let rate = missing as f64 / (x.rows() * layout.maskable.len()) as f64;
        assert!((rate - 0.4).abs() <= 0.02, "{rate}");
        // input columns carry their own MCAR missingness
        let hidden_inputs: usize = (0..x.rows())
            .map(|i| layout.inputs.iter().filter(|&&c| !m.is_observed(i, c)).count())
            .sum();
        assert!(hidden_inputs > 0);
    }

    #[test]
    fn mar_and_mnar_share_layout() {
        let mut spec = MechanismSpec {
            kind: Mechanism::Mar,
            target_rate: 0.3,
            observed_fraction: 0.3,
            seed: 8,
        };
        let layout = layout_for(8, &spec).unwrap();
        spec.kind = Mechanism::Mnar;
        assert_eq!(layout, layout_for(8, &spec).unwrap());
    }

    #[test]
    fn fill_examples() {
        let x = Matrix::from_rows(&[[0.3, 0.6], [0.9, 0.1]]);
        let out = fill_missing(&x, &Mask::ones(2, 2), FillSpec::Zeros, &mut rng(0)).unwrap();
        assert_eq!(out, x);
        let out = fill_missing(&x, &Mask::zeros(2, 2), FillSpec::Zeros, &mut rng(0)).unwrap();
        assert_eq!(out, Matrix::zeros(2, 2));
        let big = Matrix::filled(50, 50, 0.7);
        let out = fill_missing(&big, &Mask::zeros(50, 50), FillSpec::SMALL_NOISE, &mut rng(0)).unwrap();
        assert!(out.as_slice().iter().all(|v| (0.0..=0.01).contains(v)));
    }

    #[test]
    fn mask_validation() {
        assert!(Mask::from_rows(&[[0.0, 0.5]]).is_err());
        assert!(Mask::from_rows(&[[0.0, 1.0]]).is_ok());
    }

    #[test]
    fn mask_csv_round_trip() {
        let m = mcar_mask(7, 5, 0.5, &mut rng(1)).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(Mask::read_csv(buf.as_slice()).unwrap(), m);
        assert!(Mask::read_csv("1,0\n1\n".as_bytes()).is_err());
        assert!(Mask::read_csv("1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn fitted_rate_matches_target(
            scores in prop::collection::vec(-5.0f64..5.0, 1..200),
            target in 0.05f64..0.95,
        ) {
            let b = fit_bias(&scores, target).unwrap();
            let achieved = scores.iter().map(|&s| sigmoid(s + b)).sum::<f64>() / scores.len() as f64;
            prop_assert!((achieved - target).abs() <= 1e-4);
        }

        #[test]
        fn masks_are_deterministic(seed in any::<u64>(), kind in 0usize..3) {
            let x = uniform_data(30, 6, 9);
            let spec = MechanismSpec {
                kind: [Mechanism::Mcar, Mechanism::Mar, Mechanism::Mnar][kind],
                target_rate: 0.3,
                observed_fraction: 0.3,
                seed,
            };
            prop_assert_eq!(generate_mask(&x, &spec).unwrap(), generate_mask(&x, &spec).unwrap());
        }
    }
}
