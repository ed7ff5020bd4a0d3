use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{clipped_step, masked_mse, Activation, Batch, Checkpoint, GeneratorModel, Mlp, MlpSpec, ModelConfig, ModelKind, Objective};
use crate::error::{Error, Result};
use crate::gradcore::{Adam, Graph, Matrix, Var};
use crate::missingness::Mask;
use crate::seed::StreamRng;

/// Entries scored by the denoising reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DaeLossSupport {
    /// Observed entries that survived corruption.
    #[default]
    Kept,
    /// Every observed entry, including the ones hidden by corruption.
    Observed,
}

/// `[x ‖ m]` (2d) → 2d+7 → 2d+14 → 2d+7 (tanh) → d (sigmoid).
pub fn dae_spec(d: usize) -> MlpSpec {
    let w = 2 * d;
    MlpSpec::new(vec![w, w + 7, w + 14, w + 7, d], Activation::Tanh, Activation::Sigmoid)
        .expect("widths are positive")
}

#[derive(Clone, Debug)]
pub struct Dae {
    net: Mlp,
    opt: Adam,
    config: ModelConfig,
}

impl Dae {
    pub fn new(d: usize, config: ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        Self::from_parts(Mlp::new(dae_spec(d), rng), config)
    }

    pub fn from_parts(net: Mlp, config: ModelConfig) -> Result<Self> {
        let d = net.spec.output_width();
        if net.spec != dae_spec(d) {
            return Err(Error::config("network does not have the autoencoder architecture"));
        }
        Ok(Self {
            opt: Adam::new(config.learning_rate),
            net,
            config,
        })
    }

    /// Drops each observed entry with the corruption probability. One draw
    /// per entry, observed or not, so the stream advances by `n·d`.
    pub fn corrupt(&self, m: &Mask, rng: &mut StreamRng) -> Mask {
        let p = self.config.corruption;
        let kept = Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            let dropped = rng.gen::<f64>() < p;
            if m.is_observed(i, j) && !dropped {
                1.0
            } else {
                0.0
            }
        });
        Mask::from_matrix(kept).expect("binary by construction")
    }

    /// Denoising reconstruction loss for a given corruption of `m`.
    pub fn loss_with_kept(&self, g: &mut Graph, x_m: &Matrix, m: &Mask, kept: &Mask) -> Result<Var> {
        let x_in = g.constant(x_m.hadamard(kept.as_matrix())?);
        let m_in = g.constant(kept.as_matrix().clone());
        let out = self.generate(g, x_in, m_in, true)?;
        let support = match self.config.dae_loss {
            DaeLossSupport::Kept => kept,
            DaeLossSupport::Observed => m,
        };
        masked_mse(g, out, x_m, support.as_matrix())
    }

    /// Samples a corruption and records the denoising loss.
    pub fn loss(&self, g: &mut Graph, x_m: &Matrix, m: &Mask, rng: &mut StreamRng) -> Result<Var> {
        let kept = self.corrupt(m, rng);
        self.loss_with_kept(g, x_m, m, &kept)
    }
}

impl GeneratorModel for Dae {
    fn kind(&self) -> ModelKind {
        ModelKind::Dae
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn generator(&self) -> &Mlp {
        &self.net
    }

    fn generator_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn baseline_objective(&mut self, g: &mut Graph, batch: &Batch, rng: &mut StreamRng) -> Result<Objective> {
        let loss = self.loss(g, &batch.x, &batch.m, rng)?;
        Ok(Objective {
            loss,
            full_output: None,
        })
    }

    fn step_generator(&mut self, grads: &mut [Matrix]) -> Result<()> {
        clipped_step(&mut self.opt, &mut self.net.params, grads, self.config.clip_norm)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Dae,
            config: self.config.clone(),
            generator: self.net.clone(),
            discriminator: None,
        }
    }

    fn clone_box(&self) -> Box<dyn GeneratorModel> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn model(d: usize, config: ModelConfig) -> Dae {
        Dae::new(d, config, &mut StreamRng::seed_from_u64(7)).unwrap()
    }

    fn data(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = StreamRng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| r.gen::<f64>())
    }

    #[test]
    fn architecture() {
        let dae = model(3, ModelConfig::default());
        assert_eq!(dae.net.spec.widths, vec![6, 13, 20, 13, 3]);
        assert_eq!(dae.dim(), 3);
    }

    #[test]
    fn forward_range_shape_and_determinism() {
        let dae = model(4, ModelConfig::default());
        for n in [1, 5, 70] {
            let x = data(n, 4, n as u64);
            let m = Mask::ones(n, 4);
            let out = dae.impute_raw(&x, &m).unwrap();
            assert_eq!(out.shape(), (n, 4));
            assert!(out.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(out, dae.impute_raw(&x, &m).unwrap());
        }
        assert_eq!(model(4, ModelConfig::default()).net, dae.net);
    }

    #[test]
    fn no_corruption_full_mask_is_plain_mse() {
        let cfg = ModelConfig {
            corruption: 0.0,
            ..ModelConfig::default()
        };
        let dae = model(3, cfg);
        let x = data(6, 3, 1);
        let m = Mask::ones(6, 3);
        let mut g = Graph::new();
        let l = dae.loss(&mut g, &x, &m, &mut StreamRng::seed_from_u64(0)).unwrap();
        let out = dae.impute_raw(&x, &m).unwrap();
        let mse = out.sub(&x).unwrap().sum_squares() / 18.0;
        assert!((g.value(l).get(0, 0) - mse).abs() < 1e-14);
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let dae = model(2, ModelConfig::default());
        let x = Matrix::filled(4, 2, 0.5);
        // zero weights and biases make every output sigmoid(0) = 0.5
        let mut zeroed = dae.clone();
        for p in zeroed.net.params.values_mut() {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
        let mut g = Graph::new();
        let l = zeroed
            .loss(&mut g, &x, &Mask::ones(4, 2), &mut StreamRng::seed_from_u64(0))
            .unwrap();
        assert_eq!(g.value(l).get(0, 0), 0.0);
    }

    #[test]
    fn loss_is_non_negative() {
        let dae = model(3, ModelConfig::default());
        let x = data(10, 3, 2);
        let mut rng = StreamRng::seed_from_u64(9);
        for _ in 0..20 {
            let m = crate::missingness::mcar_mask(10, 3, 0.4, &mut rng).unwrap();
            let mut g = Graph::new();
            let l = dae.loss(&mut g, &x, &m, &mut rng).unwrap();
            assert!(g.value(l).get(0, 0) >= 0.0);
        }
    }

    #[test]
    fn corruption_only_removes_observed_entries() {
        let dae = model(3, ModelConfig::default());
        let mut rng = StreamRng::seed_from_u64(4);
        let m = crate::missingness::mcar_mask(200, 3, 0.3, &mut rng).unwrap();
        let kept = dae.corrupt(&m, &mut rng);
        for i in 0..200 {
            for j in 0..3 {
                assert!(!kept.is_observed(i, j) || m.is_observed(i, j));
            }
        }
        let ratio = kept.observed_count() as f64 / m.observed_count() as f64;
        assert!((ratio - 0.5).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn small_step_decreases_fixed_batch_loss() {
        let mut dae = model(4, ModelConfig {
            learning_rate: 1e-4,
            ..ModelConfig::default()
        });
        let x = data(16, 4, 5);
        let m = crate::missingness::mcar_mask(16, 4, 0.3, &mut StreamRng::seed_from_u64(1)).unwrap();
        let kept = dae.corrupt(&m, &mut StreamRng::seed_from_u64(2));
        let eval = |d: &Dae| {
            let mut g = Graph::new();
            let l = d.loss_with_kept(&mut g, &x, &m, &kept).unwrap();
            (g.value(l).get(0, 0), g, l)
        };
        let (before, g, l) = eval(&dae);
        let grads = g.backward(l).unwrap();
        let mut pg = g.param_grads(&grads, &dae.net.params);
        dae.step_generator(&mut pg).unwrap();
        let (after, _, _) = eval(&dae);
        assert!(after < before, "{after} !< {before}");
    }
}
