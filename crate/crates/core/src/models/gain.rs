use rand::Rng;

use super::{
    clipped_step, compose_on_graph, masked_mse, Activation, Batch, Checkpoint, GeneratorModel, Mlp, MlpSpec,
    ModelConfig, ModelKind, Objective,
};
use crate::error::{Error, Result};
use crate::gradcore::{Adam, Graph, Matrix, Var};
use crate::missingness::Mask;
use crate::seed::StreamRng;

/// `[a ‖ b]` (2d) → 2d → d (relu) → d (sigmoid); shared by both networks.
pub fn gain_spec(d: usize) -> MlpSpec {
    MlpSpec::new(vec![2 * d, 2 * d, d, d], Activation::Relu, Activation::Sigmoid).expect("widths are positive")
}

/// `H = B ⊙ m + 0.5 (1 − B)` with `B` i.i.d. Bernoulli(`rate`).
pub fn sample_hint(m: &Mask, rate: f64, rng: &mut StreamRng) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        if rng.gen::<f64>() < rate {
            m.as_matrix().get(i, j)
        } else {
            0.5
        }
    })
}

/// Entries whose mask value the hint does not reveal.
fn hidden_by_hint(hint: &Matrix) -> Matrix {
    hint.map(|h| if h == 0.5 { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug)]
pub struct Gain {
    gen: Mlp,
    disc: Mlp,
    g_opt: Adam,
    d_opt: Adam,
    config: ModelConfig,
}

impl Gain {
    pub fn new(d: usize, config: ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        let gen = Mlp::new(gain_spec(d), rng);
        let disc = Mlp::new(gain_spec(d), rng);
        Self::from_parts(gen, disc, config)
    }

    pub fn from_parts(gen: Mlp, disc: Mlp, config: ModelConfig) -> Result<Self> {
        let d = gen.spec.output_width();
        if gen.spec != gain_spec(d) || disc.spec != gain_spec(d) {
            return Err(Error::config("networks do not have the adversarial imputer architecture"));
        }
        Ok(Self {
            g_opt: Adam::new(config.learning_rate),
            d_opt: Adam::new(config.learning_rate),
            gen,
            disc,
            config,
        })
    }

    pub fn discriminator(&self) -> &Mlp {
        &self.disc
    }

    /// Per-entry probability that the entry was observed, from `[x̂ ‖ H]`.
    pub fn discriminate(&self, g: &mut Graph, x_hat: Var, hint: Var, trainable: bool) -> Result<Var> {
        let input = g.hconcat(x_hat, hint)?;
        self.disc.forward(g, input, trainable)
    }

    /// Cross-entropy between `D(x_G, H)` and `m`, averaged over the entries
    /// the hint leaves at 0.5.
    pub fn discriminator_loss(&self, g: &mut Graph, x_g: Var, m: &Mask, hint: &Matrix) -> Result<Var> {
        let h = g.constant(hint.clone());
        let d_out = self.discriminate(g, x_g, h, true)?;
        g.bce_loss(d_out, m.as_matrix(), &hidden_by_hint(hint))
    }

    /// `−mean_{m=0} log D(x_G, H) + w · mean_{m=1} (G − x)²` with the
    /// discriminator frozen. Returns the loss and the generator output.
    pub fn generator_loss(&self, g: &mut Graph, x_m: &Matrix, m: &Mask, hint: &Matrix) -> Result<(Var, Var)> {
        let x = g.constant(x_m.clone());
        let mv = g.constant(m.as_matrix().clone());
        let out = self.generate(g, x, mv, true)?;
        let loss = self.generator_loss_from(g, out, x_m, m, hint)?;
        Ok((loss, out))
    }

    fn generator_loss_from(&self, g: &mut Graph, out: Var, x_m: &Matrix, m: &Mask, hint: &Matrix) -> Result<Var> {
        let x_g = compose_on_graph(g, x_m, m.as_matrix(), out)?;
        let h = g.constant(hint.clone());
        let d_out = self.discriminate(g, x_g, h, false)?;
        let missing = m.complement();
        let ones = Matrix::filled(m.rows(), m.cols(), 1.0);
        let adversarial = g.bce_loss(d_out, &ones, &missing)?;
        let rec = masked_mse(g, out, x_m, m.as_matrix())?;
        let rec = g.scale(rec, self.config.reconstruction_weight);
        g.add(adversarial, rec)
    }

    /// One discriminator update against a fixed imputation `x_g`.
    pub fn step_discriminator(&mut self, x_g: &Matrix, m: &Mask, hint: &Matrix) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x_g.clone());
        let loss = self.discriminator_loss(&mut g, xv, m, hint)?;
        let value = g.value(loss).get(0, 0);
        let grads = g.backward(loss)?;
        let mut pg = g.param_grads(&grads, &self.disc.params);
        clipped_step(&mut self.d_opt, &mut self.disc.params, &mut pg, self.config.clip_norm)?;
        Ok(value)
    }
}

impl GeneratorModel for Gain {
    fn kind(&self) -> ModelKind {
        ModelKind::Gain
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn generator(&self) -> &Mlp {
        &self.gen
    }

    fn generator_mut(&mut self) -> &mut Mlp {
        &mut self.gen
    }

    /// Discriminator step, then the generator loss against the updated
    /// discriminator; both use the same fill noise and hint.
    fn baseline_objective(&mut self, g: &mut Graph, batch: &Batch, rng: &mut StreamRng) -> Result<Objective> {
        let hint = sample_hint(&batch.m, self.config.hint_rate, rng);
        let x = g.constant(batch.x.clone());
        let mv = g.constant(batch.m.as_matrix().clone());
        let out = self.generate(g, x, mv, true)?;
        let x_g = super::compose_imputation(&batch.x, &batch.m, g.value(out))?;
        self.step_discriminator(&x_g, &batch.m, &hint)?;
        let loss = self.generator_loss_from(g, out, &batch.x, &batch.m, &hint)?;
        Ok(Objective {
            loss,
            full_output: Some(out),
        })
    }

    fn step_generator(&mut self, grads: &mut [Matrix]) -> Result<()> {
        clipped_step(&mut self.g_opt, &mut self.gen.params, grads, self.config.clip_norm)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Gain,
            config: self.config.clone(),
            generator: self.gen.clone(),
            discriminator: Some(self.disc.clone()),
        }
    }

    fn clone_box(&self) -> Box<dyn GeneratorModel> {
        Box::new(self.clone())
    }
}
