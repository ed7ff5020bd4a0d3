//! Finite-difference checks of every differentiable op and of the model
//! objectives. Each check returns the first mismatch it finds.

use super::{central_diff, check_graph_fn, first_mismatch, rng, uniform};
use misa::gradcore::{Graph, Matrix, Var};
use misa::misa::{hybrid_objective, sample_artificial_mask, AugReduction, MisaConfig};
use misa::missingness::{fill_missing, mcar_mask, Mask};
use misa::models::{build_model, sample_hint, Batch, Dae, Gain, GeneratorModel, Mlp, ModelConfig, ModelKind};
use misa::seed::StreamRng;

pub type Check = Result<(), String>;

/// Weighted sum of a matrix-valued node, so every entry gets a distinct
/// upstream gradient.
fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let (r, c) = g.value(v).shape();
    let w = g.constant(uniform(r, c, -1.0, 1.0, seed));
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

fn unary(op: fn(&mut Graph, Var) -> Var, lo: f64, hi: f64) -> Check {
    let x = uniform(4, 3, lo, hi, 1);
    check_graph_fn(&[x], |g, v| {
        let y = op(g, v[0]);
        project(g, y, 2)
    })
}

pub fn matmul_gradient() -> Check {
    let a = uniform(4, 3, -1.0, 1.0, 1);
    let b = uniform(3, 5, -1.0, 1.0, 2);
    check_graph_fn(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y, 3)
    })
}

pub fn linear_gradient() -> Check {
    let x = uniform(4, 3, -1.0, 1.0, 1);
    let w = uniform(3, 2, -1.0, 1.0, 2);
    let b = uniform(1, 2, -1.0, 1.0, 3);
    check_graph_fn(&[x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        project(g, y, 4)
    })
}

pub fn binary_elementwise_gradients() -> Check {
    let a = uniform(3, 4, -1.0, 1.0, 1);
    let b = uniform(3, 4, -1.0, 1.0, 2);
    let ops: [fn(&mut Graph, Var, Var) -> Var; 3] = [
        |g, a, b| g.add(a, b).unwrap(),
        |g, a, b| g.sub(a, b).unwrap(),
        |g, a, b| g.mul(a, b).unwrap(),
    ];
    for op in ops {
        check_graph_fn(&[a.clone(), b.clone()], |g, v| {
            let y = op(g, v[0], v[1]);
            project(g, y, 3)
        })?;
    }
    Ok(())
}

pub fn sigmoid_gradient() -> Check {
    unary(|g, v| g.sigmoid(v), -3.0, 3.0)
}

pub fn tanh_gradient() -> Check {
    unary(|g, v| g.tanh(v), -2.0, 2.0)
}

pub fn relu_gradient_away_from_kink() -> Check {
    unary(|g, v| g.relu(v), 0.1, 1.0)?;
    unary(|g, v| g.relu(v), -1.0, -0.1)
}

pub fn square_and_scale_gradients() -> Check {
    unary(|g, v| g.square(v), -1.0, 1.0)?;
    unary(|g, v| g.scale(v, -2.5), -1.0, 1.0)
}

pub fn hconcat_gradient() -> Check {
    let a = uniform(3, 2, -1.0, 1.0, 1);
    let b = uniform(3, 4, -1.0, 1.0, 2);
    check_graph_fn(&[a, b], |g, v| {
        let y = g.hconcat(v[0], v[1]).unwrap();
        project(g, y, 3)
    })
}

pub fn reductions_gradient() -> Check {
    let x = uniform(3, 4, -1.0, 1.0, 1);
    check_graph_fn(&[x.clone()], |g, v| g.reduce_sum_squares(v[0]))?;
    check_graph_fn(&[x], |g, v| {
        let s = g.square(v[0]);
        g.sum(s)
    })
}

pub fn bce_gradient() -> Check {
    let p = uniform(4, 3, 0.05, 0.95, 1);
    let target = uniform(4, 3, 0.0, 1.0, 2).map(|v| (v > 0.5) as u8 as f64);
    let weight = uniform(4, 3, 0.0, 1.0, 3).map(|v| (v > 0.3) as u8 as f64);
    check_graph_fn(&[p], |g, v| g.bce_loss(v[0], &target, &weight).unwrap())
}

pub fn softmax_cross_entropy_gradient() -> Check {
    let logits = uniform(5, 3, -2.0, 2.0, 1);
    let labels = [0, 2, 1, 1, 0];
    check_graph_fn(&[logits], |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap())
}

/// Compares parameter gradients of a scalar loss built from `net` with
/// finite differences obtained by perturbing a copy of `net`.
fn check_net(net: &Mlp, loss: impl Fn(&Mlp) -> (Graph, Var)) -> Check {
    let (g, out) = loss(net);
    let grads = g.backward(out).map_err(|e| e.to_string())?;
    let analytic = g.param_grads(&grads, &net.params);
    for (p, value) in net.params.iter().enumerate() {
        let mut eval = |perturbed: &Matrix| {
            let mut copy = net.clone();
            copy.params.values_mut()[p] = perturbed.clone();
            let (g, out) = loss(&copy);
            g.value(out).get(0, 0)
        };
        if let Some((k, a, n)) = first_mismatch(&analytic[p], |k| central_diff(value, k, &mut eval)) {
            return Err(format!("{} entry {k}: analytic {a} vs numeric {n}", net.params.names()[p]));
        }
    }
    Ok(())
}

/// Zero-initialised biases can leave a ReLU preactivation exactly at 0 when
/// a row's previous layer is fully inactive; shift them off the kink.
fn off_kink(net: &mut Mlp, seed: u64) {
    let names: Vec<String> = net.params.names().to_vec();
    for (p, name) in names.iter().enumerate() {
        if name.starts_with('b') {
            let v = &mut net.params.values_mut()[p];
            *v = v.add(&uniform(v.rows(), v.cols(), 0.01, 0.05, seed + p as u64)).unwrap();
        }
    }
}

struct Fixture {
    x: Matrix,
    m: Mask,
}

fn fixture(n: usize, d: usize, seed: u64) -> Fixture {
    let mut r = rng(seed);
    let m = mcar_mask(n, d, 0.4, &mut r).unwrap();
    let x = uniform(n, d, 0.0, 1.0, seed + 1).hadamard(m.as_matrix()).unwrap();
    Fixture { x, m }
}

pub fn dae_loss_parameter_gradients() -> Check {
    let f = fixture(6, 3, 10);
    let cfg = ModelConfig::default();
    let dae = Dae::new(3, cfg.clone(), &mut rng(11)).unwrap();
    let kept = dae.corrupt(&f.m, &mut rng(12));
    check_net(dae.generator(), |net| {
        let model = Dae::from_parts(net.clone(), cfg.clone()).unwrap();
        let mut g = Graph::new();
        let l = model.loss_with_kept(&mut g, &f.x, &f.m, &kept).unwrap();
        (g, l)
    })
}

pub fn gain_generator_parameter_gradients() -> Check {
    let f = fixture(6, 3, 20);
    let cfg = ModelConfig::default();
    let gain = Gain::new(3, cfg.clone(), &mut rng(21)).unwrap();
    let hint = sample_hint(&f.m, cfg.hint_rate, &mut rng(22));
    check_net(gain.generator(), |net| {
        let model = Gain::from_parts(net.clone(), gain.discriminator().clone(), cfg.clone()).unwrap();
        let mut g = Graph::new();
        let (l, _) = model.generator_loss(&mut g, &f.x, &f.m, &hint).unwrap();
        (g, l)
    })
}

pub fn gain_discriminator_parameter_gradients() -> Check {
    let f = fixture(6, 3, 30);
    let cfg = ModelConfig::default();
    let gain = Gain::new(3, cfg.clone(), &mut rng(31)).unwrap();
    let hint = sample_hint(&f.m, cfg.hint_rate, &mut rng(32));
    let x_g = gain.impute(&f.x, &f.m).unwrap();
    check_net(gain.discriminator(), |net| {
        let model = Gain::from_parts(gain.generator().clone(), net.clone(), cfg.clone()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x_g.clone());
        let l = model.discriminator_loss(&mut g, xv, &f.m, &hint).unwrap();
        (g, l)
    })
}

/// Independent re-derivation of the hybrid objective from public pieces.
/// `x_g` fixed means the first imputation is treated as a constant, which
/// is what the stop-gradient variant differentiates.
struct HybridOracle<'a> {
    kind: ModelKind,
    batch: &'a Batch,
    cfg: &'a MisaConfig,
    alpha: f64,
    base: StreamRng,
    aug: StreamRng,
    /// Discriminator after the step the objective takes internally.
    disc: Option<Mlp>,
    x_g: Option<Matrix>,
}

impl HybridOracle<'_> {
    fn total(&self, net: &Mlp) -> f64 {
        let (x, m) = (&self.batch.x, self.batch.m.as_matrix());
        let mut base = self.base.clone();
        let mut aug = self.aug.clone();
        let model_cfg = ModelConfig::default();
        let mut g = Graph::new();
        let l_ori = match self.kind {
            ModelKind::Dae => {
                let dae = Dae::from_parts(net.clone(), model_cfg).unwrap();
                let l = dae.loss(&mut g, x, &self.batch.m, &mut base).unwrap();
                g.value(l).get(0, 0)
            }
            ModelKind::Gain => {
                let hint = sample_hint(&self.batch.m, model_cfg.hint_rate, &mut base);
                let gain = Gain::from_parts(net.clone(), self.disc.clone().unwrap(), model_cfg).unwrap();
                let (l, _) = gain.generator_loss(&mut g, x, &self.batch.m, &hint).unwrap();
                g.value(l).get(0, 0)
            }
        };
        let raw = |xi: &Matrix, mi: &Matrix| net.predict(&xi.hconcat(mi).unwrap()).unwrap();
        let blend = |keep: &Matrix, a: &Matrix, b: &Matrix| {
            Matrix::from_fn(a.rows(), a.cols(), |i, j| {
                keep.get(i, j) * a.get(i, j) + (1.0 - keep.get(i, j)) * b.get(i, j)
            })
        };
        let x_g = match &self.x_g {
            Some(v) => v.clone(),
            None => blend(m, x, &raw(x, m)),
        };
        let m_t = sample_artificial_mask(&self.batch.m, &mut aug).unwrap();
        let fill = self.cfg.fill.unwrap_or(self.kind.fill());
        let z = fill.sample(x.rows(), x.cols(), &mut aug);
        let mt = m_t.as_matrix();
        let x_t = blend(mt, &x_g, &z);
        let x_tg = blend(mt, &x_t, &raw(&x_t, mt));
        let (mut sse, mut count) = (0.0, 0.0);
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let w = m.get(i, j) * (1.0 - mt.get(i, j));
                sse += w * (x_tg.get(i, j) - x.get(i, j)).powi(2);
                count += w;
            }
        }
        let l_aug = match self.cfg.reduction {
            AugReduction::SupportMean if count > 0.0 => sse / count,
            AugReduction::SupportMean => 0.0,
            AugReduction::RowSum => sse / x.rows() as f64,
        };
        l_ori + self.alpha * l_aug
    }
}

fn check_hybrid(kind: ModelKind, cfg: &MisaConfig, alpha: f64, seed: u64) -> Check {
    let f = fixture(6, 3, seed);
    let x = fill_missing(&f.x, &f.m, kind.fill(), &mut rng(seed + 1)).unwrap();
    let batch = Batch::new(x, f.m.clone()).unwrap();
    let mut model = build_model(kind, 3, &ModelConfig::default(), &mut rng(seed + 2)).unwrap();
    off_kink(model.generator_mut(), seed + 5);
    let (base, aug) = (rng(seed + 3), rng(seed + 4));

    let mut stepped = model.clone();
    let h = hybrid_objective(stepped.as_mut(), &batch, cfg, alpha, &mut base.clone(), &mut aug.clone()).unwrap();
    let grads = h.graph.backward(h.total).unwrap();
    let analytic = h.graph.param_grads(&grads, &model.generator().params);

    let net = model.generator();
    let oracle = HybridOracle {
        kind,
        batch: &batch,
        cfg,
        alpha,
        base,
        aug,
        disc: stepped.checkpoint().discriminator,
        x_g: cfg.stop_gradient.then(|| model.impute(&batch.x, &batch.m).unwrap()),
    };
    let recorded = h.graph.value(h.total).get(0, 0);
    let rebuilt = oracle.total(net);
    if (recorded - rebuilt).abs() > 1e-10 * rebuilt.abs().max(1.0) {
        return Err(format!("{} hybrid value {recorded} vs rebuilt {rebuilt}", kind.name()));
    }
    for (p, value) in net.params.iter().enumerate() {
        let mut eval = |perturbed: &Matrix| {
            let mut copy = net.clone();
            copy.params.values_mut()[p] = perturbed.clone();
            oracle.total(&copy)
        };
        if let Some((k, a, n)) = first_mismatch(&analytic[p], |k| central_diff(value, k, &mut eval)) {
            return Err(format!(
                "{} hybrid {} entry {k}: analytic {a} vs numeric {n}",
                kind.name(),
                net.params.names()[p]
            ));
        }
    }
    Ok(())
}

pub fn hybrid_objective_gradients_with_stop_gradient() -> Check {
    let cfg = MisaConfig::default();
    check_hybrid(ModelKind::Dae, &cfg, 5.0, 40)?;
    check_hybrid(ModelKind::Gain, &cfg, 100.0, 50)
}

pub fn hybrid_objective_gradients_through_first_imputation() -> Check {
    let cfg = MisaConfig {
        stop_gradient: false,
        ..MisaConfig::default()
    };
    check_hybrid(ModelKind::Dae, &cfg, 5.0, 60)?;
    check_hybrid(ModelKind::Gain, &cfg, 100.0, 70)
}

pub fn hybrid_objective_gradients_row_sum_reduction() -> Check {
    let cfg = MisaConfig {
        reduction: AugReduction::RowSum,
        ..MisaConfig::default()
    };
    check_hybrid(ModelKind::Dae, &cfg, 1.0, 80)?;
    check_hybrid(ModelKind::Gain, &cfg, 10.0, 90)
}


/// Every check by name.
pub const ALL: &[(&str, fn() -> Check)] = &[
    ("matmul_gradient", matmul_gradient),
    ("linear_gradient", linear_gradient),
    ("binary_elementwise_gradients", binary_elementwise_gradients),
    ("sigmoid_gradient", sigmoid_gradient),
    ("tanh_gradient", tanh_gradient),
    ("relu_gradient_away_from_kink", relu_gradient_away_from_kink),
    ("square_and_scale_gradients", square_and_scale_gradients),
    ("hconcat_gradient", hconcat_gradient),
    ("reductions_gradient", reductions_gradient),
    ("bce_gradient", bce_gradient),
    ("softmax_cross_entropy_gradient", softmax_cross_entropy_gradient),
    ("dae_loss_parameter_gradients", dae_loss_parameter_gradients),
    ("gain_generator_parameter_gradients", gain_generator_parameter_gradients),
    ("gain_discriminator_parameter_gradients", gain_discriminator_parameter_gradients),
    ("hybrid_objective_gradients_with_stop_gradient", hybrid_objective_gradients_with_stop_gradient),
    ("hybrid_objective_gradients_through_first_imputation", hybrid_objective_gradients_through_first_imputation),
    ("hybrid_objective_gradients_row_sum_reduction", hybrid_objective_gradients_row_sum_reduction),
];
