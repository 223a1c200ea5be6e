//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// A model whose scalar loss can be rebuilt from its current parameters.
///
/// `loss` must be a pure function of the parameters: batch norm layers run
/// in train mode on a fixed batch, so running-stat updates do not feed back.
pub trait Differentiable {
    fn params(&self) -> &ParamStore<f64>;
    fn params_mut(&mut self) -> &mut ParamStore<f64>;
    fn loss(&mut self, tape: &mut Tape<f64>) -> Result<Var>;
}

/// Adapts a closure over a parameter store into a [`Differentiable`].
pub struct ClosureModel<F> {
    pub params: ParamStore<f64>,
    pub loss_fn: F,
}

impl<F> Differentiable for ClosureModel<F>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    fn loss(&mut self, tape: &mut Tape<f64>) -> Result<Var> {
        (self.loss_fn)(&self.params, tape)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates checked per parameter tensor (all of them when smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Smallest step tried when shrinking around a ReLU kink.
    pub min_eps: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            samples_per_tensor: 50,
            seed: 0,
            min_eps: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
    /// Coordinates whose difference quotient needed a step below `eps`
    /// because `±eps` moved some ReLU input across zero.
    pub kink_retries: usize,
}

fn eval_loss(model: &mut impl Differentiable) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape)?;
    Ok((tape.value(loss).data()[0], tape.relu_pattern()))
}

/// Largest `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)` over the
/// sampled coordinates, with `numeric` the central difference at `eps`.
///
/// A central difference is only meaningful where the loss is smooth. When
/// either evaluation at `±eps` flips the sign of a ReLU input relative to the
/// unperturbed point, the step is divided by 10 and the coordinate measured
/// again, down to `min_eps`; the last quotient is used either way.
pub fn grad_check(model: &mut impl Differentiable, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (analytic, base_pattern) = {
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape)?;
        let pattern = tape.relu_pattern();
        let store = model.params().clone();
        (tape.backward(loss, &store)?, pattern)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
        kink_retries: 0,
    };
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        let len = model.params().get(id).len();
        let grad = analytic.dense(id);
        let coords: Vec<usize> = if len <= cfg.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, cfg.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let original = model.params().get(id).data()[i];
            let mut eps = cfg.eps;
            let numeric = loop {
                model.params_mut().get_mut(id).data_mut()[i] = original + eps;
                let (plus, p_pattern) = eval_loss(model)?;
                model.params_mut().get_mut(id).data_mut()[i] = original - eps;
                let (minus, m_pattern) = eval_loss(model)?;
                model.params_mut().get_mut(id).data_mut()[i] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                let smooth = p_pattern == base_pattern && m_pattern == base_pattern;
                if smooth || eps / 10.0 < cfg.min_eps {
                    break numeric;
                }
                if eps == cfg.eps {
                    report.kink_retries += 1;
                }
                eps /= 10.0;
            };
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = model.params().name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
