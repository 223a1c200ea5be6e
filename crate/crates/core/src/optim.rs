//! AdaDelta and the two-phase learning-rate multiplier.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId, ParamStore, Scalar, Tensor};

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Running averages for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulators<T: Scalar = f32> {
    pub sq_grad: Vec<T>,
    pub sq_update: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaDelta<T: Scalar = f32> {
    pub rho: T,
    pub eps: T,
    slots: Vec<Accumulators<T>>,
}

impl<T: Scalar> AdaDelta<T> {
    /// Zeroed state for every parameter of `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_hyper(store, T::from_f64_lossy(DEFAULT_RHO), T::from_f64_lossy(DEFAULT_EPS))
    }

    pub fn with_hyper(store: &ParamStore<T>, rho: T, eps: T) -> Self {
        let slots = store
            .iter()
            .map(|(_, _, t)| Accumulators {
                sq_grad: vec![T::zero(); t.len()],
                sq_update: vec![T::zero(); t.len()],
            })
            .collect();
        AdaDelta { rho, eps, slots }
    }

    /// Rebuilds a state from stored accumulators, checking them against `store`.
    pub fn from_slots(store: &ParamStore<T>, rho: T, eps: T, slots: Vec<Accumulators<T>>) -> Result<Self> {
        if slots.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} slots for {} parameters",
                slots.len(),
                store.len()
            )));
        }
        for ((_, name, t), s) in store.iter().zip(&slots) {
            if s.sq_grad.len() != t.len() || s.sq_update.len() != t.len() {
                return Err(Error::Shape(format!("optimizer slot for `{name}` does not match its parameter")));
            }
        }
        Ok(AdaDelta { rho, eps, slots })
    }

    pub fn slots(&self) -> &[Accumulators<T>] {
        &self.slots
    }

    pub fn slot(&self, id: ParamId) -> &Accumulators<T> {
        &self.slots[id.0]
    }

    /// Applies one update to every parameter that received a gradient.
    /// Parameters the tape never touched keep both their values and their
    /// accumulators.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: T) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.slots.len(),
                params.len()
            )));
        }
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if let Some(g) = grads.get(id) {
                self.step_one(id, params.get_mut(id), g, lr)?;
            }
        }
        Ok(())
    }

    pub fn step_one(&mut self, id: ParamId, x: &mut Tensor<T>, g: &Tensor<T>, lr: T) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if g.shape() != x.shape() || slot.sq_grad.len() != x.len() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                x.shape()
            )));
        }
        let (rho, eps) = (self.rho, self.eps);
        let one_minus = T::one() - rho;
        for (((xi, &gi), eg), ed) in x
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(slot.sq_grad.iter_mut())
            .zip(slot.sq_update.iter_mut())
        {
            *eg = rho * *eg + one_minus * gi * gi;
            let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * gi;
            *ed = rho * *ed + one_minus * delta * delta;
            *xi += lr * delta;
        }
        Ok(())
    }
}

/// Learning-rate multipliers of the shared and fine-tune phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub shared_epochs: usize,
    pub finetune_epochs: usize,
    pub shared_lr: f64,
    pub finetune_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            shared_epochs: 100,
            finetune_epochs: 30,
            shared_lr: 1.0,
            finetune_lr: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn total_epochs(&self) -> usize {
        self.shared_epochs + self.finetune_epochs
    }
}

/// Multiplier for a 0-based epoch.
pub fn lr_schedule(epoch: usize, schedule: &LrSchedule) -> Result<f64> {
    let total = schedule.total_epochs();
    if epoch >= total {
        return Err(Error::EpochOutOfRange { epoch, total });
    }
    Ok(if epoch < schedule.shared_epochs {
        schedule.shared_lr
    } else {
        schedule.finetune_lr
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tape;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(v));
        (store, id)
    }

    #[test]
    fn first_unit_gradient_step() {
        let (mut store, id) = scalar_store(0.0);
        let mut opt = AdaDelta::new(&store);
        opt.step_one(id, store.get_mut(id), &Tensor::scalar(1.0), 1.0).unwrap();
        let expected = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
        assert!((expected + 4.4721e-3).abs() < 1e-7);
        assert!((opt.slot(id).sq_grad[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn multiplier_scales_the_update() {
        let mut moved = Vec::new();
        for lr in [1.0, 0.1] {
            let (mut store, id) = scalar_store(2.0);
            let mut opt = AdaDelta::new(&store);
            opt.step_one(id, store.get_mut(id), &Tensor::scalar(0.7), lr).unwrap();
            moved.push(store.get(id).data()[0] - 2.0);
        }
        assert!((moved[1] - 0.1 * moved[0]).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_state() {
        let (mut store, id) = scalar_store(1.5);
        let mut opt = AdaDelta::new(&store);
        opt.step_one(id, store.get_mut(id), &Tensor::scalar(2.0), 1.0).unwrap();
        let before = store.get(id).clone();
        let slot = opt.slot(id).clone();
        for _ in 0..2 {
            opt.step_one(id, store.get_mut(id), &Tensor::scalar(0.0), 1.0).unwrap();
        }
        assert_eq!(store.get(id), &before);
        assert!((opt.slot(id).sq_grad[0] - 0.95 * 0.95 * slot.sq_grad[0]).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_over_random_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut store, id) = scalar_store(0.3);
        let mut opt = AdaDelta::new(&store);
        let (mut x, mut eg, mut ed) = (0.3f64, 0.0f64, 0.0f64);
        for step in 0..100 {
            let g: f64 = rng.gen_range(-3.0..3.0);
            let lr = if step < 60 { 1.0 } else { 0.1 };
            opt.step_one(id, store.get_mut(id), &Tensor::scalar(g), lr).unwrap();
            eg = 0.95 * eg + 0.05 * g * g;
            let d = -((ed + 1e-6).sqrt() / (eg + 1e-6).sqrt()) * g;
            ed = 0.95 * ed + 0.05 * d * d;
            x += lr * d;
            assert!((store.get(id).data()[0] - x).abs() < 1e-7);
        }
        assert!(opt.slot(id).sq_grad[0] >= 0.0 && opt.slot(id).sq_update[0] >= 0.0);
    }

    #[test]
    fn untouched_parameters_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = store.add("b", Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let mut opt = AdaDelta::new(&store);
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let loss = tape.sum(va);
        let grads = tape.backward(loss, &store).unwrap();
        opt.step(&mut store, &grads, 1.0).unwrap();
        assert_ne!(store.get(a).data(), &[1.0, 2.0]);
        assert_eq!(store.get(b).data(), &[3.0, 4.0]);
        assert_eq!(opt.slot(b).sq_grad, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut store, id) = scalar_store(0.0);
        let mut opt = AdaDelta::new(&store);
        let g = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        assert!(opt.step_one(id, store.get_mut(id), &g, 1.0).is_err());
    }

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule::default();
        assert_eq!(lr_schedule(0, &s).unwrap(), 1.0);
        assert_eq!(lr_schedule(99, &s).unwrap(), 1.0);
        assert_eq!(lr_schedule(100, &s).unwrap(), 0.1);
        assert_eq!(lr_schedule(129, &s).unwrap(), 0.1);
        assert!(matches!(
            lr_schedule(130, &s),
            Err(Error::EpochOutOfRange { epoch: 130, total: 130 })
        ));
    }
}
