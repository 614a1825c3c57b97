//! AdamW over a [`ParamSet`], with decoupled weight decay gated per entry
//! and a trainable mask so frozen entries (linear probing) are never touched.

use crate::error::{CoreError, Result};
use crate::model::{Checkpoint, ParamSet};

/// First and second moments are stored as f32 alongside the parameters, but
/// every update is computed in f64 from the stored (rounded) state, so a
/// checkpointed optimizer resumes bit-identically.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: u64,
    trainable: Vec<bool>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(
        params: &ParamSet,
        trainable: Vec<bool>,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Result<AdamW> {
        if trainable.len() != params.entries().len() {
            return Err(CoreError::invalid(
                "optimizer",
                format!(
                    "{} trainable flags for {} parameter entries",
                    trainable.len(),
                    params.entries().len()
                ),
            ));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(CoreError::invalid("optimizer", "betas must lie in [0, 1)"));
        }
        if !(eps > 0.0) || weight_decay < 0.0 {
            return Err(CoreError::invalid("optimizer", "eps must be > 0 and weight decay >= 0"));
        }
        let (m, v) = params
            .entries()
            .iter()
            .zip(&trainable)
            .map(|(e, &t)| {
                let len = if t { e.data.len() } else { 0 };
                (vec![0.0f32; len], vec![0.0f32; len])
            })
            .unzip();
        Ok(AdamW { beta1, beta2, eps, weight_decay, steps: 0, trainable, m, v })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    /// One update. `grads` is aligned with the entries of `params`: trainable
    /// entries must carry a gradient, frozen entries must not (their graph
    /// tensors are constants, so a gradient here means miswired training).
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Vec<f32>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.trainable.len() {
            return Err(CoreError::invalid(
                "optimizer step",
                format!("{} gradients for {} entries", grads.len(), self.trainable.len()),
            ));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(CoreError::invalid("optimizer step", format!("bad learning rate {lr}")));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            if !self.trainable[i] {
                if grads[i].is_some() {
                    return Err(CoreError::invalid(
                        "optimizer step",
                        format!("gradient supplied for frozen entry {}", entry.name),
                    ));
                }
                continue;
            }
            let g = grads[i].as_ref().ok_or_else(|| {
                CoreError::invalid(
                    "optimizer step",
                    format!("missing gradient for trainable entry {}", entry.name),
                )
            })?;
            if g.len() != entry.data.len() {
                return Err(CoreError::shape(
                    "optimizer step",
                    format!("{}: gradient len {} vs {}", entry.name, g.len(), entry.data.len()),
                ));
            }
            let decay = if entry.decay { self.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                let gj = g[j] as f64;
                if !gj.is_finite() {
                    return Err(CoreError::invalid(
                        "optimizer step",
                        format!("non-finite gradient in {}", entry.name),
                    ));
                }
                m[j] = (self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj) as f32;
                v[j] = (self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj) as f32;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                let theta = entry.data[j] as f64;
                entry.data[j] =
                    (theta - lr * decay * theta - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }

    /// Store the moments of every trainable entry as `opt.m.<name>` and
    /// `opt.v.<name>` arrays. The step count travels in the checkpoint header.
    pub fn push_state(&self, ckpt: &mut Checkpoint, params: &ParamSet) -> Result<()> {
        for (i, e) in params.entries().iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            ckpt.push_array(format!("opt.m.{}", e.name), e.rows, e.cols, self.m[i].clone())?;
            ckpt.push_array(format!("opt.v.{}", e.name), e.rows, e.cols, self.v[i].clone())?;
        }
        Ok(())
    }

    /// Restore moments and step count saved by [`AdamW::push_state`].
    pub fn restore_state(
        &mut self,
        ckpt: &Checkpoint,
        params: &ParamSet,
        steps: u64,
    ) -> Result<()> {
        for (i, e) in params.entries().iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            for (store, tag) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let name = format!("opt.{tag}.{}", e.name);
                let arr = ckpt.array(&name).ok_or_else(|| {
                    CoreError::invalid("optimizer restore", format!("checkpoint lacks {name}"))
                })?;
                if arr.rows != e.rows || arr.cols != e.cols {
                    return Err(CoreError::shape(
                        "optimizer restore",
                        format!("{name}: {}x{} vs {}x{}", arr.rows, arr.cols, e.rows, e.cols),
                    ));
                }
                store.copy_from_slice(&arr.data);
            }
        }
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, NetKind};

    fn two_entry_set() -> (ParamSet, Vec<bool>) {
        let mut p = ParamSet::new();
        p.push("w", 1, 2, vec![1.0, -1.0], true).unwrap();
        p.push("b", 1, 1, vec![0.5], false).unwrap();
        (p, vec![true, true])
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let (mut p, mask) = two_entry_set();
        let mut opt = AdamW::new(&p, mask, 0.9, 0.999, 1e-8, 0.0).unwrap();
        let grads = vec![Some(vec![2.0, -2.0]), Some(vec![1.0])];
        opt.step(&mut p, &grads, 0.1).unwrap();
        // After one step every coordinate moves by lr * sign(g) up to the
        // eps correction: m_hat = g, v_hat = g^2, delta = lr * g / (|g| + eps).
        let w = &p.entries()[0].data;
        assert!((w[0] as f64 - (1.0 - 0.1)).abs() < 1e-6, "{}", w[0]);
        assert!((w[1] as f64 - (-1.0 + 0.1)).abs() < 1e-6, "{}", w[1]);
        let b = &p.entries()[1].data;
        assert!((b[0] as f64 - 0.4).abs() < 1e-6, "{}", b[0]);
    }

    #[test]
    fn second_step_matches_scalar_reference() {
        let (beta1, beta2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.05f64);
        let mut p = ParamSet::new();
        p.push("x", 1, 1, vec![0.3], false).unwrap();
        let mut opt = AdamW::new(&p, vec![true], beta1, beta2, eps, 0.0).unwrap();
        opt.step(&mut p, &[Some(vec![0.7])], lr).unwrap();
        opt.step(&mut p, &[Some(vec![-0.2])], lr).unwrap();

        // Scalar replay with the same f32 state rounding.
        let (mut theta, mut m, mut v) = (0.3f64, 0.0f32, 0.0f32);
        for (t, g) in [(1, 0.7f64), (2, -0.2f64)] {
            m = (beta1 * m as f64 + (1.0 - beta1) * g) as f32;
            v = (beta2 * v as f64 + (1.0 - beta2) * g * g) as f32;
            let m_hat = m as f64 / (1.0 - beta1.powi(t));
            let v_hat = v as f64 / (1.0 - beta2.powi(t));
            theta = (theta - lr * m_hat / (v_hat.sqrt() + eps) as f64) as f32 as f64;
        }
        assert_eq!(p.entries()[0].data[0], theta as f32);
    }

    #[test]
    fn weight_decay_only_touches_decay_entries() {
        let (mut p, mask) = two_entry_set();
        let mut opt = AdamW::new(&p, mask, 0.9, 0.999, 1e-8, 0.1).unwrap();
        // Zero gradients: the Adam delta is exactly zero, so any movement
        // comes from the decoupled decay term alone.
        let grads = vec![Some(vec![0.0, 0.0]), Some(vec![0.0])];
        opt.step(&mut p, &grads, 0.5).unwrap();
        let w = &p.entries()[0].data;
        assert!((w[0] - 0.95).abs() < 1e-6, "decay entry shrinks: {}", w[0]);
        assert!((w[1] + 0.95).abs() < 1e-6, "decay entry shrinks: {}", w[1]);
        assert_eq!(p.entries()[1].data[0], 0.5, "no-decay entry untouched");
    }

    #[test]
    fn frozen_entries_keep_their_bits() {
        let (mut p, _) = two_entry_set();
        let before = p.entries()[0].data.clone();
        let mut opt = AdamW::new(&p, vec![false, true], 0.9, 0.999, 1e-8, 0.04).unwrap();
        opt.step(&mut p, &[None, Some(vec![1.0])], 0.1).unwrap();
        assert_eq!(p.entries()[0].data, before);
        assert!(opt.step(&mut p, &[Some(vec![1.0, 1.0]), Some(vec![1.0])], 0.1).is_err());
        assert!(opt.step(&mut p, &[None, None], 0.1).is_err());
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let (mut p, mask) = two_entry_set();
        let mut opt = AdamW::new(&p, mask.clone(), 0.9, 0.999, 1e-8, 0.0).unwrap();
        opt.step(&mut p, &[Some(vec![0.3, -0.6]), Some(vec![0.2])], 0.01).unwrap();
        let cfg = ModelConfig::vit_mu(3);
        let mut ckpt = Checkpoint::new("test", 0, opt.steps(), 7, cfg);
        opt.push_state(&mut ckpt, &p).unwrap();

        let mut fresh = AdamW::new(&p, mask, 0.9, 0.999, 1e-8, 0.0).unwrap();
        fresh.restore_state(&ckpt, &p, ckpt.step).unwrap();
        let mut a = p.clone();
        let mut b = p.clone();
        opt.step(&mut a, &[Some(vec![0.1, 0.1]), Some(vec![-0.1])], 0.01).unwrap();
        fresh.step(&mut b, &[Some(vec![0.1, 0.1]), Some(vec![-0.1])], 0.01).unwrap();
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            let ba: Vec<u32> = ea.data.iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = eb.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn constructor_rejects_bad_hyperparameters() {
        let (p, mask) = two_entry_set();
        assert!(AdamW::new(&p, mask.clone(), 1.0, 0.999, 1e-8, 0.0).is_err());
        assert!(AdamW::new(&p, mask.clone(), 0.9, 0.999, 0.0, 0.0).is_err());
        assert!(AdamW::new(&p, mask.clone(), 0.9, 0.999, 1e-8, -0.1).is_err());
        assert!(AdamW::new(&p, vec![true], 0.9, 0.999, 1e-8, 0.0).is_err());
    }

    #[test]
    fn net_kind_smoke_masks_align_with_init() {
        let cfg = ModelConfig::vit_mu(3);
        let p = crate::model::init_params(&cfg, NetKind::classifier(), 11).unwrap();
        let mask: Vec<bool> =
            p.entries().iter().map(|e| e.name.starts_with("classifier.")).collect();
        assert_eq!(mask.iter().filter(|&&t| t).count(), 2);
        let opt = AdamW::new(&p, mask, 0.9, 0.999, 1e-8, 0.04).unwrap();
        assert_eq!(opt.steps(), 0);
    }
}
