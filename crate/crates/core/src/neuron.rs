//! Leaky integrate-and-fire neurons.
//!
//! A `Lif` layer owns one membrane-potential tensor that persists across the
//! timesteps of a single forward pass and is reset between inputs. The spike
//! threshold backpropagates a sigmoid surrogate; setting `relaxed` swaps the
//! hard threshold for the surrogate's own sigmoid so the whole network
//! becomes differentiable for gradient verification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LifParams {
    /// Membrane time constant (dimensionless divisor of the charge step).
    pub tau: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    /// Sharpness of the surrogate derivative.
    pub surrogate_scale: f64,
    /// Soft-threshold forward, for finite-difference checks only.
    pub relaxed: bool,
}

impl Default for LifParams {
    fn default() -> Self {
        // SpikingJelly conventions
        LifParams {
            tau: 2.0,
            v_threshold: 1.0,
            v_reset: 0.0,
            surrogate_scale: 4.0,
            relaxed: false,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1.0 {
            return Err(Error::Config(format!("lif tau {} < 1", self.tau)));
        }
        if self.v_threshold <= self.v_reset {
            return Err(Error::Config(format!(
                "lif threshold {} must exceed reset {}",
                self.v_threshold, self.v_reset
            )));
        }
        Ok(())
    }
}

/// Stateful LIF layer over an arbitrary tensor shape.
#[derive(Debug, Clone, Default)]
pub struct Lif<F: Real> {
    state: Option<Tensor<F>>,
}

impl<F: Real> Lif<F> {
    pub fn new() -> Self {
        Lif { state: None }
    }

    /// Membrane potentials return to `v_reset`; idempotent.
    pub fn reset(&mut self) {
        self.state = None;
    }

    pub fn state(&self) -> Option<&Tensor<F>> {
        self.state.as_ref()
    }

    /// One timestep: charge `v' = v + (drive - (v - v_reset)) / tau`, fire
    /// where `v' >= v_threshold`, reset fired positions to `v_reset`.
    pub fn step(&mut self, tape: &Tape<F>, drive: &Tensor<F>, p: &LifParams) -> Result<Tensor<F>> {
        let v = match self.state.take() {
            Some(v) => {
                if v.shape() != drive.shape() {
                    return Err(Error::dim(
                        "lif_step",
                        format!("state {:?} vs drive {:?}", v.shape(), drive.shape()),
                    ));
                }
                v
            }
            None => Tensor::full(drive.shape(), F::of_f64(p.v_reset)),
        };
        let inv_tau = 1.0 / p.tau;
        let charged = tape.add(
            &tape.affine(&v, 1.0 - inv_tau, p.v_reset * inv_tau)?,
            &tape.scale(drive, inv_tau)?,
        )?;
        let spikes = tape.spike(&charged, p.v_threshold, p.surrogate_scale, p.relaxed)?;
        let retain = tape.affine(&spikes, -1.0, 1.0)?; // 1 - s
        let mut v_next = tape.mul(&charged, &retain)?;
        if p.v_reset != 0.0 {
            v_next = tape.add(&v_next, &tape.scale(&spikes, p.v_reset)?)?;
        }
        self.state = Some(v_next);
        Ok(spikes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drive(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(vals, &[vals.len()]).unwrap()
    }

    #[test]
    fn charge_below_threshold_then_fire_and_reset() {
        let tape = Tape::<f64>::no_grad();
        let p = LifParams::default(); // tau 2, threshold 1, reset 0
        let mut lif = Lif::new();
        // v=0, drive=1.5 -> v'=0.75, no spike
        let s1 = lif.step(&tape, &drive(&[1.5]), &p).unwrap();
        assert_eq!(s1.data(), &[0.0]);
        assert!((lif.state().unwrap().data()[0] - 0.75).abs() < 1e-12);
        // v=0.75, drive=1.5 -> v'=1.125 >= 1 -> spike, reset to 0
        let s2 = lif.step(&tape, &drive(&[1.5]), &p).unwrap();
        assert_eq!(s2.data(), &[1.0]);
        assert_eq!(lif.state().unwrap().data()[0], 0.0);
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let tape = Tape::<f64>::no_grad();
        let p = LifParams::default();
        let mut lif = Lif::new();
        let s = lif.step(&tape, &drive(&[0.0, 0.0]), &p).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
        assert_eq!(lif.state().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn potential_stays_below_threshold_after_every_step() {
        use rand::{Rng, SeedableRng};
        let tape = Tape::<f64>::no_grad();
        let p = LifParams::default();
        let mut lif = Lif::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let d: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..3.0)).collect();
            let s = lif.step(&tape, &drive(&d), &p).unwrap();
            for &x in s.data() {
                assert!(x == 0.0 || x == 1.0);
            }
            for &v in lif.state().unwrap().data() {
                assert!(v < p.v_threshold);
            }
        }
    }

    #[test]
    fn reset_restores_determinism_and_is_idempotent() {
        let tape = Tape::<f64>::no_grad();
        let p = LifParams::default();
        let mut lif = Lif::new();
        let input = drive(&[0.9, 1.4, 0.3]);
        let first: Vec<f64> = (0..3)
            .map(|_| lif.step(&tape, &input, &p).unwrap())
            .last()
            .unwrap()
            .to_f64_vec();
        // without reset the same input sequence diverges (state carryover)
        let carried: Vec<f64> = lif.step(&tape, &input, &p).unwrap().to_f64_vec();
        lif.reset();
        lif.reset();
        let second: Vec<f64> = (0..3)
            .map(|_| lif.step(&tape, &input, &p).unwrap())
            .last()
            .unwrap()
            .to_f64_vec();
        assert_eq!(first, second);
        let _ = carried;
    }

    #[test]
    fn omitting_reset_changes_second_run() {
        let tape = Tape::<f64>::no_grad();
        let p = LifParams::default();
        // 1.1/tau charges toward 1.1: crosses threshold only on the 4th step
        let input = drive(&[1.1]);
        let mut with_reset = Lif::new();
        let mut without = Lif::new();
        let run = |l: &mut Lif<f64>| -> Vec<f64> {
            let mut out = Vec::new();
            for _ in 0..2 {
                out.extend(l.step(&tape, &input, &p).unwrap().to_f64_vec());
            }
            out
        };
        let a1 = run(&mut with_reset);
        with_reset.reset();
        let a2 = run(&mut with_reset);
        assert_eq!(a1, a2);
        let b1 = run(&mut without);
        let b2 = run(&mut without); // no reset in between
        assert_eq!(b1, a1);
        assert_ne!(b2, b1);
    }

    #[test]
    fn state_shape_mismatch_is_an_error() {
        let tape = Tape::<f64>::no_grad();
        let p = LifParams::default();
        let mut lif = Lif::new();
        lif.step(&tape, &drive(&[0.0, 0.0]), &p).unwrap();
        assert!(lif.step(&tape, &drive(&[0.0]), &p).is_err());
    }

    #[test]
    fn surrogate_at_threshold_equals_quarter_scale() {
        let tape = Tape::<f64>::new();
        let v = tape.leaf(&drive(&[1.0]));
        let s = tape.spike(&v, 1.0, 4.0, false).unwrap();
        let sum = tape.sum(&s).unwrap();
        let g = tape.backward(&sum).unwrap();
        assert!((g.get(&v).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = LifParams { tau: 0.5, ..LifParams::default() };
        assert!(bad.validate().is_err());
        let bad2 = LifParams { v_threshold: 0.0, v_reset: 0.0, ..LifParams::default() };
        assert!(bad2.validate().is_err());
    }
}
