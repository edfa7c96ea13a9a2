//! Shared layer building blocks: linear, batchnorm with running estimates,
//! and seeded weight initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::Param;
use crate::tensor::{BatchStats, Real, Tape, Tensor};

/// Seeded weight sampler. Uses its own Box-Muller normal so the stream is
/// identical across platforms and scalar types.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self) -> f64 {
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal(0, std) resampled until within two standard deviations.
    pub fn trunc_normal<F: Real>(&mut self, n: usize, std: f64) -> Vec<F> {
        (0..n)
            .map(|_| {
                loop {
                    let z = self.normal();
                    if z.abs() <= 2.0 {
                        return F::of_f64(z * std);
                    }
                }
            })
            .collect()
    }

    pub fn he_normal<F: Real>(&mut self, n: usize, fan_in: usize) -> Vec<F> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..n).map(|_| F::of_f64(self.normal() * std)).collect()
    }
}

/// How a batchnorm layer obtains its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics from the current activations.
    Batch,
    /// Statistics from the current activations, folded into the running
    /// estimates (calibration).
    BatchUpdateRunning,
    /// Stored running estimates (inference).
    Running,
}

#[derive(Debug, Clone)]
pub struct BnLayer<F: Real> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Real> BnLayer<F> {
    pub fn new(prefix: &str, features: usize) -> Self {
        BnLayer {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::full(&[features], F::one())),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(&[features])),
            running_mean: vec![F::zero(); features],
            running_var: vec![F::one(); features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn observe(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = F::of_f64(r.as_f64() * (1.0 - m) + b * m);
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = F::of_f64(r.as_f64() * (1.0 - m) + b * m);
        }
    }

    pub fn forward_rows(
        &mut self,
        tape: &Tape<F>,
        x: &Tensor<F>,
        active: Option<&[bool]>,
        mode: BnMode,
    ) -> Result<Tensor<F>> {
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        let stats = match mode {
            BnMode::Running => crate::tensor::BnStats::Running {
                mean: &self.running_mean,
                var: &self.running_var,
            },
            _ => crate::tensor::BnStats::Batch,
        };
        let (out, observed) = tape.batchnorm_rows(x, &gamma, &beta, self.eps, active, stats)?;
        if mode == BnMode::BatchUpdateRunning {
            self.observe(&observed);
        }
        Ok(out)
    }

    pub fn forward_2d(&mut self, tape: &Tape<F>, x: &Tensor<F>, mode: BnMode) -> Result<Tensor<F>> {
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        let stats = match mode {
            BnMode::Running => crate::tensor::BnStats::Running {
                mean: &self.running_mean,
                var: &self.running_var,
            },
            _ => crate::tensor::BnStats::Batch,
        };
        let (out, observed) = tape.batchnorm2d(x, &gamma, &beta, self.eps, stats)?;
        if mode == BnMode::BatchUpdateRunning {
            self.observe(&observed);
        }
        Ok(out)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer<F: Real> {
    pub weight: Param<F>, // [in, out]
    pub bias: Param<F>,   // [out]
}

impl<F: Real> LinearLayer<F> {
    pub fn new(prefix: &str, fan_in: usize, fan_out: usize, init: &mut Initializer) -> Self {
        LinearLayer {
            weight: Param::new(
                format!("{prefix}.weight"),
                Tensor::from_vec(init.trunc_normal(fan_in * fan_out, 0.02), &[fan_in, fan_out])
                    .expect("sized"),
            ),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, tape: &Tape<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        tape.add_bias(&tape.matmul(x, &w)?, &b)
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
