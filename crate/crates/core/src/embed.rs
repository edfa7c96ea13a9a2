//! Spike patch splitting: the convolutional tokenizer front-end.
//!
//! Two modes share one weight set and one per-stage pipeline
//! (conv -> batchnorm -> LIF -> maxpool):
//!
//! * vanilla SPS runs the full stack once per timestep, so every timestep
//!   pays the convolution cost and the stage LIF states make consecutive
//!   token sets drift apart;
//! * integrated SPS (I-SPS) runs the convolutional stack exactly once,
//!   stepping the intermediate LIFs a single time, and then iterates only
//!   the terminal LIF over the cached drive. The convolution cost becomes
//!   independent of the timestep count and consecutive token sets differ
//!   only through the terminal neuron's state.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::energy::{conv_macs, conv_spike_acs, OpCount};
use crate::error::{Error, Result};
use crate::layers::{BnLayer, BnMode, Initializer};
use crate::neuron::{Lif, LifParams};
use crate::params::Param;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    VanillaSps,
    ISps,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvStageCfg {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub stages: Vec<ConvStageCfg>,
    pub mode: EmbedMode,
}

impl PatchEmbedConfig {
    /// Spatial grid after all stages.
    pub fn grid(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        for s in &self.stages {
            if s.stride == 0 || s.kernel == 0 {
                return Err(Error::Config("conv stage with zero kernel/stride".into()));
            }
            if h + 2 * s.pad < s.kernel || w + 2 * s.pad < s.kernel {
                return Err(Error::Config(format!(
                    "stage kernel {} larger than padded input {}x{}",
                    s.kernel, h, w
                )));
            }
            h = (h + 2 * s.pad - s.kernel) / s.stride + 1;
            w = (w + 2 * s.pad - s.kernel) / s.stride + 1;
            if s.pool {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!("pooling odd grid {}x{}", h, w)));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok((h, w))
    }

    pub fn tokens(&self) -> Result<usize> {
        let (h, w) = self.grid()?;
        Ok(h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("embed needs at least one conv stage".into()));
        }
        let last = self.stages.last().unwrap();
        if last.out_channels != self.embed_dim {
            return Err(Error::Config(format!(
                "final conv channels {} must equal embed dim {}",
                last.out_channels, self.embed_dim
            )));
        }
        let k = self.tokens()?;
        if k == 0 {
            return Err(Error::Config("embed produces zero tokens".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvStage<F: Real> {
    cfg: ConvStageCfg,
    weight: Param<F>, // [co, ci, k, k]
    bias: Param<F>,   // [co]
    bn: BnLayer<F>,
    lif: Lif<F>,
    name: String,
}

/// Result of the tokenizer's once-per-input preparation.
pub enum EmbedState<F: Real> {
    /// I-SPS: cached real-valued drive for the terminal LIF.
    Drive(Tensor<F>),
    /// Vanilla: the raw image replayed through the stack each timestep.
    Image(Tensor<F>),
}

#[derive(Debug)]
pub struct PatchEmbed<F: Real> {
    cfg: PatchEmbedConfig,
    stages: Vec<ConvStage<F>>,
    conv_stack_passes: AtomicU64,
}

impl<F: Real> Clone for PatchEmbed<F> {
    fn clone(&self) -> Self {
        PatchEmbed {
            cfg: self.cfg.clone(),
            stages: self.stages.clone(),
            conv_stack_passes: AtomicU64::new(self.conv_stack_passes.load(Ordering::Relaxed)),
        }
    }
}

impl<F: Real> PatchEmbed<F> {
    pub fn new(cfg: PatchEmbedConfig, init: &mut Initializer) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut ci = cfg.in_channels;
        for (i, sc) in cfg.stages.iter().enumerate() {
            let name = format!("embed.stage{i}");
            let wn = sc.out_channels * ci * sc.kernel * sc.kernel;
            let fan_in = ci * sc.kernel * sc.kernel;
            stages.push(ConvStage {
                cfg: sc.clone(),
                weight: Param::new(
                    format!("{name}.conv.weight"),
                    Tensor::from_vec(
                        init.he_normal(wn, fan_in),
                        &[sc.out_channels, ci, sc.kernel, sc.kernel],
                    )?,
                ),
                bias: Param::new(format!("{name}.conv.bias"), Tensor::zeros(&[sc.out_channels])),
                bn: BnLayer::new(&format!("{name}.bn"), sc.out_channels),
                lif: Lif::new(),
                name,
            });
            ci = sc.out_channels;
        }
        Ok(PatchEmbed {
            cfg,
            stages,
            conv_stack_passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &PatchEmbedConfig {
        &self.cfg
    }

    /// Full conv-stack passes executed since construction (instrumentation).
    pub fn conv_stack_passes(&self) -> u64 {
        self.conv_stack_passes.load(Ordering::Relaxed)
    }

    pub fn reset(&mut self) {
        for s in &mut self.stages {
            s.lif.reset();
        }
    }

    /// Convolution (+ batchnorm) of one stage, with op counting. The first
    /// stage sees the real-valued image and counts MACs; later stages see
    /// spikes and count ACs.
    fn stage_conv(
        tape: &Tape<F>,
        stage: &mut ConvStage<F>,
        x: &Tensor<F>,
        first: bool,
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        let sc = &stage.cfg;
        let w = stage.weight.bind(tape);
        let b = stage.bias.bind(tape);
        let y = tape.conv2d(x, &w, Some(&b), sc.stride, sc.pad)?;
        let (oh, ow) = (y.shape()[2], y.shape()[3]);
        let layer = format!("{}.conv", stage.name);
        let nnz = x.count_nonzero();
        if first {
            counts.add_macs(
                &layer,
                conv_macs(x.shape()[0], x.shape()[1], sc.out_channels, sc.kernel, oh, ow),
                nnz,
                x.numel() as u64,
            );
        } else {
            counts.add_acs(
                &layer,
                conv_spike_acs(x, sc.out_channels, sc.kernel, sc.stride, sc.pad, oh, ow),
                nnz,
                x.numel() as u64,
            );
        }
        stage.bn.forward_2d(tape, &y, bn_mode)
    }

    /// Per-input preparation. I-SPS runs the whole convolutional stack once
    /// here; vanilla SPS defers everything to `step`.
    pub fn begin(
        &mut self,
        tape: &Tape<F>,
        image: &Tensor<F>,
        lif: &LifParams,
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<EmbedState<F>> {
        if image.shape() != [1, self.cfg.in_channels, self.cfg.height, self.cfg.width] {
            return Err(Error::dim(
                "embed",
                format!(
                    "image {:?}, expected [1,{},{},{}]",
                    image.shape(),
                    self.cfg.in_channels,
                    self.cfg.height,
                    self.cfg.width
                ),
            ));
        }
        match self.cfg.mode {
            EmbedMode::VanillaSps => Ok(EmbedState::Image(image.clone())),
            EmbedMode::ISps => {
                self.conv_stack_passes.fetch_add(1, Ordering::Relaxed);
                let last = self.stages.len() - 1;
                let mut x = image.clone();
                for i in 0..last {
                    x = {
                        let stage = &mut self.stages[i];
                        let y = Self::stage_conv(tape, stage, &x, i == 0, bn_mode, counts)?;
                        let s = stage.lif.step(tape, &y, lif)?;
                        if stage.cfg.pool {
                            tape.maxpool2(&s)?
                        } else {
                            s
                        }
                    };
                }
                let drive = {
                    let stage = &mut self.stages[last];
                    Self::stage_conv(tape, stage, &x, last == 0, bn_mode, counts)?
                };
                Ok(EmbedState::Drive(drive))
            }
        }
    }

    /// One timestep of spike tokens, shape [K, D].
    pub fn step(
        &mut self,
        tape: &Tape<F>,
        state: &EmbedState<F>,
        lif: &LifParams,
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        let last = self.stages.len() - 1;
        let spikes = match state {
            EmbedState::Drive(drive) => {
                let stage = &mut self.stages[last];
                let s = stage.lif.step(tape, drive, lif)?;
                if stage.cfg.pool {
                    tape.maxpool2(&s)?
                } else {
                    s
                }
            }
            EmbedState::Image(image) => {
                self.conv_stack_passes.fetch_add(1, Ordering::Relaxed);
                let mut x = image.clone();
                for i in 0..=last {
                    x = {
                        let stage = &mut self.stages[i];
                        let y = Self::stage_conv(tape, stage, &x, i == 0, bn_mode, counts)?;
                        let s = stage.lif.step(tape, &y, lif)?;
                        if stage.cfg.pool {
                            tape.maxpool2(&s)?
                        } else {
                            s
                        }
                    };
                }
                x
            }
        };
        tape.grid_to_tokens(&spikes)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for s in &mut self.stages {
            f(&mut s.weight);
            f(&mut s.bias);
            s.bn.visit_params(f);
        }
    }

    pub fn visit_bn(&mut self, f: &mut dyn FnMut(&str, &mut BnLayer<F>)) {
        for s in &mut self.stages {
            let name = format!("{}.bn", s.name);
            f(&name, &mut s.bn);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: EmbedMode) -> PatchEmbedConfig {
        PatchEmbedConfig {
            in_channels: 3,
            height: 16,
            width: 16,
            embed_dim: 8,
            stages: vec![
                ConvStageCfg { out_channels: 4, kernel: 3, stride: 1, pad: 1, pool: true },
                ConvStageCfg { out_channels: 8, kernel: 3, stride: 1, pad: 1, pool: true },
            ],
            mode,
        }
    }

    fn image(seed: u64) -> Tensor<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(data, &[1, 3, 16, 16]).unwrap()
    }

    fn run(mode: EmbedMode, t_len: usize, seed: u64) -> (PatchEmbed<f32>, Vec<Vec<f64>>) {
        let mut init = Initializer::new(seed);
        let mut embed = PatchEmbed::<f32>::new(cfg(mode), &mut init).unwrap();
        let tape = Tape::no_grad();
        let lif = LifParams::default();
        let mut counts = OpCount::new();
        let state = embed.begin(&tape, &image(3), &lif, BnMode::Batch, &mut counts).unwrap();
        let toks: Vec<Vec<f64>> = (0..t_len)
            .map(|_| {
                embed
                    .step(&tape, &state, &lif, BnMode::Batch, &mut counts)
                    .unwrap()
                    .to_f64_vec()
            })
            .collect();
        (embed, toks)
    }

    #[test]
    fn isps_runs_conv_stack_once_regardless_of_timesteps() {
        let (embed, toks) = run(EmbedMode::ISps, 4, 1);
        assert_eq!(embed.conv_stack_passes(), 1);
        assert_eq!(toks.len(), 4);
    }

    #[test]
    fn vanilla_runs_conv_stack_every_timestep() {
        let (embed, _) = run(EmbedMode::VanillaSps, 4, 1);
        assert_eq!(embed.conv_stack_passes(), 4);
    }

    #[test]
    fn both_modes_emit_binary_tokens_of_declared_shape() {
        for mode in [EmbedMode::ISps, EmbedMode::VanillaSps] {
            let (_, toks) = run(mode, 3, 5);
            let k = cfg(mode).tokens().unwrap();
            for t in &toks {
                assert_eq!(t.len(), k * 8);
                assert!(t.iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    #[test]
    fn single_timestep_outputs_coincide_across_modes() {
        let (_, a) = run(EmbedMode::ISps, 1, 7);
        let (_, b) = run(EmbedMode::VanillaSps, 1, 7);
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn zero_image_emits_no_spikes_with_zero_biases() {
        let mut init = Initializer::new(2);
        let mut embed = PatchEmbed::<f32>::new(cfg(EmbedMode::ISps), &mut init).unwrap();
        let tape = Tape::no_grad();
        let lif = LifParams::default();
        let mut counts = OpCount::new();
        let zero = Tensor::zeros(&[1, 3, 16, 16]);
        let state = embed.begin(&tape, &zero, &lif, BnMode::Batch, &mut counts).unwrap();
        let toks = embed.step(&tape, &state, &lif, BnMode::Batch, &mut counts).unwrap();
        assert!(toks.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isps_conv_macs_are_one_timestep_of_vanilla() {
        let mut init = Initializer::new(1);
        let lif = LifParams::default();
        let t_len = 4;

        let mut isps = PatchEmbed::<f32>::new(cfg(EmbedMode::ISps), &mut init).unwrap();
        let tape = Tape::no_grad();
        let mut c_isps = OpCount::new();
        let st = isps.begin(&tape, &image(3), &lif, BnMode::Batch, &mut c_isps).unwrap();
        for _ in 0..t_len {
            isps.step(&tape, &st, &lif, BnMode::Batch, &mut c_isps).unwrap();
        }

        let mut init2 = Initializer::new(1);
        let mut van = PatchEmbed::<f32>::new(cfg(EmbedMode::VanillaSps), &mut init2).unwrap();
        let mut c_van = OpCount::new();
        let st = van.begin(&tape, &image(3), &lif, BnMode::Batch, &mut c_van).unwrap();
        for _ in 0..t_len {
            van.step(&tape, &st, &lif, BnMode::Batch, &mut c_van).unwrap();
        }

        assert_eq!(c_van.total_macs(), t_len as u64 * c_isps.total_macs());
    }

    #[test]
    fn isps_consecutive_timesteps_are_more_similar_than_vanilla() {
        let mean_consec_cos = |toks: &[Vec<f64>]| {
            let mut acc = 0.0;
            let mut n = 0;
            for w in toks.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    acc += dot / (na * nb);
                    n += 1;
                }
            }
            acc / n as f64
        };
        let (_, ti) = run(EmbedMode::ISps, 4, 11);
        let (_, tv) = run(EmbedMode::VanillaSps, 4, 11);
        assert!(
            mean_consec_cos(&ti) >= mean_consec_cos(&tv),
            "I-SPS similarity {} < vanilla {}",
            mean_consec_cos(&ti),
            mean_consec_cos(&tv)
        );
    }

    #[test]
    fn config_validation_catches_mismatched_final_channels() {
        let mut c = cfg(EmbedMode::ISps);
        c.embed_dim = 16;
        assert!(c.validate().is_err());
    }
}
