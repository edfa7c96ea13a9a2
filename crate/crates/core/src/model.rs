//! Full model assembly: tokenizer, encoder blocks with interleaved halting
//! updates, and the two classifier paths.
//!
//! The classifier input is either the halting-probability weighted state
//! average (the path the training loss optimizes) or the plain average of
//! final-block outputs across timesteps; both share one fully-connected
//! head.

use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, EncoderBlock, ResidualStyle};
use crate::embed::{ConvStageCfg, EmbedMode, EmbedState, PatchEmbed, PatchEmbedConfig};
use crate::energy::OpCount;
use crate::error::{Error, Result};
use crate::halting::{AccumulationMode, HaltScan, HaltTrace};
use crate::layers::{BnLayer, BnMode, Initializer, LinearLayer};
use crate::loss::{assemble_probability_tensors, mean_field_logits, ProbabilityTensors};
use crate::neuron::LifParams;
use crate::params::Param;
use crate::tensor::{Real, Tape, Tensor};

/// Normalizer of the mean-field classifier input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFieldNorm {
    /// 1 / (T * K)
    TimestepsTokens,
    /// 1 / K
    TokensOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub timesteps: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub embed_mode: EmbedMode,
    pub conv_stages: Vec<ConvStageCfg>,
    /// Halting-score scale and shift: h = sigmoid(alpha * x + beta).
    pub alpha: f64,
    pub beta: f64,
    pub eps_train: f64,
    pub eps_infer: f64,
    pub delta_p: f64,
    pub lif: LifParams,
    pub attn_scale: f64,
    pub residual: ResidualStyle,
    pub mean_field_norm: MeanFieldNorm,
    /// Alternate ponder reading: pre-halt timesteps contribute their full
    /// block count instead of zero.
    pub ponder_counts_prehalt: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: a 4-block, 4-timestep spiking transformer over
    /// 32x32 inputs with 64 tokens of width 128.
    pub fn desk_default() -> Self {
        ModelConfig {
            timesteps: 4,
            blocks: 4,
            embed_dim: 128,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 3,
            in_channels: 3,
            image_size: 32,
            embed_mode: EmbedMode::ISps,
            conv_stages: vec![
                ConvStageCfg { out_channels: 64, kernel: 3, stride: 1, pad: 1, pool: true },
                ConvStageCfg { out_channels: 128, kernel: 3, stride: 1, pad: 1, pool: true },
            ],
            alpha: -5.0,
            beta: 0.0,
            eps_train: 0.01,
            eps_infer: 0.01,
            delta_p: 1e-3,
            lif: LifParams::default(),
            attn_scale: 0.125,
            residual: ResidualStyle::PostAddition,
            mean_field_norm: MeanFieldNorm::TimestepsTokens,
            ponder_counts_prehalt: false,
            seed: 42,
        }
    }

    /// Tiny shape for gradient checks: T=2, L=2, K=16, D=32.
    pub fn tiny() -> Self {
        ModelConfig {
            timesteps: 2,
            blocks: 2,
            embed_dim: 32,
            heads: 4,
            mlp_ratio: 2,
            conv_stages: vec![
                ConvStageCfg { out_channels: 8, kernel: 3, stride: 1, pad: 1, pool: true },
                ConvStageCfg { out_channels: 16, kernel: 3, stride: 1, pad: 1, pool: true },
                ConvStageCfg { out_channels: 32, kernel: 3, stride: 1, pad: 1, pool: true },
            ],
            ..Self::desk_default()
        }
    }

    /// Small trainable shape: T=4, L=2, K=16, D=32.
    pub fn small_train() -> Self {
        ModelConfig {
            timesteps: 4,
            blocks: 2,
            embed_dim: 32,
            heads: 4,
            mlp_ratio: 2,
            conv_stages: vec![
                ConvStageCfg { out_channels: 16, kernel: 3, stride: 1, pad: 1, pool: true },
                ConvStageCfg { out_channels: 24, kernel: 3, stride: 1, pad: 1, pool: true },
                ConvStageCfg { out_channels: 32, kernel: 3, stride: 1, pad: 1, pool: true },
            ],
            ..Self::desk_default()
        }
    }

    pub fn embed_config(&self) -> PatchEmbedConfig {
        PatchEmbedConfig {
            in_channels: self.in_channels,
            height: self.image_size,
            width: self.image_size,
            embed_dim: self.embed_dim,
            stages: self.conv_stages.clone(),
            mode: self.embed_mode,
        }
    }

    pub fn tokens(&self) -> Result<usize> {
        self.embed_config().tokens()
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            dim: self.embed_dim,
            heads: self.heads,
            mlp_hidden: self.embed_dim * self.mlp_ratio,
            attn_scale: self.attn_scale,
            residual: self.residual,
        }
    }

    pub fn mean_field_normalizer(&self, tokens: usize) -> f64 {
        match self.mean_field_norm {
            MeanFieldNorm::TimestepsTokens => 1.0 / (self.timesteps * tokens) as f64,
            MeanFieldNorm::TokensOnly => 1.0 / tokens as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        if self.blocks < 2 {
            return Err(Error::Config(
                "halting needs at least two blocks (a score must have a subsequent block to mask)".into(),
            ));
        }
        if self.eps_train < 0.0 || self.eps_infer < 0.0 {
            return Err(Error::Config("halting eps must be >= 0".into()));
        }
        if self.delta_p < 0.0 {
            return Err(Error::Config("delta_p must be >= 0".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        self.block_config().validate()?;
        self.embed_config().validate()?;
        self.lif.validate()?;
        Ok(())
    }
}

/// One token row perturbed before entering block `l` at timestep `t`
/// (1-based), for masking-contract checks. Forward must be grad-free.
#[derive(Debug, Clone)]
pub struct Injection {
    pub t: usize,
    pub l: usize,
    pub token: usize,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOpts {
    pub grad: bool,
    pub halting: bool,
    /// Override of the model's inference threshold.
    pub eps: Option<f64>,
    pub accumulation: AccumulationMode,
    pub bn_mode: BnMode,
    pub injection: Option<Injection>,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts {
            grad: false,
            halting: true,
            eps: None,
            accumulation: AccumulationMode::TwoDimensional,
            bn_mode: BnMode::Batch,
            injection: None,
        }
    }
}

/// Everything produced by one forward pass. Loss assembly reuses the tape,
/// the per-position block outputs and the probability tensors.
pub struct ForwardPass<F: Real> {
    pub tape: Tape<F>,
    pub trace: HaltTrace,
    pub counts: OpCount,
    pub logits_mean_field: Tensor<F>,
    pub logits_averaged: Tensor<F>,
    pub avg_tokens: f64,
    pub block_outputs: Vec<Tensor<F>>,
    /// Token sets emitted by the tokenizer, one per timestep.
    pub embed_tokens: Vec<Tensor<F>>,
    pub h_tensors: Vec<Tensor<F>>,
    pub probabilities: ProbabilityTensors<F>,
}

impl<F: Real> ForwardPass<F> {
    pub fn logits_vec(&self, head: HeadKind) -> Vec<f64> {
        match head {
            HeadKind::MeanField => self.logits_mean_field.to_f64_vec(),
            HeadKind::Averaged => self.logits_averaged.to_f64_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    MeanField,
    Averaged,
}

#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    cfg: ModelConfig,
    tokens: usize,
    embed: PatchEmbed<F>,
    blocks: Vec<EncoderBlock<F>>,
    head: LinearLayer<F>,
    eps_infer: f64,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new(cfg.seed);
        let embed = PatchEmbed::new(cfg.embed_config(), &mut init)?;
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(i, cfg.block_config(), &mut init))
            .collect::<Result<Vec<_>>>()?;
        let head = LinearLayer::new("head", cfg.embed_dim, cfg.num_classes, &mut init);
        let tokens = cfg.tokens()?;
        Ok(Model {
            eps_infer: cfg.eps_infer,
            tokens,
            embed,
            blocks,
            head,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn embed(&self) -> &PatchEmbed<F> {
        &self.embed
    }

    /// Inference-time halting threshold knob; weights untouched.
    pub fn set_epsilon(&mut self, eps: f64) -> Result<()> {
        if eps < 0.0 {
            return Err(Error::Config(format!("negative eps {}", eps)));
        }
        self.eps_infer = eps;
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        self.eps_infer
    }

    pub fn reset_states(&mut self) {
        self.embed.reset();
        for b in &mut self.blocks {
            b.reset();
        }
    }

    /// Argmax with lowest-index tie break.
    pub fn predict(logits: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn forward(&mut self, image: &[f32], opts: &ForwardOpts) -> Result<ForwardPass<F>> {
        let c = self.cfg.in_channels;
        let hw = self.cfg.image_size;
        if image.len() != c * hw * hw {
            return Err(Error::dim(
                "forward",
                format!("image length {} vs {}x{}x{}", image.len(), c, hw, hw),
            ));
        }
        if opts.injection.is_some() && opts.grad {
            return Err(Error::Config("injection requires a grad-free forward".into()));
        }
        self.reset_states();
        let tape = if opts.grad { Tape::new() } else { Tape::no_grad() };
        let mut counts = OpCount::new();
        let img_data: Vec<F> = image.iter().map(|&v| F::of_f64(v as f64)).collect();
        let img = Tensor::from_vec(img_data, &[1, c, hw, hw])?;
        let eps = opts.eps.unwrap_or(self.eps_infer);
        let (t_len, l_len, k_len) = (self.cfg.timesteps, self.cfg.blocks, self.tokens);
        let mut scan = HaltScan::new(t_len, l_len, k_len, eps, opts.accumulation, opts.halting)?;
        let embed_state: EmbedState<F> =
            self.embed.begin(&tape, &img, &self.cfg.lif, opts.bn_mode, &mut counts)?;

        let mut block_outputs = Vec::with_capacity(t_len * l_len);
        let mut embed_tokens = Vec::with_capacity(t_len);
        let mut h_tensors = Vec::with_capacity(t_len * l_len);
        let mut final_per_t = Vec::with_capacity(t_len);
        for t in 1..=t_len {
            let mut x = self
                .embed
                .step(&tape, &embed_state, &self.cfg.lif, opts.bn_mode, &mut counts)?;
            embed_tokens.push(x.clone());
            for l in 1..=l_len {
                if let Some(inj) = &opts.injection {
                    if inj.t == t && inj.l == l {
                        x = inject_row(&x, inj)?;
                    }
                }
                let active = scan.active().to_vec();
                x = self.blocks[l - 1].forward(
                    &tape,
                    &x,
                    &active,
                    &self.cfg.lif,
                    opts.bn_mode,
                    &mut counts,
                )?;
                let logit = tape.affine(&tape.first_feature(&x)?, self.cfg.alpha, self.cfg.beta)?;
                let h = tape.mask_vec(&tape.sigmoid(&logit)?, &active)?;
                scan.step(t, l, &h.to_f64_vec())?;
                h_tensors.push(h);
                block_outputs.push(x.clone());
            }
            final_per_t.push(x);
        }
        let trace = scan.finish()?;
        let avg_tokens = trace.avg_tokens();

        // classifier paths share the head; count its MACs once
        counts.add_macs(
            "head",
            (self.cfg.embed_dim * self.cfg.num_classes) as u64,
            0,
            self.cfg.embed_dim as u64,
        );
        let probabilities = assemble_probability_tensors(&tape, &trace, &h_tensors)?;
        let norm = self.cfg.mean_field_normalizer(k_len);
        let logits_mean_field = mean_field_logits(
            &tape,
            &block_outputs,
            &probabilities.p,
            l_len,
            norm,
            &self.head,
        )?;

        let mut acc = final_per_t[0].clone();
        for f in &final_per_t[1..] {
            acc = tape.add(&acc, f)?;
        }
        let feature = tape
            .scale(
                &tape.sum_over_rows(&acc)?,
                1.0 / (t_len * k_len) as f64,
            )?
            .reshaped(&[1, self.cfg.embed_dim])?;
        let logits_averaged = self.head.forward(&tape, &feature)?;

        Ok(ForwardPass {
            tape,
            trace,
            counts,
            logits_mean_field,
            logits_averaged,
            avg_tokens,
            block_outputs,
            embed_tokens,
            h_tensors,
            probabilities,
        })
    }

    pub fn head(&self) -> &LinearLayer<F> {
        &self.head
    }

    pub fn blocks_mut(&mut self) -> &mut [EncoderBlock<F>] {
        &mut self.blocks
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.embed.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }

    pub fn visit_bn(&mut self, f: &mut dyn FnMut(&str, &mut BnLayer<F>)) {
        self.embed.visit_bn(f);
        for b in &mut self.blocks {
            b.visit_bn(f);
        }
    }

    /// Parameters plus batchnorm running buffers as (name, f32 data, shape).
    pub fn state_tensors(&mut self) -> Vec<(String, Vec<f32>, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            out.push((
                p.name().to_string(),
                p.value().data().iter().map(|v| v.as_f64() as f32).collect(),
                p.shape().to_vec(),
            ));
        });
        self.visit_bn(&mut |name, bn| {
            out.push((
                format!("{name}.running_mean"),
                bn.running_mean.iter().map(|v| v.as_f64() as f32).collect(),
                vec![bn.running_mean.len()],
            ));
            out.push((
                format!("{name}.running_var"),
                bn.running_var.iter().map(|v| v.as_f64() as f32).collect(),
                vec![bn.running_var.len()],
            ));
        });
        out
    }

    pub fn load_state_tensors(
        &mut self,
        tensors: &std::collections::BTreeMap<String, (Vec<f32>, Vec<usize>)>,
    ) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_params(&mut |p| match tensors.get(p.name()) {
            Some((data, shape)) => {
                if shape != p.shape() || data.len() != p.numel() {
                    missing.push(format!("{} shape mismatch", p.name()));
                } else {
                    p.set_data(data.iter().map(|&v| F::of_f64(v as f64)).collect());
                }
            }
            None => missing.push(p.name().to_string()),
        });
        self.visit_bn(&mut |name, bn| {
            for (suffix, buf) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                let key = format!("{name}.{suffix}");
                match tensors.get(&key) {
                    Some((data, _)) if data.len() == buf.len() => {
                        *buf = data.iter().map(|&v| F::of_f64(v as f64)).collect();
                    }
                    _ => missing.push(key),
                }
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "missing or mismatched tensors: {}",
                missing.join(", ")
            )))
        }
    }
}

fn inject_row<F: Real>(x: &Tensor<F>, inj: &Injection) -> Result<Tensor<F>> {
    let (k, d) = (x.shape()[0], x.shape()[1]);
    if inj.token >= k || inj.noise.len() != d {
        return Err(Error::dim(
            "injection",
            format!("token {} noise {} vs [{}x{}]", inj.token, inj.noise.len(), k, d),
        ));
    }
    let mut data = x.data().to_vec();
    for (j, &nv) in inj.noise.iter().enumerate() {
        data[inj.token * d + j] += F::of_f64(nv);
    }
    Tensor::from_vec(data, x.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, cfg: &ModelConfig) -> Vec<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.in_channels * cfg.image_size * cfg.image_size)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect()
    }

    #[test]
    fn predict_argmax_with_tie_break() {
        assert_eq!(Model::<f32>::predict(&[0.1, 2.0, 0.3]), 1);
        assert_eq!(Model::<f32>::predict(&[1.0, 1.0, 0.0]), 0);
        let shifted: Vec<f64> = [0.1, 2.0, 0.3].iter().map(|v| v + 10.0).collect();
        assert_eq!(Model::<f32>::predict(&shifted), 1);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = ModelConfig::tiny();
        let img = image(1, &cfg);
        let mut m1 = Model::<f32>::new(cfg.clone()).unwrap();
        let mut m2 = Model::<f32>::new(cfg).unwrap();
        let o1 = m1.forward(&img, &ForwardOpts::default()).unwrap();
        let o2 = m2.forward(&img, &ForwardOpts::default()).unwrap();
        assert_eq!(o1.logits_vec(HeadKind::MeanField), o2.logits_vec(HeadKind::MeanField));
        assert_eq!(o1.logits_vec(HeadKind::Averaged), o2.logits_vec(HeadKind::Averaged));
        assert_eq!(o1.avg_tokens, o2.avg_tokens);
        // and rerunning the same instance reproduces it
        let o3 = m1.forward(&img, &ForwardOpts::default()).unwrap();
        assert_eq!(o1.logits_vec(HeadKind::MeanField), o3.logits_vec(HeadKind::MeanField));
    }

    #[test]
    fn unreachable_threshold_equals_halting_disabled() {
        let mut cfg = ModelConfig::tiny();
        cfg.alpha = 0.0;
        cfg.beta = -40.0; // h identically ~0
        let img = image(2, &cfg);
        let mut m = Model::<f32>::new(cfg).unwrap();
        let with = m.forward(&img, &ForwardOpts::default()).unwrap();
        let without = m
            .forward(&img, &ForwardOpts { halting: false, ..Default::default() })
            .unwrap();
        assert_eq!(with.avg_tokens, 1.0);
        assert_eq!(without.avg_tokens, 1.0);
        assert_eq!(
            with.logits_vec(HeadKind::Averaged),
            without.logits_vec(HeadKind::Averaged)
        );
        assert_eq!(
            with.logits_vec(HeadKind::MeanField),
            without.logits_vec(HeadKind::MeanField)
        );
    }

    #[test]
    fn eps_one_halts_everything_after_first_block() {
        let cfg = ModelConfig::tiny();
        let img = image(3, &cfg);
        let mut m = Model::<f32>::new(cfg.clone()).unwrap();
        let out = m
            .forward(&img, &ForwardOpts { eps: Some(1.0), ..Default::default() })
            .unwrap();
        let expected = 1.0 / (cfg.blocks * cfg.timesteps) as f64;
        assert!((out.avg_tokens - expected).abs() < 1e-12);
    }

    #[test]
    fn avg_tokens_matches_trace_identity() {
        let cfg = ModelConfig::tiny();
        let img = image(4, &cfg);
        let mut m = Model::<f32>::new(cfg.clone()).unwrap();
        let out = m.forward(&img, &ForwardOpts::default()).unwrap();
        let masked: usize = out
            .trace
            .active
            .iter()
            .filter(|&&a| !a)
            .count();
        let total = cfg.tokens().unwrap() * cfg.blocks * cfg.timesteps;
        assert_eq!(out.avg_tokens, 1.0 - masked as f64 / total as f64);
    }

    #[test]
    fn probability_mass_sums_to_one_per_token() {
        let cfg = ModelConfig::tiny();
        let img = image(5, &cfg);
        let mut m = Model::<f32>::new(cfg.clone()).unwrap();
        let out = m.forward(&img, &ForwardOpts::default()).unwrap();
        let k = cfg.tokens().unwrap();
        for token in 0..k {
            let mass: f64 = (1..=cfg.timesteps).map(|t| out.trace.p_sum(t, token)).sum::<f64>();
            // in 2-D mode p_sum(t, k) repeats the same single group sum
            let mass = mass / cfg.timesteps as f64;
            assert!((mass - 1.0).abs() < 1e-5, "token {token}: {mass}");
        }
    }

    #[test]
    fn masked_token_perturbation_does_not_change_logits() {
        let cfg = ModelConfig::tiny();
        let img = image(6, &cfg);
        let mut m = Model::<f32>::new(cfg.clone()).unwrap();
        // generous eps so something halts early
        let opts = ForwardOpts { eps: Some(0.6), ..Default::default() };
        let base = m.forward(&img, &opts).unwrap();
        let Some(ev) = base.trace.mask_events.first().cloned() else {
            panic!("no token halted; raise eps");
        };
        let noise: Vec<f64> = (0..cfg.embed_dim).map(|j| (j as f64 * 0.37).sin() * 3.0).collect();
        let injected = m
            .forward(
                &img,
                &ForwardOpts {
                    injection: Some(Injection { t: ev.t, l: ev.l, token: ev.token, noise }),
                    ..opts.clone()
                },
            )
            .unwrap();
        assert_eq!(
            base.logits_vec(HeadKind::MeanField),
            injected.logits_vec(HeadKind::MeanField)
        );
        assert_eq!(
            base.logits_vec(HeadKind::Averaged),
            injected.logits_vec(HeadKind::Averaged)
        );
    }

    #[test]
    fn set_epsilon_validates_and_applies() {
        let cfg = ModelConfig::tiny();
        let mut m = Model::<f32>::new(cfg).unwrap();
        assert!(m.set_epsilon(-0.1).is_err());
        m.set_epsilon(0.25).unwrap();
        assert_eq!(m.epsilon(), 0.25);
    }

    #[test]
    fn config_validation_rejects_single_block() {
        let mut cfg = ModelConfig::tiny();
        cfg.blocks = 1;
        assert!(Model::<f32>::new(cfg).is_err());
    }
}
