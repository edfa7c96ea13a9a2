//! Spiking-transformer encoder block: spike self-attention plus MLP, both
//! with residual connections, operating on (possibly masked) spike tokens.
//!
//! Two residual placements are supported. `PostAddition` adds each
//! sublayer's spike output onto the stream (`y = x + LIF(BN(Wx))`), so the
//! stream holds small integers. `PreActivation` joins the stream before the
//! sublayer's final neuron (`y = LIF(x + BN(Wx))`), keeping every block
//! output strictly binary.
//!
//! Masked token rows are zeroed at block entry, excluded from every
//! batchnorm's statistics, re-zeroed by the batchnorm output, and zeroed
//! again at block exit, so a halted token can neither receive nor emit
//! information.

use serde::{Deserialize, Serialize};

use crate::energy::OpCount;
use crate::error::{Error, Result};
use crate::layers::{BnLayer, BnMode, Initializer, LinearLayer};
use crate::neuron::{Lif, LifParams};
use crate::params::Param;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualStyle {
    /// Residual joins the membrane before the sublayer's output neuron.
    PreActivation,
    /// Residual adds the sublayer's spike output onto the stream.
    PostAddition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub attn_scale: f64,
    pub residual: ResidualStyle,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("zero mlp hidden width".into()));
        }
        Ok(())
    }
}

/// Linear -> batchnorm (-> LIF) projection unit.
#[derive(Debug, Clone)]
struct ProjUnit<F: Real> {
    linear: LinearLayer<F>,
    bn: BnLayer<F>,
    lif: Lif<F>,
    name: String,
}

impl<F: Real> ProjUnit<F> {
    fn new(name: String, fan_in: usize, fan_out: usize, init: &mut Initializer) -> Self {
        ProjUnit {
            linear: LinearLayer::new(&name, fan_in, fan_out, init),
            bn: BnLayer::new(&format!("{name}.bn"), fan_out),
            lif: Lif::new(),
            name,
        }
    }

    /// Linear + masked batchnorm, with spike-driven op counting.
    fn project(
        &mut self,
        tape: &Tape<F>,
        x: &Tensor<F>,
        active: &[bool],
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        counts.spiking_linear(
            &self.name,
            x.count_nonzero(),
            x.numel() as u64,
            self.linear.fan_out(),
        );
        let y = self.linear.forward(tape, x)?;
        self.bn.forward_rows(tape, &y, Some(active), bn_mode)
    }

    fn fire(&mut self, tape: &Tape<F>, drive: &Tensor<F>, lif: &LifParams) -> Result<Tensor<F>> {
        self.lif.step(tape, drive, lif)
    }

    fn forward(
        &mut self,
        tape: &Tape<F>,
        x: &Tensor<F>,
        active: &[bool],
        lif: &LifParams,
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        let y = self.project(tape, x, active, bn_mode, counts)?;
        self.fire(tape, &y, lif)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock<F: Real> {
    cfg: BlockConfig,
    name: String,
    q: ProjUnit<F>,
    k: ProjUnit<F>,
    v: ProjUnit<F>,
    attn_lif: Lif<F>,
    proj: ProjUnit<F>,
    mlp1: ProjUnit<F>,
    mlp2: ProjUnit<F>,
}

impl<F: Real> EncoderBlock<F> {
    pub fn new(index: usize, cfg: BlockConfig, init: &mut Initializer) -> Result<Self> {
        cfg.validate()?;
        let name = format!("block{index}");
        let d = cfg.dim;
        Ok(EncoderBlock {
            q: ProjUnit::new(format!("{name}.q"), d, d, init),
            k: ProjUnit::new(format!("{name}.k"), d, d, init),
            v: ProjUnit::new(format!("{name}.v"), d, d, init),
            attn_lif: Lif::new(),
            proj: ProjUnit::new(format!("{name}.proj"), d, d, init),
            mlp1: ProjUnit::new(format!("{name}.mlp1"), d, cfg.mlp_hidden, init),
            mlp2: ProjUnit::new(format!("{name}.mlp2"), cfg.mlp_hidden, d, init),
            cfg,
            name,
        })
    }

    pub fn reset(&mut self) {
        self.q.lif.reset();
        self.k.lif.reset();
        self.v.lif.reset();
        self.attn_lif.reset();
        self.proj.lif.reset();
        self.mlp1.lif.reset();
        self.mlp2.lif.reset();
    }

    /// Join a sublayer's pre-activation output with the residual stream.
    ///
    /// Pre-activation feeds the residual into the membrane at full strength
    /// (the charge path divides its drive by tau, so a bare binary stream
    /// could never reach threshold); the neuron then emits the joined spike.
    fn junction(
        &self,
        tape: &Tape<F>,
        stream: &Tensor<F>,
        pre: &Tensor<F>,
        unit_lif: &mut Lif<F>,
        lif: &LifParams,
    ) -> Result<Tensor<F>> {
        match self.cfg.residual {
            ResidualStyle::PreActivation => {
                let drive = tape.add(&tape.scale(stream, lif.tau)?, pre)?;
                unit_lif.step(tape, &drive, lif)
            }
            ResidualStyle::PostAddition => tape.add(stream, &unit_lif.step(tape, pre, lif)?),
        }
    }

    /// Softmax-free spike attention product per head: (Q K^T) V, scaled.
    fn attention_core(
        &self,
        tape: &Tape<F>,
        q: &Tensor<F>,
        k: &Tensor<F>,
        v: &Tensor<F>,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        let heads = self.cfg.heads;
        let dh = self.cfg.dim / heads;
        let tokens = q.shape()[0];
        let mut parts = Vec::with_capacity(heads);
        let mut qk_acs = 0u64;
        let mut av_acs = 0u64;
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.col_slice(q, lo, hi)?;
            let kh = tape.col_slice(k, lo, hi)?;
            let vh = tape.col_slice(v, lo, hi)?;
            qk_acs += qh.count_nonzero() * tokens as u64;
            av_acs += vh.count_nonzero() * tokens as u64;
            let scores = tape.matmul_nt(&qh, &kh)?;
            parts.push(tape.matmul(&scores, &vh)?);
        }
        counts.add_acs(&format!("{}.attn.qk", self.name), qk_acs, q.count_nonzero(), q.numel() as u64);
        counts.add_acs(&format!("{}.attn.av", self.name), av_acs, v.count_nonzero(), v.numel() as u64);
        tape.scale(&tape.col_concat(&parts)?, self.cfg.attn_scale)
    }

    fn ssa_inner(
        &mut self,
        tape: &Tape<F>,
        x: &Tensor<F>,
        active: &[bool],
        lif: &LifParams,
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        let q = self.q.forward(tape, x, active, lif, bn_mode, counts)?;
        let k = self.k.forward(tape, x, active, lif, bn_mode, counts)?;
        let v = self.v.forward(tape, x, active, lif, bn_mode, counts)?;
        let ctx = self.attention_core(tape, &q, &k, &v, counts)?;
        let sn = self.attn_lif.step(tape, &ctx, lif)?;
        let pre = self.proj.project(tape, &sn, active, bn_mode, counts)?;
        let mut lif_out = std::mem::replace(&mut self.proj.lif, Lif::new());
        let out = self.junction(tape, x, &pre, &mut lif_out, lif);
        self.proj.lif = lif_out;
        out
    }

    fn mlp_inner(
        &mut self,
        tape: &Tape<F>,
        y: &Tensor<F>,
        active: &[bool],
        lif: &LifParams,
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        let h1 = self.mlp1.forward(tape, y, active, lif, bn_mode, counts)?;
        let pre = self.mlp2.project(tape, &h1, active, bn_mode, counts)?;
        let mut lif_out = std::mem::replace(&mut self.mlp2.lif, Lif::new());
        let out = self.junction(tape, y, &pre, &mut lif_out, lif);
        self.mlp2.lif = lif_out;
        out
    }

    fn check_mask(&self, tokens: &Tensor<F>, active: &[bool]) -> Result<()> {
        if tokens.shape().len() != 2 || tokens.shape()[1] != self.cfg.dim {
            return Err(Error::dim(
                "block",
                format!("tokens {:?} vs dim {}", tokens.shape(), self.cfg.dim),
            ));
        }
        if active.len() != tokens.shape()[0] {
            return Err(Error::dim(
                "block",
                format!("mask length {} vs {} tokens", active.len(), tokens.shape()[0]),
            ));
        }
        Ok(())
    }

    /// Spike self-attention sublayer with residual; masked rows stay zero.
    pub fn ssa_forward(
        &mut self,
        tape: &Tape<F>,
        tokens: &Tensor<F>,
        active: &[bool],
        lif: &LifParams,
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        self.check_mask(tokens, active)?;
        let x = tape.mask_rows(tokens, active)?;
        let y = self.ssa_inner(tape, &x, active, lif, bn_mode, counts)?;
        tape.mask_rows(&y, active)
    }

    /// MLP sublayer with residual; masked rows stay zero. The first output
    /// feature of each token carries the halting logit.
    pub fn mlp_forward(
        &mut self,
        tape: &Tape<F>,
        tokens: &Tensor<F>,
        active: &[bool],
        lif: &LifParams,
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        self.check_mask(tokens, active)?;
        let y = tape.mask_rows(tokens, active)?;
        let out = self.mlp_inner(tape, &y, active, lif, bn_mode, counts)?;
        tape.mask_rows(&out, active)
    }

    /// Whole block: entry masking, SSA with residual, MLP with residual,
    /// exit masking.
    pub fn forward(
        &mut self,
        tape: &Tape<F>,
        tokens: &Tensor<F>,
        active: &[bool],
        lif: &LifParams,
        bn_mode: BnMode,
        counts: &mut OpCount,
    ) -> Result<Tensor<F>> {
        self.check_mask(tokens, active)?;
        let x = tape.mask_rows(tokens, active)?;
        let y = self.ssa_inner(tape, &x, active, lif, bn_mode, counts)?;
        let out = self.mlp_inner(tape, &y, active, lif, bn_mode, counts)?;
        tape.mask_rows(&out, active)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for unit in [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.proj,
            &mut self.mlp1,
            &mut self.mlp2,
        ] {
            unit.linear.visit_params(f);
            unit.bn.visit_params(f);
        }
    }

    pub fn visit_bn(&mut self, f: &mut dyn FnMut(&str, &mut BnLayer<F>)) {
        for unit in [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.proj,
            &mut self.mlp1,
            &mut self.mlp2,
        ] {
            let name = format!("{}.bn", unit.name);
            f(&name, &mut unit.bn);
        }
    }

    /// Weight column of the second MLP linear feeding the halting carrier
    /// (first output feature).
    pub fn halting_carrier_param(&mut self) -> &mut Param<F> {
        &mut self.mlp2.linear.weight
    }
}
