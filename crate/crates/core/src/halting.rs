//! Two-dimensional token halting.
//!
//! Tokens accumulate halting scores in scan order (timesteps outer, blocks
//! inner). After a block's score is added, any token whose running total
//! reaches `1 - eps` is masked starting at the next scanned position; that
//! next position is its halt slot and carries the remainder mass
//! `r = 1 - H_entering`. Tokens that never cross are force-halted at the
//! final position so every token's probability column sums to one.
//!
//! `BlockOnly` accumulation resets both the totals and the masks at every
//! timestep boundary, turning the 2-D policy into an independent per-timestep
//! 1-D policy for ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationMode {
    TwoDimensional,
    BlockOnly,
}

/// Where and how a token halted within one accumulation group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaltSlot {
    /// Block index (1-based) of the halt position.
    pub block: usize,
    /// Raw remainder `1 - H_entering`, may be negative on overshoot.
    pub r_raw: f64,
    /// Remainder clamped to [0, 1]; the value entering the losses.
    pub r: f64,
    /// True when the threshold was crossed, false for a forced final halt.
    pub natural: bool,
}

/// A token masked starting at position (t, l).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskEvent {
    pub token: usize,
    pub t: usize,
    pub l: usize,
}

/// Incremental scan state: running totals, masks, and halt records.
pub struct HaltScan {
    eps: f64,
    t_len: usize,
    l_len: usize,
    k_len: usize,
    mode: AccumulationMode,
    masking: bool,
    h_sum: Vec<f64>,
    active_now: Vec<bool>,
    h_grid: Vec<f64>,
    h_entering: Vec<f64>,
    active_grid: Vec<bool>,
    halt: Vec<Option<HaltSlot>>,
    mask_events: Vec<MaskEvent>,
    cursor: usize,
}

impl HaltScan {
    pub fn new(
        timesteps: usize,
        blocks: usize,
        tokens: usize,
        eps: f64,
        mode: AccumulationMode,
        masking: bool,
    ) -> Result<Self> {
        if eps < 0.0 {
            return Err(Error::Config(format!("negative halting eps {}", eps)));
        }
        if timesteps == 0 || blocks == 0 || tokens == 0 {
            return Err(Error::Config("empty halting scan".to_string()));
        }
        let slots = timesteps * blocks * tokens;
        Ok(HaltScan {
            eps,
            t_len: timesteps,
            l_len: blocks,
            k_len: tokens,
            mode,
            masking,
            h_sum: vec![0.0; tokens],
            active_now: vec![true; tokens],
            h_grid: vec![0.0; slots],
            h_entering: vec![0.0; slots],
            active_grid: vec![false; slots],
            halt: vec![None; timesteps * tokens],
            mask_events: Vec::new(),
            cursor: 0,
        })
    }

    /// Mask entering the position that will be scanned next (true = active).
    pub fn active(&self) -> &[bool] {
        &self.active_now
    }

    fn expected(&self) -> (usize, usize) {
        (self.cursor / self.l_len + 1, self.cursor % self.l_len + 1)
    }

    /// Feed the halting scores of the just-completed block `l` at timestep
    /// `t` (both 1-based). Scores of masked tokens are ignored.
    pub fn step(&mut self, t: usize, l: usize, h: &[f64]) -> Result<()> {
        if (t, l) != self.expected() || self.cursor >= self.t_len * self.l_len {
            return Err(Error::Sequencing {
                expected: self.expected(),
                got: (t, l),
            });
        }
        if h.len() != self.k_len {
            return Err(Error::dim(
                "halting_step",
                format!("{} scores for {} tokens", h.len(), self.k_len),
            ));
        }
        let s = self.cursor;
        let base = s * self.k_len;
        for k in 0..self.k_len {
            let hk = if self.active_now[k] { h[k] } else { 0.0 };
            debug_assert!((-1e-9..=1.0 + 1e-9).contains(&hk), "halting score out of [0,1]");
            self.h_entering[base + k] = self.h_sum[k];
            self.active_grid[base + k] = self.active_now[k];
            self.h_grid[base + k] = hk;
            self.h_sum[k] += hk;
        }
        // mask from the next position onward
        let threshold = 1.0 - self.eps;
        let next = self.next_position(t, l);
        if self.masking {
            if let Some((nt, nl)) = next {
                for k in 0..self.k_len {
                    if self.active_now[k] && self.h_sum[k] >= threshold {
                        self.active_now[k] = false;
                        self.halt[(nt - 1) * self.k_len + k] = Some(make_slot(
                            nl,
                            1.0 - self.h_sum[k],
                            true,
                        ));
                        self.mask_events.push(MaskEvent { token: k, t: nt, l: nl });
                    }
                }
            }
        }
        // group boundary: force-halt the survivors, then reset for BlockOnly
        let end_of_timestep = l == self.l_len;
        let end_of_scan = end_of_timestep && t == self.t_len;
        let group_ends = match self.mode {
            AccumulationMode::TwoDimensional => end_of_scan,
            AccumulationMode::BlockOnly => end_of_timestep,
        };
        if group_ends {
            for k in 0..self.k_len {
                if self.active_now[k] {
                    let entering = self.h_entering[base + k];
                    self.halt[(t - 1) * self.k_len + k] =
                        Some(make_slot(self.l_len, 1.0 - entering, false));
                }
            }
            if !end_of_scan {
                self.h_sum.iter_mut().for_each(|v| *v = 0.0);
                self.active_now.iter_mut().for_each(|v| *v = true);
            }
        }
        self.cursor += 1;
        Ok(())
    }

    fn next_position(&self, t: usize, l: usize) -> Option<(usize, usize)> {
        match self.mode {
            AccumulationMode::TwoDimensional => {
                if l < self.l_len {
                    Some((t, l + 1))
                } else if t < self.t_len {
                    Some((t + 1, 1))
                } else {
                    None
                }
            }
            AccumulationMode::BlockOnly => {
                if l < self.l_len {
                    Some((t, l + 1))
                } else {
                    None
                }
            }
        }
    }

    pub fn finish(self) -> Result<HaltTrace> {
        if self.cursor != self.t_len * self.l_len {
            return Err(Error::Sequencing {
                expected: self.expected(),
                got: (self.t_len, self.l_len),
            });
        }
        let mut trace = HaltTrace {
            timesteps: self.t_len,
            blocks: self.l_len,
            tokens: self.k_len,
            eps: self.eps,
            mode: self.mode,
            h: self.h_grid,
            h_entering: self.h_entering,
            active: self.active_grid,
            halt: self.halt,
            mask_events: self.mask_events,
            p: Vec::new(),
        };
        trace.assemble_p();
        Ok(trace)
    }
}

fn make_slot(block: usize, r_raw: f64, natural: bool) -> HaltSlot {
    HaltSlot {
        block,
        r_raw,
        r: r_raw.clamp(0.0, 1.0),
        natural,
    }
}

/// Complete record of one forward pass's halting behavior.
#[derive(Debug, Clone)]
pub struct HaltTrace {
    pub timesteps: usize,
    pub blocks: usize,
    pub tokens: usize,
    pub eps: f64,
    pub mode: AccumulationMode,
    /// Effective halting score per (t, l, k); zero at masked positions.
    pub h: Vec<f64>,
    /// Accumulated total entering each (t, l, k).
    pub h_entering: Vec<f64>,
    /// Whether the token was active (unmasked) at each (t, l, k).
    pub active: Vec<bool>,
    /// Halt slot per (t, k); in two-dimensional mode exactly one timestep
    /// per token holds one.
    pub halt: Vec<Option<HaltSlot>>,
    pub mask_events: Vec<MaskEvent>,
    /// Halting probabilities per (t, l, k), remainder-clamped and
    /// renormalized to unit mass per token per accumulation group.
    pub p: Vec<f64>,
}

impl HaltTrace {
    #[inline]
    pub fn idx(&self, t: usize, l: usize, k: usize) -> usize {
        ((t - 1) * self.blocks + (l - 1)) * self.tokens + k
    }

    fn flat_pos(&self, t: usize, l: usize) -> usize {
        (t - 1) * self.blocks + (l - 1)
    }

    fn positions(&self) -> usize {
        self.timesteps * self.blocks
    }

    /// Flat position range of the accumulation group containing timestep t.
    fn group_range(&self, t: usize) -> std::ops::Range<usize> {
        match self.mode {
            AccumulationMode::TwoDimensional => 0..self.positions(),
            AccumulationMode::BlockOnly => (t - 1) * self.blocks..t * self.blocks,
        }
    }

    fn assemble_p(&mut self) {
        let n_pos = self.positions();
        let mut p = vec![0.0; n_pos * self.tokens];
        for t in 1..=self.timesteps {
            for k in 0..self.tokens {
                let Some(slot) = self.halt[(t - 1) * self.tokens + k] else {
                    continue;
                };
                let halt_flat = self.flat_pos(t, slot.block);
                let group = self.group_range(t);
                let mut mass = slot.r;
                for s in group.clone() {
                    if s < halt_flat {
                        mass += self.h[s * self.tokens + k];
                    }
                }
                debug_assert!(mass > 0.0);
                for s in group {
                    let v = if s < halt_flat {
                        self.h[s * self.tokens + k]
                    } else if s == halt_flat {
                        slot.r
                    } else {
                        0.0
                    };
                    p[s * self.tokens + k] = v / mass;
                }
            }
        }
        self.p = p;
    }

    /// Eq.-style halt index: block where token k halts at timestep t, if any.
    pub fn halt_index(&self, t: usize, k: usize) -> Option<usize> {
        self.halt[(t - 1) * self.tokens + k].map(|s| s.block)
    }

    pub fn halt_slot(&self, t: usize, k: usize) -> Option<HaltSlot> {
        self.halt[(t - 1) * self.tokens + k]
    }

    /// Remainder `1 - H(l, t)` with H the total entering block l.
    pub fn remainder_entering(&self, t: usize, l: usize, k: usize) -> f64 {
        1.0 - self.h_entering[self.idx(t, l, k)]
    }

    /// Probability mass of token k summed over its group at timestep t.
    pub fn p_sum(&self, t: usize, k: usize) -> f64 {
        self.group_range(t)
            .map(|s| self.p[s * self.tokens + k])
            .sum()
    }

    /// Fraction of (token, block, timestep) slots that were processed.
    pub fn avg_tokens(&self) -> f64 {
        let act = self.active.iter().filter(|&&a| a).count();
        act as f64 / self.active.len() as f64
    }

    /// Per-token count of processed (block, timestep) slots.
    pub fn processed_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.tokens];
        for s in 0..self.positions() {
            for k in 0..self.tokens {
                if self.active[s * self.tokens + k] {
                    counts[k] += 1;
                }
            }
        }
        counts
    }

    /// Number of halted (masked) tokens at each (t, l).
    pub fn halted_counts(&self) -> Vec<usize> {
        (0..self.positions())
            .map(|s| {
                (0..self.tokens)
                    .filter(|&k| !self.active[s * self.tokens + k])
                    .count()
            })
            .collect()
    }

    /// Masks for building the differentiable probability grid: at position
    /// (t,l), `pre` keeps tokens whose halt lies strictly later in the group,
    /// `halt` marks tokens halting exactly there.
    pub fn p_masks(&self) -> PMasks {
        let n_pos = self.positions();
        let mut pre = vec![false; n_pos * self.tokens];
        let mut halt = vec![false; n_pos * self.tokens];
        for t in 1..=self.timesteps {
            for k in 0..self.tokens {
                if let Some(slot) = self.halt[(t - 1) * self.tokens + k] {
                    let halt_flat = self.flat_pos(t, slot.block);
                    halt[halt_flat * self.tokens + k] = true;
                    for s in self.group_range(t) {
                        if s < halt_flat {
                            pre[s * self.tokens + k] = true;
                        }
                    }
                }
            }
        }
        PMasks {
            positions: n_pos,
            tokens: self.tokens,
            pre,
            halt,
        }
    }

    /// Ponder summands: per (t, k), the halt block index plus clamped
    /// remainder; zero where the token has no halt event at t.
    pub fn ponder_terms(&self) -> Vec<f64> {
        self.halt
            .iter()
            .map(|s| s.map_or(0.0, |slot| slot.block as f64 + slot.r))
            .collect()
    }

    /// CSV serialization: one row per (t, l, k).
    pub fn to_csv(&self, header_comment: &str) -> String {
        let mut out = String::new();
        if !header_comment.is_empty() {
            out.push_str(header_comment);
            if !header_comment.ends_with('\n') {
                out.push('\n');
            }
        }
        out.push_str("t,l,k,h,H,p,masked\n");
        for t in 1..=self.timesteps {
            for l in 1..=self.blocks {
                for k in 0..self.tokens {
                    let i = self.idx(t, l, k);
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        t,
                        l,
                        k,
                        self.h[i],
                        self.h_entering[i] + self.h[i],
                        self.p[i],
                        if self.active[i] { 0 } else { 1 },
                    ));
                }
            }
        }
        out
    }
}

/// Boolean masks that select, per scan position, which tokens contribute
/// their halting score (pre) or their remainder (halt) to the probability
/// grid.
pub struct PMasks {
    pub positions: usize,
    pub tokens: usize,
    pre: Vec<bool>,
    halt: Vec<bool>,
}

impl PMasks {
    pub fn pre(&self, flat_pos: usize) -> &[bool] {
        &self.pre[flat_pos * self.tokens..(flat_pos + 1) * self.tokens]
    }

    pub fn halt(&self, flat_pos: usize) -> &[bool] {
        &self.halt[flat_pos * self.tokens..(flat_pos + 1) * self.tokens]
    }
}

/// Interpret a raw halting-score grid (t-major, then block, then token) under
/// the scan semantics. Scores at positions after a token's mask point are
/// ignored, so arbitrary grids are acceptable.
pub fn scan_h_grid(
    h: &[f64],
    timesteps: usize,
    blocks: usize,
    tokens: usize,
    eps: f64,
    mode: AccumulationMode,
) -> Result<HaltTrace> {
    if h.len() != timesteps * blocks * tokens {
        return Err(Error::dim(
            "scan_h_grid",
            format!(
                "{} scores for {}x{}x{} grid",
                h.len(),
                timesteps,
                blocks,
                tokens
            ),
        ));
    }
    let mut scan = HaltScan::new(timesteps, blocks, tokens, eps, mode, true)?;
    for t in 1..=timesteps {
        for l in 1..=blocks {
            let base = ((t - 1) * blocks + (l - 1)) * tokens;
            scan.step(t, l, &h[base..base + tokens])?;
        }
    }
    scan.finish()
}
