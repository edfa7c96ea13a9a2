//! Synaptic-operation and MAC accounting with an energy estimate.
//!
//! Convention: layers fed real-valued inputs count dense multiply-accumulates
//! (MACs); layers fed spikes count accumulates (ACs) as
//! `incoming nonzero count x fan-out`. Batchnorm, residual additions and
//! membrane updates are excluded from both tallies.

use crate::error::{Error, Result};

/// 45 nm process constants used across the spiking-transformer lineage.
pub const E_MAC_PJ: f64 = 4.6;
pub const E_AC_PJ: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub macs: u64,
    pub acs: u64,
    pub in_nnz: u64,
    pub in_numel: u64,
}

impl LayerCount {
    pub fn spike_rate(&self) -> f64 {
        if self.in_numel == 0 {
            0.0
        } else {
            self.in_nnz as f64 / self.in_numel as f64
        }
    }
}

/// Per-layer operation counts for one or more forward passes, in first-use
/// order.
#[derive(Debug, Clone, Default)]
pub struct OpCount {
    layers: Vec<LayerCount>,
}

impl OpCount {
    pub fn new() -> Self {
        OpCount { layers: Vec::new() }
    }

    fn entry(&mut self, name: &str) -> &mut LayerCount {
        if let Some(i) = self.layers.iter().position(|l| l.name == name) {
            &mut self.layers[i]
        } else {
            self.layers.push(LayerCount {
                name: name.to_string(),
                macs: 0,
                acs: 0,
                in_nnz: 0,
                in_numel: 0,
            });
            self.layers.last_mut().unwrap()
        }
    }

    pub fn add_macs(&mut self, name: &str, macs: u64, in_nnz: u64, in_numel: u64) {
        let e = self.entry(name);
        e.macs += macs;
        e.in_nnz += in_nnz;
        e.in_numel += in_numel;
    }

    pub fn add_acs(&mut self, name: &str, acs: u64, in_nnz: u64, in_numel: u64) {
        let e = self.entry(name);
        e.acs += acs;
        e.in_nnz += in_nnz;
        e.in_numel += in_numel;
    }

    /// Spike-driven dense layer: every incoming nonzero triggers `fan_out`
    /// accumulates.
    pub fn spiking_linear(&mut self, name: &str, in_nnz: u64, in_numel: u64, fan_out: usize) {
        self.add_acs(name, in_nnz * fan_out as u64, in_nnz, in_numel);
    }

    pub fn layers(&self) -> &[LayerCount] {
        &self.layers
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_acs(&self) -> u64 {
        self.layers.iter().map(|l| l.acs).sum()
    }

    /// Fold another count into this one (per-layer, by name).
    pub fn merge(&mut self, other: &OpCount) {
        for l in &other.layers {
            let e = self.entry(&l.name);
            e.macs += l.macs;
            e.acs += l.acs;
            e.in_nnz += l.in_nnz;
            e.in_numel += l.in_numel;
        }
    }

    pub fn to_csv(&self, header_comment: &str) -> String {
        let mut out = String::new();
        if !header_comment.is_empty() {
            out.push_str(header_comment);
            if !header_comment.ends_with('\n') {
                out.push('\n');
            }
        }
        out.push_str("layer,flops,sops,spike_rate\n");
        for l in &self.layers {
            out.push_str(&format!("{},{},{},{}\n", l.name, l.macs, l.acs, l.spike_rate()));
        }
        out
    }
}

/// `energy = e_mac * MACs + e_ac * ACs`, constants in picojoules, result in
/// joules.
pub fn estimate_energy(counts: &OpCount, e_mac_pj: f64, e_ac_pj: f64) -> Result<f64> {
    if e_mac_pj < 0.0 || e_ac_pj < 0.0 {
        return Err(Error::Config(format!(
            "negative energy constants ({}, {})",
            e_mac_pj, e_ac_pj
        )));
    }
    Ok((counts.total_macs() as f64 * e_mac_pj + counts.total_acs() as f64 * e_ac_pj) * 1e-12)
}

/// How many sliding-window applications cover each input coordinate, for one
/// axis of a convolution.
pub fn coverage_table(in_len: usize, kernel: usize, stride: usize, pad: usize, out_len: usize) -> Vec<u32> {
    let mut table = vec![0u32; in_len];
    for o in 0..out_len {
        for k in 0..kernel {
            let i = o * stride + k;
            if i >= pad && i - pad < in_len {
                table[i - pad] += 1;
            }
        }
    }
    table
}

/// Exact accumulate count for a spike-driven convolution: each incoming
/// spike contributes `coverage * out_channels` adds.
pub fn conv_spike_acs<F: crate::tensor::Real>(
    x: &crate::tensor::Tensor<F>,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> u64 {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cy = coverage_table(h, kernel, stride, pad, out_h);
    let cx = coverage_table(w, kernel, stride, pad, out_w);
    let mut covered = 0u64;
    let data = x.data();
    for bc in 0..n * c {
        let base = bc * h * w;
        for y in 0..h {
            let row = &data[base + y * w..base + (y + 1) * w];
            let cyv = cy[y] as u64;
            if cyv == 0 {
                continue;
            }
            for (xcol, &v) in row.iter().enumerate() {
                if !v.is_zero() {
                    covered += cyv * cx[xcol] as u64;
                }
            }
        }
    }
    covered * out_channels as u64
}

/// Dense MAC count of a convolution.
pub fn conv_macs(
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
) -> u64 {
    (batch * out_channels * out_h * out_w * in_channels * kernel * kernel) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn two_active_spikes_into_4x3_linear_cost_six_adds() {
        let mut c = OpCount::new();
        c.spiking_linear("fc", 2, 4, 3);
        assert_eq!(c.total_acs(), 6);
        assert_eq!(c.total_macs(), 0);
        assert!((c.layers()[0].spike_rate() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_spikes_cost_nothing() {
        let mut c = OpCount::new();
        c.spiking_linear("fc", 0, 4, 3);
        assert_eq!(c.total_acs(), 0);
    }

    #[test]
    fn energy_is_linear_in_counts() {
        let mut c = OpCount::new();
        c.add_acs("layer", 1_000_000, 0, 0);
        let e = estimate_energy(&c, 0.0, 0.9).unwrap();
        assert!((e - 0.9e-6).abs() < 1e-18);
        let mut c2 = c.clone();
        c2.merge(&c);
        let e2 = estimate_energy(&c2, 0.0, 0.9).unwrap();
        assert!((e2 - 2.0 * e).abs() < 1e-18);
        assert!(estimate_energy(&c, -1.0, 0.9).is_err());
    }

    #[test]
    fn coverage_counts_kernel_applications() {
        // length 4, kernel 3, stride 1, pad 1 -> out 4; edges covered 2x/3x
        let t = coverage_table(4, 3, 1, 1, 4);
        assert_eq!(t, vec![2, 3, 3, 2]);
    }

    #[test]
    fn conv_spike_acs_matches_hand_count() {
        // single spike in the middle of a 3x3 input, 3x3 kernel, pad 1:
        // covered by all 9 windows that exist -> coverage 3*3, 2 out channels
        let mut img = vec![0.0f32; 9];
        img[4] = 1.0;
        let x = Tensor::from_vec(img, &[1, 1, 3, 3]).unwrap();
        let acs = conv_spike_acs(&x, 2, 3, 1, 1, 3, 3);
        assert_eq!(acs, 9 * 2);
    }

    #[test]
    fn csv_lists_layers_in_first_use_order() {
        let mut c = OpCount::new();
        c.add_macs("a", 5, 1, 2);
        c.add_acs("b", 7, 3, 4);
        c.add_acs("a", 2, 0, 0);
        let csv = c.to_csv("# seed=1");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# seed=1");
        assert_eq!(lines[1], "layer,flops,sops,spike_rate");
        assert!(lines[2].starts_with("a,5,2,"));
        assert!(lines[3].starts_with("b,0,7,"));
    }
}
