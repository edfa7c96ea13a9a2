//! Shared test oracles.

use stas_core::halting::AccumulationMode;

/// Independent brute-force interpretation of a raw halting-score grid.
///
/// Walks each token separately; the accumulated total entering a position is
/// recomputed from scratch with an inner prefix loop every time (no running
/// state), and probabilities are assembled by straight-line per-token logic.
pub struct OracleToken {
    /// Effective score per flat position (zero once masked).
    pub h: Vec<f64>,
    /// Accumulated total entering each flat position.
    pub entering: Vec<f64>,
    /// Active flag per flat position.
    pub active: Vec<bool>,
    /// (timestep, block, clamped remainder, raw remainder) halt slots.
    pub halts: Vec<(usize, usize, f64, f64)>,
    /// Probability grid per flat position.
    pub p: Vec<f64>,
}

pub fn oracle_scan(
    h_raw: &[f64],
    t_len: usize,
    l_len: usize,
    k_len: usize,
    eps: f64,
    mode: AccumulationMode,
) -> Vec<OracleToken> {
    let n_pos = t_len * l_len;
    let groups: Vec<(usize, usize)> = match mode {
        AccumulationMode::TwoDimensional => vec![(0, n_pos)],
        AccumulationMode::BlockOnly => (0..t_len).map(|t| (t * l_len, (t + 1) * l_len)).collect(),
    };
    (0..k_len)
        .map(|k| {
            let mut h = vec![0.0; n_pos];
            let mut entering = vec![0.0; n_pos];
            let mut active = vec![false; n_pos];
            let mut halts = Vec::new();
            let mut p = vec![0.0; n_pos];
            for &(g_lo, g_hi) in &groups {
                // first pass: decide the mask point of this group
                let mut masked_from: Option<usize> = None; // flat position where masking starts
                for s in g_lo..g_hi {
                    let is_active = masked_from.map_or(true, |m| s < m);
                    active[s] = is_active;
                    h[s] = if is_active { h_raw[s * k_len + k] } else { 0.0 };
                    // recompute the entering total from scratch
                    let mut acc = 0.0;
                    for s2 in g_lo..s {
                        acc += h[s2];
                    }
                    entering[s] = acc;
                    if is_active && masked_from.is_none() {
                        let after = acc + h[s];
                        if after >= 1.0 - eps && s + 1 < g_hi {
                            masked_from = Some(s + 1);
                        }
                    }
                }
                // halt slot: first masked position, or forced at the last
                let halt_flat = masked_from.unwrap_or(g_hi - 1);
                let t = halt_flat / l_len + 1;
                let l = halt_flat % l_len + 1;
                let r_raw = 1.0 - entering[halt_flat];
                let r = r_raw.clamp(0.0, 1.0);
                halts.push((t, l, r, r_raw));
                // probabilities: h before the halt slot, r at it, renormalized
                let mut mass = r;
                for s in g_lo..halt_flat {
                    mass += h[s];
                }
                for s in g_lo..g_hi {
                    p[s] = if s < halt_flat {
                        h[s] / mass
                    } else if s == halt_flat {
                        r / mass
                    } else {
                        0.0
                    };
                }
            }
            OracleToken { h, entering, active, halts, p }
        })
        .collect()
}
