//! Analysis routines behind the command-line tools: cosine-similarity
//! diagnostics, halting-threshold sweeps, per-token halting maps, and the
//! accumulation-mode ablation.

use serde::Serialize;

use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::halting::AccumulationMode;
use crate::model::{ForwardOpts, Model, ModelConfig};
use crate::train::{evaluate, EvalMetrics, EvalOpts};

/// Comment line carried at the top of every emitted CSV.
pub fn csv_header_comment(cfg: &ModelConfig, seed: u64) -> String {
    format!("# config_hash={} seed={}", config_hash(cfg), seed)
}

/// Stable short hash of the canonical config JSON.
pub fn config_hash(cfg: &ModelConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimilarityRow {
    pub axis: String,
    pub index: usize,
    pub mean_cos: f64,
    pub std: f64,
}

struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn new() -> Self {
        Welford { n: 0, mean: 0.0, m2: 0.0 }
    }
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }
    fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

/// Mean cosine similarity of token inputs between consecutive blocks and
/// between consecutive timesteps (block-1 inputs), averaged over tokens and
/// samples. Runs with halting disabled: this probes the architecture, not
/// the masking policy.
pub fn similarity(model: &Model<f32>, data: &Dataset, norm: &NormStats, max_samples: usize) -> Result<Vec<SimilarityRow>> {
    let cfg = model.config().clone();
    let (t_len, l_len) = (cfg.timesteps, cfg.blocks);
    let k = model.tokens();
    let d = cfg.embed_dim;
    let mut block_stats: Vec<Welford> = (0..l_len.saturating_sub(1)).map(|_| Welford::new()).collect();
    let mut time_stats: Vec<Welford> = (0..t_len.saturating_sub(1)).map(|_| Welford::new()).collect();
    let mut m = model.clone();
    for img in data.images.iter().take(max_samples) {
        let x = norm.apply(&img.pixels);
        let pass = m.forward(&x, &ForwardOpts { halting: false, ..Default::default() })?;
        // block-axis: input of block l vs input of block l+1 (both per t)
        for t in 0..t_len {
            for l in 0..l_len - 1 {
                // input of block l+1 is the output of block l; input of
                // block 1 is the embed token set
                let lhs = if l == 0 {
                    pass.embed_tokens[t].data()
                } else {
                    pass.block_outputs[t * l_len + (l - 1)].data()
                };
                let rhs = pass.block_outputs[t * l_len + l].data();
                for token in 0..k {
                    block_stats[l].push(cosine(
                        &lhs[token * d..(token + 1) * d],
                        &rhs[token * d..(token + 1) * d],
                    ));
                }
            }
        }
        // timestep-axis: block-1 inputs at consecutive timesteps
        for t in 0..t_len - 1 {
            let a = pass.embed_tokens[t].data();
            let b = pass.embed_tokens[t + 1].data();
            for token in 0..k {
                time_stats[t].push(cosine(
                    &a[token * d..(token + 1) * d],
                    &b[token * d..(token + 1) * d],
                ));
            }
        }
    }
    let mut rows = Vec::new();
    for (l, w) in block_stats.iter().enumerate() {
        rows.push(SimilarityRow {
            axis: "block".to_string(),
            index: l + 1,
            mean_cos: w.mean,
            std: w.std(),
        });
    }
    for (t, w) in time_stats.iter().enumerate() {
        rows.push(SimilarityRow {
            axis: "timestep".to_string(),
            index: t + 1,
            mean_cos: w.mean,
            std: w.std(),
        });
    }
    Ok(rows)
}

pub fn similarity_csv(rows: &[SimilarityRow], comment: &str) -> String {
    let mut out = String::new();
    out.push_str(comment);
    out.push('\n');
    out.push_str("axis,index,mean_cos,std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.axis, r.index, r.mean_cos, r.std));
    }
    out
}

/// Mean consecutive-timestep cosine of block-1 inputs (the headline
/// temporal-similarity number).
pub fn mean_temporal_similarity(rows: &[SimilarityRow]) -> f64 {
    let ts: Vec<&SimilarityRow> = rows.iter().filter(|r| r.axis == "timestep").collect();
    if ts.is_empty() {
        return 0.0;
    }
    ts.iter().map(|r| r.mean_cos).sum::<f64>() / ts.len() as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub accuracy: f64,
    pub avg_tokens: f64,
    pub energy_j: f64,
}

/// Evaluate across a halting-threshold grid. The grid must be strictly
/// increasing; avg_tokens and energy must come out non-increasing, anything
/// else is reported as a numeric failure.
pub fn sweep_epsilon(
    model: &Model<f32>,
    data: &Dataset,
    norm: &NormStats,
    grid: &[f64],
    check_monotone: bool,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("empty eps grid".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("eps grid must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &eps in grid {
        if eps < 0.0 {
            return Err(Error::Config(format!("negative eps {eps}")));
        }
        let m: EvalMetrics = evaluate(
            model,
            data,
            norm,
            &EvalOpts { eps: Some(eps), ..Default::default() },
        )?;
        rows.push(SweepRow {
            eps,
            accuracy: m.accuracy,
            avg_tokens: m.avg_tokens,
            energy_j: m.energy_j,
        });
    }
    if check_monotone {
        for w in rows.windows(2) {
            if w[1].avg_tokens > w[0].avg_tokens + 1e-12 {
                return Err(Error::Numeric(format!(
                    "avg_tokens not monotone: {} at eps {} vs {} at eps {}",
                    w[1].avg_tokens, w[1].eps, w[0].avg_tokens, w[0].eps
                )));
            }
            if w[1].energy_j > w[0].energy_j + 1e-18 {
                return Err(Error::Numeric(format!(
                    "energy not monotone: {} at eps {} vs {} at eps {}",
                    w[1].energy_j, w[1].eps, w[0].energy_j, w[0].eps
                )));
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow], comment: &str) -> String {
    let mut out = String::new();
    out.push_str(comment);
    out.push('\n');
    out.push_str("eps,acc,avg_tokens,energy\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.eps, r.accuracy, r.avg_tokens, r.energy_j));
    }
    out
}

/// Halting visualization for one input: per-token processed counts, a P5
/// grayscale map over the token grid, and per-(t, l) halted-token counts.
pub struct HaltMap {
    pub grid: (usize, usize),
    pub counts: Vec<usize>,
    pub max_count: usize,
    pub halted_per_position: Vec<usize>,
    pub timesteps: usize,
    pub blocks: usize,
    pub avg_tokens: f64,
}

pub fn halting_map(model: &Model<f32>, image: &[f32], eps: Option<f64>) -> Result<HaltMap> {
    let cfg = model.config().clone();
    let mut m = model.clone();
    let pass = m.forward(image, &ForwardOpts { eps, ..Default::default() })?;
    let grid = cfg.embed_config().grid()?;
    Ok(HaltMap {
        grid,
        counts: pass.trace.processed_counts(),
        max_count: cfg.timesteps * cfg.blocks,
        halted_per_position: pass.trace.halted_counts(),
        timesteps: cfg.timesteps,
        blocks: cfg.blocks,
        avg_tokens: pass.avg_tokens,
    })
}

impl HaltMap {
    /// 8-bit binary PGM over the token grid; brighter means more processing.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (gh, gw) = self.grid;
        let mut out = format!("P5\n{} {}\n255\n", gw, gh).into_bytes();
        for &c in &self.counts {
            out.push(((c * 255) / self.max_count) as u8);
        }
        out
    }

    pub fn counts_csv(&self, comment: &str) -> String {
        let mut out = String::new();
        out.push_str(comment);
        out.push('\n');
        out.push_str("token,processed\n");
        for (k, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{}\n", k, c));
        }
        out
    }

    pub fn halted_csv(&self, comment: &str) -> String {
        let mut out = String::new();
        out.push_str(comment);
        out.push('\n');
        out.push_str("t,l,halted\n");
        for t in 0..self.timesteps {
            for l in 0..self.blocks {
                out.push_str(&format!(
                    "{},{},{}\n",
                    t + 1,
                    l + 1,
                    self.halted_per_position[t * self.blocks + l]
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub mode: String,
    pub avg_tokens: f64,
    pub accuracy: f64,
}

/// Evaluate one accumulation mode on a frozen model.
pub fn ablate(
    model: &Model<f32>,
    data: &Dataset,
    norm: &NormStats,
    mode: AccumulationMode,
    eps: Option<f64>,
) -> Result<AblateRow> {
    let m = evaluate(
        model,
        data,
        norm,
        &EvalOpts { eps, accumulation: mode, ..Default::default() },
    )?;
    Ok(AblateRow {
        mode: match mode {
            AccumulationMode::TwoDimensional => "two_dimensional".to_string(),
            AccumulationMode::BlockOnly => "block_only".to_string(),
        },
        avg_tokens: m.avg_tokens,
        accuracy: m.accuracy,
    })
}

pub fn ablate_csv(rows: &[AblateRow], comment: &str) -> String {
    let mut out = String::new();
    out.push_str(comment);
    out.push('\n');
    out.push_str("mode,avg_tokens,acc\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.mode, r.avg_tokens, r.accuracy));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ModelConfig::tiny();
        let mut b = ModelConfig::tiny();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.alpha = 1.25;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn cosine_conventions() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-12);
    }

    #[test]
    fn random_highdim_vectors_are_nearly_orthogonal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut acc = 0.0;
        let n = 50;
        for _ in 0..n {
            let a: Vec<f32> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            acc += cosine(&a, &b);
        }
        assert!((acc / n as f64).abs() < 0.1);
    }

    #[test]
    fn sweep_rejects_bad_grids_and_is_consistent_with_evaluate() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let data = gen_synthetic(12, 5).unwrap();
        let norm = NormStats::from_dataset(&data);
        assert!(sweep_epsilon(&model, &data, &norm, &[], true).is_err());
        assert!(sweep_epsilon(&model, &data, &norm, &[0.1, 0.1], true).is_err());
        let rows = sweep_epsilon(&model, &data, &norm, &[0.0], false).unwrap();
        let direct = evaluate(&model, &data, &norm, &EvalOpts { eps: Some(0.0), ..Default::default() }).unwrap();
        assert_eq!(rows[0].accuracy, direct.accuracy);
        assert_eq!(rows[0].avg_tokens, direct.avg_tokens);
        assert_eq!(rows[0].energy_j, direct.energy_j);
    }

    #[test]
    fn haltmap_counts_cross_check_avg_tokens() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let data = gen_synthetic(2, 6).unwrap();
        let norm = NormStats::from_dataset(&data);
        let x = norm.apply(&data.images[0].pixels);
        let map = halting_map(&model, &x, Some(0.05)).unwrap();
        let total: usize = map.counts.iter().sum();
        let k = map.counts.len();
        let expect = (k * map.max_count) as f64 * map.avg_tokens;
        assert!((total as f64 - expect).abs() < 1e-6);
        let pgm = map.to_pgm();
        assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(pgm.len(), 11 + k);
    }

    #[test]
    fn haltmap_disabled_halting_is_uniform_white() {
        let mut cfg = ModelConfig::tiny();
        cfg.alpha = 0.0;
        cfg.beta = -40.0;
        let model = Model::new(cfg).unwrap();
        let data = gen_synthetic(1, 6).unwrap();
        let norm = NormStats::from_dataset(&data);
        let x = norm.apply(&data.images[0].pixels);
        let map = halting_map(&model, &x, None).unwrap();
        assert!(map.counts.iter().all(|&c| c == map.max_count));
        let pgm = map.to_pgm();
        assert!(pgm[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn csv_floats_roundtrip() {
        let rows = vec![SweepRow { eps: 0.07, accuracy: 1.0 / 3.0, avg_tokens: 0.123456789, energy_j: 3.5e-7 }];
        let csv = sweep_csv(&rows, "# c");
        let line = csv.lines().nth(2).unwrap();
        let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals[0], 0.07);
        assert_eq!(vals[1], 1.0 / 3.0);
        assert_eq!(vals[2], 0.123456789);
        assert_eq!(vals[3], 3.5e-7);
    }
}
