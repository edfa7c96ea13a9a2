//! Batch normalization.
//!
//! Two layouts: per-channel over a [N,C,H,W] feature map, and per-feature
//! over [K,D] token rows. The token variant can restrict its statistics to
//! active (unmasked) rows; masked rows come out exactly zero so a halted
//! token never leaks into the normalization of the survivors.

use super::tape::GradStore;
use super::{expect_rank, Real, Tape, Tensor};
use crate::error::{Error, Result};

/// Statistics actually used by a batchnorm call (population values), for
/// updating running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Which statistics a batchnorm call normalizes with.
pub enum BnStats<'a, F: Real> {
    /// Compute from this call's data (training mode).
    Batch,
    /// Use stored running estimates (inference mode).
    Running { mean: &'a [F], var: &'a [F] },
}

struct NormPlan<F: Real> {
    mean: Vec<F>,
    inv_std: Vec<F>,
    batch: bool,
}

fn plan<F: Real>(
    stats: &BnStats<'_, F>,
    features: usize,
    eps: f64,
    mut feature_stats: impl FnMut(usize) -> (F, F),
) -> NormPlan<F> {
    let epsf = F::of_f64(eps);
    match stats {
        BnStats::Batch => {
            let mut mean = Vec::with_capacity(features);
            let mut inv_std = Vec::with_capacity(features);
            for f in 0..features {
                let (m, v) = feature_stats(f);
                mean.push(m);
                inv_std.push(F::one() / (v + epsf).sqrt());
            }
            NormPlan { mean, inv_std, batch: true }
        }
        BnStats::Running { mean, var } => NormPlan {
            mean: mean.to_vec(),
            inv_std: var.iter().map(|&v| F::one() / (v + epsf).sqrt()).collect(),
            batch: false,
        },
    }
}

impl<F: Real> Tape<F> {
    /// Batchnorm over token rows: features are columns, statistics run over
    /// the active rows. Inactive rows are zeroed in the output.
    pub fn batchnorm_rows(
        &self,
        x: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: f64,
        active: Option<&[bool]>,
        stats: BnStats<'_, F>,
    ) -> Result<(Tensor<F>, BatchStats)> {
        expect_rank("batchnorm_rows", x, 2)?;
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::dim(
                "batchnorm_rows",
                format!("params {:?}/{:?} vs {} features", gamma.shape(), beta.shape(), c),
            ));
        }
        if let Some(a) = active {
            if a.len() != r {
                return Err(Error::dim(
                    "batchnorm_rows",
                    format!("mask length {} vs {} rows", a.len(), r),
                ));
            }
        }
        let rows: Vec<usize> = match active {
            Some(a) => (0..r).filter(|&i| a[i]).collect(),
            None => (0..r).collect(),
        };
        let na = rows.len();
        if na == 0 {
            // nothing to normalize over; the whole output is masked anyway
            let out = Tensor::zeros(&[r, c]).with_node(self.record(
                x.node().is_some() || gamma.node().is_some() || beta.node().is_some(),
                r * c,
                || Box::new(|_, _: &mut GradStore<F>| {}),
            ));
            return Ok((
                out,
                BatchStats { mean: vec![0.0; c], var: vec![0.0; c] },
            ));
        }
        let xd = x.data();
        let inv_na = F::of_f64(1.0 / na as f64);
        let np = plan(&stats, c, eps, |f| {
            let mut s = F::zero();
            for &i in &rows {
                s += xd[i * c + f];
            }
            let m = s * inv_na;
            let mut v = F::zero();
            for &i in &rows {
                let d = xd[i * c + f] - m;
                v += d * d;
            }
            (m, v * inv_na)
        });

        let mut xhat = vec![F::zero(); r * c];
        let mut data = vec![F::zero(); r * c];
        for &i in &rows {
            for f in 0..c {
                let xh = (xd[i * c + f] - np.mean[f]) * np.inv_std[f];
                xhat[i * c + f] = xh;
                data[i * c + f] = gamma.data()[f] * xh + beta.data()[f];
            }
        }
        let report = BatchStats {
            mean: np.mean.iter().map(|m| m.as_f64()).collect(),
            var: np
                .inv_std
                .iter()
                .map(|s| 1.0 / (s.as_f64() * s.as_f64()) - eps)
                .collect(),
        };

        let (xn, gn, bn) = (x.node(), gamma.node(), beta.node());
        let tracked = xn.is_some() || gn.is_some() || bn.is_some();
        let gd = gamma.data_arc();
        let xhat = std::sync::Arc::new(xhat);
        let xhat_b = std::sync::Arc::clone(&xhat);
        let inv_std = np.inv_std.clone();
        let batch_mode = np.batch;
        let rows_b = rows.clone();
        let node = self.record(tracked, data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(bn, |d| {
                    for &i in &rows_b {
                        for f in 0..c {
                            d[f] += g[i * c + f];
                        }
                    }
                });
                store.accum(gn, |d| {
                    for &i in &rows_b {
                        for f in 0..c {
                            d[f] += g[i * c + f] * xhat_b[i * c + f];
                        }
                    }
                });
                store.accum(xn, |d| {
                    if batch_mode {
                        // dx = gamma*inv_std*(g - mean(g) - xhat*mean(g*xhat)) over active rows
                        for f in 0..c {
                            let mut sg = F::zero();
                            let mut sgx = F::zero();
                            for &i in &rows_b {
                                sg += g[i * c + f];
                                sgx += g[i * c + f] * xhat_b[i * c + f];
                            }
                            let inv_n = F::of_f64(1.0 / rows_b.len() as f64);
                            let mg = sg * inv_n;
                            let mgx = sgx * inv_n;
                            let coef = gd[f] * inv_std[f];
                            for &i in &rows_b {
                                d[i * c + f] +=
                                    coef * (g[i * c + f] - mg - xhat_b[i * c + f] * mgx);
                            }
                        }
                    } else {
                        for &i in &rows_b {
                            for f in 0..c {
                                d[i * c + f] += g[i * c + f] * gd[f] * inv_std[f];
                            }
                        }
                    }
                });
            })
        });
        Ok((Tensor::from_vec(data, &[r, c])?.with_node(node), report))
    }

    /// Batchnorm over a [N,C,H,W] map: features are channels, statistics run
    /// over batch and spatial positions.
    pub fn batchnorm2d(
        &self,
        x: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: f64,
        stats: BnStats<'_, F>,
    ) -> Result<(Tensor<F>, BatchStats)> {
        expect_rank("batchnorm2d", x, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::dim(
                "batchnorm2d",
                format!("params {:?}/{:?} vs {} channels", gamma.shape(), beta.shape(), c),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let inv_count = F::of_f64(1.0 / count as f64);
        let xd = x.data();
        let np = plan(&stats, c, eps, |ch| {
            let mut s = F::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &xd[base..base + plane] {
                    s += v;
                }
            }
            let m = s * inv_count;
            let mut var = F::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &xd[base..base + plane] {
                    let d = v - m;
                    var += d * d;
                }
            }
            (m, var * inv_count)
        });

        let mut xhat = vec![F::zero(); x.numel()];
        let mut data = vec![F::zero(); x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in 0..plane {
                    let xh = (xd[base + i] - np.mean[ch]) * np.inv_std[ch];
                    xhat[base + i] = xh;
                    data[base + i] = gamma.data()[ch] * xh + beta.data()[ch];
                }
            }
        }
        let report = BatchStats {
            mean: np.mean.iter().map(|m| m.as_f64()).collect(),
            var: np
                .inv_std
                .iter()
                .map(|s| 1.0 / (s.as_f64() * s.as_f64()) - eps)
                .collect(),
        };

        let (xn, gn, bn) = (x.node(), gamma.node(), beta.node());
        let tracked = xn.is_some() || gn.is_some() || bn.is_some();
        let gd = gamma.data_arc();
        let xhat = std::sync::Arc::new(xhat);
        let inv_std = np.inv_std.clone();
        let batch_mode = np.batch;
        let node = self.record(tracked, data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(bn, |d| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let mut s = F::zero();
                            for &gv in &g[base..base + plane] {
                                s += gv;
                            }
                            d[ch] += s;
                        }
                    }
                });
                store.accum(gn, |d| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let mut s = F::zero();
                            for i in 0..plane {
                                s += g[base + i] * xhat[base + i];
                            }
                            d[ch] += s;
                        }
                    }
                });
                store.accum(xn, |d| {
                    if batch_mode {
                        for ch in 0..c {
                            let mut sg = F::zero();
                            let mut sgx = F::zero();
                            for b in 0..n {
                                let base = (b * c + ch) * plane;
                                for i in 0..plane {
                                    sg += g[base + i];
                                    sgx += g[base + i] * xhat[base + i];
                                }
                            }
                            let mg = sg * inv_count;
                            let mgx = sgx * inv_count;
                            let coef = gd[ch] * inv_std[ch];
                            for b in 0..n {
                                let base = (b * c + ch) * plane;
                                for i in 0..plane {
                                    d[base + i] += coef * (g[base + i] - mg - xhat[base + i] * mgx);
                                }
                            }
                        }
                    } else {
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                let coef = gd[ch] * inv_std[ch];
                                for i in 0..plane {
                                    d[base + i] += g[base + i] * coef;
                                }
                            }
                        }
                    }
                });
            })
        });
        Ok((Tensor::from_vec(data, x.shape())?.with_node(node), report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(n: usize) -> Tensor<f64> {
        Tensor::full(&[n], 1.0)
    }

    fn zeros(n: usize) -> Tensor<f64> {
        Tensor::zeros(&[n])
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::full(&[4, 3], 7.5);
        let (y, _) = tape
            .batchnorm_rows(&x, &ones(3), &zeros(3), 1e-5, None, BnStats::Batch)
            .unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn standardized_output_has_zero_mean_unit_var() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..20 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(data, &[20, 4]).unwrap();
        let tape = Tape::<f64>::no_grad();
        let (y, _) = tape
            .batchnorm_rows(&x, &ones(4), &zeros(4), 1e-5, None, BnStats::Batch)
            .unwrap();
        for f in 0..4 {
            let col: Vec<f64> = (0..20).map(|i| y.data()[i * 4 + f]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 20.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-5, "mean {}", mean);
            assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }

    #[test]
    fn running_stats_reproduce_batch_output() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..12 * 3).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let x = Tensor::from_vec(data, &[12, 3]).unwrap();
        let tape = Tape::<f64>::no_grad();
        let (y_batch, stats) = tape
            .batchnorm_rows(&x, &ones(3), &zeros(3), 1e-5, None, BnStats::Batch)
            .unwrap();
        let mean: Vec<f64> = stats.mean.clone();
        let var: Vec<f64> = stats.var.clone();
        let (y_run, _) = tape
            .batchnorm_rows(
                &x,
                &ones(3),
                &zeros(3),
                1e-5,
                None,
                BnStats::Running { mean: &mean, var: &var },
            )
            .unwrap();
        for (a, b) in y_batch.data().iter().zip(y_run.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn masked_rows_are_zero_and_do_not_shift_stats() {
        let tape = Tape::<f64>::no_grad();
        // row 1 holds huge values that must not affect the stats of rows 0/2
        let x = Tensor::from_vec(
            vec![1.0, 2.0, 1e6, -1e6, 3.0, 4.0],
            &[3, 2],
        )
        .unwrap();
        let active = [true, false, true];
        let (y, stats) = tape
            .batchnorm_rows(&x, &ones(2), &zeros(2), 1e-5, Some(&active), BnStats::Batch)
            .unwrap();
        assert_eq!(&y.data()[2..4], &[0.0, 0.0]);
        assert!((stats.mean[0] - 2.0).abs() < 1e-12);
        assert!((stats.mean[1] - 3.0).abs() < 1e-12);

        // all-masked edge: output all zeros
        let (y0, _) = tape
            .batchnorm_rows(&x, &ones(2), &zeros(2), 1e-5, Some(&[false; 3]), BnStats::Batch)
            .unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_variance_guarded_by_epsilon() {
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::full(&[1, 2], 5.0);
        let (y, _) = tape
            .batchnorm_rows(&x, &ones(2), &zeros(2), 1e-5, None, BnStats::Batch)
            .unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
