//! Tape operations: forward computation plus a recorded backward closure.
//!
//! Backward closures capture shared buffers (`Arc`) of whatever forward
//! values they need, so the graph owns its activations until dropped.

use super::tape::GradStore;
use super::{expect_rank, same_shape, Real, Tape, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// raw matmul kernels (also used inside backward closures)
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip.is_zero() {
                continue; // spike inputs are mostly zero
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn mm_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            out_row[j] += s;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn mm_tn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a_row[i];
            if a_pi.is_zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += a_pi * b_row[j];
            }
        }
    }
}

impl<F: Real> Tape<F> {
    pub(crate) fn record(
        &self,
        tracked: bool,
        numel: usize,
        make: impl FnOnce() -> super::tape::BackFn<F>,
    ) -> Option<usize> {
        if self.is_recording() && tracked {
            self.push(numel, Some(make()))
        } else {
            None
        }
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("add", a, b)?;
        let data: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let (an, bn) = (a.node(), b.node());
        let node = self.record(an.is_some() || bn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| accum_eq(d, g));
                store.accum(bn, |d| accum_eq(d, g));
            })
        });
        Ok(Tensor::from_vec(data, a.shape())?.with_node(node))
    }

    pub fn sub(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("sub", a, b)?;
        let data: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let (an, bn) = (a.node(), b.node());
        let node = self.record(an.is_some() || bn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| accum_eq(d, g));
                store.accum(bn, |d| {
                    for (di, &gi) in d.iter_mut().zip(g) {
                        *di -= gi;
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, a.shape())?.with_node(node))
    }

    pub fn mul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("mul", a, b)?;
        let data: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let (an, bn) = (a.node(), b.node());
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let node = self.record(an.is_some() || bn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * bd[i];
                    }
                });
                store.accum(bn, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * ad[i];
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, a.shape())?.with_node(node))
    }

    pub fn div(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("div", a, b)?;
        let data: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
        let (an, bn) = (a.node(), b.node());
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let node = self.record(an.is_some() || bn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] / bd[i];
                    }
                });
                store.accum(bn, |d| {
                    for i in 0..g.len() {
                        d[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, a.shape())?.with_node(node))
    }

    /// y = mult * x + add, elementwise.
    pub fn affine(&self, a: &Tensor<F>, mult: f64, add: f64) -> Result<Tensor<F>> {
        let (m, c) = (F::of_f64(mult), F::of_f64(add));
        let data: Vec<F> = a.data().iter().map(|&x| m * x + c).collect();
        let an = a.node();
        let node = self.record(an.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for (di, &gi) in d.iter_mut().zip(g) {
                        *di += m * gi;
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, a.shape())?.with_node(node))
    }

    pub fn scale(&self, a: &Tensor<F>, c: f64) -> Result<Tensor<F>> {
        self.affine(a, c, 0.0)
    }

    pub fn add_scalar(&self, a: &Tensor<F>, c: f64) -> Result<Tensor<F>> {
        self.affine(a, 1.0, c)
    }

    pub fn sigmoid(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let data: Vec<F> = a.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let an = a.node();
        let out = Tensor::from_vec(data, a.shape())?;
        let yd = out.data_arc();
        let node = self.record(an.is_some(), out.numel(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for i in 0..g.len() {
                        let y = yd[i];
                        d[i] += g[i] * y * (F::one() - y);
                    }
                });
            })
        });
        Ok(out.with_node(node))
    }

    /// Threshold nonlinearity of the spiking neuron.
    ///
    /// Hard mode emits exactly 0/1 and backpropagates the sigmoid surrogate
    /// `scale * s * (1 - s)` with `s = sigmoid(scale * (v - threshold))`.
    /// Relaxed mode emits `s` itself, making the forward differentiable so
    /// finite differences can certify the backward path.
    pub fn spike(
        &self,
        v: &Tensor<F>,
        threshold: f64,
        surrogate_scale: f64,
        relaxed: bool,
    ) -> Result<Tensor<F>> {
        let th = F::of_f64(threshold);
        let sc = F::of_f64(surrogate_scale);
        let data: Vec<F> = if relaxed {
            v.data().iter().map(|&x| sigmoid_scalar(sc * (x - th))).collect()
        } else {
            v.data()
                .iter()
                .map(|&x| if x >= th { F::one() } else { F::zero() })
                .collect()
        };
        let vn = v.node();
        let vd = v.data_arc();
        let node = self.record(vn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(vn, |d| {
                    for i in 0..g.len() {
                        let s = sigmoid_scalar(sc * (vd[i] - th));
                        d[i] += g[i] * sc * s * (F::one() - s);
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, v.shape())?.with_node(node))
    }

    /// Clamp to [0, 1]. The gradient passes on the closed interval (the
    /// boundary subgradient is taken as 1): halting remainders sit exactly
    /// at 0 whenever scores are exactly 0.5, and blocking there would stall
    /// the ponder pressure.
    pub fn clamp01(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let data: Vec<F> = a
            .data()
            .iter()
            .map(|&x| x.max(F::zero()).min(F::one()))
            .collect();
        let an = a.node();
        let ad = a.data_arc();
        let node = self.record(an.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for i in 0..g.len() {
                        if ad[i] >= F::zero() && ad[i] <= F::one() {
                            d[i] += g[i];
                        }
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, a.shape())?.with_node(node))
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        expect_rank("matmul", a, 2)?;
        expect_rank("matmul", b, 2)?;
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dims {:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let mut data = vec![F::zero(); m * n];
        mm_nn(a.data(), b.data(), m, k, n, &mut data);
        let (an, bn) = (a.node(), b.node());
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let node = self.record(an.is_some() || bn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                // dA = G * B^T, dB = A^T * G
                store.accum(an, |d| mm_nt(g, &bd, m, n, k, d));
                store.accum(bn, |d| mm_tn(&ad, g, k, m, n, d));
            })
        });
        Ok(Tensor::from_vec(data, &[m, n])?.with_node(node))
    }

    /// a[m,k] * b[n,k]^T -> [m,n]
    pub fn matmul_nt(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        expect_rank("matmul_nt", a, 2)?;
        expect_rank("matmul_nt", b, 2)?;
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (n, k2) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("inner dims {:?} x {:?}^T", a.shape(), b.shape()),
            ));
        }
        let mut data = vec![F::zero(); m * n];
        mm_nt(a.data(), b.data(), m, k, n, &mut data);
        let (an, bn) = (a.node(), b.node());
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let node = self.record(an.is_some() || bn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                // dA = G * B, dB = G^T * A
                store.accum(an, |d| mm_nn(g, &bd, m, n, k, d));
                store.accum(bn, |d| mm_tn(g, &ad, n, m, k, d));
            })
        });
        Ok(Tensor::from_vec(data, &[m, n])?.with_node(node))
    }

    /// Row-broadcast bias add: a[r,c] + bias[c].
    pub fn add_bias(&self, a: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        expect_rank("add_bias", a, 2)?;
        expect_rank("add_bias", bias, 1)?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        if bias.numel() != c {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} vs columns {}", bias.shape(), c),
            ));
        }
        let bd_fwd = bias.data();
        let mut data = Vec::with_capacity(r * c);
        for row in a.data().chunks_exact(c) {
            for j in 0..c {
                data.push(row[j] + bd_fwd[j]);
            }
        }
        let (an, bn) = (a.node(), bias.node());
        let node = self.record(an.is_some() || bn.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| accum_eq(d, g));
                store.accum(bn, |d| {
                    for row in g.chunks_exact(c) {
                        for j in 0..c {
                            d[j] += row[j];
                        }
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, a.shape())?.with_node(node))
    }

    // -- reductions & indexing ----------------------------------------------

    pub fn sum(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let mut s = F::zero();
        for &x in a.data() {
            s += x;
        }
        let an = a.node();
        let numel = a.numel();
        let node = self.record(an.is_some(), 1, || {
            Box::new(move |g, store: &mut GradStore<F>| {
                let gi = g[0];
                store.accum(an, |d| {
                    for di in d.iter_mut().take(numel) {
                        *di += gi;
                    }
                });
            })
        });
        Ok(Tensor::from_vec(vec![s], &[1])?.with_node(node))
    }

    /// Column sums: a[r,c] -> [c].
    pub fn sum_over_rows(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        expect_rank("sum_over_rows", a, 2)?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![F::zero(); c];
        for row in a.data().chunks_exact(c) {
            for j in 0..c {
                data[j] += row[j];
            }
        }
        let an = a.node();
        let node = self.record(an.is_some(), c, || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for row in d.chunks_exact_mut(c).take(r) {
                        for j in 0..c {
                            row[j] += g[j];
                        }
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, &[c])?.with_node(node))
    }

    /// First embedding element of every token: a[r,c] -> [r].
    pub fn first_feature(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        expect_rank("first_feature", a, 2)?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let data: Vec<F> = (0..r).map(|i| a.data()[i * c]).collect();
        let an = a.node();
        let node = self.record(an.is_some(), r, || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for i in 0..r {
                        d[i * c] += g[i];
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, &[r])?.with_node(node))
    }

    /// Zero out the rows whose `active` flag is false.
    pub fn mask_rows(&self, a: &Tensor<F>, active: &[bool]) -> Result<Tensor<F>> {
        expect_rank("mask_rows", a, 2)?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        if active.len() != r {
            return Err(Error::dim(
                "mask_rows",
                format!("mask length {} vs {} rows", active.len(), r),
            ));
        }
        let mut data = vec![F::zero(); r * c];
        for (i, &keep) in active.iter().enumerate() {
            if keep {
                data[i * c..(i + 1) * c].copy_from_slice(&a.data()[i * c..(i + 1) * c]);
            }
        }
        let an = a.node();
        let mask: Vec<bool> = active.to_vec();
        let node = self.record(an.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for (i, &keep) in mask.iter().enumerate() {
                        if keep {
                            for j in 0..c {
                                d[i * c + j] += g[i * c + j];
                            }
                        }
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, a.shape())?.with_node(node))
    }

    /// Zero out entries whose `keep` flag is false (1-D variant).
    pub fn mask_vec(&self, a: &Tensor<F>, keep: &[bool]) -> Result<Tensor<F>> {
        expect_rank("mask_vec", a, 1)?;
        if keep.len() != a.numel() {
            return Err(Error::dim(
                "mask_vec",
                format!("mask length {} vs {} entries", keep.len(), a.numel()),
            ));
        }
        let data: Vec<F> = a
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { F::zero() })
            .collect();
        let an = a.node();
        let mask: Vec<bool> = keep.to_vec();
        let node = self.record(an.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for i in 0..g.len() {
                        if mask[i] {
                            d[i] += g[i];
                        }
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, a.shape())?.with_node(node))
    }

    /// Column range view: a[r,c] -> [r, hi-lo].
    pub fn col_slice(&self, a: &Tensor<F>, lo: usize, hi: usize) -> Result<Tensor<F>> {
        expect_rank("col_slice", a, 2)?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        if lo >= hi || hi > c {
            return Err(Error::dim(
                "col_slice",
                format!("range {}..{} out of {} columns", lo, hi, c),
            ));
        }
        let w = hi - lo;
        let mut data = Vec::with_capacity(r * w);
        for row in a.data().chunks_exact(c) {
            data.extend_from_slice(&row[lo..hi]);
        }
        let an = a.node();
        let node = self.record(an.is_some(), data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                store.accum(an, |d| {
                    for i in 0..r {
                        for j in 0..w {
                            d[i * c + lo + j] += g[i * w + j];
                        }
                    }
                });
            })
        });
        Ok(Tensor::from_vec(data, &[r, w])?.with_node(node))
    }

    /// Concatenate along columns: [r,c1],[r,c2],... -> [r, sum(ci)].
    pub fn col_concat(&self, parts: &[Tensor<F>]) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(Error::dim("col_concat", "no parts".to_string()));
        }
        let r = parts[0].shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            expect_rank("col_concat", p, 2)?;
            if p.shape()[0] != r {
                return Err(Error::dim("col_concat", "row counts differ".to_string()));
            }
            widths.push(p.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![F::zero(); r * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let nodes: Vec<Option<usize>> = parts.iter().map(|p| p.node()).collect();
        let tracked = nodes.iter().any(|n| n.is_some());
        let widths2 = widths.clone();
        let node = self.record(tracked, data.len(), || {
            Box::new(move |g, store: &mut GradStore<F>| {
                let mut off = 0;
                for (idx, &w) in widths2.iter().enumerate() {
                    store.accum(nodes[idx], |d| {
                        for i in 0..r {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            })
        });
        Ok(Tensor::from_vec(data, &[r, total])?.with_node(node))
    }

    // -- losses --------------------------------------------------------------

    /// Mean cross-entropy over rows, log-sum-exp stabilized.
    pub fn cross_entropy(&self, logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
        expect_rank("cross_entropy", logits, 2)?;
        let (n, c) = (logits.shape()[0], logits.shape()[1]);
        if labels.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        for &l in labels {
            if l >= c {
                return Err(Error::dim(
                    "cross_entropy",
                    format!("label {} out of range for {} classes", l, c),
                ));
            }
        }
        let mut total = F::zero();
        for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for &x in row {
                z += (x - m).exp();
            }
            total += m + z.ln() - row[label];
        }
        let inv_n = F::of_f64(1.0 / n as f64);
        let loss = total * inv_n;
        let ln = logits.node();
        let ld = logits.data_arc();
        let labels2: Vec<usize> = labels.to_vec();
        let node = self.record(ln.is_some(), 1, || {
            Box::new(move |g, store: &mut GradStore<F>| {
                let gi = g[0] * inv_n;
                store.accum(ln, |d| {
                    for (i, &label) in labels2.iter().enumerate() {
                        let row = &ld[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                        let mut z = F::zero();
                        for &x in row {
                            z += (x - m).exp();
                        }
                        for j in 0..c {
                            let p = (row[j] - m).exp() / z;
                            let ind = if j == label { F::one() } else { F::zero() };
                            d[i * c + j] += gi * (p - ind);
                        }
                    }
                });
            })
        });
        Ok(Tensor::from_vec(vec![loss], &[1])?.with_node(node))
    }

    /// Halting-probability weighted pooling of token states:
    ///
    /// `out[d] = norm * sum_t sum_k sum_l tokens[t*per_group+l][k,d] * weights[t*per_group+l][k]`
    ///
    /// Summation runs in exactly that loop order so an independent
    /// triple-loop evaluation reproduces it bit for bit.
    pub fn mean_field_pool(
        &self,
        tokens: &[Tensor<F>],
        weights: &[Tensor<F>],
        per_group: usize,
        norm: f64,
    ) -> Result<Tensor<F>> {
        if tokens.is_empty() || tokens.len() != weights.len() || per_group == 0 {
            return Err(Error::dim(
                "mean_field_pool",
                format!("{} token sets vs {} weight sets", tokens.len(), weights.len()),
            ));
        }
        if tokens.len() % per_group != 0 {
            return Err(Error::dim(
                "mean_field_pool",
                format!("{} positions not divisible by group {}", tokens.len(), per_group),
            ));
        }
        let groups = tokens.len() / per_group;
        let (k_count, d) = (tokens[0].shape()[0], tokens[0].shape()[1]);
        for (ts, ws) in tokens.iter().zip(weights) {
            expect_rank("mean_field_pool", ts, 2)?;
            if ts.shape() != [k_count, d] || ws.numel() != k_count {
                return Err(Error::dim(
                    "mean_field_pool",
                    format!("token set {:?} / weights {:?}", ts.shape(), ws.shape()),
                ));
            }
        }
        let nf = F::of_f64(norm);
        let mut acc = vec![F::zero(); d];
        for t in 0..groups {
            for k in 0..k_count {
                for l in 0..per_group {
                    let pos = t * per_group + l;
                    let w = weights[pos].data()[k];
                    if w.is_zero() {
                        continue;
                    }
                    let row = &tokens[pos].data()[k * d..(k + 1) * d];
                    for (a, &x) in acc.iter_mut().zip(row) {
                        *a += w * x;
                    }
                }
            }
        }
        for a in acc.iter_mut() {
            *a *= nf;
        }
        let token_nodes: Vec<Option<usize>> = tokens.iter().map(|t| t.node()).collect();
        let weight_nodes: Vec<Option<usize>> = weights.iter().map(|w| w.node()).collect();
        let tracked = token_nodes.iter().chain(&weight_nodes).any(|n| n.is_some());
        let token_bufs: Vec<_> = tokens.iter().map(|t| t.data_arc()).collect();
        let weight_bufs: Vec<_> = weights.iter().map(|w| w.data_arc()).collect();
        let node = self.record(tracked, d, || {
            Box::new(move |g, store: &mut GradStore<F>| {
                for pos in 0..token_bufs.len() {
                    store.accum(token_nodes[pos], |dt| {
                        let wbuf = &weight_bufs[pos];
                        for k in 0..k_count {
                            let w = wbuf[k] * nf;
                            if w.is_zero() {
                                continue;
                            }
                            for j in 0..d {
                                dt[k * d + j] += w * g[j];
                            }
                        }
                    });
                    store.accum(weight_nodes[pos], |dw| {
                        let tbuf = &token_bufs[pos];
                        for k in 0..k_count {
                            let mut s = F::zero();
                            for j in 0..d {
                                s += tbuf[k * d + j] * g[j];
                            }
                            dw[k] += s * nf;
                        }
                    });
                }
            })
        });
        Ok(Tensor::from_vec(acc, &[1, d])?.with_node(node))
    }
}

#[inline(always)]
fn sigmoid_scalar<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline(always)]
fn accum_eq<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
