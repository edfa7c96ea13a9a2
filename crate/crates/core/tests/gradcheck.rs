//! Central finite differences against recorded gradients for every
//! differentiable op, in f64 where the comparison is meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stas_core::tensor::{BnStats, Tape, Tensor};

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Check d(weighted sum of f(inputs)) / d(inputs) against central FD.
fn fd_check(
    name: &str,
    shapes: &[&[usize]],
    data: &[Vec<f64>],
    f: impl Fn(&Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
) {
    // scalarize through fixed pseudo-random weights so sign errors can't cancel
    let weights_for = |numel: usize| -> Vec<f64> {
        (0..numel).map(|i| ((i * 2654435761 + 12345) % 1000) as f64 / 500.0 - 1.0).collect()
    };
    let scalar = |tape: &Tape<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let y = f(tape, inputs);
        let w = Tensor::from_vec(weights_for(y.numel()), &[y.numel()]).unwrap();
        let flat = y.reshaped(&[y.numel()]).unwrap();
        tape.sum(&tape.mul(&flat, &w).unwrap()).unwrap().scalar_value()
    };

    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = data
        .iter()
        .zip(shapes)
        .map(|(d, s)| tape.leaf(&Tensor::from_vec(d.clone(), s).unwrap()))
        .collect();
    let y = f(&tape, &leaves);
    let w = Tensor::from_vec(weights_for(y.numel()), &[y.numel()]).unwrap();
    let flat = y.reshaped(&[y.numel()]).unwrap();
    let loss = tape.sum(&tape.mul(&flat, &w).unwrap()).unwrap();
    let grads = tape.backward(&loss).unwrap();

    for (which, d) in data.iter().enumerate() {
        let ad = grads
            .get(&leaves[which])
            .unwrap_or_else(|| panic!("{name}: input {which} unreachable"));
        for i in 0..d.len() {
            let mut plus = data.to_vec();
            plus[which][i] += STEP;
            let mut minus = data.to_vec();
            minus[which][i] -= STEP;
            let eval = |variant: &[Vec<f64>]| -> f64 {
                let t = Tape::no_grad();
                let ins: Vec<Tensor<f64>> = variant
                    .iter()
                    .zip(shapes)
                    .map(|(d, s)| Tensor::from_vec(d.clone(), s).unwrap())
                    .collect();
                scalar(&t, &ins)
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let rel = (ad[i] - fd).abs() / ad[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                rel < TOL,
                "{name}: input {which} element {i}: ad {} vs fd {} (rel {rel})",
                ad[i],
                fd
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_vec(&mut rng, 6, -1.0, 1.0);
    let b = rand_vec(&mut rng, 6, 0.5, 1.5); // divisor bounded away from 0
    fd_check("add", &[&[2, 3], &[2, 3]], &[a.clone(), b.clone()], |t, x| {
        t.add(&x[0], &x[1]).unwrap()
    });
    fd_check("sub", &[&[2, 3], &[2, 3]], &[a.clone(), b.clone()], |t, x| {
        t.sub(&x[0], &x[1]).unwrap()
    });
    fd_check("mul", &[&[2, 3], &[2, 3]], &[a.clone(), b.clone()], |t, x| {
        t.mul(&x[0], &x[1]).unwrap()
    });
    fd_check("div", &[&[2, 3], &[2, 3]], &[a.clone(), b.clone()], |t, x| {
        t.div(&x[0], &x[1]).unwrap()
    });
    fd_check("affine", &[&[6]], &[a.clone()], |t, x| {
        t.affine(&x[0], -1.7, 0.3).unwrap()
    });
    fd_check("sigmoid", &[&[6]], &[a.clone()], |t, x| t.sigmoid(&x[0]).unwrap());
}

#[test]
fn sigmoid_derivative_at_zero_is_quarter() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::from_vec(vec![0.0], &[1]).unwrap());
    let y = tape.sigmoid(&x).unwrap();
    let s = tape.sum(&y).unwrap();
    let g = tape.backward(&s).unwrap();
    assert!((g.get(&x).unwrap()[0] - 0.25).abs() < 1e-12);
    // FD agreement
    let f = |v: f64| 1.0 / (1.0 + (-v).exp());
    let fd = (f(STEP) - f(-STEP)) / (2.0 * STEP);
    assert!((fd - 0.25).abs() < 1e-6);
}

#[test]
fn relaxed_spike_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = rand_vec(&mut rng, 8, -0.5, 2.0);
    fd_check("spike_relaxed", &[&[8]], &[v], |t, x| {
        t.spike(&x[0], 1.0, 4.0, true).unwrap()
    });
}

#[test]
fn clamp_interior_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // keep samples away from the 0/1 kinks
    let v: Vec<f64> = (0..8).map(|_| rng.gen_range(0.05..0.95)).collect();
    fd_check("clamp01", &[&[8]], &[v], |t, x| t.clamp01(&x[0]).unwrap());
}

#[test]
fn matmul_family_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_vec(&mut rng, 6, -1.0, 1.0);
    let b = rand_vec(&mut rng, 12, -1.0, 1.0);
    fd_check("matmul", &[&[2, 3], &[3, 4]], &[a.clone(), b.clone()], |t, x| {
        t.matmul(&x[0], &x[1]).unwrap()
    });
    fd_check("matmul_nt", &[&[2, 3], &[4, 3]], &[a.clone(), b.clone()], |t, x| {
        t.matmul_nt(&x[0], &x[1]).unwrap()
    });
    let bias = rand_vec(&mut rng, 3, -1.0, 1.0);
    fd_check("add_bias", &[&[2, 3], &[3]], &[a.clone(), bias], |t, x| {
        t.add_bias(&x[0], &x[1]).unwrap()
    });
}

#[test]
fn reductions_and_indexing_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_vec(&mut rng, 12, -1.0, 1.0);
    fd_check("sum", &[&[3, 4]], &[a.clone()], |t, x| t.sum(&x[0]).unwrap());
    fd_check("sum_over_rows", &[&[3, 4]], &[a.clone()], |t, x| {
        t.sum_over_rows(&x[0]).unwrap()
    });
    fd_check("first_feature", &[&[3, 4]], &[a.clone()], |t, x| {
        t.first_feature(&x[0]).unwrap()
    });
    fd_check("mask_rows", &[&[3, 4]], &[a.clone()], |t, x| {
        t.mask_rows(&x[0], &[true, false, true]).unwrap()
    });
    fd_check("mask_vec", &[&[12]], &[a.clone()], |t, x| {
        t.mask_vec(&x[0], &[true, false, true, true, false, true, true, true, false, true, true, false])
            .unwrap()
    });
    fd_check("col_slice", &[&[3, 4]], &[a.clone()], |t, x| {
        t.col_slice(&x[0], 1, 3).unwrap()
    });
    let b = rand_vec(&mut rng, 6, -1.0, 1.0);
    fd_check("col_concat", &[&[3, 4], &[3, 2]], &[a.clone(), b], |t, x| {
        t.col_concat(&[x[0].clone(), x[1].clone()]).unwrap()
    });
}

#[test]
fn cross_entropy_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = rand_vec(&mut rng, 10, -1.0, 1.0);
    fd_check("cross_entropy", &[&[2, 5]], &[logits], |t, x| {
        t.cross_entropy(&x[0], &[3, 1]).unwrap()
    });
}

#[test]
fn mean_field_pool_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t0 = rand_vec(&mut rng, 12, -1.0, 1.0);
    let t1 = rand_vec(&mut rng, 12, -1.0, 1.0);
    let w0 = rand_vec(&mut rng, 3, 0.0, 1.0);
    let w1 = rand_vec(&mut rng, 3, 0.0, 1.0);
    fd_check(
        "mean_field_pool",
        &[&[3, 4], &[3, 4], &[3], &[3]],
        &[t0, t1, w0, w1],
        |t, x| {
            t.mean_field_pool(&[x[0].clone(), x[1].clone()], &[x[2].clone(), x[3].clone()], 2, 0.25)
                .unwrap()
        },
    );
}

#[test]
fn conv_and_pool_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_vec(&mut rng, 2 * 5 * 5, -1.0, 1.0);
    let w = rand_vec(&mut rng, 3 * 2 * 9, -0.5, 0.5);
    let b = rand_vec(&mut rng, 3, -0.2, 0.2);
    fd_check(
        "conv2d_s1p1",
        &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]],
        &[x.clone(), w.clone(), b.clone()],
        |t, i| t.conv2d(&i[0], &i[1], Some(&i[2]), 1, 1).unwrap(),
    );
    fd_check(
        "conv2d_s2p0",
        &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]],
        &[x, w, b],
        |t, i| t.conv2d(&i[0], &i[1], Some(&i[2]), 2, 0).unwrap(),
    );
    // distinct values so no pooling ties sit near the FD step
    let mut px: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.37).collect();
    let n = px.len();
    for (i, v) in px.iter_mut().enumerate() {
        *v += (i * 7 % n) as f64 * 0.011;
    }
    fd_check("maxpool2", &[&[1, 2, 4, 4]], &[px], |t, i| t.maxpool2(&i[0]).unwrap());
}

#[test]
fn batchnorm_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_vec(&mut rng, 5 * 3, -2.0, 2.0);
    let g = rand_vec(&mut rng, 3, 0.5, 1.5);
    let b = rand_vec(&mut rng, 3, -0.5, 0.5);
    fd_check("batchnorm_rows", &[&[5, 3], &[3], &[3]], &[x.clone(), g.clone(), b.clone()], |t, i| {
        t.batchnorm_rows(&i[0], &i[1], &i[2], 1e-5, None, BnStats::Batch)
            .unwrap()
            .0
    });
    fd_check(
        "batchnorm_rows_masked",
        &[&[5, 3], &[3], &[3]],
        &[x.clone(), g.clone(), b.clone()],
        |t, i| {
            t.batchnorm_rows(&i[0], &i[1], &i[2], 1e-5, Some(&[true, true, false, true, false]), BnStats::Batch)
                .unwrap()
                .0
        },
    );
    let mean = vec![0.3, -0.2, 0.1];
    let var = vec![1.2, 0.8, 2.0];
    fd_check(
        "batchnorm_rows_running",
        &[&[5, 3], &[3], &[3]],
        &[x.clone(), g.clone(), b.clone()],
        move |t, i| {
            t.batchnorm_rows(&i[0], &i[1], &i[2], 1e-5, None, BnStats::Running { mean: &mean, var: &var })
                .unwrap()
                .0
        },
    );
    let x4 = rand_vec(&mut rng, 2 * 3 * 2 * 2, -2.0, 2.0);
    fd_check("batchnorm2d", &[&[2, 3, 2, 2], &[3], &[3]], &[x4, g, b], |t, i| {
        t.batchnorm2d(&i[0], &i[1], &i[2], 1e-5, BnStats::Batch).unwrap().0
    });
}

#[test]
fn relaxed_lif_chain_matches_fd_through_state() {
    use stas_core::neuron::{Lif, LifParams};
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d1 = rand_vec(&mut rng, 4, 0.0, 2.0);
    let d2 = rand_vec(&mut rng, 4, 0.0, 2.0);
    let params = LifParams { relaxed: true, ..LifParams::default() };
    fd_check("lif_two_steps", &[&[4], &[4]], &[d1, d2], |t, x| {
        let mut lif = Lif::new();
        let s1 = lif.step(t, &x[0], &params).unwrap();
        let s2 = lif.step(t, &x[1], &params).unwrap();
        t.add(&s1, &s2).unwrap()
    });
}
