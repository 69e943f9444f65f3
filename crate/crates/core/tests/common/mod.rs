//! Finite-difference gradient oracle shared by the gradient and acceptance
//! suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subband_shake::autodiff::{BatchNormConfig, Graph, Phase, RunningStats, Var};
use subband_shake::shake::{
    residual_shake_block, BlockCoefficients, BlockOptions, FrameLayout, Granularity, ShakeMode,
};
use subband_shake::{Result, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SHAPES_PER_OP: usize = 10;

/// `||a - b|| / max(||a||, ||b||)`, or the absolute norm when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
pub fn kink_free_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Scalar probe `sum(out * R)` with a fixed random `R`.
fn probe(g: &mut Graph, out: Var) -> Result<Var> {
    let dims = g.dims(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
    let r = g.constant(random_tensor(&mut rng, &dims));
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

fn loss(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let s = probe(&mut g, out).expect("probe");
    g.value(s).item()
}

/// Worst relative error over all inputs between the analytic gradient and
/// central differences.
pub fn check(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let s = probe(&mut g, out).expect("probe");
    g.backward(s).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].dims()));
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            *slot = (loss(build, &plus) - loss(build, &minus)) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

fn tied(coeffs: BlockCoefficients) -> BlockCoefficients {
    let tie = |mut c: subband_shake::shake::ShakeCoefficients| {
        c.betas = c.alphas.clone();
        c
    };
    match coeffs {
        BlockCoefficients::None => BlockCoefficients::None,
        BlockCoefficients::Full(c) => BlockCoefficients::Full(tie(c)),
        BlockCoefficients::Upper(c) => BlockCoefficients::Upper(tie(c)),
        BlockCoefficients::Lower(c) => BlockCoefficients::Lower(tie(c)),
        BlockCoefficients::Both { upper, lower } => BlockCoefficients::Both {
            upper: tie(upper),
            lower: tie(lower),
        },
    }
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=max)).collect()
}

/// Every differentiable primitive plus the shake block, each on
/// `SHAPES_PER_OP` random shapes. Returns `(op, worst relative error)`.
pub fn all_op_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut run = |name: &'static str, rng: &mut ChaCha8Rng, case: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let worst = (0..SHAPES_PER_OP).map(|_| case(rng)).fold(0.0, f64::max);
        results.push((name, worst));
    };

    run("add", &mut rng, &mut |rng| {
        let d = dims(rng, 3, 4);
        check(&|g, v| g.add(v[0], v[1]), &[random_tensor(rng, &d), random_tensor(rng, &d)])
    });
    run("mul", &mut rng, &mut |rng| {
        let d = dims(rng, 3, 4);
        check(&|g, v| g.mul(v[0], v[1]), &[random_tensor(rng, &d), random_tensor(rng, &d)])
    });
    run("scale", &mut rng, &mut |rng| {
        let d = dims(rng, 2, 5);
        let f = rng.gen_range(-3.0..3.0);
        check(&|g, v| Ok(g.scale(v[0], f)), &[random_tensor(rng, &d)])
    });
    run("sum", &mut rng, &mut |rng| {
        let d = dims(rng, 3, 4);
        check(&|g, v| Ok(g.sum(v[0])), &[random_tensor(rng, &d)])
    });
    run("sum_n", &mut rng, &mut |rng| {
        let d = dims(rng, 2, 4);
        let n = rng.gen_range(1..=4);
        let inputs: Vec<Tensor> = (0..n).map(|_| random_tensor(rng, &d)).collect();
        check(&|g, v| g.sum_n(v), &inputs)
    });
    run("relu", &mut rng, &mut |rng| {
        let d = dims(rng, 3, 4);
        check(&|g, v| Ok(g.relu(v[0])), &[kink_free_tensor(rng, &d)])
    });
    run("reshape", &mut rng, &mut |rng| {
        let d = dims(rng, 3, 4);
        let flat = d.iter().product::<usize>();
        check(&|g, v| g.reshape(v[0], &[flat]), &[random_tensor(rng, &d)])
    });
    run("narrow", &mut rng, &mut |rng| {
        let mut d = dims(rng, 3, 4);
        let axis = rng.gen_range(0..3);
        d[axis] += 1;
        let start = rng.gen_range(0..d[axis]);
        let len = rng.gen_range(1..=d[axis] - start);
        check(&|g, v| g.narrow(v[0], axis, start, len), &[random_tensor(rng, &d)])
    });
    run("concat", &mut rng, &mut |rng| {
        let d = dims(rng, 3, 3);
        let axis = rng.gen_range(0..3);
        let mut e = d.clone();
        e[axis] = rng.gen_range(1..=3);
        check(&|g, v| g.concat(v, axis), &[random_tensor(rng, &d), random_tensor(rng, &e)])
    });
    run("conv2d", &mut rng, &mut |rng| {
        let (b, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
        let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        check(
            &|g, v| g.conv2d(v[0], v[1], v[2]),
            &[
                random_tensor(rng, &[b, cin, h, w]),
                random_tensor(rng, &[cout, cin, kh, kw]),
                random_tensor(rng, &[cout]),
            ],
        )
    });
    for (name, phase) in [("batchnorm2d train", Phase::Train), ("batchnorm2d eval", Phase::Eval)] {
        run(name, &mut rng, &mut |rng| {
            let (b, c) = (rng.gen_range(2..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let stats = RunningStats {
                mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
            };
            check(
                &|g, v| {
                    let mut s = stats.clone();
                    g.batchnorm2d(v[0], v[1], v[2], &mut s, BatchNormConfig::default(), phase)
                },
                &[
                    random_tensor(rng, &[b, c, h, w]),
                    random_tensor(rng, &[c]),
                    random_tensor(rng, &[c]),
                ],
            )
        });
    }
    run("linear", &mut rng, &mut |rng| {
        let (b, d, k) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=4));
        let inputs = [random_tensor(rng, &[b, d]), random_tensor(rng, &[d, k]), random_tensor(rng, &[k])];
        if rng.gen::<bool>() {
            check(&|g, v| g.linear(v[0], v[1], Some(v[2])), &inputs)
        } else {
            check(&|g, v| g.linear(v[0], v[1], None), &inputs[..2])
        }
    });
    run("dropout", &mut rng, &mut |rng| {
        let d = dims(rng, 2, 5);
        let p = rng.gen_range(0.0..0.8);
        let mask_seed = rng.gen::<u64>();
        check(
            &|g, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                g.dropout(v[0], p, Phase::Train, &mut mask_rng)
            },
            &[random_tensor(rng, &d)],
        )
    });
    run("segment_mean", &mut rng, &mut |rng| {
        let counts: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=3)).collect();
        let layout = FrameLayout::from_frame_counts(&counts).unwrap();
        let d = rng.gen_range(1..=4);
        check(
            &|g, v| g.segment_mean(v[0], layout.samples()),
            &[random_tensor(rng, &[layout.rows(), d])],
        )
    });
    run("mean_pool_time", &mut rng, &mut |rng| {
        let d = dims(rng, 2, 5);
        check(&|g, v| g.mean_pool_time(v[0]), &[random_tensor(rng, &d)])
    });
    run("group_mean", &mut rng, &mut |rng| {
        let (r, c, h) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3));
        let w = rng.gen_range(2..=7);
        let split = rng.gen_range(1..w);
        let groups = vec![0..split, split..w];
        check(&|g, v| g.group_mean(v[0], &groups), &[random_tensor(rng, &[r, c, h, w])])
    });
    run("cross_entropy", &mut rng, &mut |rng| {
        let (b, k) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        check(&|g, v| g.cross_entropy(v[0], &labels), &[random_tensor(rng, &[b, k])])
    });
    run("shake (tied coefficients)", &mut rng, &mut |rng| {
        let (rows, n) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
        let d = [rows, rng.gen_range(1..=3)];
        let coeffs: Vec<f64> = (0..rows)
            .flat_map(|_| subband_shake::shake::sample_simplex(n, rng).unwrap())
            .collect();
        let inputs: Vec<Tensor> = (0..n).map(|_| random_tensor(rng, &d)).collect();
        check(&|g, v| g.shake(v, &coeffs, &coeffs), &inputs)
    });
    for (name, mode) in [
        ("shake block none", ShakeMode::None),
        ("shake block full", ShakeMode::Full),
        ("shake block upper", ShakeMode::Upper),
        ("shake block lower", ShakeMode::Lower),
        ("shake block both", ShakeMode::Both),
    ] {
        run(name, &mut rng, &mut |rng| {
            let counts: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(1..=2)).collect();
            let layout = FrameLayout::from_frame_counts(&counts).unwrap();
            let d = [layout.rows(), rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(2..=5)];
            let granularity = [Granularity::Batch, Granularity::Sample, Granularity::Frame][rng.gen_range(0..3)];
            let coeffs = tied(
                BlockCoefficients::sample(mode, granularity, &layout, 2, rng, Phase::Train).unwrap(),
            );
            let normalize_unshaken = rng.gen::<bool>();
            let options = BlockOptions {
                normalize_unshaken,
                ..BlockOptions::default()
            };
            check(
                &|g, v| residual_shake_block(g, v[0], &v[1..], &coeffs, &layout, Phase::Train, options),
                &[random_tensor(rng, &d), random_tensor(rng, &d), random_tensor(rng, &d)],
            )
        });
    }
    results
}
