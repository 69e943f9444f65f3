use crate::autodiff::Phase;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Running per-channel statistics used in eval phase.
///
/// The running variance tracks the unbiased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// A self-contained batch normalization layer: affine parameters plus
/// running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta_shift: Tensor,
    pub stats: RunningStats,
    pub config: BatchNormConfig,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta_shift: Tensor::zeros(&[channels]),
            stats: RunningStats::new(channels),
            config: BatchNormConfig::default(),
        }
    }
}

/// Returns (output, normalized input, per-channel 1/sqrt(var + eps)).
pub(super) fn forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    config: BatchNormConfig,
    phase: Phase,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    if input.rank() != 4 {
        return Err(Error::shape(
            "batchnorm2d",
            "input [B, C, H, W]",
            format!("{:?}", input.dims()),
        ));
    }
    let (b, c) = (input.dims()[0], input.dims()[1]);
    let plane = input.dims()[2] * input.dims()[3];
    for (name, t) in [("gamma", gamma), ("beta_shift", beta)] {
        if t.dims() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("{name} [{c}]"),
                format!("{:?}", t.dims()),
            ));
        }
    }
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!("running stats of {c} channels"),
            stats.mean.len(),
        ));
    }
    let count = b * plane;
    let x = input.data();

    let (mean, var) = match phase {
        Phase::Train => {
            if count < 2 {
                return Err(Error::DegenerateBatch {
                    op: "batchnorm2d",
                    count,
                });
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for n in 0..b {
                    s += x[(n * c + ch) * plane..][..plane].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for n in 0..b {
                    ss += x[(n * c + ch) * plane..][..plane]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
            let unbias = count as f64 / (count - 1) as f64;
            let mo = config.momentum;
            for ch in 0..c {
                stats.mean[ch] = (1.0 - mo) * stats.mean[ch] + mo * mean[ch];
                stats.var[ch] = (1.0 - mo) * stats.var[ch] + mo * var[ch] * unbias;
            }
            (mean, var)
        }
        Phase::Eval => (stats.mean.clone(), stats.var.clone()),
    };

    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + config.epsilon).sqrt())
        .collect();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let (m, is, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x[i] - m) * is;
                normalized[i] = xh;
                out[i] = gm * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.dims(), out)?,
        Tensor::new(input.dims(), normalized)?,
        inv_std,
    ))
}

fn channel_sums(g: &Tensor, normalized: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, c) = (g.dims()[0], g.dims()[1]);
    let plane = g.dims()[2] * g.dims()[3];
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let gs = &g.data()[off..off + plane];
            let xs = &normalized.data()[off..off + plane];
            sum_g[ch] += gs.iter().sum::<f64>();
            sum_gx[ch] += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    (sum_g, sum_gx)
}

pub(super) fn backward_train(
    g: &Tensor,
    normalized: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c) = (g.dims()[0], g.dims()[1]);
    let plane = g.dims()[2] * g.dims()[3];
    let count = (b * plane) as f64;
    let (sum_g, sum_gx) = channel_sums(g, normalized);
    let mut gi = vec![0.0; g.numel()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let k = gamma.data()[ch] * inv_std[ch] / count;
            for i in off..off + plane {
                gi[i] = k * (count * g.data()[i] - sum_g[ch] - normalized.data()[i] * sum_gx[ch]);
            }
        }
    }
    (
        Tensor::new(g.dims(), gi).unwrap(),
        Tensor::new(&[c], sum_gx).unwrap(),
        Tensor::new(&[c], sum_g).unwrap(),
    )
}

pub(super) fn backward_eval(
    g: &Tensor,
    normalized: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c) = (g.dims()[0], g.dims()[1]);
    let plane = g.dims()[2] * g.dims()[3];
    let (sum_g, sum_gx) = channel_sums(g, normalized);
    let mut gi = g.clone();
    for n in 0..b {
        for ch in 0..c {
            let k = gamma.data()[ch] * inv_std[ch];
            let off = (n * c + ch) * plane;
            for v in &mut gi.data_mut()[off..off + plane] {
                *v *= k;
            }
        }
    }
    (
        gi,
        Tensor::new(&[c], sum_gx).unwrap(),
        Tensor::new(&[c], sum_g).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::from_fn(&[3, 2, 2, 3], |i| ((i * 37 % 11) as f64 - 4.0) * 0.7 + (i % 2) as f64)
    }

    #[test]
    fn train_output_is_standardized() {
        let x = sample();
        let mut stats = RunningStats::new(2);
        let (out, _, _) = forward(
            &x,
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            &mut stats,
            BatchNormConfig::default(),
            Phase::Train,
        )
        .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| out.data()[(n * 2 + ch) * 6..][..6].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() <= 1e-9);
            // Normalizing by sqrt(var + eps) shrinks the variance slightly.
            assert!(var <= 1.0 && var > 1.0 - 1e-3, "{var}");
        }
    }

    #[test]
    fn running_stats_use_momentum_and_unbiased_variance() {
        let x = sample();
        let mut stats = RunningStats::new(2);
        forward(
            &x,
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            &mut stats,
            BatchNormConfig::default(),
            Phase::Train,
        )
        .unwrap();
        let vals: Vec<f64> = (0..3).flat_map(|n| x.data()[(n * 2) * 6..][..6].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 18.0;
        let unbiased = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
        assert!((stats.mean[0] - 0.1 * mean).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_stats_and_leaves_them() {
        let x = sample();
        let mut stats = RunningStats {
            mean: vec![1.0, -1.0],
            var: vec![4.0, 0.25],
        };
        let before = stats.clone();
        let cfg = BatchNormConfig {
            epsilon: 0.0,
            ..BatchNormConfig::default()
        };
        let (out, _, _) = forward(
            &x,
            &Tensor::new(&[2], vec![2.0, 1.0]).unwrap(),
            &Tensor::new(&[2], vec![0.5, 0.0]).unwrap(),
            &mut stats,
            cfg,
            Phase::Eval,
        )
        .unwrap();
        assert_eq!(stats, before);
        assert!((out.data()[0] - (2.0 * (x.data()[0] - 1.0) / 2.0 + 0.5)).abs() < 1e-12);
        assert!((out.data()[6] - (x.data()[6] + 1.0) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_value_batch_is_degenerate() {
        let mut stats = RunningStats::new(1);
        let r = forward(
            &Tensor::zeros(&[1, 1, 1, 1]),
            &Tensor::ones(&[1]),
            &Tensor::zeros(&[1]),
            &mut stats,
            BatchNormConfig::default(),
            Phase::Train,
        );
        assert!(matches!(r, Err(Error::DegenerateBatch { count: 1, .. })));
    }
}
