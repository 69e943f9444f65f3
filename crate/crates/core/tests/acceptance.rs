//! Acceptance suite: one line per criterion.
//!
//! `cargo test --test acceptance` runs everything that fits in a few
//! minutes. Criteria 8 and 9 at full scale take hours on one core and run
//! only with `cargo test --test acceptance -- --full-scale`; without the flag
//! they run at reduced scale: the trend is reported, not gated, and
//! determinism is still gated. Numeric arguments
//! select criteria, e.g. `-- 3 7`.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use subband_shake::autodiff::{Graph, Phase};
use subband_shake::data::{
    featurize_corpus, generate_synthetic_corpus, partition_actors, Emotion, Gender, OnError, SynthSpec,
    UtteranceRecord,
};
use subband_shake::experiment::{prepare, run_trend, TrendConfig};
use subband_shake::features::{cmvn, extract_features, frame_count, spectrogram, FeatureConfig, Waveform};
use subband_shake::models::{
    deep_spec, shallow_spec, BlockSpec, BranchSpec, ConvSpec, HeadLayer, ModelSpec, PrelimSpec, StageSpec,
};
use subband_shake::shake::{
    residual_shake_block, sample_simplex, BlockCoefficients, BlockOptions, FrameLayout, Granularity,
    ShakeCoefficients, ShakeMode,
};
use subband_shake::train::{paired_t_test_one_sided, train, HyperParams};
use subband_shake::{Error, Tensor};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Pass,
    Fail,
    /// Ran, but not gated.
    Reported,
}

struct Line {
    id: &'static str,
    verdict: Verdict,
    detail: String,
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn within_pct(got: usize, want: f64, pct: f64) -> bool {
    (got as f64 - want).abs() <= want * pct / 100.0
}

fn criterion_1() -> Line {
    let shallow = shallow_spec(ShakeMode::Both);
    let branch = shallow.stages[0].blocks[0].branch.param_count(shallow.stages[0].blocks[0].in_ch);
    let deep = deep_spec(ShakeMode::Both).count_parameters();
    let stage = |n: &str| deep.stage(n).unwrap_or(0);
    let checks = [
        ("prelim-conv", stage("prelim-conv") == 132),
        ("affine", stage("affine") == 1024),
        ("branch", within_pct(branch, 10_200.0, 1.0)),
        ("res-8", within_pct(stage("res-8"), 22_840.0, 0.5)),
        ("res-16", within_pct(stage("res-16"), 24_880.0, 0.5)),
        ("res-32", within_pct(stage("res-32"), 99_170.0, 0.5)),
        ("total", within_pct(deep.total, 148_000.0, 0.5)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Line {
        id: "1 parameter counts",
        verdict: verdict(failed.is_empty()),
        detail: format!(
            "prelim {} affine {} branch {branch} res-8 {} res-16 {} res-32 {} deep total {}{}",
            stage("prelim-conv"),
            stage("affine"),
            stage("res-8"),
            stage("res-16"),
            stage("res-32"),
            deep.total,
            if failed.is_empty() { String::new() } else { format!("; off: {failed:?}") }
        ),
    }
}

fn criterion_2() -> Line {
    let started = Instant::now();
    let mut ok = true;
    let mut worst_mean: f64 = 0.0;
    for n in 2..=4 {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut sums = vec![0.0; n];
        let draws = 100_000;
        for _ in 0..draws {
            let row = sample_simplex(n, &mut rng).unwrap();
            ok &= (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
            ok &= row.iter().all(|v| (0.0..=1.0).contains(v));
            for (s, v) in sums.iter_mut().zip(&row) {
                *s += v;
            }
        }
        for s in sums {
            worst_mean = worst_mean.max((s / draws as f64 - 1.0 / n as f64).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ok &= worst_mean <= 0.01 && secs < 5.0;
    Line {
        id: "2 simplex sampler",
        verdict: verdict(ok),
        detail: format!("worst |mean - 1/N| {worst_mean:.5}, {secs:.2} s"),
    }
}

fn block_output(
    x: &Tensor,
    branches: &[Tensor],
    coeffs: &BlockCoefficients,
    layout: &FrameLayout,
    phase: Phase,
) -> Tensor {
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let vb: Vec<_> = branches.iter().map(|b| g.constant(b.clone())).collect();
    let y = residual_shake_block(&mut g, vx, &vb, coeffs, layout, phase, BlockOptions::default()).unwrap();
    g.value(y).clone()
}

fn criterion_3() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = FrameLayout::from_frame_counts(&[2, 1]).unwrap();
    let dims = [3, 1, 2, 4];
    let x = common::random_tensor(&mut rng, &dims);
    let b = [common::random_tensor(&mut rng, &dims), common::random_tensor(&mut rng, &dims)];

    // (a) eval phase: shortcut plus branch mean.
    let eval_coeffs =
        BlockCoefficients::sample(ShakeMode::Full, Granularity::Frame, &layout, 2, &mut rng, Phase::Eval).unwrap();
    let eval = block_output(&x, &b, &eval_coeffs, &layout, Phase::Eval);
    let a_err = (0..x.numel())
        .map(|i| (eval.data()[i] - (x.data()[i] + 0.5 * (b[0].data()[i] + b[1].data()[i]))).abs())
        .fold(0.0, f64::max);
    let a_ok = a_err <= 1e-12;

    // (b) train-phase mean converges to the eval output.
    let reps = 10_000;
    let mut sum = vec![0.0; x.numel()];
    let mut sq = vec![0.0; x.numel()];
    for _ in 0..reps {
        let c = BlockCoefficients::sample(ShakeMode::Full, Granularity::Frame, &layout, 2, &mut rng, Phase::Train)
            .unwrap();
        let y = block_output(&x, &b, &c, &layout, Phase::Train);
        for (i, v) in y.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let mut worst_z: f64 = 0.0;
    let b_ok = (0..x.numel()).all(|i| {
        let mean = sum[i] / reps as f64;
        let var = (sq[i] / reps as f64 - mean * mean).max(0.0) * reps as f64 / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        let dev = (mean - eval.data()[i]).abs();
        if se > 0.0 {
            worst_z = worst_z.max(dev / se);
        }
        dev <= 3.0 * se + 1e-12
    });

    // (c) Both with the same draw for both bands is bitwise Full.
    let BlockCoefficients::Full(tied) =
        BlockCoefficients::sample(ShakeMode::Full, Granularity::Frame, &layout, 2, &mut rng, Phase::Train).unwrap()
    else {
        unreachable!()
    };
    let full = block_output(&x, &b, &BlockCoefficients::Full(tied.clone()), &layout, Phase::Train);
    let both = BlockCoefficients::Both {
        upper: tied.clone(),
        lower: tied,
    };
    let both = block_output(&x, &b, &both, &layout, Phase::Train);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let c_ok = bits(&full) == bits(&both);

    // (d) Upper on x mirrors Lower on the spectrally reversed input.
    let flip = |t: &Tensor| t.flip(3);
    let c = ShakeCoefficients::constant(Granularity::Frame, &layout, &[0.3, 0.7], &[0.6, 0.4]).unwrap();
    let upper = block_output(&x, &b, &BlockCoefficients::Upper(c.clone()), &layout, Phase::Train);
    let lower = block_output(
        &flip(&x),
        &[flip(&b[0]), flip(&b[1])],
        &BlockCoefficients::Lower(c),
        &layout,
        Phase::Train,
    );
    let d_err = upper.max_abs_diff(&flip(&lower));
    let d_ok = d_err <= 1e-12;

    Line {
        id: "3 shake semantics",
        verdict: verdict(a_ok && b_ok && c_ok && d_ok),
        detail: format!(
            "(a) max err {a_err:.1e}; (b) worst |z| {worst_z:.2} over {reps} draws; (c) bitwise equal {c_ok}; (d) mirror err {d_err:.1e}"
        ),
    }
}

fn criterion_4() -> Line {
    let started = Instant::now();
    let results = common::all_op_checks(4);
    let secs = started.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, e)| *e > common::TOLERANCE)
        .map(|(op, e)| format!("{op} {e:.1e}"))
        .collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Line {
        id: "4 gradient correctness",
        verdict: verdict(failed.is_empty() && secs < 120.0),
        detail: format!(
            "{} ops x {} shapes, worst relative error {worst:.1e}, {secs:.1} s{}",
            results.len(),
            common::SHAPES_PER_OP,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    }
}

fn criterion_5() -> Line {
    let sr = 16_000;
    let samples: Vec<f64> = (0..sr as usize)
        .map(|i| 0.4 * (i as f64 * 0.37).sin() + 0.2 * (i as f64 * 0.011).cos())
        .collect();
    let wave = Waveform::new(samples, sr).unwrap();
    let cfg = FeatureConfig::default();
    let raw = frame_count(sr as usize, cfg.window_samples(sr), cfg.hop_samples(sr));
    let spec = spectrogram(&wave, &cfg).unwrap();
    let feats = extract_features(&wave, &cfg).unwrap();
    let norm = cmvn(&spec).unwrap();
    let (t, bins) = (norm.dims()[0], norm.dims()[1]);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for b in 0..bins {
        let col: Vec<f64> = (0..t).map(|i| norm.data()[i * bins + b]).collect();
        let mean = col.iter().sum::<f64>() / t as f64;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    let ok = raw == 98
        && spec.dims()[0] == 98
        && feats.frames.dims() == [13, 16, 257]
        && worst_mean <= 1e-9
        && worst_std <= 1e-6;
    Line {
        id: "5 feature pipeline",
        verdict: verdict(ok),
        detail: format!(
            "1 s -> {raw} raw frames, output {:?}; CMVN |mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}",
            feats.frames.dims()
        ),
    }
}

fn criterion_6() -> Line {
    let records: Vec<UtteranceRecord> = (0..23)
        .flat_map(|i| {
            let gender = if i < 11 { Gender::F } else { Gender::M };
            Emotion::ALL.into_iter().map(move |e| UtteranceRecord {
                utterance_id: format!("P{i:02}_{e}"),
                actor_id: format!("P{i:02}"),
                gender,
                corpus: "corpus".into(),
                label: e,
                feature_path: PathBuf::from(format!("features/P{i:02}_{e}.feat")),
            })
        })
        .collect();
    let mut ok = true;
    let mut patterns = Vec::new();
    for seed in 0..5 {
        let part = partition_actors(&records, 4, seed).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        let mut counts = Vec::new();
        for set in &part.sets {
            let f = set.iter().filter(|a| a[1..].parse::<usize>().unwrap() < 11).count();
            counts.push((f, set.len() - f));
            for a in set {
                ok &= seen.insert(a.clone());
            }
        }
        ok &= seen.len() == 23;
        let fs: Vec<usize> = counts.iter().map(|c| c.0).collect();
        let ms: Vec<usize> = counts.iter().map(|c| c.1).collect();
        ok &= fs.iter().max().unwrap() - fs.iter().min().unwrap() <= 1;
        ok &= ms.iter().max().unwrap() - ms.iter().min().unwrap() <= 1;
        ok &= fs.iter().all(|f| (2..=3).contains(f)) && ms.iter().all(|&m| m == 3);
        if seed == 0 {
            patterns = counts;
        }
    }
    Line {
        id: "6 partitioning",
        verdict: verdict(ok),
        detail: format!(
            "23 actors 11F/12M, 5 seeds; seed 0: {}",
            patterns.iter().map(|(f, m)| format!("{f}F,{m}M")).collect::<Vec<_>>().join(" / ")
        ),
    }
}

fn criterion_7() -> Line {
    // Twelve pairs whose differences have mean 1.796 * sd / sqrt(12).
    let base = [1.0, -0.5, 0.3, 1.2, -1.1, 0.8, -0.2, 0.4, -0.9, 0.6, -0.7, 0.1];
    let n = base.len() as f64;
    let mean = base.iter().sum::<f64>() / n;
    let centred: Vec<f64> = base.iter().map(|v| v - mean).collect();
    let sd = (centred.iter().map(|v| v * v).sum::<f64>() / (n - 1.0)).sqrt();
    let shift = 1.796 * sd / n.sqrt();
    let a: Vec<f64> = centred.iter().map(|d| d + shift).collect();
    let zeros = vec![0.0; 12];
    let r = paired_t_test_one_sided(&a, &zeros).unwrap();
    let sym_a = [1.0, -1.0, 2.0, -2.0, 0.5, -0.5];
    let sym = paired_t_test_one_sided(&sym_a, &[0.0; 6]).unwrap();
    let ok = (r.t - 1.796).abs() < 1e-9 && (r.p - 0.05).abs() <= 0.002 && (sym.p - 0.5).abs() <= 1e-9 && r.df == 11;
    Line {
        id: "7 statistics",
        verdict: verdict(ok),
        detail: format!("t {:.3} df {} p {:.4}; symmetric p {:.9}", r.t, r.df, r.p, sym.p),
    }
}

/// A small network over real 16x257 frames for the reduced-scale trend run.
fn compact_spec(mode: ShakeMode) -> ModelSpec {
    let branch = BranchSpec::conv_bn_relu_conv_bn(ConvSpec::new(2, 1, 4), ConvSpec::new(2, 1, 4));
    ModelSpec {
        name: "compact".into(),
        frame_dims: (16, 257),
        prelim: PrelimSpec {
            conv: ConvSpec::new(2, 1, 4),
            batchnorm: true,
            relu: true,
        },
        stages: vec![StageSpec {
            name: "block".into(),
            blocks: vec![BlockSpec::new(2, branch, mode)],
        }],
        head: vec![
            HeadLayer::FrequencyGroupPool { groups: 16 },
            HeadLayer::TemporalMeanPool,
            HeadLayer::Linear { out: 16, bias: true },
            HeadLayer::Relu,
            HeadLayer::Linear { out: 4, bias: true },
        ],
        class_count: 4,
    }
}

fn criterion_8(full_scale: bool) -> Line {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = if full_scale {
        TrendConfig::default()
    } else {
        TrendConfig {
            synth: SynthSpec {
                per_class: [2; 4],
                min_secs: 1.0,
                max_secs: 1.0,
                ..SynthSpec::default()
            },
            model: compact_spec,
            folds: vec![0],
            hyper: HyperParams {
                max_epochs: 10,
                batch_size: 16,
                ..HyperParams::default()
            },
            patience: vec![3, 5, 10],
            ..TrendConfig::default()
        }
    };
    let outcome = match run_trend(&cfg, tmp.path()) {
        Ok(o) => o,
        Err(e) => {
            return Line {
                id: "8 trend reproduction",
                verdict: Verdict::Fail,
                detail: format!("harness error: {e}"),
            }
        }
    };
    let wins: Vec<String> = outcome
        .wins
        .iter()
        .map(|(m, w)| format!("{m} {w}/{}", cfg.seeds.len()))
        .collect();
    let test = match &outcome.both_vs_baseline {
        Some(Ok(t)) => format!("both vs none UA t {:.3} df {} p {:.4}", t.t, t.df, t.p),
        Some(Err(Error::DegenerateVariance)) => "both vs none UA: degenerate".into(),
        Some(Err(e)) => format!("both vs none UA: {e}"),
        None => "no t-test".into(),
    };
    let scale = if full_scale {
        "full scale"
    } else {
        "reduced scale (compact model, 64 utterances, 1 fold, 10 epochs), not gated"
    };
    let directional = if outcome.directional_pass { "gap criterion met" } else { "gap criterion not met" };
    Line {
        id: "8 trend reproduction",
        verdict: if full_scale { verdict(outcome.directional_pass) } else { Verdict::Reported },
        detail: format!(
            "{scale}; {directional}; wins {}; {test}; {:.0} s",
            wins.join(", "),
            started.elapsed().as_secs_f64()
        ),
    }
}

fn criterion_9(full_scale: bool) -> Line {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let synth = if full_scale {
        SynthSpec::default()
    } else {
        SynthSpec {
            actor_count: 4,
            per_class: [1; 4],
            min_secs: 1.0,
            max_secs: 1.0,
            ..SynthSpec::default()
        }
    };
    let epochs = if full_scale { 10 } else { 2 };
    let records = generate_synthetic_corpus(&synth, &corpus, 1).unwrap();
    featurize_corpus(&corpus, &records, &FeatureConfig::default(), false, OnError::FailFast).unwrap();
    let (data, _, folds) = prepare(&corpus, &records, 0).unwrap();
    let (tr, va) = (data.subset(&folds[0].train), data.subset(&folds[0].valid));
    let hp = HyperParams {
        max_epochs: epochs,
        ..HyperParams::default()
    };
    let curve = || {
        let mut model = shallow_spec(hp.mode).build(hp.seed);
        let out = train(&mut model, &tr, &va, &hp, |_| {}).unwrap();
        out.report.losses().iter().map(|l| l.to_bits()).collect::<Vec<u64>>()
    };
    let (a, b) = (curve(), curve());
    let same = a == b && a.len() == epochs;
    let scale = if full_scale {
        "full scale (default corpus, fold 0, 10 epochs)"
    } else {
        "reduced scale (shallow model, 16 utterances, fold 0, 2 epochs)"
    };
    Line {
        id: "9 determinism",
        verdict: verdict(same),
        detail: format!(
            "{scale}: loss curves {} over {} epochs, {:.0} s",
            if same { "bitwise identical" } else { "differ" },
            a.len(),
            started.elapsed().as_secs_f64()
        ),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full_scale = args.iter().any(|a| a == "--full-scale");
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: Vec<Box<dyn Fn() -> Line>> = vec![
        Box::new(criterion_1),
        Box::new(criterion_2),
        Box::new(criterion_3),
        Box::new(criterion_4),
        Box::new(criterion_5),
        Box::new(criterion_6),
        Box::new(criterion_7),
        Box::new(move || criterion_8(full_scale)),
        Box::new(move || criterion_9(full_scale)),
    ];
    let mut failed = 0;
    for (i, run) in criteria.into_iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        let line = run();
        let tag = match line.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Reported => "REPORTED",
        };
        println!("criterion {:<24} {tag:<8} {}", line.id, line.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
