//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs sequentially so the timing bounds mean something.

use std::f64::consts::PI;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tats_core::embedding_io::read_embeddings_auto;
use tats_core::experiment::{
    load_csv, make_synthetic_hidden_driver, run_experiment, ExperimentConfig, Mode, ResultsDocument, Task,
};
use tats_core::models::{BackboneConfig, ChannelMixing};
use tats_core::nn::Parameterized;
use tats_core::spectral::{default_max_lag, difference, magnitude_spectrum, text_spectrum, Spectrum};
use tats_core::transport::{
    lp_oracle, shuffle_ratio, shuffle_ratio_percent, tt_wasserstein, wasserstein_1d, NormalizedSpectrum,
    TransportConfig,
};
use tats_core::{
    AugmentedForecaster, AugmentedImputer, EmbeddingSequence, ImputeWindow, LossSpace, MultimodalDataset, TatsConfig,
    WindowSample,
};

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        let verdict = if ok { Verdict::Pass } else { Verdict::Fail };
        Self { verdict, detail }
    }
}

// Settings shared by the training criteria.
const LR: f64 = 1e-3;
const EPOCHS: usize = 20;
const PATIENCE: usize = 5;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const T_TRAIN: usize = 2000;

type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let checks: [Check; 12] = [
        ("spectral correctness", spectral_correctness),
        ("differenced sinusoid peak", sinusoid_peak),
        ("circular embedding peak", circular_embedding_peak),
        ("transport exactness and metric axioms", transport),
        ("tt-wasserstein shuffle ratio", shuffle_direction),
        ("gradient integrity", gradient_integrity),
        ("efficacy and shuffled-text ablation", efficacy_and_ablation),
        ("degeneracy at d_mapped = 0", degeneracy),
        ("imputation vs mean fill", imputation),
        ("parameter overhead", overhead),
        ("time-mmd ordering", time_mmd_ordering),
        ("arithmetic check 0.026 / mean(0.088, 0.106)", published_arithmetic),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let out = check();
        let tag = match out.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} {name}: {} [{:.1}s]", out.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (1..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                re += v * ang.cos();
                im -= v * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

fn spectral_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.random_range(8..=512);
        let x: Vec<f64> = (0..t).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = magnitude_spectrum(&x).unwrap().amplitudes;
        let want = dft_magnitudes(&x);
        let num: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        worst < 1e-9 && secs < 5.0,
        format!("100 inputs, worst rel err {worst:.2e}, {secs:.2}s"),
    )
}

fn nearest_bin(s: &Spectrum, freq: f64) -> usize {
    let mut best = 0;
    for (i, f) in s.frequencies.iter().enumerate() {
        if (f - freq).abs() < (s.frequencies[best] - freq).abs() {
            best = i;
        }
    }
    best
}

fn sinusoid_peak() -> Outcome {
    let t = 480;
    let (mut total, mut ok) = (0, 0);
    for p in 3..=24 {
        for amp in [0.5, 1.0, 2.0] {
            for phase in [0.0, PI / 4.0, PI / 2.0, 1.3 * PI] {
                let x: Vec<f64> = (0..t)
                    .map(|i| amp * (2.0 * PI * i as f64 / p as f64 + phase).sin() + 0.01 * i as f64)
                    .collect();
                let s = magnitude_spectrum(&difference(&x).unwrap()).unwrap();
                total += 1;
                if s.argmax() == Some(nearest_bin(&s, 1.0 / p as f64)) {
                    ok += 1;
                }
            }
        }
    }
    Outcome::check(ok == total, format!("{ok}/{total} cases"))
}

fn circular_embedding_peak() -> Outcome {
    let t = 480;
    let (mut total, mut ok) = (0, 0);
    for p in 3..=24 {
        let rows = Array2::from_shape_fn((t, 2), |(i, j)| {
            let a = 2.0 * PI * i as f64 / p as f64;
            if j == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        let e = EmbeddingSequence::new(rows).unwrap();
        let s = text_spectrum(&e, default_max_lag(t)).unwrap();
        total += 1;
        if s.argmax() == Some(nearest_bin(&s, 1.0 / p as f64)) {
            ok += 1;
        }
    }
    Outcome::check(ok == total, format!("{ok}/{total} periods"))
}

fn random_measure(rng: &mut ChaCha8Rng) -> NormalizedSpectrum {
    let k = rng.random_range(1..=8);
    let mut support: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    support.sort_by(f64::total_cmp);
    support.dedup();
    let weights = support.iter().map(|_| rng.random_range(0.01..1.0)).collect();
    NormalizedSpectrum::new(support, weights).unwrap()
}

fn transport() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p, q) = (random_measure(&mut rng), random_measure(&mut rng));
        let (lp, _) = lp_oracle(&p, &q).unwrap();
        worst = worst.max((wasserstein_1d(&p, &q) - lp).abs());
    }
    let mut axiom_failures = 0;
    for _ in 0..1000 {
        let (p, q, r) = (
            random_measure(&mut rng),
            random_measure(&mut rng),
            random_measure(&mut rng),
        );
        let pq = wasserstein_1d(&p, &q);
        let identity = wasserstein_1d(&p, &p) == 0.0;
        let symmetric = (pq - wasserstein_1d(&q, &p)).abs() <= 1e-12;
        let triangle = pq <= wasserstein_1d(&p, &r) + wasserstein_1d(&r, &q) + 1e-12;
        if !(identity && symmetric && triangle) {
            axiom_failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        worst < 1e-9 && axiom_failures == 0 && secs < 10.0,
        format!("max |w1 - lp| {worst:.2e} over 1000, {axiom_failures} axiom failures over 1000 triples, {secs:.2}s"),
    )
}

fn shuffle_direction() -> Outcome {
    let ds = make_synthetic_hidden_driver(480, 1).unwrap();
    let seeds: Vec<u64> = (1..=10).collect();
    let r = shuffle_ratio(&ds, &seeds, &TransportConfig::default()).unwrap();
    Outcome::check(
        r.ratio_percent < 80.0,
        format!(
            "original {:.4}, shuffled series {:.4}, shuffled text {:.4}, ratio {:.1}%",
            r.original, r.ts_shuffled_mean, r.text_shuffled_mean, r.ratio_percent
        ),
    )
}

fn published_arithmetic() -> Outcome {
    let r = shuffle_ratio_percent(0.026, 0.088, 0.106);
    Outcome::check((r - 26.8).abs() <= 0.1, format!("{r:.2}%"))
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Finite-difference comparison over every parameter.
#[derive(Default)]
struct FdReport {
    worst: f64,
    checked: usize,
    /// Parameters whose step straddles a ReLU kink: the one-sided slopes
    /// disagree, so no central difference is meaningful there.
    kinks: usize,
}

impl FdReport {
    fn merge(&mut self, other: FdReport) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

// Smooth parameters show one-sided slope gaps of ~|f''| h, a few 1e-6 here;
// a crossed kink shows the size of the slope jump, 1e-4 and up.
const KINK_GAP: f64 = 1e-4;

fn finite_differences<M: Parameterized>(model: &mut M, mut loss: impl FnMut(&M) -> f64) -> FdReport {
    let h = 1e-5;
    let analytic = model.flat_grads();
    let base = model.flat_params();
    let f0 = loss(model);
    let mut report = FdReport::default();
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        model.load_flat_params(&p).unwrap();
        let up = loss(model);
        p[i] = base[i] - h;
        model.load_flat_params(&p).unwrap();
        let down = loss(model);
        report.checked += 1;
        if ((up - f0) / h - (f0 - down) / h).abs() > KINK_GAP {
            report.kinks += 1;
            continue;
        }
        report.worst = report.worst.max(rel_error(analytic[i], (up - down) / (2.0 * h)));
    }
    model.load_flat_params(&base).unwrap();
    report
}

fn gaussian(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-2.0..2.0))
}

fn forecaster_case(backbone: &BackboneConfig, space: LossSpace, n: usize, dm: usize, seed: u64) -> FdReport {
    let (l, h, d) = (6, 2, 5);
    let cfg = TatsConfig {
        d_mapped: dm,
        dropout: 0.0,
        use_norm: true,
    };
    let mut af = AugmentedForecaster::new(backbone, l, h, n, d, &cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let data: Vec<WindowSample> = (0..3)
        .map(|start| WindowSample {
            start,
            input_series: gaussian((l, n), &mut rng),
            input_embeddings: gaussian((l, d), &mut rng),
            target: gaussian((h, n), &mut rng),
        })
        .collect();
    let refs: Vec<&WindowSample> = data.iter().collect();
    af.zero_grad();
    af.accumulate_gradients(&refs, space).unwrap();
    finite_differences(&mut af, |m| m.loss(&data, space).unwrap())
}

fn imputer_case(n: usize, dm: usize, seed: u64) -> FdReport {
    let (l, d) = (6, 5);
    let cfg = TatsConfig {
        d_mapped: dm,
        dropout: 0.0,
        use_norm: true,
    };
    let backbone = BackboneConfig::Mlp {
        hidden: 8,
        dropout: 0.0,
    };
    let mut ai = AugmentedImputer::new(&backbone, l, n, d, &cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
    let windows: Vec<ImputeWindow> = (0..3)
        .map(|start| {
            let mut mask = Array2::from_shape_simple_fn((l, n), || rng.random::<f64>() > 0.3);
            // at least one observed and one missing cell per variable
            for c in 0..n {
                mask[[0, c]] = true;
                mask[[l - 1, c]] = false;
            }
            ImputeWindow {
                start,
                values: gaussian((l, n), &mut rng),
                mask,
                embeddings: gaussian((l, d), &mut rng),
            }
        })
        .collect();
    let refs: Vec<&ImputeWindow> = windows.iter().collect();
    ai.zero_grad();
    ai.accumulate_gradients(&refs).unwrap();
    finite_differences(&mut ai, |m| m.loss(&windows).unwrap())
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let backbones = [
        BackboneConfig::Linear {
            mixing: ChannelMixing::Mixing,
        },
        BackboneConfig::Linear {
            mixing: ChannelMixing::Shared,
        },
        BackboneConfig::Dlinear {
            kernel: Some(3),
            mixing: ChannelMixing::Mixing,
        },
        BackboneConfig::Dlinear {
            kernel: Some(5),
            mixing: ChannelMixing::Shared,
        },
        BackboneConfig::Mlp {
            hidden: 8,
            dropout: 0.0,
        },
    ];
    let shapes = [(1, 1), (2, 2), (3, 1), (2, 0)];
    let mut fd = FdReport::default();
    let mut configs = 0u64;
    for b in &backbones {
        for space in [LossSpace::Normalized, LossSpace::Original] {
            for &(n, dm) in &shapes {
                fd.merge(forecaster_case(b, space, n, dm, configs));
                configs += 1;
            }
        }
    }
    for (i, &(n, dm)) in [(1, 1), (2, 2), (3, 1), (2, 3), (1, 0)]
        .iter()
        .cycle()
        .take(10)
        .enumerate()
    {
        fd.merge(imputer_case(n, dm, 100 + i as u64));
        configs += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let kink_share = fd.kinks as f64 / fd.checked as f64;
    Outcome::check(
        fd.worst < 1e-5 && kink_share < 0.01 && secs < 30.0,
        format!(
            "{configs} configurations, {} parameters, worst rel err {:.2e}, {} skipped at relu kinks, {secs:.2}s",
            fd.checked, fd.worst, fd.kinks
        ),
    )
}

fn training_config(backbone: BackboneConfig, pred_lens: Vec<usize>, seed: u64, modes: Vec<Mode>) -> ExperimentConfig {
    ExperimentConfig {
        backbone,
        pred_lens,
        seeds: vec![seed],
        modes,
        lr: LR,
        lr2: LR,
        epochs: EPOCHS,
        patience: PATIENCE,
        jobs: 1,
        ..ExperimentConfig::default()
    }
}

fn mean_mse(docs: &[ResultsDocument], mode: Mode, pred_len: usize) -> f64 {
    let v: Vec<f64> = docs
        .iter()
        .flat_map(|d| &d.cells)
        .filter(|c| c.mode == mode && c.pred_len == Some(pred_len))
        .map(|c| c.metrics.mse)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn efficacy_and_ablation() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for backbone in [BackboneConfig::linear(), BackboneConfig::dlinear()] {
        let docs: Vec<ResultsDocument> = SEEDS
            .iter()
            .map(|&seed| {
                let ds = make_synthetic_hidden_driver(T_TRAIN, seed).unwrap();
                let modes = vec![Mode::Tats, Mode::NumericalOnly, Mode::TextShuffle];
                run_experiment(&ds, &training_config(backbone.clone(), vec![6, 12], seed, modes)).unwrap()
            })
            .collect();
        for h in [6, 12] {
            let base = mean_mse(&docs, Mode::NumericalOnly, h);
            let ours = tats_core::promotion(base, mean_mse(&docs, Mode::Tats, h));
            let shuffled = tats_core::promotion(base, mean_mse(&docs, Mode::TextShuffle, h));
            ok &= ours >= 20.0 && shuffled <= 5.0;
            lines.push(format!(
                "{} H={h} promotion {ours:.1}% shuffled {shuffled:.1}%",
                backbone.name()
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(ok && secs < 300.0, format!("{}; {secs:.0}s", lines.join("; ")))
}

fn degeneracy() -> Outcome {
    let ds = make_synthetic_hidden_driver(T_TRAIN, 7).unwrap();
    let mut identical = true;
    for backbone in [
        BackboneConfig::linear(),
        BackboneConfig::dlinear(),
        BackboneConfig::mlp(),
    ] {
        let mut zero = training_config(backbone.clone(), vec![6], 7, vec![Mode::Tats]);
        zero.epochs = 3;
        zero.tats.d_mapped = 0;
        let mut numerical = zero.clone();
        numerical.tats.d_mapped = TatsConfig::default().d_mapped;
        numerical.modes = vec![Mode::NumericalOnly];
        let a = run_experiment(&ds, &zero).unwrap();
        let b = run_experiment(&ds, &numerical).unwrap();
        let (a, b) = (&a.cells[0], &b.cells[0]);
        identical &= a.metrics == b.metrics && a.train_loss == b.train_loss && a.val_loss == b.val_loss;
    }
    Outcome::check(
        identical,
        "linear, dlinear and mlp: metrics and loss curves bit-identical".into(),
    )
}

fn imputation() -> Outcome {
    let (mut ours, mut fill) = (0.0, 0.0);
    for seed in SEEDS {
        let ds = make_synthetic_hidden_driver(T_TRAIN, seed).unwrap();
        let cfg = ExperimentConfig {
            task: Task::Impute,
            epochs: 10,
            missing_ratio: 0.25,
            ..training_config(BackboneConfig::mlp(), vec![], seed, vec![Mode::Tats])
        };
        let doc = run_experiment(&ds, &cfg).unwrap();
        ours += doc.cells[0].metrics.mse;
        fill += doc.cells[0].mean_fill.as_ref().unwrap().mse;
    }
    let gain = tats_core::promotion(fill, ours);
    Outcome::check(
        gain >= 30.0,
        format!(
            "masked-cell mse {:.4} vs mean fill {:.4}, {gain:.1}% better",
            ours / 5.0,
            fill / 5.0
        ),
    )
}

fn overhead() -> Outcome {
    let ds = make_synthetic_hidden_driver(T_TRAIN, 1).unwrap();
    let default = ExperimentConfig {
        epochs: 0,
        ..ExperimentConfig::default()
    };
    let impute = ExperimentConfig {
        task: Task::Impute,
        modes: vec![Mode::Tats],
        ..default.clone()
    };
    let mut worst: f64 = 0.0;
    for cfg in [&default, &impute] {
        for c in run_experiment(&ds, cfg)
            .unwrap()
            .cells
            .iter()
            .filter(|c| c.mode == Mode::Tats)
        {
            worst = worst.max(c.params.overhead_percent);
        }
    }
    for backbone in [BackboneConfig::linear(), BackboneConfig::dlinear()] {
        let cfg = ExperimentConfig {
            backbone: backbone.clone(),
            modes: vec![Mode::Tats],
            ..default.clone()
        };
        let doc = run_experiment(&ds, &cfg).unwrap();
        let most = doc.cells.iter().map(|c| c.params.overhead_percent).fold(0.0, f64::max);
        println!(
            "info overhead for {} (not a default config): up to {most:.2}%",
            backbone.name()
        );
    }
    Outcome::check(
        worst <= 5.0,
        format!("default mlp forecast and impute configs, worst {worst:.2}%"),
    )
}

const TIME_MMD_ORDER: [&str; 6] = ["Economy", "Climate", "Agriculture", "SocialGood", "Traffic", "Security"];

fn time_mmd_ordering() -> Outcome {
    let Ok(dir) = std::env::var("TATS_TIMEMMD_DIR") else {
        return Outcome {
            verdict: Verdict::Skip,
            detail: "set TATS_TIMEMMD_DIR to a directory of <Name>.csv and <Name>.tsemb files".into(),
        };
    };
    let mut scores = Vec::new();
    for name in TIME_MMD_ORDER {
        let dir = Path::new(&dir);
        let loaded = load_csv(dir.join(format!("{name}.csv")), None).and_then(|csv| {
            let emb = read_embeddings_auto(dir.join(format!("{name}.tsemb")))?;
            let ds = MultimodalDataset::with_default_split(csv.series, emb)?;
            tt_wasserstein(&ds, &TransportConfig::default())
        });
        match loaded {
            Ok(w) => scores.push(w),
            Err(e) => return Outcome::check(false, format!("{name}: {e}")),
        }
    }
    let ordered = scores.windows(2).all(|w| w[0] < w[1]);
    let listing: Vec<String> = TIME_MMD_ORDER
        .iter()
        .zip(&scores)
        .map(|(n, s)| format!("{n} {s:.4}"))
        .collect();
    Outcome::check(ordered, listing.join(" < "))
}
