//! Cross-module integration checks that need training, evaluation, or wall
//! clocks: generator separability, scaling of the step cost in the expert
//! count, evaluation sanity on random banks, and the full-width op gradient
//! suite.

use come_core::config::{Method, TrainConfig};
use come_core::data::longtail::{make_long_tailed, split_balanced, zipf_sizes, LongTailSpec};
use come_core::data::motif::{generate_motif_corpus, MotifSpec};
use come_core::data::{DatasetStats, Graph};
use come_core::expert::{ExpertBank, NetDims};
use come_core::losses::ClassPrior;
use come_core::metrics::evaluate;
use come_core::optim::Adam;
use come_core::tensor::gradcheck::run_op_suite;
use come_core::train::{evaluate_bank, train, train_step, Splits, StepContext};
use std::time::Instant;

#[test]
fn full_width_op_gradient_suite() {
    for report in run_op_suite(123, 100) {
        assert!(
            report.passed(),
            "{}: max rel err {:.3e} over {} checks",
            report.op,
            report.max_err,
            report.checks
        );
    }
}

#[test]
fn motif_classes_separable_without_noise() {
    // A plain two-layer encoder must solve the noise-free generator nearly
    // perfectly; averaged over three corpus draws.
    let cfg = TrainConfig {
        method: Method::CeBaseline,
        epochs: 1500,
        patience: 250,
        learning_rate: 3e-3,
        hidden: 16,
        z_dim: 16,
        ..TrainConfig::default()
    };
    let mut accs = Vec::new();
    for seed in 50u64..53 {
        let corpus = generate_motif_corpus(&MotifSpec::new(3, 60, 0.0, seed)).unwrap();
        let (val, test, train_split) = split_balanced(&corpus, 10, 10, seed).unwrap();
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let out = train(
            &run_cfg,
            Splits {
                train: &train_split,
                val: &val,
            },
        )
        .unwrap();
        let m = evaluate_bank(&out.bank, &test, &out.train_counts, run_cfg.eval_batch).unwrap();
        accs.push(m.overall);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(mean >= 0.95, "noise-free accuracy {mean:.4} from {accs:?}");
}

#[test]
fn shipped_preset_tail_sizes_stay_small() {
    // The default generator preset leaves 60 per class for training; the
    // power-law profile at the default imbalance factor must land the
    // smallest class in the 2..=4 range.
    let sizes = zipf_sizes(60, 5, 20.0);
    let tail = *sizes.last().unwrap();
    assert!((2..=4).contains(&tail), "tail size {tail} from {sizes:?}");
}

#[test]
fn random_bank_scores_near_chance_on_balanced_test() {
    // An untrained bank is label-blind: accuracy on a balanced test sits
    // near 1/M. The band is a generous multiple of the binomial deviation.
    let corpus = generate_motif_corpus(&MotifSpec::new(5, 30, 0.1, 3)).unwrap();
    let stats = DatasetStats::from_graphs(&corpus).unwrap();
    let mut accs = Vec::new();
    for seed in 0u64..3 {
        let dims = NetDims {
            input: corpus[0].attr_dim,
            hidden: 16,
            z: 16,
            classes: 5,
            layers: 2,
        };
        let bank = ExpertBank::init(3, dims, seed);
        let m = evaluate(&bank, &corpus, &stats.counts_by_class, 64).unwrap();
        accs.push(m.overall);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    // n = 150 per draw, p = 0.2: sigma ≈ 0.033; allow ~3.5 sigma on the
    // 3-draw mean.
    assert!(
        (mean - 0.2).abs() < 0.12,
        "random-bank accuracy {mean:.4} from {accs:?}"
    );
}

#[test]
fn step_time_grows_linearly_in_expert_count() {
    // Empirical complexity contract: per-step wall time against K fits a
    // line. The K values are measured in interleaved rounds and reduced to
    // medians so contention from concurrently running tests hits every K
    // about equally; a couple of retries absorb the remaining noise.
    let corpus = generate_motif_corpus(&MotifSpec::new(4, 16, 0.1, 11)).unwrap();
    let labels: Vec<usize> = corpus.iter().map(|g| g.label).collect();
    let stats = DatasetStats::from_graphs(&corpus).unwrap();
    let prior = ClassPrior::from_counts(stats.counts_by_class.clone()).unwrap();
    let refs: Vec<&Graph> = corpus.iter().collect();
    let ids: Vec<u64> = (0..corpus.len() as u64).collect();
    let cfg_for = |k: usize| TrainConfig {
        experts: k,
        hidden: 32,
        z_dim: 32,
        ..TrainConfig::default()
    };

    let measure = || -> (f64, f64, Vec<f64>) {
        let mut samples: Vec<Vec<f64>> = vec![Vec::new(); 4];
        let mut states: Vec<_> = (1usize..=4)
            .map(|k| {
                let cfg = cfg_for(k);
                let dims = NetDims {
                    input: corpus[0].attr_dim,
                    hidden: cfg.hidden,
                    z: cfg.z_dim,
                    classes: stats.class_count,
                    layers: cfg.layers,
                };
                let bank = ExpertBank::init(k, dims, 1);
                let sizes: Vec<usize> = bank.params().iter().map(|p| p.values.len()).collect();
                let adam = Adam::new(cfg.learning_rate, &sizes);
                (cfg, dims, bank, adam)
            })
            .collect();
        for round in 0..10 {
            for (i, (cfg, dims, bank, adam)) in states.iter_mut().enumerate() {
                let prior = prior.clone();
                let ctx = StepContext::new(cfg, &prior, *dims);
                let t0 = Instant::now();
                train_step(bank, adam, &refs, &labels, &ids, &ctx, round + 1).unwrap();
                if round > 0 {
                    samples[i].push(t0.elapsed().as_secs_f64());
                }
            }
        }
        let medians: Vec<f64> = samples
            .iter()
            .map(|times| {
                let mut t = times.clone();
                t.sort_by(|a, b| a.partial_cmp(b).unwrap());
                t[t.len() / 2]
            })
            .collect();

        // Least-squares fit of t = a + b·K and its R².
        let ks: Vec<f64> = (1..=4).map(|k| k as f64).collect();
        let n = ks.len() as f64;
        let (km, tm) = (ks.iter().sum::<f64>() / n, medians.iter().sum::<f64>() / n);
        let cov: f64 = ks
            .iter()
            .zip(&medians)
            .map(|(&k, &t)| (k - km) * (t - tm))
            .sum();
        let var_k: f64 = ks.iter().map(|&k| (k - km) * (k - km)).sum();
        let slope = cov / var_k;
        let intercept = tm - slope * km;
        let ss_res: f64 = ks
            .iter()
            .zip(&medians)
            .map(|(&k, &t)| {
                let r = t - (intercept + slope * k);
                r * r
            })
            .sum();
        let ss_tot: f64 = medians.iter().map(|&t| (t - tm) * (t - tm)).sum();
        (slope, 1.0 - ss_res / ss_tot, medians)
    };

    let mut last = (0.0, 0.0, Vec::new());
    for _ in 0..3 {
        last = measure();
        if last.0 > 0.0 && last.1 > 0.95 {
            return;
        }
    }
    panic!(
        "step time not linear in K: slope {:.3e}, R² = {:.4}, medians {:?}",
        last.0, last.1, last.2
    );
}

#[test]
fn oversample_and_supcon_baselines_train() {
    let corpus = generate_motif_corpus(&MotifSpec::new(3, 20, 0.1, 8)).unwrap();
    let (val, test, rest) = split_balanced(&corpus, 3, 3, 8).unwrap();
    let (train_split, _) = make_long_tailed(&rest, &LongTailSpec::new(5.0, 8)).unwrap();
    for method in [Method::OversampleBaseline, Method::SupconBaseline] {
        let cfg = TrainConfig {
            method,
            epochs: 4,
            hidden: 8,
            z_dim: 8,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let out = train(
            &cfg,
            Splits {
                train: &train_split,
                val: &val,
            },
        )
        .unwrap();
        let m = evaluate_bank(&out.bank, &test, &out.train_counts, cfg.eval_batch).unwrap();
        assert!(m.overall >= 0.0 && m.overall <= 1.0);
        if method == Method::SupconBaseline {
            assert!(
                out.history
                    .iter()
                    .any(|r| r.losses.fused_contrastive != 0.0),
                "supervised contrastive baseline must exercise the contrastive term"
            );
        }
    }
}
