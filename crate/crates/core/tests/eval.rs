use advsr_core::autodiff::Tensor;
use advsr_core::data::{make_split, DataConfig, DatasetSplit, SplitKind};
use advsr_core::eval::*;
use advsr_core::loss::AttackSpec;
use advsr_core::models::*;
use advsr_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::stream(&[seed, 0xe7a1]);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn spec() -> AttackSpec {
    AttackSpec::new(0, 3, 8).unwrap()
}

// PSNR

#[test]
fn psnr_identical_is_cap() {
    let a = uniform(&[3, 8, 8], 1, 0.0, 1.0);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
}

#[test]
fn psnr_uniform_offset_is_20db() {
    let a = uniform(&[3, 8, 8], 2, 0.0, 0.9);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn psnr_matches_mse_oracle_and_is_symmetric() {
    for seed in 0..20 {
        let a = uniform(&[3, 9, 7], 10 + seed, 0.0, 1.0);
        let b = uniform(&[3, 9, 7], 40 + seed, 0.0, 1.0);
        let mut sq = 0.0;
        for i in 0..a.numel() {
            sq += (a.data()[i] - b.data()[i]).powi(2);
        }
        let want = 10.0 * (1.0 / (sq / a.numel() as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}

#[test]
fn psnr_clamps_inputs() {
    let a = Tensor::full(&[1, 4, 4], 1.5);
    let b = Tensor::full(&[1, 4, 4], 1.0);
    assert_eq!(psnr(&a, &b).unwrap(), PSNR_CAP_DB);
    let c = Tensor::full(&[1, 4, 4], -0.2);
    let d = Tensor::full(&[1, 4, 4], 0.1);
    assert!((psnr(&c, &d).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn psnr_cap_threshold_is_exact() {
    assert_eq!(psnr_from_mse(0.999 * PSNR_MSE_FLOOR), PSNR_CAP_DB);
    assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
    let above = psnr_from_mse(PSNR_MSE_FLOOR);
    assert!((above - 100.0).abs() < 1e-9);
    assert!(psnr_from_mse(4.0 * PSNR_MSE_FLOOR) < PSNR_CAP_DB);
}

#[test]
fn psnr_shape_mismatch_rejected() {
    assert!(psnr(&Tensor::zeros(&[3, 4, 4]), &Tensor::zeros(&[3, 4, 5])).is_err());
}

// SSIM

/// Direct 2-D window evaluation at every valid position.
fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let k = 11;
    let mut g = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            g[y * k + x] = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let gs: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= gs);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let at = |t: &Tensor, y: usize, x: usize| t.data()[(ch * h + y) * w + x];
        let mut acc = 0.0;
        let mut count = 0.0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        ma += g[y * k + x] * at(a, oy + y, ox + x);
                        mb += g[y * k + x] * at(b, oy + y, ox + x);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let da = at(a, oy + y, ox + x) - ma;
                        let db = at(b, oy + y, ox + x) - mb;
                        va += g[y * k + x] * da * da;
                        vb += g[y * k + x] * db * db;
                        cov += g[y * k + x] * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total += acc / count;
    }
    total / c as f64
}

#[test]
fn ssim_identical_is_one() {
    let a = uniform(&[3, 16, 16], 3, 0.0, 1.0);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_constant_images_closed_form() {
    let a = Tensor::zeros(&[3, 12, 12]);
    let b = Tensor::full(&[3, 12, 12], 1.0);
    let c1 = 0.01f64.powi(2);
    assert!((ssim(&a, &b).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
}

#[test]
fn ssim_matches_direct_window_oracle() {
    for seed in 0..4 {
        let a = uniform(&[2, 14, 13], 60 + seed, 0.0, 1.0);
        let b = a.map(|v| 0.7 * v + 0.1);
        let noise = uniform(&[2, 14, 13], 70 + seed, -0.2, 0.2);
        let b = Tensor::new(
            b.shape().to_vec(),
            b.data()
                .iter()
                .zip(noise.data())
                .map(|(x, n)| x + n)
                .collect(),
        )
        .unwrap();
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn ssim_rejects_small_images() {
    let a = Tensor::zeros(&[3, 10, 20]);
    assert!(ssim(&a, &a).is_err());
    assert!(ssim(&Tensor::zeros(&[3, 11, 11]), &Tensor::zeros(&[3, 12, 11])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_symmetric_and_bounded(seed in 0u64..100_000) {
        let a = uniform(&[3, 12, 12], seed, 0.0, 1.0);
        let b = uniform(&[3, 12, 12], seed + 1, 0.0, 1.0);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_symmetric(seed in 0u64..100_000) {
        let a = uniform(&[3, 6, 6], seed, -0.5, 1.5);
        let b = uniform(&[3, 6, 6], seed + 7, -0.5, 1.5);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}

// Perceptual distance

#[test]
fn pd_trivial_cases() {
    let f = FeatureExtractor::build(9);
    let a = uniform(&[3, 12, 12], 4, 0.0, 1.0);
    let b = uniform(&[3, 12, 12], 5, 0.0, 1.0);
    assert_eq!(perceptual_distance(&a, &a, &f).unwrap(), 0.0);
    assert_eq!(
        perceptual_distance(&a, &b, &f).unwrap(),
        perceptual_distance(&b, &a, &f).unwrap()
    );
    assert!(perceptual_distance(&a, &b, &f).unwrap() > 0.0);
    assert!(perceptual_distance(&a, &Tensor::zeros(&[3, 12, 10]), &f).is_err());
}

#[test]
fn pd_matches_per_tap_oracle() {
    let f = FeatureExtractor::build(9);
    let a = uniform(&[3, 10, 10], 6, 0.0, 1.0);
    let b = uniform(&[3, 10, 10], 7, 0.0, 1.0);
    let batch = |t: &Tensor| t.reshaped(&[1, 3, 10, 10]).unwrap();
    let fa = f.feature_maps(&batch(&a)).unwrap();
    let fb = f.feature_maps(&batch(&b)).unwrap();
    let per_tap: Vec<f64> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
                / x.numel() as f64
        })
        .collect();
    let want = per_tap.iter().sum::<f64>() / per_tap.len() as f64;
    assert_eq!(per_tap.len(), 2);
    assert!((perceptual_distance(&a, &b, &f).unwrap() - want).abs() < 1e-12);
}

#[test]
fn pd_batch_equals_single() {
    let f = FeatureExtractor::build(2);
    let a = uniform(&[3, 3, 8, 8], 8, 0.0, 1.0);
    let b = uniform(&[3, 3, 8, 8], 9, 0.0, 1.0);
    let batch = perceptual_distances(&a, &b, &f).unwrap();
    for (i, d) in batch.iter().enumerate() {
        let single = perceptual_distance(&a.select(i), &b.select(i), &f).unwrap();
        assert!((d - single).abs() < 1e-12);
    }
}

// Attack metrics and the confusion matrix

#[test]
fn attack_counting_example() {
    let s = spec();
    let mut preds = vec![3; 8];
    preds.extend([5, 0]);
    let mut truths = vec![0; 10];
    for i in 0..40 {
        let t = 1 + i % 7;
        truths.push(t);
        preds.push(if i < 38 { t } else { (t + 1) % 8 });
    }
    let a = attack_metrics(&preds, &truths, &s).unwrap();
    assert_eq!(
        (a.targeted_asr, a.untargeted_asr, a.nsa),
        (80.0, 90.0, 95.0)
    );
    assert_eq!((a.source_count, a.non_source_count), (10, 40));
    assert!(!a.targeted_equals_untargeted());
}

#[test]
fn all_correct_predictions() {
    let truths: Vec<usize> = (0..24).map(|i| i % 8).collect();
    let a = attack_metrics(&truths, &truths, &spec()).unwrap();
    assert_eq!((a.targeted_asr, a.untargeted_asr, a.nsa), (0.0, 0.0, 100.0));
    assert!(a.targeted_equals_untargeted());
}

#[test]
fn attack_metrics_argument_errors() {
    let s = spec();
    assert!(attack_metrics(&[1, 2], &[1, 2], &s).is_err());
    assert!(attack_metrics(&[0, 0], &[0, 0], &s).is_err());
    assert!(attack_metrics(&[0], &[0, 1], &s).is_err());
    assert!(ConfusionMatrix::new(&[9], &[0], 8).is_err());
}

/// Independent tally over explicit index sets.
fn tally(preds: &[usize], truths: &[usize], s: &AttackSpec) -> (f64, f64, f64) {
    let src: Vec<usize> = (0..truths.len())
        .filter(|&i| truths[i] == s.source)
        .collect();
    let rest: Vec<usize> = (0..truths.len())
        .filter(|&i| truths[i] != s.source)
        .collect();
    let t = src.iter().filter(|&&i| preds[i] == s.target).count();
    let u = src.iter().filter(|&&i| preds[i] != s.source).count();
    let ok = rest.iter().filter(|&&i| preds[i] == truths[i]).count();
    (
        t as f64 * 100.0 / src.len() as f64,
        u as f64 * 100.0 / src.len() as f64,
        ok as f64 * 100.0 / rest.len() as f64,
    )
}

#[test]
fn fuzzed_prediction_vectors() {
    let mut r = rng::stream(&[0xf022]);
    for round in 0..1000 {
        let classes = r.random_range(2..=10);
        let source = r.random_range(0..classes);
        let target = (source + r.random_range(1..classes)) % classes;
        let s = AttackSpec::new(source, target, classes).unwrap();
        let n = r.random_range(2..80);
        let mut truths: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        truths[0] = source;
        truths[1] = (source + 1) % classes;
        // Bias predictions towards the truth and the target so every regime
        // shows up.
        let preds: Vec<usize> = truths
            .iter()
            .map(|&t| match r.random_range(0..4) {
                0 => t,
                1 => target,
                _ => r.random_range(0..classes),
            })
            .collect();
        let a = attack_metrics(&preds, &truths, &s).unwrap();
        assert!(a.untargeted_asr >= a.targeted_asr, "round {round}");
        assert!(0.0 <= a.targeted_asr && a.untargeted_asr <= 100.0);
        let (t, u, nsa) = tally(&preds, &truths, &s);
        assert_eq!((a.targeted_asr, a.untargeted_asr, a.nsa), (t, u, nsa));
        let errors = (0..n)
            .filter(|&i| truths[i] != source && preds[i] != truths[i])
            .count();
        let err_rate = 100.0 * errors as f64 / a.non_source_count as f64;
        assert!((a.nsa + err_rate - 100.0).abs() < 1e-12);
        let cm = ConfusionMatrix::new(&preds, &truths, classes).unwrap();
        assert_eq!(cm.attack_stats(&s).unwrap(), a, "round {round}");
        let mut counts = vec![0; classes];
        truths.iter().for_each(|&t| counts[t] += 1);
        assert_eq!(cm.row_sums(), counts);
    }
}

#[test]
fn mean_std_uses_sample_divisor() {
    let m = MeanStd::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
    assert_eq!(m.mean, 5.0);
    assert!((m.std - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    assert_eq!(MeanStd::of(&[3.0]).unwrap().std, 0.0);
    assert!(MeanStd::of(&[]).is_err());
}

// Full evaluation

fn small_test_split() -> DatasetSplit {
    let cfg = DataConfig {
        test_per_class: 3,
        ..DataConfig::default()
    };
    make_split(&cfg, 21, SplitKind::Test).unwrap()
}

fn models() -> (SrModel, ClassifierModel, FeatureExtractor) {
    (
        SrModel::build(SrConfig::default(), 1).unwrap(),
        ClassifierModel::build(ClassifierConfig::default(), 2).unwrap(),
        FeatureExtractor::build(3),
    )
}

#[test]
fn identity_upscaler_is_perfect() {
    let test = small_test_split();
    let (_, cls, feat) = models();
    let ev = evaluate_with("oracle", |b| Ok(b.hr.clone()), &cls, &feat, &test, &spec()).unwrap();
    assert_eq!(ev.samples.len(), 24);
    for s in &ev.samples {
        assert_eq!(s.psnr, PSNR_CAP_DB);
        assert!((s.ssim - 1.0).abs() < 1e-12);
        assert_eq!(s.pd, 0.0);
    }
    let q = ev.report.quality;
    assert_eq!(
        (q.n, q.psnr.mean, q.psnr.std, q.pd.mean),
        (24, PSNR_CAP_DB, 0.0, 0.0)
    );
}

#[test]
fn report_is_consistent_and_deterministic() {
    let test = small_test_split();
    let (sr, cls, feat) = models();
    let ev = evaluate("clean", &sr, &cls, &feat, &test, &spec()).unwrap();
    assert_eq!(
        ev,
        evaluate("clean", &sr, &cls, &feat, &test, &spec()).unwrap()
    );
    let r = &ev.report;
    assert_eq!(r.confusion.row_sums(), test.class_counts());
    assert_eq!(r.confusion.attack_stats(&spec()).unwrap(), r.attack);
    assert_eq!(
        r.targeted_equals_untargeted,
        r.attack.targeted_asr == r.attack.untargeted_asr
    );
    assert!(r.attack.targeted_asr <= r.attack.untargeted_asr);
    assert_eq!((r.attack.source_count, r.attack.non_source_count), (3, 21));

    // The predictions are the classifier's on the clamped SR output.
    let b = test.batch(&[0, 1, 2, 3]).unwrap();
    let want = cls.predict(&sr.infer(&b.lr).unwrap().clamp01()).unwrap();
    let got: Vec<usize> = ev.samples[..4].iter().map(|s| s.pred).collect();
    assert_eq!(got, want);
}

#[test]
fn aggregate_matches_itemized_csv() {
    let test = small_test_split();
    let (sr, cls, feat) = models();
    let ev = evaluate("clean", &sr, &cls, &feat, &test, &spec()).unwrap();
    let csv = samples_to_csv(&ev.samples);
    assert!(csv.starts_with("index,class,pred,psnr,ssim,pd\n"));
    let parsed = samples_from_csv(&csv).unwrap();
    assert_eq!(parsed, ev.samples);
    assert_eq!(
        EvalReport::aggregate("clean", &parsed, &spec()).unwrap(),
        ev.report
    );

    // Recompute the headline numbers by hand from the rows.
    let n = parsed.len() as f64;
    let mean_psnr = parsed.iter().map(|s| s.psnr).sum::<f64>() / n;
    assert!((mean_psnr - ev.report.quality.psnr.mean).abs() < 1e-12);
    assert!(samples_from_csv("index,class\n").is_err());
    assert!(samples_from_csv("index,class,pred,psnr,ssim,pd\n1,2,x,0,0,0\n").is_err());
}

#[test]
fn json_round_trip_and_markdown_agree() {
    let test = small_test_split();
    let (sr, cls, feat) = models();
    let clean = evaluate("Clean", &sr, &cls, &feat, &test, &spec())
        .unwrap()
        .report;
    let ident = evaluate_with("Oracle", |b| Ok(b.hr.clone()), &cls, &feat, &test, &spec())
        .unwrap()
        .report;
    let json = clean.to_json().unwrap();
    assert_eq!(EvalReport::from_json(&json).unwrap(), clean);
    assert!(EvalReport::from_json(&json.replace("\"model\"", "\"extra\": 1, \"model\"")).is_err());

    let md = markdown_table(&[&clean, &ident]);
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], MARKDOWN_HEADER);
    for (line, r) in lines[2..].iter().zip([&clean, &ident]) {
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        assert_eq!(cells[0], r.model);
        let q = &r.quality;
        let a = &r.attack;
        let want = [
            q.psnr.mean,
            q.psnr.std,
            q.ssim.mean,
            q.ssim.std,
            q.pd.mean,
            q.pd.std,
            a.targeted_asr,
            a.untargeted_asr,
            a.nsa,
        ];
        for (cell, w) in cells[1..10].iter().zip(want) {
            let v: f64 = cell.parse().unwrap();
            assert!((v - w).abs() <= 5e-3, "{cell} vs {w}");
        }
        assert_eq!(cells[10] == "yes", r.targeted_equals_untargeted);
    }
}

#[test]
fn class_count_mismatch_rejected() {
    let test = small_test_split();
    let (sr, _, feat) = models();
    let cls4 = ClassifierModel::build(
        ClassifierConfig {
            classes: 4,
            ..ClassifierConfig::default()
        },
        1,
    )
    .unwrap();
    let err = evaluate("x", &sr, &cls4, &feat, &test, &spec()).unwrap_err();
    assert!(err.to_string().contains("class count"));
}
