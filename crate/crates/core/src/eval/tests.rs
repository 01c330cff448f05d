use super::*;
use crate::music::{from_pianoroll, Corpus, Pianoroll};
use crate::numerics::Tensor;
use crate::synth::{motif_corpus, SynthConfig};
use alloc::vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn note(pitch: u8, onset: f64, duration: f64) -> NoteEvent {
    NoteEvent::new(pitch, onset, duration, 64).unwrap()
}

fn gauss(mean: f64, std: f64) -> Gaussian {
    Gaussian { mean, std }
}

/// Composite Simpson rule for `integral min(pdf_a, pdf_b)` over a window
/// covering both densities to 14 standard deviations.
fn overlap_by_quadrature(a: &Gaussian, b: &Gaussian) -> f64 {
    let lo = (a.mean - 14.0 * a.std).min(b.mean - 14.0 * b.std);
    let hi = (a.mean + 14.0 * a.std).max(b.mean + 14.0 * b.std);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| a.pdf(x).min(b.pdf(x));
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn single_note_features() {
    let f = extract_features(&[note(60, 2.0, 1.0)], 10.0).unwrap();
    assert_eq!(f.values(), [0.1, 0.0, 60.0, 0.0, 1.0, 0.0]);
    assert!(!f.empty);
}

#[test]
fn two_note_features_and_empty_piece() {
    let f = extract_features(&[note(72, 0.0, 0.5), note(60, 1.0, 1.5)], 4.0).unwrap();
    assert_eq!((f.pr, f.mp, f.vp), (12.0, 66.0, 6.0));
    assert_eq!((f.md, f.vd), (1.0, 0.5));
    let e = extract_features(&[], 3.0).unwrap();
    assert!(e.empty);
    assert_eq!(e.values(), [0.0; 6]);
    assert!(extract_features(&[], 0.0).is_err());
}

#[test]
fn features_ignore_note_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let mut events: Vec<NoteEvent> = (0..rng.random_range(1..30))
            .map(|_| note(rng.random_range(0..128), rng.random_range(0.0..8.0), rng.random_range(0.05..2.0)))
            .collect();
        let a = extract_features(&events, 10.0).unwrap();
        events.shuffle(&mut rng);
        let b = extract_features(&events, 10.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.values().iter().all(|&v| v >= 0.0) && a.md > 0.0);
    }
}

#[test]
fn gaussian_fit_examples() {
    assert_eq!(fit_gaussian(&[1.0, 2.0, 3.0]).unwrap(), gauss(2.0, 1.0));
    assert_eq!(fit_gaussian(&[4.0; 5]).unwrap().std, STD_FLOOR);
    assert_eq!(fit_gaussian(&[1.0]), Err(Error::TooFewSamples { need: 2, got: 1 }));

    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let dist = Normal::new(5.0, 2.0).unwrap();
    let n = 20_000;
    let xs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    let g = fit_gaussian(&xs).unwrap();
    let se_mean = 2.0 / (n as f64).sqrt();
    let se_std = 2.0 / (2.0 * (n as f64 - 1.0)).sqrt();
    assert!((g.mean - 5.0).abs() < 3.0 * se_mean, "{g:?}");
    assert!((g.std - 2.0).abs() < 3.0 * se_std, "{g:?}");
}

#[test]
fn intersection_examples() {
    assert_eq!(intersection_point(&gauss(0.0, 1.0), &gauss(2.0, 1.0)), Intersection::Between(1.0));
    let Intersection::Between(c) = intersection_point(&gauss(0.0, 1.0), &gauss(3.0, 2.0)) else {
        panic!("expected a crossing between the means");
    };
    // root of 3x^2 + 6x - 9 - 8 ln 2 between 0 and 3
    let oracle = (-6.0 + (36.0 + 12.0 * (9.0 + 8.0 * core::f64::consts::LN_2)).sqrt()) / 6.0;
    assert!((c - oracle).abs() < 1e-12);
    assert!((c - 1.4184).abs() < 1e-4);
    assert!((gauss(0.0, 1.0).pdf(c) - gauss(3.0, 2.0).pdf(c)).abs() < 1e-12);

    match intersection_point(&gauss(1.0, 1.0), &gauss(1.0, 2.0)) {
        Intersection::Symmetric { lower, upper } => assert!((lower + upper - 2.0).abs() < 1e-12),
        other => panic!("{other:?}"),
    }
    assert_eq!(intersection_point(&gauss(1.0, 2.0), &gauss(1.0, 2.0)), Intersection::Identical);
}

#[test]
fn overlap_examples() {
    let a = gauss(0.0, 1.0);
    assert_eq!(overlapping_area(&a, &a), 1.0);
    let oa = overlapping_area(&a, &gauss(2.0, 1.0));
    // 2 (1 - Phi(1)) = erfc(1 / sqrt 2)
    assert!((oa - libm::erfc(1.0 / core::f64::consts::SQRT_2)).abs() < 1e-12);
    assert!((oa - 0.31731).abs() < 1e-4);
    assert!(overlapping_area(&a, &gauss(100.0, 1.0)) < 1e-6);
    let wide = gauss(0.0, 3.0);
    assert!((overlapping_area(&a, &wide) - overlap_by_quadrature(&a, &wide)).abs() < 1e-6);
}

#[test]
fn overlap_matches_quadrature_and_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..100 {
        let a = gauss(rng.random_range(-5.0..5.0), rng.random_range(0.2..4.0));
        let b = gauss(rng.random_range(-5.0..5.0), rng.random_range(0.2..4.0));
        let oa = overlapping_area(&a, &b);
        assert!((0.0..=1.0).contains(&oa));
        assert_eq!(oa, overlapping_area(&b, &a));
        assert!((oa - overlap_by_quadrature(&a, &b)).abs() < 1e-6, "{a:?} {b:?}");
    }
}

#[test]
fn overlap_shrinks_as_means_separate() {
    let a = gauss(0.0, 1.5);
    let mut prev = 1.0;
    for i in 1..40 {
        let oa = overlapping_area(&a, &gauss(0.25 * i as f64, 1.5));
        assert!(oa < prev);
        prev = oa;
    }
}

#[test]
fn overlap_report_skips_empty_pieces() {
    let f = |nd: f64| FeatureVector {
        nd,
        pr: nd,
        mp: 60.0 + nd,
        vp: 1.0,
        md: 0.5,
        vd: nd,
        empty: false,
    };
    let reference = vec![f(1.0), f(2.0), f(3.0), FeatureVector { empty: true, ..Default::default() }];
    let report = overlap_report(&reference, &reference[..3]).unwrap();
    assert!(report.overlap.iter().all(|&v| v == 1.0));
    assert_eq!(report.average(), 1.0);
    assert!(overlap_report(&reference[..1], &reference).is_err());
}

#[test]
fn tally_examples() {
    let all = tally_predictions(&[(0, 0), (1, 1), (2, 2)], 3).unwrap();
    assert_eq!(all.overall, 1.0);
    let r = tally_predictions(&[(0, 0), (0, 1), (1, 1)], 3).unwrap();
    assert_eq!(r.confusion, vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 0]]);
    assert_eq!(r.per_class, vec![Some(0.5), Some(1.0), None]);
    assert!(tally_predictions(&[], 3).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let n = 3000;
    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i % 3, rng.random_range(0..3))).collect();
    let acc = tally_predictions(&pairs, 3).unwrap().overall;
    let sigma = (2.0 / 9.0 / n as f64).sqrt();
    assert!((acc - 1.0 / 3.0).abs() < 3.0 * sigma, "{acc}");
}

fn toy_corpus(seed: u64, per_label: usize) -> Corpus {
    let cfg = SynthConfig {
        segments_per_label: per_label,
        ..SynthConfig::default()
    };
    motif_corpus(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn untrained_classifier_is_near_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let model = StyleClassifier::new(ClassifierConfig::new(3), &mut rng).unwrap();
    let corpus = toy_corpus(1, 10);
    let rolls: Vec<&Pianoroll> = corpus.items().iter().map(|(r, _)| r).collect();
    let probs = model.classify_batch(&rolls).unwrap();
    let mut mean = [0.0; 3];
    for p in &probs {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / probs.len() as f64;
        }
    }
    assert!(mean.iter().all(|m| (m - 1.0 / 3.0).abs() < 0.05), "{mean:?}");
}

#[test]
fn classifier_separates_registers_and_is_chance_on_shuffled_labels() {
    let corpus = toy_corpus(2, 30);
    let (held_out, train_set) = corpus.split_every(3);
    let train = ClassifierTrainConfig {
        steps: 120,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (model, history) = train_classifier(&train_set, ClassifierConfig::new(3), &train, &mut rng).unwrap();
    assert!(history.last().unwrap() < &history[0]);
    assert!(model.accuracy(held_out.items()).unwrap() >= 0.95);
    let report = style_accuracy(held_out.items(), &model).unwrap();
    assert!(report.overall >= 0.95);
    let p = model.classify(&held_out.items()[0].0).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let mut labels: Vec<usize> = train_set.items().iter().map(|(_, l)| *l).collect();
    labels.shuffle(&mut rng);
    let mut shuffled = Corpus::new(train_set.label_names().to_vec());
    for ((roll, _), l) in train_set.items().iter().zip(labels) {
        shuffled.push(roll.clone(), l).unwrap();
    }
    let (noise, _) = train_classifier(&shuffled, ClassifierConfig::new(3), &train, &mut rng).unwrap();
    let acc = noise.accuracy(held_out.items()).unwrap();
    assert!(acc < 0.6, "shuffled-label accuracy {acc}");
}

#[test]
fn classifier_rejects_single_class_and_round_trips_state() {
    let corpus = toy_corpus(3, 4);
    let mut one = Corpus::new(corpus.label_names().to_vec());
    for (roll, l) in corpus.items() {
        if *l == 1 {
            one.push(roll.clone(), 1).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let train = ClassifierTrainConfig { steps: 3, ..Default::default() };
    assert!(train_classifier(&one, ClassifierConfig::new(3), &train, &mut rng).is_err());

    let (model, _) = train_classifier(&corpus, ClassifierConfig::new(3), &train, &mut rng).unwrap();
    let mut fresh = StyleClassifier::new(ClassifierConfig::new(3), &mut rng).unwrap();
    fresh.load_named(model.named_tensors()).unwrap();
    assert_eq!(fresh, model);
    let mut short = model.named_tensors();
    short.pop();
    assert!(fresh.load_named(short).is_err());
}

#[test]
fn classifier_loss_passes_gradient_check() {
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::{Bound, Graph};
    let cfg = ClassifierConfig {
        channels: 4,
        ..ClassifierConfig::new(3)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let model = StyleClassifier::new(cfg, &mut rng).unwrap();
    let corpus = toy_corpus(4, 2);
    let rolls: Vec<&Pianoroll> = corpus.items().iter().map(|(r, _)| r).collect();
    let labels: Vec<usize> = corpus.items().iter().map(|(_, l)| *l).collect();
    let x = model.input_tensor(&rolls).unwrap();
    let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let check = check_gradients(
        |g: &mut Graph, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let xv = g.constant(x.clone());
            let (logits, _) = model.forward_graph(g, &bound, xv, true)?;
            g.cross_entropy(logits, &labels)
        },
        &inputs,
        1e-5,
        60,
        &mut rng,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-4, "{check:?}");
}

#[test]
fn generated_rolls_yield_features() {
    let corpus = toy_corpus(5, 2);
    let (roll, _) = &corpus.items()[0];
    let f = extract_features(&from_pianoroll(roll), roll.duration()).unwrap();
    assert!(!f.empty && f.nd > 0.0 && f.md > 0.0);
}
