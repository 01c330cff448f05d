use proptest::prelude::*;
use vqdiff_core::diffusion::NoiseSchedule;
use vqdiff_core::eval::{extract_features, overlapping_area, Gaussian};
use vqdiff_core::music::{NoteEvent, Pianoroll};
use vqdiff_core::vqvae::Codebook;

fn schedule() -> impl Strategy<Value = NoiseSchedule> {
    (1usize..60, 2usize..40, 0.05f64..0.9, 0.001f64..0.5).prop_filter_map("sum below 1", |(t, k, g, a)| {
        (a + g < 0.999).then(|| NoiseSchedule::linear(t, k, g, a).unwrap())
    })
}

fn gaussian() -> impl Strategy<Value = Gaussian> {
    (-20.0f64..20.0, 0.05f64..8.0).prop_map(|(mean, std)| Gaussian { mean, std })
}

proptest! {
    #[test]
    fn per_step_and_cumulative_mass_is_one(s in schedule()) {
        let k = s.classes() as f64;
        for t in 1..=s.steps() {
            prop_assert!((s.alpha(t) + k * s.beta(t) + s.gamma(t) - 1.0).abs() < 1e-12);
            prop_assert!((s.alpha_bar(t) + k * s.beta_bar(t) + s.gamma_bar(t) - 1.0).abs() < 1e-10);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.gamma_bar(t) > s.gamma_bar(t - 1));
        }
    }

    #[test]
    fn posterior_is_a_distribution(s in schedule(), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>(), c in any::<prop::sample::Index>()) {
        let k = s.classes();
        let t = 1 + c.index(s.steps());
        let x0 = a.index(k);
        let xt = b.index(k + 1);
        let q = s.q_posterior(xt, x0, t).unwrap();
        prop_assert_eq!(q.len(), k + 1);
        prop_assert!(q.iter().all(|&v| v >= 0.0));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        if xt < k {
            // Nothing leaves MASK.
            prop_assert_eq!(q[k], 0.0);
        }
    }

    #[test]
    fn overlap_is_bounded_and_symmetric(o in gaussian(), g in gaussian()) {
        let ab = overlapping_area(&o, &g);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, overlapping_area(&g, &o));
        prop_assert!((overlapping_area(&o, &o) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_shrinks_as_means_separate(o in gaussian(), gap in 0.0f64..5.0, more in 0.01f64..5.0) {
        let near = Gaussian { mean: o.mean + gap, ..o };
        let far = Gaussian { mean: o.mean + gap + more, ..o };
        prop_assert!(overlapping_area(&o, &far) <= overlapping_area(&o, &near));
    }

    #[test]
    fn features_ignore_note_order(
        notes in proptest::collection::vec((0u8..128, 0.0f64..10.0, 0.01f64..2.0), 1..40),
        seed in any::<u64>(),
    ) {
        let events: Vec<NoteEvent> = notes.iter().map(|&(p, o, d)| NoteEvent::new(p, o, d, 80).unwrap()).collect();
        let mut shuffled = events.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        let a = extract_features(&events, 12.0).unwrap().values();
        let b = extract_features(&shuffled, 12.0).unwrap().values();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn quantizing_a_code_returns_it(entries in proptest::collection::vec(-3.0f64..3.0, 8..64), pick in any::<prop::sample::Index>()) {
        let dim = 4;
        let entries = &entries[..entries.len() / dim * dim];
        prop_assume!(entries.len() / dim >= 2);
        let book = Codebook::new(entries, dim).unwrap();
        let (k, _) = book.quantize(book.entry(pick.index(book.size())));
        let (again, row) = book.quantize(book.entry(k));
        prop_assert_eq!(again, k);
        prop_assert_eq!(row, book.entry(k));
    }

    #[test]
    fn windows_drop_only_the_short_tail(frames in 1usize..300, len in 1usize..64, cells in proptest::collection::vec((0usize..128, 0usize..300), 0..50)) {
        let mut roll = Pianoroll::new(frames, 32.0).unwrap();
        for (p, f) in cells {
            roll.set(p, f % frames, true);
        }
        let windows = roll.windows(len).unwrap();
        prop_assert_eq!(windows.len(), frames / len);
        for (i, w) in windows.iter().enumerate() {
            for p in 0..128 {
                for f in 0..len {
                    prop_assert_eq!(w.get(p, f), roll.get(p, i * len + f));
                }
            }
        }
    }
}
