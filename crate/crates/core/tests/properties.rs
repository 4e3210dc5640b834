use dst_core::eval::{match_events, max_matching, Prediction};
use dst_core::io::{decode_tensor, encode_tensor};
use dst_core::nn::Tensor;
use dst_core::noise::{LogitCube, CUBE_CLASSES};
use dst_core::pipeline::{merge_duplicates, MERGE_RADIUS};
use dst_core::repr::{
    build_target_sequence, decode_targets, decoder_width, encoder_width, game_state_vector, roster,
    PAD_VALUE, STATE_FEATURES,
};
use dst_core::sim::{
    simulate_match, Category, EventRecord, RoleId, SimConfig, N_CATEGORIES, N_SLOTS,
};
use proptest::prelude::*;
use proptest::sample::subsequence;

/// Largest matching by trying every assignment of each prediction.
fn brute_force(preds: &[usize], gts: &[usize], delta: usize, used: &mut Vec<bool>) -> usize {
    let Some((&p, rest)) = preds.split_first() else {
        return 0;
    };
    let mut best = brute_force(rest, gts, delta, used);
    for g in 0..gts.len() {
        if !used[g] && p.abs_diff(gts[g]) <= delta {
            used[g] = true;
            best = best.max(1 + brute_force(rest, gts, delta, used));
            used[g] = false;
        }
    }
    best
}

fn event() -> impl Strategy<Value = EventRecord> {
    (0usize..400, 0..N_CATEGORIES, 0..N_SLOTS).prop_map(|(frame, c, s)| EventRecord {
        frame,
        category: Category::from_index(c).unwrap(),
        actor: RoleId::from_slot(s).unwrap(),
    })
}

fn prediction() -> impl Strategy<Value = Prediction> {
    (0usize..200, 0..3usize, 0..3usize, 0.0f32..1.0).prop_map(|(frame, c, slot, confidence)| {
        Prediction {
            category: Category::from_index(c).unwrap(),
            slot,
            frame,
            confidence,
        }
    })
}

fn as_predictions(events: &[EventRecord]) -> Vec<Prediction> {
    events
        .iter()
        .map(|e| Prediction {
            category: e.category,
            slot: e.actor.slot(),
            frame: e.frame,
            confidence: 1.0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matching_equals_brute_force(
        preds in prop::collection::vec(0usize..60, 0..=6),
        gts in prop::collection::vec(0usize..60, 0..=6),
        delta in 0usize..20,
    ) {
        let mut used = vec![false; gts.len()];
        prop_assert_eq!(max_matching(&preds, &gts, delta), brute_force(&preds, &gts, delta, &mut used));
    }

    #[test]
    fn matching_grows_with_delta(
        preds in prop::collection::vec(prediction(), 0..30),
        truth in prop::collection::vec(event(), 0..30),
        delta in 0usize..30,
    ) {
        let a = match_events(&preds, &truth, delta).overall();
        let b = match_events(&preds, &truth, delta + 1).overall();
        prop_assert!(b.tp >= a.tp);
        prop_assert_eq!(a.tp + a.fp, preds.len());
        prop_assert_eq!(a.tp + a.fn_, truth.len());
    }

    #[test]
    fn truth_scored_against_itself_is_perfect(truth in prop::collection::vec(event(), 1..40), delta in 0usize..25) {
        let o = match_events(&as_predictions(&truth), &truth, delta).overall();
        prop_assert_eq!(o.precision(), 1.0);
        prop_assert_eq!(o.recall(), 1.0);
    }

    #[test]
    fn merged_output_has_no_near_duplicates(preds in prop::collection::vec(prediction(), 0..60)) {
        let merged = merge_duplicates(preds.clone());
        for (i, a) in merged.iter().enumerate() {
            prop_assert!(preds.contains(a));
            for b in &merged[i + 1..] {
                let same = a.category == b.category && a.slot == b.slot;
                prop_assert!(!same || a.frame.abs_diff(b.frame) > MERGE_RADIUS, "{a:?} {b:?}");
            }
        }
        // Anything dropped lost to a kept prediction at least as confident.
        for p in &preds {
            prop_assert!(merged.iter().any(|k| k.category == p.category
                && k.slot == p.slot
                && k.frame.abs_diff(p.frame) <= MERGE_RADIUS
                && k.confidence >= p.confidence));
        }
        prop_assert!(merged.windows(2).all(|w| w[0].frame <= w[1].frame));
    }

    #[test]
    fn bumps_superpose(
        a in (0..N_SLOTS, 0..CUBE_CLASSES, -10i64..60, -8.0f32..8.0, 1usize..12),
        b in (0..N_SLOTS, 0..CUBE_CLASSES, -10i64..60, -8.0f32..8.0, 1usize..12),
    ) {
        let n = 50;
        let base = LogitCube::baseline(n);
        let mut both = base.clone();
        both.bump(a.0, a.1, a.2, a.3, a.4);
        both.bump(b.0, b.1, b.2, b.3, b.4);
        let mut only_a = base.clone();
        only_a.bump(a.0, a.1, a.2, a.3, a.4);
        let mut only_b = base.clone();
        only_b.bump(b.0, b.1, b.2, b.3, b.4);
        for i in 0..base.values().len() {
            let sum = (only_a.values()[i] - base.values()[i]) + (only_b.values()[i] - base.values()[i]);
            let got = both.values()[i] - base.values()[i];
            prop_assert!((got - sum).abs() <= 1e-5, "index {i}: {got} vs {sum}");
        }
    }

    #[test]
    fn token_widths(context in 1usize..2000) {
        prop_assert_eq!(encoder_width(context), 26 * 9 + 26 * 5 + context + 2);
        prop_assert_eq!(decoder_width(context), 10 + 26 + context + 2);
    }

    #[test]
    fn targets_round_trip(mut events in prop::collection::vec(event(), 0..20), start in 0usize..100) {
        let context = 400;
        for e in &mut events {
            e.frame += start;
        }
        events.sort_by_key(|e| (e.frame, e.actor.slot()));
        events.dedup_by_key(|e| (e.frame, e.actor.slot()));
        let tokens = build_target_sequence(&events, start, context).unwrap();
        prop_assert_eq!(tokens.len(), events.len() + 2);
        prop_assert_eq!(tokens[0].frame, 0);
        prop_assert_eq!(tokens.last().unwrap().frame, context + 1);
        prop_assert_eq!(decode_targets(&tokens, start, context), events);
    }

    #[test]
    fn tensor_file_round_trip(
        dims in prop::collection::vec(1usize..6, 0..4),
        seed in any::<u64>(),
        name in "[a-z.]{0,12}",
    ) {
        let mut state = seed | 1;
        let t = Tensor::from_fn(dims.clone(), |_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            f32::from_bits(state as u32 & 0xbfff_ffff)
        });
        let (back_name, back) = decode_tensor(&encode_tensor(&name, &t)).unwrap();
        prop_assert_eq!(back_name, name);
        prop_assert_eq!(back.shape(), t.shape());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn roster_order_does_not_matter(
        seed in 0u64..1000,
        order in Just((0..N_SLOTS).collect::<Vec<_>>()).prop_shuffle(),
        keep in subsequence((0..N_SLOTS).collect::<Vec<_>>(), 0..=N_SLOTS),
    ) {
        let gt = simulate_match(&SimConfig::with_frames(1000), seed).unwrap();
        let base = roster(&gt);
        let shuffled: Vec<_> = order.iter().map(|&i| base[i]).collect();
        let partial: Vec<_> = keep.iter().map(|&i| base[i]).collect();
        for f in [0, 17, 59] {
            let a = game_state_vector(&base, f);
            let b = game_state_vector(&shuffled, f);
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            // Slots left out of the roster read as padding.
            let c = game_state_vector(&partial, f);
            for s in (0..N_SLOTS).filter(|s| !keep.contains(s)) {
                prop_assert!(c[s * STATE_FEATURES..(s + 1) * STATE_FEATURES].iter().all(|&v| v == PAD_VALUE));
            }
        }
    }
}
