//! Metric oracles: matching against brute force, perfect and empty
//! estimates, collar edges, PSDS invariances and decoding properties.

use ast_sed::eval::{
    decode_events, eb_f1, median_filter, psds, runs, threshold_sweep, DecodeConfig, MatchConfig, PsdsConfig,
};
use ast_sed::events::{Event, EventTable};
use ast_sed::tensor::{NdArray, Real};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn classes() -> Vec<String> {
    vec!["A".into(), "B".into()]
}

/// Largest one-to-one matching by trying every injective assignment.
fn brute_force_tp(r: &[&Event], e: &[&Event], mc: &MatchConfig) -> usize {
    fn go(i: usize, r: &[&Event], e: &[&Event], used: &mut Vec<bool>, mc: &MatchConfig) -> usize {
        if i == r.len() {
            return 0;
        }
        let mut best = go(i + 1, r, e, used, mc);
        for j in 0..e.len() {
            if !used[j] && mc.matches(r[i], e[j]) {
                used[j] = true;
                best = best.max(1 + go(i + 1, r, e, used, mc));
                used[j] = false;
            }
        }
        best
    }
    go(0, r, e, &mut vec![false; e.len()], mc)
}

fn random_event(rng: &mut ChaCha8Rng, classes: &[String]) -> Event {
    // Coarse grid so near-collar coincidences are common.
    let onset = rng.random_range(0..16) as Real * 0.1;
    let dur = rng.random_range(1..8) as Real * 0.1;
    Event::new(classes[rng.random_range(0..classes.len())].clone(), onset, (onset + dur).min(2.0))
}

#[test]
fn matching_equals_brute_force_on_random_instances() {
    let cl = classes();
    let mc = MatchConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for instance in 0..300 {
        let nr = rng.random_range(0..=6);
        let ne = rng.random_range(0..=6);
        let r: Vec<Event> = (0..nr).map(|_| random_event(&mut rng, &cl)).collect();
        let e: Vec<Event> = (0..ne).map(|_| random_event(&mut rng, &cl)).collect();
        let mut expected = 0;
        for c in &cl {
            let rc: Vec<&Event> = r.iter().filter(|x| &x.label == c).collect();
            let ec: Vec<&Event> = e.iter().filter(|x| &x.label == c).collect();
            expected += brute_force_tp(&rc, &ec, &mc);
        }
        let refs: EventTable = [("x.wav".to_string(), r.clone())].into();
        let ests: EventTable = [("x.wav".to_string(), e.clone())].into();
        let rep = eb_f1(&refs, &ests, &cl, &mc);
        assert_eq!(rep.counts.tp, expected, "instance {instance}: refs {r:?} ests {e:?}");
        assert_eq!(rep.counts.fp, ne - expected);
        assert_eq!(rep.counts.fn_, nr - expected);
    }
}

fn two_file_refs() -> EventTable {
    let mut t = EventTable::new();
    t.insert("a.wav".into(), vec![Event::new("A", 0.1, 0.4), Event::new("B", 0.5, 1.8)]);
    t.insert("b.wav".into(), vec![Event::new("A", 1.0, 1.2)]);
    t
}

#[test]
fn perfect_predictions_score_one() {
    let refs = two_file_refs();
    let cl = classes();
    let rep = eb_f1(&refs, &refs, &cl, &MatchConfig::default());
    assert_eq!(rep.f1, 1.0);
    let pc = PsdsConfig::default();
    let sweep = vec![refs.clone(); pc.thresholds.len()];
    let score = psds(&sweep, &refs, &cl, 4.0, &pc).unwrap().score;
    assert!((score - 1.0).abs() <= 1e-9, "{score}");
}

#[test]
fn empty_predictions_score_zero() {
    let refs = two_file_refs();
    let cl = classes();
    let empty = EventTable::new();
    assert_eq!(eb_f1(&refs, &empty, &cl, &MatchConfig::default()).f1, 0.0);
    let pc = PsdsConfig::default();
    let sweep = vec![empty; pc.thresholds.len()];
    assert_eq!(psds(&sweep, &refs, &cl, 4.0, &pc).unwrap().score, 0.0);
}

#[test]
fn onset_collar_is_inclusive() {
    let mc = MatchConfig::default();
    let r = Event::new("A", 1.0, 2.0);
    assert!(mc.matches(&r, &Event::new("A", 1.2, 2.0)));
    assert!(!mc.matches(&r, &Event::new("A", 1.21, 2.0)));
    assert!(!mc.matches(&r, &Event::new("B", 1.0, 2.0)));
    // Long reference: the offset collar grows to a fifth of its length.
    let long = Event::new("A", 0.0, 1.5);
    assert!(mc.matches(&long, &Event::new("A", 0.0, 1.8)));
    assert!(!mc.matches(&long, &Event::new("A", 0.0, 1.85)));
}

#[test]
fn psds_unchanged_when_the_corpus_is_duplicated() {
    let refs = two_file_refs();
    let cl = classes();
    let pc = PsdsConfig { thresholds: threshold_sweep(3), ..PsdsConfig::default() };
    let mut ests = refs.clone();
    ests.insert("b.wav".into(), vec![Event::new("A", 1.0, 1.2), Event::new("B", 0.0, 0.3)]);
    let sweep = vec![ests.clone(), refs.clone(), EventTable::new()];
    let once = psds(&sweep, &refs, &cl, 600.0, &pc).unwrap().score;

    let dup = |t: &EventTable| -> EventTable { t.iter().flat_map(|(k, v)| [(k.clone(), v.clone()), (format!("dup_{k}"), v.clone())]).collect() };
    let sweep2: Vec<EventTable> = sweep.iter().map(dup).collect();
    let twice = psds(&sweep2, &dup(&refs), &cl, 1200.0, &pc).unwrap().score;
    assert!(once > 0.0);
    assert!((once - twice).abs() < 1e-12, "{once} vs {twice}");
}

#[test]
fn decoding_a_block_gives_its_span() {
    let mut data = vec![0.0; 20 * 2];
    for t in 5..12 {
        data[t * 2] = 0.9;
    }
    let probs = NdArray::new(vec![20, 2], data).unwrap();
    let ev = decode_events(&probs, &classes(), 0.1, &DecodeConfig { median_window: 3, ..DecodeConfig::default() }).unwrap();
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].label, "A");
    assert!((ev[0].onset - 0.5).abs() < 1e-12 && (ev[0].offset - 1.2).abs() < 1e-12);
}

proptest! {
    #[test]
    fn window_one_is_identity(x in prop::collection::vec(any::<bool>(), 1..40)) {
        prop_assert_eq!(median_filter(&x, 1), x);
    }

    #[test]
    fn median_filter_is_monotone(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40), half in 0usize..4) {
        let lo: Vec<bool> = pairs.iter().map(|(a, b)| *a && *b).collect();
        let hi: Vec<bool> = pairs.iter().map(|(a, b)| *a || *b).collect();
        let (fl, fh) = (median_filter(&lo, 2 * half + 1), median_filter(&hi, 2 * half + 1));
        prop_assert!(fl.iter().zip(&fh).all(|(a, b)| !a || *b));
    }

    #[test]
    fn runs_cover_exactly_the_true_entries(x in prop::collection::vec(any::<bool>(), 0..40)) {
        let mut rebuilt = vec![false; x.len()];
        for (s, e) in runs(&x) {
            for v in &mut rebuilt[s..=e] {
                *v = true;
            }
        }
        prop_assert_eq!(rebuilt, x);
    }

    #[test]
    fn higher_threshold_never_adds_coverage(p in prop::collection::vec(0.0f64..1.0, 30), t1 in 0.05f64..0.5, dt in 0.0f64..0.45) {
        let probs = NdArray::new(vec![30, 1], p).unwrap();
        let cls = vec!["A".to_string()];
        let cover = |th: f64| -> Vec<bool> {
            let ev = decode_events(&probs, &cls, 1.0, &DecodeConfig { threshold: th, median_window: 5, class_windows: None }).unwrap();
            (0..30).map(|t| ev.iter().any(|e| e.onset <= t as f64 && (t as f64) < e.offset)).collect()
        };
        let (lo, hi) = (cover(t1), cover(t1 + dt));
        prop_assert!(hi.iter().zip(&lo).all(|(h, l)| !h || *l));
    }
}
