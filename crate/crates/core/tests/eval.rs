mod common;

use common::{grid_oracle, random_timeline_pair};
use fusion_vad::data::Timeline;
use fusion_vad::eval::{binarize, score, score_file, BinarizeConfig};
use fusion_vad::model::FrameScores;
use proptest::prelude::*;

#[test]
fn interval_algebra_matches_millisecond_grid() {
    for k in 0..100 {
        let (r, h, dur) = random_timeline_pair(1000 + k);
        let rep = score(&r, &h, dur).unwrap();
        assert!((rep.der - (rep.far + rep.mr)).abs() < 1e-9);
        let (speech, fa, miss) = grid_oracle(&r, &h, dur);
        let far = 100.0 * fa / speech;
        let mr = 100.0 * miss / speech;
        assert!((rep.far - far).abs() < 0.05, "pair {k}: FAR {} vs grid {far}", rep.far);
        assert!((rep.mr - mr).abs() < 0.05, "pair {k}: MR {} vs grid {mr}", rep.mr);
        assert!((rep.der - (far + mr)).abs() < 0.05, "pair {k}");
        assert!(rep.fa_s <= rep.total_nonspeech_s + 1e-9 && rep.miss_s <= rep.total_speech_s + 1e-9);
    }
}

#[test]
fn miss_plus_hit_is_reference() {
    for k in 0..50 {
        let (r, h, dur) = random_timeline_pair(5000 + k);
        let f = score_file("f", &r, &h, dur);
        let hit = r.intersection(&h).duration();
        assert!((f.miss_s + hit - f.speech_s).abs() < 1e-9);
    }
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..0.999, 1..200)
}

proptest! {
    #[test]
    fn equal_thresholds_reduce_to_simple_thresholding(p in scores_strategy(), th in 0.05f64..0.95) {
        let bc = BinarizeConfig { onset: th, offset: th, ..Default::default() };
        let tl = binarize(&FrameScores { p: p.clone(), hop_ms: 20.0 }, &bc);
        for (t, &v) in p.iter().enumerate() {
            prop_assert_eq!(tl.contains((t as f64 + 0.5) * 0.02), v >= th);
        }
    }

    #[test]
    fn raising_onset_never_adds_false_alarms(p in scores_strategy(), a in 0.05f64..0.95, b in 0.05f64..0.95,
                                              reference in prop::collection::vec(any::<bool>(), 200)) {
        let (lo, hi) = (a.min(b), a.max(b));
        let fs = FrameScores { p: p.clone(), hop_ms: 20.0 };
        let r = Timeline::new(reference.iter().enumerate().filter(|x| *x.1)
            .map(|(t, _)| (t as f64 * 0.02, (t + 1) as f64 * 0.02))).unwrap();
        let dur = p.len() as f64 * 0.02;
        let fa = |th: f64| {
            let bc = BinarizeConfig { onset: th, offset: th, ..Default::default() };
            score_file("f", &r, &binarize(&fs, &bc), dur).fa_s
        };
        prop_assert!(fa(hi) <= fa(lo) + 1e-12);
    }
}
