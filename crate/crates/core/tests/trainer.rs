use fusion_vad::data::{generate_synthetic, make_chunks, ChunkMode, Split, SynthSpec, Utterance};
use fusion_vad::exec::Exec;
use fusion_vad::model::{build_model, write_model, FusionConfig, FusionMode};
use fusion_vad::tensor::AdamConfig;
use fusion_vad::trainer::{compute_auc, evaluate_auc, train_step, train_with, EarlyStopping, TrainConfig, TrainLog};
use fusion_vad::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(seed: u64) -> (Vec<Utterance>, Vec<Utterance>) {
    let spec = SynthSpec { seed, n_files: 5, file_s: 20.0, ..Default::default() };
    let utts: Vec<Utterance> = generate_synthetic(&spec).unwrap().into_iter().map(|f| f.utterance).collect();
    let pick = |s| utts.iter().filter(|u| u.split == s).cloned().collect::<Vec<_>>();
    (pick(Split::Train), pick(Split::Dev))
}

fn tiny(mode: FusionMode) -> FusionConfig {
    FusionConfig { d_model: 8, lstm_hidden: 8, lstm_layers: 1, ..FusionConfig::new(mode, 13, 32) }
}

fn strip_clock(log: &TrainLog) -> TrainLog {
    let mut l = log.clone();
    l.epochs.iter_mut().for_each(|e| e.wall_clock_s = 0.0);
    l
}

#[test]
fn training_is_deterministic_across_runs_and_exec_modes() {
    let (tr, dv) = dataset(1);
    let cfg = tiny(FusionMode::Concat);
    let run = |exec| {
        let tc = TrainConfig { epochs: 3, batch_size: 8, seed: 9, exec, ..Default::default() };
        let out = train_with(&cfg, build_model(&cfg, 9).unwrap(), &tr, &dv, &tc, |_| {}).unwrap();
        let mut bytes = Vec::new();
        write_model(&mut bytes, &out.params, &cfg).unwrap();
        (strip_clock(&out.log), bytes)
    };
    let a = run(Exec::Parallel);
    assert_eq!(a, run(Exec::Parallel));
    assert_eq!(a, run(Exec::Sequential));
}

#[test]
fn best_checkpoint_reproduces_logged_auc() {
    let (tr, dv) = dataset(2);
    let cfg = tiny(FusionMode::Add);
    let tc = TrainConfig { epochs: 6, batch_size: 8, patience: 2, seed: 4, ..Default::default() };
    let mut seen = Vec::new();
    let out = train_with(&cfg, build_model(&cfg, 4).unwrap(), &tr, &dv, &tc, |r| seen.push(r.val_auc)).unwrap();
    let log = &out.log;
    assert_eq!(seen.len(), log.epochs.len());
    assert!(log.stopped_epoch <= log.best_epoch + tc.patience);
    let max = seen.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(log.best_val_auc, max);
    assert_eq!(seen.iter().position(|&a| a == max).unwrap() + 1, log.best_epoch);
    let again = evaluate_auc(&out.params, &cfg, &dv, tc.chunk_s, Exec::default()).unwrap();
    assert!((again - log.best_val_auc).abs() < 1e-9);
}

#[test]
fn empty_split_is_rejected() {
    let (tr, _) = dataset(3);
    let cfg = tiny(FusionMode::Add);
    let r = train_with(&cfg, build_model(&cfg, 0).unwrap(), &tr, &[], &TrainConfig::default(), |_| {});
    assert!(matches!(r, Err(Error::InvalidInput(_))));
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let mut decreasing = 0;
    for seed in 0..3 {
        let (tr, _) = dataset(10 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<_> = make_chunks(&tr[0], 2.0, ChunkMode::Train(&mut rng)).unwrap().into_iter().take(8).collect();
        let cfg = FusionConfig { d_model: 16, lstm_hidden: 16, ..FusionConfig::new(FusionMode::Add, 13, 32) };
        let mut params = build_model(&cfg, seed).unwrap();
        let losses: Vec<f64> = (0..6)
            .map(|_| train_step(&mut params, &cfg, &batch, &AdamConfig::default(), Exec::default()).unwrap())
            .collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 2, "loss fell monotonically for only {decreasing} of 3 seeds");
}

#[test]
fn monotone_auc_runs_every_epoch() {
    let mut s = EarlyStopping::new(5);
    for e in 1..=50 {
        s.observe(e, 0.5 + e as f64 / 200.0);
        assert!(!s.should_stop());
    }
    assert_eq!(s.best().unwrap().0, 50);
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

proptest! {
    #[test]
    fn auc_matches_pair_count_and_ignores_monotone_maps(
        data in prop::collection::vec((0u8..20, any::<bool>()), 2..80)
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
        let labels: Vec<u8> = data.iter().map(|d| d.1 as u8).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let auc = compute_auc(&scores, &labels).unwrap();
        prop_assert!((auc - brute_force_auc(&scores, &labels)).abs() < 1e-12);
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(compute_auc(&warped, &labels).unwrap(), auc);
    }
}
