use proptest::prelude::*;

use emg_allconv::data::{make_splits, AdaptationBudget, DatasetManifest, Scenario, TrialEntry};
use emg_allconv::experiment::{confusion_matrix, majority_vote, EarlyStopping, StopDecision};
use emg_allconv::model::{AllConvNet, ArchitectureSpec, Checkpoint, CheckpointMeta};
use emg_allconv::nn::RngStream;
use emg_allconv::signal::{filter_trial, frame_to_image, mains_filter, mirror, RawTrial, TrialMeta, CHANNELS};

fn meta() -> TrialMeta {
    TrialMeta { subject: 1, session: 1, gesture: 0, trial: 1 }
}

/// Plain modal-class reference: counts over the window, lowest class wins ties.
fn naive_vote(p: &[usize], n: usize) -> Vec<usize> {
    (n - 1..p.len())
        .map(|t| {
            let w = &p[t + 1 - n..=t];
            let top = *w.iter().max().unwrap();
            let counts: Vec<usize> = (0..=top).map(|c| w.iter().filter(|&&x| x == c).count()).collect();
            let best = *counts.iter().max().unwrap();
            counts.iter().position(|&c| c == best).unwrap()
        })
        .collect()
}

fn manifest(subjects: u16, sessions: u8, gestures: usize, trials: u8) -> DatasetManifest {
    let mut entries = Vec::new();
    for subject in 1..=subjects {
        for session in 1..=sessions {
            for gesture in 0..gestures as u16 {
                for trial in 1..=trials {
                    entries.push(TrialEntry { path: String::new(), meta: TrialMeta { subject, session, gesture, trial } });
                }
            }
        }
    }
    DatasetManifest::new(
        "p",
        gestures,
        (1..=subjects).collect(),
        (1..=sessions).collect(),
        trials,
        1000,
        entries,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vote_of_one_is_identity(p in prop::collection::vec(0usize..8, 1..200)) {
        prop_assert_eq!(majority_vote(&p, 1).unwrap(), p);
    }

    #[test]
    fn vote_matches_reference(p in prop::collection::vec(0usize..5, 1..120), n in 1usize..40) {
        match majority_vote(&p, n) {
            Some(v) => prop_assert_eq!(v, naive_vote(&p, n)),
            None => prop_assert!(n > p.len()),
        }
    }

    #[test]
    fn constant_stream_votes_constant(c in 0usize..8, len in 1usize..100, n in 1usize..100) {
        let p = vec![c; len];
        if let Some(v) = majority_vote(&p, n) {
            prop_assert!(v.iter().all(|&x| x == c));
            prop_assert_eq!(v.len(), len + 1 - n);
        }
    }

    #[test]
    fn confusion_counts_every_frame(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..300)) {
        let (labels, predicted): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let m = confusion_matrix(&labels, &predicted, 6);
        let total: usize = m.iter().flatten().sum();
        prop_assert_eq!(total, labels.len());
        let trace: usize = (0..6).map(|i| m[i][i]).sum();
        let hits = labels.iter().zip(&predicted).filter(|(a, b)| a == b).count();
        prop_assert_eq!(trace, hits);
    }

    /// Whatever the loss curve, the epoch reported as best is the minimum
    /// seen before stopping and nothing after it improved on it.
    #[test]
    fn early_stopping_keeps_the_best(losses in prop::collection::vec(0.0f64..10.0, 1..60), patience in 1usize..8) {
        let mut stop = EarlyStopping::new(patience);
        let mut best: Option<(usize, f64)> = None;
        let mut seen = Vec::new();
        for (i, &l) in losses.iter().enumerate() {
            let epoch = i + 1;
            seen.push(l);
            match stop.observe(epoch, l) {
                StopDecision::Improved => best = Some((epoch, l)),
                StopDecision::Continue => {}
                StopDecision::Stop => break,
            }
        }
        let (e, l) = best.expect("first epoch always improves");
        let min = seen.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(l, min);
        prop_assert!(seen.len() - e <= patience);
    }

    #[test]
    fn images_in_range_and_mirrored(frame in prop::collection::vec(-4.0f32..4.0, CHANNELS)) {
        let half = frame_to_image(&frame).unwrap();
        let img = mirror(&half).unwrap();
        prop_assert!(img.is_well_formed());
        for r in 0..16 {
            for c in 0..8 {
                let v = img.at(r, c);
                prop_assert!((0.0..=255.0).contains(&v));
                prop_assert_eq!(v, img.at(r, 15 - c));
            }
        }
    }

    #[test]
    fn filtering_is_per_channel(seed in any::<u64>(), shift in 1usize..CHANNELS) {
        let frames = 300;
        let mut rng = RngStream::new("perm", seed);
        let samples: Vec<f32> = (0..frames * CHANNELS).map(|_| rng.normal() as f32).collect();
        let trial = RawTrial::new(meta(), 1000, samples.clone()).unwrap();
        let mut rolled = samples.clone();
        for t in 0..frames {
            for c in 0..CHANNELS {
                rolled[t * CHANNELS + (c + shift) % CHANNELS] = samples[t * CHANNELS + c];
            }
        }
        let rolled = RawTrial::new(meta(), 1000, rolled).unwrap();
        let f = mains_filter(1000.0).unwrap();
        let a = filter_trial(&trial, &f).unwrap();
        let b = filter_trial(&rolled, &f).unwrap();
        for c in 0..CHANNELS {
            prop_assert_eq!(a.trial().channel(c), b.trial().channel((c + shift) % CHANNELS));
        }
    }

    #[test]
    fn rng_streams_replay(seed in any::<u64>(), name in "[a-z]{1,8}") {
        let mut a = RngStream::new(name.clone(), seed);
        let mut b = RngStream::new(name, seed);
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover_tests(trials in 3u8..=10, gestures in 2usize..5, subjects in 2u16..4) {
        for scenario in [Scenario::IntraSession, Scenario::InterSession, Scenario::InterSubject] {
            let m = manifest(subjects, 2, gestures, trials);
            let plan = match make_splits(&m, scenario, AdaptationBudget::T1) {
                Ok(p) => p,
                // Budgets need at least one odd trial and one even trial.
                Err(_) => { prop_assert!(scenario != Scenario::IntraSession); continue; }
            };
            let mut tested = std::collections::BTreeSet::new();
            for f in &plan.folds {
                let roles = [&f.pretrain, &f.validation, &f.adaptation, &f.test];
                for i in 0..4 {
                    for j in i + 1..4 {
                        prop_assert!(roles[i].iter().all(|t| !roles[j].contains(t)));
                    }
                }
                for t in &f.test {
                    prop_assert!(tested.insert(*t), "{:?} tested twice", t);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoints_round_trip_bit_exact(seed in any::<u64>(), gestures in 2usize..10, slim in any::<bool>()) {
        let arch = if slim { ArchitectureSpec::slim(gestures) } else { ArchitectureSpec::full(gestures) }.unwrap();
        let net = AllConvNet::<f32>::new(arch, &mut RngStream::new("ckpt", seed)).unwrap();
        let ckpt = net.to_checkpoint(CheckpointMeta { seed, epoch: 3, tag: "p".into() });
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes(), bytes);
        let again = AllConvNet::<f32>::from_checkpoint(&back).unwrap();
        prop_assert_eq!(again.params(), net.params());
    }
}
