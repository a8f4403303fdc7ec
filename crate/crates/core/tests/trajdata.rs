use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ptdt_core::envs::{enumerate_tasks, generate_dataset, Family, Quality, QualityMix, TaskSpec};
use ptdt_core::trajdata::*;
use ptdt_core::Error;

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![
        Just(Family::PointDir2d),
        Just(Family::PointVel1d),
        Just(Family::PointReach2d)
    ]
}

/// Episode with arbitrary finite contents for `family`.
fn arbitrary_episode(family: Family, len: usize) -> impl Strategy<Value = Episode> {
    let (d_s, d_a) = (family.state_dim(), family.action_dim());
    (
        prop::collection::vec(prop::collection::vec(-1e6f32..1e6, d_s), len),
        prop::collection::vec(prop::collection::vec(-1f32..1.0, d_a), len),
        prop::collection::vec(-5f32..5.0, len),
        any::<u64>(),
    )
        .prop_map(move |(states, actions, rewards, seed)| {
            let task = TaskSpec {
                horizon: len,
                ..enumerate_tasks(family, 4)[1].clone()
            };
            Episode::new(&task, Quality::Medium, seed, states, actions, rewards).unwrap()
        })
}

proptest! {
    #[test]
    fn rtg_is_a_suffix_sum(rewards in prop::collection::vec(-4f32..4.0, 1..200)) {
        let rtg = compute_rtg(&rewards);
        let n = rewards.len();
        prop_assert_eq!(rtg[n - 1], rewards[n - 1]);
        for t in 0..n - 1 {
            prop_assert_eq!(rtg[t], rewards[t] + rtg[t + 1]);
        }
    }

    #[test]
    fn flatten_is_a_bijection(
        fam in family(),
        k_star in prop::sample::select(vec![2usize, 5, 10]),
        start in 0usize..40,
        seed in any::<u64>(),
    ) {
        let task = &enumerate_tasks(fam, 5)[3];
        let data = generate_dataset(task, QualityMix::Gradient, 3, seed, 0.3).unwrap();
        let p = PromptSegment::from_episode(&data.episodes[2], 2, start, k_star);
        let flat = flatten_prompt(&p);
        prop_assert_eq!(flat.x.len(), (1 + fam.state_dim() + fam.action_dim()) * k_star);
        prop_assert_eq!(flat.layout.d_x(), flat.x.len());
        prop_assert_eq!(unflatten_prompt(&flat).unwrap(), p);
    }

    #[test]
    fn unflatten_then_flatten_keeps_f32_vectors(
        fam in family(),
        k_star in prop::sample::select(vec![2usize, 5, 10]),
        seed in any::<u64>(),
    ) {
        let task = &enumerate_tasks(fam, 5)[0];
        let data = generate_dataset(task, QualityMix::Gradient, 3, 1, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_prompt(&data, task.task_index, k_star, None, &mut rng).unwrap();
        let mut flat = flatten_prompt(&p);
        // Any vector of f32-representable values survives a round trip.
        for (i, v) in flat.x.iter_mut().enumerate() {
            *v = (((seed >> (i % 60)) & 0xFFFF) as f32 / 97.0 - 300.0) as f64;
        }
        let back = flatten_prompt(&unflatten_prompt(&flat).unwrap());
        prop_assert_eq!(back.x, flat.x);
    }

    #[test]
    fn jsonl_round_trip_is_bitwise(eps in prop::collection::vec(family().prop_flat_map(|f| arbitrary_episode(f, 7)), 1..5)) {
        let set = EpisodeSet::new(eps);
        let text = set.to_jsonl();
        let back = EpisodeSet::parse("mem.jsonl".as_ref(), &text).unwrap();
        prop_assert_eq!(back.to_jsonl(), text);
        for (a, b) in set.episodes.iter().zip(&back.episodes) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.states), bits(&b.states));
            prop_assert_eq!(bits(&a.actions), bits(&b.actions));
            prop_assert_eq!(bits(&a.rewards), bits(&b.rewards));
            prop_assert_eq!(bits(&a.rtg), bits(&b.rtg));
        }
    }

    #[test]
    fn sequences_have_three_tokens_per_step(
        k_star in 0usize..6,
        k in 1usize..25,
        end in 1usize..100,
    ) {
        let task = &enumerate_tasks(Family::PointVel1d, 3)[1];
        let data = generate_dataset(task, QualityMix::Only(Quality::Expert), 1, 4, 0.3).unwrap();
        let ep = &data.episodes[0];
        let prompt = if k_star == 0 {
            PromptSegment::empty(2, 1)
        } else {
            PromptSegment::from_episode(ep, 0, 0, k_star)
        };
        let batch = window_batch(&data, &[Window { episode: 0, start: end.saturating_sub(k), end }], &[&prompt], k, false).unwrap();
        prop_assert_eq!(batch.tokens_per_sequence(), 3 * (k_star + k));
        prop_assert_eq!(batch.real_tokens(0), 3 * (k_star + end.min(k)));
    }
}

#[test]
fn windows_are_distinct_and_bounded() {
    let task = &enumerate_tasks(Family::PointReach2d, 3)[0];
    let data = generate_dataset(task, QualityMix::Gradient, 6, 3, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ws = sample_windows(&data, 200, 10, &mut rng).unwrap();
    let set: std::collections::HashSet<_> = ws.iter().collect();
    assert_eq!(set.len(), 200);
    assert!(ws.iter().all(|w| w.end >= 1 && w.end - w.start <= 10 && w.end <= 50));
    assert_eq!(all_windows(&data, 10).len(), 6 * 50);
    assert!(matches!(sample_windows(&data, 301, 10, &mut rng), Err(Error::Data(_))));
}

#[test]
fn quality_slices_follow_the_gradient() {
    let task = &enumerate_tasks(Family::PointDir2d, 2)[0];
    let data = generate_dataset(task, QualityMix::Gradient, 30, 3, 0.12).unwrap();
    for q in Quality::ALL {
        let part = data.of_quality(q);
        assert_eq!(part.len(), 10);
        assert!(part.episodes.iter().all(|e| e.quality == q));
    }
    assert_eq!(data.of_quality(Quality::Random).episodes, data.slice(0, 10).episodes);
    assert_eq!(data.of_quality(Quality::Expert).episodes, data.slice(20, 10).episodes);
}

#[test]
fn malformed_dataset_names_the_line() {
    let task = &enumerate_tasks(Family::PointVel1d, 2)[0];
    let data = generate_dataset(task, QualityMix::Gradient, 3, 3, 0.3).unwrap();
    let mut text = data.to_jsonl();
    text.push_str("{\"format_version\": 1, \"oops\": true}\n");
    match EpisodeSet::parse("bad.jsonl".as_ref(), &text) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let bumped = data.to_jsonl().replacen("\"format_version\":1", "\"format_version\":99", 1);
    assert!(matches!(
        EpisodeSet::parse("old.jsonl".as_ref(), &bumped),
        Err(Error::Version { found: 99, .. })
    ));
}

#[test]
fn dataset_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let task = &enumerate_tasks(Family::PointReach2d, 4)[2];
    let mut data = generate_dataset(task, QualityMix::Gradient, 9, 11, 0.15).unwrap();
    data.config_hash = Some("abc123".into());
    data.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = EpisodeSet::load(&path).unwrap();
    assert_eq!(back, data);
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}
