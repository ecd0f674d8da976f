use diffclone_core::dataset::*;
use diffclone_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn dims() -> Dims {
    Dims {
        obs_dim: 2,
        joint_dim: 1,
        action_dim: 3,
    }
}

fn traj(id: &str, len: usize, reward: f64, seed: u64) -> Trajectory {
    let mut r = diffclone_core::rng::from_seed(seed);
    let steps = (0..len)
        .map(|i| Step {
            obs: vec![r.random_range(-1.0..1.0), i as f64 * 0.1],
            joint: vec![r.random_range(-3.0..3.0)],
            action: vec![r.random_range(-1.0..1.0), 0.5, i as f64],
            reward: if i == 0 { reward } else { 0.0 },
        })
        .collect();
    Trajectory {
        id: id.into(),
        steps,
    }
}

fn with_totals(totals: &[f64]) -> Dataset {
    let ts = totals
        .iter()
        .enumerate()
        .map(|(i, &r)| traj(&format!("t{i:03}"), 3, r, i as u64))
        .collect();
    Dataset::new(dims(), ts).unwrap()
}

#[test]
fn save_load_round_trip_is_exact() {
    let ds = Dataset::new(dims(), vec![traj("a", 5, 1.0 / 3.0, 1), traj("b", 2, 1e-300, 2)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.len(), 2);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        r#"{"format":"diffclone-traj","version":1,"obs_dim":2,"joint_dim":1,"action_dim":3}"#
    );
}

#[test]
fn load_rejects_bad_header_and_records() {
    let good = r#"{"format":"diffclone-traj","version":1,"obs_dim":1,"joint_dim":1,"action_dim":2}"#;
    let rec = |id: &str, action: &str| {
        format!(r#"{{"id":"{id}","steps":[{{"obs":[0.5],"joint":[1.0],"action":{action},"reward":1.0}}]}}"#)
    };
    let ok = format!("{good}\n{}\n", rec("x", "[1.0,2.0]"));
    assert_eq!(Dataset::read_from(ok.as_bytes()).unwrap().len(), 1);

    let wrong_dim = format!("{good}\n{}\n{}\n", rec("x", "[1.0,2.0]"), rec("bad-7", "[1.0]"));
    match Dataset::read_from(wrong_dim.as_bytes()) {
        Err(Error::Corruption { context, .. }) => assert!(context.contains("bad-7")),
        other => panic!("expected corruption, got {other:?}"),
    }

    let truncated = format!("{good}\n{}", &rec("x", "[1.0,2.0]")[..30]);
    assert!(matches!(Dataset::read_from(truncated.as_bytes()), Err(Error::Corruption { .. })));

    let bad_magic = good.replace("diffclone-traj", "other");
    assert!(matches!(Dataset::read_from(bad_magic.as_bytes()), Err(Error::Format(_))));
    let bad_version = good.replace("\"version\":1", "\"version\":2");
    assert!(matches!(Dataset::read_from(bad_version.as_bytes()), Err(Error::Format(_))));
}

#[test]
fn threshold_filter_examples() {
    let ds = with_totals(&[10.0, 0.0, 35.0, 35.0]);
    let kept = filter_high_reward(&ds, FilterMode::Threshold(30.0)).unwrap();
    let ids: Vec<&str> = kept.trajectories.iter().map(|t| t.id.as_str()).collect();
    assert_eq!(ids, ["t002", "t003"]);
    assert!(matches!(
        filter_high_reward(&ds, FilterMode::Threshold(36.0)),
        Err(Error::EmptySelection(_))
    ));
    let half = filter_high_reward(&ds, FilterMode::TopFraction(0.5)).unwrap();
    assert_eq!(half.len(), 2);
    assert!(filter_high_reward(&ds, FilterMode::TopFraction(0.0)).is_err());
}

#[test]
fn top_fraction_breaks_ties_by_id() {
    let ds = with_totals(&[5.0, 5.0, 5.0, 1.0]);
    let kept = filter_high_reward(&ds, FilterMode::TopFraction(0.5)).unwrap();
    let ids: Vec<&str> = kept.trajectories.iter().map(|t| t.id.as_str()).collect();
    assert_eq!(ids, ["t000", "t001"]);
    assert_eq!(top_fraction_count(0.3, 10), 3);
    assert_eq!(top_fraction_count(0.31, 10), 4);
}

proptest! {
    #[test]
    fn threshold_keeps_exactly_the_qualifying(totals in prop::collection::vec(0u8..20, 1..30), tau in 0u8..25) {
        let totals: Vec<f64> = totals.into_iter().map(f64::from).collect();
        let ds = with_totals(&totals);
        let expect: Vec<String> = ds.trajectories.iter().zip(&totals)
            .filter(|(_, &r)| r >= f64::from(tau)).map(|(t, _)| t.id.clone()).collect();
        match filter_high_reward(&ds, FilterMode::Threshold(f64::from(tau))) {
            Ok(kept) => {
                let ids: Vec<String> = kept.trajectories.iter().map(|t| t.id.clone()).collect();
                prop_assert_eq!(ids, expect);
                for t in &kept.trajectories {
                    prop_assert!(ds.trajectories.contains(t));
                }
            }
            Err(Error::EmptySelection(_)) => prop_assert!(expect.is_empty()),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn top_fraction_keeps_ceil_qn_best(totals in prop::collection::vec(0u8..6, 1..30), q in 0.01f64..=1.0) {
        let totals: Vec<f64> = totals.into_iter().map(f64::from).collect();
        let ds = with_totals(&totals);
        let kept = filter_high_reward(&ds, FilterMode::TopFraction(q)).unwrap();
        let n = totals.len();
        let want = ((q * n as f64) - 1e-9).ceil() as usize;
        prop_assert_eq!(kept.len(), want);
        // Oracle: rank by (total desc, index asc) since ids sort like indices.
        let mut rank: Vec<usize> = (0..n).collect();
        rank.sort_by(|&a, &b| totals[b].partial_cmp(&totals[a]).unwrap().then(a.cmp(&b)));
        let mut chosen: Vec<usize> = rank[..want].to_vec();
        chosen.sort_unstable();
        let ids: Vec<String> = kept.trajectories.iter().map(|t| t.id.clone()).collect();
        let expect: Vec<String> = chosen.iter().map(|i| format!("t{i:03}")).collect();
        prop_assert_eq!(ids, expect);
    }

    #[test]
    fn subsample_composes(len in 1usize..40, a in 1usize..6, b in 1usize..6) {
        let t = traj("s", len, 0.0, 3);
        let twice = subsample(&subsample(&t, a).unwrap(), b).unwrap();
        prop_assert_eq!(twice, subsample(&t, a * b).unwrap());
    }
}

#[test]
fn subsample_examples() {
    let t = traj("s", 10, 0.0, 3);
    assert_eq!(subsample(&t, 1).unwrap(), t);
    let s = subsample(&t, 3).unwrap();
    let idx: Vec<f64> = s.steps.iter().map(|s| s.action[2]).collect();
    assert_eq!(idx, [0.0, 3.0, 6.0, 9.0]);
    assert_eq!(subsample(&t, 50).unwrap().len(), 1);
    assert!(matches!(subsample(&t, 0), Err(Error::Config(_))));
}

fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| {
            let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-6)
        })
        .collect();
    (mean, std)
}

#[test]
fn norm_stats_examples_and_oracle() {
    let one = |x: f64| Step {
        obs: vec![x, 4.0],
        joint: vec![0.0],
        action: vec![x, x, x],
        reward: 0.0,
    };
    let ds = Dataset::new(
        dims(),
        vec![Trajectory {
            id: "x".into(),
            steps: vec![one(1.0), one(3.0)],
        }],
    )
    .unwrap();
    let s = compute_norm_stats(&ds, &IdentityEncoder(2)).unwrap();
    assert_eq!(s.obs_mean[0], 2.0);
    assert_eq!(s.obs_std[0], 1.0);
    assert_eq!(s.obs_std[1], 1e-6);
    assert_eq!(s.obs_std[2], 1e-6);

    let ds = Dataset::new(dims(), (0..5).map(|i| traj(&format!("r{i}"), 7, 0.0, 100 + i)).collect()).unwrap();
    let s = compute_norm_stats(&ds, &IdentityEncoder(2)).unwrap();
    let obs_rows: Vec<Vec<f64>> = ds
        .trajectories
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| [s.obs.clone(), s.joint.clone()].concat()))
        .collect();
    let act_rows: Vec<Vec<f64>> = ds.trajectories.iter().flat_map(|t| t.steps.iter().map(|s| s.action.clone())).collect();
    let (om, os) = two_pass(&obs_rows);
    let (am, as_) = two_pass(&act_rows);
    for (a, b) in s.obs_mean.iter().chain(&s.obs_std).chain(&s.act_mean).chain(&s.act_std).zip(om.iter().chain(&os).chain(&am).chain(&as_)) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    let empty = Dataset::new(dims(), vec![]).unwrap();
    assert!(matches!(compute_norm_stats(&empty, &IdentityEncoder(2)), Err(Error::Usage(_))));
}

#[test]
fn normalization_round_trip_and_formula() {
    let mut r = diffclone_core::rng::from_seed(9);
    let mean: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
    let mut std: Vec<f64> = (0..5).map(|_| r.random_range(0.1..4.0)).collect();
    std[4] = 1e-6;
    let z = normalize(&mean, &mean, &std).unwrap();
    assert!(z.iter().all(|v| *v == 0.0));
    for _ in 0..1000 {
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-10.0..10.0)).collect();
        let z = normalize(&x, &mean, &std).unwrap();
        for j in 0..5 {
            assert_eq!(z[j], (x[j] - mean[j]) / std[j]);
        }
        let back = denormalize(&z, &mean, &std).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
    assert!(matches!(normalize(&[1.0], &mean, &std), Err(Error::Shape(_))));
}

#[test]
fn normalized_dataset_is_standardized() {
    let ds = Dataset::new(dims(), (0..4).map(|i| traj(&format!("r{i}"), 9, 0.0, 40 + i)).collect()).unwrap();
    let enc = IdentityEncoder(2);
    let s = compute_norm_stats(&ds, &enc).unwrap();
    let rows: Vec<Vec<f64>> = ds
        .trajectories
        .iter()
        .flat_map(|t| t.steps.iter().map(|st| s.normalize_obs(&features(&enc, &st.obs, &st.joint).unwrap()).unwrap()))
        .collect();
    let (m, sd) = two_pass(&rows);
    for j in 0..m.len() {
        assert!(m[j].abs() <= 1e-9);
        assert!((sd[j] - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn sidecar_round_trip() {
    let ds = Dataset::new(dims(), vec![traj("a", 4, 0.0, 1)]).unwrap();
    let s = compute_norm_stats(&ds, &IdentityEncoder(2)).unwrap();
    let json = s.to_json();
    assert!(json.contains("\"epsilon\":1e-6"));
    assert_eq!(NormStats::from_json(&json).unwrap(), s);
    assert!(NormStats::from_json("{}").is_err());
}

#[test]
fn window_counting_and_padding() {
    let t = traj("w", 20, 0.0, 5);
    let ds = Dataset::new(dims(), vec![t.clone()]).unwrap();
    let enc = IdentityEncoder(2);
    let s = compute_norm_stats(&ds, &enc).unwrap();
    let ws = make_windows(&t, 4, &s, &enc).unwrap();
    assert_eq!(ws.len(), 20);
    assert_eq!(ws[18].pad_count, 2);
    assert_eq!(ws[15].pad_count, 0);
    let last = s.normalize_action(&t.steps[19].action).unwrap();
    assert_eq!(&ws[18].actions[6..9], last.as_slice());
    assert_eq!(&ws[18].actions[9..12], last.as_slice());

    let one = traj("o", 1, 0.0, 6);
    let ws = make_windows(&one, 4, &s, &enc).unwrap();
    assert_eq!(ws.len(), 1);
    assert_eq!(ws[0].pad_count, 3);
    let a = s.normalize_action(&one.steps[0].action).unwrap();
    for k in 0..4 {
        assert_eq!(&ws[0].actions[k * 3..k * 3 + 3], a.as_slice());
    }

    let ws = make_windows(&t, 1, &s, &enc).unwrap();
    for (w, st) in ws.iter().zip(&t.steps) {
        assert_eq!(w.pad_count, 0);
        assert_eq!(w.actions, s.normalize_action(&st.action).unwrap());
        assert_eq!(w.obs, s.normalize_obs(&features(&enc, &st.obs, &st.joint).unwrap()).unwrap());
    }

    assert!(matches!(make_windows(&t, 4, &s, &IdentityEncoder(1)), Err(Error::Shape(_) | Error::Config(_))));
}

#[test]
fn stacked_windows_repeat_first_frame() {
    let t = traj("w", 5, 0.0, 5);
    let ds = Dataset::new(dims(), vec![t.clone()]).unwrap();
    let enc = IdentityEncoder(2);
    let s = compute_norm_stats(&ds, &enc).unwrap();
    let ws = make_windows_stacked(&t, 2, 2, &s, &enc).unwrap();
    let f = |i: usize| s.normalize_obs(&features(&enc, &t.steps[i].obs, &t.steps[i].joint).unwrap()).unwrap();
    assert_eq!(ws[0].obs, [f(0), f(0)].concat());
    assert_eq!(ws[3].obs, [f(2), f(3)].concat());
}

proptest! {
    #[test]
    fn window_count_equals_length(len in 1usize..30, h in 1usize..20) {
        let t = traj("p", len, 0.0, 8);
        let ds = Dataset::new(dims(), vec![t.clone()]).unwrap();
        let enc = IdentityEncoder(2);
        let s = compute_norm_stats(&ds, &enc).unwrap();
        let ws = make_windows(&t, h, &s, &enc).unwrap();
        prop_assert_eq!(ws.len(), len);
        for (i, w) in ws.iter().enumerate() {
            prop_assert!(w.pad_count < h);
            prop_assert_eq!(w.pad_count, (i + h).saturating_sub(len));
            prop_assert_eq!(w.actions.len(), h * 3);
        }
    }
}
