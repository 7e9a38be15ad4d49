use lidarfuse_core::{Point3, PointCloud};
use lidarfuse_pipeline::{synchronize, synchronize_clouds, PipelineError};
use proptest::prelude::*;

fn ticks(n: usize, rate: f64, offset: f64) -> Vec<f64> {
    (0..n).map(|k| k as f64 / rate + offset).collect()
}

#[test]
fn identical_timestamps_group_one_to_one() {
    let s = vec![ticks(50, 20.0, 0.0); 4];
    let r = synchronize(&s, 20.0, true).unwrap();
    assert_eq!(r.groups.len(), 50);
    assert_eq!((r.dropped, r.partial), (0, 0));
    assert_eq!(r.unused, vec![0; 4]);
    for (n, g) in r.groups.iter().enumerate() {
        assert_eq!(g.members, vec![Some(n); 4]);
        assert_eq!(g.time, s[0][n]);
    }
}

#[test]
fn half_period_offset_still_groups() {
    let s = vec![ticks(40, 20.0, 0.0), ticks(40, 20.0, 0.025)];
    let r = synchronize(&s, 20.0, true).unwrap();
    assert_eq!(r.groups.len(), 40);
    assert_eq!(r.dropped, 0);
    for (n, g) in r.groups.iter().enumerate() {
        assert_eq!(g.members, vec![Some(n), Some(n)]);
    }
}

#[test]
fn dropout_is_partial_or_dropped() {
    let mut s2 = ticks(20, 20.0, 0.003);
    s2.remove(7);
    let s = vec![ticks(20, 20.0, 0.0), ticks(20, 20.0, -0.002), s2];

    let r = synchronize(&s, 20.0, true).unwrap();
    assert_eq!(r.groups.len(), 20);
    assert_eq!((r.dropped, r.partial), (0, 1));
    assert_eq!(r.groups[7].members, vec![Some(7), Some(7), None]);
    assert_eq!(r.groups[8].members, vec![Some(8), Some(8), Some(7)]);
    assert_eq!(r.unused, vec![0, 0, 0]);

    let r = synchronize(&s, 20.0, false).unwrap();
    assert_eq!(r.groups.len(), 19);
    assert_eq!((r.dropped, r.partial), (1, 0));
    assert!(r.groups.iter().all(|g| g.is_complete() && g.time != s[0][7]));
    assert_eq!(r.unused, vec![1, 1, 0]);
}

#[test]
fn far_clouds_are_not_grouped() {
    // Sensor 1 lags by 1.5 periods: nothing lies within the bound of the
    // first anchor.
    let s = vec![ticks(5, 10.0, 0.0), ticks(5, 10.0, 0.15)];
    let r = synchronize(&s, 10.0, true).unwrap();
    assert_eq!(r.groups[0].members, vec![Some(0), None]);
    assert_eq!(r.groups[1].members, vec![Some(1), Some(0)]);
}

#[test]
fn stream_errors_name_the_sensor() {
    let s = vec![ticks(5, 20.0, 0.0), Vec::new()];
    assert!(matches!(synchronize(&s, 20.0, true), Err(PipelineError::EmptyStream(1))));
    let s = vec![ticks(5, 20.0, 0.0), vec![0.0, 0.1, 0.05]];
    assert!(matches!(synchronize(&s, 20.0, true), Err(PipelineError::NonMonotone(1))));
    assert!(synchronize(&[ticks(3, 20.0, 0.0)], 0.0, true).is_err());
}

#[test]
fn clouds_follow_their_groups() {
    let mk = |sensor: usize, t: f64| PointCloud::new(vec![Point3::new(t, sensor as f64, 0.0)], sensor, t);
    let a: Vec<PointCloud> = ticks(6, 20.0, 0.0).into_iter().map(|t| mk(0, t)).collect();
    let mut bt = ticks(6, 20.0, 0.01);
    bt.remove(2);
    let b: Vec<PointCloud> = bt.into_iter().map(|t| mk(1, t)).collect();
    let (frames, report) = synchronize_clouds(vec![a, b], 20.0, true).unwrap();
    assert_eq!(frames.len(), 6);
    assert_eq!(report.partial, 1);
    assert!(frames[2].clouds[1].is_none());
    for f in &frames {
        let t0 = f.clouds[0].as_ref().unwrap().timestamp;
        assert_eq!(t0, f.time_step as f64 / 20.0);
        if let Some(c) = &f.clouds[1] {
            assert!((c.timestamp - t0 - 0.01).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn grouping_invariants(
        jitter in prop::collection::vec(prop::collection::vec(-0.02f64..0.02, 30), 3),
        drop in prop::collection::vec(prop::collection::vec(any::<bool>(), 30), 3),
        partial in any::<bool>(),
    ) {
        let rate = 20.0;
        let streams: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                (0..30)
                    .filter(|&k| j == 0 || !drop[j][k] || k % 3 != 0)
                    .map(|k| k as f64 / rate + jitter[j][k])
                    .collect()
            })
            .collect();
        let r = synchronize(&streams, rate, partial).unwrap();
        prop_assert_eq!(r.groups.len() + r.dropped, streams[0].len());
        for j in 0..3 {
            let used: Vec<usize> = r.groups.iter().filter_map(|g| g.members[j]).collect();
            prop_assert!(used.windows(2).all(|w| w[0] < w[1]), "each cloud at most once, in order");
            prop_assert_eq!(used.len() + r.unused[j], streams[j].len());
        }
        for g in &r.groups {
            let t: Vec<f64> = g.members.iter().enumerate().filter_map(|(j, m)| m.map(|k| streams[j][k])).collect();
            let spread = t.iter().cloned().fold(f64::MIN, f64::max) - t.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert!(spread <= 1.0 / rate);
            prop_assert!(partial || g.is_complete());
        }
        prop_assert_eq!(r.partial, r.groups.iter().filter(|g| !g.is_complete()).count());
    }
}
