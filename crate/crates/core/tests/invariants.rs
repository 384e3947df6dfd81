use proptest::prelude::*;

use mogaf::forecast::{instance_normalize, mask_span, Frame};
use mogaf::grouping::MemoryBank;
use mogaf::io::{trajectories_from_csv, trajectories_to_csv};
use mogaf::metrics::{delta_3d, epe_3d, DeltaNormalizer};
use mogaf::scene::{blend_transform, deform_gaussian, validate_weights, GaussianCanonical, MotionBasisSet, TrajectoryTensor};
use mogaf::se3::{normalize_quat, Quat, Se3, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec3() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-5.0..5.0f64).prop_map(Vec3::from)
}

fn unit_quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0..1.0f64)
        .prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|v| normalize_quat(Quat::new(v[0], v[1], v[2], v[3])).unwrap())
}

fn se3() -> impl Strategy<Value = Se3> {
    (unit_quat(), vec3()).prop_map(|(q, t)| Se3::new(q, t))
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, n).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        if s > 1e-9 {
            raw.iter().map(|x| x / s).collect()
        } else {
            let mut w = vec![0.0; raw.len()];
            w[0] = 1.0;
            w
        }
    })
}

/// Trajectories of `n` gaussians over `t` frames with canonical unit quaternions.
fn trajectories(n: usize, t: usize) -> impl Strategy<Value = TrajectoryTensor> {
    prop::collection::vec(prop::collection::vec((vec3(), unit_quat()), t), n).prop_map(move |rows| {
        let values = rows
            .into_iter()
            .map(|seq| {
                seq.into_iter()
                    .map(|(m, q)| [m.x, m.y, m.z, q.w, q.i, q.j, q.k])
                    .collect()
            })
            .collect();
        TrajectoryTensor::new((0..n as u32).map(|i| i * 3 + 1).collect(), values, 2).unwrap()
    })
}

fn shifted(traj: &TrajectoryTensor, by: &Vec3) -> TrajectoryTensor {
    let mut out = traj.clone();
    for seq in &mut out.values {
        for x in seq {
            x[0] += by.x;
            x[1] += by.y;
            x[2] += by.z;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn blended_rotations_stay_unit(
        (bases, w) in (2usize..6).prop_flat_map(|k| (prop::collection::vec(se3(), k), simplex(k))),
    ) {
        let tf = blend_transform(&w, &bases).unwrap();
        prop_assert!((tf.rotation().norm() - 1.0).abs() < 1e-9);
        prop_assert!(tf.rotation().w >= 0.0);
    }

    #[test]
    fn deformed_gaussians_are_unit_and_finite(
        (frames, w) in (1usize..5).prop_flat_map(|k| {
            (prop::collection::vec(prop::collection::vec(se3(), k), 3), simplex(k))
        }),
        mean in vec3(),
        q in unit_quat(),
    ) {
        prop_assert!(validate_weights(&w).is_ok());
        let motion = MotionBasisSet::new(frames).unwrap();
        let g = GaussianCanonical::new(0, mean, q, w);
        for t in 0..motion.num_timesteps() {
            let (m, r) = deform_gaussian(&g, &motion, t).unwrap();
            prop_assert!(m.iter().all(|x| x.is_finite()));
            prop_assert!((r.norm() - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_off_simplex_are_rejected(w in simplex(4), bump in 1e-3..0.5f64, idx in 0usize..4) {
        let mut bad = w.clone();
        bad[idx] += bump;
        prop_assert!(validate_weights(&bad).is_err());
        let mut neg = w;
        neg[idx] = -bump;
        prop_assert!(validate_weights(&neg).is_err());
    }

    #[test]
    fn bank_stays_disjoint(inserts in prop::collection::vec((0usize..4, prop::collection::vec(0u32..60, 0..20)), 1..12)) {
        let mut bank = MemoryBank::with_groups(&[0, 1, 0, 1]);
        let mut total = 0;
        for (k, ids) in inserts {
            total += bank.insert_unassigned(k, ids);
        }
        prop_assert!(bank.is_disjoint());
        prop_assert_eq!(bank.num_assigned(), total);
        prop_assert_eq!(bank.assignment().len(), total);
    }

    #[test]
    fn delta_thresholds_nest(
        gt in trajectories(6, 4),
        noise in prop::collection::vec(vec3(), 24),
        scale in 0.0..0.3f64,
    ) {
        let mut pred = gt.clone();
        for (i, seq) in pred.values.iter_mut().enumerate() {
            for (t, x) in seq.iter_mut().enumerate() {
                let n = noise[i * 4 + t] * scale;
                x[0] += n.x;
                x[1] += n.y;
                x[2] += n.z;
            }
        }
        for norm in [DeltaNormalizer::BboxDiagonal, DeltaNormalizer::Absolute] {
            let d05 = delta_3d(&pred, &gt, 0.05, norm).unwrap();
            let d10 = delta_3d(&pred, &gt, 0.10, norm).unwrap();
            prop_assert!(d05 <= d10);
            prop_assert!((0.0..=100.0).contains(&d05) && (0.0..=100.0).contains(&d10));
        }
    }

    #[test]
    fn metrics_ignore_common_translation(gt in trajectories(5, 3), pred in trajectories(5, 3), by in vec3()) {
        let before = epe_3d(&pred, &gt).unwrap();
        let after = epe_3d(&shifted(&pred, &by), &shifted(&gt, &by)).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * (1.0 + before));
        let d = delta_3d(&pred, &gt, 0.1, DeltaNormalizer::BboxDiagonal).unwrap();
        let ds = delta_3d(&shifted(&pred, &by), &shifted(&gt, &by), 0.1, DeltaNormalizer::BboxDiagonal).unwrap();
        // only points sitting exactly on the threshold can flip under rounding
        prop_assert!((d - ds).abs() <= 100.0 / 15.0 + 1e-9);
    }

    #[test]
    fn error_grows_with_offset(gt in trajectories(4, 3), dir in unit_quat(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let u = Vec3::new(dir.i, dir.j, dir.k + 1e-3).normalize();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let e_lo = epe_3d(&shifted(&gt, &(u * lo)), &gt).unwrap();
        let e_hi = epe_3d(&shifted(&gt, &(u * hi)), &gt).unwrap();
        prop_assert!((e_lo - lo).abs() < 1e-9 && (e_hi - hi).abs() < 1e-9);
        prop_assert!(e_lo <= e_hi + 1e-12);
        let d_lo = delta_3d(&shifted(&gt, &(u * lo)), &gt, 0.5, DeltaNormalizer::Absolute).unwrap();
        let d_hi = delta_3d(&shifted(&gt, &(u * hi)), &gt, 0.5, DeltaNormalizer::Absolute).unwrap();
        prop_assert!(d_lo >= d_hi);
    }

    #[test]
    fn normalization_round_trips(seq in prop::collection::vec(prop::array::uniform7(-50.0..50.0f64), 1..20)) {
        let frames: Vec<Frame> = seq;
        let (norm, state) = instance_normalize(&frames);
        for (orig, n) in frames.iter().zip(&norm) {
            let back = state.denormalize(n);
            for c in 0..7 {
                prop_assert!((back[c] - orig[c]).abs() <= 1e-9 * (1.0 + orig[c].abs()));
            }
        }
    }

    #[test]
    fn mask_span_fits_window(window in 1usize..40, ratio in 0.0..1.0f64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = mask_span(window, ratio, &mut rng);
        prop_assert!(span.start <= span.end);
        prop_assert!(span.end < window || span.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(traj in (1usize..6, 1usize..6).prop_flat_map(|(n, t)| trajectories(n, t))) {
        let back = trajectories_from_csv(&trajectories_to_csv(&traj)).unwrap();
        prop_assert_eq!(back, traj);
    }
}
