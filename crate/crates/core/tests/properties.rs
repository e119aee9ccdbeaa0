//! Property-based invariants over the numeric primitives.

use proptest::prelude::*;

use mqe_align::config::EncoderConfig;
use mqe_align::encoder::group_points;
use mqe_align::graph::Tape;
use mqe_align::pointcloud::PointCloud;
use mqe_align::schedule::LrSchedule;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_simplex_points(
        rows in 1usize..6,
        cols in 1usize..9,
        scale in 0.1f64..40.0,
        seed in any::<u64>(),
    ) {
        let mut rng = mqe_align::rng::Rng::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(data, rows, cols).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        let d = tape.data(s);
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn masked_loss_ignores_excluded_positions(
        rows in 2usize..6,
        vocab in 2usize..10,
        seed in any::<u64>(),
    ) {
        let mut rng = mqe_align::rng::Rng::new(seed);
        let logits: Vec<f64> = (0..rows * vocab).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let targets: Vec<usize> = (0..rows).map(|_| rng.range(vocab)).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.next_f64() < 0.5).collect();
        mask[0] = true; // at least one included
        let excluded: Vec<usize> = (0..rows).filter(|i| !mask[*i]).collect();

        let mut tape = Tape::<f64>::new();
        let l = tape.constant(logits.clone(), rows, vocab).unwrap();
        let base = tape.cross_entropy_masked(l, &targets, &mask).unwrap();
        let base_bits = tape.data(base)[0].to_bits();

        // arbitrary perturbation of logits and targets at excluded rows
        let mut logits2 = logits;
        let mut targets2 = targets;
        for i in &excluded {
            for j in 0..vocab {
                logits2[i * vocab + j] = rng.uniform(-50.0, 50.0);
            }
            targets2[*i] = rng.range(vocab);
        }
        let l2 = tape.constant(logits2, rows, vocab).unwrap();
        let perturbed = tape.cross_entropy_masked(l2, &targets2, &mask).unwrap();
        prop_assert_eq!(tape.data(perturbed)[0].to_bits(), base_bits);
    }

    #[test]
    fn schedule_is_bounded_and_warms_linearly(
        warmup in 1usize..50,
        extra in 2usize..200,
        seed in any::<u64>(),
    ) {
        let mut rng = mqe_align::rng::Rng::new(seed);
        let min_lr = rng.uniform(1e-6, 1e-3);
        let init_lr = min_lr * rng.uniform(1.0, 30.0);
        let warmup_lr = min_lr * rng.next_f64();
        let total = warmup + extra;
        let s = LrSchedule::new(warmup_lr, init_lr, min_lr, warmup, total).unwrap();
        for step in 0..=total {
            let lr = s.lr_at(step).unwrap();
            prop_assert!(lr <= init_lr * (1.0 + 1e-12));
            prop_assert!(lr >= warmup_lr * (1.0 - 1e-12));
        }
        // the cosine leg is non-increasing
        let mut prev = s.lr_at(warmup).unwrap();
        for step in warmup..=total {
            let lr = s.lr_at(step).unwrap();
            prop_assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn grouping_matches_exhaustive_reference(
        n_pow in 4usize..7,
        m in 1usize..5,
        seed in any::<u64>(),
    ) {
        let n = 1 << n_pow;
        let group_size = 1 << (n_pow - 2);
        let mut rng = mqe_align::rng::Rng::new(seed);
        let mut data = Vec::new();
        for _ in 0..n {
            for _ in 0..3 {
                data.push(rng.uniform(-1.0, 1.0) as f32);
            }
            for _ in 0..3 {
                data.push(rng.uniform(0.0, 1.0) as f32);
            }
        }
        let cloud = PointCloud::new(data).unwrap();
        let cfg = EncoderConfig {
            points: n,
            group_size,
            patches: m,
            hidden: 8,
            pointnet_mid: 4,
            heads: 1,
            layers: 1,
            ffn_mult: 1,
        };
        let (grouping, canon) = group_points(&cloud, &cfg).unwrap();

        let d2 = |a: [f32; 3], b: [f32; 3]| {
            let dx = a[0] as f64 - b[0] as f64;
            let dy = a[1] as f64 - b[1] as f64;
            let dz = a[2] as f64 - b[2] as f64;
            dx * dx + dy * dy + dz * dz
        };
        // exhaustive FPS
        let mut chosen = vec![0usize];
        while chosen.len() < m {
            let mut best = 0usize;
            let mut best_d = -1.0;
            for i in 0..n {
                let mind = chosen.iter().map(|c| d2(canon.xyz(i), canon.xyz(*c)))
                    .fold(f64::INFINITY, f64::min);
                if mind > best_d {
                    best_d = mind;
                    best = i;
                }
            }
            chosen.push(best);
        }
        for (g, c) in chosen.iter().enumerate() {
            prop_assert_eq!(grouping.centers[g], canon.xyz(*c));
            let cx = canon.xyz(*c);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, b| d2(canon.xyz(*a), cx).partial_cmp(&d2(canon.xyz(*b), cx))
                .unwrap().then(a.cmp(b)));
            order.truncate(group_size);
            prop_assert_eq!(&grouping.groups[g], &order);
        }
    }
}
