use ndarray::{Array3, Array4, Array5};
use proptest::prelude::*;

use petseg::augment::{apply_misalignment, mirror, Patch};
use petseg::config::Channel;
use petseg::evaluate::{dice_score, false_negative_volume, false_positive_volume, Connectivity};
use petseg::inference::{axis_starts, schedule_tta};
use petseg::io::{read_label_map, read_volume, write_label_map, write_volume};
use petseg::loss::{softmax, LossWeights};
use petseg::trainer::{poly_lr, split_folds, FoldCase};
use petseg::types::{LabelMap, RigidTransform, Tracer, Volume};

fn mask(bits: &[bool], n: usize) -> Array3<bool> {
    Array3::from_shape_vec((n, n, n), bits.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tile_starts_cover_the_axis(shape in 1usize..600, frac in 0.05f64..1.0, step in 0.1f64..1.0) {
        let patch = ((shape as f64 * frac).ceil() as usize).clamp(1, shape);
        let starts = axis_starts(shape, patch, step).unwrap();
        prop_assert_eq!(starts[0], 0);
        prop_assert_eq!(starts.last().unwrap() + patch, shape);
        prop_assert!(starts.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= patch));
    }

    #[test]
    fn tta_plans_fit_and_grow_with_budget(t in 0.5f64..200.0, b1 in 1.0f64..2000.0, extra in 0.0f64..2000.0, folds in 1usize..7) {
        let small = schedule_tta(b1, t, folds, 2).unwrap();
        let large = schedule_tta(b1 + extra, t, folds, 2).unwrap();
        for (plan, budget) in [(&small, b1), (&large, b1 + extra)] {
            prop_assert!(plan.folds_kept >= 1 && plan.folds_kept <= folds);
            prop_assert!(plan.fold_axes[0].is_empty());
            prop_assert!(plan.num_mirror_axes <= 2);
            let total: f64 = plan.fold_seconds.iter().sum();
            if plan.folds_kept > 1 {
                prop_assert!(total < budget);
            }
        }
        prop_assert!((large.folds_kept, large.num_mirror_axes) >= (small.folds_kept, small.num_mirror_axes));
    }

    #[test]
    fn fp_and_fn_volumes_are_dual(a in prop::collection::vec(any::<bool>(), 512), b in prop::collection::vec(any::<bool>(), 512)) {
        let (p, g) = (mask(&a, 8), mask(&b, 8));
        let spacing = [3.0, 2.04, 2.04];
        for conn in [Connectivity::Face, Connectivity::Edge, Connectivity::Corner] {
            prop_assert_eq!(
                false_positive_volume(&p.view(), &g.view(), spacing, conn).unwrap(),
                false_negative_volume(&g.view(), &p.view(), spacing, conn).unwrap()
            );
        }
        let d = dice_score(&p.view(), &g.view()).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice_score(&g.view(), &p.view()).unwrap());
    }

    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-30.0f32..30.0, 3 * 27)) {
        let logits = Array5::from_shape_vec((1, 3, 3, 3, 3), values).unwrap();
        let p = softmax(&logits.view());
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for s in p.sum_axis(ndarray::Axis(1)).iter() {
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn loss_weights_are_normalised(w in prop::collection::vec(0.01f64..10.0, 1..5), scales in 1usize..6) {
        let lw = LossWeights::new(w.iter().enumerate().map(|(i, &v)| (format!("h{i}"), v)), scales).unwrap();
        prop_assert!((lw.heads.values().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((lw.scales.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(lw.scales.windows(2).all(|s| (s[1] * 2.0 - s[0]).abs() < 1e-12));
    }

    #[test]
    fn poly_schedule_decays(lr0 in 1e-5f64..1.0, total in 1u64..10_000, exp in 0.1f64..3.0) {
        let mut prev = f64::INFINITY;
        for step in (0..=total).step_by((total as usize / 50).max(1)) {
            let lr = poly_lr(lr0, step, total, exp);
            prop_assert!(lr >= 0.0 && lr <= lr0 && lr <= prev);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(lr0, total, total, exp), 0.0);
    }

    #[test]
    fn folds_partition_the_cases(n in 2usize..40, k in 2usize..6, seed in any::<u64>(), lesions in prop::collection::vec(any::<bool>(), 40)) {
        prop_assume!(n >= k);
        let cases: Vec<FoldCase> = (0..n)
            .map(|i| FoldCase {
                case_id: format!("c{i:03}"),
                tracer: if i % 3 == 0 { Tracer::Psma } else { Tracer::Fdg },
                has_lesion: lesions[i],
            })
            .collect();
        let splits = split_folds(&cases, k, seed).unwrap();
        let mut held: Vec<String> = splits.iter().flat_map(|s| s.val.clone()).collect();
        held.sort();
        let all: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
        prop_assert_eq!(held, all);
        let sizes: Vec<usize> = splits.iter().map(|s| s.val.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for s in &splits {
            prop_assert_eq!(s.train.len() + s.val.len(), n);
            prop_assert!(s.train.iter().all(|id| !s.val.contains(id)));
        }
    }

    #[test]
    fn mirroring_twice_is_identity(values in prop::collection::vec(-1.0f32..1.0, 2 * 64), axes in prop::collection::vec(0usize..3, 0..4)) {
        let image = Array4::from_shape_vec((2, 4, 4, 4), values).unwrap();
        let lesion = image.index_axis(ndarray::Axis(0), 0).mapv(|v| (v > 0.0) as u8);
        let p = Patch::new(image, lesion, None).unwrap();
        prop_assert_eq!(mirror(&mirror(&p, &axes), &axes), p);
    }

    #[test]
    fn translation_round_trip_restores_the_interior(values in prop::collection::vec(0.0f32..1.0, 2 * 512), t in prop::array::uniform3(-2i32..=2)) {
        let image = Array4::from_shape_vec((2, 8, 8, 8), values).unwrap();
        let p = Patch::new(image, Array3::zeros((8, 8, 8)), None).unwrap();
        let fwd = RigidTransform::translation(t.map(|v| v as f64));
        let back = RigidTransform::translation(t.map(|v| -v as f64));
        let out = apply_misalignment(&apply_misalignment(&p, &fwd, Channel::Pet), &back, Channel::Pet);
        let pet = Channel::Pet.index();
        for z in 2..6 {
            for y in 2..6 {
                for x in 2..6 {
                    prop_assert_eq!(out.image[[pet, z, y, x]], p.image[[pet, z, y, x]]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nifti_round_trip(values in prop::collection::vec(-1000.0f32..1000.0, 5 * 4 * 3), spacing in prop::array::uniform3(0.5f64..5.0), labels in prop::collection::vec(0u8..12, 5 * 4 * 3)) {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new(Array3::from_shape_vec((5, 4, 3), values).unwrap(), spacing, [1.0, -2.0, 3.5]).unwrap();
        let path = dir.path().join("v.nii.gz");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert_eq!(back.data(), vol.data());
        for a in 0..3 {
            prop_assert!((back.spacing()[a] - spacing[a]).abs() < 1e-5);
        }
        let lm = LabelMap::new(Array3::from_shape_vec((5, 4, 3), labels).unwrap(), spacing, [0.0; 3], 12).unwrap();
        let lpath = dir.path().join("l.nii.gz");
        write_label_map(&lm, &lpath).unwrap();
        let read = read_label_map(&lpath, 12).unwrap();
        prop_assert_eq!(read.data(), lm.data());
    }
}

#[test]
fn zero_logit_batch_softmax_is_uniform() {
    let p = softmax(&Array5::<f64>::zeros((2, 4, 2, 2, 2)).view());
    assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn tiny_steps_never_repeat_starts() {
    assert_eq!(axis_starts(2, 1, 0.1).unwrap(), vec![0, 1]);
    assert_eq!(axis_starts(5, 2, 0.2).unwrap(), vec![0, 1, 2, 3]);
}
