//! Property tests for the spec-level invariants that hold over whole input
//! families rather than single examples.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use proptest::prelude::*;

use damagemap_core::labels::{
    balance_training_set, propagate, split_patches, AnnotationDateLabels, Label, Split,
};
use damagemap_core::metrics::{pr_curve, rebalance_upsample, roc_auc, ScoredLabelSet};
use damagemap_core::raster::{build_grid, AoiKind, AreaOfInterest, GeoRaster, GeoTransform, PatchId};
use damagemap_core::smoother::{calibrate_cutoff, train_forest, ForestHyperparams};

fn base_date() -> NaiveDate {
    "2021-01-01".parse().unwrap()
}

fn day(i: usize) -> NaiveDate {
    base_date() + chrono::Duration::days(10 * i as i64)
}

fn test_raster(width: usize, height: usize) -> GeoRaster {
    GeoRaster::new(
        width,
        height,
        3,
        vec![0u8; width * height * 3],
        GeoTransform { origin_lon: 30.0, origin_lat: 40.0, pixel_deg: 1e-5 },
        base_date(),
        "prop",
    )
    .unwrap()
}

fn rect_aoi(raster: &GeoRaster, x0: f64, y0: f64, x1: f64, y1: f64) -> AreaOfInterest {
    let ring: Vec<(f64, f64)> = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
        .iter()
        .map(|&(x, y)| raster.geo.pixel_to_lonlat(x, y))
        .collect();
    AreaOfInterest::new(AoiKind::PopulatedArea, vec![ring]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Enlarging a populated-area polygon never removes a patch.
    #[test]
    fn aoi_growth_is_monotone(
        x0 in 0.0f64..200.0,
        y0 in 0.0f64..200.0,
        w in 10.0f64..300.0,
        h in 10.0f64..300.0,
        grow in 1.0f64..200.0,
    ) {
        let raster = test_raster(512, 512);
        let small = rect_aoi(&raster, x0, y0, x0 + w, y0 + h);
        let large = rect_aoi(&raster, x0 - grow, y0 - grow, x0 + w + grow, y0 + h + grow);
        let grid_small = build_grid(&raster, &[small]).unwrap();
        let grid_large = build_grid(&raster, &[large]).unwrap();
        for id in grid_small.included() {
            prop_assert!(grid_large.is_included(*id), "patch {id} lost when the polygon grew");
        }
        prop_assert!(grid_small.included().len() <= (512 / 64) * (512 / 64));
    }

    /// Window-center round trip holds on every included patch of random grids.
    #[test]
    fn point_to_patch_round_trip(
        x0 in 0.0f64..300.0,
        y0 in 0.0f64..300.0,
        w in 30.0f64..400.0,
        h in 30.0f64..400.0,
    ) {
        let raster = test_raster(704, 704);
        let grid = build_grid(&raster, &[rect_aoi(&raster, x0, y0, x0 + w, y0 + h)]).unwrap();
        for &id in grid.included() {
            let (cx, cy) = grid.window_center(id);
            let (lon, lat) = raster.geo.pixel_to_lonlat(cx, cy);
            prop_assert_eq!(damagemap_core::raster::point_to_patch(&grid, &raster, lon, lat), Some(id));
        }
    }

    /// Propagation never turns destroyed back into intact, and re-feeding
    /// its output as constraints reproduces it (idempotence).
    #[test]
    fn propagation_is_monotone_and_idempotent(
        labels in proptest::collection::vec(0u8..3, 1..=6),
        gaps in proptest::collection::vec(0usize..2, 6),
    ) {
        let id = PatchId::new(0, 0);
        let classes = [Label::Destroyed, Label::Intact, Label::Unknown];
        // Image dates 0..n; annotations on a subset offset by `gaps`.
        let n_dates = labels.len() + 1;
        let image_dates: Vec<NaiveDate> = (0..n_dates).map(day).collect();
        let stages: Vec<AnnotationDateLabels> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut map = BTreeMap::new();
                map.insert(id, classes[*l as usize]);
                AnnotationDateLabels { date: day(i + gaps[i % gaps.len()].min(1)), labels: map }
            })
            .collect();
        // Deduplicate annotation dates (duplicates are a config error).
        let mut seen = std::collections::BTreeSet::new();
        let stages: Vec<AnnotationDateLabels> =
            stages.into_iter().filter(|s| seen.insert(s.date)).collect();

        let panel = propagate(&stages, &image_dates).unwrap();
        let mut destroyed_seen = false;
        for d in &image_dates {
            let label = panel.label(id, *d).unwrap();
            if destroyed_seen && label != Label::Unknown {
                prop_assert_eq!(label, Label::Destroyed, "reverted at {}", d);
            }
            destroyed_seen |= label == Label::Destroyed;
        }

        let refed: Vec<AnnotationDateLabels> = image_dates
            .iter()
            .map(|d| {
                let mut map = BTreeMap::new();
                map.insert(id, panel.label(id, *d).unwrap());
                AnnotationDateLabels { date: *d, labels: map }
            })
            .collect();
        let again = propagate(&refed, &image_dates).unwrap();
        for d in &image_dates {
            prop_assert_eq!(again.label(id, *d), panel.label(id, *d));
        }
    }

    /// Split determinism, disjointness and the exact train quota.
    #[test]
    fn split_partitions_patches(seed in any::<u64>(), rows in 2u32..20, cols in 2u32..20) {
        let ids: Vec<PatchId> =
            (0..rows).flat_map(|r| (0..cols).map(move |c| PatchId::new(r, c))).collect();
        let split = split_patches(&ids, 0.7, seed).unwrap();
        prop_assert_eq!(split.assignment.len(), ids.len());
        let train = split.patches_in(Split::Train).count();
        prop_assert_eq!(train, (0.7 * ids.len() as f64).round() as usize);
        let again = split_patches(&ids, 0.7, seed).unwrap();
        prop_assert_eq!(split, again);
    }

    /// Balancing yields a 1:1 ratio within one sample and drops unknowns.
    #[test]
    fn balancing_reaches_one_to_one(
        pos in 1usize..40,
        neg in 1usize..40,
        unknown in 0usize..10,
    ) {
        let mut samples: Vec<(usize, Label)> = Vec::new();
        for i in 0..pos {
            samples.push((i, Label::Destroyed));
        }
        for i in 0..neg {
            samples.push((pos + i, Label::Intact));
        }
        for i in 0..unknown {
            samples.push((pos + neg + i, Label::Unknown));
        }
        let out = balance_training_set(&samples).unwrap();
        let p = out.iter().filter(|(_, l)| *l == Label::Destroyed).count();
        let n = out.iter().filter(|(_, l)| *l == Label::Intact).count();
        prop_assert!(p.abs_diff(n) <= 1, "{p} vs {n}");
        prop_assert!(out.iter().all(|(_, l)| *l != Label::Unknown));
    }

    /// AUC is invariant under strictly monotone transforms, and swapping
    /// labels reflects it around one half.
    #[test]
    fn auc_transform_and_swap_invariances(
        scores in proptest::collection::vec(0u8..40, 4..200),
        flips in any::<u64>(),
    ) {
        let pairs: Vec<(f64, u8)> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (f64::from(s) / 40.0, u8::from(flips >> (i % 64) & 1 == 1)))
            .collect();
        let set = ScoredLabelSet::new(pairs.clone()).unwrap();
        if set.positives() == 0 || set.negatives() == 0 {
            return Ok(());
        }
        let auc = roc_auc(&set).unwrap();
        let transformed =
            ScoredLabelSet::new(pairs.iter().map(|&(v, l)| ((2.5 * v - 1.0).exp(), l)).collect()).unwrap();
        prop_assert_eq!(auc, roc_auc(&transformed).unwrap());
        let swapped = ScoredLabelSet::new(pairs.iter().map(|&(v, l)| (v, 1 - l)).collect()).unwrap();
        prop_assert!((auc + roc_auc(&swapped).unwrap() - 1.0).abs() < 1e-12);
    }

    /// Rebalancing with an exact integer ratio preserves both AUC (exactly)
    /// and the AP dominance direction.
    #[test]
    fn rebalancing_preserves_auc_and_lifts_ap(
        p in 1usize..12,
        ratio in 2usize..7,
        seed in any::<u64>(),
        score_seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(score_seed);
        let mut pairs: Vec<(f64, u8)> = (0..p).map(|_| (rng.gen_range(0..16) as f64, 1)).collect();
        pairs.extend((0..p * ratio).map(|_| (rng.gen_range(0..16) as f64, 0)));
        let set = ScoredLabelSet::new(pairs).unwrap();
        let balanced = rebalance_upsample(&set, seed).unwrap();
        prop_assert_eq!(balanced.positives(), balanced.negatives());
        prop_assert_eq!(roc_auc(&set).unwrap(), roc_auc(&balanced).unwrap());
        let ap = pr_curve(&set).unwrap().average_precision;
        let ap_bal = pr_curve(&balanced).unwrap().average_precision;
        prop_assert!(ap_bal >= ap - 1e-12, "balanced AP {ap_bal} below unbalanced {ap}");
    }

    /// Forest predictions stay in [0,1] and calibration meets its target.
    #[test]
    fn forest_scores_bounded_and_calibration_reaches_target(
        seed in any::<u64>(),
        n in 40usize..160,
        target in 1u32..=10,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let features: Vec<Vec<f64>> =
            (0..n).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
        let labels: Vec<u8> = features.iter().map(|f| u8::from(f[0] > 0.5)).collect();
        if labels.iter().all(|&l| l == 1) || labels.iter().all(|&l| l == 0) {
            return Ok(());
        }
        let hp = ForestHyperparams { num_trees: 8, max_depth: 5, min_leaf: 2, features_per_split: 2 };
        let model = train_forest(&features, &labels, &hp, seed).unwrap();
        let scores: Vec<f64> =
            features.iter().map(|f| model.predict(f).unwrap()).collect();
        for s in &scores {
            prop_assert!((0.0..=1.0).contains(s));
        }
        let target_recall = f64::from(target) / 10.0;
        let cal = calibrate_cutoff(&scores, &labels, target_recall).unwrap();
        prop_assert!(cal.achieved_train_recall >= target_recall - 1e-12);
    }
}
