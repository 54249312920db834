//! Stage two: random-forest smoothing of the stage-1 score panel over
//! spatial-ring and temporal-lag statistics, plus recall-targeted cutoff
//! calibration and binarization.
//!
//! Destruction is serially correlated and spatially clustered, so for every
//! `(patch, date)` cell the forest sees, at each of the time offsets 0, -1
//! and -2: the patch's own stage-1 score, the mean and standard deviation
//! over its Chebyshev-ring-1 neighbors, and the same over ring 2 — fifteen
//! values, plus one missing-lag mask bit per lagged offset.

mod forest;

pub use forest::{train_forest, ForestHyperparams, RandomForestModel, TreeNode};

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{PatchGrid, PatchId};

/// Number of lag-statistic features (3 time offsets x 5 statistics).
pub const LAG_FEATURE_COUNT: usize = 15;
/// Forest input width: lag statistics plus the two missing-lag mask bits.
pub const FOREST_FEATURE_COUNT: usize = LAG_FEATURE_COUNT + 2;

/// Scores attached to one `(patch, date)` cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellScores {
    pub stage1: f64,
    pub stage2: Option<f64>,
    pub binary: Option<bool>,
}

/// Dense per-patch, per-date score panel. Stage-1 scores cover every
/// included patch (no-analysis ones too) at every post date; stage-2 scores
/// and binary calls appear after smoothing.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePanel {
    patches: Vec<PatchId>,
    patch_index: BTreeMap<PatchId, usize>,
    pub dates: Vec<NaiveDate>,
    stage1: Vec<f64>,
    stage2: Option<Vec<f64>>,
    binary: Option<Vec<bool>>,
}

impl ScorePanel {
    /// Build a stage-1 panel. `stage1` is patch-major: entry
    /// `pi * dates.len() + di` scores `patches[pi]` at `dates[di]`.
    pub fn from_stage1(patches: Vec<PatchId>, dates: Vec<NaiveDate>, stage1: Vec<f64>) -> Result<Self> {
        if stage1.len() != patches.len() * dates.len() {
            return Err(Error::Shape(format!(
                "panel needs {} x {} = {} scores, got {}",
                patches.len(),
                dates.len(),
                patches.len() * dates.len(),
                stage1.len()
            )));
        }
        let mut sorted = patches.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != patches {
            return Err(Error::Input("panel patches must be sorted and unique".into()));
        }
        let patch_index = patches.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        Ok(ScorePanel { patches, patch_index, dates, stage1, stage2: None, binary: None })
    }

    pub fn patches(&self) -> &[PatchId] {
        &self.patches
    }

    pub fn patch_idx(&self, id: PatchId) -> Option<usize> {
        self.patch_index.get(&id).copied()
    }

    pub fn date_idx(&self, date: NaiveDate) -> Option<usize> {
        self.dates.iter().position(|d| *d == date)
    }

    pub fn stage1_at(&self, patch_idx: usize, date_idx: usize) -> f64 {
        self.stage1[patch_idx * self.dates.len() + date_idx]
    }

    pub fn get(&self, id: PatchId, date: NaiveDate) -> Option<CellScores> {
        let pi = self.patch_idx(id)?;
        let di = self.date_idx(date)?;
        let k = pi * self.dates.len() + di;
        Some(CellScores {
            stage1: self.stage1[k],
            stage2: self.stage2.as_ref().map(|v| v[k]),
            binary: self.binary.as_ref().map(|v| v[k]),
        })
    }

    pub fn has_stage2(&self) -> bool {
        self.stage2.is_some()
    }

    pub fn entries(&self) -> impl Iterator<Item = (PatchId, NaiveDate, CellScores)> + '_ {
        self.patches.iter().enumerate().flat_map(move |(pi, id)| {
            self.dates.iter().enumerate().map(move |(di, d)| {
                let k = pi * self.dates.len() + di;
                (
                    *id,
                    *d,
                    CellScores {
                        stage1: self.stage1[k],
                        stage2: self.stage2.as_ref().map(|v| v[k]),
                        binary: self.binary.as_ref().map(|v| v[k]),
                    },
                )
            })
        })
    }

    fn with_stage2(&self, stage2: Vec<f64>, binary: Vec<bool>) -> ScorePanel {
        let mut out = self.clone();
        out.stage2 = Some(stage2);
        out.binary = Some(binary);
        out
    }

    /// Columns: `city_id,row,col,date,stage1,stage2,binary`; stage-2 fields
    /// are empty until smoothing has run. Scores use shortest round-trip
    /// formatting so re-reading is lossless.
    pub fn write_csv(&self, path: &Path, city_id: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["city_id", "row", "col", "date", "stage1", "stage2", "binary"])
            .map_err(|e| Error::format(path, e.to_string()))?;
        for (id, date, cell) in self.entries() {
            w.write_record([
                city_id,
                &id.row.to_string(),
                &id.col.to_string(),
                &date.to_string(),
                &format!("{}", cell.stage1),
                &cell.stage2.map(|v| format!("{v}")).unwrap_or_default(),
                &cell.binary.map(|b| if b { "1".to_string() } else { "0".to_string() }).unwrap_or_default(),
            ])
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<ScorePanel> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut cells: BTreeMap<(PatchId, NaiveDate), (f64, Option<f64>, Option<bool>)> = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let row: u32 = rec[1].parse().map_err(|_| Error::format(path, "bad row"))?;
            let col: u32 = rec[2].parse().map_err(|_| Error::format(path, "bad col"))?;
            let date: NaiveDate = rec[3].parse().map_err(|_| Error::format(path, "bad date"))?;
            let stage1: f64 = rec[4].parse().map_err(|_| Error::format(path, "bad stage1 score"))?;
            let stage2 = if rec[5].is_empty() {
                None
            } else {
                Some(rec[5].parse().map_err(|_| Error::format(path, "bad stage2 score"))?)
            };
            let binary = if rec[6].is_empty() {
                None
            } else {
                Some(&rec[6] == "1")
            };
            cells.insert((PatchId::new(row, col), date), (stage1, stage2, binary));
        }
        if cells.is_empty() {
            return Err(Error::format(path, "empty score panel"));
        }
        let mut patches: Vec<PatchId> = cells.keys().map(|(id, _)| *id).collect();
        patches.dedup();
        let mut dates: Vec<NaiveDate> = cells.keys().map(|(_, d)| *d).collect();
        dates.sort();
        dates.dedup();
        let n = patches.len() * dates.len();
        if cells.len() != n {
            return Err(Error::format(path, format!("panel is not dense: {} cells for {n} slots", cells.len())));
        }
        let patch_index: BTreeMap<PatchId, usize> = patches.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let mut stage1 = vec![0.0; n];
        let mut stage2 = vec![0.0; n];
        let mut binary = vec![false; n];
        let mut any_stage2 = false;
        for ((id, date), (s1, s2, b)) in &cells {
            let k = patch_index[id] * dates.len() + dates.iter().position(|d| d == date).unwrap();
            stage1[k] = *s1;
            if let Some(v) = s2 {
                stage2[k] = *v;
                any_stage2 = true;
            }
            if let Some(v) = b {
                binary[k] = *v;
            }
        }
        Ok(ScorePanel {
            patches,
            patch_index,
            dates,
            stage1,
            stage2: any_stage2.then_some(stage2),
            binary: any_stage2.then_some(binary),
        })
    }
}

/// Spatio-temporal lag statistics for one `(patch, date)` cell.
///
/// `values` holds, for each time offset 0, -1, -2 in that order: own score,
/// ring-1 mean, ring-1 std, ring-2 mean, ring-2 std. A missing lag (first
/// two dates) copies the offset-0 statistics and sets its mask flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagFeatureVector {
    pub values: [f64; LAG_FEATURE_COUNT],
    pub lag1_missing: bool,
    pub lag2_missing: bool,
}

impl LagFeatureVector {
    /// Flatten to the forest input layout: 15 statistics then the two mask
    /// bits as 0/1.
    pub fn to_forest_input(&self) -> [f64; FOREST_FEATURE_COUNT] {
        let mut out = [0.0; FOREST_FEATURE_COUNT];
        out[..LAG_FEATURE_COUNT].copy_from_slice(&self.values);
        out[LAG_FEATURE_COUNT] = f64::from(self.lag1_missing);
        out[LAG_FEATURE_COUNT + 1] = f64::from(self.lag2_missing);
        out
    }
}

/// Chebyshev-ring neighbors of a patch that exist in the panel.
fn ring_neighbors(panel: &ScorePanel, grid: &PatchGrid, id: PatchId, radius: i64) -> Vec<usize> {
    let mut out = Vec::new();
    let (r0, c0) = (id.row as i64, id.col as i64);
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            if dr.abs().max(dc.abs()) != radius {
                continue;
            }
            let (r, c) = (r0 + dr, c0 + dc);
            if r < 0 || c < 0 || r >= grid.rows as i64 || c >= grid.cols as i64 {
                continue;
            }
            if let Some(pi) = panel.patch_idx(PatchId::new(r as u32, c as u32)) {
                out.push(pi);
            }
        }
    }
    out
}

/// Population mean and standard deviation; an empty neighborhood falls back
/// to the patch's own score with zero spread.
fn ring_stats(panel: &ScorePanel, neighbors: &[usize], date_idx: usize, own: f64) -> (f64, f64) {
    if neighbors.is_empty() {
        return (own, 0.0);
    }
    let n = neighbors.len() as f64;
    let mean = neighbors.iter().map(|&pi| panel.stage1_at(pi, date_idx)).sum::<f64>() / n;
    let var = neighbors
        .iter()
        .map(|&pi| {
            let d = panel.stage1_at(pi, date_idx) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.max(0.0).sqrt())
}

/// Assemble the lag feature vector for one cell of the stage-1 panel.
pub fn build_features(
    panel: &ScorePanel,
    grid: &PatchGrid,
    id: PatchId,
    date: NaiveDate,
) -> Result<LagFeatureVector> {
    let pi = panel
        .patch_idx(id)
        .ok_or_else(|| Error::Lookup(format!("patch {id} not in score panel")))?;
    let di = panel
        .date_idx(date)
        .ok_or_else(|| Error::Lookup(format!("date {date} not in score panel")))?;

    let ring1 = ring_neighbors(panel, grid, id, 1);
    let ring2 = ring_neighbors(panel, grid, id, 2);

    let quintet = |date_idx: usize| -> [f64; 5] {
        let own = panel.stage1_at(pi, date_idx);
        let (m1, s1) = ring_stats(panel, &ring1, date_idx, own);
        let (m2, s2) = ring_stats(panel, &ring2, date_idx, own);
        [own, m1, s1, m2, s2]
    };

    let current = quintet(di);
    let mut values = [0.0; LAG_FEATURE_COUNT];
    values[..5].copy_from_slice(&current);
    let mut missing = [false; 2];
    for lag in 1..=2usize {
        let stats = match di.checked_sub(lag) {
            Some(prev) => quintet(prev),
            None => {
                missing[lag - 1] = true;
                current
            }
        };
        values[lag * 5..(lag + 1) * 5].copy_from_slice(&stats);
    }
    Ok(LagFeatureVector { values, lag1_missing: missing[0], lag2_missing: missing[1] })
}

/// Score threshold calibrated to a target recall on the training sample.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CutoffCalibration {
    pub threshold: f64,
    pub achieved_train_recall: f64,
}

/// Pick the largest score value whose recall on `(scores, labels)` reaches
/// `target_recall`; the achieved recall is the smallest attainable value at
/// or above the target.
pub fn calibrate_cutoff(scores: &[f64], labels: &[u8], target_recall: f64) -> Result<CutoffCalibration> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if !(target_recall > 0.0 && target_recall <= 1.0) {
        return Err(Error::Config(format!("target recall must be in (0,1], got {target_recall}")));
    }
    let mut positive_scores: Vec<f64> =
        scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    if positive_scores.is_empty() {
        return Err(Error::Class("cutoff calibration needs at least one positive".into()));
    }
    positive_scores.sort_by(|a, b| b.total_cmp(a));
    let p = positive_scores.len();
    let k = (target_recall * p as f64).ceil() as usize;
    let k = k.clamp(1, p);
    let threshold = positive_scores[k - 1];
    let achieved = positive_scores.iter().filter(|&&s| s >= threshold).count() as f64 / p as f64;
    Ok(CutoffCalibration { threshold, achieved_train_recall: achieved })
}

/// Fill stage-2 scores and binary calls for every cell of the panel,
/// no-analysis patches included.
pub fn smooth_panel(
    panel: &ScorePanel,
    grid: &PatchGrid,
    model: &RandomForestModel,
    calibration: &CutoffCalibration,
) -> Result<ScorePanel> {
    let dates = panel.dates.clone();
    let per_patch: Vec<Vec<f64>> = panel
        .patches()
        .par_iter()
        .map(|&id| {
            dates
                .iter()
                .map(|&date| {
                    let features = build_features(panel, grid, id, date)?;
                    model.predict(&features.to_forest_input())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let stage2: Vec<f64> = per_patch.into_iter().flatten().collect();
    let binary: Vec<bool> = stage2.iter().map(|&s| s >= calibration.threshold).collect();
    Ok(panel.with_stage2(stage2, binary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{build_grid, AoiKind, AreaOfInterest, GeoRaster, GeoTransform};

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn dates(n: usize) -> Vec<NaiveDate> {
        (0..n).map(|i| date("2021-01-01") + chrono::Duration::days(30 * i as i64)).collect()
    }

    fn full_grid(rows: usize, cols: usize) -> PatchGrid {
        let raster = GeoRaster::new(
            cols * 64,
            rows * 64,
            3,
            vec![0u8; cols * 64 * rows * 64 * 3],
            GeoTransform { origin_lon: 0.0, origin_lat: 0.0, pixel_deg: 1e-5 },
            date("2020-01-01"),
            "t",
        )
        .unwrap();
        let ring: Vec<(f64, f64)> =
            [(-1.0, -1.0), (1e9, -1.0), (1e9, 1e9), (-1.0, 1e9), (-1.0, -1.0)]
                .iter()
                .map(|&(x, y)| raster.geo.pixel_to_lonlat(x, y))
                .collect();
        let aoi = AreaOfInterest::new(AoiKind::PopulatedArea, vec![ring]).unwrap();
        build_grid(&raster, &[aoi]).unwrap()
    }

    fn uniform_panel(grid: &PatchGrid, n_dates: usize, value: f64) -> ScorePanel {
        let patches: Vec<PatchId> = grid.included().iter().copied().collect();
        let stage1 = vec![value; patches.len() * n_dates];
        ScorePanel::from_stage1(patches, dates(n_dates), stage1).unwrap()
    }

    #[test]
    fn uniform_panel_gives_constant_stats() {
        let grid = full_grid(5, 5);
        let panel = uniform_panel(&grid, 4, 0.4);
        let f = build_features(&panel, &grid, PatchId::new(2, 2), panel.dates[3]).unwrap();
        for v in [f.values[1], f.values[3], f.values[6], f.values[8], f.values[11], f.values[13]] {
            assert!((v - 0.4).abs() < 1e-15, "mean {v}");
        }
        for s in [f.values[2], f.values[4], f.values[7], f.values[9], f.values[12], f.values[14]] {
            assert!(s.abs() < 1e-12, "std {s}");
        }
        assert!(!f.lag1_missing && !f.lag2_missing);
    }

    #[test]
    fn hot_patch_contributes_one_eighth_to_interior_neighbor_mean() {
        let grid = full_grid(5, 5);
        let mut panel = uniform_panel(&grid, 3, 0.0);
        let hot = panel.patch_idx(PatchId::new(2, 2)).unwrap();
        for di in 0..3 {
            panel.stage1[hot * 3 + di] = 1.0;
        }
        // (2,3) is interior: ring-1 has 8 members, one of them hot.
        let f = build_features(&panel, &grid, PatchId::new(2, 3), panel.dates[2]).unwrap();
        assert!((f.values[1] - 1.0 / 8.0).abs() < 1e-15, "ring-1 mean {}", f.values[1]);
    }

    #[test]
    fn corner_patch_ring_populations() {
        let grid = full_grid(6, 6);
        let panel = uniform_panel(&grid, 3, 0.2);
        let corner = PatchId::new(0, 0);
        assert_eq!(ring_neighbors(&panel, &grid, corner, 1).len(), 3);
        assert_eq!(ring_neighbors(&panel, &grid, corner, 2).len(), 5);
    }

    /// Brute-force neighbor oracle: enumerate all cells and filter by
    /// Chebyshev distance.
    fn oracle_ring(grid: &PatchGrid, panel: &ScorePanel, id: PatchId, radius: i64) -> Vec<usize> {
        let mut out = Vec::new();
        for r in 0..grid.rows as i64 {
            for c in 0..grid.cols as i64 {
                let d = (r - id.row as i64).abs().max((c - id.col as i64).abs());
                if d == radius {
                    if let Some(pi) = panel.patch_idx(PatchId::new(r as u32, c as u32)) {
                        out.push(pi);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ring_enumeration_matches_brute_force_oracle() {
        let grid = full_grid(7, 4);
        let panel = uniform_panel(&grid, 2, 0.3);
        for &id in grid.included() {
            for radius in [1, 2] {
                let mut fast = ring_neighbors(&panel, &grid, id, radius);
                let mut slow = oracle_ring(&grid, &panel, id, radius);
                fast.sort_unstable();
                slow.sort_unstable();
                assert_eq!(fast, slow, "patch {id} radius {radius}");
            }
        }
    }

    #[test]
    fn feature_values_match_brute_force_on_random_panel() {
        use rand::{Rng, SeedableRng};
        let grid = full_grid(6, 6);
        let patches: Vec<PatchId> = grid.included().iter().copied().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        let ds = dates(4);
        let stage1: Vec<f64> = (0..patches.len() * ds.len()).map(|_| rng.gen()).collect();
        let panel = ScorePanel::from_stage1(patches, ds, stage1).unwrap();

        for &id in grid.included() {
            for &d in panel.dates.clone().iter() {
                let f = build_features(&panel, &grid, id, d).unwrap();
                let di = panel.date_idx(d).unwrap();
                for (lag, base) in [(0usize, 0usize), (1, 5), (2, 10)] {
                    let (ldi, miss) = match di.checked_sub(lag) {
                        Some(v) => (v, false),
                        None => (di, true),
                    };
                    let own = panel.stage1_at(panel.patch_idx(id).unwrap(), ldi);
                    assert_eq!(f.values[base], own);
                    for (off, radius) in [(1usize, 1i64), (3, 2)] {
                        let members = oracle_ring(&grid, &panel, id, radius);
                        let (mean, std) = if members.is_empty() {
                            (own, 0.0)
                        } else {
                            let vals: Vec<f64> =
                                members.iter().map(|&pi| panel.stage1_at(pi, ldi)).collect();
                            let m = vals.iter().sum::<f64>() / vals.len() as f64;
                            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                            (m, v.sqrt())
                        };
                        assert!((f.values[base + off] - mean).abs() < 1e-12);
                        assert!((f.values[base + off + 1] - std).abs() < 1e-12);
                    }
                    match lag {
                        1 => assert_eq!(f.lag1_missing, miss),
                        2 => assert_eq!(f.lag2_missing, miss),
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn neighbor_symmetry() {
        let grid = full_grid(5, 8);
        let panel = uniform_panel(&grid, 2, 0.1);
        let ids: Vec<PatchId> = grid.included().iter().copied().collect();
        for &a in &ids {
            let a_ring: Vec<usize> = ring_neighbors(&panel, &grid, a, 1);
            for &b in &ids {
                let b_in_a = a_ring.contains(&panel.patch_idx(b).unwrap());
                let a_in_b =
                    ring_neighbors(&panel, &grid, b, 1).contains(&panel.patch_idx(a).unwrap());
                assert_eq!(b_in_a, a_in_b, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn missing_date_is_lookup_error() {
        let grid = full_grid(3, 3);
        let panel = uniform_panel(&grid, 2, 0.5);
        let err = build_features(&panel, &grid, PatchId::new(0, 0), date("1999-01-01")).unwrap_err();
        assert!(matches!(err, Error::Lookup(_)));
    }

    #[test]
    fn calibrate_cutoff_order_statistics() {
        let scores = vec![0.9, 0.7, 0.3, 0.1];
        let labels = vec![1, 1, 1, 1];
        let cal = calibrate_cutoff(&scores, &labels, 0.5).unwrap();
        assert_eq!(cal.threshold, 0.7);
        assert_eq!(cal.achieved_train_recall, 0.5);
    }

    #[test]
    fn calibrate_cutoff_all_positives_at_one() {
        let scores = vec![1.0, 1.0, 1.0];
        let labels = vec![1, 1, 1];
        let cal = calibrate_cutoff(&scores, &labels, 0.5).unwrap();
        assert_eq!(cal.threshold, 1.0);
        assert_eq!(cal.achieved_train_recall, 1.0);
    }

    #[test]
    fn calibrate_cutoff_quantile_property() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let scores: Vec<f64> = (0..1001).map(|_| rng.gen::<f64>()).collect();
        let labels = vec![1u8; 1001];
        let cal = calibrate_cutoff(&scores, &labels, 0.5).unwrap();
        assert!(cal.achieved_train_recall >= 0.5);
        assert!(cal.achieved_train_recall <= 0.5 + 1.0 / 1001.0);
    }

    #[test]
    fn calibrate_cutoff_no_positives_is_class_error() {
        let err = calibrate_cutoff(&[0.4, 0.2], &[0, 0], 0.5).unwrap_err();
        assert!(matches!(err, Error::Class(_)));
    }

    #[test]
    fn calibration_removing_threshold_tier_drops_recall() {
        let scores = vec![0.9, 0.8, 0.7, 0.7, 0.2, 0.1];
        let labels = vec![1u8; 6];
        let cal = calibrate_cutoff(&scores, &labels, 0.5).unwrap();
        assert!(cal.achieved_train_recall >= 0.5);
        // Recall strictly above the threshold tier falls below target.
        let above = scores.iter().filter(|&&s| s > cal.threshold).count() as f64 / 6.0;
        assert!(above < 0.5, "recall above tier {above}");
    }

    #[test]
    fn smooth_panel_constant_forest_is_constant() {
        let grid = full_grid(4, 4);
        let panel = uniform_panel(&grid, 3, 0.25);
        // Depth-0 forest: a single leaf equal to the global positive rate.
        let model = RandomForestModel {
            trees: vec![vec![TreeNode::Leaf { value: 0.42 }]],
            hyperparameters: ForestHyperparams::default(),
            seed: 0,
        };
        let cal = CutoffCalibration { threshold: 0.5, achieved_train_recall: 0.5 };
        let out = smooth_panel(&panel, &grid, &model, &cal).unwrap();
        for (_, _, cell) in out.entries() {
            assert_eq!(cell.stage2, Some(0.42));
            assert_eq!(cell.binary, Some(false));
        }
    }

    #[test]
    fn binarization_monotone_in_threshold() {
        use rand::{Rng, SeedableRng};
        let grid = full_grid(4, 4);
        let patches: Vec<PatchId> = grid.included().iter().copied().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ds = dates(3);
        let stage1: Vec<f64> = (0..patches.len() * ds.len()).map(|_| rng.gen()).collect();
        let panel = ScorePanel::from_stage1(patches, ds, stage1).unwrap();
        let model = RandomForestModel {
            trees: vec![vec![
                TreeNode::Split { feature: 0, threshold: 0.5, left: 1, right: 2 },
                TreeNode::Leaf { value: 0.2 },
                TreeNode::Leaf { value: 0.8 },
            ]],
            hyperparameters: ForestHyperparams::default(),
            seed: 0,
        };
        let low = smooth_panel(&panel, &grid, &model, &CutoffCalibration { threshold: 0.3, achieved_train_recall: 0.5 }).unwrap();
        let high = smooth_panel(&panel, &grid, &model, &CutoffCalibration { threshold: 0.7, achieved_train_recall: 0.5 }).unwrap();
        for ((_, _, lo), (_, _, hi)) in low.entries().zip(high.entries()) {
            if hi.binary == Some(true) {
                assert_eq!(lo.binary, Some(true), "raising threshold turned a 0 into a 1");
            }
        }
    }

    #[test]
    fn score_panel_csv_round_trip() {
        use rand::{Rng, SeedableRng};
        let grid = full_grid(3, 3);
        let patches: Vec<PatchId> = grid.included().iter().copied().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let ds = dates(2);
        let stage1: Vec<f64> = (0..patches.len() * ds.len()).map(|_| rng.gen()).collect();
        let panel = ScorePanel::from_stage1(patches, ds, stage1).unwrap();
        let model = RandomForestModel {
            trees: vec![vec![TreeNode::Leaf { value: 0.5 }]],
            hyperparameters: ForestHyperparams::default(),
            seed: 0,
        };
        let smoothed =
            smooth_panel(&panel, &grid, &model, &CutoffCalibration { threshold: 0.4, achieved_train_recall: 0.5 })
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        smoothed.write_csv(&path, "t").unwrap();
        let back = ScorePanel::read_csv(&path).unwrap();
        assert_eq!(smoothed, back);
    }
}
