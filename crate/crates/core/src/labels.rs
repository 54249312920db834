//! Patch labels: merging point annotations, extending them forward and
//! backward in time, and splitting patches into train/test.
//!
//! Labels are extended under a no-reconstruction assumption: a patch
//! destroyed at one annotation date stays destroyed at every later date,
//! and a patch intact at an annotation date was intact at every earlier
//! date. Dates between an intact and a destroyed annotation, and dates
//! after a final intact annotation, are unknown.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{point_to_patch, GeoRaster, PatchGrid, PatchId};

/// Severity recorded by a point annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DamageClass {
    Moderate,
    Severe,
    Destroyed,
}

/// Patch-level class after merging and propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Destroyed,
    Intact,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Destroyed => "destroyed",
            Label::Intact => "intact",
            Label::Unknown => "unknown",
        }
    }
}

/// A manually annotated damage point.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub lon: f64,
    pub lat: f64,
    pub date: NaiveDate,
    pub damage_class: DamageClass,
}

/// Patch labels observed at a single annotation date.
#[derive(Clone, Debug)]
pub struct AnnotationDateLabels {
    pub date: NaiveDate,
    pub labels: BTreeMap<PatchId, Label>,
}

/// Train/test membership of a patch, fixed across all dates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Deterministic patch-level sample split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<PatchId, Split>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn split_of(&self, id: PatchId) -> Option<Split> {
        self.assignment.get(&id).copied()
    }

    pub fn patches_in(&self, split: Split) -> impl Iterator<Item = PatchId> + '_ {
        self.assignment.iter().filter(move |(_, s)| **s == split).map(|(id, _)| *id)
    }

    /// Columns: `row,col,split`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["row", "col", "split"]).map_err(|e| Error::format(path, e.to_string()))?;
        for (id, split) in &self.assignment {
            let s = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            w.write_record([&id.row.to_string(), &id.col.to_string(), s])
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path, train_fraction: f64, seed: u64) -> Result<SplitAssignment> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut assignment = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let row: u32 = rec[0].parse().map_err(|_| Error::format(path, "bad row"))?;
            let col: u32 = rec[1].parse().map_err(|_| Error::format(path, "bad col"))?;
            let split = match &rec[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::format(path, format!("bad split value {other:?}"))),
            };
            assignment.insert(PatchId::new(row, col), split);
        }
        Ok(SplitAssignment { assignment, train_fraction, seed })
    }
}

/// Dense `(patch, image date) -> label` panel after propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPanel {
    patches: Vec<PatchId>,
    patch_index: BTreeMap<PatchId, usize>,
    pub annotation_dates: Vec<NaiveDate>,
    pub image_dates: Vec<NaiveDate>,
    /// Row-major: `labels[patch_idx * image_dates.len() + date_idx]`.
    labels: Vec<Label>,
}

impl LabelPanel {
    /// Build a panel from a dense patch-major label grid
    /// (`labels[patch_idx * image_dates.len() + date_idx]`).
    pub fn from_dense(
        patches: Vec<PatchId>,
        annotation_dates: Vec<NaiveDate>,
        image_dates: Vec<NaiveDate>,
        labels: Vec<Label>,
    ) -> Result<LabelPanel> {
        if labels.len() != patches.len() * image_dates.len() {
            return Err(Error::Shape(format!(
                "panel needs {} x {} = {} labels, got {}",
                patches.len(),
                image_dates.len(),
                patches.len() * image_dates.len(),
                labels.len()
            )));
        }
        let mut sorted = patches.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != patches {
            return Err(Error::Input("panel patches must be sorted and unique".into()));
        }
        let patch_index = patches.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        Ok(LabelPanel { patches, patch_index, annotation_dates, image_dates, labels })
    }

    pub fn patches(&self) -> &[PatchId] {
        &self.patches
    }

    pub fn label(&self, id: PatchId, date: NaiveDate) -> Option<Label> {
        let pi = *self.patch_index.get(&id)?;
        let di = self.image_dates.iter().position(|d| *d == date)?;
        Some(self.labels[pi * self.image_dates.len() + di])
    }

    pub fn entries(&self) -> impl Iterator<Item = (PatchId, NaiveDate, Label)> + '_ {
        self.patches.iter().enumerate().flat_map(move |(pi, id)| {
            self.image_dates
                .iter()
                .enumerate()
                .map(move |(di, d)| (*id, *d, self.labels[pi * self.image_dates.len() + di]))
        })
    }

    /// Columns: `city_id,row,col,date,label`.
    pub fn write_csv(&self, path: &Path, city_id: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["city_id", "row", "col", "date", "label"])
            .map_err(|e| Error::format(path, e.to_string()))?;
        for (id, date, label) in self.entries() {
            w.write_record([
                city_id,
                &id.row.to_string(),
                &id.col.to_string(),
                &date.to_string(),
                label.as_str(),
            ])
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path, annotation_dates: Vec<NaiveDate>) -> Result<LabelPanel> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut cells: BTreeMap<(PatchId, NaiveDate), Label> = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let row: u32 = rec[1].parse().map_err(|_| Error::format(path, "bad row"))?;
            let col: u32 = rec[2].parse().map_err(|_| Error::format(path, "bad col"))?;
            let date: NaiveDate = rec[3].parse().map_err(|_| Error::format(path, "bad date"))?;
            let label = match &rec[4] {
                "destroyed" => Label::Destroyed,
                "intact" => Label::Intact,
                "unknown" => Label::Unknown,
                other => return Err(Error::format(path, format!("bad label {other:?}"))),
            };
            cells.insert((PatchId::new(row, col), date), label);
        }
        let mut patches: Vec<PatchId> = cells.keys().map(|(id, _)| *id).collect();
        patches.dedup();
        let mut image_dates: Vec<NaiveDate> = cells.keys().map(|(_, d)| *d).collect();
        image_dates.sort();
        image_dates.dedup();
        let mut labels = vec![Label::Unknown; patches.len() * image_dates.len()];
        let patch_index: BTreeMap<PatchId, usize> = patches.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        for ((id, date), label) in &cells {
            let pi = patch_index[id];
            let di = image_dates.iter().position(|d| d == date).unwrap();
            labels[pi * image_dates.len() + di] = *label;
        }
        Ok(LabelPanel { patches, patch_index, annotation_dates, image_dates, labels })
    }
}

/// Read an annotation CSV with columns `lon,lat,date,damage_class`.
pub fn read_annotations_csv(path: &Path) -> Result<Vec<Annotation>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let lon: f64 = rec[0].parse().map_err(|_| Error::format(path, "bad lon"))?;
        let lat: f64 = rec[1].parse().map_err(|_| Error::format(path, "bad lat"))?;
        let date: NaiveDate = rec[2].parse().map_err(|_| Error::format(path, "bad date"))?;
        let damage_class = match &rec[3] {
            "moderate" => DamageClass::Moderate,
            "severe" => DamageClass::Severe,
            "destroyed" => DamageClass::Destroyed,
            other => return Err(Error::format(path, format!("bad damage class {other:?}"))),
        };
        out.push(Annotation { lon, lat, date, damage_class });
    }
    Ok(out)
}

/// Write annotations with columns `lon,lat,date,damage_class`.
pub fn write_annotations_csv(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["lon", "lat", "date", "damage_class"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for a in annotations {
        let class = match a.damage_class {
            DamageClass::Moderate => "moderate",
            DamageClass::Severe => "severe",
            DamageClass::Destroyed => "destroyed",
        };
        w.write_record([
            &format!("{:.8}", a.lon),
            &format!("{:.8}", a.lat),
            &a.date.to_string(),
            &class.to_string(),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Merge the annotations of one date into patch labels: destroyed if any
/// destroyed point falls in the patch, unknown if only moderate/severe
/// points do (excluded classes), intact otherwise. No-analysis patches are
/// always unknown.
pub fn label_at_annotation_date(
    grid: &PatchGrid,
    raster: &GeoRaster,
    annotations: &[Annotation],
    date: NaiveDate,
) -> Result<AnnotationDateLabels> {
    for a in annotations {
        if a.date != date {
            return Err(Error::Config(format!(
                "annotation dated {} supplied to labeling pass for {}",
                a.date, date
            )));
        }
    }
    let mut labels: BTreeMap<PatchId, Label> =
        grid.included().iter().map(|id| (*id, Label::Intact)).collect();
    for a in annotations {
        if let Some(id) = point_to_patch(grid, raster, a.lon, a.lat) {
            let slot = labels.get_mut(&id).expect("point_to_patch returns included ids");
            match a.damage_class {
                DamageClass::Destroyed => *slot = Label::Destroyed,
                DamageClass::Moderate | DamageClass::Severe => {
                    if *slot == Label::Intact {
                        *slot = Label::Unknown;
                    }
                }
            }
        }
    }
    for id in grid.no_analysis() {
        labels.insert(*id, Label::Unknown);
    }
    Ok(AnnotationDateLabels { date, labels })
}

/// Extend annotation-date labels to every image date.
///
/// For a patch at image date `t`, with `prior` = label at the latest
/// annotation date <= `t` and `next` = label at the earliest annotation
/// date >= `t`:
///
/// 1. any destroyed annotation at a date <= `t` -> destroyed (destruction
///    persists; this also dominates a contradictory later intact
///    annotation, keeping the panel monotone),
/// 2. otherwise `next` intact -> intact (intact now means intact before),
/// 3. intact `prior`, destroyed `next` -> unknown (destruction date unknown),
/// 4. intact `prior`, no `next` -> unknown (no constraint after the last
///    annotation),
/// 5. anything else (an unknown governing annotation, or destruction whose
///    onset precedes the first annotation) -> unknown.
pub fn propagate(per_date: &[AnnotationDateLabels], image_dates: &[NaiveDate]) -> Result<LabelPanel> {
    if per_date.is_empty() {
        return Err(Error::Config("no annotation dates supplied".into()));
    }
    let mut stages: Vec<&AnnotationDateLabels> = per_date.iter().collect();
    stages.sort_by_key(|s| s.date);
    for w in stages.windows(2) {
        if w[0].date == w[1].date {
            return Err(Error::Config(format!("duplicate annotation date {}", w[0].date)));
        }
    }
    let mut image_dates = image_dates.to_vec();
    image_dates.sort();
    image_dates.dedup();
    if image_dates.is_empty() {
        return Err(Error::Config("no image dates supplied".into()));
    }
    let (first, last) = (image_dates[0], *image_dates.last().unwrap());
    for s in &stages {
        if s.date < first || s.date > last {
            return Err(Error::Config(format!(
                "annotation date {} outside image date range [{first}, {last}]",
                s.date
            )));
        }
    }

    let mut patches: Vec<PatchId> = stages.iter().flat_map(|s| s.labels.keys().copied()).collect();
    patches.sort();
    patches.dedup();
    let patch_index: BTreeMap<PatchId, usize> = patches.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let annotation_dates: Vec<NaiveDate> = stages.iter().map(|s| s.date).collect();

    let n_dates = image_dates.len();
    let mut labels = vec![Label::Unknown; patches.len() * n_dates];
    for (pi, id) in patches.iter().enumerate() {
        // Annotation labels for this patch in date order; a date where the
        // patch is absent from the map counts as unknown.
        let series: Vec<Label> =
            stages.iter().map(|s| s.labels.get(id).copied().unwrap_or(Label::Unknown)).collect();
        // Inclusive prefix: any destroyed annotation at or before index i.
        let mut destroyed_by = vec![false; series.len()];
        let mut seen = false;
        for (i, l) in series.iter().enumerate() {
            seen = seen || *l == Label::Destroyed;
            destroyed_by[i] = seen;
        }
        let mut next_idx = 0usize; // first annotation date >= t
        for (di, t) in image_dates.iter().enumerate() {
            while next_idx < annotation_dates.len() && annotation_dates[next_idx] < *t {
                next_idx += 1;
            }
            // When t sits exactly on an annotation date, that date is both
            // prior and next.
            let on_date = next_idx < annotation_dates.len() && annotation_dates[next_idx] == *t;
            let last_at_or_before = if on_date { Some(next_idx) } else { next_idx.checked_sub(1) };
            let prior = last_at_or_before.map(|i| series[i]);
            let destroyed_prior = last_at_or_before.is_some_and(|i| destroyed_by[i]);
            let next = series.get(next_idx).copied();
            let label = match (destroyed_prior, prior, next) {
                (true, _, _) => Label::Destroyed,
                (_, _, Some(Label::Intact)) => Label::Intact,
                (_, Some(Label::Intact), Some(Label::Destroyed)) => Label::Unknown,
                (_, Some(Label::Intact), None) => Label::Unknown,
                _ => Label::Unknown,
            };
            labels[pi * n_dates + di] = label;
        }
    }

    Ok(LabelPanel { patches, patch_index, annotation_dates, image_dates, labels })
}

/// Stable seeded hash: train/test membership depends only on the patch id
/// and the seed, never on dates or labels.
fn split_hash(seed: u64, id: PatchId) -> u64 {
    use crate::seeds::splitmix64;
    let z = splitmix64(seed ^ splitmix64(id.row as u64));
    splitmix64(z ^ splitmix64((id.col as u64) | 0x8000_0000_0000_0000))
}

/// Assign patches to train/test by ranking them under the seeded hash and
/// taking the first `round(train_fraction * n)` as the training quota, so
/// the realized fraction is exact rather than binomial.
pub fn split_patches(patch_ids: &[PatchId], train_fraction: f64, seed: u64) -> Result<SplitAssignment> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0,1), got {train_fraction}")));
    }
    let mut ranked: Vec<(u64, PatchId)> =
        patch_ids.iter().map(|id| (split_hash(seed, *id), *id)).collect();
    ranked.sort_unstable();
    ranked.dedup_by_key(|(_, id)| *id);
    let train_count = (train_fraction * ranked.len() as f64).round() as usize;
    let assignment = ranked
        .into_iter()
        .enumerate()
        .map(|(rank, (_, id))| (id, if rank < train_count { Split::Train } else { Split::Test }))
        .collect();
    Ok(SplitAssignment { assignment, train_fraction, seed })
}

/// Oversample the minority class by round-robin replication until the
/// classes are 1:1; unknown-labeled samples are dropped.
pub fn balance_training_set<T: Clone>(samples: &[(T, Label)]) -> Result<Vec<(T, Label)>> {
    let mut kept: Vec<(T, Label)> = Vec::with_capacity(samples.len());
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, (x, label)) in samples.iter().enumerate() {
        match label {
            Label::Destroyed => {
                positives.push(i);
                kept.push((x.clone(), *label));
            }
            Label::Intact => {
                negatives.push(i);
                kept.push((x.clone(), *label));
            }
            Label::Unknown => {}
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Class(format!(
            "training set needs both classes, got {} destroyed / {} intact",
            positives.len(),
            negatives.len()
        )));
    }
    let (minority, deficit) = if positives.len() < negatives.len() {
        (&positives, negatives.len() - positives.len())
    } else {
        (&negatives, positives.len() - negatives.len())
    };
    for k in 0..deficit {
        let idx = minority[k % minority.len()];
        kept.push((samples[idx].0.clone(), samples[idx].1));
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{build_grid, AoiKind, AreaOfInterest, GeoTransform};

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn test_raster(width: usize, height: usize) -> GeoRaster {
        GeoRaster::new(
            width,
            height,
            3,
            vec![0u8; width * height * 3],
            GeoTransform { origin_lon: 10.0, origin_lat: 50.0, pixel_deg: 1e-5 },
            date("2020-01-01"),
            "testcity",
        )
        .unwrap()
    }

    fn full_grid(raster: &GeoRaster) -> PatchGrid {
        let ring: Vec<(f64, f64)> = [(-1.0, -1.0), (1e6, -1.0), (1e6, 1e6), (-1.0, 1e6), (-1.0, -1.0)]
            .iter()
            .map(|&(x, y)| raster.geo.pixel_to_lonlat(x, y))
            .collect();
        let aoi = AreaOfInterest::new(AoiKind::PopulatedArea, vec![ring]).unwrap();
        build_grid(raster, &[aoi]).unwrap()
    }

    fn lonlat_of_window(raster: &GeoRaster, row: u32, col: u32) -> (f64, f64) {
        raster.geo.pixel_to_lonlat(col as f64 * 64.0 + 32.0, row as f64 * 64.0 + 32.0)
    }

    #[test]
    fn destroyed_point_labels_its_patch() {
        let raster = test_raster(256, 256);
        let grid = full_grid(&raster);
        let (lon, lat) = lonlat_of_window(&raster, 2, 3);
        let d = date("2021-05-01");
        let anns = vec![Annotation { lon, lat, date: d, damage_class: DamageClass::Destroyed }];
        let out = label_at_annotation_date(&grid, &raster, &anns, d).unwrap();
        for (&id, &label) in &out.labels {
            let expected = if id == PatchId::new(2, 3) { Label::Destroyed } else { Label::Intact };
            assert_eq!(label, expected, "patch {id}");
        }
    }

    #[test]
    fn severe_only_patch_is_unknown() {
        let raster = test_raster(256, 256);
        let grid = full_grid(&raster);
        let (lon, lat) = lonlat_of_window(&raster, 2, 3);
        let d = date("2021-05-01");
        let anns = vec![Annotation { lon, lat, date: d, damage_class: DamageClass::Severe }];
        let out = label_at_annotation_date(&grid, &raster, &anns, d).unwrap();
        assert_eq!(out.labels[&PatchId::new(2, 3)], Label::Unknown);
        assert_eq!(out.labels[&PatchId::new(0, 0)], Label::Intact);
    }

    #[test]
    fn destroyed_beats_severe_in_same_patch() {
        let raster = test_raster(128, 128);
        let grid = full_grid(&raster);
        let (lon, lat) = lonlat_of_window(&raster, 1, 1);
        let d = date("2021-05-01");
        let anns = vec![
            Annotation { lon, lat, date: d, damage_class: DamageClass::Severe },
            Annotation { lon: lon + 1e-5, lat, date: d, damage_class: DamageClass::Destroyed },
        ];
        let out = label_at_annotation_date(&grid, &raster, &anns, d).unwrap();
        assert_eq!(out.labels[&PatchId::new(1, 1)], Label::Destroyed);
    }

    #[test]
    fn mismatched_annotation_date_is_config_error() {
        let raster = test_raster(128, 128);
        let grid = full_grid(&raster);
        let anns =
            vec![Annotation { lon: 10.0, lat: 50.0, date: date("2021-01-01"), damage_class: DamageClass::Destroyed }];
        let err = label_at_annotation_date(&grid, &raster, &anns, date("2021-02-01")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn random_points_match_brute_force_window_test() {
        use rand::{Rng, SeedableRng};
        let raster = test_raster(512, 512);
        let grid = full_grid(&raster);
        let d = date("2021-05-01");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let anns: Vec<Annotation> = (0..100)
            .map(|_| {
                let x = rng.gen_range(-20.0..532.0);
                let y = rng.gen_range(-20.0..532.0);
                let (lon, lat) = raster.geo.pixel_to_lonlat(x, y);
                Annotation { lon, lat, date: d, damage_class: DamageClass::Destroyed }
            })
            .collect();
        let out = label_at_annotation_date(&grid, &raster, &anns, d).unwrap();
        // Brute force: a patch is destroyed iff some point's pixel falls in
        // its window.
        for &id in grid.included() {
            let (x0, y0) = grid.window_origin(id);
            let hit = anns.iter().any(|a| {
                let (x, y) = raster.geo.lonlat_to_pixel(a.lon, a.lat);
                x >= x0 as f64 && x < (x0 + 64) as f64 && y >= y0 as f64 && y < (y0 + 64) as f64
            });
            let expected = if hit { Label::Destroyed } else { Label::Intact };
            assert_eq!(out.labels[&id], expected, "patch {id}");
        }
    }

    // --- propagation -----------------------------------------------------

    fn single_patch_stage(d: NaiveDate, label: Label) -> AnnotationDateLabels {
        let mut labels = BTreeMap::new();
        labels.insert(PatchId::new(0, 0), label);
        AnnotationDateLabels { date: d, labels }
    }

    fn five_dates() -> Vec<NaiveDate> {
        vec![
            date("2021-01-01"),
            date("2021-02-01"),
            date("2021-03-01"),
            date("2021-04-01"),
            date("2021-05-01"),
        ]
    }

    #[test]
    fn intact_then_destroyed_leaves_gap_unknown() {
        let dates = five_dates();
        let stages = vec![
            single_patch_stage(dates[1], Label::Intact),
            single_patch_stage(dates[3], Label::Destroyed),
        ];
        let panel = propagate(&stages, &dates).unwrap();
        let id = PatchId::new(0, 0);
        let got: Vec<Label> = dates.iter().map(|d| panel.label(id, *d).unwrap()).collect();
        assert_eq!(
            got,
            vec![Label::Intact, Label::Intact, Label::Unknown, Label::Destroyed, Label::Destroyed]
        );
    }

    #[test]
    fn intact_at_last_annotation_is_unknown_after() {
        let dates = five_dates();
        let stages = vec![
            single_patch_stage(dates[1], Label::Intact),
            single_patch_stage(dates[3], Label::Intact),
        ];
        let panel = propagate(&stages, &dates).unwrap();
        let id = PatchId::new(0, 0);
        let got: Vec<Label> = dates.iter().map(|d| panel.label(id, *d).unwrap()).collect();
        assert_eq!(got, vec![Label::Intact, Label::Intact, Label::Intact, Label::Intact, Label::Unknown]);
    }

    #[test]
    fn destroyed_is_unknown_before_first_annotation() {
        let dates = five_dates();
        let stages = vec![single_patch_stage(dates[1], Label::Destroyed)];
        let panel = propagate(&stages, &dates).unwrap();
        let id = PatchId::new(0, 0);
        let got: Vec<Label> = dates.iter().map(|d| panel.label(id, *d).unwrap()).collect();
        assert_eq!(
            got,
            vec![Label::Unknown, Label::Destroyed, Label::Destroyed, Label::Destroyed, Label::Destroyed]
        );
    }

    #[test]
    fn empty_annotation_dates_is_config_error() {
        assert!(matches!(propagate(&[], &five_dates()), Err(Error::Config(_))));
    }

    #[test]
    fn annotation_outside_image_range_is_config_error() {
        let dates = five_dates();
        let stages = vec![single_patch_stage(date("2020-12-01"), Label::Intact)];
        assert!(matches!(propagate(&stages, &dates), Err(Error::Config(_))));
    }

    /// Independent rule-by-rule oracle, scanning the whole annotation list
    /// per query instead of sweeping.
    fn oracle_label(ann: &[(NaiveDate, Label)], t: NaiveDate) -> Label {
        if ann.iter().any(|(d, l)| *d <= t && *l == Label::Destroyed) {
            return Label::Destroyed;
        }
        let prior = ann.iter().filter(|(d, _)| *d <= t).max_by_key(|(d, _)| *d).map(|(_, l)| *l);
        let next = ann.iter().filter(|(d, _)| *d >= t).min_by_key(|(d, _)| *d).map(|(_, l)| *l);
        if next == Some(Label::Intact) {
            return Label::Intact;
        }
        if prior == Some(Label::Intact) && next == Some(Label::Destroyed) {
            return Label::Unknown;
        }
        if prior == Some(Label::Intact) && next.is_none() {
            return Label::Unknown;
        }
        Label::Unknown
    }

    #[test]
    fn propagation_matches_case_analysis_oracle() {
        // All annotation subsets and labelings over 5 dates.
        let dates = five_dates();
        let labels = [Label::Destroyed, Label::Intact, Label::Unknown];
        let id = PatchId::new(0, 0);
        let mut cases = 0usize;
        for mask in 1u32..(1 << dates.len()) {
            let ann_dates: Vec<NaiveDate> =
                dates.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, d)| *d).collect();
            let k = ann_dates.len();
            for combo in 0..3usize.pow(k as u32) {
                let mut c = combo;
                let ann: Vec<(NaiveDate, Label)> = ann_dates
                    .iter()
                    .map(|d| {
                        let l = labels[c % 3];
                        c /= 3;
                        (*d, l)
                    })
                    .collect();
                let stages: Vec<AnnotationDateLabels> =
                    ann.iter().map(|(d, l)| single_patch_stage(*d, *l)).collect();
                let panel = propagate(&stages, &dates).unwrap();
                for t in &dates {
                    assert_eq!(
                        panel.label(id, *t).unwrap(),
                        oracle_label(&ann, *t),
                        "annotations {ann:?} at {t}"
                    );
                }
                cases += 1;
            }
        }
        assert!(cases > 1000, "only {cases} cases enumerated");
    }

    #[test]
    fn propagation_never_reverts_destroyed() {
        let dates = five_dates();
        let labels = [Label::Destroyed, Label::Intact, Label::Unknown];
        let id = PatchId::new(0, 0);
        for mask in 1u32..(1 << dates.len()) {
            let ann_dates: Vec<NaiveDate> =
                dates.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, d)| *d).collect();
            for combo in 0..3usize.pow(ann_dates.len() as u32) {
                let mut c = combo;
                let stages: Vec<AnnotationDateLabels> = ann_dates
                    .iter()
                    .map(|d| {
                        let l = labels[c % 3];
                        c /= 3;
                        single_patch_stage(*d, l)
                    })
                    .collect();
                let panel = propagate(&stages, &dates).unwrap();
                let mut destroyed_seen = false;
                for t in &dates {
                    let l = panel.label(id, *t).unwrap();
                    if destroyed_seen && l != Label::Unknown {
                        assert_eq!(l, Label::Destroyed, "reverted after destruction at {t}");
                    }
                    if l == Label::Destroyed {
                        destroyed_seen = true;
                    }
                }
            }
        }
    }

    #[test]
    fn propagation_is_idempotent() {
        let dates = five_dates();
        let stages = vec![
            single_patch_stage(dates[1], Label::Intact),
            single_patch_stage(dates[3], Label::Destroyed),
        ];
        let panel = propagate(&stages, &dates).unwrap();
        // Re-feed the propagated panel as annotation constraints at every
        // image date.
        let refed: Vec<AnnotationDateLabels> = dates
            .iter()
            .map(|d| {
                let mut labels = BTreeMap::new();
                for &id in panel.patches() {
                    labels.insert(id, panel.label(id, *d).unwrap());
                }
                AnnotationDateLabels { date: *d, labels }
            })
            .collect();
        let again = propagate(&refed, &dates).unwrap();
        for (id, d, label) in panel.entries() {
            assert_eq!(again.label(id, d).unwrap(), label, "patch {id} at {d}");
        }
    }

    // --- split -----------------------------------------------------------

    fn patch_square(n: u32) -> Vec<PatchId> {
        (0..n).flat_map(|r| (0..n).map(move |c| PatchId::new(r, c))).collect()
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ids = patch_square(30);
        let a = split_patches(&ids, 0.7, 42).unwrap();
        let b = split_patches(&ids, 0.7, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.assignment.len(), ids.len());
        let c = split_patches(&ids, 0.7, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_train_count_hits_the_quota() {
        let ids = patch_square(100); // 10,000 patches
        let split = split_patches(&ids, 0.7, 42).unwrap();
        let train = split.patches_in(Split::Train).count();
        assert!((6900..=7100).contains(&train), "train count {train} outside [6900, 7100]");
        assert_eq!(train, 7000);
        let ids = patch_square(32); // 1,024 patches
        let split = split_patches(&ids, 0.7, 42).unwrap();
        let share = split.patches_in(Split::Train).count() as f64 / 1024.0;
        assert!((0.69..=0.71).contains(&share), "train share {share}");
    }

    #[test]
    fn split_rejects_degenerate_fraction() {
        let ids = patch_square(2);
        assert!(split_patches(&ids, 0.0, 1).is_err());
        assert!(split_patches(&ids, 1.0, 1).is_err());
    }

    // --- balancing ---------------------------------------------------------

    #[test]
    fn balance_replicates_positives_to_integer_ratio() {
        let samples: Vec<(u32, Label)> = (0..3)
            .map(|i| (i, Label::Destroyed))
            .chain((3..12).map(|i| (i, Label::Intact)))
            .collect();
        let out = balance_training_set(&samples).unwrap();
        let pos: Vec<u32> =
            out.iter().filter(|(_, l)| *l == Label::Destroyed).map(|(x, _)| *x).collect();
        let neg = out.iter().filter(|(_, l)| *l == Label::Intact).count();
        assert_eq!(pos.len(), 9);
        assert_eq!(neg, 9);
        for orig in 0..3u32 {
            assert_eq!(pos.iter().filter(|&&x| x == orig).count(), 3);
        }
    }

    #[test]
    fn balance_round_robin_counts_differ_by_at_most_one() {
        let samples: Vec<(u32, Label)> = (0..4)
            .map(|i| (i, Label::Destroyed))
            .chain((4..14).map(|i| (i, Label::Intact)))
            .collect();
        let out = balance_training_set(&samples).unwrap();
        let pos: Vec<u32> =
            out.iter().filter(|(_, l)| *l == Label::Destroyed).map(|(x, _)| *x).collect();
        assert_eq!(pos.len(), 10);
        let counts: Vec<usize> = (0..4u32).map(|o| pos.iter().filter(|&&x| x == o).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{counts:?}");
    }

    #[test]
    fn balance_already_balanced_is_identity() {
        let samples: Vec<(u32, Label)> =
            vec![(0, Label::Destroyed), (1, Label::Intact), (2, Label::Unknown)];
        let out = balance_training_set(&samples).unwrap();
        assert_eq!(out, vec![(0, Label::Destroyed), (1, Label::Intact)]);
    }

    #[test]
    fn balance_rejects_single_class() {
        let samples: Vec<(u32, Label)> = vec![(0, Label::Destroyed), (1, Label::Destroyed)];
        assert!(matches!(balance_training_set(&samples), Err(Error::Class(_))));
    }

    // --- csv round trips ---------------------------------------------------

    #[test]
    fn split_csv_round_trip() {
        let ids = patch_square(5);
        let split = split_patches(&ids, 0.7, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        split.write_csv(&path).unwrap();
        let back = SplitAssignment::read_csv(&path, 0.7, 9).unwrap();
        assert_eq!(split, back);
    }

    #[test]
    fn label_panel_csv_round_trip() {
        let dates = five_dates();
        let stages = vec![
            single_patch_stage(dates[1], Label::Intact),
            single_patch_stage(dates[3], Label::Destroyed),
        ];
        let panel = propagate(&stages, &dates).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        panel.write_csv(&path, "testcity").unwrap();
        let back = LabelPanel::read_csv(&path, panel.annotation_dates.clone()).unwrap();
        assert_eq!(panel, back);
    }
}
