//! Event-study validation: regress the score panel on leads and lags of
//! externally recorded strike events under patch and date fixed effects.
//!
//! Events bind to the first image date at or after the strike (damage is
//! only visible in the next image), each patch keeps its earliest event,
//! and event time is binned to -5..+5 with everything at or beyond +6
//! accumulating into +5. Periods at or before -6 form the omitted
//! reference, so reported coefficients are relative to the pre-event
//! baseline. The two-way within transform demeans by patch and date
//! alternately; the demeaned system is solved by column-pivoted
//! Householder QR.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::raster::{point_to_patch, GeoRaster, PatchGrid, PatchId};
use crate::smoother::ScorePanel;

/// Leads and lags tracked on each side of the event.
pub const EVENT_WINDOW: i32 = 5;
/// Number of estimated bins: -5..=+5.
pub const N_BINS: usize = (2 * EVENT_WINDOW + 1) as usize;

/// A georeferenced strike event.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub lon: f64,
    pub lat: f64,
    pub date: NaiveDate,
    pub event_type: String,
}

/// Read an event CSV with columns `lon,lat,date,event_type`.
pub fn read_events_csv(path: &Path) -> Result<Vec<EventRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        out.push(EventRecord {
            lon: rec[0].parse().map_err(|_| Error::format(path, "bad lon"))?,
            lat: rec[1].parse().map_err(|_| Error::format(path, "bad lat"))?,
            date: rec[2].parse().map_err(|_| Error::format(path, "bad date"))?,
            event_type: rec[3].to_string(),
        });
    }
    Ok(out)
}

pub fn write_events_csv(path: &Path, events: &[EventRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["lon", "lat", "date", "event_type"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for e in events {
        w.write_record([
            &format!("{:.8}", e.lon),
            &format!("{:.8}", e.lat),
            &e.date.to_string(),
            &e.event_type,
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Events mapped to (patch, image-date index); only the earliest event per
/// patch is kept.
#[derive(Clone, Debug, PartialEq)]
pub struct MappedEvents {
    pub first_event: BTreeMap<PatchId, usize>,
    /// Events outside the grid or after the last image date.
    pub dropped: usize,
}

/// Geocode events into patches and bind each to the first image date at or
/// after the event. Unmappable events are counted, not fatal.
pub fn map_events(
    events: &[EventRecord],
    grid: &PatchGrid,
    raster: &GeoRaster,
    image_dates: &[NaiveDate],
) -> MappedEvents {
    let mut dates = image_dates.to_vec();
    dates.sort();
    let mut first_event: BTreeMap<PatchId, usize> = BTreeMap::new();
    let mut dropped = 0usize;
    for event in events {
        let Some(id) = point_to_patch(grid, raster, event.lon, event.lat) else {
            dropped += 1;
            continue;
        };
        let Some(idx) = dates.iter().position(|d| *d >= event.date) else {
            dropped += 1;
            continue;
        };
        first_event
            .entry(id)
            .and_modify(|existing| *existing = (*existing).min(idx))
            .or_insert(idx);
    }
    MappedEvents { first_event, dropped }
}

/// One `(patch, date)` observation of the design.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub patch: u32,
    pub time: u32,
    pub outcome: f64,
    /// Signed event time binned to `[-EVENT_WINDOW, +EVENT_WINDOW]`;
    /// `None` for the reference (at or before -6) and for event-free patches.
    pub event_time: Option<i32>,
}

/// Long-format panel with lead/lag indicators implied by `event_time`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventPanel {
    pub observations: Vec<Observation>,
    pub n_patches: usize,
    pub n_dates: usize,
}

impl EventPanel {
    pub fn from_observations(observations: Vec<Observation>, n_patches: usize, n_dates: usize) -> Self {
        EventPanel { observations, n_patches, n_dates }
    }
}

fn bin_of(rel: i64) -> Option<i32> {
    if rel <= -(EVENT_WINDOW as i64) - 1 {
        None // omitted reference
    } else if rel >= EVENT_WINDOW as i64 {
        Some(EVENT_WINDOW)
    } else {
        Some(rel as i32)
    }
}

/// Column index of a bin in the design matrix: -5 -> 0, ..., +5 -> 10.
pub fn bin_column(bin: i32) -> usize {
    (bin + EVENT_WINDOW) as usize
}

/// Build the lead/lag design from a smoothed score panel and mapped events.
/// The outcome is the stage-2 score.
pub fn build_design(panel: &ScorePanel, events: &MappedEvents) -> Result<EventPanel> {
    if !panel.has_stage2() {
        return Err(Error::Input("event study needs a smoothed panel with stage-2 scores".into()));
    }
    let n_dates = panel.dates.len();
    let mut observations = Vec::with_capacity(panel.patches().len() * n_dates);
    for (pi, id) in panel.patches().iter().enumerate() {
        let event_idx = events.first_event.get(id).copied();
        for (di, date) in panel.dates.iter().enumerate() {
            let cell = panel.get(*id, *date).expect("dense panel");
            let event_time = event_idx.and_then(|e| bin_of(di as i64 - e as i64));
            observations.push(Observation {
                patch: pi as u32,
                time: di as u32,
                outcome: cell.stage2.expect("stage2 present"),
                event_time,
            });
        }
    }
    Ok(EventPanel { observations, n_patches: panel.patches().len(), n_dates })
}

/// One demeaning pass: subtract each group's column means from its rows.
/// Returns the largest absolute mean that was removed.
fn subtract_group_means(
    observations: &[Observation],
    data: &mut [f64],
    cols: usize,
    n_groups: usize,
    key: impl Fn(&Observation) -> usize,
) -> f64 {
    let mut sums = vec![0.0f64; n_groups * cols];
    let mut counts = vec![0usize; n_groups];
    for (i, obs) in observations.iter().enumerate() {
        let g = key(obs);
        counts[g] += 1;
        for c in 0..cols {
            sums[g * cols + c] += data[i * cols + c];
        }
    }
    let mut largest: f64 = 0.0;
    for g in 0..n_groups {
        if counts[g] > 0 {
            for c in 0..cols {
                sums[g * cols + c] /= counts[g] as f64;
                largest = largest.max(sums[g * cols + c].abs());
            }
        }
    }
    for (i, obs) in observations.iter().enumerate() {
        let g = key(obs);
        for c in 0..cols {
            data[i * cols + c] -= sums[g * cols + c];
        }
    }
    largest
}

/// Outcome and indicator columns after two-way demeaning, row-major
/// `[n_obs, N_BINS]`.
#[derive(Clone, Debug)]
pub struct DemeanedSystem {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n_obs: usize,
    pub sweeps: usize,
}

/// Alternate patch- and date-demeaning of the outcome and every indicator
/// until the largest applied mean falls below 1e-10.
pub fn within_transform(panel: &EventPanel) -> Result<DemeanedSystem> {
    let n = panel.observations.len();
    if panel.n_patches < 2 || panel.n_dates < 2 {
        return Err(Error::Input(format!(
            "within transform needs at least 2 patches and 2 dates, got {} x {}",
            panel.n_patches, panel.n_dates
        )));
    }
    let cols = N_BINS + 1; // indicators plus outcome
    let mut data = vec![0.0f64; n * cols];
    for (i, obs) in panel.observations.iter().enumerate() {
        if let Some(bin) = obs.event_time {
            data[i * cols + bin_column(bin)] = 1.0;
        }
        data[i * cols + N_BINS] = obs.outcome;
    }

    let max_sweeps = 10_000;
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        if sweeps > max_sweeps {
            return Err(Error::Numeric(format!(
                "two-way demeaning did not converge within {max_sweeps} sweeps"
            )));
        }
        let by_patch =
            subtract_group_means(&panel.observations, &mut data, cols, panel.n_patches, |o| {
                o.patch as usize
            });
        let by_date =
            subtract_group_means(&panel.observations, &mut data, cols, panel.n_dates, |o| {
                o.time as usize
            });
        if by_patch.max(by_date) < 1e-10 {
            break;
        }
    }

    let mut x = vec![0.0f64; n * N_BINS];
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        x[i * N_BINS..(i + 1) * N_BINS].copy_from_slice(&data[i * cols..i * cols + N_BINS]);
        y[i] = data[i * cols + N_BINS];
    }
    Ok(DemeanedSystem { x, y, n_obs: n, sweeps })
}

/// Event-time coefficients relative to the omitted reference (key -6,
/// pinned to zero).
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionResult {
    pub coefficients: BTreeMap<i32, f64>,
    pub n_obs: usize,
    pub converged: bool,
}

impl RegressionResult {
    /// Columns: `bin,coefficient` (bin -6 is the reference at zero).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["bin", "coefficient"]).map_err(|e| Error::format(path, e.to_string()))?;
        for (bin, coef) in &self.coefficients {
            w.write_record([&bin.to_string(), &format!("{coef}")])
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Ordinary least squares on the demeaned system via column-pivoted
/// Householder QR. A numerically rank-deficient design reports the
/// offending bin.
pub fn estimate(panel: &EventPanel) -> Result<RegressionResult> {
    let system = within_transform(panel)?;
    let beta = solve_least_squares(&system)?;
    let mut coefficients = BTreeMap::new();
    coefficients.insert(-(EVENT_WINDOW) - 1, 0.0); // reference
    for bin in -EVENT_WINDOW..=EVENT_WINDOW {
        coefficients.insert(bin, beta[bin_column(bin)]);
    }
    Ok(RegressionResult { coefficients, n_obs: system.n_obs, converged: true })
}

fn solve_least_squares(system: &DemeanedSystem) -> Result<Vec<f64>> {
    householder_solve(&system.x, &system.y, system.n_obs, N_BINS)
}

/// Least squares via column-pivoted Householder QR on a row-major `x`.
fn householder_solve(x: &[f64], y: &[f64], n: usize, p: usize) -> Result<Vec<f64>> {
    // Column-major copy for the Householder sweep.
    let mut a: Vec<Vec<f64>> = (0..p).map(|c| (0..n).map(|r| x[r * p + c]).collect()).collect();
    let mut y = y.to_vec();

    let mut perm: Vec<usize> = (0..p).collect();
    let initial_norm: f64 =
        a.iter().map(|col| col.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max).sqrt();
    let tol = 1e-8 * initial_norm.max(1.0);
    let mut r_mat = vec![0.0f64; p * p];

    for k in 0..p {
        // Pivot: remaining column with the largest norm below row k.
        let (mut best, mut best_norm) = (k, -1.0f64);
        for c in k..p {
            let norm: f64 = a[c][k..].iter().map(|v| v * v).sum::<f64>();
            if norm > best_norm {
                best_norm = norm;
                best = c;
            }
        }
        if best_norm.sqrt() <= tol {
            let bin = perm[best] as i32 - EVENT_WINDOW;
            return Err(Error::Collinearity { bin });
        }
        a.swap(k, best);
        perm.swap(k, best);

        // Householder reflector for column k.
        let alpha = -a[k][k].signum() * best_norm.sqrt();
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for col in a.iter_mut().skip(k).chain(std::iter::once(&mut y)) {
                let dot: f64 = v.iter().zip(&col[k..]).map(|(a, b)| a * b).sum();
                let scale = 2.0 * dot / vnorm2;
                for (vi, ci) in v.iter().zip(col[k..].iter_mut()) {
                    *ci -= scale * vi;
                }
            }
        }
        a[k][k] = alpha;
    }
    // Extract R only after the sweep: later pivot steps swap whole columns,
    // which would invalidate rows recorded earlier.
    for k in 0..p {
        for c in k..p {
            r_mat[k * p + c] = a[c][k];
        }
    }

    // Back-substitution on R beta_perm = (Q^T y)[..p].
    let mut beta_perm = vec![0.0f64; p];
    for k in (0..p).rev() {
        let mut acc = y[k];
        for c in (k + 1)..p {
            acc -= r_mat[k * p + c] * beta_perm[c];
        }
        beta_perm[k] = acc / r_mat[k * p + k];
    }
    let mut beta = vec![0.0f64; p];
    for k in 0..p {
        beta[perm[k]] = beta_perm[k];
    }
    Ok(beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn image_dates(n: usize) -> Vec<NaiveDate> {
        (0..n).map(|i| date("2021-01-01") + chrono::Duration::days(20 * i as i64)).collect()
    }

    // --- map_events --------------------------------------------------------

    fn event_fixture() -> (GeoRaster, PatchGrid) {
        use crate::raster::{build_grid, AoiKind, AreaOfInterest, GeoTransform};
        let geo = GeoTransform { origin_lon: 20.0, origin_lat: 40.0, pixel_deg: 1e-5 };
        let raster =
            GeoRaster::new(256, 256, 3, vec![0u8; 256 * 256 * 3], geo, date("2021-01-01"), "e").unwrap();
        let ring: Vec<(f64, f64)> = [(-1.0, -1.0), (1e4, -1.0), (1e4, 1e4), (-1.0, 1e4), (-1.0, -1.0)]
            .iter()
            .map(|&(x, y)| geo.pixel_to_lonlat(x, y))
            .collect();
        let aoi = AreaOfInterest::new(AoiKind::PopulatedArea, vec![ring]).unwrap();
        let grid = build_grid(&raster, &[aoi]).unwrap();
        (raster, grid)
    }

    #[test]
    fn event_binds_to_next_image_date() {
        let (raster, grid) = event_fixture();
        let dates = image_dates(6);
        let (lon, lat) = raster.geo.pixel_to_lonlat(32.0, 32.0);
        // Between image 2 (day 40) and image 3 (day 60).
        let events = vec![EventRecord {
            lon,
            lat,
            date: dates[2] + chrono::Duration::days(7),
            event_type: "shelling".into(),
        }];
        let mapped = map_events(&events, &grid, &raster, &dates);
        assert_eq!(mapped.first_event[&PatchId::new(0, 0)], 3);
        assert_eq!(mapped.dropped, 0);
    }

    #[test]
    fn event_outside_grid_is_dropped_with_count() {
        let (raster, grid) = event_fixture();
        let dates = image_dates(4);
        let events = vec![EventRecord {
            lon: raster.geo.origin_lon - 1.0,
            lat: raster.geo.origin_lat,
            date: dates[1],
            event_type: "airstrike".into(),
        }];
        let mapped = map_events(&events, &grid, &raster, &dates);
        assert!(mapped.first_event.is_empty());
        assert_eq!(mapped.dropped, 1);
    }

    #[test]
    fn multiple_events_keep_the_earliest_and_late_events_drop() {
        let (raster, grid) = event_fixture();
        let dates = image_dates(6);
        let (lon, lat) = raster.geo.pixel_to_lonlat(100.0, 100.0);
        let mk = |d: NaiveDate| EventRecord { lon, lat, date: d, event_type: "raid".into() };
        let events = vec![
            mk(dates[4]),
            mk(dates[1]),
            mk(*dates.last().unwrap() + chrono::Duration::days(1)),
        ];
        let mapped = map_events(&events, &grid, &raster, &dates);
        assert_eq!(mapped.first_event[&PatchId::new(1, 1)], 1);
        assert_eq!(mapped.dropped, 1);
    }

    #[test]
    fn random_events_match_brute_force_binding_oracle() {
        let (raster, grid) = event_fixture();
        let dates = image_dates(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let events: Vec<EventRecord> = (0..100)
            .map(|_| {
                let x = rng.gen_range(-30.0..300.0);
                let y = rng.gen_range(-30.0..300.0);
                let (lon, lat) = raster.geo.pixel_to_lonlat(x, y);
                let day = rng.gen_range(-10i64..180);
                EventRecord {
                    lon,
                    lat,
                    date: dates[0] + chrono::Duration::days(day),
                    event_type: "strike".into(),
                }
            })
            .collect();
        let mapped = map_events(&events, &grid, &raster, &dates);

        // Oracle: recompute per patch by full enumeration.
        let mut oracle: BTreeMap<PatchId, usize> = BTreeMap::new();
        let mut oracle_dropped = 0;
        for e in &events {
            let (x, y) = raster.geo.lonlat_to_pixel(e.lon, e.lat);
            let inside = x >= 0.0 && y >= 0.0 && x < 256.0 && y < 256.0;
            let idx = dates.iter().position(|d| *d >= e.date);
            match (inside, idx) {
                (true, Some(idx)) => {
                    let id = PatchId::new(y as u32 / 64, x as u32 / 64);
                    oracle.entry(id).and_modify(|v| *v = (*v).min(idx)).or_insert(idx);
                }
                _ => oracle_dropped += 1,
            }
        }
        assert_eq!(mapped.first_event, oracle);
        assert_eq!(mapped.dropped, oracle_dropped);
    }

    // --- design ------------------------------------------------------------

    fn synthetic_panel(
        n_patches: usize,
        n_dates: usize,
        events: &BTreeMap<u32, usize>,
        effect: impl Fn(i64) -> f64,
        noise: f64,
        seed: u64,
    ) -> EventPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_fx: Vec<f64> = (0..n_patches).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let date_fx: Vec<f64> = (0..n_dates).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut observations = Vec::new();
        for p in 0..n_patches {
            for t in 0..n_dates {
                let rel = events.get(&(p as u32)).map(|&e| t as i64 - e as i64);
                let outcome = patch_fx[p]
                    + date_fx[t]
                    + rel.map_or(0.0, &effect)
                    + if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
                observations.push(Observation {
                    patch: p as u32,
                    time: t as u32,
                    outcome,
                    event_time: rel.and_then(bin_of),
                });
            }
        }
        EventPanel::from_observations(observations, n_patches, n_dates)
    }

    #[test]
    fn design_bins_cover_window_with_reference_before() {
        // Patch with event at index 10 in a 22-date panel.
        let mut events = BTreeMap::new();
        events.insert(0u32, 10usize);
        let panel = synthetic_panel(2, 22, &events, |_| 0.0, 0.0, 1);
        let treated: Vec<&Observation> =
            panel.observations.iter().filter(|o| o.patch == 0).collect();
        for obs in &treated {
            let rel = obs.time as i64 - 10;
            if rel <= -6 {
                assert_eq!(obs.event_time, None, "t={}", obs.time);
            } else if rel >= 5 {
                assert_eq!(obs.event_time, Some(5));
            } else {
                assert_eq!(obs.event_time, Some(rel as i32));
            }
        }
        // Event-free patch: no indicators anywhere.
        assert!(panel.observations.iter().filter(|o| o.patch == 1).all(|o| o.event_time.is_none()));
    }

    #[test]
    fn event_at_first_image_date_has_lags_only() {
        let mut events = BTreeMap::new();
        events.insert(0u32, 0usize);
        let panel = synthetic_panel(2, 8, &events, |_| 0.0, 0.0, 1);
        for obs in panel.observations.iter().filter(|o| o.patch == 0) {
            let bin = obs.event_time.unwrap();
            assert!(bin >= 0, "lead bin {bin} observed for an event at the first date");
        }
    }

    // --- within transform ---------------------------------------------------

    #[test]
    fn fixed_effects_absorb_additive_patch_and_date_structure() {
        let events = BTreeMap::new();
        let panel = synthetic_panel(20, 10, &events, |_| 0.0, 0.0, 7);
        let system = within_transform(&panel).unwrap();
        for v in &system.y {
            assert!(v.abs() < 1e-9, "residual outcome {v}");
        }
    }

    #[test]
    fn post_transform_group_means_vanish() {
        let mut events = BTreeMap::new();
        events.insert(3u32, 4usize);
        events.insert(11u32, 6usize);
        let panel = synthetic_panel(30, 12, &events, |rel| if rel >= 0 { 0.3 } else { 0.0 }, 0.05, 9);
        let system = within_transform(&panel).unwrap();
        let cols = N_BINS;
        for (label, count, key) in [
            ("patch", panel.n_patches, (|o: &Observation| o.patch as usize) as fn(&Observation) -> usize),
            ("date", panel.n_dates, (|o: &Observation| o.time as usize) as fn(&Observation) -> usize),
        ] {
            let mut sums = vec![0.0f64; count];
            let mut ns = vec![0usize; count];
            for (i, obs) in panel.observations.iter().enumerate() {
                sums[key(obs)] += system.y[i];
                ns[key(obs)] += 1;
            }
            for g in 0..count {
                let mean = sums[g] / ns[g] as f64;
                assert!(mean.abs() <= 1e-8, "{label} mean {mean}");
            }
            for c in 0..cols {
                let mut sums = vec![0.0f64; count];
                for (i, obs) in panel.observations.iter().enumerate() {
                    sums[key(obs)] += system.x[i * cols + c];
                }
                for g in 0..count {
                    let mean = sums[g] / ns[g] as f64;
                    assert!(mean.abs() <= 1e-8, "{label} indicator {c} mean {mean}");
                }
            }
        }
    }

    #[test]
    fn single_patch_panel_is_rejected() {
        let mut events = BTreeMap::new();
        events.insert(0u32, 3usize);
        let panel = synthetic_panel(1, 8, &events, |_| 0.0, 0.0, 3);
        assert!(matches!(within_transform(&panel), Err(Error::Input(_))));
    }

    #[test]
    fn single_patch_demeaning_pass_equals_one_way_within_transform() {
        // For one patch the patch-demeaning pass is exactly the classic
        // one-way within transform: subtract the patch's time average.
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let outcomes: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let observations: Vec<Observation> = outcomes
            .iter()
            .enumerate()
            .map(|(t, &outcome)| Observation { patch: 0, time: t as u32, outcome, event_time: None })
            .collect();
        let mut data: Vec<f64> = outcomes.clone();
        subtract_group_means(&observations, &mut data, 1, 1, |o| o.patch as usize);
        let mean: f64 = outcomes.iter().sum::<f64>() / outcomes.len() as f64;
        for (got, want) in data.iter().zip(outcomes.iter().map(|v| v - mean)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    // --- estimation ----------------------------------------------------------

    #[test]
    fn least_squares_solver_recovers_exact_solutions() {
        // Tiny diagonal case first.
        let x = vec![2.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let y = vec![2.0, 1.0, 0.0];
        let beta = householder_solve(&x, &y, 3, 2).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-12 && (beta[1] - 1.0).abs() < 1e-12, "{beta:?}");

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let n = 60usize;
            let beta_true: Vec<f64> = (0..N_BINS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..n * N_BINS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n)
                .map(|i| x[i * N_BINS..(i + 1) * N_BINS].iter().zip(&beta_true).map(|(a, b)| a * b).sum())
                .collect();
            let system = DemeanedSystem { x, y, n_obs: n, sweeps: 1 };
            let beta = solve_least_squares(&system).unwrap();
            for (got, want) in beta.iter().zip(&beta_true) {
                assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
            }
        }
    }

    fn staggered_events(n_treated: usize, n_patches: usize, base: usize, seed: u64) -> BTreeMap<u32, usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events = BTreeMap::new();
        let mut ids: Vec<u32> = (0..n_patches as u32).collect();
        for k in 0..n_treated {
            let j = rng.gen_range(k..ids.len());
            ids.swap(k, j);
            events.insert(ids[k], base + rng.gen_range(0..5));
        }
        events
    }

    #[test]
    fn persistent_jump_is_recovered_within_ten_percent() {
        let events = staggered_events(50, 500, 8, 21);
        let panel = synthetic_panel(
            500,
            22,
            &events,
            |rel| if rel >= 0 { 0.2 } else { 0.0 },
            0.01,
            22,
        );
        let result = estimate(&panel).unwrap();
        for bin in -EVENT_WINDOW..0 {
            let beta = result.coefficients[&bin];
            assert!(beta.abs() <= 0.01, "lead {bin}: {beta}");
        }
        for bin in 0..=EVENT_WINDOW {
            let beta = result.coefficients[&bin];
            assert!((beta - 0.2).abs() <= 0.02, "lag {bin}: {beta}");
        }
        assert_eq!(result.coefficients[&-6], 0.0);
    }

    #[test]
    fn zero_outcome_gives_zero_coefficients() {
        let events = staggered_events(10, 60, 6, 2);
        let mut panel = synthetic_panel(60, 16, &events, |_| 0.0, 0.0, 2);
        for o in &mut panel.observations {
            o.outcome = 0.0;
        }
        let result = estimate(&panel).unwrap();
        for (_, beta) in result.coefficients.iter() {
            assert!(beta.abs() < 1e-12);
        }
    }

    #[test]
    fn estimates_are_invariant_to_observation_order() {
        let events = staggered_events(15, 80, 7, 5);
        let panel = synthetic_panel(80, 18, &events, |rel| if rel >= 0 { 0.1 } else { 0.0 }, 0.02, 5);
        let mut shuffled = panel.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        use rand::seq::SliceRandom;
        shuffled.observations.shuffle(&mut rng);
        let a = estimate(&panel).unwrap();
        let b = estimate(&shuffled).unwrap();
        for bin in -EVENT_WINDOW..=EVENT_WINDOW {
            // Identical up to float summation order and pivot choices.
            assert!(
                (a.coefficients[&bin] - b.coefficients[&bin]).abs() < 1e-7,
                "bin {bin} differs across orderings: {} vs {}",
                a.coefficients[&bin],
                b.coefficients[&bin]
            );
        }
    }

    #[test]
    fn estimates_are_invariant_to_added_patch_and_date_constants() {
        let events = staggered_events(12, 70, 7, 8);
        let panel = synthetic_panel(70, 16, &events, |rel| if rel >= 0 { 0.15 } else { 0.0 }, 0.02, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patch_shift: Vec<f64> = (0..70).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let date_shift: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut shifted = panel.clone();
        for o in &mut shifted.observations {
            o.outcome += patch_shift[o.patch as usize] + date_shift[o.time as usize];
        }
        let a = estimate(&panel).unwrap();
        let b = estimate(&shifted).unwrap();
        for bin in -EVENT_WINDOW..=EVENT_WINDOW {
            assert!(
                (a.coefficients[&bin] - b.coefficients[&bin]).abs() < 1e-8,
                "bin {bin} moved under fixed-effect shifts"
            );
        }
    }

    #[test]
    fn null_simulations_stay_within_three_standard_errors_of_zero() {
        let mut per_bin: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
        for rep in 0..100u64 {
            let events = staggered_events(8, 40, 6, 300 + rep);
            let panel = synthetic_panel(40, 14, &events, |_| 0.0, 0.05, 400 + rep);
            let result = estimate(&panel).unwrap();
            for bin in -EVENT_WINDOW..=EVENT_WINDOW {
                per_bin.entry(bin).or_default().push(result.coefficients[&bin]);
            }
        }
        for (bin, draws) in &per_bin {
            let n = draws.len() as f64;
            let mean: f64 = draws.iter().sum::<f64>() / n;
            let var: f64 = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!(mean.abs() <= 3.0 * se, "bin {bin}: mean {mean} vs se {se}");
        }
    }

    #[test]
    fn unidentified_design_raises_a_collinearity_error_naming_a_bin() {
        // Events at the very first date leave treated patches with no
        // reference periods: the lead columns are all zero and the lag
        // indicators sum to the patch fixed effect, so the design is rank
        // deficient and the solver must name an offending bin.
        let mut events = BTreeMap::new();
        events.insert(0u32, 0usize);
        events.insert(1u32, 0usize);
        let panel = synthetic_panel(30, 10, &events, |rel| if rel >= 0 { 0.2 } else { 0.0 }, 0.01, 4);
        match estimate(&panel) {
            Err(Error::Collinearity { bin }) => {
                assert!((-EVENT_WINDOW..=EVENT_WINDOW).contains(&bin), "bin {bin} out of range")
            }
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }

    #[test]
    fn coefficients_csv_includes_reference_row() {
        let events = staggered_events(10, 50, 6, 6);
        let panel = synthetic_panel(50, 14, &events, |rel| if rel >= 0 { 0.1 } else { 0.0 }, 0.02, 6);
        let result = estimate(&panel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coef.csv");
        result.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("bin,coefficient\n-6,0\n"));
        assert_eq!(text.lines().count(), 13); // header + 12 bins
    }
}
