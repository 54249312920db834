//! Synthetic multi-date city imagery with a known building-level
//! destruction schedule — the ground-truth oracle for end-to-end tests.
//!
//! A city is a jittered lattice of textured building rectangles separated
//! by streets and parks. A spatially clustered subset of buildings is
//! assigned destruction dates; renders draw those buildings as rubble
//! scatter from their destruction date onward, apply a per-date global
//! illumination shift (temporal domain bias) and additive pixel noise.
//! Everything is a pure function of the seed, so renders are byte-stable.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labels::{Annotation, DamageClass, Label, LabelPanel};
use crate::raster::{GeoRaster, GeoTransform, PatchGrid, PatchId};
use crate::seeds;

/// Lattice cell side in pixels; one building fits per cell.
pub const CELL: usize = 32;
/// Street strips run along every second cell boundary.
const STREET_PERIOD: usize = 2 * CELL;
const STREET_HALF_WIDTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Building {
    pub id: u32,
    /// Footprint in pixels, `[x0, x0+w) x [y0, y0+h)`.
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub base_color: [u8; 3],
}

impl Building {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.x0 as f64 + self.w as f64 / 2.0, self.y0 as f64 + self.h as f64 / 2.0)
    }
}

/// Procedurally generated city with a destruction schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct CityModel {
    pub extent: usize,
    pub buildings: Vec<Building>,
    /// Park cells as (cell_x, cell_y).
    pub parks: Vec<(usize, usize)>,
    /// Building id -> date index (1-based; index 0 is the pre image).
    pub destruction_schedule: BTreeMap<u32, usize>,
    pub date_count: usize,
    pub seed: u64,
    /// Seeded shift of the whole street/building layout in pixels, so
    /// buildings straddle analysis-patch boundaries.
    pub layout_offset: (usize, usize),
}

/// Rubble-scatter texture parameters for destroyed buildings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RubbleParams {
    /// Side of one gray debris fragment in pixels.
    pub fragment_size: usize,
    /// Multiplicative shadow darkening over the footprint.
    pub darkening: f64,
    /// Fraction of debris gray in each fragment; the rest keeps the
    /// facade color, so low values make collapse subtle.
    pub gray_mix: f64,
}

impl Default for RubbleParams {
    fn default() -> Self {
        RubbleParams { fragment_size: 3, darkening: 0.8, gray_mix: 0.65 }
    }
}

/// Rendering schedule and nuisance parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    /// Total image count including the date-0 pre image.
    pub date_count: usize,
    /// Which date indices carry annotations (sparse, e.g. 4 of 23).
    pub annotation_date_indices: Vec<usize>,
    /// Amplitude of the per-date brightness/contrast jitter (0 disables).
    pub illumination_shift: f64,
    /// Additive uniform pixel noise amplitude in intensity units.
    pub noise_sigma: f64,
    pub rubble: RubbleParams,
    pub start_date: NaiveDate,
    pub interval_days: i64,
    pub city_id: String,
}

impl RenderSpec {
    pub fn validate(&self, city: &CityModel) -> Result<()> {
        if self.date_count != city.date_count {
            return Err(Error::Config(format!(
                "render spec covers {} dates, city declares {}",
                self.date_count, city.date_count
            )));
        }
        if let Some(&bad) = self.annotation_date_indices.iter().find(|&&i| i >= self.date_count) {
            return Err(Error::Config(format!(
                "annotation date index {bad} outside [0, {})",
                self.date_count
            )));
        }
        if self.rubble.fragment_size == 0 {
            return Err(Error::Config("rubble fragment size must be positive".into()));
        }
        Ok(())
    }

    pub fn date_for(&self, index: usize) -> NaiveDate {
        self.start_date + chrono::Duration::days(self.interval_days * index as i64)
    }
}

/// The fixed georeference shared by all renders of a city.
pub fn city_geo_transform() -> GeoTransform {
    GeoTransform { origin_lon: 37.05, origin_lat: 36.25, pixel_deg: 5e-6 }
}

fn hash2(seed: u64, a: u64) -> u64 {
    seeds::splitmix64(seed ^ seeds::splitmix64(a))
}

fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    seeds::splitmix64(hash2(seed, a) ^ seeds::splitmix64(b.wrapping_add(0x51ED_270B)))
}

/// Uniform value in [0,1) from a hash.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Generate a city. Buildings sit on a jittered lattice clear of streets
/// and parks; `destruction_share` of them (spatially clustered when
/// `clustered`) receive destruction dates in `[1, date_count)`.
pub fn generate_city_with(
    extent: usize,
    building_density: f64,
    destruction_share: f64,
    date_count: usize,
    seed: u64,
    clustered: bool,
) -> Result<CityModel> {
    if !(0.0..=1.0).contains(&destruction_share) {
        return Err(Error::Config(format!("destruction share must be in [0,1], got {destruction_share}")));
    }
    if !(building_density > 0.0 && building_density <= 1.0) {
        return Err(Error::Config(format!("building density must be in (0,1], got {building_density}")));
    }
    if date_count < 2 {
        return Err(Error::Config("need at least a pre date and one post date".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0));
    // Shift the whole town off the analysis grid so building footprints
    // straddle patch boundaries (labels attach to the centroid patch, so
    // neighbors see partial rubble).
    let layout_offset = (rng.gen_range(0..2 * CELL), rng.gen_range(0..2 * CELL));
    let cells_x = extent.saturating_sub(layout_offset.0) / CELL;
    let cells_y = extent.saturating_sub(layout_offset.1) / CELL;
    let cells = cells_x.min(cells_y);
    if cells == 0 {
        return Err(Error::Config(format!(
            "extent {extent} cannot host any {CELL}-pixel lattice cell"
        )));
    }

    let mut parks = Vec::new();
    let mut buildings = Vec::new();
    let mut cell_of_building = Vec::new();
    for cy in 0..cells {
        for cx in 0..cells {
            if rng.gen::<f64>() < 0.04 {
                parks.push((cx, cy));
                continue;
            }
            if rng.gen::<f64>() >= building_density {
                continue;
            }
            let jx = rng.gen_range(0..4usize);
            let jy = rng.gen_range(0..4usize);
            let w = rng.gen_range(12..=17usize);
            let h = rng.gen_range(12..=17usize);
            let color = [
                rng.gen_range(130..=220u8),
                rng.gen_range(120..=200u8),
                rng.gen_range(110..=190u8),
            ];
            buildings.push(Building {
                id: buildings.len() as u32,
                x0: layout_offset.0 + cx * CELL + 6 + jx,
                y0: layout_offset.1 + cy * CELL + 6 + jy,
                w,
                h,
                base_color: color,
            });
            cell_of_building.push((cx, cy));
        }
    }
    if buildings.is_empty() {
        return Err(Error::Config(format!(
            "density {building_density} yields no buildings on a {cells}x{cells} lattice"
        )));
    }

    let target = (destruction_share * buildings.len() as f64).round() as usize;
    let mut schedule: BTreeMap<u32, usize> = BTreeMap::new();
    let mut cluster_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 1));
    while schedule.len() < target {
        let base_date = cluster_rng.gen_range(1..date_count);
        if clustered {
            // One strike damages a handful of neighboring buildings; the
            // cap forces many clusters, which spreads destruction dates
            // across the timeline.
            let anchor = cluster_rng.gen_range(0..buildings.len());
            let radius = cluster_rng.gen_range(2..=4usize);
            let (ax, ay) = cell_of_building[anchor];
            let mut cluster_members = 0usize;
            for (idx, &(cx, cy)) in cell_of_building.iter().enumerate() {
                if schedule.len() >= target || cluster_members >= 8 {
                    break;
                }
                let dist = ax.abs_diff(cx).max(ay.abs_diff(cy));
                if dist <= radius
                    && !schedule.contains_key(&buildings[idx].id)
                    && cluster_rng.gen::<f64>() < 0.4
                {
                    let jitter = cluster_rng.gen_range(0..3usize);
                    let date = (base_date + jitter).min(date_count - 1);
                    schedule.insert(buildings[idx].id, date);
                    cluster_members += 1;
                }
            }
        } else {
            let idx = cluster_rng.gen_range(0..buildings.len());
            schedule.entry(buildings[idx].id).or_insert(base_date);
        }
    }

    Ok(CityModel {
        extent,
        buildings,
        parks,
        destruction_schedule: schedule,
        date_count,
        seed,
        layout_offset,
    })
}

/// Clustered-destruction variant used by default.
pub fn generate_city(
    extent: usize,
    building_density: f64,
    destruction_share: f64,
    date_count: usize,
    seed: u64,
) -> Result<CityModel> {
    generate_city_with(extent, building_density, destruction_share, date_count, seed, true)
}

/// Street strips run along the (offset) lattice boundaries.
fn is_street(x: usize, y: usize, offset: (usize, usize)) -> bool {
    let near = |v: usize, off: usize| {
        let m = (v + 2 * STREET_PERIOD - off) % STREET_PERIOD;
        !(STREET_HALF_WIDTH..STREET_PERIOD - STREET_HALF_WIDTH).contains(&m)
    };
    near(x, offset.0) || near(y, offset.1)
}

/// Render one date of the city as a georeferenced RGB raster.
pub fn render(city: &CityModel, spec: &RenderSpec, date_index: usize) -> Result<GeoRaster> {
    spec.validate(city)?;
    if date_index >= spec.date_count {
        return Err(Error::Config(format!(
            "date index {date_index} outside [0, {})",
            spec.date_count
        )));
    }
    let extent = city.extent;
    let (ox, oy) = city.layout_offset;
    let cells = extent / CELL + 1;

    // Cell -> building lookup (cells count from the layout offset).
    let mut cell_building: Vec<Option<u32>> = vec![None; cells * cells];
    for b in &city.buildings {
        let (cx, cy) = ((b.x0 - ox) / CELL, (b.y0 - oy) / CELL);
        cell_building[cy * cells + cx] = Some(b.id);
    }
    let mut park_cell = vec![false; cells * cells];
    for &(cx, cy) in &city.parks {
        park_cell[cy * cells + cx] = true;
    }

    // Per-date global illumination shift: brightness, contrast, a mild
    // per-channel color drift (atmospheric bias), and the sun angle that
    // places building shadows. With the shift disabled the sun is fixed,
    // so repeat renders of an unchanged scene are identical.
    let (brightness, contrast, channel_shift, sun) = if spec.illumination_shift > 0.0 {
        let h = hash2(seeds::derive(city.seed, 100), date_index as u64);
        let b = (unit(h) * 2.0 - 1.0) * spec.illumination_shift;
        let c = 1.0 + (unit(seeds::splitmix64(h)) * 2.0 - 1.0) * spec.illumination_shift / 160.0;
        let mut shift = [0.0f64; 3];
        for (ch, s) in shift.iter_mut().enumerate() {
            *s = (unit(hash2(h, ch as u64 + 7)) * 2.0 - 1.0) * spec.illumination_shift * 0.5;
        }
        let sun_x = 3 + (hash2(h, 11) % 6) as isize;
        let sun_y = 3 + (hash2(h, 13) % 6) as isize;
        let sun = (if hash2(h, 17) & 1 == 0 { sun_x } else { -sun_x }, sun_y);
        (b, c, shift, sun)
    } else {
        (0.0, 1.0, [0.0; 3], (5, 4))
    };

    let noise_seed = seeds::derive(city.seed, 200 + date_index as u64);
    let texture_seed = seeds::derive(city.seed, 300);
    let rubble_seed = seeds::derive(city.seed, 400);
    let frag = spec.rubble.fragment_size;

    let mut pixels = vec![0u8; extent * extent * 3];
    pixels
        .par_chunks_mut(extent * 3)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..extent {
                let in_lattice = x >= ox && y >= oy;
                let (cx, cy) = if in_lattice { ((x - ox) / CELL, (y - oy) / CELL) } else { (0, 0) };
                let in_lattice = in_lattice && cx < cells && cy < cells;
                let texture = unit(hash3(texture_seed, x as u64, y as u64));

                let building_at = || -> Option<&Building> {
                    let bid = cell_building[cy * cells + cx]?;
                    let b = &city.buildings[bid as usize];
                    b.contains(x, y).then_some(b)
                };
                // Shadow test: the sun-displaced point falls inside some
                // building footprint. Every building casts one (rubble
                // piles too), so shadows are pure nuisance; the per-date
                // sun angle moves them across the ground.
                let shadowed = || -> bool {
                    let qx = x as isize - sun.0;
                    let qy = y as isize - sun.1;
                    if qx < ox as isize || qy < oy as isize {
                        return false;
                    }
                    let (qx, qy) = (qx as usize, qy as usize);
                    let (qcx, qcy) = ((qx - ox) / CELL, (qy - oy) / CELL);
                    qcx < cells
                        && qcy < cells
                        && cell_building[qcy * cells + qcx]
                            .is_some_and(|bid| city.buildings[bid as usize].contains(qx, qy))
                };
                let shade_ground = |mut rgb: [f64; 3]| -> [f64; 3] {
                    if shadowed() {
                        for channel in &mut rgb {
                            *channel *= 0.55;
                        }
                    }
                    rgb
                };
                let rgb: [f64; 3] = if is_street(x, y, (ox, oy)) {
                    let v = 92.0 + texture * 10.0;
                    shade_ground([v, v, v + 4.0])
                } else if in_lattice && park_cell[cy * cells + cx] {
                    shade_ground([70.0 + texture * 20.0, 130.0 + texture * 25.0, 60.0 + texture * 15.0])
                } else if let Some(b) = in_lattice.then(building_at).flatten() {
                    let destroyed =
                        city.destruction_schedule.get(&b.id).is_some_and(|&d| date_index >= d);
                    // Per-building surface roughness: some roofs are as
                    // grainy as rubble, so texture alone is not diagnostic.
                    let rough = 3.0 + 20.0 * unit(hash2(texture_seed, b.id as u64 | 1 << 48));
                    let fx = ((x - b.x0) / frag) as u64;
                    let fy = ((y - b.y0) / frag) as u64;
                    let grain = unit(hash3(hash2(rubble_seed, b.id as u64), fx, fy)) * 2.0 - 1.0;
                    if destroyed {
                        // Collapsed: the roof gradient is gone; fragments mix
                        // debris gray with a memory of the facade color.
                        let g = 75.0 + (grain * 0.5 + 0.5) * 85.0;
                        let mix = spec.rubble.gray_mix;
                        b.base_color.map(|base| {
                            spec.rubble.darkening * (mix * g + (1.0 - mix) * f64::from(base) * 0.9)
                        })
                    } else {
                        // Roof shading: light falls from the top-left corner.
                        let dx = (x - b.x0) as f64 / b.w as f64;
                        let dy = (y - b.y0) as f64 / b.h as f64;
                        let shade = 1.1 - 0.25 * (dx + dy) / 2.0 + texture * 0.05;
                        b.base_color.map(|base| f64::from(base) * shade + grain * rough)
                    }
                } else {
                    // Bare ground.
                    let v = texture * 12.0;
                    shade_ground([172.0 + v, 162.0 + v, 140.0 + v])
                };

                for (c, v) in rgb.iter().enumerate() {
                    // Independent per-channel noise: color contrasts are as
                    // noisy as intensities, like a real sensor.
                    let noise = if spec.noise_sigma > 0.0 {
                        let h = hash3(noise_seed ^ (c as u64) << 56, x as u64, y as u64);
                        (unit(h) * 2.0 - 1.0) * spec.noise_sigma * 1.732
                    } else {
                        0.0
                    };
                    let adjusted = (v - 128.0) * contrast + 128.0 + brightness + channel_shift[c] + noise;
                    row[x * 3 + c] = adjusted.round().clamp(0.0, 255.0) as u8;
                }
            }
        });

    GeoRaster::new(
        extent,
        extent,
        3,
        pixels,
        city_geo_transform(),
        spec.date_for(date_index),
        spec.city_id.clone(),
    )
}

/// Cumulative destroyed-building annotations at each annotation date: one
/// point at the centroid of every building destroyed on or before it.
pub fn emit_annotations(city: &CityModel, spec: &RenderSpec) -> Result<Vec<Annotation>> {
    spec.validate(city)?;
    let geo = city_geo_transform();
    let mut out = Vec::new();
    let mut indices = spec.annotation_date_indices.clone();
    indices.sort_unstable();
    for &idx in &indices {
        for b in &city.buildings {
            if city.destruction_schedule.get(&b.id).is_some_and(|&d| d <= idx) {
                let (px, py) = b.centroid();
                let (lon, lat) = geo.pixel_to_lonlat(px, py);
                out.push(Annotation {
                    lon,
                    lat,
                    date: spec.date_for(idx),
                    damage_class: DamageClass::Destroyed,
                });
            }
        }
    }
    Ok(out)
}

/// Full-truth label panel: a patch is destroyed at date `t` iff the
/// centroid of some building destroyed by `t` falls inside its window.
/// No unknowns; no-analysis status is ignored.
pub fn ground_truth_panel(
    city: &CityModel,
    grid: &PatchGrid,
    image_dates: &[(usize, NaiveDate)],
) -> Result<LabelPanel> {
    let patches: Vec<PatchId> = grid.included().iter().copied().collect();
    let patch_index: BTreeMap<PatchId, usize> =
        patches.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let n_dates = image_dates.len();
    let mut labels = vec![Label::Intact; patches.len() * n_dates];
    for b in &city.buildings {
        let Some(&destroyed_at) = city.destruction_schedule.get(&b.id) else {
            continue;
        };
        let (px, py) = b.centroid();
        let id = PatchId::new(py as u32 / grid.patch_size as u32, px as u32 / grid.patch_size as u32);
        let Some(&pi) = patch_index.get(&id) else {
            continue;
        };
        for (di, &(idx, _)) in image_dates.iter().enumerate() {
            if idx >= destroyed_at {
                labels[pi * n_dates + di] = Label::Destroyed;
            }
        }
    }
    let dates: Vec<NaiveDate> = image_dates.iter().map(|&(_, d)| d).collect();
    LabelPanel::from_dense(patches, dates.clone(), dates, labels)
}
