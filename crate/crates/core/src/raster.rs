//! Georeferenced imagery, analysis polygons, and the fixed 64x64 patch grid.
//!
//! All rasters of one city form a co-registered stack: identical dimensions
//! and affine transform, one capture date each. The grid decomposes the
//! raster into non-overlapping 64x64 windows; a patch belongs to the
//! analysis set iff its window center falls inside a populated-area polygon
//! (even-odd rule), and is flagged no-analysis iff the center also falls
//! inside a no-analysis zone.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of an analysis patch, in pixels.
pub const PATCH_SIZE: usize = 64;

/// Grid coordinates of a patch: `(row, col)` in window units.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct PatchId {
    pub row: u32,
    pub col: u32,
}

impl PatchId {
    pub fn new(row: u32, col: u32) -> Self {
        PatchId { row, col }
    }
}

impl std::fmt::Display for PatchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// Axis-aligned, north-up affine georeference.
///
/// `lon = origin_lon + x * pixel_deg`, `lat = origin_lat - y * pixel_deg`,
/// with `(x, y)` in continuous pixel coordinates and the origin at the
/// top-left corner of pixel (0, 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub pixel_deg: f64,
}

impl GeoTransform {
    pub fn pixel_to_lonlat(&self, x: f64, y: f64) -> (f64, f64) {
        (self.origin_lon + x * self.pixel_deg, self.origin_lat - y * self.pixel_deg)
    }

    pub fn lonlat_to_pixel(&self, lon: f64, lat: f64) -> (f64, f64) {
        ((lon - self.origin_lon) / self.pixel_deg, (self.origin_lat - lat) / self.pixel_deg)
    }
}

/// One georeferenced 8-bit RGB image of a city at a capture date.
#[derive(Clone, Debug)]
pub struct GeoRaster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved intensities, length `width * height * channels`.
    pub pixels: Vec<u8>,
    pub geo: GeoTransform,
    pub capture_date: NaiveDate,
    pub city_id: String,
}

impl GeoRaster {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<u8>,
        geo: GeoTransform,
        capture_date: NaiveDate,
        city_id: impl Into<String>,
    ) -> Result<Self> {
        if pixels.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "pixel buffer length {} does not match {}x{}x{}",
                pixels.len(),
                width,
                height,
                channels
            )));
        }
        if !(geo.pixel_deg > 0.0) {
            return Err(Error::Config(format!("pixel size must be positive, got {}", geo.pixel_deg)));
        }
        Ok(GeoRaster { width, height, channels, pixels, geo, capture_date, city_id: city_id.into() })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// True if `other` shares this raster's dimensions and affine transform.
    pub fn co_registered_with(&self, other: &GeoRaster) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
            && self.geo == other.geo
    }

    /// Write the image as 8-bit RGB PNG plus a `.json` georeference sidecar
    /// next to it.
    pub fn write_png_with_sidecar(&self, png_path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Dimension(format!("PNG export expects 3 channels, got {}", self.channels)));
        }
        let file = File::create(png_path).map_err(|e| Error::io(png_path, e))?;
        let writer = BufWriter::new(file);
        let encoder = image::codecs::png::PngEncoder::new_with_quality(
            writer,
            image::codecs::png::CompressionType::Fast,
            image::codecs::png::FilterType::Up,
        );
        use image::ImageEncoder;
        encoder
            .write_image(&self.pixels, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::format(png_path, format!("PNG encode failed: {e}")))?;

        let sidecar = RasterSidecar {
            origin_lon: self.geo.origin_lon,
            origin_lat: self.geo.origin_lat,
            pixel_deg: self.geo.pixel_deg,
            capture_date: self.capture_date,
            city_id: self.city_id.clone(),
        };
        let sidecar_path = sidecar_path_for(png_path);
        let mut out = BufWriter::new(File::create(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?);
        serde_json::to_writer_pretty(&mut out, &sidecar)
            .map_err(|e| Error::format(&sidecar_path, e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(&sidecar_path, e))?;
        Ok(())
    }

    /// Read a PNG written by [`GeoRaster::write_png_with_sidecar`] together
    /// with its georeference sidecar.
    pub fn read_png_with_sidecar(png_path: &Path) -> Result<Self> {
        let file = File::open(png_path).map_err(|e| Error::io(png_path, e))?;
        let reader = BufReader::new(file);
        let img = image::load(reader, image::ImageFormat::Png)
            .map_err(|e| Error::format(png_path, format!("PNG decode failed: {e}")))?
            .into_rgb8();
        let (width, height) = (img.width() as usize, img.height() as usize);
        let pixels = img.into_raw();

        let sidecar_path = sidecar_path_for(png_path);
        let file = File::open(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let sidecar: RasterSidecar = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(&sidecar_path, e.to_string()))?;

        GeoRaster::new(
            width,
            height,
            3,
            pixels,
            GeoTransform {
                origin_lon: sidecar.origin_lon,
                origin_lat: sidecar.origin_lat,
                pixel_deg: sidecar.pixel_deg,
            },
            sidecar.capture_date,
            sidecar.city_id,
        )
    }
}

/// Georeference sidecar stored next to each PNG.
#[derive(Debug, Serialize, Deserialize)]
struct RasterSidecar {
    origin_lon: f64,
    origin_lat: f64,
    pixel_deg: f64,
    capture_date: NaiveDate,
    city_id: String,
}

/// `foo.png` -> `foo.json`
pub fn sidecar_path_for(png_path: &Path) -> std::path::PathBuf {
    png_path.with_extension("json")
}

/// Polygon role in the analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AoiKind {
    PopulatedArea,
    NoAnalysisZone,
}

/// A set of closed lon/lat rings sharing one role. Point membership uses the
/// even-odd rule over all rings, so interior rings act as holes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AreaOfInterest {
    pub kind: AoiKind,
    pub rings: Vec<Vec<(f64, f64)>>,
}

impl AreaOfInterest {
    pub fn new(kind: AoiKind, rings: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        for (i, ring) in rings.iter().enumerate() {
            if ring.len() < 4 {
                return Err(Error::Config(format!(
                    "ring {i} has {} vertices, need at least 4 (closed)",
                    ring.len()
                )));
            }
            if ring.first() != ring.last() {
                return Err(Error::Config(format!("ring {i} is not closed (first vertex != last)")));
            }
            if ring_self_intersects(ring) {
                return Err(Error::Config(format!("ring {i} is self-intersecting")));
            }
        }
        Ok(AreaOfInterest { kind, rings })
    }

    /// Even-odd containment over all rings of this AOI.
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        let mut crossings = 0usize;
        for ring in &self.rings {
            for w in ring.windows(2) {
                let (x1, y1) = w[0];
                let (x2, y2) = w[1];
                // Half-open rule on the vertical span avoids double counting
                // at shared vertices.
                if (y1 > lat) != (y2 > lat) {
                    let x_at = x1 + (lat - y1) / (y2 - y1) * (x2 - x1);
                    if lon < x_at {
                        crossings += 1;
                    }
                }
            }
        }
        crossings % 2 == 1
    }

    /// Read a JSON array of `{kind, rings}` objects.
    pub fn read_json_list(path: &Path) -> Result<Vec<AreaOfInterest>> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let raw: Vec<AreaOfInterest> =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
        raw.into_iter().map(|a| AreaOfInterest::new(a.kind, a.rings)).collect()
    }

    pub fn write_json_list(path: &Path, aois: &[AreaOfInterest]) -> Result<()> {
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        serde_json::to_writer_pretty(&mut out, aois).map_err(|e| Error::format(path, e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Proper-crossing test between non-adjacent edges. Collinear overlaps are
/// not detected; analysis polygons are expected to be in general position.
fn ring_self_intersects(ring: &[(f64, f64)]) -> bool {
    let n = ring.len() - 1; // closed: last vertex repeats the first
    for i in 0..n {
        for j in (i + 1)..n {
            // skip adjacent edges (they share an endpoint)
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_cross(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return true;
            }
        }
    }
    false
}

fn segments_cross(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let orient = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| -> f64 {
        (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
    };
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    (o1 * o2 < 0.0) && (o3 * o4 < 0.0)
}

/// Non-overlapping 64x64 tiling of a city raster with AOI membership flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub city_id: String,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    included: BTreeSet<PatchId>,
    no_analysis: BTreeSet<PatchId>,
}

impl PatchGrid {
    pub fn included(&self) -> &BTreeSet<PatchId> {
        &self.included
    }

    pub fn no_analysis(&self) -> &BTreeSet<PatchId> {
        &self.no_analysis
    }

    pub fn is_included(&self, id: PatchId) -> bool {
        self.included.contains(&id)
    }

    pub fn is_no_analysis(&self, id: PatchId) -> bool {
        self.no_analysis.contains(&id)
    }

    /// Top-left pixel of the patch window.
    pub fn window_origin(&self, id: PatchId) -> (usize, usize) {
        (id.col as usize * self.patch_size, id.row as usize * self.patch_size)
    }

    /// Window center in continuous pixel coordinates.
    pub fn window_center(&self, id: PatchId) -> (f64, f64) {
        let (x0, y0) = self.window_origin(id);
        (x0 as f64 + self.patch_size as f64 / 2.0, y0 as f64 + self.patch_size as f64 / 2.0)
    }

    /// Export every grid cell with its membership flags.
    /// Columns: `city_id,row,col,included,no_analysis`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["city_id", "row", "col", "included", "no_analysis"])
            .map_err(|e| Error::format(path, e.to_string()))?;
        for row in 0..self.rows as u32 {
            for col in 0..self.cols as u32 {
                let id = PatchId::new(row, col);
                w.write_record([
                    self.city_id.as_str(),
                    &row.to_string(),
                    &col.to_string(),
                    if self.included.contains(&id) { "true" } else { "false" },
                    if self.no_analysis.contains(&id) { "true" } else { "false" },
                ])
                .map_err(|e| Error::format(path, e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<PatchGrid> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut city_id = String::new();
        let mut rows = 0usize;
        let mut cols = 0usize;
        let mut included = BTreeSet::new();
        let mut no_analysis = BTreeSet::new();
        for rec in r.deserialize() {
            let rec: GridRow = rec.map_err(|e| Error::format(path, e.to_string()))?;
            city_id = rec.city_id;
            rows = rows.max(rec.row as usize + 1);
            cols = cols.max(rec.col as usize + 1);
            let id = PatchId::new(rec.row, rec.col);
            if rec.included {
                included.insert(id);
            }
            if rec.no_analysis {
                no_analysis.insert(id);
            }
        }
        if rows == 0 || cols == 0 {
            return Err(Error::format(path, "empty grid file"));
        }
        Ok(PatchGrid { city_id, patch_size: PATCH_SIZE, rows, cols, included, no_analysis })
    }
}

#[derive(Deserialize)]
struct GridRow {
    city_id: String,
    row: u32,
    col: u32,
    included: bool,
    no_analysis: bool,
}

/// The two 64x64x3 crops compared by the change detector.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub patch_id: PatchId,
    pub pre_pixels: Vec<u8>,
    pub post_pixels: Vec<u8>,
    pub post_date: NaiveDate,
}

/// Tile the raster into 64x64 windows and classify each window by its
/// center point: included iff the center lies inside any populated-area
/// AOI, no-analysis iff it also lies inside any no-analysis zone.
/// Partial windows at the right/bottom edges are dropped.
pub fn build_grid(raster: &GeoRaster, aois: &[AreaOfInterest]) -> Result<PatchGrid> {
    if raster.width < PATCH_SIZE || raster.height < PATCH_SIZE {
        return Err(Error::Dimension(format!(
            "raster {}x{} is smaller than one {}x{} patch",
            raster.width, raster.height, PATCH_SIZE, PATCH_SIZE
        )));
    }
    if aois.is_empty() {
        return Err(Error::Config("no areas of interest supplied".into()));
    }
    let populated: Vec<&AreaOfInterest> = aois.iter().filter(|a| a.kind == AoiKind::PopulatedArea).collect();
    if populated.is_empty() {
        return Err(Error::Config("at least one populated-area AOI is required".into()));
    }
    let no_analysis_zones: Vec<&AreaOfInterest> =
        aois.iter().filter(|a| a.kind == AoiKind::NoAnalysisZone).collect();

    let rows = raster.height / PATCH_SIZE;
    let cols = raster.width / PATCH_SIZE;
    let mut included = BTreeSet::new();
    let mut no_analysis = BTreeSet::new();
    for row in 0..rows as u32 {
        for col in 0..cols as u32 {
            let cx = col as f64 * PATCH_SIZE as f64 + PATCH_SIZE as f64 / 2.0;
            let cy = row as f64 * PATCH_SIZE as f64 + PATCH_SIZE as f64 / 2.0;
            let (lon, lat) = raster.geo.pixel_to_lonlat(cx, cy);
            if populated.iter().any(|a| a.contains(lon, lat)) {
                let id = PatchId::new(row, col);
                included.insert(id);
                if no_analysis_zones.iter().any(|a| a.contains(lon, lat)) {
                    no_analysis.insert(id);
                }
            }
        }
    }
    Ok(PatchGrid {
        city_id: raster.city_id.clone(),
        patch_size: PATCH_SIZE,
        rows,
        cols,
        included,
        no_analysis,
    })
}

/// Map a lon/lat coordinate to the included patch whose pixel window
/// contains it, or `None` if it falls outside the raster or outside the
/// included set.
pub fn point_to_patch(grid: &PatchGrid, raster: &GeoRaster, lon: f64, lat: f64) -> Option<PatchId> {
    if !lon.is_finite() || !lat.is_finite() {
        return None;
    }
    let (x, y) = raster.geo.lonlat_to_pixel(lon, lat);
    if x < 0.0 || y < 0.0 {
        return None;
    }
    let (px, py) = (x.floor() as usize, y.floor() as usize);
    if px >= raster.width || py >= raster.height {
        return None;
    }
    let id = PatchId::new((py / grid.patch_size) as u32, (px / grid.patch_size) as u32);
    grid.is_included(id).then_some(id)
}

/// Crop the pre and post 64x64x3 windows for one included patch. Pixel
/// values are copied untouched.
pub fn extract_sample(pre: &GeoRaster, post: &GeoRaster, grid: &PatchGrid, id: PatchId) -> Result<PatchSample> {
    if !grid.is_included(id) {
        return Err(Error::Lookup(format!("patch {id} is not in the included set")));
    }
    if !pre.co_registered_with(post) {
        return Err(Error::Config(format!(
            "pre ({}) and post ({}) rasters are not co-registered",
            pre.capture_date, post.capture_date
        )));
    }
    Ok(PatchSample {
        patch_id: id,
        pre_pixels: crop(pre, grid, id),
        post_pixels: crop(post, grid, id),
        post_date: post.capture_date,
    })
}

fn crop(raster: &GeoRaster, grid: &PatchGrid, id: PatchId) -> Vec<u8> {
    let (x0, y0) = grid.window_origin(id);
    let ps = grid.patch_size;
    let ch = raster.channels;
    let mut out = Vec::with_capacity(ps * ps * ch);
    for y in y0..y0 + ps {
        let start = (y * raster.width + x0) * ch;
        out.extend_from_slice(&raster.pixels[start..start + ps * ch]);
    }
    out
}
