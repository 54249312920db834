//! Pipeline stages. Each stage reads its inputs from disk artifacts,
//! writes its outputs, and records both in the run manifest, so a resumed
//! run re-executes exactly the stages whose inputs changed or whose
//! outputs are missing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use damagemap_core::event_study;
use damagemap_core::labels::{
    self, balance_training_set, label_at_annotation_date, propagate, read_annotations_csv, split_patches,
    Annotation, Label, LabelPanel, Split, SplitAssignment,
};
use damagemap_core::metrics::{evaluate_run, write_pr_csv, write_report_json};
use damagemap_core::net::{self, dense_scan, LabeledPatch};
use damagemap_core::raster::{build_grid, extract_sample, AoiKind, AreaOfInterest, GeoRaster, PatchGrid, PatchId};
use damagemap_core::smoother::{
    build_features, calibrate_cutoff, smooth_panel, train_forest, ScorePanel, FOREST_FEATURE_COUNT,
};
use damagemap_core::synth;

use crate::config::{CityConfig, RunConfig, SynthConfig};
use crate::manifest::RunManifest;
use crate::svg;

/// Filesystem layout of one city's artifacts under the output directory.
pub struct CityArtifacts {
    pub dir: PathBuf,
    pub grid: PathBuf,
    pub label_panel: PathBuf,
    pub split: PathBuf,
    pub train_ids: PathBuf,
    pub stage1_panel: PathBuf,
    pub smoothed_panel: PathBuf,
    pub forest_train_ids: PathBuf,
    pub calibration_ids: PathBuf,
    pub evaluation: PathBuf,
    pub pr_csv: PathBuf,
    pub pr_svg: PathBuf,
    pub event_csv: PathBuf,
    pub event_svg: PathBuf,
}

pub fn city_artifacts(config: &RunConfig, city: &str) -> CityArtifacts {
    let dir = config.output_dir.join(city);
    CityArtifacts {
        grid: dir.join("grid.csv"),
        label_panel: dir.join("label_panel.csv"),
        split: dir.join("split.csv"),
        train_ids: dir.join("train_patch_ids.csv"),
        stage1_panel: dir.join("stage1_panel.csv"),
        smoothed_panel: dir.join("smoothed_panel.csv"),
        forest_train_ids: dir.join("forest_train_ids.csv"),
        calibration_ids: dir.join("calibration_ids.csv"),
        evaluation: dir.join("evaluation.json"),
        pr_csv: dir.join("pr_curves.csv"),
        pr_svg: dir.join("pr_curves.svg"),
        event_csv: dir.join("event_coefficients.csv"),
        event_svg: dir.join("event_study.svg"),
        dir,
    }
}

pub fn model_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("model.json")
}

pub fn history_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("history.csv")
}

pub fn forest_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("forest.json")
}

pub fn calibration_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("calibration.json")
}

pub fn report_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("report.csv")
}

// --- raster stack access ----------------------------------------------------

/// PNG rasters in a directory, sorted by capture date. The earliest date is
/// the pre image.
pub struct RasterStack {
    pub paths: Vec<(NaiveDate, PathBuf)>,
}

impl RasterStack {
    pub fn scan(dir: &Path) -> Result<RasterStack> {
        let mut paths = Vec::new();
        let entries = std::fs::read_dir(dir).with_context(|| format!("read rasters {}", dir.display()))?;
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                let raster_path = path.clone();
                let sidecar = damagemap_core::raster::sidecar_path_for(&path);
                if !sidecar.exists() {
                    bail!("raster {} has no JSON sidecar", raster_path.display());
                }
                #[derive(Deserialize)]
                struct DateOnly {
                    capture_date: NaiveDate,
                }
                let meta: DateOnly = serde_json::from_reader(File::open(&sidecar)?)
                    .with_context(|| format!("parse {}", sidecar.display()))?;
                paths.push((meta.capture_date, raster_path));
            }
        }
        if paths.is_empty() {
            bail!("no PNG rasters found in {}", dir.display());
        }
        paths.sort();
        for pair in paths.windows(2) {
            if pair[0].0 == pair[1].0 {
                bail!("two rasters share the capture date {}", pair[0].0);
            }
        }
        Ok(RasterStack { paths })
    }

    pub fn pre_path(&self) -> &Path {
        &self.paths[0].1
    }

    pub fn post_dates(&self) -> Vec<NaiveDate> {
        self.paths.iter().skip(1).map(|(d, _)| *d).collect()
    }

    pub fn path_for(&self, date: NaiveDate) -> Result<&Path> {
        self.paths
            .iter()
            .find(|(d, _)| *d == date)
            .map(|(_, p)| p.as_path())
            .ok_or_else(|| anyhow!("no raster for date {date}"))
    }

    pub fn all_paths(&self) -> Vec<PathBuf> {
        self.paths
            .iter()
            .flat_map(|(_, p)| [p.clone(), damagemap_core::raster::sidecar_path_for(p)])
            .collect()
    }

    pub fn load(&self, date: NaiveDate) -> Result<GeoRaster> {
        let path = self.path_for(date)?;
        GeoRaster::read_png_with_sidecar(path).map_err(|e| anyhow!("{e}"))
    }

    pub fn load_pre(&self) -> Result<GeoRaster> {
        GeoRaster::read_png_with_sidecar(self.pre_path()).map_err(|e| anyhow!("{e}"))
    }
}

fn stage_guard(manifest: &RunManifest, resume: bool, stage: &str, inputs: &[PathBuf]) -> bool {
    resume && manifest.stage_is_current(stage, inputs)
}

fn write_patch_ids_csv(path: &Path, ids: &BTreeSet<PatchId>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["row", "col"])?;
    for id in ids {
        w.write_record([&id.row.to_string(), &id.col.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_patch_ids_csv(path: &Path) -> Result<BTreeSet<PatchId>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("read {}", path.display()))?;
    let mut out = BTreeSet::new();
    for rec in r.records() {
        let rec = rec?;
        out.insert(PatchId::new(rec[0].parse()?, rec[1].parse()?));
    }
    Ok(out)
}

// --- synth -------------------------------------------------------------------

/// Generate synthetic imagery, annotations, events, AOIs and the truth
/// panel into the city's declared input paths.
pub fn cmd_synth(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    let synth_cfg = config.synth.as_ref().ok_or_else(|| anyhow!("config has no [synth] section"))?;
    let city_cfg = config.city(&synth_cfg.city)?;
    let stage = "synth";
    if stage_guard(manifest, resume, stage, &[]) {
        eprintln!("synth: up to date");
        return Ok(());
    }

    let outputs = run_synth(synth_cfg, city_cfg)?;
    manifest.record_stage(stage, &[], &outputs)?;
    Ok(())
}

fn run_synth(synth_cfg: &SynthConfig, city_cfg: &CityConfig) -> Result<Vec<PathBuf>> {
    let city = synth::generate_city_with(
        synth_cfg.extent,
        synth_cfg.density,
        synth_cfg.share,
        synth_cfg.dates,
        synth_cfg.seed,
        synth_cfg.clustered,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let spec = synth::RenderSpec {
        date_count: synth_cfg.dates,
        annotation_date_indices: synth_cfg.annotation_dates.clone(),
        illumination_shift: synth_cfg.illumination,
        noise_sigma: synth_cfg.noise,
        rubble: synth::RubbleParams {
            darkening: synth_cfg.rubble_darkening,
            gray_mix: synth_cfg.rubble_mix,
            ..synth::RubbleParams::default()
        },
        start_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
        interval_days: 60,
        city_id: synth_cfg.city.clone(),
    };

    std::fs::create_dir_all(&city_cfg.rasters)
        .with_context(|| format!("create {}", city_cfg.rasters.display()))?;
    let mut outputs = Vec::new();

    // Imagery: date 0 is the pre image.
    let mut first_raster = None;
    for idx in 0..synth_cfg.dates {
        let raster = synth::render(&city, &spec, idx).map_err(|e| anyhow!("{e}"))?;
        let path = city_cfg.rasters.join(format!("{}_{idx:03}.png", synth_cfg.city));
        raster.write_png_with_sidecar(&path).map_err(|e| anyhow!("{e}"))?;
        outputs.push(path.clone());
        outputs.push(damagemap_core::raster::sidecar_path_for(&path));
        if idx == 0 {
            first_raster = Some(raster);
        }
    }
    let first_raster = first_raster.expect("at least one date");

    // AOIs: populated area covering the city plus one no-analysis zone in
    // the south-west corner for out-of-sample checks.
    let geo = synth::city_geo_transform();
    let e = synth_cfg.extent as f64;
    let px_ring = |x0: f64, y0: f64, x1: f64, y1: f64| -> Vec<(f64, f64)> {
        [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
            .iter()
            .map(|&(x, y)| geo.pixel_to_lonlat(x, y))
            .collect()
    };
    let aois = vec![
        AreaOfInterest::new(AoiKind::PopulatedArea, vec![px_ring(-1.0, -1.0, e + 1.0, e + 1.0)])
            .map_err(|e| anyhow!("{e}"))?,
        AreaOfInterest::new(
            AoiKind::NoAnalysisZone,
            vec![px_ring(0.0, 0.78 * e, 0.22 * e, e)],
        )
        .map_err(|e| anyhow!("{e}"))?,
    ];
    if let Some(parent) = city_cfg.aois.parent() {
        std::fs::create_dir_all(parent)?;
    }
    AreaOfInterest::write_json_list(&city_cfg.aois, &aois).map_err(|e| anyhow!("{e}"))?;
    outputs.push(city_cfg.aois.clone());

    // Annotations.
    let annotations = synth::emit_annotations(&city, &spec).map_err(|e| anyhow!("{e}"))?;
    labels::write_annotations_csv(&city_cfg.annotations, &annotations).map_err(|e| anyhow!("{e}"))?;
    outputs.push(city_cfg.annotations.clone());

    // Events: one strike per destroyed building, dated between the image
    // before destruction and the image that first shows it.
    if let Some(events_path) = &city_cfg.events {
        let mut events = Vec::new();
        for b in &city.buildings {
            if let Some(&idx) = city.destruction_schedule.get(&b.id) {
                let (px, py) = b.centroid();
                let (lon, lat) = geo.pixel_to_lonlat(px, py);
                events.push(event_study::EventRecord {
                    lon,
                    lat,
                    date: spec.date_for(idx) - chrono::Duration::days(spec.interval_days / 2),
                    event_type: "strike".to_string(),
                });
            }
        }
        event_study::write_events_csv(events_path, &events).map_err(|e| anyhow!("{e}"))?;
        outputs.push(events_path.clone());
    }

    // Ground-truth panel over the post dates.
    let grid = build_grid(&first_raster, &aois).map_err(|e| anyhow!("{e}"))?;
    let image_dates: Vec<(usize, NaiveDate)> =
        (1..synth_cfg.dates).map(|i| (i, spec.date_for(i))).collect();
    let truth = synth::ground_truth_panel(&city, &grid, &image_dates).map_err(|e| anyhow!("{e}"))?;
    let truth_path = truth_labels_path(city_cfg);
    truth.write_csv(&truth_path, &synth_cfg.city).map_err(|e| anyhow!("{e}"))?;
    outputs.push(truth_path);

    Ok(outputs)
}

pub fn truth_labels_path(city_cfg: &CityConfig) -> PathBuf {
    city_cfg.annotations.with_file_name("truth_labels.csv")
}

// --- tile / label / split -----------------------------------------------------

pub fn cmd_tile(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        let stack = RasterStack::scan(&city_cfg.rasters)?;
        let mut inputs = vec![
            stack.pre_path().to_path_buf(),
            damagemap_core::raster::sidecar_path_for(stack.pre_path()),
            city_cfg.aois.clone(),
        ];
        inputs.dedup();
        let stage = format!("tile:{}", city_cfg.id);
        if stage_guard(manifest, resume, &stage, &inputs) {
            continue;
        }
        std::fs::create_dir_all(&art.dir)?;
        let pre = stack.load_pre()?;
        let aois = AreaOfInterest::read_json_list(&city_cfg.aois).map_err(|e| anyhow!("{e}"))?;
        let grid = build_grid(&pre, &aois).map_err(|e| anyhow!("{e}"))?;
        grid.write_csv(&art.grid).map_err(|e| anyhow!("{e}"))?;
        manifest.record_stage(&stage, &inputs, &[art.grid.clone()])?;
    }
    Ok(())
}

/// Bind each annotation date to an image date (exact match by default).
fn bound_annotation_dates(
    config: &RunConfig,
    annotations: &[Annotation],
    post_dates: &[NaiveDate],
) -> Result<Vec<(NaiveDate, NaiveDate)>> {
    let mut distinct: Vec<NaiveDate> = annotations.iter().map(|a| a.date).collect();
    distinct.sort();
    distinct.dedup();
    let mut out = Vec::new();
    for date in distinct {
        let bound = match config.annotation_binding {
            crate::config::AnnotationBinding::Exact => {
                if post_dates.contains(&date) {
                    date
                } else {
                    bail!("annotation date {date} matches no image date (binding = exact)");
                }
            }
            crate::config::AnnotationBinding::Nearest => *post_dates
                .iter()
                .min_by_key(|d| (**d - date).num_days().abs())
                .ok_or_else(|| anyhow!("no post dates"))?,
        };
        out.push((date, bound));
    }
    Ok(out)
}

pub fn cmd_label(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        let stack = RasterStack::scan(&city_cfg.rasters)?;
        let inputs = vec![
            art.grid.clone(),
            city_cfg.annotations.clone(),
            stack.pre_path().to_path_buf(),
            damagemap_core::raster::sidecar_path_for(stack.pre_path()),
        ];
        let stage = format!("label:{}", city_cfg.id);
        if stage_guard(manifest, resume, &stage, &inputs) {
            continue;
        }
        let grid = PatchGrid::read_csv(&art.grid).map_err(|e| anyhow!("{e}"))?;
        let pre = stack.load_pre()?;
        let annotations = read_annotations_csv(&city_cfg.annotations).map_err(|e| anyhow!("{e}"))?;
        let post_dates = stack.post_dates();
        let bindings = bound_annotation_dates(config, &annotations, &post_dates)?;
        let panel = if bindings.is_empty() {
            // No annotation binds: every cell is unknown. Degenerate but
            // reportable (the summary shows zero labeled samples).
            let patches: Vec<PatchId> = grid.included().iter().copied().collect();
            let n = patches.len() * post_dates.len();
            LabelPanel::from_dense(patches, Vec::new(), post_dates.clone(), vec![Label::Unknown; n])
                .map_err(|e| anyhow!("{e}"))?
        } else {
            let stages: Vec<labels::AnnotationDateLabels> = bindings
                .iter()
                .map(|&(orig, bound)| {
                    let of_date: Vec<Annotation> = annotations
                        .iter()
                        .filter(|a| a.date == orig)
                        .map(|a| Annotation { date: bound, ..a.clone() })
                        .collect();
                    label_at_annotation_date(&grid, &pre, &of_date, bound).map_err(|e| anyhow!("{e}"))
                })
                .collect::<Result<_>>()?;
            propagate(&stages, &post_dates).map_err(|e| anyhow!("{e}"))?
        };
        panel.write_csv(&art.label_panel, &city_cfg.id).map_err(|e| anyhow!("{e}"))?;
        manifest.record_stage(&stage, &inputs, &[art.label_panel.clone()])?;
    }
    Ok(())
}

pub fn cmd_split(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        let inputs = vec![art.grid.clone()];
        let stage = format!("split:{}", city_cfg.id);
        if stage_guard(manifest, resume, &stage, &inputs) {
            continue;
        }
        let grid = PatchGrid::read_csv(&art.grid).map_err(|e| anyhow!("{e}"))?;
        // No-analysis patches never enter training or evaluation, so they
        // stay out of the split entirely.
        let ids: Vec<PatchId> = grid
            .included()
            .iter()
            .copied()
            .filter(|id| !grid.is_no_analysis(*id))
            .collect();
        let split = split_patches(&ids, config.train_fraction, config.split_seed).map_err(|e| anyhow!("{e}"))?;
        split.write_csv(&art.split).map_err(|e| anyhow!("{e}"))?;
        manifest.record_stage(&stage, &inputs, &[art.split.clone()])?;
    }
    Ok(())
}

// --- train --------------------------------------------------------------------

fn stable_cell_hash(seed: u64, id: PatchId, date_idx: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(u64::from(id.row) << 32 | u64::from(id.col)) ^ mix(date_idx as u64 | 1 << 40))
}

/// Labeled (patch, date) cells for one split side, hash-ordered and capped
/// per class, extracted date by date so only one post raster is resident.
#[allow(clippy::too_many_arguments)]
fn collect_cells(
    stack: &RasterStack,
    grid: &PatchGrid,
    panel: &LabelPanel,
    wanted: &BTreeSet<PatchId>,
    cap_per_class: usize,
    order_seed: u64,
) -> Result<Vec<LabeledPatch>> {
    // Candidate cells with a definite label, ordered by stable hash.
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (di, date) in panel.image_dates.iter().enumerate() {
        for &id in wanted {
            match panel.label(id, *date) {
                Some(Label::Destroyed) => positives.push((stable_cell_hash(order_seed, id, di), id, *date)),
                Some(Label::Intact) => negatives.push((stable_cell_hash(order_seed, id, di), id, *date)),
                _ => {}
            }
        }
    }
    positives.sort_unstable();
    negatives.sort_unstable();
    positives.truncate(cap_per_class);
    negatives.truncate(cap_per_class);

    // Group by date so each raster is decoded once.
    let mut by_date: BTreeMap<NaiveDate, Vec<(PatchId, bool)>> = BTreeMap::new();
    for (_, id, date) in &positives {
        by_date.entry(*date).or_default().push((*id, true));
    }
    for (_, id, date) in &negatives {
        by_date.entry(*date).or_default().push((*id, false));
    }

    let pre = stack.load_pre()?;
    let mut out = Vec::new();
    for (date, cells) in by_date {
        let post = stack.load(date)?;
        for (id, label) in cells {
            let sample = extract_sample(&pre, &post, grid, id).map_err(|e| anyhow!("{e}"))?;
            out.push(LabeledPatch { sample, label });
        }
    }
    Ok(out)
}

struct CityTables {
    grid: PatchGrid,
    panel: LabelPanel,
    split: SplitAssignment,
    stack: RasterStack,
}

fn load_city_tables(config: &RunConfig, city_cfg: &CityConfig) -> Result<CityTables> {
    let art = city_artifacts(config, &city_cfg.id);
    let grid = PatchGrid::read_csv(&art.grid).map_err(|e| anyhow!("{e}"))?;
    let annotations = read_annotations_csv(&city_cfg.annotations).map_err(|e| anyhow!("{e}"))?;
    let mut ann_dates: Vec<NaiveDate> = annotations.iter().map(|a| a.date).collect();
    ann_dates.sort();
    ann_dates.dedup();
    let panel = LabelPanel::read_csv(&art.label_panel, ann_dates).map_err(|e| anyhow!("{e}"))?;
    let split = SplitAssignment::read_csv(&art.split, config.train_fraction, config.split_seed)
        .map_err(|e| anyhow!("{e}"))?;
    let stack = RasterStack::scan(&city_cfg.rasters)?;
    Ok(CityTables { grid, panel, split, stack })
}

/// Train the change-detection network on pooled training cells from every
/// city; model selection uses a validation subset carved out of the train
/// split so the test split stays untouched.
pub fn cmd_train(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    let stage = "train";
    let mut inputs = Vec::new();
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        inputs.push(art.grid.clone());
        inputs.push(art.label_panel.clone());
        inputs.push(art.split.clone());
        inputs.extend(RasterStack::scan(&city_cfg.rasters)?.all_paths());
        inputs.push(city_cfg.annotations.clone());
    }
    if stage_guard(manifest, resume, stage, &inputs) {
        return Ok(());
    }

    let mut train_pool = Vec::new();
    let mut val_pool = Vec::new();
    let mut outputs = Vec::new();
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        let tables = load_city_tables(config, city_cfg)?;

        // Carve validation patches out of the train split.
        let train_ids: Vec<PatchId> = tables.split.patches_in(Split::Train).collect();
        let carve = split_patches(&train_ids, 1.0 - config.val_fraction, config.split_seed ^ 0x5EED)
            .map_err(|e| anyhow!("{e}"))?;
        let core_ids: BTreeSet<PatchId> = carve.patches_in(Split::Train).collect();
        let val_ids: BTreeSet<PatchId> = carve.patches_in(Split::Test).collect();

        train_pool.extend(collect_cells(
            &tables.stack,
            &tables.grid,
            &tables.panel,
            &core_ids,
            config.train_max_per_class,
            config.train.seed,
        )?);
        val_pool.extend(collect_cells(
            &tables.stack,
            &tables.grid,
            &tables.panel,
            &val_ids,
            config.train_max_per_class / 4,
            config.train.seed ^ 1,
        )?);

        let used: BTreeSet<PatchId> = core_ids.union(&val_ids).copied().collect();
        write_patch_ids_csv(&art.train_ids, &used)?;
        outputs.push(art.train_ids.clone());
    }

    let balanced_pairs: Vec<(LabeledPatch, Label)> = train_pool
        .into_iter()
        .map(|s| {
            let label = if s.label { Label::Destroyed } else { Label::Intact };
            (s, label)
        })
        .collect();
    let balanced = balance_training_set(&balanced_pairs).map_err(|e| anyhow!("{e}"))?;
    let train_samples: Vec<LabeledPatch> = balanced.into_iter().map(|(s, _)| s).collect();
    eprintln!(
        "train: {} balanced training cells, {} validation cells",
        train_samples.len(),
        val_pool.len()
    );

    let (spec, params, history) = if config.net_search {
        let grid: Vec<_> =
            net::default_search_grid().into_iter().map(|s| (s, config.train)).collect();
        let outcome =
            net::hyperparameter_search(&grid, &train_samples, &val_pool).map_err(|e| anyhow!("{e}"))?;
        eprintln!(
            "train: search winner #{} ({:?}) with validation AUC {:.4}",
            outcome.best_index, outcome.spec, outcome.val_auc
        );
        (outcome.spec, outcome.params, outcome.history)
    } else {
        let (params, history) = net::train(&config.network, &config.train, &train_samples, &val_pool)
            .map_err(|e| anyhow!("{e}"))?;
        (config.network, params, history)
    };
    net::write_model(&model_path(config), &spec, &params).map_err(|e| anyhow!("{e}"))?;
    history.write_csv(&history_path(config)).map_err(|e| anyhow!("{e}"))?;
    outputs.push(model_path(config));
    outputs.push(history_path(config));
    manifest.record_stage(stage, &inputs, &outputs)?;
    Ok(())
}

// --- scan ----------------------------------------------------------------------

pub fn cmd_scan(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        let stack = RasterStack::scan(&city_cfg.rasters)?;
        let mut inputs = vec![art.grid.clone(), model_path(config)];
        inputs.extend(stack.all_paths());
        let stage = format!("scan:{}", city_cfg.id);
        if stage_guard(manifest, resume, &stage, &inputs) {
            continue;
        }
        let grid = PatchGrid::read_csv(&art.grid).map_err(|e| anyhow!("{e}"))?;
        let (spec, params) = net::read_model(&model_path(config)).map_err(|e| anyhow!("{e}"))?;
        let pre = stack.load_pre()?;
        let dates = stack.post_dates();
        let posts: Vec<GeoRaster> =
            dates.iter().map(|d| stack.load(*d)).collect::<Result<_>>()?;
        let panel = dense_scan(&spec, &params, &grid, &pre, &posts, &dates).map_err(|e| anyhow!("{e}"))?;
        panel.write_csv(&art.stage1_panel, &city_cfg.id).map_err(|e| anyhow!("{e}"))?;
        manifest.record_stage(&stage, &inputs, &[art.stage1_panel.clone()])?;
    }
    Ok(())
}

// --- smooth --------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    threshold: f64,
    achieved_train_recall: f64,
}

/// Train the stage-two forest on pooled train-split cells, calibrate the
/// cutoff to the target recall, and smooth every city's panel.
pub fn cmd_smooth(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    let stage = "smooth";
    let mut inputs = Vec::new();
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        inputs.push(art.stage1_panel.clone());
        inputs.push(art.grid.clone());
        inputs.push(art.label_panel.clone());
        inputs.push(art.split.clone());
        inputs.push(city_cfg.annotations.clone());
    }
    if stage_guard(manifest, resume, stage, &inputs) {
        return Ok(());
    }

    struct CityState {
        id: String,
        grid: PatchGrid,
        panel: ScorePanel,
        labels: LabelPanel,
        split: SplitAssignment,
    }
    let mut states = Vec::new();
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        let tables = load_city_tables(config, city_cfg)?;
        let panel = ScorePanel::read_csv(&art.stage1_panel).map_err(|e| anyhow!("{e}"))?;
        states.push(CityState {
            id: city_cfg.id.clone(),
            grid: tables.grid,
            panel,
            labels: tables.panel,
            split: tables.split,
        });
    }

    // Pooled forest training rows: train-split cells with definite labels.
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut train_labels: Vec<u8> = Vec::new();
    let mut train_id_sets: Vec<BTreeSet<PatchId>> = vec![BTreeSet::new(); states.len()];
    for (ci, state) in states.iter().enumerate() {
        for &id in state.panel.patches() {
            if state.split.split_of(id) != Some(Split::Train) {
                continue;
            }
            for &date in state.panel.dates.clone().iter() {
                let label = match state.labels.label(id, date) {
                    Some(Label::Destroyed) => 1u8,
                    Some(Label::Intact) => 0u8,
                    _ => continue,
                };
                let f = build_features(&state.panel, &state.grid, id, date).map_err(|e| anyhow!("{e}"))?;
                features.push(f.to_forest_input().to_vec());
                train_labels.push(label);
                train_id_sets[ci].insert(id);
            }
        }
    }
    eprintln!("smooth: {} pooled forest training rows", features.len());
    let model =
        train_forest(&features, &train_labels, &config.forest, config.forest_seed).map_err(|e| anyhow!("{e}"))?;

    // Calibrate the cutoff on the same training rows.
    let train_scores: Vec<f64> =
        features.iter().map(|f| model.predict(f)).collect::<damagemap_core::Result<_>>().map_err(|e| anyhow!("{e}"))?;
    let calibration =
        calibrate_cutoff(&train_scores, &train_labels, config.target_recall).map_err(|e| anyhow!("{e}"))?;
    eprintln!(
        "smooth: cutoff {:.6} achieves train recall {:.4}",
        calibration.threshold, calibration.achieved_train_recall
    );

    model.write_json(&forest_path(config), FOREST_FEATURE_COUNT).map_err(|e| anyhow!("{e}"))?;
    let calib_file = CalibrationFile {
        threshold: calibration.threshold,
        achieved_train_recall: calibration.achieved_train_recall,
    };
    let mut out = BufWriter::new(File::create(calibration_path(config))?);
    serde_json::to_writer_pretty(&mut out, &calib_file)?;
    out.write_all(b"\n")?;
    drop(out);

    let mut outputs = vec![forest_path(config), calibration_path(config)];
    for (ci, state) in states.iter().enumerate() {
        let art = city_artifacts(config, &state.id);
        let smoothed =
            smooth_panel(&state.panel, &state.grid, &model, &calibration).map_err(|e| anyhow!("{e}"))?;
        smoothed.write_csv(&art.smoothed_panel, &state.id).map_err(|e| anyhow!("{e}"))?;
        write_patch_ids_csv(&art.forest_train_ids, &train_id_sets[ci])?;
        write_patch_ids_csv(&art.calibration_ids, &train_id_sets[ci])?;
        outputs.push(art.smoothed_panel.clone());
        outputs.push(art.forest_train_ids.clone());
        outputs.push(art.calibration_ids.clone());
    }
    manifest.record_stage(stage, &inputs, &outputs)?;
    Ok(())
}

// --- evaluate --------------------------------------------------------------------

pub fn cmd_evaluate(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        let inputs = vec![
            art.smoothed_panel.clone(),
            art.label_panel.clone(),
            art.split.clone(),
            city_cfg.annotations.clone(),
        ];
        let stage = format!("evaluate:{}", city_cfg.id);
        if stage_guard(manifest, resume, &stage, &inputs) {
            continue;
        }
        let tables = load_city_tables(config, city_cfg)?;
        let panel = ScorePanel::read_csv(&art.smoothed_panel).map_err(|e| anyhow!("{e}"))?;
        // A city without any labeled test cell gets an empty (but valid)
        // report rather than halting a multi-city run.
        let report = match evaluate_run(&panel, &tables.panel, &tables.split, Split::Test, &city_cfg.id) {
            Ok(report) => report,
            Err(damagemap_core::Error::Input(_)) => damagemap_core::metrics::RunReport {
                city: city_cfg.id.clone(),
                n_test: 0,
                prevalence: 0.0,
                stages: Vec::new(),
            },
            Err(e) => return Err(anyhow!("{e}")),
        };
        write_report_json(&art.evaluation, &report).map_err(|e| anyhow!("{e}"))?;
        write_pr_csv(&art.pr_csv, &report).map_err(|e| anyhow!("{e}"))?;
        svg::write_pr_svg(&art.pr_svg, &report)?;
        manifest.record_stage(
            &stage,
            &inputs,
            &[art.evaluation.clone(), art.pr_csv.clone(), art.pr_svg.clone()],
        )?;
    }
    Ok(())
}

// --- event study ------------------------------------------------------------------

pub fn cmd_eventstudy(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    for city_cfg in &config.cities {
        let Some(events_path) = &city_cfg.events else {
            continue;
        };
        let art = city_artifacts(config, &city_cfg.id);
        let stack = RasterStack::scan(&city_cfg.rasters)?;
        let inputs = vec![
            art.smoothed_panel.clone(),
            events_path.clone(),
            art.grid.clone(),
            stack.pre_path().to_path_buf(),
            damagemap_core::raster::sidecar_path_for(stack.pre_path()),
        ];
        let stage = format!("eventstudy:{}", city_cfg.id);
        if stage_guard(manifest, resume, &stage, &inputs) {
            continue;
        }
        let events = event_study::read_events_csv(events_path).map_err(|e| anyhow!("{e}"))?;
        if events.is_empty() {
            bail!("event file {} contains no events", events_path.display());
        }
        let grid = PatchGrid::read_csv(&art.grid).map_err(|e| anyhow!("{e}"))?;
        let pre = stack.load_pre()?;
        let panel = ScorePanel::read_csv(&art.smoothed_panel).map_err(|e| anyhow!("{e}"))?;
        let mapped = event_study::map_events(&events, &grid, &pre, &panel.dates);
        eprintln!(
            "eventstudy:{}: {} events mapped to {} patches, {} dropped",
            city_cfg.id,
            events.len(),
            mapped.first_event.len(),
            mapped.dropped
        );
        let design = event_study::build_design(&panel, &mapped).map_err(|e| anyhow!("{e}"))?;
        let result = event_study::estimate(&design).map_err(|e| anyhow!("{e}"))?;
        result.write_csv(&art.event_csv).map_err(|e| anyhow!("{e}"))?;
        svg::write_event_study_svg(&art.event_svg, &result)?;
        manifest.record_stage(&stage, &inputs, &[art.event_csv.clone(), art.event_svg.clone()])?;
    }
    Ok(())
}

// --- report -------------------------------------------------------------------------

pub const REPORT_HEADER: [&str; 9] = [
    "city",
    "total_samples",
    "n_dates",
    "labeled_samples",
    "share_destroyed",
    "auc",
    "ap_balanced",
    "ap_unbalanced",
    "destruction_binary",
];

/// Per-city summary table mirroring the eight reported columns: sample
/// counts, label coverage, destroyed share, second-stage metrics, and the
/// binary destruction count at the final date.
pub fn cmd_report(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    let stage = "report";
    let mut inputs = Vec::new();
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        for p in [&art.smoothed_panel, &art.label_panel, &art.evaluation] {
            if !p.exists() {
                bail!("report needs {}, produced by an earlier stage that has not run", p.display());
            }
        }
        inputs.push(art.smoothed_panel.clone());
        inputs.push(art.label_panel.clone());
        inputs.push(art.evaluation.clone());
        inputs.push(city_cfg.annotations.clone());
    }
    if stage_guard(manifest, resume, stage, &inputs) {
        return Ok(());
    }

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(report_path(config))?));
    w.write_record(REPORT_HEADER)?;
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        let panel = ScorePanel::read_csv(&art.smoothed_panel).map_err(|e| anyhow!("{e}"))?;
        let annotations = read_annotations_csv(&city_cfg.annotations).map_err(|e| anyhow!("{e}"))?;
        let mut ann_dates: Vec<NaiveDate> = annotations.iter().map(|a| a.date).collect();
        ann_dates.sort();
        ann_dates.dedup();
        let labels = LabelPanel::read_csv(&art.label_panel, ann_dates).map_err(|e| anyhow!("{e}"))?;

        let n_dates = panel.dates.len();
        let total_samples = panel.patches().len() * n_dates;
        let mut labeled = 0usize;
        let mut destroyed = 0usize;
        for (_, _, label) in labels.entries() {
            match label {
                Label::Destroyed => {
                    labeled += 1;
                    destroyed += 1;
                }
                Label::Intact => labeled += 1,
                Label::Unknown => {}
            }
        }
        let share = if labeled > 0 { destroyed as f64 / labeled as f64 } else { 0.0 };

        #[derive(Deserialize)]
        struct Record {
            stage: String,
            auc: f64,
            ap_unbalanced: f64,
            ap_balanced: f64,
        }
        let records: Vec<Record> = serde_json::from_reader(File::open(&art.evaluation)?)
            .with_context(|| format!("parse {}", art.evaluation.display()))?;
        // A city with no labeled test cells reports empty metric fields.
        let last_stage = records
            .iter()
            .find(|r| r.stage == "stage2")
            .or_else(|| records.iter().find(|r| r.stage == "stage1"));
        let (auc, ap_balanced, ap_unbalanced) = match last_stage {
            Some(r) => (format!("{}", r.auc), format!("{}", r.ap_balanced), format!("{}", r.ap_unbalanced)),
            None => (String::new(), String::new(), String::new()),
        };

        let final_date = *panel.dates.last().ok_or_else(|| anyhow!("empty panel"))?;
        let destruction_binary = panel
            .patches()
            .iter()
            .filter(|&&id| panel.get(id, final_date).and_then(|c| c.binary) == Some(true))
            .count();

        w.write_record([
            city_cfg.id.as_str(),
            &total_samples.to_string(),
            &n_dates.to_string(),
            &labeled.to_string(),
            &format!("{share}"),
            &auc,
            &ap_balanced,
            &ap_unbalanced,
            &destruction_binary.to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    manifest.record_stage(stage, &inputs, &[report_path(config)])?;
    Ok(())
}

// --- audit ---------------------------------------------------------------------------

/// Confirm no test-split patch id entered any training or calibration
/// input of the run.
pub fn audit_split_hygiene(config: &RunConfig) -> Result<()> {
    for city_cfg in &config.cities {
        let art = city_artifacts(config, &city_cfg.id);
        let split = SplitAssignment::read_csv(&art.split, config.train_fraction, config.split_seed)
            .map_err(|e| anyhow!("{e}"))?;
        let test_ids: BTreeSet<PatchId> = split.patches_in(Split::Test).collect();
        for path in [&art.train_ids, &art.forest_train_ids, &art.calibration_ids] {
            if !path.exists() {
                continue;
            }
            let used = read_patch_ids_csv(path)?;
            let leaked: Vec<&PatchId> = used.intersection(&test_ids).collect();
            if !leaked.is_empty() {
                bail!(
                    "split hygiene violation: {} test patches (e.g. {}) appear in {}",
                    leaked.len(),
                    leaked[0],
                    path.display()
                );
            }
        }
    }
    Ok(())
}

// --- pipeline ---------------------------------------------------------------------------

/// Full run: tile, label, split, train, scan, smooth, evaluate, then the
/// split-hygiene audit and the summary report.
pub fn cmd_pipeline(config: &RunConfig, manifest: &mut RunManifest, resume: bool) -> Result<()> {
    let steps: [(&str, fn(&RunConfig, &mut RunManifest, bool) -> Result<()>); 8] = [
        ("tile", cmd_tile),
        ("label", cmd_label),
        ("split", cmd_split),
        ("train", cmd_train),
        ("scan", cmd_scan),
        ("smooth", cmd_smooth),
        ("evaluate", cmd_evaluate),
        ("report", cmd_report),
    ];
    for (name, step) in steps {
        step(config, manifest, resume).with_context(|| format!("stage {name} failed"))?;
        manifest.save(&config.output_dir)?;
    }
    audit_split_hygiene(config).context("stage audit failed")?;
    Ok(())
}
