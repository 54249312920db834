//! Run configuration: a documented key-value text format.
//!
//! Global keys come first; each `[city.<id>]` section declares one city's
//! inputs, and an optional `[synth]` section parameterizes the synthetic
//! city generator. `#` starts a comment, unknown keys are errors, and every
//! seed is explicit. See FORMATS.md for the full reference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use damagemap_core::net::{Activation, NetworkSpec, TrainConfig};
use damagemap_core::smoother::ForestHyperparams;

/// Input paths for one city.
#[derive(Clone, Debug, PartialEq)]
pub struct CityConfig {
    pub id: String,
    /// Directory of PNG + JSON sidecar rasters.
    pub rasters: PathBuf,
    /// JSON list of areas of interest.
    pub aois: PathBuf,
    /// Annotation CSV.
    pub annotations: PathBuf,
    /// Optional event CSV for the event study.
    pub events: Option<PathBuf>,
}

/// Parameters for `damagemap synth`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub city: String,
    pub extent: usize,
    pub density: f64,
    pub share: f64,
    /// Total image count including the pre image.
    pub dates: usize,
    pub annotation_dates: Vec<usize>,
    pub illumination: f64,
    pub noise: f64,
    /// Multiplicative darkening of collapsed footprints.
    pub rubble_darkening: f64,
    /// Debris-gray fraction in rubble fragments (the rest keeps the
    /// facade color).
    pub rubble_mix: f64,
    pub seed: u64,
    pub clustered: bool,
}

/// Full run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub patch_size: usize,
    pub split_seed: u64,
    pub train_fraction: f64,
    /// Share of training patches held out for validation/model selection.
    pub val_fraction: f64,
    pub target_recall: f64,
    /// Cap on pre-balancing training samples per class (desk-scale budget).
    pub train_max_per_class: usize,
    /// Train every architecture in the default search grid instead of the
    /// single configured spec.
    pub net_search: bool,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub forest: ForestHyperparams,
    pub forest_seed: u64,
    pub annotation_binding: AnnotationBinding,
    pub cities: Vec<CityConfig>,
    pub synth: Option<SynthConfig>,
}

/// How annotation dates attach to image dates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationBinding {
    Exact,
    Nearest,
}

impl RunConfig {
    pub fn city(&self, id: &str) -> Result<&CityConfig> {
        self.cities
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| anyhow!("city {id:?} is not declared in the configuration"))
    }

    /// Canonical text rendering; its hash identifies the effective run.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "output_dir={}", self.output_dir.display());
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "split_seed={}", self.split_seed);
        let _ = writeln!(s, "train_fraction={}", self.train_fraction);
        let _ = writeln!(s, "val_fraction={}", self.val_fraction);
        let _ = writeln!(s, "target_recall={}", self.target_recall);
        let _ = writeln!(s, "train_max_per_class={}", self.train_max_per_class);
        let _ = writeln!(s, "net_search={}", self.net_search);
        let _ = writeln!(s, "network={:?}", self.network);
        let _ = writeln!(s, "train={:?}", self.train);
        let _ = writeln!(s, "forest={:?} seed={}", self.forest, self.forest_seed);
        let _ = writeln!(s, "annotation_binding={:?}", self.annotation_binding);
        for c in &self.cities {
            let _ = writeln!(
                s,
                "city={} rasters={} aois={} annotations={} events={:?}",
                c.id,
                c.rasters.display(),
                c.aois.display(),
                c.annotations.display(),
                c.events
            );
        }
        if let Some(sy) = &self.synth {
            let _ = writeln!(s, "synth={sy:?}");
        }
        s
    }

    /// Apply `--seed-override`: every stage seed is derived from the single
    /// override so reruns stay reproducible.
    pub fn override_seeds(&mut self, seed: u64) {
        fn mix(seed: u64, k: u64) -> u64 {
            let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        }
        self.split_seed = mix(seed, 1);
        self.train.seed = mix(seed, 2);
        self.forest_seed = mix(seed, 3);
        if let Some(sy) = &mut self.synth {
            sy.seed = mix(seed, 4);
        }
    }
}

fn default_network() -> NetworkSpec {
    NetworkSpec {
        num_conv_blocks: 2,
        kernel_size: 3,
        pool_stride: 2,
        dropout_prob: 0.1,
        fc_units: 16,
        fc_activation: Activation::ReLU,
        input_channels: 6,
    }
}

fn default_train() -> TrainConfig {
    TrainConfig { learning_rate: 0.1, batch_size: 32, epochs: 5, seed: 7, weight_init_scale: 1.0 }
}

/// Parse a configuration file. Unknown keys and malformed sections are
/// errors; relative paths resolve against the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_text(&text, base).with_context(|| format!("in config {}", path.display()))
}

pub fn parse_config_text(text: &str, base: &Path) -> Result<RunConfig> {
    #[derive(PartialEq)]
    enum Section {
        Global,
        City(String),
        Synth,
    }

    let mut globals: BTreeMap<String, String> = BTreeMap::new();
    let mut cities: Vec<(String, BTreeMap<String, String>)> = Vec::new();
    let mut synth: Option<BTreeMap<String, String>> = None;
    let mut section = Section::Global;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if let Some(city) = name.strip_prefix("city.") {
                if city.is_empty() {
                    bail!("line {}: empty city name", lineno + 1);
                }
                if cities.iter().any(|(id, _)| id == city) {
                    bail!("line {}: duplicate city section {city:?}", lineno + 1);
                }
                cities.push((city.to_string(), BTreeMap::new()));
                section = Section::City(city.to_string());
            } else if name == "synth" {
                if synth.is_some() {
                    bail!("line {}: duplicate [synth] section", lineno + 1);
                }
                synth = Some(BTreeMap::new());
                section = Section::Synth;
            } else {
                bail!("line {}: unknown section [{name}]", lineno + 1);
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got {line:?}", lineno + 1);
        };
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        let map = match &section {
            Section::Global => &mut globals,
            Section::City(id) => &mut cities.iter_mut().find(|(c, _)| c == id).unwrap().1,
            Section::Synth => synth.as_mut().unwrap(),
        };
        if map.insert(key.clone(), value).is_some() {
            bail!("line {}: duplicate key {key:?}", lineno + 1);
        }
    }

    let mut taker = Taker::new(globals);
    let output_dir = base.join(taker.require("output_dir")?);
    let patch_size: usize = taker.parse_or("patch_size", 64)?;
    if patch_size != damagemap_core::PATCH_SIZE {
        bail!("patch_size must be {}, got {patch_size}", damagemap_core::PATCH_SIZE);
    }
    let split_seed = taker.parse_or("split_seed", 42u64)?;
    let train_fraction = taker.parse_or("train_fraction", 0.7f64)?;
    let val_fraction = taker.parse_or("val_fraction", 0.2f64)?;
    let target_recall = taker.parse_or("target_recall", 0.5f64)?;
    let train_max_per_class = taker.parse_or("train_max_per_class", 8000usize)?;

    let net_search = taker.parse_or("net_search", false)?;
    let mut network = default_network();
    network.num_conv_blocks = taker.parse_or("net_blocks", network.num_conv_blocks)?;
    network.kernel_size = taker.parse_or("net_kernel", network.kernel_size)?;
    network.pool_stride = taker.parse_or("net_pool_stride", network.pool_stride)?;
    network.dropout_prob = taker.parse_or("net_dropout", network.dropout_prob)?;
    network.fc_units = taker.parse_or("net_fc_units", network.fc_units)?;
    network.fc_activation = match taker.take("net_activation").as_deref() {
        None | Some("relu") => Activation::ReLU,
        Some("sigmoid") => Activation::Sigmoid,
        Some(other) => bail!("net_activation must be relu or sigmoid, got {other:?}"),
    };
    network.validate().map_err(|e| anyhow!("{e}"))?;

    let mut train = default_train();
    train.learning_rate = taker.parse_or("train_lr", train.learning_rate)?;
    train.batch_size = taker.parse_or("train_batch", train.batch_size)?;
    train.epochs = taker.parse_or("train_epochs", train.epochs)?;
    train.seed = taker.parse_or("train_seed", train.seed)?;
    train.weight_init_scale = taker.parse_or("train_init_scale", train.weight_init_scale)?;
    train.validate().map_err(|e| anyhow!("{e}"))?;

    let mut forest = ForestHyperparams::default();
    forest.num_trees = taker.parse_or("forest_trees", forest.num_trees)?;
    forest.max_depth = taker.parse_or("forest_max_depth", forest.max_depth)?;
    forest.min_leaf = taker.parse_or("forest_min_leaf", forest.min_leaf)?;
    forest.features_per_split = taker.parse_or("forest_features_per_split", forest.features_per_split)?;
    let forest_seed = taker.parse_or("forest_seed", 11u64)?;

    let annotation_binding = match taker.take("annotation_binding").as_deref() {
        None | Some("exact") => AnnotationBinding::Exact,
        Some("nearest") => AnnotationBinding::Nearest,
        Some(other) => bail!("annotation_binding must be exact or nearest, got {other:?}"),
    };
    taker.finish("global")?;

    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        bail!("train_fraction must be in (0,1), got {train_fraction}");
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        bail!("val_fraction must be in (0,1), got {val_fraction}");
    }

    if cities.is_empty() {
        bail!("at least one [city.<id>] section is required");
    }
    let mut city_configs = Vec::new();
    for (id, map) in cities {
        let mut taker = Taker::new(map);
        let city = CityConfig {
            id: id.clone(),
            rasters: base.join(taker.require("rasters")?),
            aois: base.join(taker.require("aois")?),
            annotations: base.join(taker.require("annotations")?),
            events: taker.take("events").map(|v| base.join(v)),
        };
        taker.finish(&format!("city.{id}"))?;
        city_configs.push(city);
    }

    let synth = match synth {
        None => None,
        Some(map) => {
            let mut taker = Taker::new(map);
            let city = taker.require("city")?;
            if !city_configs.iter().any(|c| c.id == city) {
                bail!("[synth] city {city:?} has no [city.{city}] section");
            }
            let annotation_dates: Vec<usize> = taker
                .require("annotation_dates")?
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| anyhow!("bad annotation_dates entry {v:?}")))
                .collect::<Result<_>>()?;
            let parsed = SynthConfig {
                city,
                extent: taker.parse_or("extent", 1024usize)?,
                density: taker.parse_or("density", 0.8f64)?,
                share: taker.parse_or("share", 0.03f64)?,
                dates: taker.parse_or("dates", 23usize)?,
                annotation_dates,
                illumination: taker.parse_or("illumination", 18.0f64)?,
                noise: taker.parse_or("noise", 6.0f64)?,
                rubble_darkening: taker.parse_or("rubble_darkening", 0.8f64)?,
                rubble_mix: taker.parse_or("rubble_mix", 0.65f64)?,
                seed: taker.parse_or("seed", 5u64)?,
                clustered: taker.parse_or("clustered", true)?,
            };
            taker.finish("synth")?;
            // Index 0 is the pre image; annotations belong to post dates.
            if let Some(&bad) =
                parsed.annotation_dates.iter().find(|&&d| d == 0 || d >= parsed.dates)
            {
                bail!("annotation date index {bad} must lie in [1, {})", parsed.dates);
            }
            Some(parsed)
        }
    };

    Ok(RunConfig {
        output_dir,
        patch_size,
        split_seed,
        train_fraction,
        val_fraction,
        target_recall,
        train_max_per_class,
        net_search,
        network,
        train,
        forest,
        forest_seed,
        annotation_binding,
        cities: city_configs,
        synth,
    })
}

/// Tracks consumed keys so leftovers become "unknown key" errors.
struct Taker {
    map: BTreeMap<String, String>,
}

impl Taker {
    fn new(map: BTreeMap<String, String>) -> Self {
        Taker { map }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| anyhow!("missing required key {key:?}"))
    }

    fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| anyhow!("key {key:?}: cannot parse value {v:?}")),
        }
    }

    fn finish(self, section: &str) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            bail!("unknown key {key:?} in {section} section");
        }
        Ok(())
    }
}
