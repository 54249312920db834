use damagemap_cli::config::parse_config_text;
use damagemap_cli::manifest::{sha256_str, RunManifest};
use damagemap_cli::stages;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rubble_mix: f64 = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(0.65);
    let rubble_darkening: f64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(0.8);
    let noise: f64 = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(50.0);
    let illum: f64 = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(55.0);
    let extent: usize = args.get(5).and_then(|v| v.parse().ok()).unwrap_or(6400);

    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "
output_dir = out
split_seed = 42
train_max_per_class = 3000
net_blocks = 2
net_kernel = 3
net_pool_stride = 2
net_fc_units = 16
net_dropout = 0.1
train_lr = 0.05
train_batch = 32
train_epochs = 6
train_seed = 7
forest_trees = 80
forest_max_depth = 12
forest_seed = 11

[city.probe]
rasters = data/probe/rasters
aois = data/probe/aoi.json
annotations = data/probe/annotations.csv

[synth]
city = probe
extent = {extent}
density = 0.8
share = 0.03
dates = 23
annotation_dates = 6,11,16,21
illumination = {illum}
noise = {noise}
rubble_mix = {rubble_mix}
rubble_darkening = {rubble_darkening}
seed = 5
"
    );
    let config = parse_config_text(&text, dir.path()).unwrap();
    let started = std::time::Instant::now();
    let hash = sha256_str(&config.canonical_string());
    std::fs::create_dir_all(&config.output_dir).unwrap();
    let mut manifest = RunManifest::load_or_new(&config.output_dir, &hash).unwrap();
    stages::cmd_synth(&config, &mut manifest, false).expect("synth");
    stages::cmd_pipeline(&config, &mut manifest, false).expect("pipeline");

    #[derive(serde::Deserialize)]
    struct Record {
        stage: String,
        auc: f64,
        ap_unbalanced: f64,
        ap_balanced: f64,
    }
    let art = stages::city_artifacts(&config, "probe");
    let records: Vec<Record> =
        serde_json::from_reader(std::fs::File::open(&art.evaluation).unwrap()).unwrap();
    #[derive(serde::Deserialize)]
    struct Calib {
        threshold: f64,
        achieved_train_recall: f64,
    }
    let calib: Calib =
        serde_json::from_reader(std::fs::File::open(stages::calibration_path(&config)).unwrap()).unwrap();
    println!(
        "mix {rubble_mix} dark {rubble_darkening} noise {noise} illum {illum} extent {extent} -> {:.0}s",
        started.elapsed().as_secs_f64()
    );
    for r in &records {
        println!(
            "  {}: auc {:.4} ap_unbal {:.4} ap_bal {:.4}",
            r.stage, r.auc, r.ap_unbalanced, r.ap_balanced
        );
    }
    println!("  cutoff {:.4} recall {:.4}", calib.threshold, calib.achieved_train_recall);
    if records.len() == 2 {
        println!("  AP gain: {:.4}", records[1].ap_unbalanced - records[0].ap_unbalanced);
    }
}
