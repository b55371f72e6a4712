use gsmt::config::RunConfig;
use gsmt::model::CellKind;
use gsmt::pipeline::{run_evaluate, run_preprocess, run_synth, run_train, EvalOptions};

fn run_variant(name: &str, overrides: &[&str]) {
    let start = std::time::Instant::now();
    let sets: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let config = RunConfig::load(None, &sets).unwrap();
    let sim = run_synth(&config).unwrap();
    let bundle = run_preprocess(&sim.records, &config).unwrap();
    let mtd = bundle.mean_travel_distance_m;
    let ckpt = run_train(&bundle, &config, CellKind::Lstm, None).unwrap();
    let (best, epochs) = (ckpt.best_val_mae, ckpt.history.len());
    let table = run_evaluate(&[(ckpt, bundle)], &EvalOptions::default()).unwrap();
    eprintln!("=== {name} (epochs {epochs}, best val {best:.4}, mtd {mtd:.0} m, threshold {:.0} m, {:?})", 0.05*mtd, start.elapsed());
    for r in &table.rows {
        eprintln!("  {:10} mae {:.4}  acc {:5.1}%  mean_err {:6.1} m", r.method, r.mae, r.mission_accuracy*100.0, r.mean_error_m);
    }
}

#[test]
fn variant_matrix() {
    run_variant("loop40-v24", &[
        "synth.route_extent_km=40",
        "synth.base_speed_kmh=24",
    ]);
    run_variant("corridor20-v24", &[
        "synth.route_kind=\"corridor\"",
        "synth.route_extent_km=20",
        "synth.route_waypoints=10",
        "synth.base_speed_kmh=24",
    ]);
}
