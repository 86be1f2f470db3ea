use gsbmdpo::toylab::{l1, run_toy, tilted_quadrant_masses, write_toy_outputs, QuadrantPreference, ToyConfig};

fn quick() -> ToyConfig {
    ToyConfig {
        prefit_iters: 1500,
        md_iters: 2,
        paths_per_iter: 1024,
        epochs: 2,
        eval_samples: 100_000,
        mode_samples: 800,
        ..Default::default()
    }
}

#[test]
fn null_tilt_keeps_the_old_masses() {
    let cfg = ToyConfig {
        preference: QuadrantPreference {
            weights: [2.0; 4],
            beta: 1.0,
        },
        ..quick()
    };
    let rep = run_toy(&cfg).unwrap();
    assert!(l1(&rep.learned_masses, &cfg.mixture.weights) < 0.05, "{:?}", rep.learned_masses);
    assert_eq!(rep.target_masses, cfg.mixture.weights);

    let dir = tempfile::tempdir().unwrap();
    write_toy_outputs(dir.path(), &cfg, &rep).unwrap();
    for f in ["masses.json", "config.json", "samples_old.csv", "samples_target.csv", "samples_prefit.csv", "samples_learned.csv"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let masses: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("masses.json")).unwrap()).unwrap();
    assert_eq!(masses["l1_error"].as_f64().unwrap(), rep.l1_error);
    let lines = std::fs::read_to_string(dir.path().join("samples_learned.csv")).unwrap().lines().count();
    assert_eq!(lines, cfg.plot_samples + 1);
}

#[test]
fn reported_target_is_the_tilted_masses() {
    let cfg = ToyConfig {
        md_iters: 1,
        ..quick()
    };
    let rep = run_toy(&cfg).unwrap();
    let want = tilted_quadrant_masses(&cfg.mixture.weights, &cfg.preference.weights).unwrap();
    assert_eq!(rep.target_masses, want);
    assert!(rep.eval_samples >= 100_000);
    assert!(rep.learned_masses[2] > rep.prefit_masses[2], "{:?} vs {:?}", rep.learned_masses, rep.prefit_masses);
}
