use super::*;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        synth_len: 160,
        rhos: vec![0.0, 0.9],
        seeds: vec![0, 1],
        hidden: 8,
        max_epochs: 3,
        patience: 3,
        batch_size: Some(16),
        ..ExperimentConfig::default()
    }
}

#[test]
fn default_config_values() {
    let c = ExperimentConfig::default();
    assert_eq!(c.windows(), (8, 4, 6));
    assert_eq!(c.rhos, vec![0.0, 0.3, 0.6, 0.9]);
    assert_eq!(c.seeds.len(), 5);
    assert_eq!(c.variants.len(), 4);
    assert_eq!(c.train_config(0, Variant::Full).batch_size, 32);
    let weekly = ExperimentConfig {
        frequency: Frequency::Weekly,
        ..c
    };
    assert_eq!(weekly.windows(), (36, 18, 12));
    assert_eq!(weekly.train_config(0, Variant::Full).batch_size, 16);
}

#[test]
fn toml_round_trip_and_errors() {
    let c = tiny();
    let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(back, c);
    let partial = ExperimentConfig::from_toml("name = \"x\"\nrhos = [0.5]\nforecaster = \"mlp\"\n").unwrap();
    assert_eq!(partial.rhos, vec![0.5]);
    assert_eq!(partial.forecaster, ForecasterKind::Mlp);
    assert_eq!(partial.hidden, 64);
    assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    assert!(ExperimentConfig::from_toml("rhos = [1.5]").is_err());
    assert!(ExperimentConfig::from_toml("heads = 5").is_err());
    assert!(ExperimentConfig::from_toml("variants = [\"nope\"]").is_err());
}

#[test]
fn synthetic_data_is_deterministic_and_announces_shifts() {
    let spec = SynthSpec {
        strength: 1.0,
        ..SynthSpec::default()
    };
    let a = synth_dataset(&spec).unwrap();
    assert_eq!(a, synth_dataset(&spec).unwrap());
    assert_eq!(a.len(), 600);
    let rises = a.steps.iter().filter(|s| RISE_WORDS.iter().any(|w| s.text.contains(w))).count();
    let falls = a.steps.iter().filter(|s| FALL_WORDS.iter().any(|w| s.text.contains(w))).count();
    assert!(rises > 10 && falls > 10, "{rises} {falls}");
    let silent = synth_dataset(&SynthSpec {
        strength: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    assert!(silent.steps.iter().all(|s| !RISE_WORDS.iter().chain(&FALL_WORDS).any(|w| s.text.contains(w))));
    assert!(synth_dataset(&SynthSpec {
        strength: 2.0,
        ..SynthSpec::default()
    })
    .is_err());
}

const RISE_WORDS: [&str; 5] = ["rise", "surge", "jump", "up", "increase"];
const FALL_WORDS: [&str; 5] = ["fall", "plunge", "drop", "down", "decrease"];

#[test]
fn written_series_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(&SynthSpec {
        len: 40,
        ..SynthSpec::default()
    })
    .unwrap();
    write_series(&data, dir.path()).unwrap();
    let cfg = ExperimentConfig {
        numeric_path: Some(dir.path().join("values.csv")),
        text_path: Some(dir.path().join("texts.jsonl")),
        ..ExperimentConfig::default()
    };
    let back = load_dataset(&cfg).unwrap();
    assert_eq!(back, data);
}

fn cell(variant: Variant, rho: f64, seed: u64, mse: f64) -> CellResult {
    CellResult {
        dataset: "d".into(),
        variant,
        rho,
        seed,
        mse,
        mae: mse / 2.0,
        epochs: 1,
        best_epoch: 0,
    }
}

#[test]
fn report_table_averages() {
    let cells = vec![
        cell(Variant::Full, 0.0, 0, 1.0),
        cell(Variant::Full, 0.0, 1, 3.0),
        cell(Variant::Full, 0.5, 0, 5.0),
        cell(Variant::Full, 0.5, 1, 7.0),
        cell(Variant::NoPpm, 0.0, 0, 2.0),
    ];
    let t = ReportTable::from_cells(&cells);
    let labels: Vec<(String, String, String)> = t
        .rows
        .iter()
        .map(|r| (r.variant.to_string(), r.rho.to_string(), r.seed.to_string()))
        .collect();
    let want = [
        ("full", "0", "0"),
        ("full", "0", "1"),
        ("full", "0", "Avg"),
        ("full", "0.5", "0"),
        ("full", "0.5", "1"),
        ("full", "0.5", "Avg"),
        ("full", "Avg", "Avg"),
        ("no_ppm", "0", "0"),
        ("no_ppm", "0", "Avg"),
        ("no_ppm", "Avg", "Avg"),
    ];
    assert_eq!(
        labels,
        want.iter()
            .map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string()))
            .collect::<Vec<_>>()
    );
    assert_eq!(t.rows[2].mse, 2.0);
    assert_eq!(t.rows[6].mse, 4.0);
    assert_eq!(t.averages(Variant::Full), vec![(0.0, 2.0, 1.0), (0.5, 6.0, 3.0)]);
}

#[test]
fn csv_round_trip_and_format() {
    let cells = vec![cell(Variant::Full, 0.3, 0, 0.1 + 0.2), cell(Variant::Full, 0.3, 1, 1.0 / 3.0)];
    let t = ReportTable::from_cells(&cells);
    let s = t.to_csv_string();
    assert!(s.starts_with("dataset,variant,rho,seed,mse,mae\nd,full,0.3,0,0.30000000000000004,"));
    assert_eq!(ReportTable::parse_csv(&s).unwrap(), t);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    emit_csv(&t, &p).unwrap();
    assert_eq!(read_csv(&p).unwrap(), t);
    assert!(ReportTable::parse_csv("a,b\n1,2\n").is_err());
    assert!(ReportTable::parse_csv("dataset,variant,rho,seed,mse,mae\nd,full,x,0,1,1\n").is_err());
}

#[test]
fn svg_is_well_formed() {
    let cells: Vec<CellResult> = Variant::ALL
        .iter()
        .flat_map(|&v| [0.0, 0.5, 0.9].map(|r| cell(v, r, 0, 1.0 + r)))
        .collect();
    let svg = render_svg(&ReportTable::from_cells(&cells));
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
    assert_eq!(lines, 4);
    roxmltree::Document::parse(&render_svg(&ReportTable::default())).unwrap();
}

#[test]
fn small_sweep_is_deterministic_and_text_free_baseline_ignores_rho() {
    let cfg = tiny();
    let data = load_dataset(&cfg).unwrap();
    let a = ablation_suite(&cfg, &data).unwrap();
    assert!(a.failures.is_empty(), "{:?}", a.failures);
    assert_eq!(a.cells.len(), 4 * 2 * 2);
    let b = ablation_suite(&cfg, &data).unwrap();
    assert_eq!(a.table().to_csv_string(), b.table().to_csv_string());
    let uni: Vec<&CellResult> = a.cells.iter().filter(|c| c.variant == Variant::Unimodal).collect();
    for seed in [0, 1] {
        let per_rho: Vec<(f64, f64)> = uni.iter().filter(|c| c.seed == seed).map(|c| (c.mse, c.mae)).collect();
        assert_eq!(per_rho[0], per_rho[1]);
    }
    let full: Vec<&CellResult> = a.cells.iter().filter(|c| c.variant == Variant::Full).collect();
    assert_ne!(full[0].mse, full[2].mse);
}

#[test]
fn failed_cells_are_collected() {
    let cfg = ExperimentConfig {
        synth_len: 30,
        rhos: vec![0.0],
        seeds: vec![0],
        variants: vec![Variant::Full],
        ..tiny()
    };
    let data = load_dataset(&cfg).unwrap();
    let r = sweep(&cfg, &data).unwrap();
    assert!(r.cells.is_empty());
    assert_eq!(r.failures.len(), 1);
    assert!(r.failures[0].error.contains("empty split"));
}
