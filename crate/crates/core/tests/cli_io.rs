use cpmda::cli_io::{
    config_to_string, emit_results, inject_mcar, load_config, parse_config, read_csv_dataset,
    read_results, results_rows, write_csv_dataset, write_results, RESULTS_HEADER,
};
use cpmda::evaluation::{default_na_tokens, run_experiment, ExperimentConfig, Method};
use cpmda::gaussian_oracle::{generate_glm_dataset, GlmParams};
use cpmda::missingness::McarSpec;
use cpmda::Error;

fn na() -> Vec<String> {
    default_na_tokens()
}

#[test]
fn csv_round_trip_preserves_values_and_masks() {
    let params = GlmParams::reference(4).unwrap();
    let ds = generate_glm_dataset(&params, 200, &McarSpec::new(0.3), 5).unwrap();
    let mut buf = Vec::new();
    write_csv_dataset(&mut buf, &ds, None, "y").unwrap();
    let back = read_csv_dataset(buf.as_slice(), "y", &na()).unwrap();
    assert_eq!(back.feature_names, ["x1", "x2", "x3", "x4"]);
    assert_eq!(back.data.masks(), ds.masks());
    for i in 0..ds.n() {
        assert!((back.data.response(i) - ds.response(i)).abs() <= 1e-12);
        for j in 0..4 {
            match (back.data.get(i, j), ds.get(i, j)) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
                (None, None) => {}
                other => panic!("cell ({i}, {j}) differs: {other:?}"),
            }
        }
    }
}

#[test]
fn na_tokens_become_missing_cells() {
    let text = "a,b,y\n1,2,0\n1,2,0\n1,2,0\n1,2,0\n1,NA,0\n 3 , ,1\n";
    let ds = read_csv_dataset(text.as_bytes(), "y", &na()).unwrap().data;
    assert_eq!(ds.n(), 6);
    assert!(ds.mask(4).is_missing(1));
    assert!(!ds.mask(4).is_missing(0));
    assert_eq!(ds.mask(4).to_string(), "01");
    assert_eq!(ds.get(5, 0), Some(3.0));
    assert_eq!(ds.get(5, 1), None);
}

#[test]
fn target_column_can_sit_anywhere() {
    let ds = read_csv_dataset("y,a\n5,1\n6,2\n".as_bytes(), "y", &na())
        .unwrap()
        .data;
    assert_eq!(ds.responses(), [5.0, 6.0]);
    assert_eq!(ds.get(1, 0), Some(2.0));
}

#[test]
fn header_only_file_gives_empty_dataset() {
    let ds = read_csv_dataset("a,b,y\n".as_bytes(), "y", &na())
        .unwrap()
        .data;
    assert_eq!((ds.n(), ds.dim()), (0, 2));
}

#[test]
fn malformed_input_is_reported() {
    match read_csv_dataset("a,y\n1,0\nabc,1\n".as_bytes(), "y", &na()) {
        Err(Error::Parse { row, column, value }) => {
            assert_eq!((row, column.as_str(), value.as_str()), (2, "a", "abc"));
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(
        read_csv_dataset("a,y\n1,NA\n".as_bytes(), "y", &na()),
        Err(Error::MissingTarget { row: 1 })
    ));
    assert!(matches!(
        read_csv_dataset("a,b\n1,2\n".as_bytes(), "y", &na()),
        Err(Error::MissingTargetColumn(_))
    ));
    assert!(read_csv_dataset("a,y\ninf,1\n".as_bytes(), "y", &na()).is_err());
}

#[test]
fn inject_mcar_respects_rate_and_existing_masks() {
    let params = GlmParams::reference(3).unwrap();
    let ds = generate_glm_dataset(&params, 2000, &McarSpec::new(0.1), 6).unwrap();

    let same = inject_mcar(&ds, &[0, 1, 2], 0.0, 1).unwrap();
    assert_eq!(same.masks(), ds.masks());
    assert_eq!(same.responses(), ds.responses());
    assert!((0..ds.n()).all(|i| (0..3).all(|j| same.get(i, j) == ds.get(i, j))));

    let full = inject_mcar(&ds, &[1], 1.0, 1).unwrap();
    assert!(full.masks().iter().all(|m| m.is_missing(1)));

    let count =
        |d: &cpmda::MaskedDataset| d.masks().iter().map(|m| m.pattern_size()).sum::<usize>();
    let mut prev = count(&ds);
    for p in [0.1, 0.3, 0.6] {
        let out = inject_mcar(&ds, &[0, 2], p, 1).unwrap();
        for i in 0..ds.n() {
            assert!(ds.mask(i).is_included_in(out.mask(i)));
            assert_eq!(out.mask(i).is_missing(1), ds.mask(i).is_missing(1));
        }
        let c = count(&out);
        assert!(c >= prev);
        prev = c;
    }
    assert!(inject_mcar(&ds, &[3], 0.5, 1).is_err());
    assert!(inject_mcar(&ds, &[0], 1.5, 1).is_err());
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic(2);
    cfg.sizes.train = 150;
    cfg.sizes.cal = 80;
    cfg.sizes.test = 100;
    cfg.sizes.per_pattern = Some(20);
    cfg.experiment.repetitions = 2;
    cfg.methods.list = vec![Method::Cqr, Method::CqrMdaNested];
    cfg
}

#[test]
fn results_are_deterministic_and_parse_back() {
    let reports = run_experiment(&tiny_config()).unwrap();
    let rows = results_rows(&reports);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    emit_results(&rows, &a).unwrap();
    let mut reversed = rows.clone();
    reversed.reverse();
    emit_results(&reversed, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER);

    let back = read_results(text.as_bytes()).unwrap();
    assert_eq!(back.len(), rows.len());
    for r in &back {
        assert!((0.0..=1.0).contains(&r.coverage));
        assert!((0.0..=1.0).contains(&r.infinite_fraction));
    }
}

#[test]
fn results_with_wrong_header_are_rejected() {
    let mut buf = Vec::new();
    write_results(&mut buf, &[]).unwrap();
    assert!(read_results(buf.as_slice()).unwrap().is_empty());
    assert!(read_results("method,coverage\ncqr,0.9\n".as_bytes()).is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = tiny_config();
    let text = config_to_string(&cfg).unwrap();
    assert_eq!(parse_config(&text).unwrap(), cfg);
}

#[test]
fn config_parses_documented_keys() {
    let cfg = parse_config(
        r#"
[generator]
d = 3
sigma_eps = 0.5

[missingness]
rate = 0.3
columns = [0, 2]

[methods]
list = ["cqr", "cqr_mda_exact"]
alpha = 0.2

[sizes]
train = 100
cal = 50
test = 40

[experiment]
repetitions = 3
seed = 9
"#,
    )
    .unwrap();
    assert_eq!(cfg.methods.list, [Method::Cqr, Method::CqrMdaExact]);
    assert_eq!(cfg.missingness.columns, Some(vec![0, 2]));
    assert_eq!(cfg.experiment.seed, 9);
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    assert!(matches!(
        parse_config("[sizes]\ntrian = 5\n"),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        parse_config("[sizes]\ntrain = 100\n"),
        Err(Error::Config(_))
    ));
    assert!(parse_config("[generator]\n\n[sizes]\ntrain = 100\n").is_ok());
    assert!(matches!(
        parse_config("[methods]\nlist = [\"magic\"]\n"),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        parse_config("[generator]\nd = 2\n\n[methods]\nalpha = 0.0\n"),
        Err(Error::Config(_))
    ));
}

#[test]
fn relative_data_path_resolves_against_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "[data]\npath = \"d.csv\"\ntarget = \"y\"\n").unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.data.unwrap().path, dir.path().join("d.csv"));
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if let Some(data) = &cfg.data {
                assert!(data.path.exists(), "{}", data.path.display());
            }
            seen += 1;
        }
    }
    assert_eq!(seen, 3);
}
