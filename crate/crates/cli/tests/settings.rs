use std::time::Duration;

use clap::Parser;
use vpr_rerank::retrieval::Metric;
use vpr_rerank::VarianceMode;
use vpr_rerank_cli::{Backend, Cli, ModeArg, RunConfig, Settings};

fn effective(flags: &[&str], file: &str) -> Result<RunConfig, String> {
    let mut argv = vec!["vpr-rerank"];
    argv.extend_from_slice(flags);
    argv.push("mock-check");
    let cli = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
    let file = Settings::from_toml(file).map_err(|e| e.to_string())?;
    RunConfig::resolve(&cli.settings, &file).map_err(|e| e.to_string())
}

struct Case {
    key: &'static str,
    flag: &'static [&'static str],
    file: &'static str,
    get: fn(&RunConfig) -> String,
    default: &'static str,
    from_flag: &'static str,
    from_file: &'static str,
}

macro_rules! case {
    ($key:literal, [$($flag:literal),*], $file:literal, |$c:ident| $get:expr, $def:literal, $fl:literal, $fi:literal) => {
        Case {
            key: $key,
            flag: &[$($flag),*],
            file: $file,
            get: |$c: &RunConfig| format!("{:?}", $get),
            default: $def,
            from_flag: $fl,
            from_file: $fi,
        }
    };
}

fn cases() -> Vec<Case> {
    vec![
        case!("top-n", ["--top-n", "7"], "top-n = 3", |c| c.top_n, "20", "7", "3"),
        case!("metric", ["--metric", "l2"], "metric = \"cosine\"", |c| c.metric, "Cosine", "L2", "Cosine"),
        case!("prompt-file", ["--prompt-file", "a.txt"], "prompt-file = \"b.txt\"", |c| c.prompt_file, "None", "Some(\"a.txt\")", "Some(\"b.txt\")"),
        case!("endpoint", ["--endpoint", "http://a"], "endpoint = \"http://b\"", |c| c.endpoint, "None", "Some(\"http://a\")", "Some(\"http://b\")"),
        case!("model", ["--model", "m1"], "model = \"m2\"", |c| c.model, "None", "Some(\"m1\")", "Some(\"m2\")"),
        case!("temperature", ["--temperature", "0.9"], "temperature = 0.3", |c| c.temperature, "0.7", "0.9", "0.3"),
        case!("single-pass-temperature", ["--single-pass-temperature", "0.2"], "single-pass-temperature = 0.1", |c| c.single_pass_temperature, "0.0", "0.2", "0.1"),
        case!("mode", ["--mode", "single"], "mode = \"uasc\"", |c| c.mode, "Uasc", "Single", "Uasc"),
        case!("samples", ["--samples", "9"], "samples = 3", |c| c.calibration.n_samples, "5", "9", "3"),
        case!("lambda", ["--lambda", "0.8"], "lambda = 0.5", |c| c.calibration.lambda, "0.5", "0.8", "0.5"),
        case!("variance-mode", ["--variance-mode", "sample"], "variance-mode = \"population\"", |c| c.calibration.variance_mode, "Population", "Sample", "Population"),
        case!("radius-m", ["--radius-m", "10"], "radius-m = 50.0", |c| c.eval.radius_m, "25.0", "10.0", "50.0"),
        case!("k", ["--k", "1,20"], "k = [2, 3]", |c| c.eval.k_values, "[1, 5, 10]", "[1, 20]", "[2, 3]"),
        case!("concurrency", ["--concurrency", "2"], "concurrency = 32", |c| c.concurrency, "8", "2", "32"),
        case!("request-timeout-s", ["--request-timeout-s", "1.5"], "request-timeout-s = 30", |c| c.request_timeout.as_secs_f64(), "120.0", "1.5", "30.0"),
        case!("max-retries", ["--max-retries", "0"], "max-retries = 6", |c| c.max_retries, "3", "0", "6"),
        case!("cache-dir", ["--cache-dir", "c1"], "cache-dir = \"c2\"", |c| c.cache_dir, "None", "Some(\"c1\")", "Some(\"c2\")"),
        case!("max-side", ["--max-side", "512"], "max-side = 256", |c| c.max_side, "None", "Some(512)", "Some(256)"),
        case!("mock", ["--mock=false"], "mock = true", |c| c.mock, "false", "false", "true"),
        case!("mock-seed", ["--mock-seed", "4"], "mock-seed = 9", |c| c.mock_config.seed, "0", "4", "9"),
        case!("mock-noise", ["--mock-noise", "0.3"], "mock-noise = 0.05", |c| c.mock_config.noise_scale, "0.1", "0.3", "0.05"),
        case!("mock-malform-rate", ["--mock-malform-rate", "0.2"], "mock-malform-rate = 0.4", |c| c.mock_config.malform_rate, "0.0", "0.2", "0.4"),
        case!("mock-fence-rate", ["--mock-fence-rate", "1"], "mock-fence-rate = 0.5", |c| c.mock_config.fence_rate, "0.0", "1.0", "0.5"),
        case!("mock-reference-distance-m", ["--mock-reference-distance-m", "60"], "mock-reference-distance-m = 200.0", |c| c.mock_config.reference_distance_m, "100.0", "60.0", "200.0"),
        case!("mock-heteroscedastic", ["--mock-heteroscedastic"], "mock-heteroscedastic = false", |c| c.mock_config.heteroscedastic, "false", "true", "false"),
    ]
}

#[test]
fn flag_beats_file_beats_default_for_every_setting() {
    let all = cases();
    assert_eq!(all.len(), 25, "one case per setting");
    for c in &all {
        let neither = effective(&[], "").unwrap();
        assert_eq!((c.get)(&neither), c.default, "{}: default", c.key);
        let file_only = effective(&[], c.file).unwrap();
        assert_eq!((c.get)(&file_only), c.from_file, "{}: file", c.key);
        let flag_only = effective(c.flag, "").unwrap();
        assert_eq!((c.get)(&flag_only), c.from_flag, "{}: flag", c.key);
        let both = effective(c.flag, c.file).unwrap();
        assert_eq!((c.get)(&both), c.from_flag, "{}: flag over file", c.key);
    }
}

#[test]
fn every_setting_is_covered() {
    let mut full = String::new();
    for c in cases() {
        full.push_str(c.file);
        full.push('\n');
    }
    // A field with no case stays unset.
    let s = Settings::from_toml(&full).unwrap();
    let fields = format!("{s:?}");
    assert!(!fields.contains("None"), "{fields}");
}

#[test]
fn lambda_example() {
    let c = effective(&["--lambda", "0.8"], "lambda = 0.5").unwrap();
    assert_eq!(c.calibration.lambda, 0.8);
    assert_eq!(c.calibration.variance_mode, VarianceMode::Population);
    assert_eq!(c.metric, Metric::Cosine);
    assert_eq!(c.mode, ModeArg::Uasc);
    assert_eq!(c.request_timeout, Duration::from_secs(120));
}

#[test]
fn invalid_values_and_keys_are_rejected() {
    for flags in [
        &["--lambda", "-1"][..],
        &["--samples", "0"],
        &["--top-n", "0"],
        &["--k", "5,1"],
        &["--radius-m", "0"],
        &["--temperature", "-0.1"],
        &["--concurrency", "0"],
        &["--request-timeout-s", "0"],
        &["--mock-malform-rate", "1.5"],
        &["--max-side", "0"],
        &["--mode", "triple"],
    ] {
        assert!(effective(flags, "").is_err(), "{flags:?}");
    }
    assert!(effective(&[], "lamda = 0.5").is_err());
    assert!(effective(&[], "lambda = \"high\"").is_err());
    assert!(effective(&[], "k = 5").is_err());
}

#[test]
fn backend_selection() {
    let pick = |flags: &[&str], file: &str| {
        let mut argv = vec!["vpr-rerank"];
        argv.extend_from_slice(flags);
        argv.push("mock-check");
        let cli = Cli::try_parse_from(argv).unwrap();
        let cfg = RunConfig::resolve(&cli.settings, &Settings::from_toml(file).unwrap()).unwrap();
        cfg.backend(&cli.settings)
    };
    assert!(pick(&[], "").is_err());
    assert!(pick(&["--mock", "--endpoint", "http://x"], "").is_err());
    assert!(pick(&["--endpoint", "http://x"], "").is_err(), "model is required");
    assert!(pick(&["--endpoint", "http://x", "--model", "m", "--mock-seed", "3"], "").is_err());
    assert!(matches!(
        pick(&["--endpoint", "http://x", "--model", "m"], "mock-seed = 3"),
        Ok(Backend::Endpoint { .. })
    ));
    match pick(&["--mock", "--mock-seed", "3"], "") {
        Ok(Backend::Mock(m)) => assert_eq!(m.seed, 3),
        other => panic!("{other:?}"),
    }
    assert!(matches!(pick(&[], "mock = true"), Ok(Backend::Mock(_))));
    assert!(pick(&["--mock=false"], "mock = true").is_err());
}
