use deftx::config::{format_rank, parse_rank, ConfigError, ExperimentConfig, Method};
use deftx_core::deft::RankPolicy;

#[test]
fn defaults_validate_and_round_trip() {
    let cfg = ExperimentConfig::default();
    cfg.validate().unwrap();
    let text = cfg.to_ini_string();
    assert_eq!(ExperimentConfig::from_ini_str(&text).unwrap(), cfg);
}

#[test]
fn edited_configs_round_trip_exactly() {
    let mut cfg = ExperimentConfig::default();
    for o in [
        "data.epsilon=0.1",
        "language.lr=0.000123456789",
        "task.budget=0.0517",
        "language.rank=lin:0.75",
        "task.rank=12",
        "run.method=lt-sft",
        "sweep.ranks_l=4, 8, var:0.5",
        "sweep.seeds=1,2,3",
        "pretrain.seed=18446744073709551615",
    ] {
        cfg.apply_override(o).unwrap();
    }
    let back = ExperimentConfig::from_ini_str(&cfg.to_ini_string()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.run.method, Method::LtSft);
    assert_eq!(back.sweep.ranks_l, vec![RankPolicy::Uniform(4), RankPolicy::Uniform(8), RankPolicy::VarianceFraction(0.5)]);
    assert_eq!(back.pretrain.seed, u64::MAX);
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let mut cfg = ExperimentConfig::default();
    assert!(matches!(cfg.apply_override("model.colour=3"), Err(ConfigError::UnknownKey { .. })));
    assert!(matches!(cfg.apply_override("nowhere.lr=3"), Err(ConfigError::UnknownKey { .. })));
    assert!(matches!(cfg.apply_override("task.lr=fast"), Err(ConfigError::BadValue { .. })));
    assert!(matches!(cfg.apply_override("task.lr"), Err(ConfigError::BadOverride(_))));
    assert!(ExperimentConfig::from_ini_str("[data]\nepsilon = 2\n").is_err());
    assert!(ExperimentConfig::from_ini_str("[model]\nd_model = 15\n").is_err());
}

#[test]
fn manifest_sections_are_ignored_on_load() {
    let text = "[manifest]\ncommand = pretrain\n[inputs]\nbase = x\n[data]\nepsilon = 0.25\n";
    let cfg = ExperimentConfig::from_ini_str(text).unwrap();
    assert_eq!(cfg.data.epsilon, 0.25);
}

#[test]
fn rank_specs_parse_and_print() {
    for s in ["100", "var:0.9", "lin:0.5"] {
        assert_eq!(format_rank(parse_rank(s).unwrap()), s);
    }
    assert_eq!(parse_rank("var:0.9").unwrap(), RankPolicy::VarianceFraction(0.9));
    for bad in ["", "var:", "var:1.5", "lin:0", "x:0.3", "-1"] {
        assert!(parse_rank(bad).is_err(), "{bad}");
    }
}

#[test]
fn jobs_reflect_the_method() {
    let mut cfg = ExperimentConfig::default();
    assert!(cfg.language_job().denoise.is_some());
    assert_eq!(cfg.language_job().train.l1_lambda, 0.1);
    assert_eq!(cfg.task_job().budget_fraction, cfg.task.budget);
    cfg.run.method = Method::LtSft;
    assert!(cfg.language_job().denoise.is_none());
    assert!(cfg.task_job().denoise.is_none());
}
