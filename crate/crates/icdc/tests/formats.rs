use icdc::checkpoint::{load_model, save_model, Checkpoint};
use icdc::config::RunConfig;
use icdc::formats::{read_instances, read_solution, write_instances, write_solution};
use icdc::Error;
use icdc_core::model::{IcdcModel, ModelConfig};
use icdc_core::problems::{generate, Family};
use icdc_core::{rng_from_seed, SolutionMatrix};

#[test]
fn instances_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let insts = vec![
        generate(Family::Atsp, (6, 6), 1).unwrap(),
        generate(Family::Pmsp, (7, 3), 2).unwrap(),
        generate(Family::Nav, (5, 5), 3).unwrap(),
    ];
    let seeds = vec![Some(1), None, Some(3)];
    write_instances(&path, &insts, &seeds).unwrap();
    let ds = read_instances(&path).unwrap();
    assert_eq!(ds.instances, insts);
    assert_eq!(ds.seeds, seeds);
}

#[test]
fn parse_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_instances(&path, &[generate(Family::Atsp, (4, 4), 0).unwrap()], &[Some(0)]).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"kind\":\"atsp\",\"dist\":[[0.0,1.0]]}\n");
    std::fs::write(&path, text).unwrap();
    match read_instances(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn missing_file_reports_path() {
    let err = read_instances(std::path::Path::new("/nonexistent/x.jsonl")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.jsonl"));
}

#[test]
fn solution_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.json");
    let x = SolutionMatrix::from_tour(&[0, 3, 1, 2]);
    write_solution(&path, &x).unwrap();
    assert_eq!(read_solution(&path).unwrap(), x);
}

fn tiny_model() -> IcdcModel {
    let mut cfg = ModelConfig::new(Family::Atsp, 8, 2, 2, 5);
    cfg.max_items = 8;
    IcdcModel::init(cfg, &mut rng_from_seed(9)).unwrap()
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let model = tiny_model();
    save_model(&path, &model).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params().values(), model.params().values());
    assert_eq!(back.running_stats(), model.running_stats());
}

#[test]
fn checkpoint_mismatch_is_rejected() {
    let model = tiny_model();
    let mut ck = Checkpoint::from_model(&model);
    ck.tensors.pop();
    assert!(matches!(ck.to_model(), Err(Error::Schema(_))));

    let mut ck = Checkpoint::from_model(&model);
    ck.tensors[0].rows += 1;
    let cols = ck.tensors[0].cols;
    ck.tensors[0].data.extend(std::iter::repeat_n(0.0, cols));
    assert!(ck.to_model().is_err());

    let mut ck = Checkpoint::from_model(&model);
    ck.model.d = 16;
    assert!(ck.to_model().is_err());
}

#[test]
fn config_missing_key_names_it() {
    let err = RunConfig::parse(r#"{"family":"atsp","size":[8]}"#).unwrap_err();
    assert!(err.to_string().contains("epochs"), "{err}");
    let err = RunConfig::parse(r#"{"family":"atsp","size":[8],"epochs":1,"learning_rat":1}"#).unwrap_err();
    assert!(err.to_string().contains("learning_rat"), "{err}");
}

#[test]
fn config_overrides_defaults() {
    let c = RunConfig::parse(r#"{"family":"pmsp","size":[10,3],"epochs":4,"kappa":0.25,"d":8,"weighting":"global"}"#).unwrap();
    let t = c.train_config().unwrap();
    assert_eq!(t.size, (10, 3));
    assert_eq!(t.kappa, 0.25);
    assert_eq!(t.epochs, 4);
    assert_eq!(t.weighting.name(), "global");
    assert_eq!(c.model_config().unwrap().d, 8);
    let bad = RunConfig::parse(r#"{"family":"pmsp","size":[10],"epochs":1}"#).unwrap();
    assert!(bad.train_config().unwrap_err().to_string().contains("size"));
    let bad = RunConfig::parse(r#"{"family":"atsp","size":[5],"epochs":1,"schedule":"quadratic"}"#).unwrap();
    assert!(bad.model_config().unwrap_err().to_string().contains("schedule"));
}
