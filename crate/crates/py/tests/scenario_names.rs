use maxhom::experiment::Scenario;
use maxhom_py::parse_scenario;

#[test]
fn scenario_names_round_trip() {
    for name in ["validate", "eps_run", "galerkin_run", "cell", "hom_run", "converge", "cross_validate"] {
        assert_eq!(parse_scenario(name).unwrap().name(), name);
    }
    assert_eq!(parse_scenario("hom-run").unwrap(), Scenario::HomRun);
}

#[test]
fn unknown_scenario_lists_choices() {
    let err = parse_scenario("nope").unwrap_err();
    assert!(err.contains("cross_validate"), "{err}");
}
