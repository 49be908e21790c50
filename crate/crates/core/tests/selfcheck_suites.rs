use cellseg::selfcheck::{self, Suite, DEFAULT_GRAD_SEEDS, DEFAULT_ORACLE_INSTANCES};

#[test]
fn gradient_suite_passes() {
    let results = selfcheck::run(Suite::Grads, DEFAULT_GRAD_SEEDS, DEFAULT_ORACLE_INSTANCES, &mut |o| {
        println!("{o}")
    });
    assert_eq!(results.len(), selfcheck::GRAD_CASES.len());
    let failed: Vec<String> = results.iter().filter(|o| !o.passed()).map(|o| o.to_string()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn oracle_suite_passes() {
    let results = selfcheck::run(Suite::Oracles, DEFAULT_GRAD_SEEDS, DEFAULT_ORACLE_INSTANCES, &mut |o| {
        println!("{o}")
    });
    assert!(results.iter().all(|o| o.instances >= DEFAULT_ORACLE_INSTANCES));
    let failed: Vec<String> = results.iter().filter(|o| !o.passed()).map(|o| o.to_string()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
