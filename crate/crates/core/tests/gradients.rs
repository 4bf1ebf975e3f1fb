mod support;

use support::gradcheck::{check, loss, tiny};

#[test]
fn every_parameter_matches_finite_differences() {
    for seed in 1..=3 {
        let failures = check(seed);
        assert!(failures.is_empty(), "seed {seed}: {failures:#?}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let tracker = tiny(5);
    let mut store = tracker.params().clone();
    store.zero_grads();
    loss(&tracker, Some(&mut store));
    for (name, t) in store.iter() {
        assert!(t.grad().unwrap().iter().any(|&g| g != 0.0), "{name} has an all-zero gradient");
    }
}
