//! Which positions each extraction mode can see, checked by perturbing one
//! input id at a time.

mod support;

#[test]
fn hundred_random_inputs() {
    let bad = support::causality_violations(100, 2024);
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}
