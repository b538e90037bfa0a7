mod common;

use common::*;
use nautilus::gradcheck::GradCheckReport;

fn assert_all(suite: Vec<(String, GradCheckReport)>) {
    let mut failed = Vec::new();
    for (name, rep) in &suite {
        assert!(rep.checked > 0, "{name}: nothing checked");
        if !rep.passed() {
            failed.push(format!("{name}: {:.3e} at {}", rep.max_rel_err, rep.worst));
        }
    }
    assert!(failed.is_empty(), "gradient mismatches:\n{}", failed.join("\n"));
}

#[test]
fn graph_operations() {
    assert_all(graph_op_checks());
}

#[test]
fn layer_primitives() {
    assert_all(layer_checks());
}

#[test]
fn networks_and_vocoder() {
    assert_all(network_checks());
}

#[test]
fn composite_losses() {
    assert_all(composite_loss_checks());
}
