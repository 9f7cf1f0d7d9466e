mod common;

use common::fd::{self, Outcome, TOLERANCE};

fn check(group: fn(&mut Vec<Outcome>)) {
    let mut out = Vec::new();
    group(&mut out);
    for o in &out {
        println!(
            "{}: {} instances, max relative error {:.2e}",
            o.name, o.instances, o.worst
        );
    }
    let bad: Vec<&str> = out
        .iter()
        .filter(|o| o.worst.is_nan() || o.worst > TOLERANCE)
        .map(|o| o.name.as_str())
        .collect();
    assert!(bad.is_empty(), "gradient mismatch in {bad:?}");
}

#[test]
fn elementwise_and_row_ops() {
    check(fd::elementwise_and_row_ops);
}

#[test]
fn binary_ops() {
    check(fd::binary_ops);
}

#[test]
fn single_anchor_losses() {
    check(fd::single_anchor_losses);
}

#[test]
fn batch_contrastive_losses() {
    check(fd::batch_contrastive_losses);
}

#[test]
fn warmup_loss() {
    check(fd::warmup_loss_gradients);
}

#[test]
fn pretraining_losses() {
    check(fd::pretraining_loss_gradients);
}

#[test]
fn stage_two_contrastive_losses() {
    check(fd::stage_two_contrastive_gradients);
}

#[test]
fn semi_supervised_losses() {
    check(fd::semi_supervised_gradients);
}
