//! Batch-stat replacement recovers a constant input shift.
//!
//! Every test input is offset by a fixed vector. Eval-mode inference feeds
//! the classifier inputs normalized by stale training statistics and loses
//! accuracy; replacing the normalization statistics with those of the test
//! batch absorbs the offset almost entirely.

use shiftlab::adapt::{build_classifier, evaluate, pretrain, run_stream, AdaptConfig, Method, PretrainConfig};
use shiftlab::datagen::{make_stream, sample_balanced, toy_spec, ShiftSpec};
use shiftlab::nn::BnMode;
use shiftlab::rng::derive_seed;
use shiftlab::theory::ToyParams;

fn main() -> shiftlab::Result<()> {
    let seed = 0;
    let params = ToyParams::new(1.0, 2.0, 0.4, 0.25)?;
    let spec = toy_spec(&params)?;

    let train = sample_balanced(&spec, 500, derive_seed(seed, "train", 0))?;
    let mut model = build_classifier(spec.dim, &[32, 32], spec.k, derive_seed(seed, "init", 0));
    pretrain(
        &mut model,
        &train,
        &PretrainConfig { epochs: 20, seed: derive_seed(seed, "pretrain", 0), ..Default::default() },
    )?;

    let clean = sample_balanced(&spec, 400, derive_seed(seed, "test", 0))?;
    let clean_acc = evaluate(&model, &clean, BnMode::Eval)?;
    println!("clean test accuracy (eval mode): {clean_acc:.4}");

    // offset every input by two sigma along the first feature axis
    let delta = [2.0 * params.sigma, 0.0];
    let mut shifted = clean.clone();
    for r in 0..shifted.x.rows() {
        for (v, d) in shifted.x.row_mut(r).iter_mut().zip(delta) {
            *v += d;
        }
    }

    println!("input offset: {delta:?}");
    for method in [Method::NoAdapt, Method::BnAdapt] {
        let stream = make_stream(&shifted, &ShiftSpec::Balanced, 128, derive_seed(seed, "stream", 0))?;
        let cfg = AdaptConfig { method, ..Default::default() };
        let run = run_stream(&model, None, &stream, &cfg)?;
        println!(
            "{:<10} on shifted inputs: {:.4} ({:+.1} points vs clean)",
            method.name(),
            run.overall_accuracy,
            100.0 * (run.overall_accuracy - clean_acc)
        );
    }
    Ok(())
}
