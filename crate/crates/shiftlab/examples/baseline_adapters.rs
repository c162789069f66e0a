//! Baseline test-time adapters head to head on a long-tail stream.
//!
//! Pretrains a small classifier on the four-class planar toy mixture, then
//! scores eval-mode inference, batch-stat replacement, entropy minimization,
//! and confident pseudo-labeling on test streams of increasing class
//! imbalance. Batch-stat replacement degrades with the skew because the
//! normalization statistics follow it.

use shiftlab::adapt::{build_classifier, pretrain, run_stream, AdaptConfig, Method, PretrainConfig};
use shiftlab::datagen::{make_stream, sample_balanced, toy_spec, ShiftSpec};
use shiftlab::rng::derive_seed;
use shiftlab::theory::ToyParams;

fn main() -> shiftlab::Result<()> {
    let seed = 0;
    let params = ToyParams::new(1.0, 2.0, 0.4, 0.25)?;
    let spec = toy_spec(&params)?;

    let train = sample_balanced(&spec, 500, derive_seed(seed, "train", 0))?;
    let mut model = build_classifier(spec.dim, &[32, 32], spec.k, derive_seed(seed, "init", 0));
    let report = pretrain(
        &mut model,
        &train,
        &PretrainConfig { epochs: 20, seed: derive_seed(seed, "pretrain", 0), ..Default::default() },
    )?;
    println!("pretrained: train accuracy {:.4} after {} epochs", report.final_train_accuracy, report.epochs);
    println!();

    let pool = sample_balanced(&spec, 400, derive_seed(seed, "test", 0))?;
    let methods = [Method::NoAdapt, Method::BnAdapt, Method::Tent, Method::Pl];

    println!("{:<10} {}", "", "accuracy by head/tail ratio");
    println!("{:<10} {:>8} {:>8} {:>8}", "method", "rho=1", "rho=10", "rho=100");
    for method in methods {
        let mut row = format!("{:<10}", method.name());
        for rho in [1.0, 10.0, 100.0] {
            let shift = ShiftSpec::LongTail { rho, inverted: false };
            let stream = make_stream(&pool, &shift, 64, derive_seed(seed, "stream", rho as u64))?;
            let cfg = AdaptConfig { method, ..Default::default() };
            let run = run_stream(&model, None, &stream, &cfg)?;
            row.push_str(&format!(" {:>8.4}", run.overall_accuracy));
        }
        println!("{row}");
    }
    Ok(())
}
