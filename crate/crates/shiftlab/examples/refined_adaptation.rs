//! Full pipeline: pretrain, train a prediction refiner, adapt under shift.
//!
//! On the ten-class benchmark, trains the unified refiner against the frozen
//! classifier on simulated imbalanced batches, then compares batch-stat
//! replacement with and without the refiner across long-tail test streams.
//! The refiner should buy several points at high imbalance and stay out of
//! the way when the stream is balanced.

use shiftlab::adapt::{build_classifier, pretrain, run_stream, AdaptConfig, PretrainConfig};
use shiftlab::datagen::{benchmark_spec, make_stream, sample_balanced, ShiftSpec};
use shiftlab::refiner::{train_unified, RefinerTrainConfig};
use shiftlab::rng::derive_seed;

fn main() -> shiftlab::Result<()> {
    let seed = 0;
    let spec = benchmark_spec();

    // stage 1: supervised pretraining on balanced source data
    let train = sample_balanced(&spec, 500, derive_seed(seed, "train", 0))?;
    let mut model = build_classifier(spec.dim, &[64, 64], spec.k, derive_seed(seed, "init", 0));
    let report = pretrain(
        &mut model,
        &train,
        &PretrainConfig { epochs: 40, seed: derive_seed(seed, "pretrain", 0), ..Default::default() },
    )?;
    println!("stage 1: pretrained, train accuracy {:.4}", report.final_train_accuracy);

    // stage 2: refiner training against the frozen classifier
    let inter = sample_balanced(&spec, 500, derive_seed(seed, "intermediate", 0))?;
    let cfg = RefinerTrainConfig { seed: derive_seed(seed, "refiner", 0), ..Default::default() };
    let trained = train_unified(&model, &inter, &cfg)?;
    let epoch_mean = |epoch: usize| {
        let pts: Vec<f64> = trained
            .loss_curve
            .iter()
            .filter(|p| p.epoch == epoch)
            .map(|p| p.total)
            .collect();
        pts.iter().sum::<f64>() / pts.len() as f64
    };
    let last_epoch = trained.loss_curve.last().expect("loss curve is non-empty").epoch;
    println!(
        "stage 2: refiner trained, mean loss {:.4} (first epoch) -> {:.4} (last) over {} steps",
        epoch_mean(0),
        epoch_mean(last_epoch),
        trained.loss_curve.len()
    );
    println!();

    // stage 3: shifted test streams, with and without the refiner
    let pool = sample_balanced(&spec, 200, derive_seed(seed, "test", 0))?;
    println!("{:<22} {:>8} {:>8} {:>8}", "", "rho=1", "rho=10", "rho=100");
    for (label, refiner) in [("bn_adapt", None), ("bn_adapt + refiner", Some(&trained.refiner))] {
        let mut row = format!("{label:<22}");
        for rho in [1.0, 10.0, 100.0] {
            let shift = ShiftSpec::LongTail { rho, inverted: false };
            let stream = make_stream(&pool, &shift, 64, derive_seed(seed, "stream", rho as u64))?;
            let run = run_stream(&model, refiner, &stream, &AdaptConfig::default())?;
            row.push_str(&format!(" {:>8.4}", run.overall_accuracy));
        }
        println!("{row}");
    }
    Ok(())
}
