//! Temperature scaling from logit statistics, batch by batch.
//!
//! A per-batch temperature is estimated from second-moment statistics of the
//! logits relative to the training reference. Identical statistics give
//! temperature one; zero-mean logits give exact scaling homogeneity. Over a
//! stream, the running mean temperature smooths the per-batch estimates.

use shiftlab::adapt::{build_classifier, pretrain, PretrainConfig};
use shiftlab::datagen::{make_stream, sample_balanced, toy_spec, ShiftSpec};
use shiftlab::nn::BnMode;
use shiftlab::refiner::{batch_logit_stats, temperature_from_stats, RunningTemperature};
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

    let train_logits = model.logits(&train.x, BnMode::Eval)?;
    let reference = batch_logit_stats(&train_logits)?;

    // identical statistics pin the temperature at one
    let t_same = temperature_from_stats(spec.k, reference, reference);
    println!("train vs train: t = {:.6} (degenerate: {})", t_same.t, t_same.degenerate);
    println!();

    // per-batch temperatures over an imbalanced stream
    let pool = sample_balanced(&spec, 400, derive_seed(seed, "test", 0))?;
    let shift = ShiftSpec::OnlineImbalanced { ir: 100.0, subset_size: 256 };
    let stream = make_stream(&pool, &shift, 64, derive_seed(seed, "stream", 0))?;
    let mut running = RunningTemperature::default();
    println!("{:>6} {:>10} {:>12}", "batch", "t", "running t");
    for (i, batch) in stream.batches.iter().enumerate() {
        let logits = model.logits(&batch.x, BnMode::Replace)?;
        let stats = batch_logit_stats(&logits)?;
        let t = temperature_from_stats(spec.k, reference, stats);
        running.push(t.t);
        println!("{i:>6} {:>10.4} {:>12.4}", t.t, running.mean());
    }
    println!();
    println!("{} batches, final running temperature {:.4}", running.count(), running.mean());
    Ok(())
}
