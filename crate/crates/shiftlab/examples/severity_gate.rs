//! The split refiner's severity gate on balanced vs imbalanced batches.
//!
//! The split variant pairs a transform network with a scalar detector: a
//! logistic read-out of the batch's mean deviation-from-uniform. Gate open
//! (severity above one half) applies the transform; gate closed leaves
//! predictions alone. This example trains one on the four-class toy and
//! prints the learned severity curve plus the gate's verdict across streams.

use shiftlab::adapt::{build_classifier, pretrain, PretrainConfig};
use shiftlab::datagen::{make_stream, sample_balanced, toy_spec, ShiftSpec};
use shiftlab::refiner::{batch_signature, train_split, Refiner, RefinerTrainConfig};
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

    let inter = sample_balanced(&spec, 500, derive_seed(seed, "intermediate", 0))?;
    let cfg = RefinerTrainConfig { seed: derive_seed(seed, "refiner", 0), ..Default::default() };
    let trained = train_split(&model, &inter, &cfg, false)?;
    let split = match &trained.refiner {
        Refiner::Split(s) => s,
        _ => unreachable!("train_split returns the split variant"),
    };

    println!("learned severity curve over the mean deviation d:");
    for i in 0..8 {
        let d = split.d_offset() + 0.75 * i as f64;
        println!("  d = {:>5.2}  severity = {:.3}", d, split.severity(d));
    }
    println!();

    let pool = sample_balanced(&spec, 400, derive_seed(seed, "test", 0))?;
    let shifts = [
        ShiftSpec::Balanced,
        ShiftSpec::OnlineImbalanced { ir: 5.0, subset_size: 256 },
        ShiftSpec::OnlineImbalanced { ir: 5000.0, subset_size: 256 },
    ];
    println!("{:<42} {:>8} {:>10}", "stream", "mean d", "gate open");
    for shift in shifts {
        let stream = make_stream(&pool, &shift, 64, derive_seed(seed, "stream", 0))?;
        let mut total_d = 0.0;
        let mut open = 0;
        for batch in &stream.batches {
            let sig = batch_signature(&model, &batch.x, 1.0)?;
            total_d += sig.d;
            if split.severity(sig.d) > 0.5 {
                open += 1;
            }
        }
        let n = stream.batches.len();
        println!("{:<42} {:>8.3} {:>7}/{}", shift.label(), total_d / n as f64, open, n);
    }
    Ok(())
}
