//! Tour of the label-shift stream constructions.
//!
//! Samples a balanced test pool from the ten-class benchmark mixture and
//! builds each kind of shifted batch stream over it, printing the class
//! histogram so the shapes are visible side by side.

use shiftlab::datagen::{benchmark_spec, make_stream, sample_balanced, ShiftSpec};

fn main() -> shiftlab::Result<()> {
    let spec = benchmark_spec();
    let pool = sample_balanced(&spec, 200, 42)?;
    println!("pool: {} samples, {} classes, {} features", pool.n(), pool.k, spec.dim);
    println!();

    let shifts = vec![
        ShiftSpec::Balanced,
        ShiftSpec::LongTail { rho: 10.0, inverted: false },
        ShiftSpec::LongTail { rho: 100.0, inverted: true },
        ShiftSpec::OnlineImbalanced { ir: 100.0, subset_size: 400 },
        ShiftSpec::Dirichlet { delta: 0.1, n_chunks: 10 },
    ];

    for shift in &shifts {
        let stream = make_stream(&pool, shift, 64, 7)?;
        let counts = stream.class_counts();
        println!("{}", shift.label());
        println!("  batches: {}, samples: {}", stream.batches.len(), stream.n_samples());
        println!("  class counts: {:?}", counts);
        // online imbalance hides inside marginal counts; show one subset
        if let ShiftSpec::OnlineImbalanced { subset_size, .. } = shift {
            let per_batch = subset_size / 64;
            let mut sub = vec![0usize; pool.k];
            for b in stream.batches.iter().take(per_batch) {
                for &y in &b.y {
                    sub[y] += 1;
                }
            }
            println!("  first subset alone: {:?}", sub);
        }
        println!();
    }
    Ok(())
}
