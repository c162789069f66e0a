//! Closed-form optimal refinement for a linear centroid model.
//!
//! For a classifier reduced to its class-centroid geometry, the best linear
//! map from train-prior-centered logits to test-prior-centered ones has a
//! closed form. Matching priors yield exactly the identity; a skewed test
//! prior yields a matrix that boosts the under-represented classes.

use shiftlab::linalg::Matrix;
use shiftlab::rng::rng_from;
use shiftlab::theory::{optimal_refinement, CentroidModel};

use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> shiftlab::Result<()> {
    let k = 4;
    let d = 6;
    let mut rng = rng_from(11);
    let mut means = Matrix::zeros(k, d);
    for r in 0..k {
        for v in means.row_mut(r) {
            *v = 2.0 * rng.sample::<f64, _>(StandardNormal);
        }
    }

    // matched priors: the optimal map is the identity
    let uniform = vec![1.0 / k as f64; k];
    let matched = CentroidModel {
        means: means.clone(),
        train_priors: uniform.clone(),
        test_priors: uniform.clone(),
    };
    let w_id = optimal_refinement(&matched)?;
    let mut max_off = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            max_off = max_off.max((w_id.get(i, j) - target).abs());
        }
    }
    println!("matched priors: max |W - I| entry = {max_off:.2e}");
    println!();

    // skewed test prior: one dominant class
    let mut q = vec![0.1; k];
    q[0] = 0.7;
    let skewed = CentroidModel { means, train_priors: uniform, test_priors: q.clone() };
    let w = optimal_refinement(&skewed)?;
    println!("test priors {q:?} give the refinement matrix:");
    for i in 0..k {
        let row: Vec<String> = (0..k).map(|j| format!("{:>7.3}", w.get(i, j))).collect();
        println!("  [{}]", row.join(", "));
    }
    println!();

    // the refined prior row reproduces the test prior
    let p = vec![1.0 / k as f64; k];
    let mut refined_prior = vec![0.0; k];
    for j in 0..k {
        refined_prior[j] = (0..k).map(|i| p[i] * w.get(i, j)).sum();
    }
    let row: Vec<String> = refined_prior.iter().map(|v| format!("{v:.4}")).collect();
    println!("uniform prior pushed through W: [{}]", row.join(", "));
    Ok(())
}
