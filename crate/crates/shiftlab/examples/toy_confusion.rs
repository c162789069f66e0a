//! Closed-form confusion structure of the four-class Gaussian toy model.
//!
//! Prints the exact confusion table of the population-mean-centered quadrant
//! classifier under a skewed test prior, checks it against a Monte Carlo
//! estimate, and runs the qualitative structure checks over the default
//! parameter grid.

use shiftlab::theory::{
    closed_form_confusion, compare_closed_form_to_mc, toy_test_priors, verify_properties,
    PropertyGrid, ToyParams,
};

fn main() -> shiftlab::Result<()> {
    let params = ToyParams::new(1.0, 2.0, 0.4, 0.4)?;
    let table = closed_form_confusion(&params)?;
    let priors = toy_test_priors(&params);

    println!("toy parameters: d={} beta={} sigma={} p={}", params.d, params.beta, params.sigma, params.p);
    println!("test priors:    {:?}", priors);
    println!();
    println!("closed-form confusion (rows = true class, cols = predicted):");
    for i in 0..table.k() {
        let row: Vec<String> = (0..table.k()).map(|j| format!("{:.4}", table.prob(i, j))).collect();
        println!("  class {}: [{}]", i, row.join(", "));
    }
    println!("accuracy under the test priors: {:.4}", table.accuracy(&priors));
    println!();

    // Monte Carlo agreement at a million draws
    let cmp = compare_closed_form_to_mc(&params, 1_000_000, 7)?;
    println!(
        "monte carlo ({} draws/class): max |diff| = {:.2e}, max deviation = {:.2} se, within 3 se: {}",
        cmp.draws_per_class, cmp.max_abs_diff, cmp.max_se_units, cmp.within_3se
    );
    println!();

    // qualitative structure over the default grid
    let report = verify_properties(&PropertyGrid::default())?;
    println!(
        "structure checks: {} cells, {} checks, {} violations",
        report.cells,
        report.checks,
        report.violations.len()
    );
    for v in &report.violations {
        println!("  violation: {v}");
    }
    assert!(report.passed(), "structure checks should pass on the default grid");
    Ok(())
}
