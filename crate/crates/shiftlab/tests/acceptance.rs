//! Acceptance gate: eleven end-to-end checks covering the closed-form
//! theory, the oracle equivalences, the adaptation trends, gradient
//! correctness, the severity gate, temperature identities, frozen-classifier
//! contracts, and byte-level determinism. Each check prints a single
//! PASS/FAIL line (visible with `--nocapture`) and asserts.

use shiftlab::adapt::{
    build_classifier, evaluate, pl_step, pretrain, run_stream, tent_step, AdaptConfig, Method,
    MlpClassifier, PretrainConfig,
};
use shiftlab::check::grad_relative_error;
use shiftlab::datagen::{benchmark_spec, make_stream, sample_balanced, toy_spec, ShiftSpec};
use shiftlab::linalg::Matrix;
use shiftlab::loss;
use shiftlab::nn::{BnMode, ParamFilter};
use shiftlab::optim::Optimizer;
use shiftlab::refiner::{
    batch_signature, temperature_from_stats, train_split, train_unified, LogitStats, Refiner,
    RefinerTrainConfig, UnifiedRefiner,
};
use shiftlab::rng::{derive_seed, rng_from};
use shiftlab::theory::{
    compare_closed_form_to_mc, default_mc_fixtures, optimal_refinement, verify_properties,
    CentroidModel, PropertyGrid, ToyParams,
};
use rand::Rng;
use std::sync::OnceLock;
use std::time::Instant;

const SEEDS: [u64; 4] = [0, 1, 2, 3];

fn report(id: &str, what: &str, pass: bool, detail: &str) {
    println!("{id} {what}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{id} {what}: {detail}");
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard error of the mean.
fn sem(values: &[f64]) -> f64 {
    let m = mean(values);
    let var =
        values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    (var / values.len() as f64).sqrt()
}

fn toy_params() -> ToyParams {
    ToyParams::new(1.0, 2.0, 0.4, 0.25).unwrap()
}

struct SeedFixture {
    seed: u64,
    model: MlpClassifier,
    refiner: Refiner,
}

/// One pretrained classifier and unified refiner per seed on the K=10
/// benchmark, matching the sweep command's seed derivation.
fn bench_fixture() -> &'static Vec<SeedFixture> {
    static BENCH: OnceLock<Vec<SeedFixture>> = OnceLock::new();
    BENCH.get_or_init(|| {
        let spec = benchmark_spec();
        SEEDS
            .iter()
            .map(|&s| {
                let data =
                    sample_balanced(&spec, 500, derive_seed(s, "pretrain-data", 0)).unwrap();
                let mut model =
                    build_classifier(spec.dim, &[64, 64], spec.k, derive_seed(s, "model-init", 0));
                let cfg = PretrainConfig {
                    epochs: 40,
                    batch_size: 64,
                    lr: 1e-3,
                    seed: derive_seed(s, "pretrain", 0),
                    min_accuracy: 0.5,
                };
                pretrain(&mut model, &data, &cfg).unwrap();
                let ref_data =
                    sample_balanced(&spec, 500, derive_seed(s, "intermediate-data", 0)).unwrap();
                let ref_cfg = RefinerTrainConfig {
                    epochs: 20,
                    batch_size: 64,
                    hidden: 64,
                    dirichlet_delta: 0.1,
                    alpha: 0.1,
                    lr: 1e-3,
                    detector_lr: 5e-2,
                    logit_scale: 1.0,
                    seed: derive_seed(s, "refiner-train", 0),
                };
                let refiner = train_unified(&model, &ref_data, &ref_cfg).unwrap().refiner;
                SeedFixture { seed: s, model, refiner }
            })
            .collect()
    })
}

/// One pretrained classifier per seed on the four-class planar toy model.
fn toy_fixture() -> &'static Vec<(u64, MlpClassifier)> {
    static TOY: OnceLock<Vec<(u64, MlpClassifier)>> = OnceLock::new();
    TOY.get_or_init(|| {
        let spec = toy_spec(&toy_params()).unwrap();
        SEEDS
            .iter()
            .map(|&s| {
                let data =
                    sample_balanced(&spec, 500, derive_seed(s, "pretrain-data", 0)).unwrap();
                let mut model =
                    build_classifier(spec.dim, &[32, 32], spec.k, derive_seed(s, "model-init", 0));
                let cfg = PretrainConfig {
                    epochs: 20,
                    batch_size: 64,
                    lr: 1e-3,
                    seed: derive_seed(s, "pretrain", 0),
                    min_accuracy: 0.5,
                };
                pretrain(&mut model, &data, &cfg).unwrap();
                (s, model)
            })
            .collect()
    })
}

fn adapt_cfg(method: Method) -> AdaptConfig {
    AdaptConfig { method, lr: 1e-3, pl_threshold: 0.95, logit_scale: 1.0 }
}

#[test]
fn c01_closed_form_matches_monte_carlo() {
    let start = Instant::now();
    let fixtures = default_mc_fixtures();
    assert!(fixtures.len() >= 5, "need at least 5 fixtures, have {}", fixtures.len());
    let mut worst_abs = 0.0f64;
    let mut all_ok = true;
    for (i, params) in fixtures.iter().enumerate() {
        let cmp =
            compare_closed_form_to_mc(params, 1_000_000, derive_seed(0, "toy-mc", i as u64))
                .unwrap();
        worst_abs = worst_abs.max(cmp.max_abs_diff);
        all_ok &= cmp.within_3se;
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "c01",
        "closed-form confusion vs monte carlo",
        all_ok && elapsed < 30.0,
        &format!("{} fixtures x 1e6 draws, max |diff| {worst_abs:.5}, {elapsed:.1}s", fixtures.len()),
    );
}

#[test]
fn c02_confusion_properties_hold_on_default_grid() {
    let start = Instant::now();
    let rep = verify_properties(&PropertyGrid::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "c02",
        "confusion structure properties",
        rep.passed() && elapsed < 5.0,
        &format!("{} cells, {} checks, {} violations, {elapsed:.2}s", rep.cells, rep.checks, rep.violations.len()),
    );
}

/// Random geometry with feature dimension at least K, so the least-squares
/// system is comfortably overdetermined.
fn random_model(seed: u64, matched_priors: bool) -> CentroidModel {
    let mut rng = rng_from(seed);
    let k = rng.gen_range(3..=6usize);
    let d = k + rng.gen_range(0..3usize);
    let means = Matrix::from_vec(k, d, (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let norm = |raw: Vec<f64>| {
        let t: f64 = raw.iter().sum();
        raw.iter().map(|v| v / t).collect::<Vec<f64>>()
    };
    let train_priors = norm((0..k).map(|_| rng.gen_range(0.2..1.0)).collect());
    let test_priors = if matched_priors {
        train_priors.clone()
    } else {
        norm((0..k).map(|_| rng.gen_range(0.2..1.0)).collect())
    };
    CentroidModel { means, train_priors, test_priors }
}

/// Least-squares solve of `X W = Y` by Householder QR, column by column.
fn qr_least_squares(x: &Matrix, y: &Matrix) -> Matrix {
    let (m, n) = x.shape();
    assert!(m >= n, "need an overdetermined system");
    let mut a = x.clone();
    let mut rhs = y.clone();
    let cols_out = y.cols();
    for k in 0..n {
        // Householder vector for column k
        let mut norm = 0.0;
        for i in k..m {
            norm += a.get(i, k) * a.get(i, k);
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a.get(k, k) > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; m - k];
        v[0] = a.get(k, k) - alpha;
        for i in k + 1..m {
            v[i - k] = a.get(i, k);
        }
        let vtv: f64 = v.iter().map(|t| t * t).sum();
        if vtv == 0.0 {
            continue;
        }
        // reflect the remaining columns of A and all columns of the rhs
        for j in k..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * a.get(i, j);
            }
            let f = 2.0 * dot / vtv;
            for i in k..m {
                let val = a.get(i, j) - f * v[i - k];
                a.set(i, j, val);
            }
        }
        for j in 0..cols_out {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * rhs.get(i, j);
            }
            let f = 2.0 * dot / vtv;
            for i in k..m {
                let val = rhs.get(i, j) - f * v[i - k];
                rhs.set(i, j, val);
            }
        }
    }
    // back-substitute R W = Q^T Y
    let mut w = Matrix::zeros(n, cols_out);
    for j in 0..cols_out {
        for i in (0..n).rev() {
            let mut acc = rhs.get(i, j);
            for l in i + 1..n {
                acc -= a.get(i, l) * w.get(l, j);
            }
            w.set(i, j, acc / a.get(i, i));
        }
    }
    w
}

#[test]
fn c03_optimal_refinement_matches_qr_oracle() {
    let mut worst_rel = 0.0f64;
    let mut worst_identity = 0.0f64;
    for i in 0..20u64 {
        let model = random_model(derive_seed(0, "wstar-oracle", i), false);
        let w = optimal_refinement(&model).unwrap();
        let k = model.means.rows();
        let dim = model.means.cols();
        // centered centroid matrices A (train priors) and B (test priors)
        let center = |priors: &[f64]| -> Matrix {
            let mut pop = vec![0.0; dim];
            for (r, p) in priors.iter().enumerate() {
                for (c, acc) in pop.iter_mut().enumerate() {
                    *acc += p * model.means.get(r, c);
                }
            }
            let mut out = model.means.clone();
            for r in 0..k {
                for c in 0..dim {
                    let val = out.get(r, c) - pop[c];
                    out.set(r, c, val);
                }
            }
            out
        };
        let a = center(&model.train_priors);
        let b = center(&model.test_priors);
        let gram = a.matmul_t(&a);
        let gamma = (0..k).map(|r| gram.get(r, r)).sum::<f64>() / k as f64;
        let gamma = gamma.sqrt();
        // stack the prior-row constraint under the transposed centroids
        let mut x = Matrix::zeros(dim + 1, k);
        let mut y = Matrix::zeros(dim + 1, k);
        for r in 0..dim {
            for c in 0..k {
                x.set(r, c, a.get(c, r));
                y.set(r, c, b.get(c, r));
            }
        }
        for c in 0..k {
            x.set(dim, c, gamma * model.train_priors[c]);
            y.set(dim, c, gamma * model.test_priors[c]);
        }
        let w_qr = qr_least_squares(&x, &y);
        let mut diff = 0.0;
        for r in 0..k {
            for c in 0..k {
                let e = w.get(r, c) - w_qr.get(r, c);
                diff += e * e;
            }
        }
        worst_rel = worst_rel.max(diff.sqrt() / w_qr.frobenius_norm());

        let matched = random_model(derive_seed(0, "wstar-identity", i), true);
        let w_id = optimal_refinement(&matched).unwrap();
        worst_identity = worst_identity.max(w_id.max_abs_diff(&Matrix::identity(matched.means.rows())));
    }
    report(
        "c03",
        "refinement matrix vs QR least-squares oracle",
        worst_rel < 1e-8 && worst_identity < 1e-12,
        &format!("20 models, max rel Frobenius {worst_rel:.2e}, matched-prior identity {worst_identity:.2e}"),
    );
}

#[test]
fn c04_mean_centering_recovers_covariate_shift() {
    let params = toy_params();
    let spec = toy_spec(&params).unwrap();
    let delta = [2.0 * params.sigma, 0.0];
    let mut eval_accs = Vec::new();
    let mut noadapt_accs = Vec::new();
    let mut bnadapt_accs = Vec::new();
    for (s, model) in toy_fixture() {
        let pool = sample_balanced(&spec, 250, derive_seed(*s, "toy-test", 0)).unwrap();
        eval_accs.push(evaluate(model, &pool, BnMode::Eval).unwrap());
        let mut shifted = pool.clone();
        for r in 0..shifted.x.rows() {
            let row = shifted.x.row_mut(r);
            row[0] += delta[0];
            row[1] += delta[1];
        }
        let stream =
            make_stream(&shifted, &ShiftSpec::Balanced, 128, derive_seed(*s, "toy-stream", 0))
                .unwrap();
        noadapt_accs
            .push(run_stream(model, None, &stream, &adapt_cfg(Method::NoAdapt)).unwrap().overall_accuracy);
        bnadapt_accs
            .push(run_stream(model, None, &stream, &adapt_cfg(Method::BnAdapt)).unwrap().overall_accuracy);
    }
    let eval_m = mean(&eval_accs);
    let noadapt_drop = 100.0 * (eval_m - mean(&noadapt_accs));
    let bnadapt_gap = 100.0 * (eval_m - mean(&bnadapt_accs)).abs();
    report(
        "c04",
        "batch-statistic centering under covariate shift",
        noadapt_drop >= 10.0 && bnadapt_gap <= 1.0,
        &format!(
            "no-shift {:.4}, unadapted drop {noadapt_drop:.1} pts (need >= 10), adapted gap {bnadapt_gap:.2} pts (need <= 1.0), 4 seeds",
            eval_m
        ),
    );
}

#[test]
fn c05_long_tail_trends_and_refiner_gains() {
    let start = Instant::now();
    let spec = benchmark_spec();
    let rhos = [1.0, 10.0, 100.0];
    // [rho][refined] -> per-seed accuracies
    let mut acc: Vec<[Vec<f64>; 2]> = (0..rhos.len()).map(|_| [Vec::new(), Vec::new()]).collect();
    for fx in bench_fixture() {
        let pool = sample_balanced(&spec, 200, derive_seed(fx.seed, "test-data", 0)).unwrap();
        for (ri, &rho) in rhos.iter().enumerate() {
            let stream = make_stream(
                &pool,
                &ShiftSpec::LongTail { rho, inverted: false },
                64,
                derive_seed(fx.seed, "test-stream", 0),
            )
            .unwrap();
            for (refined, slot) in [(false, 0), (true, 1)] {
                let refiner = if refined { Some(&fx.refiner) } else { None };
                let run = run_stream(&fx.model, refiner, &stream, &adapt_cfg(Method::BnAdapt)).unwrap();
                acc[ri][slot].push(run.overall_accuracy);
            }
        }
    }
    let plain: Vec<f64> = acc.iter().map(|a| mean(&a[0])).collect();
    let refined: Vec<f64> = acc.iter().map(|a| mean(&a[1])).collect();
    let monotone = plain[0] > plain[1] && plain[1] > plain[2];
    let gain100 = 100.0 * (refined[2] - plain[2]);
    let gap1 = 100.0 * (refined[0] - plain[0]).abs();
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "c05",
        "long-tail accuracy trends with refinement",
        monotone && gain100 >= 5.0 && gap1 <= 1.0 && elapsed < 600.0,
        &format!(
            "plain {:.4}/{:.4}/{:.4} over rho 1/10/100, refined gain at rho=100 {gain100:.1} pts (need >= 5), balanced gap {gap1:.2} pts (need <= 1), {elapsed:.0}s",
            plain[0], plain[1], plain[2]
        ),
    );
}

/// Known failure on this benchmark: the deviation statistic should fall as
/// batches become more single-class, because replacing batch-norm statistics
/// with a skewed batch's own statistics washes out class evidence and pulls
/// predictions toward uniform. On the four-class planar model the last step
/// inverts: a standardized single-class batch re-inflates within-class noise
/// to unit scale and fills the feature space out to the classifier's
/// confident periphery, while an IR=20 batch pins its squashed majority near
/// the ambiguous center. The inversion survives every lever tried
/// (architecture, class spread, cluster aspect, batch size, additive test
/// noise), so the check is kept at full strength and left failing; the
/// ten-class companion below shows the trend where the class geometry is
/// dense enough for washing to be destructive.
#[test]
fn c06_prediction_deviation_tracks_online_imbalance() {
    let spec = toy_spec(&toy_params()).unwrap();
    let irs = [1.0, 5.0, 20.0, 5000.0];
    let mut per_ir: Vec<Vec<f64>> = vec![Vec::new(); irs.len()];
    for (s, model) in toy_fixture() {
        let pool = sample_balanced(&spec, 256, derive_seed(*s, "toy-test", 0)).unwrap();
        for (i, &ir) in irs.iter().enumerate() {
            let stream = make_stream(
                &pool,
                &ShiftSpec::OnlineImbalanced { ir, subset_size: 256 },
                64,
                derive_seed(*s, "toy-online", i as u64),
            )
            .unwrap();
            let run = run_stream(model, None, &stream, &adapt_cfg(Method::BnAdapt)).unwrap();
            per_ir[i].extend(run.trace.iter().map(|t| t.d));
        }
    }
    let means: Vec<f64> = per_ir.iter().map(|v| mean(v)).collect();
    let sems: Vec<f64> = per_ir.iter().map(|v| sem(v)).collect();
    let mut ok = true;
    let mut min_sep = f64::INFINITY;
    for i in 0..irs.len() - 1 {
        let pooled = (sems[i] * sems[i] + sems[i + 1] * sems[i + 1]).sqrt();
        let sep = (means[i] - means[i + 1]) / pooled;
        min_sep = min_sep.min(sep);
        ok &= means[i] > means[i + 1] && sep >= 2.0;
    }
    report(
        "c06",
        "signature deviation decreases with imbalance",
        ok,
        &format!(
            "mean d {:.3}/{:.3}/{:.3}/{:.3} over IR 1/5/20/5000, min separation {min_sep:.1} pooled SEs (need >= 2)",
            means[0], means[1], means[2], means[3]
        ),
    );
}

/// Companion evidence for the deviation trend: on the ten-class benchmark
/// the washed features of skewed batches land between densely paired
/// clusters, so the statistic falls monotonically with imbalance.
#[test]
fn signature_deviation_tracks_imbalance_on_the_ten_class_benchmark() {
    let spec = benchmark_spec();
    let irs = [1.0, 5.0, 20.0, 5000.0];
    let mut per_ir: Vec<Vec<f64>> = vec![Vec::new(); irs.len()];
    for fx in bench_fixture() {
        let pool = sample_balanced(&spec, 256, derive_seed(fx.seed, "bench-d-pool", 0)).unwrap();
        for (i, &ir) in irs.iter().enumerate() {
            let stream = make_stream(
                &pool,
                &ShiftSpec::OnlineImbalanced { ir, subset_size: 256 },
                64,
                derive_seed(fx.seed, "bench-d-stream", i as u64),
            )
            .unwrap();
            for batch in &stream.batches {
                per_ir[i].push(batch_signature(&fx.model, &batch.x, 1.0).unwrap().d);
            }
        }
    }
    let means: Vec<f64> = per_ir.iter().map(|v| mean(v)).collect();
    let sems: Vec<f64> = per_ir.iter().map(|v| sem(v)).collect();
    for i in 0..irs.len() - 1 {
        let pooled = (sems[i] * sems[i] + sems[i + 1] * sems[i + 1]).sqrt();
        let sep = (means[i] - means[i + 1]) / pooled;
        assert!(
            means[i] > means[i + 1] && sep >= 2.0,
            "d not separated between IR {} and {}: {:.3} vs {:.3} ({sep:.1} pooled SEs)",
            irs[i],
            irs[i + 1],
            means[i],
            means[i + 1]
        );
    }
}

#[test]
fn c07_refiner_gradients_match_central_differences() {
    let (_, model) = &toy_fixture()[0];
    let spec = toy_spec(&toy_params()).unwrap();
    let data = sample_balanced(&spec, 64, derive_seed(9, "gradcheck-data", 0)).unwrap();
    // class-skewed probe batch: all of class 0 plus a few of each other class
    let mut idx: Vec<usize> = (0..64).collect();
    idx.extend([64, 65, 128, 129, 192, 193]);
    let imb = data.subset(&idx);
    let bal_idx: Vec<usize> = (0..64).map(|i| (i * 4 + i % 4) % data.n()).collect();
    let bal = data.subset(&bal_idx);
    let imb_logits = model.logits(&imb.x, BnMode::Replace).unwrap();
    let imb_sig = batch_signature(model, &imb.x, 1.0).unwrap();
    let bal_sig = batch_signature(model, &bal.x, 1.0).unwrap();
    let alpha = 0.1;
    let h = 1e-5;

    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..5u64 {
        for epochs in [1, 2, 3] {
            let cfg = RefinerTrainConfig {
                epochs,
                batch_size: 32,
                hidden: 16,
                dirichlet_delta: 0.1,
                alpha,
                lr: 1e-3,
                detector_lr: 5e-2,
                logit_scale: 1.0,
                seed: derive_seed(seed, "gradcheck-train", epochs as u64),
            };
            let trained = train_unified(model, &data, &cfg).unwrap();
            let mut refiner: UnifiedRefiner = match trained.refiner {
                Refiner::Unified(u) => u,
                Refiner::Split(_) => unreachable!("trained a unified refiner"),
            };
            let (_, grads) = shiftlab::refiner::unified_loss_and_grads(
                &refiner, &imb_logits, &imb.y, &imb_sig, &bal_sig, alpha,
            )
            .unwrap();
            let analytic: Vec<Vec<f64>> =
                grads.slices().iter().map(|s| s.to_vec()).collect();
            let n_slots = analytic.len();
            for slot in 0..n_slots {
                for i in 0..analytic[slot].len() {
                    let eval_at = |r: &UnifiedRefiner| {
                        shiftlab::refiner::unified_loss(
                            r, &imb_logits, &imb.y, &imb_sig, &bal_sig, alpha,
                        )
                        .unwrap()
                        .total
                    };
                    let original = refiner.params_mut()[slot][i];
                    refiner.params_mut()[slot][i] = original + h;
                    let up = eval_at(&refiner);
                    refiner.params_mut()[slot][i] = original - h;
                    let down = eval_at(&refiner);
                    refiner.params_mut()[slot][i] = original;
                    let numeric = (up - down) / (2.0 * h);
                    worst = worst.max(grad_relative_error(analytic[slot][i], numeric));
                    checked += 1;
                }
            }
        }
    }
    report(
        "c07",
        "refiner gradients vs central differences",
        worst < 1e-4,
        &format!("{checked} parameters over 3 checkpoints x 5 seeds, worst relative error {worst:.2e}"),
    );
}

#[test]
fn c08_severity_gate_separates_balanced_from_imbalanced() {
    let params = toy_params();
    let spec = toy_spec(&params).unwrap();
    let mut bal_total = 0usize;
    let mut bal_low = 0usize;
    let mut imb_total = 0usize;
    let mut imb_high = 0usize;
    for (s, model) in toy_fixture() {
        let train = sample_balanced(&spec, 500, derive_seed(*s, "intermediate-data", 0)).unwrap();
        let cfg = RefinerTrainConfig {
            epochs: 20,
            batch_size: 64,
            hidden: 64,
            dirichlet_delta: 0.1,
            alpha: 0.1,
            lr: 1e-3,
            detector_lr: 5e-2,
            logit_scale: 1.0,
            seed: derive_seed(*s, "refiner-train", 0),
        };
        let split = match train_split(model, &train, &cfg, false).unwrap().refiner {
            Refiner::Split(sp) => sp,
            Refiner::Unified(_) => unreachable!("trained a split refiner"),
        };
        let held = sample_balanced(&spec, 500, derive_seed(*s, "gate-balanced", 0)).unwrap();
        let bal_stream =
            make_stream(&held, &ShiftSpec::Balanced, 64, derive_seed(*s, "gate-bal-stream", 0))
                .unwrap();
        for batch in &bal_stream.batches {
            let sig = batch_signature(model, &batch.x, 1.0).unwrap();
            bal_total += 1;
            if split.severity(sig.d) < 0.5 {
                bal_low += 1;
            }
        }
        let imb_stream = make_stream(
            &held,
            &ShiftSpec::OnlineImbalanced { ir: 5000.0, subset_size: 256 },
            64,
            derive_seed(*s, "gate-imb-stream", 0),
        )
        .unwrap();
        for batch in &imb_stream.batches {
            let sig = batch_signature(model, &batch.x, 1.0).unwrap();
            imb_total += 1;
            if split.severity(sig.d) > 0.5 {
                imb_high += 1;
            }
        }
    }
    let bal_frac = bal_low as f64 / bal_total as f64;
    let imb_frac = imb_high as f64 / imb_total as f64;
    report(
        "c08",
        "severity gate on balanced vs IR=5000 batches",
        bal_frac >= 0.95 && imb_frac >= 0.95,
        &format!(
            "balanced below 0.5: {bal_low}/{bal_total} ({:.1}%), imbalanced above 0.5: {imb_high}/{imb_total} ({:.1}%), need >= 95%",
            100.0 * bal_frac,
            100.0 * imb_frac
        ),
    );
}

#[test]
fn c09_temperature_identity_and_homogeneity() {
    let mut worst_identity = 0.0f64;
    let mut worst_homog = 0.0f64;
    let mut rng = rng_from(404);
    for _ in 0..200 {
        let k = rng.gen_range(2..=20usize);
        let m: f64 = rng.gen_range(0.5..8.0);
        let l: f64 = rng.gen_range(-2.0..2.0);
        let stats = LogitStats { max_mean: m, rest_mean: l };
        let t = temperature_from_stats(k, stats, stats);
        worst_identity = worst_identity.max((t.t - 1.0).abs());
        assert!(!t.degenerate, "matched stats must not be degenerate");

        // L = 0: temperature is linear in the test max-logit mean
        let train = LogitStats { max_mean: rng.gen_range(0.5..8.0), rest_mean: 0.0 };
        let test_m: f64 = rng.gen_range(0.5..8.0);
        let c: f64 = rng.gen_range(0.25..4.0);
        let base =
            temperature_from_stats(k, train, LogitStats { max_mean: test_m, rest_mean: 0.0 });
        let scaled =
            temperature_from_stats(k, train, LogitStats { max_mean: c * test_m, rest_mean: 0.0 });
        if !base.degenerate && !scaled.degenerate {
            let err = (scaled.t - c * base.t).abs() / (c * base.t).abs().max(1.0);
            worst_homog = worst_homog.max(err);
        }
    }
    report(
        "c09",
        "temperature identity and scaling",
        worst_identity < 1e-12 && worst_homog < 1e-12,
        &format!("200 random stats: identity error {worst_identity:.2e}, homogeneity error {worst_homog:.2e}"),
    );
}

#[test]
fn c10_frozen_classifier_contracts() {
    let fx = &bench_fixture()[0];
    let spec = benchmark_spec();
    let model = fx.model.clone();

    // intermediate training: full state (parameters and running stats) fixed
    let before = model.net.state_bits();
    let data = sample_balanced(&spec, 200, derive_seed(7, "contract-data", 0)).unwrap();
    let cfg = RefinerTrainConfig {
        epochs: 2,
        batch_size: 64,
        hidden: 16,
        dirichlet_delta: 0.1,
        alpha: 0.1,
        lr: 1e-3,
        detector_lr: 5e-2,
        logit_scale: 1.0,
        seed: 11,
    };
    train_unified(&model, &data, &cfg).unwrap();
    train_split(&model, &data, &cfg, false).unwrap();
    let intermediate_frozen = model.net.state_bits() == before;

    // a BNAdapt pass never steps any parameter
    let pool = sample_balanced(&spec, 100, derive_seed(7, "contract-stream", 0)).unwrap();
    let stream = make_stream(&pool, &ShiftSpec::Balanced, 64, 3).unwrap();
    run_stream(&model, None, &stream, &adapt_cfg(Method::BnAdapt)).unwrap();
    let bnadapt_frozen = model.net.state_bits() == before;

    // TENT and PL change batch-norm affine parameters and nothing else:
    // every changed bit in the full parameter vector is a bn-affine bit
    let changed = |a: &MlpClassifier, b: &MlpClassifier, f: ParamFilter| {
        a.net
            .param_bits(f)
            .iter()
            .zip(b.net.param_bits(f))
            .filter(|(x, y)| **x != *y)
            .count()
    };
    let mut tent_ok = true;
    let mut pl_ok = true;
    for method in [Method::Tent, Method::Pl] {
        let mut adapted = model.clone();
        let mut opt = Optimizer::adam(1e-3);
        for batch in &stream.batches {
            match method {
                Method::Tent => {
                    tent_step(&mut adapted, &batch.x, None, &adapt_cfg(method), &mut opt).unwrap();
                }
                Method::Pl => {
                    pl_step(&mut adapted, &batch.x, None, &adapt_cfg(method), &mut opt).unwrap();
                }
                _ => unreachable!(),
            }
        }
        let all = changed(&model, &adapted, ParamFilter::All);
        let bn = changed(&model, &adapted, ParamFilter::BnAffine);
        let ok = bn > 0 && all == bn;
        match method {
            Method::Tent => tent_ok = ok,
            Method::Pl => pl_ok = ok,
            _ => unreachable!(),
        }
    }
    report(
        "c10",
        "frozen-classifier contracts",
        intermediate_frozen && bnadapt_frozen && tent_ok && pl_ok,
        &format!(
            "intermediate frozen {intermediate_frozen}, bnadapt frozen {bnadapt_frozen}, tent bn-affine-only {tent_ok}, pl bn-affine-only {pl_ok}"
        ),
    );
}

#[test]
fn c11_commands_are_byte_deterministic() {
    let bin = env!("CARGO_BIN_EXE_shiftlab");
    let config = r#"{
  "seed": 5,
  "benchmark": {"kind": "toy4", "d": 1.0, "beta": 2.0, "sigma": 0.4, "p": 0.25},
  "model": {"hidden": [8]},
  "pretrain": {"epochs": 6, "batch_size": 32, "lr": 0.001, "min_accuracy": 0.0, "per_class": 60},
  "refiner": {"epochs": 2, "batch_size": 16, "hidden": 8, "per_class": 60},
  "adapt": {"refine": true},
  "stream": {"shift": {"kind": "long_tail", "rho": 10.0}, "batch_size": 16, "per_class": 30},
  "sweep": {
    "methods": ["bn_adapt", "tent"],
    "refine": [false, true],
    "shifts": [{"kind": "long_tail", "rho": 10.0}],
    "seeds": [0, 1]
  },
  "toy": {"mc_draws": 20000}
}"#;
    let root = tempfile::tempdir().unwrap();
    let cfg_path = root.path().join("config.json");
    std::fs::write(&cfg_path, config).unwrap();

    let run_all = |out: &std::path::Path| {
        for args in [
            vec!["pretrain"],
            vec!["intermediate"],
            vec!["adapt"],
            vec!["toy-verify"],
            vec!["sweep", "--jobs", "2"],
        ] {
            let status = std::process::Command::new(bin)
                .args(&args)
                .arg("--config")
                .arg(&cfg_path)
                .arg("--out")
                .arg(out)
                .stdout(std::process::Stdio::null())
                .stderr(std::process::Stdio::inherit())
                .status()
                .unwrap();
            assert!(status.success(), "{args:?} failed");
        }
    };
    let mut snapshots: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for sub in ["a", "b"] {
        let out = root.path().join(sub);
        run_all(&out);
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        snapshots.push(files);
    }
    let names: Vec<&String> = snapshots[0].iter().map(|(n, _)| n).collect();
    let same_names = names.len() == snapshots[1].len()
        && names.iter().zip(&snapshots[1]).all(|(a, (b, _))| *a == b);
    let mut same_bytes = same_names;
    if same_names {
        for (a, b) in snapshots[0].iter().zip(&snapshots[1]) {
            if a.1 != b.1 {
                same_bytes = false;
                break;
            }
        }
    }
    report(
        "c11",
        "repeated commands produce identical bytes",
        same_bytes,
        &format!("5 commands, {} output files compared", snapshots[0].len()),
    );
}

/// Guard for the loss decomposition identity: the recorded total equals the
/// refine term plus alpha times the anchor at every logged step.
#[test]
fn loss_curve_decomposition_is_exact() {
    let fx = &bench_fixture()[0];
    let spec = benchmark_spec();
    let data = sample_balanced(&spec, 100, derive_seed(13, "decomp-data", 0)).unwrap();
    let cfg = RefinerTrainConfig {
        epochs: 1,
        batch_size: 64,
        hidden: 16,
        dirichlet_delta: 0.1,
        alpha: 0.1,
        lr: 1e-3,
        detector_lr: 5e-2,
        logit_scale: 1.0,
        seed: 17,
    };
    let trained = train_unified(&fx.model, &data, &cfg).unwrap();
    for p in &trained.loss_curve {
        let recomposed = p.refine_loss + cfg.alpha * p.aux_loss;
        assert!(
            (p.total - recomposed).abs() < 1e-12,
            "step {}: total {} vs decomposition {recomposed}",
            p.step,
            p.total
        );
    }
    // keep the probability floor honest while we are here
    assert!(loss::PROB_CLAMP > 0.0);
}
