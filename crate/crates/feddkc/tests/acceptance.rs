//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them).
//!
//! cargo test -p feddkc --test acceptance -- --test-threads=1 --nocapture

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use feddkc::config::{DatasetSpec, KernelChoice, RefineSettings, RunConfig};
use feddkc::data::Dataset;
use feddkc::federation::run_experiment;
use feddkc::knowledge::{peak_probability, shannon_entropy, softmax, Knowledge, ProbVector};
use feddkc::linalg::Matrix;
use feddkc::neural::{
    distill_loss, distill_step_pipeline, softmax_rows, KlDirection, Mlp, TrainConfig,
};
use feddkc::refine::{
    bisection_root, generalized_kkr_refine, kkr_closed_form, kkr_refine, kkr_refine_prob,
    skr_refine, BisectionConfig, KernelSpec, Strategy,
};
use feddkc::runner::{build_federation, execute_single_seed};
use feddkc::seeding;
use feddkc::Error;

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Seeded corpus of random logit vectors.
fn logit_corpus(classes: usize, count: usize, seed: u64) -> Vec<Knowledge> {
    let mut rng = seeding::rng_for(seed, "acceptance-corpus", classes as u64);
    let normal = Normal::new(0.0, 2.0).unwrap();
    (0..count)
        .map(|_| {
            Knowledge::new((0..classes).map(|_| normal.sample(&mut rng)).collect()).unwrap()
        })
        .collect()
}

fn assert_simplex_and_order(z: &Knowledge, out: &ProbVector) {
    ProbVector::new(out.probs().to_vec()).expect("output left the simplex");
    let v = z.values();
    let r = out.probs();
    for i in 0..v.len() {
        for j in 0..v.len() {
            if v[i] > v[j] {
                assert!(
                    r[i] >= r[j] - 1e-12,
                    "order violated: v[{i}]={} > v[{j}]={} but r[{i}]={} < r[{j}]={}",
                    v[i],
                    v[j],
                    r[i],
                    r[j]
                );
            }
        }
    }
}

#[test]
fn criterion_01_peak_congruence() {
    let started = Instant::now();
    let mut rectified_seen = 0usize;
    for &classes in &[3usize, 10, 100] {
        let corpus = logit_corpus(classes, 10_000, 1);
        for &target in &[0.11, 0.5, 0.9] {
            if target <= 1.0 / classes as f64 {
                continue; // 0.11 is invalid for C = 3
            }
            for z in &corpus {
                let p = softmax(z);
                if kkr_closed_form(&p, target).iter().any(|&x| x < 0.0) {
                    rectified_seen += 1;
                }
                let out = kkr_refine(z, target).unwrap();
                let (peak, _) = peak_probability(&out);
                assert!(
                    (peak - target).abs() <= 1e-9,
                    "C={classes} T={target}: peak {peak}"
                );
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(rectified_seen > 0, "corpus never triggered rectification");
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 01 peak congruence: PASS \
         (3 class counts x valid targets x 10^4 vectors, {rectified_seen} rectified, {elapsed:?})"
    );
}

#[test]
fn criterion_02_entropy_congruence() {
    let started = Instant::now();
    let corpus = logit_corpus(10, 10_000, 2);
    let cfg = BisectionConfig::with_half_tolerance(1e-3);
    for z in &corpus {
        let out = skr_refine(z, 3.3, &cfg).unwrap();
        let h = shannon_entropy(&out.refined);
        assert!((h - 3.3).abs() < 5e-4, "entropy {h}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!("ACCEPTANCE 02 entropy congruence: PASS (10^4 vectors, E=3.3, eps=1e-3, {elapsed:?})");
}

#[test]
fn criterion_03_simplex_and_order_properties() {
    let search = BisectionConfig::default();
    let affine = KernelSpec::linear_affine(1.0, 1.0).unwrap();
    let exp = KernelSpec::exponential();
    let mut checked = 0usize;
    for &classes in &[3usize, 10, 100] {
        let corpus = logit_corpus(classes, 10_000, 3);
        let kkr_target = match classes {
            3 => 0.5,
            10 => 0.11,
            _ => 0.11,
        };
        let skr_target = match classes {
            3 => 1.0,
            10 => 3.3,
            _ => 5.0,
        };
        // Affine-kernel targets low enough that most inputs have a root on
        // the positive scale axis (search cannot reach above the input peak).
        let affine_target = match classes {
            3 => 0.4,
            10 => 0.15,
            _ => 0.02,
        };
        for z in &corpus {
            let out = kkr_refine(z, kkr_target).unwrap();
            assert_simplex_and_order(z, &out);

            let out = skr_refine(z, skr_target, &search).unwrap();
            assert_simplex_and_order(z, &out.refined);

            match generalized_kkr_refine(z, &affine, affine_target, 1e-3, &search) {
                Ok(out) => assert_simplex_and_order(z, &out.refined),
                Err(Error::BracketFailure(_)) => {
                    let (v_max, _) = peak_probability(&softmax(z));
                    assert!(
                        v_max <= affine_target + 1e-3,
                        "affine search failed although peak {v_max} > target {affine_target}"
                    );
                }
                Err(e) => panic!("unexpected error: {e}"),
            }

            let out = generalized_kkr_refine(z, &exp, kkr_target, 1e-3, &search).unwrap();
            assert_simplex_and_order(z, &out.refined);
            checked += 1;
        }
    }
    println!("ACCEPTANCE 03 simplex+order properties: PASS ({checked} vectors x 4 strategies)");
}

#[test]
fn criterion_04_negativity_witness() {
    let p = ProbVector::new(vec![0.5, 0.49, 0.01]).unwrap();
    let raw = kkr_closed_form(&p, 0.9);
    assert!(
        (raw[2] - (-0.766)).abs() < 1e-9,
        "pre-rectification entry is {}, expected -0.766",
        raw[2]
    );
    assert!(raw[2] < 0.0);
    let out = kkr_refine_prob(&p, 0.9);
    assert_eq!(out.probs()[0], 0.9);
    assert_eq!(out.probs()[1], (1.0 - 0.9) / 2.0);
    assert_eq!(out.probs()[2], (1.0 - 0.9) / 2.0);
    ProbVector::new(out.probs().to_vec()).unwrap();
    println!(
        "ACCEPTANCE 04 negativity witness: PASS (phi_3 = {:.6} -> rectified (0.9, 0.05, 0.05))",
        raw[2]
    );
}

#[test]
fn criterion_05_affine_search_matches_closed_form() {
    let target = 0.3;
    let kernel = KernelSpec::linear_affine(1.0, 1.0).unwrap();
    let search = BisectionConfig {
        f_tol: 1e-9,
        max_iters: 300,
        ..BisectionConfig::default()
    };
    let mut rng = seeding::rng_for(5, "acceptance-oracle", 0);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let mut accepted = 0usize;
    let mut worst: f64 = 0.0;
    while accepted < 1_000 {
        let z =
            Knowledge::new((0..10).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>()).unwrap();
        let p = softmax(&z);
        let (v_max, _) = peak_probability(&p);
        let closed = kkr_closed_form(&p, target);
        // Non-rectified inputs only: the closed form must stay in the
        // simplex and the searchable region needs the peak above T.
        if v_max <= target + 0.05 || closed.iter().any(|&x| x < 0.0) {
            continue;
        }
        let searched = generalized_kkr_refine(&z, &kernel, target, 2e-9, &search).unwrap();
        for (a, b) in searched.refined.probs().iter().zip(&closed) {
            worst = worst.max((a - b).abs());
        }
        accepted += 1;
    }
    assert!(worst < 1e-6, "worst coordinate gap {worst}");
    println!(
        "ACCEPTANCE 05 search/closed-form equivalence: PASS (10^3 inputs, worst gap {worst:.2e})"
    );
}

/// Recovers the analytic gradient from one SGD step at lr = 1, wd = 0, and
/// compares against central finite differences of the loss.
fn gradient_check(parts_dims: &[(Vec<usize>, bool)], direction: KlDirection, seed: u64) -> f64 {
    let mut rng = seeding::rng_for(seed, "grad-check", 0);
    let build = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Mlp> {
        parts_dims
            .iter()
            .map(|(dims, relu)| Mlp::random(dims, *relu, rng))
            .collect()
    };
    let parts = build(&mut rng);

    let n = 8;
    let input_dim = parts_dims[0].0[0];
    let classes = *parts_dims.last().unwrap().0.last().unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x = Matrix::from_vec(
        n,
        input_dim,
        (0..n * input_dim).map(|_| normal.sample(&mut rng)).collect(),
    )
    .unwrap();
    let mut targets = Matrix::zeros(n, classes);
    for r in 0..n {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        for (c, v) in raw.iter().enumerate() {
            targets.set(r, c, v / sum);
        }
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();

    let cfg = TrainConfig {
        learning_rate: 1.0,
        weight_decay: 0.0,
        beta: 1.5,
        kl_direction: direction,
        ..TrainConfig::default()
    };

    // Analytic gradients: weights before minus weights after one step.
    let mut stepped = parts.clone();
    {
        let mut refs: Vec<&mut Mlp> = stepped.iter_mut().collect();
        distill_step_pipeline(&mut refs, &x, &targets, &labels, &cfg).unwrap();
    }

    let loss_of = |models: &[Mlp]| {
        let refs: Vec<&Mlp> = models.iter().collect();
        distill_loss(&refs, &x, &targets, &labels, cfg.beta, direction).unwrap()
    };

    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    for part_idx in 0..parts.len() {
        for layer_idx in 0..parts[part_idx].layers().len() {
            let weight_count = parts[part_idx].layers()[layer_idx].weights.data().len();
            for w_idx in 0..weight_count + parts[part_idx].layers()[layer_idx].biases.len() {
                let read = |models: &[Mlp]| {
                    let layer = &models[part_idx].layers()[layer_idx];
                    if w_idx < weight_count {
                        layer.weights.data()[w_idx]
                    } else {
                        layer.biases[w_idx - weight_count]
                    }
                };
                let write = |models: &mut [Mlp], value: f64| {
                    let layer = &mut models[part_idx].layers_mut()[layer_idx];
                    if w_idx < weight_count {
                        layer.weights.data_mut()[w_idx] = value;
                    } else {
                        layer.biases[w_idx - weight_count] = value;
                    }
                };
                let analytic = read(&parts) - read(&stepped);

                let base = read(&parts);
                let mut probe = parts.clone();
                write(&mut probe, base + h);
                let plus = loss_of(&probe);
                write(&mut probe, base - h);
                let minus = loss_of(&probe);
                let numeric = (plus - minus) / (2.0 * h);

                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst_rel = worst_rel.max(rel);
            }
        }
    }
    worst_rel
}

#[test]
fn criterion_06_gradient_correctness() {
    // Client-shaped loss: gradient flows through extractor + predictor.
    // Server-shaped loss: predictor only. Both similarity directions.
    let client_shape: &[(Vec<usize>, bool)] = &[(vec![3, 4], true), (vec![4, 5], false)];
    let server_shape: &[(Vec<usize>, bool)] = &[(vec![4, 6, 5], false)];
    let mut worst: f64 = 0.0;
    for direction in [KlDirection::TargetFirst, KlDirection::PredictionFirst] {
        worst = worst.max(gradient_check(client_shape, direction, 61));
        worst = worst.max(gradient_check(server_shape, direction, 62));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
    println!("ACCEPTANCE 06 gradient correctness: PASS (worst relative error {worst:.2e})");
}

fn acceptance_refine(strategy: Strategy) -> RefineSettings {
    RefineSettings {
        strategy,
        target_peak: 0.11,
        target_entropy: 3.3,
        tolerance: 1e-3,
        kernel: KernelChoice::Affine { k: 1.0, b: 1.0 },
        ..RefineSettings::default()
    }
}

fn acceptance_config(dataset: DatasetSpec, alpha: f64, strategy: Strategy) -> RunConfig {
    RunConfig {
        dataset,
        test_fraction: 0.2,
        clients: 5,
        alpha,
        train: TrainConfig {
            learning_rate: 0.2,
            batch_size: 256,
            weight_decay: 5e-4,
            beta: 1.5,
            local_epochs: 3,
            server_epochs: 1,
            seed: 0,
            kl_direction: KlDirection::PredictionFirst,
        },
        refine: acceptance_refine(strategy),
        rounds: 30,
        seeds: vec![1, 2, 3, 4, 5],
        output_dir: PathBuf::from("out/acceptance"),
        dump_refinement_events: false,
    }
}

fn blob_spec() -> DatasetSpec {
    DatasetSpec::Synth {
        classes: 10,
        per_class: 500,
        features: 32,
        spread: 1.0,
        data_seed: 1,
    }
}

fn final_avg_top1(config: &RunConfig, dataset: &Dataset, seed: u64) -> f64 {
    let (mut clients, mut server, test) = build_federation(config, dataset, seed).unwrap();
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let outcome = run_experiment(&mut clients, &mut server, config.rounds, &train, &test).unwrap();
    assert!(outcome.aborted.is_none(), "run diverged");
    outcome.log.summary().avg_top1
}

#[test]
fn criterion_07_zero_communication_overhead() {
    let dataset = blob_spec();
    let loaded = dataset.load().unwrap();
    let mut traffic = Vec::new();
    for strategy in [Strategy::None, Strategy::Kkr, Strategy::Skr] {
        let mut config = acceptance_config(dataset.clone(), 0.5, strategy);
        config.rounds = 3;
        let (mut clients, mut server, test) = build_federation(&config, &loaded, 1).unwrap();
        let train = TrainConfig {
            seed: 1,
            ..config.train.clone()
        };
        let outcome = run_experiment(&mut clients, &mut server, 3, &train, &test).unwrap();
        traffic.push(
            outcome
                .log
                .rows
                .iter()
                .map(|r| (r.round, r.client_id, r.bytes_up, r.bytes_down))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(traffic[0], traffic[1], "KKR changed the wire traffic");
    assert_eq!(traffic[0], traffic[2], "SKR changed the wire traffic");
    println!("ACCEPTANCE 07 zero communication overhead: PASS (byte counters identical)");
}

#[test]
fn criterion_08_desk_scale_accuracy_trend() {
    let started = Instant::now();
    let datasets = [
        ("blobs", blob_spec()),
        (
            "digits",
            DatasetSpec::Csv {
                path: repo_path("data/digits.csv"),
            },
        ),
    ];
    let mut wins = 0usize;
    let mut cells = 0usize;
    for (name, spec) in &datasets {
        let dataset = spec.load().unwrap();
        for &alpha in &[0.5, 3.0] {
            for seed in 1..=5u64 {
                let baseline = final_avg_top1(
                    &acceptance_config(spec.clone(), alpha, Strategy::None),
                    &dataset,
                    seed,
                );
                let kkr = final_avg_top1(
                    &acceptance_config(spec.clone(), alpha, Strategy::Kkr),
                    &dataset,
                    seed,
                );
                let skr = final_avg_top1(
                    &acceptance_config(spec.clone(), alpha, Strategy::Skr),
                    &dataset,
                    seed,
                );
                let best = kkr.max(skr);
                cells += 1;
                let won = best >= baseline;
                wins += won as usize;
                println!(
                    "  cell {name} alpha={alpha} seed={seed}: none={baseline:.4} \
                     kkr={kkr:.4} skr={skr:.4} -> {}",
                    if won { "refined" } else { "baseline" }
                );
            }
        }
    }
    let elapsed = started.elapsed();
    assert_eq!(cells, 20);
    assert!(
        wins * 100 >= cells * 60,
        "refined strategies won only {wins}/{cells} cells"
    );
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 08 desk-scale accuracy trend: PASS ({wins}/{cells} cells, {elapsed:?})"
    );
}

#[test]
fn criterion_09_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = acceptance_config(blob_spec(), 0.5, Strategy::Kkr);
    config.seeds = vec![1];
    let a = execute_single_seed(&config, 1, &tmp.path().join("a")).unwrap();
    let b = execute_single_seed(&config, 1, &tmp.path().join("b")).unwrap();
    let csv_a = std::fs::read(a.dir.join("metrics.csv")).unwrap();
    let csv_b = std::fs::read(b.dir.join("metrics.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "metrics differ between identical runs");
    assert!(!csv_a.is_empty());
    println!("ACCEPTANCE 09 determinism: PASS (byte-identical metrics across reruns)");
}

#[test]
fn criterion_10_bisection_contract() {
    // Iteration bound on the monotone entropy function.
    let corpus = logit_corpus(10, 100, 10);
    let cfg = BisectionConfig::with_half_tolerance(1e-3);
    let mut rng = seeding::rng_for(10, "bisect-targets", 0);
    for z in &corpus {
        let target = rng.random_range(0.2..3.2);
        let gap = |theta: f64| shannon_entropy(&feddkc::knowledge::softmax_with_temperature(z, theta)) - target;
        let found = bisection_root(gap, &cfg).unwrap();
        assert!(found.f_root.abs() < cfg.f_tol);
        let expanded_width = cfg.upper * 2f64.powi(found.expansions as i32) - cfg.lower;
        let final_width = (found.bracket.1 - found.bracket.0).max(f64::MIN_POSITIVE);
        let bound = cfg.max_expand as f64 + (expanded_width / final_width).log2().ceil();
        assert!(
            (found.iterations as f64) <= bound,
            "iterations {} exceed bound {bound}",
            found.iterations
        );
    }

    // Degenerate constant logits: the raw search must report the missing
    // bracket; the SKR wrapper classifies it as degenerate knowledge.
    let constant = Knowledge::new(vec![2.5; 10]).unwrap();
    let flat_gap =
        |theta: f64| shannon_entropy(&feddkc::knowledge::softmax_with_temperature(&constant, theta)) - 1.0;
    match bisection_root(flat_gap, &cfg) {
        Err(Error::BracketFailure(_)) => {}
        other => panic!("expected BracketFailure, got {other:?}"),
    }
    match skr_refine(&constant, 1.0, &cfg) {
        Err(Error::DegenerateKnowledge(_)) => {}
        other => panic!("expected DegenerateKnowledge, got {other:?}"),
    }
    println!("ACCEPTANCE 10 bisection contract: PASS (iteration bound + degenerate bracket failure)");
}

// Sanity for the harness itself: softmax_rows and the corpus helper stay in
// agreement with the scalar paths used above.
#[test]
fn corpus_helper_is_consistent() {
    let corpus = logit_corpus(4, 10, 123);
    for z in &corpus {
        let m = Matrix::from_rows(vec![z.values().to_vec()]).unwrap();
        let batch = softmax_rows(&m);
        for (a, b) in batch.row(0).iter().zip(softmax(z).probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
