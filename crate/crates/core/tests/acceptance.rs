//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then
//! asserts the same condition.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use margin_metric::dataset::{generate, split_zero_shot, SplitSpec, SyntheticConfig};
use margin_metric::geometry::{
    binary_margin_bounds, isolation_condition, minimum_margin, verify_monotonicity, verify_p2,
    verify_region_membership,
};
use margin_metric::gradcheck::{
    encoder_grad_check, grad_check, random_inputs, random_instance, tolerance, DEFAULT_STEP,
};
use margin_metric::hashing::{encode_binary, train_hasher, HashCodes, HashConfig, HashTerms};
use margin_metric::linalg::Matrix;
use margin_metric::losses::{prototypical_loss, squared_ems_loss};
use margin_metric::retrieval::{
    distance_report, evaluate_euclidean, mean_average_precision, mean_average_precision_hamming,
    EvalOptions,
};
use margin_metric::training::{train, TrainConfig, TrainOutput};
use margin_metric::{encoder, Domain, EmbeddingBatch, LossConfig, LossKind, PrototypeSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 0;
const TRAIN_STEPS: usize = 5000;
const TRAIN_LR: f64 = 1e-2;

// Written to the raw handle so the line shows up even when output is captured.
fn line(id: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
    let _ = writeln!(
        std::io::stderr(),
        "criterion {id:>2} {}: {name}: {detail} [{:.2}s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn squared_ems_matches_prototypical() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let d = rng.random_range(1..10);
        let k = rng.random_range(1..8);
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        let batch = EmbeddingBatch::single_domain(gaussian(n, d, &mut rng), labels).unwrap();
        let protos = PrototypeSet::new(gaussian(k, d, &mut rng)).unwrap();
        let a = squared_ems_loss(&batch, &protos, 1.0).unwrap();
        let b = prototypical_loss(&batch, &protos).unwrap();
        worst = worst
            .max((a.loss - b.loss).abs())
            .max(max_abs_diff(a.grad_embeddings.as_slice(), b.grad_embeddings.as_slice()))
            .max(max_abs_diff(a.grad_centers.as_slice(), b.grad_centers.as_slice()));
    }
    let elapsed = t.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(1);
    line(1, "squared EMS (m=1) equals prototypical loss", pass, format!("max |diff| {worst:.1e} over 100 instances"), elapsed);
    assert!(pass);
}

#[test]
fn gradients_match_finite_differences() {
    let t = Instant::now();
    let mut worst_ratio = 0.0f64;
    let mut details = Vec::new();
    for kind in LossKind::ALL {
        let cfg = LossConfig::with_defaults(kind);
        let tol = tolerance(kind);
        let mut worst = 0.0f64;
        for seed in 0..3 {
            let inst = random_instance(&cfg, 8, 5, 4, seed);
            worst = worst.max(grad_check(&cfg, &inst, DEFAULT_STEP).unwrap().max_rel_error);
            let params = encoder::init_params(&[6, 8, 5], 4, seed).unwrap();
            let inputs = random_inputs(8, 6, 4, seed);
            let e2e = encoder_grad_check(&params, &inputs, &cfg, &inst.head, DEFAULT_STEP).unwrap();
            worst = worst.max(e2e.max_rel_error);
        }
        worst_ratio = worst_ratio.max(worst / tol);
        details.push(format!("{} {worst:.1e}", kind.name()));
    }
    let elapsed = t.elapsed();
    let pass = worst_ratio <= 1.0 && elapsed < Duration::from_secs(10);
    line(2, "gradients incl. end-to-end through the encoder", pass, details.join(", "), elapsed);
    assert!(pass);
}

#[test]
fn decision_ball_membership() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut total = 0u64;
    for i in 0..20 {
        let d = rng.random_range(1..=8);
        let c_y: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c_yp: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = 1.0 + (1.0 - rng.random::<f64>()) * 19.0;
        total += verify_region_membership(&c_y, &c_yp, m, 100_000, i).unwrap();
    }
    let elapsed = t.elapsed();
    let pass = total == 0 && elapsed < Duration::from_secs(5);
    line(3, "closed-form ball agrees with the margin inequality", pass, format!("{total} disagreements in 20 x 1e5 samples"), elapsed);
    assert!(pass);
}

#[test]
fn minimum_margin_equality() {
    let t = Instant::now();
    let root = minimum_margin();
    let at = binary_margin_bounds(root, 1.0).unwrap();
    let below = binary_margin_bounds(root - 1e-3, 1.0).unwrap();
    let above = binary_margin_bounds(root + 1e-3, 1.0).unwrap();
    let gap = (at.max_intra - at.min_inter).abs();
    let elapsed = t.elapsed();
    let pass = gap <= 1e-12
        && below.max_intra > below.min_inter
        && above.max_intra < above.min_inter
        && elapsed < Duration::from_secs(1);
    line(
        4,
        "bounds meet exactly at 2+sqrt(3)",
        pass,
        format!(
            "|gap| {gap:.1e}; below {:.6} > {:.6}; above {:.6} < {:.6}",
            below.max_intra, below.min_inter, above.max_intra, above.min_inter
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn regions_shrink_with_margin() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut failures = 0;
    for _ in 0..100 {
        let d = rng.random_range(1..=6);
        let c_y: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c_yp: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = rng.random_range(1.1..=20.0);
        let eps = 5.0 * (1.0 - rng.random::<f64>());
        if !verify_monotonicity(&c_y, &c_yp, m, eps).unwrap() {
            failures += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(1);
    line(5, "ball(m+eps) inside ball(m)", pass, format!("{failures} failures in 100 draws"), elapsed);
    assert!(pass);
}

#[test]
fn sampled_region_margins() {
    let t = Instant::now();
    let root = minimum_margin();
    let pair = PrototypeSet::new(Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap()).unwrap();
    let safe = verify_p2(&pair, root + 0.01, 1_000_000, SEED).unwrap();
    let small = verify_p2(&pair, 3.0, 1_000_000, SEED).unwrap();

    let triple = PrototypeSet::new(Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, 10.0]]).unwrap()).unwrap();
    let m = root - 0.05;
    let isolated = isolation_condition(triple.center(0), triple.center(1), triple.center(2), m).unwrap()
        && isolation_condition(triple.center(1), triple.center(0), triple.center(2), m).unwrap();
    let three = verify_p2(&triple, m, 1_000_000, SEED).unwrap();
    let close_pair = three
        .violating_pairs
        .iter()
        .any(|&(a, b)| (a, b) == (0, 1) || (a, b) == (1, 0));

    let elapsed = t.elapsed();
    let pass = safe.violations == 0
        && small.violations > 0
        && isolated
        && close_pair
        && elapsed < Duration::from_secs(120);
    line(
        6,
        "sampled region margins",
        pass,
        format!(
            "m=root+0.01: {} violations; m=3: {}; K=3 m=root-0.05: {:?} (isolated {isolated})",
            safe.violations, small.violations, three.violating_pairs
        ),
        elapsed,
    );
    assert!(pass);
}

struct Setup {
    train: EmbeddingBatch,
    test: EmbeddingBatch,
}

fn synthetic(seed: u64, sigma: f64, anchor_radius: Option<f64>) -> Setup {
    let base = SyntheticConfig {
        classes: 10,
        per_class: 200,
        dim: 16,
        sigma,
        anchor_radius,
        seed,
        ..Default::default()
    };
    let train = generate(&base).unwrap().samples;
    let test = generate(&SyntheticConfig {
        noise_seed: Some(1000 + seed),
        ..base
    })
    .unwrap()
    .samples;
    Setup { train, test }
}

fn train_config(m: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        loss: LossConfig::ems(m),
        steps: TRAIN_STEPS,
        lr: TRAIN_LR,
        seed,
        ..Default::default()
    }
}

fn cross_domain_map(emb: &EmbeddingBatch) -> f64 {
    mean_average_precision(&emb.domain(Domain::Sketch), &emb.domain(Domain::Photo)).unwrap()
}

struct EndToEnd {
    setup: Setup,
    out: TrainOutput,
    map: f64,
    p1: bool,
    max_intra: Vec<Option<f64>>,
    min_inter: Vec<f64>,
    elapsed: Duration,
}

fn end_to_end() -> EndToEnd {
    let t = Instant::now();
    let setup = synthetic(SEED, 1.0, None);
    let out = train(&setup.train, &train_config(4.0, SEED)).unwrap();
    let map = cross_domain_map(&out.embed(&setup.test).unwrap());
    let report = distance_report(&out.embed(&setup.train).unwrap()).unwrap();
    EndToEnd {
        setup,
        out,
        map,
        p1: report.p1,
        max_intra: report.classes.iter().map(|c| c.max_intra).collect(),
        min_inter: report.classes.iter().map(|c| c.min_inter).collect(),
        elapsed: t.elapsed(),
    }
}

static END_TO_END: OnceLock<EndToEnd> = OnceLock::new();

fn shared_run() -> &'static EndToEnd {
    END_TO_END.get_or_init(end_to_end)
}

#[test]
fn end_to_end_synthetic() {
    let r = shared_run();
    let pass = r.map >= 0.95 && r.p1 && r.elapsed < Duration::from_secs(120);
    let tightest = r
        .max_intra
        .iter()
        .zip(&r.min_inter)
        .filter_map(|(a, b)| a.map(|a| a / b))
        .fold(0.0, f64::max);
    line(
        7,
        "EMS m=4 on the separable set",
        pass,
        format!(
            "test MAP {:.4}, P1 {} (largest intra/inter ratio {tightest:.3}), final loss {:.4}",
            r.map,
            r.p1,
            r.out.log.final_loss().unwrap()
        ),
        r.elapsed,
    );
    assert!(pass);
}

#[test]
fn margin_ablation_direction() {
    let t = Instant::now();
    let (sigma, radius) = (8.0, 40.0);
    let mut maps = [Vec::new(), Vec::new()];
    let mut raw_p1 = Vec::new();
    for seed in 0..5 {
        let setup = synthetic(seed, sigma, Some(radius));
        raw_p1.push(distance_report(&setup.train).unwrap().p1);
        for (slot, m) in [(0, 1.0), (1, 4.0)] {
            let out = train(&setup.train, &train_config(m, seed)).unwrap();
            maps[slot].push(cross_domain_map(&out.embed(&setup.test).unwrap()));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m1, m4) = (mean(&maps[0]), mean(&maps[1]));
    let elapsed = t.elapsed();
    let pass = m4 > m1 && elapsed < Duration::from_secs(600);
    line(
        8,
        "m=4 beats m=1 on a noisy set",
        pass,
        format!(
            "sigma {sigma}: mean test MAP m=4 {m4:.4} vs m=1 {m1:.4}; per seed m=4 {:?} m=1 {:?}; raw inputs P1 {:?}",
            maps[1].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            maps[0].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            raw_p1
        ),
        elapsed,
    );
    assert!(pass);
}

#[derive(Debug, Clone, PartialEq)]
struct HashMetrics {
    euclidean: f64,
    hamming: f64,
    distinct: bool,
    total: f64,
}

fn hash_run(run: &EndToEnd, terms: HashTerms) -> HashMetrics {
    let train_emb = run.out.embed(&run.setup.train).unwrap();
    let test_emb = run.out.embed(&run.setup.test).unwrap();
    let cfg = HashConfig {
        bits: 32,
        steps: 10_000,
        seed: SEED,
        terms,
        ..Default::default()
    };
    let trained = train_hasher(&run.out.prototypes, Some(&train_emb), &cfg).unwrap();
    let ae = &trained.autoencoder;
    let queries = test_emb.domain(Domain::Sketch);
    let gallery = test_emb.domain(Domain::Photo);
    let hamming = mean_average_precision_hamming(
        &HashCodes::encode(ae, &queries).unwrap(),
        &HashCodes::encode(ae, &gallery).unwrap(),
    )
    .unwrap();
    let protos = &run.out.prototypes;
    let codes: Vec<_> = (0..protos.num_classes())
        .map(|j| encode_binary(ae, protos.center(j)).unwrap())
        .collect();
    let distinct = (0..codes.len()).all(|i| (0..i).all(|j| codes[i] != codes[j]));
    HashMetrics {
        euclidean: mean_average_precision(&queries, &gallery).unwrap(),
        hamming,
        distinct,
        total: trained.final_terms.total,
    }
}

static HASHED: OnceLock<HashMetrics> = OnceLock::new();

#[test]
fn binary_codes_keep_retrieval_quality() {
    let run = shared_run();
    let t = Instant::now();
    let rs = HASHED.get_or_init(|| hash_run(run, HashTerms::REC_SCAT)).clone();
    let rs_elapsed = t.elapsed();
    let rq = hash_run(run, "r+q".parse().unwrap());
    let elapsed = t.elapsed();
    let keeps_map = rs.hamming >= rs.euclidean - 0.05;
    let rq_fails = rq.hamming < 0.5;
    let pass = keeps_map && rs.distinct && rq_fails && rs_elapsed < Duration::from_secs(60);
    line(
        9,
        "32-bit hashing",
        pass,
        format!(
            "r+s Hamming MAP {:.4} vs Euclidean {:.4} ({}), codes distinct {}; r+q Hamming MAP {:.4} (< 0.5: {rq_fails}), codes distinct {}",
            rs.hamming,
            rs.euclidean,
            if keeps_map { "within 0.05" } else { "too low" },
            rs.distinct,
            rq.hamming,
            rq.distinct
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn held_out_classes_beat_random_ranking() {
    let t = Instant::now();
    let setup = synthetic(SEED, 1.0, None);
    let spec = SplitSpec::zero_shot(vec![8, 9]);
    let (source, _) = split_zero_shot(&setup.train, &spec).unwrap();
    let (_, target) = split_zero_shot(&setup.test, &spec).unwrap();
    let out = train(&source, &train_config(4.0, SEED)).unwrap();
    let queries = out.embed(&target).unwrap().domain(Domain::Sketch);
    let gallery = out.embed(&setup.test).unwrap().domain(Domain::Photo);
    let scores = evaluate_euclidean(&queries, &gallery, &EvalOptions::default()).unwrap();
    let ratio = scores.map / scores.random_map;
    let elapsed = t.elapsed();
    let pass = ratio >= 2.0 && elapsed < Duration::from_secs(120);
    line(
        10,
        "zero-shot on 2 held-out classes",
        pass,
        format!(
            "MAP {:.4} vs random {:.4} ({ratio:.2}x) over {} queries, {} gallery photos",
            scores.map, scores.random_map, scores.queries, scores.gallery
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn reruns_are_bit_identical() {
    let first = shared_run();
    let first_hash = HASHED.get_or_init(|| hash_run(first, HashTerms::REC_SCAT)).clone();
    let t = Instant::now();
    let again = end_to_end();
    let again_hash = hash_run(&again, HashTerms::REC_SCAT);
    let same_train = first.map.to_bits() == again.map.to_bits()
        && first.p1 == again.p1
        && first.max_intra == again.max_intra
        && first.min_inter.iter().map(|v| v.to_bits()).eq(again.min_inter.iter().map(|v| v.to_bits()))
        && first.out == again.out;
    let same_hash = first_hash.hamming.to_bits() == again_hash.hamming.to_bits()
        && first_hash.euclidean.to_bits() == again_hash.euclidean.to_bits()
        && first_hash.total.to_bits() == again_hash.total.to_bits()
        && first_hash.distinct == again_hash.distinct;
    let elapsed = t.elapsed();
    let pass = same_train && same_hash;
    line(
        11,
        "reruns are bit-identical",
        pass,
        format!("training run identical {same_train}, hashing run identical {same_hash}"),
        elapsed,
    );
    assert!(pass);
}
