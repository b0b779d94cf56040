//! Acceptance checks. Each check prints one PASS/FAIL line with the measured
//! value next to its threshold. All checks run inside a single test so the
//! wall-clock budgets are measured without other tests competing for CPU.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cfrl::autoencoder::{AutoencoderConfig, HeadLayout, TabularAutoencoder};
use cfrl::blackbox::{BlackBox, Classifier, LogisticConfig, LogisticRegression};
use cfrl::checkpoint::Stage;
use cfrl::conditioning::{
    postprocess, sample_condition, sample_target, Constraint, ConstraintSet, FeatureCondition, FeatureRule,
};
use cfrl::data::{Dataset, FeatureKind, FeatureValue, InstanceRecord, TabularSchema};
use cfrl::ddpg::{actor_loss, actor_specs, critic_specs, state_dim, ActorBatch, LossWeights};
use cfrl::generator::{read_results_jsonl, CounterfactualResult, Explainer, TargetSpec};
use cfrl::metrics::{median_bandwidth, mmd2, mo_baseline, EvaluationReport};
use cfrl::nn::{LayerSpec, Matrix, Network};
use cfrl::pipeline::{self, Method, RunConfig};

// Classifier sanity.
const LR_MIN_ACCURACY: f64 = 0.90;
const TREE_MIN_ACCURACY: f64 = 0.88;
const CLASSIFIER_BUDGET: Duration = Duration::from_secs(30);
// Breast Cancer end to end.
const BC_SEEDS: [u64; 3] = [0, 1, 2];
const BC_MIN_VALIDITY: f64 = 0.90;
const BC_MIN_INSTANCES: usize = 100;
const BC_BUDGET: Duration = Duration::from_secs(15 * 60);
const BC_MAX_L0: f64 = 0.60;
// Synthetic blobs.
const BLOBS_SEED: u64 = 7;
const BLOBS_MIN_VALIDITY: f64 = 0.95;
const BLOBS_BUDGET: Duration = Duration::from_secs(120);
const BLOBS_GRID: usize = 41;
// Gradients.
const GRAD_STEP: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_ABS_FLOOR: f64 = 1e-6;
// Constraints.
const CONSTRAINT_PAIRS: usize = 10_000;
// MMD.
const MMD_SELF_TOL: f64 = 1e-10;
const MMD_SEPARATION: f64 = 10.0;
const MMD_PERMUTATION_TOL: f64 = 1e-12;
const MMD_ORACLE_TOL: f64 = 1e-10;
// Sampling.
const DRAWS: usize = 100_000;
const BETA_MEAN: f64 = 0.5;
const BETA_MEAN_TOL: f64 = 0.01;
const BETA_VAR: f64 = 0.05;
const BETA_VAR_TOL: f64 = 0.005;
const MASK_RATE: f64 = 0.5;
const MASK_TOL: f64 = 0.02;
const TARGET_TOL: f64 = 0.02;
// Throughput.
const THROUGHPUT_N: usize = 1000;
const THROUGHPUT_BUDGET: Duration = Duration::from_secs(5);

struct Checks {
    results: Vec<(String, bool)>,
}

impl Checks {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} [{id}] {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((id.to_string(), pass));
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn load_config(name: &str, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::load(repo_root().join("configs").join(name)).unwrap();
    cfg.seed = seed;
    cfg
}

fn read_results(path: &Path) -> Vec<CounterfactualResult> {
    read_results_jsonl(BufReader::new(File::open(path).unwrap())).unwrap()
}

fn report<'a>(reports: &'a [EvaluationReport], method: &str) -> &'a EvaluationReport {
    reports.iter().find(|r| r.method == method).unwrap()
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut checks = Checks { results: Vec::new() };

    classifier_sanity(&mut checks, tmp.path());
    gradient_suite(&mut checks);
    constraint_suite(&mut checks);
    mmd_suite(&mut checks);
    sampling_suite(&mut checks);
    mo_oracle(&mut checks);
    blobs_end_to_end(&mut checks, tmp.path());
    breast_cancer_end_to_end(&mut checks, tmp.path());

    let failed: Vec<&str> = checks.results.iter().filter(|(_, p)| !p).map(|(id, _)| id.as_str()).collect();
    println!(
        "{} of {} checks passed",
        checks.results.len() - failed.len(),
        checks.results.len()
    );
    assert!(failed.is_empty(), "failed checks: {failed:?}");
}

fn classifier_sanity(checks: &mut Checks, tmp: &Path) {
    let start = Instant::now();
    let mut cfg = load_config("breast_cancer.json", 0);
    let out = tmp.join("classifiers");
    let ds = pipeline::ingest(&cfg, &out).unwrap();
    let lr = pipeline::train_blackbox(&cfg, &out).unwrap();
    cfg.blackbox.kind = cfrl::blackbox::ClassifierKind::Tree;
    let tree = pipeline::train_blackbox(&cfg, &out).unwrap();
    let elapsed = start.elapsed();
    checks.record(
        "1 logistic accuracy",
        lr.test_accuracy >= LR_MIN_ACCURACY,
        format!(
            "C={} on {} test rows: {:.4} >= {LR_MIN_ACCURACY}",
            cfg.blackbox.logistic.c,
            ds.split.test.len(),
            lr.test_accuracy
        ),
    );
    checks.record(
        "1 tree accuracy",
        tree.test_accuracy >= TREE_MIN_ACCURACY,
        format!(
            "depth {} min split {}: {:.4} >= {TREE_MIN_ACCURACY}",
            cfg.blackbox.tree.max_depth, cfg.blackbox.tree.min_samples_split, tree.test_accuracy
        ),
    );
    checks.record(
        "1 classifier runtime",
        elapsed < CLASSIFIER_BUDGET,
        format!("{:.2?} < {CLASSIFIER_BUDGET:?}", elapsed),
    );
}

// ---------------------------------------------------------------- gradients

struct GradStats {
    scalars: usize,
    max_rel: f64,
}

impl GradStats {
    fn compare(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_ABS_FLOOR);
        self.scalars += 1;
        self.max_rel = self.max_rel.max(rel);
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(out: &Matrix, w: &Matrix) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn central<F: FnMut(f64) -> f64>(mut f: F) -> f64 {
    (f(GRAD_STEP) - f(-GRAD_STEP)) / (2.0 * GRAD_STEP)
}

fn layer_gradients(stats: &mut GradStats, specs: Vec<LayerSpec>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(specs, &mut rng).unwrap();
    let x = random_matrix(3, net.in_dim(), &mut rng);
    let w = random_matrix(3, net.out_dim(), &mut rng);
    let cache = net.forward(&x).unwrap();
    let grads = net.backward(&cache, &w).unwrap();
    let n_tensors = grads.params.tensors().count();
    for ti in 0..n_tensors {
        let len = grads.params.tensors().nth(ti).unwrap().data().len();
        for k in 0..len {
            let numeric = central(|d| {
                let mut n = net.clone();
                n.params_mut().tensors_mut().nth(ti).unwrap().data_mut()[k] += d;
                weighted_sum(&n.predict(&x).unwrap(), &w)
            });
            stats.compare(grads.params.tensors().nth(ti).unwrap().data()[k], numeric);
        }
    }
    for k in 0..x.data().len() {
        let numeric = central(|d| {
            let mut xs = x.clone();
            xs.data_mut()[k] += d;
            weighted_sum(&net.predict(&xs).unwrap(), &w)
        });
        stats.compare(grads.input.data()[k], numeric);
    }
}

fn mixed_layout() -> HeadLayout {
    HeadLayout {
        num_numerical: 2,
        groups: vec![(2, 5), (5, 7)],
    }
}

fn mixed_rows(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut x = Matrix::zeros(n, 7);
    for r in 0..n {
        x.set(r, 0, rng.random_range(-2.0..2.0));
        x.set(r, 1, rng.random_range(-2.0..2.0));
        x.set(r, 2 + rng.random_range(0..3), 1.0);
        x.set(r, 5 + rng.random_range(0..2), 1.0);
    }
    x
}

fn autoencoder_gradients(stats: &mut GradStats, hidden: Option<usize>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AutoencoderConfig {
        latent_dim: 3,
        hidden_dim: hidden,
        steps: 0,
        batch_size: 4,
        learning_rate: 1e-3,
    };
    let ae = TabularAutoencoder::new(mixed_layout(), cfg, &mut rng).unwrap();
    let batch = mixed_rows(4, &mut rng);
    let (_, grads) = ae.loss_and_gradients(&batch).unwrap();
    for (half, params) in [(0, &grads.encoder), (1, &grads.decoder)] {
        for (ti, t) in params.tensors().enumerate() {
            for k in 0..t.data().len() {
                let numeric = central(|d| {
                    let mut a = ae.clone();
                    let net = if half == 0 { a.encoder_mut() } else { a.decoder_mut() };
                    net.params_mut().tensors_mut().nth(ti).unwrap().data_mut()[k] += d;
                    a.loss(&batch).unwrap()
                });
                stats.compare(t.data()[k], numeric);
            }
        }
    }
}

fn actor_gradients(stats: &mut GradStats, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = 3;
    let s_dim = 8;
    let actor = Network::new(actor_specs(s_dim, 6, latent), &mut rng).unwrap();
    let critic = Network::new(critic_specs(s_dim, 6, latent), &mut rng).unwrap();
    let cfg = AutoencoderConfig {
        latent_dim: latent,
        hidden_dim: Some(5),
        steps: 0,
        batch_size: 4,
        learning_rate: 1e-3,
    };
    let ae = TabularAutoencoder::new(mixed_layout(), cfg, &mut rng).unwrap();
    let batch = ActorBatch {
        states: random_matrix(5, s_dim, &mut rng),
        x_encoded: mixed_rows(5, &mut rng),
    };
    let targets = random_matrix(5, latent, &mut rng);
    let w = LossWeights {
        lambda_s: 0.5,
        lambda_c: 0.5,
    };
    let eval = |a: &Network| actor_loss(a, &critic, &ae, &batch, w, |_| Ok(targets.clone())).unwrap();
    let (_, grads) = eval(&actor);
    for (ti, t) in grads.tensors().enumerate() {
        for k in 0..t.data().len() {
            let numeric = central(|d| {
                let mut a = actor.clone();
                a.params_mut().tensors_mut().nth(ti).unwrap().data_mut()[k] += d;
                eval(&a).0.total
            });
            stats.compare(t.data()[k], numeric);
        }
    }
}

fn gradient_suite(checks: &mut Checks) {
    let dense = |i, o| LayerSpec::Dense { in_dim: i, out_dim: o };
    let layer_cases: Vec<(&str, Vec<LayerSpec>)> = vec![
        ("dense", vec![dense(5, 4)]),
        ("layer norm", vec![dense(5, 4), LayerSpec::LayerNorm { dim: 4 }]),
        ("relu", vec![dense(5, 4), LayerSpec::Relu { dim: 4 }]),
        ("tanh", vec![dense(5, 4), LayerSpec::Tanh { dim: 4 }]),
        (
            "grouped softmax",
            vec![
                dense(5, 6),
                LayerSpec::SoftmaxGroup {
                    dim: 6,
                    groups: vec![(0, 3), (4, 6)],
                },
            ],
        ),
    ];
    for (i, (name, specs)) in layer_cases.into_iter().enumerate() {
        let mut stats = GradStats { scalars: 0, max_rel: 0.0 };
        layer_gradients(&mut stats, specs, 100 + i as u64);
        checks.record(
            &format!("6 {name} gradient"),
            stats.max_rel < GRAD_REL_TOL,
            format!("{} scalars, max relative error {:.2e} < {GRAD_REL_TOL:e}", stats.scalars, stats.max_rel),
        );
    }
    let mut stats = GradStats { scalars: 0, max_rel: 0.0 };
    autoencoder_gradients(&mut stats, Some(4), 200);
    autoencoder_gradients(&mut stats, None, 201);
    checks.record(
        "6 autoencoder loss gradient",
        stats.max_rel < GRAD_REL_TOL,
        format!("{} scalars, max relative error {:.2e} < {GRAD_REL_TOL:e}", stats.scalars, stats.max_rel),
    );
    let mut stats = GradStats { scalars: 0, max_rel: 0.0 };
    actor_gradients(&mut stats, 300);
    actor_gradients(&mut stats, 301);
    checks.record(
        "6 actor loss gradient",
        stats.max_rel < GRAD_REL_TOL,
        format!("{} scalars, max relative error {:.2e} < {GRAD_REL_TOL:e}", stats.scalars, stats.max_rel),
    );
}

// -------------------------------------------------------------- constraints

fn blobs_dataset() -> Dataset {
    Dataset::load(data_dir().join("blobs.csv"), data_dir().join("blobs.schema.json"), 0.8, 0).unwrap()
}

fn random_constraints(schema: &TabularSchema, rng: &mut ChaCha8Rng) -> (BTreeMap<String, Constraint>, ConstraintSet) {
    let mut raw = BTreeMap::new();
    for f in &schema.features {
        let c = match &f.kind {
            FeatureKind::Numerical(s) => match rng.random_range(0..5) {
                0 => Constraint::Free,
                1 => Constraint::Immutable,
                2 => Constraint::IncreaseOnly,
                3 => Constraint::DecreaseOnly,
                _ => {
                    let a = rng.random_range(s.a_min..s.a_max);
                    let b = rng.random_range(s.a_min..s.a_max);
                    Constraint::Range([a.min(b), a.max(b)])
                }
            },
            FeatureKind::Categorical { categories } => match rng.random_range(0..3) {
                0 => Constraint::Free,
                1 => Constraint::Immutable,
                _ => Constraint::Subset(categories.iter().filter(|_| rng.random_bool(0.5)).cloned().collect()),
            },
        };
        raw.insert(f.name.clone(), c);
    }
    let set = ConstraintSet::resolve(&raw, schema).unwrap();
    (raw, set)
}

// Written from the condition's definition: numericals inside
// [a - p_min·range, a + p_max·range] and integral for integer features,
// categoricals inside the mask.
fn within_condition(schema: &TabularSchema, x: &InstanceRecord, cf: &InstanceRecord, cond: &FeatureCondition) -> bool {
    schema.features.iter().enumerate().all(|(j, f)| match (&f.kind, &cond.0[j]) {
        (FeatureKind::Numerical(s), FeatureRule::Numerical { p_min, p_max }) => {
            let a = x.0[j].as_numerical().unwrap();
            let v = cf.0[j].as_numerical().unwrap();
            let range = s.a_max - s.a_min;
            v >= a - p_min * range && v <= a + p_max * range && (!s.integer || v == v.round())
        }
        (FeatureKind::Categorical { .. }, FeatureRule::Categorical { mask }) => mask[cf.0[j].as_category().unwrap()],
        _ => false,
    })
}

// Written from the constraint file's meaning.
fn within_constraints(
    schema: &TabularSchema,
    x: &InstanceRecord,
    cf: &InstanceRecord,
    raw: &BTreeMap<String, Constraint>,
) -> bool {
    schema.features.iter().enumerate().all(|(j, f)| {
        let (o, v) = (&x.0[j], &cf.0[j]);
        match (&raw[&f.name], o, v) {
            (Constraint::Free, _, _) => true,
            (Constraint::Immutable, _, _) => o == v,
            (Constraint::IncreaseOnly, FeatureValue::Numerical(a), FeatureValue::Numerical(b)) => b >= a,
            (Constraint::DecreaseOnly, FeatureValue::Numerical(a), FeatureValue::Numerical(b)) => b <= a,
            (Constraint::Range([lo, hi]), FeatureValue::Numerical(a), FeatureValue::Numerical(b)) => {
                *b >= lo.min(*a) && *b <= hi.max(*a)
            }
            (Constraint::Subset(names), FeatureValue::Categorical(a), FeatureValue::Categorical(b)) => {
                let FeatureKind::Categorical { categories } = &f.kind else { return false };
                a == b || names.contains(&categories[*b])
            }
            _ => false,
        }
    })
}

struct RandomModels {
    actor: Network,
    ae: TabularAutoencoder,
    blackbox: LogisticRegression,
}

fn random_models(ds: &Dataset, seed: u64) -> RandomModels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = &ds.schema;
    let cfg = AutoencoderConfig {
        latent_dim: 4,
        hidden_dim: Some(8),
        steps: 0,
        ..Default::default()
    };
    let ae = TabularAutoencoder::new(HeadLayout::from_schema(schema), cfg, &mut rng).unwrap();
    let s_dim = state_dim(4, schema.num_classes, schema.condition_dim());
    let actor = Network::new(actor_specs(s_dim, 16, 4), &mut rng).unwrap();
    let x = ds.encode_rows(&ds.split.train);
    let blackbox =
        LogisticRegression::train(&x, &ds.train_labels(), schema.num_classes, &LogisticConfig::default()).unwrap();
    RandomModels { actor, ae, blackbox }
}

fn constraint_suite(checks: &mut Checks) {
    let ds = blobs_dataset();
    let schema = &ds.schema;
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    let mut pp_ok = 0;
    for _ in 0..CONSTRAINT_PAIRS {
        let x = &ds.records[rng.random_range(0..ds.records.len())];
        let (raw, set) = random_constraints(schema, &mut rng);
        let cond = sample_condition(schema, x, &set, &mut rng);
        let decoded: Vec<f64> = (0..schema.encoded_dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
        let cf = postprocess(&decoded, x, &cond, schema);
        if within_condition(schema, x, &cf, &cond) && within_constraints(schema, x, &cf, &raw) {
            pp_ok += 1;
        }
    }
    checks.record(
        "7 post-processing satisfies conditions",
        pp_ok == CONSTRAINT_PAIRS,
        format!("{pp_ok} of {CONSTRAINT_PAIRS} pairs"),
    );

    let models = random_models(&ds, 78);
    let explainer = Explainer::new(schema, &models.actor, &models.ae, &models.blackbox).unwrap();
    let per_call = 100;
    let (mut gen_ok, mut gen_total) = (0, 0);
    while gen_total < CONSTRAINT_PAIRS {
        let (raw, set) = random_constraints(schema, &mut rng);
        let instances: Vec<InstanceRecord> = (0..per_call)
            .map(|_| ds.records[rng.random_range(0..ds.records.len())].clone())
            .collect();
        let targets = vec![TargetSpec::AnyOther; per_call];
        let out = explainer.generate_diverse(&instances, &targets, &set, 1, &mut rng).unwrap();
        for r in out.into_iter().flatten() {
            gen_total += 1;
            if within_condition(schema, &r.original, &r.counterfactual, &r.condition)
                && within_constraints(schema, &r.original, &r.counterfactual, &raw)
            {
                gen_ok += 1;
            }
        }
    }
    checks.record(
        "7 generated counterfactuals satisfy conditions",
        gen_ok == gen_total,
        format!("{gen_ok} of {gen_total} counterfactuals"),
    );

    let frozen = ConstraintSet::immutable(schema);
    let y_m = models.blackbox.predict_labels(&schema.encode_batch(&ds.records)).unwrap();
    let own: Vec<TargetSpec> = y_m.iter().map(|&y| TargetSpec::Class(y)).collect();
    let out = explainer.generate(&ds.records, &own, &frozen, &mut rng).unwrap();
    let identical = out.iter().filter(|r| r.counterfactual == r.original && r.valid).count();
    checks.record(
        "7 immutable features with identity target return the input",
        identical == ds.records.len(),
        format!("{identical} of {} rows unchanged and valid", ds.records.len()),
    );
}

// ---------------------------------------------------------------------- MMD

fn gaussian_cloud(n: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Matrix::from_vec(n, dim, (0..n * dim).map(|_| shift + normal.sample(rng)).collect()).unwrap()
}

// Double loop over the pooled kernel matrix.
fn mmd2_oracle(a: &Matrix, b: &Matrix, sigma: f64) -> f64 {
    let pooled: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    let n = a.rows();
    let m = b.rows();
    let mut total = 0.0;
    for (i, p) in pooled.iter().enumerate() {
        for (j, q) in pooled.iter().enumerate() {
            let d2: f64 = p.iter().zip(q.iter()).map(|(u, v)| (u - v).powi(2)).sum();
            let k = (-d2 / (2.0 * sigma * sigma)).exp();
            let w = match (i < n, j < n) {
                (true, true) => 1.0 / (n * n) as f64,
                (false, false) => 1.0 / (m * m) as f64,
                _ => -1.0 / (n * m) as f64,
            };
            total += w * k;
        }
    }
    total.max(0.0)
}

fn mmd_suite(checks: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian_cloud(150, 5, 0.0, &mut rng);
    let y = gaussian_cloud(150, 5, 0.0, &mut rng);
    let z = gaussian_cloud(120, 5, 3.0, &mut rng);

    let sigma = median_bandwidth(&x, &x);
    let self_mmd = mmd2(&x, &x, sigma).unwrap();
    checks.record(
        "8 MMD of a sample with itself",
        self_mmd.abs() <= MMD_SELF_TOL,
        format!("{self_mmd:.3e} within {MMD_SELF_TOL:e} of 0"),
    );

    let same = mmd2(&x, &y, median_bandwidth(&x, &y)).unwrap();
    let sigma_xz = median_bandwidth(&x, &z);
    let apart = mmd2(&x, &z, sigma_xz).unwrap();
    checks.record(
        "8 separated clouds exceed same-distribution MMD",
        apart > MMD_SEPARATION * same,
        format!("{apart:.4e} > {MMD_SEPARATION} x {same:.4e}"),
    );

    let mut rows: Vec<usize> = (0..x.rows()).collect();
    rows.shuffle(&mut rng);
    let xp = x.select_rows(&rows);
    let mut rows: Vec<usize> = (0..z.rows()).collect();
    rows.shuffle(&mut rng);
    let zp = z.select_rows(&rows);
    let permuted = mmd2(&xp, &zp, median_bandwidth(&xp, &zp)).unwrap();
    checks.record(
        "8 permutation invariance",
        (permuted - apart).abs() <= MMD_PERMUTATION_TOL,
        format!("|{permuted:.15e} - {apart:.15e}| <= {MMD_PERMUTATION_TOL:e}"),
    );

    let mut worst: f64 = 0.0;
    for (a, b) in [(&x, &y), (&x, &z), (&y, &z), (&z, &x)] {
        let s = median_bandwidth(a, b);
        worst = worst.max((mmd2(a, b, s).unwrap() - mmd2_oracle(a, b, s)).abs());
    }
    checks.record(
        "8 double-loop oracle",
        worst <= MMD_ORACLE_TOL,
        format!("max difference {worst:.3e} <= {MMD_ORACLE_TOL:e}"),
    );
}

// ----------------------------------------------------------------- sampling

fn sampling_suite(checks: &mut Checks) {
    let ds = blobs_dataset();
    let schema = &ds.schema;
    let free = ConstraintSet::free(schema);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // A mid-range original keeps both caps at 1 only if the caps do not
    // depend on the value, which holds for free features.
    let x = &ds.records[0];
    let mut fractions = Vec::with_capacity(2 * DRAWS);
    let (mut bits, mut ones) = (0usize, 0usize);
    for _ in 0..DRAWS {
        let cond = sample_condition(schema, x, &free, &mut rng);
        for (j, rule) in cond.0.iter().enumerate() {
            match rule {
                FeatureRule::Numerical { p_min, p_max } if j == 0 => fractions.extend([*p_min, *p_max]),
                FeatureRule::Categorical { mask } => {
                    let k = x.0[j].as_category().unwrap();
                    for (i, &b) in mask.iter().enumerate() {
                        if i != k {
                            bits += 1;
                            ones += b as usize;
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let n = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let var = fractions.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    checks.record(
        "9 Beta(2,2) mean",
        (mean - BETA_MEAN).abs() <= BETA_MEAN_TOL,
        format!("{mean:.5} within {BETA_MEAN_TOL} of {BETA_MEAN} over {} draws", fractions.len()),
    );
    checks.record(
        "9 Beta(2,2) variance",
        (var - BETA_VAR).abs() <= BETA_VAR_TOL,
        format!("{var:.5} within {BETA_VAR_TOL} of {BETA_VAR}"),
    );
    let rate = ones as f64 / bits as f64;
    checks.record(
        "9 mask Bernoulli(0.5) rate",
        (rate - MASK_RATE).abs() <= MASK_TOL,
        format!("{rate:.5} within {MASK_TOL} of {MASK_RATE} over {bits} bits"),
    );
    for k in [2usize, 7] {
        let mut counts = vec![0usize; k];
        for _ in 0..DRAWS {
            counts[sample_target(k, &mut rng)] += 1;
        }
        let expected = 1.0 / k as f64;
        let worst = counts
            .iter()
            .map(|&c| (c as f64 / DRAWS as f64 - expected).abs())
            .fold(0.0, f64::max);
        checks.record(
            &format!("9 uniform targets over {k} classes"),
            worst <= TARGET_TOL,
            format!("max deviation {worst:.5} <= {TARGET_TOL}"),
        );
    }
}

// ----------------------------------------------------------------------- MO

// Brute-force nearest complying row: per-feature averaged standardized L1
// plus per-feature averaged category mismatches, first index on ties.
// Compliance with an all-free-or-immutable constraint set means immutable
// features are unchanged.
fn mo_scan(
    schema: &TabularSchema,
    x: &InstanceRecord,
    target: usize,
    immutable: &[bool],
    train: &[InstanceRecord],
    pred: &[usize],
) -> Option<usize> {
    let n_num = schema.num_numerical().max(1) as f64;
    let n_cat = schema.num_categorical().max(1) as f64;
    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in train.iter().enumerate() {
        if pred[i] != target || (0..x.0.len()).any(|j| immutable[j] && x.0[j] != cand.0[j]) {
            continue;
        }
        let mut l1 = 0.0;
        let mut l0 = 0.0;
        for (j, f) in schema.features.iter().enumerate() {
            match &f.kind {
                FeatureKind::Numerical(s) => {
                    let a = (x.0[j].as_numerical().unwrap() - s.mean) / s.std;
                    let b = (cand.0[j].as_numerical().unwrap() - s.mean) / s.std;
                    l1 += (a - b).abs();
                }
                FeatureKind::Categorical { .. } => l0 += (x.0[j] != cand.0[j]) as u8 as f64,
            }
        }
        let d = l1 / n_num + l0 / n_cat;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

fn mo_oracle(checks: &mut Checks) {
    let bc = Dataset::load(
        data_dir().join("breast_cancer.csv"),
        data_dir().join("breast_cancer.schema.json"),
        0.8,
        0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, ds) in [("breast cancer", bc), ("blobs", blobs_dataset())] {
        let schema = &ds.schema;
        let train = ds.train_records();
        let x_train = ds.encode_rows(&ds.split.train);
        let model = LogisticRegression::train(&x_train, &ds.train_labels(), schema.num_classes, &LogisticConfig::default())
            .unwrap();
        let pred = model.predict_labels(&x_train).unwrap();
        let (mut agree, mut total) = (0, 0);
        for round in 0..3 {
            let immutable: Vec<bool> = schema.features.iter().map(|_| round > 0 && rng.random_bool(0.3)).collect();
            let set = ConstraintSet(
                immutable
                    .iter()
                    .map(|&m| {
                        if m {
                            cfrl::conditioning::FeatureConstraint::Immutable
                        } else {
                            cfrl::conditioning::FeatureConstraint::Free
                        }
                    })
                    .collect(),
            );
            for x in ds.test_records() {
                for target in 0..schema.num_classes {
                    let cond = cfrl::conditioning::default_condition(schema, &x, &set);
                    let got = mo_baseline(schema, &x, target, &cond, &train, &pred);
                    let want = mo_scan(schema, &x, target, &immutable, &train, &pred);
                    total += 1;
                    agree += (got == want) as usize;
                }
            }
        }
        checks.record(
            &format!("4 MO matches brute-force scan ({name})"),
            agree == total && train.len() <= 1000,
            format!("{agree} of {total} queries identical, {} training rows", train.len()),
        );
    }
}

// -------------------------------------------------------------- end to end

const ARTIFACTS: [&str; 10] = [
    pipeline::DATASET_FILE,
    pipeline::BLACKBOX_FILE,
    pipeline::AUTOENCODER_FILE,
    pipeline::ACTOR_FILE,
    pipeline::CRITIC_FILE,
    pipeline::TRAIN_LOG_FILE,
    "results.jsonl",
    "results_mo.jsonl",
    pipeline::REPORT_JSON,
    pipeline::REPORT_TEXT,
];

fn blobs_end_to_end(checks: &mut Checks, tmp: &Path) {
    let cfg = load_config("blobs.json", BLOBS_SEED);
    let first = tmp.join("blobs-a");
    let start = Instant::now();
    let reports = pipeline::run(&cfg, &first).unwrap();
    let elapsed = start.elapsed();
    let ours = report(&reports, "ours");
    checks.record(
        "5 blobs validity",
        ours.validity >= BLOBS_MIN_VALIDITY,
        format!(
            "{:.4} >= {BLOBS_MIN_VALIDITY} over {} instances, {} DDPG steps",
            ours.validity, ours.total, cfg.ddpg.steps
        ),
    );
    checks.record(
        "5 blobs runtime",
        elapsed < BLOBS_BUDGET,
        format!("{elapsed:.2?} < {BLOBS_BUDGET:?}"),
    );

    // Grid over the two informative features inside their training range,
    // the other features held at the original values.
    let ds = pipeline::load_dataset(&first).unwrap();
    let schema = &ds.schema;
    let blackbox = pipeline::load_blackbox(&first, &schema.fingerprint()).unwrap();
    let results = read_results(&first.join(Method::Ours.jsonl_file()));
    let stats: Vec<_> = [0, 1]
        .iter()
        .map(|&j| match &schema.features[j].kind {
            FeatureKind::Numerical(s) => (s.a_min, s.a_max),
            _ => unreachable!("blobs features 0 and 1 are numerical"),
        })
        .collect();
    let step = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (BLOBS_GRID - 1) as f64;
    let mut reachable = 0;
    for r in &results {
        let mut grid = Vec::with_capacity(BLOBS_GRID * BLOBS_GRID);
        for i in 0..BLOBS_GRID {
            for k in 0..BLOBS_GRID {
                let mut rec = r.original.clone();
                rec.0[0] = FeatureValue::Numerical(step(stats[0], i));
                rec.0[1] = FeatureValue::Numerical(step(stats[1], k));
                grid.push(rec);
            }
        }
        let labels = blackbox.predict_labels(&schema.encode_batch(&grid)).unwrap();
        reachable += labels.contains(&r.target) as usize;
    }
    checks.record(
        "5 brute force finds an in-range counterfactual for every query",
        reachable == results.len(),
        format!("{reachable} of {} queries", results.len()),
    );

    let second = tmp.join("blobs-b");
    pipeline::run(&cfg, &second).unwrap();
    let differing: Vec<&str> = ARTIFACTS
        .iter()
        .copied()
        .filter(|f| std::fs::read(first.join(f)).unwrap() != std::fs::read(second.join(f)).unwrap())
        .collect();
    checks.record(
        "10 repeated run is byte-identical",
        differing.is_empty(),
        format!("seed {BLOBS_SEED}, {} artifacts compared, differing: {differing:?}", ARTIFACTS.len()),
    );
}

fn breast_cancer_end_to_end(checks: &mut Checks, tmp: &Path) {
    let cfg = load_config("breast_cancer.json", 0);
    let out = tmp.join("bc");
    let start = Instant::now();
    let per_seed = pipeline::run_seeds(&cfg, &out, &BC_SEEDS).unwrap();
    let elapsed = start.elapsed();
    println!(
        "{}",
        std::fs::read_to_string(out.join(pipeline::SUMMARY_TEXT)).unwrap().trim_end()
    );

    let ours: Vec<&EvaluationReport> = per_seed.iter().map(|r| report(r, "ours")).collect();
    let validities: Vec<String> = ours.iter().map(|r| format!("{:.4}", r.validity)).collect();
    let min_total = ours.iter().map(|r| r.total).min().unwrap();
    checks.record(
        "2 breast cancer validity",
        ours.iter().all(|r| r.validity >= BC_MIN_VALIDITY) && min_total >= BC_MIN_INSTANCES,
        format!(
            "seeds {BC_SEEDS:?}: [{}] each >= {BC_MIN_VALIDITY}, {min_total} >= {BC_MIN_INSTANCES} instances",
            validities.join(", ")
        ),
    );
    checks.record(
        "2 breast cancer runtime",
        elapsed < BC_BUDGET,
        format!(
            "{:.1?} < {BC_BUDGET:?} for {} seeds (AE {} steps, DDPG {} steps)",
            elapsed,
            BC_SEEDS.len(),
            cfg.autoencoder.steps,
            cfg.ddpg.steps
        ),
    );
    let l0: Vec<Option<f64>> = ours.iter().map(|r| r.sparsity_valid.l0).collect();
    checks.record(
        "3 breast cancer L0 over valid counterfactuals",
        l0.iter().all(|v| v.is_some_and(|v| v <= BC_MAX_L0)),
        format!(
            "[{}] each <= {BC_MAX_L0}",
            l0.iter()
                .map(|v| v.map_or("-".into(), |v| format!("{v:.4}")))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );

    // MO validity, where every query has a training row of its target class.
    let mut mo_line = Vec::new();
    let mut mo_pass = true;
    for &seed in &BC_SEEDS {
        let dir = pipeline::seed_dir(&out, seed);
        let ds = pipeline::load_dataset(&dir).unwrap();
        let blackbox = pipeline::load_blackbox(&dir, &ds.schema.fingerprint()).unwrap();
        let pred = blackbox.predict_labels(&ds.encode_rows(&ds.split.train)).unwrap();
        let results = read_results(&dir.join(Method::Mo.jsonl_file()));
        let complying = results.iter().all(|r| pred.contains(&r.target));
        let v = results.iter().filter(|r| r.valid).count() as f64 / results.len() as f64;
        mo_pass &= complying && v == 1.0;
        mo_line.push(format!("{v:.4}"));
    }
    checks.record(
        "4 MO validity",
        mo_pass,
        format!("[{}] == 1.0 with a complying row for every query", mo_line.join(", ")),
    );

    throughput(checks, &pipeline::seed_dir(&out, BC_SEEDS[0]));
}

fn throughput(checks: &mut Checks, dir: &Path) {
    let ds = pipeline::load_dataset(dir).unwrap();
    let schema = &ds.schema;
    let fp = schema.fingerprint();
    let blackbox: Classifier = pipeline::load_blackbox(dir, &fp).unwrap();
    let ae = pipeline::load_autoencoder(dir, &fp).unwrap();
    let actor = pipeline::load_policy(dir, Stage::Actor, &fp).unwrap();
    let instances: Vec<InstanceRecord> = ds.records.iter().cycle().take(THROUGHPUT_N).cloned().collect();
    let targets = vec![TargetSpec::AnyOther; THROUGHPUT_N];
    let free = ConstraintSet::free(schema);
    let start = Instant::now();
    let explainer = Explainer::new(schema, &actor, &ae, &blackbox).unwrap();
    let out = explainer
        .generate(&instances, &targets, &free, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let elapsed = start.elapsed();
    checks.record(
        "11 batch generation throughput",
        out.len() == THROUGHPUT_N && elapsed < THROUGHPUT_BUDGET,
        format!("{} counterfactuals in {elapsed:.2?} < {THROUGHPUT_BUDGET:?}", out.len()),
    );
}
