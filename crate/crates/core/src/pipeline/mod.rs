//! Staged training and evaluation over an output directory.
//!
//! Each stage reads the artifacts of the stages before it from the output
//! directory and writes its own. Artifacts carry the config hash and the
//! stage seed, and every checkpoint is bound to the fitted schema's
//! fingerprint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AutoencoderConfig, HeadLayout, TabularAutoencoder};
use crate::blackbox::{
    accuracy, BlackBox, Classifier, ClassifierKind, DecisionTree, LogisticConfig, LogisticRegression, TreeConfig,
};
use crate::checkpoint::{Checkpoint, Stage};
use crate::conditioning::{sample_other_target, ConstraintSet};
use crate::data::{parse_instances, read_schema_file, Dataset, InstanceRecord, DEFAULT_TRAIN_FRACTION};
use crate::ddpg::{self, actor_specs, critic_specs, state_dim, TrainConfig, TrainInputs};
use crate::error::{Error, Result};
use crate::generator::{read_results_jsonl, write_results_csv, write_results_jsonl, CounterfactualResult, Explainer, TargetSpec};
use crate::hex;
use crate::metrics::{evaluate as evaluate_results, mo_results, render_table, EvaluationReport, MmdConfig, Reducer};
use crate::nn::Network;

pub const DATASET_FILE: &str = "dataset.json";
pub const BLACKBOX_FILE: &str = "blackbox.ckpt";
pub const AUTOENCODER_FILE: &str = "autoencoder.ckpt";
pub const ACTOR_FILE: &str = "actor.ckpt";
pub const CRITIC_FILE: &str = "critic.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const SUMMARY_TEXT: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub csv: PathBuf,
    pub schema: PathBuf,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// The split is seeded separately so runs with different seeds share it.
    #[serde(default)]
    pub split_seed: u64,
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlackboxConfig {
    pub kind: ClassifierKind,
    pub logistic: LogisticConfig,
    pub tree: TreeConfig,
}

impl Default for BlackboxConfig {
    fn default() -> Self {
        BlackboxConfig {
            kind: ClassifierKind::Logistic,
            logistic: LogisticConfig::default(),
            tree: TreeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Test instances explained per run; larger test splits are subsampled.
    pub max_instances: usize,
    pub mmd: MmdConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_instances: 1000,
            mmd: MmdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub blackbox: BlackboxConfig,
    #[serde(default)]
    pub autoencoder: AutoencoderConfig,
    /// `ddpg.seed` is ignored; the stage seed is derived from `seed`.
    #[serde(default)]
    pub ddpg: TrainConfig,
    /// Constraint file applied at generation time.
    #[serde(default)]
    pub constraints: Option<PathBuf>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses a JSON config. Relative paths resolve against the config's
    /// directory and must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.csv);
        fix(&mut self.data.schema);
        if let Some(c) = self.constraints.as_mut() {
            fix(c);
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        let mut paths = vec![&self.data.csv, &self.data.schema];
        paths.extend(self.constraints.as_ref());
        for p in paths {
            if !p.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the config's JSON form, in hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

/// Independent seed for one stage of a run.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Mo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Mo => "mo",
        }
    }

    fn stem(self) -> &'static str {
        match self {
            Method::Ours => "results",
            Method::Mo => "results_mo",
        }
    }

    pub fn jsonl_file(self) -> String {
        format!("{}.jsonl", self.stem())
    }

    pub fn csv_file(self) -> String {
        format!("{}.csv", self.stem())
    }
}

// `stage_seed` is null for stages that draw no random numbers.
fn provenance(cfg: &RunConfig, stage_seed: Option<u64>) -> serde_json::Map<String, serde_json::Value> {
    let mut m = serde_json::Map::new();
    m.insert("config_hash".into(), cfg.hash().into());
    m.insert("run_seed".into(), cfg.seed.into());
    m.insert("stage_seed".into(), stage_seed.into());
    m
}

fn require(out: &Path, file: &str, command: &str) -> Result<PathBuf> {
    let path = out.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            command: command.to_string(),
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads the CSV, splits it and fits the schema on the train part.
pub fn ingest(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ds = Dataset::load(&cfg.data.csv, &cfg.data.schema, cfg.data.train_fraction, cfg.data.split_seed)?;
    let path = out.join(DATASET_FILE);
    std::fs::write(&path, serde_json::to_vec(&ds)?).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

pub fn load_dataset(out: &Path) -> Result<Dataset> {
    let path = require(out, DATASET_FILE, "ingest")?;
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackboxSummary {
    pub kind: ClassifierKind,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn train_blackbox(cfg: &RunConfig, out: &Path) -> Result<BlackboxSummary> {
    let ds = load_dataset(out)?;
    let x_train = ds.encode_rows(&ds.split.train);
    let y_train = ds.train_labels();
    let k = ds.schema.num_classes;
    let model = match cfg.blackbox.kind {
        ClassifierKind::Logistic => {
            Classifier::Logistic(LogisticRegression::train(&x_train, &y_train, k, &cfg.blackbox.logistic)?)
        }
        ClassifierKind::Tree => Classifier::Tree(DecisionTree::train(&x_train, &y_train, k, &cfg.blackbox.tree)?),
    };
    let summary = BlackboxSummary {
        kind: model.kind(),
        train_accuracy: accuracy(&model, &x_train, &y_train)?,
        test_accuracy: accuracy(&model, &ds.encode_rows(&ds.split.test), &ds.test_labels())?,
    };
    let mut meta = provenance(cfg, None);
    meta.insert("config".into(), serde_json::to_value(&cfg.blackbox)?);
    meta.insert("summary".into(), serde_json::to_value(&summary)?);
    Checkpoint {
        stage: Stage::Blackbox,
        fingerprint: ds.schema.fingerprint(),
        metadata: meta.into(),
        tensors: model.to_tensors(),
    }
    .save(out.join(BLACKBOX_FILE))?;
    Ok(summary)
}

pub fn load_blackbox(out: &Path, fingerprint: &[u8; 32]) -> Result<Classifier> {
    let path = require(out, BLACKBOX_FILE, "train-blackbox")?;
    let ck = Checkpoint::load(&path, Stage::Blackbox, fingerprint)?;
    let cfg: BlackboxConfig = ck.metadata("config")?;
    Classifier::from_tensors(cfg.kind, &ck.tensors)
}

/// Trains on the train split only. Returns the per-step loss.
pub fn train_autoencoder(cfg: &RunConfig, out: &Path) -> Result<Vec<f64>> {
    let ds = load_dataset(out)?;
    let seed = stage_seed(cfg.seed, "autoencoder");
    let x = ds.encode_rows(&ds.split.train);
    let (ae, history) = TabularAutoencoder::train(&x, HeadLayout::from_schema(&ds.schema), cfg.autoencoder.clone(), seed)?;
    let mut meta = provenance(cfg, Some(seed));
    meta.insert("config".into(), serde_json::to_value(ae.config())?);
    meta.insert("layout".into(), serde_json::to_value(ae.layout())?);
    meta.insert("final_loss".into(), history.last().copied().into());
    Checkpoint {
        stage: Stage::Autoencoder,
        fingerprint: ds.schema.fingerprint(),
        metadata: meta.into(),
        tensors: ae.to_tensors(),
    }
    .save(out.join(AUTOENCODER_FILE))?;
    Ok(history)
}

pub fn load_autoencoder(out: &Path, fingerprint: &[u8; 32]) -> Result<TabularAutoencoder> {
    let path = require(out, AUTOENCODER_FILE, "train-ae")?;
    let ck = Checkpoint::load(&path, Stage::Autoencoder, fingerprint)?;
    TabularAutoencoder::from_tensors(ck.metadata("layout")?, ck.metadata("config")?, &ck.tensors)
}

/// Trains the actor and critic with every feature left free, so the policy
/// covers any constraint file supplied later at generation time.
pub fn train_cf(cfg: &RunConfig, out: &Path) -> Result<ddpg::TrainedAgent> {
    let ds = load_dataset(out)?;
    let fp = ds.schema.fingerprint();
    let blackbox = load_blackbox(out, &fp)?;
    let ae = load_autoencoder(out, &fp)?;
    let seed = stage_seed(cfg.seed, "ddpg");
    let train_cfg = TrainConfig {
        seed,
        ..cfg.ddpg.clone()
    };
    let records = ds.train_records();
    let constraints = ConstraintSet::free(&ds.schema);
    let inputs = TrainInputs {
        schema: &ds.schema,
        records: &records,
        blackbox: &blackbox,
        autoencoder: &ae,
        constraints: &constraints,
    };
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = create(&log_path)?;
    let agent = ddpg::train(&train_cfg, &inputs, Some(&mut log))?;
    finish(log, &log_path)?;
    let s_dim = state_dim(ae.latent_dim(), ds.schema.num_classes, ds.schema.condition_dim());
    for (stage, net, file) in [
        (Stage::Actor, &agent.actor, ACTOR_FILE),
        (Stage::Critic, &agent.critic, CRITIC_FILE),
    ] {
        let mut meta = provenance(cfg, Some(seed));
        meta.insert("config".into(), serde_json::to_value(&train_cfg)?);
        meta.insert("state_dim".into(), s_dim.into());
        meta.insert("latent_dim".into(), ae.latent_dim().into());
        Checkpoint {
            stage,
            fingerprint: fp,
            metadata: meta.into(),
            tensors: net
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
        .save(out.join(file))?;
    }
    Ok(agent)
}

/// Loads the actor or critic network.
pub fn load_policy(out: &Path, stage: Stage, fingerprint: &[u8; 32]) -> Result<Network> {
    let file = match stage {
        Stage::Actor => ACTOR_FILE,
        Stage::Critic => CRITIC_FILE,
        other => return Err(Error::Usage(format!("{other} is not a policy network"))),
    };
    let path = require(out, file, "train-cf")?;
    let ck = Checkpoint::load(&path, stage, fingerprint)?;
    let train_cfg: TrainConfig = ck.metadata("config")?;
    let s_dim: usize = ck.metadata("state_dim")?;
    let latent: usize = ck.metadata("latent_dim")?;
    let specs = match stage {
        Stage::Actor => actor_specs(s_dim, train_cfg.hidden_dim, latent),
        _ => critic_specs(s_dim, train_cfg.hidden_dim, latent),
    };
    Network::from_named_tensors(specs, |n| ck.tensors.get(n).cloned())
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// CSV of instances to explain; defaults to the test split.
    pub input: Option<PathBuf>,
    /// Fixed target class name for every instance; defaults to a random other class.
    pub target: Option<String>,
    /// Overrides the config's constraint file.
    pub constraints: Option<PathBuf>,
    /// Samples per instance under randomly drawn conditions.
    pub diverse: Option<usize>,
}

/// Explains the selected instances and writes `results*.csv` and
/// `results*.jsonl`. Both methods see the same instances and targets for a
/// given seed.
pub fn generate(cfg: &RunConfig, out: &Path, method: Method, opts: &GenerateOptions) -> Result<Vec<CounterfactualResult>> {
    let ds = load_dataset(out)?;
    let schema = &ds.schema;
    let fp = schema.fingerprint();
    let blackbox = load_blackbox(out, &fp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "generate"));

    let instances: Vec<InstanceRecord> = match &opts.input {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let records = parse_instances(file, &read_schema_file(&cfg.data.schema)?)?;
            for r in &records {
                schema.validate_record(r)?;
            }
            records
        }
        None => {
            let mut rows = ds.split.test.clone();
            if rows.len() > cfg.eval.max_instances {
                rows.shuffle(&mut rng);
                rows.truncate(cfg.eval.max_instances);
                rows.sort_unstable();
            }
            rows.iter().map(|&i| ds.records[i].clone()).collect()
        }
    };
    if instances.is_empty() {
        return Err(Error::Usage("no instances to explain".into()));
    }
    let constraints = match opts.constraints.as_ref().or(cfg.constraints.as_ref()) {
        Some(p) => ConstraintSet::load(p, schema)?,
        None => ConstraintSet::free(schema),
    };

    let y_m = blackbox.predict_labels(&schema.encode_batch(&instances))?;
    let k = schema.num_classes;
    let targets: Vec<usize> = match &opts.target {
        Some(name) => {
            let t = schema
                .class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Usage(format!("unknown target class {name:?}")))?;
            vec![t; instances.len()]
        }
        None if k < 2 => return Err(Error::Usage("a single-class model has no other class".into())),
        None => y_m.iter().map(|&m| sample_other_target(m, k, &mut rng)).collect(),
    };
    let specs: Vec<TargetSpec> = targets.iter().map(|&t| TargetSpec::Class(t)).collect();

    let results = match method {
        Method::Ours => {
            let ae = load_autoencoder(out, &fp)?;
            let actor = load_policy(out, Stage::Actor, &fp)?;
            let explainer = Explainer::new(schema, &actor, &ae, &blackbox)?;
            match opts.diverse {
                Some(n) => explainer
                    .generate_diverse(&instances, &specs, &constraints, n, &mut rng)?
                    .into_iter()
                    .flatten()
                    .collect(),
                None => explainer.generate(&instances, &specs, &constraints, &mut rng)?,
            }
        }
        Method::Mo => {
            if opts.diverse.is_some() {
                return Err(Error::Usage("the MO baseline returns one counterfactual per instance".into()));
            }
            let train = ds.train_records();
            let train_pred = blackbox.predict_labels(&ds.encode_rows(&ds.split.train))?;
            mo_results(schema, &instances, &y_m, &targets, &constraints, &train, &train_pred)?
        }
    };

    let csv_path = out.join(method.csv_file());
    let w = create(&csv_path)?;
    write_results_csv(&results, schema, w)?;
    let jsonl_path = out.join(method.jsonl_file());
    let mut w = create(&jsonl_path)?;
    write_results_jsonl(&results, &mut w)?;
    finish(w, &jsonl_path)?;
    Ok(results)
}

/// Scores every method whose results exist (ours is required) and writes
/// `report.json` and `report.txt`.
pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<Vec<EvaluationReport>> {
    let ds = load_dataset(out)?;
    let blackbox = load_blackbox(out, &ds.schema.fingerprint())?;
    let train = ds.train_records();
    let train_pred = blackbox.predict_labels(&ds.encode_rows(&ds.split.train))?;
    let reducer = Reducer::new(ds.schema.encoded_dim(), &cfg.eval.mmd)?;
    let mut reports = Vec::new();
    for method in [Method::Ours, Method::Mo] {
        let path = match require(out, &method.jsonl_file(), "generate") {
            Ok(p) => p,
            Err(e) if method == Method::Ours => return Err(e),
            Err(_) => continue,
        };
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let results = read_results_jsonl(BufReader::new(file))?;
        reports.push(evaluate_results(method.name(), &results, &ds.schema, &train, &train_pred, &reducer)?);
    }
    write_json(&out.join(REPORT_JSON), &reports)?;
    let rows: Vec<(String, Vec<EvaluationReport>)> =
        reports.iter().map(|r| (r.method.clone(), vec![r.clone()])).collect();
    let text = render_table(&rows, ds.schema.num_classes);
    std::fs::write(out.join(REPORT_TEXT), &text).map_err(|e| Error::io(out.join(REPORT_TEXT), e))?;
    Ok(reports)
}

/// Every stage in order for one seed, both methods, then evaluation.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Vec<EvaluationReport>> {
    ingest(cfg, out)?;
    train_blackbox(cfg, out)?;
    train_autoencoder(cfg, out)?;
    train_cf(cfg, out)?;
    let opts = GenerateOptions::default();
    generate(cfg, out, Method::Ours, &opts)?;
    generate(cfg, out, Method::Mo, &opts)?;
    evaluate(cfg, out)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Runs each seed in `seed-<n>/` on its own thread and writes a mean±std
/// summary table to `summary.txt`.
pub fn run_seeds(cfg: &RunConfig, out: &Path, seeds: &[u64]) -> Result<Vec<Vec<EvaluationReport>>> {
    if seeds.is_empty() {
        return Err(Error::Usage("no seeds to run".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let per_seed: Vec<Vec<EvaluationReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = RunConfig { seed, ..cfg.clone() };
                let dir = seed_dir(out, seed);
                s.spawn(move || run(&cfg, &dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed thread panicked"))
            .collect::<Result<_>>()
    })?;
    let num_classes = load_dataset(&seed_dir(out, seeds[0]))?.schema.num_classes;
    let mut rows: Vec<(String, Vec<EvaluationReport>)> = Vec::new();
    for reports in &per_seed {
        for r in reports {
            match rows.iter_mut().find(|(m, _)| *m == r.method) {
                Some((_, v)) => v.push(r.clone()),
                None => rows.push((r.method.clone(), vec![r.clone()])),
            }
        }
    }
    let path = out.join(SUMMARY_TEXT);
    std::fs::write(&path, render_table(&rows, num_classes)).map_err(|e| Error::io(&path, e))?;
    Ok(per_seed)
}
