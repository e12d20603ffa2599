//! Experiment orchestration: config loading, pretraining, continual runs,
//! ablation sweeps, cost reports and report re-rendering.
//!
//! Config files are TOML with the sections `[experiment]`, `[backbone]`,
//! `[prompts]`, `[data]`, `[train]` and `[pretrain]`; every key has a
//! default. Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneError, PromptInsertionPlan};
use crate::data::{
    generate, read_dataset, split_stream, DataError, SampleSet, SynthSpec, TaskStream,
};
use crate::evaluation::{
    average_accuracy, classifier_accuracy, confusion_csv, cost_model, evaluate, forgetting,
    oracle_analysis, AccuracyMatrix, Classifier, CostRecord, EvalError, Model, NcmPrototypes,
    OracleReport, Phase,
};
use crate::matching::{records_csv, select_prompt, MatchError, Paradigm};
use crate::promptpool::{KeyGranularity, ParameterCounts, PoolError, PoolState};
use crate::training::{
    init_head, losses_csv, pretrain_backbone, train_task, LossStep, PretrainConfig, TrainConfig,
    TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("run summary failed schema validation: {0}")]
    Schema(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

impl HarnessError {
    /// 1 for configuration problems, 2 for everything that fails at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 1,
            _ => 2,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `"task"`, `"class"` or a key count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GranularitySetting {
    Count(usize),
    Name(String),
}

impl GranularitySetting {
    pub fn resolve(&self) -> Result<KeyGranularity, String> {
        match self {
            GranularitySetting::Count(n) => Ok(KeyGranularity::Fixed(*n)),
            GranularitySetting::Name(s) => match s.as_str() {
                "task" => Ok(KeyGranularity::Task),
                "class" => Ok(KeyGranularity::Class),
                other => Err(format!(
                    "key_granularity {other:?} is not \"task\", \"class\" or a count"
                )),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            output_dir: "runs".into(),
            checkpoint: "runs/backbone.pclb".into(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub num_tasks: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub pattern_seed: u64,
    pub class_offset: u32,
    pub seed: u64,
    /// Optional dataset files replacing the generator.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_tasks: 5,
            train_per_class: 100,
            test_per_class: 50,
            noise_sigma: 0.1,
            pattern_seed: 7,
            class_offset: 0,
            seed: 2024,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub paradigm: Paradigm,
    pub top_k: usize,
    pub key_granularity: GranularitySetting,
    pub train_g_prompt: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            batch_size: t.batch_size,
            epochs_per_task: t.epochs_per_task,
            paradigm: t.paradigm,
            top_k: t.top_k,
            key_granularity: GranularitySetting::Name("class".into()),
            train_g_prompt: t.train_g_prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub num_classes: usize,
    pub class_offset: u32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            num_classes: 20,
            class_offset: 1000,
            train_per_class: 60,
            test_per_class: 20,
            noise_sigma: 0.1,
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            seed: p.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub backbone: BackboneConfig,
    pub prompts: PromptInsertionPlan,
    pub data: DataSection,
    pub train: TrainSection,
    pub pretrain: PretrainSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Validation(vec![e.to_string()]))
    }

    /// Parses a config file and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| {
            HarnessError::Validation(vec![format!("cannot read config {}: {e}", path.display())])
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.experiment.output_dir);
        fix(&mut self.experiment.checkpoint);
        if let Some(p) = self.data.train_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.test_path.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every problem that can be detected without running anything.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.experiment.seeds.is_empty() {
            out.push("experiment.seeds is empty".into());
        }
        if let Err(e) = self.backbone.validate() {
            out.push(format!("backbone: {e}"));
        }
        if let Err(e) = self.prompts.validate(&self.backbone) {
            out.push(format!("prompts: {e}"));
        }
        let d = &self.data;
        match (&d.train_path, &d.test_path) {
            (Some(a), Some(b)) => {
                for p in [a, b] {
                    if !p.is_file() {
                        out.push(format!("dataset file {} does not exist", p.display()));
                    }
                }
            }
            (None, None) => {
                if d.num_classes == 0 {
                    out.push("data.num_classes must be positive".into());
                }
                if d.train_per_class == 0 || d.test_per_class == 0 {
                    out.push(
                        "data.train_per_class and data.test_per_class must be positive".into(),
                    );
                }
                if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
                    out.push(format!(
                        "data.noise_sigma {} must be finite and ≥ 0",
                        d.noise_sigma
                    ));
                }
            }
            _ => out.push("data.train_path and data.test_path must be given together".into()),
        }
        if d.num_tasks == 0 {
            out.push("data.num_tasks must be at least 1".into());
        } else if !d.num_classes.is_multiple_of(d.num_tasks) {
            out.push(format!(
                "data.num_classes {} is not divisible into {} tasks",
                d.num_classes, d.num_tasks
            ));
        }
        match self.train_config(0) {
            Ok(t) => {
                if let Err(TrainError::Config(e)) = t.validate() {
                    out.push(format!("train: {e}"));
                }
                if d.num_tasks > 0 && d.num_classes.is_multiple_of(d.num_tasks) {
                    let per_task = d.num_classes / d.num_tasks;
                    match t.granularity().resolve(per_task) {
                        Ok(n) => {
                            if t.top_k > n {
                                out.push(format!(
                                    "train.top_k {} exceeds {n} keys per task",
                                    t.top_k
                                ));
                            }
                            if t.paradigm.multiple_keys() && n == 1 && per_task > 1 {
                                out.push(format!(
                                    "{} needs more than one key per task",
                                    t.paradigm
                                ));
                            }
                        }
                        Err(e) => out.push(format!("train.key_granularity: {e}")),
                    }
                }
            }
            Err(e) => out.push(e),
        }
        let p = &self.pretrain;
        if p.num_classes == 0 || p.train_per_class == 0 || p.epochs == 0 || p.batch_size == 0 {
            out.push(
                "pretrain.num_classes, train_per_class, epochs and batch_size must be positive"
                    .into(),
            );
        }
        if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
            out.push(format!(
                "pretrain.learning_rate {} must be positive",
                p.learning_rate
            ));
        }
        let bench = d.class_offset as u64..d.class_offset as u64 + d.num_classes as u64;
        let pretext = p.class_offset as u64..p.class_offset as u64 + p.num_classes as u64;
        if bench.start < pretext.end && pretext.start < bench.end {
            out.push(format!(
                "pretext classes {pretext:?} overlap benchmark classes {bench:?}"
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Validation(p))
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, String> {
        let t = &self.train;
        Ok(TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            batch_size: t.batch_size,
            epochs_per_task: t.epochs_per_task,
            seed,
            paradigm: t.paradigm,
            top_k: t.top_k,
            key_granularity: t.key_granularity.resolve()?,
            train_g_prompt: t.train_g_prompt,
        })
    }

    pub fn benchmark_spec(&self) -> SynthSpec {
        let d = &self.data;
        SynthSpec::from_family(
            d.pattern_seed,
            d.class_offset,
            d.num_classes,
            d.train_per_class,
            d.test_per_class,
            self.backbone.image_size,
            self.backbone.channels,
            d.noise_sigma,
            d.seed,
        )
    }

    pub fn pretext_spec(&self) -> SynthSpec {
        let p = &self.pretrain;
        SynthSpec::from_family(
            self.data.pattern_seed,
            p.class_offset,
            p.num_classes,
            p.train_per_class,
            p.test_per_class,
            self.backbone.image_size,
            self.backbone.channels,
            p.noise_sigma,
            self.data.seed ^ 0x9e7e,
        )
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            backbone: self.backbone,
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            seed: p.seed,
        }
    }

    /// The benchmark samples, generated or read from disk.
    pub fn samples(&self) -> Result<SampleSet, HarnessError> {
        match (&self.data.train_path, &self.data.test_path) {
            (Some(a), Some(b)) => Ok(SampleSet {
                train: read_dataset(a)?,
                test: read_dataset(b)?,
            }),
            _ => Ok(generate(&self.benchmark_spec())?),
        }
    }

    pub fn stream(&self, seed: u64) -> Result<TaskStream, HarnessError> {
        let stream = split_stream(self.samples()?, self.data.num_tasks, seed)?;
        stream.check_invariants()?;
        Ok(stream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub pretext_classes: usize,
    pub pretext_class_offset: u32,
    pub test_accuracy: f64,
    pub final_loss: f64,
    pub num_params: usize,
}

/// Trains the backbone on the pretext classes and writes the checkpoint.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainSummary, HarnessError> {
    cfg.validate()?;
    let set = generate(&cfg.pretext_spec())?;
    let out = pretrain_backbone(&cfg.pretrain_config(), &set.train, &set.test)?;
    let path = &cfg.experiment.checkpoint;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, out.backbone.to_bytes()).map_err(io(path))?;
    let summary = PretrainSummary {
        checkpoint: path.clone(),
        pretext_classes: cfg.pretrain.num_classes,
        pretext_class_offset: cfg.pretrain.class_offset,
        test_accuracy: out.test_accuracy,
        final_loss: out.final_loss,
        num_params: out.backbone.num_params(),
    };
    let json = path.with_extension("json");
    fs::write(&json, to_json(&summary)).map_err(io(&json))?;
    Ok(summary)
}

pub fn load_checkpoint(cfg: &ExperimentConfig) -> Result<Backbone, HarnessError> {
    let path = &cfg.experiment.checkpoint;
    if !path.is_file() {
        return Err(HarnessError::Validation(vec![format!(
            "backbone checkpoint {} does not exist; run `pretrain` first",
            path.display()
        )]));
    }
    let bytes = fs::read(path).map_err(io(path))?;
    let backbone = Backbone::from_bytes(&bytes)?;
    if backbone.config != cfg.backbone {
        return Err(HarnessError::Validation(vec![format!(
            "checkpoint {} was trained with a different [backbone] section",
            path.display()
        )]));
    }
    Ok(backbone)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub train_batches: u64,
    pub train_forwards: u64,
    pub train_backwards: u64,
    pub inference_samples: u64,
    pub inference_forwards: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub training: CostRecord,
    pub inference: CostRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub num_tasks: usize,
    pub top_k: usize,
    pub keys_per_task: Vec<usize>,
    pub class_order: Vec<usize>,
    /// `accuracy_matrix[t][a]`, `None` above the diagonal.
    pub accuracy_matrix: Vec<Vec<Option<f64>>>,
    pub average_accuracy: Vec<f64>,
    pub forgetting: Vec<f64>,
    pub matching_rate: Vec<f64>,
    pub oracle: OracleReport,
    pub km_accuracy: Option<f64>,
    pub ncm_accuracy: f64,
    pub cost: CostSummary,
    pub counters: Counters,
    pub parameter_counts: ParameterCounts,
}

impl RunSummary {
    pub fn final_accuracy(&self) -> f64 {
        *self.average_accuracy.last().unwrap_or(&0.0)
    }

    pub fn final_matching_rate(&self) -> f64 {
        *self.matching_rate.last().unwrap_or(&0.0)
    }

    pub fn final_forgetting(&self) -> f64 {
        *self.forgetting.last().unwrap_or(&0.0)
    }

    /// Structural checks applied before any summary is written.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Schema(m));
        let t = self.num_tasks;
        if t == 0 {
            return bad("no tasks".into());
        }
        if self.accuracy_matrix.len() != t
            || self.average_accuracy.len() != t
            || self.forgetting.len() != t
            || self.matching_rate.len() != t
            || self.keys_per_task.len() != t
        {
            return bad(format!("per-task series do not all have {t} entries"));
        }
        for (r, row) in self.accuracy_matrix.iter().enumerate() {
            if row.len() != t {
                return bad(format!("accuracy row {r} has {} entries", row.len()));
            }
            for (c, v) in row.iter().enumerate() {
                match (c >= r, v) {
                    (true, Some(v)) if (0.0..=1.0).contains(v) => {}
                    (false, None) => {}
                    _ => return bad(format!("accuracy entry ({r}, {c}) is {v:?}")),
                }
            }
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(HarnessError::Schema(format!("{name} {v} outside [0, 1]")))
            }
        };
        for &v in self.average_accuracy.iter().chain(&self.matching_rate) {
            unit("accuracy or matching rate", v)?;
        }
        for &v in &self.forgetting {
            if !(-1.0..=1.0).contains(&v) {
                return bad(format!("forgetting {v} outside [-1, 1]"));
            }
        }
        let o = &self.oracle;
        for v in [
            o.acc_false_selected,
            o.acc_true_selected,
            o.acc_false_forced_true,
        ]
        .into_iter()
        .flatten()
        .chain([
            o.acc_all_forced_true,
            o.acc_natural,
            o.matching_rate,
            self.ncm_accuracy,
        ])
        .chain(self.km_accuracy)
        {
            unit("oracle or classifier accuracy", v)?;
        }
        let c = &self.counters;
        if c.train_forwards != c.train_batches * self.cost.training.forwards
            || c.train_backwards != c.train_batches * self.cost.training.backwards
        {
            return bad(format!(
                "training counters {c:?} disagree with the cost model"
            ));
        }
        if c.inference_forwards != c.inference_samples * self.cost.inference.forwards {
            return bad(format!(
                "inference counters {c:?} disagree with the cost model"
            ));
        }
        Ok(())
    }
}

/// A finished run and its CSV artifacts.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub accuracy_csv: String,
    pub confusion_csv: String,
    pub losses_csv: String,
    pub matches_csv: String,
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("summary serializes");
    s.push('\n');
    s
}

/// One continual run: trains every task in order, evaluates all seen tasks
/// after each, then analyses the final model.
pub fn run_seed(
    cfg: &ExperimentConfig,
    backbone: &Backbone,
    seed: u64,
) -> Result<RunArtifacts, HarnessError> {
    let stream = cfg.stream(seed)?;
    let tc = cfg
        .train_config(seed)
        .map_err(|e| HarnessError::Validation(vec![e]))?;
    let d = backbone.config.embed_dim;
    let total = stream.num_classes();
    let mut pool = PoolState::new(cfg.prompts.clone(), d, total, seed);
    let mut head = init_head(d, total);
    let tasks = stream.num_tasks();
    let mut matrix = AccuracyMatrix::new(tasks);
    let mut counters = Counters::default();
    let mut losses: Vec<LossStep> = Vec::new();
    let mut average = Vec::with_capacity(tasks);
    let mut forget = Vec::with_capacity(tasks);
    let mut matching = Vec::with_capacity(tasks);
    let mut last_eval = None;

    for t in 0..tasks {
        let report = train_task(&stream, t, backbone, &mut pool, &mut head, &tc)?;
        counters.train_batches += report.batches;
        counters.train_forwards += report.passes.forwards;
        counters.train_backwards += report.passes.backwards;
        for mut s in report.steps {
            s.step = losses.len();
            losses.push(s);
        }

        let model = Model {
            backbone,
            pool: &pool,
            head: &head,
        };
        let before = backbone.counters.snapshot();
        let eval = evaluate(model, &stream, tc.paradigm, tc.top_k)?;
        let spent = backbone.counters.snapshot() - before;
        if t + 1 == tasks {
            counters.inference_samples = eval.records.len() as u64;
            counters.inference_forwards = spent.forwards;
        }
        for (task, &acc) in eval.task_accuracy.iter().enumerate() {
            matrix.set(task, t, acc)?;
        }
        average.push(average_accuracy(&matrix, t + 1)?);
        forget.push(forgetting(&matrix, t + 1)?);
        matching.push(eval.matching_rate()?);
        last_eval = Some(eval);
    }
    let eval = last_eval.ok_or_else(|| HarnessError::Runtime("stream has no tasks".into()))?;
    let model = Model {
        backbone,
        pool: &pool,
        head: &head,
    };
    let oracle = oracle_analysis(model, &stream, &eval)?;
    let km_accuracy = if pool.entries.iter().all(|e| e.is_class_level()) {
        Some(classifier_accuracy(Classifier::Km, &eval, model, None)?)
    } else {
        None
    };
    let prototypes = NcmPrototypes::build(backbone, &pool, &stream)?;
    let ncm_accuracy = classifier_accuracy(Classifier::Ncm, &eval, model, Some(&prototypes))?;

    let summary = RunSummary {
        paradigm: tc.paradigm,
        seed,
        num_tasks: tasks,
        top_k: tc.top_k,
        keys_per_task: pool.entries.iter().map(|e| e.num_keys()).collect(),
        class_order: stream.class_order.clone(),
        accuracy_matrix: (0..tasks)
            .map(|r| (0..tasks).map(|c| matrix.get(r, c).ok()).collect())
            .collect(),
        average_accuracy: average,
        forgetting: forget,
        matching_rate: matching,
        oracle,
        km_accuracy,
        ncm_accuracy,
        cost: CostSummary {
            training: cost_model(tc.paradigm, pool.len(), Phase::Training),
            inference: cost_model(tc.paradigm, pool.len(), Phase::Inference),
        },
        counters,
        parameter_counts: pool.parameter_counts(),
    };
    summary.validate()?;
    Ok(RunArtifacts {
        summary,
        accuracy_csv: matrix.to_csv(),
        confusion_csv: confusion_csv(&eval.records, pool.len()),
        losses_csv: losses_csv(&losses),
        matches_csv: records_csv(&eval.records),
    })
}

pub fn write_run(dir: &Path, run: &RunArtifacts) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    run.summary.validate()?;
    for (name, body) in [
        ("summary.json", to_json(&run.summary)),
        ("accuracy.csv", run.accuracy_csv.clone()),
        ("confusion.csv", run.confusion_csv.clone()),
        ("losses.csv", run.losses_csv.clone()),
        ("matches.csv", run.matches_csv.clone()),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io(&p))?;
    }
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub paradigm: Paradigm,
    pub seeds: Vec<u64>,
    pub median_average_accuracy: f64,
    pub median_matching_rate: f64,
    pub median_forgetting: f64,
    pub runs: Vec<RunSummary>,
}

impl SeedAggregate {
    pub fn new(runs: Vec<RunSummary>) -> Self {
        let acc: Vec<f64> = runs.iter().map(RunSummary::final_accuracy).collect();
        let mr: Vec<f64> = runs.iter().map(RunSummary::final_matching_rate).collect();
        let fg: Vec<f64> = runs.iter().map(RunSummary::final_forgetting).collect();
        Self {
            paradigm: runs.first().map_or(Paradigm::Mqmk, |r| r.paradigm),
            seeds: runs.iter().map(|r| r.seed).collect(),
            median_average_accuracy: median(&acc),
            median_matching_rate: median(&mr),
            median_forgetting: median(&fg),
            runs,
        }
    }
}

/// Runs every configured seed and writes `seed_<s>/` artifacts plus an
/// aggregate `summary.json` into the output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<SeedAggregate, HarnessError> {
    cfg.validate()?;
    let backbone = load_checkpoint(cfg)?;
    let out = &cfg.experiment.output_dir;
    let mut runs = Vec::new();
    for &seed in &cfg.experiment.seeds {
        backbone.counters.reset();
        let run = run_seed(cfg, &backbone, seed)?;
        write_run(&out.join(format!("seed_{seed}")), &run)?;
        runs.push(run.summary);
    }
    let agg = SeedAggregate::new(runs);
    let p = out.join("summary.json");
    fs::write(&p, to_json(&agg)).map_err(io(&p))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(io(out))?;
    Ok(agg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Paradigm,
    KeyGranularity,
    K,
    PromptDepth,
    PromptLength,
}

impl std::str::FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paradigm" => Ok(Axis::Paradigm),
            "key_granularity" => Ok(Axis::KeyGranularity),
            "K" | "k" | "top_k" => Ok(Axis::K),
            "prompt_depth" => Ok(Axis::PromptDepth),
            "prompt_length" => Ok(Axis::PromptLength),
            other => Err(format!(
                "unknown axis {other:?} (paradigm, key_granularity, K, prompt_depth, prompt_length)"
            )),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Paradigm => "paradigm",
            Axis::KeyGranularity => "key_granularity",
            Axis::K => "K",
            Axis::PromptDepth => "prompt_depth",
            Axis::PromptLength => "prompt_length",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self, cfg: &ExperimentConfig) -> Vec<String> {
        let per_task = cfg.data.num_classes / cfg.data.num_tasks.max(1);
        match self {
            Axis::Paradigm => Paradigm::ALL.iter().map(|p| p.name().to_string()).collect(),
            Axis::KeyGranularity => (1..=per_task).map(|n| n.to_string()).collect(),
            Axis::K => {
                let mut v = vec![1, 2.min(per_task), per_task];
                v.dedup();
                v.iter().map(|k| k.to_string()).collect()
            }
            Axis::PromptDepth => (1..=cfg.backbone.num_layers)
                .map(|n| n.to_string())
                .collect(),
            Axis::PromptLength => ["1", "4", "8", "16"].map(String::from).to_vec(),
        }
    }

    /// Applies one axis value to a copy of `base`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, String> {
        let mut cfg = base.clone();
        let count = || {
            value
                .parse::<usize>()
                .map_err(|_| format!("{} value {value:?} is not a count", self.name()))
        };
        match self {
            Axis::Paradigm => cfg.train.paradigm = value.parse()?,
            Axis::KeyGranularity => {
                let n = count()?;
                cfg.train.paradigm = if n == 1 {
                    Paradigm::Mqsk
                } else {
                    Paradigm::Mqmk
                };
                cfg.train.key_granularity = GranularitySetting::Count(n);
                cfg.train.top_k = 1;
            }
            Axis::K => {
                cfg.train.paradigm = Paradigm::Mqmk;
                cfg.train.key_granularity = GranularitySetting::Name("class".into());
                cfg.train.top_k = count()?;
            }
            Axis::PromptDepth => {
                let n = count()?;
                cfg.prompts.e_layers = (0..n).collect();
            }
            Axis::PromptLength => cfg.prompts.e_length = count()?,
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub paradigm: Paradigm,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub matching_mean: f64,
    pub matching_std: f64,
    pub forgetting_mean: f64,
    pub forgetting_std: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "axis,value,paradigm,runs,accuracy_mean,accuracy_std,matching_mean,matching_std,forgetting_mean,forgetting_std\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.value,
            r.paradigm,
            r.runs,
            r.accuracy_mean,
            r.accuracy_std,
            r.matching_mean,
            r.matching_std,
            r.forgetting_mean,
            r.forgetting_std
        ));
    }
    out
}

fn sort_key(value: &str) -> (u8, usize, String) {
    if let Ok(p) = value.parse::<Paradigm>() {
        return (0, p as usize, String::new());
    }
    match value.parse::<usize>() {
        Ok(n) => (1, n, String::new()),
        Err(_) => (2, 0, value.to_string()),
    }
}

/// One run per axis value per seed, all on the same pretrained checkpoint.
/// Writes `ablate_<axis>.csv` with rows sorted by value.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    axis: Axis,
    values: Option<Vec<String>>,
) -> Result<Vec<SweepRow>, HarnessError> {
    let values = values.unwrap_or_else(|| axis.default_values(cfg));
    if values.is_empty() {
        return Err(HarnessError::Validation(vec![format!(
            "axis {} has no values",
            axis.name()
        )]));
    }
    let mut variants = Vec::new();
    let mut problems = Vec::new();
    for v in &values {
        match axis.apply(cfg, v) {
            Ok(c) => {
                problems.extend(
                    c.problems()
                        .into_iter()
                        .map(|p| format!("{}={v}: {p}", axis.name())),
                );
                variants.push((v.clone(), c));
            }
            Err(e) => problems.push(e),
        }
    }
    if !problems.is_empty() {
        return Err(HarnessError::Validation(problems));
    }
    let backbone = load_checkpoint(cfg)?;
    let mut rows = Vec::new();
    for (value, c) in &variants {
        let mut acc = Vec::new();
        let mut mr = Vec::new();
        let mut fg = Vec::new();
        for &seed in &c.experiment.seeds {
            let run = run_seed(c, &backbone, seed)?;
            acc.push(run.summary.final_accuracy());
            mr.push(run.summary.final_matching_rate());
            fg.push(run.summary.final_forgetting());
        }
        let (am, as_) = mean_std(&acc);
        let (mm, ms) = mean_std(&mr);
        let (fm, fs_) = mean_std(&fg);
        rows.push(SweepRow {
            axis: axis.name().to_string(),
            value: value.clone(),
            paradigm: c.train.paradigm,
            runs: acc.len(),
            accuracy_mean: am,
            accuracy_std: as_,
            matching_mean: mm,
            matching_std: ms,
            forgetting_mean: fm,
            forgetting_std: fs_,
        });
    }
    rows.sort_by_key(|a| sort_key(&a.value));
    let out = &cfg.experiment.output_dir;
    fs::create_dir_all(out).map_err(io(out))?;
    let p = out.join(format!("ablate_{}.csv", axis.name()));
    fs::write(&p, sweep_csv(&rows)).map_err(io(&p))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCheck {
    pub paradigm: Paradigm,
    pub phase: Phase,
    pub model: CostRecord,
    pub units: u64,
    pub measured_forwards: u64,
    pub measured_backwards: u64,
}

impl CostCheck {
    pub fn matches(&self) -> bool {
        self.measured_forwards == self.units * self.model.forwards
            && self.measured_backwards == self.units * self.model.backwards
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub pool_size: usize,
    pub embed_dim: usize,
    pub total_classes: usize,
    pub single_key: ParameterCounts,
    pub multiple_keys: ParameterCounts,
    pub key_param_delta: usize,
    pub checks: Vec<CostCheck>,
}

/// Parameter counts for SK and MK pools of the configured shape, and the
/// pass-count model checked against counters on a one-batch-per-task run.
pub fn cmd_cost(cfg: &ExperimentConfig) -> Result<CostReport, HarnessError> {
    cfg.validate()?;
    let backbone = load_checkpoint(cfg)?;
    let seed = cfg.experiment.seeds[0];
    let stream = cfg.stream(seed)?;
    let d = backbone.config.embed_dim;
    let total = stream.num_classes();
    let mut counts = Vec::new();
    for g in [KeyGranularity::Task, KeyGranularity::Class] {
        let mut pool = PoolState::new(cfg.prompts.clone(), d, total, seed);
        for t in &stream.tasks {
            pool.expand(&t.class_ids, g)?;
        }
        counts.push(pool.parameter_counts());
    }

    let mut checks = Vec::new();
    for paradigm in Paradigm::ALL {
        let mut tc = cfg
            .train_config(seed)
            .map_err(|e| HarnessError::Validation(vec![e]))?;
        tc.paradigm = paradigm;
        tc.key_granularity = KeyGranularity::Class;
        tc.top_k = 1;
        tc.epochs_per_task = 1;
        tc.batch_size = stream.tasks[0].train_indices.len();
        let mut pool = PoolState::new(cfg.prompts.clone(), d, total, seed);
        let mut head = init_head(d, total);
        let mut batches = 0;
        let before = backbone.counters.snapshot();
        for t in 0..stream.num_tasks() {
            batches += train_task(&stream, t, &backbone, &mut pool, &mut head, &tc)?.batches;
        }
        let spent = backbone.counters.snapshot() - before;
        checks.push(CostCheck {
            paradigm,
            phase: Phase::Training,
            model: cost_model(paradigm, pool.len(), Phase::Training),
            units: batches,
            measured_forwards: spent.forwards,
            measured_backwards: spent.backwards,
        });
        let samples: Vec<usize> = stream
            .tasks
            .iter()
            .flat_map(|t| t.test_indices.iter().take(2).copied())
            .collect();
        let before = backbone.counters.snapshot();
        for &i in &samples {
            select_prompt(&backbone, &pool, stream.test.image(i), paradigm, 1, i, None)?;
        }
        let spent = backbone.counters.snapshot() - before;
        checks.push(CostCheck {
            paradigm,
            phase: Phase::Inference,
            model: cost_model(paradigm, pool.len(), Phase::Inference),
            units: samples.len() as u64,
            measured_forwards: spent.forwards,
            measured_backwards: spent.backwards,
        });
    }
    let report = CostReport {
        pool_size: stream.num_tasks(),
        embed_dim: d,
        total_classes: total,
        key_param_delta: counts[1].key_params - counts[0].key_params,
        single_key: counts[0],
        multiple_keys: counts[1],
        checks,
    };
    let out = &cfg.experiment.output_dir;
    fs::create_dir_all(out).map_err(io(out))?;
    let p = out.join("cost.json");
    fs::write(&p, to_json(&report)).map_err(io(&p))?;
    Ok(report)
}

fn read_summary(path: &Path) -> Result<RunSummary, HarnessError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let s: RunSummary = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))?;
    s.validate()?;
    Ok(s)
}

pub fn metrics_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from(
        "paradigm,seed,average_accuracy,forgetting,matching_rate,acc_all_forced_true,km_accuracy,ncm_accuracy\n",
    );
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.paradigm,
            r.seed,
            r.final_accuracy(),
            r.final_forgetting(),
            r.final_matching_rate(),
            r.oracle.acc_all_forced_true,
            r.km_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            r.ncm_accuracy
        ));
    }
    out
}

fn matrix_csv(m: &[Vec<Option<f64>>]) -> String {
    let n = m.len();
    let mut out = String::from("task");
    for a in 1..=n {
        out.push_str(&format!(",after_{a}"));
    }
    out.push('\n');
    for (t, row) in m.iter().enumerate() {
        out.push_str(&(t + 1).to_string());
        for v in row {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Re-renders `accuracy.csv` for every `seed_*/summary.json` under `dir`
/// and writes `metrics.csv` and an aggregate `summary.json`.
pub fn cmd_report(dir: &Path) -> Result<SeedAggregate, HarnessError> {
    if !dir.is_dir() {
        return Err(HarnessError::Validation(vec![format!(
            "{} is not a run directory",
            dir.display()
        )]));
    }
    let mut seeds: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    seeds.sort();
    if seeds.is_empty() {
        return Err(HarnessError::Validation(vec![format!(
            "{} contains no seed_*/summary.json",
            dir.display()
        )]));
    }
    let mut runs = Vec::new();
    for s in &seeds {
        let summary = read_summary(&s.join("summary.json"))?;
        let p = s.join("accuracy.csv");
        fs::write(&p, matrix_csv(&summary.accuracy_matrix)).map_err(io(&p))?;
        runs.push(summary);
    }
    runs.sort_by_key(|r| (r.paradigm, r.seed));
    let p = dir.join("metrics.csv");
    fs::write(&p, metrics_csv(&runs)).map_err(io(&p))?;
    let agg = SeedAggregate::new(runs);
    let p = dir.join("summary.json");
    fs::write(&p, to_json(&agg)).map_err(io(&p))?;
    Ok(agg)
}
