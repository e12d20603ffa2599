//! Per-task optimization of prompts, keys and the classifier head.
//!
//! During training the task id routes each batch to its own e-prompt. The
//! prompt loss is a cross-entropy over the task's classes only; the key loss
//! pulls each sample's key towards its (detached) query. For MQ paradigms the
//! query is the prompted feature of the same forward pass, so a batch costs
//! one forward and one backward. SQ paradigms need an extra promptless
//! forward for the query.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    Backbone, BackboneConfig, BackboneError, BoundBackbone, PassCount, PromptInsertionPlan,
};
use crate::data::{mix, Dataset, TaskStream};
use crate::matching::{MatchError, Paradigm};
use crate::numerics::{
    argmax, AdamConfig, AdamState, Gradients, Graph, NumericsError, Tensor, Var,
};
use crate::promptpool::{KeyGranularity, PoolError, PoolState, PromptEntry};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("task {got} trained out of order, expected task {expected}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("label {label} does not belong to task {task}")]
    ForeignLabel { label: usize, task: usize },
    #[error("batch of {images} images with {labels} labels")]
    BatchShape { images: usize, labels: usize },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub seed: u64,
    pub paradigm: Paradigm,
    pub top_k: usize,
    pub key_granularity: KeyGranularity,
    pub train_g_prompt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            epochs_per_task: 20,
            seed: 0,
            paradigm: Paradigm::Mqmk,
            top_k: 1,
            key_granularity: KeyGranularity::Class,
            train_g_prompt: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut errors = Vec::new();
        if self.batch_size == 0 {
            errors.push("batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errors.push(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errors.push(format!("{name} {b} outside [0, 1)"));
            }
        }
        if self.top_k == 0 {
            errors.push("top_k must be at least 1".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(errors.join("; ")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Key layout actually used: single-key paradigms always get one key per task.
    pub fn granularity(&self) -> KeyGranularity {
        if self.paradigm.multiple_keys() {
            self.key_granularity
        } else {
            KeyGranularity::Task
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStep {
    pub step: usize,
    pub loss_prompts: f64,
    pub loss_keys: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub steps: Vec<LossStep>,
    /// Backbone passes spent on this task.
    pub passes: PassCount,
    pub batches: u64,
}

impl LossReport {
    pub fn to_csv(&self) -> String {
        losses_csv(&self.steps)
    }
}

pub fn losses_csv(steps: &[LossStep]) -> String {
    let mut out = String::from("step,loss_prompts,loss_keys,loss_total\n");
    for s in steps {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.step, s.loss_prompts, s.loss_keys, s.loss_total
        ));
    }
    out
}

/// Fresh classifier head `[D, classes]`. Zero weights give uniform logits.
pub fn init_head(embed_dim: usize, classes: usize) -> Tensor {
    Tensor::zeros(&[embed_dim, classes])
}

fn task_mask(entry: &PromptEntry, total_classes: usize) -> Vec<bool> {
    let mut mask = vec![false; total_classes];
    for &c in &entry.class_ids {
        mask[c] = true;
    }
    mask
}

/// Mean masked cross-entropy of `Wᵀ f` over a batch of `[1, D]` features,
/// with logits restricted to the classes of `entry`.
pub fn prompt_loss(
    g: &mut Graph<'_>,
    features: &[Var],
    labels: &[usize],
    head: Var,
    entry: &PromptEntry,
) -> Result<Var, TrainError> {
    check_batch(features.len(), labels, entry)?;
    let classes = g.value(head).cols();
    let mask = task_mask(entry, classes);
    let mut terms = Vec::with_capacity(labels.len());
    for (&f, &y) in features.iter().zip(labels) {
        let logits = Backbone::classify(g, f, head, Some(&mask))?;
        terms.push(g.cross_entropy(logits, y)?);
    }
    let sum = g.add_n(&terms)?;
    Ok(g.scale(sum, 1.0 / labels.len() as f64))
}

/// Mean of `1 − cos(Q, k_key(y))` with the queries detached, so only the
/// keys receive gradient.
pub fn key_loss(
    g: &mut Graph<'_>,
    queries: &[Var],
    labels: &[usize],
    keys: Var,
    entry: &PromptEntry,
) -> Result<Var, TrainError> {
    check_batch(queries.len(), labels, entry)?;
    let mut terms = Vec::with_capacity(labels.len());
    for (&q, &y) in queries.iter().zip(labels) {
        let j = entry.class_to_key(y)?;
        let k = g.slice_rows(keys, j, j + 1)?;
        let q = g.detach(q);
        let c = g.cosine(q, k)?;
        let neg = g.scale(c, -1.0);
        terms.push(g.add_scalar(neg, 1.0));
    }
    let sum = g.add_n(&terms)?;
    Ok(g.scale(sum, 1.0 / labels.len() as f64))
}

fn check_batch(n: usize, labels: &[usize], entry: &PromptEntry) -> Result<(), TrainError> {
    if n != labels.len() || n == 0 {
        return Err(TrainError::BatchShape {
            images: n,
            labels: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|y| !entry.class_ids.contains(y)) {
        return Err(TrainError::ForeignLabel {
            label: y,
            task: entry.task_id,
        });
    }
    Ok(())
}

/// Tensors trained for one task.
#[derive(Debug, Clone, Copy)]
pub struct TaskParams<'p> {
    pub g_prompt: &'p Tensor,
    pub e_prompt: &'p Tensor,
    pub keys: &'p Tensor,
    pub head: &'p Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub g_prompt: Var,
    pub e_prompt: Var,
    pub keys: Var,
    pub head: Var,
    pub prompts: Var,
    pub keys_loss: Var,
    pub total: Var,
}

/// Builds both losses for one batch on `g`. `single_queries` must hold the
/// promptless queries for SQ paradigms and be `None` for MQ paradigms, whose
/// query is the prompted feature of this very forward.
#[allow(clippy::too_many_arguments)]
pub fn build_losses<'a>(
    g: &mut Graph<'a>,
    backbone: &'a Backbone,
    bound: &BoundBackbone,
    plan: &PromptInsertionPlan,
    entry: &PromptEntry,
    params: TaskParams<'a>,
    train_g_prompt: bool,
    images: &[&[f32]],
    labels: &[usize],
    single_queries: Option<&[Tensor]>,
) -> Result<LossVars, TrainError> {
    if images.len() != labels.len() {
        return Err(TrainError::BatchShape {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let d = backbone.config.embed_dim;
    let g_prompt = if train_g_prompt {
        g.param(params.g_prompt)
    } else {
        g.constant(params.g_prompt)
    };
    let e_prompt = g.param(params.e_prompt);
    let keys = g.param(params.keys);
    let head = g.param(params.head);
    let flat =
        |g: &mut Graph<'a>, v: Var, shape: [usize; 3]| g.reshape(v, &[shape[0] * shape[1], d]);
    let prompts = crate::backbone::PromptVars {
        g: Some(flat(g, g_prompt, plan.g_shape(d))?),
        e: Some(flat(g, e_prompt, plan.e_shape(d))?),
    };
    let outs = backbone.forward_batch(g, bound, images, plan, prompts)?;
    let features: Vec<Var> = outs.iter().map(|o| o.feature).collect();
    let queries: Vec<Var> = match single_queries {
        Some(qs) => {
            if qs.len() != images.len() {
                return Err(TrainError::BatchShape {
                    images: images.len(),
                    labels: qs.len(),
                });
            }
            qs.iter().map(|q| g.constant_owned(q.clone())).collect()
        }
        None => features.clone(),
    };
    let lp = prompt_loss(g, &features, labels, head, entry)?;
    let lk = key_loss(g, &queries, labels, keys, entry)?;
    let total = g.add(lp, lk)?;
    Ok(LossVars {
        g_prompt,
        e_prompt,
        keys,
        head,
        prompts: lp,
        keys_loss: lk,
        total,
    })
}

/// Loss values and per-parameter gradients of each loss separately, in the
/// order g-prompt, e-prompt, keys, head.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub loss_prompts: f64,
    pub loss_keys: f64,
    pub loss_total: f64,
    pub d_prompts: [Tensor; 4],
    pub d_keys: [Tensor; 4],
}

/// Evaluates both losses and their gradients for one batch without touching
/// any optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn loss_gradients(
    backbone: &Backbone,
    plan: &PromptInsertionPlan,
    entry: &PromptEntry,
    params: TaskParams<'_>,
    images: &[&[f32]],
    labels: &[usize],
    paradigm: Paradigm,
) -> Result<LossGradients, TrainError> {
    let single = if paradigm.multiple_queries() {
        None
    } else {
        Some(backbone.features(images, &PromptInsertionPlan::none(), None, None)?)
    };
    let mut g = Graph::new();
    let bound = backbone.bind(&mut g, false);
    let v = build_losses(
        &mut g,
        backbone,
        &bound,
        plan,
        entry,
        params,
        true,
        images,
        labels,
        single.as_deref(),
    )?;
    let collect = |grads: &Gradients| {
        [v.g_prompt, v.e_prompt, v.keys, v.head].map(|p| grads.get_or_zeros(p, g.value(p).shape()))
    };
    let gp = g.backward(v.prompts)?;
    let gk = g.backward(v.keys_loss)?;
    Ok(LossGradients {
        loss_prompts: g.value(v.prompts).item(),
        loss_keys: g.value(v.keys_loss).item(),
        loss_total: g.value(v.total).item(),
        d_prompts: collect(&gp),
        d_keys: collect(&gk),
    })
}

/// Trains task `task` (0-based) of `stream`. Appends the task's entry to the
/// pool, which freezes every earlier entry, and updates only the new entry,
/// the g-prompt and the head columns of the task's classes.
pub fn train_task(
    stream: &TaskStream,
    task: usize,
    backbone: &Backbone,
    pool: &mut PoolState,
    head: &mut Tensor,
    config: &TrainConfig,
) -> Result<LossReport, TrainError> {
    config.validate()?;
    if task != pool.len() || task >= stream.num_tasks() {
        return Err(TrainError::OutOfOrder {
            expected: pool.len(),
            got: task,
        });
    }
    let split = &stream.tasks[task];
    pool.expand(&split.class_ids, config.granularity())?;
    config.paradigm.check_pool(pool)?;

    let t = pool.len() - 1;
    let mut shapes: Vec<Vec<usize>> = vec![
        pool.entries[t].prompt.shape().to_vec(),
        pool.entries[t].keys.shape().to_vec(),
        head.shape().to_vec(),
    ];
    if config.train_g_prompt {
        shapes.push(pool.g_prompt.shape().to_vec());
    }
    let mut adam = AdamState::new(config.adam(), shapes.iter().map(|s| s.as_slice()));

    let start = backbone.counters.snapshot();
    let mut report = LossReport::default();
    let mut order = split.train_indices.clone();
    for epoch in 0..config.epochs_per_task {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            config.seed,
            task as u64,
            epoch as u64,
        )));
        for batch in order.chunks(config.batch_size) {
            let images: Vec<&[f32]> = batch.iter().map(|&i| stream.train.image(i)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| stream.train.label(i)).collect();
            let single = if config.paradigm.multiple_queries() {
                None
            } else {
                Some(backbone.features(&images, &PromptInsertionPlan::none(), None, None)?)
            };

            let (step, grads) = {
                let entry = &pool.entries[t];
                let params = TaskParams {
                    g_prompt: &pool.g_prompt,
                    e_prompt: &entry.prompt,
                    keys: &entry.keys,
                    head,
                };
                let mut g = Graph::new();
                let bound = backbone.bind(&mut g, false);
                let v = build_losses(
                    &mut g,
                    backbone,
                    &bound,
                    &pool.plan,
                    entry,
                    params,
                    config.train_g_prompt,
                    &images,
                    &labels,
                    single.as_deref(),
                )?;
                let mut grads = g.backward(v.total)?;
                backbone.counters.record_backward();
                let step = LossStep {
                    step: report.steps.len(),
                    loss_prompts: g.value(v.prompts).item(),
                    loss_keys: g.value(v.keys_loss).item(),
                    loss_total: g.value(v.total).item(),
                };
                let mut take = |p: Var| {
                    grads
                        .take(p)
                        .unwrap_or_else(|| Tensor::zeros(g.value(p).shape()))
                };
                let mut list = vec![take(v.e_prompt), take(v.keys), take(v.head)];
                if config.train_g_prompt {
                    list.push(take(v.g_prompt));
                }
                (step, list)
            };
            report.steps.push(step);
            report.batches += 1;

            let entry = &mut pool.entries[t];
            let mut params: Vec<&mut Tensor> = vec![&mut entry.prompt, &mut entry.keys, &mut *head];
            if config.train_g_prompt {
                params.push(&mut pool.g_prompt);
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut params, &grad_refs)?;
        }
    }
    report.passes = backbone.counters.snapshot() - start;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.002,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub backbone: Backbone,
    pub head: Tensor,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

/// Supervised training of the whole backbone plus a linear head on a
/// pretext dataset. The result is the frozen backbone used by every run.
pub fn pretrain_backbone(
    config: &PretrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<PretrainOutcome, TrainError> {
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(TrainError::Config(
            "pretraining needs epochs and batch_size ≥ 1".into(),
        ));
    }
    let mut backbone = Backbone::new(config.backbone, config.seed)?;
    if train.is_empty() {
        return Err(TrainError::Config("empty pretext training set".into()));
    }
    if train.sample_len() != backbone.config.image_len() {
        return Err(BackboneError::ImageSize {
            got: train.sample_len(),
            expected: backbone.config.image_len(),
            channels: backbone.config.channels,
            size: backbone.config.image_size,
        }
        .into());
    }
    let d = backbone.config.embed_dim;
    let mut head = init_head(d, train.num_classes);
    let plan = PromptInsertionPlan::none();
    let mut shapes: Vec<Vec<usize>> = backbone
        .named_params()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    shapes.push(head.shape().to_vec());
    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, shapes.iter().map(|s| s.as_slice()));

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            config.seed,
            0x9e7,
            epoch as u64,
        )));
        for batch in order.chunks(config.batch_size) {
            let grads = {
                let mut g = Graph::new();
                let bound = backbone.bind(&mut g, true);
                let h = g.param(&head);
                let images: Vec<&[f32]> = batch.iter().map(|&i| train.image(i)).collect();
                let outs =
                    backbone.forward_batch(&mut g, &bound, &images, &plan, Default::default())?;
                let mut terms = Vec::with_capacity(batch.len());
                for (o, &i) in outs.iter().zip(batch) {
                    let logits = Backbone::classify(&mut g, o.feature, h, None)?;
                    terms.push(g.cross_entropy(logits, train.label(i))?);
                }
                let sum = g.add_n(&terms)?;
                let loss = g.scale(sum, 1.0 / batch.len() as f64);
                let mut grads = g.backward(loss)?;
                backbone.counters.record_backward();
                final_loss = g.value(loss).item();
                let mut vars = bound.vars();
                vars.push(h);
                vars.iter()
                    .map(|&v| {
                        grads
                            .take(v)
                            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
                    })
                    .collect::<Vec<_>>()
            };
            let mut params = backbone.params_mut();
            params.push(&mut head);
            let refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut params, &refs)?;
        }
    }
    let test_accuracy = head_accuracy(&backbone, &head, test)?;
    backbone.counters.reset();
    Ok(PretrainOutcome {
        backbone,
        head,
        test_accuracy,
        final_loss,
    })
}

/// Accuracy of `argmax(Wᵀ f(x))` over a dataset, promptless.
pub fn head_accuracy(
    backbone: &Backbone,
    head: &Tensor,
    data: &Dataset,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let plan = PromptInsertionPlan::none();
    let mut correct = 0usize;
    for i in 0..data.len() {
        let f = backbone
            .features(&[data.image(i)], &plan, None, None)?
            .remove(0);
        let logits: Vec<f64> = (0..head.cols())
            .map(|c| {
                (0..f.len())
                    .map(|k| f.data()[k] * head.data()[k * head.cols() + c])
                    .sum()
            })
            .collect();
        if argmax(&logits) == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split_stream, SynthSpec};

    fn tiny_backbone() -> Backbone {
        Backbone::new(
            BackboneConfig {
                image_size: 8,
                patch_size: 4,
                channels: 1,
                embed_dim: 8,
                num_layers: 2,
                num_heads: 2,
                mlp_ratio: 2,
            },
            11,
        )
        .unwrap()
    }

    fn tiny_plan() -> PromptInsertionPlan {
        PromptInsertionPlan {
            g_layers: vec![0],
            e_layers: vec![0, 1],
            g_length: 2,
            e_length: 2,
        }
    }

    fn tiny_stream(classes: usize, tasks: usize, seed: u64) -> TaskStream {
        let spec = SynthSpec::from_family(3, 0, classes, 12, 4, 8, 1, 0.05, seed);
        split_stream(generate(&spec).unwrap(), tasks, seed).unwrap()
    }

    fn config(paradigm: Paradigm, epochs: usize) -> TrainConfig {
        TrainConfig {
            paradigm,
            epochs_per_task: epochs,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn key_loss_examples() {
        let entry = PromptEntry {
            task_id: 1,
            prompt: Tensor::zeros(&[1, 1, 2]),
            keys: Tensor::zeros(&[1, 2]),
            class_ids: vec![0],
            frozen: false,
        };
        for (key, expected) in [([1.0, 2.0], 0.0), ([-2.0, 1.0], 1.0), ([-1.0, -2.0], 2.0)] {
            let mut g = Graph::new();
            let q = g.constant_owned(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
            let k = g.param_owned(Tensor::matrix(1, 2, key.to_vec()).unwrap());
            let l = key_loss(&mut g, &[q], &[0], k, &entry).unwrap();
            assert!((g.value(l).item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_loss_laws() {
        let mut entry = PromptEntry {
            task_id: 1,
            prompt: Tensor::zeros(&[1, 1, 3]),
            keys: Tensor::zeros(&[1, 3]),
            class_ids: vec![2],
            frozen: false,
        };
        let f = Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let head = Tensor::uniform(&[3, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let fv = g.constant_owned(f.clone());
        let h = g.param_owned(head.clone());
        let l = prompt_loss(&mut g, &[fv], &[2], h, &entry).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        entry.class_ids = vec![1, 3, 4];
        let mut g = Graph::new();
        let fv = g.constant_owned(f);
        let h = g.param_owned(Tensor::zeros(&[3, 5]));
        let l = prompt_loss(&mut g, &[fv], &[3], h, &entry).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        let dh = grads.get(h).unwrap();
        for r in 0..3 {
            for c in [0, 2] {
                assert_eq!(dh.data()[r * 5 + c], 0.0);
            }
        }
        assert!(matches!(
            prompt_loss(&mut g, &[fv], &[0], h, &entry),
            Err(TrainError::ForeignLabel { label: 0, .. })
        ));
    }

    #[test]
    fn prompt_loss_decreases_on_toy_task() {
        for seed in 0..5 {
            let stream = tiny_stream(2, 1, seed);
            let bb = tiny_backbone();
            let mut pool = PoolState::new(tiny_plan(), 8, 2, seed);
            let mut head = init_head(8, 2);
            let cfg = TrainConfig {
                epochs_per_task: 25,
                seed,
                ..config(Paradigm::Mqmk, 0)
            };
            let report = train_task(&stream, 0, &bb, &mut pool, &mut head, &cfg).unwrap();
            assert!(report.steps.len() >= 50);
            let first = report.steps[0].loss_prompts;
            let last = report.steps.last().unwrap().loss_prompts;
            assert!(last < first, "seed {seed}: {first} -> {last}");
        }
    }

    #[test]
    fn freeze_and_pass_counts() {
        let stream = tiny_stream(4, 2, 5);
        let bb = tiny_backbone();
        for (paradigm, forwards) in [
            (Paradigm::Mqmk, 1),
            (Paradigm::Sqsk, 2),
            (Paradigm::Sqmk, 2),
            (Paradigm::Mqsk, 1),
        ] {
            let mut pool = PoolState::new(tiny_plan(), 8, 4, 1);
            let mut head = init_head(8, 4);
            let cfg = config(paradigm, 2);
            let r1 = train_task(&stream, 0, &bb, &mut pool, &mut head, &cfg).unwrap();
            assert_eq!(r1.passes.forwards, forwards * r1.batches);
            assert_eq!(r1.passes.backwards, r1.batches);
            let before = pool.entries[0].clone();
            let head_before = head.clone();
            let g_before = pool.g_prompt.clone();
            let r2 = train_task(&stream, 1, &bb, &mut pool, &mut head, &cfg).unwrap();
            assert_eq!(r2.passes.forwards, forwards * r2.batches);
            assert_eq!(pool.entries[0].prompt, before.prompt);
            assert_eq!(pool.entries[0].keys, before.keys);
            assert!(pool.entries[0].frozen);
            assert_ne!(pool.g_prompt, g_before);
            for &c in &stream.tasks[0].class_ids {
                for r in 0..8 {
                    assert_eq!(head.data()[r * 4 + c], head_before.data()[r * 4 + c]);
                }
            }
            for s in r1.steps.iter().chain(&r2.steps) {
                assert!((s.loss_total - (s.loss_prompts + s.loss_keys)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn out_of_order_and_foreign_labels() {
        let stream = tiny_stream(4, 2, 5);
        let bb = tiny_backbone();
        let mut pool = PoolState::new(tiny_plan(), 8, 4, 1);
        let mut head = init_head(8, 4);
        assert!(matches!(
            train_task(
                &stream,
                1,
                &bb,
                &mut pool,
                &mut head,
                &config(Paradigm::Mqmk, 1)
            ),
            Err(TrainError::OutOfOrder {
                expected: 0,
                got: 1
            })
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn key_loss_gradient_skips_prompts() {
        let stream = tiny_stream(4, 1, 2);
        let bb = tiny_backbone();
        let mut pool = PoolState::new(tiny_plan(), 8, 4, 1);
        pool.expand(&stream.tasks[0].class_ids, KeyGranularity::Class)
            .unwrap();
        let head = Tensor::uniform(&[8, 4], 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        let idx = &stream.tasks[0].train_indices[..3];
        let images: Vec<&[f32]> = idx.iter().map(|&i| stream.train.image(i)).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| stream.train.label(i)).collect();
        let entry = &pool.entries[0];
        let params = TaskParams {
            g_prompt: &pool.g_prompt,
            e_prompt: &entry.prompt,
            keys: &entry.keys,
            head: &head,
        };
        let lg = loss_gradients(
            &bb,
            &pool.plan,
            entry,
            params,
            &images,
            &labels,
            Paradigm::Mqmk,
        )
        .unwrap();
        assert!(lg.d_keys[0].data().iter().all(|&v| v == 0.0));
        assert!(lg.d_keys[1].data().iter().all(|&v| v == 0.0));
        assert!(lg.d_keys[3].data().iter().all(|&v| v == 0.0));
        assert!(lg.d_keys[2].data().iter().any(|&v| v != 0.0));
        assert!(lg.d_prompts[1].data().iter().any(|&v| v != 0.0));
        assert!(lg.d_prompts[2].data().iter().all(|&v| v == 0.0));
        assert_eq!(lg.loss_total, lg.loss_prompts + lg.loss_keys);
    }

    #[test]
    fn pretraining_learns_and_is_deterministic() {
        let spec = SynthSpec::from_family(3, 1000, 4, 16, 8, 8, 1, 0.05, 1);
        let set = generate(&spec).unwrap();
        let cfg = PretrainConfig {
            backbone: tiny_backbone().config,
            epochs: 6,
            batch_size: 8,
            learning_rate: 0.01,
            seed: 2,
        };
        let a = pretrain_backbone(&cfg, &set.train, &set.test).unwrap();
        let b = pretrain_backbone(&cfg, &set.train, &set.test).unwrap();
        assert_eq!(a.backbone.to_bytes(), b.backbone.to_bytes());
        assert!(a.test_accuracy > 0.5, "{}", a.test_accuracy);
    }
}
