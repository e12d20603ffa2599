//! Accuracy matrix, forgetting, matching rate, oracle analysis, the three
//! classifiers and the pass-count cost model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneError};
use crate::data::TaskStream;
use crate::matching::{forced_feature, select_prompt, MatchError, MatchRecord, Paradigm};
use crate::numerics::{cosine, NumericsError, Tensor};
use crate::promptpool::PoolState;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("accuracy matrix entry ({task}, {after}) is missing")]
    Incomplete { task: usize, after: usize },
    #[error("accuracy matrix index ({task}, {after}) invalid for {tasks} tasks")]
    Index {
        task: usize,
        after: usize,
        tasks: usize,
    },
    #[error("accuracy {0} outside [0, 1]")]
    Range(f64),
    #[error("no records to evaluate")]
    Empty,
    #[error("record {0} has no true task")]
    UnknownTask(usize),
    #[error("{0} classifier needs class-level keys")]
    Granularity(Classifier),
    #[error("no prototype for any seen class")]
    NoPrototypes,
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Lower-triangular `Accuracy(t, T′)`, indexed from 0: `get(t, after)` is the
/// accuracy on task `t` once tasks `0..=after` have been learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            entries: (0..num_tasks).map(|t| vec![None; num_tasks - t]).collect(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    fn check(&self, task: usize, after: usize) -> Result<(), EvalError> {
        if task > after || after >= self.num_tasks {
            return Err(EvalError::Index {
                task,
                after,
                tasks: self.num_tasks,
            });
        }
        Ok(())
    }

    pub fn set(&mut self, task: usize, after: usize, accuracy: f64) -> Result<(), EvalError> {
        self.check(task, after)?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(EvalError::Range(accuracy));
        }
        self.entries[task][after - task] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Result<f64, EvalError> {
        self.check(task, after)?;
        self.entries[task][after - task].ok_or(EvalError::Incomplete { task, after })
    }

    /// Rows are tasks, columns the number of learned tasks; blank above the diagonal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for a in 1..=self.num_tasks {
            out.push_str(&format!(",after_{a}"));
        }
        out.push('\n');
        for t in 0..self.num_tasks {
            out.push_str(&(t + 1).to_string());
            for a in 0..self.num_tasks {
                out.push(',');
                if a >= t {
                    if let Some(v) = self.entries[t][a - t] {
                        out.push_str(&v.to_string());
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// `A_T`: mean of column `T` over tasks `1..=T` (`learned` = T ≥ 1).
pub fn average_accuracy(m: &AccuracyMatrix, learned: usize) -> Result<f64, EvalError> {
    if learned == 0 {
        return Err(EvalError::Incomplete { task: 0, after: 0 });
    }
    let mut sum = 0.0;
    for t in 0..learned {
        sum += m.get(t, learned - 1)?;
    }
    Ok(sum / learned as f64)
}

/// `F_T`: mean over tasks `1..=T` of `Accuracy(t, t) − Accuracy(t, T)`.
pub fn forgetting(m: &AccuracyMatrix, learned: usize) -> Result<f64, EvalError> {
    if learned == 0 {
        return Err(EvalError::Incomplete { task: 0, after: 0 });
    }
    let mut sum = 0.0;
    for t in 0..learned {
        sum += m.get(t, t)? - m.get(t, learned - 1)?;
    }
    Ok(sum / learned as f64)
}

/// Fraction of records whose selected prompt is their true task's.
pub fn matching_rate(records: &[MatchRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0usize;
    for r in records {
        match r.true_task {
            Some(t) if t == r.selected() => hits += 1,
            Some(_) => {}
            None => return Err(EvalError::UnknownTask(r.sample_id)),
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classifier {
    #[serde(rename = "FC")]
    Fc,
    #[serde(rename = "NCM")]
    Ncm,
    #[serde(rename = "KM")]
    Km,
}

impl std::fmt::Display for Classifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Classifier::Fc => "FC",
            Classifier::Ncm => "NCM",
            Classifier::Km => "KM",
        })
    }
}

/// `argmax_c (Wᵀ f)_c` over classes with `mask[c]`, ties to the lowest class.
pub fn fc_predict(feature: &Tensor, head: &Tensor, mask: &[bool]) -> usize {
    let classes = head.cols();
    let f = feature.data();
    let w = head.data();
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for c in (0..classes).filter(|&c| mask[c]) {
        let logit: f64 = f
            .iter()
            .enumerate()
            .map(|(k, v)| v * w[k * classes + c])
            .sum();
        if best.0 == usize::MAX || logit > best.1 {
            best = (c, logit);
        }
    }
    best.0
}

/// Per-class mean of training features taken under the class's own prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct NcmPrototypes {
    pub means: BTreeMap<usize, Tensor>,
}

impl NcmPrototypes {
    pub fn build(
        backbone: &Backbone,
        pool: &PoolState,
        stream: &TaskStream,
    ) -> Result<Self, EvalError> {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (t, entry) in pool.entries.iter().enumerate() {
            for &i in &stream.tasks[t].train_indices {
                let f = backbone
                    .features(
                        &[stream.train.image(i)],
                        &pool.plan,
                        Some(&pool.g_prompt),
                        Some(&entry.prompt),
                    )?
                    .remove(0);
                let slot = sums
                    .entry(stream.train.label(i))
                    .or_insert_with(|| (vec![0.0; f.len()], 0));
                for (s, v) in slot.0.iter_mut().zip(f.data()) {
                    *s += v;
                }
                slot.1 += 1;
            }
        }
        let means = sums
            .into_iter()
            .map(|(c, (s, n))| {
                let d = s.len();
                (
                    c,
                    Tensor::new(&[1, d], s.into_iter().map(|v| v / n as f64).collect()).unwrap(),
                )
            })
            .collect();
        Ok(Self { means })
    }

    /// Class whose prototype has the highest cosine to `feature`.
    pub fn predict(&self, feature: &Tensor) -> Result<usize, EvalError> {
        let mut best: Option<(usize, f64)> = None;
        for (&c, m) in &self.means {
            let s = cosine(feature.data(), m.data())?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best.map(|(c, _)| c).ok_or(EvalError::NoPrototypes)
    }
}

/// Context shared by the classifiers.
#[derive(Debug, Clone, Copy)]
pub struct Model<'m> {
    pub backbone: &'m Backbone,
    pub pool: &'m PoolState,
    pub head: &'m Tensor,
}

pub fn classify_with(
    classifier: Classifier,
    record: &MatchRecord,
    model: Model<'_>,
    prototypes: Option<&NcmPrototypes>,
) -> Result<usize, EvalError> {
    match classifier {
        Classifier::Fc => Ok(fc_predict(
            &record.feature,
            model.head,
            &model.pool.seen_mask(),
        )),
        Classifier::Km => {
            let (t, j) = record.selection.best_key;
            let entry = model.pool.entry(t);
            if !entry.is_class_level() {
                return Err(EvalError::Granularity(Classifier::Km));
            }
            Ok(entry.classes_of_key(j)[0])
        }
        Classifier::Ncm => prototypes
            .ok_or(EvalError::NoPrototypes)?
            .predict(&record.feature),
    }
}

/// Natural predictions over the test samples of every task in the pool.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<MatchRecord>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// FC accuracy per seen task.
    pub task_accuracy: Vec<f64>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        fraction(
            self.predictions
                .iter()
                .zip(&self.labels)
                .filter(|(p, y)| p == y)
                .count(),
            self.labels.len(),
        )
    }

    pub fn matching_rate(&self) -> Result<f64, EvalError> {
        matching_rate(&self.records)
    }
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Runs prompt selection and FC classification on the test split of every
/// task learned so far.
pub fn evaluate(
    model: Model<'_>,
    stream: &TaskStream,
    paradigm: Paradigm,
    top_k: usize,
) -> Result<Evaluation, EvalError> {
    let mask = model.pool.seen_mask();
    let mut out = Evaluation {
        records: Vec::new(),
        labels: Vec::new(),
        predictions: Vec::new(),
        task_accuracy: Vec::new(),
    };
    for t in 0..model.pool.len() {
        let mut hits = 0usize;
        let split = &stream.tasks[t];
        for &i in &split.test_indices {
            let r = select_prompt(
                model.backbone,
                model.pool,
                stream.test.image(i),
                paradigm,
                top_k,
                i,
                Some(t),
            )?;
            let p = fc_predict(&r.feature, model.head, &mask);
            let y = stream.test.label(i);
            hits += usize::from(p == y);
            out.records.push(r);
            out.labels.push(y);
            out.predictions.push(p);
        }
        out.task_accuracy
            .push(fraction(hits, split.test_indices.len()));
    }
    Ok(out)
}

/// Accuracy of one classifier over an evaluation's records.
pub fn classifier_accuracy(
    classifier: Classifier,
    eval: &Evaluation,
    model: Model<'_>,
    prototypes: Option<&NcmPrototypes>,
) -> Result<f64, EvalError> {
    let mut hits = 0usize;
    for (r, &y) in eval.records.iter().zip(&eval.labels) {
        hits += usize::from(classify_with(classifier, r, model, prototypes)? == y);
    }
    Ok(fraction(hits, eval.labels.len()))
}

/// Accuracies of the natural and forced-true-prompt predictions, split by
/// whether the natural selection picked the true prompt. Empty groups are
/// reported as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub acc_false_selected: Option<f64>,
    pub acc_true_selected: Option<f64>,
    pub acc_false_forced_true: Option<f64>,
    pub acc_all_forced_true: f64,
    pub acc_natural: f64,
    pub matching_rate: f64,
    pub n_true_selected: usize,
    pub n_false_selected: usize,
}

impl OracleReport {
    /// `|natural − (n_true·acc_true + n_false·acc_false) / n|`.
    pub fn recombination_error(&self) -> f64 {
        let n = (self.n_true_selected + self.n_false_selected) as f64;
        let t = self.n_true_selected as f64 * self.acc_true_selected.unwrap_or(0.0);
        let f = self.n_false_selected as f64 * self.acc_false_selected.unwrap_or(0.0);
        (self.acc_natural - (t + f) / n).abs()
    }
}

pub fn oracle_analysis(
    model: Model<'_>,
    stream: &TaskStream,
    eval: &Evaluation,
) -> Result<OracleReport, EvalError> {
    if eval.records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mask = model.pool.seen_mask();
    let (mut n_true, mut n_false) = (0usize, 0usize);
    let (mut hit_true, mut hit_false, mut hit_false_forced) = (0usize, 0usize, 0usize);
    for ((r, &y), &p) in eval.records.iter().zip(&eval.labels).zip(&eval.predictions) {
        let truth = r.true_task.ok_or(EvalError::UnknownTask(r.sample_id))?;
        if truth == r.selected() {
            n_true += 1;
            hit_true += usize::from(p == y);
        } else {
            n_false += 1;
            hit_false += usize::from(p == y);
            let f = forced_feature(
                model.backbone,
                model.pool,
                r,
                stream.test.image(r.sample_id),
                truth,
            )?;
            hit_false_forced += usize::from(fc_predict(&f, model.head, &mask) == y);
        }
    }
    let n = n_true + n_false;
    let group = |hits: usize, size: usize| (size > 0).then(|| hits as f64 / size as f64);
    Ok(OracleReport {
        acc_false_selected: group(hit_false, n_false),
        acc_true_selected: group(hit_true, n_true),
        acc_false_forced_true: group(hit_false_forced, n_false),
        acc_all_forced_true: (hit_true + hit_false_forced) as f64 / n as f64,
        acc_natural: (hit_true + hit_false) as f64 / n as f64,
        matching_rate: n_true as f64 / n as f64,
        n_true_selected: n_true,
        n_false_selected: n_false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Inference,
}

/// Backbone passes per training batch or per inference sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub paradigm: Paradigm,
    pub phase: Phase,
    pub pool_size: usize,
    pub forwards: u64,
    pub backwards: u64,
    pub ratio_vs_sqsk: f64,
}

fn forwards(paradigm: Paradigm, phase: Phase, pool_size: usize) -> u64 {
    match (phase, paradigm.multiple_queries()) {
        (Phase::Training, true) => 1,
        (Phase::Training, false) => 2,
        (Phase::Inference, true) => pool_size as u64,
        (Phase::Inference, false) => 2,
    }
}

pub fn cost_model(paradigm: Paradigm, pool_size: usize, phase: Phase) -> CostRecord {
    let f = forwards(paradigm, phase, pool_size);
    CostRecord {
        paradigm,
        phase,
        pool_size,
        forwards: f,
        backwards: u64::from(phase == Phase::Training),
        ratio_vs_sqsk: f as f64 / forwards(Paradigm::Sqsk, phase, pool_size) as f64,
    }
}

/// True task × selected task counts, both 1-based.
pub fn confusion_csv(records: &[MatchRecord], pool_size: usize) -> String {
    let mut counts = vec![vec![0usize; pool_size]; pool_size];
    for r in records {
        if let Some(t) = r.true_task {
            if t < pool_size && r.selected() < pool_size {
                counts[t][r.selected()] += 1;
            }
        }
    }
    let mut out = String::from("true_task");
    for s in 1..=pool_size {
        out.push_str(&format!(",selected_{s}"));
    }
    out.push('\n');
    for (t, row) in counts.iter().enumerate() {
        out.push_str(&(t + 1).to_string());
        for c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::matching::Selection;

    fn record(true_task: usize, selected: usize) -> MatchRecord {
        MatchRecord {
            sample_id: 0,
            true_task: Some(true_task),
            selection: Selection {
                scores: vec![0.0; 3],
                cosines: vec![vec![0.0]; 3],
                selected,
                best_key: (selected, 0),
            },
            feature: Tensor::zeros(&[1, 2]),
            queries: vec![],
        }
    }

    #[test]
    fn hand_example() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 0.80).unwrap();
        m.set(0, 1, 0.70).unwrap();
        m.set(1, 1, 0.90).unwrap();
        assert!((average_accuracy(&m, 2).unwrap() - 0.80).abs() < 1e-15);
        assert!((forgetting(&m, 2).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(average_accuracy(&m, 1).unwrap(), 0.80);
        assert_eq!(forgetting(&m, 1).unwrap(), 0.0);
        assert_eq!(m.to_csv(), "task,after_1,after_2\n1,0.8,0.7\n2,,0.9\n");
    }

    #[test]
    fn incomplete_and_invalid_entries() {
        let mut m = AccuracyMatrix::new(3);
        m.set(0, 0, 0.5).unwrap();
        assert!(matches!(
            average_accuracy(&m, 2),
            Err(EvalError::Incomplete { .. })
        ));
        assert!(matches!(m.set(2, 1, 0.5), Err(EvalError::Index { .. })));
        assert!(matches!(m.set(0, 1, 1.5), Err(EvalError::Range(_))));
        assert!(matches!(m.get(0, 3), Err(EvalError::Index { .. })));
    }

    #[test]
    fn matching_rate_examples() {
        assert_eq!(matching_rate(&[record(0, 0), record(1, 1)]).unwrap(), 1.0);
        assert_eq!(matching_rate(&[record(0, 1), record(1, 0)]).unwrap(), 0.0);
        let four = [record(0, 0), record(1, 1), record(2, 2), record(2, 0)];
        assert_eq!(matching_rate(&four).unwrap(), 0.75);
        assert!(matches!(matching_rate(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn cost_examples() {
        let c = cost_model(Paradigm::Mqmk, 10, Phase::Inference);
        assert_eq!((c.forwards, c.backwards, c.ratio_vs_sqsk), (10, 0, 5.0));
        assert_eq!(
            cost_model(Paradigm::Mqmk, 2, Phase::Inference).ratio_vs_sqsk,
            1.0
        );
        let t = cost_model(Paradigm::Mqmk, 10, Phase::Training);
        assert_eq!((t.forwards, t.backwards), (1, 1));
        let s = cost_model(Paradigm::Sqsk, 10, Phase::Training);
        assert_eq!((s.forwards, s.backwards), (2, 1));
        assert_eq!(cost_model(Paradigm::Sqsk, 7, Phase::Inference).forwards, 2);
    }

    #[test]
    fn fc_respects_mask_and_ties() {
        let f = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let w = Tensor::matrix(2, 3, vec![0.5, 0.9, 0.5, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(fc_predict(&f, &w, &[true, true, true]), 1);
        assert_eq!(fc_predict(&f, &w, &[true, false, true]), 0);
        assert_eq!(fc_predict(&f, &w, &[false, false, true]), 2);
    }

    #[test]
    fn ncm_single_sample_per_class_recovers_itself() {
        let mut means = BTreeMap::new();
        means.insert(3, Tensor::matrix(1, 2, vec![1.0, 0.1]).unwrap());
        means.insert(7, Tensor::matrix(1, 2, vec![-0.2, 1.0]).unwrap());
        let p = NcmPrototypes { means };
        assert_eq!(
            p.predict(&Tensor::matrix(1, 2, vec![1.0, 0.1]).unwrap())
                .unwrap(),
            3
        );
        assert_eq!(
            p.predict(&Tensor::matrix(1, 2, vec![-0.2, 1.0]).unwrap())
                .unwrap(),
            7
        );
    }

    #[test]
    fn confusion_layout() {
        let csv = confusion_csv(&[record(0, 0), record(0, 1), record(1, 1)], 2);
        assert_eq!(csv, "true_task,selected_1,selected_2\n1,1,1\n2,0,1\n");
    }

    fn random_matrix(values: &[f64], n: usize) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new(n);
        let mut it = values.iter();
        for a in 0..n {
            for t in 0..=a {
                m.set(t, a, *it.next().unwrap()).unwrap();
            }
        }
        m
    }

    proptest! {
        #[test]
        fn metrics_match_direct_recomputation(values in prop::collection::vec(0.0f64..=1.0, 15)) {
            let m = random_matrix(&values, 5);
            let grid: Vec<Vec<f64>> = (0..5).map(|t| (0..5).map(|a| if a >= t { m.get(t, a).unwrap() } else { 0.0 }).collect()).collect();
            for learned in 1..=5 {
                let col: f64 = (0..learned).map(|t| grid[t][learned - 1]).sum::<f64>() / learned as f64;
                prop_assert!((average_accuracy(&m, learned).unwrap() - col).abs() <= 1e-15);
                let drop: f64 = (0..learned).map(|t| grid[t][t] - grid[t][learned - 1]).sum::<f64>() / learned as f64;
                prop_assert!((forgetting(&m, learned).unwrap() - drop).abs() <= 1e-15);
            }
        }
    }
}
