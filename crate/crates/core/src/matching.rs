//! Query construction and prompt selection.
//!
//! A single query (SQ) is the promptless `[class]` feature. Multiple queries
//! (MQ) run one prompted forward per pool entry, `Q_t = f(P_g; P_t; x)[0]`.
//! Task `t` is scored by the sum of its `K` largest cosines between its query
//! and its keys (SQ reuses the one query for every task), and the selected
//! prompt is the highest-scoring task with ties going to the lowest index.
//! Queries are only ever scored against the keys of their own task.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneError, PromptInsertionPlan};
use crate::numerics::{argmax, cosine, NumericsError, Tensor};
use crate::promptpool::{PoolState, PromptEntry};

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("prompt pool is empty")]
    EmptyPool,
    #[error("top-K of {k} out of range for a task with {keys} keys")]
    TopK { k: usize, keys: usize },
    #[error(
        "{paradigm} needs {expected} keys but task {task} has {found} key(s) for {classes} classes"
    )]
    Granularity {
        paradigm: Paradigm,
        expected: &'static str,
        task: usize,
        found: usize,
        classes: usize,
    },
    #[error("query count {queries} does not match pool size {pool}")]
    QueryCount { queries: usize, pool: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Paradigm {
    #[serde(rename = "SQSK")]
    Sqsk,
    #[serde(rename = "SQMK")]
    Sqmk,
    #[serde(rename = "MQSK")]
    Mqsk,
    #[serde(rename = "MQMK")]
    Mqmk,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [
        Paradigm::Sqsk,
        Paradigm::Sqmk,
        Paradigm::Mqsk,
        Paradigm::Mqmk,
    ];

    pub fn multiple_queries(self) -> bool {
        matches!(self, Paradigm::Mqsk | Paradigm::Mqmk)
    }

    pub fn multiple_keys(self) -> bool {
        matches!(self, Paradigm::Sqmk | Paradigm::Mqmk)
    }

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Sqsk => "SQSK",
            Paradigm::Sqmk => "SQMK",
            Paradigm::Mqsk => "MQSK",
            Paradigm::Mqmk => "MQMK",
        }
    }

    /// Checks that every pool entry has keys of the granularity this paradigm
    /// assumes: single key per task for SK, more than one key for MK (unless
    /// the task has a single class).
    pub fn check_pool(self, pool: &PoolState) -> Result<(), MatchError> {
        for e in &pool.entries {
            let ok = if self.multiple_keys() {
                e.num_keys() > 1 || e.class_ids.len() == 1
            } else {
                e.num_keys() == 1
            };
            if !ok {
                return Err(MatchError::Granularity {
                    paradigm: self,
                    expected: if self.multiple_keys() {
                        "multiple"
                    } else {
                        "a single"
                    },
                    task: e.task_id,
                    found: e.num_keys(),
                    classes: e.class_ids.len(),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "SQSK" => Ok(Paradigm::Sqsk),
            "SQMK" => Ok(Paradigm::Sqmk),
            "MQSK" => Ok(Paradigm::Mqsk),
            "MQMK" => Ok(Paradigm::Mqmk),
            other => Err(format!("unknown paradigm {other:?}")),
        }
    }
}

/// Promptless `[class]` feature.
pub fn single_query(backbone: &Backbone, image: &[f32]) -> Result<Tensor, MatchError> {
    let mut out = backbone.features(&[image], &PromptInsertionPlan::none(), None, None)?;
    Ok(out.pop().expect("one feature"))
}

fn prompted_query(
    backbone: &Backbone,
    pool: &PoolState,
    entry: &PromptEntry,
    image: &[f32],
) -> Result<Tensor, MatchError> {
    let mut out = backbone.features(
        &[image],
        &pool.plan,
        Some(&pool.g_prompt),
        Some(&entry.prompt),
    )?;
    Ok(out.pop().expect("one feature"))
}

/// One prompted query per pool entry, evaluated in pool order.
pub fn multi_query(
    backbone: &Backbone,
    pool: &PoolState,
    image: &[f32],
) -> Result<Vec<Tensor>, MatchError> {
    if pool.is_empty() {
        return Err(MatchError::EmptyPool);
    }
    pool.entries
        .iter()
        .map(|e| prompted_query(backbone, pool, e, image))
        .collect()
}

/// [`multi_query`] with the per-entry forwards run concurrently. The
/// queries do not interact, so the result is identical.
pub fn multi_query_par(
    backbone: &Backbone,
    pool: &PoolState,
    image: &[f32],
) -> Result<Vec<Tensor>, MatchError> {
    if pool.is_empty() {
        return Err(MatchError::EmptyPool);
    }
    pool.entries
        .par_iter()
        .map(|e| prompted_query(backbone, pool, e, image))
        .collect()
}

/// Cosines of `query` against every key row.
pub fn key_cosines(query: &[f64], keys: &Tensor) -> Result<Vec<f64>, MatchError> {
    (0..keys.rows())
        .map(|j| cosine(query, keys.row(j)).map_err(Into::into))
        .collect()
}

/// Sum of the `k` largest values.
pub fn top_k_sum(cosines: &[f64], k: usize) -> Result<f64, MatchError> {
    if k == 0 || k > cosines.len() {
        return Err(MatchError::TopK {
            k,
            keys: cosines.len(),
        });
    }
    let mut sorted = cosines.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().sum())
}

/// Aggregated matching score of one query against one task's keys.
pub fn aggregate_score(query: &[f64], keys: &Tensor, k: usize) -> Result<f64, MatchError> {
    top_k_sum(&key_cosines(query, keys)?, k)
}

/// Queries available to the selector.
#[derive(Debug, Clone, Copy)]
pub enum Queries<'q> {
    Single(&'q Tensor),
    Multiple(&'q [Tensor]),
}

/// Scores and selection, before any classification feature is computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Aggregated score per task.
    pub scores: Vec<f64>,
    /// Per task, cosine of the task's query against each of its keys.
    pub cosines: Vec<Vec<f64>>,
    /// Selected pool index (0-based).
    pub selected: usize,
    /// `(task, key)` with the highest single cosine over the pool.
    pub best_key: (usize, usize),
}

pub fn select(pool: &PoolState, queries: Queries<'_>, k: usize) -> Result<Selection, MatchError> {
    if pool.is_empty() {
        return Err(MatchError::EmptyPool);
    }
    if let Queries::Multiple(qs) = queries {
        if qs.len() != pool.len() {
            return Err(MatchError::QueryCount {
                queries: qs.len(),
                pool: pool.len(),
            });
        }
    }
    let mut scores = Vec::with_capacity(pool.len());
    let mut cosines = Vec::with_capacity(pool.len());
    let mut best_key = (0, 0);
    let mut best_cos = f64::NEG_INFINITY;
    for (t, entry) in pool.entries.iter().enumerate() {
        let q = match queries {
            Queries::Single(q) => q,
            Queries::Multiple(qs) => &qs[t],
        };
        let cs = key_cosines(q.data(), &entry.keys)?;
        scores.push(top_k_sum(&cs, k)?);
        for (j, &c) in cs.iter().enumerate() {
            if c > best_cos {
                best_cos = c;
                best_key = (t, j);
            }
        }
        cosines.push(cs);
    }
    Ok(Selection {
        selected: argmax(&scores),
        scores,
        cosines,
        best_key,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub sample_id: usize,
    pub true_task: Option<usize>,
    pub selection: Selection,
    /// Feature used for classification, `[1, D]`: `Q_I` for MQ paradigms, a
    /// fresh forward with `P_I` for SQ paradigms.
    pub feature: Tensor,
    /// The promptless query (SQ) or the whole query pool (MQ).
    pub queries: Vec<Tensor>,
}

impl MatchRecord {
    pub fn selected(&self) -> usize {
        self.selection.selected
    }

    pub fn scores(&self) -> &[f64] {
        &self.selection.scores
    }

    pub fn is_true_prompt(&self) -> bool {
        self.true_task == Some(self.selection.selected)
    }
}

/// Selects a prompt for one image and returns its classification feature.
#[allow(clippy::too_many_arguments)]
pub fn select_prompt(
    backbone: &Backbone,
    pool: &PoolState,
    image: &[f32],
    paradigm: Paradigm,
    k: usize,
    sample_id: usize,
    true_task: Option<usize>,
) -> Result<MatchRecord, MatchError> {
    if pool.is_empty() {
        return Err(MatchError::EmptyPool);
    }
    paradigm.check_pool(pool)?;
    if paradigm.multiple_queries() {
        let queries = multi_query(backbone, pool, image)?;
        let selection = select(pool, Queries::Multiple(&queries), k)?;
        let feature = queries[selection.selected].clone();
        Ok(MatchRecord {
            sample_id,
            true_task,
            selection,
            feature,
            queries,
        })
    } else {
        let query = single_query(backbone, image)?;
        let selection = select(pool, Queries::Single(&query), k)?;
        let feature = prompted_query(backbone, pool, &pool.entries[selection.selected], image)?;
        Ok(MatchRecord {
            sample_id,
            true_task,
            selection,
            feature,
            queries: vec![query],
        })
    }
}

/// Feature obtained when `task`'s prompt is forced, reusing the stored query
/// pool when it already contains it.
pub fn forced_feature(
    backbone: &Backbone,
    pool: &PoolState,
    record: &MatchRecord,
    image: &[f32],
    task: usize,
) -> Result<Tensor, MatchError> {
    if task == record.selected() {
        return Ok(record.feature.clone());
    }
    if record.queries.len() == pool.len() && pool.len() > 1 {
        return Ok(record.queries[task].clone());
    }
    prompted_query(backbone, pool, &pool.entries[task], image)
}

/// `sample_id,true_task,selected_task,S_1..S_M`, tasks 1-based.
pub fn records_csv(records: &[MatchRecord]) -> String {
    let m = records.iter().map(|r| r.scores().len()).max().unwrap_or(0);
    let mut out = String::from("sample_id,true_task,selected_task");
    for t in 1..=m {
        out.push_str(&format!(",S_{t}"));
    }
    out.push('\n');
    for r in records {
        let truth = r.true_task.map(|t| (t + 1).to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}", r.sample_id, truth, r.selected() + 1));
        for s in r.scores() {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::backbone::{BackboneConfig, PromptInsertionPlan};
    use crate::promptpool::KeyGranularity;

    fn tiny() -> (Backbone, PromptInsertionPlan) {
        let cfg = BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
        };
        let plan = PromptInsertionPlan {
            g_layers: vec![0],
            e_layers: vec![0, 1],
            g_length: 2,
            e_length: 3,
        };
        (Backbone::new(cfg, 4).unwrap(), plan)
    }

    fn image(seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..64).map(|_| rng.gen()).collect()
    }

    #[test]
    fn aggregate_score_examples() {
        let cs = [0.2, 0.9, 0.5];
        assert_eq!(top_k_sum(&cs, 1).unwrap(), 0.9);
        assert!((top_k_sum(&cs, 2).unwrap() - 1.4).abs() < 1e-15);
        assert!((top_k_sum(&cs, 3).unwrap() - cs.iter().sum::<f64>()).abs() < 1e-15);
        assert!(matches!(top_k_sum(&cs, 0), Err(MatchError::TopK { .. })));
        assert!(matches!(top_k_sum(&cs, 4), Err(MatchError::TopK { .. })));

        let q = [1.0, 0.0];
        let keys = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        assert_eq!(aggregate_score(&q, &keys, 1).unwrap(), 1.0);
        assert_eq!(aggregate_score(&q, &keys, 3).unwrap(), 0.0);
    }

    #[test]
    fn single_query_is_the_promptless_forward() {
        let (bb, plan) = tiny();
        let img = image(1);
        let q = single_query(&bb, &img).unwrap();
        let empty = PromptInsertionPlan {
            g_length: 0,
            e_length: 0,
            ..plan.clone()
        };
        let gp = Tensor::zeros(&empty.g_shape(8));
        let ep = Tensor::zeros(&empty.e_shape(8));
        let direct = bb.features(&[&img], &empty, Some(&gp), Some(&ep)).unwrap();
        assert_eq!(q, direct[0]);
        assert_eq!(single_query(&bb, &img).unwrap(), q);
        for s in 0..100 {
            assert!(single_query(&bb, &image(100 + s)).unwrap().norm() > 0.0);
        }
    }

    #[test]
    fn multi_query_matches_direct_forwards_in_any_order() {
        let (bb, plan) = tiny();
        let mut pool = PoolState::new(plan.clone(), 8, 6, 3);
        pool.expand(&[0, 1], KeyGranularity::Class).unwrap();
        let img = image(2);
        let qs = multi_query(&bb, &pool, &img).unwrap();
        let direct = bb
            .features(
                &[&img],
                &plan,
                Some(&pool.g_prompt),
                Some(&pool.entries[0].prompt),
            )
            .unwrap();
        assert_eq!(qs, direct);

        pool.expand(&[2, 3], KeyGranularity::Class).unwrap();
        pool.expand(&[4, 5], KeyGranularity::Class).unwrap();
        let qs = multi_query(&bb, &pool, &img).unwrap();
        assert_eq!(multi_query_par(&bb, &pool, &img).unwrap(), qs);
        let mut reversed: Vec<Tensor> = pool
            .entries
            .iter()
            .rev()
            .map(|e| prompted_query(&bb, &pool, e, &img).unwrap())
            .collect();
        reversed.reverse();
        assert_eq!(reversed, qs);
        assert_ne!(qs[0], qs[1]);
        assert_ne!(qs[0], single_query(&bb, &img).unwrap());
    }

    #[test]
    fn single_entry_pool_always_selects_it() {
        let (bb, plan) = tiny();
        let mut pool = PoolState::new(plan, 8, 4, 3);
        pool.expand(&[0, 1], KeyGranularity::Class).unwrap();
        for p in [Paradigm::Sqmk, Paradigm::Mqmk] {
            let r = select_prompt(&bb, &pool, &image(3), p, 1, 0, Some(0)).unwrap();
            assert_eq!(r.selected(), 0);
            assert!(r.is_true_prompt());
        }
        let mut sk = PoolState::new(pool.plan.clone(), 8, 4, 3);
        sk.expand(&[0, 1], KeyGranularity::Task).unwrap();
        for p in [Paradigm::Sqsk, Paradigm::Mqsk] {
            assert_eq!(
                select_prompt(&bb, &sk, &image(3), p, 1, 0, None)
                    .unwrap()
                    .selected(),
                0
            );
        }
    }

    #[test]
    fn exact_key_match_dominates() {
        let (bb, plan) = tiny();
        let mut pool = PoolState::new(plan, 8, 6, 3);
        for classes in [[0, 1], [2, 3], [4, 5]] {
            pool.expand(&classes, KeyGranularity::Class).unwrap();
        }
        let img = image(7);
        let q = single_query(&bb, &img).unwrap();
        pool.entries[1].keys.data_mut()[8..16].copy_from_slice(q.data());
        let r = select_prompt(&bb, &pool, &img, Paradigm::Sqmk, 1, 0, Some(1)).unwrap();
        assert_eq!(r.selected(), 1);
        assert_eq!(r.selection.best_key, (1, 1));

        let qs = multi_query(&bb, &pool, &img).unwrap();
        pool.entries[2].keys.data_mut()[..8].copy_from_slice(qs[2].data());
        let r = select_prompt(&bb, &pool, &img, Paradigm::Mqmk, 1, 0, Some(2)).unwrap();
        assert_eq!(r.selected(), 2);
        assert_eq!(r.feature, qs[2]);
    }

    #[test]
    fn paradigm_granularity_mismatch_is_rejected() {
        let (bb, plan) = tiny();
        let mut sk = PoolState::new(plan.clone(), 8, 4, 3);
        sk.expand(&[0, 1], KeyGranularity::Task).unwrap();
        assert!(matches!(
            select_prompt(&bb, &sk, &image(0), Paradigm::Mqmk, 1, 0, None),
            Err(MatchError::Granularity { .. })
        ));
        let mut mk = PoolState::new(plan, 8, 4, 3);
        mk.expand(&[0, 1], KeyGranularity::Class).unwrap();
        assert!(matches!(
            select_prompt(&bb, &mk, &image(0), Paradigm::Sqsk, 1, 0, None),
            Err(MatchError::Granularity { .. })
        ));
        let empty = PoolState::new(mk.plan.clone(), 8, 4, 3);
        assert!(matches!(
            select_prompt(&bb, &empty, &image(0), Paradigm::Mqmk, 1, 0, None),
            Err(MatchError::EmptyPool)
        ));
    }

    #[test]
    fn csv_layout() {
        let rec = MatchRecord {
            sample_id: 4,
            true_task: Some(1),
            selection: Selection {
                scores: vec![0.5, 0.75],
                cosines: vec![vec![0.5], vec![0.75]],
                selected: 1,
                best_key: (1, 0),
            },
            feature: Tensor::zeros(&[1, 2]),
            queries: vec![],
        };
        assert_eq!(
            records_csv(&[rec]),
            "sample_id,true_task,selected_task,S_1,S_2\n4,2,2,0.5,0.75\n"
        );
    }

    fn random_pool(rng: &mut ChaCha8Rng, d: usize) -> PoolState {
        let tasks = rng.gen_range(1..6);
        let per = rng.gen_range(1..5);
        let plan = PromptInsertionPlan {
            g_layers: vec![],
            e_layers: vec![],
            g_length: 0,
            e_length: 0,
        };
        let mut pool = PoolState::new(plan, d, tasks * per, rng.gen());
        for t in 0..tasks {
            let classes: Vec<usize> = (t * per..(t + 1) * per).collect();
            pool.expand(&classes, KeyGranularity::Class).unwrap();
        }
        pool
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(seed in 0u64..500, a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            let pool = random_pool(&mut rng, d);
            let qs: Vec<Tensor> = (0..pool.len()).map(|_| Tensor::uniform(&[1, d], 1.0, &mut rng)).collect();
            let base = select(&pool, Queries::Multiple(&qs), 1).unwrap();

            let scaled_q: Vec<Tensor> = qs.iter().map(|q| {
                Tensor::new(q.shape(), q.data().iter().map(|v| v * a).collect()).unwrap()
            }).collect();
            let mut scaled_pool = pool.clone();
            let t = rng.gen_range(0..pool.len());
            for v in scaled_pool.entries[t].keys.data_mut() {
                *v *= b;
            }
            let other = select(&scaled_pool, Queries::Multiple(&scaled_q), 1).unwrap();
            prop_assert_eq!(base.selected, other.selected);

            let single = select(&pool, Queries::Single(&qs[0]), 1).unwrap();
            let single_scaled = select(&scaled_pool, Queries::Single(&scaled_q[0]), 1).unwrap();
            prop_assert_eq!(single.selected, single_scaled.selected);
        }
    }
}
