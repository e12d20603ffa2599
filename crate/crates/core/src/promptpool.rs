//! The expanding key–value prompt pool.
//!
//! The pool holds one shared g-prompt and, per task, an e-prompt with its
//! keys. Each task owns `N_t` keys; a class maps to key
//! `floor(rank * N_t / |classes_t|)` where `rank` is the class position in the
//! task's class list. `N_t = 1` is the task-level (single key) layout and
//! `N_t = |classes_t|` the class-level (multiple keys) layout.
//!
//! Pool checkpoint layout (`PCLP`, see [`crate::codec`] for framing):
//!
//! ```text
//! u32 D | u32 total_classes | u32 seed_lo | u32 seed_hi
//! u32 g_len | u32 e_len | u32 |g_layers| | g_layers.. | u32 |e_layers| | e_layers..
//! blob "g_prompt" | u32 num_entries
//! per entry: u32 task_id | u32 frozen | u32 |classes| | classes.. | u32 N
//!            | blob "entry{t}.prompt" | blob "entry{t}.keys"
//! ```

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PromptInsertionPlan;
use crate::codec::{CodecError, Reader, Writer};
use crate::data::mix;
use crate::numerics::Tensor;

pub const POOL_MAGIC: &[u8; 4] = b"PCLP";
pub const POOL_VERSION: u32 = 1;

const PROMPT_STREAM: u64 = 0x70_726f6d;
const KEY_STREAM: u64 = 0x6b_6579;
const GPROMPT_STREAM: u64 = 0x67_70;

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("classes {0:?} already belong to an earlier task")]
    OverlappingClasses(Vec<usize>),
    #[error("class {class} is not part of task {task}")]
    ForeignClass { class: usize, task: usize },
    #[error("key granularity {requested} invalid for a task with {classes} classes")]
    Granularity { requested: usize, classes: usize },
    #[error("task has no classes")]
    EmptyTask,
    #[error("class id {class} exceeds total class count {total}")]
    ClassRange { class: usize, total: usize },
    #[error("pool checkpoint: {0}")]
    Codec(#[from] CodecError),
}

/// Number of keys per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyGranularity {
    /// One key per task.
    Task,
    /// One key per class.
    Class,
    /// A fixed number of keys, `1 <= N <= |classes_t|`.
    Fixed(usize),
}

impl KeyGranularity {
    pub fn resolve(self, classes: usize) -> Result<usize, PoolError> {
        let n = match self {
            KeyGranularity::Task => 1,
            KeyGranularity::Class => classes,
            KeyGranularity::Fixed(n) => n,
        };
        if n == 0 || n > classes {
            return Err(PoolError::Granularity {
                requested: n,
                classes,
            });
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    /// 1-based task id.
    pub task_id: usize,
    /// `[H_e, L_e, D]`.
    pub prompt: Tensor,
    /// `[N_t, D]`, one row per key.
    pub keys: Tensor,
    pub class_ids: Vec<usize>,
    pub frozen: bool,
}

impl PromptEntry {
    pub fn num_keys(&self) -> usize {
        self.keys.rows()
    }

    pub fn key(&self, j: usize) -> &[f64] {
        self.keys.row(j)
    }

    pub fn is_class_level(&self) -> bool {
        self.num_keys() == self.class_ids.len()
    }

    pub fn class_to_key(&self, class_id: usize) -> Result<usize, PoolError> {
        let rank =
            self.class_ids
                .iter()
                .position(|&c| c == class_id)
                .ok_or(PoolError::ForeignClass {
                    class: class_id,
                    task: self.task_id,
                })?;
        Ok(rank * self.num_keys() / self.class_ids.len())
    }

    /// Classes mapped to key `j`, in rank order.
    pub fn classes_of_key(&self, j: usize) -> Vec<usize> {
        let n = self.num_keys();
        let total = self.class_ids.len();
        self.class_ids
            .iter()
            .enumerate()
            .filter(|(rank, _)| rank * n / total == j)
            .map(|(_, &c)| c)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub prompt_params: usize,
    pub key_params: usize,
    pub classifier_params: usize,
}

impl ParameterCounts {
    pub fn total(&self) -> usize {
        self.prompt_params + self.key_params + self.classifier_params
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    pub plan: PromptInsertionPlan,
    pub embed_dim: usize,
    /// `[H_g, L_g, D]`.
    pub g_prompt: Tensor,
    pub entries: Vec<PromptEntry>,
    pub total_classes: usize,
    pub seed: u64,
}

fn init_uniform(shape: &[usize], d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0 / (d as f64).sqrt(), &mut rng)
}

impl PoolState {
    pub fn new(
        plan: PromptInsertionPlan,
        embed_dim: usize,
        total_classes: usize,
        seed: u64,
    ) -> Self {
        let g_prompt = init_uniform(
            &plan.g_shape(embed_dim),
            embed_dim,
            mix(seed, 0, GPROMPT_STREAM),
        );
        Self {
            plan,
            embed_dim,
            g_prompt,
            entries: Vec::new(),
            total_classes,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> &PromptEntry {
        &self.entries[index]
    }

    /// Classes of every task in the pool.
    pub fn seen_classes(&self) -> BTreeSet<usize> {
        self.entries
            .iter()
            .flat_map(|e| e.class_ids.iter().copied())
            .collect()
    }

    /// Column mask over all classes marking those seen so far.
    pub fn seen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total_classes];
        for c in self.seen_classes() {
            mask[c] = true;
        }
        mask
    }

    /// Appends a task with fresh prompt and keys and freezes all earlier entries.
    pub fn expand(
        &mut self,
        task_classes: &[usize],
        granularity: KeyGranularity,
    ) -> Result<&PromptEntry, PoolError> {
        if task_classes.is_empty() {
            return Err(PoolError::EmptyTask);
        }
        if let Some(&c) = task_classes.iter().find(|&&c| c >= self.total_classes) {
            return Err(PoolError::ClassRange {
                class: c,
                total: self.total_classes,
            });
        }
        let seen = self.seen_classes();
        let mut local = BTreeSet::new();
        let overlap: Vec<usize> = task_classes
            .iter()
            .copied()
            .filter(|c| seen.contains(c) || !local.insert(*c))
            .collect();
        if !overlap.is_empty() {
            return Err(PoolError::OverlappingClasses(overlap));
        }
        let n = granularity.resolve(task_classes.len())?;
        let task_id = self.entries.len() + 1;
        let d = self.embed_dim;
        let prompt = init_uniform(
            &self.plan.e_shape(d),
            d,
            mix(self.seed, task_id as u64, PROMPT_STREAM),
        );
        let mut keys = Vec::with_capacity(n * d);
        for j in 0..n {
            let k = init_uniform(
                &[d],
                d,
                mix(self.seed, task_id as u64, KEY_STREAM + 1 + j as u64),
            );
            keys.extend_from_slice(k.data());
        }
        for e in &mut self.entries {
            e.frozen = true;
        }
        self.entries.push(PromptEntry {
            task_id,
            prompt,
            keys: Tensor::new(&[n, d], keys).expect("key shape"),
            class_ids: task_classes.to_vec(),
            frozen: false,
        });
        Ok(self.entries.last().unwrap())
    }

    /// Trainable scalar counts for prompts, keys and the classifier head.
    pub fn parameter_counts(&self) -> ParameterCounts {
        let d = self.embed_dim;
        let p = &self.plan;
        ParameterCounts {
            prompt_params: p.g_length * p.g_depth() * d + self.len() * p.e_length * p.e_depth() * d,
            key_params: self.entries.iter().map(|e| e.num_keys() * d).sum(),
            classifier_params: d * self.total_classes,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(POOL_MAGIC, POOL_VERSION);
        w.u32(self.embed_dim as u32)
            .u32(self.total_classes as u32)
            .u32(self.seed as u32)
            .u32((self.seed >> 32) as u32)
            .u32(self.plan.g_length as u32)
            .u32(self.plan.e_length as u32);
        for layers in [&self.plan.g_layers, &self.plan.e_layers] {
            w.u32(layers.len() as u32);
            for &l in layers {
                w.u32(l as u32);
            }
        }
        w.blob("g_prompt", &self.g_prompt);
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.u32(e.task_id as u32)
                .u32(e.frozen as u32)
                .u32(e.class_ids.len() as u32);
            for &c in &e.class_ids {
                w.u32(c as u32);
            }
            w.u32(e.num_keys() as u32);
            w.blob(&format!("entry{}.prompt", e.task_id), &e.prompt);
            w.blob(&format!("entry{}.keys", e.task_id), &e.keys);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PoolError> {
        let mut r = Reader::open(bytes, POOL_MAGIC, POOL_VERSION)?;
        let embed_dim = r.u32("embed_dim")? as usize;
        let total_classes = r.u32("total_classes")? as usize;
        let seed = r.u32("seed")? as u64 | (r.u32("seed")? as u64) << 32;
        let g_length = r.u32("g_length")? as usize;
        let e_length = r.u32("e_length")? as usize;
        let layer_list = |r: &mut Reader| -> Result<Vec<usize>, CodecError> {
            let n = r.u32("layer count")? as usize;
            (0..n).map(|_| r.u32("layer").map(|v| v as usize)).collect()
        };
        let g_layers = layer_list(&mut r)?;
        let e_layers = layer_list(&mut r)?;
        let plan = PromptInsertionPlan {
            g_layers,
            e_layers,
            g_length,
            e_length,
        };
        let corrupt = |r: &Reader, detail: String| {
            PoolError::Codec(CodecError::Corrupt {
                offset: r.offset(),
                detail,
            })
        };
        let g_prompt = r.blob("g_prompt")?;
        if g_prompt.shape() != plan.g_shape(embed_dim) {
            return Err(corrupt(
                &r,
                format!("g_prompt shape {:?}", g_prompt.shape()),
            ));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let task_id = r.u32("task id")? as usize;
            if task_id != i + 1 {
                return Err(corrupt(&r, format!("entry {i} has task id {task_id}")));
            }
            let frozen = match r.u32("frozen flag")? {
                0 => false,
                1 => true,
                v => return Err(corrupt(&r, format!("frozen flag {v}"))),
            };
            let nc = r.u32("class count")? as usize;
            let class_ids = (0..nc)
                .map(|_| r.u32("class id").map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = r.u32("key count")? as usize;
            let prompt = r.blob(&format!("entry{task_id}.prompt"))?;
            let keys = r.blob(&format!("entry{task_id}.keys"))?;
            if prompt.shape() != plan.e_shape(embed_dim) || keys.shape() != [n, embed_dim] {
                return Err(corrupt(
                    &r,
                    format!(
                        "entry {task_id} shapes prompt {:?} keys {:?}",
                        prompt.shape(),
                        keys.shape()
                    ),
                ));
            }
            if n == 0 || n > nc || class_ids.iter().any(|&c| c >= total_classes) {
                return Err(corrupt(&r, format!("entry {task_id} class map invalid")));
            }
            entries.push(PromptEntry {
                task_id,
                prompt,
                keys,
                class_ids,
                frozen,
            });
        }
        r.finish()?;
        Ok(Self {
            plan,
            embed_dim,
            g_prompt,
            entries,
            total_classes,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pool(d: usize, total: usize) -> PoolState {
        PoolState::new(PromptInsertionPlan::default(), d, total, 17)
    }

    #[test]
    fn expand_appends_and_freezes() {
        let mut p = pool(8, 12);
        let e = p.expand(&[0, 1, 2, 3], KeyGranularity::Class).unwrap();
        assert_eq!(e.num_keys(), 4);
        assert_eq!(e.task_id, 1);
        assert!(!e.frozen);
        p.expand(&[4, 5, 6, 7], KeyGranularity::Task).unwrap();
        assert!(p.entries[0].frozen);
        assert!(!p.entries[1].frozen);
        assert_eq!(p.entries[1].num_keys(), 1);

        assert!(matches!(
            p.expand(&[7, 8], KeyGranularity::Class),
            Err(PoolError::OverlappingClasses(v)) if v == vec![7]
        ));
        assert!(matches!(
            p.expand(&[8, 8], KeyGranularity::Class),
            Err(PoolError::OverlappingClasses(_))
        ));
        assert!(matches!(
            p.expand(&[8, 9], KeyGranularity::Fixed(3)),
            Err(PoolError::Granularity { .. })
        ));
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn class_to_key_floor_partition() {
        let mut p = pool(4, 40);
        let classes: Vec<usize> = (20..40).rev().collect();
        let e = p
            .expand(&classes, KeyGranularity::Fixed(4))
            .unwrap()
            .clone();
        // Evaluate floor(rank * 4 / 20) for every rank.
        for (rank, &c) in classes.iter().enumerate() {
            let expected = match rank {
                0..=4 => 0,
                5..=9 => 1,
                10..=14 => 2,
                _ => 3,
            };
            assert_eq!(e.class_to_key(c).unwrap(), expected);
        }
        assert_eq!(e.classes_of_key(1), classes[5..10].to_vec());
        assert!(matches!(
            e.class_to_key(3),
            Err(PoolError::ForeignClass { .. })
        ));

        let mk = p.expand(&[0, 5, 9], KeyGranularity::Class).unwrap();
        assert_eq!(mk.class_to_key(0).unwrap(), 0);
        assert_eq!(mk.class_to_key(5).unwrap(), 1);
        assert_eq!(mk.class_to_key(9).unwrap(), 2);
        let sk = p.expand(&[1, 2, 3], KeyGranularity::Task).unwrap();
        assert!([1, 2, 3].iter().all(|&c| sk.class_to_key(c).unwrap() == 0));
    }

    #[test]
    fn keys_are_small_and_seeded() {
        let mut a = pool(16, 8);
        let mut b = pool(16, 8);
        a.expand(&[0, 1], KeyGranularity::Class).unwrap();
        b.expand(&[0, 1], KeyGranularity::Class).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 4.0;
        assert!(a.entries[0].keys.data().iter().all(|v| v.abs() <= bound));
        assert_ne!(a.entries[0].key(0), a.entries[0].key(1));
    }

    #[test]
    fn parameter_counts_match_formulas() {
        let plan = PromptInsertionPlan {
            g_layers: vec![0, 1],
            e_layers: vec![0, 1, 2],
            g_length: 5,
            e_length: 4,
        };
        let d = 768;
        let mut sk = PoolState::new(plan.clone(), d, 100, 0);
        let mut mk = PoolState::new(plan, d, 100, 0);
        for t in 0..10 {
            let classes: Vec<usize> = (t * 10..t * 10 + 10).collect();
            sk.expand(&classes, KeyGranularity::Task).unwrap();
            mk.expand(&classes, KeyGranularity::Class).unwrap();
        }
        let (a, b) = (sk.parameter_counts(), mk.parameter_counts());
        assert_eq!(a.key_params, 7_680);
        assert_eq!(b.key_params, 76_800);
        assert_eq!(b.key_params - a.key_params, 69_120);
        assert_eq!(a.prompt_params, 5 * 2 * d + 10 * 4 * 3 * d);
        assert_eq!(a.prompt_params, b.prompt_params);
        assert_eq!(a.classifier_params, d * 100);

        // Exhaustive element count.
        let enumerated: usize =
            mk.g_prompt.len() + mk.entries.iter().map(|e| e.prompt.len()).sum::<usize>();
        assert_eq!(enumerated, b.prompt_params);
        let keys: usize = mk.entries.iter().map(|e| e.keys.len()).sum();
        assert_eq!(keys, b.key_params);
    }

    #[test]
    fn checkpoint_detects_truncation_and_tampering() {
        let mut p = pool(8, 12);
        p.expand(&[3, 1, 2], KeyGranularity::Class).unwrap();
        p.expand(&[0, 4, 5], KeyGranularity::Fixed(2)).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(PoolState::from_bytes(&bytes).unwrap(), p);
        assert!(matches!(
            PoolState::from_bytes(&bytes[..bytes.len() - 1]),
            Err(PoolError::Codec(_))
        ));
        let mut tampered = bytes.clone();
        tampered[40] ^= 0x10;
        assert!(matches!(
            PoolState::from_bytes(&tampered),
            Err(PoolError::Codec(CodecError::Checksum { .. }))
        ));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip(
            seed in 0u64..u64::MAX,
            sizes in prop::collection::vec(1usize..5, 1..4),
            frozen_last in any::<bool>(),
        ) {
            let total: usize = sizes.iter().sum();
            let mut p = PoolState::new(PromptInsertionPlan::default(), 4, total, seed);
            let mut next = 0;
            for (i, &s) in sizes.iter().enumerate() {
                let classes: Vec<usize> = (next..next + s).collect();
                next += s;
                let g = if i % 2 == 0 { KeyGranularity::Class } else { KeyGranularity::Task };
                p.expand(&classes, g).unwrap();
            }
            p.entries.last_mut().unwrap().frozen = frozen_last;
            let back = PoolState::from_bytes(&p.to_bytes()).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn class_level_mapping_is_injective(n in 1usize..40) {
            let mut p = PoolState::new(PromptInsertionPlan::default(), 4, n, 0);
            let classes: Vec<usize> = (0..n).rev().collect();
            let e = p.expand(&classes, KeyGranularity::Class).unwrap();
            let keys: BTreeSet<usize> = classes.iter().map(|&c| e.class_to_key(c).unwrap()).collect();
            prop_assert_eq!(keys.len(), n);
        }

        #[test]
        fn floor_mapping_is_surjective(classes in 1usize..30, frac in 0.0f64..1.0) {
            let n = 1 + ((classes - 1) as f64 * frac) as usize;
            let mut p = PoolState::new(PromptInsertionPlan::default(), 4, classes, 0);
            let ids: Vec<usize> = (0..classes).collect();
            let e = p.expand(&ids, KeyGranularity::Fixed(n)).unwrap();
            let keys: BTreeSet<usize> = ids.iter().map(|&c| e.class_to_key(c).unwrap()).collect();
            prop_assert_eq!(keys, (0..n).collect::<BTreeSet<_>>());
        }
    }
}
