//! Synthetic class-incremental benchmarks.
//!
//! Each class is a sinusoidal grating with its own frequency, orientation,
//! phase and per-channel color offset. Samples add seeded Gaussian noise and
//! are clamped to `[0, 1]`. Pixels are stored as `f32` so the in-memory set
//! and the on-disk format agree bit for bit.
//!
//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! "PCLD" | u32 version=1 | u32 num_samples | u32 channels | u32 height
//!        | u32 width | u32 num_classes | num_samples x u32 label
//!        | num_samples*C*H*W x f32 pixel (row-major, channel-first)
//! ```

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const DATASET_MAGIC: &[u8; 4] = b"PCLD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{num_classes} classes cannot be split evenly into {tasks} tasks")]
    IndivisibleClasses { num_classes: usize, tasks: usize },
    #[error("dataset format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("task stream invariant violated: {0}")]
    Stream(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Visual parameters of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPattern {
    /// Cycles across the image width.
    pub frequency: f64,
    /// Radians.
    pub orientation: f64,
    pub phase: f64,
    pub amplitude: f64,
    /// Mean intensity per channel.
    pub color: Vec<f64>,
}

impl ClassPattern {
    /// Pattern of a global class id, drawn from an RNG seeded by
    /// `(pattern_seed, class_id)` so any class can be generated independently.
    pub fn for_class(pattern_seed: u64, class_id: u32, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(pattern_seed, class_id as u64, 0x5eed));
        Self {
            frequency: rng.gen_range(0.75..3.5),
            orientation: rng.gen_range(0.0..PI),
            phase: rng.gen_range(0.0..2.0 * PI),
            amplitude: rng.gen_range(0.15..0.35),
            color: (0..channels).map(|_| rng.gen_range(0.25..0.75)).collect(),
        }
    }

    /// Noise-free image, channel-first.
    pub fn render(&self, channels: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(channels * size * size);
        let (s, c) = self.orientation.sin_cos();
        for ch in 0..channels {
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 + 0.5) / size as f64;
                    let v = (y as f64 + 0.5) / size as f64;
                    let wave = (2.0 * PI * self.frequency * (u * c + v * s) + self.phase).sin();
                    out.push(self.color[ch] + self.amplitude * wave);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Global id of local label 0. Pattern identity follows the global id, so
    /// two specs with disjoint id ranges describe disjoint classes.
    pub class_offset: u32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patterns: Vec<ClassPattern>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Spec whose patterns derive from `pattern_seed` and global class ids
    /// `class_offset..class_offset + num_classes`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_family(
        pattern_seed: u64,
        class_offset: u32,
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        image_size: usize,
        channels: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let patterns = (0..num_classes as u32)
            .map(|i| ClassPattern::for_class(pattern_seed, class_offset + i, channels))
            .collect();
        Self {
            num_classes,
            class_offset,
            train_per_class,
            test_per_class,
            image_size,
            channels,
            patterns,
            noise_sigma,
            seed,
        }
    }

    pub fn global_ids(&self) -> std::ops::Range<u32> {
        self.class_offset..self.class_offset + self.num_classes as u32
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_classes == 0 {
            return bad("zero classes".into());
        }
        if self.image_size == 0 || self.channels == 0 {
            return bad(format!(
                "image {}x{} with {} channels",
                self.image_size, self.image_size, self.channels
            ));
        }
        if self.train_per_class == 0 {
            return bad("zero training samples per class".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        if self.patterns.len() != self.num_classes {
            return bad(format!(
                "{} patterns for {} classes",
                self.patterns.len(),
                self.num_classes
            ));
        }
        for (i, p) in self.patterns.iter().enumerate() {
            if p.color.len() != self.channels {
                return bad(format!("class {i} has {} color channels", p.color.len()));
            }
            if self.patterns[..i].contains(p) {
                return bad(format!("class {i} duplicates an earlier pattern"));
            }
        }
        Ok(())
    }
}

/// A labeled image set sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<u32>,
    pub pixels: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.labels.len() + self.pixels.len()));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            self.labels.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let fmt = |offset: usize, detail: String| DataError::Format { offset, detail };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(
                bytes.len(),
                format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
            ));
        }
        for (i, (&got, &want)) in bytes[..4].iter().zip(DATASET_MAGIC).enumerate() {
            if got != want {
                return Err(fmt(
                    i,
                    format!("bad magic byte 0x{got:02x}, expected 0x{want:02x}"),
                ));
            }
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != DATASET_VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let n = word(1) as usize;
        let (channels, height, width) = (word(2) as usize, word(3) as usize, word(4) as usize);
        let num_classes = word(5) as usize;
        let sample_len = channels * height * width;
        let expected = n
            .checked_mul(sample_len)
            .and_then(|p| p.checked_add(n))
            .and_then(|w| w.checked_mul(4))
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| fmt(8, "sample count overflows".into()))?;
        if bytes.len() != expected {
            return Err(fmt(
                bytes.len().min(expected),
                format!(
                    "length {} does not match {} samples of {}x{}x{} (expected {} bytes)",
                    bytes.len(),
                    n,
                    channels,
                    height,
                    width,
                    expected
                ),
            ));
        }
        let mut off = HEADER_LEN;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if l as usize >= num_classes {
                return Err(fmt(off, format!("label {l} >= num_classes {num_classes}")));
            }
            labels.push(l);
            off += 4;
        }
        let pixels = bytes[off..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            channels,
            height,
            width,
            num_classes,
            labels,
            pixels,
        })
    }
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), DataError> {
    std::fs::write(path, data.to_bytes()).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Dataset::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn generate(spec: &SynthSpec) -> Result<SampleSet, DataError> {
    spec.validate()?;
    let size = spec.image_size;
    let empty = |n: usize| Dataset {
        channels: spec.channels,
        height: size,
        width: size,
        num_classes: spec.num_classes,
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n * spec.channels * size * size),
    };
    let mut train = empty(spec.num_classes * spec.train_per_class);
    let mut test = empty(spec.num_classes * spec.test_per_class);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| DataError::InvalidSpec(format!("noise: {e}")))?;

    for (label, pattern) in spec.patterns.iter().enumerate() {
        let clean = pattern.render(spec.channels, size);
        let global = spec.class_offset as u64 + label as u64;
        for (split, set, count) in [
            (1u64, &mut train, spec.train_per_class),
            (2u64, &mut test, spec.test_per_class),
        ] {
            // One stream per (class, split) partitions the seed space.
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, global, split));
            for _ in 0..count {
                set.labels.push(label as u32);
                set.pixels.extend(clean.iter().map(|&v| {
                    let n = if spec.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (v + n).clamp(0.0, 1.0) as f32
                }));
            }
        }
    }
    Ok(SampleSet { train, test })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    /// Classes of this task, in shuffled order.
    pub class_ids: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Ordered tasks over disjoint class groups.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub train: Dataset,
    pub test: Dataset,
    pub tasks: Vec<TaskSplit>,
    pub seed: u64,
    pub class_order: Vec<usize>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    /// Task index owning each class.
    pub fn task_of_class(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.num_classes()];
        for (t, task) in self.tasks.iter().enumerate() {
            for &c in &task.class_ids {
                out[c] = t;
            }
        }
        out
    }

    /// Disjointness and coverage of the class partition.
    pub fn check_invariants(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for &c in &task.class_ids {
                if !seen.insert(c) {
                    return Err(DataError::Stream(format!(
                        "class {c} appears twice (task {t})"
                    )));
                }
            }
            let classes: BTreeSet<usize> = task.class_ids.iter().copied().collect();
            for &i in &task.train_indices {
                if !classes.contains(&self.train.label(i)) {
                    return Err(DataError::Stream(format!(
                        "train sample {i} outside task {t}"
                    )));
                }
            }
            for &i in &task.test_indices {
                if !classes.contains(&self.test.label(i)) {
                    return Err(DataError::Stream(format!(
                        "test sample {i} outside task {t}"
                    )));
                }
            }
        }
        if seen.len() != self.num_classes() || seen.iter().copied().ne(0..self.num_classes()) {
            return Err(DataError::Stream(format!(
                "tasks cover {} of {} classes",
                seen.len(),
                self.num_classes()
            )));
        }
        Ok(())
    }
}

/// Shuffles class ids with `seed` and chunks them into `num_tasks` equal groups.
pub fn split_stream(set: SampleSet, num_tasks: usize, seed: u64) -> Result<TaskStream, DataError> {
    let num_classes = set.train.num_classes;
    if set.test.num_classes != num_classes {
        return Err(DataError::Stream(format!(
            "train has {} classes, test has {}",
            num_classes, set.test.num_classes
        )));
    }
    if num_tasks == 0 || !num_classes.is_multiple_of(num_tasks) {
        return Err(DataError::IndivisibleClasses {
            num_classes,
            tasks: num_tasks,
        });
    }
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0, 0xc1a55)));
    let per_task = num_classes / num_tasks;
    let mut task_of = vec![0usize; num_classes];
    let mut tasks: Vec<TaskSplit> = class_order
        .chunks(per_task)
        .enumerate()
        .map(|(t, chunk)| {
            for &c in chunk {
                task_of[c] = t;
            }
            TaskSplit {
                class_ids: chunk.to_vec(),
                train_indices: Vec::new(),
                test_indices: Vec::new(),
            }
        })
        .collect();
    for i in 0..set.train.len() {
        tasks[task_of[set.train.label(i)]].train_indices.push(i);
    }
    for i in 0..set.test.len() {
        tasks[task_of[set.test.label(i)]].test_indices.push(i);
    }
    let stream = TaskStream {
        train: set.train,
        test: set.test,
        tasks,
        seed,
        class_order,
    };
    stream.check_invariants()?;
    Ok(stream)
}

/// SplitMix-style combination of seed components.
pub(crate) fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(noise: f64, seed: u64) -> SynthSpec {
        SynthSpec::from_family(7, 0, 20, 10, 5, 16, 3, noise, seed)
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let a = generate(&small_spec(0.1, 3)).unwrap();
        let b = generate(&small_spec(0.1, 3)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small_spec(0.1, 4)).unwrap();
        assert_ne!(a.train.pixels, c.train.pixels);
    }

    #[test]
    fn zero_noise_repeats_the_class_pattern() {
        let set = generate(&small_spec(0.0, 1)).unwrap();
        let per = 10;
        for class in 0..20 {
            let first = set.train.image(class * per);
            for k in 1..per {
                assert_eq!(set.train.image(class * per + k), first);
            }
        }
    }

    #[test]
    fn nearest_pattern_oracle_is_accurate_at_moderate_noise() {
        let spec = small_spec(0.1, 9);
        let set = generate(&spec).unwrap();
        let clean: Vec<Vec<f64>> = spec
            .patterns
            .iter()
            .map(|p| {
                p.render(3, 16)
                    .into_iter()
                    .map(|v| v.clamp(0.0, 1.0))
                    .collect()
            })
            .collect();
        let mut correct = 0;
        for i in 0..set.test.len() {
            let img = set.test.image(i);
            let best = (0..clean.len())
                .min_by(|&a, &b| {
                    let da: f64 = clean[a]
                        .iter()
                        .zip(img)
                        .map(|(c, &x)| (c - x as f64).powi(2))
                        .sum();
                    let db: f64 = clean[b]
                        .iter()
                        .zip(img)
                        .map(|(c, &x)| (c - x as f64).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += (best == set.test.label(i)) as usize;
        }
        let acc = correct as f64 / set.test.len() as f64;
        assert!(acc > 0.95, "oracle accuracy {acc}");
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut spec = small_spec(0.1, 0);
        spec.num_classes = 0;
        spec.patterns.clear();
        assert!(matches!(generate(&spec), Err(DataError::InvalidSpec(_))));

        let mut spec = small_spec(0.1, 0);
        spec.patterns[3] = spec.patterns[1].clone();
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn split_into_equal_disjoint_tasks() {
        let set = generate(&small_spec(0.1, 0)).unwrap();
        let stream = split_stream(set.clone(), 5, 42).unwrap();
        assert_eq!(stream.num_tasks(), 5);
        let mut union = BTreeSet::new();
        for t in &stream.tasks {
            assert_eq!(t.class_ids.len(), 4);
            for &c in &t.class_ids {
                assert!(union.insert(c), "class {c} repeated");
            }
            assert_eq!(t.train_indices.len(), 40);
            assert_eq!(t.test_indices.len(), 20);
        }
        assert_eq!(union, (0..20).collect());

        let single = split_stream(set.clone(), 1, 42).unwrap();
        assert_eq!(single.tasks[0].class_ids.len(), 20);

        assert_eq!(split_stream(set.clone(), 5, 42).unwrap(), stream);
        let other = split_stream(set.clone(), 5, 43).unwrap();
        assert_ne!(other.class_order, stream.class_order);

        assert!(matches!(
            split_stream(set, 3, 0),
            Err(DataError::IndivisibleClasses { .. })
        ));
    }

    #[test]
    fn dataset_bytes_round_trip_and_diagnose_corruption() {
        let set = generate(&small_spec(0.2, 5)).unwrap();
        let bytes = set.test.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), set.test);

        let mut bad = bytes.clone();
        bad[2] ^= 0xff;
        match Dataset::from_bytes(&bad) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("unexpected {other:?}"),
        }

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Dataset::from_bytes(truncated),
            Err(DataError::Format { .. })
        ));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        let err = Dataset::from_bytes(&wrong_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn independently_written_file_parses_identically() {
        // Writer built directly from the documented layout.
        let labels = [1u32, 0, 2];
        let pixels: Vec<f32> = (0..3 * 2 * 2 * 2).map(|i| i as f32 * 0.125).collect();
        let mut bytes = b"PCLD".to_vec();
        for w in [1u32, 3, 2, 2, 2, 3] {
            bytes.extend(w.to_le_bytes());
        }
        for l in labels {
            bytes.extend(l.to_le_bytes());
        }
        for p in &pixels {
            bytes.extend(p.to_bits().to_le_bytes());
        }
        let parsed = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(parsed.labels, labels);
        assert_eq!(parsed.pixels, pixels);
        assert_eq!((parsed.channels, parsed.height, parsed.width), (2, 2, 2));
        assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.pcld");
        let set = generate(&small_spec(0.1, 2)).unwrap();
        write_dataset(&path, &set.train).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), set.train);
        assert!(matches!(
            read_dataset(&dir.path().join("missing.pcld")),
            Err(DataError::Io { .. })
        ));
    }
}
