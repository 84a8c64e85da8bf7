//! Datasets: IDX parsing, task construction, and the exemplar buffer.
//!
//! Images are kept in shared banks (`Arc<ImageBank>`); a `TaskDataset` holds
//! index lists into a bank plus an optional pixel permutation that is applied
//! lazily when rows are materialized. That way ten permuted variants of the
//! same 10,000-image test split cost one copy of the pixels.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, scope};
use crate::tensor::Tensor2;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// One labeled input row, pixels/features already scaled to their final range.
#[derive(Debug, Clone)]
pub struct Example {
    pub x: Vec<f64>,
    pub label: usize,
}

/// A raw IDX image/label pair as stored on disk (bytes, unscaled).
pub struct RawDataset {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }
}

fn read_u32(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::Data(format!("truncated IDX header reading {what}")));
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Parse the standard big-endian IDX image + label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let img = fs::read(images_path)
        .map_err(|e| Error::Data(format!("{}: {e}", images_path.display())))?;
    let lab = fs::read(labels_path)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;

    let magic = read_u32(&img, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "{}: image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = read_u32(&img, 4, "image count")? as usize;
    let rows = read_u32(&img, 8, "image rows")? as usize;
    let cols = read_u32(&img, 12, "image cols")? as usize;
    if img.len() != 16 + n * rows * cols {
        return Err(Error::Data(format!(
            "{}: {} pixel bytes for {n} images of {rows}x{cols}",
            images_path.display(),
            img.len() - 16
        )));
    }

    let lmagic = read_u32(&lab, 0, "label magic")?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::Data(format!(
            "{}: label magic {lmagic:#010x}, expected {LABEL_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let ln = read_u32(&lab, 4, "label count")? as usize;
    if ln != n {
        return Err(Error::Data(format!(
            "image/label count mismatch: {n} images, {ln} labels"
        )));
    }
    if lab.len() != 8 + ln {
        return Err(Error::Data(format!(
            "{}: {} label bytes for {ln} labels",
            labels_path.display(),
            lab.len() - 8
        )));
    }

    Ok(RawDataset {
        n,
        rows,
        cols,
        pixels: img[16..].to_vec(),
        labels: lab[8..].to_vec(),
    })
}

/// Materialized f64 feature rows with labels, shared between tasks.
pub struct ImageBank {
    pub dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl ImageBank {
    pub fn new(dim: usize) -> Self {
        ImageBank { dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, row: &[f64], label: u8) {
        debug_assert_eq!(row.len(), self.dim);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    /// Copy selected rows of a raw byte dataset, scaling pixels by 1/255.
    pub fn from_raw_indices(raw: &RawDataset, indices: &[u32]) -> Self {
        let dim = raw.dim();
        let mut bank = ImageBank {
            dim,
            features: Vec::with_capacity(indices.len() * dim),
            labels: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let i = i as usize;
            let px = &raw.pixels[i * dim..(i + 1) * dim];
            bank.features.extend(px.iter().map(|&b| b as f64 / 255.0));
            bank.labels.push(raw.labels[i]);
        }
        bank
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }
}

/// One split (train or test) of a task: bank indices plus an optional pixel
/// permutation applied on materialization.
#[derive(Clone)]
pub struct SplitView {
    bank: Arc<ImageBank>,
    indices: Vec<u32>,
    perm: Option<Arc<Vec<u32>>>,
}

impl SplitView {
    pub fn new(bank: Arc<ImageBank>, indices: Vec<u32>, perm: Option<Arc<Vec<u32>>>) -> Self {
        SplitView { bank, indices, perm }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bank.dim
    }

    pub fn label(&self, i: usize) -> usize {
        self.bank.label(self.indices[i] as usize)
    }

    pub fn fill_row(&self, i: usize, out: &mut [f64]) {
        let src = self.bank.row(self.indices[i] as usize);
        match &self.perm {
            None => out.copy_from_slice(src),
            Some(p) => {
                for (o, &pi) in out.iter_mut().zip(p.iter()) {
                    *o = src[pi as usize];
                }
            }
        }
    }

    pub fn example(&self, i: usize) -> Example {
        let mut x = vec![0.0; self.dim()];
        self.fill_row(i, &mut x);
        Example { x, label: self.label(i) }
    }

    /// Materialize rows `idx` as a batch matrix plus labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor2, Vec<usize>) {
        let mut x = Tensor2::zeros(idx.len(), self.dim());
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            self.fill_row(i, x.row_mut(r));
            y.push(self.label(i));
        }
        (x, y)
    }
}

pub struct TaskDataset {
    pub task_index: usize,
    /// The class labels this task's stream actually contains.
    pub classes: Vec<usize>,
    pub train: SplitView,
    pub test: SplitView,
}

fn class_indices(labels: &[u8], classes: &[usize]) -> Vec<u32> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| classes.contains(&(l as usize)))
        .map(|(i, _)| i as u32)
        .collect()
}

/// Class-incremental split of a 10-class dataset into 5 two-class tasks:
/// task j holds classes {2j, 2j+1}. `n_train_per_task` images are sampled
/// per task; the test split keeps every image of the task's classes.
pub fn build_split_mnist(
    train_raw: &RawDataset,
    test_raw: &RawDataset,
    n_train_per_task: usize,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    let test_all: Vec<u32> = (0..test_raw.n as u32).collect();
    let test_bank = Arc::new(ImageBank::from_raw_indices(test_raw, &test_all));

    let mut tasks = Vec::with_capacity(5);
    for j in 0..5 {
        let classes = vec![2 * j, 2 * j + 1];
        let mut pool = class_indices(&train_raw.labels, &classes);
        if pool.len() < n_train_per_task {
            return Err(Error::Data(format!(
                "task {j}: {} candidate images for {} requested",
                pool.len(),
                n_train_per_task
            )));
        }
        let mut r = rng::stream(seed, &[scope::DATA, j as u64]);
        for i in (1..pool.len()).rev() {
            let k = r.gen_range(0..=i);
            pool.swap(i, k);
        }
        pool.truncate(n_train_per_task);
        let train_bank = Arc::new(ImageBank::from_raw_indices(train_raw, &pool));
        let train_idx: Vec<u32> = (0..n_train_per_task as u32).collect();

        let test_idx = class_indices(&test_raw.labels, &classes);
        tasks.push(TaskDataset {
            task_index: j,
            classes,
            train: SplitView::new(train_bank, train_idx, None),
            test: SplitView::new(Arc::clone(&test_bank), test_idx, None),
        });
    }
    Ok(tasks)
}

/// Domain-incremental variant: every task sees all 10 classes but through its
/// own random pixel permutation (including the first task: no identity).
pub fn build_permuted_mnist(
    train_raw: &RawDataset,
    test_raw: &RawDataset,
    n_tasks: usize,
    n_train_per_task: usize,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    if train_raw.n < n_train_per_task {
        return Err(Error::Data(format!(
            "{} train images for {} requested per task",
            train_raw.n, n_train_per_task
        )));
    }
    let dim = train_raw.dim();
    let test_all: Vec<u32> = (0..test_raw.n as u32).collect();
    let test_bank = Arc::new(ImageBank::from_raw_indices(test_raw, &test_all));
    let test_idx: Vec<u32> = (0..test_raw.n as u32).collect();
    let classes: Vec<usize> = (0..10).collect();

    let mut tasks = Vec::with_capacity(n_tasks);
    for j in 0..n_tasks {
        let mut r = rng::stream(seed, &[scope::DATA, j as u64]);
        let perm: Vec<u32> = loop {
            let p: Vec<u32> = rng::shuffled_indices(&mut r, dim)
                .into_iter()
                .map(|v| v as u32)
                .collect();
            // Astronomically unlikely, but the identity permutation would
            // make a task trivially equal to plain MNIST.
            if p.iter().enumerate().any(|(i, &v)| v != i as u32) {
                break p;
            }
        };
        let perm = Arc::new(perm);

        let mut pool: Vec<u32> = (0..train_raw.n as u32).collect();
        for i in (1..pool.len()).rev() {
            let k = r.gen_range(0..=i);
            pool.swap(i, k);
        }
        pool.truncate(n_train_per_task);
        let train_bank = Arc::new(ImageBank::from_raw_indices(train_raw, &pool));

        tasks.push(TaskDataset {
            task_index: j,
            classes: classes.clone(),
            train: SplitView::new(
                train_bank,
                (0..n_train_per_task as u32).collect(),
                Some(Arc::clone(&perm)),
            ),
            test: SplitView::new(Arc::clone(&test_bank), test_idx.clone(), Some(perm)),
        });
    }
    Ok(tasks)
}

/// Parameters for the synthetic Gaussian-blob task generator used by fast
/// tests and examples.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    /// Distance of each class mean from the origin, in units of the blob
    /// standard deviation (1.0).
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_tasks: 3,
            classes_per_task: 2,
            dim: 16,
            n_train_per_class: 60,
            n_test_per_class: 40,
            separation: 6.0,
        }
    }
}

/// Class means drawn on a sphere of radius `separation`, unit-variance
/// isotropic blobs around them; task j owns classes
/// {j*cpt, ..., j*cpt + cpt - 1}. Output is schema-compatible with the MNIST
/// builders.
pub fn build_synthetic_tasks(spec: &SyntheticSpec, seed: u64) -> Result<Vec<TaskDataset>> {
    if spec.dim == 0 || spec.classes_per_task == 0 || spec.n_tasks == 0 {
        return Err(Error::InvalidArgument("degenerate synthetic spec".into()));
    }
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for j in 0..spec.n_tasks {
        let mut r = rng::stream(seed, &[scope::SYNTH, j as u64]);
        let mut train = ImageBank::new(spec.dim);
        let mut test = ImageBank::new(spec.dim);
        let classes: Vec<usize> =
            (j * spec.classes_per_task..(j + 1) * spec.classes_per_task).collect();
        for &c in &classes {
            let mut mean = rng::normal_vec(&mut r, spec.dim);
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for m in &mut mean {
                *m *= spec.separation / norm;
            }
            for split in 0..2 {
                let (bank, count) = if split == 0 {
                    (&mut train, spec.n_train_per_class)
                } else {
                    (&mut test, spec.n_test_per_class)
                };
                for _ in 0..count {
                    let mut x = rng::normal_vec(&mut r, spec.dim);
                    for (xi, mi) in x.iter_mut().zip(&mean) {
                        *xi += mi;
                    }
                    bank.push(&x, c as u8);
                }
            }
        }
        // Interleave classes in the stream order rather than class blocks.
        let n_train = train.len();
        let mut order = rng::shuffled_indices(&mut r, n_train);
        let train_idx: Vec<u32> = order.drain(..).map(|v| v as u32).collect();
        let n_test = test.len();
        tasks.push(TaskDataset {
            task_index: j,
            classes,
            train: SplitView::new(Arc::new(train), train_idx, None),
            test: SplitView::new(Arc::new(test), (0..n_test as u32).collect(), None),
        });
    }
    Ok(tasks)
}

/// Bounded episodic memory: a reservoir per seen task under one total budget,
/// rebalanced to floor(budget / tasks_seen) slots per task as tasks arrive.
pub struct ExemplarStore {
    budget: usize,
    per_task: Vec<Vec<Example>>,
}

impl ExemplarStore {
    pub fn new(budget: usize) -> Self {
        ExemplarStore { budget, per_task: Vec::new() }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn tasks(&self) -> usize {
        self.per_task.len()
    }

    pub fn quota(&self) -> usize {
        if self.per_task.is_empty() {
            self.budget
        } else {
            self.budget / self.per_task.len()
        }
    }

    pub fn task_examples(&self, task: usize) -> &[Example] {
        &self.per_task[task]
    }

    pub fn pooled(&self) -> Vec<&Example> {
        self.per_task.iter().flatten().collect()
    }

    pub fn total_stored(&self) -> usize {
        self.per_task.iter().map(Vec::len).sum()
    }

    /// Admit task `k`'s reservoir and shrink earlier tasks to the new
    /// per-task quota by seeded down-sampling.
    pub fn admit(&mut self, reservoir: Vec<Example>, seed: u64) -> Result<()> {
        self.per_task.push(reservoir);
        let k = self.per_task.len();
        let quota = self.budget / k;
        if quota == 0 {
            return Err(Error::InvalidArgument(format!(
                "budget {} cannot cover {} tasks",
                self.budget, k
            )));
        }
        for (t, set) in self.per_task.iter_mut().enumerate() {
            if set.len() > quota {
                let mut r = rng::stream(seed, &[scope::RESERVOIR, t as u64, k as u64]);
                // Partial Fisher-Yates: the first `quota` slots are a uniform
                // sample without replacement.
                for i in 0..quota {
                    let j = r.gen_range(i..set.len());
                    set.swap(i, j);
                }
                set.truncate(quota);
            }
        }
        Ok(())
    }
}

/// Classic reservoir sampling over a stream whose length is unknown upfront.
pub struct Reservoir {
    capacity: usize,
    seen: usize,
    items: Vec<Example>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Reservoir {
    pub fn new(capacity: usize, seed: u64, task: usize) -> Self {
        Reservoir {
            capacity,
            seen: 0,
            items: Vec::with_capacity(capacity),
            rng: rng::stream(seed, &[scope::RESERVOIR, task as u64]),
        }
    }

    pub fn offer(&mut self, ex: Example) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(ex);
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if j < self.capacity {
                self.items[j] = ex;
            }
        }
    }

    pub fn into_items(self) -> Vec<Example> {
        self.items
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_raw(n: usize, dim_side: usize) -> RawDataset {
        RawDataset {
            n,
            rows: dim_side,
            cols: 1,
            pixels: (0..n * dim_side).map(|i| (i % 251) as u8).collect(),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
        }
    }

    #[test]
    fn idx_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img");
        let lab_path = dir.path().join("lab");
        let n: u32 = 3;
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60]);
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend_from_slice(&[7, 0, 9]);
        std::fs::write(&img_path, &img).unwrap();
        std::fs::write(&lab_path, &lab).unwrap();

        let raw = load_idx(&img_path, &lab_path).unwrap();
        assert_eq!((raw.n, raw.rows, raw.cols), (3, 2, 2));
        assert_eq!(raw.labels, vec![7, 0, 9]);
        let bank = ImageBank::from_raw_indices(&raw, &[0, 2]);
        assert_eq!(bank.label(0), 7);
        assert_eq!(bank.label(1), 9);
        assert!((bank.row(0)[1] - 51.0 / 255.0).abs() < 1e-15);
        assert!(bank.row(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img");
        let lab_path = dir.path().join("lab");
        std::fs::write(&img_path, 0x12345678u32.to_be_bytes()).unwrap();
        std::fs::write(&lab_path, LABEL_MAGIC.to_be_bytes()).unwrap();
        assert!(load_idx(&img_path, &lab_path).is_err());
    }

    #[test]
    fn permutation_round_trips_bitwise() {
        let raw = tiny_raw(4, 9);
        let tasks = build_permuted_mnist(&raw, &raw, 2, 3, 42).unwrap();
        let t = &tasks[0];
        let dim = t.test.dim();
        let mut permuted = vec![0.0; dim];
        t.test.fill_row(0, &mut permuted);
        let perm = t.test.perm.as_ref().unwrap();
        // invert
        let mut restored = vec![0.0; dim];
        for (j, &p) in perm.iter().enumerate() {
            restored[p as usize] = permuted[j];
        }
        let mut original = vec![0.0; dim];
        let plain = SplitView::new(Arc::clone(&t.test.bank), t.test.indices.clone(), None);
        plain.fill_row(0, &mut original);
        assert_eq!(restored, original);
        // and the permutation is not the identity
        assert!(perm.iter().enumerate().any(|(i, &v)| v != i as u32));
    }

    #[test]
    fn permuted_tasks_share_one_test_bank() {
        let raw = tiny_raw(6, 4);
        let tasks = build_permuted_mnist(&raw, &raw, 3, 2, 1).unwrap();
        assert!(Arc::ptr_eq(&tasks[0].test.bank, &tasks[1].test.bank));
        assert!(Arc::ptr_eq(&tasks[1].test.bank, &tasks[2].test.bank));
    }

    #[test]
    fn synthetic_separated_blobs_are_nearest_mean_classifiable() {
        let spec = SyntheticSpec {
            n_tasks: 2,
            classes_per_task: 2,
            dim: 12,
            n_train_per_class: 50,
            n_test_per_class: 50,
            separation: 10.0,
        };
        let tasks = build_synthetic_tasks(&spec, 9).unwrap();
        // Estimate class means from train, classify test by nearest mean;
        // with 10-sigma separation this should be essentially perfect.
        let mut correct = 0;
        let mut total = 0;
        for t in &tasks {
            let mut means: std::collections::HashMap<usize, (Vec<f64>, usize)> =
                std::collections::HashMap::new();
            for i in 0..t.train.len() {
                let ex = t.train.example(i);
                let e = means.entry(ex.label).or_insert((vec![0.0; spec.dim], 0));
                for (a, b) in e.0.iter_mut().zip(&ex.x) {
                    *a += b;
                }
                e.1 += 1;
            }
            let means: Vec<(usize, Vec<f64>)> = means
                .into_iter()
                .map(|(c, (s, n))| (c, s.iter().map(|v| v / n as f64).collect()))
                .collect();
            for i in 0..t.test.len() {
                let ex = t.test.example(i);
                let best = means
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = a.1.iter().zip(&ex.x).map(|(m, x)| (m - x) * (m - x)).sum();
                        let db: f64 = b.1.iter().zip(&ex.x).map(|(m, x)| (m - x) * (m - x)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                if best == ex.label {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = 100.0 * correct as f64 / total as f64;
        assert!(acc > 99.0, "nearest-mean accuracy {acc}");
    }

    #[test]
    fn synthetic_zero_separation_is_chance() {
        let spec = SyntheticSpec {
            separation: 0.0,
            n_test_per_class: 200,
            ..SyntheticSpec::default()
        };
        let tasks = build_synthetic_tasks(&spec, 4).unwrap();
        // All classes coincide; any classifier is at chance. Check the data
        // itself: class-conditional means are indistinguishable.
        let t = &tasks[0];
        let mut m0 = vec![0.0; spec.dim];
        let mut n0 = 0.0;
        for i in 0..t.test.len() {
            let ex = t.test.example(i);
            if ex.label == t.classes[0] {
                for (a, b) in m0.iter_mut().zip(&ex.x) {
                    *a += b;
                }
                n0 += 1.0;
            }
        }
        let scale = 1.0 / n0;
        assert!(m0.iter().all(|v| (v * scale).abs() < 0.5));
    }

    #[test]
    fn exemplar_quota_rebalances_on_growth() {
        let mut store = ExemplarStore::new(200);
        for k in 0..5 {
            let res: Vec<Example> = (0..200)
                .map(|i| Example { x: vec![k as f64], label: i % 2 })
                .collect();
            store.admit(res, 7).unwrap();
        }
        assert_eq!(store.tasks(), 5);
        assert_eq!(store.quota(), 40);
        for t in 0..5 {
            assert_eq!(store.task_examples(t).len(), 40);
        }
        assert!(store.total_stored() <= 200);
    }

    #[test]
    fn reservoir_is_uniform_enough() {
        // Capacity 10 over a 100-item stream: every item should appear with
        // probability ~0.1; check the mean selected index is near the middle.
        let mut sum = 0.0;
        let mut count = 0.0;
        for trial in 0..200 {
            let mut r = Reservoir::new(10, trial, 0);
            for i in 0..100 {
                r.offer(Example { x: vec![i as f64], label: 0 });
            }
            for ex in r.into_items() {
                sum += ex.x[0];
                count += 1.0;
            }
        }
        let mean = sum / count;
        assert!((mean - 49.5).abs() < 5.0, "mean selected index {mean}");
    }
}
