//! Task-solving MLP classifiers and their online training loop.
//!
//! Weights live in two interchangeable forms: structured layer tensors
//! (`MlpParams`) for math, and a flat `WeightVector` for chunking and
//! generation. The flat layout is layer-major, weight matrix (row-major)
//! followed by its bias, which fixes a bijection between the two forms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::graph::{Graph, MASKED_LOGIT};
use crate::optim::Adam;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpArchitecture { input_dim, hidden, output_dim }
    }

    /// Layer (fan_in, fan_out) pairs from input to logits.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// Structured per-layer weights: (weight fan_in x fan_out, bias 1 x fan_out).
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub arch: MlpArchitecture,
    pub layers: Vec<(Tensor2, Tensor2)>,
}

/// Flattened weights of one model.
#[derive(Debug, Clone)]
pub struct WeightVector {
    pub arch: MlpArchitecture,
    pub values: Vec<f64>,
}

/// Fan-in-scaled uniform init, biases zero.
pub fn init_mlp<R: Rng>(arch: &MlpArchitecture, rng: &mut R) -> MlpParams {
    let layers = arch
        .layer_dims()
        .iter()
        .map(|&(fan_in, fan_out)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Tensor2::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
            (w, Tensor2::zeros(1, fan_out))
        })
        .collect();
    MlpParams { arch: arch.clone(), layers }
}

pub fn flatten(params: &MlpParams) -> WeightVector {
    let mut values = Vec::with_capacity(params.arch.param_count());
    for (w, b) in &params.layers {
        values.extend_from_slice(w.data());
        values.extend_from_slice(b.data());
    }
    debug_assert_eq!(values.len(), params.arch.param_count());
    WeightVector { arch: params.arch.clone(), values }
}

pub fn unflatten(arch: &MlpArchitecture, values: &[f64]) -> Result<MlpParams> {
    if values.len() != arch.param_count() {
        return Err(Error::Shape {
            op: "unflatten",
            detail: format!("{} values for {} parameters", values.len(), arch.param_count()),
        });
    }
    let mut layers = Vec::new();
    let mut off = 0;
    for (fan_in, fan_out) in arch.layer_dims() {
        let w = Tensor2::from_vec(fan_in, fan_out, values[off..off + fan_in * fan_out].to_vec())?;
        off += fan_in * fan_out;
        let b = Tensor2::from_vec(1, fan_out, values[off..off + fan_out].to_vec())?;
        off += fan_out;
        layers.push((w, b));
    }
    Ok(MlpParams { arch: arch.clone(), layers })
}

/// Plain (tape-free) forward pass to logits; the fast path for evaluation.
pub fn forward_logits(params: &MlpParams, x: &Tensor2) -> Result<Tensor2> {
    let n_layers = params.layers.len();
    let mut h = x.clone();
    let mut next = Tensor2::zeros(0, 0);
    for (li, (w, b)) in params.layers.iter().enumerate() {
        h.matmul_into(w, &mut next)?;
        let last = li + 1 == n_layers;
        for i in 0..next.rows() {
            let row = next.row_mut(i);
            for (v, &bias) in row.iter_mut().zip(b.row(0)) {
                *v += bias;
                if !last && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        std::mem::swap(&mut h, &mut next);
    }
    Ok(h)
}

/// Masked-argmax predictions for a batch of logits. Ties and the argmax both
/// resolve to the smallest class index, deterministically.
pub fn predict_masked(logits: &Tensor2, mask: &[bool]) -> Vec<usize> {
    let mut out = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            let v = if mask[j] { v } else { MASKED_LOGIT };
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Build the masked cross-entropy training loss on the tape. Parameter node
/// ids are returned layer by layer in (weight, bias) order.
pub fn loss_graph(
    g: &mut Graph,
    params: &MlpParams,
    x: &Tensor2,
    labels: &[usize],
    mask: &[bool],
) -> Result<(crate::graph::NodeId, Vec<crate::graph::NodeId>)> {
    let mut ids = Vec::with_capacity(params.layers.len() * 2);
    let mut h = g.input(x.clone());
    let n_layers = params.layers.len();
    for (li, (w, b)) in params.layers.iter().enumerate() {
        let wid = g.param(w.clone());
        let bid = g.param(b.clone());
        ids.push(wid);
        ids.push(bid);
        h = g.matmul(h, wid)?;
        h = g.add_bias(h, bid)?;
        if li + 1 != n_layers {
            h = g.relu(h);
        }
    }
    let loss = g.softmax_xent(h, labels, mask)?;
    Ok((loss, ids))
}

/// Settings for one online pass.
#[derive(Debug, Clone)]
pub struct OnlineConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-point Bernoulli inclusion probability for each model.
    pub inclusion_p: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig { batch_size: 10, lr: 1e-3, weight_decay: 1e-3, inclusion_p: 0.5 }
    }
}

/// Incremental single-model trainer: points arrive one at a time, a Bernoulli
/// gate decides inclusion, accepted points accumulate into batches, and each
/// full batch triggers one Adam step. `finish` trains any partial batch as-is.
pub struct OnlineTrainer {
    params: MlpParams,
    opt: Adam,
    cfg: OnlineConfig,
    mask: Vec<bool>,
    buf_x: Vec<Vec<f64>>,
    buf_y: Vec<usize>,
    rng: rand_chacha::ChaCha8Rng,
    pub accepted: usize,
    pub offered: usize,
    pub steps: usize,
}

impl OnlineTrainer {
    pub fn new(
        params: MlpParams,
        cfg: OnlineConfig,
        mask: Vec<bool>,
        rng: rand_chacha::ChaCha8Rng,
    ) -> Self {
        let shapes: Vec<(usize, usize)> = params
            .layers
            .iter()
            .flat_map(|(w, b)| [w.shape(), b.shape()])
            .collect();
        let opt = Adam::new(cfg.lr, cfg.weight_decay, &shapes);
        OnlineTrainer {
            params,
            opt,
            cfg,
            mask,
            buf_x: Vec::new(),
            buf_y: Vec::new(),
            rng,
            accepted: 0,
            offered: 0,
            steps: 0,
        }
    }

    pub fn offer(&mut self, ex: &Example) -> Result<()> {
        self.offered += 1;
        if self.rng.gen_range(0.0..1.0) >= self.cfg.inclusion_p {
            return Ok(());
        }
        self.accepted += 1;
        self.buf_x.push(ex.x.clone());
        self.buf_y.push(ex.label);
        if self.buf_x.len() == self.cfg.batch_size {
            self.train_buffered()?;
        }
        Ok(())
    }

    fn train_buffered(&mut self) -> Result<()> {
        let n = self.buf_x.len();
        let dim = self.buf_x[0].len();
        let mut x = Tensor2::zeros(n, dim);
        for (i, row) in self.buf_x.drain(..).enumerate() {
            x.row_mut(i).copy_from_slice(&row);
        }
        let labels: Vec<usize> = self.buf_y.drain(..).collect();
        let mut g = Graph::new();
        let (loss, ids) = loss_graph(&mut g, &self.params, &x, &labels, &self.mask)?;
        g.backward(loss)?;
        let grads: Vec<Tensor2> = ids
            .iter()
            .map(|&id| g.grad(id).cloned().expect("parameter missing gradient"))
            .collect();
        let mut refs: Vec<&mut Tensor2> = Vec::with_capacity(grads.len());
        for (w, b) in &mut self.params.layers {
            refs.push(w);
            refs.push(b);
        }
        self.opt.step(&mut refs, &grads)?;
        self.steps += 1;
        Ok(())
    }

    /// Flush the final partial batch. Returns the trained parameters; if the
    /// Bernoulli gate accepted nothing the initial weights come back
    /// unchanged (with a warning, since that usually means a degenerate
    /// stream).
    pub fn finish(mut self) -> Result<(MlpParams, OnlineStats)> {
        if !self.buf_x.is_empty() {
            self.train_buffered()?;
        }
        if self.accepted == 0 {
            log::warn!("online pass accepted no points; weights unchanged");
        }
        let stats = OnlineStats {
            offered: self.offered,
            accepted: self.accepted,
            steps: self.steps,
        };
        Ok((self.params, stats))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OnlineStats {
    pub offered: usize,
    pub accepted: usize,
    pub steps: usize,
}

/// One full single pass of `stream` through a single model.
pub fn train_online(
    params: MlpParams,
    stream: impl Iterator<Item = Example>,
    mask: &[bool],
    cfg: &OnlineConfig,
    rng: rand_chacha::ChaCha8Rng,
) -> Result<(MlpParams, OnlineStats)> {
    let mut trainer = OnlineTrainer::new(params, cfg.clone(), mask.to_vec(), rng);
    for ex in stream {
        trainer.offer(&ex)?;
    }
    trainer.finish()
}

/// The models trained for one task.
pub struct BaseModelSet {
    pub task_index: usize,
    pub models: Vec<WeightVector>,
    pub stats: Vec<OnlineStats>,
}

/// Train `count` models for a task in ONE pass over the stream: every point
/// is offered to every model exactly once, and each model's own Bernoulli
/// gate decides whether it trains on it. Every model grows from the same
/// `init`, so the set stays aligned in weight space (no hidden-unit
/// permutation mismatch); the private gates are what make models differ.
/// Returns the number of stream items, which callers can check against the
/// task's size to audit the single-pass contract.
pub fn train_base_models(
    init: &MlpParams,
    stream: impl Iterator<Item = Example>,
    mask: &[bool],
    cfg: &OnlineConfig,
    count: usize,
    task_index: usize,
    seed: u64,
    mut also_offer: impl FnMut(&Example),
) -> Result<(BaseModelSet, usize)> {
    use crate::rng::scope;
    let mut trainers: Vec<OnlineTrainer> = (0..count)
        .map(|m| {
            let gate_rng = crate::rng::stream(seed, &[scope::GATE, task_index as u64, m as u64]);
            OnlineTrainer::new(init.clone(), cfg.clone(), mask.to_vec(), gate_rng)
        })
        .collect();
    let mut stream_len = 0;
    for ex in stream {
        stream_len += 1;
        for t in trainers.iter_mut() {
            t.offer(&ex)?;
        }
        also_offer(&ex);
    }
    let mut models = Vec::with_capacity(count);
    let mut stats = Vec::with_capacity(count);
    for t in trainers {
        let (params, st) = t.finish()?;
        debug_assert_eq!(st.offered, stream_len);
        models.push(flatten(&params));
        stats.push(st);
    }
    Ok((BaseModelSet { task_index, models, stats }, stream_len))
}

/// Percent accuracy of `params` on a task's test split under a class mask.
pub fn evaluate(params: &MlpParams, view: &crate::data::SplitView, mask: &[bool]) -> Result<f64> {
    let preds = predict_view(params, view, mask)?;
    let mut correct = 0usize;
    for (i, &p) in preds.iter().enumerate() {
        if p == view.label(i) {
            correct += 1;
        }
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("evaluate on an empty split".into()));
    }
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

/// Masked predictions over a whole split, batched.
pub fn predict_view(
    params: &MlpParams,
    view: &crate::data::SplitView,
    mask: &[bool],
) -> Result<Vec<usize>> {
    const BATCH: usize = 256;
    let n = view.len();
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + BATCH).min(n)).collect();
        let (x, _) = view.batch(&idx);
        let logits = forward_logits(params, &x)?;
        preds.extend(predict_masked(&logits, mask));
        start += BATCH;
    }
    Ok(preds)
}

/// Class mask over `n_classes` with the given classes visible.
pub fn class_mask(n_classes: usize, visible: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n_classes];
    for &c in visible {
        mask[c] = true;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_synthetic_tasks, SyntheticSpec};
    use crate::rng;

    #[test]
    fn default_architecture_parameter_count() {
        let arch = MlpArchitecture::new(784, vec![100, 100], 10);
        assert_eq!(arch.param_count(), 89_610);
    }

    #[test]
    fn flatten_unflatten_is_a_bijection() {
        let arch = MlpArchitecture::new(7, vec![5, 4], 3);
        let mut r = rng::stream(1, &[50]);
        let params = init_mlp(&arch, &mut r);
        let flat = flatten(&params);
        assert_eq!(flat.values.len(), arch.param_count());
        let back = unflatten(&arch, &flat.values).unwrap();
        for (a, b) in params.layers.iter().zip(&back.layers) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
        // position check: the first bias of layer 0 sits right after the
        // 7x5 weight block
        assert_eq!(flat.values[35], params.layers[0].1.data()[0]);
    }

    #[test]
    fn unflatten_wrong_length_is_rejected() {
        let arch = MlpArchitecture::new(4, vec![3], 2);
        assert!(unflatten(&arch, &[0.0; 10]).is_err());
    }

    #[test]
    fn init_respects_fan_in_bounds_and_zero_biases() {
        let arch = MlpArchitecture::new(100, vec![50], 10);
        let mut r = rng::stream(2, &[51]);
        let params = init_mlp(&arch, &mut r);
        let bound0 = 1.0 / 10.0;
        assert!(params.layers[0].0.data().iter().all(|&v| v.abs() < bound0));
        assert!(params.layers[0].1.data().iter().all(|&v| v == 0.0));
        let bound1 = 1.0 / (50.0f64).sqrt();
        assert!(params.layers[1].0.data().iter().all(|&v| v.abs() < bound1));
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let arch = MlpArchitecture::new(6, vec![5], 4);
        let mut r = rng::stream(3, &[52]);
        let params = init_mlp(&arch, &mut r);
        let x = Tensor2::from_vec(2, 6, rng::normal_vec(&mut r, 12)).unwrap();
        let plain = forward_logits(&params, &x).unwrap();

        let mut g = Graph::new();
        let mut h = g.input(x.clone());
        for (li, (w, b)) in params.layers.iter().enumerate() {
            let wid = g.input(w.clone());
            let bid = g.input(b.clone());
            h = g.matmul(h, wid).unwrap();
            h = g.add_bias(h, bid).unwrap();
            if li + 1 != params.layers.len() {
                h = g.relu(h);
            }
        }
        let tape = g.value(h);
        for (a, b) in plain.data().iter().zip(tape.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn online_training_learns_separated_blobs() {
        let spec = SyntheticSpec {
            n_tasks: 1,
            classes_per_task: 3,
            dim: 10,
            n_train_per_class: 400,
            n_test_per_class: 60,
            separation: 6.0,
        };
        let task = &build_synthetic_tasks(&spec, 5).unwrap()[0];
        let arch = MlpArchitecture::new(10, vec![16], 3);
        let mut r = rng::stream(6, &[53]);
        let params = init_mlp(&arch, &mut r);
        let mask = class_mask(3, &task.classes);
        let cfg = OnlineConfig { inclusion_p: 1.0, ..OnlineConfig::default() };
        let stream = (0..task.train.len()).map(|i| task.train.example(i));
        let (trained, stats) =
            train_online(params, stream, &mask, &cfg, rng::stream(6, &[54])).unwrap();
        assert_eq!(stats.offered, 1200);
        assert_eq!(stats.accepted, 1200);
        assert_eq!(stats.steps, 120);
        let acc = evaluate(&trained, &task.test, &mask).unwrap();
        assert!(acc > 90.0, "accuracy {acc}");
    }

    #[test]
    fn single_pass_offers_each_point_once_and_gates_at_half() {
        let spec = SyntheticSpec::default();
        let task = &build_synthetic_tasks(&spec, 8).unwrap()[0];
        let n = task.train.len();
        let arch = MlpArchitecture::new(spec.dim, vec![8], 6);
        let mask = class_mask(6, &task.classes);
        let cfg = OnlineConfig::default();
        let mut reservoir_sees = 0;
        let stream = (0..n).map(|i| task.train.example(i));
        let init = init_mlp(&arch, &mut rng::stream(11, &[rng::scope::INIT]));
        let (set, stream_len) =
            train_base_models(&init, stream, &mask, &cfg, 4, 0, 11, |_| reservoir_sees += 1)
                .unwrap();
        assert_eq!(stream_len, n);
        assert_eq!(reservoir_sees, n);
        for st in &set.stats {
            assert_eq!(st.offered, n);
            // Bernoulli(0.5) acceptance: loose 4-sigma band around n/2.
            let sd = (n as f64 * 0.25).sqrt();
            assert!((st.accepted as f64 - n as f64 / 2.0).abs() < 4.0 * sd);
        }
        // shared init, but independent gates still separate the models
        assert_ne!(set.models[0].values, set.models[1].values);
    }

    #[test]
    fn partial_final_batch_still_trains() {
        let spec = SyntheticSpec {
            n_tasks: 1,
            classes_per_task: 2,
            dim: 4,
            n_train_per_class: 7, // 14 points: one full batch of 10 + 4 left
            n_test_per_class: 5,
            separation: 5.0,
        };
        let task = &build_synthetic_tasks(&spec, 2).unwrap()[0];
        let arch = MlpArchitecture::new(4, vec![4], 2);
        let mut r = rng::stream(1, &[55]);
        let params = init_mlp(&arch, &mut r);
        let cfg = OnlineConfig { inclusion_p: 1.0, ..OnlineConfig::default() };
        let stream = (0..task.train.len()).map(|i| task.train.example(i));
        let (_, stats) =
            train_online(params, stream, &class_mask(2, &[0, 1]), &cfg, rng::stream(1, &[56]))
                .unwrap();
        assert_eq!(stats.steps, 2);
    }

    #[test]
    fn masked_prediction_never_returns_hidden_class() {
        let arch = MlpArchitecture::new(4, vec![6], 5);
        let mut r = rng::stream(9, &[57]);
        let params = init_mlp(&arch, &mut r);
        let x = Tensor2::from_vec(8, 4, rng::normal_vec(&mut r, 32)).unwrap();
        let logits = forward_logits(&params, &x).unwrap();
        let mask = class_mask(5, &[1, 3]);
        for p in predict_masked(&logits, &mask) {
            assert!(p == 1 || p == 3);
        }
    }

    #[test]
    fn mask_growth_is_consistent() {
        // If the argmax under the larger mask already lies in the smaller
        // mask, both masks agree; predictions only change when a newly
        // unmasked class genuinely wins.
        let arch = MlpArchitecture::new(4, vec![6], 6);
        let mut r = rng::stream(10, &[58]);
        let params = init_mlp(&arch, &mut r);
        let x = Tensor2::from_vec(20, 4, rng::normal_vec(&mut r, 80)).unwrap();
        let logits = forward_logits(&params, &x).unwrap();
        let small = class_mask(6, &[0, 1]);
        let large = class_mask(6, &[0, 1, 2, 3]);
        let ps = predict_masked(&logits, &small);
        let pl = predict_masked(&logits, &large);
        for (a, b) in ps.iter().zip(&pl) {
            if small[*b] {
                assert_eq!(a, b);
            }
        }
    }
}
