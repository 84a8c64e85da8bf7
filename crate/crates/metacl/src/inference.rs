//! Ensemble prediction from the weight autoencoder.
//!
//! Models are drawn one at a time, finetuned briefly on stored exemplars,
//! scored on the test sets, and discarded before the next draw, so a sweep
//! never holds more than one assembled classifier. Per-member predictions
//! are kept as votes and combined by majority at the end.

use rand_chacha::ChaCha8Rng;

use crate::classifier::{self, class_mask, init_mlp, unflatten, MlpArchitecture, MlpParams};
use crate::data::{Example, ExemplarStore, TaskDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::Adam;
use crate::rng;
use crate::tensor::Tensor2;
use crate::vae::{GaussianDiag, PriorStore, WeightVae};

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            lr: 1e-3,
            batch_size: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceConfig {
    pub ensemble: usize,
    pub finetune: FinetuneConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            ensemble: 30,
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Counts assembled classifiers currently alive during a sweep, plus the
/// high-water mark, to demonstrate the one-resident-model memory contract.
#[derive(Debug, Clone, Default)]
pub struct ResidencyGauge {
    live: usize,
    peak: usize,
}

impl ResidencyGauge {
    pub fn on_materialize(&mut self) {
        self.live += 1;
        self.peak = self.peak.max(self.live);
    }

    pub fn on_release(&mut self) {
        debug_assert!(self.live > 0);
        self.live -= 1;
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Where ensemble members come from.
pub enum MemberSource<'a> {
    /// Decode from the autoencoder: a fresh latent per chunk, drawn from
    /// `prior`, conditioned on `onehot`.
    Decoder {
        vae: &'a WeightVae,
        prior: GaussianDiag,
        onehot: Vec<f64>,
    },
    /// Freshly initialized networks; the ablation that isolates what the
    /// autoencoder itself contributes.
    RandomInit,
}

/// One sweep's results: accuracy (percent) per evaluated test set, in the
/// order the sets were given.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub per_task_accuracy: Vec<f64>,
    /// False when there were no exemplars to finetune on.
    pub finetuned: bool,
    pub peak_resident: usize,
}

/// Mean of means; variances averaged as variances, then returned to log
/// domain.
pub fn aggregate_priors(store: &PriorStore) -> Result<GaussianDiag> {
    if store.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty prior store".into(),
        ));
    }
    let k = store.len() as f64;
    let dim = store.get(0)?.dim();
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for snap in store.iter() {
        if snap.dim() != dim {
            return Err(Error::Contract(
                "prior snapshots disagree on latent dimension".into(),
            ));
        }
        for i in 0..dim {
            mean[i] += snap.mean[i] / k;
            var[i] += snap.log_var[i].exp() / k;
        }
    }
    let log_var = var.into_iter().map(f64::ln).collect();
    Ok(GaussianDiag { mean, log_var })
}

/// In-place masked cross-entropy passes over the exemplar set. Empty input
/// leaves the weights untouched and warns. Zero epochs is the identity.
pub fn finetune_on_exemplars(
    params: &mut MlpParams,
    exemplars: &[&Example],
    mask: &[bool],
    cfg: &FinetuneConfig,
    stream: &mut ChaCha8Rng,
) -> Result<bool> {
    if exemplars.is_empty() {
        log::warn!("no exemplars stored; skipping finetune");
        return Ok(false);
    }
    if cfg.epochs == 0 {
        return Ok(true);
    }
    let shapes: Vec<(usize, usize)> = params
        .layers
        .iter()
        .flat_map(|(w, b)| [(w.rows(), w.cols()), (b.rows(), b.cols())])
        .collect();
    let mut opt = Adam::new(cfg.lr, 0.0, &shapes);
    let dim = exemplars[0].x.len();
    for _ in 0..cfg.epochs {
        let order = rng::shuffled_indices(stream, exemplars.len());
        for batch_idx in order.chunks(cfg.batch_size) {
            let mut flat = Vec::with_capacity(batch_idx.len() * dim);
            let mut labels = Vec::with_capacity(batch_idx.len());
            for &i in batch_idx {
                flat.extend_from_slice(&exemplars[i].x);
                labels.push(exemplars[i].label);
            }
            let x = Tensor2::from_vec(batch_idx.len(), dim, flat)?;
            let mut g = Graph::new();
            let (loss, param_nodes) = classifier::loss_graph(&mut g, params, &x, &labels, mask)?;
            g.backward(loss)?;
            let grads: Vec<Tensor2> = param_nodes
                .iter()
                .map(|&n| g.grad(n).cloned().expect("all layers reach the loss"))
                .collect();
            let mut targets: Vec<&mut Tensor2> = Vec::with_capacity(grads.len());
            for (w, b) in params.layers.iter_mut() {
                targets.push(w);
                targets.push(b);
            }
            opt.step(&mut targets, &grads)?;
        }
    }
    Ok(true)
}

/// Per-example most frequent label across members; ties go to the smallest
/// label. All members must cover the same examples in the same order.
pub fn majority_vote(member_labels: &[Vec<usize>], n_classes: usize) -> Result<Vec<usize>> {
    let first = member_labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("majority vote over zero members".into()))?;
    let n = first.len();
    for m in member_labels {
        if m.len() != n {
            return Err(Error::Contract(
                "ensemble members predicted different example counts".into(),
            ));
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut counts = vec![0usize; n_classes];
    for i in 0..n {
        counts.iter_mut().for_each(|c| *c = 0);
        for m in member_labels {
            let label = m[i];
            if label >= n_classes {
                return Err(Error::Contract(format!(
                    "vote for class {label} outside the {n_classes}-class space"
                )));
            }
            counts[label] += 1;
        }
        let mut best = 0usize;
        for c in 1..n_classes {
            // Strict > keeps the smallest index on ties.
            if counts[c] > counts[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

fn percent_correct(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / truth.len().max(1) as f64
}

/// Draws `cfg.ensemble` members from `source`, finetunes each on
/// `exemplars` under `mask`, records its predictions on every view, then
/// votes. At most one member's weights exist at a time.
#[allow(clippy::too_many_arguments)]
fn ensemble_sweep(
    source: &MemberSource,
    arch: &MlpArchitecture,
    exemplars: &[&Example],
    mask: &[bool],
    views: &[&crate::data::SplitView],
    cfg: &InferenceConfig,
    stream: &mut ChaCha8Rng,
    gauge: &mut ResidencyGauge,
) -> Result<SweepOutcome> {
    if cfg.ensemble == 0 {
        return Err(Error::InvalidArgument("ensemble size must be >= 1".into()));
    }
    let mut votes: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(cfg.ensemble); views.len()];
    let mut finetuned = true;
    for _ in 0..cfg.ensemble {
        gauge.on_materialize();
        let weights = match source {
            MemberSource::Decoder { vae, prior, onehot } => {
                vae.sample_model(prior, onehot, arch, stream)?
            }
            MemberSource::RandomInit => classifier::flatten(&init_mlp(arch, stream)),
        };
        let mut params = unflatten(&weights.arch, &weights.values)?;
        drop(weights);
        finetuned &= finetune_on_exemplars(&mut params, exemplars, mask, &cfg.finetune, stream)?;
        for (vi, view) in views.iter().enumerate() {
            votes[vi].push(classifier::predict_view(&params, view, mask)?);
        }
        drop(params);
        gauge.on_release();
    }

    let mut per_task_accuracy = Vec::with_capacity(views.len());
    for (vi, view) in views.iter().enumerate() {
        let pred = majority_vote(&votes[vi], arch.output_dim)?;
        let truth: Vec<usize> = (0..view.len()).map(|i| view.label(i)).collect();
        per_task_accuracy.push(percent_correct(&pred, &truth));
    }
    Ok(SweepOutcome {
        per_task_accuracy,
        finetuned,
        peak_resident: gauge.peak(),
    })
}

/// Task identity hidden: one aggregate prior and the union class mask, with
/// members finetuned on the pooled exemplars and scored on every seen
/// task's test set.
#[allow(clippy::too_many_arguments)]
pub fn task_agnostic_infer(
    vae: &WeightVae,
    store: &PriorStore,
    exemplars: &ExemplarStore,
    tasks: &[&TaskDataset],
    arch: &MlpArchitecture,
    cfg: &InferenceConfig,
    seed: u64,
    skip_vae: bool,
) -> Result<SweepOutcome> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no test sets to score".into()));
    }
    let seen: Vec<usize> = tasks.iter().flat_map(|t| t.classes.clone()).collect();
    let mask = class_mask(arch.output_dim, &seen);
    let pooled = exemplars.pooled();
    let views: Vec<&crate::data::SplitView> = tasks.iter().map(|t| &t.test).collect();
    let mut stream = rng::stream(seed, &[rng::scope::INFER, 0, tasks.len() as u64]);
    let mut gauge = ResidencyGauge::default();

    let source = if skip_vae {
        MemberSource::RandomInit
    } else {
        MemberSource::Decoder {
            vae,
            prior: aggregate_priors(store)?,
            onehot: vae.mean_onehot(store.len())?,
        }
    };
    ensemble_sweep(
        &source,
        arch,
        &pooled,
        &mask,
        &views,
        cfg,
        &mut stream,
        &mut gauge,
    )
}

/// Task identity known: each task gets its own prior snapshot, exemplars,
/// and class mask, with a separate vote per task.
#[allow(clippy::too_many_arguments)]
pub fn task_aware_infer(
    vae: &WeightVae,
    store: &PriorStore,
    exemplars: &ExemplarStore,
    tasks: &[&TaskDataset],
    arch: &MlpArchitecture,
    cfg: &InferenceConfig,
    seed: u64,
    skip_vae: bool,
) -> Result<SweepOutcome> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no test sets to score".into()));
    }
    let mut per_task_accuracy = Vec::with_capacity(tasks.len());
    let mut finetuned = true;
    let mut gauge = ResidencyGauge::default();
    for task in tasks {
        let j = task.task_index;
        if j >= store.len() && !skip_vae {
            return Err(Error::InvalidArgument(format!(
                "task {j} has no trained prior"
            )));
        }
        let mask = class_mask(arch.output_dim, &task.classes);
        let own: Vec<&Example> = exemplars.task_examples(j).iter().collect();
        let mut stream = rng::stream(seed, &[rng::scope::INFER, 1, j as u64]);
        let source = if skip_vae {
            MemberSource::RandomInit
        } else {
            MemberSource::Decoder {
                vae,
                prior: store.get(j)?.clone(),
                onehot: vae.task_onehot(j)?,
            }
        };
        let outcome = ensemble_sweep(
            &source,
            arch,
            &own,
            &mask,
            &[&task.test],
            cfg,
            &mut stream,
            &mut gauge,
        )?;
        per_task_accuracy.push(outcome.per_task_accuracy[0]);
        finetuned &= outcome.finetuned;
    }
    Ok(SweepOutcome {
        per_task_accuracy,
        finetuned,
        peak_resident: gauge.peak(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_synthetic_tasks, SyntheticSpec};
    use crate::vae::{train_task_vae, VaeConfig, VaeTrainConfig};

    #[test]
    fn aggregate_of_one_is_identity() {
        let mut store = PriorStore::new();
        let p = GaussianDiag {
            mean: vec![0.7, -0.3],
            log_var: vec![0.2, -0.9],
        };
        store.push(p.clone());
        assert_eq!(aggregate_priors(&store).unwrap(), p);
        assert!(aggregate_priors(&PriorStore::new()).is_err());
    }

    #[test]
    fn aggregate_averages_variances_not_log_variances() {
        let mut store = PriorStore::new();
        store.push(GaussianDiag {
            mean: vec![0.0],
            log_var: vec![0.0],
        });
        store.push(GaussianDiag {
            mean: vec![2.0],
            log_var: vec![3.0f64.ln()],
        });
        let agg = aggregate_priors(&store).unwrap();
        assert!((agg.mean[0] - 1.0).abs() < 1e-12);
        assert!((agg.log_var[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_matches_brute_force_means() {
        let mut store = PriorStore::new();
        let mut rng = rng::stream(3, &[rng::scope::INFER, 0]);
        let k = 7;
        let dim = 4;
        for _ in 0..k {
            store.push(GaussianDiag {
                mean: rng::normal_vec(&mut rng, dim),
                log_var: rng::normal_vec(&mut rng, dim),
            });
        }
        let agg = aggregate_priors(&store).unwrap();
        for i in 0..dim {
            let mean: f64 = store.iter().map(|p| p.mean[i]).sum::<f64>() / k as f64;
            let var: f64 = store.iter().map(|p| p.log_var[i].exp()).sum::<f64>() / k as f64;
            assert!((agg.mean[i] - mean).abs() < 1e-12);
            assert!((agg.log_var[i] - var.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn majority_vote_histogram_and_ties() {
        let votes = vec![vec![1, 1], vec![1, 2], vec![2, 2]];
        assert_eq!(majority_vote(&votes, 3).unwrap(), vec![1, 2]);
        // Two-way tie goes to the smaller label.
        let tie = vec![vec![2], vec![1]];
        assert_eq!(majority_vote(&tie, 3).unwrap(), vec![1]);
        assert!(majority_vote(&[], 3).is_err());
    }

    #[test]
    fn majority_vote_matches_histogram_oracle_and_ignores_member_order() {
        let mut rng = rng::stream(5, &[rng::scope::INFER, 1]);
        use rand::Rng;
        let members = 30;
        let n = 40;
        let n_classes = 6;
        let mut votes: Vec<Vec<usize>> = (0..members)
            .map(|_| (0..n).map(|_| rng.gen_range(0..n_classes)).collect())
            .collect();
        let got = majority_vote(&votes, n_classes).unwrap();
        for i in 0..n {
            let mut hist = vec![0usize; n_classes];
            for m in &votes {
                hist[m[i]] += 1;
            }
            let best = hist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            assert_eq!(got[i], best);
        }
        votes.reverse();
        assert_eq!(majority_vote(&votes, n_classes).unwrap(), got);
    }

    #[test]
    fn finetune_improves_exemplar_fit_and_zero_epochs_is_identity() {
        let spec = SyntheticSpec {
            n_tasks: 1,
            classes_per_task: 2,
            dim: 6,
            n_train_per_class: 40,
            n_test_per_class: 10,
            separation: 4.0,
        };
        let tasks = build_synthetic_tasks(&spec, 8).unwrap();
        let arch = MlpArchitecture::new(6, vec![8], 2);
        let mask = class_mask(2, &tasks[0].classes);
        let exemplars: Vec<Example> = (0..40).map(|i| tasks[0].train.example(i)).collect();
        let refs: Vec<&Example> = exemplars.iter().collect();

        let mut stream = rng::stream(4, &[rng::scope::FINETUNE, 0]);
        let mut params = init_mlp(&arch, &mut stream);
        let before = exemplar_accuracy(&params, &refs, &mask);

        let frozen = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        let w0 = classifier::flatten(&params);
        finetune_on_exemplars(&mut params, &refs, &mask, &frozen, &mut stream).unwrap();
        assert_eq!(classifier::flatten(&params).values, w0.values);

        let cfg = FinetuneConfig {
            epochs: 5,
            ..FinetuneConfig::default()
        };
        assert!(finetune_on_exemplars(&mut params, &refs, &mask, &cfg, &mut stream).unwrap());
        let after = exemplar_accuracy(&params, &refs, &mask);
        assert!(after >= before, "finetune regressed: {before} -> {after}");

        // Empty pool: untouched weights, flagged false.
        let w1 = classifier::flatten(&params);
        let did = finetune_on_exemplars(&mut params, &[], &mask, &cfg, &mut stream).unwrap();
        assert!(!did);
        assert_eq!(classifier::flatten(&params).values, w1.values);
    }

    fn exemplar_accuracy(params: &MlpParams, exemplars: &[&Example], mask: &[bool]) -> f64 {
        let dim = exemplars[0].x.len();
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        for e in exemplars {
            flat.extend_from_slice(&e.x);
            labels.push(e.label);
        }
        let x = Tensor2::from_vec(exemplars.len(), dim, flat).unwrap();
        let logits = classifier::forward_logits(params, &x).unwrap();
        let pred = classifier::predict_masked(&logits, mask);
        percent_correct(&pred, &labels)
    }

    /// End-to-end on separable synthetic data: fit one task, then check both
    /// inference modes score well and hold the memory contract.
    #[test]
    fn both_modes_work_on_synthetic_data() {
        let spec = SyntheticSpec {
            n_tasks: 2,
            classes_per_task: 2,
            dim: 8,
            n_train_per_class: 300,
            n_test_per_class: 25,
            separation: 8.0,
        };
        let tasks = build_synthetic_tasks(&spec, 21).unwrap();
        let arch = MlpArchitecture::new(8, vec![10], 4);
        let vae_config = VaeConfig {
            chunk_size: 30,
            latent_dim: 2,
            hidden_dim: 16,
            max_tasks: 2,
            standard_normal_prior: false,
        };
        let mut vinit = rng::stream(21, &[rng::scope::VAE_TRAIN]);
        let mut vae = WeightVae::new(vae_config, &mut vinit);
        let mut store = PriorStore::new();
        let mut exemplars = ExemplarStore::new(80);
        let init = classifier::init_mlp(&arch, &mut rng::stream(21, &[rng::scope::INIT]));

        for task in &tasks {
            let t = task.task_index;
            let mask = class_mask(4, &task.classes);
            let stream: Vec<Example> =
                (0..task.train.len()).map(|i| task.train.example(i)).collect();
            let (models, _) = classifier::train_base_models(
                &init,
                stream.iter().cloned(),
                &mask,
                &classifier::OnlineConfig::default(),
                4,
                t,
                21,
                |_| {},
            )
            .unwrap();
            let flat = models.models;
            let cfg = VaeTrainConfig {
                epochs: 60,
                lr: 1e-2,
                aux_clf_weight: None,
                aux_batch_size: 10,
            };
            train_task_vae(&mut vae, &flat, t, &cfg, &mut store, 21, None).unwrap();
            let mut res = crate::data::Reservoir::new(40, 21, t);
            for ex in &stream {
                res.offer(ex.clone());
            }
            exemplars.admit(res.into_items(), 21).unwrap();
        }

        let refs: Vec<&TaskDataset> = tasks.iter().collect();
        let cfg = InferenceConfig {
            ensemble: 7,
            finetune: FinetuneConfig {
                epochs: 8,
                ..FinetuneConfig::default()
            },
        };
        let aware = task_aware_infer(&vae, &store, &exemplars, &refs, &arch, &cfg, 21, false)
            .unwrap();
        assert_eq!(aware.per_task_accuracy.len(), 2);
        assert_eq!(aware.peak_resident, 1);
        assert!(aware.finetuned);
        for (t, acc) in aware.per_task_accuracy.iter().enumerate() {
            assert!(*acc > 75.0, "task {t} accuracy {acc}");
        }

        let agnostic =
            task_agnostic_infer(&vae, &store, &exemplars, &refs, &arch, &cfg, 21, false).unwrap();
        assert_eq!(agnostic.peak_resident, 1);
        let mean: f64 =
            agnostic.per_task_accuracy.iter().sum::<f64>() / agnostic.per_task_accuracy.len() as f64;
        assert!(mean > 50.0, "agnostic mean accuracy {mean}");

        // Ablation path: random members, still one resident at a time.
        let ablate = task_agnostic_infer(&vae, &store, &exemplars, &refs, &arch, &cfg, 21, true)
            .unwrap();
        assert_eq!(ablate.peak_resident, 1);
    }
}
