//! Trains a conditional autoencoder on the flattened weights of several
//! task classifiers, then samples brand-new classifiers from the learned
//! task prior and scores them: raw, as a voting ensemble, and after a short
//! finetune on stored exemplars, exactly the chain inference uses.
//!
//! Weight vectors are split into fixed-size chunks so the autoencoder stays
//! small; each chunk is conditioned on the task one-hot plus a positional
//! encoding, and the full vector is reassembled chunk by chunk.
//!
//! Run with: cargo run --example weight_generation

use metacl::chunking;
use metacl::classifier::{self, class_mask, MlpArchitecture, OnlineConfig};
use metacl::data::{build_synthetic_tasks, Example, Reservoir, SyntheticSpec};
use metacl::inference::{finetune_on_exemplars, majority_vote, FinetuneConfig};
use metacl::rng;
use metacl::vae::{train_task_vae, PriorStore, VaeConfig, VaeTrainConfig, WeightVae};

fn main() -> metacl::Result<()> {
    let spec = SyntheticSpec {
        n_tasks: 1,
        classes_per_task: 2,
        dim: 8,
        n_train_per_class: 300,
        n_test_per_class: 50,
        separation: 8.0,
    };
    let seed = 21;
    let task = &build_synthetic_tasks(&spec, seed)?[0];
    let arch = MlpArchitecture::new(spec.dim, vec![10], 2);
    let mask = class_mask(2, &task.classes);

    let mut reservoir = Reservoir::new(40, seed, 0);
    let stream = (0..task.train.len()).map(|i| task.train.example(i));
    let shared = classifier::init_mlp(&arch, &mut rng::stream(seed, &[rng::scope::INIT]));
    let (set, _) = classifier::train_base_models(
        &shared,
        stream,
        &mask,
        &OnlineConfig::default(),
        4,
        0,
        seed,
        |ex| reservoir.offer(ex.clone()),
    )?;

    let chunk_size = 30;
    let n_chunks = chunking::chunk_count(arch.param_count(), chunk_size);
    println!(
        "{} parameters per model -> {n_chunks} chunks of {chunk_size} (last one zero-padded)",
        arch.param_count()
    );
    for (m, flat) in set.models.iter().enumerate() {
        let params = classifier::unflatten(&arch, &flat.values)?;
        let acc = classifier::evaluate(&params, &task.test, &mask)?;
        println!("trained model {m}: {acc:.1}%");
    }

    let config = VaeConfig {
        chunk_size,
        latent_dim: 2,
        hidden_dim: 16,
        max_tasks: 1,
        standard_normal_prior: false,
    };
    let mut init = rng::stream(seed, &[rng::scope::INIT, u64::MAX]);
    let mut vae = WeightVae::new(config, &mut init);
    let mut store = PriorStore::new();
    let train_cfg = VaeTrainConfig {
        epochs: 60,
        lr: 1e-2,
        ..VaeTrainConfig::default()
    };
    let stats = train_task_vae(&mut vae, &set.models, 0, &train_cfg, &mut store, seed, None)?;
    println!(
        "autoencoder: {} steps, per-chunk loss {:.3} -> {:.3}",
        stats.steps, stats.first_epoch_loss, stats.last_epoch_loss
    );

    // The frozen snapshot is the distribution new classifiers come from.
    // Raw draws blend the base models (each chunk samples its own latent),
    // so single samples are rough; voting and a short exemplar finetune are
    // what inference layers on top.
    let prior = store.get(0)?;
    let onehot = vae.task_onehot(0)?;
    let mut draw = rng::stream(seed, &[rng::scope::INFER, 0]);
    let truth: Vec<usize> = (0..task.test.len()).map(|i| task.test.label(i)).collect();

    let mut member_preds = Vec::new();
    for s in 0..7 {
        let sampled = vae.sample_model(prior, &onehot, &arch, &mut draw)?;
        let params = classifier::unflatten(&arch, &sampled.values)?;
        let acc = classifier::evaluate(&params, &task.test, &mask)?;
        if s < 3 {
            println!("sampled model {s}: {acc:.1}% raw (no gradient step ever touched it)");
        }
        member_preds.push(classifier::predict_view(&params, &task.test, &mask)?);
    }
    let voted = majority_vote(&member_preds, 2)?;
    let hits = voted.iter().zip(&truth).filter(|(p, t)| p == t).count();
    println!("7 raw samples, majority vote: {:.1}%", 100.0 * hits as f64 / truth.len() as f64);

    let exemplars: Vec<Example> = reservoir.into_items();
    let refs: Vec<&Example> = exemplars.iter().collect();
    let sampled = vae.sample_model(prior, &onehot, &arch, &mut draw)?;
    let mut params = classifier::unflatten(&arch, &sampled.values)?;
    let before = classifier::evaluate(&params, &task.test, &mask)?;
    let ft = FinetuneConfig {
        epochs: 8,
        lr: 1e-3,
        batch_size: 10,
    };
    let mut ft_stream = rng::stream(seed, &[rng::scope::FINETUNE, 0]);
    finetune_on_exemplars(&mut params, &refs, &mask, &ft, &mut ft_stream)?;
    let after = classifier::evaluate(&params, &task.test, &mask)?;
    println!(
        "one sample finetuned on {} stored exemplars: {before:.1}% -> {after:.1}%",
        refs.len()
    );
    Ok(())
}
