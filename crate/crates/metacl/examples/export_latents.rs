//! Exports latent draws from each task's frozen prior after a short run,
//! the raw material for visualizing how tasks separate in latent space.
//!
//! Run with: cargo run --example export_latents

use metacl::harness::{export_latents_for_run, run, DatasetId, EvalMode, RunConfig};

fn main() -> metacl::Result<()> {
    let out = std::env::temp_dir().join("metacl_latents_demo");
    let config = RunConfig {
        dataset: DatasetId::Synthetic,
        seeds: vec![3],
        mode: EvalMode::TaskAgnostic,
        n_tasks: 3,
        base_models: 3,
        hidden: vec![8],
        chunk_size: 30,
        vae_hidden: 12,
        vae_epochs: 20,
        vae_lr: 1e-2,
        ensemble: 3,
        finetune_epochs: 2,
        buffer: 60,
        syn_dim: 6,
        syn_train_per_class: 100,
        syn_test_per_class: 10,
        out_dir: out.clone(),
        ..RunConfig::default()
    };
    run(&config)?;

    // 20 draws per task from the persisted autoencoder state.
    let csv_path = export_latents_for_run(&out, 20, 0)?;
    let text = std::fs::read_to_string(&csv_path)?;
    let mut lines = text.lines();
    println!("wrote {} with {} rows:", csv_path.display(), text.lines().count() - 1);
    println!("  {}", lines.next().unwrap());
    for line in lines.take(4) {
        println!("  {line}");
    }
    println!("  ...");
    println!("equivalent CLI: metacl export-latents --run {} --per-task 20", out.display());
    Ok(())
}
