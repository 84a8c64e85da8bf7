//! Scratch probe: which autoencoder schedule reaches functional decodes
//! within a small epoch budget, given base models that share one init.

use std::io::Write as _;

use metacl::chunking;
use metacl::classifier::{
    class_mask, evaluate, flatten, init_mlp, unflatten, MlpArchitecture, OnlineConfig,
    OnlineTrainer, WeightVector,
};
use metacl::data::{build_split_mnist, load_idx, SplitView};
use metacl::error::Result;
use metacl::rng::{self, scope};
use metacl::vae::{train_task_vae, PriorStore, VaeConfig, VaeTrainConfig, WeightVae};

const SEED: u64 = 1;
const CHUNK: usize = 300;

fn flush() {
    std::io::stdout().flush().ok();
}

/// Posterior-mean round trip of `scaled` through `vae`; returns percent
/// accuracy of the un-scaled reconstruction and per-tensor residual RMS in
/// raw weight units (w1, b1, w2, b2, w3, b3).
fn recon_eval(
    vae: &WeightVae,
    scaled: &WeightVector,
    scale: f64,
    view: &SplitView,
    mask: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let onehot = vae.task_onehot(0)?;
    let total = scaled.arch.param_count();
    let chunks = chunking::chunk(&scaled.values, CHUNK, 0)?;
    let n = chunks.len();
    let mut out = vec![0.0; CHUNK];
    let mut values = Vec::with_capacity(n * CHUNK);
    for (ci, ch) in chunks.iter().enumerate() {
        let pos = chunking::chunk_index_encoding(ci, n);
        let q = vae.encode(&ch.values, &onehot, &pos);
        vae.decode_into(&q.mean, &onehot, &pos, &mut out);
        values.extend_from_slice(&out);
    }
    values.truncate(total);

    let mut seg_rms = Vec::new();
    let mut off = 0;
    for (i, o) in scaled.arch.layer_dims() {
        for len in [i * o, o] {
            let mut s = 0.0;
            for k in off..off + len {
                let d = (values[k] - scaled.values[k]) / scale;
                s += d * d;
            }
            seg_rms.push((s / len as f64).sqrt());
            off += len;
        }
    }

    for v in values.iter_mut() {
        *v /= scale;
    }
    let params = unflatten(&scaled.arch, &values)?;
    Ok((evaluate(&params, view, mask)?, seg_rms))
}

fn main() -> Result<()> {
    let root = std::env::var("METACL_DATA_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| std::path::PathBuf::from("data"));
    let mnist = root.join("mnist");
    let train = load_idx(
        &mnist.join("train-images-idx3-ubyte"),
        &mnist.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &mnist.join("t10k-images-idx3-ubyte"),
        &mnist.join("t10k-labels-idx1-ubyte"),
    )?;
    let tasks = build_split_mnist(&train, &test, 1000, SEED)?;
    let task = &tasks[0];
    let mask = class_mask(10, &task.classes);
    let arch = MlpArchitecture::new(784, vec![100, 100], 10);

    // 10 online models from ONE shared init, each with its own Bernoulli gate.
    let mut init_rng = rng::stream(SEED, &[scope::INIT, 0]);
    let shared = init_mlp(&arch, &mut init_rng);
    let mut trainers: Vec<OnlineTrainer> = (0..10)
        .map(|m| {
            let gate = rng::stream(SEED, &[scope::GATE, 0, m as u64]);
            OnlineTrainer::new(shared.clone(), OnlineConfig::default(), mask.clone(), gate)
        })
        .collect();
    for i in 0..task.train.len() {
        let ex = task.train.example(i);
        for t in trainers.iter_mut() {
            t.offer(&ex)?;
        }
    }
    let mut models: Vec<WeightVector> = Vec::new();
    for t in trainers {
        let (p, _) = t.finish()?;
        models.push(flatten(&p));
    }
    let m0 = evaluate(&unflatten(&arch, &models[0].values)?, &task.test, &mask)?;
    let rms = {
        let (mut s, mut n) = (0.0, 0usize);
        for m in &models {
            for &v in &m.values {
                s += v * v;
                n += 1;
            }
        }
        (s / n as f64).sqrt()
    };
    println!("base model 0: {m0:.1}%, weight rms {rms:.4}");
    flush();

    let variants: &[(&str, f64, usize, f64)] = &[
        ("raw    25ep lr1e-3", 1.0, 25, 1e-3),
        ("raw    25ep lr1e-2", 1.0, 25, 1e-2),
        ("raw    50ep lr1e-2", 1.0, 50, 1e-2),
        ("unit   25ep lr1e-3", 1.0 / rms, 25, 1e-3),
        ("down5x 25ep lr1e-3", 0.2, 25, 1e-3),
    ];
    for (vi, &(label, scale, epochs, lr)) in variants.iter().enumerate() {
        let scaled: Vec<WeightVector> = models
            .iter()
            .map(|m| WeightVector {
                arch: m.arch.clone(),
                values: m.values.iter().map(|v| v * scale).collect(),
            })
            .collect();
        let cfg = VaeConfig {
            chunk_size: CHUNK,
            latent_dim: 2,
            hidden_dim: 50,
            max_tasks: 5,
            standard_normal_prior: false,
        };
        let mut vae = WeightVae::new(cfg, &mut rng::stream(SEED, &[scope::VAE_TRAIN, 100]));
        let mut store = PriorStore::new();
        let tcfg = VaeTrainConfig {
            epochs,
            lr,
            aux_clf_weight: None,
            aux_batch_size: 10,
        };
        let stats = train_task_vae(&mut vae, &scaled, 0, &tcfg, &mut store, SEED, None)?;
        let (racc, seg) = recon_eval(&vae, &scaled[0], scale, &task.test, &mask)?;

        let onehot = vae.task_onehot(0)?;
        let mut srng = rng::stream(SEED, &[scope::INFER, 42, vi as u64]);
        let mut wv = vae.sample_model(store.get(0)?, &onehot, &arch, &mut srng)?;
        for v in wv.values.iter_mut() {
            *v /= scale;
        }
        let sacc = evaluate(&unflatten(&arch, &wv.values)?, &task.test, &mask)?;

        let seg_str: Vec<String> = seg.iter().map(|r| format!("{r:.4}")).collect();
        println!(
            "{label}: loss {:.4}->{:.4}, recon {racc:.1}%, sampled {sacc:.1}%, rms [{}]",
            stats.first_epoch_loss,
            stats.last_epoch_loss,
            seg_str.join(" ")
        );
        flush();
    }
    Ok(())
}
