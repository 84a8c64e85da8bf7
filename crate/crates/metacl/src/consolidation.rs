//! Replay-based consolidation of the weight autoencoder.
//!
//! After each new task's fit, the autoencoder is refreshed on its own
//! synthetic output: for every task seen so far, latents are drawn from that
//! task's frozen prior snapshot, decoded into pseudo weight chunks, and the
//! network is trained to reconstruct them under the same frozen prior. Only
//! encoder and decoder parameters move; the prior matrices and the snapshot
//! store are never written.

use sha2::{Digest, Sha256};

use crate::chunking;
use crate::error::Result;
use crate::graph::Graph;
use crate::optim::AdaGrad;
use crate::rng;
use crate::tensor::Tensor2;
use crate::vae::{PriorSource, PriorStore, WeightVae};

#[derive(Debug, Clone)]
pub struct ConsolidationConfig {
    /// Pseudo weight vectors drawn per task per epoch.
    pub pseudo_models: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            pseudo_models: 5,
            epochs: 2,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsolidationStats {
    pub tasks_replayed: usize,
    /// Optimizer steps taken: one per task per epoch.
    pub steps: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

/// SHA-256 over the exact bit patterns of everything consolidation must not
/// touch: both prior matrices and every frozen snapshot.
pub fn freeze_digest(vae: &WeightVae, store: &PriorStore) -> [u8; 32] {
    let mut h = Sha256::new();
    let (means, log_vars) = vae.prior_matrices();
    for t in [means, log_vars] {
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    for snap in store.iter() {
        for v in snap.mean.iter().chain(snap.log_var.iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

/// One refresh pass over every task with a snapshot in `store`.
///
/// Per epoch and task: draw `pseudo_models` latents from the frozen prior
/// (one latent shared by all of a pseudo-model's chunks), decode them with
/// the current decoder into fixed targets, accumulate reconstruction
/// gradients against the frozen prior over all pseudo-chunks, then apply a
/// single AdaGrad step to the encoder/decoder. Returns per-chunk mean loss
/// for the first and last epoch.
pub fn consolidate(
    vae: &mut WeightVae,
    store: &PriorStore,
    n_chunks: usize,
    config: &ConsolidationConfig,
    seed: u64,
) -> Result<ConsolidationStats> {
    if store.is_empty() {
        return Ok(ConsolidationStats {
            tasks_replayed: 0,
            steps: 0,
            first_epoch_loss: 0.0,
            last_epoch_loss: 0.0,
        });
    }
    let tasks = store.len();
    let latent = vae.config.latent_dim;
    let mut stream = rng::stream(seed, &[rng::scope::CONSOLIDATE, tasks as u64]);

    let shapes: Vec<(usize, usize)> = {
        let mut v = vae.clone();
        v.autoencoder_parameters_mut()
            .map(|t| (t.rows(), t.cols()))
            .to_vec()
    };
    let mut opt = AdaGrad::new(config.lr, &shapes);

    let mut stats = ConsolidationStats {
        tasks_replayed: tasks,
        steps: 0,
        first_epoch_loss: 0.0,
        last_epoch_loss: 0.0,
    };

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_terms = 0usize;
        for t in 0..tasks {
            let prior = store.get(t)?.clone();
            let onehot = vae.task_onehot(t)?;
            let mut acc: Vec<Tensor2> =
                shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect();
            for _ in 0..config.pseudo_models {
                // One latent describes the whole pseudo weight vector.
                let z = prior.sample(&mut stream);
                let mut target = vec![0.0; vae.config.chunk_size];
                for ci in 0..n_chunks {
                    let pos = chunking::chunk_index_encoding(ci, n_chunks);
                    vae.decode_into(&z, &onehot, &pos, &mut target);
                    let noise = rng::normal_vec(&mut stream, latent);
                    let mut g = Graph::new();
                    let nodes = vae.param_nodes(&mut g);
                    let (loss, _) = vae.elbo_graph(
                        &mut g,
                        &nodes,
                        &target,
                        t,
                        &pos,
                        &PriorSource::Frozen(&prior),
                        &noise,
                    )?;
                    epoch_loss += g.value(loss).item()?;
                    epoch_terms += 1;
                    g.backward(loss)?;
                    for (a, &n) in acc.iter_mut().zip(nodes.autoencoder().iter()) {
                        if let Some(gr) = g.grad(n) {
                            a.add_scaled(gr, 1.0)?;
                        }
                    }
                }
            }
            opt.step(&mut vae.autoencoder_parameters_mut(), &acc)?;
            stats.steps += 1;
        }
        let mean = epoch_loss / epoch_terms as f64;
        if epoch == 0 {
            stats.first_epoch_loss = mean;
        }
        stats.last_epoch_loss = mean;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::vae::{train_task_vae, VaeConfig, VaeTrainConfig};

    fn fitted_vae(tasks: usize) -> (WeightVae, PriorStore) {
        let config = VaeConfig {
            chunk_size: 8,
            latent_dim: 2,
            hidden_dim: 10,
            max_tasks: 4,
            standard_normal_prior: false,
        };
        let mut r = rng::stream(7, &[rng::scope::INIT, 70]);
        let mut vae = WeightVae::new(config, &mut r);
        let mut store = PriorStore::new();
        let arch = crate::classifier::MlpArchitecture::new(3, vec![4], 2);
        let cfg = VaeTrainConfig {
            epochs: 3,
            lr: 1e-2,
            aux_clf_weight: None,
            aux_batch_size: 10,
        };
        for t in 0..tasks {
            let models: Vec<_> = (0..2)
                .map(|i| {
                    let mut mr = rng::stream(100 + t as u64 * 10 + i, &[rng::scope::INIT]);
                    crate::classifier::flatten(&crate::classifier::init_mlp(&arch, &mut mr))
                })
                .collect();
            train_task_vae(&mut vae, &models, t, &cfg, &mut store, 31 + t as u64, None).unwrap();
        }
        (vae, store)
    }

    #[test]
    fn priors_and_snapshots_are_bitwise_frozen() {
        let (mut vae, store) = fitted_vae(2);
        let before = freeze_digest(&vae, &store);
        let enc_before = vae.encode(&[0.1; 8], &vae.task_onehot(0).unwrap(), &[0.0, 0.0, 1.0]);

        let cfg = ConsolidationConfig {
            pseudo_models: 2,
            epochs: 2,
            lr: 1e-3,
        };
        let stats = consolidate(&mut vae, &store, 4, &cfg, 5).unwrap();

        assert_eq!(freeze_digest(&vae, &store), before);
        assert_eq!(stats.tasks_replayed, 2);
        assert_eq!(stats.steps, 4);
        // The autoencoder itself must have moved.
        let enc_after = vae.encode(&[0.1; 8], &vae.task_onehot(0).unwrap(), &[0.0, 0.0, 1.0]);
        assert_ne!(enc_before, enc_after);
    }

    #[test]
    fn replay_loss_decreases_over_epochs() {
        let (mut vae, store) = fitted_vae(2);
        let cfg = ConsolidationConfig {
            pseudo_models: 3,
            epochs: 6,
            lr: 1e-2,
        };
        let stats = consolidate(&mut vae, &store, 4, &cfg, 9).unwrap();
        assert!(
            stats.last_epoch_loss < stats.first_epoch_loss,
            "{} -> {}",
            stats.first_epoch_loss,
            stats.last_epoch_loss
        );
    }

    #[test]
    fn consolidation_is_deterministic_in_the_seed() {
        let (vae, store) = fitted_vae(1);
        let cfg = ConsolidationConfig::default();
        let mut a = vae.clone();
        let mut b = vae.clone();
        consolidate(&mut a, &store, 3, &cfg, 42).unwrap();
        consolidate(&mut b, &store, 3, &cfg, 42).unwrap();
        let pa = {
            let mut v = a.clone();
            v.parameters_mut().map(|t| t.clone()).to_vec()
        };
        let pb = {
            let mut v = b.clone();
            v.parameters_mut().map(|t| t.clone()).to_vec()
        };
        assert_eq!(pa, pb);
    }

    #[test]
    fn empty_store_is_a_no_op() {
        let (vae, _) = fitted_vae(1);
        let mut v = vae.clone();
        let stats = consolidate(&mut v, &PriorStore::new(), 3, &ConsolidationConfig::default(), 1)
            .unwrap();
        assert_eq!(stats.steps, 0);
    }
}
