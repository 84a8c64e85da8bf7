//! Checks reverse-mode gradients against central finite differences for both
//! training losses: the masked cross-entropy of the task classifier and the
//! variational loss of the weight autoencoder.
//!
//! Run with: cargo run --example gradient_check

use metacl::chunking;
use metacl::classifier::{init_mlp, MlpArchitecture};
use metacl::graph::grad_check;
use metacl::rng;
use metacl::tensor::Tensor2;
use metacl::vae::{PriorSource, VaeConfig, VaeNodes, WeightVae};

fn main() -> metacl::Result<()> {
    // Classifier loss: forward the MLP manually from the checked parameter
    // nodes so every weight and bias participates.
    let arch = MlpArchitecture::new(6, vec![5], 4);
    let mut rng_init = rng::stream(7, &[rng::scope::INIT, 0, 0]);
    let params = init_mlp(&arch, &mut rng_init);
    let flat: Vec<Tensor2> = params
        .layers
        .iter()
        .flat_map(|(w, b)| [w.clone(), b.clone()])
        .collect();

    let x = Tensor2::from_fn(3, 6, |i, j| ((1 + i * 6 + j) as f64 * 0.37).sin());
    let labels = [0usize, 2, 3];
    let mask = [true, false, true, true];
    let n_layers = params.layers.len();
    let clf_err = grad_check(&flat, 1e-5, |g, ids| {
        let mut h = g.input(x.clone());
        for li in 0..n_layers {
            h = g.matmul(h, ids[2 * li])?;
            h = g.add_bias(h, ids[2 * li + 1])?;
            if li + 1 != n_layers {
                h = g.relu(h);
            }
        }
        g.softmax_xent(h, &labels, &mask)
    })?;
    println!("classifier loss  max relative gradient error: {clf_err:.3e}");

    // Variational loss with the learned prior, noise frozen outside the
    // closure so the loss is a deterministic function of the parameters.
    let config = VaeConfig {
        chunk_size: 6,
        latent_dim: 2,
        hidden_dim: 5,
        max_tasks: 3,
        standard_normal_prior: false,
    };
    let mut rng_vae = rng::stream(9, &[rng::scope::INIT]);
    let vae = WeightVae::new(config, &mut rng_vae);
    let chunk: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
    let pos = chunking::chunk_index_encoding(2, 5);
    let noise = vec![0.4, -1.1];

    let vae_params: Vec<Tensor2> = {
        let mut v = vae.clone();
        v.parameters_mut().map(|t| t.clone()).to_vec()
    };
    let vae_err = grad_check(&vae_params, 1e-5, |g, ids| {
        let nodes = VaeNodes {
            enc_w1: ids[0],
            enc_b1: ids[1],
            enc_w_mean: ids[2],
            enc_b_mean: ids[3],
            enc_w_logvar: ids[4],
            enc_b_logvar: ids[5],
            dec_w1: ids[6],
            dec_b1: ids[7],
            dec_w_out: ids[8],
            dec_b_out: ids[9],
            prior_w_mean: ids[10],
            prior_w_logvar: ids[11],
        };
        let (loss, _) = vae.elbo_graph(g, &nodes, &chunk, 1, &pos, &PriorSource::Learned, &noise)?;
        Ok(loss)
    })?;
    println!("variational loss max relative gradient error: {vae_err:.3e}");

    assert!(clf_err < 1e-4 && vae_err < 1e-4);
    println!("both under the 1e-4 tolerance");
    Ok(())
}
