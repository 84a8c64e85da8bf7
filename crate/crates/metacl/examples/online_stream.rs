//! Online single-pass training: several classifiers share one pass over a
//! task's stream, each taking roughly half the points through its own
//! Bernoulli gate, while a reservoir keeps a uniform exemplar sample.
//!
//! Run with: cargo run --example online_stream

use metacl::classifier::{self, class_mask, MlpArchitecture, OnlineConfig};
use metacl::data::{build_synthetic_tasks, Reservoir, SyntheticSpec};
use metacl::rng::{self, scope};

fn main() -> metacl::Result<()> {
    let spec = SyntheticSpec {
        n_tasks: 1,
        classes_per_task: 3,
        dim: 10,
        n_train_per_class: 250,
        n_test_per_class: 60,
        separation: 6.0,
    };
    let seed = 13;
    let task = &build_synthetic_tasks(&spec, seed)?[0];
    let arch = MlpArchitecture::new(spec.dim, vec![12], 3);
    let mask = class_mask(3, &task.classes);

    let mut reservoir = Reservoir::new(40, seed, task.task_index);
    let stream = (0..task.train.len()).map(|i| task.train.example(i));
    let init = classifier::init_mlp(&arch, &mut rng::stream(seed, &[scope::INIT]));
    let (set, stream_len) = classifier::train_base_models(
        &init,
        stream,
        &mask,
        &OnlineConfig::default(),
        5,
        task.task_index,
        seed,
        |ex| reservoir.offer(ex.clone()),
    )?;

    println!("stream length: {stream_len} points, each seen exactly once");
    for (m, (flat, st)) in set.models.iter().zip(&set.stats).enumerate() {
        let params = classifier::unflatten(&arch, &flat.values)?;
        let acc = classifier::evaluate(&params, &task.test, &mask)?;
        println!(
            "model {m}: accepted {}/{} points ({} optimizer steps), test accuracy {acc:.1}%",
            st.accepted, st.offered, st.steps
        );
        assert_eq!(st.offered, stream_len);
    }

    let kept = reservoir.into_items();
    println!("reservoir kept {} exemplars out of the {stream_len}-point stream", kept.len());
    Ok(())
}
