//! End-to-end experiment runner: builds task streams, walks the
//! train/fit/consolidate/evaluate loop per seed, and persists metrics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{
    self, class_mask, init_mlp, train_base_models, MlpArchitecture, MlpParams, OnlineConfig,
};
use crate::consolidation::{consolidate, ConsolidationConfig};
use crate::data::{
    build_permuted_mnist, build_split_mnist, load_idx, ExemplarStore, Reservoir, SyntheticSpec,
    TaskDataset,
};
use crate::error::{Error, Result};
use crate::inference::{
    task_agnostic_infer, task_aware_infer, FinetuneConfig, InferenceConfig, SweepOutcome,
};
use crate::metrics::{format_mean_std, mean_std, AccuracyMatrix};
use crate::vae::{
    export_latents, train_task_vae, AuxBatchSource, PriorStore, VaeConfig, VaeTrainConfig,
    WeightVae,
};

/// Environment variable naming the directory that holds `mnist/*-ubyte`.
pub const DATA_DIR_ENV: &str = "METACL_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    SplitMnist,
    PermutedMnist,
    Synthetic,
}

impl DatasetId {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::SplitMnist => "split_mnist",
            DatasetId::PermutedMnist => "permuted_mnist",
            DatasetId::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    TaskAware,
    TaskAgnostic,
    /// Run both inference modes off one shared training pass. Persisted
    /// files get an `_aware` companion set.
    Both,
}

impl EvalMode {
    fn wants_agnostic(&self) -> bool {
        matches!(self, EvalMode::TaskAgnostic | EvalMode::Both)
    }

    fn wants_aware(&self) -> bool {
        matches!(self, EvalMode::TaskAware | EvalMode::Both)
    }
}

/// Everything a run needs, loadable from a flat TOML file. Any omitted key
/// takes the default shown by `RunConfig::default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetId,
    pub seeds: Vec<u64>,
    pub mode: EvalMode,

    /// Tasks for permuted/synthetic streams; split MNIST is always 5.
    pub n_tasks: usize,
    /// Training points drawn per task from the MNIST pool.
    pub train_per_task: usize,

    /// Base classifiers trained per task.
    pub base_models: usize,
    pub hidden: Vec<usize>,
    pub inclusion_p: f64,
    pub online_batch: usize,
    pub online_lr: f64,
    pub online_weight_decay: f64,

    pub chunk_size: usize,
    pub latent_dim: usize,
    pub vae_hidden: usize,
    pub vae_epochs: usize,
    pub vae_lr: f64,

    pub pseudo_models: usize,
    pub consolidation_epochs: usize,
    pub consolidation_lr: f64,

    pub ensemble: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub buffer: usize,

    pub skip_vae: bool,
    pub sn_prior: bool,
    pub aux_clf_loss: bool,
    pub aux_clf_weight: f64,
    /// One plain classifier trained straight through the task sequence,
    /// with no generation or replay; the naive reference point.
    pub single_baseline: bool,

    pub syn_classes_per_task: usize,
    pub syn_dim: usize,
    pub syn_train_per_class: usize,
    pub syn_test_per_class: usize,
    pub syn_separation: f64,

    /// Root holding `mnist/`; `METACL_DATA_DIR` overrides it.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetId::SplitMnist,
            seeds: vec![1, 2, 3, 4, 5],
            mode: EvalMode::TaskAgnostic,
            n_tasks: 10,
            train_per_task: 1000,
            base_models: 10,
            hidden: vec![100, 100],
            inclusion_p: 0.5,
            online_batch: 10,
            online_lr: 1e-3,
            online_weight_decay: 1e-3,
            chunk_size: 300,
            latent_dim: 2,
            vae_hidden: 50,
            vae_epochs: 25,
            vae_lr: 1e-3,
            pseudo_models: 5,
            consolidation_epochs: 2,
            consolidation_lr: 1e-3,
            ensemble: 30,
            finetune_epochs: 3,
            finetune_lr: 1e-3,
            finetune_batch: 10,
            buffer: 200,
            skip_vae: false,
            sn_prior: false,
            aux_clf_loss: false,
            aux_clf_weight: 1.0,
            single_baseline: false,
            syn_classes_per_task: 2,
            syn_dim: 16,
            syn_train_per_class: 200,
            syn_test_per_class: 50,
            syn_separation: 6.0,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("n_tasks", self.n_tasks),
            ("train_per_task", self.train_per_task),
            ("base_models", self.base_models),
            ("online_batch", self.online_batch),
            ("chunk_size", self.chunk_size),
            ("latent_dim", self.latent_dim),
            ("vae_hidden", self.vae_hidden),
            ("pseudo_models", self.pseudo_models),
            ("ensemble", self.ensemble),
            ("finetune_batch", self.finetune_batch),
            ("seeds", self.seeds.len()),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.inclusion_p) {
            return Err(Error::Config("inclusion_p must lie in [0, 1]".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("at least one hidden layer".into()));
        }
        if self.skip_vae && self.sn_prior {
            return Err(Error::Config(
                "skip_vae and sn_prior are mutually exclusive ablations".into(),
            ));
        }
        if self.single_baseline && (self.skip_vae || self.sn_prior || self.aux_clf_loss) {
            return Err(Error::Config(
                "single_baseline cannot combine with the generative flags".into(),
            ));
        }
        Ok(())
    }

    /// Data root: environment override, then config, then ./data.
    pub fn data_root(&self) -> PathBuf {
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn task_count(&self) -> usize {
        match self.dataset {
            DatasetId::SplitMnist => 5,
            _ => self.n_tasks,
        }
    }

    fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_tasks: self.n_tasks,
            classes_per_task: self.syn_classes_per_task,
            dim: self.syn_dim,
            n_train_per_class: self.syn_train_per_class,
            n_test_per_class: self.syn_test_per_class,
            separation: self.syn_separation,
        }
    }

    fn arch(&self, input_dim: usize, n_classes: usize) -> MlpArchitecture {
        MlpArchitecture::new(input_dim, self.hidden.clone(), n_classes)
    }

    fn online(&self) -> OnlineConfig {
        OnlineConfig {
            batch_size: self.online_batch,
            lr: self.online_lr,
            weight_decay: self.online_weight_decay,
            inclusion_p: self.inclusion_p,
        }
    }

    fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            ensemble: self.ensemble,
            finetune: FinetuneConfig {
                epochs: self.finetune_epochs,
                lr: self.finetune_lr,
                batch_size: self.finetune_batch,
            },
        }
    }

    /// The fields that must agree for runs to be aggregated together:
    /// everything except seeds and output location.
    pub fn aggregation_key(&self) -> RunConfig {
        let mut key = self.clone();
        key.seeds = Vec::new();
        key.out_dir = PathBuf::new();
        key.data_dir = None;
        key
    }
}

/// Builds the full task sequence for one seed.
pub fn build_tasks(config: &RunConfig, seed: u64) -> Result<Vec<TaskDataset>> {
    match config.dataset {
        DatasetId::Synthetic => {
            crate::data::build_synthetic_tasks(&config.synthetic_spec(), seed)
        }
        DatasetId::SplitMnist | DatasetId::PermutedMnist => {
            let root = config.data_root().join("mnist");
            let train = load_idx(
                &root.join("train-images-idx3-ubyte"),
                &root.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx(
                &root.join("t10k-images-idx3-ubyte"),
                &root.join("t10k-labels-idx1-ubyte"),
            )?;
            match config.dataset {
                DatasetId::SplitMnist => {
                    build_split_mnist(&train, &test, config.train_per_task, seed)
                }
                _ => build_permuted_mnist(
                    &train,
                    &test,
                    config.n_tasks,
                    config.train_per_task,
                    seed,
                ),
            }
        }
    }
}

/// Trained state carried out of a seed for later latent export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeState {
    pub vae: WeightVae,
    pub store: PriorStore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub agnostic: Option<AccuracyMatrix>,
    pub aware: Option<AccuracyMatrix>,
    /// False if any sweep had to skip finetuning for lack of exemplars.
    pub finetuned_throughout: bool,
    /// High-water mark of simultaneously assembled models over all sweeps.
    pub peak_resident: usize,
    /// Observed stream length per task; equals the task's train size when
    /// the single-pass contract holds.
    pub task_stream_lens: Vec<usize>,
    #[serde(skip)]
    pub vae_state: Option<VaeState>,
}

impl SeedOutcome {
    fn matrix_for(&self, aware: bool) -> Option<&AccuracyMatrix> {
        if aware {
            self.aware.as_ref()
        } else {
            self.agnostic.as_ref()
        }
    }
}

fn record_sweep(
    outcome: &SweepOutcome,
    matrix: &mut AccuracyMatrix,
    finetuned: &mut bool,
    peak: &mut usize,
) -> Result<()> {
    matrix.push_row(outcome.per_task_accuracy.clone())?;
    *finetuned &= outcome.finetuned;
    *peak = (*peak).max(outcome.peak_resident);
    Ok(())
}

/// Runs the whole task sequence for one seed and returns matrices for the
/// requested inference modes.
pub fn run_seed(config: &RunConfig, seed: u64) -> Result<SeedOutcome> {
    config.validate()?;
    let tasks = build_tasks(config, seed)?;
    let n_tasks = tasks.len();
    let input_dim = tasks[0].train.dim();
    let n_classes = 1 + tasks
        .iter()
        .flat_map(|t| t.classes.iter().copied())
        .max()
        .unwrap_or(0);
    let arch = config.arch(input_dim, n_classes);

    let n_chunks = crate::chunking::chunk_count(arch.param_count(), config.chunk_size);
    let vae_config = VaeConfig {
        chunk_size: config.chunk_size,
        latent_dim: config.latent_dim,
        hidden_dim: config.vae_hidden,
        max_tasks: n_tasks,
        n_chunks,
        standard_normal_prior: config.sn_prior,
    };
    let mut vae_rng = crate::rng::stream(seed, &[crate::rng::scope::INIT, u64::MAX]);
    let mut vae = WeightVae::new(vae_config, &mut vae_rng);
    let mut store = PriorStore::new();
    let mut exemplars = ExemplarStore::new(config.buffer);

    // One starting point for every base model of every task. Keeping the
    // whole run in a single init basin is what makes weight vectors
    // comparable coordinate-wise, which the chunk autoencoder depends on:
    // models grown from unrelated inits differ by hidden-unit permutations
    // that no small decoder can absorb.
    let shared_init =
        init_mlp(&arch, &mut crate::rng::stream(seed, &[crate::rng::scope::INIT]));

    // The lone sequential model when single_baseline is set.
    let mut single_model: Option<MlpParams> = None;

    let mut outcome = SeedOutcome {
        seed,
        agnostic: config.mode.wants_agnostic().then(AccuracyMatrix::new),
        aware: config.mode.wants_aware().then(AccuracyMatrix::new),
        finetuned_throughout: true,
        peak_resident: 0,
        task_stream_lens: Vec::with_capacity(n_tasks),
        vae_state: None,
    };

    for task in &tasks {
        let t = task.task_index;
        let mask = class_mask(n_classes, &task.classes);
        let mut reservoir = Reservoir::new(config.buffer, seed, t);

        if config.single_baseline {
            // One pass of the stream through the one persistent model.
            let params = match single_model.take() {
                Some(p) => p,
                None => {
                    let mut r =
                        crate::rng::stream(seed, &[crate::rng::scope::INIT, t as u64, 0]);
                    init_mlp(&arch, &mut r)
                }
            };
            let gate = crate::rng::stream(seed, &[crate::rng::scope::GATE, t as u64, 0]);
            let mut cfg = config.online();
            cfg.inclusion_p = 1.0;
            let mut trainer =
                classifier::OnlineTrainer::new(params, cfg, mask.clone(), gate);
            let mut len = 0;
            for i in 0..task.train.len() {
                let ex = task.train.example(i);
                trainer.offer(&ex)?;
                reservoir.offer(ex);
                len += 1;
            }
            let (params, _) = trainer.finish()?;
            single_model = Some(params);
            outcome.task_stream_lens.push(len);
        } else if config.skip_vae {
            // No generative model: the pass only feeds the reservoir.
            let mut len = 0;
            for i in 0..task.train.len() {
                reservoir.offer(task.train.example(i));
                len += 1;
            }
            outcome.task_stream_lens.push(len);
        } else {
            let stream_iter = (0..task.train.len()).map(|i| task.train.example(i));
            let (base, stream_len) = train_base_models(
                &shared_init,
                stream_iter,
                &mask,
                &config.online(),
                config.base_models,
                t,
                seed,
                |ex| reservoir.offer(ex.clone()),
            )?;
            outcome.task_stream_lens.push(stream_len);

            exemplars.admit(reservoir.into_items(), seed)?;
            reservoir = Reservoir::new(0, seed, t);

            let vae_cfg = VaeTrainConfig {
                epochs: config.vae_epochs,
                lr: config.vae_lr,
                aux_clf_weight: config.aux_clf_loss.then_some(config.aux_clf_weight),
                aux_batch_size: config.online_batch,
            };
            if config.aux_clf_loss {
                let own = exemplars.task_examples(t);
                let xs: Vec<Vec<f64>> = own.iter().map(|e| e.x.clone()).collect();
                let labels: Vec<usize> = own.iter().map(|e| e.label).collect();
                let source = AuxBatchSource {
                    arch: &arch,
                    xs: &xs,
                    labels: &labels,
                    class_mask: &mask,
                };
                train_task_vae(
                    &mut vae,
                    &base.models,
                    t,
                    &vae_cfg,
                    &mut store,
                    seed,
                    Some(&source),
                )?;
            } else {
                train_task_vae(&mut vae, &base.models, t, &vae_cfg, &mut store, seed, None)?;
            }

            let cons = ConsolidationConfig {
                pseudo_models: config.pseudo_models,
                epochs: config.consolidation_epochs,
                lr: config.consolidation_lr,
            };
            consolidate(&mut vae, &store, n_chunks, &cons, seed)?;
        }

        // skip_vae and single_baseline paths admit here; the full path
        // already admitted before VAE training.
        if config.skip_vae || config.single_baseline {
            exemplars.admit(reservoir.into_items(), seed)?;
        }

        // Evaluate on everything seen so far.
        let seen: Vec<&TaskDataset> = tasks[..=t].iter().collect();
        let infer_cfg = config.inference();
        if let Some(single) = &single_model {
            let union: Vec<usize> =
                seen.iter().flat_map(|t| t.classes.iter().copied()).collect();
            let union_mask = class_mask(n_classes, &union);
            let mut agn_row = Vec::new();
            let mut aware_row = Vec::new();
            for task_j in &seen {
                let own_mask = class_mask(n_classes, &task_j.classes);
                if outcome.agnostic.is_some() {
                    agn_row.push(classifier::evaluate(single, &task_j.test, &union_mask)?);
                }
                if outcome.aware.is_some() {
                    aware_row.push(classifier::evaluate(single, &task_j.test, &own_mask)?);
                }
            }
            if let Some(m) = outcome.agnostic.as_mut() {
                m.push_row(agn_row)?;
            }
            if let Some(m) = outcome.aware.as_mut() {
                m.push_row(aware_row)?;
            }
            outcome.peak_resident = outcome.peak_resident.max(1);
        } else {
            if outcome.agnostic.is_some() {
                let sweep = task_agnostic_infer(
                    &vae,
                    &store,
                    &exemplars,
                    &seen,
                    &arch,
                    &infer_cfg,
                    seed,
                    config.skip_vae,
                )?;
                let m = outcome.agnostic.as_mut().expect("checked above");
                record_sweep(
                    &sweep,
                    m,
                    &mut outcome.finetuned_throughout,
                    &mut outcome.peak_resident,
                )?;
            }
            if outcome.aware.is_some() {
                let sweep = task_aware_infer(
                    &vae,
                    &store,
                    &exemplars,
                    &seen,
                    &arch,
                    &infer_cfg,
                    seed,
                    config.skip_vae,
                )?;
                let m = outcome.aware.as_mut().expect("checked above");
                record_sweep(
                    &sweep,
                    m,
                    &mut outcome.finetuned_throughout,
                    &mut outcome.peak_resident,
                )?;
            }
        }
        let mut status = format!("seed {seed}: finished task {t}");
        if let Some(m) = &outcome.agnostic {
            status.push_str(&format!(", agnostic A={:.1}", m.avg_accuracy(m.rows() - 1)?));
        }
        if let Some(m) = &outcome.aware {
            status.push_str(&format!(", aware A={:.1}", m.avg_accuracy(m.rows() - 1)?));
        }
        log::info!("{status}");
    }

    if !config.skip_vae && !config.single_baseline {
        outcome.vae_state = Some(VaeState { vae, store });
    }
    Ok(outcome)
}

#[derive(Debug)]
pub struct RunBundle {
    pub config: RunConfig,
    pub outcomes: Vec<SeedOutcome>,
}

/// Runs every configured seed sequentially and persists into
/// `config.out_dir`.
pub fn run(config: &RunConfig) -> Result<RunBundle> {
    config.validate()?;
    let mut outcomes = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        outcomes.push(run_seed(config, seed)?);
    }
    let bundle = RunBundle {
        config: config.clone(),
        outcomes,
    };
    persist(&bundle)?;
    Ok(bundle)
}

fn matrix_csvs(bundle: &RunBundle, aware: bool) -> Result<(String, String)> {
    let mut metrics = String::from("seed,k,A,F\n");
    let mut matrix = String::from("seed,k,j,a\n");
    for oc in &bundle.outcomes {
        let m = match oc.matrix_for(aware) {
            Some(m) => m,
            None => continue,
        };
        for k in 0..m.rows() {
            let a = m.avg_accuracy(k)?;
            // Task indices are 1-based in files, matching the metric
            // definitions' subscripts.
            if k == 0 {
                metrics.push_str(&format!("{},{},{a},\n", oc.seed, k + 1));
            } else {
                let f = m.forgetting(k)?;
                metrics.push_str(&format!("{},{},{a},{f}\n", oc.seed, k + 1));
            }
            for j in 0..=k {
                matrix.push_str(&format!(
                    "{},{},{},{}\n",
                    oc.seed,
                    k + 1,
                    j + 1,
                    m.get(k, j)?
                ));
            }
        }
    }
    Ok((metrics, matrix))
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMetadata {
    version: String,
    config: RunConfig,
    seeds_run: Vec<u64>,
    finetuned_throughout: bool,
    peak_resident: usize,
    task_stream_lens: Vec<Vec<usize>>,
}

/// Writes metrics.csv, matrix.csv, run.json, and per-seed autoencoder
/// state. `Both` mode adds metrics_aware.csv / matrix_aware.csv.
pub fn persist(bundle: &RunBundle) -> Result<()> {
    let dir = &bundle.config.out_dir;
    fs::create_dir_all(dir)?;

    let primary_aware = matches!(bundle.config.mode, EvalMode::TaskAware);
    let (metrics, matrix) = matrix_csvs(bundle, primary_aware)?;
    fs::write(dir.join("metrics.csv"), metrics)?;
    fs::write(dir.join("matrix.csv"), matrix)?;
    if matches!(bundle.config.mode, EvalMode::Both) {
        let (metrics_aw, matrix_aw) = matrix_csvs(bundle, true)?;
        fs::write(dir.join("metrics_aware.csv"), metrics_aw)?;
        fs::write(dir.join("matrix_aware.csv"), matrix_aw)?;
    }

    let meta = RunMetadata {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: bundle.config.clone(),
        seeds_run: bundle.outcomes.iter().map(|o| o.seed).collect(),
        finetuned_throughout: bundle.outcomes.iter().all(|o| o.finetuned_throughout),
        peak_resident: bundle
            .outcomes
            .iter()
            .map(|o| o.peak_resident)
            .max()
            .unwrap_or(0),
        task_stream_lens: bundle
            .outcomes
            .iter()
            .map(|o| o.task_stream_lens.clone())
            .collect(),
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Config(format!("metadata serialization: {e}")))?;
    fs::write(dir.join("run.json"), meta_json)?;

    for oc in &bundle.outcomes {
        if let Some(state) = &oc.vae_state {
            let json = serde_json::to_string(state)
                .map_err(|e| Error::Config(format!("vae serialization: {e}")))?;
            fs::write(dir.join(format!("vae_seed{}.json", oc.seed)), json)?;
        }
    }
    Ok(())
}

/// Samples latents from a persisted run and writes `latents.csv` beside it.
pub fn export_latents_for_run(run_dir: &Path, per_task: usize, seed: u64) -> Result<PathBuf> {
    let mut states: Vec<PathBuf> = fs::read_dir(run_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("vae_seed") && n.ends_with(".json"))
        })
        .collect();
    states.sort();
    let first = states.first().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "no autoencoder state under {} (was the run made with skip_vae?)",
            run_dir.display()
        ))
    })?;
    let text = fs::read_to_string(first)?;
    let state: VaeState = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("bad autoencoder state: {e}")))?;

    let rows = export_latents(&state.store, per_task, seed)?;
    let dims = state.vae.config.latent_dim;
    let mut csv = String::from("task");
    for d in 0..dims {
        csv.push_str(&format!(",dim{d}"));
    }
    csv.push_str(",sample_id\n");
    for r in rows {
        csv.push_str(&r.task.to_string());
        for v in &r.z {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(",{}\n", r.sample_id));
    }
    let out = run_dir.join("latents.csv");
    fs::write(&out, csv)?;
    Ok(out)
}

/// Reads back the configuration persisted in a run directory.
pub fn load_run_config(dir: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(dir.join("run.json"))?;
    let meta: RunMetadata = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: bad run.json: {e}", dir.display())))?;
    Ok(meta.config)
}

/// One aggregated line of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub dataset: String,
    pub mode: String,
    pub n_seeds: usize,
    pub final_a_mean: f64,
    pub final_a_std: f64,
    pub final_f: Option<(f64, f64)>,
}

impl ReportLine {
    pub fn render(&self) -> String {
        let f = match self.final_f {
            Some((m, s)) => format_mean_std(m, s),
            None => "-".into(),
        };
        let flag = if self.n_seeds == 1 { " [single seed]" } else { "" };
        format!(
            "{} {} (n={}): A = {}, F = {}{}",
            self.dataset,
            self.mode,
            self.n_seeds,
            format_mean_std(self.final_a_mean, self.final_a_std),
            f,
            flag
        )
    }
}

fn final_metrics_from_csv(text: &str) -> Result<Vec<(u64, f64, Option<f64>)>> {
    let mut per_seed: Vec<(u64, f64, Option<f64>)> = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Data(format!("metrics.csv line {}: bad shape", ln + 1)));
        }
        let seed: u64 = parts[0]
            .parse()
            .map_err(|_| Error::Data(format!("metrics.csv line {}: bad seed", ln + 1)))?;
        let a: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Data(format!("metrics.csv line {}: bad A", ln + 1)))?;
        let f: Option<f64> = if parts[3].is_empty() {
            None
        } else {
            Some(parts[3].parse().map_err(|_| {
                Error::Data(format!("metrics.csv line {}: bad F", ln + 1))
            })?)
        };
        // Rows arrive in k order per seed; the last row per seed wins.
        match per_seed.iter_mut().find(|(s, _, _)| *s == seed) {
            Some(entry) => *entry = (seed, a, f),
            None => per_seed.push((seed, a, f)),
        }
    }
    if per_seed.is_empty() {
        return Err(Error::Data("metrics.csv holds no rows".into()));
    }
    Ok(per_seed)
}

/// Aggregates final-task metrics across run directories that share a
/// configuration. Mixed configurations are an error.
pub fn report(dirs: &[PathBuf]) -> Result<ReportLine> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("no run directories given".into()));
    }
    let mut key: Option<RunConfig> = None;
    let mut finals: Vec<(f64, Option<f64>)> = Vec::new();
    let mut dataset = String::new();
    let mut mode = String::new();
    for dir in dirs {
        let cfg = load_run_config(dir)?;
        let this_key = cfg.aggregation_key();
        match &key {
            None => {
                dataset = cfg.dataset.as_str().to_string();
                mode = format!("{:?}", cfg.mode);
                key = Some(this_key);
            }
            Some(k) if *k != this_key => {
                return Err(Error::Contract(format!(
                    "{} was run with a different configuration; cannot aggregate",
                    dir.display()
                )));
            }
            _ => {}
        }
        let metrics_text = fs::read_to_string(dir.join("metrics.csv"))?;
        for (_, a, f) in final_metrics_from_csv(&metrics_text)? {
            finals.push((a, f));
        }
    }
    let a_vals: Vec<f64> = finals.iter().map(|(a, _)| *a).collect();
    let (a_mean, a_std) = mean_std(&a_vals)?;
    let f_vals: Vec<f64> = finals.iter().filter_map(|(_, f)| *f).collect();
    let final_f = if f_vals.is_empty() {
        None
    } else {
        Some(mean_std(&f_vals)?)
    };
    Ok(ReportLine {
        dataset,
        mode,
        n_seeds: finals.len(),
        final_a_mean: a_mean,
        final_a_std: a_std,
        final_f,
    })
}

/// CSV rendering of one or more report lines.
pub fn report_csv(lines: &[ReportLine]) -> String {
    let mut out = String::from("dataset,mode,n_seeds,a_mean,a_std,f_mean,f_std\n");
    for l in lines {
        let (fm, fs) = match l.final_f {
            Some((m, s)) => (m.to_string(), s.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.dataset, l.mode, l.n_seeds, l.final_a_mean, l.final_a_std, fm, fs
        ));
    }
    out
}
