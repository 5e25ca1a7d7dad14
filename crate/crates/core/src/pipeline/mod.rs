//! The three training steps and evaluation as resumable, artifact-driven
//! stages over one output directory.

mod config;
mod manifest;

use std::path::{Path, PathBuf};

pub use config::{
    BackboneSection, DataSource, EvalSection, FusionSection, PipelineConfig, PseudoLabelSection,
};
pub use manifest::{sha256_file, ArtifactRecord, RunManifest};

use crate::adaptors::{train_adaptor_set_with_head, AdaptedModel, AdaptorSet, ADAPTOR_KIND};
use crate::backbone::{extract_features, load_or_init_backbone, BackboneParams, FeatureModel, BACKBONE_KIND};
use crate::checkpoint::{checkpoint_paths, write_atomic, Checkpoint};
use crate::data::{
    generate_synthetic_benchmark, load_image_folder, make_unlabeled_pool, DatasetManifest, TaskDataset,
    TaskSplits, UnlabeledPool,
};
use crate::error::{GrappaError, Result};
use crate::fusion::{train_fusion, train_fusion_supervised, FusionMode, FusionVariant, GrappaModel, FUSION_KIND};
use crate::nn::Parameters;
use crate::pseudolabels::{build_granularities, FeatureStore, PseudoLabelSet};
use crate::retrieval::{evaluate_model, oracle_select, RetrievalReport};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "GRAPPA_NUM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    PseudoLabels,
    TrainAdaptors,
    TrainFusion,
    Evaluate,
    All,
}

/// Process exit code for an error.
pub fn exit_code(err: &GrappaError) -> i32 {
    match err {
        GrappaError::Config(_) => 2,
        GrappaError::MissingArtifact { .. } => 3,
        GrappaError::Diverged { .. } | GrappaError::NonFinite { .. } => 4,
        _ => 1,
    }
}

/// Loaded data: labeled tasks and the label-free training pool.
pub struct Benchmark {
    pub tasks: Vec<TaskSplits>,
    pub pool: UnlabeledPool,
}

impl Benchmark {
    pub fn tests(&self) -> Vec<&TaskDataset> {
        self.tasks.iter().map(|t| &t.test).collect()
    }
}

pub fn load_benchmark(config: &PipelineConfig) -> Result<Benchmark> {
    match &config.data {
        DataSource::Synthetic(spec) => {
            let b = generate_synthetic_benchmark(spec)?;
            Ok(Benchmark {
                tasks: b.tasks,
                pool: b.pool,
            })
        }
        DataSource::Folder { root } => {
            let c = &config.backbone.config;
            let tasks = load_image_folder(root, c.image_height, c.image_width, c.channels)?;
            let trains: Vec<&TaskDataset> = tasks.iter().map(|t| &t.train).collect();
            let pool = make_unlabeled_pool(&trains)?;
            Ok(Benchmark { tasks, pool })
        }
    }
}

/// Artifact locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_copy(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn backbone(&self) -> PathBuf {
        self.root.join("backbone")
    }

    pub fn pseudolabels(&self, i: usize) -> PathBuf {
        self.root.join("pseudolabels").join(format!("p{i}"))
    }

    pub fn adaptors(&self, i: usize) -> PathBuf {
        self.root.join("adaptors").join(format!("a{i}"))
    }

    pub fn fusion(&self, name: &str) -> PathBuf {
        self.root.join("fusion").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("reports").join("summary.json")
    }
}

fn require(stem: &Path, hint: &str) -> Result<()> {
    let (manifest, payload) = checkpoint_paths(stem);
    for p in [manifest, payload] {
        if !p.exists() {
            return Err(GrappaError::MissingArtifact {
                path: p,
                hint: hint.to_string(),
            });
        }
    }
    Ok(())
}

/// One pipeline invocation over a run directory.
pub struct Runner {
    pub config: PipelineConfig,
    pub layout: RunLayout,
    config_text: String,
    manifest: RunManifest,
    pub verbose: bool,
}

impl Runner {
    /// `config_text` is copied verbatim into the run directory.
    pub fn new(config: PipelineConfig, config_text: String, out_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let layout = RunLayout::new(out_dir.unwrap_or_else(|| config.out_dir.clone()));
        let manifest = RunManifest::load_or_new(&layout.manifest())?;
        Ok(Self {
            config,
            layout,
            config_text,
            manifest,
            verbose: false,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn begin(&mut self) -> Result<()> {
        std::fs::create_dir_all(&self.layout.root).map_err(|e| GrappaError::io(&self.layout.root, e))?;
        write_atomic(&self.layout.config_copy(), self.config_text.as_bytes())
    }

    fn record(&mut self, step: &str, stem: &Path, inputs: &[&Path]) -> Result<()> {
        let hash = self.config.hash();
        self.manifest
            .record(&self.layout.root, step, stem, inputs, &hash, self.config.seed)?;
        self.manifest.save(&self.layout.manifest())
    }

    /// Warns or fails when a prerequisite was produced under another config.
    fn check_origin(&self, stem: &Path) -> Result<()> {
        let hash = self.config.hash();
        if let Some(rec) = self.manifest.find(&self.layout.root, stem) {
            if rec.config_hash != hash {
                let msg = format!(
                    "{} was produced with config {} but the current config is {}",
                    stem.display(),
                    &rec.config_hash[..12],
                    &hash[..12]
                );
                if self.config.strict {
                    return Err(GrappaError::Config(msg));
                }
                eprintln!("warning: {msg}");
            }
        }
        Ok(())
    }

    pub fn run(&mut self, step: Step) -> Result<()> {
        match step {
            Step::PseudoLabels => self.pseudolabels(),
            Step::TrainAdaptors => self.train_adaptors(None),
            Step::TrainFusion => {
                for v in self.config.fusion.variants.clone() {
                    self.train_fusion(v, false)?;
                }
                Ok(())
            }
            Step::Evaluate => self.evaluate_all().map(|_| ()),
            Step::All => {
                self.pseudolabels()?;
                self.train_adaptors(None)?;
                for v in self.config.fusion.variants.clone() {
                    self.train_fusion(v, false)?;
                }
                if self.config.fusion.include_supervised {
                    self.train_fusion(FusionVariant::Tc, true)?;
                }
                self.evaluate_all().map(|_| ())
            }
        }
    }

    /// Step 1: freeze the backbone, embed the pool and cluster it at every
    /// granularity.
    pub fn pseudolabels(&mut self) -> Result<()> {
        self.begin()?;
        let bench = load_benchmark(&self.config)?;
        let manifest = DatasetManifest::from_tasks(&bench.tasks);
        write_atomic(&self.layout.dataset_manifest(), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        self.log(manifest.to_table());

        let backbone = load_or_init_backbone(&self.config.backbone.source, &self.config.backbone.config)?;
        backbone.save(&self.layout.backbone())?;
        self.record("pseudolabels", &self.layout.backbone(), &[])?;

        let features = extract_features(&backbone, bench.pool.images(), self.config.eval.chunk)?;
        let store = FeatureStore::new(features, bench.pool.ids(), backbone.fingerprint())?;
        let sets = build_granularities(
            &store,
            &self.config.pseudolabels.granularities,
            self.config.seed,
            &self.config.pseudolabels.kmeans,
        )?;
        for set in &sets {
            let stem = self.layout.pseudolabels(set.granularity);
            set.save(&stem)?;
            self.record("pseudolabels", &stem, &[&self.layout.backbone()])?;
            self.log(format!(
                "pseudo-labels p{} k={} inertia={:.4} iters={}",
                set.granularity,
                set.k,
                set.inertia,
                set.inertia_history.len()
            ));
        }
        Ok(())
    }

    pub fn load_backbone(&self) -> Result<BackboneParams> {
        let stem = self.layout.backbone();
        require(&stem, "run `grappa pseudolabels` first")?;
        self.check_origin(&stem)?;
        let mut b = BackboneParams::load(&stem, &self.config.backbone.config)?;
        b.freeze();
        Ok(b)
    }

    /// Step 2 for one granularity (`Some(i)`) or all of them.
    pub fn train_adaptors(&mut self, granularity: Option<usize>) -> Result<()> {
        self.begin()?;
        let n = self.config.pseudolabels.granularities.len();
        let which: Vec<usize> = match granularity {
            Some(i) if i >= n => {
                return Err(GrappaError::Config(format!(
                    "granularity {i} out of range: config defines {n}"
                )))
            }
            Some(i) => vec![i],
            None => (0..n).collect(),
        };
        let backbone = self.load_backbone()?;
        let before = backbone.fingerprint();
        let bench = load_benchmark(&self.config)?;
        for i in which {
            let pstem = self.layout.pseudolabels(i);
            require(&pstem, "run `grappa pseudolabels` first")?;
            self.check_origin(&pstem)?;
            let pseudo = PseudoLabelSet::load(&pstem)?;
            if pseudo.model_fingerprint != before {
                return Err(GrappaError::Config(format!(
                    "pseudo-labels p{i} were computed with a different backbone"
                )));
            }
            let trained = train_adaptor_set_with_head(
                &backbone,
                bench.pool.images(),
                &pseudo,
                &self.config.adaptors,
                self.config.adaptor_seed(i),
            )?;
            let mut set = trained.adaptors;
            set.granularity = i;
            for (e, (l, a)) in set
                .provenance
                .loss_history
                .iter()
                .zip(&set.provenance.accuracy_history)
                .enumerate()
            {
                self.log(format!("adaptors a{i} epoch {e}: loss {l:.4} acc {a:.3}"));
            }
            let stem = self.layout.adaptors(i);
            set.save(&stem)?;
            self.record("train-adaptors", &stem, &[&self.layout.backbone(), &pstem])?;
        }
        debug_assert_eq!(backbone.fingerprint(), before);
        Ok(())
    }

    pub fn load_adaptors(&self) -> Result<Vec<AdaptorSet>> {
        (0..self.config.pseudolabels.granularities.len())
            .map(|i| {
                let stem = self.layout.adaptors(i);
                require(&stem, &format!("run `grappa train-adaptors --granularity {i}` (or --all) first"))?;
                self.check_origin(&stem)?;
                AdaptorSet::load(&stem)
            })
            .collect()
    }

    fn fusion_name(variant: FusionVariant, supervised: bool) -> String {
        if supervised {
            "supervised".into()
        } else {
            variant.name().into()
        }
    }

    /// Step 3 for one variant.
    pub fn train_fusion(&mut self, variant: FusionVariant, supervised: bool) -> Result<()> {
        self.begin()?;
        let backbone = self.load_backbone()?;
        let adaptors = self.load_adaptors()?;
        let bench = load_benchmark(&self.config)?;
        let fcfg = &self.config.fusion;
        let mut model = GrappaModel::new(
            backbone,
            adaptors,
            FusionMode::Attention,
            fcfg.options.clone(),
            fcfg.train.init_std,
            self.config.fusion_seed(),
        )?;
        model.init_keys(fcfg.train.key_init_std, self.config.fusion_seed().wrapping_add(1));
        let frozen = model.frozen_fingerprint();
        let trained = if supervised {
            let mut images = Vec::new();
            let mut labels = Vec::new();
            let mut offset = 0;
            for t in &bench.tasks {
                images.extend(t.train.images.iter().cloned());
                labels.extend(t.train.labels.iter().map(|l| l + offset));
                offset += t.train.num_classes();
            }
            train_fusion_supervised(model, &images, &labels, &fcfg.train, self.config.fusion_seed())?
        } else {
            train_fusion(model, bench.pool.images(), variant, &fcfg.train, self.config.fusion_seed())?
        };
        if trained.model.frozen_fingerprint() != frozen {
            return Err(GrappaError::Checkpoint("frozen parameters changed during fusion training".into()));
        }
        let name = Self::fusion_name(variant, supervised);
        for l in &trained.log {
            self.log(format!(
                "fusion {name} epoch {}: loss {:.5} attention entropy {:.6}",
                l.epoch, l.loss, l.attention_entropy
            ));
        }
        let stem = self.layout.fusion(&name);
        trained.model.save(&stem)?;
        let adaptor_stems: Vec<PathBuf> = (0..trained.model.num_adaptors()).map(|i| self.layout.adaptors(i)).collect();
        let backbone_stem = self.layout.backbone();
        let mut inputs: Vec<&Path> = vec![&backbone_stem];
        inputs.extend(adaptor_stems.iter().map(|p| p.as_path()));
        self.record("train-fusion", &stem, &inputs)?;
        Ok(())
    }

    /// Builds the model stored at `stem`, resolving frozen parts from the
    /// run directory.
    pub fn load_model(&self, stem: &Path) -> Result<(String, Box<dyn FeatureModel>)> {
        require(stem, "train the model first or check the path")?;
        let kind = Checkpoint::load(stem)?.kind;
        let name = stem
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| kind.clone());
        match kind.as_str() {
            BACKBONE_KIND => {
                let mut b = BackboneParams::load(stem, &self.config.backbone.config)?;
                b.freeze();
                Ok((name, Box::new(b)))
            }
            ADAPTOR_KIND => {
                let backbone = self.load_backbone()?;
                let set = AdaptorSet::load(stem)?;
                set.check_compatible(&backbone)?;
                Ok((name, Box::new(OwnedAdapted { backbone, set })))
            }
            FUSION_KIND => {
                let backbone = self.load_backbone()?;
                let adaptors = self.load_adaptors()?;
                Ok((name, Box::new(GrappaModel::load(stem, backbone, adaptors)?)))
            }
            other => Err(GrappaError::Checkpoint(format!("`{other}` checkpoints cannot be evaluated"))),
        }
    }

    fn fingerprint_of(stem: &Path) -> Result<String> {
        let (_, bin) = checkpoint_paths(stem);
        sha256_file(&bin)
    }

    /// Evaluates one model on the given test splits; `baseline` adds deltas.
    pub fn evaluate(&self, model: &Path, baseline: Option<&Path>, tasks_root: Option<&Path>) -> Result<RetrievalReport> {
        let tests_owned;
        let tests: Vec<&TaskDataset> = match tasks_root {
            Some(root) => {
                let c = &self.config.backbone.config;
                tests_owned = load_image_folder(root, c.image_height, c.image_width, c.channels)?;
                tests_owned.iter().map(|t| &t.test).collect()
            }
            None => {
                tests_owned = load_benchmark(&self.config)?.tasks;
                tests_owned.iter().map(|t| &t.test).collect()
            }
        };
        let chunk = self.config.eval.chunk;
        let (name, m) = self.load_model(model)?;
        let mut report = evaluate_model(m.as_ref(), &name, &Self::fingerprint_of(model)?, &tests, chunk)?;
        if let Some(b) = baseline {
            let (bname, bm) = self.load_model(b)?;
            let base = evaluate_model(bm.as_ref(), &bname, &Self::fingerprint_of(b)?, &tests, chunk)?;
            report = report.with_baseline(&base)?;
        }
        Ok(report)
    }

    /// Evaluates the frozen backbone, every adaptor set, the oracle and every
    /// trained fusion model present; writes reports and a summary.
    pub fn evaluate_all(&mut self) -> Result<Summary> {
        self.begin()?;
        let bench = load_benchmark(&self.config)?;
        let tests = bench.tests();
        let chunk = self.config.eval.chunk;
        let backbone_stem = self.layout.backbone();
        let (_, frozen) = self.load_model(&backbone_stem)?;
        let baseline = evaluate_model(frozen.as_ref(), "frozen", &Self::fingerprint_of(&backbone_stem)?, &tests, chunk)?;
        let mut entries = vec![("frozen".to_string(), baseline.clone())];

        let mut singles = Vec::new();
        for i in 0..self.config.pseudolabels.granularities.len() {
            let stem = self.layout.adaptors(i);
            let (_, m) = self.load_model(&stem)?;
            let r = evaluate_model(m.as_ref(), &format!("a{i}"), &Self::fingerprint_of(&stem)?, &tests, chunk)?
                .with_baseline(&baseline)?;
            singles.push(r.clone());
            entries.push((format!("a{i}"), r));
        }
        let oracle = oracle_select(&singles)?;
        let mut fusion_names: Vec<String> = self.config.fusion.variants.iter().map(|v| v.name().to_string()).collect();
        if self.config.fusion.include_supervised {
            fusion_names.push("supervised".into());
        }
        for name in &fusion_names {
            let stem = self.layout.fusion(name);
            if !checkpoint_paths(&stem).0.exists() {
                continue;
            }
            let (_, m) = self.load_model(&stem)?;
            let r = evaluate_model(m.as_ref(), name, &Self::fingerprint_of(&stem)?, &tests, chunk)?
                .with_baseline(&baseline)?;
            entries.push((name.clone(), r));
        }
        for (name, r) in &entries {
            let stem = self.layout.report(name);
            r.write(&stem, self.config.eval.chart && r.baseline.is_some())?;
            self.record("evaluate", &stem.with_extension("json"), &[])?;
            self.log(format!(
                "{name:>10}: mean RP {:.4} mean MAP@R {:.4} | {}",
                r.mean_rp,
                r.mean_map_at_r,
                r.tasks.iter().map(|t| format!("{} {:.4}", t.task, t.rp)).collect::<Vec<_>>().join(", ")
            ));
        }
        let oracle_report = oracle.report.clone().with_baseline(&baseline)?;
        oracle_report.write(&self.layout.report("oracle"), false)?;
        let summary = Summary {
            models: entries
                .iter()
                .map(|(n, r)| SummaryRow {
                    model: n.clone(),
                    mean_rp: r.mean_rp,
                    mean_map_at_r: r.mean_map_at_r,
                    task_rp: r.tasks.iter().map(|t| (t.task.clone(), t.rp)).collect(),
                })
                .collect(),
            oracle_choices: oracle
                .choices
                .iter()
                .map(|c| (c.task.clone(), format!("a{}", c.selected), c.rp))
                .collect(),
            oracle_mean_rp: oracle.report.mean_rp,
        };
        write_atomic(&self.layout.summary(), (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
        self.record("evaluate", &self.layout.summary(), &[])?;
        Ok(summary)
    }
}

/// Adapted model owning its parts.
struct OwnedAdapted {
    backbone: BackboneParams,
    set: AdaptorSet,
}

impl FeatureModel for OwnedAdapted {
    fn backbone(&self) -> &BackboneParams {
        &self.backbone
    }

    fn forward(&self, g: &mut crate::graph::Graph, input: crate::graph::Var, batch: usize) -> Result<crate::graph::Var> {
        AdaptedModel {
            backbone: &self.backbone,
            adaptors: &self.set,
        }
        .forward(g, input, batch)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub mean_rp: f64,
    pub mean_map_at_r: f64,
    pub task_rp: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub models: Vec<SummaryRow>,
    /// `(task, selected adaptor set, RP)`.
    pub oracle_choices: Vec<(String, String, f64)>,
    pub oracle_mean_rp: f64,
}

impl Summary {
    pub fn row(&self, model: &str) -> Option<&SummaryRow> {
        self.models.iter().find(|r| r.model == model)
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| GrappaError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(GrappaError::Config(format!("{THREADS_ENV} must be positive")));
        }
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
