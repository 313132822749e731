//! Command-line surface for the IGNNet pipeline: fetch, train, eval,
//! explain, shap-audit, and ablate, driven by a JSON config with named
//! per-dataset presets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ignnet_core::data::{
    fit_preprocessor, load_csv, oversample_minority, split_dataset, split_dataset_counts,
    transform, Preprocessor, Split, TabularDataset,
};
use ignnet_core::explain::{additivity_check, emit_chart, explain_instance, group_scores};
use ignnet_core::graph::{
    build_adjacency, build_feature_graph, calibrate_delta, normalize_adjacency, pearson_matrix,
    AppliedThreshold, FeatureGraph, FALLBACK_THRESHOLD, PRIMARY_THRESHOLD,
};
use ignnet_core::model::{ArchitectureConfig, HeadKind, SavedModel, TrainMetadata};
use ignnet_core::openml::fetch_openml;
use ignnet_core::optim::AdamConfig;
use ignnet_core::shap::{audit_chart, convergence_audit};
use ignnet_core::tensor::Tensor;
use ignnet_core::train::{evaluate_auc, train, TrainConfig};

const EXIT_DOMAIN: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Debug)]
enum CliError {
    /// Bad invocation or config: exit 2.
    Usage(String),
    /// Valid request that failed in a pipeline module: exit 1.
    Domain(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Domain(m) => write!(f, "error: {m}"),
        }
    }
}

fn domain<E: std::fmt::Display>(tag: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Domain(format!("[{tag}] {e}"))
}

#[derive(Parser)]
#[command(name = "ignnet", version, about = "Interpretable graph neural network for tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download an OpenML dataset into the local cache.
    Fetch {
        #[arg(long)]
        openml_id: u64,
        #[arg(long)]
        json: bool,
    },
    /// Train a model and write model.json, train_report.json, manifest.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a saved model's AUC on a split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        json: bool,
    },
    /// Explain one test-split row: per-feature scores, additivity check, SVG.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        row: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// KernelSHAP convergence audit against the model's additive scores.
    ShapAudit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value = "32,128,512,2048,8192")]
        schedule: String,
        #[arg(long)]
        json: bool,
    },
    /// Train ablation variants and write a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["layers", "self-loop", "threshold"])]
        variant: String,
        #[arg(long)]
        json: bool,
    },
}

// ---------- configuration ----------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, untagged)]
enum DatasetSource {
    Openml { openml_id: u64 },
    Csv { csv: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitSpec {
    #[serde(default)]
    counts: Option<[usize; 3]>,
    #[serde(default)]
    fractions: Option<[f64; 3]>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SelfLoop {
    Auto(String), // must be the literal "auto"
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphSpec {
    #[serde(default = "default_self_loop")]
    self_loop: SelfLoop,
}

fn default_self_loop() -> SelfLoop {
    SelfLoop::Auto("auto".into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpec {
    #[serde(default = "default_layers")]
    mp_layers: usize,
    #[serde(default = "default_head")]
    head: String, // "interpretable" | "opaque"
}

fn default_layers() -> usize {
    6
}
fn default_head() -> String {
    "interpretable".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSpec {
    #[serde(default = "default_epochs")]
    max_epochs: usize,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default = "default_patience")]
    patience: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_lr")]
    learning_rate: f64,
}

fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    128
}
fn default_patience() -> usize {
    20
}
fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    dataset: Option<DatasetSource>,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    split: Option<SplitSpec>,
    #[serde(default)]
    graph: Option<GraphSpec>,
    #[serde(default)]
    model: Option<ModelSpec>,
    #[serde(default)]
    train: Option<TrainSpec>,
    #[serde(default)]
    oversample: Option<bool>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct Resolved {
    name: String,
    dataset: DatasetSource,
    target: String,
    split: SplitSpec,
    self_loop: SelfLoop,
    mp_layers: usize,
    head: HeadKind,
    train: TrainSpec,
    oversample: bool,
    output_dir: PathBuf,
}

fn preset(name: &str) -> Option<RunConfig> {
    // published hyperparameters per dataset: self-loop weight, epoch budget,
    // and split sizes
    let (id, target, counts, self_loop, epochs, oversample) = match name {
        "abalone" => (720, "binaryClass", [2506, 836, 835], 20.0, 220, false),
        "waveform5000" => (979, "binaryClass", [3000, 1000, 1000], 4.0, 97, false),
        "phonemes" => (1489, "Class", [3782, 811, 811], 1.0, 800, true),
        _ => return None,
    };
    Some(RunConfig {
        preset: None,
        dataset: Some(DatasetSource::Openml { openml_id: id }),
        target: Some(target.to_string()),
        split: Some(SplitSpec {
            counts: Some(counts),
            fractions: None,
            seed: 0,
        }),
        graph: Some(GraphSpec {
            self_loop: SelfLoop::Fixed(self_loop),
        }),
        model: None,
        train: Some(TrainSpec {
            max_epochs: epochs,
            batch_size: default_batch(),
            patience: default_patience(),
            seed: 0,
            learning_rate: default_lr(),
        }),
        oversample: Some(oversample),
        output_dir: None,
    })
}

fn load_config(path: &Path) -> Result<Resolved, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let raw: RunConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Usage(format!("config {}: at {}: {}", path.display(), e.path(), e.inner())))?;
    resolve(raw)
}

fn resolve(raw: RunConfig) -> Result<Resolved, CliError> {
    let base = match raw.preset.as_deref() {
        Some(p) => preset(p)
            .ok_or_else(|| CliError::Usage(format!("unknown preset \"{p}\"")))?,
        None => RunConfig {
            preset: None,
            dataset: None,
            target: None,
            split: None,
            graph: None,
            model: None,
            train: None,
            oversample: None,
            output_dir: None,
        },
    };
    let name = raw.preset.clone().unwrap_or_else(|| "custom".into());
    let dataset = raw
        .dataset
        .or(base.dataset)
        .ok_or_else(|| CliError::Usage("config needs \"dataset\" or a preset".into()))?;
    let target = raw
        .target
        .or(base.target)
        .ok_or_else(|| CliError::Usage("config needs \"target\" or a preset".into()))?;
    let split = raw.split.or(base.split).unwrap_or(SplitSpec {
        counts: None,
        fractions: Some([0.6, 0.2, 0.2]),
        seed: 0,
    });
    if split.counts.is_some() == split.fractions.is_some() {
        return Err(CliError::Usage(
            "split needs exactly one of \"counts\" or \"fractions\"".into(),
        ));
    }
    let graph = raw.graph.or(base.graph).unwrap_or(GraphSpec {
        self_loop: default_self_loop(),
    });
    if let SelfLoop::Auto(ref word) = graph.self_loop {
        if word != "auto" {
            return Err(CliError::Usage(format!(
                "graph.self_loop must be a number or \"auto\", got \"{word}\""
            )));
        }
    }
    let model = raw.model.or(base.model).unwrap_or(ModelSpec {
        mp_layers: default_layers(),
        head: default_head(),
    });
    let head = match model.head.as_str() {
        "interpretable" => HeadKind::Interpretable,
        "opaque" => HeadKind::Opaque,
        other => {
            return Err(CliError::Usage(format!(
                "model.head must be \"interpretable\" or \"opaque\", got \"{other}\""
            )))
        }
    };
    let train = raw.train.or(base.train).unwrap_or(TrainSpec {
        max_epochs: default_epochs(),
        batch_size: default_batch(),
        patience: default_patience(),
        seed: 0,
        learning_rate: default_lr(),
    });
    Ok(Resolved {
        name,
        dataset,
        target,
        split,
        self_loop: graph.self_loop,
        mp_layers: model.mp_layers,
        head,
        train,
        oversample: raw.oversample.or(base.oversample).unwrap_or(false),
        output_dir: raw
            .output_dir
            .or(base.output_dir)
            .unwrap_or_else(|| PathBuf::from("out")),
    })
}

fn cache_dir() -> PathBuf {
    std::env::var_os("IGNNET_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".ignnet-cache"))
}

// ---------- data preparation ----------

struct SplitData {
    x: Tensor,
    labels: Vec<usize>,
}

struct Prepared {
    dataset: TabularDataset,
    preprocessor: Preprocessor,
    train: SplitData,
    dev: SplitData,
    test: SplitData,
}

fn prepare(config: &Resolved) -> Result<Prepared, CliError> {
    let csv_path = match &config.dataset {
        DatasetSource::Csv { csv } => csv.clone(),
        DatasetSource::Openml { openml_id } => {
            fetch_openml(*openml_id, &cache_dir(), None).map_err(domain("openml"))?
        }
    };
    let mut dataset = load_csv(&csv_path, &config.target).map_err(domain("tabular_data"))?;
    if let Some(counts) = config.split.counts {
        split_dataset_counts(&mut dataset, (counts[0], counts[1], counts[2]), config.split.seed)
            .map_err(domain("tabular_data"))?;
    } else {
        let f = config.split.fractions.expect("validated");
        split_dataset(&mut dataset, (f[0], f[1], f[2]), config.split.seed)
            .map_err(domain("tabular_data"))?;
    }
    let preprocessor = fit_preprocessor(&dataset).map_err(domain("tabular_data"))?;

    let make = |which: Split, oversample: bool| -> Result<SplitData, CliError> {
        let mut indices = dataset.indices_of(which);
        if oversample {
            let labels: Vec<usize> = indices.iter().map(|&i| dataset.labels[i]).collect();
            let picked =
                oversample_minority(&labels, config.split.seed).map_err(domain("tabular_data"))?;
            indices = picked.into_iter().map(|i| indices[i]).collect();
        }
        let rows: Vec<&Vec<Cell>> = indices.iter().map(|&i| &dataset.rows[i]).collect();
        let (flat, _) = transform(&preprocessor, &rows);
        let x = Tensor::matrix(indices.len(), preprocessor.n_nodes, flat)
            .map_err(domain("tensor"))?;
        let labels = indices.iter().map(|&i| dataset.labels[i]).collect();
        Ok(SplitData { x, labels })
    };
    use ignnet_core::data::Cell;
    let train = make(Split::Train, config.oversample)?;
    let dev = make(Split::Dev, false)?;
    let test = make(Split::Test, false)?;
    Ok(Prepared {
        dataset,
        preprocessor,
        train,
        dev,
        test,
    })
}

fn graph_for(config: &Resolved, prepared: &Prepared) -> Result<FeatureGraph, CliError> {
    let corr = pearson_matrix(
        prepared.train.x.data(),
        prepared.train.x.rows(),
        prepared.train.x.cols(),
    )
    .map_err(domain("feature_graph"))?;
    let delta = match config.self_loop {
        SelfLoop::Fixed(d) => d,
        SelfLoop::Auto(_) => {
            let d = calibrate_delta(&corr).map_err(domain("feature_graph"))?;
            eprintln!("calibrated self-loop weight: {d}");
            d
        }
    };
    build_feature_graph(&corr, delta, prepared.preprocessor.node_names())
        .map_err(domain("feature_graph"))
}

// ---------- artifacts ----------

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct Manifest {
    created: String,
    artifacts: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct ArtifactWriter {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl ArtifactWriter {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Domain(format!("[cli] cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, content)
            .map_err(|e| CliError::Domain(format!("[cli] cannot write {}: {e}", path.display())))?;
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            sha256: sha256_hex(content.as_bytes()),
            bytes: content.len(),
        });
        Ok(path)
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            created: unix_timestamp(),
            artifacts: self.entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text)
            .map_err(|e| CliError::Domain(format!("[cli] cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

fn unix_timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    secs.to_string()
}

// ---------- commands ----------

fn cmd_fetch(id: u64, json: bool) -> Result<(), CliError> {
    let path = fetch_openml(id, &cache_dir(), None).map_err(domain("openml"))?;
    if json {
        println!(
            "{}",
            serde_json::json!({ "openml_id": id, "path": path.display().to_string() })
        );
    } else {
        println!("{}", path.display());
    }
    Ok(())
}

fn train_once(
    config: &Resolved,
    prepared: &Prepared,
    graph: &FeatureGraph,
    mp_layers: usize,
    seed: u64,
) -> Result<(SavedModel, ignnet_core::train::TrainReport), CliError> {
    let arch = ArchitectureConfig::standard(
        mp_layers,
        prepared.dataset.schema.n_classes(),
        config.head,
    )
    .map_err(domain("ignnet_model"))?;
    let train_config = TrainConfig {
        max_epochs: config.train.max_epochs,
        batch_size: config.train.batch_size,
        patience: config.train.patience,
        seed,
        adam: AdamConfig {
            learning_rate: config.train.learning_rate,
            ..AdamConfig::default()
        },
    };
    let (params, report) = train(
        &train_config,
        &arch,
        graph,
        &prepared.train.x,
        &prepared.train.labels,
        &prepared.dev.x,
        &prepared.dev.labels,
    )
    .map_err(domain("training"))?;
    let metadata = TrainMetadata {
        seed,
        epochs_run: report.epochs.len(),
        best_epoch: report.best_epoch,
        dev_auc: Some(report.best_dev_auc),
        dataset: Some(config.name.clone()),
    };
    let model = SavedModel::new(
        arch,
        params,
        prepared.dataset.schema.clone(),
        prepared.preprocessor.clone(),
        graph.clone(),
        metadata,
    );
    Ok((model, report))
}

fn cmd_train(config_path: &Path, json: bool) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let prepared = prepare(&config)?;
    let graph = graph_for(&config, &prepared)?;
    let (model, report) = train_once(&config, &prepared, &graph, config.mp_layers, config.train.seed)?;

    let adj = model.adjacency();
    let test_auc = evaluate_auc(
        &model.config,
        &model.params,
        &adj,
        &prepared.test.x,
        &prepared.test.labels,
    )
    .map_err(domain("metrics"))?;

    let mut writer = ArtifactWriter::new(&config.output_dir)?;
    writer.write("model.json", &model.to_json())?;
    writer.write(
        "train_report.json",
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    writer.write("graph.json", &graph.to_json())?;
    writer.finish()?;

    let summary = serde_json::json!({
        "dataset": config.name,
        "best_epoch": report.best_epoch,
        "dev_auc": report.best_dev_auc,
        "test_auc": test_auc,
        "output_dir": config.output_dir.display().to_string(),
    });
    if json {
        println!("{summary}");
    } else {
        println!(
            "trained {} | best epoch {} | dev auc {:.4} | test auc {:.4} | artifacts in {}",
            config.name,
            report.best_epoch,
            report.best_dev_auc,
            test_auc,
            config.output_dir.display()
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<SavedModel, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read model {}: {e}", path.display())))?;
    SavedModel::from_json(&text).map_err(domain("ignnet_model"))
}

fn split_by_name(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!(
            "split must be train, dev, or test, got \"{other}\""
        ))),
    }
}

fn cmd_eval(config_path: &Path, model_path: &Path, split: &str, json: bool) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let which = split_by_name(split)?;
    let model = load_model(model_path)?;
    let prepared = prepare(&config)?;
    let data = match which {
        Split::Train => &prepared.train,
        Split::Dev => &prepared.dev,
        Split::Test => &prepared.test,
    };
    let adj = model.adjacency();
    let auc = evaluate_auc(&model.config, &model.params, &adj, &data.x, &data.labels)
        .map_err(domain("metrics"))?;
    if json {
        println!(
            "{}",
            serde_json::json!({ "split": split, "rows": data.labels.len(), "auc": auc })
        );
    } else {
        println!("{split} auc {auc:.4} over {} rows", data.labels.len());
    }
    Ok(())
}

fn cmd_explain(
    config_path: &Path,
    model_path: &Path,
    row: usize,
    top_k: usize,
    svg: Option<&Path>,
    json: bool,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let model = load_model(model_path)?;
    let prepared = prepare(&config)?;
    let n = prepared.test.x.cols();
    if row >= prepared.test.x.rows() {
        return Err(CliError::Usage(format!(
            "row {row} out of range: test split has {} rows",
            prepared.test.x.rows()
        )));
    }
    let x = Tensor::matrix(
        1,
        n,
        prepared.test.x.data()[row * n..(row + 1) * n].to_vec(),
    )
    .map_err(domain("tensor"))?;
    let mut explanation = explain_instance(&model, &x, model.config.n_classes > 2)
        .map_err(domain("explain"))?;
    group_scores(&mut explanation, &model.preprocessor).map_err(domain("explain"))?;
    let (logit, prediction) = additivity_check(&explanation);
    let additive = logit == explanation.logit && prediction == explanation.prediction;
    if !additive {
        return Err(CliError::Domain(
            "[explain] additivity check failed: re-summed scores do not reproduce the prediction"
                .into(),
        ));
    }

    let mut writer = ArtifactWriter::new(&config.output_dir)?;
    writer.write("explanation.json", &explanation.to_json())?;
    let chart = emit_chart(&explanation, top_k);
    match svg {
        Some(path) => {
            std::fs::write(path, &chart).map_err(|e| {
                CliError::Domain(format!("[cli] cannot write {}: {e}", path.display()))
            })?;
        }
        None => {
            writer.write("explanation.svg", &chart)?;
        }
    }
    writer.finish()?;

    if json {
        println!("{}", explanation.to_json());
    } else {
        println!(
            "row {row}: prediction {:.4} (class {}) | additive: exact",
            explanation.prediction, explanation.predicted_class
        );
        for i in explanation.top_k(top_k) {
            println!("  {:<30} {:+.5}", explanation.node_names[i], explanation.tau[i]);
        }
    }
    Ok(())
}

fn cmd_shap_audit(
    config_path: &Path,
    model_path: &Path,
    instances: usize,
    schedule_text: &str,
    json: bool,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let model = load_model(model_path)?;
    let prepared = prepare(&config)?;
    let schedule: Vec<usize> = schedule_text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad schedule entry \"{s}\"")))
        })
        .collect::<Result<_, _>>()?;
    let n = prepared.test.x.cols();
    let count = instances.min(prepared.test.x.rows());
    if count == 0 {
        return Err(CliError::Usage("no test instances to audit".into()));
    }
    let x = Tensor::matrix(
        count,
        n,
        prepared.test.x.data()[..count * n].to_vec(),
    )
    .map_err(domain("tensor"))?;
    // Background: the all-zeros row — every numeric feature at its training
    // minimum and every one-hot category absent. A mean row would give
    // one-hot nodes fractional values no real instance has.
    let background = vec![0.0; n];

    let report = convergence_audit(&model, &x, &background, &schedule, config.train.seed)
        .map_err(domain("shap_audit"))?;

    let mut writer = ArtifactWriter::new(&config.output_dir)?;
    writer.write("shap_audit.json", &report.to_json())?;
    writer.write("shap_audit.svg", &audit_chart(&report))?;
    writer.finish()?;

    if json {
        println!("{}", report.to_json());
    } else {
        println!("audited {count} instances over schedule {schedule:?}");
        for (i, &s) in report.schedule.iter().enumerate() {
            println!(
                "  {s:>6} samples | cosine {:.4} +/- {:.4} | spearman {:.4} +/- {:.4}",
                report.mean_cosine[i],
                report.std_cosine[i],
                report.mean_spearman[i],
                report.std_spearman[i]
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    dev_auc: f64,
    test_auc: f64,
    best_epoch: usize,
}

fn cmd_ablate(config_path: &Path, variant: &str, json: bool) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let prepared = prepare(&config)?;
    let mut rows: Vec<AblationRow> = Vec::new();

    let run = |label: String,
                   graph: &FeatureGraph,
                   mp_layers: usize,
                   rows: &mut Vec<AblationRow>|
     -> Result<(), CliError> {
        eprintln!("ablate: running {label}");
        let (model, report) = train_once(&config, &prepared, graph, mp_layers, config.train.seed)?;
        let adj = model.adjacency();
        let test_auc = evaluate_auc(
            &model.config,
            &model.params,
            &adj,
            &prepared.test.x,
            &prepared.test.labels,
        )
        .map_err(domain("metrics"))?;
        rows.push(AblationRow {
            variant: label,
            dev_auc: report.best_dev_auc,
            test_auc,
            best_epoch: report.best_epoch,
        });
        Ok(())
    };

    match variant {
        "layers" => {
            let graph = graph_for(&config, &prepared)?;
            for layers in [6usize, 3, 1] {
                run(format!("{layers}-layer"), &graph, layers, &mut rows)?;
            }
        }
        "self-loop" => {
            let corr = pearson_matrix(
                prepared.train.x.data(),
                prepared.train.x.rows(),
                prepared.train.x.cols(),
            )
            .map_err(domain("feature_graph"))?;
            let calibrated = calibrate_delta(&corr).map_err(domain("feature_graph"))?;
            // near-zero self-loop stands in for delta = 0, which the
            // normalization cannot admit
            for (label, delta) in [
                (format!("calibrated (delta {calibrated})"), calibrated),
                ("near-zero (delta 1e-6)".to_string(), 1e-6),
            ] {
                let graph =
                    build_feature_graph(&corr, delta, prepared.preprocessor.node_names())
                        .map_err(domain("feature_graph"))?;
                run(label, &graph, config.mp_layers, &mut rows)?;
            }
        }
        "threshold" => {
            let corr = pearson_matrix(
                prepared.train.x.data(),
                prepared.train.x.rows(),
                prepared.train.x.cols(),
            )
            .map_err(domain("feature_graph"))?;
            let delta = match config.self_loop {
                SelfLoop::Fixed(d) => d,
                SelfLoop::Auto(_) => calibrate_delta(&corr).map_err(domain("feature_graph"))?,
            };
            let names = prepared.preprocessor.node_names();
            for threshold in [0.05, PRIMARY_THRESHOLD, 0.5] {
                let (raw, applied) =
                    build_adjacency(&corr, threshold, FALLBACK_THRESHOLD, delta)
                        .map_err(domain("feature_graph"))?;
                let normalized = normalize_adjacency(&raw, corr.n, &names)
                    .map_err(domain("feature_graph"))?;
                let graph = FeatureGraph {
                    n: corr.n,
                    node_names: names.clone(),
                    raw,
                    normalized,
                    primary_threshold: threshold,
                    fallback_threshold: FALLBACK_THRESHOLD,
                    applied,
                    self_loop_weight: delta,
                    null_graph: applied == AppliedThreshold::None,
                };
                run(format!("threshold {threshold}"), &graph, config.mp_layers, &mut rows)?;
            }
        }
        other => return Err(CliError::Usage(format!("unknown variant \"{other}\""))),
    }

    let mut writer = ArtifactWriter::new(&config.output_dir)?;
    let table: BTreeMap<&str, &Vec<AblationRow>> = BTreeMap::from([("runs", &rows)]);
    writer.write(
        &format!("ablation_{}.json", variant.replace('-', "_")),
        &serde_json::to_string_pretty(&table).expect("table serializes"),
    )?;
    writer.finish()?;

    if json {
        println!("{}", serde_json::to_string(&rows).expect("rows serialize"));
    } else {
        println!("{:<28} {:>8} {:>8} {:>6}", "variant", "dev", "test", "epoch");
        for r in &rows {
            println!(
                "{:<28} {:>8.4} {:>8.4} {:>6}",
                r.variant, r.dev_auc, r.test_auc, r.best_epoch
            );
        }
    }
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Fetch { openml_id, json } => cmd_fetch(openml_id, json),
        Command::Train { config, json } => cmd_train(&config, json),
        Command::Eval {
            config,
            model,
            split,
            json,
        } => cmd_eval(&config, &model, &split, json),
        Command::Explain {
            config,
            model,
            row,
            top_k,
            svg,
            json,
        } => cmd_explain(&config, &model, row, top_k, svg.as_deref(), json),
        Command::ShapAudit {
            config,
            model,
            instances,
            schedule,
            json,
        } => cmd_shap_audit(&config, &model, instances, &schedule, json),
        Command::Ablate {
            config,
            variant,
            json,
        } => cmd_ablate(&config, &variant, json),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => ExitCode::from(EXIT_USAGE),
                CliError::Domain(_) => ExitCode::from(EXIT_DOMAIN),
            }
        }
    }
}
