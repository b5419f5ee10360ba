//! Command-line driver: dataset generation, graph extraction, staged
//! training, evaluation, and single-sample prediction. All heavy lifting
//! lives in the library; this module only wires arguments to it.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{gen_synthetic, load_dataset, manifest_path};
use crate::error::{Error, Result};
use crate::fusion::{fused_classify, FusionModel};
use crate::gnn::{gnn_classify, GnnModel};
use crate::raster::{load_image, load_label_map};
use crate::scenegraph::{build_scene_graph, graph_to_json};
use crate::train::{
    evaluate, train_fusion, train_gnn, train_vit, MetricsHistory, Sample, Stage,
};
use crate::vision::{vit_classify, VitModel};

/// Training runs use 32-bit parameters; 64-bit exists for verification.
type P = f32;

#[derive(Parser)]
#[command(name = "tsg", version, about = "Two-stream scene understanding over graph and image streams")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// TOML run configuration; omitted keys take documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test dataset described by the config.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Extract a scene graph from a label map and print it as JSON.
    ExtractGraph {
        /// Label map file (.lmap, .png, or .pgm).
        map: PathBuf,
        /// Object class count for raster formats without metadata.
        #[arg(long)]
        classes: Option<usize>,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one stage: graph_stream, image_stream, fusion, or end_to_end.
    Train {
        #[arg(long)]
        stage: String,
        #[arg(long)]
        fusion_mode: Option<String>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate a checkpoint on the test split; writes metrics files.
    Eval {
        checkpoint: PathBuf,
        /// Metrics output format.
        #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
        format: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Predict the scene label of one (label map, image) pair.
    Predict {
        checkpoint: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
}

/// Maps error kinds to documented exit codes: 2 config, 3 data, 4
/// checkpoint, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse(_) | Error::Io(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

/// Worker thread cap from TSG_THREADS (default 1). Generated artifacts do
/// not depend on it because every sample derives its own seed.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("TSG_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("TSG_THREADS must be a positive integer, got '{v}'"))),
    }
}

fn load_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(
        common.seed,
        None,
        None,
        common.out.as_ref().and_then(|p| p.to_str()),
    )?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    worker_threads()?;
    match cli.command {
        Command::GenData { common } => cmd_gen_data(&load_config(&common)?),
        Command::ExtractGraph {
            map,
            classes,
            out,
            config,
        } => {
            let cfg = match &config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            cmd_extract_graph(&cfg, &map, classes, out.as_deref())
        }
        Command::Train {
            stage,
            fusion_mode,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.apply_overrides(None, Some(&stage), fusion_mode.as_deref(), None)?;
            cmd_train(&cfg)
        }
        Command::Eval {
            checkpoint,
            format,
            common,
        } => cmd_eval(&load_config(&common)?, &checkpoint, &format),
        Command::Predict {
            checkpoint,
            map,
            image,
            common,
        } => cmd_predict(&load_config(&common)?, &checkpoint, &map, &image),
    }
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = Path::new(&cfg.out_dir).join("data");
    let train = gen_synthetic(&cfg.data, "train", cfg.train_samples, &dir)?;
    let test = gen_synthetic(&cfg.data, "test", cfg.test_samples, &dir)?;
    eprintln!(
        "wrote {} train and {} test samples to {}",
        train.samples.len(),
        test.samples.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_extract_graph(
    cfg: &RunConfig,
    map_path: &Path,
    classes: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let classes = classes.unwrap_or(cfg.data.num_object_classes);
    let map = load_label_map(map_path, classes)?;
    let graph = build_scene_graph(&map, &cfg.extraction)?;
    let json = graph_to_json(&graph);
    match out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn data_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let dir = Path::new(&cfg.out_dir).join("data");
    let train = load_dataset(&manifest_path(&dir, "train"), &cfg.extraction)?;
    let test = load_dataset(&manifest_path(&dir, "test"), &cfg.extraction)?;
    Ok((train, test))
}

fn config_snapshot(cfg: &RunConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

fn restore_config(snapshot: &str) -> Result<RunConfig> {
    serde_json::from_str(snapshot)
        .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))
}

fn write_metrics(cfg: &RunConfig, name: &str, history: &MetricsHistory) -> Result<()> {
    let dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("metrics_{name}.csv")), history.to_csv())?;
    std::fs::write(
        dir.join(format!("metrics_{name}.json")),
        history.summary_json(),
    )?;
    Ok(())
}

fn stream_checkpoint_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    let name = match stage {
        Stage::GraphStream => "graph_stream",
        Stage::ImageStream => "image_stream",
        Stage::Fusion => "fused",
        Stage::EndToEnd => "fused",
    };
    Path::new(&cfg.out_dir).join(format!("{name}.tsck"))
}

fn load_stream_store(path: &Path, namespace: &str) -> Result<crate::params::ParamStore<P>> {
    Checkpoint::<P>::read(path)?.extract_store(namespace)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (train, test) = data_splits(cfg)?;
    let stage = cfg.train.stage;
    let out_path = stream_checkpoint_path(cfg, stage);
    std::fs::create_dir_all(Path::new(&cfg.out_dir))?;
    let mut ckpt = Checkpoint::new(config_snapshot(cfg));
    let history = match stage {
        Stage::GraphStream => {
            let mut model = GnnModel::<P>::new(cfg.gnn.clone(), cfg.seed)?;
            let history = train_gnn(&mut model, &train, &test, &cfg.train)?;
            ckpt.insert_store("gnn", &model.params)?;
            history
        }
        Stage::ImageStream => {
            let mut model = VitModel::<P>::new(cfg.vit.clone(), cfg.seed)?;
            let history = train_vit(&mut model, &train, &test, &cfg.train)?;
            ckpt.insert_store("vit", &model.params)?;
            history
        }
        Stage::Fusion | Stage::EndToEnd => {
            // fusion builds on previously trained stream checkpoints
            let g_path = stream_checkpoint_path(cfg, Stage::GraphStream);
            let v_path = stream_checkpoint_path(cfg, Stage::ImageStream);
            let mut gnn = GnnModel::<P> {
                cfg: cfg.gnn.clone(),
                params: load_stream_store(&g_path, "gnn")?,
            };
            let mut vit = VitModel::<P> {
                cfg: cfg.vit.clone(),
                params: load_stream_store(&v_path, "vit")?,
            };
            let mut fusion = FusionModel::<P>::new(cfg.fusion.clone(), cfg.seed)?;
            let history = train_fusion(&mut gnn, &mut vit, &mut fusion, &train, &test, &cfg.train)?;
            ckpt.insert_store("gnn", &gnn.params)?;
            ckpt.insert_store("vit", &vit.params)?;
            ckpt.insert_store("fuse", &fusion.params)?;
            history
        }
    };
    ckpt.write(&out_path)?;
    let name = match stage {
        Stage::GraphStream => "graph_stream",
        Stage::ImageStream => "image_stream",
        Stage::Fusion => "fusion",
        Stage::EndToEnd => "end_to_end",
    };
    write_metrics(cfg, name, &history)?;
    eprintln!(
        "stage {name}: final test accuracy {:?}; checkpoint at {}",
        history.final_test_accuracy(),
        out_path.display()
    );
    Ok(())
}

/// The models a checkpoint can reconstruct, determined by its namespaces.
enum LoadedModel {
    Graph(GnnModel<P>),
    Image(VitModel<P>),
    Fused(Box<(GnnModel<P>, VitModel<P>, FusionModel<P>)>),
}

fn load_model(path: &Path) -> Result<(RunConfig, LoadedModel)> {
    let ckpt = Checkpoint::<P>::read(path)?;
    let cfg = restore_config(&ckpt.config_json)?;
    let has = |ns: &str| ckpt.tensors.keys().any(|k| k.starts_with(&format!("{ns}.")));
    let model = if has("fuse") {
        LoadedModel::Fused(Box::new((
            GnnModel {
                cfg: cfg.gnn.clone(),
                params: ckpt.extract_store("gnn")?,
            },
            VitModel {
                cfg: cfg.vit.clone(),
                params: ckpt.extract_store("vit")?,
            },
            FusionModel {
                cfg: cfg.fusion.clone(),
                params: ckpt.extract_store("fuse")?,
            },
        )))
    } else if has("gnn") {
        LoadedModel::Graph(GnnModel {
            cfg: cfg.gnn.clone(),
            params: ckpt.extract_store("gnn")?,
        })
    } else if has("vit") {
        LoadedModel::Image(VitModel {
            cfg: cfg.vit.clone(),
            params: ckpt.extract_store("vit")?,
        })
    } else {
        return Err(Error::Checkpoint(
            "checkpoint holds no recognized model namespaces".into(),
        ));
    };
    Ok((cfg, model))
}

fn model_logits(model: &LoadedModel, batch: &[&Sample]) -> Result<crate::tensor::Tensor2D<P>> {
    let mut data = Vec::new();
    let mut cols = 0;
    for s in batch {
        let logits = match model {
            LoadedModel::Graph(m) => gnn_classify(&s.graph, m)?,
            LoadedModel::Image(m) => vit_classify(&s.image, m)?,
            LoadedModel::Fused(b) => fused_classify(&s.graph, &s.image, &b.0, &b.1, &b.2)?,
        };
        cols = logits.cols();
        data.extend_from_slice(logits.data());
    }
    crate::tensor::Tensor2D::new(batch.len(), cols, data)
}

fn cmd_eval(cli_cfg: &RunConfig, checkpoint: &Path, format: &str) -> Result<()> {
    let (ckpt_cfg, model) = load_model(checkpoint)?;
    // data location comes from the invocation; model shape from the snapshot
    let mut cfg = ckpt_cfg;
    cfg.out_dir = cli_cfg.out_dir.clone();
    let (_, test) = data_splits(&cfg)?;
    let (loss, acc) = evaluate(&test, |batch| model_logits(&model, batch))?;
    let mut history = MetricsHistory::default();
    history.push(0, "test", loss, acc);
    write_metrics(&cfg, "eval", &history)?;
    match format {
        "csv" => print!("{}", history.to_csv()),
        _ => println!("{}", history.summary_json()),
    }
    Ok(())
}

fn cmd_predict(
    cli_cfg: &RunConfig,
    checkpoint: &Path,
    map_path: &Path,
    image_path: &Path,
) -> Result<()> {
    let (ckpt_cfg, model) = load_model(checkpoint)?;
    let map = load_label_map(map_path, ckpt_cfg.data.num_object_classes)?;
    let image = load_image(image_path)?;
    let graph = build_scene_graph(&map, &ckpt_cfg.extraction)?;
    let _ = cli_cfg;
    let sample = Sample {
        graph,
        image,
        label: 0,
    };
    let logits = model_logits(&model, &[&sample])?;
    let row = logits.row(0);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    let doc = serde_json::json!({
        "label": best,
        "logits": row.iter().map(|&v| v as f64).collect::<Vec<f64>>(),
    });
    println!("{doc}");
    Ok(())
}
