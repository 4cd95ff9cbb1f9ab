use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gvse_core::eval::{evaluate, MetricsReport, Setting};
use gvse_core::model::{read_checkpoint, write_checkpoint, FusionMode, WiringStrategy};
use gvse_core::{Error, Result};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, GraphType};
use crate::pipeline;

pub const GRAPH_FILE: &str = "graph.json";
pub const EMBEDDING_FILE: &str = "embeddings.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_SIDECAR: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

/// Writes the knowledge graph with a stats block.
pub fn cmd_build_graph(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let data = pipeline::load_data(cfg)?;
    let graph = pipeline::build_graph(cfg, &data)?;
    let degrees = graph.degrees();
    let mut histogram = BTreeMap::new();
    for d in &degrees {
        *histogram.entry(d.to_string()).or_insert(0usize) += 1;
    }
    if graph.num_edges() == 0 {
        warn!("graph has no edges at this threshold");
    }
    let threshold = match cfg.graph.kind {
        GraphType::Attribute => cfg.graph.delta,
        GraphType::Category => cfg.graph.category_threshold,
    };
    let doc = json!({
        "config_digest": cfg.digest(),
        "graph": serde_json::from_str::<serde_json::Value>(&graph.to_json()?)?,
        "stats": {
            "type": cfg.graph.kind,
            "threshold": threshold,
            "vertices": graph.num_vertices(),
            "edges": graph.num_edges(),
            "degree_histogram": histogram,
        },
    });
    let path = out_dir(cfg)?.join(GRAPH_FILE);
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
    info!("{} vertices, {} edges -> {}", graph.num_vertices(), graph.num_edges(), path.display());
    Ok(path)
}

/// Writes the attribute word-vector table.
pub fn cmd_train_embed(cfg: &ExperimentConfig) -> Result<(PathBuf, f64)> {
    cfg.validate()?;
    let data = pipeline::load_data(cfg)?;
    let membership = pipeline::membership(cfg, &data)?;
    let (table, err) = pipeline::build_embedding(cfg, &data, &membership)?;
    info!("embedding d={} reconstruction error {err:e}", table.dim());
    let path = out_dir(cfg)?.join(EMBEDDING_FILE);
    let mut f = fs::File::create(&path)?;
    writeln!(f, "# config_digest={}", cfg.digest())?;
    table.write_csv(&mut f)?;
    Ok((path, err))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config_digest: String,
    parameters: Vec<(&'a str, &'a [usize])>,
    config: &'a ExperimentConfig,
}

/// Trains and writes the checkpoint, its sidecar and the epoch log.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let digest = cfg.digest();
    let p = pipeline::prepare(cfg)?;
    let mut model = pipeline::init_model(cfg, &p)?;
    let dir = out_dir(cfg)?.to_path_buf();
    let mut log = fs::File::create(dir.join(TRAIN_LOG))?;
    writeln!(log, "{}", json!({ "config_digest": digest }))?;
    let reports = pipeline::train_model(cfg, &p, &mut model, |r| {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
        Ok(())
    })?;
    let summary = match reports.last() {
        Some(r) => json!({
            "summary": {
                "epochs": reports.len(),
                "L_A": r.l_a,
                "L_LT": r.l_lt,
                "L_W": r.l_w,
                "L_B": r.l_b,
                "total": r.total,
                "config_digest": digest,
            }
        }),
        None => json!({ "summary": { "epochs": 0, "config_digest": digest } }),
    };
    writeln!(log, "{summary}")?;

    let path = dir.join(CHECKPOINT_FILE);
    write_checkpoint(&path, &digest, model.params())?;
    let sidecar = Sidecar {
        config_digest: digest,
        parameters: model
            .params()
            .iter()
            .map(|(_, p)| (p.name.as_str(), p.value.shape()))
            .collect(),
        config: cfg,
    };
    fs::write(dir.join(CHECKPOINT_SIDECAR), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(path)
}

pub fn split_name(cfg: &ExperimentConfig) -> String {
    match &cfg.data.source {
        crate::config::DataSource::Synthetic(_) => "synthetic-PS".into(),
        crate::config::DataSource::Files(p) => p
            .split
            .file_stem()
            .map_or_else(|| "custom".into(), |s| s.to_string_lossy().into_owned()),
    }
}

/// Evaluates a checkpoint produced from the same config.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, setting: Setting) -> Result<(PathBuf, MetricsReport)> {
    let digest = cfg.digest();
    let ck = read_checkpoint(checkpoint)?;
    if ck.digest != digest {
        return Err(Error::Artifact(format!(
            "checkpoint was trained under config {} but this config is {}",
            ck.digest, digest
        )));
    }
    let p = pipeline::prepare(cfg)?;
    let mut model = pipeline::init_model(cfg, &p)?;
    model.load_values(ck.tensors)?;
    let metrics = evaluate(&model, &p.data, &p.partition, setting)?;
    let report = MetricsReport::new(
        setting,
        &split_name(cfg),
        &metrics,
        p.data.attributes().category_names(),
        &digest,
    );
    let path = out_dir(cfg)?.join(format!("metrics_{}.json", setting.as_str()));
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok((path, report))
}

pub const AXES: [&str; 6] = ["wiring", "graph-type", "fusion", "delta", "gamma", "gvse-on-off"];

/// Named config variants for one ablation axis.
pub fn ablation_arms(cfg: &ExperimentConfig, axis: &str) -> Result<Vec<(String, ExperimentConfig)>> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    let arms = match axis {
        "wiring" => [
            ("each-block", WiringStrategy::EachBlock),
            ("each-stage", WiringStrategy::EachStage),
            ("last-block", WiringStrategy::LastBlock),
        ]
        .into_iter()
        .map(|(n, w)| (n.to_string(), with(&|c| c.model.wiring = w)))
        .collect(),
        "graph-type" => [("attribute", GraphType::Attribute), ("category", GraphType::Category)]
            .into_iter()
            .map(|(n, g)| (n.to_string(), with(&|c| c.graph.kind = g)))
            .collect(),
        "fusion" => [("concat", FusionMode::Concat), ("sum", FusionMode::Sum)]
            .into_iter()
            .map(|(n, f)| (n.to_string(), with(&|c| c.model.fusion = f)))
            .collect(),
        "delta" => [0.25, 0.5, 0.75]
            .into_iter()
            .map(|d| (format!("delta={d}"), with(&|c| c.graph.delta = d)))
            .collect(),
        "gamma" => [0.0, 0.25, 0.5, 0.75, 1.0]
            .into_iter()
            .map(|g| (format!("gamma={g}"), with(&|c| c.train.gamma = g)))
            .collect(),
        "gvse-on-off" => vec![
            ("gvse-on".to_string(), cfg.clone()),
            (
                "gvse-off".to_string(),
                with(&|c| {
                    c.model.wiring = WiringStrategy::Disabled;
                    c.model.fusion = FusionMode::Off;
                }),
            ),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown ablation axis {other:?}; expected one of {}",
                AXES.join(", ")
            )))
        }
    };
    Ok(arms)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub acc: Option<f64>,
    pub acc_s: Option<f64>,
    pub acc_u: Option<f64>,
    pub h: Option<f64>,
    pub wall_ms: u64,
    pub error: String,
}

/// Trains and evaluates every arm of `axis` with the shared seed.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: &str) -> Result<(PathBuf, Vec<AblationRow>)> {
    cfg.validate()?;
    let arms = ablation_arms(cfg, axis)?;
    let mut rows = Vec::with_capacity(arms.len());
    for (arm, arm_cfg) in arms {
        let start = Instant::now();
        let outcome = arm_cfg.validate().and_then(|_| pipeline::run(&arm_cfg));
        let wall_ms = if cfg.train.log_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        let row = match outcome {
            Ok(o) => AblationRow {
                arm,
                acc: o.czsl.acc,
                acc_s: o.gzsl.acc_s,
                acc_u: o.gzsl.acc_u,
                h: o.gzsl.h,
                wall_ms,
                error: String::new(),
            },
            Err(e) => {
                warn!("arm {arm} failed: {e}");
                AblationRow {
                    arm,
                    acc: None,
                    acc_s: None,
                    acc_u: None,
                    h: None,
                    wall_ms,
                    error: e.to_string(),
                }
            }
        };
        info!("{axis} {}: acc {:?} h {:?}", row.arm, row.acc, row.h);
        rows.push(row);
    }
    let path = out_dir(cfg)?.join(format!("ablation_{axis}.csv"));
    let mut f = fs::File::create(&path)?;
    writeln!(f, "# config_digest={}", cfg.digest())?;
    let mut w = csv::Writer::from_writer(f);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok((path, rows))
}
