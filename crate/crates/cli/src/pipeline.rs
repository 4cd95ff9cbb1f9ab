//! Config-driven assembly of data, graph, embeddings, model and training.

use gvse_core::data::{generate_synthetic, load_dataset, Dataset, Partition};
use gvse_core::embed::{build_ppmi, factorize, AttributeCorpus, WordEmbeddingTable};
use gvse_core::eval::{evaluate, Metrics, Setting};
use gvse_core::graph::{
    binarize_attributes, build_attribute_graph, build_category_graph, propagation_operator, KnowledgeGraph, Membership,
};
use gvse_core::model::{GvseModel, ModelDims};
use gvse_core::train::{train_epoch, AdamState, EpochReport, TrainContext, WordTargets};
use gvse_core::Result;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, ExperimentConfig, GraphType};

/// Independent random streams derived from the one config seed.
#[derive(Clone, Copy)]
pub enum Stream {
    Data = 1,
    Embedding = 2,
    Init = 3,
    Train = 4,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    seed ^ ((stream as u64) << 56)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data.source {
        DataSource::Synthetic(spec) => generate_synthetic(spec, &mut rng(cfg.seed, Stream::Data)),
        DataSource::Files(paths) => load_dataset(paths),
    }
}

pub fn membership(cfg: &ExperimentConfig, data: &Dataset) -> Result<Membership> {
    binarize_attributes(data.attributes(), cfg.graph.binarize)
}

pub fn build_graph(cfg: &ExperimentConfig, data: &Dataset) -> Result<KnowledgeGraph> {
    let cam = data.attributes();
    match cfg.graph.kind {
        GraphType::Attribute => build_attribute_graph(cam, cfg.graph.delta, cfg.graph.binarize),
        GraphType::Category => build_category_graph(cam, cfg.graph.category_threshold),
    }
}

/// Word embeddings and their PPMI reconstruction error.
pub fn build_embedding(cfg: &ExperimentConfig, data: &Dataset, membership: &Membership) -> Result<(WordEmbeddingTable, f64)> {
    let ppmi = build_ppmi(&AttributeCorpus::from_membership(membership)?)?;
    let mut table = factorize(&ppmi, cfg.embedding.dim, stream_seed(cfg.seed, Stream::Embedding))?;
    table.set_names(data.attributes().attribute_names().to_vec())?;
    let err = table.reconstruction_error(&ppmi);
    Ok((table, err))
}

/// Everything derived from the config before any weights exist.
pub struct Prepared {
    pub data: Dataset,
    pub partition: Partition,
    pub graph: KnowledgeGraph,
    pub targets: WordTargets,
    pub word_dim: usize,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let partition = data.partition(cfg.data.test_fraction)?;
    let membership = membership(cfg, &data)?;
    let graph = build_graph(cfg, &data)?;
    let (table, err) = build_embedding(cfg, &data, &membership)?;
    info!(
        "graph: {} vertices, {} edges; embedding d={} reconstruction error {err:.3e}",
        graph.num_vertices(),
        graph.num_edges(),
        table.dim()
    );
    let targets = match cfg.graph.kind {
        GraphType::Attribute => WordTargets::attribute_graph(&table, &membership)?,
        GraphType::Category => WordTargets::category_graph(&table, &membership)?,
    };
    Ok(Prepared {
        data,
        partition,
        graph,
        targets,
        word_dim: table.dim(),
    })
}

pub fn init_model(cfg: &ExperimentConfig, p: &Prepared) -> Result<GvseModel> {
    let dims = ModelDims {
        vertices: p.graph.num_vertices(),
        attributes: p.data.attributes().num_attributes(),
        word_dim: p.word_dim,
    };
    let op = propagation_operator(&p.graph, cfg.model.self_loops);
    GvseModel::new(cfg.model.clone(), dims, op, stream_seed(cfg.seed, Stream::Init))
}

/// Trains for the configured epochs, reporting each epoch to `on_epoch`.
pub fn train_model(
    cfg: &ExperimentConfig,
    p: &Prepared,
    model: &mut GvseModel,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    let ctx = TrainContext::new(&p.data, p.targets.clone())?;
    let mut adam = AdamState::from_config(model.params(), &cfg.train);
    let mut r = rng(cfg.seed, Stream::Train);
    let mut reports = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        let rep = train_epoch(
            model,
            &ctx,
            &p.data,
            &p.partition.train,
            &p.partition.test_unseen,
            &cfg.train,
            epoch,
            &mut adam,
            &mut r,
        )?;
        info!(
            "epoch {epoch}: L_A {:.4} L_LT {:.4} L_W {:.4} total {:.4}",
            rep.l_a, rep.l_lt, rep.l_w, rep.total
        );
        on_epoch(&rep)?;
        reports.push(rep);
    }
    Ok(reports)
}

pub struct RunOutcome {
    pub model: GvseModel,
    pub reports: Vec<EpochReport>,
    pub czsl: Metrics,
    pub gzsl: Metrics,
}

/// Prepare, train and evaluate in both settings.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let p = prepare(cfg)?;
    let mut model = init_model(cfg, &p)?;
    let reports = train_model(cfg, &p, &mut model, |_| Ok(()))?;
    let czsl = evaluate(&model, &p.data, &p.partition, Setting::Czsl)?;
    let gzsl = evaluate(&model, &p.data, &p.partition, Setting::Gzsl)?;
    Ok(RunOutcome {
        model,
        reports,
        czsl,
        gzsl,
    })
}
