#![allow(dead_code)]

use gvse_core::data::{generate_synthetic, Dataset, PatternKind, SyntheticSpec};
use gvse_core::embed::{build_ppmi, factorize, AttributeCorpus};
use gvse_core::graph::{binarize_attributes, build_attribute_graph, propagation_operator, BinarizeMode};
use gvse_core::model::{CnnBlockSpec, FusionMode, GvseModel, ModelConfig, ModelDims, WiringStrategy};
use gvse_core::train::{TrainConfig, TrainContext, WordTargets};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const WORD_DIM: usize = 4;

/// Six classes (two unseen), six attributes, 8x8 images.
pub fn tiny_data(samples_per_class: usize, sigma: f64) -> Dataset {
    let spec = SyntheticSpec {
        num_classes: 6,
        num_unseen: 2,
        num_attributes: 6,
        image_size: 8,
        samples_per_class,
        pattern_seed: 3,
        noise_sigma: sigma,
        pattern: PatternKind::Blocks,
        groups: 2,
    };
    generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

pub fn tiny_config(wiring: WiringStrategy, fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        input_height: 8,
        input_width: 8,
        blocks: vec![
            CnnBlockSpec { in_channels: 3, out_channels: 4, stride: 1 },
            CnnBlockSpec { in_channels: 4, out_channels: 4, stride: 2 },
        ],
        wiring,
        fusion,
        gcn_hidden: 5,
        node_dim: 3,
        latent: true,
        latent_dim: 4,
        self_loops: true,
    }
}

pub struct Tiny {
    pub data: Dataset,
    pub model: GvseModel,
    pub ctx: TrainContext,
}

pub fn tiny(config: ModelConfig, data: Dataset, seed: u64) -> Tiny {
    let cam = data.attributes();
    let membership = binarize_attributes(cam, BinarizeMode::Nonzero).unwrap();
    let graph = build_attribute_graph(cam, 0.5, BinarizeMode::Nonzero).unwrap();
    let corpus = AttributeCorpus::from_membership(&membership).unwrap();
    let table = factorize(&build_ppmi(&corpus).unwrap(), WORD_DIM, 1).unwrap();
    let targets = WordTargets::attribute_graph(&table, &membership).unwrap();
    let dims = ModelDims {
        vertices: graph.num_vertices(),
        attributes: cam.num_attributes(),
        word_dim: WORD_DIM,
    };
    let op = propagation_operator(&graph, config.self_loops);
    let model = GvseModel::new(config, dims, op, seed).unwrap();
    let ctx = TrainContext::new(&data, targets).unwrap();
    Tiny { data, model, ctx }
}

/// Two samples from each of the first two seen classes, and two unseen
/// samples for the bias term.
pub fn tiny_batches(t: &Tiny) -> (Vec<usize>, Vec<usize>) {
    let labels = t.data.labels();
    let pick = |class: usize, n: usize| -> Vec<usize> {
        (0..labels.len()).filter(|&i| labels[i] == class).take(n).collect()
    };
    let seen = &t.ctx.seen;
    let mut batch = pick(seen[0], 2);
    batch.extend(pick(seen[1], 2));
    let mut unl = pick(t.ctx.unseen[0], 1);
    unl.extend(pick(t.ctx.unseen[1], 1));
    (batch, unl)
}

pub fn transductive() -> TrainConfig {
    TrainConfig {
        transductive: true,
        ..TrainConfig::default()
    }
}
