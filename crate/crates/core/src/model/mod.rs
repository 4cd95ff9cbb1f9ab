//! The entangled CNN/GCN network.
//!
//! A stack of 3x3 conv blocks carries the visual pipeline. Wired blocks hand
//! their feature map to a two-layer GCN block running on the knowledge
//! graph; the GCN output gates the feature map before it continues down the
//! CNN, and its squeezed vertex mean is fused into the final embedding.

mod checkpoint;
mod layers;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use layers::{fuse_embedding, gate_feedback, gcn_layer, reshape_in, squeeze, srf_pool, Affine, FusionMode};

use crate::error::{Error, Result};
use crate::graph::PropagationOperator;
use crate::tensor::{Activation, ParamId, ParamStore, Tape, Tensor, Var};

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Which CNN blocks receive a GCN block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WiringStrategy {
    EachBlock,
    /// The last block before every resolution change, plus the final block.
    #[default]
    EachStage,
    LastBlock,
    /// Plain CNN.
    Disabled,
}

impl WiringStrategy {
    pub fn wired_blocks(self, blocks: &[CnnBlockSpec]) -> Vec<usize> {
        let n = blocks.len();
        if n == 0 {
            return Vec::new();
        }
        match self {
            WiringStrategy::EachBlock => (0..n).collect(),
            WiringStrategy::EachStage => (0..n)
                .filter(|&i| i + 1 == n || blocks[i + 1].stride > 1)
                .collect(),
            WiringStrategy::LastBlock => vec![n - 1],
            WiringStrategy::Disabled => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub blocks: Vec<CnnBlockSpec>,
    pub wiring: WiringStrategy,
    pub fusion: FusionMode,
    pub gcn_hidden: usize,
    pub node_dim: usize,
    pub latent: bool,
    pub latent_dim: usize,
    pub self_loops: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let block = |i, o, s| CnnBlockSpec {
            in_channels: i,
            out_channels: o,
            stride: s,
        };
        Self {
            input_channels: 3,
            input_height: 32,
            input_width: 32,
            blocks: vec![block(3, 8, 1), block(8, 16, 2), block(16, 16, 1), block(16, 32, 2)],
            wiring: WiringStrategy::EachStage,
            fusion: FusionMode::Concat,
            gcn_hidden: 64,
            node_dim: 16,
            latent: true,
            latent_dim: 16,
            self_loops: true,
        }
    }
}

impl ModelConfig {
    /// Spatial size after every block.
    pub fn block_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut c, mut h, mut w) = (self.input_channels, self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != c {
                return Err(Error::Config(format!(
                    "block {i} expects {} input channels, previous stage gives {c}",
                    b.in_channels
                )));
            }
            if !(1..=2).contains(&b.stride) || b.out_channels == 0 {
                return Err(Error::Config(format!("block {i}: stride must be 1 or 2 and channels positive")));
            }
            if h + 2 * PAD < KERNEL || w + 2 * PAD < KERNEL {
                return Err(Error::Config(format!("block {i}: {h}x{w} input too small")));
            }
            h = (h + 2 * PAD - KERNEL) / b.stride + 1;
            w = (w + 2 * PAD - KERNEL) / b.stride + 1;
            c = b.out_channels;
            out.push((c, h, w));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("at least one CNN block is required".into()));
        }
        if self.gcn_hidden == 0 || self.node_dim == 0 || (self.latent && self.latent_dim == 0) {
            return Err(Error::Config("GCN hidden, node and latent widths must be positive".into()));
        }
        if self.wiring == WiringStrategy::Disabled && self.fusion != FusionMode::Off {
            return Err(Error::Contract("SRF fusion needs at least one wired GCN block".into()));
        }
        self.block_shapes().map(|_| ())
    }

    pub fn visual_width(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }
}

/// Sizes fixed by the data rather than the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Knowledge-graph vertices.
    pub vertices: usize,
    /// Width of the attribute head (`m`).
    pub attributes: usize,
    /// Word-vector width `d`.
    pub word_dim: usize,
}

#[derive(Clone, Debug)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
struct GcnParams {
    cnn_index: usize,
    width: usize,
    w_in: ParamId,
    b_in: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    f_sq: ParamId,
    proj: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub cnn_index: usize,
    pub x_map: Var,
    pub node_input: Var,
    pub f_g: Var,
    pub squeezed: Var,
    pub srf: Var,
    pub gate: Var,
    pub x_tilde: Var,
}

/// Every intermediate of one forward pass, as handles into the tape.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub cnn_outputs: Vec<Var>,
    pub blocks: Vec<BlockTrace>,
    pub theta: Var,
    pub theta_plus: Var,
    pub phi: Var,
    /// Unit-norm latent embedding.
    pub phi_lat: Option<Var>,
    /// `F_sq(f_G^(L))`, the last block's squeezed vertex rows.
    pub word_vectors: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct GvseModel {
    config: ModelConfig,
    dims: ModelDims,
    operator: PropagationOperator,
    store: ParamStore,
    cnn: Vec<ConvParams>,
    gcn: Vec<GcnParams>,
    gcn_of_block: BTreeMap<usize, usize>,
    phi: (ParamId, ParamId),
    lat: Option<(ParamId, ParamId)>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl GvseModel {
    pub fn new(config: ModelConfig, dims: ModelDims, operator: PropagationOperator, seed: u64) -> Result<Self> {
        config.validate()?;
        if operator.size() != dims.vertices {
            return Err(Error::dim("propagation operator", &[operator.size()], &[dims.vertices]));
        }
        if dims.vertices == 0 || dims.attributes == 0 || dims.word_dim == 0 {
            return Err(Error::Config("vertex, attribute and word widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let shapes = config.block_shapes()?;

        let mut cnn = Vec::new();
        for (i, b) in config.blocks.iter().enumerate() {
            let fan = b.in_channels * KERNEL * KERNEL;
            let weight = store.add(
                format!("cnn.{i}.weight"),
                uniform(&mut rng, &[b.out_channels, b.in_channels, KERNEL, KERNEL], fan),
            );
            let bias = store.add(format!("cnn.{i}.bias"), uniform(&mut rng, &[b.out_channels], fan));
            cnn.push(ConvParams {
                weight,
                bias,
                stride: b.stride,
            });
        }

        let (m, dn, d, hid) = (dims.vertices, config.node_dim, dims.word_dim, config.gcn_hidden);
        let mut gcn = Vec::new();
        let mut gcn_of_block = BTreeMap::new();
        let mut prev_width: Option<usize> = None;
        for (l, ci) in config.wiring.wired_blocks(&config.blocks).into_iter().enumerate() {
            let (c, h, w) = shapes[ci];
            let width = h * w;
            let in_dim = if l == 0 { dn } else { dn + d };
            let p = format!("gcn.{l}");
            let w_in = store.add(format!("{p}.in.weight"), uniform(&mut rng, &[m * dn, c], c));
            let b_in = store.add(format!("{p}.in.bias"), uniform(&mut rng, &[m * dn], c));
            let w1 = store.add(format!("{p}.layer1.weight"), uniform(&mut rng, &[in_dim, hid], in_dim));
            let b1 = store.add(format!("{p}.layer1.bias"), uniform(&mut rng, &[hid], in_dim));
            let w2 = store.add(format!("{p}.layer2.weight"), uniform(&mut rng, &[hid, width], hid));
            let b2 = store.add(format!("{p}.layer2.bias"), uniform(&mut rng, &[width], hid));
            let w_out = store.add(format!("{p}.out.weight"), uniform(&mut rng, &[m, c], m));
            let b_out = store.add(format!("{p}.out.bias"), uniform(&mut rng, &[c], m));
            let f_sq = store.add(format!("{p}.squeeze"), uniform(&mut rng, &[width, d], width));
            let proj = match prev_width {
                Some(pw) if pw != width => Some(store.add(
                    format!("{p}.residual"),
                    uniform(&mut rng, &[pw, width], pw),
                )),
                _ => None,
            };
            gcn_of_block.insert(ci, gcn.len());
            gcn.push(GcnParams {
                cnn_index: ci,
                width,
                w_in,
                b_in,
                w1,
                b1,
                w2,
                b2,
                w_out,
                b_out,
                f_sq,
                proj,
            });
            prev_width = Some(width);
        }

        let fused = config
            .fusion
            .fused_width(config.visual_width(), gcn.len(), d);
        let phi = (
            store.add("head.phi.weight", uniform(&mut rng, &[fused, dims.attributes], fused)),
            store.add("head.phi.bias", uniform(&mut rng, &[dims.attributes], fused)),
        );
        let lat = config.latent.then(|| {
            (
                store.add("head.lat.weight", uniform(&mut rng, &[fused, config.latent_dim], fused)),
                store.add("head.lat.bias", uniform(&mut rng, &[config.latent_dim], fused)),
            )
        });

        Ok(Self {
            config,
            dims,
            operator,
            store,
            cnn,
            gcn,
            gcn_of_block,
            phi,
            lat,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn operator(&self) -> &PropagationOperator {
        &self.operator
    }

    pub fn set_operator(&mut self, op: PropagationOperator) -> Result<()> {
        if op.size() != self.dims.vertices {
            return Err(Error::dim("set_operator", &[op.size()], &[self.dims.vertices]));
        }
        self.operator = op;
        Ok(())
    }

    pub fn num_gcn_blocks(&self) -> usize {
        self.gcn.len()
    }

    /// `(cnn block index, vertex feature width)` for each GCN block.
    pub fn gcn_layout(&self) -> Vec<(usize, usize)> {
        self.gcn.iter().map(|g| (g.cnn_index, g.width)).collect()
    }

    /// Width of `theta(x)+`.
    pub fn fused_width(&self) -> usize {
        self.config
            .fusion
            .fused_width(self.config.visual_width(), self.gcn.len(), self.dims.word_dim)
    }

    pub fn latent_width(&self) -> Option<usize> {
        self.config.latent.then_some(self.config.latent_dim)
    }

    fn affine(&self, tape: &mut Tape, w: ParamId, b: Option<ParamId>) -> Affine {
        Affine {
            weight: tape.param(&self.store, w),
            bias: b.map(|b| tape.param(&self.store, b)),
        }
    }

    /// GCN block `l` (0-based) on CNN map `x_map`. Block 0 takes no
    /// previous output; later blocks require it and add a residual path.
    pub fn gcn_block(&self, tape: &mut Tape, l: usize, x_map: Var, prev: Option<Var>) -> Result<(Var, Var)> {
        let g = self
            .gcn
            .get(l)
            .ok_or_else(|| Error::Contract(format!("no GCN block {l}")))?;
        let (m, dn) = (self.dims.vertices, self.config.node_dim);
        let w_in = self.affine(tape, g.w_in, Some(g.b_in));
        let node_input = reshape_in(tape, x_map, w_in, m, dn)?;
        let last = l + 1 == self.gcn.len();
        let p = tape.constant(self.operator.matrix().clone());
        let l1 = self.affine(tape, g.w1, Some(g.b1));
        let l2 = self.affine(tape, g.w2, Some(g.b2));
        let out_act = if last { Activation::Identity } else { Activation::Relu };
        let f = match (l, prev) {
            (0, None) => {
                let h = gcn_layer(tape, node_input, p, l1, Activation::Relu)?;
                gcn_layer(tape, h, p, l2, out_act)?
            }
            (0, Some(_)) => return Err(Error::Contract("GCN block 0 takes no previous output".into())),
            (_, None) => return Err(Error::Contract(format!("GCN block {l} needs the previous block output"))),
            (_, Some(prev)) => {
                let prev_sq = tape.param(&self.store, self.gcn[l - 1].f_sq);
                let squeezed_prev = squeeze(tape, prev, prev_sq)?;
                let input = tape.concat(&[node_input, squeezed_prev], 1)?;
                let h = gcn_layer(tape, input, p, l1, Activation::Relu)?;
                let out = gcn_layer(tape, h, p, l2, out_act)?;
                let skip = match g.proj {
                    Some(w) => {
                        let w = tape.param(&self.store, w);
                        tape.matmul(prev, w)?
                    }
                    None => prev,
                };
                tape.add(out, skip)?
            }
        };
        Ok((f, node_input))
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<ForwardTrace> {
        let want = [self.config.input_channels, self.config.input_height, self.config.input_width];
        if x.shape() != want {
            return Err(Error::dim("forward input", x.shape(), &want));
        }
        let mut h = tape.constant(x.clone());
        let mut cnn_outputs = Vec::with_capacity(self.cnn.len());
        let mut blocks = Vec::with_capacity(self.gcn.len());
        let mut prev_f = None;

        for (i, conv) in self.cnn.iter().enumerate() {
            let w = tape.param(&self.store, conv.weight);
            let b = tape.param(&self.store, conv.bias);
            let z = tape.conv2d(h, w, conv.stride, PAD)?;
            let z = tape.add_bias(z, b, 0)?;
            let x_map = tape.relu(z);
            check_finite(tape, x_map, i, "CNN block output")?;
            cnn_outputs.push(x_map);
            h = x_map;

            if let Some(&l) = self.gcn_of_block.get(&i) {
                let g = &self.gcn[l];
                let (f_g, node_input) = self.gcn_block(tape, l, x_map, prev_f)?;
                check_finite(tape, f_g, i, "GCN block output")?;
                let f_sq = tape.param(&self.store, g.f_sq);
                let squeezed = squeeze(tape, f_g, f_sq)?;
                let srf = srf_pool(tape, f_g, f_sq)?;
                let w_out = self.affine(tape, g.w_out, Some(g.b_out));
                let (x_tilde, gate) = gate_feedback(tape, x_map, f_g, w_out)?;
                check_finite(tape, x_tilde, i, "gated feature map")?;
                blocks.push(BlockTrace {
                    cnn_index: g.cnn_index,
                    x_map,
                    node_input,
                    f_g,
                    squeezed,
                    srf,
                    gate,
                    x_tilde,
                });
                prev_f = Some(f_g);
                h = x_tilde;
            }
        }

        let theta = tape.global_avg_pool(h)?;
        let srfs: Vec<Var> = blocks.iter().map(|b| b.srf).collect();
        let theta_plus = fuse_embedding(tape, theta, &srfs, self.config.fusion)?;
        debug_assert_eq!(tape.shape(theta_plus), &[self.fused_width()]);
        let phi = self.head(tape, theta_plus, self.phi)?;
        let phi_lat = match self.lat {
            Some(p) => {
                let raw = self.head(tape, theta_plus, p)?;
                Some(tape.l2_normalize(raw))
            }
            None => None,
        };
        let last = self.cnn.len();
        check_finite(tape, phi, last, "attribute head")?;
        if let Some(v) = phi_lat {
            check_finite(tape, v, last, "latent head")?;
        }
        Ok(ForwardTrace {
            cnn_outputs,
            theta,
            theta_plus,
            phi,
            phi_lat,
            word_vectors: blocks.last().map(|b| b.squeezed),
            blocks,
        })
    }

    fn head(&self, tape: &mut Tape, theta_plus: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let width = tape.shape(theta_plus)[0];
        let row = tape.reshape(theta_plus, &[1, width])?;
        let w = tape.param(&self.store, w);
        let out = tape.matmul(row, w)?;
        let n = tape.shape(out)[1];
        let out = tape.reshape(out, &[n])?;
        let b = tape.param(&self.store, b);
        tape.add_bias(out, b, 0)
    }

    /// Overwrites parameters in declaration order.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Artifact(format!(
                "checkpoint holds {} tensors, model declares {}",
                values.len(),
                self.store.len()
            )));
        }
        let ids: Vec<ParamId> = self.store.ids().collect();
        for (id, v) in ids.into_iter().zip(values) {
            let p = self.store.get_mut(id);
            if p.value.shape() != v.shape() {
                return Err(Error::Artifact(format!(
                    "parameter {} has shape {:?}, checkpoint gives {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }
}

fn check_finite(tape: &Tape, v: Var, block: usize, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFault {
            block,
            detail: format!("non-finite {what}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{propagation_operator, KnowledgeGraph};

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_height: 8,
            input_width: 8,
            blocks: vec![
                CnnBlockSpec { in_channels: 3, out_channels: 4, stride: 1 },
                CnnBlockSpec { in_channels: 4, out_channels: 4, stride: 2 },
                CnnBlockSpec { in_channels: 4, out_channels: 6, stride: 1 },
            ],
            gcn_hidden: 8,
            node_dim: 4,
            latent_dim: 5,
            ..ModelConfig::default()
        }
    }

    fn dims() -> ModelDims {
        ModelDims { vertices: 5, attributes: 5, word_dim: 3 }
    }

    fn op() -> PropagationOperator {
        propagation_operator(&KnowledgeGraph::from_edges(5, &[(0, 1), (2, 3)]).unwrap(), true)
    }

    #[test]
    fn wiring_strategies() {
        let cfg = small_config();
        assert_eq!(WiringStrategy::EachBlock.wired_blocks(&cfg.blocks), vec![0, 1, 2]);
        assert_eq!(WiringStrategy::EachStage.wired_blocks(&cfg.blocks), vec![0, 2]);
        assert_eq!(WiringStrategy::LastBlock.wired_blocks(&cfg.blocks), vec![2]);
        assert!(WiringStrategy::Disabled.wired_blocks(&cfg.blocks).is_empty());
        let d = ModelConfig::default();
        assert_eq!(WiringStrategy::EachStage.wired_blocks(&d.blocks), vec![0, 2, 3]);
    }

    #[test]
    fn last_block_has_one_trace_entry() {
        let cfg = ModelConfig { wiring: WiringStrategy::LastBlock, ..small_config() };
        let model = GvseModel::new(cfg, dims(), op(), 1).unwrap();
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &Tensor::full(&[3, 8, 8], 0.3)).unwrap();
        assert_eq!(trace.blocks.len(), 1);
        assert_eq!(tape.shape(trace.theta_plus), &[6 + 3]);
    }

    #[test]
    fn block_output_shapes() {
        let cfg = ModelConfig { wiring: WiringStrategy::EachBlock, ..small_config() };
        let model = GvseModel::new(cfg, dims(), op(), 1).unwrap();
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &Tensor::full(&[3, 8, 8], 0.3)).unwrap();
        let widths: Vec<usize> = trace.blocks.iter().map(|b| tape.shape(b.f_g)[1]).collect();
        assert_eq!(widths, vec![64, 16, 16]);
        assert!(trace.blocks.iter().all(|b| tape.shape(b.f_g)[0] == 5));
        assert_eq!(model.fused_width(), 6 + 3 * 3);
        assert_eq!(tape.shape(trace.word_vectors.unwrap()), &[5, 3]);
    }

    #[test]
    fn gates_lie_in_unit_interval() {
        let cfg = ModelConfig { wiring: WiringStrategy::EachBlock, ..small_config() };
        let model = GvseModel::new(cfg, dims(), op(), 9).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3, 8, 8], (0..192).map(|i| ((i * 37 % 17) as f64 - 8.0) / 4.0).collect()).unwrap();
        let trace = model.forward(&mut tape, &x).unwrap();
        for b in &trace.blocks {
            assert!(tape.value(b.gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_theta() {
        let cfg = ModelConfig { wiring: WiringStrategy::Disabled, fusion: FusionMode::Off, ..small_config() };
        let mut model = GvseModel::new(cfg, dims(), op(), 2).unwrap();
        let ids: Vec<ParamId> = model.params().ids().collect();
        for id in ids {
            if model.params().get(id).name.ends_with(".bias") {
                model.params_mut().value_mut(id).data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &Tensor::zeros(&[3, 8, 8])).unwrap();
        assert!(tape.value(trace.theta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_block_is_pure_residual() {
        let cfg = ModelConfig {
            wiring: WiringStrategy::EachBlock,
            blocks: vec![
                CnnBlockSpec { in_channels: 3, out_channels: 4, stride: 1 },
                CnnBlockSpec { in_channels: 4, out_channels: 4, stride: 1 },
            ],
            ..small_config()
        };
        let mut model = GvseModel::new(cfg, dims(), op(), 4).unwrap();
        let ids: Vec<ParamId> = model.params().ids().collect();
        for id in ids {
            let name = model.params().get(id).name.clone();
            if name.starts_with("gcn.1.layer") {
                model.params_mut().value_mut(id).data_mut().fill(0.0);
            }
        }
        assert!(model.gcn[1].proj.is_none());
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &Tensor::full(&[3, 8, 8], 0.5)).unwrap();
        assert_eq!(tape.value(trace.blocks[1].f_g), tape.value(trace.blocks[0].f_g));
    }

    #[test]
    fn first_block_with_zero_weights_is_zero() {
        let cfg = ModelConfig { wiring: WiringStrategy::LastBlock, ..small_config() };
        let mut model = GvseModel::new(cfg, dims(), op(), 4).unwrap();
        let ids: Vec<ParamId> = model.params().ids().collect();
        for id in ids {
            if model.params().get(id).name.starts_with("gcn.0.") {
                model.params_mut().value_mut(id).data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &Tensor::full(&[3, 8, 8], 0.5)).unwrap();
        assert!(tape.value(trace.blocks[0].f_g).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_block_contract() {
        let cfg = ModelConfig { wiring: WiringStrategy::EachBlock, ..small_config() };
        let model = GvseModel::new(cfg, dims(), op(), 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4, 8, 8]));
        assert!(matches!(model.gcn_block(&mut tape, 1, x, None), Err(Error::Contract(_))));
    }

    #[test]
    fn fusion_requires_wiring() {
        let cfg = ModelConfig { wiring: WiringStrategy::Disabled, fusion: FusionMode::Concat, ..small_config() };
        assert!(matches!(GvseModel::new(cfg, dims(), op(), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn numeric_fault_names_block() {
        let model = GvseModel::new(small_config(), dims(), op(), 4).unwrap();
        let mut bad = model.clone();
        let id = bad.params().find("cnn.1.bias").unwrap();
        bad.params_mut().value_mut(id).data_mut()[0] = f64::MAX;
        let id = bad.params().find("cnn.2.weight").unwrap();
        bad.params_mut().value_mut(id).data_mut().fill(f64::MAX);
        let mut tape = Tape::new();
        match bad.forward(&mut tape, &Tensor::ones(&[3, 8, 8])) {
            Err(Error::NumericFault { block, .. }) => assert_eq!(block, 2),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }
}
