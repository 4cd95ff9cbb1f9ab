//! Losses, triplet mining, Adam and the epoch loop.

use std::time::Instant;

use log::{debug, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embed::WordEmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::Membership;
use crate::model::GvseModel;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub bias_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            alpha: 1.0,
            bias_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("bias_weight", self.bias_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub bias_weight: f64,
    pub transductive: bool,
    /// Record real elapsed time in logs; off keeps logs byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 30,
            gamma: w.gamma,
            alpha: w.alpha,
            bias_weight: w.bias_weight,
            transductive: false,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            alpha: self.alpha,
            bias_weight: self.bias_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `-(1/N) sum_i log softmax(phi_i . A^T)[y_i]` with `A` the `S x m` seen
/// attribute rows and `labels` indexing its rows.
pub fn loss_attribute_ce(tape: &mut Tape, phi: Var, labels: &[usize], seen_attrs: &Tensor) -> Result<Var> {
    let s = seen_attrs.rows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
        return Err(Error::Contract(format!("label {bad} is not one of the {s} seen classes")));
    }
    let shape = tape.shape(phi).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != seen_attrs.cols() {
        return Err(Error::dim("loss_attribute_ce", &shape, &[labels.len(), seen_attrs.cols()]));
    }
    let at = tape.constant(seen_attrs.transpose()?);
    let scores = tape.matmul(phi, at)?;
    let logp = tape.log_softmax_rows(scores)?;
    let idx = labels.iter().enumerate().map(|(i, &y)| i * s + y).collect();
    let picked = tape.gather(logp, idx, &[labels.len()])?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletBatch {
    /// `(anchor, positive, negative)` indices into the batch.
    pub triples: Vec<(usize, usize, usize)>,
}

impl TripletBatch {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }
}

/// One random positive and negative for every anchor that has both.
pub fn mine_triplets<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> TripletBatch {
    let mut triples = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&j| j != a && labels[j] == la).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != la).collect();
        if let (Some(&p), Some(&n)) = (pos.choose(rng), neg.choose(rng)) {
            triples.push((a, p, n));
        }
    }
    TripletBatch { triples }
}

#[derive(Clone, Copy, Debug)]
pub struct TripletLoss {
    pub value: Var,
    /// Set when there were no triples and `value` is a constant zero.
    pub empty: bool,
}

/// Mean of `[|a-p|^2 - |a-n|^2 + alpha]_+` over the triples.
pub fn loss_triplet(tape: &mut Tape, lat: Var, triplets: &TripletBatch, alpha: f64) -> Result<TripletLoss> {
    if triplets.is_empty() {
        return Ok(TripletLoss {
            value: tape.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    let n = tape.shape(lat).first().copied().unwrap_or(0);
    if let Some(t) = triplets.triples.iter().find(|t| t.0.max(t.1).max(t.2) >= n) {
        return Err(Error::Contract(format!("triple {t:?} indexes past a batch of {n}")));
    }
    let a_idx: Vec<usize> = triplets.triples.iter().map(|t| t.0).collect();
    let p_idx: Vec<usize> = triplets.triples.iter().map(|t| t.1).collect();
    let n_idx: Vec<usize> = triplets.triples.iter().map(|t| t.2).collect();
    let a = tape.gather_rows(lat, &a_idx)?;
    let p = tape.gather_rows(lat, &p_idx)?;
    let ng = tape.gather_rows(lat, &n_idx)?;
    let dap = sq_dist_rows(tape, a, p)?;
    let dan = sq_dist_rows(tape, a, ng)?;
    let diff = tape.sub(dap, dan)?;
    let shifted = tape.add_scalar(diff, alpha);
    let hinge = tape.relu(shifted);
    Ok(TripletLoss {
        value: tape.mean(hinge),
        empty: false,
    })
}

fn sq_dist_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.sum_last_axis(sq)
}

/// Word-vector targets `(vertex, a_v)` for every class.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTargets {
    per_class: Vec<Vec<(usize, Vec<f64>)>>,
}

impl WordTargets {
    /// Attribute graph: class `y` regresses the word vectors of its member
    /// attributes at the matching vertices.
    pub fn attribute_graph(table: &WordEmbeddingTable, membership: &Membership) -> Result<Self> {
        let per_class = (0..membership.categories())
            .map(|y| {
                crate::embed::class_targets(table, membership.row(y)).map_err(|e| match e {
                    Error::DegenerateCategory(_) => Error::DegenerateCategory(y),
                    other => other,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { per_class })
    }

    /// Category graph: vertex `y` regresses the mean word vector of class
    /// `y`'s attributes.
    pub fn category_graph(table: &WordEmbeddingTable, membership: &Membership) -> Result<Self> {
        let d = table.dim();
        let mut per_class = Vec::with_capacity(membership.categories());
        for y in 0..membership.categories() {
            let members = membership.members(y);
            if members.is_empty() {
                return Err(Error::DegenerateCategory(y));
            }
            let mut mean = vec![0.0; d];
            for &j in &members {
                for (m, v) in mean.iter_mut().zip(table.vector(j)) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= members.len() as f64;
            }
            per_class.push(vec![(y, mean)]);
        }
        Ok(Self { per_class })
    }

    pub fn from_parts(per_class: Vec<Vec<(usize, Vec<f64>)>>) -> Self {
        Self { per_class }
    }

    pub fn class(&self, y: usize) -> &[(usize, Vec<f64>)] {
        &self.per_class[y]
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }
}

/// `(1/N) sum_i sum_{v in members(y_i)} |pred_i[v] - a_v(y_i)|^2`.
pub fn loss_wordvec(tape: &mut Tape, preds: &[Var], targets: &[&[(usize, Vec<f64>)]]) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::dim("loss_wordvec", &[preds.len()], &[targets.len()]));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (i, (&pred, tgt)) in preds.iter().zip(targets).enumerate() {
        if tgt.is_empty() {
            return Err(Error::DegenerateCategory(i));
        }
        let d = tape.shape(pred)[1];
        let rows: Vec<usize> = tgt.iter().map(|t| t.0).collect();
        let mut flat = Vec::with_capacity(rows.len() * d);
        for (_, v) in tgt.iter() {
            if v.len() != d {
                return Err(Error::dim("loss_wordvec target", &[v.len()], &[d]));
            }
            flat.extend_from_slice(v);
        }
        let picked = tape.gather_rows(pred, &rows)?;
        let target = tape.constant(Tensor::new(vec![rows.len(), d], flat)?);
        let r = tape.sub(picked, target)?;
        let sq = tape.mul(r, r)?;
        terms.push(tape.sum(sq));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / preds.len() as f64))
}

/// `-(1/N_u) sum_i ln sum_{y in unseen} p(y | x_i)` with `p` the softmax of
/// attribute scores over all classes.
pub fn loss_bias(tape: &mut Tape, phi: Var, all_attrs: &Tensor, unseen: &[usize]) -> Result<Var> {
    if unseen.is_empty() {
        return Err(Error::Contract("bias loss needs at least one unseen class".into()));
    }
    let at = tape.constant(all_attrs.transpose()?);
    let scores = tape.matmul(phi, at)?;
    let logp = tape.log_softmax_rows(scores)?;
    let picked = tape.gather_cols(logp, unseen)?;
    let lse = tape.logsumexp_rows(picked)?;
    let m = tape.mean(lse);
    Ok(tape.scale(m, -1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub attribute: Var,
    pub triplet: Option<Var>,
    pub wordvec: Option<Var>,
    pub bias: Option<Var>,
}

/// `L_A + L_LT + gamma L_W`, plus `bias_weight L_B` when transductive.
pub fn loss_total(tape: &mut Tape, parts: &LossParts, w: &LossWeights, transductive: bool) -> Result<Var> {
    let mut total = parts.attribute;
    if let Some(t) = parts.triplet {
        total = tape.add(total, t)?;
    }
    if let Some(wv) = parts.wordvec {
        let s = tape.scale(wv, w.gamma);
        total = tape.add(total, s)?;
    }
    if transductive {
        let b = parts
            .bias
            .ok_or_else(|| Error::Contract("transductive training needs an unlabeled batch".into()))?;
        let s = tape.scale(b, w.bias_weight);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }
}

/// Bias-corrected Adam update from the accumulated gradients, which are
/// then zeroed.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    let step = state.step + 1;
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient {
            step,
            param: p.name.clone(),
        });
    }
    state.step = step;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    store.zero_grad();
    Ok(())
}

/// Everything the loss stack needs beyond the images.
#[derive(Clone, Debug)]
pub struct TrainContext {
    /// Seen class ids in row order of `seen_attrs`.
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub seen_attrs: Tensor,
    pub all_attrs: Tensor,
    pub targets: WordTargets,
}

impl TrainContext {
    pub fn new(data: &Dataset, targets: WordTargets) -> Result<Self> {
        let cam = data.attributes();
        if targets.num_classes() != cam.num_categories() {
            return Err(Error::dim("word targets", &[targets.num_classes()], &[cam.num_categories()]));
        }
        let seen = data.split().seen.clone();
        Ok(Self {
            seen_attrs: cam.select_rows(&seen),
            all_attrs: cam.values().clone(),
            unseen: data.split().unseen.clone(),
            seen,
            targets,
        })
    }

    fn seen_position(&self, class: usize) -> Result<usize> {
        self.seen
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::Contract(format!("class {class} is not a seen class")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    #[serde(rename = "L_A")]
    pub l_a: f64,
    #[serde(rename = "L_LT")]
    pub l_lt: f64,
    #[serde(rename = "L_W")]
    pub l_w: f64,
    #[serde(rename = "L_B", skip_serializing_if = "Option::is_none")]
    pub l_b: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
    /// Batches whose triplet set came out empty.
    pub empty_triplet_batches: usize,
}

fn stack_rows(tape: &mut Tape, vecs: &[Var]) -> Result<Var> {
    let rows = vecs
        .iter()
        .map(|&v| {
            let n = tape.shape(v)[0];
            tape.reshape(v, &[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 0)
}

fn check_loss(tape: &Tape, v: Var, name: &str, step: u64) -> Result<f64> {
    let x = tape.value(v).item();
    if !x.is_finite() || x < 0.0 {
        return Err(Error::NumericFault {
            block: 0,
            detail: format!("{name} = {x} at step {step}"),
        });
    }
    Ok(x)
}

/// Values of one batch's loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLosses {
    pub l_a: f64,
    pub l_lt: f64,
    pub l_w: f64,
    pub l_b: Option<f64>,
    pub total: f64,
    pub empty_triplets: bool,
}

/// Records the full objective for one labelled batch (and optionally an
/// unlabelled one) on `tape`, returning the scalar to differentiate.
pub fn batch_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &GvseModel,
    ctx: &TrainContext,
    data: &Dataset,
    batch: &[usize],
    unlabeled: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, LossParts, bool)> {
    let mut phis = Vec::with_capacity(batch.len());
    let mut lats = Vec::new();
    let mut words = Vec::new();
    let mut labels = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for &i in batch {
        let class = data.labels()[i];
        let trace = model.forward(tape, &data.image(i))?;
        phis.push(trace.phi);
        if let Some(l) = trace.phi_lat {
            lats.push(l);
        }
        if let Some(w) = trace.word_vectors {
            words.push(w);
            targets.push(ctx.targets.class(class));
        }
        labels.push(ctx.seen_position(class)?);
    }
    let phi = stack_rows(tape, &phis)?;
    let attribute = loss_attribute_ce(tape, phi, &labels, &ctx.seen_attrs)?;

    let (triplet, empty) = if lats.is_empty() {
        (None, false)
    } else {
        let lat = stack_rows(tape, &lats)?;
        let triples = mine_triplets(&labels, rng);
        let t = loss_triplet(tape, lat, &triples, cfg.alpha)?;
        (Some(t.value), t.empty)
    };
    let wordvec = if words.is_empty() {
        None
    } else {
        Some(loss_wordvec(tape, &words, &targets)?)
    };
    let bias = if cfg.transductive && !unlabeled.is_empty() {
        let mut phis_u = Vec::with_capacity(unlabeled.len());
        for &i in unlabeled {
            phis_u.push(model.forward(tape, &data.image(i))?.phi);
        }
        let phi_u = stack_rows(tape, &phis_u)?;
        Some(loss_bias(tape, phi_u, &ctx.all_attrs, &ctx.unseen)?)
    } else {
        None
    };
    let parts = LossParts {
        attribute,
        triplet,
        wordvec,
        bias,
    };
    let total = loss_total(tape, &parts, &cfg.weights(), cfg.transductive)?;
    Ok((total, parts, empty))
}

/// One pass over `train` in seeded shuffled mini-batches. `unlabeled` feeds
/// the bias term when training is transductive.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut GvseModel,
    ctx: &TrainContext,
    data: &Dataset,
    train: &[usize],
    unlabeled: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<EpochReport> {
    if cfg.transductive && unlabeled.is_empty() {
        return Err(Error::Contract("transductive training needs unlabeled samples".into()));
    }
    let start = Instant::now();
    let mut order = train.to_vec();
    order.shuffle(rng);
    let mut sums = [0.0f64; 5];
    let mut grad_norm = 0.0;
    let mut batches = 0usize;
    let mut empty_batches = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let unl: Vec<usize> = if cfg.transductive {
            (0..batch.len()).map(|_| *unlabeled.choose(rng).expect("non-empty")).collect()
        } else {
            Vec::new()
        };
        let mut tape = Tape::new();
        let (total, parts, empty) = batch_objective(&mut tape, model, ctx, data, batch, &unl, cfg, rng)?;
        let step = adam.step + 1;
        let vals = [
            check_loss(&tape, parts.attribute, "L_A", step)?,
            parts.triplet.map_or(Ok(0.0), |v| check_loss(&tape, v, "L_LT", step))?,
            parts.wordvec.map_or(Ok(0.0), |v| check_loss(&tape, v, "L_W", step))?,
            parts.bias.map_or(Ok(0.0), |v| check_loss(&tape, v, "L_B", step))?,
            check_loss(&tape, total, "total", step)?,
        ];
        if empty {
            empty_batches += 1;
            warn!("epoch {epoch}: batch {batches} has no valid triplet");
        }
        tape.backward(total, model.params_mut())?;
        grad_norm += model.params().grad_norm();
        adam_step(model.params_mut(), adam)?;
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
        batches += 1;
        debug!("epoch {epoch} batch {batches}: total {:.6}", vals[4]);
    }
    let nb = batches.max(1) as f64;
    Ok(EpochReport {
        epoch,
        l_a: sums[0] / nb,
        l_lt: sums[1] / nb,
        l_w: sums[2] / nb,
        l_b: cfg.transductive.then(|| sums[3] / nb),
        total: sums[4] / nb,
        grad_norm: grad_norm / nb,
        wall_ms: if cfg.log_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        },
        empty_triplet_batches: empty_batches,
    })
}
