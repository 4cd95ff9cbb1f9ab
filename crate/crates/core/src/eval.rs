//! Class prototypes, zero-shot prediction and per-class metrics.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::GvseModel;
use crate::tensor::{Tape, Tensor};

/// Mean latent feature of every class in `classes`, in that order.
pub fn seen_prototypes(lat: &Tensor, labels: &[usize], classes: &[usize]) -> Result<Tensor> {
    if lat.rank() != 2 || lat.rows() != labels.len() {
        return Err(Error::dim("seen_prototypes", lat.shape(), &[labels.len()]));
    }
    let h = lat.cols();
    let mut out = Vec::with_capacity(classes.len() * h);
    for &c in classes {
        let mut acc = vec![0.0; h];
        let mut n = 0usize;
        for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == c) {
            for (a, v) in acc.iter_mut().zip(lat.row(i)) {
                *a += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::DegenerateClass(c));
        }
        out.extend(acc.into_iter().map(|a| a / n as f64));
    }
    Tensor::new(vec![classes.len(), h], out)
}

/// Solves `(A A^T + I) beta = A phi_u` for the `S x m` matrix `A` with an
/// `LDL^T` factorisation.
pub fn ridge_coefficients(phi_seen: &Tensor, phi_u: &[f64]) -> Result<Vec<f64>> {
    if phi_seen.rank() != 2 || phi_seen.cols() != phi_u.len() {
        return Err(Error::dim("ridge_coefficients", phi_seen.shape(), &[phi_u.len()]));
    }
    let s = phi_seen.rows();
    let mut a = vec![0.0; s * s];
    let mut b = vec![0.0; s];
    for i in 0..s {
        let ri = phi_seen.row(i);
        b[i] = ri.iter().zip(phi_u).map(|(x, y)| x * y).sum();
        for j in 0..=i {
            let dot: f64 = ri.iter().zip(phi_seen.row(j)).map(|(x, y)| x * y).sum();
            a[i * s + j] = dot;
            a[j * s + i] = dot;
        }
        a[i * s + i] += 1.0;
    }

    let mut l = vec![0.0; s * s];
    let mut d = vec![0.0; s];
    for j in 0..s {
        let mut dj = a[j * s + j];
        for k in 0..j {
            dj -= l[j * s + k] * l[j * s + k] * d[k];
        }
        d[j] = dj;
        l[j * s + j] = 1.0;
        for i in j + 1..s {
            let mut v = a[i * s + j];
            for k in 0..j {
                v -= l[i * s + k] * l[j * s + k] * d[k];
            }
            l[i * s + j] = v / dj;
        }
    }
    // L z = b, D w = z, L^T beta = w
    let mut z = b;
    for i in 0..s {
        for k in 0..i {
            z[i] -= l[i * s + k] * z[k];
        }
    }
    for i in 0..s {
        z[i] /= d[i];
    }
    for i in (0..s).rev() {
        for k in i + 1..s {
            z[i] -= l[k * s + i] * z[k];
        }
    }
    Ok(z)
}

/// `sum_y beta_y proto_y` with the ridge coefficients of `phi_u`.
pub fn unseen_prototypes_ridge(phi_seen: &Tensor, phi_u: &[f64], seen_protos: &Tensor) -> Result<Vec<f64>> {
    if seen_protos.rank() != 2 || seen_protos.rows() != phi_seen.rows() {
        return Err(Error::dim("unseen_prototypes_ridge", seen_protos.shape(), phi_seen.shape()));
    }
    let beta = ridge_coefficients(phi_seen, phi_u)?;
    let mut out = vec![0.0; seen_protos.cols()];
    for (k, &bk) in beta.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(seen_protos.row(k)) {
            *o += bk * v;
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// First index of the maximum; an empty slice gives 0.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Row of `space_attrs` with the highest `phi_x . phi(y)`.
pub fn predict_czsl(phi_x: &[f64], space_attrs: &Tensor) -> usize {
    let scores: Vec<f64> = (0..space_attrs.rows()).map(|r| dot(phi_x, space_attrs.row(r))).collect();
    argmax(&scores)
}

/// Attribute rows and latent prototypes over one search space.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub classes: Vec<usize>,
    pub attributes: Tensor,
    pub latent: Tensor,
}

/// Row of the space maximising `phi_x . phi(y) + lat_x . proto(y)`.
pub fn predict_with_latent(phi_x: &[f64], lat_x: &[f64], protos: &PrototypeSet) -> Result<usize> {
    let (a, l) = (&protos.attributes, &protos.latent);
    if a.rows() != l.rows() || a.rows() != protos.classes.len() {
        return Err(Error::Contract(format!(
            "{} classes, {} attribute rows and {} prototypes",
            protos.classes.len(),
            a.rows(),
            l.rows()
        )));
    }
    if l.cols() != lat_x.len() {
        return Err(Error::dim("predict_with_latent", l.shape(), &[lat_x.len()]));
    }
    let scores: Vec<f64> = (0..a.rows())
        .map(|r| dot(phi_x, a.row(r)) + dot(lat_x, l.row(r)))
        .collect();
    Ok(argmax(&scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Top1 {
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
    /// Listed classes without test samples, left out of `mean`.
    pub excluded: Vec<usize>,
}

pub fn per_class_top1(preds: &[usize], labels: &[usize], classes: &[usize]) -> Result<Top1> {
    if preds.len() != labels.len() {
        return Err(Error::dim("per_class_top1", &[preds.len()], &[labels.len()]));
    }
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for &c in classes {
        let (mut hit, mut n) = (0usize, 0usize);
        for (&p, _) in preds.iter().zip(labels).filter(|(_, &l)| l == c) {
            n += 1;
            hit += usize::from(p == c);
        }
        if n == 0 {
            warn!("class {c} has no test samples; excluded from the per-class mean");
            excluded.push(c);
        } else {
            per_class.insert(c, hit as f64 / n as f64);
        }
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(Top1 {
        per_class,
        mean,
        excluded,
    })
}

pub fn harmonic_mean(acc_s: f64, acc_u: f64) -> f64 {
    if acc_s + acc_u == 0.0 {
        0.0
    } else {
        2.0 * acc_s * acc_u / (acc_s + acc_u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: BTreeMap<usize, f64>,
    pub acc: Option<f64>,
    pub acc_s: Option<f64>,
    pub acc_u: Option<f64>,
    pub h: Option<f64>,
    pub excluded: Vec<usize>,
}

/// Seen accuracy, unseen accuracy and their harmonic mean over predictions
/// made in the full label space.
pub fn gzsl_metrics(preds: &[usize], labels: &[usize], seen: &[usize], unseen: &[usize]) -> Result<Metrics> {
    let has = |set: &[usize]| labels.iter().any(|l| set.contains(l));
    if !has(seen) || !has(unseen) {
        return Err(Error::Contract("generalized evaluation needs both seen and unseen test samples".into()));
    }
    let s = per_class_top1(preds, labels, seen)?;
    let u = per_class_top1(preds, labels, unseen)?;
    let mut per_class = s.per_class;
    per_class.extend(u.per_class);
    let mut excluded = s.excluded;
    excluded.extend(u.excluded);
    Ok(Metrics {
        per_class,
        acc: None,
        acc_s: Some(s.mean),
        acc_u: Some(u.mean),
        h: Some(harmonic_mean(s.mean, u.mean)),
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Czsl,
    Gzsl,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Czsl => "czsl",
            Setting::Gzsl => "gzsl",
        }
    }
}

/// Attribute and latent outputs for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub phi: Tensor,
    pub lat: Option<Tensor>,
}

pub fn embed_samples(model: &GvseModel, data: &Dataset, idx: &[usize]) -> Result<Embeddings> {
    let m = model.dims().attributes;
    let h = model.latent_width();
    let mut phi = Vec::with_capacity(idx.len() * m);
    let mut lat = Vec::new();
    for &i in idx {
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &data.image(i))?;
        phi.extend_from_slice(tape.value(trace.phi).data());
        if let Some(l) = trace.phi_lat {
            lat.extend_from_slice(tape.value(l).data());
        }
    }
    Ok(Embeddings {
        phi: Tensor::new(vec![idx.len(), m], phi)?,
        lat: h.map(|h| Tensor::new(vec![idx.len(), h], lat)).transpose()?,
    })
}

/// Prototypes over `space`: latent means for seen classes from the
/// training samples, ridge combinations for unseen ones.
pub fn build_prototypes(data: &Dataset, train_lat: &Tensor, train_labels: &[usize], space: &[usize]) -> Result<PrototypeSet> {
    let cam = data.attributes();
    let seen = &data.split().seen;
    let seen_lat = seen_prototypes(train_lat, train_labels, seen)?;
    let seen_attrs = cam.select_rows(seen);
    let h = seen_lat.cols();
    let mut latent = Vec::with_capacity(space.len() * h);
    for &c in space {
        match seen.iter().position(|&s| s == c) {
            Some(k) => latent.extend_from_slice(seen_lat.row(k)),
            None => latent.extend(unseen_prototypes_ridge(&seen_attrs, cam.row(c), &seen_lat)?),
        }
    }
    Ok(PrototypeSet {
        classes: space.to_vec(),
        attributes: cam.select_rows(space),
        latent: Tensor::new(vec![space.len(), h], latent)?,
    })
}

/// Runs the trained model over the held-out samples of `partition`.
pub fn evaluate(model: &GvseModel, data: &Dataset, partition: &Partition, setting: Setting) -> Result<Metrics> {
    let split = data.split();
    let (space, test): (Vec<usize>, Vec<usize>) = match setting {
        Setting::Czsl => (split.unseen.clone(), partition.test_unseen.clone()),
        Setting::Gzsl => (
            (0..data.num_classes()).collect(),
            partition.test_seen.iter().chain(&partition.test_unseen).copied().collect(),
        ),
    };
    let emb = embed_samples(model, data, &test)?;
    let protos = match model.latent_width() {
        Some(_) => {
            let train = embed_samples(model, data, &partition.train)?;
            let labels: Vec<usize> = partition.train.iter().map(|&i| data.labels()[i]).collect();
            Some(build_prototypes(data, train.lat.as_ref().expect("latent"), &labels, &space)?)
        }
        None => None,
    };
    let attrs = data.attributes().select_rows(&space);
    let mut preds = Vec::with_capacity(test.len());
    for r in 0..test.len() {
        let k = match (&protos, &emb.lat) {
            (Some(p), Some(lat)) => predict_with_latent(emb.phi.row(r), lat.row(r), p)?,
            _ => predict_czsl(emb.phi.row(r), &attrs),
        };
        preds.push(space[k]);
    }
    let labels: Vec<usize> = test.iter().map(|&i| data.labels()[i]).collect();
    match setting {
        Setting::Czsl => {
            let t = per_class_top1(&preds, &labels, &split.unseen)?;
            Ok(Metrics {
                per_class: t.per_class,
                acc: Some(t.mean),
                acc_s: None,
                acc_u: None,
                h: None,
                excluded: t.excluded,
            })
        }
        Setting::Gzsl => gzsl_metrics(&preds, &labels, &split.seen, &split.unseen),
    }
}

/// The on-disk metrics document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: Setting,
    pub split: String,
    pub acc: Option<f64>,
    pub acc_s: Option<f64>,
    pub acc_u: Option<f64>,
    pub h: Option<f64>,
    pub per_class: BTreeMap<String, f64>,
    pub excluded: Vec<usize>,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn new(setting: Setting, split: &str, m: &Metrics, names: &[String], digest: &str) -> Self {
        Self {
            setting,
            split: split.to_owned(),
            acc: m.acc,
            acc_s: m.acc_s,
            acc_u: m.acc_u,
            h: m.h,
            per_class: m
                .per_class
                .iter()
                .map(|(&c, &v)| (names.get(c).cloned().unwrap_or_else(|| c.to_string()), v))
                .collect(),
            excluded: m.excluded.clone(),
            config_digest: digest.to_owned(),
        }
    }
}
