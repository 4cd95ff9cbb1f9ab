//! Attribute word vectors learned from the category corpus.
//!
//! Each category is a document whose words are its attributes. The table is
//! the rank-`d` symmetric factorisation of the positive PMI matrix: rows are
//! the top eigenvectors scaled by the square root of their eigenvalue.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{compute_pmi, Membership};
use crate::tensor::Tensor;

pub const DEFAULT_DIM: usize = 10;

const MAX_POWER_ITERS: usize = 200_000;

/// One attribute-index set per category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeCorpus {
    m: usize,
    documents: Vec<Vec<usize>>,
}

impl AttributeCorpus {
    pub fn new(m: usize, documents: Vec<Vec<usize>>) -> Result<Self> {
        for (y, doc) in documents.iter().enumerate() {
            if doc.is_empty() {
                return Err(Error::DegenerateCategory(y));
            }
            if let Some(&bad) = doc.iter().find(|&&j| j >= m) {
                return Err(Error::Validation(format!("document {y} names attribute {bad} >= {m}")));
            }
        }
        Ok(Self { m, documents })
    }

    pub fn from_membership(membership: &Membership) -> Result<Self> {
        let docs = (0..membership.categories()).map(|y| membership.members(y)).collect();
        Self::new(membership.attributes(), docs)
    }

    pub fn num_attributes(&self) -> usize {
        self.m
    }

    pub fn documents(&self) -> &[Vec<usize>] {
        &self.documents
    }

    fn to_membership(&self) -> Membership {
        let mut bits = vec![false; self.documents.len() * self.m];
        for (y, doc) in self.documents.iter().enumerate() {
            for &j in doc {
                bits[y * self.m + j] = true;
            }
        }
        Membership::new(self.documents.len(), self.m, bits).expect("sized above")
    }
}

/// Positive PMI over document co-occurrence. Pairs that never co-occur get 0;
/// the diagonal is `max(0, ln(1 / p(v)))`.
pub fn build_ppmi(corpus: &AttributeCorpus) -> Result<Tensor> {
    let raw = compute_pmi(&corpus.to_membership())?;
    let m = corpus.m;
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            data[i * m + j] = raw.get(i, j).map_or(0.0, |v| v.max(0.0));
        }
    }
    Ok(Tensor::from_parts(vec![m, m], data))
}

/// `m x d` table of attribute vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddingTable {
    names: Vec<String>,
    vectors: Tensor,
}

impl WordEmbeddingTable {
    pub fn new(names: Vec<String>, vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 || vectors.rows() != names.len() {
            return Err(Error::dim("embedding table", vectors.shape(), &[names.len()]));
        }
        Ok(Self { names, vectors })
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        self.vectors.row(j)
    }

    pub fn set_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.names.len() {
            return Err(Error::Validation(format!(
                "{} names for {} embedding rows",
                names.len(),
                self.names.len()
            )));
        }
        self.names = names;
        Ok(())
    }

    /// `|| ppmi - E E^T ||_F`.
    pub fn reconstruction_error(&self, ppmi: &Tensor) -> f64 {
        let e = &self.vectors;
        let (m, d) = (e.rows(), e.cols());
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                let dot: f64 = (0..d).map(|k| e.data()[i * d + k] * e.data()[j * d + k]).sum();
                let r = ppmi.data()[i * m + j] - dot;
                acc += r * r;
            }
        }
        acc.sqrt()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for (j, name) in self.names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.vector(j).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Lines starting with `#` are skipped.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut names = Vec::new();
        let mut data = Vec::new();
        let mut width = None;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let d = rec.len().saturating_sub(1);
            if d == 0 || width.is_some_and(|w| w != d) {
                return Err(Error::Parse {
                    row,
                    detail: format!("expected {} vector columns, found {d}", width.unwrap_or(1)),
                });
            }
            width = Some(d);
            names.push(rec[0].to_owned());
            for cell in rec.iter().skip(1) {
                data.push(cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    detail: format!("not a number: {cell:?}"),
                })?);
            }
        }
        let d = width.ok_or(Error::Parse { row: 0, detail: "empty embedding file".into() })?;
        let vectors = Tensor::new(vec![names.len(), d], data)?;
        Self::new(names, vectors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(a: &[f64], m: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&a[i * m..(i + 1) * m], v);
    }
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // two passes of classical Gram-Schmidt
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Algebraically largest `k` eigenpairs of a symmetric matrix, by power
/// iteration on a non-negative shift of the matrix with Hotelling deflation.
/// Eigenvectors are sign-fixed so their largest-magnitude entry is positive.
pub fn top_eigenpairs(a: &Tensor, k: usize, seed: u64) -> Result<Vec<(f64, Vec<f64>)>> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::dim("top_eigenpairs", a.shape(), &[2]));
    }
    let m = a.rows();
    if k > m {
        return Err(Error::Config(format!("requested {k} eigenpairs of a {m}x{m} matrix")));
    }
    // Gershgorin bound: a + shift*I is positive semidefinite.
    let shift = (0..m)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut b = a.data().to_vec();
    for i in 0..m {
        b[i * m + i] += shift;
    }
    let tol = 1e-13 * shift.max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut pairs = Vec::with_capacity(k);
    let mut w = vec![0.0; m];
    for _ in 0..k {
        let mut v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut v, &found);
        if normalize(&mut v) < 1e-12 {
            // start vector fell in the found span; fall back to a basis vector
            v = (0..m)
                .map(|j| {
                    let mut e = vec![0.0; m];
                    e[j] = 1.0;
                    orthogonalize(&mut e, &found);
                    e
                })
                .max_by(|x, y| dot(x, x).total_cmp(&dot(y, y)))
                .expect("m > 0");
            normalize(&mut v);
        }
        for _ in 0..MAX_POWER_ITERS {
            mat_vec(&b, m, &v, &mut w);
            orthogonalize(&mut w, &found);
            let mu = dot(&v, &w);
            let residual = w
                .iter()
                .zip(&v)
                .map(|(x, y)| (x - mu * y).powi(2))
                .sum::<f64>()
                .sqrt();
            if normalize(&mut w) == 0.0 {
                break;
            }
            std::mem::swap(&mut v, &mut w);
            if residual <= tol {
                break;
            }
        }
        mat_vec(&b, m, &v, &mut w);
        let mu = dot(&v, &w);
        // Hotelling deflation: remove the found direction from b
        for i in 0..m {
            for j in 0..m {
                b[i * m + j] -= mu * v[i] * v[j];
            }
        }
        let pivot = (0..m)
            .max_by(|&x, &y| v[x].abs().total_cmp(&v[y].abs()).then(y.cmp(&x)))
            .expect("m > 0");
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        pairs.push((mu - shift, v.clone()));
        found.push(v);
    }
    Ok(pairs)
}

/// Rank-`d` factorisation `E` with `E E^T` the best PSD approximation of
/// `ppmi` from its top `d` eigenpairs. Columns for non-positive eigenvalues
/// are zero.
pub fn factorize(ppmi: &Tensor, d: usize, seed: u64) -> Result<WordEmbeddingTable> {
    let m = ppmi.rows();
    if d == 0 || d > m {
        return Err(Error::Config(format!("embedding width {d} must lie in 1..={m}")));
    }
    let pairs = top_eigenpairs(ppmi, d, seed)?;
    let scale = pairs.iter().map(|(l, _)| l.abs()).fold(0.0, f64::max);
    let eps = 1e-12 * scale.max(1.0);
    let mut data = vec![0.0; m * d];
    for (k, (lambda, v)) in pairs.iter().enumerate() {
        if *lambda <= eps {
            continue;
        }
        let s = lambda.sqrt();
        for i in 0..m {
            data[i * d + k] = v[i] * s;
        }
    }
    let names = (0..m).map(|j| format!("a{j}")).collect();
    WordEmbeddingTable::new(names, Tensor::from_parts(vec![m, d], data))
}

/// The word vectors `(vertex, a_v)` of a class's member attributes.
pub fn class_targets(table: &WordEmbeddingTable, membership: &[bool]) -> Result<Vec<(usize, Vec<f64>)>> {
    if membership.len() != table.len() {
        return Err(Error::dim("class_targets", &[table.len()], &[membership.len()]));
    }
    let out: Vec<_> = membership
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(j, _)| (j, table.vector(j).to_vec()))
        .collect();
    if out.is_empty() {
        return Err(Error::DegenerateCategory(0));
    }
    Ok(out)
}
