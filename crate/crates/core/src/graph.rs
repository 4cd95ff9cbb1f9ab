//! Attribute co-occurrence knowledge graph and the row-normalised
//! propagation operator shared by every GCN layer.
//!
//! Categories are treated as sets of attributes. Pointwise mutual
//! information between two attributes is computed from how many categories
//! contain each of them and both of them; pairs that never co-occur are
//! marked absent instead of carrying `-inf`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows are categories, columns are attributes; entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryAttributeMatrix {
    values: Tensor,
    category_names: Vec<String>,
    attribute_names: Vec<String>,
}

impl CategoryAttributeMatrix {
    pub fn new(values: Tensor, category_names: Vec<String>, attribute_names: Vec<String>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim("category-attribute matrix", values.shape(), &[2]));
        }
        let (n_cat, m) = (values.rows(), values.cols());
        if n_cat < 2 || m < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 categories and 2 attributes, got {n_cat}x{m}"
            )));
        }
        if category_names.len() != n_cat || attribute_names.len() != m {
            return Err(Error::Validation(format!(
                "{} category names and {} attribute names for a {n_cat}x{m} matrix",
                category_names.len(),
                attribute_names.len()
            )));
        }
        if let Some(k) = values.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "attribute value {} at category {}, attribute {} outside [0,1]",
                values.data()[k],
                k / m,
                k % m
            )));
        }
        Ok(Self {
            values,
            category_names,
            attribute_names,
        })
    }

    /// Unnamed matrix; names are `c{i}` and `a{j}`.
    pub fn from_values(values: Tensor) -> Result<Self> {
        let cats = (0..values.rows()).map(|i| format!("c{i}")).collect();
        let atts = (0..values.cols()).map(|j| format!("a{j}")).collect();
        Self::new(values, cats, atts)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn num_categories(&self) -> usize {
        self.values.rows()
    }

    pub fn num_attributes(&self) -> usize {
        self.values.cols()
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn row(&self, y: usize) -> &[f64] {
        self.values.row(y)
    }

    /// Rows for the given categories, in order.
    pub fn select_rows(&self, classes: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = classes.iter().map(|&y| self.row(y).to_vec()).collect();
        Tensor::from_parts(
            vec![classes.len(), self.num_attributes()],
            rows.concat(),
        )
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(r) => r?,
            None => return Err(Error::Parse { row: 0, detail: "empty attribute file".into() }),
        };
        if header.len() < 3 {
            return Err(Error::Parse {
                row: 0,
                detail: format!("header has {} columns, need a name column and >= 2 attributes", header.len()),
            });
        }
        let attribute_names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let m = attribute_names.len();
        let mut category_names = Vec::new();
        let mut data = Vec::new();
        for (i, rec) in records.enumerate() {
            let row = i + 1;
            let rec = rec?;
            if rec.len() != m + 1 {
                return Err(Error::Parse {
                    row,
                    detail: format!("expected {} columns, found {}", m + 1, rec.len()),
                });
            }
            category_names.push(rec[0].to_owned());
            for (j, cell) in rec.iter().skip(1).enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    row,
                    detail: format!("column {} is not a number: {cell:?}", j + 1),
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Parse {
                        row,
                        detail: format!("column {} value {v} outside [0,1]", j + 1),
                    });
                }
                data.push(v);
            }
        }
        let n = category_names.len();
        if n == 0 {
            return Err(Error::Parse { row: 1, detail: "no category rows".into() });
        }
        Self::new(Tensor::new(vec![n, m], data)?, category_names, attribute_names)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["category".to_string()];
        header.extend(self.attribute_names.iter().cloned());
        w.write_record(&header)?;
        for (y, name) in self.category_names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.row(y).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizeMode {
    /// Any positive entry is a member.
    #[default]
    Nonzero,
    /// Entries strictly above their column mean are members.
    MeanThreshold,
}

/// Binary category x attribute membership.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Membership {
    categories: usize,
    attributes: usize,
    bits: Vec<bool>,
}

impl Membership {
    pub fn new(categories: usize, attributes: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != categories * attributes {
            return Err(Error::dim("membership", &[categories, attributes], &[bits.len()]));
        }
        Ok(Self {
            categories,
            attributes,
            bits,
        })
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let a = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != a) {
            return Err(Error::Validation("ragged membership rows".into()));
        }
        Self::new(rows.len(), a, rows.concat())
    }

    /// Category `y` is the only member of vertex `y`.
    pub fn identity(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
        }
        Self {
            categories: n,
            attributes: n,
            bits,
        }
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    pub fn get(&self, y: usize, j: usize) -> bool {
        self.bits[y * self.attributes + j]
    }

    pub fn row(&self, y: usize) -> &[bool] {
        &self.bits[y * self.attributes..(y + 1) * self.attributes]
    }

    pub fn members(&self, y: usize) -> Vec<usize> {
        (0..self.attributes).filter(|&j| self.get(y, j)).collect()
    }

    /// Per-vertex mask for category `y` as 0/1 floats.
    pub fn mask(&self, y: usize) -> Vec<f64> {
        self.row(y).iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.categories, self.attributes],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

pub fn binarize_attributes(cam: &CategoryAttributeMatrix, mode: BinarizeMode) -> Result<Membership> {
    let (n, m) = (cam.num_categories(), cam.num_attributes());
    let thresholds: Vec<f64> = match mode {
        BinarizeMode::Nonzero => vec![0.0; m],
        BinarizeMode::MeanThreshold => (0..m)
            .map(|j| (0..n).map(|y| cam.row(y)[j]).sum::<f64>() / n as f64)
            .collect(),
    };
    let mut bits = Vec::with_capacity(n * m);
    for y in 0..n {
        let row = cam.row(y);
        let before = bits.len();
        bits.extend(row.iter().zip(&thresholds).map(|(v, t)| v > t));
        if !bits[before..].iter().any(|&b| b) {
            return Err(Error::DegenerateCategory(y));
        }
    }
    Membership::new(n, m, bits)
}

/// Symmetric `m x m` matrix of optional values; `None` marks an absent pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PmiMatrix {
    m: usize,
    values: Vec<Option<f64>>,
}

impl PmiMatrix {
    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.m + j]
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.m)
            .flat_map(move |i| (0..self.m).filter(move |&j| j != i).map(move |j| (i, j)))
            .filter_map(|(i, j)| self.get(i, j))
    }
}

/// Raw PMI over category co-occurrence, diagonal included
/// (`PMI(i, i) = ln(1 / p(i))`).
pub fn compute_pmi(membership: &Membership) -> Result<PmiMatrix> {
    let (n, m) = (membership.categories(), membership.attributes());
    let total = n as f64;
    let mut counts = vec![0usize; m];
    let mut joint = vec![0usize; m * m];
    for y in 0..n {
        let members = membership.members(y);
        for &i in &members {
            counts[i] += 1;
            for &j in &members {
                joint[i * m + j] += 1;
            }
        }
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateAttribute(j));
    }
    let mut values = vec![None; m * m];
    for i in 0..m {
        for j in i..m {
            let both = joint[i * m + j];
            if both == 0 {
                continue;
            }
            let p_ij = both as f64 / total;
            let p_i = counts[i] as f64 / total;
            let p_j = counts[j] as f64 / total;
            let v = (p_ij / (p_i * p_j)).ln();
            values[i * m + j] = Some(v);
            values[j * m + i] = Some(v);
        }
    }
    Ok(PmiMatrix { m, values })
}

/// Min-max normalisation of the present off-diagonal values onto `[0, 1]`.
/// A degenerate range maps every present pair to 1.
pub fn normalize_pmi(raw: &PmiMatrix) -> Result<PmiMatrix> {
    let (lo, hi) = raw
        .off_diagonal()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return Err(Error::EmptyGraph);
    }
    let m = raw.m;
    let mut values = vec![None; m * m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            values[i * m + j] = raw.get(i, j).map(|v| if hi == lo { 1.0 } else { (v - lo) / (hi - lo) });
        }
    }
    Ok(PmiMatrix { m, values })
}

/// Vertices with symmetric binary edges and the weights they were cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    m: usize,
    threshold: f64,
    edges: Vec<bool>,
    weights: PmiMatrix,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    m: usize,
    delta: f64,
    edges: Vec<[usize; 2]>,
    pmi: Vec<(usize, usize, f64)>,
}

impl KnowledgeGraph {
    fn from_weights(weights: PmiMatrix, threshold: f64) -> Self {
        let m = weights.m;
        let mut edges = vec![false; m * m];
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    edges[i * m + j] = weights.get(i, j).is_some_and(|w| w > threshold);
                }
            }
        }
        Self {
            m,
            threshold,
            edges,
            weights,
        }
    }

    /// Graph with no edges, used when a caller wants self-loops only.
    pub fn edgeless(m: usize) -> Self {
        Self {
            m,
            threshold: 1.0,
            edges: vec![false; m * m],
            weights: PmiMatrix {
                m,
                values: vec![None; m * m],
            },
        }
    }

    pub fn from_edges(m: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::edgeless(m);
        for &(i, j) in pairs {
            if i >= m || j >= m || i == j {
                return Err(Error::Validation(format!("invalid edge ({i}, {j}) for {m} vertices")));
            }
            g.edges[i * m + j] = true;
            g.edges[j * m + i] = true;
        }
        Ok(g)
    }

    pub fn num_vertices(&self) -> usize {
        self.m
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.m + j]
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.weights.get(i, j)
    }

    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        (0..self.m)
            .flat_map(|i| (i + 1..self.m).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_list().len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.m)
            .map(|i| (0..self.m).filter(|&j| self.has_edge(i, j)).count())
            .collect()
    }

    /// Vertices reordered so that new vertex `k` is old vertex `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let m = self.m;
        let mut edges = vec![false; m * m];
        let mut values = vec![None; m * m];
        for a in 0..m {
            for b in 0..m {
                edges[a * m + b] = self.has_edge(perm[a], perm[b]);
                values[a * m + b] = self.weight(perm[a], perm[b]);
            }
        }
        Self {
            m,
            threshold: self.threshold,
            edges,
            weights: PmiMatrix { m, values },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GraphFile {
            m: self.m,
            delta: self.threshold,
            edges: self.edge_list().into_iter().map(|(i, j)| [i, j]).collect(),
            pmi: (0..self.m)
                .flat_map(|i| (i + 1..self.m).map(move |j| (i, j)))
                .filter_map(|(i, j)| self.weight(i, j).map(|v| (i, j, v)))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(s)?;
        let m = file.m;
        let mut values = vec![None; m * m];
        for &(i, j, v) in &file.pmi {
            if i >= m || j >= m {
                return Err(Error::Validation(format!("pmi entry ({i}, {j}) out of range")));
            }
            values[i * m + j] = Some(v);
            values[j * m + i] = Some(v);
        }
        let pairs: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        let mut g = Self::from_edges(m, &pairs)?;
        g.threshold = file.delta;
        g.weights = PmiMatrix { m, values };
        Ok(g)
    }
}

fn check_threshold(name: &str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {t}")));
    }
    Ok(())
}

/// Edge between attributes `i` and `j` iff their normalised PMI exceeds
/// `delta`. `delta = 1` is accepted and always yields an edgeless graph.
pub fn build_attribute_graph(cam: &CategoryAttributeMatrix, delta: f64, mode: BinarizeMode) -> Result<KnowledgeGraph> {
    check_threshold("delta", delta)?;
    let membership = binarize_attributes(cam, mode)?;
    let raw = compute_pmi(&membership)?;
    let normalized = normalize_pmi(&raw)?;
    Ok(KnowledgeGraph::from_weights(normalized, delta))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Category-level graph: edge iff the cosine similarity of two categories'
/// attribute rows exceeds `threshold`.
pub fn build_category_graph(cam: &CategoryAttributeMatrix, threshold: f64) -> Result<KnowledgeGraph> {
    check_threshold("category threshold", threshold)?;
    let n = cam.num_categories();
    if let Some(y) = (0..n).find(|&y| cam.row(y).iter().all(|&v| v == 0.0)) {
        return Err(Error::DegenerateCategory(y));
    }
    let mut values = vec![None; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine_similarity(cam.row(i), cam.row(j));
            values[i * n + j] = Some(s);
            values[j * n + i] = Some(s);
        }
    }
    Ok(KnowledgeGraph::from_weights(PmiMatrix { m: n, values }, threshold))
}

/// `D^-1 G` for the (optionally self-looped) adjacency `G`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationOperator {
    matrix: Tensor,
}

impl PropagationOperator {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    /// Wraps an arbitrary square matrix; used by tests and permutation checks.
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() != matrix.cols() {
            return Err(Error::dim("propagation operator", matrix.shape(), &[2]));
        }
        Ok(Self { matrix })
    }
}

/// With `self_loops` the operator is `D^-1 (G + I)`. Without them an
/// isolated vertex keeps a zero row.
pub fn propagation_operator(g: &KnowledgeGraph, self_loops: bool) -> PropagationOperator {
    let m = g.num_vertices();
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        let row = &mut data[i * m..(i + 1) * m];
        for (j, v) in row.iter_mut().enumerate() {
            if g.has_edge(i, j) || (self_loops && i == j) {
                *v = 1.0;
            }
        }
        let deg: f64 = row.iter().sum();
        if deg > 0.0 {
            row.iter_mut().for_each(|v| *v /= deg);
        }
    }
    PropagationOperator {
        matrix: Tensor::from_parts(vec![m, m], data),
    }
}
