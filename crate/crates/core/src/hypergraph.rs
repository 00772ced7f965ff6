//! Per-user multi-view hypergraphs and their matrix forms.
//!
//! A hypergraph lives over one user's history: vertices are the items the user
//! interacted with, and each view (interest angle) contributes one hyperedge
//! per category label. The algorithmic builders (transition, contextual,
//! intent) produce the same structure from the sequence alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::ItemCatalog;
use crate::error::{Error, Result};
use crate::llm::{CategoryAssignment, InterestAngleSet, TextEmbedder, UNKNOWN_LABEL};

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperedge {
    pub id: usize,
    pub view: String,
    pub label: String,
    /// Positions into [`MultiViewHypergraph::vertices`], ascending.
    pub members: Vec<usize>,
    pub text_embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewHypergraph {
    pub user_id: String,
    /// Catalog indices of the user's items, oldest first.
    pub vertices: Vec<usize>,
    pub views: Vec<String>,
    pub edges: Vec<Hyperedge>,
}

impl MultiViewHypergraph {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// `true` for vertices that belong to no hyperedge.
    pub fn isolated(&self) -> Vec<bool> {
        let mut iso = vec![true; self.vertices.len()];
        for e in &self.edges {
            for &m in &e.members {
                iso[m] = false;
            }
        }
        iso
    }

    /// Sub-hypergraph induced by `items` (catalog indices, in history order).
    /// Edges that lose every member are dropped and ids are renumbered.
    pub fn restrict(&self, items: &[usize]) -> MultiViewHypergraph {
        let remap: BTreeMap<usize, usize> = items
            .iter()
            .enumerate()
            .map(|(pos, &item)| (item, pos))
            .collect();
        let mut edges = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            let mut members: Vec<usize> = e
                .members
                .iter()
                .filter_map(|&m| remap.get(&self.vertices[m]).copied())
                .collect();
            if members.is_empty() {
                continue;
            }
            members.sort_unstable();
            edges.push(Hyperedge {
                id: edges.len(),
                view: e.view.clone(),
                label: e.label.clone(),
                members,
                text_embedding: e.text_embedding.clone(),
            });
        }
        MultiViewHypergraph {
            user_id: self.user_id.clone(),
            vertices: items.to_vec(),
            views: self.views.clone(),
            edges,
        }
    }

    /// `view<TAB>label<TAB>item,item,...`, one line per edge.
    pub fn dump(&self, catalog: &ItemCatalog) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let items: Vec<&str> = e
                .members
                .iter()
                .map(|&m| catalog.get(self.vertices[m]).id.as_str())
                .collect();
            let _ = writeln!(out, "{}\t{}\t{}", e.view, e.label, items.join(","));
        }
        out
    }
}

/// Builds one hyperedge per `(angle, category)` over `vertices`. Edges follow
/// the angle order, then label order; `unknown` never forms an edge.
pub fn assemble(
    user_id: &str,
    vertices: &[usize],
    angles: &InterestAngleSet,
    assignments: &[CategoryAssignment],
    embedder: Option<(&dyn TextEmbedder, usize)>,
) -> Result<MultiViewHypergraph> {
    let position: BTreeMap<usize, usize> = vertices
        .iter()
        .enumerate()
        .map(|(p, &v)| (v, p))
        .collect();
    let mut edges = Vec::new();
    for angle in &angles.angles {
        let assignment = assignments
            .iter()
            .find(|a| &a.angle == angle)
            .ok_or_else(|| Error::InvalidConfig(format!("no categorization for angle {angle}")))?;
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (item, labels) in &assignment.labels {
            let Some(&pos) = position.get(item) else {
                continue;
            };
            for label in labels {
                if label != UNKNOWN_LABEL {
                    groups.entry(label.as_str()).or_default().push(pos);
                }
            }
        }
        for (label, mut members) in groups {
            members.sort_unstable();
            members.dedup();
            let text_embedding = match embedder {
                Some((e, dim)) => Some(e.embed(label, dim)?.vector),
                None => None,
            };
            edges.push(Hyperedge {
                id: edges.len(),
                view: angle.clone(),
                label: label.to_owned(),
                members,
                text_embedding,
            });
        }
    }
    if edges.is_empty() {
        return Err(Error::DegenerateHypergraph(format!(
            "user {user_id}: every category is empty or unknown"
        )));
    }
    Ok(MultiViewHypergraph {
        user_id: user_id.to_owned(),
        vertices: vertices.to_vec(),
        views: angles.angles.clone(),
        edges,
    })
}

fn positional_edges(view: &str, spans: impl Iterator<Item = (String, Vec<usize>)>) -> Vec<Hyperedge> {
    let mut edges: Vec<Hyperedge> = spans
        .map(|(label, members)| Hyperedge {
            id: 0,
            view: view.to_owned(),
            label,
            members,
            text_embedding: None,
        })
        .collect();
    edges.sort_by(|a, b| a.label.cmp(&b.label));
    for (i, e) in edges.iter_mut().enumerate() {
        e.id = i;
    }
    edges
}

/// One arity-2 edge per consecutive pair of the sequence.
pub fn transition_hyperedges(user_id: &str, sequence: &[usize]) -> Result<MultiViewHypergraph> {
    if sequence.len() < 2 {
        return Err(Error::DegenerateHypergraph(
            "transition edges need at least two items".into(),
        ));
    }
    let edges = positional_edges(
        "transition",
        (0..sequence.len() - 1).map(|t| (format!("t{t:05}"), vec![t, t + 1])),
    );
    Ok(MultiViewHypergraph {
        user_id: user_id.to_owned(),
        vertices: sequence.to_vec(),
        views: vec!["transition".to_owned()],
        edges,
    })
}

/// One edge per contiguous window, for every window size. Windows longer than
/// the sequence contribute nothing.
pub fn contextual_hyperedges(
    user_id: &str,
    sequence: &[usize],
    window_sizes: &[usize],
) -> Result<MultiViewHypergraph> {
    if let Some(&k) = window_sizes.iter().find(|&&k| k < 2) {
        return Err(Error::InvalidConfig(format!("window size must be >= 2, got {k}")));
    }
    let n = sequence.len();
    let spans = window_sizes.iter().flat_map(|&k| {
        (0..(n + 1).saturating_sub(k)).map(move |s| (format!("w{k:03}-{s:05}"), (s..s + k).collect()))
    });
    let edges = positional_edges("context", spans);
    if edges.is_empty() {
        return Err(Error::DegenerateHypergraph(format!(
            "user {user_id}: no window fits a sequence of length {n}"
        )));
    }
    Ok(MultiViewHypergraph {
        user_id: user_id.to_owned(),
        vertices: sequence.to_vec(),
        views: vec!["context".to_owned()],
        edges,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One edge per intent prototype, over the `top_n` most cosine-similar items.
/// Ties go to the earlier position in the sequence.
pub fn intent_hyperedges(
    user_id: &str,
    sequence: &[usize],
    item_embeddings: &[Vec<f64>],
    intent_prototypes: &[Vec<f64>],
    top_n: usize,
) -> Result<MultiViewHypergraph> {
    if top_n < 2 {
        return Err(Error::InvalidConfig(format!("top_n must be >= 2, got {top_n}")));
    }
    if intent_prototypes.is_empty() {
        return Err(Error::InvalidConfig("no intent prototypes".into()));
    }
    if item_embeddings.len() != sequence.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} items",
            item_embeddings.len(),
            sequence.len()
        )));
    }
    if sequence.is_empty() {
        return Err(Error::DegenerateHypergraph("empty sequence".into()));
    }
    let spans = intent_prototypes.iter().enumerate().map(|(k, proto)| {
        let mut ranked: Vec<(usize, f64)> = item_embeddings
            .iter()
            .enumerate()
            .map(|(i, x)| (i, cosine(x, proto)))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut members: Vec<usize> = ranked.iter().take(top_n).map(|(i, _)| *i).collect();
        members.sort_unstable();
        (format!("intent-{k:03}"), members)
    });
    let edges = positional_edges("intent", spans);
    Ok(MultiViewHypergraph {
        user_id: user_id.to_owned(),
        vertices: sequence.to_vec(),
        views: vec!["intent".to_owned()],
        edges,
    })
}

/// Lloyd's k-means with seeded distinct-point initialization; returns centroids.
pub fn kmeans_centroids(points: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidConfig(format!(
            "k-means needs 1 <= k <= {} points, got k = {k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = sample(&mut rng, points.len(), k)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..iterations {
        let mut changed = false;
        for (p, a) in points.iter().zip(assign.iter_mut()) {
            let best = centroids
                .iter()
                .enumerate()
                .map(|(c, cent)| (c, cent.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .expect("k >= 1");
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(centroids)
}

/// Matrix form of a weighted hypergraph.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergraphTensors {
    /// `|V| x |E|` 0/1 incidence.
    pub incidence: DMatrix<f64>,
    pub weights: DVector<f64>,
    /// Edge degrees δ(e).
    pub edge_degrees: DVector<f64>,
    /// Vertex degrees d(v) = Σ_e w(e) h(v, e).
    pub vertex_degrees: DVector<f64>,
    pub isolated: Vec<bool>,
}

/// Incidence and degree matrices with unit edge weights.
pub fn incidence(hg: &MultiViewHypergraph) -> Result<HypergraphTensors> {
    if hg.vertices.is_empty() || hg.edges.is_empty() {
        return Err(Error::DegenerateHypergraph("hypergraph has no vertices or edges".into()));
    }
    let mut h = DMatrix::zeros(hg.n_vertices(), hg.n_edges());
    for (j, e) in hg.edges.iter().enumerate() {
        if e.members.is_empty() {
            return Err(Error::DegenerateHypergraph(format!("edge {} is empty", e.label)));
        }
        for &m in &e.members {
            h[(m, j)] = 1.0;
        }
    }
    Ok(HypergraphTensors::from_incidence(h, DVector::from_element(hg.n_edges(), 1.0)))
}

impl HypergraphTensors {
    pub fn from_incidence(incidence: DMatrix<f64>, weights: DVector<f64>) -> Self {
        let edge_degrees = DVector::from_iterator(
            incidence.ncols(),
            incidence.column_iter().map(|c| c.sum()),
        );
        let vertex_degrees = &incidence * &weights;
        let isolated = incidence.row_iter().map(|r| r.sum() == 0.0).collect();
        Self {
            incidence,
            weights,
            edge_degrees,
            vertex_degrees,
            isolated,
        }
    }

    pub fn with_weights(&self, weights: DVector<f64>) -> Self {
        Self::from_incidence(self.incidence.clone(), weights)
    }

    pub fn n_vertices(&self) -> usize {
        self.incidence.nrows()
    }

    pub fn n_edges(&self) -> usize {
        self.incidence.ncols()
    }

    /// D_v^{-1/2} with zeros on isolated vertices.
    pub fn inv_sqrt_degrees(&self) -> Result<DVector<f64>> {
        if let Some(j) = self.edge_degrees.iter().position(|&d| d <= 0.0) {
            return Err(Error::InternalInvariantViolation(format!("edge {j} has no members")));
        }
        let mut s = DVector::zeros(self.n_vertices());
        for (i, (&d, &iso)) in self.vertex_degrees.iter().zip(&self.isolated).enumerate() {
            if iso {
                continue;
            }
            if !(d > 0.0) {
                return Err(Error::InternalInvariantViolation(format!(
                    "vertex {i} has degree {d} but is not isolated"
                )));
            }
            s[i] = 1.0 / d.sqrt();
        }
        Ok(s)
    }

    /// Propagation matrix D_v^{-1/2} H W D_e^{-1} H^T D_v^{-1/2}. Rows and
    /// columns of isolated vertices are zero.
    pub fn propagation(&self) -> Result<DMatrix<f64>> {
        let s = self.inv_sqrt_degrees()?;
        let mut scaled = self.incidence.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= (self.weights[j] / self.edge_degrees[j]).sqrt();
        }
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= s[i];
        }
        Ok(&scaled * scaled.transpose())
    }

    /// L_H = I − propagation; isolated vertices get an identity row.
    pub fn laplacian(&self) -> Result<DMatrix<f64>> {
        if let Some(j) = self.weights.iter().position(|&w| w < 0.0) {
            return Err(Error::InvalidConfig(format!("edge {j} has negative weight")));
        }
        let p = self.propagation()?;
        Ok(DMatrix::identity(self.n_vertices(), self.n_vertices()) - p)
    }
}
