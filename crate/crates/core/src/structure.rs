//! Hyperedge re-weighting from item geometry and LLM label text.
//!
//! Each hyperedge gets a prototype: the mean of its members' features, pulled
//! toward the embedding of its text label by a learned gate. Its weight mixes
//! an intra-edge term (mean heat-kernel affinity over member pairs under a
//! learnable linear map) with an inter-edge term (mean squared distance from
//! its prototype to every prototype, itself included):
//!
//! ```text
//! w(e) = β · mean_{i≠j ∈ e} exp(−‖φ(x_i) − φ(x_j)‖² / μ)
//!      + (1 − β) · Σ_k ‖p(e) − p(e_k)‖² / n_e
//! ```
//!
//! The smoothness of a soft cut `F` over the re-weighted hypergraph,
//! `Tr(Fᵀ L_H F)`, is the structure loss.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hypergraph::{HypergraphTensors, MultiViewHypergraph};

/// Learnable linear kernel map `φ(x) = x Φ` plus the fixed bandwidth μ.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub phi: DMatrix<f64>,
    pub mu: f64,
}

impl KernelParams {
    pub fn identity(dim: usize, mu: f64) -> Self {
        Self {
            phi: DMatrix::identity(dim, dim),
            mu,
        }
    }

    /// Applies φ to every row of `features`.
    pub fn map(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        features * &self.phi
    }
}

/// Linear functional `h(T) = v·T + b` that sets the text blend λ.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub vector: DVector<f64>,
    pub bias: f64,
}

impl GateParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            vector: DVector::zeros(dim),
            bias: 0.0,
        }
    }

    pub fn eval(&self, text: &DVector<f64>) -> f64 {
        self.vector.dot(text) + self.bias
    }
}

/// Soft cut predictor. Membership of item `v` in edge `e` is
/// `σ(x_v A p(e) + c)`: a bilinear head between item features and edge
/// prototypes, so its size does not depend on the number of edges.
#[derive(Debug, Clone, PartialEq)]
pub struct CutPredictor {
    pub head: DMatrix<f64>,
    pub bias: f64,
}

impl CutPredictor {
    pub fn predict(&self, features: &DMatrix<f64>, prototypes: &DMatrix<f64>) -> DMatrix<f64> {
        let mut f = features * &self.head * prototypes.transpose();
        f.apply(|z| *z = sigmoid(*z + self.bias));
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlHyperparams {
    pub beta: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_refresh_every: usize,
}

impl Default for SlHyperparams {
    fn default() -> Self {
        Self {
            beta: 0.7,
            alpha: 1.0,
            learning_rate: 1e-2,
            epochs: 100,
            weight_refresh_every: 1,
        }
    }
}

impl SlHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.weight_refresh_every == 0 {
            return Err(Error::InvalidConfig("epochs and weight_refresh_every must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Hyperedge prototype after text correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub p_ori: DVector<f64>,
    pub p: DVector<f64>,
    /// Text share; 0 when the edge has no label embedding.
    pub lambda: f64,
}

/// Mean of the member rows of `features`.
pub fn prototype_initial(members: &[usize], features: &DMatrix<f64>) -> DVector<f64> {
    let mut acc = DVector::zeros(features.ncols());
    for &m in members {
        acc += features.row(m).transpose();
    }
    acc / members.len() as f64
}

/// `λ = e^{−h(T)} / (1 + e^{−h(T)})`, `p = (1 − λ) p_ori + λ T`.
pub fn prototype_corrected(
    p_ori: DVector<f64>,
    text: Option<&DVector<f64>>,
    gate: &GateParams,
) -> Result<Prototype> {
    let Some(t) = text else {
        return Ok(Prototype {
            p: p_ori.clone(),
            p_ori,
            lambda: 0.0,
        });
    };
    let h = gate.eval(t);
    if !h.is_finite() {
        return Err(Error::Numerical(format!("gate output {h} is not finite")));
    }
    let lambda = sigmoid(-h);
    Ok(Prototype {
        p: &p_ori * (1.0 - lambda) + t * lambda,
        p_ori,
        lambda,
    })
}

pub fn prototypes(
    graph: &MultiViewHypergraph,
    features: &DMatrix<f64>,
    gate: &GateParams,
) -> Result<Vec<Prototype>> {
    graph
        .edges
        .iter()
        .map(|e| {
            let text = e.text_embedding.as_ref().map(|t| DVector::from_column_slice(t));
            prototype_corrected(prototype_initial(&e.members, features), text.as_ref(), gate)
        })
        .collect()
}

/// Mean heat-kernel affinity over ordered member pairs of already-mapped
/// features; 1 for singleton edges.
pub fn intra_cohesion(members: &[usize], mapped: &DMatrix<f64>, mu: f64) -> f64 {
    let delta = members.len();
    if delta < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            let d2 = (mapped.row(i) - mapped.row(j)).norm_squared();
            sum += (-d2 / mu).exp();
        }
    }
    2.0 * sum / (delta * (delta - 1)) as f64
}

/// `Σ_k ‖p(e) − p(e_k)‖² / n_e`, including `k = e`.
pub fn inter_separation(edge: usize, prototypes: &[Prototype]) -> f64 {
    let p = &prototypes[edge].p;
    prototypes.iter().map(|q| (p - &q.p).norm_squared()).sum::<f64>() / prototypes.len() as f64
}

fn check_weight_inputs(kernel: &KernelParams, beta: f64) -> Result<()> {
    if !(kernel.mu > 0.0) {
        return Err(Error::InvalidConfig(format!("bandwidth mu must be positive, got {}", kernel.mu)));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// Weight of a single edge given its members (rows of `features`) and the
/// prototypes of every edge in the hypergraph.
pub fn hyperedge_weight(
    members: &[usize],
    edge: usize,
    features: &DMatrix<f64>,
    kernel: &KernelParams,
    prototypes: &[Prototype],
    beta: f64,
) -> Result<f64> {
    check_weight_inputs(kernel, beta)?;
    let mapped = kernel.map(features);
    Ok(beta * intra_cohesion(members, &mapped, kernel.mu)
        + (1.0 - beta) * inter_separation(edge, prototypes))
}

/// Weights of all edges of `graph`; `features` has one row per vertex.
pub fn hyperedge_weights(
    graph: &MultiViewHypergraph,
    features: &DMatrix<f64>,
    kernel: &KernelParams,
    prototypes: &[Prototype],
    beta: f64,
) -> Result<DVector<f64>> {
    check_weight_inputs(kernel, beta)?;
    let mapped = kernel.map(features);
    Ok(DVector::from_iterator(
        graph.n_edges(),
        graph.edges.iter().enumerate().map(|(k, e)| {
            beta * intra_cohesion(&e.members, &mapped, kernel.mu)
                + (1.0 - beta) * inter_separation(k, prototypes)
        }),
    ))
}

/// Median of squared member-pair distances across a set of graphs, the
/// default heat-kernel bandwidth. Falls back to 1 when there are no pairs.
pub fn median_bandwidth<'a>(
    graphs: impl IntoIterator<Item = (&'a MultiViewHypergraph, DMatrix<f64>)>,
) -> f64 {
    let mut d2 = Vec::new();
    for (g, x) in graphs {
        for e in &g.edges {
            for (a, &i) in e.members.iter().enumerate() {
                for &j in &e.members[a + 1..] {
                    d2.push((x.row(i) - x.row(j)).norm_squared());
                }
            }
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    d2.sort_by(f64::total_cmp);
    let mid = d2.len() / 2;
    let m = if d2.len() % 2 == 1 {
        d2[mid]
    } else {
        0.5 * (d2[mid - 1] + d2[mid])
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// `Tr(Fᵀ L_H F)`.
pub fn structure_loss(cut: &DMatrix<f64>, tensors: &HypergraphTensors) -> Result<f64> {
    if cut.nrows() != tensors.n_vertices() {
        return Err(Error::Shape(format!(
            "cut has {} rows, hypergraph has {} vertices",
            cut.nrows(),
            tensors.n_vertices()
        )));
    }
    let l = tensors.laplacian()?;
    Ok(cut.component_mul(&(l * cut)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::{incidence, Hyperedge};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize, edges: &[&[usize]]) -> MultiViewHypergraph {
        MultiViewHypergraph {
            user_id: "u".into(),
            vertices: (0..n).collect(),
            views: vec!["v".into()],
            edges: edges
                .iter()
                .enumerate()
                .map(|(i, m)| Hyperedge {
                    id: i,
                    view: "v".into(),
                    label: format!("e{i}"),
                    members: m.to_vec(),
                    text_embedding: None,
                })
                .collect(),
        }
    }

    fn proto(v: &[f64]) -> Prototype {
        let p = DVector::from_column_slice(v);
        Prototype {
            p_ori: p.clone(),
            p,
            lambda: 0.0,
        }
    }

    #[test]
    fn initial_prototype_is_mean() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(prototype_initial(&[0, 1], &f).as_slice(), [0.5, 0.5]);
        assert_eq!(prototype_initial(&[1], &f).as_slice(), [0.0, 1.0]);
    }

    #[test]
    fn initial_prototype_matches_loop_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..10);
            let d = rng.random_range(1..6);
            let f = DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
            let members: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
            let members = if members.is_empty() { vec![0] } else { members };
            let got = prototype_initial(&members, &f);
            for c in 0..d {
                let mut s = 0.0;
                for &m in &members {
                    s += f[(m, c)];
                }
                assert!((got[c] - s / members.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lambda_spot_values() {
        let p_ori = DVector::from_vec(vec![1.0, 0.0]);
        let t = DVector::from_vec(vec![0.0, 1.0]);
        let zero = GateParams::zeros(2);
        let p = prototype_corrected(p_ori.clone(), Some(&t), &zero).unwrap();
        assert_eq!(p.lambda, 0.5);
        assert_eq!(p.p.as_slice(), [0.5, 0.5]);

        let ln3 = GateParams {
            vector: DVector::zeros(2),
            bias: 3f64.ln(),
        };
        let p = prototype_corrected(p_ori.clone(), Some(&t), &ln3).unwrap();
        assert!((p.lambda - 0.25).abs() < 1e-12);

        let big = GateParams {
            vector: DVector::zeros(2),
            bias: 50.0,
        };
        let p = prototype_corrected(p_ori.clone(), Some(&t), &big).unwrap();
        assert!(p.lambda < 1e-20);
        assert!((p.p - &p_ori).amax() < 1e-20);

        let none = prototype_corrected(p_ori.clone(), None, &ln3).unwrap();
        assert_eq!(none.lambda, 0.0);
        assert_eq!(none.p, p_ori);

        let nan = GateParams {
            vector: DVector::zeros(2),
            bias: f64::NAN,
        };
        assert!(matches!(prototype_corrected(p_ori, Some(&t), &nan), Err(Error::Numerical(_))));
    }

    #[test]
    fn duplicate_point_pair_has_unit_weight() {
        let f = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.3, -0.2]);
        let k = KernelParams::identity(2, 0.7);
        let protos = vec![proto(&[0.3, -0.2])];
        assert_eq!(hyperedge_weight(&[0, 1], 0, &f, &k, &protos, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn inter_term_includes_self() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let k = KernelParams::identity(2, 1.0);
        let protos = vec![proto(&[0.0, 0.0]), proto(&[1.0, 0.0])];
        let w = hyperedge_weight(&[0], 0, &f, &k, &protos, 0.0).unwrap();
        assert!((w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bad_bandwidth_rejected() {
        let f = DMatrix::zeros(1, 2);
        let k = KernelParams::identity(2, 0.0);
        assert!(matches!(
            hyperedge_weight(&[0], 0, &f, &k, &[proto(&[0.0, 0.0])], 0.5),
            Err(Error::InvalidConfig(_))
        ));
    }

    /// Enumerates every ordered pair and every prototype pair directly.
    fn weight_oracle(
        members: &[usize],
        edge: usize,
        x: &DMatrix<f64>,
        phi: &DMatrix<f64>,
        mu: f64,
        protos: &[DVector<f64>],
        beta: f64,
    ) -> f64 {
        let d = x.ncols();
        let delta = members.len();
        let intra = if delta == 1 {
            1.0
        } else {
            let mut s = 0.0;
            for &i in members {
                for &j in members {
                    if i == j {
                        continue;
                    }
                    let mut dist = 0.0;
                    for c in 0..d {
                        let mut yi = 0.0;
                        let mut yj = 0.0;
                        for r in 0..d {
                            yi += x[(i, r)] * phi[(r, c)];
                            yj += x[(j, r)] * phi[(r, c)];
                        }
                        dist += (yi - yj) * (yi - yj);
                    }
                    s += (-dist / mu).exp();
                }
            }
            s / (delta * (delta - 1)) as f64
        };
        let mut inter = 0.0;
        for q in protos {
            for c in 0..d {
                inter += (protos[edge][c] - q[c]).powi(2);
            }
        }
        beta * intra + (1.0 - beta) * inter / protos.len() as f64
    }

    #[test]
    fn weights_match_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d = 3;
            let x = DMatrix::from_fn(8, d, |_, _| rng.random_range(-1.0..1.0));
            let phi = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let edges: Vec<Vec<usize>> = (0..4)
                .map(|_| {
                    let m: Vec<usize> = (0..8).filter(|_| rng.random_bool(0.4)).collect();
                    if m.is_empty() { vec![rng.random_range(0..8)] } else { m }
                })
                .collect();
            let refs: Vec<&[usize]> = edges.iter().map(Vec::as_slice).collect();
            let g = graph(8, &refs);
            let protos: Vec<Prototype> = edges
                .iter()
                .map(|m| proto(prototype_initial(m, &x).as_slice()))
                .collect();
            let raw: Vec<DVector<f64>> = protos.iter().map(|p| p.p.clone()).collect();
            let beta = rng.random_range(0.0..1.0);
            let kernel = KernelParams { phi: phi.clone(), mu: 0.8 };
            let all = hyperedge_weights(&g, &x, &kernel, &protos, beta).unwrap();
            for (k, m) in edges.iter().enumerate() {
                let want = weight_oracle(m, k, &x, &phi, 0.8, &raw, beta);
                let one = hyperedge_weight(m, k, &x, &kernel, &protos, beta).unwrap();
                assert!((all[k] - want).abs() < 1e-10);
                assert!((one - want).abs() < 1e-10);
                assert!(all[k] >= 0.0);
            }
        }
    }

    #[test]
    fn structure_loss_examples() {
        let t = incidence(&graph(2, &[&[0, 1]])).unwrap();
        let f = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!((structure_loss(&f, &t).unwrap() - 0.5).abs() < 1e-12);

        let t = incidence(&graph(4, &[&[0, 1, 2], &[2, 3]]))
            .unwrap()
            .with_weights(DVector::from_vec(vec![0.4, 1.3]));
        let root = t.vertex_degrees.map(f64::sqrt);
        let f = DMatrix::from_columns(&[root.clone() * 2.0, root * -0.5]);
        assert!(structure_loss(&f, &t).unwrap().abs() < 1e-12);

        assert!(matches!(
            structure_loss(&DMatrix::zeros(3, 1), &t),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bandwidth_covariance_preserves_cohesion_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let edges: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7, 8], vec![1, 9]];
        let order = |x: &DMatrix<f64>, mu: f64| {
            let c: Vec<f64> = edges.iter().map(|m| intra_cohesion(m, x, mu)).collect();
            let mut idx: Vec<usize> = (0..c.len()).collect();
            idx.sort_by(|&a, &b| c[a].total_cmp(&c[b]));
            (idx, c)
        };
        let (base, cb) = order(&x, 0.9);
        let scale = 3.7;
        let (scaled, cs) = order(&(&x * scale), 0.9 * scale * scale);
        assert_eq!(base, scaled);
        for (a, b) in cb.iter().zip(&cs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn median_bandwidth_heuristic() {
        let g = graph(3, &[&[0, 1, 2]]);
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        // pair distances 1, 9, 4 -> median 4
        assert_eq!(median_bandwidth([(&g, x)]), 4.0);
        let single = graph(1, &[&[0]]);
        assert_eq!(median_bandwidth([(&single, DMatrix::zeros(1, 1))]), 1.0);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(SlHyperparams::default().validate().is_ok());
        let bad = SlHyperparams {
            beta: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
