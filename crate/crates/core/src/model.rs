//! Hyperedge convolution, the sequential base encoder, gated fusion and the
//! joint objective `L = L_str + α · L_pre`, with hand-written gradients.
//!
//! One shared item-embedding table feeds everything: the base encoder, the
//! hypergraph features (prototypes, kernel, cut predictor, convolution) and
//! the scoring head.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hypergraph::{incidence, HypergraphTensors, MultiViewHypergraph};
use crate::structure::{
    hyperedge_weights, prototypes, sigmoid, CutPredictor, GateParams, KernelParams,
    Prototype,
};

/// Added to every learned edge weight before degrees are formed so that a
/// zero-weight edge never leaves its members with zero degree. The
/// propagation matrix is invariant to a common scale of the weights.
pub const WEIGHT_FLOOR: f64 = 1e-8;
pub const PROB_CLAMP: f64 = 1e-7;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LHG1";

#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddingTable {
    /// `d x n_items`; column `i` is item `i`.
    pub matrix: DMatrix<f64>,
}

impl ItemEmbeddingTable {
    pub fn random(n_items: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        Self {
            matrix: DMatrix::from_fn(dim, n_items, |_, _| normal.sample(rng)),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn vector(&self, item: usize) -> DVector<f64> {
        self.matrix.column(item).into_owned()
    }

    /// One row per item of `items`.
    pub fn features(&self, items: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(items.len(), self.dim(), |r, c| self.matrix[(c, items[r])])
    }
}

/// A sequence encoder producing a user vector from item embeddings.
pub trait BaseEncoder {
    fn encode(&self, table: &ItemEmbeddingTable, sequence: &[usize]) -> DVector<f64>;
}

/// Exponentially decayed mean: `Σ_t γ^{n−t} f(s_t) / Σ_t γ^{n−t}` with
/// `γ = σ(decay_logit)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpleSeqEncoder {
    pub decay_logit: f64,
}

impl SimpleSeqEncoder {
    pub fn gamma(&self) -> f64 {
        sigmoid(self.decay_logit)
    }

    fn position_weights(&self, n: usize) -> Vec<f64> {
        let g = self.gamma();
        (0..n).map(|t| g.powi((n - 1 - t) as i32)).collect()
    }

    pub fn encode_features(&self, features: &DMatrix<f64>) -> DVector<f64> {
        let c = self.position_weights(features.nrows());
        let z: f64 = c.iter().sum();
        let mut u = DVector::zeros(features.ncols());
        for (t, ct) in c.iter().enumerate() {
            u += features.row(t).transpose() * (ct / z);
        }
        u
    }
}

impl BaseEncoder for SimpleSeqEncoder {
    fn encode(&self, table: &ItemEmbeddingTable, sequence: &[usize]) -> DVector<f64> {
        self.encode_features(&table.features(sequence))
    }
}

/// Gate `g = σ(W [u_hg; u_base] + b)`, fused `u = g ⊙ u_hg + (1 − g) ⊙ u_base`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl FusionParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: DMatrix::zeros(dim, 2 * dim),
            bias: DVector::zeros(dim),
        }
    }

    pub fn gate(&self, u_hg: &DVector<f64>, u_base: &DVector<f64>) -> DVector<f64> {
        let mut z = &self.bias + self.weight.columns(0, u_hg.len()) * u_hg
            + self.weight.columns(u_hg.len(), u_base.len()) * u_base;
        z.apply(|v| *v = sigmoid(*v));
        z
    }
}

pub fn fuse(u_hg: &DVector<f64>, u_base: &DVector<f64>, fusion: &FusionParams) -> DVector<f64> {
    let g = fusion.gate(u_hg, u_base);
    u_base + g.component_mul(&(u_hg - u_base))
}

/// `σ(P X Θ_1)` repeated per layer, where P is the hypergraph propagation
/// matrix. `relu = false` disables the nonlinearity.
pub fn hyperedge_convolution(
    features: &DMatrix<f64>,
    tensors: &HypergraphTensors,
    thetas: &[DMatrix<f64>],
    relu: bool,
) -> Result<DMatrix<f64>> {
    if features.nrows() != tensors.n_vertices() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} vertices",
            features.nrows(),
            tensors.n_vertices()
        )));
    }
    let p = tensors.propagation()?;
    let mut x = features.clone();
    for theta in thetas {
        if theta.nrows() != x.ncols() {
            return Err(Error::Shape(format!("theta is {}x{}", theta.nrows(), theta.ncols())));
        }
        x = &p * x * theta;
        if relu {
            x.apply(|v| *v = v.max(0.0));
        }
    }
    Ok(x)
}

fn readout_weights(tensors: &HypergraphTensors) -> DVector<f64> {
    DVector::from_iterator(
        tensors.n_vertices(),
        tensors
            .vertex_degrees
            .iter()
            .zip(&tensors.isolated)
            .map(|(&d, &iso)| if iso { 1.0 } else { d }),
    )
}

/// Degree-weighted mean of convolved vertex rows; isolated vertices count
/// with weight 1.
pub fn readout_user(convolved: &DMatrix<f64>, tensors: &HypergraphTensors) -> DVector<f64> {
    let w = readout_weights(tensors);
    convolved.transpose() * &w / w.sum()
}

/// Inner-product scores against every item.
pub fn predict_scores(user: &DVector<f64>, table: &ItemEmbeddingTable) -> DVector<f64> {
    table.matrix.tr_mul(user)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `−[ln ŷ_pos + Σ ln(1 − ŷ_neg)] / (1 + K)` with probabilities clamped to
/// `[1e−7, 1 − 1e−7]`.
pub fn prediction_loss(pos: f64, negs: &[f64]) -> Result<f64> {
    if !pos.is_finite() || negs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("non-finite probability".into()));
    }
    let s = clamp_prob(pos).ln() + negs.iter().map(|&q| (1.0 - clamp_prob(q)).ln()).sum::<f64>();
    Ok(-s / (1 + negs.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Hypergraph branch fused with the base encoder.
    Full,
    /// Base encoder alone, trained on `L_pre`.
    BaseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub beta: f64,
    pub alpha: f64,
    pub variant: Variant,
    pub relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            beta: 0.7,
            alpha: 1.0,
            variant: Variant::Full,
            relu: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub table: ItemEmbeddingTable,
    pub kernel: KernelParams,
    pub gate: GateParams,
    pub cut: CutPredictor,
    pub thetas: Vec<DMatrix<f64>>,
    pub fusion: FusionParams,
    pub encoder: SimpleSeqEncoder,
}

/// One training (or evaluation) instance for a user.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub history: &'a [usize],
    /// Hypergraph over `history`; `None` means no structure for this user.
    pub graph: Option<&'a MultiViewHypergraph>,
    pub target: usize,
    pub negatives: &'a [usize],
    /// Edge weights held fixed between refreshes. When set, no gradient flows
    /// into the kernel map or the text gate through the weights.
    pub frozen_weights: Option<&'a DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_str: f64,
    /// `None` when α = 0 and the prediction path was skipped.
    pub l_pre: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub table: BTreeMap<usize, DVector<f64>>,
    pub phi: DMatrix<f64>,
    pub gate_vector: DVector<f64>,
    pub gate_bias: f64,
    pub cut_head: DMatrix<f64>,
    pub cut_bias: f64,
    pub thetas: Vec<DMatrix<f64>>,
    pub fusion_weight: DMatrix<f64>,
    pub fusion_bias: DVector<f64>,
    pub decay_logit: f64,
}

impl Gradients {
    fn zeros(params: &ModelParams) -> Self {
        let d = params.dim();
        Self {
            table: BTreeMap::new(),
            phi: DMatrix::zeros(d, d),
            gate_vector: DVector::zeros(d),
            gate_bias: 0.0,
            cut_head: DMatrix::zeros(d, d),
            cut_bias: 0.0,
            thetas: vec![DMatrix::zeros(d, d); params.thetas.len()],
            fusion_weight: DMatrix::zeros(d, 2 * d),
            fusion_bias: DVector::zeros(d),
            decay_logit: 0.0,
        }
    }

    fn add_item(&mut self, item: usize, g: DVector<f64>) {
        match self.table.get_mut(&item) {
            Some(acc) => *acc += g,
            None => {
                self.table.insert(item, g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.table.values().all(|v| v.iter().all(|x| x.is_finite()))
            && self.phi.iter().all(|x| x.is_finite())
            && self.gate_vector.iter().all(|x| x.is_finite())
            && self.gate_bias.is_finite()
            && self.cut_head.iter().all(|x| x.is_finite())
            && self.cut_bias.is_finite()
            && self.thetas.iter().all(|t| t.iter().all(|x| x.is_finite()))
            && self.fusion_weight.iter().all(|x| x.is_finite())
            && self.fusion_bias.iter().all(|x| x.is_finite())
            && self.decay_logit.is_finite()
    }
}

/// Hypergraph-branch intermediates kept for the backward pass.
struct GraphForward {
    tensors: HypergraphTensors,
    inv_sqrt: DVector<f64>,
    prop: DMatrix<f64>,
    protos: Vec<Prototype>,
    texts: Vec<Option<DVector<f64>>>,
    proto_mat: DMatrix<f64>,
    mapped: DMatrix<f64>,
    frozen: bool,
    cut: DMatrix<f64>,
    cut_pre: DMatrix<f64>,
    lap_cut: DMatrix<f64>,
    layer_inputs: Vec<DMatrix<f64>>,
    layer_mixed: Vec<DMatrix<f64>>,
    layer_pre: Vec<DMatrix<f64>>,
    convolved: DMatrix<f64>,
    readout_w: DVector<f64>,
    u_hg: DVector<f64>,
}

struct Forward {
    history: Vec<usize>,
    x: DMatrix<f64>,
    base_c: Vec<f64>,
    base_z: f64,
    u_base: DVector<f64>,
    graph: Option<GraphForward>,
    gate: Option<DVector<f64>>,
    u: DVector<f64>,
    candidates: Vec<usize>,
    probs: Vec<f64>,
    parts: LossParts,
}

impl ModelParams {
    /// Identity kernel map, convolution and cut head; zero gate and fusion
    /// weights (λ = 0.5 and g = 0.5 at start); γ = σ(decay_logit).
    pub fn init(
        n_items: usize,
        dim: usize,
        layers: usize,
        init_scale: f64,
        decay_logit: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            table: ItemEmbeddingTable::random(n_items, dim, init_scale, rng),
            kernel: KernelParams::identity(dim, 1.0),
            gate: GateParams::zeros(dim),
            cut: CutPredictor {
                head: DMatrix::identity(dim, dim),
                bias: 0.0,
            },
            thetas: vec![DMatrix::identity(dim, dim); layers],
            fusion: FusionParams::zeros(dim),
            encoder: SimpleSeqEncoder { decay_logit },
        }
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    fn check_graph(&self, history: &[usize], graph: &MultiViewHypergraph) -> Result<()> {
        if graph.vertices != history {
            return Err(Error::Shape(format!(
                "hypergraph over {} vertices does not match a history of {}",
                graph.n_vertices(),
                history.len()
            )));
        }
        Ok(())
    }

    /// Prototypes and learned edge weights (before the floor) for a graph.
    pub fn edge_weights(
        &self,
        cfg: &ModelConfig,
        history: &[usize],
        graph: &MultiViewHypergraph,
    ) -> Result<(Vec<Prototype>, DVector<f64>)> {
        self.check_graph(history, graph)?;
        let x = self.table.features(history);
        let protos = prototypes(graph, &x, &self.gate)?;
        let w = hyperedge_weights(graph, &x, &self.kernel, &protos, cfg.beta)?;
        Ok((protos, w))
    }

    fn graph_forward(
        &self,
        cfg: &ModelConfig,
        x: &DMatrix<f64>,
        graph: &MultiViewHypergraph,
        frozen: Option<&DVector<f64>>,
        with_conv: bool,
    ) -> Result<GraphForward> {
        let protos = prototypes(graph, x, &self.gate)?;
        let m = protos.len();
        let d = self.dim();
        let proto_mat = DMatrix::from_fn(m, d, |r, c| protos[r].p[c]);
        let mapped = self.kernel.map(x);
        let raw_w = match frozen {
            Some(w) => {
                if w.len() != m {
                    return Err(Error::Shape(format!("{} frozen weights for {m} edges", w.len())));
                }
                w.clone()
            }
            None => hyperedge_weights(graph, x, &self.kernel, &protos, cfg.beta)?,
        };
        if raw_w.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite hyperedge weight".into()));
        }
        let tensors = incidence(graph)?.with_weights(raw_w.add_scalar(WEIGHT_FLOOR));
        let inv_sqrt = tensors.inv_sqrt_degrees()?;
        let prop = tensors.propagation()?;

        let cut_pre = x * &self.cut.head * proto_mat.transpose();
        let cut = cut_pre.map(|z| sigmoid(z + self.cut.bias));
        let lap_cut = &cut - &prop * &cut;

        let mut layer_inputs = Vec::new();
        let mut layer_mixed = Vec::new();
        let mut layer_pre = Vec::new();
        let mut h = x.clone();
        if with_conv {
            for theta in &self.thetas {
                let mixed = &prop * &h;
                let pre = &mixed * theta;
                layer_inputs.push(h);
                h = if cfg.relu { pre.map(|v| v.max(0.0)) } else { pre.clone() };
                layer_mixed.push(mixed);
                layer_pre.push(pre);
            }
        }
        let readout_w = readout_weights(&tensors);
        let u_hg = h.transpose() * &readout_w / readout_w.sum();
        Ok(GraphForward {
            tensors,
            inv_sqrt,
            prop,
            protos,
            texts: graph
                .edges
                .iter()
                .map(|e| e.text_embedding.as_deref().map(DVector::from_column_slice))
                .collect(),
            proto_mat,
            mapped,
            frozen: frozen.is_some(),
            cut,
            cut_pre,
            lap_cut,
            layer_inputs,
            layer_mixed,
            layer_pre,
            convolved: h,
            readout_w,
            u_hg,
        })
    }

    fn forward(&self, cfg: &ModelConfig, ex: &Example) -> Result<Forward> {
        if ex.history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        let d = self.dim();
        let x = self.table.features(ex.history);
        let base_c = self.encoder.position_weights(ex.history.len());
        let base_z: f64 = base_c.iter().sum();
        let u_base = self.encoder.encode_features(&x);
        let with_pred = cfg.alpha != 0.0;

        let graph = match (cfg.variant, ex.graph) {
            (Variant::Full, Some(g)) if g.n_edges() > 0 => {
                self.check_graph(ex.history, g)?;
                Some(self.graph_forward(cfg, &x, g, ex.frozen_weights, with_pred)?)
            }
            (Variant::Full, Some(g)) => {
                self.check_graph(ex.history, g)?;
                None
            }
            _ => None,
        };
        let l_str = match &graph {
            Some(gf) => gf.cut.component_mul(&gf.lap_cut).sum(),
            None => 0.0,
        };

        let (gate, u) = match cfg.variant {
            Variant::Full if with_pred => {
                let u_hg = graph.as_ref().map_or_else(|| DVector::zeros(d), |g| g.u_hg.clone());
                let g = self.fusion.gate(&u_hg, &u_base);
                let u = &u_base + g.component_mul(&(&u_hg - &u_base));
                (Some(g), u)
            }
            _ => (None, u_base.clone()),
        };

        let mut candidates = Vec::new();
        let mut probs = Vec::new();
        let l_pre = if with_pred {
            candidates.push(ex.target);
            candidates.extend_from_slice(ex.negatives);
            probs = candidates
                .iter()
                .map(|&c| sigmoid(self.table.matrix.column(c).dot(&u)))
                .collect();
            Some(prediction_loss(probs[0], &probs[1..])?)
        } else {
            None
        };
        let total = l_str + cfg.alpha * l_pre.unwrap_or(0.0);
        if !total.is_finite() {
            return Err(Error::Numerical("non-finite loss".into()));
        }
        Ok(Forward {
            history: ex.history.to_vec(),
            x,
            base_c,
            base_z,
            u_base,
            graph,
            gate,
            u,
            candidates,
            probs,
            parts: LossParts { l_str, l_pre, total },
        })
    }

    pub fn loss(&self, cfg: &ModelConfig, ex: &Example) -> Result<LossParts> {
        Ok(self.forward(cfg, ex)?.parts)
    }

    /// User vector used for scoring.
    pub fn user_representation(
        &self,
        cfg: &ModelConfig,
        history: &[usize],
        graph: Option<&MultiViewHypergraph>,
    ) -> Result<DVector<f64>> {
        let inference = ModelConfig { alpha: 1.0, ..*cfg };
        let ex = Example {
            history,
            graph,
            target: history[0],
            negatives: &[],
            frozen_weights: None,
        };
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        Ok(self.forward(&inference, &ex)?.u)
    }

    pub fn loss_and_grad(&self, cfg: &ModelConfig, ex: &Example) -> Result<(LossParts, Gradients)> {
        let fwd = self.forward(cfg, ex)?;
        let grads = self.backward(cfg, &fwd);
        if !grads.all_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok((fwd.parts, grads))
    }

    fn backward(&self, cfg: &ModelConfig, fwd: &Forward) -> Gradients {
        let d = self.dim();
        let n = fwd.x.nrows();
        let mut grads = Gradients::zeros(self);
        let mut gx = DMatrix::zeros(n, d);
        let mut gu_base = DVector::zeros(d);
        let mut gu_hg: Option<DVector<f64>> = None;

        // Prediction head.
        if let Some(l_pre) = fwd.parts.l_pre {
            debug_assert!(l_pre.is_finite());
            let k1 = fwd.candidates.len() as f64;
            let mut gu = DVector::zeros(d);
            for (j, (&c, &p)) in fwd.candidates.iter().zip(&fwd.probs).enumerate() {
                let inside = p > PROB_CLAMP && p < 1.0 - PROB_CLAMP;
                if !inside {
                    continue;
                }
                let coef = cfg.alpha * if j == 0 { -(1.0 - p) } else { p } / k1;
                gu += self.table.matrix.column(c) * coef;
                grads.add_item(c, &fwd.u * coef);
            }
            match (&fwd.gate, cfg.variant) {
                (Some(g), Variant::Full) => {
                    let u_hg = fwd
                        .graph
                        .as_ref()
                        .map_or_else(|| DVector::zeros(d), |gf| gf.u_hg.clone());
                    let diff = &u_hg - &fwd.u_base;
                    let gz = gu.component_mul(&diff).component_mul(&g.map(|v| v * (1.0 - v)));
                    let mut a = DVector::zeros(2 * d);
                    a.rows_mut(0, d).copy_from(&u_hg);
                    a.rows_mut(d, d).copy_from(&fwd.u_base);
                    grads.fusion_weight += &gz * a.transpose();
                    grads.fusion_bias += &gz;
                    let ga = self.fusion.weight.tr_mul(&gz);
                    gu_hg = Some(g.component_mul(&gu) + ga.rows(0, d));
                    gu_base += g.map(|v| 1.0 - v).component_mul(&gu) + ga.rows(d, d);
                }
                _ => gu_base += gu,
            }
        }

        // Base encoder.
        if gu_base.iter().any(|&v| v != 0.0) {
            let gamma = self.encoder.gamma();
            let mut g_gamma = 0.0;
            for t in 0..n {
                let row = fwd.x.row(t).transpose();
                let mut r = gx.row_mut(t);
                r += (&gu_base * (fwd.base_c[t] / fwd.base_z)).transpose();
                let power = n - 1 - t;
                if power > 0 {
                    let dc = power as f64 * gamma.powi(power as i32 - 1);
                    g_gamma += dc * (row - &fwd.u_base).dot(&gu_base) / fwd.base_z;
                }
            }
            grads.decay_logit += g_gamma * gamma * (1.0 - gamma);
        }

        let Some(gf) = &fwd.graph else {
            self.scatter_rows(&mut grads, gx, fwd);
            return grads;
        };
        let m = gf.protos.len();
        let mut g_prop = DMatrix::<f64>::zeros(n, n);
        let mut g_deg = DVector::<f64>::zeros(n);

        // Readout and convolution.
        if let Some(gu_hg) = gu_hg {
            let wsum = gf.readout_w.sum();
            let mut g_out = &gf.readout_w * gu_hg.transpose() / wsum;
            for i in 0..n {
                if !gf.tensors.isolated[i] {
                    g_deg[i] += (gf.convolved.row(i).transpose() - &gf.u_hg).dot(&gu_hg) / wsum;
                }
            }
            for l in (0..self.thetas.len()).rev() {
                let g_pre = if cfg.relu {
                    g_out.zip_map(&gf.layer_pre[l], |g, z| if z > 0.0 { g } else { 0.0 })
                } else {
                    g_out
                };
                grads.thetas[l] += gf.layer_mixed[l].tr_mul(&g_pre);
                let g_mixed = &g_pre * self.thetas[l].transpose();
                g_prop += &g_mixed * gf.layer_inputs[l].transpose();
                g_out = &gf.prop * g_mixed;
            }
            gx += g_out;
        }

        // Structure loss Tr(Fᵀ (I − P) F).
        let g_cut = &gf.lap_cut * 2.0;
        g_prop -= &gf.cut * gf.cut.transpose();
        let g_logit = g_cut.zip_map(&gf.cut, |g, f| g * f * (1.0 - f));
        grads.cut_bias += g_logit.sum();
        let q = &fwd.x * &self.cut.head;
        let g_q = &g_logit * &gf.proto_mat;
        let mut g_proto = g_logit.tr_mul(&q);
        gx += &g_q * self.cut.head.transpose();
        grads.cut_head += fwd.x.tr_mul(&g_q);
        debug_assert!(gf.cut_pre.nrows() == n);

        // Propagation matrix -> edge weights.
        if !gf.frozen {
            let s = &gf.inv_sqrt;
            let degrees = &gf.tensors.vertex_degrees;
            let sym = &g_prop + g_prop.transpose();
            for i in 0..n {
                if gf.tensors.isolated[i] {
                    continue;
                }
                let r: f64 = sym.row(i).iter().zip(gf.prop.row(i).iter()).map(|(a, b)| a * b).sum();
                g_deg[i] += -0.5 * r / degrees[i];
            }
            let mut g_w = DVector::<f64>::zeros(m);
            let graph_edges = gf.tensors.incidence.column_iter().map(|c| {
                c.iter()
                    .enumerate()
                    .filter_map(|(i, &h)| (h != 0.0).then_some(i))
                    .collect::<Vec<_>>()
            });
            let members: Vec<Vec<usize>> = graph_edges.collect();
            for (e, mem) in members.iter().enumerate() {
                let mut direct = 0.0;
                for &i in mem {
                    for &j in mem {
                        direct += g_prop[(i, j)] * s[i] * s[j];
                    }
                }
                g_w[e] = direct / gf.tensors.edge_degrees[e] + mem.iter().map(|&i| g_deg[i]).sum::<f64>();
            }

            // Inter-edge separation.
            let g_inter = &g_w * (1.0 - cfg.beta);
            for e in 0..m {
                for k in 0..m {
                    if e == k {
                        continue;
                    }
                    let coef = 2.0 * (g_inter[e] + g_inter[k]) / m as f64;
                    let diff = &gf.protos[e].p - &gf.protos[k].p;
                    let mut row = g_proto.row_mut(e);
                    row += (diff * coef).transpose();
                }
            }

            // Intra-edge heat kernel.
            let mut g_mapped = DMatrix::zeros(n, d);
            for (e, mem) in members.iter().enumerate() {
                let delta = mem.len();
                if delta < 2 {
                    continue;
                }
                let coef = cfg.beta * g_w[e] * 2.0 / (delta * (delta - 1)) as f64;
                for (a, &i) in mem.iter().enumerate() {
                    for &j in &mem[a + 1..] {
                        let diff = gf.mapped.row(i) - gf.mapped.row(j);
                        let k = (-diff.norm_squared() / self.kernel.mu).exp();
                        let g = diff * (coef * k * -2.0 / self.kernel.mu);
                        let mut ri = g_mapped.row_mut(i);
                        ri += &g;
                        let mut rj = g_mapped.row_mut(j);
                        rj -= &g;
                    }
                }
            }
            gx += &g_mapped * self.kernel.phi.transpose();
            grads.phi += fwd.x.tr_mul(&g_mapped);
        }

        // Prototypes -> member features and text gate.
        for (e, proto) in gf.protos.iter().enumerate() {
            let gp = g_proto.row(e).transpose();
            let mem: Vec<usize> = gf
                .tensors
                .incidence
                .column(e)
                .iter()
                .enumerate()
                .filter_map(|(i, &h)| (h != 0.0).then_some(i))
                .collect();
            let g_ori = if let Some(text) = &gf.texts[e] {
                let g_lambda = gp.dot(&(text - &proto.p_ori));
                let g_h = -g_lambda * proto.lambda * (1.0 - proto.lambda);
                grads.gate_vector += text * g_h;
                grads.gate_bias += g_h;
                &gp * (1.0 - proto.lambda)
            } else {
                gp
            };
            let share = g_ori / mem.len() as f64;
            for &i in &mem {
                let mut r = gx.row_mut(i);
                r += share.transpose();
            }
        }

        self.scatter_rows(&mut grads, gx, fwd);
        grads
    }

    fn scatter_rows(&self, grads: &mut Gradients, gx: DMatrix<f64>, fwd: &Forward) {
        for (t, row) in gx.row_iter().enumerate() {
            if row.iter().any(|&v| v != 0.0) {
                grads.add_item(fwd.history[t], row.transpose());
            }
        }
    }

    /// Plain gradient step with per-entry clipping.
    pub fn apply(&mut self, grads: &Gradients, learning_rate: f64, clip: f64) {
        let step = |g: f64| learning_rate * g.clamp(-clip, clip);
        for (&item, g) in &grads.table {
            let mut col = self.table.matrix.column_mut(item);
            col.zip_apply(g, |p, g| *p -= step(g));
        }
        self.kernel.phi.zip_apply(&grads.phi, |p, g| *p -= step(g));
        self.gate.vector.zip_apply(&grads.gate_vector, |p, g| *p -= step(g));
        self.gate.bias -= step(grads.gate_bias);
        self.cut.head.zip_apply(&grads.cut_head, |p, g| *p -= step(g));
        self.cut.bias -= step(grads.cut_bias);
        for (t, g) in self.thetas.iter_mut().zip(&grads.thetas) {
            t.zip_apply(g, |p, g| *p -= step(g));
        }
        self.fusion.weight.zip_apply(&grads.fusion_weight, |p, g| *p -= step(g));
        self.fusion.bias.zip_apply(&grads.fusion_bias, |p, g| *p -= step(g));
        self.encoder.decay_logit -= step(grads.decay_logit);
    }
}

impl ModelParams {
    /// Little-endian binary layout: magic, `d` and `n_items` as u32, then
    /// every parameter as f64 (matrices row-major; the item table as
    /// `n_items x d`), finally the kernel bandwidth.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.table.n_items() as u32).to_le_bytes());
        let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        // Column-major d x n is row-major n x d.
        self.table.matrix.iter().for_each(|&v| push(v));
        let row_major = |m: &DMatrix<f64>, push: &mut dyn FnMut(f64)| {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    push(m[(r, c)]);
                }
            }
        };
        row_major(&self.kernel.phi, &mut push);
        self.gate.vector.iter().for_each(|&v| push(v));
        push(self.gate.bias);
        row_major(&self.cut.head, &mut push);
        push(self.cut.bias);
        for t in &self.thetas {
            row_major(t, &mut push);
        }
        row_major(&self.fusion.weight, &mut push);
        self.fusion.bias.iter().for_each(|&v| push(v));
        push(self.encoder.decay_logit);
        push(self.kernel.mu);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing checkpoint header"));
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if d == 0 || body.len() % 8 != 0 {
            return Err(bad("truncated checkpoint"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let fixed = n * d + d * d + d + 1 + d * d + 1 + 2 * d * d + d + 2;
        let extra = values
            .len()
            .checked_sub(fixed)
            .ok_or_else(|| bad("truncated checkpoint"))?;
        if extra % (d * d) != 0 {
            return Err(bad("checkpoint size does not match its header"));
        }
        let layers = extra / (d * d);
        let mut it = values.into_iter();
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let table = DMatrix::from_column_slice(d, n, &take(n * d));
        let phi = DMatrix::from_row_slice(d, d, &take(d * d));
        let gate_vector = DVector::from_vec(take(d));
        let gate_bias = take(1)[0];
        let head = DMatrix::from_row_slice(d, d, &take(d * d));
        let cut_bias = take(1)[0];
        let thetas = (0..layers)
            .map(|_| DMatrix::from_row_slice(d, d, &take(d * d)))
            .collect();
        let fusion_weight = DMatrix::from_row_slice(d, 2 * d, &take(2 * d * d));
        let fusion_bias = DVector::from_vec(take(d));
        let decay_logit = take(1)[0];
        let mu = take(1)[0];
        Ok(Self {
            table: ItemEmbeddingTable { matrix: table },
            kernel: KernelParams { phi, mu },
            gate: GateParams {
                vector: gate_vector,
                bias: gate_bias,
            },
            cut: CutPredictor { head, bias: cut_bias },
            thetas,
            fusion: FusionParams {
                weight: fusion_weight,
                bias: fusion_bias,
            },
            encoder: SimpleSeqEncoder { decay_logit },
        })
    }
}
