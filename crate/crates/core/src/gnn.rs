//! Graph representation stream: three stacked graph layers
//! (GCN / GraphSAGE-mean / GAT), a readout, and a linear classifier head.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, concat_rows, Activation, Mask, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init_params, Binding, InitScheme, ParamStore};
use crate::scenegraph::SceneGraph;
use crate::tensor::{Scalar, Tensor2D};

pub const NUM_LAYERS: usize = 3;

/// Symmetric-normalized adjacency with self-loops:
/// D^{-1/2} (A + I) D^{-1/2}.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency<T: Scalar> {
    pub n: usize,
    pub matrix: Tensor2D<T>,
}

pub fn normalize_adjacency<T: Scalar>(
    edges: &BTreeSet<(usize, usize)>,
    n: usize,
) -> Result<NormalizedAdjacency<T>> {
    if n == 0 {
        return Err(Error::Data("cannot normalize an empty graph".into()));
    }
    let mut a = Tensor2D::<T>::identity(n);
    for &(i, j) in edges {
        if i >= n || j >= n || i == j {
            return Err(Error::Data(format!("invalid edge ({i},{j}) for {n} nodes")));
        }
        a.set(i, j, T::one());
        a.set(j, i, T::one());
    }
    let mut inv_sqrt_deg = vec![T::zero(); n];
    for i in 0..n {
        let d: T = a.row(i).iter().copied().sum();
        inv_sqrt_deg[i] = T::one() / d.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j) * inv_sqrt_deg[i] * inv_sqrt_deg[j];
            a.set(i, j, v);
        }
    }
    Ok(NormalizedAdjacency { n, matrix: a })
}

/// Row-normalized neighbor averaging matrix for GraphSAGE (self excluded,
/// isolated nodes get a zero row).
pub fn neighbor_mean_matrix<T: Scalar>(edges: &BTreeSet<(usize, usize)>, n: usize) -> Tensor2D<T> {
    let mut deg = vec![0usize; n];
    for &(i, j) in edges {
        deg[i] += 1;
        deg[j] += 1;
    }
    let mut m = Tensor2D::zeros(n, n);
    for &(i, j) in edges {
        m.set(i, j, T::one() / T::from_f64(deg[i] as f64));
        m.set(j, i, T::one() / T::from_f64(deg[j] as f64));
    }
    m
}

/// Attention neighborhood mask for GAT: neighbors, plus self when
/// `include_self`.
pub fn attention_mask(edges: &BTreeSet<(usize, usize)>, n: usize, include_self: bool) -> Mask {
    let mut mask = Mask::new(n, n, vec![false; n * n]).expect("mask shape");
    for &(i, j) in edges {
        mask.set(i, j, true);
        mask.set(j, i, true);
    }
    if include_self {
        for i in 0..n {
            mask.set(i, i, true);
        }
    }
    mask
}

/// One GCN update: sigma(normA . H . W).
pub fn gcn_layer<T: Scalar>(
    h: &Var<T>,
    norm_adj: &Var<T>,
    w: &Var<T>,
    act: Activation,
) -> Result<Var<T>> {
    norm_adj.matmul(h)?.matmul(w)?.activation(act)
}

/// One GraphSAGE-mean update: sigma(concat(h, mean_neigh(h)) . W).
/// `neighbor_mean` is the constant matrix from [`neighbor_mean_matrix`].
pub fn sage_layer<T: Scalar>(
    h: &Var<T>,
    neighbor_mean: &Var<T>,
    w: &Var<T>,
    act: Activation,
) -> Result<Var<T>> {
    let neigh = neighbor_mean.matmul(h)?;
    concat_cols(&[h.clone(), neigh])?.matmul(w)?.activation(act)
}

/// One single-head GAT update. Returns the new node features and the
/// attention matrix (rows are the softmax coefficients).
pub fn gat_layer<T: Scalar>(
    h: &Var<T>,
    mask: &Mask,
    w: &Var<T>,
    a: &Var<T>,
    leaky_slope: f64,
    act: Activation,
) -> Result<(Var<T>, Var<T>)> {
    let wh = h.matmul(w)?;
    let out_dim = wh.shape().1;
    if a.shape() != (2 * out_dim, 1) {
        return Err(Error::Evaluation(format!(
            "GAT attention vector must be {}x1, got {}x{}",
            2 * out_dim,
            a.shape().0,
            a.shape().1
        )));
    }
    let a_self = a.slice_rows(0..out_dim)?;
    let a_neigh = a.slice_rows(out_dim..2 * out_dim)?;
    let s_self = wh.matmul(&a_self)?; // n x 1
    let s_neigh = wh.matmul(&a_neigh)?; // n x 1
    // e[i][j] = leaky(s_self[i] + s_neigh[j]) via outer broadcast
    let e = s_self
        .add(&s_neigh.transpose()?)?
        .activation(Activation::LeakyRelu(leaky_slope))?;
    let alpha = e.softmax_rows(Some(mask))?;
    let out = alpha.matmul(&wh)?.activation(act)?;
    Ok((out, alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Gcn,
    Sage,
    Gat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    Sum,
    Mean,
    Max,
}

/// Per-graph readout over node-row ranges; ranges must partition the rows.
pub fn readout<T: Scalar>(
    h: &Var<T>,
    ranges: &[std::ops::Range<usize>],
    mode: ReadoutMode,
) -> Result<Var<T>> {
    if ranges.is_empty() {
        return Err(Error::Data("readout over no graphs".into()));
    }
    let mut rows = Vec::with_capacity(ranges.len());
    for range in ranges {
        if range.is_empty() {
            return Err(Error::Data("readout over an empty graph".into()));
        }
        let block = h.slice_rows(range.clone())?;
        rows.push(match mode {
            ReadoutMode::Sum => block.col_sum()?,
            ReadoutMode::Mean => block.col_mean()?,
            ReadoutMode::Max => block.col_max()?,
        });
    }
    concat_rows(&rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    pub kind: LayerKind,
    /// One-hot input width C.
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub num_scene_classes: usize,
    pub readout: ReadoutMode,
    pub leaky_slope: f64,
    /// Whether GAT attends over N(i) u {i} rather than N(i) alone.
    pub gat_include_self: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            kind: LayerKind::Gcn,
            num_classes: 8,
            hidden_dim: 64,
            num_scene_classes: 2,
            readout: ReadoutMode::Mean,
            leaky_slope: 0.2,
            gat_include_self: true,
        }
    }
}

/// Three graph layers, readout, and a linear head over named parameters.
#[derive(Clone, Debug)]
pub struct GnnModel<T: Scalar> {
    pub cfg: GnnConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> GnnModel<T> {
    pub fn new(cfg: GnnConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        for l in 0..NUM_LAYERS {
            let in_dim = if l == 0 { cfg.num_classes } else { cfg.hidden_dim };
            let w_rows = match cfg.kind {
                LayerKind::Sage => 2 * in_dim,
                _ => in_dim,
            };
            params.insert(
                format!("l{l}.w"),
                init_params(
                    w_rows,
                    cfg.hidden_dim,
                    InitScheme::XavierUniform,
                    seed.wrapping_add(l as u64),
                ),
            )?;
            if cfg.kind == LayerKind::Gat {
                params.insert(
                    format!("l{l}.a"),
                    init_params(
                        2 * cfg.hidden_dim,
                        1,
                        InitScheme::XavierUniform,
                        seed.wrapping_add(100 + l as u64),
                    ),
                )?;
            }
        }
        params.insert(
            "head.w",
            init_params(
                cfg.hidden_dim,
                cfg.num_scene_classes,
                InitScheme::XavierUniform,
                seed.wrapping_add(1000),
            ),
        )?;
        params.insert("head.b", Tensor2D::zeros(1, cfg.num_scene_classes))?;
        Ok(GnnModel { cfg, params })
    }
}

/// Forward pass output for a batch of graphs.
pub struct GnnForward<T: Scalar> {
    /// Pre-head graph embeddings, one row per graph.
    pub embeddings: Var<T>,
    /// Classifier logits, one row per graph.
    pub logits: Var<T>,
    /// GAT attention matrices per layer (empty for other kinds).
    pub attentions: Vec<Var<T>>,
}

/// Block-diagonal batch of scene graphs.
pub struct GraphBatch<T: Scalar> {
    pub features: Tensor2D<T>,
    pub edges: BTreeSet<(usize, usize)>,
    pub ranges: Vec<std::ops::Range<usize>>,
}

impl<T: Scalar> GraphBatch<T> {
    pub fn from_graphs(graphs: &[&SceneGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Data("empty graph batch".into()))?;
        let c = first.num_classes;
        let mut features = Vec::new();
        let mut edges = BTreeSet::new();
        let mut ranges = Vec::with_capacity(graphs.len());
        let mut offset = 0usize;
        for g in graphs {
            if g.num_classes != c {
                return Err(Error::Data("mixed num_classes in graph batch".into()));
            }
            if g.nodes.is_empty() {
                return Err(Error::Data("empty graph in batch".into()));
            }
            let f = g.node_features::<T>();
            features.extend_from_slice(f.data());
            for &(a, b) in &g.edges {
                edges.insert((a + offset, b + offset));
            }
            ranges.push(offset..offset + g.num_nodes());
            offset += g.num_nodes();
        }
        Ok(GraphBatch {
            features: Tensor2D::new(offset, c, features)?,
            edges,
            ranges,
        })
    }
}

/// Full pipeline: layer x3 -> readout -> linear head. Readout never mixes
/// nodes across graphs (block ranges).
pub fn gnn_forward<T: Scalar>(
    tape: &Tape<T>,
    binding: &Binding<T>,
    cfg: &GnnConfig,
    batch: &GraphBatch<T>,
) -> Result<GnnForward<T>> {
    if batch.features.cols() != cfg.num_classes {
        return Err(Error::ShapeMismatch {
            op: "gnn input",
            lhs_rows: batch.features.rows(),
            lhs_cols: batch.features.cols(),
            rhs_rows: cfg.num_classes,
            rhs_cols: cfg.hidden_dim,
        });
    }
    let n = batch.features.rows();
    let mut h = tape.constant(batch.features.clone());
    let mut attentions = Vec::new();

    let structure = match cfg.kind {
        LayerKind::Gcn => Some(tape.constant(normalize_adjacency::<T>(&batch.edges, n)?.matrix)),
        LayerKind::Sage => Some(tape.constant(neighbor_mean_matrix::<T>(&batch.edges, n))),
        LayerKind::Gat => None,
    };
    let mask = (cfg.kind == LayerKind::Gat)
        .then(|| attention_mask(&batch.edges, n, cfg.gat_include_self));

    for l in 0..NUM_LAYERS {
        // relu between layers, identity before readout
        let act = if l + 1 == NUM_LAYERS {
            Activation::Identity
        } else {
            Activation::Relu
        };
        let w = binding.var(&format!("l{l}.w"))?;
        h = match cfg.kind {
            LayerKind::Gcn => gcn_layer(&h, structure.as_ref().unwrap(), w, act)?,
            LayerKind::Sage => sage_layer(&h, structure.as_ref().unwrap(), w, act)?,
            LayerKind::Gat => {
                let a = binding.var(&format!("l{l}.a"))?;
                let (out, alpha) =
                    gat_layer(&h, mask.as_ref().unwrap(), w, a, cfg.leaky_slope, act)?;
                attentions.push(alpha);
                out
            }
        };
    }
    let embeddings = readout(&h, &batch.ranges, cfg.readout)?;
    let logits = embeddings
        .matmul(binding.var("head.w")?)?
        .add(binding.var("head.b")?)?;
    Ok(GnnForward {
        embeddings,
        logits,
        attentions,
    })
}

/// Inference logits for one scene graph.
pub fn gnn_classify<T: Scalar>(graph: &SceneGraph, model: &GnnModel<T>) -> Result<Tensor2D<T>> {
    let tape = Tape::new();
    let binding = model.params.bind(&tape);
    let batch = GraphBatch::from_graphs(&[graph])?;
    Ok(gnn_forward(&tape, &binding, &model.cfg, &batch)?.logits.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gradient_check;
    use crate::scenegraph::SceneNode;

    fn t(rows: &[Vec<f64>]) -> Tensor2D<f64> {
        Tensor2D::from_rows(rows).unwrap()
    }

    fn graph(c: usize, classes: &[u16], edges: &[(usize, usize)]) -> SceneGraph {
        SceneGraph {
            num_classes: c,
            nodes: classes
                .iter()
                .enumerate()
                .map(|(id, &class_id)| SceneNode {
                    id,
                    class_id,
                    pixel_count: 1,
                })
                .collect(),
            edges: edges.iter().copied().collect(),
        }
    }

    #[test]
    fn normalize_adjacency_hand_cases() {
        let single = normalize_adjacency::<f64>(&BTreeSet::new(), 1).unwrap();
        assert_eq!(single.matrix.data(), &[1.0]);

        let pair = normalize_adjacency::<f64>(&BTreeSet::from([(0, 1)]), 2).unwrap();
        for &v in pair.matrix.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }

        // path 0-1-2: deg+self = (2,3,2)
        let path = normalize_adjacency::<f64>(&BTreeSet::from([(0, 1), (1, 2)]), 3).unwrap();
        let m = &path.matrix;
        let s6 = 1.0 / 6.0f64.sqrt();
        assert!((m.get(1, 0) - s6).abs() < 1e-12);
        assert!((m.get(1, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.get(1, 2) - s6).abs() < 1e-12);
        // symmetry + positive diagonal
        assert!(m.max_abs_diff(&m.transpose()) < 1e-9);
        for i in 0..3 {
            assert!(m.get(i, i) > 0.0);
        }
    }

    #[test]
    fn normalize_adjacency_empty_graph_errors() {
        assert!(normalize_adjacency::<f64>(&BTreeSet::new(), 0).is_err());
    }

    #[test]
    fn gcn_layer_hand_cases() {
        let tape = Tape::new();
        // single node, X = [1,0], W = I
        let h = tape.constant(t(&[vec![1.0, 0.0]]));
        let norm = tape.constant(normalize_adjacency::<f64>(&BTreeSet::new(), 1).unwrap().matrix);
        let w = tape.constant(Tensor2D::identity(2));
        let out = gcn_layer(&h, &norm, &w, Activation::Relu).unwrap().value();
        assert_eq!(out.data(), &[1.0, 0.0]);

        // two connected nodes, X = I, W = I -> all 0.5
        let h = tape.constant(Tensor2D::identity(2));
        let norm = tape.constant(
            normalize_adjacency::<f64>(&BTreeSet::from([(0, 1)]), 2)
                .unwrap()
                .matrix,
        );
        let out = gcn_layer(&h, &norm, &w, Activation::Relu).unwrap().value();
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sage_layer_hand_cases() {
        let tape = Tape::new();
        let w = tape.constant(Tensor2D::identity(4));
        // node [1,0] with single neighbor [0,1]
        let h = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(neighbor_mean_matrix::<f64>(&BTreeSet::from([(0, 1)]), 2));
        let out = sage_layer(&h, &m, &w, Activation::Identity).unwrap().value();
        assert_eq!(out.row(0), &[1.0, 0.0, 0.0, 1.0]);

        // isolated node: zero neighbor vector
        let m = tape.constant(neighbor_mean_matrix::<f64>(&BTreeSet::new(), 2));
        let out = sage_layer(&h, &m, &w, Activation::Identity).unwrap().value();
        assert_eq!(out.row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gat_self_only_attention() {
        let tape = Tape::new();
        let h = tape.constant(t(&[vec![0.3, -0.7]]));
        let w = tape.constant(t(&[vec![1.0, 2.0], vec![0.5, -1.0]]));
        let a = tape.constant(t(&[vec![0.1], vec![0.2], vec![-0.3], vec![0.4]]));
        let mask = attention_mask(&BTreeSet::new(), 1, true);
        let (out, alpha) =
            gat_layer(&h, &mask, &w, &a, 0.2, Activation::Identity).unwrap();
        assert_eq!(alpha.value().get(0, 0), 1.0);
        let wh = h.matmul(&w).unwrap().value();
        assert!(out.value().max_abs_diff(&wh) < 1e-12);
    }

    #[test]
    fn gat_matches_straight_line_reimplementation() {
        // 3-node triangle, random params: duplicate-implementation oracle.
        let edges = BTreeSet::from([(0, 1), (0, 2), (1, 2)]);
        let h_val = t(&[vec![0.2, -0.4], vec![1.1, 0.3], vec![-0.6, 0.9]]);
        let w_val = init_params::<f64>(2, 3, InitScheme::XavierUniform, 21);
        let a_val = init_params::<f64>(6, 1, InitScheme::XavierUniform, 22);
        let slope = 0.2;

        let tape = Tape::new();
        let h = tape.constant(h_val.clone());
        let w = tape.constant(w_val.clone());
        let a = tape.constant(a_val.clone());
        let mask = attention_mask(&edges, 3, true);
        let (out, alpha) = gat_layer(&h, &mask, &w, &a, slope, Activation::Identity).unwrap();

        // independent scalar-loop reimplementation of Eqs. 5-7
        let wh = h_val.matmul(&w_val).unwrap();
        let leaky = |x: f64| if x > 0.0 { x } else { slope * x };
        let mut expect = Tensor2D::<f64>::zeros(3, 3);
        // triangle + self-inclusion: every node attends over all three
        for i in 0..3 {
            let mut exps = vec![0.0; 3];
            let mut sum = 0.0;
            for j in 0..3 {
                let mut e = 0.0;
                for k in 0..3 {
                    e += a_val.get(k, 0) * wh.get(i, k);
                    e += a_val.get(3 + k, 0) * wh.get(j, k);
                }
                exps[j] = leaky(e).exp();
                sum += exps[j];
            }
            for j in 0..3 {
                expect.set(i, j, exps[j] / sum);
            }
        }
        assert!(alpha.value().max_abs_diff(&expect) < 1e-9);
        let h_expect = expect.matmul(&wh).unwrap();
        assert!(out.value().max_abs_diff(&h_expect) < 1e-9);

        // attention rows sum to 1
        let av = alpha.value();
        for r in 0..3 {
            assert!((av.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn readout_modes() {
        let tape = Tape::new();
        let h = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let r = readout(&h, &[0..2], ReadoutMode::Sum).unwrap().value();
        assert_eq!(r.data(), &[1.0, 1.0]);
        let r = readout(&h, &[0..2], ReadoutMode::Mean).unwrap().value();
        assert_eq!(r.data(), &[0.5, 0.5]);
        let r = readout(&h, &[0..2], ReadoutMode::Max).unwrap().value();
        assert_eq!(r.data(), &[1.0, 1.0]);
        // single node: its own feature under every mode
        for mode in [ReadoutMode::Sum, ReadoutMode::Mean, ReadoutMode::Max] {
            let r = readout(&h, &[0..1], mode).unwrap().value();
            assert_eq!(r.data(), &[1.0, 0.0]);
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let cfg = GnnConfig {
            num_classes: 4,
            hidden_dim: 5,
            num_scene_classes: 3,
            ..Default::default()
        };
        let mut model = GnnModel::<f64>::new(cfg, 3).unwrap();
        let (r, c) = {
            let p = model.params.value("head.w").unwrap();
            (p.rows(), p.cols())
        };
        model.params.get_mut("head.w").unwrap().value = Tensor2D::zeros(r, c);
        let g = graph(4, &[0, 1, 2], &[(0, 1), (1, 2)]);
        let logits = gnn_classify(&g, &model).unwrap();
        assert_eq!(logits.shape(), (1, 3));
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_gradients_pass_finite_differences() {
        let g = graph(4, &[0, 1, 2, 3], &[(0, 1), (1, 2), (2, 3)]);
        for kind in [LayerKind::Gcn, LayerKind::Sage, LayerKind::Gat] {
            let cfg = GnnConfig {
                kind,
                num_classes: 4,
                hidden_dim: 3,
                num_scene_classes: 2,
                ..Default::default()
            };
            let model = GnnModel::<f64>::new(cfg.clone(), 9).unwrap();
            let mut store = model.params.clone();
            let batch = GraphBatch::from_graphs(&[&g]).unwrap();
            let err = gradient_check(
                |tape, binding| {
                    let out = gnn_forward(tape, binding, &cfg, &batch)?;
                    out.logits.mul(&out.logits)?.mean_all()
                },
                &mut store,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn permutation_equivariance_of_layers() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = graph(5, &[0, 1, 2, 3, 4], &[(0, 1), (1, 2), (2, 4), (0, 3)]);
        for kind in [LayerKind::Gcn, LayerKind::Sage, LayerKind::Gat] {
            let cfg = GnnConfig {
                kind,
                num_classes: 5,
                hidden_dim: 4,
                num_scene_classes: 2,
                ..Default::default()
            };
            let model = GnnModel::<f64>::new(cfg.clone(), 13).unwrap();
            let base = {
                let tape = Tape::new();
                let b = model.params.bind(&tape);
                let batch = GraphBatch::from_graphs(&[&g]).unwrap();
                gnn_forward(&tape, &b, &cfg, &batch).unwrap().logits.value()
            };
            for _ in 0..5 {
                let mut perm: Vec<usize> = (0..5).collect();
                perm.shuffle(&mut rng);
                let pg = SceneGraph {
                    num_classes: 5,
                    nodes: (0..5)
                        .map(|i| SceneNode {
                            id: i,
                            class_id: g.nodes[perm[i]].class_id,
                            pixel_count: 1,
                        })
                        .collect(),
                    edges: g
                        .edges
                        .iter()
                        .map(|&(a, b)| {
                            let pa = perm.iter().position(|&x| x == a).unwrap();
                            let pb = perm.iter().position(|&x| x == b).unwrap();
                            (pa.min(pb), pa.max(pb))
                        })
                        .collect(),
                };
                let tape = Tape::new();
                let b = model.params.bind(&tape);
                let batch = GraphBatch::from_graphs(&[&pg]).unwrap();
                let permuted = gnn_forward(&tape, &b, &cfg, &batch).unwrap().logits.value();
                assert!(base.max_abs_diff(&permuted) < 1e-9, "{kind:?}");
            }
        }
    }
}
