//! Two-stream fusion: cross-attention between the graph embedding and the
//! image tokens, simple combiners (concat / sum / average / product),
//! logit voting, and an optional contrastive alignment loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, concat_rows, Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::{gnn_forward, GnnConfig, GraphBatch};
use crate::params::{init_params, Binding, InitScheme, ParamStore};
use crate::raster::ImageTensor;
use crate::scenegraph::SceneGraph;
use crate::tensor::{Scalar, Tensor2D};
use crate::vision::{encode, VitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    CrossAttention,
    Concat,
    Sum,
    Average,
    Product,
    VoteSoft,
    VoteHard,
}

impl FusionMode {
    pub fn is_vote(self) -> bool {
        matches!(self, FusionMode::VoteSoft | FusionMode::VoteHard)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Graph-stream embedding width (GNN hidden_dim).
    pub graph_dim: usize,
    /// Image-stream embedding width (ViT embed_dim).
    pub image_dim: usize,
    /// Shared fused width.
    pub fused_dim: usize,
    pub num_scene_classes: usize,
    /// Hidden width of the classifier head MLP.
    pub head_hidden: usize,
    /// Cross-attention role assignment; flipping makes the image the query
    /// and the graph embedding the single key/value token.
    pub graph_is_query: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::CrossAttention,
            graph_dim: 64,
            image_dim: 64,
            fused_dim: 64,
            num_scene_classes: 2,
            head_hidden: 64,
            graph_is_query: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel<T: Scalar> {
    pub cfg: FusionConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(cfg: FusionConfig, seed: u64) -> Result<Self> {
        let f = cfg.fused_dim;
        let mut params = ParamStore::new();
        params.insert(
            "proj_g",
            init_params(cfg.graph_dim, f, InitScheme::XavierUniform, seed.wrapping_add(1)),
        )?;
        params.insert(
            "proj_v",
            init_params(cfg.image_dim, f, InitScheme::XavierUniform, seed.wrapping_add(2)),
        )?;
        for (i, name) in ["wq", "wk", "wv", "wo"].iter().enumerate() {
            params.insert(
                *name,
                init_params(f, f, InitScheme::XavierUniform, seed.wrapping_add(3 + i as u64)),
            )?;
        }
        let head_in = match cfg.mode {
            FusionMode::Concat => cfg.graph_dim + cfg.image_dim,
            _ => f,
        };
        params.insert(
            "head.w1",
            init_params(head_in, cfg.head_hidden, InitScheme::XavierUniform, seed.wrapping_add(7)),
        )?;
        params.insert("head.b1", Tensor2D::zeros(1, cfg.head_hidden))?;
        params.insert(
            "head.w2",
            init_params(
                cfg.head_hidden,
                cfg.num_scene_classes,
                InitScheme::XavierUniform,
                seed.wrapping_add(8),
            ),
        )?;
        params.insert("head.b2", Tensor2D::zeros(1, cfg.num_scene_classes))?;
        Ok(FusionModel { cfg, params })
    }
}

/// Scaled dot-product cross attention: the query vector attends over the
/// key/value tokens; a residual on the query is added to the projected
/// context. Returns (fused vector, attention weights).
pub fn cross_attention_fuse<T: Scalar>(
    query: &Var<T>,
    kv_tokens: &Var<T>,
    binding: &Binding<T>,
    fused_dim: usize,
) -> Result<(Var<T>, Var<T>)> {
    let (qr, qc) = query.shape();
    let (kr, kc) = kv_tokens.shape();
    if kr == 0 {
        return Err(Error::Data("cross attention over no kv tokens".into()));
    }
    if qc != fused_dim || kc != fused_dim || qr != 1 {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            lhs_rows: qr,
            lhs_cols: qc,
            rhs_rows: kr,
            rhs_cols: kc,
        });
    }
    let q = query.matmul(binding.var("wq")?)?;
    let k = kv_tokens.matmul(binding.var("wk")?)?;
    let v = kv_tokens.matmul(binding.var("wv")?)?;
    let scale = T::one() / T::from_f64((fused_dim as f64).sqrt());
    let scores = q.matmul(&k.transpose()?)?.scale(scale)?;
    let weights = scores.softmax_rows(None)?;
    let context = weights.matmul(&v)?;
    let fused = context.matmul(binding.var("wo")?)?.add(query)?;
    Ok((fused, weights))
}

/// Elementwise combiners over equal-width vectors; concat needs no
/// dimension agreement.
pub fn simple_fuse<T: Scalar>(g: &Var<T>, v: &Var<T>, mode: FusionMode) -> Result<Var<T>> {
    if mode != FusionMode::Concat && g.shape() != v.shape() {
        let (gr, gc) = g.shape();
        let (vr, vc) = v.shape();
        return Err(Error::ShapeMismatch {
            op: "simple_fuse",
            lhs_rows: gr,
            lhs_cols: gc,
            rhs_rows: vr,
            rhs_cols: vc,
        });
    }
    match mode {
        FusionMode::Concat => concat_cols(&[g.clone(), v.clone()]),
        FusionMode::Sum => g.add(v),
        FusionMode::Average => g.add(v)?.scale(T::from_f64(0.5)),
        FusionMode::Product => g.mul(v),
        other => Err(Error::Config(format!(
            "simple_fuse does not handle mode {other:?}"
        ))),
    }
}

fn softmax_slice<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Logit-level voting. Soft: average of the two stream softmax
/// distributions (returned alongside its argmax). Hard: agreed argmax, or
/// the more confident stream's argmax; ties break to the lower class.
pub fn vote_fuse<T: Scalar>(
    logits_g: &[T],
    logits_v: &[T],
    mode: FusionMode,
) -> Result<(usize, Option<Vec<T>>)> {
    if logits_g.len() != logits_v.len() {
        return Err(Error::ShapeMismatch {
            op: "vote_fuse",
            lhs_rows: 1,
            lhs_cols: logits_g.len(),
            rhs_rows: 1,
            rhs_cols: logits_v.len(),
        });
    }
    let pg = softmax_slice(logits_g);
    let pv = softmax_slice(logits_v);
    match mode {
        FusionMode::VoteSoft => {
            let combined: Vec<T> = pg
                .iter()
                .zip(&pv)
                .map(|(&a, &b)| (a + b) * T::from_f64(0.5))
                .collect();
            Ok((argmax(&combined), Some(combined)))
        }
        FusionMode::VoteHard => {
            let (ag, av) = (argmax(&pg), argmax(&pv));
            let winner = if ag == av {
                ag
            } else if pv[av] > pg[ag] {
                av
            } else if pg[ag] > pv[av] {
                ag
            } else {
                ag.min(av)
            };
            Ok((winner, None))
        }
        other => Err(Error::Config(format!(
            "vote_fuse does not handle mode {other:?}"
        ))),
    }
}

/// Differentiable fused pipeline output.
pub struct FusedForward<T: Scalar> {
    pub logits: Var<T>,
    /// Cross-attention weights when that mode is active.
    pub attention: Option<Var<T>>,
}

/// Two-stream forward: graph embedding (pre-head) + image encoding, fused
/// per mode, then the fusion head. Vote modes are inference-only and
/// combine the per-stream head logits instead (see [`fused_classify`]).
pub fn fused_forward<T: Scalar>(
    tape: &Tape<T>,
    gnn_cfg: &GnnConfig,
    gnn_binding: &Binding<T>,
    vit_cfg: &VitConfig,
    vit_binding: &Binding<T>,
    fusion_cfg: &FusionConfig,
    fusion_binding: &Binding<T>,
    graphs: &[&SceneGraph],
    images: &[&ImageTensor],
) -> Result<FusedForward<T>> {
    if graphs.len() != images.len() || graphs.is_empty() {
        return Err(Error::Data("mismatched or empty fusion batch".into()));
    }
    if fusion_cfg.mode.is_vote() {
        return Err(Error::Config(
            "vote fusion has no trainable forward; use fused_classify".into(),
        ));
    }
    let batch = GraphBatch::from_graphs(graphs)?;
    let g_out = gnn_forward(tape, gnn_binding, gnn_cfg, &batch)?;

    let mut fused_rows = Vec::with_capacity(graphs.len());
    let mut attention = None;
    for (i, img) in images.iter().enumerate() {
        let g_emb = g_out.embeddings.slice_rows(i..i + 1)?;
        let v_out = encode(tape, vit_binding, vit_cfg, img)?;
        let fused = match fusion_cfg.mode {
            FusionMode::CrossAttention => {
                let g_proj = g_emb.matmul(fusion_binding.var("proj_g")?)?;
                let tokens_proj = v_out.tokens.matmul(fusion_binding.var("proj_v")?)?;
                let (fused, weights) = if fusion_cfg.graph_is_query {
                    cross_attention_fuse(&g_proj, &tokens_proj, fusion_binding, fusion_cfg.fused_dim)?
                } else {
                    let cls_proj = v_out.cls.matmul(fusion_binding.var("proj_v")?)?;
                    cross_attention_fuse(&cls_proj, &g_proj, fusion_binding, fusion_cfg.fused_dim)?
                };
                attention = Some(weights);
                fused
            }
            FusionMode::Concat => simple_fuse(&g_emb, &v_out.cls, FusionMode::Concat)?,
            mode => {
                let g_proj = g_emb.matmul(fusion_binding.var("proj_g")?)?;
                let v_proj = v_out.cls.matmul(fusion_binding.var("proj_v")?)?;
                simple_fuse(&g_proj, &v_proj, mode)?
            }
        };
        fused_rows.push(fused);
    }
    let fused = concat_rows(&fused_rows)?;
    let logits = fused
        .matmul(fusion_binding.var("head.w1")?)?
        .add(fusion_binding.var("head.b1")?)?
        .activation(Activation::Relu)?
        .matmul(fusion_binding.var("head.w2")?)?
        .add(fusion_binding.var("head.b2")?)?;
    Ok(FusedForward { logits, attention })
}

/// End-to-end inference for one (label map graph, image) pair. Vote modes
/// combine the two stream heads; the other modes run the fusion head.
pub fn fused_classify<T: Scalar>(
    graph: &SceneGraph,
    image: &ImageTensor,
    gnn_model: &crate::gnn::GnnModel<T>,
    vit_model: &crate::vision::VitModel<T>,
    fusion_model: &FusionModel<T>,
) -> Result<Tensor2D<T>> {
    if fusion_model.cfg.mode.is_vote() {
        let lg = crate::gnn::gnn_classify(graph, gnn_model)?;
        let lv = crate::vision::vit_classify(image, vit_model)?;
        let (winner, dist) = vote_fuse(lg.data(), lv.data(), fusion_model.cfg.mode)?;
        return match dist {
            Some(d) => Tensor2D::new(1, d.len(), d),
            None => {
                let mut scores = Tensor2D::zeros(1, lg.cols());
                scores.set(0, winner, T::one());
                Ok(scores)
            }
        };
    }
    let tape = Tape::new();
    let gb = gnn_model.params.bind(&tape);
    let vb = vit_model.params.bind(&tape);
    let fb = fusion_model.params.bind(&tape);
    let out = fused_forward(
        &tape,
        &gnn_model.cfg,
        &gb,
        &vit_model.cfg,
        &vb,
        &fusion_model.cfg,
        &fb,
        &[graph],
        &[image],
    )?;
    Ok(out.logits.value())
}

/// Symmetric InfoNCE over L2-normalized embedding batches: matched rows
/// are the positive pairs, everything else in the batch is negative.
pub fn info_nce_loss<T: Scalar>(
    graph_embs: &Var<T>,
    image_embs: &Var<T>,
    temperature: f64,
) -> Result<Var<T>> {
    let (bg, dg) = graph_embs.shape();
    let (bv, dv) = image_embs.shape();
    if bg != bv || dg != dv {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs_rows: bg,
            lhs_cols: dg,
            rhs_rows: bv,
            rhs_cols: dv,
        });
    }
    if bg < 2 {
        return Err(Error::Data("InfoNCE needs a batch of at least 2".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("InfoNCE temperature must be > 0".into()));
    }
    let normalize = |x: &Var<T>| -> Result<Var<T>> {
        let norms = x.mul(x)?.row_sum()?.add_scalar(T::from_f64(1e-12))?.sqrt()?;
        x.div(&norms)
    };
    let g = normalize(graph_embs)?;
    let v = normalize(image_embs)?;
    let sim = g
        .matmul(&v.transpose()?)?
        .scale(T::one() / T::from_f64(temperature))?;
    let diag: Vec<usize> = (0..bg).collect();
    let dir = |s: &Var<T>| -> Result<Var<T>> {
        s.logsumexp_rows()?.sub(&s.gather_cols(&diag)?)?.mean_all()
    };
    let g2v = dir(&sim)?;
    let v2g = dir(&sim.transpose()?)?;
    g2v.add(&v2g)?.scale(T::from_f64(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gradient_check;

    fn t(rows: &[Vec<f64>]) -> Tensor2D<f64> {
        Tensor2D::from_rows(rows).unwrap()
    }

    fn fusion_store(f: usize, seed: u64) -> ParamStore<f64> {
        FusionModel::<f64>::new(
            FusionConfig {
                graph_dim: f,
                image_dim: f,
                fused_dim: f,
                head_hidden: f,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
        .params
    }

    #[test]
    fn single_kv_token_weight_is_one() {
        let store = fusion_store(3, 1);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let q = tape.constant(t(&[vec![0.4, -0.2, 0.9]]));
        let kv = tape.constant(t(&[vec![1.0, 0.5, -0.3]]));
        let (fused, weights) = cross_attention_fuse(&q, &kv, &b, 3).unwrap();
        assert_eq!(weights.value().get(0, 0), 1.0);
        // output = outproj(W_v k) + q
        let expect = kv
            .matmul(b.var("wv").unwrap())
            .unwrap()
            .matmul(b.var("wo").unwrap())
            .unwrap()
            .add(&q)
            .unwrap()
            .value();
        assert!(fused.value().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn identical_kv_tokens_split_weight_evenly() {
        let store = fusion_store(3, 2);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let q = tape.constant(t(&[vec![0.4, -0.2, 0.9]]));
        let kv = tape.constant(t(&[vec![1.0, 0.5, -0.3], vec![1.0, 0.5, -0.3]]));
        let (_, weights) = cross_attention_fuse(&q, &kv, &b, 3).unwrap();
        let w = weights.value();
        assert!((w.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((w.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_matches_hand_oracle_and_gradients() {
        // 3-token case with hand-set small params.
        let f = 2;
        let mut store = ParamStore::<f64>::new();
        for name in ["wq", "wk", "wv", "wo"] {
            store
                .insert(name, init_params(f, f, InitScheme::XavierUniform, 77))
                .unwrap();
        }
        let q_val = t(&[vec![0.3, -0.5]]);
        let kv_val = t(&[vec![0.2, 0.1], vec![-0.4, 0.9], vec![0.7, 0.0]]);

        // straight-line oracle
        let wq = store.value("wq").unwrap().clone();
        let wk = store.value("wk").unwrap().clone();
        let wv = store.value("wv").unwrap().clone();
        let wo = store.value("wo").unwrap().clone();
        let qp = q_val.matmul(&wq).unwrap();
        let kp = kv_val.matmul(&wk).unwrap();
        let vp = kv_val.matmul(&wv).unwrap();
        let scale = 1.0 / (f as f64).sqrt();
        let scores: Vec<f64> = (0..3)
            .map(|i| (0..f).map(|d| qp.get(0, d) * kp.get(i, d)).sum::<f64>() * scale)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut ctx = vec![0.0; f];
        for i in 0..3 {
            for d in 0..f {
                ctx[d] += exps[i] / z * vp.get(i, d);
            }
        }
        let mut expect = vec![0.0; f];
        for d in 0..f {
            for e in 0..f {
                expect[d] += ctx[e] * wo.get(e, d);
            }
            expect[d] += q_val.get(0, d);
        }

        let tape = Tape::new();
        let b = store.bind(&tape);
        let q = tape.constant(q_val.clone());
        let kv = tape.constant(kv_val.clone());
        let (fused, _) = cross_attention_fuse(&q, &kv, &b, f).unwrap();
        let fv = fused.value();
        for d in 0..f {
            assert!((fv.get(0, d) - expect[d]).abs() < 1e-9);
        }

        let err = gradient_check(
            |tape, b| {
                let q = tape.constant(q_val.clone());
                let kv = tape.constant(kv_val.clone());
                let (fused, _) = cross_attention_fuse(&q, &kv, b, f)?;
                fused.mul(&fused)?.mean_all()
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn simple_fuse_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[vec![1.0, 2.0]]));
        let b = tape.constant(t(&[vec![3.0, 4.0]]));
        assert_eq!(
            simple_fuse(&a, &b, FusionMode::Sum).unwrap().value().data(),
            &[4.0, 6.0]
        );
        let ones = tape.constant(t(&[vec![1.0, 1.0]]));
        assert_eq!(
            simple_fuse(&a, &ones, FusionMode::Product).unwrap().value(),
            a.value()
        );
        let x = tape.constant(t(&[vec![1.0]]));
        let y = tape.constant(t(&[vec![2.0, 3.0]]));
        assert_eq!(
            simple_fuse(&x, &y, FusionMode::Concat).unwrap().value().data(),
            &[1.0, 2.0, 3.0]
        );
        assert_eq!(
            simple_fuse(&a, &b, FusionMode::Average).unwrap().value().data(),
            &[2.0, 3.0]
        );
        // sum of mismatched widths without projection is an error
        assert!(simple_fuse(&x, &y, FusionMode::Sum).is_err());
    }

    #[test]
    fn vote_fuse_examples() {
        // identical logits: same argmax as either stream
        let (w, _) = vote_fuse(&[0.1, 2.0], &[0.1, 2.0], FusionMode::VoteHard).unwrap();
        assert_eq!(w, 1);
        // agree on argmax, disagree elsewhere
        let (w, _) = vote_fuse(&[3.0, 1.0, 0.0], &[5.0, 0.0, 4.9], FusionMode::VoteHard).unwrap();
        assert_eq!(w, 0);
        // soft voting oracle: g=[2,0], v=[0,1]
        let pg = softmax_slice(&[2.0f64, 0.0]);
        let pv = softmax_slice(&[0.0f64, 1.0]);
        let combined: Vec<f64> = pg.iter().zip(&pv).map(|(a, b)| (a + b) / 2.0).collect();
        let (w, dist) = vote_fuse(&[2.0, 0.0], &[0.0, 1.0], FusionMode::VoteSoft).unwrap();
        assert_eq!(w, 0);
        assert_eq!(dist.unwrap(), combined);
        // length mismatch
        assert!(vote_fuse(&[1.0], &[1.0, 2.0], FusionMode::VoteSoft).is_err());
    }

    #[test]
    fn soft_vote_invariant_to_logit_shift() {
        let (a, _) = vote_fuse(&[1.0, 3.0, 0.5], &[0.2, 0.1, 2.0], FusionMode::VoteSoft).unwrap();
        let (b, _) =
            vote_fuse(&[11.0, 13.0, 10.5], &[7.2, 7.1, 9.0], FusionMode::VoteSoft).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn info_nce_closed_form_and_invariances() {
        let tape = Tape::<f64>::new();
        let tau = 0.07;
        // identical orthogonal pairs: similarity I/tau
        let g = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let loss = info_nce_loss(&g, &g, tau).unwrap().value().get(0, 0);
        let expect = (1.0 + (-1.0 / tau).exp()).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");

        // permutation invariance of the batch
        let ge = tape.constant(t(&[vec![0.3, 0.8], vec![-0.5, 0.2], vec![0.9, -0.1]]));
        let ve = tape.constant(t(&[vec![0.1, 0.7], vec![-0.6, 0.4], vec![0.8, 0.3]]));
        let base = info_nce_loss(&ge, &ve, tau).unwrap().value().get(0, 0);
        let gp = tape.constant(t(&[vec![0.9, -0.1], vec![0.3, 0.8], vec![-0.5, 0.2]]));
        let vp = tape.constant(t(&[vec![0.8, 0.3], vec![0.1, 0.7], vec![-0.6, 0.4]]));
        let permuted = info_nce_loss(&gp, &vp, tau).unwrap().value().get(0, 0);
        assert!((base - permuted).abs() < 1e-9);
        assert!(base >= 0.0);

        // all-identical embeddings: ln B
        let same = tape.constant(t(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]));
        let loss = info_nce_loss(&same, &same, 1.0).unwrap().value().get(0, 0);
        assert!((loss - 3.0f64.ln()).abs() < 1e-9);

        // batch of 1 is rejected
        let one = tape.constant(t(&[vec![1.0, 0.0]]));
        assert!(info_nce_loss(&one, &one, tau).is_err());
    }
}
