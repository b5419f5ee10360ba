//! Verify the reverse-mode tape against central finite differences, from a
//! single softmax up to a full three-layer graph attention classifier.

use tsg::gnn::{gnn_forward, GnnConfig, GnnModel, GraphBatch, LayerKind};
use tsg::params::{gradient_check, init_params, InitScheme, ParamStore};
use tsg::scenegraph::{build_scene_graph, ExtractionOptions, LabelMap};
use tsg::train::cross_entropy;

fn main() -> tsg::Result<()> {
    // single op: masked row softmax feeding a scalar
    let mut store = ParamStore::<f64>::new();
    store.insert("x", init_params(3, 4, InitScheme::XavierUniform, 7))?;
    let weights = init_params::<f64>(3, 4, InitScheme::XavierUniform, 8);
    let err = gradient_check(
        |tape, b| {
            let probs = b.var("x")?.softmax_rows(None)?;
            probs.mul(&tape.constant(weights.clone()))?.mean_all()
        },
        &mut store,
        1e-5,
    )?;
    println!("softmax_rows       max relative gradient error: {err:.2e}");

    // full model: 3-layer GAT classifier with cross entropy
    let map = LabelMap::new(4, 4, 3, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 1, 1, 2, 2, 1, 1])?;
    let graph = build_scene_graph(&map, &ExtractionOptions::default())?;
    let cfg = GnnConfig {
        kind: LayerKind::Gat,
        num_classes: 3,
        hidden_dim: 6,
        num_scene_classes: 2,
        ..Default::default()
    };
    let mut model = GnnModel::<f64>::new(cfg.clone(), 11)?;
    let batch = GraphBatch::from_graphs(&[&graph])?;
    let err = gradient_check(
        |tape, binding| {
            let out = gnn_forward(tape, binding, &cfg, &batch)?;
            cross_entropy(&out.logits, &[1])
        },
        &mut model.params,
        1e-5,
    )?;
    println!("3-layer GAT + CE   max relative gradient error: {err:.2e}");

    assert!(err < 1e-4, "gradient check failed");
    println!("all gradients agree with finite differences");
    Ok(())
}
