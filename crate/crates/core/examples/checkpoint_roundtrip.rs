//! Persist a trained model and reload it: the tensors round-trip
//! bit-exactly and predictions are unchanged.

use tsg::checkpoint::Checkpoint;
use tsg::gnn::{gnn_classify, GnnConfig, GnnModel};
use tsg::scenegraph::{build_scene_graph, ExtractionOptions, LabelMap};

fn main() -> tsg::Result<()> {
    let cfg = GnnConfig {
        num_classes: 3,
        hidden_dim: 8,
        num_scene_classes: 2,
        ..Default::default()
    };
    let model = GnnModel::<f32>::new(cfg.clone(), 42)?;

    let map = LabelMap::new(4, 4, 3, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 1, 1, 2, 2, 1, 1])?;
    let graph = build_scene_graph(&map, &ExtractionOptions::default())?;
    let before = gnn_classify(&graph, &model)?;

    let dir = std::env::temp_dir().join("tsg_checkpoint_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.tsck");
    let mut ckpt = Checkpoint::new(serde_json::to_string(&cfg).unwrap());
    ckpt.insert_store("gnn", &model.params)?;
    ckpt.write(&path)?;
    println!("wrote {} ({} tensors)", path.display(), ckpt.tensors.len());

    let loaded = Checkpoint::<f32>::read(&path)?;
    let restored = GnnModel {
        cfg: serde_json::from_str(&loaded.config_json).unwrap(),
        params: loaded.extract_store("gnn")?,
    };
    let after = gnn_classify(&graph, &restored)?;
    assert_eq!(
        before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
    );
    println!("reloaded logits are bit-identical: {:?}", after.data());

    // corruption is detected
    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes)?;
    let err = Checkpoint::<f32>::read(&path).unwrap_err();
    println!("after flipping one bit: {err}");
    Ok(())
}
