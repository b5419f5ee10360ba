//! Train the image stream alone: a small patch transformer classifying
//! scenes by global brightness.

use tsg::data::{gen_sample, LabelRule, SyntheticSpec};
use tsg::scenegraph::{build_scene_graph, ExtractionOptions};
use tsg::train::{train_vit, Sample, TrainConfig};
use tsg::vision::{VitConfig, VitModel};

fn make_split(spec: &SyntheticSpec, split: &str, n: usize) -> tsg::Result<Vec<Sample>> {
    let opts = ExtractionOptions::default();
    (0..n)
        .map(|i| {
            let g = gen_sample(spec, split, i)?;
            Ok(Sample {
                graph: build_scene_graph(&g.map, &opts)?,
                image: g.image,
                label: g.label,
            })
        })
        .collect()
}

fn main() -> tsg::Result<()> {
    let spec = SyntheticSpec {
        height: 16,
        width: 16,
        label_rule: LabelRule::ImagePattern,
        seed: 4,
        ..Default::default()
    };
    let train = make_split(&spec, "train", 200)?;
    let test = make_split(&spec, "test", 50)?;

    let mut model = VitModel::<f32>::new(
        VitConfig {
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            num_scene_classes: 2,
        },
        1,
    )?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 5,
        batch_size: 32,
        seed: 1,
        ..Default::default()
    };
    let history = train_vit(&mut model, &train, &test, &cfg)?;
    for r in history.records.iter().filter(|r| r.split == "test") {
        println!(
            "epoch {:>2}  test loss {:.4}  test accuracy {:.3}",
            r.epoch, r.loss, r.accuracy
        );
    }
    println!(
        "final test accuracy: {:.3}",
        history.final_test_accuracy().unwrap()
    );
    Ok(())
}
