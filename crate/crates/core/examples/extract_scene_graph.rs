//! Turn a semantic label map into a scene graph: regions become nodes,
//! touching regions become edges.

use tsg::scenegraph::{
    build_scene_graph, extract_regions, graph_to_json, Connectivity, ExtractionOptions, LabelMap,
    NodeMode,
};

fn main() -> tsg::Result<()> {
    // a 6x8 map: sky band over a tree next to grass
    #[rustfmt::skip]
    let pixels: Vec<u16> = vec![
        0, 0, 0, 0, 0, 0, 0, 0,
        0, 0, 0, 0, 0, 0, 0, 0,
        1, 1, 1, 0, 0, 0, 0, 0,
        1, 1, 1, 2, 2, 2, 2, 2,
        1, 1, 1, 2, 2, 2, 2, 2,
        2, 2, 2, 2, 2, 2, 2, 2,
    ];
    let map = LabelMap::new(6, 8, 3, pixels)?;

    let opts = ExtractionOptions::default();
    let regions = extract_regions(&map, &opts);
    println!("regions (4-connectivity, one node per connected component):");
    for r in &regions {
        println!(
            "  region {} class {} covers {} pixels",
            r.id, r.class_id, r.pixel_count
        );
    }

    let graph = build_scene_graph(&map, &opts)?;
    println!("\nscene graph as JSON:\n{}", graph_to_json(&graph));

    // 8-connectivity merges regions that touch only diagonally
    let eight = ExtractionOptions {
        connectivity: Connectivity::Eight,
        ..opts
    };
    let graph8 = build_scene_graph(&map, &eight)?;
    println!(
        "\n4-conn: {} nodes / {} edges; 8-conn: {} nodes / {} edges",
        graph.num_nodes(),
        graph.edges.len(),
        graph8.num_nodes(),
        graph8.edges.len()
    );

    // class mode collapses all same-class regions into one node
    let class_mode = ExtractionOptions {
        node_mode: NodeMode::Class,
        ..opts
    };
    let class_graph = build_scene_graph(&map, &class_mode)?;
    println!(
        "class mode: {} nodes / {} edges",
        class_graph.num_nodes(),
        class_graph.edges.len()
    );
    Ok(())
}
