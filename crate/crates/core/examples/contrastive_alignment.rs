//! Optional contrastive alignment: pull matched graph/image embedding
//! pairs together with a symmetric InfoNCE loss and watch retrieval
//! accuracy rise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsg::autodiff::Tape;
use tsg::fusion::info_nce_loss;
use tsg::params::{backward, init_params, InitScheme, ParamStore};
use tsg::tensor::Tensor2D;
use tsg::train::{Optimizer, OptimizerKind};

fn main() -> tsg::Result<()> {
    // Toy setup: each "scene" is a latent code; the two modalities see
    // different fixed random views of it. Two linear projectors are trained
    // so matched pairs align.
    let (batch, latent, dim) = (16, 6, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rand_t = |r: usize, c: usize| {
        Tensor2D::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let codes = rand_t(batch, latent);
    let view_g = rand_t(latent, dim);
    let view_v = rand_t(latent, dim);
    let graph_obs = codes.matmul(&view_g)?;
    let image_obs = codes.matmul(&view_v)?;

    let mut store = ParamStore::<f64>::new();
    store.insert("proj_g", init_params(dim, dim, InitScheme::XavierUniform, 2))?;
    store.insert("proj_v", init_params(dim, dim, InitScheme::XavierUniform, 3))?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.0)?;

    for step in 0..200 {
        let tape = Tape::new();
        let b = store.bind(&tape);
        let g = tape.constant(graph_obs.clone()).matmul(b.var("proj_g")?)?;
        let v = tape.constant(image_obs.clone()).matmul(b.var("proj_v")?)?;
        let loss = info_nce_loss(&g, &v, 0.1)?;
        if step % 50 == 0 {
            // retrieval check: does each graph row's nearest image row match?
            let (gv, vv) = (g.value(), v.value());
            let hits = (0..batch)
                .filter(|&i| {
                    let sim = |a: &[f64], b: &[f64]| -> f64 {
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        dot / (na * nb)
                    };
                    (0..batch).all(|j| j == i || sim(gv.row(i), vv.row(i)) > sim(gv.row(i), vv.row(j)))
                })
                .count();
            println!(
                "step {step:>3}  InfoNCE loss {:.4}  retrieval {hits}/{batch}",
                loss.value().get(0, 0)
            );
        }
        backward(&loss, &mut store, &b)?;
        opt.step(&mut store);
    }
    Ok(())
}
