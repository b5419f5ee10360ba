//! Image feature stream: a small patch-transformer encoder with a learned
//! cls token. The final cls row is the image embedding; a linear head
//! turns it into scene logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, concat_rows, layer_norm, Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init_params, Binding, InitScheme, ParamStore};
use crate::raster::{patchify, ImageTensor};
use crate::tensor::{Scalar, Tensor2D};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub num_scene_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_height: 32,
            image_width: 32,
            channels: 1,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            num_scene_classes: 2,
        }
    }
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VitModel<T: Scalar> {
    pub cfg: VitConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> VitModel<T> {
    pub fn new(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let token_len = cfg.patch_size * cfg.patch_size * cfg.channels;
        let mut params = ParamStore::new();
        let mut s = seed;
        let mut next_seed = || {
            s = s.wrapping_add(1);
            s
        };
        params.insert(
            "patch.w",
            init_params(token_len, d, InitScheme::XavierUniform, next_seed()),
        )?;
        params.insert("patch.b", Tensor2D::zeros(1, d))?;
        params.insert(
            "pos",
            init_params(cfg.num_patches() + 1, d, InitScheme::XavierUniform, next_seed()),
        )?;
        params.insert(
            "cls",
            init_params(1, d, InitScheme::XavierUniform, next_seed()),
        )?;
        for blk in 0..cfg.depth {
            let p = |name: &str| format!("blk{blk}.{name}");
            params.insert(p("ln1.g"), Tensor2D::full(1, d, T::one()))?;
            params.insert(p("ln1.b"), Tensor2D::zeros(1, d))?;
            for proj in ["wq", "wk", "wv", "wo"] {
                params.insert(
                    p(&format!("attn.{proj}")),
                    init_params(d, d, InitScheme::XavierUniform, next_seed()),
                )?;
            }
            params.insert(p("ln2.g"), Tensor2D::full(1, d, T::one()))?;
            params.insert(p("ln2.b"), Tensor2D::zeros(1, d))?;
            params.insert(
                p("mlp.w1"),
                init_params(d, 4 * d, InitScheme::XavierUniform, next_seed()),
            )?;
            params.insert(p("mlp.b1"), Tensor2D::zeros(1, 4 * d))?;
            params.insert(
                p("mlp.w2"),
                init_params(4 * d, d, InitScheme::XavierUniform, next_seed()),
            )?;
            params.insert(p("mlp.b2"), Tensor2D::zeros(1, d))?;
        }
        params.insert(
            "head.w",
            init_params(d, cfg.num_scene_classes, InitScheme::XavierUniform, next_seed()),
        )?;
        params.insert("head.b", Tensor2D::zeros(1, cfg.num_scene_classes))?;
        Ok(VitModel { cfg, params })
    }
}

/// Multi-head self-attention over tokens. Returns the mixed tokens and
/// each head's row-stochastic attention matrix.
fn self_attention<T: Scalar>(
    x: &Var<T>,
    binding: &Binding<T>,
    blk: usize,
    cfg: &VitConfig,
) -> Result<(Var<T>, Vec<Var<T>>)> {
    let d = cfg.embed_dim;
    let dh = d / cfg.num_heads;
    let p = |name: &str| format!("blk{blk}.attn.{name}");
    let q = x.matmul(binding.var(&p("wq"))?)?;
    let k = x.matmul(binding.var(&p("wk"))?)?;
    let v = x.matmul(binding.var(&p("wv"))?)?;
    let scale = T::one() / T::from_f64((dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut attentions = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice_cols(cols.clone())?;
        let kh = k.slice_cols(cols.clone())?;
        let vh = v.slice_cols(cols)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
        let alpha = scores.softmax_rows(None)?;
        heads.push(alpha.matmul(&vh)?);
        attentions.push(alpha);
    }
    let mixed = concat_cols(&heads)?.matmul(binding.var(&p("wo"))?)?;
    Ok((mixed, attentions))
}

/// Encoder output: the cls embedding, all token rows, and per-block
/// per-head attention matrices.
pub struct VitEncodeOutput<T: Scalar> {
    pub cls: Var<T>,
    pub tokens: Var<T>,
    pub attentions: Vec<Vec<Var<T>>>,
}

/// patchify -> linear embed -> prepend cls -> add positional embeddings ->
/// depth x (pre-norm attention + MLP, both residual).
pub fn encode<T: Scalar>(
    tape: &Tape<T>,
    binding: &Binding<T>,
    cfg: &VitConfig,
    img: &ImageTensor,
) -> Result<VitEncodeOutput<T>> {
    if img.height() != cfg.image_height
        || img.width() != cfg.image_width
        || img.channels() != cfg.channels
    {
        return Err(Error::Data(format!(
            "image {}x{}x{} does not match model input {}x{}x{}",
            img.height(),
            img.width(),
            img.channels(),
            cfg.image_height,
            cfg.image_width,
            cfg.channels
        )));
    }
    let patches = tape.constant(patchify::<T>(img, cfg.patch_size)?);
    let embedded = patches
        .matmul(binding.var("patch.w")?)?
        .add(binding.var("patch.b")?)?;
    let with_cls = concat_rows(&[binding.var("cls")?.clone(), embedded])?;
    let mut x = with_cls.add(binding.var("pos")?)?;
    let eps = T::from_f64(1e-6);
    let mut attentions = Vec::with_capacity(cfg.depth);
    for blk in 0..cfg.depth {
        let p = |name: &str| format!("blk{blk}.{name}");
        let normed = layer_norm(
            &x,
            binding.var(&p("ln1.g"))?,
            binding.var(&p("ln1.b"))?,
            eps,
        )?;
        let (attn_out, alphas) = self_attention(&normed, binding, blk, cfg)?;
        attentions.push(alphas);
        x = x.add(&attn_out)?;
        let normed = layer_norm(
            &x,
            binding.var(&p("ln2.g"))?,
            binding.var(&p("ln2.b"))?,
            eps,
        )?;
        let mlp = normed
            .matmul(binding.var(&p("mlp.w1"))?)?
            .add(binding.var(&p("mlp.b1"))?)?
            .activation(Activation::Relu)?
            .matmul(binding.var(&p("mlp.w2"))?)?
            .add(binding.var(&p("mlp.b2"))?)?;
        x = x.add(&mlp)?;
    }
    let cls = x.slice_rows(0..1)?;
    Ok(VitEncodeOutput {
        cls,
        tokens: x,
        attentions,
    })
}

/// Classification logits from the cls embedding, on an existing tape.
pub fn classify_on_tape<T: Scalar>(
    tape: &Tape<T>,
    binding: &Binding<T>,
    cfg: &VitConfig,
    img: &ImageTensor,
) -> Result<Var<T>> {
    let out = encode(tape, binding, cfg, img)?;
    out.cls
        .matmul(binding.var("head.w")?)?
        .add(binding.var("head.b")?)
}

/// Inference logits for one image.
pub fn vit_classify<T: Scalar>(img: &ImageTensor, model: &VitModel<T>) -> Result<Tensor2D<T>> {
    let tape = Tape::new();
    let binding = model.params.bind(&tape);
    Ok(classify_on_tape(&tape, &binding, &model.cfg, img)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gradient_check;
    use rand::{Rng, SeedableRng};

    fn toy_cfg() -> VitConfig {
        VitConfig {
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            num_scene_classes: 3,
        }
    }

    fn random_image(cfg: &VitConfig, seed: u64) -> ImageTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_height * cfg.image_width * cfg.channels;
        ImageTensor::new(
            cfg.image_height,
            cfg.image_width,
            cfg.channels,
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn depth_zero_encode_is_embedding_plus_pos() {
        let cfg = VitConfig {
            depth: 0,
            ..toy_cfg()
        };
        let model = VitModel::<f64>::new(cfg.clone(), 1).unwrap();
        let img = random_image(&cfg, 2);
        let tape = Tape::new();
        let binding = model.params.bind(&tape);
        let out = encode(&tape, &binding, &cfg, &img).unwrap();
        let cls = model.params.value("cls").unwrap();
        let pos = model.params.value("pos").unwrap();
        let mut expect = Tensor2D::<f64>::zeros(1, cfg.embed_dim);
        for c in 0..cfg.embed_dim {
            expect.set(0, c, cls.get(0, c) + pos.get(0, c));
        }
        assert!(out.cls.value().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = toy_cfg();
        let model = VitModel::<f64>::new(cfg.clone(), 3).unwrap();
        let img = random_image(&cfg, 4);
        let tape = Tape::new();
        let binding = model.params.bind(&tape);
        let out = encode(&tape, &binding, &cfg, &img).unwrap();
        assert_eq!(out.attentions.len(), cfg.depth);
        for block in &out.attentions {
            assert_eq!(block.len(), cfg.num_heads);
            for alpha in block {
                let v = alpha.value();
                for r in 0..v.rows() {
                    assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn residual_identity_with_zeroed_output_projections() {
        let cfg = toy_cfg();
        let mut model = VitModel::<f64>::new(cfg.clone(), 5).unwrap();
        let d = cfg.embed_dim;
        for blk in 0..cfg.depth {
            model.params.get_mut(&format!("blk{blk}.attn.wo")).unwrap().value =
                Tensor2D::zeros(d, d);
            model.params.get_mut(&format!("blk{blk}.mlp.w2")).unwrap().value =
                Tensor2D::zeros(4 * d, d);
        }
        let img = random_image(&cfg, 6);
        let tape = Tape::new();
        let binding = model.params.bind(&tape);
        let deep = encode(&tape, &binding, &cfg, &img).unwrap();

        let shallow_cfg = VitConfig { depth: 0, ..cfg };
        // same embedding params, no blocks
        let tape2 = Tape::new();
        let binding2 = model.params.bind(&tape2);
        let shallow = encode(&tape2, &binding2, &shallow_cfg, &img).unwrap();
        assert!(deep.tokens.value().max_abs_diff(&shallow.tokens.value()) < 1e-12);
    }

    #[test]
    fn zero_head_gives_zero_logits_of_right_length() {
        let cfg = toy_cfg();
        let mut model = VitModel::<f64>::new(cfg.clone(), 7).unwrap();
        model.params.get_mut("head.w").unwrap().value =
            Tensor2D::zeros(cfg.embed_dim, cfg.num_scene_classes);
        let img = random_image(&cfg, 8);
        let logits = vit_classify(&img, &model).unwrap();
        assert_eq!(logits.shape(), (1, cfg.num_scene_classes));
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let cfg = toy_cfg();
        let img = random_image(&cfg, 9);
        let a = vit_classify(&img, &VitModel::<f64>::new(cfg.clone(), 11).unwrap()).unwrap();
        let b = vit_classify(&img, &VitModel::<f64>::new(cfg, 11).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_gradient_check_two_block_model() {
        let cfg = toy_cfg();
        let model = VitModel::<f64>::new(cfg.clone(), 13).unwrap();
        let img = random_image(&cfg, 14);
        let mut store = model.params.clone();
        let err = gradient_check(
            |tape, binding| {
                let logits = classify_on_tape(tape, binding, &cfg, &img)?;
                logits.mul(&logits)?.mean_all()
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
