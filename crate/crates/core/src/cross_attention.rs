//! Query-swapped cross-attention between a sketch and an image, and the
//! retrieval-token distance used for ranking.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::encoder::{linear, multi_head_attention};
use crate::error::{Error, Result};
use crate::params::CrossAttnParams;
use crate::tensor::Real;
use crate::tokenizer::TokenEmbedding;

/// Which retrieval tokens a distance is measured between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// Encoder outputs; precomputable per image.
    Pre,
    /// After cross-attention; pairwise only.
    Post,
}

#[derive(Clone, Debug)]
pub struct PairScore<T> {
    pub distance: T,
    pub rt_sketch: Vec<T>,
    pub rt_image: Vec<T>,
}

/// Sketch side attends with `(Q_S, K_R, V_R)`, image side with
/// `(Q_R, K_S, V_S)`. Both sides share one pre-norm and projection set and
/// keep a residual connection; every row, the retrieval token included, is updated.
pub fn cross_attend<T: Real>(
    g: &mut Graph<T>,
    sketch: TokenEmbedding,
    image: TokenEmbedding,
    p: &CrossAttnParams<Var>,
    cfg: &ModelConfig,
) -> Result<(TokenEmbedding, TokenEmbedding)> {
    let (ws, wr) = (g.shape(sketch.tokens)[1], g.shape(image.tokens)[1]);
    if ws != wr {
        return Err(Error::dims("cross_attend", g.shape(sketch.tokens), g.shape(image.tokens)));
    }
    let ns = g.layer_norm(sketch.tokens, p.ln.gamma, p.ln.beta, cfg.ln_eps)?;
    let nr = g.layer_norm(image.tokens, p.ln.gamma, p.ln.beta, cfg.ln_eps)?;
    let (qs, ks, vs) = (linear(g, ns, &p.query)?, linear(g, ns, &p.key)?, linear(g, ns, &p.value)?);
    let (qr, kr, vr) = (linear(g, nr, &p.query)?, linear(g, nr, &p.key)?, linear(g, nr, &p.value)?);

    let (s_heads, _) = multi_head_attention(g, qs, kr, vr, cfg.cross_heads, cfg.attention_scale)?;
    let (r_heads, _) = multi_head_attention(g, qr, ks, vs, cfg.cross_heads, cfg.attention_scale)?;
    let s_out = linear(g, s_heads, &p.proj)?;
    let r_out = linear(g, r_heads, &p.proj)?;
    let s_tokens = g.add(sketch.tokens, s_out)?;
    let r_tokens = g.add(image.tokens, r_out)?;
    Ok((TokenEmbedding { tokens: s_tokens, ..sketch }, TokenEmbedding { tokens: r_tokens, ..image }))
}

/// Row 0 of a token matrix as a `1×d` node.
pub fn retrieval_token<T: Real>(g: &mut Graph<T>, e: TokenEmbedding) -> Result<Var> {
    g.select_rows(e.tokens, &[0])
}

/// `‖RT_S − RT_R‖₂` as a graph node.
pub fn rt_distance<T: Real>(g: &mut Graph<T>, sketch: TokenEmbedding, image: TokenEmbedding) -> Result<Var> {
    let a = retrieval_token(g, sketch)?;
    let b = retrieval_token(g, image)?;
    let diff = g.sub(a, b)?;
    g.norm2(diff)
}

/// Distance node for either mode.
pub fn pair_distance_var<T: Real>(
    g: &mut Graph<T>,
    sketch: TokenEmbedding,
    image: TokenEmbedding,
    p: &CrossAttnParams<Var>,
    cfg: &ModelConfig,
    mode: DistanceMode,
) -> Result<Var> {
    match mode {
        DistanceMode::Pre => rt_distance(g, sketch, image),
        DistanceMode::Post => {
            let (s, r) = cross_attend(g, sketch, image, p, cfg)?;
            rt_distance(g, s, r)
        }
    }
}

/// Scores an encoded sketch/image pair.
pub fn pair_distance<T: Real>(
    g: &mut Graph<T>,
    sketch: TokenEmbedding,
    image: TokenEmbedding,
    p: &CrossAttnParams<Var>,
    cfg: &ModelConfig,
    mode: DistanceMode,
) -> Result<PairScore<T>> {
    let (s, r) = match mode {
        DistanceMode::Pre => (sketch, image),
        DistanceMode::Post => cross_attend(g, sketch, image, p, cfg)?,
    };
    let distance = rt_distance(g, s, r)?;
    Ok(PairScore {
        distance: g.value(distance).data()[0],
        rt_sketch: g.value(s.tokens).row(0).to_vec(),
        rt_image: g.value(r.tokens).row(0).to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Bind, ModelParams};
    use crate::tensor::Tensor;
    use crate::tokenizer::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, h: usize, seed: u64) -> (ModelConfig, CrossAttnParams<Tensor<f64>>) {
        let cfg = ModelConfig { dim: d, heads: h, cross_heads: h, ..ModelConfig::toy() };
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut cross = p.cross;
        // Larger weights than the init so attention is far from uniform.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for lin in [&mut cross.query, &mut cross.key, &mut cross.value, &mut cross.proj] {
            lin.weight = Tensor::randn([d, d], 0.5, &mut rng);
        }
        (cfg, cross)
    }

    fn emb(g: &mut Graph<f64>, t: Tensor<f64>, m: Modality) -> TokenEmbedding {
        TokenEmbedding { tokens: g.constant(t), modality: m }
    }

    #[test]
    fn zero_value_projection_leaves_inputs() {
        let (cfg, mut cross) = setup(8, 2, 0);
        cross.value.weight = Tensor::zeros([8, 8]);
        cross.proj.weight = Tensor::zeros([8, 8]);
        let x = Tensor::randn([5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let p = cross.bind(&mut g, false);
        let s = emb(&mut g, x.clone(), Modality::Sketch);
        let r = emb(&mut g, x.clone(), Modality::Image);
        let (so, ro) = cross_attend(&mut g, s, r, &p, &cfg).unwrap();
        assert_eq!(g.value(so.tokens), &x);
        assert_eq!(g.value(ro.tokens), &x);
    }

    #[test]
    fn token_counts_may_differ() {
        let (cfg, cross) = setup(8, 2, 2);
        let mut g = Graph::new();
        let p = cross.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = emb(&mut g, Tensor::randn([4, 8], 1.0, &mut rng), Modality::Sketch);
        let r = emb(&mut g, Tensor::randn([9, 8], 1.0, &mut rng), Modality::Image);
        let (so, ro) = cross_attend(&mut g, s, r, &p, &cfg).unwrap();
        assert_eq!(g.shape(so.tokens), &[4, 8]);
        assert_eq!(g.shape(ro.tokens), &[9, 8]);
        let bad = emb(&mut g, Tensor::zeros([3, 6]), Modality::Image);
        assert!(matches!(cross_attend(&mut g, s, bad, &p, &cfg), Err(Error::Dimension { .. })));
    }

    #[test]
    fn swapping_arguments_swaps_outputs() {
        let (cfg, cross) = setup(8, 2, 4);
        let mut g = Graph::new();
        let p = cross.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = emb(&mut g, Tensor::randn([5, 8], 1.0, &mut rng), Modality::Sketch);
        let b = emb(&mut g, Tensor::randn([6, 8], 1.0, &mut rng), Modality::Image);
        let (a1, b1) = cross_attend(&mut g, a, b, &p, &cfg).unwrap();
        let (b2, a2) = cross_attend(&mut g, b, a, &p, &cfg).unwrap();
        assert_eq!(g.value(a1.tokens), g.value(a2.tokens));
        assert_eq!(g.value(b1.tokens), g.value(b2.tokens));
    }

    #[test]
    fn pre_distance_examples() {
        let (cfg, cross) = setup(8, 2, 6);
        let mut g = Graph::new();
        let p = cross.bind(&mut g, false);
        let x = Tensor::randn([5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let s = emb(&mut g, x.clone(), Modality::Sketch);
        let r = emb(&mut g, x, Modality::Image);
        let score = pair_distance(&mut g, s, r, &p, &cfg, DistanceMode::Pre).unwrap();
        assert_eq!(score.distance, 0.0);

        let mut a = Tensor::<f64>::zeros([3, 8]);
        a.data_mut()[0] = 3.0;
        let mut b = Tensor::<f64>::zeros([3, 8]);
        b.data_mut()[1] = 4.0;
        let s = emb(&mut g, a, Modality::Sketch);
        let r = emb(&mut g, b, Modality::Image);
        let score = pair_distance(&mut g, s, r, &p, &cfg, DistanceMode::Pre).unwrap();
        assert_eq!(score.distance, 5.0);
        let direct: f64 =
            score.rt_sketch.iter().zip(&score.rt_image).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert_eq!(direct, score.distance);
    }

    #[test]
    fn post_distance_ignores_image_token_order() {
        let (cfg, cross) = setup(8, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = Tensor::randn([5, 8], 1.0, &mut rng);
        let xr = Tensor::randn([6, 8], 1.0, &mut rng);
        let perm = [0, 4, 2, 5, 1, 3];
        let xr_perm = Tensor::from_fn([6, 8], |i| xr.at(perm[i / 8], i % 8));
        let mut g = Graph::new();
        let p = cross.bind(&mut g, false);
        let s = emb(&mut g, xs, Modality::Sketch);
        let r = emb(&mut g, xr, Modality::Image);
        let rp = emb(&mut g, xr_perm, Modality::Image);
        let d1 = pair_distance(&mut g, s, r, &p, &cfg, DistanceMode::Post).unwrap();
        let d2 = pair_distance(&mut g, s, rp, &p, &cfg, DistanceMode::Post).unwrap();
        assert!((d1.distance - d2.distance).abs() < 1e-12);
        assert!(d1.distance > 0.0);
    }
}
