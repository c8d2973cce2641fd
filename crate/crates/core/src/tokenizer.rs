//! Raster preprocessing and visual tokenization.
//!
//! Sketches go through a multi-level stack of strided convolutions, images
//! through a single patch convolution; both emit the same `n×d` token grid,
//! to which the retrieval token and positional embeddings are added.

use image::{DynamicImage, GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::TokenizerParams;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sketch,
    Image,
}

/// `(n+1)×d` token matrix in a graph; row 0 is the retrieval token.
#[derive(Clone, Copy, Debug)]
pub struct TokenEmbedding {
    pub tokens: Var,
    pub modality: Modality,
}

impl TokenEmbedding {
    pub fn rows<T: Real>(&self, g: &Graph<T>) -> usize {
        g.shape(self.tokens)[0]
    }
}

/// Pixels whose luminance rounds to this value or above count as sketch
/// background. Comparing the rounded luminance makes preprocessing a fixed
/// point of its own 8-bit rendering.
pub const WHITE_THRESHOLD: f32 = 250.0;

pub fn decode_raster(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::Input(format!("undecodable image: {e}")))
}

/// Planar `[3×H×W]` channels in 0..=255.
fn planar_rgb(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32;
        }
    }
    out
}

/// Bilinear resampling of planar channels with half-pixel centers.
pub fn resize_bilinear(src: &[f32], channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let (sy, sx) = (h as f32 / oh as f32, w as f32 / ow as f32);
    let axis = |o: usize, scale: f32, len: usize| {
        let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f32)
    };
    let mut out = vec![0.0; channels * oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, sy, h);
        for x in 0..ow {
            let (x0, x1, fx) = axis(x, sx, w);
            for c in 0..channels {
                let p = &src[c * h * w..(c + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[(c * oh + y) * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Grayscale stroke map `[1×size×size]`: white background removed, strokes
/// inverted so ink is high on a zero background.
pub fn preprocess_sketch<T: Real>(img: &DynamicImage, size: usize) -> Tensor<T> {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let planes = resize_bilinear(&planar_rgb(&rgb), 3, h, w, size, size);
    let plane = size * size;
    let data = (0..plane)
        .map(|i| {
            let (r, g, b) = (planes[i], planes[plane + i], planes[2 * plane + i]);
            let gray = 0.299 * r + 0.587 * g + 0.114 * b;
            if gray >= WHITE_THRESHOLD - 0.5 {
                T::zero()
            } else {
                T::of(((255.0 - gray) / 255.0).clamp(0.0, 1.0) as f64)
            }
        })
        .collect();
    Tensor::new([1, size, size], data).expect("plane size matches")
}

/// Renders a preprocessed stroke map back as a white-background sketch.
pub fn sketch_tensor_to_image<T: Real>(t: &Tensor<T>) -> GrayImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = t.data()[y as usize * w + x as usize].f64();
        Luma([(255.0 - 255.0 * v).round().clamp(0.0, 255.0) as u8])
    })
}

/// Normalized RGB `[3×size×size]`.
pub fn preprocess_image<T: Real>(img: &DynamicImage, cfg: &ModelConfig) -> Tensor<T> {
    let size = cfg.image_size;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let planes = resize_bilinear(&planar_rgb(&rgb), 3, h, w, size, size);
    let plane = size * size;
    let data = planes
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            T::of((v as f64 / 255.0 - cfg.norm_mean[c]) / cfg.norm_std[c])
        })
        .collect();
    Tensor::new([3, size, size], data).expect("plane size matches")
}

fn check_divisible(op: &str, shape: &[usize], factor: usize) -> Result<()> {
    if shape.len() != 3 || !shape[1].is_multiple_of(factor) || !shape[2].is_multiple_of(factor) {
        return Err(Error::Config(format!("{op}: input {shape:?} must be c×H×W with H, W divisible by {factor}")));
    }
    Ok(())
}

/// `[d×gh×gw]` feature map to `[gh·gw × d]` tokens in row-major spatial order.
fn flatten_tokens<T: Real>(g: &mut Graph<T>, fmap: Var) -> Result<Var> {
    let s = g.shape(fmap).to_vec();
    let flat = g.reshape(fmap, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Multi-level sketch tokens `[n×d]`: strided convolutions, each followed by ReLU.
pub fn embed_sketch<T: Real>(g: &mut Graph<T>, p: &TokenizerParams<Var>, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let reduction = cfg.conv_stride.pow(p.sketch_convs.len() as u32);
    check_divisible("embed_sketch", g.shape(x), reduction)?;
    let mut h = x;
    for (layer, &k) in p.sketch_convs.iter().zip(&cfg.sketch_kernels) {
        let c = g.conv2d(h, layer.weight, layer.bias, cfg.conv_stride, k / 2)?;
        h = g.relu(c)?;
    }
    flatten_tokens(g, h)
}

/// Single-level image tokens `[n×d]` from one patch convolution plus ReLU.
pub fn embed_image<T: Real>(g: &mut Graph<T>, p: &TokenizerParams<Var>, cfg: &ModelConfig, x: Var) -> Result<Var> {
    check_divisible("embed_image", g.shape(x), cfg.patch_size)?;
    let c = g.conv2d(x, p.image_patch.weight, p.image_patch.bias, cfg.patch_size, 0)?;
    let h = g.relu(c)?;
    flatten_tokens(g, h)
}

/// `E′ = [RT, E¹…Eⁿ] + positional table`.
pub fn prepend_rt<T: Real>(
    g: &mut Graph<T>,
    p: &TokenizerParams<Var>,
    e: Var,
    modality: Modality,
) -> Result<TokenEmbedding> {
    let d = g.value(p.rt_seed).numel();
    if g.shape(e).get(1) != Some(&d) {
        return Err(Error::dims("prepend_rt", g.shape(e), g.shape(p.rt_seed)));
    }
    let rt = g.reshape(p.rt_seed, &[1, d])?;
    let joined = g.concat_rows(&[rt, e])?;
    let pos = match modality {
        Modality::Sketch => p.sketch_pos,
        Modality::Image => p.image_pos,
    };
    let tokens = g.add(joined, pos)?;
    Ok(TokenEmbedding { tokens, modality })
}

/// Raster tensor to `E′` for the given modality.
pub fn tokenize<T: Real>(
    g: &mut Graph<T>,
    p: &TokenizerParams<Var>,
    cfg: &ModelConfig,
    x: Var,
    modality: Modality,
) -> Result<TokenEmbedding> {
    let e = match modality {
        Modality::Sketch => embed_sketch(g, p, cfg, x)?,
        Modality::Image => embed_image(g, p, cfg, x)?,
    };
    prepend_rt(g, p, e, modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Bind, ModelParams};
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solid(size: u32, c: [u8; 3]) -> DynamicImage {
        DynamicImage::ImageRgb8(RgbImage::from_pixel(size, size, Rgb(c)))
    }

    #[test]
    fn white_sketch_is_all_zero() {
        let t: Tensor<f32> = preprocess_sketch(&solid(64, [255, 255, 255]), 64);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn black_sketch_is_all_one() {
        let t: Tensor<f32> = preprocess_sketch(&solid(64, [0, 0, 0]), 64);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn near_white_counts_as_background() {
        let t: Tensor<f32> = preprocess_sketch(&solid(8, [250, 251, 255]), 8);
        assert!(t.data().iter().all(|&v| v == 0.0));
        // Luminance 253.2: one dim channel is not enough to be ink.
        let t: Tensor<f32> = preprocess_sketch(&solid(8, [249, 255, 255]), 8);
        assert!(t.data().iter().all(|&v| v == 0.0));
        let t: Tensor<f32> = preprocess_sketch(&solid(8, [249, 249, 249]), 8);
        assert!(t.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn stroke_pixels_are_exactly_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let size = 64u32;
        let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
        let mut mask = vec![false; (size * size) as usize];
        use rand::seq::index::sample;
        for i in sample(&mut rng, mask.len(), mask.len() / 10) {
            mask[i] = true;
            let v = (i % 200) as u8;
            img.put_pixel(i as u32 % size, i as u32 / size, Rgb([v, v, v]));
        }
        let t: Tensor<f32> = preprocess_sketch(&DynamicImage::ImageRgb8(img), 64);
        let nonzero: Vec<bool> = t.data().iter().map(|&v| v > 0.0).collect();
        assert_eq!(nonzero, mask);
        assert_eq!(nonzero.iter().filter(|&&b| b).count(), mask.len() / 10);
    }

    #[test]
    fn constant_image_normalizes_per_channel() {
        let cfg = ModelConfig::toy();
        let t: Tensor<f64> = preprocess_image(&solid(64, [255, 0, 51]), &cfg);
        let plane = 64 * 64;
        let expect = [1.0, -1.0, (0.2 - 0.5) / 0.5];
        for (i, v) in t.data().iter().enumerate() {
            assert!((v - expect[i / plane]).abs() < 1e-6);
        }
    }

    #[test]
    fn checkerboard_downscale_is_mid_gray() {
        let mut cfg = ModelConfig::toy();
        cfg.norm_mean = [0.0; 3];
        cfg.norm_std = [1.0; 3];
        let img =
            RgbImage::from_fn(128, 128, |x, y| if (x + y) % 2 == 0 { Rgb([255, 255, 255]) } else { Rgb([0, 0, 0]) });
        let t: Tensor<f64> = preprocess_image(&DynamicImage::ImageRgb8(img), &cfg);
        assert!(t.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn target_size_input_is_not_resampled() {
        let raw: Vec<f32> = (0..3 * 16).map(|i| i as f32).collect();
        assert_eq!(resize_bilinear(&raw, 3, 4, 4, 4, 4), raw);
    }

    #[test]
    fn undecodable_bytes_are_input_errors() {
        assert!(matches!(decode_raster(b"not an image"), Err(Error::Input(_))));
    }

    fn toy_tokens(cfg: &ModelConfig, modality: Modality, x: Tensor<f64>) -> (Graph<f64>, TokenEmbedding) {
        let p = ModelParams::<Tensor<f64>>::init(cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let bound = p.tokenizer.bind(&mut g, false);
        let xv = g.constant(x);
        let e = tokenize(&mut g, &bound, cfg, xv, modality).unwrap();
        (g, e)
    }

    #[test]
    fn toy_branches_emit_sixteen_tokens() {
        let cfg = ModelConfig::toy();
        let (g, s) = toy_tokens(&cfg, Modality::Sketch, Tensor::zeros([1, 64, 64]));
        assert_eq!(g.shape(s.tokens), &[17, 32]);
        let (g, i) = toy_tokens(&cfg, Modality::Image, Tensor::zeros([3, 64, 64]));
        assert_eq!(g.shape(i.tokens), &[17, 32]);
    }

    #[test]
    fn zero_sketch_gives_identical_rows() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let bound = p.tokenizer.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 64, 64]));
        let e = embed_sketch(&mut g, &bound, &cfg, x).unwrap();
        let v = g.value(e);
        for r in 1..16 {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn constant_image_gives_identical_rows() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let bound = p.tokenizer.bind(&mut g, false);
        let x = g.constant(Tensor::filled([3, 64, 64], 0.3));
        let e = embed_image(&mut g, &bound, &cfg, x).unwrap();
        let v = g.value(e);
        for r in 1..16 {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let bound = p.tokenizer.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 60, 60]));
        assert!(matches!(embed_sketch(&mut g, &bound, &cfg, x), Err(Error::Config(_))));
        let x = g.constant(Tensor::zeros([3, 60, 60]));
        assert!(matches!(embed_image(&mut g, &bound, &cfg, x), Err(Error::Config(_))));
    }

    #[test]
    fn retrieval_token_row_is_seed_plus_position() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let bound = p.tokenizer.bind(&mut g, false);
        let mut rows0 = Vec::new();
        for seed in 0..2 {
            let x = Tensor::randn([1, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let xv = g.constant(x);
            let e = tokenize(&mut g, &bound, &cfg, xv, Modality::Sketch).unwrap();
            assert_eq!(e.rows(&g), 17);
            rows0.push(g.value(e.tokens).row(0).to_vec());
        }
        assert_eq!(rows0[0], rows0[1]);
        let pos0 = p.tokenizer.sketch_pos.row(0);
        for ((v, s), q) in rows0[0].iter().zip(p.tokenizer.rt_seed.data()).zip(pos0) {
            assert!((v - q - s).abs() < 1e-15);
        }
    }

    #[test]
    fn prepend_rt_rejects_width_mismatch() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let bound = p.tokenizer.bind(&mut g, false);
        let e = g.constant(Tensor::zeros([16, 31]));
        assert!(matches!(prepend_rt(&mut g, &bound, e, Modality::Image), Err(Error::Dimension { .. })));
    }
}
