//! Learnable parameter trees.
//!
//! Every parameter group is generic over its leaf type `P`: `Tensor<T>` for
//! storage, [`Var`](crate::autodiff::Var) once bound into a graph. Leaves are
//! visited in declaration order with dotted names such as
//! `encoder.blocks.0.query.weight`, which is the order used by checkpoints and
//! the optimizer.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::tensor::{Real, Tensor};

pub trait ParamTree<P> {
    type Mapped<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q>;

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &P));

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>);

    fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit_refs(&mut out);
        out
    }

    fn visit_refs<'a>(&'a self, out: &mut Vec<&'a P>);

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_named("", &mut |n, _| out.push(n.to_string()));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P, G: ParamTree<P>> ParamTree<P> for Vec<G> {
    type Mapped<Q> = Vec<G::Mapped<Q>>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.iter().enumerate().map(|(i, g)| g.map_named(&join(prefix, &i.to_string()), f)).collect()
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        for (i, g) in self.iter().enumerate() {
            g.visit_named(&join(prefix, &i.to_string()), f);
        }
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        for g in self {
            g.leaves_mut(out);
        }
    }

    fn visit_refs<'a>(&'a self, out: &mut Vec<&'a P>) {
        for g in self {
            g.visit_refs(out);
        }
    }
}

impl<P, G: ParamTree<P>> ParamTree<P> for Option<G> {
    type Mapped<Q> = Option<G::Mapped<Q>>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.as_ref().map(|g| g.map_named(prefix, f))
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        if let Some(g) = self {
            g.visit_named(prefix, f);
        }
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        if let Some(g) = self {
            g.leaves_mut(out);
        }
    }

    fn visit_refs<'a>(&'a self, out: &mut Vec<&'a P>) {
        if let Some(g) = self {
            g.visit_refs(out);
        }
    }
}

macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            leaves: [$($leaf:ident),* $(,)?],
            groups: [$($group:ident : $gty:ty),* $(,)?] $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            $(pub $leaf: P,)*
            $(pub $group: $gty,)*
        }

        impl<P> ParamTree<P> for $name<P> {
            type Mapped<Q> = $name<Q>;

            #[allow(unused_variables)]
            fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> $name<Q> {
                $name {
                    $($leaf: f(&join(prefix, stringify!($leaf)), &self.$leaf),)*
                    $($group: self.$group.map_named(&join(prefix, stringify!($group)), f),)*
                }
            }

            #[allow(unused_variables)]
            fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
                $(f(&join(prefix, stringify!($leaf)), &self.$leaf);)*
                $(self.$group.visit_named(&join(prefix, stringify!($group)), f);)*
            }

            #[allow(unused_variables)]
            fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
                $(out.push(&mut self.$leaf);)*
                $(self.$group.leaves_mut(out);)*
            }

            #[allow(unused_variables)]
            fn visit_refs<'a>(&'a self, out: &mut Vec<&'a P>) {
                $(out.push(&self.$leaf);)*
                $(self.$group.visit_refs(out);)*
            }
        }
    };
}

param_group! {
    /// Convolution kernel `[c_out×c_in×k×k]` and bias `[c_out]`.
    pub struct ConvParams { leaves: [weight, bias], groups: [] }
}

param_group! {
    /// Dense layer stored as `[in×out]` so that `y = x·W + b`.
    pub struct LinearParams { leaves: [weight, bias], groups: [] }
}

param_group! {
    pub struct NormParams { leaves: [gamma, beta], groups: [] }
}

param_group! {
    /// Both tokenizer branches, the per-modality positional tables and the
    /// retrieval-token seed.
    pub struct TokenizerParams {
        leaves: [sketch_pos, image_pos, rt_seed],
        groups: [sketch_convs: Vec<ConvParams<P>>, image_patch: ConvParams<P>],
    }
}

param_group! {
    pub struct BlockParams {
        leaves: [],
        groups: [
            ln1: NormParams<P>,
            query: LinearParams<P>,
            key: LinearParams<P>,
            value: LinearParams<P>,
            proj: LinearParams<P>,
            ln2: NormParams<P>,
            fc1: LinearParams<P>,
            fc2: LinearParams<P>,
        ],
    }
}

param_group! {
    pub struct EncoderParams { leaves: [], groups: [blocks: Vec<BlockParams<P>>] }
}

param_group! {
    pub struct CrossAttnParams {
        leaves: [],
        groups: [
            ln: NormParams<P>,
            query: LinearParams<P>,
            key: LinearParams<P>,
            value: LinearParams<P>,
            proj: LinearParams<P>,
        ],
    }
}

param_group! {
    /// All learnable weights. `image_encoder` is present only when the two
    /// branches do not share encoder weights.
    pub struct ModelParams {
        leaves: [],
        groups: [
            tokenizer: TokenizerParams<P>,
            encoder: EncoderParams<P>,
            image_encoder: Option<EncoderParams<P>>,
            cross: CrossAttnParams<P>,
        ],
    }
}

impl<P> ModelParams<P> {
    pub fn image_encoder(&self) -> &EncoderParams<P> {
        self.image_encoder.as_ref().unwrap_or(&self.encoder)
    }
}

impl<T: Real> ModelParams<Tensor<T>> {
    /// Random initialization: He-normal convolutions, `N(0, init_std)` for
    /// projections, positional tables and the retrieval token; zero biases;
    /// unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let std = cfg.init_std;
        let tokens = cfg.tokens() + 1;

        let mut sketch_convs = Vec::new();
        let mut c_in = 1;
        for (&k, c_out) in cfg.sketch_kernels.iter().zip(cfg.sketch_channels()) {
            sketch_convs.push(conv(c_out, c_in, k, rng));
            c_in = c_out;
        }
        let tokenizer = TokenizerParams {
            sketch_pos: Tensor::randn([tokens, d], std, rng),
            image_pos: Tensor::randn([tokens, d], std, rng),
            rt_seed: Tensor::randn([d], std, rng),
            sketch_convs,
            image_patch: conv(d, 3, cfg.patch_size, rng),
        };
        let encoder = |rng: &mut _| EncoderParams {
            blocks: (0..cfg.layers).map(|_| block(d, cfg.mlp_ratio, std, rng)).collect(),
        };
        let encoder_s = encoder(rng);
        let image_encoder = (!cfg.tied_encoders).then(|| encoder(rng));
        let cross = CrossAttnParams {
            ln: norm(d),
            query: linear(d, d, std, rng),
            key: linear(d, d, std, rng),
            value: linear(d, d, std, rng),
            proj: linear(d, d, std, rng),
        };
        ModelParams { tokenizer, encoder: encoder_s, image_encoder, cross }
    }

    pub fn count(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }
}

impl<T: Real, G: ParamTree<Tensor<T>>> Bind<T> for G {}

/// Registering a stored tree as graph leaves.
pub trait Bind<T: Real>: ParamTree<Tensor<T>> {
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Self::Mapped<Var> {
        self.map_named("", &mut |_, t| g.leaf(t.clone(), trainable))
    }
}

fn conv<T: Real>(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> ConvParams<Tensor<T>> {
    let fan_in = (c_in * k * k) as f64;
    ConvParams { weight: Tensor::randn([c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng), bias: Tensor::zeros([c_out]) }
}

fn linear<T: Real>(i: usize, o: usize, std: f64, rng: &mut impl Rng) -> LinearParams<Tensor<T>> {
    LinearParams { weight: Tensor::randn([i, o], std, rng), bias: Tensor::zeros([o]) }
}

fn norm<T: Real>(d: usize) -> NormParams<Tensor<T>> {
    NormParams { gamma: Tensor::ones([d]), beta: Tensor::zeros([d]) }
}

fn block<T: Real>(d: usize, ratio: usize, std: f64, rng: &mut impl Rng) -> BlockParams<Tensor<T>> {
    BlockParams {
        ln1: norm(d),
        query: linear(d, d, std, rng),
        key: linear(d, d, std, rng),
        value: linear(d, d, std, rng),
        proj: linear(d, d, std, rng),
        ln2: norm(d),
        fc1: linear(d, ratio * d, std, rng),
        fc2: linear(ratio * d, d, std, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_dotted_and_unique() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<Tensor<f32>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let names = p.names();
        assert!(names.contains(&"tokenizer.sketch_convs.0.weight".to_string()));
        assert!(names.contains(&"encoder.blocks.1.fc2.bias".to_string()));
        assert!(names.contains(&"cross.proj.weight".to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names.len(), p.leaves().len());
    }

    #[test]
    fn untied_encoders_add_a_second_stack() {
        let tied = ModelConfig::toy();
        let untied = ModelConfig { tied_encoders: false, ..tied.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ModelParams::<Tensor<f32>>::init(&tied, &mut rng);
        let b = ModelParams::<Tensor<f32>>::init(&untied, &mut rng);
        assert!(a.image_encoder.is_none());
        assert_eq!(b.count() - a.count(), a.encoder.leaves().iter().map(|t| t.numel()).sum::<usize>());
    }

    #[test]
    fn map_preserves_order() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut counter = 0usize;
        let idx = p.map_named("", &mut |_, _| {
            counter += 1;
            counter - 1
        });
        let flat: Vec<usize> = idx.leaves().into_iter().copied().collect();
        assert_eq!(flat, (0..flat.len()).collect::<Vec<_>>());
    }
}
