//! The full sketch/image retrieval network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::cross_attention::{pair_distance, DistanceMode, PairScore};
use crate::encoder::{encode, Encoded};
use crate::error::{Error, Result};
use crate::params::{Bind, ModelParams, ParamTree};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{tokenize, Modality, TokenEmbedding};

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

/// Raster tensor → tokenizer → encoder for one modality, inside a graph.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    x: Var,
    modality: Modality,
) -> Result<Encoded> {
    let e = tokenize(g, &p.tokenizer, cfg, x, modality)?;
    let enc = match modality {
        Modality::Sketch => &p.encoder,
        Modality::Image => p.image_encoder(),
    };
    encode(g, e, enc, cfg)
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let template = ModelParams::<Tensor<T>>::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let expected: Vec<_> = template.leaves().iter().map(|t| t.shape().to_vec()).collect();
        let got: Vec<_> = params.leaves().iter().map(|t| t.shape().to_vec()).collect();
        if expected != got || template.names() != params.names() {
            return Err(Error::Config("parameter layout does not match the configuration".into()));
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.map_named("", &mut |_, t| t.cast()) }
    }

    /// Encoded token matrix `E″` for a preprocessed input.
    pub fn encode(&self, x: &Tensor<T>, modality: Modality) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let tokenizer = self.params.tokenizer.bind(&mut g, false);
        let enc = match modality {
            Modality::Sketch => &self.params.encoder,
            Modality::Image => self.params.image_encoder(),
        }
        .bind(&mut g, false);
        let xv = g.constant(x.clone());
        let e = tokenize(&mut g, &tokenizer, &self.config, xv, modality)?;
        let out = encode(&mut g, e, &enc, &self.config)?;
        Ok(g.value(out.tokens.tokens).clone())
    }

    /// Pre-mode retrieval token (row 0 of `E″`).
    pub fn retrieval_token(&self, x: &Tensor<T>, modality: Modality) -> Result<Vec<T>> {
        Ok(self.encode(x, modality)?.row(0).to_vec())
    }

    /// Scores two already-encoded token matrices.
    pub fn score_encoded(&self, sketch: &Tensor<T>, image: &Tensor<T>, mode: DistanceMode) -> Result<PairScore<T>> {
        let mut g = Graph::new();
        let cross = self.params.cross.bind(&mut g, false);
        let s = TokenEmbedding { tokens: g.constant(sketch.clone()), modality: Modality::Sketch };
        let r = TokenEmbedding { tokens: g.constant(image.clone()), modality: Modality::Image };
        pair_distance(&mut g, s, r, &cross, &self.config, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_output_rows_follow_filter_schedule() {
        let m = Model::<f32>::new(ModelConfig::toy(), 0).unwrap();
        // toy: L=2, filters after blocks 1 and 2 at 0.7 → 16 → 12 → 9.
        let t = m.encode(&Tensor::zeros([1, 64, 64]), Modality::Sketch).unwrap();
        assert_eq!(t.shape(), &[10, 32]);
        let t = m.encode(&Tensor::zeros([3, 64, 64]), Modality::Image).unwrap();
        assert_eq!(t.shape(), &[10, 32]);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let m = Model::<f32>::new(ModelConfig::toy(), 0).unwrap();
        let other = ModelConfig { layers: 3, ..ModelConfig::toy() };
        assert!(Model::from_params(other, m.params.clone()).is_err());
        assert!(Model::from_params(m.config.clone(), m.params.clone()).is_ok());
    }
}
