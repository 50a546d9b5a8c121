use std::path::Path;

use rand::Rng;

use super::lstm::Encoder;
use super::{checkpoint_meta, config_from_meta, ModelConfig};
use crate::numcore::checkpoint::Checkpoint;
use crate::numcore::{kernels, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Context/response relevance classifier: two independent LSTM encoders and a
/// linear head over `[h_ctx, h_rsp, h_ctx ⊙ h_rsp]`.
///
/// The head starts at zero, so an untrained discriminator scores exactly 0.5.
#[derive(Clone)]
pub struct Discriminator {
    config: ModelConfig,
    store: ParamStore,
    context_encoder: Encoder,
    response_encoder: Encoder,
    head_w: ParamId,
    head_b: ParamId,
}

impl Discriminator {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;
        let mut enc = |prefix: &str, store: &mut ParamStore| {
            Encoder::new(store, prefix, c.vocab_size, c.embed_dim, c.hidden_dim, c.num_layers, c.max_len, rng)
        };
        let context_encoder = enc("disc.context", &mut store);
        let response_encoder = enc("disc.response", &mut store);
        let head_w = store.add("disc.head.w", Tensor::zeros(&[3 * c.hidden_dim, 1]));
        let head_b = store.add("disc.head.b", Tensor::zeros(&[1, 1]));
        Ok(Discriminator {
            config,
            store,
            context_encoder,
            response_encoder,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn head_params(&self) -> [ParamId; 2] {
        [self.head_w, self.head_b]
    }

    fn split<'a>(pairs: &[(&'a [u32], &'a [u32])]) -> (Vec<&'a [u32]>, Vec<&'a [u32]>) {
        pairs.iter().map(|&(c, r)| (c, r)).unzip()
    }

    /// `batch × 1` relevance logits.
    pub fn logits_tape(&self, tape: &mut Tape<'_>, pairs: &[(&[u32], &[u32])]) -> Result<Var> {
        let (ctx, rsp) = Self::split(pairs);
        let hc = self.context_encoder.encode_tape(tape, &ctx)?.last().unwrap().0;
        let hr = self.response_encoder.encode_tape(tape, &rsp)?.last().unwrap().0;
        let prod = tape.mul(hc, hr)?;
        let features = tape.concat_cols(&[hc, hr, prod])?;
        let w = tape.param(self.head_w)?;
        let b = tape.param(self.head_b)?;
        let z = tape.matmul(features, w)?;
        tape.add_row(z, b)
    }

    /// Mean binary cross-entropy, written as a two-class softmax over
    /// `[0, logit]`.
    pub fn bce_tape(&self, tape: &mut Tape<'_>, pairs: &[(&[u32], &[u32])], labels: &[bool]) -> Result<Var> {
        if pairs.len() != labels.len() {
            return Err(Error::invalid("pairs and labels differ in length"));
        }
        let z = self.logits_tape(tape, pairs)?;
        let zero = tape.input(Tensor::zeros(&[pairs.len(), 1]))?;
        let two = tape.concat_cols(&[zero, z])?;
        let targets: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        let w = vec![1.0 / pairs.len() as f64; pairs.len()];
        tape.softmax_xent(two, &targets, &w)
    }

    pub fn logit_batch(&self, pairs: &[(&[u32], &[u32])]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let (ctx, rsp) = Self::split(pairs);
        let hc = self.context_encoder.encode(&self.store, &ctx)?.pop().unwrap().h;
        let hr = self.response_encoder.encode(&self.store, &rsp)?.pop().unwrap().h;
        let prod = Tensor::new(
            hc.shape().to_vec(),
            hc.data().iter().zip(hr.data()).map(|(a, b)| a * b).collect(),
        )?;
        let features = kernels::concat_cols(&[&hc, &hr, &prod])?;
        let z = kernels::add_row(
            &kernels::matmul(&features, self.store.value(self.head_w))?,
            self.store.value(self.head_b),
        )?;
        Ok(z.into_data())
    }

    /// `P(relevant | context, response)`.
    pub fn score(&self, context: &[u32], response: &[u32]) -> Result<f64> {
        Ok(self.score_batch(&[(context, response)])?[0])
    }

    pub fn score_batch(&self, pairs: &[(&[u32], &[u32])]) -> Result<Vec<f64>> {
        Ok(self.logit_batch(pairs)?.into_iter().map(kernels::sigmoid).collect())
    }

    pub fn checkpoint(&self, vocab_hash: Option<&str>) -> Checkpoint {
        Checkpoint::from_store(&self.store, checkpoint_meta("discriminator", &self.config, vocab_hash))
    }

    pub fn save(&self, path: &Path, vocab_hash: Option<&str>) -> Result<()> {
        self.checkpoint(vocab_hash).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config = config_from_meta(&ck.meta, "discriminator")?;
        let mut d = Discriminator::new(config, &mut crate::rng::stream(0, "load-skeleton"))?;
        ck.restore_into(&mut d.store)?;
        Ok(d)
    }
}
