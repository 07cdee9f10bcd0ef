use super::{streams, Condition, HarnessError};
use crate::autodiff::RngState;
use crate::data::{Corpus, Vocab};
use crate::encoder::{pretrain_mlm, Encoder, EncoderConfig, MlmReport, PretrainConfig};

/// A pre-trained encoder with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub encoder: Encoder,
    pub vocab: Vocab,
    pub report: Option<MlmReport>,
}

/// Builds the vocabulary, initializes the toy encoder from the `INIT`
/// stream, and pre-trains it with masked language modeling on the training
/// split (`PRETRAIN` stream).
pub fn prepare_base(corpus: &Corpus, seed: u64, pretrain: &PretrainConfig) -> Result<BaseModel, HarnessError> {
    let vocab = Vocab::from_corpus(corpus);
    let mut encoder = Encoder::new(EncoderConfig::toy(vocab.len()), &mut RngState::with_stream(seed, streams::INIT))?;
    let (train, dev) = corpus.split();
    let ids = |c: &Corpus| c.sentences.iter().map(|s| vocab.encode(&s.tokens)).collect::<Vec<_>>();
    let report = pretrain_mlm(
        &mut encoder,
        &ids(&train),
        &ids(&dev),
        vocab.mask(),
        pretrain,
        &mut RngState::with_stream(seed, streams::PRETRAIN),
    )?;
    Ok(BaseModel { encoder, vocab, report: Some(report) })
}

/// The weights a probe sees under `condition`. Both random baselines start
/// from the pre-trained weights and re-draw from their own substream, so
/// the three conditions share everything the protocol keeps fixed.
pub fn prepare_condition(pretrained: &Encoder, condition: Condition, seed: u64) -> Result<Encoder, HarnessError> {
    let mut enc = pretrained.clone();
    match condition {
        Condition::Pretrained => {}
        Condition::ResetEncoder => enc.reset_encoder(&mut RngState::with_stream(seed, streams::RESET_ENCODER))?,
        Condition::ResetAll => enc.reset_all(&mut RngState::with_stream(seed, streams::RESET_ALL))?,
    }
    Ok(enc)
}
