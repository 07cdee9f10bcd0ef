//! Encoder checkpoints: config and vocabulary in the metadata, then every
//! parameter tensor in store order (embeddings, then layers in registry
//! order). The JSON manifest lists names, shapes, and maskability.

use serde::Serialize;

use super::{Encoder, EncoderConfig};
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointKind};
use crate::autodiff::ParamStore;

pub fn encoder_checkpoint(encoder: &Encoder, vocab: &[String]) -> Checkpoint {
    let c = &encoder.config;
    let mut ck = Checkpoint::new(CheckpointKind::Encoder)
        .with_meta("layers", c.layers)
        .with_meta("hidden", c.hidden)
        .with_meta("heads", c.heads)
        .with_meta("ff", c.ff)
        .with_meta("vocab_size", c.vocab_size)
        .with_meta("max_len", c.max_len)
        .with_meta("dropout", c.dropout)
        .with_meta("vocab", vocab.join(" "));
    for p in encoder.params.iter() {
        ck.push_tensor(p.name.clone(), p.value.clone());
    }
    ck
}

/// Returns the encoder and its vocabulary tokens in id order.
pub fn read_encoder_checkpoint(ck: &Checkpoint) -> Result<(Encoder, Vec<String>), CheckpointError> {
    ck.expect_kind(CheckpointKind::Encoder)?;
    let config = EncoderConfig {
        layers: ck.meta_parse("layers")?,
        hidden: ck.meta_parse("hidden")?,
        heads: ck.meta_parse("heads")?,
        ff: ck.meta_parse("ff")?,
        vocab_size: ck.meta_parse("vocab_size")?,
        max_len: ck.meta_parse("max_len")?,
        dropout: ck.meta_parse("dropout")?,
    };
    let invalid = |key: &str, detail: String| CheckpointError::Invalid { key: key.into(), detail };
    config.validate().map_err(|e| invalid("config", e.to_string()))?;
    let vocab: Vec<String> = ck.meta("vocab")?.split(' ').filter(|s| !s.is_empty()).map(str::to_string).collect();
    if vocab.len() != config.vocab_size {
        return Err(invalid("vocab", format!("{} tokens for vocab_size {}", vocab.len(), config.vocab_size)));
    }
    // Build a template to learn the expected names and shapes.
    let template = Encoder::new(config, &mut crate::autodiff::RngState::new(0)).map_err(|e| invalid("config", e.to_string()))?;
    if ck.tensors.len() != template.params.len() {
        return Err(invalid("tensors", format!("{} tensors, expected {}", ck.tensors.len(), template.params.len())));
    }
    let mut params = ParamStore::new();
    for (p, (name, t)) in template.params.iter().zip(&ck.tensors) {
        if &p.name != name || p.value.shape() != t.shape() {
            return Err(invalid(name, format!("expected {} with shape {:?}", p.name, p.value.shape())));
        }
        params.insert(name.clone(), t.clone(), true).map_err(|e| invalid(name, e.to_string()))?;
    }
    Ok((Encoder { config, params }, vocab))
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    name: &'a str,
    shape: &'a [usize],
    maskable: bool,
}

pub fn encoder_manifest(encoder: &Encoder) -> String {
    let registry: Vec<String> = encoder.registry().into_iter().map(|m| m.name).collect();
    let entries: Vec<ManifestEntry> = encoder
        .params
        .iter()
        .map(|p| ManifestEntry { name: &p.name, shape: p.value.shape(), maskable: registry.contains(&p.name) })
        .collect();
    serde_json::to_string_pretty(&entries).expect("manifest serializes")
}
