//! Probe checkpoints: the trained head and MLP-1 parameters, tagged with
//! the probe mode. Masks and fine-tuned encoders have their own formats.
//!
//! Metadata keys: `mode`, `head` (`tag` or `parse`), `rank` (MLP-1 only).
//! Tensors: MLP-1 parameters then head parameters, each in store order.

use super::{Probe, TaskHead};
use crate::autodiff::ParamStore;
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointKind};

fn head_kind(head: &TaskHead) -> &'static str {
    match head {
        TaskHead::Tag(_) => "tag",
        TaskHead::Parse(_) => "parse",
    }
}

pub fn probe_checkpoint(probe: &Probe) -> Checkpoint {
    let mut ck = Checkpoint::new(CheckpointKind::Head).with_meta("mode", probe.mode).with_meta("head", head_kind(&probe.head));
    if let Some(m) = &probe.mlp1 {
        ck = ck.with_meta("rank", m.rank);
    }
    let stores = probe.mlp1.iter().map(|m| &m.params).chain([probe.head.params()]);
    for p in stores.flat_map(ParamStore::iter) {
        ck.push_tensor(p.name.clone(), p.value.clone());
    }
    ck
}

/// Restores parameters saved by [`probe_checkpoint`] into a probe of the
/// same shape.
pub fn load_probe_checkpoint(probe: &mut Probe, ck: &Checkpoint) -> Result<(), CheckpointError> {
    ck.expect_kind(CheckpointKind::Head)?;
    let invalid = |key: &str, detail: String| CheckpointError::Invalid { key: key.into(), detail };
    if ck.meta("mode")? != probe.mode.as_str() {
        return Err(invalid("mode", format!("checkpoint {} but probe {}", ck.meta("mode")?, probe.mode)));
    }
    if ck.meta("head")? != head_kind(&probe.head) {
        return Err(invalid("head", format!("checkpoint {} but probe {}", ck.meta("head")?, head_kind(&probe.head))));
    }
    let Probe { mlp1, head, .. } = probe;
    let head = match head {
        TaskHead::Tag(h) => &mut h.params,
        TaskHead::Parse(h) => &mut h.params,
    };
    let mut stores: Vec<&mut ParamStore> = mlp1.iter_mut().map(|m| &mut m.params).chain([head]).collect();
    let expected: usize = stores.iter().map(|s| s.len()).sum();
    if ck.tensors.len() != expected {
        return Err(invalid("tensors", format!("{} tensors for {expected} parameters", ck.tensors.len())));
    }
    for (name, t) in &ck.tensors {
        let p = stores
            .iter_mut()
            .find_map(|s| s.get_mut(name).ok())
            .ok_or_else(|| invalid(name, "no such parameter".into()))?;
        if p.value.shape() != t.shape() {
            return Err(invalid(name, format!("shape {:?}, expected {:?}", t.shape(), p.value.shape())));
        }
        p.value = t.clone();
    }
    Ok(())
}
