//! Helpers shared by every checkpointed component.

use std::path::Path;

use farsight_nn::{Adam, Archive, Module};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{Error, Result};

pub(crate) fn push_module(archive: &mut Archive, prefix: &str, m: &impl Module<f32>) {
    archive.extend(prefix, m.state());
}

pub(crate) fn load_module(archive: &Archive, prefix: &str, m: &mut impl Module<f32>) -> Result<()> {
    m.load_state(&archive.group(prefix))
        .map_err(|e| Error::Data(format!("{} checkpoint: {e}", archive.kind)))
}

pub(crate) fn push_adam(archive: &mut Archive, prefix: &str, opt: &Adam<f32>) {
    archive.extend(prefix, opt.state());
}

pub(crate) fn load_adam(archive: &Archive, prefix: &str, step: u64) -> Adam<f32> {
    let mut opt = Adam::new(0.0, 0.0, 0.0);
    opt.load_state(step, &archive.group(prefix));
    opt
}

pub(crate) fn read_kind(path: &Path, kind: &str) -> Result<Archive> {
    let archive = Archive::read(path)?;
    if archive.kind != kind {
        return Err(Error::Data(format!(
            "{}: expected a {kind} checkpoint, found {}",
            path.display(),
            archive.kind
        )));
    }
    Ok(archive)
}

pub(crate) fn meta_field<T: DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks `{key}`")))?;
    Ok(serde_json::from_value(v.clone())?)
}
