//! Checkpoint directory: one FDLT file per parameter, a plain-text manifest of
//! `name shape role` lines, and `config.toml` with the network, training and data
//! settings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::tensor::Tensor;

use super::config::{ToyNetConfig, TrainConfig};
use super::net::ToyNet;
use super::synth::DataSpec;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: ToyNetConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
}

/// The top-level component a parameter belongs to.
pub fn role_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn manifest(net: &ToyNet) -> String {
    let mut out = String::new();
    for (_, name, p) in net.store.iter() {
        writeln!(out, "{name} {} {}", shape_str(p.value.shape()), role_of(name)).unwrap();
    }
    out
}

pub fn save_checkpoint(dir: impl AsRef<Path>, net: &ToyNet, meta: &CheckpointMeta) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (_, name, p) in net.store.iter() {
        p.value.save(dir.join(format!("{name}.fdlt")))?;
    }
    let text = toml::to_string(meta).map_err(|e| Error::Config(format!("cannot encode config: {e}")))?;
    write_atomic(dir.join(CONFIG), text.as_bytes())?;
    write_atomic(dir.join(MANIFEST), manifest(net).as_bytes())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ToyNet, CheckpointMeta)> {
    let dir = dir.as_ref();
    let cfg_path = dir.join(CONFIG);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let meta: CheckpointMeta = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
    let mut net = ToyNet::new(meta.net.clone(), meta.seed)?;

    let man_path = dir.join(MANIFEST);
    let listed = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    if listed != manifest(&net) {
        return Err(Error::Config(format!(
            "{} does not match the parameters of a {} network",
            man_path.display(),
            meta.net.variant
        )));
    }
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        let path = dir.join(format!("{}.fdlt", net.store.name(id)));
        let t = Tensor::load(&path)?;
        if t.shape() != net.store.value(id).shape() {
            return Err(Error::dim("checkpoint", net.store.value(id).shape(), t.shape()));
        }
        net.store.get_mut(id).value = t;
    }
    Ok((net, meta))
}
