//! JSON checkpoints. Parameters round-trip bit-exactly (shortest-repr f64).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "certrain-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Repr {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

impl Network {
    pub fn to_checkpoint_string(&self) -> String {
        let repr = Repr {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            layers: self.layers.clone(),
        };
        serde_json::to_string(&repr).expect("network serialises")
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Network> {
        let repr: Repr = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if repr.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format `{}`", repr.format)));
        }
        if repr.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} not supported (expected {CHECKPOINT_VERSION})",
                repr.version
            )));
        }
        let net = Network::new(repr.input_shape, repr.layers)?;
        if net.num_classes != repr.num_classes {
            return Err(Error::Checkpoint(format!(
                "declares {} classes but final layer has {}",
                repr.num_classes, net.num_classes
            )));
        }
        Ok(net)
    }
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, net.to_checkpoint_string().as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Network::from_checkpoint_str(&text)
}
