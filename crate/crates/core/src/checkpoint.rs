//! Versioned JSON checkpoints of a full [`ModelState`].
//!
//! Every matrix is stored with its `rows`/`cols` header. Reals use the
//! shortest round-trip representation, so write → read → write is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};
use crate::model::ModelState;

pub const FORMAT: &str = "redreg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format: String,
    version: u32,
    model: ModelState,
}

pub fn to_string(model: &ModelState) -> String {
    let env = Envelope {
        format: FORMAT.to_string(),
        version: VERSION,
        model: model.clone(),
    };
    let mut s = serde_json::to_string(&env).expect("model state serializes");
    s.push('\n');
    s
}

pub fn from_str(text: &str) -> Result<ModelState> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| invalid(format!("checkpoint: {e}")))?;
    if env.format != FORMAT {
        return Err(invalid(format!("checkpoint format {:?} is not {FORMAT:?}", env.format)));
    }
    if env.version != VERSION {
        return Err(invalid(format!("unsupported checkpoint version {}", env.version)));
    }
    let m = &env.model;
    for i in 0..m.encoders.len() {
        if m.encoder_velocity[i].num_params() != m.encoders[i].num_params()
            || m.anchors[i].num_params() != m.encoders[i].num_params()
        {
            return Err(invalid("checkpoint: buffer shapes do not mirror encoder shapes"));
        }
    }
    if m.head_velocity.weight.shape() != m.head.weight.shape() {
        return Err(invalid("checkpoint: head velocity shape does not mirror head"));
    }
    Ok(env.model)
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model)).map_err(|e| io_err(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    from_str(&text)
}
