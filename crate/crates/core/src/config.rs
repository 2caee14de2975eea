//! Run configuration: one JSON document with sections
//! `encoder`, `crossmodal`, `loss`, `train`, `data`, `eval`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::crossmodal::CrossModalConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::losses::LossConfig;
use crate::synthdata::{self, CorpusConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub crossmodal: CrossModalConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: CorpusConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Apply `section.key=value`. The key must exist and the value must
    /// have the key's type; strings may be given unquoted.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        let parsed = serde_json::from_str::<Value>(raw).ok();
        let value = match (&*slot, parsed) {
            (Value::String(_), Some(Value::String(s))) => Value::String(s),
            (Value::String(_), _) => Value::String(raw.to_string()),
            (Value::Object(_), _) => return Err(Error::Config(format!("{key:?} is a section, not a key"))),
            (Value::Number(_), Some(v @ Value::Number(_))) | (Value::Bool(_), Some(v @ Value::Bool(_))) => v,
            (old, _) => {
                return Err(Error::Config(format!("{key}: expected {}, got {raw:?}", type_name(old))));
            }
        };
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}={raw}: {e}")))?;
        Ok(())
    }

    /// Every leaf key with its value, in document order.
    pub fn flat_keys(&self) -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
            match v {
                Value::Object(map) => {
                    for (k, v) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, v, out);
                    }
                }
                leaf => out.push((prefix.to_string(), leaf.to_string())),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let (enc, data) = (&self.encoder, &self.data);
        if self.crossmodal.heads == 0 || enc.d_v % self.crossmodal.heads != 0 {
            return Err(Error::Config(format!("crossmodal.heads {} must divide encoder.d_v {}", self.crossmodal.heads, enc.d_v)));
        }
        if (enc.image_height, enc.image_width) != (data.image_height, data.image_width) {
            return Err(Error::Config(format!(
                "encoder image size {}x{} differs from data image size {}x{}",
                enc.image_height, enc.image_width, data.image_height, data.image_width
            )));
        }
        if self.train.p > data.train_ids {
            return Err(Error::Config(format!("train.p {} exceeds data.train_ids {}", self.train.p, data.train_ids)));
        }
        if data.images_per_id < 2 || self.eval.queries_per_id == 0 || self.eval.queries_per_id >= data.images_per_id {
            return Err(Error::Config("eval.queries_per_id must be in 1..data.images_per_id".into()));
        }
        if synthdata::build_vocab(data.num_scenes).len() > enc.vocab_size {
            return Err(Error::Config("encoder.vocab_size is smaller than the corpus vocabulary".into()));
        }
        Ok(())
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "a section",
    }
}
