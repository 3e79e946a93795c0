//! Feature stores: frozen backbone outputs exported by an external video
//! model, one row per clip.
//!
//! Format: line-delimited JSON. The first line is a header
//! `{"version":"1","output_dim":400,"declared_parameters":N}`; each further
//! line is `{"clip_id":"...","features":[...]}`. The exporter must use the same
//! frame sampling as the consuming pipeline.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const FEATURE_STORE_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub output_dim: usize,
    /// Parameter count of the model that produced the features, if known.
    pub declared_parameters: u64,
    features: HashMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    output_dim: usize,
    #[serde(default)]
    declared_parameters: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    clip_id: String,
    features: Vec<f64>,
}

impl FeatureStore {
    pub fn new(output_dim: usize, declared_parameters: u64) -> Self {
        Self { output_dim, declared_parameters, features: HashMap::new() }
    }

    pub fn insert(&mut self, clip_id: impl Into<String>, features: Vec<f64>) -> Result<(), ModelError> {
        if features.len() != self.output_dim {
            return Err(ModelError::Weights(format!(
                "feature row has {} values, expected {}",
                features.len(),
                self.output_dim
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Weights("non-finite feature value".into()));
        }
        self.features.insert(clip_id.into(), features);
        Ok(())
    }

    pub fn get(&self, clip_id: &str) -> Option<&[f64]> {
        self.features.get(clip_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| ModelError::Weights("empty feature store".into()))?;
        let header: Header = serde_json::from_str(head).map_err(|e| ModelError::Weights(format!("line 1: {e}")))?;
        if header.version != FEATURE_STORE_VERSION {
            return Err(ModelError::Weights(format!("unsupported feature store version {:?}", header.version)));
        }
        if header.output_dim == 0 {
            return Err(ModelError::Weights("output_dim must be positive".into()));
        }
        let mut store = Self::new(header.output_dim, header.declared_parameters);
        for (i, line) in lines {
            let row: Row =
                serde_json::from_str(line).map_err(|e| ModelError::Weights(format!("line {}: {e}", i + 1)))?;
            if store.features.contains_key(&row.clip_id) {
                return Err(ModelError::Weights(format!("line {}: duplicate clip_id {:?}", i + 1, row.clip_id)));
            }
            store.insert(row.clip_id, row.features).map_err(|e| ModelError::Weights(format!("line {}: {e}", i + 1)))?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::UnknownIdentifier(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Serializes with rows sorted by clip id.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            version: FEATURE_STORE_VERSION.into(),
            output_dim: self.output_dim,
            declared_parameters: self.declared_parameters,
        };
        let mut out = serde_json::to_string(&header).unwrap();
        out.push('\n');
        let mut ids: Vec<&String> = self.features.keys().collect();
        ids.sort();
        for id in ids {
            let row = Row { clip_id: id.clone(), features: self.features[id].clone() };
            out.push_str(&serde_json::to_string(&row).unwrap());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let mut s = FeatureStore::new(3, 42);
        s.insert("b", vec![1.0, 2.0, 3.0]).unwrap();
        s.insert("a", vec![0.5, -1.0, 0.0]).unwrap();
        let back = FeatureStore::parse(&s.to_jsonl()).unwrap();
        assert_eq!(back, s);
        assert!(s.insert("c", vec![1.0]).is_err());
        assert!(FeatureStore::parse("").is_err());
        assert!(
            FeatureStore::parse("{\"version\":\"1\",\"output_dim\":2}\n{\"clip_id\":\"a\",\"features\":[1]}").is_err()
        );
    }
}
