//! One flat JSON configuration covering every stage. A key sets the field
//! of that name in every stage that has one (`seed`, for instance, reaches
//! them all); unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use foamqc::augment::AugmentSpec;
use foamqc::explain::ExplainParams;
use foamqc::preprocess::CircleSearchParams;
use foamqc::synth::SynthParams;
use foamqc::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub synth: SynthParams,
    pub circle: CircleSearchParams,
    pub augment: AugmentSpec,
    pub train: TrainConfig,
    pub explain: ExplainParams,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(CliError::User(format!("{}: config must be a JSON object", path.display())));
        };
        Self::from_map(&map).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
    }

    pub fn from_map(map: &Map<String, Value>) -> Result<Self, String> {
        let d = Self::default();
        let mut used = BTreeSet::new();
        let mut s = Self {
            synth: overlay(&d.synth, map, &mut used)?,
            circle: overlay(&d.circle, map, &mut used)?,
            augment: overlay(&d.augment, map, &mut used)?,
            train: overlay(&d.train, map, &mut used)?,
            explain: overlay(&d.explain, map, &mut used)?,
        };
        let unknown: Vec<&String> = map.keys().filter(|k| !used.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(format!("unknown config keys {unknown:?}"));
        }
        // Augmentation stays on unless the config nulls it; its fields come
        // from the flat keys.
        if s.train.augmentation.is_some() {
            s.train.augmentation = Some(s.augment.clone());
        }
        Ok(s)
    }

    /// Sets every stage's seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.augment.seed = seed;
        self.train.seed = seed;
        self.explain.seed = seed;
        if let Some(a) = &mut self.train.augmentation {
            a.seed = seed;
        }
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, map: &Map<String, Value>, used: &mut BTreeSet<String>) -> Result<T, String> {
    let mut v = serde_json::to_value(base).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().expect("settings structs serialize to objects");
    for (k, val) in map {
        if obj.contains_key(k) {
            obj.insert(k.clone(), val.clone());
            used.insert(k.clone());
        }
    }
    serde_json::from_value(v).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn map(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn keys_reach_every_stage_that_has_them() {
        let s = Settings::from_map(&map(json!({"seed": 9, "epochs": 3, "noise_sigma": 2.0, "n_samples": 50}))).unwrap();
        assert_eq!((s.synth.seed, s.train.seed, s.explain.seed, s.augment.seed), (9, 9, 9, 9));
        assert_eq!(s.train.epochs, 3);
        assert_eq!(s.train.augmentation.as_ref().unwrap().noise_sigma, 2.0);
        assert_eq!(s.explain.n_samples, 50);
    }

    #[test]
    fn unknown_and_ill_typed_keys_are_rejected() {
        assert!(Settings::from_map(&map(json!({"epoch": 3}))).unwrap_err().contains("epoch"));
        assert!(Settings::from_map(&map(json!({"epochs": "many"}))).is_err());
    }

    #[test]
    fn augmentation_can_be_disabled() {
        let s = Settings::from_map(&map(json!({"augmentation": null}))).unwrap();
        assert!(s.train.augmentation.is_none());
        assert_eq!(Settings::from_map(&Map::new()).unwrap(), Settings::default());
    }
}
