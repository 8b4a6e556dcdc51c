#![allow(dead_code)]

pub mod model;

use std::path::PathBuf;

use serde_json::Value;

pub fn schema_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub struct Schema {
    name: String,
    validator: jsonschema::Validator,
}

impl Schema {
    pub fn load(name: &str) -> Self {
        let path = schema_dir().join(format!("{name}.schema.json"));
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let schema: Value = serde_json::from_str(&text).unwrap();
        let validator = jsonschema::validator_for(&schema).unwrap_or_else(|e| panic!("{name}: {e}"));
        Self {
            name: name.into(),
            validator,
        }
    }

    pub fn check(&self, instance: &Value) {
        let errors: Vec<String> = self.validator.iter_errors(instance).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{} rejects {instance}: {errors:?}", self.name);
    }

    pub fn check_all(&self, list: &Value) {
        for item in list.as_array().expect("array") {
            self.check(item);
        }
    }

    pub fn accepts(&self, instance: &Value) -> bool {
        self.validator.is_valid(instance)
    }
}
