use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use negolab_core::model::PolicyModel;

use crate::error::ArenaError;

/// Read-only set of agents humans can be paired with, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<PolicyModel>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_model(mut self, id: impl Into<String>, model: PolicyModel) -> Self {
        self.models.insert(id.into(), Arc::new(model));
        self
    }

    /// Loads every `*.json` model file in `dir`; the file stem is the id.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ArenaError> {
        let dir = dir.as_ref();
        let mut registry = ModelRegistry::new();
        let entries = std::fs::read_dir(dir).map_err(|e| ArenaError::Registry(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let model =
                PolicyModel::load(&path).map_err(|e| ArenaError::Registry(format!("{}: {e}", path.display())))?;
            registry.models.insert(id.to_string(), Arc::new(model));
        }
        if registry.models.is_empty() {
            return Err(ArenaError::Registry(format!("no models in {}", dir.display())));
        }
        Ok(registry)
    }

    pub fn get(&self, id: &str) -> Result<Arc<PolicyModel>, ArenaError> {
        self.models.get(id).cloned().ok_or_else(|| ArenaError::UnknownModel(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}
