//! Registered graders, loaded from a TOML file:
//!
//! ```toml
//! [[grader]]
//! id = "retina-a"
//! role = "specialist"
//!
//! [[grader]]
//! id = "retina-senior"
//! role = "senior_specialist"
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use drscreen_core::model::{GraderId, GraderRole};
use serde::Deserialize;

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GraderEntry {
    pub id: GraderId,
    pub role: GraderRole,
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    #[serde(rename = "grader", default)]
    graders: Vec<GraderEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    graders: BTreeMap<GraderId, GraderRole>,
}

impl Registry {
    pub fn new(entries: impl IntoIterator<Item = GraderEntry>) -> Result<Self, ServiceError> {
        let mut graders = BTreeMap::new();
        for e in entries {
            if !matches!(e.role, GraderRole::Specialist | GraderRole::SeniorSpecialist) {
                return Err(ServiceError::config(format!("grader {} has role {}; only adjudicators register", e.id, e.role)));
            }
            if graders.insert(e.id.clone(), e.role).is_some() {
                return Err(ServiceError::config(format!("grader {} is registered twice", e.id)));
            }
        }
        Ok(Registry { graders })
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let file: RegistryFile =
            toml::from_str(text).map_err(|e| ServiceError::config(format!("grader registry: {e}")))?;
        Registry::new(file.graders)
    }

    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::config(format!("grader registry {}: {e}", path.display())))?;
        Registry::from_toml(&text)
    }

    pub fn role(&self, id: &GraderId) -> Option<GraderRole> {
        self.graders.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.graders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graders.is_empty()
    }
}
