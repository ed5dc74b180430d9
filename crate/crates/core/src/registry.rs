//! Expert pool: profiles, meta-descriptions and dense integer IDs.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ExpertId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("expert name {0:?} is already registered")]
    DuplicateName(String),
    #[error("invalid expert profile: {0}")]
    Validation(String),
    #[error("expert {0} not found")]
    NotFound(ExpertId),
    #[error("expert pool is empty")]
    EmptyPool,
    #[error("malformed registry snapshot: {0}")]
    Snapshot(String),
}

/// Which of the two meta-description styles to route against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionStyle {
    /// Literal phrases using task vocabulary.
    Simple,
    /// Generalized intent language without concrete objects.
    Abstract,
}

impl DescriptionStyle {
    pub const ALL: [DescriptionStyle; 2] = [DescriptionStyle::Simple, DescriptionStyle::Abstract];

    pub fn as_str(self) -> &'static str {
        match self {
            DescriptionStyle::Simple => "simple",
            DescriptionStyle::Abstract => "abstract",
        }
    }
}

impl fmt::Display for DescriptionStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DescriptionStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(DescriptionStyle::Simple),
            "abstract" => Ok(DescriptionStyle::Abstract),
            other => Err(format!("unknown description style {other:?}")),
        }
    }
}

/// Registration input: everything in a profile except the assigned id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewExpert {
    pub name: String,
    pub meta_simple: String,
    pub meta_abstract: String,
    pub category_label: String,
    pub adapter_id: String,
    pub adapter_size_bytes: u64,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertProfile {
    pub expert_id: ExpertId,
    pub name: String,
    pub meta_simple: String,
    pub meta_abstract: String,
    pub category_label: String,
    pub adapter_id: String,
    pub adapter_size_bytes: u64,
    pub endpoint: String,
}

impl ExpertProfile {
    pub fn description(&self, style: DescriptionStyle) -> &str {
        match style {
            DescriptionStyle::Simple => &self.meta_simple,
            DescriptionStyle::Abstract => &self.meta_abstract,
        }
    }

    fn from_new(expert_id: ExpertId, p: NewExpert) -> Self {
        ExpertProfile {
            expert_id,
            name: p.name,
            meta_simple: p.meta_simple,
            meta_abstract: p.meta_abstract,
            category_label: p.category_label,
            adapter_id: p.adapter_id,
            adapter_size_bytes: p.adapter_size_bytes,
            endpoint: p.endpoint,
        }
    }
}

/// One `(expert_id, description)` line of a catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub expert_id: ExpertId,
    pub description: String,
}

/// Descriptions of every registered expert in id order, in one style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub style: DescriptionStyle,
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Append-only expert registry. Ids are dense and follow registration order.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    experts: Vec<ExpertProfile>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[ExpertProfile] {
        &self.experts
    }

    /// Validates `profile` and appends it, returning the new id (the previous size).
    pub fn register(&mut self, profile: NewExpert) -> Result<ExpertId, RegistryError> {
        validate(&profile)?;
        if self.experts.iter().any(|e| e.name == profile.name) {
            return Err(RegistryError::DuplicateName(profile.name));
        }
        let id = self.experts.len();
        self.experts.push(ExpertProfile::from_new(id, profile));
        Ok(id)
    }

    pub fn get(&self, expert_id: ExpertId) -> Result<&ExpertProfile, RegistryError> {
        self.experts.get(expert_id).ok_or(RegistryError::NotFound(expert_id))
    }

    pub fn catalog(&self, style: DescriptionStyle) -> Result<Catalog, RegistryError> {
        if self.experts.is_empty() {
            return Err(RegistryError::EmptyPool);
        }
        Ok(Catalog {
            style,
            entries: self
                .experts
                .iter()
                .map(|e| CatalogEntry { expert_id: e.expert_id, description: e.description(style).to_string() })
                .collect(),
        })
    }

    /// Serializes the registry as a JSON array of profile objects.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.experts).expect("profiles always serialize")
    }

    /// Loads a snapshot written by [`Registry::to_json`]. Ids must be dense from 0
    /// and in order; every profile is re-validated.
    pub fn from_json(json: &str) -> Result<Self, RegistryError> {
        let profiles: Vec<ExpertProfile> =
            serde_json::from_str(json).map_err(|e| RegistryError::Snapshot(e.to_string()))?;
        let mut names = HashSet::new();
        for (i, p) in profiles.iter().enumerate() {
            if p.expert_id != i {
                return Err(RegistryError::Snapshot(format!(
                    "expert_id {} at position {i}; ids must be dense and ordered",
                    p.expert_id
                )));
            }
            if !names.insert(p.name.as_str()) {
                return Err(RegistryError::DuplicateName(p.name.clone()));
            }
            validate_fields(&p.meta_simple, &p.meta_abstract, p.adapter_size_bytes, &p.endpoint)?;
        }
        Ok(Registry { experts: profiles })
    }
}

fn validate(p: &NewExpert) -> Result<(), RegistryError> {
    if p.name.trim().is_empty() {
        return Err(RegistryError::Validation("name must not be empty".into()));
    }
    validate_fields(&p.meta_simple, &p.meta_abstract, p.adapter_size_bytes, &p.endpoint)
}

fn validate_fields(
    meta_simple: &str,
    meta_abstract: &str,
    adapter_size_bytes: u64,
    endpoint: &str,
) -> Result<(), RegistryError> {
    if meta_simple.trim().is_empty() {
        return Err(RegistryError::Validation("meta_simple must not be empty".into()));
    }
    if meta_abstract.trim().is_empty() {
        return Err(RegistryError::Validation("meta_abstract must not be empty".into()));
    }
    if adapter_size_bytes == 0 {
        return Err(RegistryError::Validation("adapter_size_bytes must be positive".into()));
    }
    match url::Url::parse(endpoint) {
        Ok(u) if u.has_host() || u.scheme() == "mock" => Ok(()),
        Ok(_) => Err(RegistryError::Validation(format!("endpoint {endpoint:?} has no host"))),
        Err(e) => Err(RegistryError::Validation(format!("endpoint {endpoint:?}: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn expert(name: &str) -> NewExpert {
        NewExpert {
            name: name.to_string(),
            meta_simple: format!("{name} simple"),
            meta_abstract: format!("{name} abstract"),
            category_label: format!("{name}_cat"),
            adapter_id: format!("{name}-lora"),
            adapter_size_bytes: 100,
            endpoint: "http://127.0.0.1:9000/execute".into(),
        }
    }

    #[test]
    fn first_registration_gets_id_zero() {
        let mut r = Registry::new();
        assert_eq!(r.register(expert("a")).unwrap(), 0);
    }

    #[test]
    fn three_registrations_are_dense() {
        let mut r = Registry::new();
        let ids: Vec<_> = ["a", "b", "c"].iter().map(|n| r.register(expert(n)).unwrap()).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(r.len(), 3);
        assert_eq!(r.get(2).unwrap().name, "c");
    }

    #[test]
    fn empty_meta_is_rejected() {
        let mut r = Registry::new();
        let mut p = expert("a");
        p.meta_simple = "  ".into();
        assert!(matches!(r.register(p), Err(RegistryError::Validation(_))));
        assert!(r.is_empty());
    }

    #[test]
    fn bad_endpoint_and_duplicates() {
        let mut r = Registry::new();
        let mut p = expert("a");
        p.endpoint = "not a uri".into();
        assert!(matches!(r.register(p), Err(RegistryError::Validation(_))));
        r.register(expert("a")).unwrap();
        assert_eq!(r.register(expert("a")), Err(RegistryError::DuplicateName("a".into())));
    }

    #[test]
    fn zero_adapter_size_is_rejected() {
        let mut p = expert("a");
        p.adapter_size_bytes = 0;
        assert!(Registry::new().register(p).is_err());
    }

    #[test]
    fn get_out_of_range() {
        let mut r = Registry::new();
        for n in ["a", "b", "c"] {
            r.register(expert(n)).unwrap();
        }
        assert_eq!(r.get(5), Err(RegistryError::NotFound(5)));
    }

    #[test]
    fn catalog_projects_by_style() {
        let mut r = Registry::new();
        r.register(expert("a")).unwrap();
        r.register(expert("b")).unwrap();
        let simple = r.catalog(DescriptionStyle::Simple).unwrap();
        let got: Vec<_> = simple.entries.iter().map(|e| (e.expert_id, e.description.as_str())).collect();
        assert_eq!(got, vec![(0, "a simple"), (1, "b simple")]);
        let abs = r.catalog(DescriptionStyle::Abstract).unwrap();
        assert_eq!(abs.entries[1].description, "b abstract");
        assert_eq!(Registry::new().catalog(DescriptionStyle::Simple), Err(RegistryError::EmptyPool));
    }

    #[test]
    fn snapshot_round_trip_and_id_check() {
        let mut r = Registry::new();
        r.register(expert("a")).unwrap();
        r.register(expert("b")).unwrap();
        let json = r.to_json();
        let back = Registry::from_json(&json).unwrap();
        assert_eq!(back.experts(), r.experts());

        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let keys: Vec<_> = v[0].as_object().unwrap().keys().cloned().collect();
        for k in [
            "expert_id",
            "name",
            "meta_simple",
            "meta_abstract",
            "category_label",
            "adapter_id",
            "adapter_size_bytes",
            "endpoint",
        ] {
            assert!(keys.iter().any(|x| x == k), "missing {k}");
        }

        let mut bad: Vec<ExpertProfile> = r.experts().to_vec();
        bad.swap(0, 1);
        assert!(matches!(Registry::from_json(&serde_json::to_string(&bad).unwrap()), Err(RegistryError::Snapshot(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn register_get_round_trip(descs in proptest::collection::vec(("[a-z]{1,8}", "[a-z ]{0,6}[a-z]", "[a-z]{1,12}"), 1..12)) {
                let mut r = Registry::new();
                let mut inputs = Vec::new();
                for (i, (s, a, cat)) in descs.into_iter().enumerate() {
                    let p = NewExpert {
                        name: format!("e{i}"),
                        meta_simple: s,
                        meta_abstract: a,
                        category_label: cat,
                        adapter_id: format!("lora{i}"),
                        adapter_size_bytes: 1 + i as u64,
                        endpoint: format!("http://host{i}:80/x"),
                    };
                    let id = r.register(p.clone()).unwrap();
                    inputs.push((id, p));
                }
                for (id, p) in &inputs {
                    let got = r.get(*id).unwrap();
                    prop_assert_eq!(&got.name, &p.name);
                    prop_assert_eq!(&got.meta_simple, &p.meta_simple);
                    prop_assert_eq!(&got.meta_abstract, &p.meta_abstract);
                    prop_assert_eq!(&got.category_label, &p.category_label);
                    prop_assert_eq!(got.adapter_size_bytes, p.adapter_size_bytes);
                    prop_assert_eq!(&got.endpoint, &p.endpoint);
                }
                for style in DescriptionStyle::ALL {
                    let c = r.catalog(style).unwrap();
                    prop_assert_eq!(c.len(), r.len());
                    prop_assert!(c.entries.windows(2).all(|w| w[0].expert_id < w[1].expert_id));
                }
            }
        }
    }
}
