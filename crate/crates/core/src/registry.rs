//! Name-keyed registries of interchangeable strategies.
//!
//! Each strategy family (counterfactual policies, token samplers, attribute
//! judges, metrics) is a trait; implementations register a constructor under
//! a stable name and are selected at runtime from configuration.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Builder<T, C> = fn(&C) -> Result<Box<T>>;

pub struct Entry<T: ?Sized, C> {
    pub description: &'static str,
    build: Builder<T, C>,
}

pub struct Registry<T: ?Sized, C = ()> {
    family: &'static str,
    entries: BTreeMap<&'static str, Entry<T, C>>,
}

impl<T: ?Sized, C> Registry<T, C> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(mut self, name: &'static str, description: &'static str, build: Builder<T, C>) -> Self {
        let previous = self.entries.insert(name, Entry { description, build });
        assert!(previous.is_none(), "{} strategy {name} registered twice", self.family);
        self
    }

    pub fn build(&self, name: &str, ctx: &C) -> Result<Box<T>> {
        match self.entries.get(name) {
            Some(e) => (e.build)(ctx),
            None => Err(Error::Config(format!(
                "unknown {} '{name}', available: {}",
                self.family,
                self.names().join(", ")
            ))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|(k, e)| (*k, e.description)).collect()
    }
}
