//! Name → constructor tables for runtime-selected strategies.

use crate::error::{Error, Result};

pub struct Registry<F> {
    kind: &'static str,
    entries: Vec<(&'static str, F)>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Later registrations under the same name shadow earlier ones.
    pub fn register(mut self, name: &'static str, ctor: F) -> Self {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, ctor));
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &F)> {
        self.entries.iter().map(|(n, f)| (*n, f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_shadowing() {
        let r = Registry::new("widget")
            .register("a", 1)
            .register("b", 2)
            .register("a", 3);
        assert_eq!(*r.get("a").unwrap(), 3);
        assert_eq!(r.names(), vec!["b", "a"]);
        let err = r.get("zzz").unwrap_err().to_string();
        assert!(err.contains("widget") && err.contains("b, a"), "{err}");
    }
}
