//! Name-keyed registry of interchangeable strategies.
//!
//! Each family of variants (triplet objectives, removal strategies) implements
//! a common trait and is registered under a stable name; configs and CLI flags
//! select one by that name at runtime.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `item` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, item: Arc<T>) -> &mut Self {
        self.entries.insert(name.into(), item);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::invalid(format!(
                "unknown {} '{name}' (available: {})",
                self.kind,
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Send + Sync {
        fn greet(&self) -> String;
    }
    struct Hello;
    impl Greeter for Hello {
        fn greet(&self) -> String {
            "hello".into()
        }
    }

    #[test]
    fn lookup_by_name() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("hello", Arc::new(Hello));
        assert_eq!(r.get("hello").unwrap().greet(), "hello");
        let err = r.get("bye").err().unwrap().to_string();
        assert!(err.contains("unknown greeter 'bye'"), "{err}");
        assert!(err.contains("hello"));
    }
}
