use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::Rng;

use super::{
    param_count, Adapter, AdapterSpec, AsymAdapter, LoraAdapter, MoeAsymAdapter, MoeLoraAdapter, ParamCount,
    SchemeKind,
};

/// Builds adapters of one scheme.
pub trait SchemeFactory: Send + Sync {
    fn name(&self) -> &str;

    fn kind(&self) -> SchemeKind;

    fn build(&self, spec: &AdapterSpec, rng: &mut Rng) -> Result<Box<dyn Adapter>>;

    fn param_count(&self, spec: &AdapterSpec) -> ParamCount {
        param_count(
            self.kind(),
            spec.d_in,
            spec.d_out,
            spec.rank,
            spec.num_tasks,
            spec.num_experts,
        )
    }
}

struct BuiltinFactory {
    kind: SchemeKind,
    build: fn(AdapterSpec, &mut Rng) -> Result<Box<dyn Adapter>>,
}

impl SchemeFactory for BuiltinFactory {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn kind(&self) -> SchemeKind {
        self.kind
    }

    fn build(&self, spec: &AdapterSpec, rng: &mut Rng) -> Result<Box<dyn Adapter>> {
        (self.build)(AdapterSpec { kind: self.kind, ..*spec }, rng)
    }
}

/// Name → factory table used by configs and the CLI.
pub struct SchemeRegistry {
    factories: BTreeMap<String, Box<dyn SchemeFactory>>,
}

impl Default for SchemeRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl SchemeRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(BuiltinFactory {
            kind: SchemeKind::Lora,
            build: |s, rng| Ok(Box::new(LoraAdapter::init(s, rng)?)),
        }));
        reg.register(Box::new(BuiltinFactory {
            kind: SchemeKind::MoeLora,
            build: |s, rng| Ok(Box::new(MoeLoraAdapter::init(s, rng)?)),
        }));
        reg.register(Box::new(BuiltinFactory {
            kind: SchemeKind::AsymLora,
            build: |s, rng| Ok(Box::new(AsymAdapter::init(s, rng)?)),
        }));
        reg.register(Box::new(BuiltinFactory {
            kind: SchemeKind::MoeAsymLora,
            build: |s, rng| Ok(Box::new(MoeAsymAdapter::init(s, rng)?)),
        }));
        reg
    }

    /// Replaces any factory already registered under the same name.
    pub fn register(&mut self, factory: Box<dyn SchemeFactory>) {
        self.factories.insert(factory.name().to_string(), factory);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SchemeFactory> {
        self.factories
            .get(name)
            .map(|f| f.as_ref())
            .ok_or_else(|| Error::UnknownName {
                kind: "scheme",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, spec: &AdapterSpec, rng: &mut Rng) -> Result<Box<dyn Adapter>> {
        self.get(name)?.build(spec, rng)
    }
}
