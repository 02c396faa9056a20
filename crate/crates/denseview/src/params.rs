//! Named, shaped parameter tensors with a frozen/trainable partitioning.
//!
//! Checkpoint format: one tensor container per parameter plus `index.txt`
//! with `name<TAB>extents-comma-joined<TAB>tag` lines, tag ∈ base|lora|branch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Base,
    Lora,
    Branch,
}

impl Partition {
    pub fn tag(self) -> &'static str {
        match self {
            Partition::Base => "base",
            Partition::Lora => "lora",
            Partition::Branch => "branch",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "base" => Ok(Partition::Base),
            "lora" => Ok(Partition::Lora),
            "branch" => Ok(Partition::Branch),
            other => Err(Error::data(format!("unknown partition tag `{}`", other))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, (Tensor, Partition)>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, partition: Partition) {
        self.entries.insert(name.into(), (tensor, partition));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| Error::data(format!("missing parameter `{}`", name)))
    }

    pub fn partition(&self, name: &str) -> Result<Partition> {
        self.entries
            .get(name)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::data(format!("missing parameter `{}`", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor, Partition)> {
        self.entries.iter().map(|(k, (t, p))| (k, t, *p))
    }

    pub fn names_in(&self, partition: Partition) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, (_, p))| *p == partition)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Replaces a value, keeping shape and partition.
    pub fn update(&mut self, name: &str, value: Tensor) -> Result<()> {
        let (current, _) = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::data(format!("missing parameter `{}`", name)))?;
        if current.shape() != value.shape() {
            return Err(Error::shape(format!(
                "update `{}`: {:?} vs {:?}",
                name,
                value.shape(),
                current.shape()
            )));
        }
        *current = value;
        Ok(())
    }

    /// Merges another store; duplicate names are an error.
    pub fn absorb(&mut self, other: ParameterStore) -> Result<()> {
        for (name, (tensor, partition)) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::data(format!("duplicate parameter `{}`", name)));
            }
            self.entries.insert(name, (tensor, partition));
        }
        Ok(())
    }

    /// Registers every parameter on the tape: names in `trainable` become
    /// tracked leaves, everything else enters as a constant.
    pub fn vars(&self, tape: &mut Tape, trainable: &[Partition]) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(name, (tensor, partition))| {
                let var = if trainable.contains(partition) {
                    tape.param(name.clone(), tensor.clone())
                } else {
                    tape.constant(tensor.clone())
                };
                (name.clone(), var)
            })
            .collect()
    }

    /// Deep copy of current values (for freezing-contract checks).
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries.iter().map(|(k, (t, _))| (k.clone(), t.clone())).collect()
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut index = String::new();
        for (name, (tensor, partition)) in &self.entries {
            tensor.save(dir.join(format!("{}.c4dt", name)))?;
            let extents: Vec<String> = tensor.shape().iter().map(|e| e.to_string()).collect();
            index.push_str(&format!("{}\t{}\t{}\n", name, extents.join(","), partition.tag()));
        }
        fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = fs::read_to_string(dir.join("index.txt"))
            .map_err(|e| Error::data(format!("{}: {}", dir.join("index.txt").display(), e)))?;
        let mut store = ParameterStore::new();
        for (lineno, line) in index.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::data(format!("index.txt line {}: want 3 fields", lineno + 1)));
            }
            let tensor = Tensor::load(dir.join(format!("{}.c4dt", fields[0])))?;
            let declared: Vec<usize> = if fields[1].is_empty() {
                Vec::new()
            } else {
                fields[1]
                    .split(',')
                    .map(|e| e.parse().map_err(|_| Error::data(format!("bad extent {}", e))))
                    .collect::<Result<_>>()?
            };
            if tensor.shape() != declared.as_slice() {
                return Err(Error::data(format!(
                    "`{}`: index says {:?}, file has {:?}",
                    fields[0],
                    declared,
                    tensor.shape()
                )));
            }
            store.insert(fields[0], tensor, Partition::from_tag(fields[2])?);
        }
        Ok(store)
    }
}
