use serde::{Deserialize, Serialize};

use super::DataError;

/// A labelled set of instances. Instance order is storage order only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    pub instances: Vec<Vec<f64>>,
    pub label: bool,
    pub instance_labels: Option<Vec<bool>>,
}

impl Bag {
    pub fn new(
        id: impl Into<String>,
        instances: Vec<Vec<f64>>,
        label: bool,
        instance_labels: Option<Vec<bool>>,
    ) -> Result<Self, DataError> {
        let bag = Self { id: id.into(), instances, label, instance_labels };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: String| DataError::InvalidBag { bag_id: self.id.clone(), reason };
        let Some(first) = self.instances.first() else {
            return Err(invalid("bag has no instances".into()));
        };
        let d = first.len();
        if d == 0 {
            return Err(invalid("instances have no features".into()));
        }
        if self.instances.iter().any(|x| x.len() != d) {
            return Err(invalid("instances differ in dimension".into()));
        }
        if self.instances.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature value".into()));
        }
        if let Some(labels) = &self.instance_labels {
            if labels.len() != self.instances.len() {
                return Err(invalid(format!(
                    "{} instance labels for {} instances",
                    labels.len(),
                    self.instances.len()
                )));
            }
            if !self.label && labels.iter().any(|&l| l) {
                return Err(invalid("negative bag contains a positive instance".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.instances[0].len()
    }

    pub fn label_f64(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }

    /// Copy with instances reordered so that new position `i` holds old `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Bag {
        Bag {
            id: self.id.clone(),
            instances: order.iter().map(|&i| self.instances[i].clone()).collect(),
            label: self.label,
            instance_labels: self.instance_labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Named collection of bags sharing a feature dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilDataset {
    pub name: String,
    dim: usize,
    bags: Vec<Bag>,
}

impl MilDataset {
    pub fn new(name: impl Into<String>, bags: Vec<Bag>) -> Result<Self, DataError> {
        let name = name.into();
        let Some(first) = bags.first() else {
            return Err(DataError::Empty(name));
        };
        let dim = first.dim();
        let mut seen = std::collections::HashSet::new();
        for bag in &bags {
            bag.validate()?;
            if bag.dim() != dim {
                return Err(DataError::InvalidBag {
                    bag_id: bag.id.clone(),
                    reason: format!("dimension {} differs from dataset dimension {dim}", bag.dim()),
                });
            }
            if !seen.insert(bag.id.as_str()) {
                return Err(DataError::InvalidBag { bag_id: bag.id.clone(), reason: "duplicate bag id".into() });
            }
        }
        Ok(Self { name, dim, bags })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    pub fn num_positive(&self) -> usize {
        self.bags.iter().filter(|b| b.label).count()
    }

    pub fn has_instance_labels(&self) -> bool {
        self.bags.iter().any(|b| b.instance_labels.is_some())
    }

    pub fn get(&self, id: &str) -> Option<&Bag> {
        self.bags.iter().find(|b| b.id == id)
    }

    /// Sub-dataset with the given bag ids, in the given order.
    pub fn subset(&self, name: impl Into<String>, ids: &[String]) -> Result<MilDataset, DataError> {
        let index: std::collections::HashMap<&str, &Bag> = self.bags.iter().map(|b| (b.id.as_str(), b)).collect();
        let bags = ids
            .iter()
            .map(|id| index.get(id.as_str()).map(|b| (*b).clone()).ok_or_else(|| DataError::UnknownBag(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        MilDataset::new(name, bags)
    }

    pub(crate) fn map_instances(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> MilDataset {
        let bags = self
            .bags
            .iter()
            .map(|b| Bag { instances: b.instances.iter().map(|x| f(x)).collect(), ..b.clone() })
            .collect();
        MilDataset { name: self.name.clone(), dim: self.dim, bags }
    }
}
