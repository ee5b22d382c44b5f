use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite every tensor from a flat vector laid out as [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Copy of `self` with every name prefixed.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (n, t) in other.entries {
            self.insert(n, t)?;
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            p.insert("a", Tensor::scalar(2.0)),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn flat_roundtrip_and_prefixes() {
        let mut p = ParamSet::new();
        p.insert("theta1/w", Tensor::from_fn(&[2, 2], |i| i as f64))
            .unwrap();
        p.insert("theta2/b", Tensor::scalar(9.0)).unwrap();
        let flat = p.flatten();
        assert_eq!(flat, vec![0.0, 1.0, 2.0, 3.0, 9.0]);
        let mut q = p.clone();
        q.assign_flat(&[5.0; 5]).unwrap();
        assert_eq!(q.get("theta2/b").unwrap().item(), 5.0);
        let t1 = p.strip_prefix("theta1/");
        assert_eq!(t1.names().collect::<Vec<_>>(), vec!["w"]);
        assert_eq!(t1.with_prefix("theta1/").get("theta1/w"), p.get("theta1/w"));
    }
}
