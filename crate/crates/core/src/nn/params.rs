use std::collections::HashSet;

use super::{NnError, Tensor};

/// Ordered, named collection of parameter tensors.
///
/// Order is significant: two sets are layout-compatible only when they hold
/// the same names with the same dims in the same order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self, NnError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(NnError::Precondition(format!("duplicate parameter name {name:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub(crate) fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    /// Total number of scalar elements.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names, order and dims.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.dims() == tb.dims())
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<(), NnError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(NnError::ArchitectureMismatch(format!(
                "layouts differ: [{}] vs [{}]",
                describe(self),
                describe(other)
            )))
        }
    }

    /// Sub-set holding exactly `names`, in this set's order.
    pub fn select<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<ParamSet, NnError> {
        let wanted: HashSet<&str> = names.into_iter().collect();
        let entries: Vec<_> = self
            .entries
            .iter()
            .filter(|(n, _)| wanted.contains(n.as_str()))
            .cloned()
            .collect();
        if entries.len() != wanted.len() {
            return Err(NnError::ArchitectureMismatch(format!(
                "selection of {} names matched only {}",
                wanted.len(),
                entries.len()
            )));
        }
        Ok(Self { entries })
    }

    /// Copy of `self` with every entry of `overrides` substituted by name.
    pub fn with_overrides(&self, overrides: &ParamSet) -> Result<ParamSet, NnError> {
        let mut out = self.clone();
        for (name, tensor) in &overrides.entries {
            let slot = out
                .entries
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| NnError::ArchitectureMismatch(format!("unknown entry {name:?}")))?;
            if slot.1.dims() != tensor.dims() {
                return Err(NnError::ArchitectureMismatch(format!(
                    "entry {name:?} has dims {:?}, override has {:?}",
                    slot.1.dims(),
                    tensor.dims()
                )));
            }
            slot.1 = tensor.clone();
        }
        Ok(out)
    }

    /// Bitwise equality of every element.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    /// Largest elementwise absolute difference. Layouts must match.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64, NnError> {
        self.check_layout(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

fn describe(p: &ParamSet) -> String {
    p.entries
        .iter()
        .map(|(n, t)| format!("{n}{:?}", t.dims()))
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(names: &[&str]) -> ParamSet {
        ParamSet::new(
            names
                .iter()
                .map(|n| (n.to_string(), Tensor::filled(vec![2], 1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(vec![1]);
        let r = ParamSet::new(vec![("a".into(), t.clone()), ("a".into(), t)]);
        assert!(r.is_err());
    }

    #[test]
    fn select_keeps_canonical_order() {
        let p = set(&["a", "b", "c"]);
        let s = p.select(["c", "a"]).unwrap();
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "c"]);
        assert!(p.select(["zz"]).is_err());
    }

    #[test]
    fn overrides_replace_by_name() {
        let p = set(&["a", "b"]);
        let o = ParamSet::new(vec![("b".into(), Tensor::filled(vec![2], 5.0))]).unwrap();
        let q = p.with_overrides(&o).unwrap();
        assert_eq!(q.get("a").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(q.get("b").unwrap().data(), &[5.0, 5.0]);
        let bad = ParamSet::new(vec![("b".into(), Tensor::zeros(vec![3]))]).unwrap();
        assert!(p.with_overrides(&bad).is_err());
    }
}
