use super::array::DiffArray;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable arrays.
///
/// Registration order is the checkpoint order and the optimizer order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<DiffArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: DiffArray) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.params.push(value.with_grad());
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &DiffArray {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffArray {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(DiffArray::zero_grad);
    }

    /// Total scalar count of all parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, p)| p.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(DiffArray::len).sum()
    }
}
