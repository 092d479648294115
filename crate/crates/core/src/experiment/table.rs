use std::collections::HashMap;

use super::ExperimentRecord;

type Key = (String, u64, usize);

/// Observables of many records indexed by `(name, param, component)`.
pub struct ObservableTable<'a> {
    records: &'a [ExperimentRecord],
    index: Vec<HashMap<Key, f64>>,
}

impl<'a> ObservableTable<'a> {
    pub fn new(records: &'a [ExperimentRecord]) -> Self {
        let index = records
            .iter()
            .map(|r| r.observables.iter().map(|o| ((o.name.clone(), o.param.to_bits(), o.component), o.value)).collect())
            .collect();
        Self { records, index }
    }

    pub fn records(&self) -> &'a [ExperimentRecord] {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, record: usize, name: &str, param: f64, component: usize) -> Option<f64> {
        self.index[record].get(&(name.to_string(), param.to_bits(), component)).copied()
    }

    /// One value per record that has the observable, in record order.
    pub fn column(&self, name: &str, param: f64, component: usize) -> Vec<f64> {
        (0..self.len()).filter_map(|r| self.get(r, name, param, component)).collect()
    }

    /// Sorted distinct parameters of an observable.
    pub fn params(&self, name: &str) -> Vec<f64> {
        let mut out: Vec<f64> =
            self.records.iter().flat_map(|r| r.observables.iter()).filter(|o| o.name == name).map(|o| o.param).collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Largest component index of an observable plus one.
    pub fn components(&self, name: &str) -> usize {
        self.records
            .iter()
            .flat_map(|r| r.observables.iter())
            .filter(|o| o.name == name)
            .map(|o| o.component + 1)
            .max()
            .unwrap_or(0)
    }
}
