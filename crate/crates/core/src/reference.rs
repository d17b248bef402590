//! Bundled reference tuple set for the rotated surface-code circuit.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, LayerTuple};
use crate::design::{DesignError, ExperimentalDesign, LsKind, TupleOrigin};

const REFERENCE_D3: &str = include_str!("../data/reference_design_d3.json");

/// A tuple set given as base tuples, repetition numbers and shot weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TupleSetFile {
    pub code: String,
    pub distance: usize,
    pub ls_kind: LsKind,
    pub tuples: Vec<TupleSetEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TupleSetEntry {
    pub weight: f64,
    /// Unique-layer ids.
    pub base: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
}

impl TupleSetFile {
    pub fn tuples(&self) -> Vec<LayerTuple> {
        self.tuples
            .iter()
            .map(|e| LayerTuple::new(e.base.clone()).repeated(e.repetitions.unwrap_or(1)))
            .collect()
    }

    /// Builds the design on `circuit` with the stored weights, renormalised.
    pub fn to_design(&self, circuit: Arc<Circuit>) -> Result<ExperimentalDesign, DesignError> {
        let origins = self
            .tuples
            .iter()
            .map(|e| match e.repetitions {
                Some(r) => TupleOrigin::Repeated {
                    base: LayerTuple::new(e.base.clone()),
                    repetitions: r,
                },
                None => TupleOrigin::Given,
            })
            .collect();
        let mut d = ExperimentalDesign::build_with_origins(circuit, &self.tuples(), origins)?;
        let s: f64 = self.tuples.iter().map(|e| e.weight).sum();
        d.set_weights(self.tuples.iter().map(|e| e.weight / s).collect())?;
        d.ls_kind = self.ls_kind;
        Ok(d)
    }
}

/// The 31-tuple design tuned for depolarising noise on the distance-3
/// rotated circuit, with four-layer repeated tuples and published weights.
pub fn reference_tuple_set() -> TupleSetFile {
    serde_json::from_str(REFERENCE_D3).expect("bundled reference design parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::build_rotated_surface_circuit;

    #[test]
    fn reference_set_shape() {
        let r = reference_tuple_set();
        assert_eq!(r.tuples.len(), 31);
        let t = r.tuples();
        assert_eq!(t[3].len(), 100);
        assert_eq!(t[2].len(), 191);
    }

    #[test]
    fn reference_design_experiment_count_d3() {
        let c = Arc::new(build_rotated_surface_circuit(3).unwrap());
        let d = reference_tuple_set().to_design(c).unwrap();
        println!("experiments per tuple: {:?}", d.blocks().iter().map(|b| b.experiments.len()).collect::<Vec<_>>());
        assert_eq!(d.experiment_count(), 261);
    }
}

#[cfg(test)]
mod scale_tests {
    use super::*;
    use crate::circuit::build_rotated_surface_circuit;

    #[test]
    fn reference_design_counts_d25() {
        let t = std::time::Instant::now();
        let c = Arc::new(build_rotated_surface_circuit(25).unwrap());
        let d = reference_tuple_set().to_design(c).unwrap();
        println!("{:?} in {:?}", d.summary(), t.elapsed());
        assert_eq!(d.experiment_count(), 261);
        assert_eq!(d.row_count(), 267_357);
        assert_eq!(d.parameter_count(), 51_576);
    }
}
