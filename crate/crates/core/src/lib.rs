//! Averaged circuit eigenvalue sampling for layered Clifford circuits.
//!
//! The crate covers the full characterisation pipeline: Pauli algebra,
//! surface-code syndrome-extraction circuits, Pauli noise models, experimental
//! designs and their figure of merit, design optimisation, Monte Carlo
//! simulation and least-squares estimation.

pub mod circuit;
pub mod design;
pub mod estimate;
pub mod merit;
pub mod noise;
pub mod optimise;
pub mod pauli;
pub mod reference;
pub mod simulate;

pub use circuit::{Circuit, Layer, LayerClass, LayerTuple};
pub use design::{ExperimentalDesign, LsKind};
pub use merit::{MeritModel, MeritReport};
pub use noise::NoiseModel;
pub use pauli::{Basis, CliffordGate, GateKind, Pauli1, PauliString, SparsePauli};
