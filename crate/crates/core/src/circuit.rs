//! Layered Clifford circuits, tuple rearrangement and surface-code generators.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pauli::{Basis, CliffordGate, GateKind, PauliError};

/// Layer time used for every generated layer, in nanoseconds.
pub const LAYER_TIME_NS: f64 = 29.0;
/// Combined measurement and reset time, in nanoseconds.
pub const MEAS_RESET_TIME_NS: f64 = 660.0;
pub const CIRCUIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("layer {layer}: {msg}")]
    InvalidLayer { layer: usize, msg: String },
    #[error("unknown layer id {0}")]
    UnknownLayer(usize),
    #[error("inconsistent unique index: {0}")]
    UniqueIndex(String),
    #[error(transparent)]
    Pauli(#[from] PauliError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    SingleQubit,
    TwoQubit,
    DynamicalDecoupling,
    Spam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub class: LayerClass,
    pub time_ns: f64,
    pub gates: Vec<CliffordGate>,
}

impl Layer {
    /// Builds a layer, sorting gates by their first qubit.
    pub fn new(class: LayerClass, time_ns: f64, mut gates: Vec<CliffordGate>) -> Self {
        gates.sort_by_key(|g| g.qubits[0]);
        Self {
            class,
            time_ns,
            gates,
        }
    }

    /// Gates sorted as a multiset key for identifying repeated layers.
    fn gate_key(&self) -> Vec<CliffordGate> {
        let mut g = self.gates.clone();
        g.sort();
        g
    }

    pub fn has_multi_qubit_gate(&self) -> bool {
        self.gates.iter().any(|g| g.arity() > 1)
    }
}

/// Which surface-code generator produced a circuit and at what size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeFamily {
    pub kind: CodeKind,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Rotated,
    Unrotated,
}

impl fmt::Display for CodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodeKind::Rotated => f.write_str("rotated"),
            CodeKind::Unrotated => f.write_str("unrotated"),
        }
    }
}

/// A tuple of unique-layer ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerTuple(pub Vec<usize>);

impl LayerTuple {
    pub fn new(entries: Vec<usize>) -> Self {
        Self(entries)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    /// The tuple concatenated with itself `times` times.
    pub fn repeated(&self, times: usize) -> Self {
        Self(self.0.repeat(times))
    }
}

impl fmt::Display for LayerTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{e}")?;
        }
        f.write_str(")")
    }
}

/// One gate-eigenvalue parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Parameter {
    Gate { layer: usize, gate: usize, pauli: usize },
    Spam { qubit: usize, basis: Basis },
}

/// Identifies a gate channel: a gate of a unique layer or a measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GateId {
    Gate { layer: usize, gate: usize },
    Spam { qubit: usize, basis: Basis },
}

/// Column layout of the gate-eigenvalue vector.
///
/// Columns run over the unique layers in increasing id order, the gates of
/// each layer in order, and the non-identity Paulis of each gate in
/// symplectic order; the `3n` measurement columns follow as
/// `(qubit, X/Y/Z)`.
#[derive(Clone, Debug)]
pub struct ParameterIndex {
    slot_of_layer: BTreeMap<usize, usize>,
    gate_offsets: Vec<Vec<usize>>,
    spam_offset: usize,
    columns: Vec<Parameter>,
    gates: Vec<(GateId, usize, usize)>,
}

impl ParameterIndex {
    fn new(c: &Circuit) -> Self {
        let mut slot_of_layer = BTreeMap::new();
        let mut gate_offsets = Vec::new();
        let mut columns = Vec::new();
        let mut gates = Vec::new();
        for (slot, &id) in c.unique_layers().iter().enumerate() {
            slot_of_layer.insert(id, slot);
            let mut offs = Vec::new();
            for (j, g) in c.layers[id].gates.iter().enumerate() {
                offs.push(columns.len());
                gates.push((GateId::Gate { layer: id, gate: j }, columns.len(), g.pauli_count()));
                for a in 1..=g.pauli_count() {
                    columns.push(Parameter::Gate {
                        layer: id,
                        gate: j,
                        pauli: a,
                    });
                }
            }
            gate_offsets.push(offs);
        }
        let spam_offset = columns.len();
        for q in 0..c.n {
            for b in Basis::ALL {
                gates.push((GateId::Spam { qubit: q, basis: b }, columns.len(), 1));
                columns.push(Parameter::Spam { qubit: q, basis: b });
            }
        }
        Self {
            slot_of_layer,
            gate_offsets,
            spam_offset,
            columns,
            gates,
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[Parameter] {
        &self.columns
    }

    /// Column of Pauli `pauli` (local symplectic index, non-zero) on a gate.
    #[inline]
    pub fn gate_column(&self, layer: usize, gate: usize, pauli: usize) -> usize {
        self.gate_offsets[self.slot_of_layer[&layer]][gate] + pauli - 1
    }

    /// First column of gate `gate` of the unique layer at `slot`.
    #[inline]
    pub fn gate_offset_by_slot(&self, slot: usize, gate: usize) -> usize {
        self.gate_offsets[slot][gate]
    }

    pub fn slot(&self, layer: usize) -> Option<usize> {
        self.slot_of_layer.get(&layer).copied()
    }

    #[inline]
    pub fn spam_column(&self, qubit: usize, basis: Basis) -> usize {
        self.spam_offset + 3 * qubit + basis.index()
    }

    pub fn spam_offset(&self) -> usize {
        self.spam_offset
    }

    /// Every gate channel with its first column and column count.
    pub fn gates(&self) -> &[(GateId, usize, usize)] {
        &self.gates
    }
}

/// Layered Clifford circuit with unique-layer identification.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "CircuitFile", into = "CircuitFile")]
pub struct Circuit {
    pub name: String,
    pub n: usize,
    pub layers: Vec<Layer>,
    unique_index: Vec<usize>,
    pub meas_reset_time_ns: f64,
    pub dynamically_decoupled: bool,
    pub family: Option<CodeFamily>,
    unique: Vec<usize>,
    gate_at: Vec<Vec<u32>>,
    params: ParameterIndex,
}

#[derive(Serialize, Deserialize)]
struct CircuitFile {
    version: u32,
    name: String,
    n: usize,
    meas_reset_time_ns: f64,
    dynamically_decoupled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    family: Option<CodeFamily>,
    layers: Vec<Layer>,
    unique_index: Vec<usize>,
}

impl TryFrom<CircuitFile> for Circuit {
    type Error = CircuitError;

    fn try_from(f: CircuitFile) -> Result<Self, Self::Error> {
        if f.version != CIRCUIT_FORMAT_VERSION {
            return Err(CircuitError::InvalidParameter(format!(
                "unsupported circuit format version {}",
                f.version
            )));
        }
        let c = Circuit::new(
            f.name,
            f.n,
            f.layers,
            f.meas_reset_time_ns,
            f.dynamically_decoupled,
            f.family,
        )?;
        if c.unique_index != f.unique_index {
            return Err(CircuitError::UniqueIndex(format!(
                "stored {:?} but layers imply {:?}",
                f.unique_index, c.unique_index
            )));
        }
        Ok(c)
    }
}

impl From<Circuit> for CircuitFile {
    fn from(c: Circuit) -> Self {
        CircuitFile {
            version: CIRCUIT_FORMAT_VERSION,
            name: c.name,
            n: c.n,
            meas_reset_time_ns: c.meas_reset_time_ns,
            dynamically_decoupled: c.dynamically_decoupled,
            family: c.family,
            layers: c.layers,
            unique_index: c.unique_index,
        }
    }
}

impl PartialEq for Circuit {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.n == other.n
            && self.layers == other.layers
            && self.meas_reset_time_ns == other.meas_reset_time_ns
            && self.dynamically_decoupled == other.dynamically_decoupled
            && self.family == other.family
    }
}

impl Circuit {
    /// Validates the layers and assigns unique ids: a layer's id is the
    /// position of the first layer with the same gate multiset.
    pub fn new(
        name: impl Into<String>,
        n: usize,
        layers: Vec<Layer>,
        meas_reset_time_ns: f64,
        dynamically_decoupled: bool,
        family: Option<CodeFamily>,
    ) -> Result<Self, CircuitError> {
        let mut gate_at = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let mut map = vec![u32::MAX; n];
            for (j, g) in layer.gates.iter().enumerate() {
                if !g.kind.is_unitary() {
                    return Err(CircuitError::InvalidLayer {
                        layer: i,
                        msg: format!("non-unitary gate {g}"),
                    });
                }
                if g.qubits.len() != g.kind.arity() {
                    return Err(CircuitError::InvalidLayer {
                        layer: i,
                        msg: format!("gate {g} has wrong arity"),
                    });
                }
                for &q in &g.qubits {
                    if q >= n {
                        return Err(CircuitError::InvalidLayer {
                            layer: i,
                            msg: format!("qubit {q} out of range"),
                        });
                    }
                    if map[q] != u32::MAX {
                        return Err(CircuitError::InvalidLayer {
                            layer: i,
                            msg: format!("qubit {q} acted on twice"),
                        });
                    }
                    map[q] = j as u32;
                }
            }
            if let Some(q) = map.iter().position(|&m| m == u32::MAX) {
                return Err(CircuitError::InvalidLayer {
                    layer: i,
                    msg: format!("qubit {q} idle; pad with identity"),
                });
            }
            if !(layer.time_ns >= 0.0) {
                return Err(CircuitError::InvalidLayer {
                    layer: i,
                    msg: "negative layer time".into(),
                });
            }
            gate_at.push(map);
        }
        let keys: Vec<_> = layers.iter().map(Layer::gate_key).collect();
        let mut unique_index = Vec::with_capacity(layers.len());
        for i in 0..layers.len() {
            let id = (0..=i).find(|&k| keys[k] == keys[i]).unwrap();
            unique_index.push(id);
        }
        let mut unique: Vec<usize> = unique_index.clone();
        unique.sort_unstable();
        unique.dedup();
        let mut c = Self {
            name: name.into(),
            n,
            layers,
            unique_index,
            meas_reset_time_ns,
            dynamically_decoupled,
            family,
            unique,
            gate_at,
            params: ParameterIndex {
                slot_of_layer: BTreeMap::new(),
                gate_offsets: Vec::new(),
                spam_offset: 0,
                columns: Vec::new(),
                gates: Vec::new(),
            },
        };
        c.params = ParameterIndex::new(&c);
        Ok(c)
    }

    /// Unique-layer id of each layer position.
    pub fn unique_index(&self) -> &[usize] {
        &self.unique_index
    }

    /// The unique-layer ids, sorted.
    pub fn unique_layers(&self) -> &[usize] {
        &self.unique
    }

    pub fn parameters(&self) -> &ParameterIndex {
        &self.params
    }

    /// Total number of gate eigenvalues including SPAM.
    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Index of the gate acting on `qubit` in layer `layer`.
    #[inline]
    pub fn gate_on(&self, layer: usize, qubit: usize) -> usize {
        self.gate_at[layer][qubit] as usize
    }

    pub fn layer(&self, id: usize) -> Result<&Layer, CircuitError> {
        if self.unique.binary_search(&id).is_err() {
            return Err(CircuitError::UnknownLayer(id));
        }
        Ok(&self.layers[id])
    }

    pub fn check_tuple(&self, t: &LayerTuple) -> Result<(), CircuitError> {
        for &e in t.entries() {
            self.layer(e)?;
        }
        Ok(())
    }

    /// The layers of the rearranged circuit in time order.
    pub fn rearrange(&self, t: &LayerTuple) -> Result<Vec<&Layer>, CircuitError> {
        t.entries().iter().map(|&e| self.layer(e)).collect()
    }

    /// Time of one shot of the rearranged circuit, including measurement
    /// and reset, in nanoseconds.
    pub fn tuple_duration(&self, t: &LayerTuple) -> Result<f64, CircuitError> {
        let layers = self.rearrange(t)?;
        Ok(layers.iter().map(|l| l.time_ns).sum::<f64>() + self.meas_reset_time_ns)
    }

    /// Unique-layer ids of layers containing multi-qubit gates.
    pub fn multi_qubit_layers(&self) -> Vec<usize> {
        self.unique
            .iter()
            .copied()
            .filter(|&i| self.layers[i].has_multi_qubit_gate())
            .collect()
    }

    /// Unique id of the dynamical-decoupling layer, if any.
    pub fn dd_layer(&self) -> Option<usize> {
        self.unique
            .iter()
            .copied()
            .find(|&i| self.layers[i].class == LayerClass::DynamicalDecoupling)
    }

    pub fn summary(&self) -> CircuitSummary {
        CircuitSummary {
            name: self.name.clone(),
            n: self.n,
            layers: self.layers.len(),
            unique_layers: self.unique.len(),
            parameters: self.parameter_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitSummary {
    pub name: String,
    pub n: usize,
    pub layers: usize,
    pub unique_layers: usize,
    pub parameters: usize,
}

/// Compass corners of a rotated-code plaquette.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corner {
    NW,
    NE,
    SW,
    SE,
}

impl Corner {
    fn offset(self) -> (i64, i64) {
        match self {
            Corner::NW => (0, 0),
            Corner::NE => (0, 1),
            Corner::SW => (1, 0),
            Corner::SE => (1, 1),
        }
    }
}

/// CZ sweep order used by [`build_rotated_surface_circuit`].
pub const ROTATED_CZ_ORDER: [Corner; 4] = [Corner::NE, Corner::NW, Corner::SE, Corner::SW];

fn pad(n: usize, used: &[bool], kind: GateKind, gates: &mut Vec<CliffordGate>) {
    for q in 0..n {
        if !used[q] {
            gates.push(CliffordGate::one(kind, q));
        }
    }
}

/// Rotated-code plaquettes: `(row, col)` of the north-west corner, row-major.
fn rotated_plaquettes(rows: usize, cols: usize) -> Vec<(i64, i64)> {
    let (r, c) = (rows as i64, cols as i64);
    let mut out = Vec::new();
    for pr in -1..r {
        for pc in -1..c {
            let colour = (pr + pc).rem_euclid(2);
            let bulk = pr >= 0 && pr < r - 1 && pc >= 0 && pc < c - 1;
            let horizontal = (pr == -1 || pr == r - 1) && pc >= 0 && pc < c - 1;
            let vertical = (pc == -1 || pc == c - 1) && pr >= 0 && pr < r - 1;
            if bulk || (horizontal && colour == 1) || (vertical && colour == 0) {
                out.push((pr, pc));
            }
        }
    }
    out
}

/// Syndrome extraction for the XZZX rotated surface code of distance `d`.
pub fn build_rotated_surface_circuit(d: usize) -> Result<Circuit, CircuitError> {
    build_rotated_surface_circuit_rect(d, d)
}

/// Rotated surface code on a `rows x cols` data grid (both odd, at least 3).
///
/// Data qubits come first in row-major order, then one measure qubit per
/// plaquette. The nine layers are: H on measure qubits with X on data, CZ,
/// H on data with X on measure qubits, CZ, X on all qubits, CZ, the third
/// layer again, CZ, and the first layer again. The CZ layers visit the
/// plaquette corners in the order of [`ROTATED_CZ_ORDER`].
pub fn build_rotated_surface_circuit_rect(
    rows: usize,
    cols: usize,
) -> Result<Circuit, CircuitError> {
    for d in [rows, cols] {
        if d < 3 || d % 2 == 0 {
            return Err(CircuitError::InvalidParameter(format!(
                "rotated surface code distance must be odd and at least 3, got {d}"
            )));
        }
    }
    let data = rows * cols;
    let plaquettes = rotated_plaquettes(rows, cols);
    let n = data + plaquettes.len();
    let is_data = |q: usize| q < data;
    let data_index = |r: i64, c: i64| -> Option<usize> {
        (r >= 0 && c >= 0 && r < rows as i64 && c < cols as i64)
            .then(|| r as usize * cols + c as usize)
    };

    let one_qubit = |h_on_data: bool, class: LayerClass| -> Layer {
        let gates = (0..n)
            .map(|q| {
                let h = if h_on_data { is_data(q) } else { !is_data(q) };
                CliffordGate::one(if h { GateKind::H } else { GateKind::X }, q)
            })
            .collect();
        Layer::new(class, LAYER_TIME_NS, gates)
    };
    let cz_layer = |corner: Corner| -> Layer {
        let mut gates = Vec::new();
        let mut used = vec![false; n];
        let (dr, dc) = corner.offset();
        for (k, &(pr, pc)) in plaquettes.iter().enumerate() {
            if let Some(q) = data_index(pr + dr, pc + dc) {
                let a = data + k;
                used[q] = true;
                used[a] = true;
                gates.push(CliffordGate::two(GateKind::CZ, q, a));
            }
        }
        pad(n, &used, GateKind::I, &mut gates);
        Layer::new(LayerClass::TwoQubit, LAYER_TIME_NS, gates)
    };
    let first = one_qubit(false, LayerClass::SingleQubit);
    let third = one_qubit(true, LayerClass::SingleQubit);
    let dd = Layer::new(
        LayerClass::DynamicalDecoupling,
        LAYER_TIME_NS,
        (0..n).map(|q| CliffordGate::one(GateKind::X, q)).collect(),
    );
    let o = ROTATED_CZ_ORDER;
    let layers = vec![
        first.clone(),
        cz_layer(o[0]),
        third.clone(),
        cz_layer(o[1]),
        dd,
        cz_layer(o[2]),
        third,
        cz_layer(o[3]),
        first,
    ];
    let name = if rows == cols {
        format!("rotated_d{rows}")
    } else {
        format!("rotated_{rows}x{cols}")
    };
    Circuit::new(
        name,
        n,
        layers,
        MEAS_RESET_TIME_NS,
        true,
        Some(CodeFamily {
            kind: CodeKind::Rotated,
            rows,
            cols,
        }),
    )
}

/// Syndrome extraction for the unrotated (CSS) surface code of distance `d`.
///
/// Qubits sit on a `(2d-1) x (2d-1)` grid in row-major order: data where
/// `row + col` is even, X-type measure qubits on even rows and Z-type measure
/// qubits on odd rows. Four CX layers are sandwiched between two identical
/// layers of Hadamards on the X-type measure qubits. X-type measure qubits
/// visit their neighbours N, W, E, S and Z-type ones N, E, W, S.
pub fn build_unrotated_surface_circuit(d: usize) -> Result<Circuit, CircuitError> {
    if d < 2 {
        return Err(CircuitError::InvalidParameter(format!(
            "unrotated surface code distance must be at least 2, got {d}"
        )));
    }
    let side = 2 * d - 1;
    let n = side * side;
    let idx = |r: i64, c: i64| -> Option<usize> {
        (r >= 0 && c >= 0 && r < side as i64 && c < side as i64)
            .then(|| r as usize * side + c as usize)
    };
    let x_type = |q: usize| (q / side) % 2 == 0 && (q % side) % 2 == 1;
    let z_type = |q: usize| (q / side) % 2 == 1 && (q % side) % 2 == 0;
    let (north, south, west, east) = ((-1, 0), (1, 0), (0, -1), (0, 1));
    let x_order = [north, west, east, south];
    let z_order = [north, east, west, south];

    let h_layer = Layer::new(
        LayerClass::SingleQubit,
        LAYER_TIME_NS,
        (0..n)
            .map(|q| CliffordGate::one(if x_type(q) { GateKind::H } else { GateKind::I }, q))
            .collect(),
    );
    let mut layers = vec![h_layer.clone()];
    for step in 0..4 {
        let mut gates = Vec::new();
        let mut used = vec![false; n];
        for a in 0..n {
            let (r, c) = ((a / side) as i64, (a % side) as i64);
            let (dir, ctrl_is_anc) = if x_type(a) {
                (x_order[step], true)
            } else if z_type(a) {
                (z_order[step], false)
            } else {
                continue;
            };
            if let Some(q) = idx(r + dir.0, c + dir.1) {
                debug_assert!(!used[q] && !used[a]);
                used[q] = true;
                used[a] = true;
                let gate = if ctrl_is_anc {
                    CliffordGate::two(GateKind::CX, a, q)
                } else {
                    CliffordGate::two(GateKind::CX, q, a)
                };
                gates.push(gate);
            }
        }
        pad(n, &used, GateKind::I, &mut gates);
        layers.push(Layer::new(LayerClass::TwoQubit, LAYER_TIME_NS, gates));
    }
    layers.push(h_layer);
    Circuit::new(
        format!("unrotated_d{d}"),
        n,
        layers,
        MEAS_RESET_TIME_NS,
        false,
        Some(CodeFamily {
            kind: CodeKind::Unrotated,
            rows: d,
            cols: d,
        }),
    )
}

/// Builds a circuit of the given family at a new size.
pub fn build_family(kind: CodeKind, rows: usize, cols: usize) -> Result<Circuit, CircuitError> {
    match kind {
        CodeKind::Rotated => build_rotated_surface_circuit_rect(rows, cols),
        CodeKind::Unrotated => {
            if rows != cols {
                return Err(CircuitError::InvalidParameter(
                    "unrotated codes must be square".into(),
                ));
            }
            build_unrotated_surface_circuit(rows)
        }
    }
}

/// Measure-qubit indices of a generated surface-code circuit.
pub fn measure_qubits(c: &Circuit) -> Vec<usize> {
    match &c.family {
        Some(CodeFamily {
            kind: CodeKind::Rotated,
            rows,
            cols,
        }) => (rows * cols..c.n).collect(),
        Some(CodeFamily {
            kind: CodeKind::Unrotated,
            rows,
            ..
        }) => {
            let side = 2 * rows - 1;
            (0..c.n).filter(|q| (q / side + q % side) % 2 == 1).collect()
        }
        None => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pauli::{Pauli1, PauliString};

    #[test]
    fn rotated_sizes() {
        let c = build_rotated_surface_circuit(3).unwrap();
        assert_eq!(c.n, 17);
        assert_eq!(c.layers.len(), 9);
        assert_eq!(c.unique_layers().len(), 7);
        assert_eq!(c.unique_index(), &[0, 1, 2, 3, 4, 5, 2, 7, 0]);
        assert_eq!(c.parameter_count(), 624);
        assert_eq!(build_rotated_surface_circuit(25).unwrap().n, 1249);
        assert!(build_rotated_surface_circuit(4).is_err());
        assert!(build_rotated_surface_circuit(1).is_err());
    }

    #[test]
    fn unrotated_sizes() {
        let c = build_unrotated_surface_circuit(3).unwrap();
        assert_eq!(c.n, 25);
        assert_eq!(c.layers.len(), 6);
        assert_eq!(c.unique_layers().len(), 5);
        assert_eq!(c.parameter_count(), 810);
        assert!(!c.dynamically_decoupled);
        assert!(build_unrotated_surface_circuit(1).is_err());
    }

    #[test]
    fn cz_counts_per_layer() {
        let d = 5;
        let c = build_rotated_surface_circuit(d).unwrap();
        for id in c.multi_qubit_layers() {
            let cz = c.layers[id].gates.iter().filter(|g| g.kind == GateKind::CZ).count();
            assert_eq!(cz, d * (d - 1));
        }
    }

    #[test]
    fn tuple_durations() {
        let c = build_rotated_surface_circuit(3).unwrap();
        assert_eq!(c.tuple_duration(&LayerTuple::empty()).unwrap(), 660.0);
        assert_eq!(c.tuple_duration(&LayerTuple::new(vec![0])).unwrap(), 689.0);
        assert!(c.tuple_duration(&LayerTuple::new(vec![6])).is_err());
        assert!(c.rearrange(&LayerTuple::empty()).unwrap().is_empty());
    }

    /// Pull the final Z measurement of each measure qubit back to the start
    /// of the circuit.
    fn measured_stabilisers(c: &Circuit) -> Vec<PauliString> {
        measure_qubits(c)
            .into_iter()
            .map(|a| {
                let mut p = PauliString::single(c.n, a, Pauli1::Z);
                for layer in c.layers.iter().rev() {
                    for g in &layer.gates {
                        p.conjugate_in_place(g).unwrap();
                    }
                }
                p
            })
            .collect()
    }

    fn gf2_rank(rows: &[PauliString], qubits: &[usize]) -> usize {
        let mut m: Vec<Vec<bool>> = rows
            .iter()
            .map(|p| {
                qubits
                    .iter()
                    .flat_map(|&q| [p.get(q).x(), p.get(q).z()])
                    .collect()
            })
            .collect();
        let cols = 2 * qubits.len();
        let mut rank = 0;
        for col in 0..cols {
            if let Some(piv) = (rank..m.len()).find(|&r| m[r][col]) {
                m.swap(rank, piv);
                for r in 0..m.len() {
                    if r != rank && m[r][col] {
                        let pivot = m[rank].clone();
                        for (a, b) in m[r].iter_mut().zip(pivot) {
                            *a ^= b;
                        }
                    }
                }
                rank += 1;
            }
        }
        rank
    }

    fn check_stabilisers(c: &Circuit, expected_rank: usize) {
        let anc = measure_qubits(c);
        let data: Vec<usize> = (0..c.n).filter(|q| !anc.contains(q)).collect();
        let stabs = measured_stabilisers(c);
        for s in &stabs {
            // ancilla prepared in |0>: only Z or I may remain there
            for &a in &anc {
                assert!(matches!(s.get(a), Pauli1::I | Pauli1::Z), "{s}");
            }
        }
        let restricted: Vec<PauliString> = stabs
            .iter()
            .map(|s| {
                let mut r = PauliString::identity(c.n);
                for &q in &data {
                    r.set(q, s.get(q));
                }
                r
            })
            .collect();
        for a in &restricted {
            for b in &restricted {
                assert!(a.commutes(b).unwrap());
            }
        }
        assert_eq!(gf2_rank(&restricted, &data), expected_rank);
    }

    #[test]
    fn rotated_measures_commuting_stabilisers() {
        for d in [3, 5] {
            check_stabilisers(&build_rotated_surface_circuit(d).unwrap(), d * d - 1);
        }
    }

    #[test]
    fn unrotated_measures_commuting_stabilisers() {
        for d in [2, 3, 4] {
            check_stabilisers(&build_unrotated_surface_circuit(d).unwrap(), 2 * d * (d - 1));
        }
    }

    #[test]
    fn rotated_stabilisers_are_xzzx() {
        let c = build_rotated_surface_circuit(3).unwrap();
        for s in measured_stabilisers(&c) {
            let data: Vec<Pauli1> = (0..9).map(|q| s.get(q)).filter(|&p| p != Pauli1::I).collect();
            let xs = data.iter().filter(|&&p| p == Pauli1::X).count();
            let zs = data.iter().filter(|&&p| p == Pauli1::Z).count();
            assert_eq!(xs + zs, data.len());
            assert!(data.len() == 2 || (xs == 2 && zs == 2));
        }
    }

    #[test]
    fn json_round_trip() {
        let c = build_rotated_surface_circuit(3).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back: Circuit = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.unique_index(), c.unique_index());
    }

    #[test]
    fn idle_qubit_rejected() {
        let layer = Layer::new(LayerClass::SingleQubit, 1.0, vec![CliffordGate::one(GateKind::H, 0)]);
        assert!(Circuit::new("bad", 2, vec![layer], 0.0, false, None).is_err());
    }
}
