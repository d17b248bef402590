//! Symplectic Pauli strings and Clifford conjugation.
//!
//! A Pauli on `n` qubits is stored as two packed bit vectors `x` and `z` plus
//! a power of `i`. The operator represented is
//! `i^phase * prod_j i^(x_j z_j) X_j^(x_j) Z_j^(z_j)`, so a string with
//! `phase == 0` is always Hermitian and `Y = iXZ`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const WORD: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PauliError {
    #[error("dimension mismatch: {left} vs {right} qubits")]
    DimensionMismatch { left: usize, right: usize },
    #[error("qubit {qubit} out of range for {n} qubits")]
    QubitOutOfRange { qubit: usize, n: usize },
    #[error("cannot parse Pauli string {0:?}")]
    Parse(String),
    #[error("{0} is not a unitary Clifford gate")]
    NonUnitary(GateKind),
    #[error("gate {kind} expects {expected} qubits, got {got}")]
    Arity {
        kind: GateKind,
        expected: usize,
        got: usize,
    },
    #[error("gate acts on repeated qubit {0}")]
    RepeatedQubit(usize),
    #[error("Pauli has imaginary phase and no Hermitian form")]
    NotHermitian,
    #[error("unknown gate kind {0:?}")]
    UnknownGate(String),
}

/// Single-qubit Pauli. The discriminant is the symplectic index `(x << 1) | z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pauli1 {
    I = 0,
    Z = 1,
    X = 2,
    Y = 3,
}

impl Pauli1 {
    pub const ALL: [Pauli1; 4] = [Pauli1::I, Pauli1::Z, Pauli1::X, Pauli1::Y];

    #[inline]
    pub fn from_code(code: u8) -> Self {
        Self::ALL[(code & 3) as usize]
    }

    #[inline]
    pub fn code(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn x(self) -> bool {
        self.code() & 2 != 0
    }

    #[inline]
    pub fn z(self) -> bool {
        self.code() & 1 != 0
    }

    pub fn from_bits(x: bool, z: bool) -> Self {
        Self::from_code(((x as u8) << 1) | z as u8)
    }

    pub fn to_char(self) -> char {
        match self {
            Pauli1::I => 'I',
            Pauli1::X => 'X',
            Pauli1::Y => 'Y',
            Pauli1::Z => 'Z',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'I' | '_' => Some(Pauli1::I),
            'X' => Some(Pauli1::X),
            'Y' => Some(Pauli1::Y),
            'Z' => Some(Pauli1::Z),
            _ => None,
        }
    }

    /// Rank in the text ordering `I < X < Y < Z`.
    #[inline]
    pub fn text_rank(self) -> u8 {
        match self {
            Pauli1::I => 0,
            Pauli1::X => 1,
            Pauli1::Y => 2,
            Pauli1::Z => 3,
        }
    }

    pub fn basis(self) -> Option<Basis> {
        match self {
            Pauli1::I => None,
            Pauli1::X => Some(Basis::X),
            Pauli1::Y => Some(Basis::Y),
            Pauli1::Z => Some(Basis::Z),
        }
    }

    #[inline]
    pub fn anticommutes(self, other: Pauli1) -> bool {
        ((self.x() & other.z()) ^ (self.z() & other.x())) as u8 == 1
    }
}

/// Single-qubit measurement or preparation basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    X,
    Y,
    Z,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::X, Basis::Y, Basis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn pauli(self) -> Pauli1 {
        match self {
            Basis::X => Pauli1::X,
            Basis::Y => Pauli1::Y,
            Basis::Z => Pauli1::Z,
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.pauli().to_char())
    }
}

/// Dense n-qubit Pauli with phase tracked mod 4.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PauliString {
    n: usize,
    x: Vec<u64>,
    z: Vec<u64>,
    phase: u8,
}

#[inline]
fn words(n: usize) -> usize {
    n.div_ceil(WORD)
}

impl PauliString {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            x: vec![0; words(n)],
            z: vec![0; words(n)],
            phase: 0,
        }
    }

    /// `p` on qubit `q`, identity elsewhere.
    pub fn single(n: usize, q: usize, p: Pauli1) -> Self {
        let mut s = Self::identity(n);
        s.set(q, p);
        s
    }

    pub fn from_paulis(paulis: &[Pauli1]) -> Self {
        let mut s = Self::identity(paulis.len());
        for (q, &p) in paulis.iter().enumerate() {
            s.set(q, p);
        }
        s
    }

    pub fn from_sparse(n: usize, sparse: &SparsePauli) -> Result<Self, PauliError> {
        let mut s = Self::identity(n);
        for &(q, p) in sparse.terms() {
            let q = q as usize;
            if q >= n {
                return Err(PauliError::QubitOutOfRange { qubit: q, n });
            }
            s.set(q, p);
        }
        if sparse.is_negative() {
            s.phase = 2;
        }
        Ok(s)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn phase(&self) -> u8 {
        self.phase
    }

    pub fn with_phase(mut self, phase: u8) -> Self {
        self.phase = phase & 3;
        self
    }

    pub fn x_words(&self) -> &[u64] {
        &self.x
    }

    pub fn z_words(&self) -> &[u64] {
        &self.z
    }

    /// True when the phase is `-1`; errors for imaginary phases.
    pub fn is_negative(&self) -> Result<bool, PauliError> {
        match self.phase {
            0 => Ok(false),
            2 => Ok(true),
            _ => Err(PauliError::NotHermitian),
        }
    }

    /// Checks the Hermitian form; the phase is already stored reduced mod 4.
    pub fn canonicalise(&mut self) -> Result<(), PauliError> {
        self.phase &= 3;
        if self.phase & 1 == 1 {
            return Err(PauliError::NotHermitian);
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, q: usize) -> Pauli1 {
        let (w, b) = (q / WORD, q % WORD);
        Pauli1::from_bits((self.x[w] >> b) & 1 == 1, (self.z[w] >> b) & 1 == 1)
    }

    #[inline]
    pub fn set(&mut self, q: usize, p: Pauli1) {
        let (w, b) = (q / WORD, q % WORD);
        let mask = 1u64 << b;
        self.x[w] = (self.x[w] & !mask) | ((p.x() as u64) << b);
        self.z[w] = (self.z[w] & !mask) | ((p.z() as u64) << b);
    }

    pub fn is_identity(&self) -> bool {
        self.x.iter().chain(&self.z).all(|&w| w == 0)
    }

    pub fn weight(&self) -> usize {
        self.x
            .iter()
            .zip(&self.z)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    pub fn support(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (w, (a, b)) in self.x.iter().zip(&self.z).enumerate() {
            let mut m = a | b;
            while m != 0 {
                let t = m.trailing_zeros() as usize;
                out.push(w * WORD + t);
                m &= m - 1;
            }
        }
        out
    }

    pub fn to_sparse(&self) -> SparsePauli {
        let terms = self
            .support()
            .into_iter()
            .map(|q| (q as u32, self.get(q)))
            .collect();
        SparsePauli {
            negative: self.phase == 2,
            terms,
        }
    }

    fn check_dim(&self, other: &Self) -> Result<(), PauliError> {
        if self.n != other.n {
            return Err(PauliError::DimensionMismatch {
                left: self.n,
                right: other.n,
            });
        }
        Ok(())
    }

    pub fn commutes(&self, other: &Self) -> Result<bool, PauliError> {
        Ok(symplectic_form(self, other)? == 0)
    }

    /// Product `self * other` with the phase accumulated exactly.
    pub fn mul(&self, other: &Self) -> Result<Self, PauliError> {
        self.check_dim(other)?;
        let mut acc: u32 = self.phase as u32 + other.phase as u32;
        let mut x = Vec::with_capacity(self.x.len());
        let mut z = Vec::with_capacity(self.z.len());
        for i in 0..self.x.len() {
            let (xa, za, xb, zb) = (self.x[i], self.z[i], other.x[i], other.z[i]);
            let (xc, zc) = (xa ^ xb, za ^ zb);
            // i^{x_a z_a} X^x_a Z^z_a i^{x_b z_b} X^x_b Z^z_b
            //   = i^{x_a z_a + x_b z_b + 2 z_a x_b - x_c z_c} P_c
            acc += (xa & za).count_ones() + (xb & zb).count_ones() + 2 * (za & xb).count_ones();
            acc += 3 * (xc & zc).count_ones();
            x.push(xc);
            z.push(zc);
        }
        Ok(Self {
            n: self.n,
            x,
            z,
            phase: (acc & 3) as u8,
        })
    }

    /// `G P G^dagger` for one gate.
    pub fn conjugate(&self, gate: &CliffordGate) -> Result<Self, PauliError> {
        let mut out = self.clone();
        out.conjugate_in_place(gate)?;
        Ok(out)
    }

    pub fn conjugate_in_place(&mut self, gate: &CliffordGate) -> Result<(), PauliError> {
        for &q in &gate.qubits {
            if q >= self.n {
                return Err(PauliError::QubitOutOfRange { qubit: q, n: self.n });
            }
        }
        let table = gate.kind.table()?;
        let local = self.local_index(&gate.qubits);
        let (image, negate) = table[local];
        self.set_local(&gate.qubits, image);
        if negate {
            self.phase = (self.phase + 2) & 3;
        }
        Ok(())
    }

    /// Symplectic index of the restriction to `qubits` (see [`local_index_of`]).
    pub fn local_index(&self, qubits: &[usize]) -> usize {
        local_index_of(qubits.iter().map(|&q| self.get(q)))
    }

    pub fn set_local(&mut self, qubits: &[usize], index: usize) {
        let b = qubits.len();
        for (j, &q) in qubits.iter().enumerate() {
            self.set(q, local_pauli(index, b, j));
        }
    }

    /// Lexicographic comparison of the text forms, ignoring sign.
    pub fn text_cmp(&self, other: &Self) -> Ordering {
        for i in 0..self.x.len().min(other.x.len()) {
            let d = (self.x[i] ^ other.x[i]) | (self.z[i] ^ other.z[i]);
            if d != 0 {
                let q = i * WORD + d.trailing_zeros() as usize;
                return self.get(q).text_rank().cmp(&other.get(q).text_rank());
            }
        }
        self.n.cmp(&other.n)
    }
}

/// Symplectic index of a local Pauli: the x bits then the z bits, read as one
/// binary number with the first qubit most significant.
pub fn local_index_of(paulis: impl ExactSizeIterator<Item = Pauli1>) -> usize {
    let b = paulis.len();
    let (mut xm, mut zm) = (0usize, 0usize);
    for p in paulis {
        xm = (xm << 1) | p.x() as usize;
        zm = (zm << 1) | p.z() as usize;
    }
    (xm << b) | zm
}

/// The Pauli on local qubit `j` of the `b`-qubit symplectic index `index`.
#[inline]
pub fn local_pauli(index: usize, b: usize, j: usize) -> Pauli1 {
    let xm = index >> b;
    let zm = index & ((1 << b) - 1);
    let bit = b - 1 - j;
    Pauli1::from_bits((xm >> bit) & 1 == 1, (zm >> bit) & 1 == 1)
}

/// Text form of a local symplectic index, e.g. `ZX`.
pub fn local_label(index: usize, b: usize) -> String {
    (0..b).map(|j| local_pauli(index, b, j).to_char()).collect()
}

/// `omega(a, b)` for two local symplectic indices on `b` qubits.
#[inline]
pub fn local_symplectic(a: usize, c: usize, b: usize) -> u32 {
    let mask = (1usize << b) - 1;
    let (ax, az) = (a >> b, a & mask);
    let (cx, cz) = (c >> b, c & mask);
    ((ax & cz).count_ones() + (az & cx).count_ones()) & 1
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.phase {
            0 => "+",
            1 => "+i",
            2 => "-",
            _ => "-i",
        };
        f.write_str(prefix)?;
        for q in 0..self.n {
            write!(f, "{}", self.get(q).to_char())?;
        }
        Ok(())
    }
}

impl FromStr for PauliString {
    type Err = PauliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (phase, body) = if let Some(r) = s.strip_prefix("+i") {
            (1, r)
        } else if let Some(r) = s.strip_prefix("-i") {
            (3, r)
        } else if let Some(r) = s.strip_prefix('+') {
            (0, r)
        } else if let Some(r) = s.strip_prefix('-') {
            (2, r)
        } else {
            (0, s)
        };
        let paulis = body
            .chars()
            .map(|c| Pauli1::from_char(c).ok_or_else(|| PauliError::Parse(s.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_paulis(&paulis).with_phase(phase))
    }
}

impl Serialize for PauliString {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PauliString {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `omega(a, b)`: 0 when the Paulis commute, 1 otherwise.
pub fn symplectic_form(a: &PauliString, b: &PauliString) -> Result<u8, PauliError> {
    a.check_dim(b)?;
    let mut acc = 0u32;
    for i in 0..a.x.len() {
        acc += (a.x[i] & b.z[i]).count_ones() + (a.z[i] & b.x[i]).count_ones();
    }
    Ok((acc & 1) as u8)
}

pub fn pauli_mul(a: &PauliString, b: &PauliString) -> Result<PauliString, PauliError> {
    a.mul(b)
}

pub fn support(a: &PauliString) -> Vec<usize> {
    a.support()
}

pub fn conjugate(g: &CliffordGate, a: &PauliString) -> Result<PauliString, PauliError> {
    a.conjugate(g)
}

/// Sparse signed Pauli: sorted `(qubit, Pauli)` terms, identity elsewhere.
///
/// Used for propagating low-weight Paulis through large circuits.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SparsePauli {
    negative: bool,
    terms: Vec<(u32, Pauli1)>,
}

impl SparsePauli {
    pub fn new(mut terms: Vec<(u32, Pauli1)>) -> Self {
        terms.retain(|t| t.1 != Pauli1::I);
        terms.sort_unstable_by_key(|t| t.0);
        terms.dedup_by_key(|t| t.0);
        Self {
            negative: false,
            terms,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn terms(&self) -> &[(u32, Pauli1)] {
        &self.terms
    }

    pub fn is_negative(&self) -> bool {
        self.negative
    }

    pub fn set_negative(&mut self, negative: bool) {
        self.negative = negative;
    }

    pub fn weight(&self) -> usize {
        self.terms.len()
    }

    pub fn is_identity(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn qubits(&self) -> impl Iterator<Item = u32> + '_ {
        self.terms.iter().map(|t| t.0)
    }

    pub fn get(&self, q: u32) -> Pauli1 {
        match self.terms.binary_search_by_key(&q, |t| t.0) {
            Ok(i) => self.terms[i].1,
            Err(_) => Pauli1::I,
        }
    }

    /// The unsigned product, i.e. bitwise addition of the symplectic vectors.
    pub fn xor(&self, other: &Self) -> Self {
        let (a, b) = (&self.terms, &other.terms);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            if j == b.len() || (i < a.len() && a[i].0 < b[j].0) {
                out.push(a[i]);
                i += 1;
            } else if i == a.len() || b[j].0 < a[i].0 {
                out.push(b[j]);
                j += 1;
            } else {
                let c = a[i].1.code() ^ b[j].1.code();
                if c != 0 {
                    out.push((a[i].0, Pauli1::from_code(c)));
                }
                i += 1;
                j += 1;
            }
        }
        Self {
            negative: false,
            terms: out,
        }
    }

    /// Lexicographic comparison of the text forms, ignoring sign.
    pub fn text_cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (&self.terms, &other.terms);
        let (mut i, mut j) = (0, 0);
        loop {
            match (a.get(i), b.get(j)) {
                (None, None) => return Ordering::Equal,
                // the shorter one has an identity where the other is non-trivial
                (None, Some(_)) => return Ordering::Less,
                (Some(_), None) => return Ordering::Greater,
                (Some(&(qa, pa)), Some(&(qb, pb))) => {
                    if qa < qb {
                        return Ordering::Greater;
                    }
                    if qb < qa {
                        return Ordering::Less;
                    }
                    match pa.text_rank().cmp(&pb.text_rank()) {
                        Ordering::Equal => {
                            i += 1;
                            j += 1;
                        }
                        o => return o,
                    }
                }
            }
        }
    }

    pub fn to_text(&self, n: usize) -> String {
        let mut s = String::with_capacity(n + 1);
        s.push(if self.negative { '-' } else { '+' });
        let mut it = self.terms.iter().peekable();
        for q in 0..n as u32 {
            match it.peek() {
                Some(&&(tq, p)) if tq == q => {
                    s.push(p.to_char());
                    it.next();
                }
                _ => s.push('I'),
            }
        }
        s
    }
}

/// Clifford gate kind; measurements and preparations are non-unitary markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GateKind {
    I,
    X,
    Y,
    Z,
    H,
    S,
    CX,
    CZ,
    Meas(Basis),
    Prep(Basis),
}

impl GateKind {
    pub fn arity(self) -> usize {
        match self {
            GateKind::CX | GateKind::CZ => 2,
            _ => 1,
        }
    }

    pub fn is_unitary(self) -> bool {
        !matches!(self, GateKind::Meas(_) | GateKind::Prep(_))
    }

    pub fn is_pauli(self) -> bool {
        matches!(self, GateKind::I | GateKind::X | GateKind::Y | GateKind::Z)
    }

    /// Images of `X_j` and `Z_j` (local qubit order) under conjugation, as
    /// sign plus text.
    fn generator_images(self) -> &'static [(bool, &'static str)] {
        match self {
            GateKind::I => &[(false, "X"), (false, "Z")],
            GateKind::X => &[(false, "X"), (true, "Z")],
            GateKind::Y => &[(true, "X"), (true, "Z")],
            GateKind::Z => &[(true, "X"), (false, "Z")],
            GateKind::H => &[(false, "Z"), (false, "X")],
            GateKind::S => &[(false, "Y"), (false, "Z")],
            GateKind::CX => &[
                (false, "XX"),
                (false, "ZI"),
                (false, "IX"),
                (false, "ZZ"),
            ],
            GateKind::CZ => &[
                (false, "XZ"),
                (false, "ZI"),
                (false, "ZX"),
                (false, "IZ"),
            ],
            GateKind::Meas(_) | GateKind::Prep(_) => &[],
        }
    }

    /// Conjugation lookup: local symplectic index to (image index, negated).
    pub fn table(self) -> Result<&'static [(usize, bool)], PauliError> {
        static TABLES: OnceLock<Vec<Vec<(usize, bool)>>> = OnceLock::new();
        let slot = match self {
            GateKind::I => 0,
            GateKind::X => 1,
            GateKind::Y => 2,
            GateKind::Z => 3,
            GateKind::H => 4,
            GateKind::S => 5,
            GateKind::CX => 6,
            GateKind::CZ => 7,
            k => return Err(PauliError::NonUnitary(k)),
        };
        let tables = TABLES.get_or_init(|| {
            [
                GateKind::I,
                GateKind::X,
                GateKind::Y,
                GateKind::Z,
                GateKind::H,
                GateKind::S,
                GateKind::CX,
                GateKind::CZ,
            ]
            .iter()
            .map(|k| k.build_table())
            .collect()
        });
        Ok(&tables[slot])
    }

    fn build_table(self) -> Vec<(usize, bool)> {
        let b = self.arity();
        let images: Vec<PauliString> = self
            .generator_images()
            .iter()
            .map(|&(neg, s)| {
                let p: PauliString = s.parse().expect("static tableau");
                p.with_phase(if neg { 2 } else { 0 })
            })
            .collect();
        (0..1usize << (2 * b))
            .map(|idx| {
                // P_a = i^{sum x_j z_j} prod_j X_j^{x_j} Z_j^{z_j}
                let mut acc = PauliString::identity(b);
                let mut ipow = 0u8;
                for j in 0..b {
                    let p = local_pauli(idx, b, j);
                    if p.x() {
                        acc = acc.mul(&images[2 * j]).expect("same width");
                    }
                    if p.z() {
                        acc = acc.mul(&images[2 * j + 1]).expect("same width");
                    }
                    if p.x() && p.z() {
                        ipow += 1;
                    }
                }
                acc.phase = (acc.phase + ipow) & 3;
                debug_assert!(acc.phase % 2 == 0);
                let image = acc.local_index(&(0..b).collect::<Vec<_>>());
                (image, acc.phase == 2)
            })
            .collect()
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateKind::I => f.write_str("I"),
            GateKind::X => f.write_str("X"),
            GateKind::Y => f.write_str("Y"),
            GateKind::Z => f.write_str("Z"),
            GateKind::H => f.write_str("H"),
            GateKind::S => f.write_str("S"),
            GateKind::CX => f.write_str("CX"),
            GateKind::CZ => f.write_str("CZ"),
            GateKind::Meas(b) => write!(f, "M{b}"),
            GateKind::Prep(b) => write!(f, "P{b}"),
        }
    }
}

impl FromStr for GateKind {
    type Err = PauliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "I" => GateKind::I,
            "X" => GateKind::X,
            "Y" => GateKind::Y,
            "Z" => GateKind::Z,
            "H" => GateKind::H,
            "S" => GateKind::S,
            "CX" | "CNOT" => GateKind::CX,
            "CZ" => GateKind::CZ,
            "MX" => GateKind::Meas(Basis::X),
            "MY" => GateKind::Meas(Basis::Y),
            "MZ" => GateKind::Meas(Basis::Z),
            "PX" => GateKind::Prep(Basis::X),
            "PY" => GateKind::Prep(Basis::Y),
            "PZ" => GateKind::Prep(Basis::Z),
            _ => return Err(PauliError::UnknownGate(s.to_string())),
        })
    }
}

impl Serialize for GateKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GateKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A gate on an ordered qubit list (control first for CX).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CliffordGate {
    pub kind: GateKind,
    pub qubits: Vec<usize>,
}

impl CliffordGate {
    pub fn new(kind: GateKind, qubits: Vec<usize>) -> Result<Self, PauliError> {
        if qubits.len() != kind.arity() {
            return Err(PauliError::Arity {
                kind,
                expected: kind.arity(),
                got: qubits.len(),
            });
        }
        if qubits.len() == 2 && qubits[0] == qubits[1] {
            return Err(PauliError::RepeatedQubit(qubits[0]));
        }
        Ok(Self { kind, qubits })
    }

    pub fn one(kind: GateKind, q: usize) -> Self {
        Self::new(kind, vec![q]).expect("single-qubit gate")
    }

    pub fn two(kind: GateKind, a: usize, b: usize) -> Self {
        Self::new(kind, vec![a, b]).expect("two-qubit gate")
    }

    pub fn arity(&self) -> usize {
        self.qubits.len()
    }

    /// Number of non-identity Paulis supported on the gate, `4^b - 1`.
    pub fn pauli_count(&self) -> usize {
        (1 << (2 * self.arity())) - 1
    }
}

impl fmt::Display for CliffordGate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        for q in &self.qubits {
            write!(f, " {q}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> PauliString {
        s.parse().unwrap()
    }

    #[test]
    fn text_round_trip() {
        for s in ["+ZXI", "-YYZ", "+i", "-iXY", "+I"] {
            assert_eq!(p(s).to_string(), s);
        }
        assert_eq!(p("XZ").to_string(), "+XZ");
        assert!("+XQ".parse::<PauliString>().is_err());
    }

    #[test]
    fn symplectic_examples() {
        assert_eq!(symplectic_form(&p("X"), &p("Z")).unwrap(), 1);
        assert_eq!(symplectic_form(&p("XZ"), &p("ZX")).unwrap(), 0);
        assert_eq!(symplectic_form(&p("XYZ"), &p("XYZ")).unwrap(), 0);
        assert!(symplectic_form(&p("X"), &p("XX")).is_err());
    }

    #[test]
    fn multiplication_examples() {
        assert_eq!(p("X").mul(&p("X")).unwrap(), p("I"));
        assert_eq!(p("X").mul(&p("Z")).unwrap(), p("-iY"));
        assert_eq!(p("Z").mul(&p("X")).unwrap(), p("+iY"));
        assert_eq!(p("Y").mul(&p("Y")).unwrap(), p("I"));
    }

    #[test]
    fn support_examples() {
        assert_eq!(p("IXI").support(), vec![1]);
        assert!(p("III").support().is_empty());
        assert_eq!(p("YZ").support(), vec![0, 1]);
        let mut big = PauliString::identity(200);
        big.set(130, Pauli1::Y);
        big.set(3, Pauli1::X);
        assert_eq!(big.support(), vec![3, 130]);
        assert_eq!(big.weight(), 2);
    }

    #[test]
    fn conjugation_examples() {
        let h = CliffordGate::one(GateKind::H, 0);
        assert_eq!(p("X").conjugate(&h).unwrap(), p("Z"));
        let s = CliffordGate::one(GateKind::S, 0);
        assert_eq!(p("X").conjugate(&s).unwrap(), p("Y"));
        let cz = CliffordGate::two(GateKind::CZ, 0, 1);
        assert_eq!(p("XI").conjugate(&cz).unwrap(), p("XZ"));
        let cx = CliffordGate::two(GateKind::CX, 0, 1);
        assert_eq!(p("IZ").conjugate(&cx).unwrap(), p("ZZ"));
        assert_eq!(p("XI").conjugate(&cx).unwrap(), p("XX"));
        assert_eq!(p("Y").conjugate(&CliffordGate::one(GateKind::H, 0)).unwrap(), p("-Y"));
        let m = CliffordGate::one(GateKind::Meas(Basis::Z), 0);
        assert!(p("X").conjugate(&m).is_err());
        assert!(p("X").conjugate(&CliffordGate::one(GateKind::H, 3)).is_err());
    }

    #[test]
    fn local_index_convention() {
        // single qubit order I, Z, X, Y
        for (i, c) in ["I", "Z", "X", "Y"].iter().enumerate() {
            assert_eq!(local_label(i, 1), *c);
        }
        assert_eq!(local_label(0b1001, 2), "XZ");
        assert_eq!(local_index_of([Pauli1::X, Pauli1::Z].into_iter()), 0b1001);
    }

    #[test]
    fn sparse_text_order_matches_dense() {
        let a = SparsePauli::new(vec![(1, Pauli1::X)]);
        let b = SparsePauli::new(vec![(0, Pauli1::X)]);
        let da = PauliString::from_sparse(3, &a).unwrap();
        let db = PauliString::from_sparse(3, &b).unwrap();
        assert_eq!(a.text_cmp(&b), da.text_cmp(&db));
        assert_eq!(a.text_cmp(&b), Ordering::Less);
        assert_eq!(a.to_text(3), "+IXI");
    }

    #[test]
    fn gate_kind_text() {
        for k in ["I", "X", "H", "S", "CX", "CZ", "MX", "PZ"] {
            assert_eq!(k.parse::<GateKind>().unwrap().to_string(), k);
        }
        assert!(CliffordGate::new(GateKind::CZ, vec![1]).is_err());
        assert!(CliffordGate::new(GateKind::CZ, vec![1, 1]).is_err());
    }
}
