//! Process tomography by linear inversion over a sliding window of
//! measurement records.
//!
//! Every record (one Pauli setting, one outcome bit string) updates a table
//! of sufficient statistics: for each Pauli string over `{I, X, Y, Z}` that
//! the setting can estimate, a compatible-record count and a signed parity
//! sum.  A Pauli string is compatible with a setting when its non-identity
//! positions all match the measured axes.  Reconstruction averages those
//! parities into expectation estimates, assembles the state from them,
//! truncates entries to the strategy's decimal precision, and projects the
//! result back onto valid states.

use std::collections::VecDeque;
use std::time::Instant;

use num_complex::Complex64;

use crate::environment::HistoryRecord;
use crate::qcore::{
    project_to_physical, round_places, BasisString, CMatrix, DensityMatrix, PauliAxis,
};

/// One reconstruction strategy: an identifier, the decimal precision it
/// keeps, how many records it remembers, and the byte length of its
/// canonical description (the program-length term of its resource cost).
#[derive(Debug, Clone, PartialEq)]
pub struct QPTDescriptor {
    pub id: String,
    pub approx_places: u32,
    pub window: usize,
    pub length_const: f64,
}

impl QPTDescriptor {
    pub fn new(id: impl Into<String>, approx_places: u32, window: usize, length_const: f64) -> Self {
        QPTDescriptor { id: id.into(), approx_places, window, length_const }
    }

    /// Descriptor whose length term is the byte length of its canonical
    /// description.  Strategies that differ only in parameters end up with
    /// near-identical lengths, which is the intent.
    pub fn with_auto_length(id: impl Into<String>, approx_places: u32, window: usize) -> Self {
        let id = id.into();
        let canonical = format!(
            "linear-inversion id={id} approx_places={approx_places} window={window}"
        );
        let length_const = canonical.len() as f64;
        QPTDescriptor { id, approx_places, window, length_const }
    }
}

/// Bounded record store; evicts its oldest record when full.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    capacity: usize,
    records: VecDeque<HistoryRecord>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "history window must hold at least one record");
        HistoryBuffer { capacity, records: VecDeque::with_capacity(capacity.min(4096)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.records.len() == self.capacity
    }

    pub fn oldest(&self) -> Option<&HistoryRecord> {
        self.records.front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HistoryRecord> {
        self.records.iter()
    }

    /// Append a record, returning the evicted one if the buffer was full.
    /// Steps must arrive strictly increasing.
    pub fn push(&mut self, rec: HistoryRecord) -> Option<HistoryRecord> {
        if let Some(last) = self.records.back() {
            debug_assert!(rec.step > last.step, "record steps must increase");
        }
        let evicted = if self.is_full() { self.records.pop_front() } else { None };
        self.records.push_back(rec);
        evicted
    }

    /// The step index the next record will carry.
    pub fn next_step(&self) -> u64 {
        self.records.back().map_or(0, |r| r.step + 1)
    }
}

/// Per-Pauli-string accumulator: how many retained records can estimate it
/// and the sum of their outcome parities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PauliCell {
    pub samples: u64,
    pub signed: i64,
}

/// Accumulators for all `4^k` Pauli strings on `k` qubits.  Index digits
/// run `I=0, X=1, Y=2, Z=3`, most significant digit first.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliCounts {
    k: usize,
    cells: Vec<PauliCell>,
}

impl PauliCounts {
    pub fn new(k: usize) -> Self {
        PauliCounts { k, cells: vec![PauliCell::default(); 4usize.pow(k as u32)] }
    }

    pub fn qubits(&self) -> usize {
        self.k
    }

    pub fn cell(&self, index: usize) -> PauliCell {
        self.cells[index]
    }

    /// Index of the Pauli string with `axes[pos]` at each position in
    /// `subset` and identity elsewhere.
    pub fn string_index(k: usize, axes: &[PauliAxis], subset: u32) -> usize {
        let mut index = 0usize;
        for pos in 0..k {
            index *= 4;
            if (subset >> pos) & 1 == 1 {
                index += match axes[pos] {
                    PauliAxis::X => 1,
                    PauliAxis::Y => 2,
                    PauliAxis::Z => 3,
                };
            }
        }
        index
    }

    fn apply(&mut self, rec: &HistoryRecord, direction: i64) {
        let k = self.k;
        debug_assert_eq!(rec.action.len(), k);
        debug_assert_eq!(rec.percept.len(), k);
        let axes = rec.action.axes();
        let mut percept_mask = 0u32;
        for (pos, ch) in rec.percept.bytes().enumerate() {
            if ch == b'1' {
                percept_mask |= 1 << pos;
            }
        }
        for subset in 0..(1u32 << k) {
            let index = Self::string_index(k, axes, subset);
            let parity = (subset & percept_mask).count_ones() & 1;
            let sign = if parity == 1 { -1 } else { 1 };
            let cell = &mut self.cells[index];
            cell.samples = cell.samples.wrapping_add_signed(direction);
            cell.signed += sign * direction;
        }
    }

    /// Mean parity estimate for a Pauli string; zero when never sampled.
    pub fn estimate(&self, index: usize) -> f64 {
        let cell = self.cells[index];
        if cell.samples == 0 {
            0.0
        } else {
            cell.signed as f64 / cell.samples as f64
        }
    }
}

/// Sufficient statistics plus the window of records backing them.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    counts: PauliCounts,
    records: HistoryBuffer,
}

impl SufficientStats {
    /// `k` is the number of measured qubits (twice the channel width).
    pub fn new(k: usize, window: usize) -> Self {
        SufficientStats { counts: PauliCounts::new(k), records: HistoryBuffer::new(window) }
    }

    pub fn counts(&self) -> &PauliCounts {
        &self.counts
    }

    pub fn records(&self) -> &HistoryBuffer {
        &self.records
    }

    pub fn qubits(&self) -> usize {
        self.counts.k
    }

    /// Fold one record in; evicted records are subtracted, so the counts
    /// always describe exactly the retained window.
    pub fn insert(&mut self, rec: HistoryRecord) {
        self.counts.apply(&rec, 1);
        if let Some(evicted) = self.records.push(rec) {
            self.counts.apply(&evicted, -1);
        }
    }

    /// Counts as they would look after inserting `rec`, without touching
    /// this table.  Only the cheap accumulators are copied, never the
    /// record window.
    pub fn hypothetical_counts(&self, rec: &HistoryRecord) -> PauliCounts {
        let mut counts = self.counts.clone();
        if self.records.is_full() {
            let oldest = self.records.oldest().expect("full buffer has an oldest record");
            counts.apply(oldest, -1);
        }
        counts.apply(rec, 1);
        counts
    }
}

/// Deterministic work counters from one reconstruction, plus its measured
/// wall-clock time.
#[derive(Debug, Clone, Copy)]
pub struct ReconInstrumentation {
    /// Complex multiply-accumulate count of the inversion and projection.
    pub cmacs: u64,
    /// Wall-clock seconds of the call.  The only nondeterministic field.
    pub seconds: f64,
    /// Measured qubit count, which fixes the per-record storage size.
    pub qubits: usize,
}

fn pauli_entry_walk(index: usize, k: usize) -> (usize, Vec<u8>) {
    // digits MSB-first plus the row-flip mask of the X/Y positions
    let mut digits = vec![0u8; k];
    let mut rem = index;
    for pos in (0..k).rev() {
        digits[pos] = (rem % 4) as u8;
        rem /= 4;
    }
    let mut flip = 0usize;
    for (pos, &d) in digits.iter().enumerate() {
        if d == 1 || d == 2 {
            flip |= 1 << (k - 1 - pos);
        }
    }
    (flip, digits)
}

fn reconstruct_from_counts(desc: &QPTDescriptor, counts: &PauliCounts) -> (DensityMatrix, u64) {
    let k = counts.qubits();
    let d = 1usize << k;
    let mut m = CMatrix::zeros(d, d);
    let mut cmacs = 0u64;
    for index in 0..counts.cells.len() {
        let est = counts.estimate(index);
        if est == 0.0 {
            continue;
        }
        // each Pauli string has one entry per row: value in {+-1, +-i}
        let (flip, digits) = pauli_entry_walk(index, k);
        for row in 0..d {
            let col = row ^ flip;
            let mut value = Complex64::new(est, 0.0);
            for (pos, &digit) in digits.iter().enumerate() {
                let bit = (row >> (k - 1 - pos)) & 1;
                match digit {
                    2 => {
                        value *= if bit == 1 {
                            Complex64::new(0.0, 1.0)
                        } else {
                            Complex64::new(0.0, -1.0)
                        };
                    }
                    3 => {
                        if bit == 1 {
                            value = -value;
                        }
                    }
                    _ => {}
                }
            }
            m[(row, col)] += value;
        }
        cmacs += d as u64;
    }
    let scale = 1.0 / d as f64;
    for entry in m.iter_mut() {
        *entry *= scale;
    }
    cmacs += (d * d) as u64;
    for entry in m.iter_mut() {
        *entry = Complex64::new(
            round_places(entry.re, desc.approx_places),
            round_places(entry.im, desc.approx_places),
        );
    }
    let rho = project_to_physical(&m);
    cmacs += 2 * (d * d * d) as u64;
    (rho, cmacs)
}

/// Rebuild the state estimate this strategy currently believes in.  Empty
/// statistics produce the maximally mixed state.
pub fn reconstruct(
    desc: &QPTDescriptor,
    stats: &SufficientStats,
) -> (DensityMatrix, ReconInstrumentation) {
    let start = Instant::now();
    let (rho, cmacs) = reconstruct_from_counts(desc, stats.counts());
    let seconds = start.elapsed().as_secs_f64();
    (rho, ReconInstrumentation { cmacs, seconds, qubits: stats.qubits() })
}

/// Outcome distribution the current model assigns to a measurement setting.
pub fn predict_distribution(
    _desc: &QPTDescriptor,
    rho_t: &DensityMatrix,
    action: &BasisString,
) -> crate::qcore::Result<Vec<f64>> {
    crate::qcore::born_probabilities(rho_t, action)
}

/// The state this strategy would believe in after one more record, leaving
/// the real statistics untouched.  Window eviction applies to the
/// hypothetical window exactly as it would to the real one.
pub fn hypothetical_update(
    desc: &QPTDescriptor,
    stats: &SufficientStats,
    action: &BasisString,
    percept: &str,
) -> DensityMatrix {
    let rec = HistoryRecord {
        step: stats.records().next_step(),
        action: action.clone(),
        percept: percept.to_string(),
    };
    let counts = stats.hypothetical_counts(&rec);
    reconstruct_from_counts(desc, &counts).0
}
