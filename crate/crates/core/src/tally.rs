//! Detection tallies accumulated by the protocol simulation.
//!
//! Cells are kept per prepared state, Bob basis and intensity as a detection
//! count `n` and an error count `m`. Errors are: wrong bit for Z states measured
//! in Z; an X− click for any state measured in X; a Z1 click for |+⟩ measured in
//! Z. With this choice every individual detector count is recoverable from
//! (n, m), which the phase-error estimator relies on.

use std::io::{BufRead, Write};
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{QkdError, Result};
use crate::labels::{Basis, Detector, Intensity, PerIntensity, PerState, StateLabel};

pub const TALLY_SCHEMA_VERSION: u32 = 1;

/// Detections and errors in one cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: f64,
    pub m: f64,
}

impl AddAssign for Cell {
    fn add_assign(&mut self, rhs: Cell) {
        self.n += rhs.n;
        self.m += rhs.m;
    }
}

/// Cells indexed by (prepared state, Bob basis, intensity).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellTable([[[Cell; 2]; 2]; 3]);

impl CellTable {
    pub fn get(&self, j: StateLabel, b: Basis, a: Intensity) -> Cell {
        self.0[j.index()][b.index()][a.index()]
    }

    pub fn get_mut(&mut self, j: StateLabel, b: Basis, a: Intensity) -> &mut Cell {
        &mut self.0[j.index()][b.index()][a.index()]
    }

    pub fn record(&mut self, j: StateLabel, a: Intensity, d: Detector, weight: f64) {
        let cell = self.get_mut(j, d.basis(), a);
        cell.n += weight;
        if is_error(j, d) {
            cell.m += weight;
        }
    }

    /// Count at one detector, recovered from (n, m).
    pub fn detector_count(&self, j: StateLabel, a: Intensity, d: Detector) -> f64 {
        let c = self.get(j, d.basis(), a);
        if is_error(j, d) {
            c.m
        } else {
            c.n - c.m
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateLabel, Basis, Intensity, Cell)> + '_ {
        StateLabel::ALL.into_iter().flat_map(move |j| {
            Basis::ALL.into_iter().flat_map(move |b| {
                Intensity::ALL
                    .into_iter()
                    .map(move |a| (j, b, a, self.get(j, b, a)))
            })
        })
    }

    fn scale(&mut self, f: f64) {
        for c in self.0.iter_mut().flatten().flatten() {
            c.n *= f;
            c.m *= f;
        }
    }
}

impl AddAssign<&CellTable> for CellTable {
    fn add_assign(&mut self, rhs: &CellTable) {
        for (l, r) in self
            .0
            .iter_mut()
            .flatten()
            .flatten()
            .zip(rhs.0.iter().flatten().flatten())
        {
            *l += *r;
        }
    }
}

/// Whether detector `d` firing on prepared state `j` counts as an error.
pub fn is_error(j: StateLabel, d: Detector) -> bool {
    matches!(
        (j, d),
        (StateLabel::Zero, Detector::Z1)
            | (StateLabel::One, Detector::Z0)
            | (_, Detector::XMinus)
            | (StateLabel::Plus, Detector::Z1)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TallyKind {
    /// Integer counts from Monte Carlo sampling.
    Sampled,
    /// Real-valued expectations.
    Expected,
}

/// Sifting tallies for one run or block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TallyFile", try_from = "TallyFile")]
pub struct TallySet {
    pub kind: TallyKind,
    pub elapsed_pulses: f64,
    pub coherent_pulses: f64,
    pub sent: PerState<PerIntensity<f64>>,
    pub cells: CellTable,
    /// Detections from pulses that carried exactly one photon (simulation truth).
    pub single_photon: Option<CellTable>,
    /// Detections from empty pulses (simulation truth).
    pub vacuum: Option<CellTable>,
}

impl TallySet {
    pub fn empty(kind: TallyKind, with_truth: bool) -> Self {
        TallySet {
            kind,
            elapsed_pulses: 0.0,
            coherent_pulses: 0.0,
            sent: PerState::default(),
            cells: CellTable::default(),
            single_photon: with_truth.then(CellTable::default),
            vacuum: with_truth.then(CellTable::default),
        }
    }

    /// Aggregate detections for Alice basis `ba`, Bob basis `bb`, intensity `a`.
    pub fn n(&self, ba: Basis, bb: Basis, a: Intensity) -> f64 {
        self.aggregate(ba, bb, Some(a)).n
    }

    pub fn m(&self, ba: Basis, bb: Basis, a: Intensity) -> f64 {
        self.aggregate(ba, bb, Some(a)).m
    }

    /// Sum over states of Alice's basis and the selected intensities (`None` = both).
    pub fn aggregate(&self, ba: Basis, bb: Basis, a: Option<Intensity>) -> Cell {
        aggregate_table(&self.cells, ba, bb, a)
    }

    /// Sifted key size: Z–Z detections of both intensities.
    pub fn n_z(&self) -> f64 {
        self.aggregate(Basis::Z, Basis::Z, None).n
    }

    pub fn total_clicks(&self) -> f64 {
        self.cells.iter().map(|(_, _, _, c)| c.n).sum()
    }

    pub fn sent_total(&self, a: Intensity) -> f64 {
        StateLabel::ALL.iter().map(|&j| self.sent[j][a]).sum()
    }

    /// Error fraction m/n over the selected cells.
    pub fn qber(&self, ba: Basis, bb: Basis, a: Option<Intensity>) -> Result<f64> {
        let c = self.aggregate(ba, bb, a);
        if !(c.n > 0.0) {
            return Err(QkdError::NoCounts);
        }
        Ok(c.m / c.n)
    }

    /// Multiplies every count (used to rescale expectations).
    pub fn scaled(&self, f: f64) -> TallySet {
        let mut out = self.clone();
        out.elapsed_pulses *= f;
        out.coherent_pulses *= f;
        for j in StateLabel::ALL {
            for a in Intensity::ALL {
                out.sent[j][a] *= f;
            }
        }
        out.cells.scale(f);
        if let Some(t) = out.single_photon.as_mut() {
            t.scale(f);
        }
        if let Some(t) = out.vacuum.as_mut() {
            t.scale(f);
        }
        out
    }

    /// Checks the count invariants: finite and non-negative, m ≤ n, truth
    /// subsets no larger than the totals, detections no more than pulses.
    pub fn validate(&self) -> Result<()> {
        let tol = |x: f64| 1e-9 * x.abs().max(1.0);
        let fail = |msg: String| Err(QkdError::TallyInvariant(msg));
        if !(self.elapsed_pulses >= 0.0 && self.elapsed_pulses.is_finite()) {
            return fail(format!("elapsed_pulses = {}", self.elapsed_pulses));
        }
        for (j, b, a, c) in self.cells.iter() {
            if !(c.n >= 0.0 && c.m >= 0.0 && c.n.is_finite() && c.m.is_finite()) {
                return fail(format!(
                    "negative or non-finite count in cell ({j}, {b}, {a})"
                ));
            }
            if c.m > c.n + tol(c.n) {
                return fail(format!(
                    "m = {} exceeds n = {} in cell ({j}, {b}, {a})",
                    c.m, c.n
                ));
            }
            for (name, truth) in [
                ("single_photon", &self.single_photon),
                ("vacuum", &self.vacuum),
            ] {
                if let Some(t) = truth {
                    let s = t.get(j, b, a);
                    if s.n < 0.0
                        || s.m < 0.0
                        || s.n > c.n + tol(c.n)
                        || s.m > c.m + tol(c.m)
                        || s.m > s.n + tol(s.n)
                    {
                        return fail(format!(
                            "{name} truth inconsistent with totals in cell ({j}, {b}, {a})"
                        ));
                    }
                }
            }
        }
        for j in StateLabel::ALL {
            for a in Intensity::ALL {
                let s = self.sent[j][a];
                let clicks: f64 = Basis::ALL.iter().map(|&b| self.cells.get(j, b, a).n).sum();
                if !(s >= 0.0) || clicks > s + tol(s) {
                    return fail(format!(
                        "detections {clicks} exceed pulses sent {s} for ({j}, {a})"
                    ));
                }
            }
        }
        let sent: f64 = Intensity::ALL.iter().map(|&a| self.sent_total(a)).sum();
        if sent > self.elapsed_pulses + tol(self.elapsed_pulses) {
            return fail(format!(
                "pulses sent {sent} exceed elapsed_pulses {}",
                self.elapsed_pulses
            ));
        }
        if self.total_clicks() > self.elapsed_pulses + tol(self.elapsed_pulses) {
            return fail("more detections than elapsed pulses".into());
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<TallySet> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per cell; run-level fields go in a leading `#` header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# schema_version={} kind={} elapsed_pulses={} coherent_pulses={}",
            TALLY_SCHEMA_VERSION,
            match self.kind {
                TallyKind::Sampled => "sampled",
                TallyKind::Expected => "expected",
            },
            self.elapsed_pulses,
            self.coherent_pulses
        )?;
        let mut wtr = csv::Writer::from_writer(w);
        for row in self.rows() {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut r: R) -> Result<TallySet> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let header = header.trim();
        let meta = header.strip_prefix('#').ok_or_else(|| QkdError::Schema {
            row: 1,
            message: "expected '# schema_version=… kind=… elapsed_pulses=… coherent_pulses=…' line"
                .into(),
        })?;
        let mut file = TallyFile {
            schema_version: 0,
            kind: TallyKind::Sampled,
            elapsed_pulses: f64::NAN,
            coherent_pulses: 0.0,
            cells: Vec::new(),
        };
        for kv in meta.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| QkdError::Schema {
                row: 1,
                message: format!("malformed header field {kv:?}"),
            })?;
            let num = |v: &str| {
                v.parse::<f64>().map_err(|e| QkdError::Schema {
                    row: 1,
                    message: format!("{k}: {e}"),
                })
            };
            match k {
                "schema_version" => file.schema_version = num(v)? as u32,
                "kind" => {
                    file.kind = match v {
                        "sampled" => TallyKind::Sampled,
                        "expected" => TallyKind::Expected,
                        other => {
                            return Err(QkdError::Schema {
                                row: 1,
                                message: format!("unknown kind {other:?}"),
                            })
                        }
                    }
                }
                "elapsed_pulses" => file.elapsed_pulses = num(v)?,
                "coherent_pulses" => file.coherent_pulses = num(v)?,
                other => {
                    return Err(QkdError::Schema {
                        row: 1,
                        message: format!("unknown header field {other:?}"),
                    })
                }
            }
        }
        let mut rdr = csv::Reader::from_reader(r);
        for (i, rec) in rdr.deserialize::<CellRecord>().enumerate() {
            // Row 1 is the comment line and row 2 the column header.
            let rec = rec.map_err(|e| QkdError::Schema {
                row: i + 3,
                message: e.to_string(),
            })?;
            file.cells.push(rec);
        }
        TallySet::try_from(file)
    }

    fn rows(&self) -> Vec<CellRecord> {
        self.cells
            .iter()
            .map(|(j, b, a, c)| {
                let s = self.single_photon.map(|t| t.get(j, b, a));
                let v = self.vacuum.map(|t| t.get(j, b, a));
                CellRecord {
                    state: j,
                    bob_basis: b,
                    intensity: a,
                    sent: self.sent[j][a],
                    n: c.n,
                    m: c.m,
                    n_single: s.map(|c| c.n),
                    m_single: s.map(|c| c.m),
                    n_vacuum: v.map(|c| c.n),
                    m_vacuum: v.map(|c| c.m),
                }
            })
            .collect()
    }
}

pub(crate) fn aggregate_table(t: &CellTable, ba: Basis, bb: Basis, a: Option<Intensity>) -> Cell {
    let mut acc = Cell::default();
    for (j, b, i, c) in t.iter() {
        if j.basis() == ba && b == bb && a.is_none_or(|x| x == i) {
            acc += c;
        }
    }
    acc
}

impl AddAssign<&TallySet> for TallySet {
    fn add_assign(&mut self, rhs: &TallySet) {
        self.elapsed_pulses += rhs.elapsed_pulses;
        self.coherent_pulses += rhs.coherent_pulses;
        for j in StateLabel::ALL {
            for a in Intensity::ALL {
                self.sent[j][a] += rhs.sent[j][a];
            }
        }
        self.cells += &rhs.cells;
        match (&mut self.single_photon, &rhs.single_photon) {
            (Some(l), Some(r)) => *l += r,
            (l, _) => *l = None,
        }
        match (&mut self.vacuum, &rhs.vacuum) {
            (Some(l), Some(r)) => *l += r,
            (l, _) => *l = None,
        }
    }
}

/// Serialized form of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRecord {
    pub state: StateLabel,
    pub bob_basis: Basis,
    pub intensity: Intensity,
    pub sent: f64,
    pub n: f64,
    pub m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_single: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_single: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_vacuum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_vacuum: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TallyFile {
    schema_version: u32,
    kind: TallyKind,
    elapsed_pulses: f64,
    coherent_pulses: f64,
    cells: Vec<CellRecord>,
}

impl From<TallySet> for TallyFile {
    fn from(t: TallySet) -> Self {
        TallyFile {
            schema_version: TALLY_SCHEMA_VERSION,
            kind: t.kind,
            elapsed_pulses: t.elapsed_pulses,
            coherent_pulses: t.coherent_pulses,
            cells: t.rows(),
        }
    }
}

impl TryFrom<TallyFile> for TallySet {
    type Error = QkdError;

    fn try_from(f: TallyFile) -> Result<Self> {
        if f.schema_version != TALLY_SCHEMA_VERSION {
            return Err(QkdError::Schema {
                row: 0,
                message: format!("unsupported tally schema version {}", f.schema_version),
            });
        }
        if !f.elapsed_pulses.is_finite() {
            return Err(QkdError::Schema {
                row: 0,
                message: "missing elapsed_pulses".into(),
            });
        }
        let has_single = f
            .cells
            .first()
            .is_some_and(|c| c.n_single.is_some() && c.m_single.is_some());
        let has_vacuum = f
            .cells
            .first()
            .is_some_and(|c| c.n_vacuum.is_some() && c.m_vacuum.is_some());
        let mut t = TallySet::empty(f.kind, false);
        t.single_photon = has_single.then(CellTable::default);
        t.vacuum = has_vacuum.then(CellTable::default);
        t.elapsed_pulses = f.elapsed_pulses;
        t.coherent_pulses = f.coherent_pulses;
        let mut seen = [[[false; 2]; 2]; 3];
        let mut sent_seen: [[Option<f64>; 2]; 3] = Default::default();
        for (i, r) in f.cells.iter().enumerate() {
            let slot = &mut seen[r.state.index()][r.bob_basis.index()][r.intensity.index()];
            if *slot {
                return Err(QkdError::Schema {
                    row: i + 1,
                    message: format!(
                        "duplicate cell ({}, {}, {})",
                        r.state, r.bob_basis, r.intensity
                    ),
                });
            }
            *slot = true;
            match sent_seen[r.state.index()][r.intensity.index()] {
                Some(s) if s != r.sent => {
                    return Err(QkdError::Schema {
                        row: i + 1,
                        message: format!(
                            "inconsistent sent count for ({}, {})",
                            r.state, r.intensity
                        ),
                    })
                }
                _ => sent_seen[r.state.index()][r.intensity.index()] = Some(r.sent),
            }
            t.sent[r.state][r.intensity] = r.sent;
            *t.cells.get_mut(r.state, r.bob_basis, r.intensity) = Cell { n: r.n, m: r.m };
            if let Some(table) = t.single_photon.as_mut() {
                match (r.n_single, r.m_single) {
                    (Some(n), Some(m)) => {
                        *table.get_mut(r.state, r.bob_basis, r.intensity) = Cell { n, m }
                    }
                    _ => {
                        return Err(QkdError::Schema {
                            row: i + 1,
                            message: "missing single-photon truth".into(),
                        })
                    }
                }
            }
            if let Some(table) = t.vacuum.as_mut() {
                match (r.n_vacuum, r.m_vacuum) {
                    (Some(n), Some(m)) => {
                        *table.get_mut(r.state, r.bob_basis, r.intensity) = Cell { n, m }
                    }
                    _ => {
                        return Err(QkdError::Schema {
                            row: i + 1,
                            message: "missing vacuum truth".into(),
                        })
                    }
                }
            }
        }
        if f.cells.len() != 12 {
            return Err(QkdError::Schema {
                row: f.cells.len(),
                message: format!(
                    "expected 12 cells (3 states × 2 bases × 2 intensities), found {}",
                    f.cells.len()
                ),
            });
        }
        Ok(t)
    }
}
