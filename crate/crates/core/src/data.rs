//! Ragged longitudinal data: subjects carry curves, curves carry `(time, value)`
//! measurements on `[0, 1]`.
//!
//! The exchange format is long CSV with header `subject_id,curve_id,time,value`.
//! A JSON mirror of [`Dataset`] is accepted when the file name ends in `.json`.
//! Subjects and curves keep their order of first appearance.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub curves: Vec<Curve>,
}

impl Subject {
    /// `m_{i·}`
    pub fn n_measurements(&self) -> usize {
        self.curves.iter().map(Curve::len).sum()
    }
}

/// Affine map from raw times onto `[0, 1]`: `t = (raw - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub offset: f64,
    pub scale: f64,
}

impl TimeMap {
    pub fn to_unit(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.scale
    }

    pub fn to_raw(&self, t: f64) -> f64 {
        self.offset + self.scale * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_map: Option<TimeMap>,
}

/// Position of a curve: subject index, curve index within the subject.
pub type CurveIndex = (usize, usize);

impl Dataset {
    /// Validates and wraps already-normalized subjects.
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let ds = Dataset { subjects, time_map: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() || self.n_measurements() == 0 {
            return Err(Error::Data("no measurements".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(&s.id) {
                return Err(Error::Data(format!("subject {} appears twice", s.id)));
            }
            if s.curves.is_empty() {
                return Err(Error::Data(format!("subject {} has no curves", s.id)));
            }
            let mut curve_ids = HashSet::new();
            for c in &s.curves {
                let at = || format!("subject {} curve {}", s.id, c.id);
                if !curve_ids.insert(&c.id) {
                    return Err(Error::Data(format!("{} appears twice", at())));
                }
                if c.times.len() != c.values.len() {
                    return Err(Error::Data(format!("{}: times and values differ in length", at())));
                }
                if c.is_empty() {
                    return Err(Error::Data(format!("{} has no measurements", at())));
                }
                if c.times.iter().chain(&c.values).any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("{}: non-finite entry", at())));
                }
                if c.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return Err(Error::Data(format!("{}: time outside [0, 1]", at())));
                }
                for w in c.times.windows(2) {
                    if w[1] == w[0] {
                        return Err(Error::Data(format!("{}: duplicate time {}", at(), w[0])));
                    }
                    if w[1] < w[0] {
                        return Err(Error::Data(format!("{}: times not increasing", at())));
                    }
                }
            }
        }
        Ok(())
    }

    /// `n`
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// `N_·`
    pub fn n_curves(&self) -> usize {
        self.subjects.iter().map(|s| s.curves.len()).sum()
    }

    /// `m_{··}`
    pub fn n_measurements(&self) -> usize {
        self.subjects.iter().map(Subject::n_measurements).sum()
    }

    /// Curves in `(i, l)` lexicographic order.
    pub fn curves(&self) -> impl Iterator<Item = (CurveIndex, &Curve)> {
        self.subjects
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.curves.iter().enumerate().map(move |(l, c)| ((i, l), c)))
    }

    pub fn curve_indices(&self) -> Vec<CurveIndex> {
        self.curves().map(|(ix, _)| ix).collect()
    }

    pub fn curve(&self, (i, l): CurveIndex) -> &Curve {
        &self.subjects[i].curves[l]
    }

    /// Copy with curve `(i, l)` removed; a subject left without curves is kept
    /// out of the result and reported as `None` in the returned subject map.
    pub fn without_curve(&self, (i, l): CurveIndex) -> (Dataset, Vec<Option<usize>>) {
        let mut subjects = Vec::with_capacity(self.subjects.len());
        let mut map = Vec::with_capacity(self.subjects.len());
        for (si, s) in self.subjects.iter().enumerate() {
            let mut s = s.clone();
            if si == i {
                s.curves.remove(l);
            }
            if s.curves.is_empty() {
                map.push(None);
            } else {
                map.push(Some(subjects.len()));
                subjects.push(s);
            }
        }
        (Dataset { subjects, time_map: self.time_map }, map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let text = std::fs::read_to_string(path)?;
        if is_json {
            Self::from_json_str(&text)
        } else {
            Self::from_csv_reader(text.as_bytes())
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            std::fs::write(path, serde_json::to_string_pretty(self)?)?;
            Ok(())
        } else {
            let f = std::fs::File::create(path)?;
            self.write_csv(f)
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the long CSV. Times are written on the normalized `[0, 1]`
    /// scale; the time map, if any, travels only in the JSON mirror.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["subject_id", "curve_id", "time", "value"])?;
        for s in &self.subjects {
            for c in &s.curves {
                for (t, y) in c.times.iter().zip(&c.values) {
                    wr.write_record([s.id.as_str(), c.id.as_str(), &t.to_string(), &y.to_string()])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Parses the long CSV. Rows of a curve are stably sorted by time; when
    /// any time falls outside `[0, 1]` all times are mapped affinely from
    /// their observed range and the map is recorded.
    pub fn from_csv_reader<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("missing column {name}")))
        };
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Err(Error::Data("no measurements".into()));
        }
        let (cs, cc, ct, cv) = (col("subject_id")?, col("curve_id")?, col("time")?, col("value")?);

        let mut subjects: Vec<(String, Vec<(String, Vec<(f64, f64)>)>)> = Vec::new();
        let mut subject_pos: HashMap<String, usize> = HashMap::new();
        let mut curve_pos: HashMap<(usize, String), usize> = HashMap::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let field = |k: usize| rec.get(k).ok_or_else(|| Error::Data(format!("line {line}: missing field")));
            let num = |k: usize, what: &str| -> Result<f64> {
                let s = field(k)?;
                let v: f64 = s.parse().map_err(|_| Error::Data(format!("line {line}: non-numeric {what} {s:?}")))?;
                if !v.is_finite() {
                    return Err(Error::Data(format!("line {line}: non-finite {what}")));
                }
                Ok(v)
            };
            let sid = field(cs)?.to_string();
            let cid = field(cc)?.to_string();
            let (t, y) = (num(ct, "time")?, num(cv, "value")?);
            let si = *subject_pos.entry(sid.clone()).or_insert_with(|| {
                subjects.push((sid.clone(), Vec::new()));
                subjects.len() - 1
            });
            let ci = *curve_pos.entry((si, cid.clone())).or_insert_with(|| {
                subjects[si].1.push((cid.clone(), Vec::new()));
                subjects[si].1.len() - 1
            });
            subjects[si].1[ci].1.push((t, y));
        }
        if subjects.is_empty() {
            return Err(Error::Data("no measurements".into()));
        }

        let (tmin, tmax) = subjects
            .iter()
            .flat_map(|s| s.1.iter().flat_map(|c| c.1.iter().map(|p| p.0)))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
        let time_map = if tmin < 0.0 || tmax > 1.0 {
            if tmax <= tmin {
                return Err(Error::Data("all times equal; cannot normalize".into()));
            }
            Some(TimeMap { offset: tmin, scale: tmax - tmin })
        } else {
            None
        };

        let mut out = Vec::with_capacity(subjects.len());
        for (sid, curves) in subjects {
            let mut cs = Vec::with_capacity(curves.len());
            for (cid, mut pts) in curves {
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                for w in pts.windows(2) {
                    if w[0].0 == w[1].0 {
                        return Err(Error::Data(format!(
                            "duplicate measurement: subject {sid} curve {cid} time {}",
                            w[0].0
                        )));
                    }
                }
                let times = pts
                    .iter()
                    .map(|p| time_map.map_or(p.0, |m| m.to_unit(p.0)).clamp(0.0, 1.0))
                    .collect();
                let values = pts.iter().map(|p| p.1).collect();
                cs.push(Curve { id: cid, times, values });
            }
            out.push(Subject { id: sid, curves: cs });
        }
        let ds = Dataset { subjects: out, time_map };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks the preconditions of the adaptive variance estimators: every
    /// curve has more than two measurements and `m·· − N· − n − M > 0`.
    pub fn validate_for_variance(&self, m_basis: usize) -> VarianceCheck {
        let mut problems = Vec::new();
        for ((i, l), c) in self.curves() {
            if c.len() <= 2 {
                problems.push(format!(
                    "subject {} curve {} has {} measurements (need > 2)",
                    self.subjects[i].id,
                    self.subjects[i].curves[l].id,
                    c.len()
                ));
            }
        }
        let dof = self.residual_dof(m_basis);
        if dof <= 0 {
            problems.push(format!("residual degrees of freedom m·· − N· − n − M = {dof} ≤ 0"));
        }
        VarianceCheck { ok: problems.is_empty(), problems }
    }

    /// `m·· − N· − n − M`
    pub fn residual_dof(&self, m_basis: usize) -> i64 {
        self.n_measurements() as i64 - self.n_curves() as i64 - self.n_subjects() as i64 - m_basis as i64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarianceCheck {
    pub ok: bool,
    pub problems: Vec<String>,
}

/// Every free parameter of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    /// Initial conditions, `a[i][l]`.
    pub a: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl ParameterState {
    /// Default start: `a_il = Y_il1`, `θ = 0`, `β = 1`.
    pub fn initial(ds: &Dataset, m_basis: usize) -> Self {
        let a: Vec<Vec<f64>> =
            ds.subjects.iter().map(|s| s.curves.iter().map(|c| c.values[0]).collect()).collect();
        let mut st = ParameterState { beta: vec![1.0; m_basis], theta: vec![0.0; ds.n_subjects()], a, alpha: 0.0 };
        st.alpha = st.mean_a();
        st
    }

    pub fn mean_a(&self) -> f64 {
        let (s, n) = self.a.iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn a_flat(&self) -> Vec<f64> {
        self.a.iter().flatten().copied().collect()
    }

    /// Checks dimensions against a dataset and basis size.
    pub fn check(&self, ds: &Dataset, m_basis: usize) -> Result<()> {
        if self.beta.len() != m_basis {
            return Err(Error::InvalidArgument(format!(
                "beta has length {}, basis has {}",
                self.beta.len(),
                m_basis
            )));
        }
        if self.theta.len() != ds.n_subjects() || self.a.len() != ds.n_subjects() {
            return Err(Error::InvalidArgument("state does not match the number of subjects".into()));
        }
        for (a, s) in self.a.iter().zip(&ds.subjects) {
            if a.len() != s.curves.len() {
                return Err(Error::InvalidArgument(format!(
                    "subject {} has {} curves but {} initial conditions",
                    s.id,
                    s.curves.len(),
                    a.len()
                )));
            }
        }
        let all = self.beta.iter().chain(&self.theta).chain(self.a.iter().flatten());
        if all.copied().chain(std::iter::once(self.alpha)).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter state"));
        }
        Ok(())
    }
}

/// Penalty weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySettings {
    /// Weight on `Σ (a_il − α)²`; zero is allowed.
    pub lambda1: f64,
    /// Weight on `Σ θ_i²`.
    pub lambda2: f64,
    /// Initial Levenberg–Marquardt damping; sweep `j` uses `lambda3_0 / j`.
    pub lambda3_0: f64,
    /// Initial conditions are known and never updated.
    pub a_known: bool,
}

impl Default for PenaltySettings {
    fn default() -> Self {
        PenaltySettings { lambda1: 0.04, lambda2: 0.01, lambda3_0: 1.0, a_known: false }
    }
}

impl PenaltySettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::InvalidArgument("lambda1 and lambda2 must be nonnegative".into()));
        }
        if !(self.lambda3_0 > 0.0) {
            return Err(Error::InvalidArgument("lambda3_0 must be positive".into()));
        }
        Ok(())
    }
}
