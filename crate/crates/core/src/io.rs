//! File formats: loss-log CSV, and versioned JSON for schedules, law
//! parameters, fit results, run manifests, synthetic specs and reports.
//!
//! Every JSON document carries `"format"` and `"version"` keys next to its
//! fields. Readers reject documents from a newer version.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{FitConfig, FitResult, Run};
use crate::hpopt::{OptimumReport, ScheduleTemplate};
use crate::law::{LawParams, LossSeries};
use crate::ood::OodCoeffs;
use crate::schedule::{build_schedule, PhaseSpec, Schedule};
use crate::synth::SynthSpec;

/// A JSON document type with a name and a current version.
pub trait Document: Serialize + DeserializeOwned {
    const FORMAT: &'static str;
    const VERSION: u32;
}

pub fn to_json<T: Document>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Data(format!("{} does not serialize to an object", T::FORMAT)))?;
    let mut out = serde_json::Map::new();
    out.insert("format".into(), T::FORMAT.into());
    out.insert("version".into(), T::VERSION.into());
    out.append(obj);
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(out))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: Document>(text: &str) -> Result<T> {
    let mut v: serde_json::Value = serde_json::from_str(text)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Data(format!("{} document must be a JSON object", T::FORMAT)))?;
    if let Some(format) = obj.remove("format") {
        if format.as_str() != Some(T::FORMAT) {
            return Err(Error::Data(format!(
                "expected a {} document, found format {format}",
                T::FORMAT
            )));
        }
    }
    let version = obj
        .remove("version")
        .ok_or_else(|| Error::Data(format!("{} document has no version", T::FORMAT)))?;
    let found = version
        .as_u64()
        .and_then(|x| u32::try_from(x).ok())
        .ok_or_else(|| Error::Data(format!("bad {} version {version}", T::FORMAT)))?;
    if found != T::VERSION {
        return Err(Error::Version {
            format: T::FORMAT,
            found,
            expected: T::VERSION,
        });
    }
    Ok(serde_json::from_value(v)?)
}

pub fn read_json<T: Document>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    from_json(&text).map_err(|e| match e {
        Error::Json(j) => Error::Data(format!("{}: {j}", path.display())),
        other => other,
    })
}

pub fn write_json<T: Document>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

impl Document for LawParams {
    const FORMAT: &'static str = "law-params";
    const VERSION: u32 = 1;
}

impl Document for FitResult {
    const FORMAT: &'static str = "fit-result";
    const VERSION: u32 = 1;
}

impl Document for FitConfig {
    const FORMAT: &'static str = "fit-config";
    const VERSION: u32 = 1;
}

impl Document for OptimumReport {
    const FORMAT: &'static str = "optimum-report";
    const VERSION: u32 = 1;
}

impl Document for ScheduleTemplate {
    const FORMAT: &'static str = "schedule-template";
    const VERSION: u32 = 1;
}

impl Document for OodCoeffs {
    const FORMAT: &'static str = "ood-coeffs";
    const VERSION: u32 = 1;
}

// ---------------------------------------------------------------------------
// schedules

/// A schedule either as phases or as explicit per-step learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<Vec<PhaseSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub etas: Option<Vec<f64>>,
    /// Number of PT steps.
    #[serde(default)]
    pub boundary: usize,
}

impl Document for ScheduleDoc {
    const FORMAT: &'static str = "schedule";
    const VERSION: u32 = 1;
}

impl ScheduleDoc {
    pub fn from_phases(phases: Vec<PhaseSpec>, boundary: usize) -> Self {
        Self {
            phases: Some(phases),
            etas: None,
            boundary,
        }
    }

    pub fn from_schedule(schedule: &Schedule) -> Self {
        Self {
            phases: None,
            etas: Some(schedule.etas().to_vec()),
            boundary: schedule.boundary(),
        }
    }

    pub fn to_schedule(&self) -> Result<Schedule> {
        match (&self.phases, &self.etas) {
            (Some(phases), None) => build_schedule(phases)?.with_boundary(self.boundary),
            (None, Some(etas)) => Schedule::new(etas.clone(), self.boundary),
            _ => Err(Error::Data(
                "schedule needs exactly one of `phases` and `etas`".into(),
            )),
        }
    }
}

pub fn read_schedule(path: &Path) -> Result<Schedule> {
    read_json::<ScheduleDoc>(path)?.to_schedule().map_err(|e| match e {
        Error::Schedule(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// loss logs

/// Parsed loss log: a step column and one or more named loss columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLog {
    pub steps: Vec<usize>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl LossLog {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn series(&self, name: &str) -> Result<LossSeries> {
        let values = self
            .column(name)
            .ok_or_else(|| Error::Data(format!("loss log has no column {name:?}")))?;
        LossSeries::new(self.steps.clone(), values.to_vec())
    }

    pub fn shift_steps(&mut self, by: usize) {
        for s in &mut self.steps {
            *s += by;
        }
    }
}

/// Reads a loss log. Rows are numbered from 1 with the header as row 1.
pub fn load_loss_log<R: Read>(source: R) -> Result<LossLog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Data("loss log has no header".into()));
    }
    let step_col = headers
        .iter()
        .position(|h| h == "step")
        .ok_or_else(|| Error::Data("loss log header has no `step` column".into()))?;
    let names: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != step_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if names.is_empty() {
        return Err(Error::Data("loss log has no loss columns".into()));
    }
    let mut steps: Vec<usize> = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Row {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let raw = &record[step_col];
        let step: usize = raw.parse().map_err(|_| Error::Row {
            row,
            message: format!("step {raw:?} is not a positive integer"),
        })?;
        if step == 0 {
            return Err(Error::Row {
                row,
                message: "steps start at 1".into(),
            });
        }
        if let Some(prev) = steps.last() {
            if step <= *prev {
                return Err(Error::Row {
                    row,
                    message: format!("step {step} does not increase (previous {prev})"),
                });
            }
        }
        steps.push(step);
        for ((col, name), out) in names.iter().zip(&mut columns) {
            let raw = &record[*col];
            let v: f64 = raw.parse().map_err(|_| Error::Row {
                row,
                message: format!("{name}: {raw:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    row,
                    message: format!("{name}: loss {raw} is not finite"),
                });
            }
            if v <= 0.0 {
                return Err(Error::Row {
                    row,
                    message: format!("{name}: loss {v} is not positive"),
                });
            }
            out.push(v);
        }
    }
    if steps.is_empty() {
        return Err(Error::Data("loss log has no rows".into()));
    }
    Ok(LossLog {
        steps,
        columns: names.into_iter().map(|(_, n)| n).zip(columns).collect(),
    })
}

pub fn read_loss_log(path: &Path) -> Result<LossLog> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    load_loss_log(file).map_err(|e| match e {
        Error::Row { row, message } => Error::Data(format!("{} row {row}: {message}", path.display())),
        Error::Csv(c) => Error::Data(format!("{}: {c}", path.display())),
        other => other,
    })
}

/// Writes `step,<names...>` with values in shortest round-trip form.
pub fn write_loss_log<W: Write>(sink: W, steps: &[usize], columns: &[(&str, &[f64])]) -> Result<()> {
    for (name, values) in columns {
        if values.len() != steps.len() {
            return Err(Error::InvalidArgument(format!(
                "column {name} has {} values for {} steps",
                values.len(),
                steps.len()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["step"];
    header.extend(columns.iter().map(|(n, _)| *n));
    w.write_record(&header)?;
    for (i, step) in steps.iter().enumerate() {
        let mut rec = vec![step.to_string()];
        rec.extend(columns.iter().map(|(_, v)| v[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Pt,
    Cpt,
    Ood,
}

/// One run: a schedule, its loss log and how to read the columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schedule_path: PathBuf,
    pub losslog_path: PathBuf,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_r_cpt")]
    pub r_cpt: f64,
    #[serde(default, rename = "N", alias = "n", skip_serializing_if = "Option::is_none")]
    pub n: Option<f64>,
    /// Column name to role.
    pub domains: BTreeMap<String, ColumnRole>,
    /// Log steps count from the start of CPT rather than the start of PT.
    #[serde(default)]
    pub steps_relative_to_cpt: bool,
}

fn default_lambda() -> f64 {
    crate::areas::DEFAULT_LAMBDA
}

fn default_r_cpt() -> f64 {
    1.0
}

impl Document for RunManifest {
    const FORMAT: &'static str = "run-manifest";
    const VERSION: u32 = 1;
}

/// A manifest's run with its optional out-of-domain series.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub run: Run,
    pub ood: Option<LossSeries>,
    pub lambda: f64,
}

impl RunManifest {
    /// Checks that the manifest is internally consistent and that every
    /// referenced column exists in `log`.
    pub fn validate(&self, log: &LossLog) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Data(format!(
                "manifest lambda must lie in (0, 1), got {}",
                self.lambda
            )));
        }
        for name in self.domains.keys() {
            if log.column(name).is_none() {
                return Err(Error::Data(format!(
                    "manifest references column {name:?}, which the loss log does not have"
                )));
            }
        }
        for role in [ColumnRole::Pt, ColumnRole::Cpt, ColumnRole::Ood] {
            if self.domains.values().filter(|r| **r == role).count() > 1 {
                return Err(Error::Data(format!("manifest maps several columns to {role:?}")));
            }
        }
        Ok(())
    }

    /// Loads the schedule and loss log. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<LoadedRun> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let schedule = read_schedule(&resolve(&self.schedule_path))?;
        let mut log = read_loss_log(&resolve(&self.losslog_path))?;
        self.validate(&log)?;
        if self.steps_relative_to_cpt {
            log.shift_steps(schedule.boundary());
        }
        let mut run = Run::new(schedule);
        run.r_cpt = self.r_cpt;
        run.n = self.n;
        let mut ood = None;
        for (name, role) in &self.domains {
            let series = log.series(name)?;
            match role {
                ColumnRole::Pt => run.pt = Some(series),
                ColumnRole::Cpt => run.cpt = Some(series),
                ColumnRole::Ood => ood = Some(series),
            }
        }
        Ok(LoadedRun {
            run,
            ood,
            lambda: self.lambda,
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<LoadedRun> {
    let manifest: RunManifest = read_json(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.load(base)
}

// ---------------------------------------------------------------------------
// synthetic specs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDoc {
    #[serde(default, alias = "truth", skip_serializing_if = "Option::is_none")]
    pub truth_pt: Option<LawParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_cpt: Option<LawParams>,
    pub schedules: Vec<ScheduleDoc>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_true")]
    pub include_pt: bool,
    #[serde(default = "default_r_cpt")]
    pub r_cpt: f64,
    #[serde(default, rename = "N", alias = "n", skip_serializing_if = "Option::is_none")]
    pub n: Option<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_stride() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl Document for SynthDoc {
    const FORMAT: &'static str = "synth-spec";
    const VERSION: u32 = 1;
}

impl SynthDoc {
    pub fn to_spec(&self) -> Result<SynthSpec> {
        let schedules = self
            .schedules
            .iter()
            .map(ScheduleDoc::to_schedule)
            .collect::<Result<Vec<_>>>()?;
        Ok(SynthSpec {
            truth_pt: self.truth_pt,
            truth_cpt: self.truth_cpt,
            schedules,
            r_cpt: self.r_cpt,
            n: self.n,
            lambda: self.lambda,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            stride: self.stride,
            include_pt: self.include_pt,
        })
    }
}

/// Writes one run as `<stem>.schedule.json`, `<stem>.csv` and
/// `<stem>.manifest.json` in `dir`; returns the written paths, manifest last.
pub fn write_run(dir: &Path, stem: &str, run: &Run, lambda: f64) -> Result<Vec<PathBuf>> {
    let schedule_name = format!("{stem}.schedule.json");
    let log_name = format!("{stem}.csv");
    let manifest_path = dir.join(format!("{stem}.manifest.json"));
    write_json(&dir.join(&schedule_name), &ScheduleDoc::from_schedule(&run.schedule))?;

    let mut domains = BTreeMap::new();
    let mut cols: Vec<(&str, &LossSeries)> = Vec::new();
    if let Some(s) = &run.pt {
        cols.push(("loss_pt", s));
        domains.insert("loss_pt".to_string(), ColumnRole::Pt);
    }
    if let Some(s) = &run.cpt {
        cols.push(("loss_cpt", s));
        domains.insert("loss_cpt".to_string(), ColumnRole::Cpt);
    }
    let Some((_, first)) = cols.first() else {
        return Err(Error::InvalidArgument("run has no loss series".into()));
    };
    for (_, s) in &cols[1..] {
        first.ensure_aligned(s)?;
    }
    let columns: Vec<(&str, &[f64])> = cols.iter().map(|(n, s)| (*n, s.values.as_slice())).collect();
    let file = fs::File::create(dir.join(&log_name))?;
    write_loss_log(std::io::BufWriter::new(file), &first.steps, &columns)?;

    let manifest = RunManifest {
        schedule_path: schedule_name.clone().into(),
        losslog_path: log_name.clone().into(),
        lambda,
        r_cpt: run.r_cpt,
        n: run.n,
        domains,
        steps_relative_to_cpt: false,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(vec![dir.join(schedule_name), dir.join(log_name), manifest_path])
}

/// `knob,objective,delta_pt,delta_cpt` rows of an optimization scan.
pub fn write_curve_csv<W: Write>(sink: W, report: &OptimumReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["knob", "objective", "delta_pt", "delta_cpt"])?;
    for p in &report.curve {
        w.write_record(&[
            p.knob.to_string(),
            p.objective.to_string(),
            p.delta_pt.to_string(),
            p.delta_cpt.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `s1pt=..,s2pt=..,s1cpt=..,s2cpt=..` (any order, all four required).
pub fn parse_area_point(text: &str) -> Result<crate::areas::AreaPoint> {
    let mut fields: BTreeMap<&str, f64> = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {part:?}")))?;
        let k = k.trim();
        if !matches!(k, "s1pt" | "s2pt" | "s1cpt" | "s2cpt") {
            return Err(Error::InvalidArgument(format!("unknown area {k:?}")));
        }
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{k}: {v:?} is not a number")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing {k}")))
    };
    Ok(crate::areas::AreaPoint {
        s1_pt: get("s1pt")?,
        s2_pt: get("s2pt")?,
        s1_cpt: get("s1cpt")?,
        s2_cpt: get("s2cpt")?,
    })
}
