//! Event and covariate files, and the configuration that describes them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::model::{CaptureHistory, Dataset};
use crate::selection::CountSummary;
use crate::simulator::SimConfig;

/// How a column of the subjects file becomes model covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovariateRule {
    /// `x - center`, plus `(x - center)^2` as `<name>^2` when `square`.
    Numeric {
        column: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<f64>,
        #[serde(default)]
        square: bool,
    },
    /// One indicator `<column>:<level>` per level other than `reference`,
    /// in sorted level order.
    Categorical { column: String, reference: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub tau: f64,
    /// When set, event times are timestamps converted to fractional days
    /// after this instant (`YYYY-MM-DD` or `YYYY-MM-DDTHH:MM:SS`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_origin: Option<String>,
    /// Covariate rules; when absent every non-id column of the subjects
    /// file is used as a numeric covariate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<CovariateRule>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<EmConfig>,
    /// Settings that generated the data, for simulated inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimConfig>,
}

impl IngestConfig {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            time_origin: None,
            covariates: None,
            em: None,
            simulation: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Input(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Input("tau must be a positive finite number".into()));
        }
        if let Some(o) = &self.time_origin {
            parse_timestamp(o)
                .ok_or_else(|| Error::Input(format!("cannot parse time_origin {o:?}")))?;
        }
        if let Some(em) = &self.em {
            em.validate()?;
        }
        Ok(())
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Parsed data plus non-fatal findings.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn list_ids(ids: &[String]) -> String {
    let shown: Vec<&str> = ids.iter().take(10).map(String::as_str).collect();
    if ids.len() > shown.len() {
        format!("{} and {} more", shown.join(", "), ids.len() - shown.len())
    } else {
        shown.join(", ")
    }
}

/// Reads `subject_id,time` rows into per-subject time lists.
pub fn read_events<R: Read>(r: R, cfg: &IngestConfig) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rdr = reader(r);
    let header = rdr.headers()?.clone();
    if header.len() != 2 || &header[0] != "subject_id" || &header[1] != "time" {
        return Err(Error::Input(format!(
            "events header must be `subject_id,time`, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let origin = cfg.time_origin.as_deref().and_then(parse_timestamp);
    let mut events: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut seen: HashMap<(String, u64), u64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 2 {
            return Err(Error::Input(format!(
                "events line {line}: expected 2 fields, found {}",
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::Input(format!(
                "events line {line}: empty subject_id"
            )));
        }
        let raw = &rec[1];
        let t = match origin {
            Some(o) => {
                let ts = parse_timestamp(raw).ok_or_else(|| {
                    Error::Input(format!(
                        "events line {line}: cannot parse timestamp {raw:?}"
                    ))
                })?;
                (ts - o).num_milliseconds() as f64 / 86_400_000.0
            }
            None => raw.parse::<f64>().map_err(|_| {
                Error::Input(format!("events line {line}: cannot parse time {raw:?}"))
            })?,
        };
        if !(t > 0.0 && t <= cfg.tau) {
            return Err(Error::Input(format!(
                "events line {line}: time {t} outside (0, {}]",
                cfg.tau
            )));
        }
        if let Some(first) = seen.insert((id.clone(), t.to_bits()), line) {
            return Err(Error::Input(format!(
                "events line {line}: duplicate capture of {id} at {t} (first on line {first})"
            )));
        }
        events.entry(id).or_default().push(t);
    }
    if events.is_empty() {
        return Err(Error::Input("events file has no rows".into()));
    }
    Ok(events)
}

/// Raw subjects table: header and rows keyed by subject id.
struct SubjectTable {
    columns: Vec<String>,
    rows: BTreeMap<String, (u64, Vec<String>)>,
}

fn read_subjects<R: Read>(r: R) -> Result<SubjectTable> {
    let mut rdr = reader(r);
    let header = rdr.headers()?.clone();
    if header.is_empty() || &header[0] != "subject_id" {
        return Err(Error::Input(
            "subjects header must start with `subject_id`".into(),
        ));
    }
    let columns: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut rows = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != header.len() {
            return Err(Error::Input(format!(
                "subjects line {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        let values = rec.iter().skip(1).map(String::from).collect();
        if let Some((first, _)) = rows.insert(id.clone(), (line, values)) {
            return Err(Error::Input(format!(
                "subjects line {line}: {id} already listed on line {first}"
            )));
        }
    }
    Ok(SubjectTable { columns, rows })
}

fn default_rules(columns: &[String]) -> Vec<CovariateRule> {
    columns
        .iter()
        .map(|c| CovariateRule::Numeric {
            column: c.clone(),
            name: None,
            center: None,
            square: false,
        })
        .collect()
}

/// Output column names and encoded rows keyed by subject.
type Encoded = (Vec<String>, BTreeMap<String, Vec<f64>>);

fn encode(
    rules: &[CovariateRule],
    table: &SubjectTable,
    ids: &[&String],
) -> Result<Encoded> {
    let col = |name: &str| {
        table
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Input(format!("subjects file has no column {name}")))
    };
    let mut names = Vec::new();
    let mut out: BTreeMap<String, Vec<f64>> =
        ids.iter().map(|id| ((*id).clone(), Vec::new())).collect();
    for rule in rules {
        match rule {
            CovariateRule::Numeric {
                column,
                name,
                center,
                square,
            } => {
                let j = col(column)?;
                let label = name.clone().unwrap_or_else(|| column.clone());
                names.push(label.clone());
                if *square {
                    names.push(format!("{label}^2"));
                }
                for id in ids {
                    let (line, row) = &table.rows[*id];
                    let x: f64 = row[j].parse().map_err(|_| {
                        Error::Input(format!(
                            "subjects line {line}: column {column} value {:?} is not numeric",
                            row[j]
                        ))
                    })?;
                    if !x.is_finite() {
                        return Err(Error::Input(format!(
                            "subjects line {line}: column {column} is not finite"
                        )));
                    }
                    let v = x - center.unwrap_or(0.0);
                    let dst = out.get_mut(*id).unwrap();
                    dst.push(v);
                    if *square {
                        dst.push(v * v);
                    }
                }
            }
            CovariateRule::Categorical { column, reference } => {
                let j = col(column)?;
                let levels: BTreeSet<&str> =
                    ids.iter().map(|id| table.rows[*id].1[j].as_str()).collect();
                if !levels.contains(reference.as_str()) {
                    return Err(Error::Input(format!(
                        "reference level {reference:?} of {column} does not occur among captured subjects"
                    )));
                }
                let others: Vec<&str> = levels.into_iter().filter(|l| *l != reference).collect();
                names.extend(others.iter().map(|l| format!("{column}:{l}")));
                for id in ids {
                    let v = &table.rows[*id].1[j];
                    out.get_mut(*id).unwrap().extend(others.iter().map(|l| {
                        if l == v {
                            1.0
                        } else {
                            0.0
                        }
                    }));
                }
            }
        }
    }
    Ok((names, out))
}

/// Builds the dataset from an events reader and an optional subjects
/// reader.
pub fn ingest_readers<R1: Read, R2: Read>(
    events: R1,
    subjects: Option<R2>,
    cfg: &IngestConfig,
) -> Result<Ingested> {
    cfg.validate()?;
    let events = read_events(events, cfg)?;
    let mut warnings = Vec::new();
    let (names, covariates) = match subjects {
        None => {
            if cfg.covariates.as_ref().is_some_and(|c| !c.is_empty()) {
                return Err(Error::Input(
                    "covariate rules given without a subjects file".into(),
                ));
            }
            (Vec::new(), BTreeMap::new())
        }
        Some(r) => {
            let table = read_subjects(r)?;
            let missing: Vec<String> = events
                .keys()
                .filter(|id| !table.rows.contains_key(*id))
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Err(Error::Input(format!(
                    "{} captured subjects have no covariate row: {}",
                    missing.len(),
                    list_ids(&missing)
                )));
            }
            let unused = table
                .rows
                .keys()
                .filter(|id| !events.contains_key(*id))
                .count();
            if unused > 0 {
                warnings.push(format!(
                    "{unused} subjects in the covariate file have no captures and are ignored"
                ));
            }
            let rules = cfg
                .covariates
                .clone()
                .unwrap_or_else(|| default_rules(&table.columns));
            let ids: Vec<&String> = events.keys().collect();
            encode(&rules, &table, &ids)?
        }
    };
    let histories = events
        .into_iter()
        .map(|(id, times)| {
            let z = covariates.get(&id).cloned().unwrap_or_default();
            CaptureHistory::new(id, times, z)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ingested {
        dataset: Dataset::new(cfg.tau, names, histories)?,
        warnings,
    })
}

pub fn ingest(
    events_path: &Path,
    subjects_path: Option<&Path>,
    cfg: &IngestConfig,
) -> Result<Ingested> {
    let ev = std::fs::File::open(events_path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", events_path.display())))?;
    let sub = subjects_path
        .map(|p| {
            std::fs::File::open(p)
                .map_err(|e| Error::Input(format!("cannot open {}: {e}", p.display())))
        })
        .transpose()?;
    ingest_readers(ev, sub, cfg)
}

/// Writes `subject_id,time` rows, one per capture.
pub fn write_events<W: std::io::Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["subject_id", "time"])?;
    for h in &data.histories {
        for t in &h.times {
            wr.write_record([h.subject_id.as_str(), &t.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Writes `subject_id` plus one numeric column per covariate.
pub fn write_subjects<W: std::io::Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["subject_id".to_string()];
    header.extend(data.covariate_names.iter().cloned());
    wr.write_record(&header)?;
    for h in &data.histories {
        let mut row = vec![h.subject_id.clone()];
        row.extend(h.covariates.iter().map(|v| v.to_string()));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a frequency table with header `captures,subjects`.
pub fn read_counts<R: Read>(r: R) -> Result<CountSummary> {
    let mut rdr = reader(r);
    let header = rdr.headers()?.clone();
    if header.len() != 2 || &header[0] != "captures" || &header[1] != "subjects" {
        return Err(Error::Input(
            "counts header must be `captures,subjects`".into(),
        ));
    }
    let mut f: Vec<u64> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let parse = |s: &str| {
            s.parse::<u64>().map_err(|_| {
                Error::Input(format!(
                    "counts line {line}: {s:?} is not a nonnegative integer"
                ))
            })
        };
        let j = parse(&rec[0])? as usize;
        let c = parse(&rec[1])?;
        if j == 0 {
            return Err(Error::Input(format!(
                "counts line {line}: capture count must be at least 1"
            )));
        }
        if f.len() < j {
            f.resize(j, 0);
        }
        if f[j - 1] != 0 {
            return Err(Error::Input(format!(
                "counts line {line}: f_{j} given twice"
            )));
        }
        f[j - 1] = c;
    }
    CountSummary::new(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> IngestConfig {
        IngestConfig::new(10.0)
    }

    #[test]
    fn toy_fixture() {
        let ev = "subject_id,time\nb,2.5\na,1.0\na,3.0\n";
        let sub = "subject_id,female,age\na,1,30\nb,0,40\n";
        let got = ingest_readers(ev.as_bytes(), Some(sub.as_bytes()), &cfg()).unwrap();
        assert_eq!(got.dataset.covariate_names, vec!["female", "age"]);
        let want = vec![
            CaptureHistory::new("a", vec![1.0, 3.0], vec![1.0, 30.0]).unwrap(),
            CaptureHistory::new("b", vec![2.5], vec![0.0, 40.0]).unwrap(),
        ];
        assert_eq!(got.dataset.histories, want);
        assert!(got.warnings.is_empty());
    }

    #[test]
    fn boundary_and_duplicate_rules() {
        let e =
            ingest_readers("subject_id,time\na,0\n".as_bytes(), None::<&[u8]>, &cfg()).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(
            ingest_readers("subject_id,time\na,10\n".as_bytes(), None::<&[u8]>, &cfg()).is_ok()
        );
        assert!(ingest_readers(
            "subject_id,time\na,10.5\n".as_bytes(),
            None::<&[u8]>,
            &cfg()
        )
        .is_err());
        let e = ingest_readers(
            "subject_id,time\na,1\nb,2\na,1\n".as_bytes(),
            None::<&[u8]>,
            &cfg(),
        )
        .unwrap_err();
        assert!(
            e.to_string().contains("line 4") && e.to_string().contains("duplicate"),
            "{e}"
        );
        let e =
            ingest_readers("subject_id,time\na,x\n".as_bytes(), None::<&[u8]>, &cfg()).unwrap_err();
        assert!(e.to_string().contains("line 2"));
        assert!(ingest_readers("id,time\na,1\n".as_bytes(), None::<&[u8]>, &cfg()).is_err());
    }

    #[test]
    fn missing_and_unused_subjects() {
        let ev = "subject_id,time\na,1\nb,2\nc,3\n";
        let e = ingest_readers(
            ev.as_bytes(),
            Some("subject_id,x\na,1\n".as_bytes()),
            &cfg(),
        )
        .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("b, c"), "{msg}");
        let got = ingest_readers(
            "subject_id,time\na,1\n".as_bytes(),
            Some("subject_id,x\na,1\nz,2\n".as_bytes()),
            &cfg(),
        )
        .unwrap();
        assert_eq!(got.warnings.len(), 1);
        assert_eq!(got.dataset.len(), 1);
    }

    #[test]
    fn categorical_and_numeric_transforms() {
        let mut c = cfg();
        c.covariates = Some(vec![
            CovariateRule::Categorical {
                column: "district".into(),
                reference: "Center".into(),
            },
            CovariateRule::Numeric {
                column: "age".into(),
                name: None,
                center: Some(30.0),
                square: true,
            },
        ]);
        let ev = "subject_id,time\n1,1\n2,1\n3,1\n4,1\n";
        let sub =
            "subject_id,district,age\n1,Center,30\n2,South,32\n3,North-East,28\n4,North-West,31\n";
        let got = ingest_readers(ev.as_bytes(), Some(sub.as_bytes()), &c).unwrap();
        assert_eq!(
            got.dataset.covariate_names,
            vec![
                "district:North-East",
                "district:North-West",
                "district:South",
                "age",
                "age^2"
            ]
        );
        let z2 = &got.dataset.histories[1].covariates;
        assert_eq!(z2, &vec![0.0, 0.0, 1.0, 2.0, 4.0]);
        assert_eq!(got.dataset.histories[0].covariates[..3], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn timestamps_become_days() {
        let mut c = IngestConfig::new(365.0);
        c.time_origin = Some("2012-01-01".into());
        let ev = "subject_id,time\na,2012-01-02T12:00:00\na,2012-03-01\n";
        let got = ingest_readers(ev.as_bytes(), None::<&[u8]>, &c).unwrap();
        assert_eq!(got.dataset.histories[0].times, vec![1.5, 60.0]);
    }

    #[test]
    fn config_round_trip() {
        let text = r#"
tau = 365.0
time_origin = "2012-01-01"

[[covariates]]
kind = "categorical"
column = "district"
reference = "Center"

[[covariates]]
kind = "numeric"
column = "age"
center = 30.0
square = true

[em]
max_iter = 200
"#;
        let c = IngestConfig::from_toml_str(text).unwrap();
        assert_eq!(c.em.as_ref().unwrap().max_iter, 200);
        let again = IngestConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, c);
        assert!(IngestConfig::from_toml_str("tau = -1.0").is_err());
        assert!(IngestConfig::from_toml_str("tau = 1.0\nbogus = 2").is_err());
    }

    #[test]
    fn counts_table() {
        let c = read_counts("captures,subjects\n1,50785\n2,1124\n3,60\n4,4\n".as_bytes()).unwrap();
        assert_eq!(c.f, vec![50785, 1124, 60, 4]);
        assert_eq!(c.n(), 51973);
        assert_eq!(c.k(), 53229);
        assert!(read_counts("captures,subjects\n0,3\n".as_bytes()).is_err());
        assert!(read_counts("captures,subjects\n1,3\n1,4\n".as_bytes()).is_err());
    }

    #[test]
    fn events_round_trip() {
        let ev = "subject_id,time\na,1.25\na,3\nb,0.1\n";
        let sub = "subject_id,x\na,0.5\nb,-2\n";
        let d = ingest_readers(ev.as_bytes(), Some(sub.as_bytes()), &cfg())
            .unwrap()
            .dataset;
        let mut e = Vec::new();
        let mut s = Vec::new();
        write_events(&d, &mut e).unwrap();
        write_subjects(&d, &mut s).unwrap();
        let back = ingest_readers(e.as_slice(), Some(s.as_slice()), &cfg())
            .unwrap()
            .dataset;
        assert_eq!(back, d);
    }
}
