//! Endpoint labels from coded medical records.
//!
//! Code lists are data ([`LabelRuleset`]). A listed code of three characters is
//! a category and matches every subcode by prefix (`J43` matches `J438`); longer
//! listed codes match exactly. Codes are compared upper-cased with dots removed.

use crate::error::{Error, Result};
use crate::synthdata::EndpointLabels;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordSource {
    SelfReport,
    HospitalIcd10,
    HospitalIcd9,
    GpIcd10Mapped,
    DeathIcd10,
}

impl RecordSource {
    fn is_hospital(self) -> bool {
        matches!(self, RecordSource::HospitalIcd10 | RecordSource::HospitalIcd9)
    }
}

/// Calendar date parsed from `YYYY-MM-DD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IsoDate {
    pub year: i32,
    pub month: u8,
    pub day: u8,
}

impl IsoDate {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Schema(format!("malformed date {s:?}, expected YYYY-MM-DD"));
        let b = s.as_bytes();
        if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
            return Err(bad());
        }
        let num = |r: std::ops::Range<usize>| -> Result<u32> {
            let part = &s[r];
            if !part.bytes().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            part.parse().map_err(|_| bad())
        };
        let (year, month, day) = (num(0..4)?, num(5..7)?, num(8..10)?);
        let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
        let days = match month {
            1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
            4 | 6 | 9 | 11 => 30,
            2 if leap => 29,
            2 => 28,
            _ => return Err(bad()),
        };
        if day == 0 || day > days {
            return Err(bad());
        }
        Ok(IsoDate {
            year: year as i32,
            month: month as u8,
            day: day as u8,
        })
    }
}

impl fmt::Display for IsoDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalRecord {
    pub source: RecordSource,
    pub code: String,
    pub date: String,
    /// Only meaningful for hospital records.
    #[serde(default)]
    pub primary_cause: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRuleset {
    pub self_report_codes: Vec<String>,
    pub icd10_prefixes: Vec<String>,
    pub icd9_codes: Vec<String>,
    pub mortality_extra_icd10: Vec<String>,
}

impl Default for LabelRuleset {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        LabelRuleset {
            self_report_codes: v(&["1112", "1113", "1472"]),
            icd10_prefixes: v(&["J43", "J440", "J441", "J449"]),
            icd9_codes: v(&["492", "496"]),
            mortality_extra_icd10: v(&["J41"]),
        }
    }
}

fn normalize(code: &str) -> String {
    code.trim().replace('.', "").to_ascii_uppercase()
}

fn matches_list(code: &str, list: &[String]) -> bool {
    list.iter().any(|entry| {
        let entry = normalize(entry);
        if entry.len() == 3 {
            code.starts_with(&entry)
        } else {
            code == entry
        }
    })
}

fn well_formed(source: RecordSource, code: &str) -> bool {
    let b = code.as_bytes();
    match source {
        RecordSource::SelfReport => !b.is_empty() && b.iter().all(u8::is_ascii_digit),
        RecordSource::HospitalIcd9 => {
            (3..=5).contains(&b.len())
                && (b[0].is_ascii_digit() || b[0] == b'V' || b[0] == b'E')
                && b[1..].iter().all(u8::is_ascii_digit)
        }
        RecordSource::HospitalIcd10 | RecordSource::GpIcd10Mapped | RecordSource::DeathIcd10 => {
            (3..=7).contains(&b.len())
                && b[0].is_ascii_uppercase()
                && b[1].is_ascii_digit()
                && b[2].is_ascii_digit()
                && b[3..].iter().all(u8::is_ascii_alphanumeric)
        }
    }
}

/// Why a record was excluded from labelling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordDiagnostic {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelOutcome {
    pub labels: EndpointLabels,
    pub rejected: Vec<RecordDiagnostic>,
}

impl LabelRuleset {
    /// Whether the record's code denotes COPD for its source (ignoring dates).
    fn is_copd(&self, source: RecordSource, code: &str) -> bool {
        match source {
            RecordSource::SelfReport => self
                .self_report_codes
                .iter()
                .any(|c| normalize(c) == code),
            RecordSource::HospitalIcd9 => matches_list(code, &self.icd9_codes),
            RecordSource::HospitalIcd10 | RecordSource::GpIcd10Mapped | RecordSource::DeathIcd10 => {
                matches_list(code, &self.icd10_prefixes)
            }
        }
    }
}

/// Derive the three endpoints for one participant.
///
/// * copd_risk: a COPD code from any non-death source dated strictly after the test.
/// * exacerbation: a COPD hospital record flagged as primary cause, dated after the test.
/// * mortality: a death record with a COPD code or one of the extra mortality codes.
///
/// Records with malformed codes or dates are reported in `rejected` and ignored.
pub fn map_records(
    records: &[MedicalRecord],
    spiro_date: &str,
    rules: &LabelRuleset,
) -> Result<LabelOutcome> {
    let spiro = IsoDate::parse(spiro_date)?;
    let mut labels = EndpointLabels::default();
    let mut rejected = Vec::new();
    for (index, r) in records.iter().enumerate() {
        let code = normalize(&r.code);
        if !well_formed(r.source, &code) {
            rejected.push(RecordDiagnostic {
                index,
                message: format!("malformed {:?} code {:?}", r.source, r.code),
            });
            continue;
        }
        let date = match IsoDate::parse(&r.date) {
            Ok(d) => d,
            Err(e) => {
                rejected.push(RecordDiagnostic {
                    index,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let after = date > spiro;
        if r.source == RecordSource::DeathIcd10 {
            if rules.is_copd(r.source, &code) || matches_list(&code, &rules.mortality_extra_icd10) {
                labels.mortality = 1;
            }
            continue;
        }
        if rules.is_copd(r.source, &code) && after {
            labels.copd_risk = 1;
            if r.source.is_hospital() && r.primary_cause {
                labels.exacerbation = 1;
            }
        }
    }
    Ok(LabelOutcome { labels, rejected })
}

/// Read v2/v3 → ICD-10 lookup supplied by the user (two columns, tab or comma separated).
#[derive(Debug, Clone, Default)]
pub struct ReadCodeMap {
    map: HashMap<String, String>,
}

impl ReadCodeMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(['\t', ',']).map(str::trim);
            match (parts.next(), parts.next()) {
                (Some(read), Some(icd)) if !read.is_empty() && !icd.is_empty() => {
                    map.insert(read.to_string(), normalize(icd));
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "read-code map line {}: expected two columns",
                        n + 1
                    )))
                }
            }
        }
        Ok(ReadCodeMap { map })
    }

    /// A primary-care record carrying an ICD-10 code, if the Read code is mapped.
    pub fn map_gp_record(&self, read_code: &str, date: &str) -> Option<MedicalRecord> {
        self.map.get(read_code.trim()).map(|icd| MedicalRecord {
            source: RecordSource::GpIcd10Mapped,
            code: icd.clone(),
            date: date.to_string(),
            primary_cause: false,
        })
    }
}

/// One participant in a records NDJSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecords {
    pub id: String,
    pub spiro_date: String,
    pub records: Vec<MedicalRecord>,
}
