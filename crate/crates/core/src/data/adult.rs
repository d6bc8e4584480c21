//! UCI Adult census income data (`adult.data` / `adult.test`).
//!
//! Encoding, 81 features in this order:
//!
//! | block           | width |
//! |-----------------|-------|
//! | workclass       | 8     |
//! | education       | 16    |
//! | marital-status  | 7     |
//! | occupation      | 14    |
//! | relationship    | 6     |
//! | race            | 5     |
//! | sex             | 2     |
//! | native-country  | 16 (15 most frequent countries + other) |
//! | continuous      | 6 (age, fnlwgt, education-num, capital-gain, capital-loss, hours-per-week), min-max scaled |
//! | bias            | 1     |
//!
//! A `?` in a categorical field leaves that block all-zero.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::Dataset;
use crate::error::{FedError, Result};
use crate::model::Sample;

pub const ADULT_FEATURES: usize = 81;

/// Encoding-table version, echoed into run summaries.
pub const ADULT_ENCODING_VERSION: &str = "adult-81-v1";

const WORKCLASS: &[&str] = &[
    "Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov", "Local-gov", "State-gov", "Without-pay",
    "Never-worked",
];
const EDUCATION: &[&str] = &[
    "Bachelors", "Some-college", "11th", "HS-grad", "Prof-school", "Assoc-acdm", "Assoc-voc", "9th", "7th-8th",
    "12th", "Masters", "1st-4th", "10th", "Doctorate", "5th-6th", "Preschool",
];
const MARITAL: &[&str] = &[
    "Married-civ-spouse", "Divorced", "Never-married", "Separated", "Widowed", "Married-spouse-absent",
    "Married-AF-spouse",
];
const OCCUPATION: &[&str] = &[
    "Tech-support", "Craft-repair", "Other-service", "Sales", "Exec-managerial", "Prof-specialty",
    "Handlers-cleaners", "Machine-op-inspct", "Adm-clerical", "Farming-fishing", "Transport-moving",
    "Priv-house-serv", "Protective-serv", "Armed-Forces",
];
const RELATIONSHIP: &[&str] = &["Wife", "Own-child", "Husband", "Not-in-family", "Other-relative", "Unmarried"];
const RACE: &[&str] = &["White", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other", "Black"];
const SEX: &[&str] = &["Female", "Male"];
const COUNTRY: &[&str] = &[
    "United-States", "Mexico", "Philippines", "Germany", "Canada", "Puerto-Rico", "El-Salvador", "India", "Cuba",
    "England", "Jamaica", "South", "China", "Italy", "Dominican-Republic",
];
const COUNTRY_WIDTH: usize = 16;

/// Column positions of the continuous fields.
const CONTINUOUS: [usize; 6] = [0, 2, 4, 10, 11, 12];
/// `(column, vocabulary)` for the categorical fields except native-country.
const CATEGORICAL: [(usize, &[&str]); 7] = [
    (1, WORKCLASS),
    (3, EDUCATION),
    (5, MARITAL),
    (6, OCCUPATION),
    (7, RELATIONSHIP),
    (8, RACE),
    (9, SEX),
];
const COUNTRY_COL: usize = 13;
const INCOME_COL: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdultOptions {
    /// Drop rows containing `?` instead of encoding the missing block as zeros.
    pub drop_missing: bool,
}

#[derive(Debug, Clone)]
pub struct AdultLoad {
    pub dataset: Dataset,
    /// Well-formed data rows in `adult.data` before any cleaning.
    pub raw_train_rows: usize,
    pub raw_test_rows: usize,
    pub rows_with_missing: usize,
    pub malformed_rows: usize,
}

struct RawRow {
    continuous: [f64; 6],
    categorical: [Option<usize>; 7],
    country: Option<usize>,
    label: usize,
}

impl RawRow {
    fn has_missing(&self) -> bool {
        self.country.is_none() || self.categorical.iter().any(Option::is_none)
    }
}

enum Parsed {
    Row(RawRow),
    Malformed,
    Skip,
}

fn parse_record(rec: &csv::StringRecord) -> Parsed {
    if rec.len() == 1 && rec.get(0).is_none_or(|f| f.is_empty() || f.starts_with('|')) {
        return Parsed::Skip;
    }
    if rec.len() != 15 {
        return Parsed::Malformed;
    }
    let mut continuous = [0.0; 6];
    for (slot, &col) in continuous.iter_mut().zip(&CONTINUOUS) {
        match rec[col].parse::<f64>() {
            Ok(v) if v.is_finite() => *slot = v,
            _ => return Parsed::Malformed,
        }
    }
    let mut categorical = [None; 7];
    for (slot, &(col, vocab)) in categorical.iter_mut().zip(&CATEGORICAL) {
        let field = &rec[col];
        if field == "?" {
            continue;
        }
        match vocab.iter().position(|v| *v == field) {
            Some(i) => *slot = Some(i),
            None => return Parsed::Malformed,
        }
    }
    let country = match &rec[COUNTRY_COL] {
        "?" => None,
        c => Some(COUNTRY.iter().position(|v| *v == c).unwrap_or(COUNTRY.len())),
    };
    let label = match rec[INCOME_COL].trim_end_matches('.') {
        ">50K" => 1,
        "<=50K" => 0,
        _ => return Parsed::Malformed,
    };
    Parsed::Row(RawRow {
        continuous,
        categorical,
        country,
        label,
    })
}

fn read_rows(path: &Path, malformed: &mut usize) -> Result<Vec<RawRow>> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}:{}: unreadable row skipped: {e}", path.display(), line + 1);
                *malformed += 1;
                continue;
            }
        };
        match parse_record(&rec) {
            Parsed::Row(r) => rows.push(r),
            Parsed::Skip => {}
            Parsed::Malformed => {
                log::warn!("{}:{}: malformed row skipped", path.display(), line + 1);
                *malformed += 1;
            }
        }
    }
    Ok(rows)
}

fn encode(row: &RawRow, min: &[f64; 6], max: &[f64; 6]) -> Sample {
    let mut f = Vec::with_capacity(ADULT_FEATURES);
    for (value, (_, vocab)) in row.categorical.iter().zip(&CATEGORICAL) {
        let start = f.len();
        f.resize(start + vocab.len(), 0.0f32);
        if let Some(i) = value {
            f[start + i] = 1.0;
        }
    }
    let start = f.len();
    f.resize(start + COUNTRY_WIDTH, 0.0);
    if let Some(i) = row.country {
        f[start + i] = 1.0;
    }
    for j in 0..6 {
        let span = max[j] - min[j];
        let v = if span > 0.0 { (row.continuous[j] - min[j]) / span } else { 0.0 };
        f.push(v.clamp(0.0, 1.0) as f32);
    }
    f.push(1.0);
    debug_assert_eq!(f.len(), ADULT_FEATURES);
    Sample::new(f, row.label)
}

/// Loads `adult.data` and `adult.test` from `dir`. Scaling statistics come
/// from the training split only.
pub fn load_adult(dir: &Path, opts: AdultOptions) -> Result<AdultLoad> {
    let mut malformed = 0;
    let train_raw = read_rows(&dir.join("adult.data"), &mut malformed)?;
    let test_raw = read_rows(&dir.join("adult.test"), &mut malformed)?;
    let (raw_train_rows, raw_test_rows) = (train_raw.len(), test_raw.len());
    let rows_with_missing = train_raw.iter().chain(&test_raw).filter(|r| r.has_missing()).count();
    if rows_with_missing > 0 {
        log::info!(
            "adult: {rows_with_missing} rows with missing fields ({})",
            if opts.drop_missing { "dropped" } else { "encoded as zero blocks" }
        );
    }
    let keep = |r: &RawRow| !(opts.drop_missing && r.has_missing());

    let mut min = [f64::INFINITY; 6];
    let mut max = [f64::NEG_INFINITY; 6];
    for r in train_raw.iter().filter(|r| keep(r)) {
        for j in 0..6 {
            min[j] = min[j].min(r.continuous[j]);
            max[j] = max[j].max(r.continuous[j]);
        }
    }
    if train_raw.is_empty() {
        return Err(FedError::CorruptFile {
            path: dir.join("adult.data").display().to_string(),
            reason: "no usable rows".into(),
        });
    }
    let train = train_raw.iter().filter(|r| keep(r)).map(|r| encode(r, &min, &max)).collect();
    let test = test_raw.iter().filter(|r| keep(r)).map(|r| encode(r, &min, &max)).collect();
    Ok(AdultLoad {
        dataset: Dataset {
            train,
            test,
            classes: 2,
            features: ADULT_FEATURES,
        },
        raw_train_rows,
        raw_test_rows,
        rows_with_missing,
        malformed_rows: malformed,
    })
}
