//! County records, crude rates, the mortality-binned selection and the
//! train/validation/test split.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result, RowError};
use crate::rng::CounterRng;
use crate::stats::median;

pub const COUNTY_HEADER: [&str; 13] = [
    "fips",
    "name",
    "population",
    "deaths",
    "region",
    "prop_white",
    "prop_black",
    "prop_asian",
    "prop_hispanic",
    "prop_male",
    "mean_age",
    "any_college",
    "income",
];

/// Optional trailing column; rows with `exclude=1` are dropped at ingestion.
pub const EXCLUDE_COLUMN: &str = "exclude";

pub const REGION_NAMES: [&str; 8] = [
    "New England",
    "Mideast",
    "Great Lakes",
    "Plains",
    "Southeast",
    "Southwest",
    "Rocky Mountains",
    "Far West",
];

pub fn region_name(region: u8) -> &'static str {
    REGION_NAMES[(region - 1) as usize]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountyRecord {
    pub fips: String,
    pub name: String,
    pub population: u64,
    pub deaths: u64,
    /// 1..=8, see [`REGION_NAMES`].
    pub region: u8,
    pub prop_white: f64,
    pub prop_black: f64,
    pub prop_asian: f64,
    pub prop_hispanic: f64,
    pub prop_male: f64,
    pub mean_age: f64,
    pub any_college: Option<f64>,
    pub income: Option<f64>,
}

impl CountyRecord {
    pub fn crude_rate(&self) -> f64 {
        crude_rate(self.deaths, self.population).expect("validated record")
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.population == 0 {
            return Err("population must be positive".into());
        }
        if self.deaths > self.population {
            return Err(format!("deaths {} exceed population {}", self.deaths, self.population));
        }
        if !(1..=8).contains(&self.region) {
            return Err(format!("region {} outside 1..8", self.region));
        }
        let props = [
            ("prop_white", Some(self.prop_white)),
            ("prop_black", Some(self.prop_black)),
            ("prop_asian", Some(self.prop_asian)),
            ("prop_hispanic", Some(self.prop_hispanic)),
            ("prop_male", Some(self.prop_male)),
            ("any_college", self.any_college),
        ];
        for (name, v) in props {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name} = {v} outside [0,1]"));
                }
            }
        }
        if !self.mean_age.is_finite() || self.mean_age < 0.0 {
            return Err(format!("mean_age = {} invalid", self.mean_age));
        }
        if let Some(i) = self.income {
            if !i.is_finite() || i < 0.0 {
                return Err(format!("income = {i} invalid"));
            }
        }
        Ok(())
    }
}

/// Deaths per 1,000 persons.
pub fn crude_rate(deaths: u64, population: u64) -> Result<f64> {
    if population == 0 {
        return Err(Error::domain("population must be positive"));
    }
    if deaths > population {
        return Err(Error::domain("deaths exceed population"));
    }
    Ok(1000.0 * deaths as f64 / population as f64)
}

/// Outcome of reading a county file.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<CountyRecord>,
    pub excluded: usize,
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<T, String> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse::<T>().map_err(|_| format!("{name}: cannot parse {raw:?}"))
}

fn parse_optional(rec: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<Option<f64>, String> {
    let raw = rec.get(idx).unwrap_or("").trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    raw.parse::<f64>().map(Some).map_err(|_| format!("{name}: cannot parse {raw:?}"))
}

/// Read the county CSV. Every malformed row is reported; nothing is skipped silently.
pub fn read_counties<R: Read>(r: R) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let has_exclude = names.len() == 14 && names[13] == EXCLUDE_COLUMN;
    if names.len() < 13 || names[..13] != COUNTY_HEADER || (names.len() > 13 && !has_exclude) {
        return Err(Error::Validation(vec![RowError {
            row: 0,
            message: format!(
                "header must be `{}` (optionally followed by `{EXCLUDE_COLUMN}`), found `{}`",
                COUNTY_HEADER.join(","),
                names.join(",")
            ),
        }]));
    }

    let mut out = Ingested::default();
    let mut errors = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                errors.push(RowError { row, message: e.to_string() });
                continue;
            }
        };
        let expected = if has_exclude { 14 } else { 13 };
        if rec.len() != expected {
            errors.push(RowError { row, message: format!("expected {expected} fields, found {}", rec.len()) });
            continue;
        }
        let parsed = (|| -> std::result::Result<(CountyRecord, bool), String> {
            let fips = rec[0].trim().to_string();
            if fips.is_empty() {
                return Err("fips is empty".into());
            }
            let record = CountyRecord {
                fips,
                name: rec[1].trim().to_string(),
                population: parse_field(&rec, 2, "population")?,
                deaths: parse_field(&rec, 3, "deaths")?,
                region: parse_field(&rec, 4, "region")?,
                prop_white: parse_field(&rec, 5, "prop_white")?,
                prop_black: parse_field(&rec, 6, "prop_black")?,
                prop_asian: parse_field(&rec, 7, "prop_asian")?,
                prop_hispanic: parse_field(&rec, 8, "prop_hispanic")?,
                prop_male: parse_field(&rec, 9, "prop_male")?,
                mean_age: parse_field(&rec, 10, "mean_age")?,
                any_college: parse_optional(&rec, 11, "any_college")?,
                income: parse_optional(&rec, 12, "income")?,
            };
            record.validate()?;
            let exclude = if has_exclude {
                match rec[13].trim() {
                    "" | "0" => false,
                    "1" => true,
                    other => return Err(format!("exclude must be 0 or 1, found {other:?}")),
                }
            } else {
                false
            };
            Ok((record, exclude))
        })();
        match parsed {
            Ok((record, exclude)) => {
                if !seen.insert(record.fips.clone()) {
                    errors.push(RowError { row, message: format!("duplicate fips {}", record.fips) });
                } else if exclude {
                    out.excluded += 1;
                } else {
                    out.records.push(record);
                }
            }
            Err(message) => errors.push(RowError { row, message }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(errors))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_counties<W: Write>(w: W, records: &[CountyRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(COUNTY_HEADER)?;
    for r in records {
        wtr.write_record([
            r.fips.clone(),
            r.name.clone(),
            r.population.to_string(),
            r.deaths.to_string(),
            r.region.to_string(),
            r.prop_white.to_string(),
            r.prop_black.to_string(),
            r.prop_asian.to_string(),
            r.prop_hispanic.to_string(),
            r.prop_male.to_string(),
            r.mean_age.to_string(),
            fmt_opt(r.any_college),
            fmt_opt(r.income),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<counties>", e))?;
    Ok(())
}

/// Compare crude rates exactly via cross-multiplication.
fn cmp_rate(a: &CountyRecord, b: &CountyRecord) -> Ordering {
    let lhs = a.deaths as u128 * b.population as u128;
    let rhs = b.deaths as u128 * a.population as u128;
    lhs.cmp(&rhs)
}

/// Sort key used for binning: rate, then population, then FIPS.
fn cmp_rank(a: &CountyRecord, b: &CountyRecord) -> Ordering {
    cmp_rate(a, b)
        .then(a.population.cmp(&b.population))
        .then_with(|| a.fips.cmp(&b.fips))
}

fn cmp_populous(a: &CountyRecord, b: &CountyRecord) -> Ordering {
    b.population.cmp(&a.population).then_with(|| a.fips.cmp(&b.fips))
}

pub const N_BINS: usize = 13;
pub const TOP_POPULOUS: usize = 1000;
pub const PER_BIN: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct BinPlan {
    /// Ascending by crude rate; each bin lists FIPS in rank order.
    pub bins: Vec<Vec<String>>,
    /// Chosen counties in bin order, most populous first within a bin.
    pub selected: Vec<String>,
}

/// Top-1000-by-population, 13 rate bins, up to 40 most populous per bin.
pub fn select_counties(records: &[CountyRecord]) -> Result<BinPlan> {
    select_counties_with(records, TOP_POPULOUS, N_BINS, PER_BIN)
}

pub fn select_counties_with(
    records: &[CountyRecord],
    top: usize,
    n_bins: usize,
    per_bin: usize,
) -> Result<BinPlan> {
    if records.len() < n_bins {
        return Err(Error::domain(format!(
            "need at least {n_bins} counties to form {n_bins} bins, got {}",
            records.len()
        )));
    }
    let mut pool: Vec<&CountyRecord> = records.iter().collect();
    pool.sort_by(|a, b| cmp_populous(a, b));
    pool.truncate(top);
    pool.sort_by(|a, b| cmp_rank(a, b));

    let n = pool.len();
    let base = n / n_bins;
    let extra = n % n_bins;
    let mut bins = Vec::with_capacity(n_bins);
    let mut selected = Vec::new();
    let mut start = 0;
    for b in 0..n_bins {
        let len = base + usize::from(b < extra);
        let members = &pool[start..start + len];
        start += len;
        bins.push(members.iter().map(|r| r.fips.clone()).collect::<Vec<_>>());
        let mut by_pop: Vec<&CountyRecord> = members.to_vec();
        by_pop.sort_by(|a, b| cmp_populous(a, b));
        selected.extend(by_pop.iter().take(per_bin).map(|r| r.fips.clone()));
    }
    Ok(BinPlan { bins, selected })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitLabel {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitLabel::Train => "train",
            SplitLabel::Validation => "validation",
            SplitLabel::Test => "test",
        })
    }
}

impl FromStr for SplitLabel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitLabel::Train),
            "validation" => Ok(SplitLabel::Validation),
            "test" => Ok(SplitLabel::Test),
            other => Err(format!("unknown split label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitAssignment {
    pub labels: BTreeMap<String, SplitLabel>,
}

impl SplitAssignment {
    pub fn get(&self, fips: &str) -> Option<SplitLabel> {
        self.labels.get(fips).copied()
    }

    pub fn members(&self, label: SplitLabel) -> Vec<String> {
        self.labels.iter().filter(|(_, l)| **l == label).map(|(f, _)| f.clone()).collect()
    }

    pub fn count(&self, label: SplitLabel) -> usize {
        self.labels.values().filter(|l| **l == label).count()
    }
}

/// Split sizes for `n` counties: validation and test round half-up from 15% and
/// 20%, training takes the remainder. For 430 counties this gives 279/65/86.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (15 * n + 50) / 100;
    let test = (20 * n + 50) / 100;
    (n - val - test, val, test)
}

/// Seeded random partition of the selected counties.
pub fn split(plan: &BinPlan, seed: u64) -> Result<SplitAssignment> {
    if plan.selected.is_empty() {
        return Err(Error::domain("no counties selected"));
    }
    let mut fips = plan.selected.clone();
    fips.sort();
    fips.dedup();
    let mut rng = CounterRng::derive(seed, 0x5911_7);
    rng.shuffle(&mut fips);
    let (n_train, n_val, _) = split_sizes(fips.len());
    let labels = fips
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let l = if i < n_train {
                SplitLabel::Train
            } else if i < n_train + n_val {
                SplitLabel::Validation
            } else {
                SplitLabel::Test
            };
            (f, l)
        })
        .collect();
    Ok(SplitAssignment { labels })
}

pub fn write_splits<W: Write>(w: W, s: &SplitAssignment) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["fips", "label"])?;
    for (f, l) in &s.labels {
        wtr.write_record([f.as_str(), &l.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<splits>", e))?;
    Ok(())
}

pub fn read_splits<R: Read>(r: R) -> Result<SplitAssignment> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut labels = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        match (rec.get(0), rec.get(1).map(str::parse::<SplitLabel>)) {
            (Some(f), Some(Ok(l))) => {
                if labels.insert(f.to_string(), l).is_some() {
                    errors.push(RowError { row: i + 1, message: format!("duplicate fips {f}") });
                }
            }
            (_, Some(Err(e))) => errors.push(RowError { row: i + 1, message: e }),
            _ => errors.push(RowError { row: i + 1, message: "expected fips,label".into() }),
        }
    }
    if errors.is_empty() {
        Ok(SplitAssignment { labels })
    } else {
        Err(Error::Validation(errors))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ImputationReport {
    pub any_college: usize,
    pub income: usize,
}

/// Replace missing `any_college` and `income` with the median over counties
/// that report them.
pub fn impute_missing(mut records: Vec<CountyRecord>) -> Result<(Vec<CountyRecord>, ImputationReport)> {
    let mut report = ImputationReport::default();
    let college: Vec<f64> = records.iter().filter_map(|r| r.any_college).collect();
    let income: Vec<f64> = records.iter().filter_map(|r| r.income).collect();
    let needs_college = records.iter().any(|r| r.any_college.is_none());
    let needs_income = records.iter().any(|r| r.income.is_none());
    let college_med = match (needs_college, median(&college)) {
        (true, None) => return Err(Error::domain("any_college is missing for every county")),
        (_, m) => m,
    };
    let income_med = match (needs_income, median(&income)) {
        (true, None) => return Err(Error::domain("income is missing for every county")),
        (_, m) => m,
    };
    for r in &mut records {
        if r.any_college.is_none() {
            r.any_college = college_med;
            report.any_college += 1;
        }
        if r.income.is_none() {
            r.income = income_med;
            report.income += 1;
        }
    }
    Ok((records, report))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn county(fips: &str, population: u64, deaths: u64) -> CountyRecord {
        CountyRecord {
            fips: fips.into(),
            name: format!("County {fips}"),
            population,
            deaths,
            region: 1,
            prop_white: 0.7,
            prop_black: 0.1,
            prop_asian: 0.05,
            prop_hispanic: 0.1,
            prop_male: 0.49,
            mean_age: 38.0,
            any_college: Some(0.6),
            income: Some(45_000.0),
        }
    }

    #[test]
    fn crude_rate_examples() {
        let r = crude_rate(1_721_052, 217_938_597).unwrap();
        assert!((r - 7.897).abs() < 0.005);
        assert_eq!(crude_rate(0, 5000).unwrap(), 0.0);
        assert_eq!(crude_rate(5, 2000).unwrap(), 2.5);
        assert!(crude_rate(1, 0).is_err());
    }

    #[test]
    fn thirteen_counties_one_per_bin() {
        let recs: Vec<_> = (0..13).map(|i| county(&format!("{i:05}"), 10_000 + i, 10 + i * 3)).collect();
        let plan = select_counties(&recs).unwrap();
        assert_eq!(plan.bins.len(), 13);
        assert!(plan.bins.iter().all(|b| b.len() == 1));
        assert_eq!(plan.selected.len(), 13);
        assert!(select_counties(&recs[..12]).is_err());
    }

    #[test]
    fn bins_sizes_and_per_bin_cap() {
        let recs: Vec<_> = (0..1300u64)
            .map(|i| county(&format!("{i:05}"), 1000 + (i * 7919) % 100_000, 1 + (i * 104_729) % 900))
            .collect();
        let plan = select_counties(&recs).unwrap();
        let sizes: Vec<usize> = plan.bins.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 1000);
        // 1000 = 13·76 + 12: the 12 lowest-rate bins get one extra
        assert_eq!(sizes[..12], [77; 12]);
        assert_eq!(sizes[12], 76);
        assert_eq!(plan.selected.len(), 13 * 40);
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        assert_eq!(split_sizes(430), (279, 65, 86));
        assert_eq!(split_sizes(20), (13, 3, 4));
        assert_eq!(split_sizes(60), (39, 9, 12));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let plan = BinPlan { bins: vec![], selected: (0..50).map(|i| format!("{i:05}")).collect() };
        let a = split(&plan, 11).unwrap();
        let b = split(&plan, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.len(), 50);
        assert_ne!(a, split(&plan, 12).unwrap());
        assert!(split(&BinPlan { bins: vec![], selected: vec![] }, 1).is_err());
    }

    #[test]
    fn imputation_uses_global_median() {
        let mut recs: Vec<_> = (0..4).map(|i| county(&i.to_string(), 100, 1)).collect();
        for (r, v) in recs.iter_mut().zip([Some(1.0), Some(2.0), None, Some(4.0)]) {
            r.income = v;
        }
        let (out, rep) = impute_missing(recs).unwrap();
        assert_eq!(out[2].income, Some(2.0));
        assert_eq!(rep, ImputationReport { any_college: 0, income: 1 });

        let complete: Vec<_> = (0..3).map(|i| county(&i.to_string(), 100, 1)).collect();
        let (same, rep) = impute_missing(complete.clone()).unwrap();
        assert_eq!(same, complete);
        assert_eq!(rep, ImputationReport::default());

        let mut three: Vec<_> = (0..3).map(|i| county(&i.to_string(), 100, 1)).collect();
        three[0].income = Some(10.0);
        three[1].income = None;
        three[2].income = None;
        let (out, _) = impute_missing(three).unwrap();
        assert_eq!(out[1].income, Some(10.0));
        assert_eq!(out[2].income, Some(10.0));

        let mut none: Vec<_> = (0..2).map(|i| county(&i.to_string(), 100, 1)).collect();
        none.iter_mut().for_each(|r| r.any_college = None);
        assert!(impute_missing(none).is_err());
    }

    #[test]
    fn csv_round_trip_and_row_errors() {
        let recs = vec![county("01001", 55_000, 500), county("01003", 200_000, 2_000)];
        let mut buf = Vec::new();
        write_counties(&mut buf, &recs).unwrap();
        assert_eq!(read_counties(&buf[..]).unwrap().records, recs);

        let bad = format!(
            "{}\n01001,A,100,5,1,0.5,0.1,0.1,0.1,0.5,40,0.5,100\n01002,B,0,0,1,0.5,0.1,0.1,0.1,0.5,40,,\n01003,C,100,5,9,0.5,0.1,0.1,0.1,0.5,40,0.5,\n",
            COUNTY_HEADER.join(",")
        );
        match read_counties(bad.as_bytes()) {
            Err(Error::Validation(rows)) => {
                assert_eq!(rows.iter().map(|r| r.row).collect::<Vec<_>>(), vec![2, 3]);
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn exclude_flag_drops_rows() {
        let text = format!(
            "{},exclude\n01001,A,100,5,1,0.5,0.1,0.1,0.1,0.5,40,0.5,100,0\n02001,B,100,5,8,0.5,0.1,0.1,0.1,0.5,40,0.5,100,1\n",
            COUNTY_HEADER.join(",")
        );
        let ing = read_counties(text.as_bytes()).unwrap();
        assert_eq!(ing.records.len(), 1);
        assert_eq!(ing.excluded, 1);
    }
}
