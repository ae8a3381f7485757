//! Day-indexed curve panels and their CSV representation.
//!
//! Input CSV layout: a `date` column followed by one column per intraday
//! interval, labelled by the clock time of the interval's end (`HH:MM`).
//! One row per day. The panel's time axis starts one interval before the
//! first label, so each observation sits at the end of its interval.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};

use crate::error::{Error, Result};
use crate::estimate::CurveSample;

/// A clock time as minutes from midnight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClockTime(pub u32);

impl ClockTime {
    pub fn parse(s: &str) -> Result<Self> {
        let (h, m) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("clock time '{s}' is not HH:MM")))?;
        let hours: u32 =
            h.trim().parse().map_err(|_| Error::Parse(format!("bad hour in '{s}'")))?;
        let minutes: u32 =
            m.trim().parse().map_err(|_| Error::Parse(format!("bad minute in '{s}'")))?;
        if hours > 23 || minutes > 59 {
            return Err(Error::Parse(format!("clock time '{s}' out of range")));
        }
        Ok(ClockTime(hours * 60 + minutes))
    }

    pub fn minutes(&self) -> u32 {
        self.0
    }
}

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

impl TryFrom<String> for ClockTime {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        ClockTime::parse(&s)
    }
}

impl From<ClockTime> for String {
    fn from(c: ClockTime) -> String {
        c.to_string()
    }
}

/// One day of the panel.
#[derive(Clone, Debug)]
pub struct PanelDay {
    pub date: NaiveDate,
    pub sample: CurveSample,
}

impl PanelDay {
    pub fn weekday(&self) -> Weekday {
        self.date.weekday()
    }
}

/// A collection of days sampled on one shared intraday grid.
#[derive(Clone, Debug)]
pub struct CurvePanel {
    pub days: Vec<PanelDay>,
    pub interval_minutes: u32,
    /// Clock times bounding the day: the start sits one interval before the
    /// first observation.
    pub day_window: (ClockTime, ClockTime),
}

impl CurvePanel {
    pub fn new(
        days: Vec<PanelDay>,
        interval_minutes: u32,
        day_window: (ClockTime, ClockTime),
    ) -> Result<Self> {
        if days.is_empty() {
            return Err(Error::NoData);
        }
        if interval_minutes == 0 {
            return Err(Error::Schema("interval must be positive".into()));
        }
        let grid = &days[0].sample.times;
        for d in &days[1..] {
            if d.sample.times != *grid {
                return Err(Error::Schema(format!(
                    "day {} is on a different time grid",
                    d.date
                )));
            }
        }
        if days.iter().any(|d| d.sample.values.iter().any(|&v| v < 0.0)) {
            return Err(Error::Schema("panel values must be nonnegative".into()));
        }
        Ok(CurvePanel { days, interval_minutes, day_window })
    }

    /// Length of the day in minutes; the time axis is [0, horizon].
    pub fn horizon(&self) -> f64 {
        (self.day_window.1 .0 - self.day_window.0 .0) as f64
    }

    pub fn domain(&self) -> (f64, f64) {
        (0.0, self.horizon())
    }

    /// A clock time mapped onto the panel's time axis.
    pub fn time_of(&self, clock: ClockTime) -> f64 {
        clock.0 as f64 - self.day_window.0 .0 as f64
    }

    /// The clock time at a point of the time axis.
    pub fn clock_of(&self, t: f64) -> ClockTime {
        ClockTime(self.day_window.0 .0 + t.round() as u32)
    }

    pub fn curves(&self) -> Vec<CurveSample> {
        self.days.iter().map(|d| d.sample.clone()).collect()
    }
}

/// Ingestion options: dates to exclude (holidays and other abnormal days).
#[derive(Clone, Debug, Default)]
pub struct SchemaConfig {
    pub exclude: HashSet<NaiveDate>,
}

impl SchemaConfig {
    /// Read an exclusion list: one ISO date per line, blank lines ignored.
    pub fn load_exclusions(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut exclude = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let date = NaiveDate::parse_from_str(line, "%Y-%m-%d").map_err(|_| {
                Error::Parse(format!("bad date '{line}' on line {}", lineno + 1))
            })?;
            exclude.insert(date);
        }
        Ok(SchemaConfig { exclude })
    }
}

fn parse_header(header: &csv::StringRecord) -> Result<(Vec<ClockTime>, u32, ClockTime)> {
    if header.len() < 3 {
        return Err(Error::Schema("need a date column and at least two intervals".into()));
    }
    if header.get(0).map(str::trim) != Some("date") {
        return Err(Error::Schema("first column must be 'date'".into()));
    }
    let labels: Vec<ClockTime> = header
        .iter()
        .skip(1)
        .map(|s| ClockTime::parse(s.trim()))
        .collect::<Result<_>>()?;
    let interval = labels[1].0.checked_sub(labels[0].0).filter(|&d| d > 0).ok_or_else(|| {
        Error::Schema("interval labels must be strictly increasing".into())
    })?;
    for w in labels.windows(2) {
        if w[1].0.checked_sub(w[0].0) != Some(interval) {
            return Err(Error::Schema("interval grid must be uniform".into()));
        }
    }
    let start = labels[0]
        .0
        .checked_sub(interval)
        .map(ClockTime)
        .ok_or_else(|| Error::Schema("first interval starts before midnight".into()))?;
    Ok((labels, interval, start))
}

/// Read one or more CSV files into a panel. Rows with missing, non-numeric,
/// or negative cells are dropped with a warning; excluded dates are skipped.
pub fn ingest_csv_readers<R: Read>(
    readers: Vec<(String, R)>,
    schema: &SchemaConfig,
) -> Result<CurvePanel> {
    let mut shared: Option<(Vec<ClockTime>, u32, ClockTime)> = None;
    let mut days: Vec<PanelDay> = Vec::new();
    let mut seen = HashSet::new();
    for (name, reader) in readers {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let parsed = parse_header(&header)?;
        match &shared {
            None => shared = Some(parsed),
            Some(existing) => {
                if existing.0 != parsed.0 {
                    return Err(Error::Schema(format!(
                        "{name}: column grid differs from the first file"
                    )));
                }
            }
        }
        let (labels, _, start) = shared.as_ref().unwrap();
        let times: Vec<f64> =
            labels.iter().map(|l| (l.0 - start.0) as f64).collect();
        for (rowno, record) in rdr.records().enumerate() {
            let record = record?;
            let date_str = record.get(0).unwrap_or("").trim();
            let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|_| {
                Error::Schema(format!("{name}: bad date '{date_str}' in row {}", rowno + 2))
            })?;
            if schema.exclude.contains(&date) {
                log::info!("{name}: excluding {date} (exclusion list)");
                continue;
            }
            if record.len() != labels.len() + 1 {
                log::warn!("{name}: dropping {date}: expected {} cells", labels.len() + 1);
                continue;
            }
            let mut values = Vec::with_capacity(labels.len());
            let mut ok = true;
            for cell in record.iter().skip(1) {
                match cell.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() && v >= 0.0 => values.push(v),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                log::warn!("{name}: dropping {date}: missing or invalid cell");
                continue;
            }
            if !seen.insert(date) {
                return Err(Error::Schema(format!("duplicate date {date}")));
            }
            let sample = CurveSample::new(times.clone(), values, date.to_string())?;
            days.push(PanelDay { date, sample });
        }
    }
    if days.is_empty() {
        return Err(Error::NoData);
    }
    days.sort_by_key(|d| d.date);
    let (labels, interval, start) = shared.unwrap();
    CurvePanel::new(days, interval, (start, *labels.last().unwrap()))
}

pub fn ingest_csv(paths: &[impl AsRef<Path>], schema: &SchemaConfig) -> Result<CurvePanel> {
    let mut readers = Vec::new();
    for p in paths {
        let p = p.as_ref();
        readers.push((p.display().to_string(), std::fs::File::open(p)?));
    }
    ingest_csv_readers(readers, schema)
}

/// Write a panel in the same CSV layout ingestion reads.
pub fn emit_csv<W: Write>(panel: &CurvePanel, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string()];
    let n = panel.days[0].sample.times.len();
    for j in 0..n {
        let clock = ClockTime(panel.day_window.0 .0 + (j as u32 + 1) * panel.interval_minutes);
        header.push(clock.to_string());
    }
    wtr.write_record(&header)?;
    for day in &panel.days {
        let mut row = vec![day.date.to_string()];
        row.extend(day.sample.values.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_bytes(s: &str) -> Vec<(String, &[u8])> {
        vec![("test.csv".to_string(), s.as_bytes())]
    }

    #[test]
    fn clock_time_round_trip() {
        let c = ClockTime::parse("07:05").unwrap();
        assert_eq!(c.minutes(), 425);
        assert_eq!(c.to_string(), "07:05");
        assert!(ClockTime::parse("24:00").is_err());
        assert!(ClockTime::parse("0700").is_err());
    }

    #[test]
    fn ingest_basic() {
        let data = "date,07:05,07:10,07:15\n2003-03-03,1,2,3\n2003-03-04,4,5,6\n";
        let panel = ingest_csv_readers(csv_bytes(data), &SchemaConfig::default()).unwrap();
        assert_eq!(panel.days.len(), 2);
        assert_eq!(panel.interval_minutes, 5);
        assert_eq!(panel.day_window.0.to_string(), "07:00");
        assert_eq!(panel.days[0].sample.times, vec![5.0, 10.0, 15.0]);
        assert_eq!(panel.days[1].sample.values, vec![4.0, 5.0, 6.0]);
        assert_eq!(panel.horizon(), 15.0);
    }

    #[test]
    fn ingest_drops_incomplete_day() {
        let data = "date,08:00,09:00\n2003-03-03,1,\n2003-03-04,4,5\n";
        let panel = ingest_csv_readers(csv_bytes(data), &SchemaConfig::default()).unwrap();
        assert_eq!(panel.days.len(), 1);
        assert_eq!(panel.days[0].date, NaiveDate::from_ymd_opt(2003, 3, 4).unwrap());
    }

    #[test]
    fn ingest_respects_exclusions_and_empty_errors() {
        let mut schema = SchemaConfig::default();
        schema.exclude.insert(NaiveDate::from_ymd_opt(2003, 3, 3).unwrap());
        let data = "date,08:00,09:00\n2003-03-03,1,2\n";
        assert!(matches!(
            ingest_csv_readers(csv_bytes(data), &schema),
            Err(Error::NoData)
        ));
    }

    #[test]
    fn ingest_rejects_nonuniform_grid() {
        let data = "date,08:00,09:00,09:30\n2003-03-03,1,2,3\n";
        assert!(matches!(
            ingest_csv_readers(csv_bytes(data), &SchemaConfig::default()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn emit_then_ingest_round_trips() {
        let data = "date,07:05,07:10,07:15\n2003-03-03,1.5,2,3\n2003-03-04,4,5.25,6\n";
        let panel = ingest_csv_readers(csv_bytes(data), &SchemaConfig::default()).unwrap();
        let mut buf = Vec::new();
        emit_csv(&panel, &mut buf).unwrap();
        let back = ingest_csv_readers(
            vec![("round".to_string(), &buf[..])],
            &SchemaConfig::default(),
        )
        .unwrap();
        assert_eq!(back.days.len(), panel.days.len());
        for (a, b) in panel.days.iter().zip(&back.days) {
            assert_eq!(a.date, b.date);
            assert_eq!(a.sample.values, b.sample.values);
            assert_eq!(a.sample.times, b.sample.times);
        }
    }
}
