//! Per-day outcomes, summary statistics, and report output.

use std::io::Write;

use chrono::NaiveDate;

use crate::error::Result;

use super::panel::ClockTime;

/// One evaluated interval of one day, for plot-ready output.
#[derive(Clone, Debug, serde::Serialize)]
pub struct PlotRow {
    pub clock: ClockTime,
    pub truth: f64,
    pub forecast: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct DayOutcome {
    pub date: NaiveDate,
    pub weekday: String,
    pub rmse: f64,
    /// None when a zero count makes the percent error undefined.
    pub ape: Option<f64>,
    pub cover: Option<f64>,
    pub width: Option<f64>,
    pub detail: Vec<PlotRow>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub days: Vec<DayOutcome>,
}

/// Six-number summary with type-7 (linear interpolation) quartiles.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct SummaryStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

impl SummaryStats {
    pub fn from_values(values: &[f64]) -> Option<SummaryStats> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(SummaryStats {
            min: sorted[0],
            q1: quantile_type7(&sorted, 0.25),
            median: quantile_type7(&sorted, 0.5),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            q3: quantile_type7(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

impl EvalReport {
    pub fn rmse_values(&self) -> Vec<f64> {
        self.days.iter().map(|d| d.rmse).collect()
    }

    pub fn ape_values(&self) -> Vec<f64> {
        self.days.iter().filter_map(|d| d.ape).collect()
    }

    pub fn cover_values(&self) -> Vec<f64> {
        self.days.iter().filter_map(|d| d.cover).collect()
    }

    pub fn width_values(&self) -> Vec<f64> {
        self.days.iter().filter_map(|d| d.width).collect()
    }

    pub fn rmse_summary(&self) -> Option<SummaryStats> {
        SummaryStats::from_values(&self.rmse_values())
    }

    pub fn ape_summary(&self) -> Option<SummaryStats> {
        SummaryStats::from_values(&self.ape_values())
    }

    pub fn cover_summary(&self) -> Option<SummaryStats> {
        SummaryStats::from_values(&self.cover_values())
    }

    pub fn width_summary(&self) -> Option<SummaryStats> {
        SummaryStats::from_values(&self.width_values())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    /// Six summary statistics per metric.
    Table,
    /// One row per day with its metrics.
    Csv,
    /// One row per day and interval: time, truth, forecast, lower, upper.
    PlotData,
}

pub fn emit_report<W: Write>(report: &EvalReport, format: ReportFormat, out: &mut W) -> Result<()> {
    match format {
        ReportFormat::Table => {
            writeln!(
                out,
                "{:<8} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
                "metric", "days", "min", "Q1", "median", "mean", "Q3", "max"
            )?;
            let mut row = |name: &str, n: usize, s: Option<SummaryStats>| -> Result<()> {
                if let Some(s) = s {
                    writeln!(
                        out,
                        "{:<8} {:>6} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
                        name, n, s.min, s.q1, s.median, s.mean, s.q3, s.max
                    )?;
                }
                Ok(())
            };
            row("RMSE", report.rmse_values().len(), report.rmse_summary())?;
            row("APE", report.ape_values().len(), report.ape_summary())?;
            row("COVER", report.cover_values().len(), report.cover_summary())?;
            row("WIDTH", report.width_values().len(), report.width_summary())?;
            let excluded = report.days.len() - report.ape_values().len();
            if excluded > 0 {
                writeln!(out, "# {excluded} day(s) excluded from APE (zero counts)")?;
            }
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["date", "weekday", "rmse", "ape", "cover", "width"])?;
            let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for d in &report.days {
                w.write_record([
                    d.date.to_string(),
                    d.weekday.clone(),
                    d.rmse.to_string(),
                    fmt_opt(d.ape),
                    fmt_opt(d.cover),
                    fmt_opt(d.width),
                ])?;
            }
            w.flush()?;
        }
        ReportFormat::PlotData => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["date", "time", "truth", "forecast", "lower", "upper"])?;
            let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for d in &report.days {
                for r in &d.detail {
                    w.write_record([
                        d.date.to_string(),
                        r.clock.to_string(),
                        r.truth.to_string(),
                        r.forecast.to_string(),
                        fmt_opt(r.lower),
                        fmt_opt(r.upper),
                    ])?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_one_to_five() {
        let s = SummaryStats::from_values(&[5.0, 3.0, 1.0, 4.0, 2.0]).unwrap();
        assert_eq!(s.min, 1.0);
        assert_eq!(s.q1, 2.0);
        assert_eq!(s.median, 3.0);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.q3, 4.0);
        assert_eq!(s.max, 5.0);
    }

    #[test]
    fn summary_interpolates() {
        let s = SummaryStats::from_values(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.q1 - 1.75).abs() < 1e-12);
        assert!((s.median - 2.5).abs() < 1e-12);
        assert!((s.q3 - 3.25).abs() < 1e-12);
    }

    fn sample_report() -> EvalReport {
        let mk = |d: u32, rmse: f64, ape: Option<f64>| DayOutcome {
            date: NaiveDate::from_ymd_opt(2003, 9, d).unwrap(),
            weekday: "Tue".into(),
            rmse,
            ape,
            cover: Some(0.9),
            width: Some(12.0),
            detail: vec![
                PlotRow {
                    clock: ClockTime(720),
                    truth: 10.0,
                    forecast: 11.0,
                    lower: Some(8.0),
                    upper: Some(14.0),
                },
                PlotRow {
                    clock: ClockTime(725),
                    truth: 12.0,
                    forecast: 11.5,
                    lower: Some(9.0),
                    upper: Some(15.0),
                },
            ],
        };
        EvalReport { days: vec![mk(2, 1.5, Some(10.0)), mk(3, 2.5, None)] }
    }

    #[test]
    fn table_mentions_ape_exclusions() {
        let mut buf = Vec::new();
        emit_report(&sample_report(), ReportFormat::Table, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("RMSE"));
        assert!(text.contains("1 day(s) excluded from APE"));
    }

    #[test]
    fn plotdata_row_count_is_days_times_intervals() {
        let mut buf = Vec::new();
        emit_report(&sample_report(), ReportFormat::PlotData, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // Header plus 2 days x 2 intervals.
        assert_eq!(text.lines().count(), 1 + 4);
    }

    #[test]
    fn empty_report_table_is_fine() {
        let report = EvalReport { days: vec![] };
        let mut buf = Vec::new();
        emit_report(&report, ReportFormat::Table, &mut buf).unwrap();
    }
}
