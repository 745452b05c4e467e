//! Daily share of posted limits by responsible pipeline stage.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, NaiveDate, Timelike};
use serde::{Deserialize, Serialize};

use crate::corridor::{Corridor, Direction};
use crate::error::{Error, Result};
use crate::guards::Attribution;
use crate::service::DecisionRecord;

/// Which gantries to include with respect to custom (non-default) maxima.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomMaxFilter {
    #[default]
    All,
    Only,
    Exclude,
}

/// Time-of-day window `[start, end)` in minutes after local midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start_min: u32,
    pub end_min: u32,
}

impl Window {
    pub const MORNING: Window = Window {
        start_min: 6 * 60,
        end_min: 9 * 60,
    };
    pub const EVENING: Window = Window {
        start_min: 15 * 60,
        end_min: 18 * 60,
    };

    fn contains(&self, minute: u32) -> bool {
        minute >= self.start_min && minute < self.end_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakFilter {
    #[default]
    AllDay,
    /// Morning peak for decreasing-milepost corridors, evening for increasing.
    DirectionDefault,
    Window(Window),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionFilter {
    pub direction: Option<Direction>,
    pub peak: PeakFilter,
    pub custom_max: CustomMaxFilter,
    /// Local time offset from UTC used for days and peak windows.
    pub utc_offset_seconds: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayShare {
    pub date: NaiveDate,
    pub decisions: u64,
    /// Percentages in `Attribution::ALL` order.
    pub percent: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub attribution: Attribution,
    pub mean_percent: f64,
    /// Population standard deviation across days.
    pub std_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub filter: AttributionFilter,
    pub days: Vec<DayShare>,
    pub categories: Vec<CategoryStats>,
    pub decisions: u64,
}

impl AttributionSummary {
    pub fn category(&self, a: Attribution) -> &CategoryStats {
        &self.categories[a as usize]
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["attribution", "mean_percent", "std_percent", "days", "decisions"])?;
        for c in &self.categories {
            w.write_record([
                c.attribution.to_string(),
                format!("{:.4}", c.mean_percent),
                format!("{:.4}", c.std_percent),
                self.days.len().to_string(),
                self.decisions.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct GantryInfo {
    direction: Direction,
    custom_max: bool,
}

/// Summarizes decision logs from one or more corridors. Gantries are looked
/// up by id in `corridors` for direction and custom-maximum filtering.
pub fn attribution_summary(
    records: &[DecisionRecord],
    corridors: &[&Corridor],
    filter: &AttributionFilter,
) -> Result<AttributionSummary> {
    let mut info: HashMap<&str, GantryInfo> = HashMap::new();
    for c in corridors {
        for (i, g) in c.gantries().iter().enumerate() {
            info.insert(
                &g.id,
                GantryInfo {
                    direction: c.direction(),
                    custom_max: c.has_custom_max(i),
                },
            );
        }
    }
    let mut per_day: BTreeMap<NaiveDate, [u64; 4]> = BTreeMap::new();
    for r in records {
        let g = info
            .get(r.gantry_id.as_str())
            .ok_or_else(|| Error::Config(format!("gantry {:?} is not in any corridor", r.gantry_id)))?;
        if filter.direction.is_some_and(|d| d != g.direction) {
            continue;
        }
        match filter.custom_max {
            CustomMaxFilter::Only if !g.custom_max => continue,
            CustomMaxFilter::Exclude if g.custom_max => continue,
            _ => {}
        }
        let local = DateTime::from_timestamp(r.tick_timestamp + filter.utc_offset_seconds, 0)
            .ok_or_else(|| Error::Config(format!("timestamp {} out of range", r.tick_timestamp)))?
            .naive_utc();
        let window = match filter.peak {
            PeakFilter::AllDay => None,
            PeakFilter::DirectionDefault => Some(match g.direction {
                Direction::Decreasing => Window::MORNING,
                Direction::Increasing => Window::EVENING,
            }),
            PeakFilter::Window(w) => Some(w),
        };
        if window.is_some_and(|w| !w.contains(local.hour() * 60 + local.minute())) {
            continue;
        }
        per_day.entry(local.date()).or_default()[r.attribution as usize] += 1;
    }
    if per_day.is_empty() {
        return Err(Error::Empty("no decisions match the attribution filter"));
    }
    let days: Vec<DayShare> = per_day
        .into_iter()
        .map(|(date, counts)| {
            let total: u64 = counts.iter().sum();
            DayShare {
                date,
                decisions: total,
                percent: counts.map(|c| 100.0 * c as f64 / total as f64),
            }
        })
        .collect();
    let n = days.len() as f64;
    let categories = Attribution::ALL
        .iter()
        .map(|&a| {
            let xs: Vec<f64> = days.iter().map(|d| d.percent[a as usize]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            CategoryStats {
                attribution: a,
                mean_percent: mean,
                std_percent: var.sqrt(),
            }
        })
        .collect();
    Ok(AttributionSummary {
        filter: *filter,
        decisions: days.iter().map(|d| d.decisions).sum(),
        days,
        categories,
    })
}
