//! From daily gridded fields to labeled anomaly samples.

pub(crate) mod formats;
mod synth;

pub use formats::{
    read_grid, read_labels_csv, read_precip_csv, read_truth_csv, write_grid, write_labels_csv,
    write_atomic, write_precip_csv, write_truth_csv, LabelRow,
};
pub use synth::{synth_generate, SynthData, MIDWEST_LAT, MIDWEST_LON, PLANTED_FRACTION};

use chrono::{Datelike, NaiveDate};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Standard deviations below this are treated as zero.
pub const SIGMA_FLOOR: f64 = 1e-9;

/// Daily fields of one variable on a fixed lat/lon grid.
///
/// Values are stored date-major, then row-major `[lat, lon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DailyGridSeries {
    pub variable: String,
    dates: Vec<NaiveDate>,
    lats: Vec<f64>,
    lons: Vec<f64>,
    values: Vec<f64>,
}

impl DailyGridSeries {
    pub fn new(
        variable: impl Into<String>,
        dates: Vec<NaiveDate>,
        lats: Vec<f64>,
        lons: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Input(format!(
                "dates must be strictly increasing: {} is followed by {}",
                w[0], w[1]
            )));
        }
        let expected = dates.len() * lats.len() * lons.len();
        if values.len() != expected {
            return Err(Error::Input(format!(
                "{} dates x {}x{} grid needs {expected} values, got {}",
                dates.len(),
                lats.len(),
                lons.len(),
                values.len()
            )));
        }
        Ok(DailyGridSeries {
            variable: variable.into(),
            dates,
            lats,
            lons,
            values,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.lats.len() * self.lons.len()
    }

    /// Field for date index `i`, row-major `[lat, lon]`.
    pub fn day(&self, i: usize) -> &[f64] {
        let n = self.cells();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn grid(&self, i: usize) -> Tensor {
        Tensor::new([self.lats.len(), self.lons.len()], self.day(i).to_vec()).expect("grid shape")
    }

    fn same_grid(&self, other: &DailyGridSeries) -> bool {
        self.dates == other.dates && self.lats == other.lats && self.lons == other.lons
    }
}

/// Linear-interpolation percentile of `x` at fraction `m`.
///
/// Sorts ascending, sets `k = m (n - 1)` and interpolates between the
/// zero-based neighbours `floor(k)` and `ceil(k)`.
pub fn percentile(x: &[f64], m: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Input("percentile of an empty array".into()));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Input(format!("percentile fraction {m} outside [0, 1]")));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("percentile input contains NaN".into()));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = m * (sorted.len() - 1) as f64;
    let (f, c) = (k.floor(), k.ceil());
    if f == c {
        return Ok(sorted[f as usize]);
    }
    Ok(sorted[f as usize] * (c - k) + sorted[c as usize] * (k - f))
}

/// Mean over the cells whose coordinates fall inside the closed ranges,
/// one value per date.
pub fn regional_mean(series: &DailyGridSeries, lat_range: (f64, f64), lon_range: (f64, f64)) -> Result<Vec<f64>> {
    let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
    let cells: Vec<usize> = series
        .lats
        .iter()
        .enumerate()
        .filter(|(_, &lat)| inside(lat, lat_range))
        .flat_map(|(r, _)| {
            series
                .lons
                .iter()
                .enumerate()
                .filter(|(_, &lon)| inside(lon, lon_range))
                .map(move |(c, _)| r * series.lons.len() + c)
        })
        .collect();
    if cells.is_empty() {
        return Err(Error::Input(format!(
            "region lat {lat_range:?} lon {lon_range:?} contains no grid cells"
        )));
    }
    Ok((0..series.len())
        .map(|i| {
            let day = series.day(i);
            cells.iter().map(|&c| day[c]).sum::<f64>() / cells.len() as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub labels: Vec<u8>,
    pub threshold: f64,
    pub percentile: f64,
}

impl Labels {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Marks days whose value strictly exceeds the `m` percentile of the series.
pub fn label_extremes(precip: &[f64], m: f64) -> Result<Labels> {
    let threshold = percentile(precip, m)?;
    Ok(Labels {
        labels: precip.iter().map(|&p| u8::from(p > threshold)).collect(),
        threshold,
        percentile: m,
    })
}

/// Days in the calendar used for climatology; Feb 29 shares Feb 28's slot.
pub const CALENDAR_DAYS: usize = 365;

/// Zero-based calendar slot of `date` in a 365-day year.
pub fn calendar_day(date: NaiveDate) -> usize {
    let ordinal = date.ordinal0() as usize;
    let leap = NaiveDate::from_ymd_opt(date.year(), 2, 29).is_some();
    // Jan 1..Feb 28 occupy slots 0..=58
    if leap && ordinal >= 59 {
        ordinal - 1
    } else {
        ordinal
    }
}

/// Per-cell, per-calendar-day mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    cells: usize,
    /// Half-width in days of the pooling window around each calendar day.
    pub window: usize,
    mean: Vec<f64>,
    sd: Vec<f64>,
    counts: Vec<usize>,
}

impl Climatology {
    pub fn mean(&self, day: usize) -> &[f64] {
        &self.mean[day * self.cells..(day + 1) * self.cells]
    }

    pub fn sd(&self, day: usize) -> &[f64] {
        &self.sd[day * self.cells..(day + 1) * self.cells]
    }

    /// Number of samples pooled into calendar day `day`.
    pub fn count(&self, day: usize) -> usize {
        self.counts[day]
    }
}

/// Calendar-day climatology using only samples from the same calendar day.
pub fn climatology(series: &DailyGridSeries) -> Climatology {
    climatology_windowed(series, 0)
}

/// Calendar-day climatology pooling samples within `window` days (circular
/// over the year) of each calendar day. `window = 0` pools the exact day only.
pub fn climatology_windowed(series: &DailyGridSeries, window: usize) -> Climatology {
    let cells = series.cells();
    let window = window.min(CALENDAR_DAYS / 2);
    let slots: Vec<usize> = series.dates.iter().map(|&d| calendar_day(d)).collect();
    let neighbours = |slot: usize| {
        (0..=2 * window).map(move |o| (slot + CALENDAR_DAYS + o - window) % CALENDAR_DAYS)
    };

    let mut counts = vec![0usize; CALENDAR_DAYS];
    let mut mean = vec![0.0; CALENDAR_DAYS * cells];
    for (i, &slot) in slots.iter().enumerate() {
        let day = series.day(i);
        for s in neighbours(slot) {
            counts[s] += 1;
            for (m, v) in mean[s * cells..(s + 1) * cells].iter_mut().zip(day) {
                *m += v;
            }
        }
    }
    for (s, &n) in counts.iter().enumerate() {
        if n > 0 {
            for m in &mut mean[s * cells..(s + 1) * cells] {
                *m /= n as f64;
            }
        }
    }

    let mut var = vec![0.0; CALENDAR_DAYS * cells];
    for (i, &slot) in slots.iter().enumerate() {
        let day = series.day(i);
        for s in neighbours(slot) {
            let mu = &mean[s * cells..(s + 1) * cells];
            for ((acc, v), m) in var[s * cells..(s + 1) * cells].iter_mut().zip(day).zip(mu) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    for (s, &n) in counts.iter().enumerate() {
        if n > 0 {
            for v in &mut var[s * cells..(s + 1) * cells] {
                *v = (*v / n as f64).sqrt();
            }
        }
    }
    Climatology {
        cells,
        window,
        mean,
        sd: var,
        counts,
    }
}

/// Normalised anomalies `z = (x - mu) / sigma`; cells with `sigma` below
/// [`SIGMA_FLOOR`] get `z = 0`.
pub fn zscore_anomalies(series: &DailyGridSeries, clim: &Climatology) -> Result<DailyGridSeries> {
    if clim.cells != series.cells() {
        return Err(Error::Input(format!(
            "climatology has {} cells, series has {}",
            clim.cells,
            series.cells()
        )));
    }
    let mut values = Vec::with_capacity(series.values.len());
    for (i, &date) in series.dates.iter().enumerate() {
        let slot = calendar_day(date);
        if clim.count(slot) == 0 {
            return Err(Error::Input(format!("climatology has no samples for the calendar day of {date}")));
        }
        let (mu, sd) = (clim.mean(slot), clim.sd(slot));
        values.extend(series.day(i).iter().zip(mu).zip(sd).map(|((&x, &m), &s)| {
            if s < SIGMA_FLOOR {
                0.0
            } else {
                (x - m) / s
            }
        }));
    }
    DailyGridSeries::new(
        format!("{}_z", series.variable),
        series.dates.clone(),
        series.lats.clone(),
        series.lons.clone(),
        values,
    )
}

/// One day's stacked anomaly fields `[lat, lon, 2]` and its class.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    pub date: NaiveDate,
    pub anomalies: Tensor,
    pub label: u8,
}

/// Samples in date order with a chronological train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<GridSample>,
    pub train_len: usize,
}

/// Share of the (earliest) samples used for training.
pub const TRAIN_FRACTION_NUM: usize = 4;
pub const TRAIN_FRACTION_DEN: usize = 5;

impl Dataset {
    pub fn new(samples: Vec<GridSample>) -> Self {
        let train_len = samples.len() * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
        Dataset { samples, train_len }
    }

    /// Uses every sample for training.
    pub fn all_train(samples: Vec<GridSample>) -> Self {
        let train_len = samples.len();
        Dataset { samples, train_len }
    }

    pub fn train(&self) -> &[GridSample] {
        &self.samples[..self.train_len]
    }

    pub fn test(&self) -> &[GridSample] {
        &self.samples[self.train_len..]
    }

    /// `[negatives, positives]` in `samples`.
    pub fn class_counts(samples: &[GridSample]) -> [usize; 2] {
        let pos = samples.iter().filter(|s| s.label == 1).count();
        [samples.len() - pos, pos]
    }

    pub fn relabel(&self, labels: &[u8]) -> Result<Dataset> {
        if labels.len() != self.samples.len() {
            return Err(Error::Input(format!(
                "{} labels for {} samples",
                labels.len(),
                self.samples.len()
            )));
        }
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, &label)| GridSample { label, ..s.clone() })
            .collect();
        Ok(Dataset {
            samples,
            train_len: self.train_len,
        })
    }
}

/// Stacks two anomaly series into samples labelled by date.
pub fn build_dataset(
    first: &DailyGridSeries,
    second: &DailyGridSeries,
    label_dates: &[NaiveDate],
    labels: &[u8],
) -> Result<Dataset> {
    if !first.same_grid(second) {
        return Err(Error::Input(format!(
            "variables `{}` and `{}` do not share dates and grid",
            first.variable, second.variable
        )));
    }
    if label_dates != first.dates() || labels.len() != label_dates.len() {
        let mismatch = first
            .dates()
            .iter()
            .zip(label_dates)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("grid date {a} vs label date {b}"))
            .unwrap_or_else(|| format!("{} grid dates vs {} labels", first.len(), labels.len()));
        return Err(Error::Input(format!("labels are not aligned with the grids: {mismatch}")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("label {bad} is not 0 or 1")));
    }
    let (h, w) = (first.lats().len(), first.lons().len());
    let samples = (0..first.len())
        .map(|i| {
            let (a, b) = (first.day(i), second.day(i));
            let mut data = Vec::with_capacity(h * w * 2);
            for (x, y) in a.iter().zip(b) {
                data.push(*x);
                data.push(*y);
            }
            GridSample {
                date: first.dates()[i],
                anomalies: Tensor::new([h, w, 2], data).expect("stacked shape"),
                label: labels[i],
            }
        })
        .collect();
    Ok(Dataset::new(samples))
}
