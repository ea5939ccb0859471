//! Time series, moving averages, convergence detection, absolute aggregate
//! utilities and CSV export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::utility::{absolute_factor, UtilityKind};

pub const MA_WINDOW_S: f64 = 10.0;
pub const CONVERGENCE_BAND: f64 = 0.05;
/// Fraction of the run (at its end) that defines the steady-state value.
pub const STEADY_FRACTION: f64 = 0.1;

/// A named channel of `(time, value)` samples with strictly increasing times.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSeries {
    pub name: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), times: Vec::new(), values: Vec::new() }
    }

    pub fn from_samples(name: impl Into<String>, samples: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut s = Self::new(name);
        for (t, v) in samples {
            s.push(t, v);
        }
        s
    }

    /// Appends a sample; a time that does not advance replaces the last value.
    pub fn push(&mut self, t: f64, v: f64) {
        if let Some(&last) = self.times.last() {
            if t <= last {
                *self.values.last_mut().expect("non-empty") = v;
                return;
            }
        }
        self.times.push(t);
        self.values.push(v);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, f64)> {
        Some((*self.times.last()?, *self.values.last()?))
    }

    /// Mean of the samples with `t_from <= t <= t_to`.
    pub fn mean_between(&self, t_from: f64, t_to: f64) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for (&t, &v) in self.times.iter().zip(&self.values) {
            if t >= t_from && t <= t_to {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Mean of the final `fraction` of the samples (at least one).
    pub fn tail_mean(&self, fraction: f64) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let k = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len());
        let tail = &self.values[self.len() - k..];
        Some(tail.iter().sum::<f64>() / k as f64)
    }

    /// Samples with `t_from <= t <= t_to`.
    pub fn slice(&self, t_from: f64, t_to: f64) -> Self {
        Self::from_samples(
            self.name.clone(),
            self.times.iter().zip(&self.values).filter(|(&t, _)| t >= t_from && t <= t_to).map(|(&t, &v)| (t, v)),
        )
    }
}

/// Trailing mean over the samples in `(t - window, t]`.
pub fn moving_average(series: &MetricSeries, window_s: f64) -> MetricSeries {
    let mut out = MetricSeries::new(format!("{}:ma", series.name));
    let (mut lo, mut sum) = (0usize, 0.0);
    for i in 0..series.len() {
        sum += series.values[i];
        let t = series.times[i];
        while series.times[lo] <= t - window_s {
            sum -= series.values[lo];
            lo += 1;
        }
        out.times.push(t);
        out.values.push(sum / (i + 1 - lo) as f64);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Convergence {
    At(f64),
    DidNotConverge,
}

impl Convergence {
    pub fn time(self) -> Option<f64> {
        match self {
            Self::At(t) => Some(t),
            Self::DidNotConverge => None,
        }
    }

    pub fn is_converged(self) -> bool {
        matches!(self, Self::At(_))
    }
}

/// Earliest time after which `smoothed` stays within `band * |steady|` of
/// its steady value (mean of the final 10% of samples).
pub fn convergence_time(smoothed: &MetricSeries, band: f64) -> Convergence {
    let Some(steady) = smoothed.tail_mean(STEADY_FRACTION) else {
        return Convergence::DidNotConverge;
    };
    convergence_time_to(smoothed, steady, band)
}

/// [`convergence_time`] against an explicit reference value.
pub fn convergence_time_to(smoothed: &MetricSeries, steady: f64, band: f64) -> Convergence {
    if smoothed.is_empty() || !steady.is_finite() {
        return Convergence::DidNotConverge;
    }
    let tol = band * steady.abs();
    let outside = |v: f64| !((v - steady).abs() <= tol);
    match smoothed.values.iter().rposition(|&v| outside(v)) {
        None => Convergence::At(smoothed.times[0]),
        Some(i) if i + 1 == smoothed.len() => Convergence::DidNotConverge,
        Some(i) => Convergence::At(smoothed.times[i + 1]),
    }
}

/// Moving average followed by [`convergence_time`].
pub fn convergence_time_raw(series: &MetricSeries, window_s: f64, band: f64) -> Convergence {
    convergence_time(&moving_average(series, window_s), band)
}

/// One delivered end-to-end pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub session: usize,
    pub time: f64,
    pub werner: f64,
}

/// Absolute aggregate (bits/s for SKR, ebits/s-like for NEG) of the
/// deliveries in `(t_from, t_to]`: per-pair factor with the `max{0, .}`
/// clamp, summed and divided by the window length.
pub fn aggregate_absolute(kind: UtilityKind, deliveries: &[Delivery], t_from: f64, t_to: f64) -> f64 {
    let span = t_to - t_from;
    if !(span > 0.0) {
        return 0.0;
    }
    let total: f64 = deliveries
        .iter()
        .filter(|d| d.time > t_from && d.time <= t_to)
        .map(|d| absolute_factor(kind, d.werner))
        .sum();
    total / span
}

/// Mean and 95% normal half-width (`1.96 * stderr`).
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// An ordered set of channels written to one CSV file.
#[derive(Debug, Clone, Default)]
pub struct ChannelGroup {
    series: Vec<MetricSeries>,
    index: HashMap<String, usize>,
}

impl ChannelGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, t: f64, v: f64) {
        let i = match self.index.get(name) {
            Some(&i) => i,
            None => {
                self.series.push(MetricSeries::new(name));
                self.index.insert(name.to_string(), self.series.len() - 1);
                self.series.len() - 1
            }
        };
        self.series[i].push(t, v);
    }

    pub fn get(&self, name: &str) -> Option<&MetricSeries> {
        self.index.get(name).map(|&i| &self.series[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricSeries> {
        self.series.iter()
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(f64, usize, usize)> = Vec::new();
        for (c, s) in self.series.iter().enumerate() {
            rows.extend((0..s.len()).map(|i| (s.times[i], c, i)));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = String::from("time_s,entity_id,value\n");
        for (t, c, i) in rows {
            let _ = writeln!(out, "{},{},{}", fmt_num(t), self.series[c].name, fmt_num(self.series[c].values[i]));
        }
        out
    }
}

/// Discrete events (interventions, drops, controller switches).
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub rows: Vec<(f64, String, f64)>,
}

impl EventLog {
    pub fn push(&mut self, t: f64, entity: impl Into<String>, value: f64) {
        self.rows.push((t, entity.into(), value));
    }

    pub fn count(&self, entity: &str) -> usize {
        self.rows.iter().filter(|r| r.1 == entity).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,entity_id,value\n");
        for (t, e, v) in &self.rows {
            let _ = writeln!(out, "{},{},{}", fmt_num(*t), e, fmt_num(*v));
        }
        out
    }
}

/// Ordered key/value summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let v = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = v,
            None => self.entries.push((key.to_string(), v)),
        }
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, fmt_num(value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

/// Everything a run writes to disk.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub sessions: ChannelGroup,
    pub links: ChannelGroup,
    pub aggregate: ChannelGroup,
    pub events: EventLog,
    pub summary: Summary,
}

impl RunOutput {
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sessions.csv"), self.sessions.to_csv())?;
        fs::write(dir.join("links.csv"), self.links.to_csv())?;
        fs::write(dir.join("aggregate.csv"), self.aggregate.to_csv())?;
        fs::write(dir.join("events.csv"), self.events.to_csv())?;
        write_summary(dir, &self.summary)
    }
}

pub fn write_summary(dir: &Path, summary: &Summary) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.csv"), summary.to_csv())
}

/// Shortest round-trip decimal representation; `inf`/`nan` spelled out.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        // Adding zero turns -0 into 0.
        format!("{}", v + 0.0)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn grid(f: impl Fn(f64) -> f64, dt: f64, t_end: f64) -> MetricSeries {
        let n = (t_end / dt).round() as usize;
        MetricSeries::from_samples("x", (0..=n).map(|i| (i as f64 * dt, f(i as f64 * dt))))
    }

    #[test]
    fn moving_average_constant_and_step() {
        let c = grid(|_| 3.0, 0.1, 20.0);
        assert!(moving_average(&c, 10.0).values.iter().all(|&v| (v - 3.0).abs() < 1e-12));
        // Step at t = 5; samples every 1 s; window 4 s covers 4 samples.
        let s = grid(|t| if t >= 5.0 { 1.0 } else { 0.0 }, 1.0, 12.0);
        let ma = moving_average(&s, 4.0);
        let expect = [0.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0];
        for (i, e) in expect.iter().enumerate() {
            assert_relative_eq!(ma.values[i], *e, epsilon = 1e-12);
        }
        let short = moving_average(&s, 0.5);
        assert_eq!(short.values, s.values);
    }

    #[test]
    fn convergence_examples() {
        let c = grid(|_| 2.0, 0.1, 50.0);
        assert_eq!(convergence_time(&c, 0.05), Convergence::At(0.0));
        let exits = grid(|t| if t > 49.0 { 10.0 } else { 1.0 }, 0.1, 50.0);
        // Final 10% mixes both levels, so the last sample is out of band.
        assert_eq!(convergence_time(&exits, 0.05), Convergence::DidNotConverge);
        // Overshoot that leaves the 5% band for the last time just before 30.
        let damped = grid(|t| if t < 30.0 { 1.0 + 0.5 * (t * 0.7).cos().abs() + 0.2 } else { 1.0 }, 0.1, 100.0);
        let ct = convergence_time(&damped, 0.05).time().unwrap();
        assert_relative_eq!(ct, 30.0, epsilon = 1e-9);
    }

    #[test]
    fn wider_band_converges_no_later() {
        let s = grid(|t| 1.0 + (-(t / 8.0)).exp() * (t * 1.3).sin(), 0.1, 160.0);
        let a = convergence_time(&s, 0.05).time().unwrap();
        let b = convergence_time(&s, 0.10).time().unwrap();
        assert!(b <= a);
    }

    #[test]
    fn absolute_aggregates() {
        assert_eq!(aggregate_absolute(UtilityKind::Skr, &[], 0.0, 1.0), 0.0);
        let d: Vec<Delivery> = (0..100).map(|i| Delivery { session: 0, time: 0.005 + i as f64 * 0.01, werner: 0.9 }).collect();
        assert_relative_eq!(aggregate_absolute(UtilityKind::Skr, &d, 0.0, 1.0), 42.7206, epsilon = 1e-3);
        let low = [Delivery { session: 0, time: 0.5, werner: 0.7 }];
        assert_eq!(aggregate_absolute(UtilityKind::Skr, &low, 0.0, 1.0), 0.0);
    }

    #[test]
    fn ci_and_csv() {
        let (m, h) = mean_ci(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_relative_eq!(h, 1.96 * (1.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        let mut g = ChannelGroup::new();
        g.push("s0:rate", 0.0, 1.0);
        g.push("s1:rate", 0.0, 2.5);
        g.push("s0:rate", 0.1, 1.5);
        assert_eq!(g.to_csv(), "time_s,entity_id,value\n0,s0:rate,1\n0,s1:rate,2.5\n0.1,s0:rate,1.5\n");
        let mut s = Summary::default();
        s.set("status", "ok");
        s.set_f64("x", f64::INFINITY);
        assert_eq!(s.to_csv(), "key,value\nstatus,ok\nx,inf\n");
    }
}
