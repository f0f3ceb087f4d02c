//! Feature-statistics shift between source and target domains, and
//! plot-ready summaries of sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{self, Sample};
use crate::error::{DsuError, Result};
use crate::featstats::{self, InstanceStats, StatsDistance};
use crate::net::Params;
use crate::train::SweepRow;

/// Slot after the second convolution block.
pub const DEFAULT_SLOT: usize = 3;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShift {
    pub class: usize,
    pub mu_dist: f64,
    pub sigma_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub slot: usize,
    pub tag: String,
    pub seed: u64,
    pub classes: Vec<ClassShift>,
    /// Class-averaged distances.
    pub mu_dist: f64,
    pub sigma_dist: f64,
}

impl ShiftReport {
    pub fn tagged(mut self, tag: &str, seed: u64) -> Self {
        self.tag = tag.to_string();
        self.seed = seed;
        self
    }

    pub fn total(&self) -> f64 {
        self.mu_dist + self.sigma_dist
    }
}

/// Instance statistics at `slot`, grouped by label.
fn stats_by_class(
    params: &Params<f32>,
    samples: &[&Sample],
    slot: usize,
) -> Result<BTreeMap<usize, InstanceStats<f32>>> {
    let mut rows: BTreeMap<usize, (Vec<f32>, Vec<f32>)> = BTreeMap::new();
    let mut channels = 0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let (x, labels) = data::batch(chunk)?;
        let (_, taps) = params.eval_taps(&x)?;
        let tap = taps
            .into_iter()
            .find(|(id, _)| *id == slot)
            .map(|(_, t)| t)
            .ok_or_else(|| DsuError::Config(format!("slot {slot} does not exist in the network")))?;
        let stats = featstats::instance_stats(&tap, featstats::DEFAULT_EPS)?;
        channels = stats.channels();
        for (i, &label) in labels.iter().enumerate() {
            let entry = rows.entry(label).or_default();
            entry.0.extend_from_slice(&stats.mu.data()[i * channels..(i + 1) * channels]);
            entry.1.extend_from_slice(&stats.sigma.data()[i * channels..(i + 1) * channels]);
        }
    }
    rows.into_iter()
        .map(|(label, (mu, sigma))| {
            let n = mu.len() / channels.max(1);
            Ok((
                label,
                InstanceStats {
                    mu: Tensor::new(&[n, channels], mu)?,
                    sigma: Tensor::new(&[n, channels], sigma)?,
                },
            ))
        })
        .collect()
}

/// Distance between the batch-averaged statistics of `train` and `test` at
/// `slot`, per class and averaged over the classes present in both.
pub fn measure_shift(
    params: &Params<f32>,
    train: &[&Sample],
    test: &[&Sample],
    slot: usize,
    class_filter: Option<&[usize]>,
) -> Result<ShiftReport> {
    let keep = |s: &&&Sample| class_filter.is_none_or(|f| f.contains(&s.label));
    let train: Vec<&Sample> = train.iter().filter(keep).copied().collect();
    let test: Vec<&Sample> = test.iter().filter(keep).copied().collect();
    if train.is_empty() || test.is_empty() {
        return Err(DsuError::Input("class filter leaves no samples to compare".into()));
    }
    let a = stats_by_class(params, &train, slot)?;
    let b = stats_by_class(params, &test, slot)?;
    let mut classes = Vec::new();
    for (class, sa) in &a {
        if let Some(sb) = b.get(class) {
            let StatsDistance { mu_dist, sigma_dist } = featstats::stats_distance(sa, sb)?;
            classes.push(ClassShift {
                class: *class,
                mu_dist,
                sigma_dist,
            });
        }
    }
    if classes.is_empty() {
        return Err(DsuError::Input("no class is present in both splits".into()));
    }
    let n = classes.len() as f64;
    Ok(ShiftReport {
        slot,
        tag: String::new(),
        seed: 0,
        mu_dist: classes.iter().map(|c| c.mu_dist).sum::<f64>() / n,
        sigma_dist: classes.iter().map(|c| c.sigma_dist).sum::<f64>() / n,
        classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotMetric {
    OutOfDomainAccuracy,
    InDomainAccuracy,
    FinalLoss,
}

impl PlotMetric {
    pub fn name(self) -> &'static str {
        match self {
            Self::OutOfDomainAccuracy => "out_of_domain_accuracy",
            Self::InDomainAccuracy => "in_domain_accuracy",
            Self::FinalLoss => "final_loss",
        }
    }

    fn of(self, row: &SweepRow) -> f64 {
        match self {
            Self::OutOfDomainAccuracy => row.out_of_domain_accuracy,
            Self::InDomainAccuracy => row.in_domain_accuracy,
            Self::FinalLoss => row.final_loss,
        }
    }
}

/// One plotted point: the metric averaged over every run sharing
/// `(group, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub group: String,
    pub x: String,
    pub y: f64,
    pub n: usize,
}

/// Rounds to the nine significant digits written by [`emit_plot_data`].
pub fn nine_digits(v: f64) -> f64 {
    format!("{v:.8e}").parse().unwrap_or(v)
}

/// Averages `rows` per `(group, x)`, keeping first-seen order.
pub fn plot_points(rows: &[SweepRow], metric: PlotMetric) -> Vec<PlotPoint> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for row in rows {
        let key = (row.group.clone(), row.x.clone());
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0.0, 0)
        });
        e.0 += metric.of(row);
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|key| {
            let (sum, n) = acc[&key];
            PlotPoint {
                y: nine_digits(sum / n as f64),
                group: key.0,
                x: key.1,
                n,
            }
        })
        .collect()
}

/// Writes the per-`(group, x)` averages of `metric` as CSV with a leading
/// `#` comment describing the columns.
pub fn emit_plot_data(rows: &[SweepRow], metric: PlotMetric, path: &Path) -> Result<Vec<PlotPoint>> {
    let first = rows
        .first()
        .ok_or_else(|| DsuError::Input("no sweep rows to plot".into()))?;
    let points = plot_points(rows, metric);
    let mut body = format!(
        "# sweep={} x=sweep variable y=mean {} over seeds and held-out domains group=method n=runs averaged\n",
        first.sweep,
        metric.name()
    );
    body.push_str("group,x,y,n\n");
    for p in &points {
        body.push_str(&format!("{},{},{:.8e},{}\n", p.group, p.x, p.y, p.n));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DsuError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| DsuError::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| DsuError::io(path, e))?;
    Ok(points)
}

/// Parses a file written by [`emit_plot_data`].
pub fn read_plot_data(path: &Path) -> Result<Vec<PlotPoint>> {
    let text = fs::read_to_string(path).map_err(|e| DsuError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<PlotPoint>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_domains, generate_domain};
    use crate::net::{self, NetworkSpec};

    fn row(group: &str, x: &str, seed: u64, ood: f64) -> SweepRow {
        SweepRow {
            sweep: "p".into(),
            group: group.into(),
            x: x.into(),
            seed,
            held_out: "sketch".into(),
            in_domain_accuracy: 0.9,
            out_of_domain_accuracy: ood,
            final_loss: 0.1,
            wall_clock_secs: 1.0,
        }
    }

    #[test]
    fn plot_points_average_over_seeds() {
        let rows = vec![
            row("dsu", "0.1", 0, 0.5),
            row("dsu", "0.1", 1, 0.7),
            row("dsu", "0.5", 0, 0.8),
            row("identity", "0.1", 0, 0.4),
        ];
        let pts = plot_points(&rows, PlotMetric::OutOfDomainAccuracy);
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0].n, 2);
        assert!((pts[0].y - 0.6).abs() < 1e-9);
    }

    #[test]
    fn plot_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let rows = vec![row("dsu", "0.1", 0, 1.0 / 3.0), row("dsu", "0.3", 0, 2.0 / 7.0)];
        let written = emit_plot_data(&rows, PlotMetric::OutOfDomainAccuracy, &path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with('#'));
        assert_eq!(read_plot_data(&path).unwrap(), written);
    }

    #[test]
    fn empty_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plot_data(&[], PlotMetric::FinalLoss, &dir.path().join("x.csv")).is_err());
    }

    #[test]
    fn self_shift_is_zero_and_filter_errors() {
        let spec = NetworkSpec::backbone(&[4, 8], 4, 16);
        let params = net::build::<f32>(&spec, 3).unwrap();
        let d = generate_domain(&default_domains(0)[0], 4, 3, 16).unwrap();
        let all: Vec<&Sample> = d.iter().collect();
        let r = measure_shift(&params, &all, &all, 2, None).unwrap();
        assert_eq!(r.classes.len(), 4);
        assert!(r.total() < 1e-6);
        assert!(measure_shift(&params, &all, &all, 2, Some(&[9])).is_err());
        assert!(measure_shift(&params, &all, &all, 7, None).is_err());
    }
}
