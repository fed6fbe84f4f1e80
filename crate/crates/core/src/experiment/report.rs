//! Per-run reports and batch aggregation.

use super::ScenarioConfig;
use crate::error::Result;
use crate::model::ObjectClass;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementMetric {
    pub object: u32,
    pub class: ObjectClass,
    pub entry: usize,
    pub co_carried: bool,
    pub translation_error: f64,
    pub angular_error_deg: f64,
    pub verified: bool,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub rep: u32,
    pub anticipation: bool,
    pub completed: bool,
    pub min_safety_distance: Option<f64>,
    pub avg_safety_distance: Option<f64>,
    pub path_length: f64,
    pub duration: f64,
    pub ticks: u64,
    pub placements: Vec<PlacementMetric>,
    /// Mean errors over placed tables.
    pub mean_translation_error: Option<f64>,
    pub mean_angular_error_deg: Option<f64>,
    /// First time the planner had to leave the straight route or hold.
    pub first_deviation: Option<f64>,
    /// First time the onboard lidar hit a person.
    pub first_person_visible: Option<f64>,
    pub person_reads: u64,
    pub digest: String,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        scenario: &ScenarioConfig,
        seed: u64,
        anticipation: bool,
        completed: bool,
        min_safety_distance: Option<f64>,
        avg_safety_distance: Option<f64>,
        path_length: f64,
        duration: f64,
        ticks: u64,
        placements: Vec<PlacementMetric>,
        first_deviation: Option<f64>,
        first_person_visible: Option<f64>,
        person_reads: u64,
        digest: String,
    ) -> Self {
        let tables: Vec<&PlacementMetric> = placements.iter().filter(|p| p.class == ObjectClass::Table).collect();
        let mean = |f: fn(&PlacementMetric) -> f64| (!tables.is_empty()).then(|| tables.iter().map(|p| f(p)).sum::<f64>() / tables.len() as f64);
        Self {
            scenario: scenario.id.clone(),
            seed,
            rep: 0,
            anticipation,
            completed,
            min_safety_distance,
            avg_safety_distance,
            path_length,
            duration,
            ticks,
            mean_translation_error: mean(|p| p.translation_error),
            mean_angular_error_deg: mean(|p| p.angular_error_deg),
            placements,
            first_deviation,
            first_person_visible,
            person_reads,
            digest,
        }
    }

    pub fn condition(&self) -> &'static str {
        if self.anticipation {
            "on"
        } else {
            "off"
        }
    }
}

/// Sample mean and standard deviation (n − 1); a single sample has std 0.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

type Metric = (&'static str, fn(&RunReport) -> Option<f64>);

pub const METRICS: [Metric; 6] = [
    ("duration", |r| Some(r.duration)),
    ("min_safety_distance", |r| r.min_safety_distance),
    ("avg_safety_distance", |r| r.avg_safety_distance),
    ("path_length", |r| Some(r.path_length)),
    ("mean_translation_error", |r| r.mean_translation_error),
    ("mean_angular_error_deg", |r| r.mean_angular_error_deg),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub condition: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean ± std of every metric per (scenario, condition), skipping runs
/// where the metric is undefined.
pub fn batch_summary(reports: &[RunReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, &'static str), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.scenario.clone(), r.condition())).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((scenario, condition), runs) in groups {
        for (name, f) in METRICS {
            let xs: Vec<f64> = runs.iter().filter_map(|r| f(r)).collect();
            if let Some((mean, std)) = mean_std(&xs) {
                rows.push(SummaryRow {
                    scenario: scenario.clone(),
                    condition: condition.into(),
                    metric: name.into(),
                    n: xs.len(),
                    mean,
                    std,
                });
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub scenario: String,
    pub metric: String,
    pub n: usize,
    /// Mean of (on − off) over runs paired by seed and repetition.
    pub mean_delta: f64,
    pub std_delta: f64,
}

pub fn paired_deltas(reports: &[RunReport]) -> Vec<DeltaRow> {
    let mut pairs: BTreeMap<(String, u64, u32), [Option<&RunReport>; 2]> = BTreeMap::new();
    for r in reports {
        pairs.entry((r.scenario.clone(), r.seed, r.rep)).or_default()[usize::from(!r.anticipation)] = Some(r);
    }
    let mut out = Vec::new();
    let scenarios: Vec<String> = pairs.keys().map(|k| k.0.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for s in scenarios {
        for (name, f) in METRICS {
            let ds: Vec<f64> = pairs
                .iter()
                .filter(|(k, _)| k.0 == s)
                .filter_map(|(_, p)| match p {
                    [Some(on), Some(off)] => Some(f(on)? - f(off)?),
                    _ => None,
                })
                .collect();
            if let Some((m, sd)) = mean_std(&ds) {
                out.push(DeltaRow {
                    scenario: s.clone(),
                    metric: name.into(),
                    n: ds.len(),
                    mean_delta: m,
                    std_delta: sd,
                });
            }
        }
    }
    out
}

#[derive(Serialize)]
struct CsvRow<'a> {
    scenario: &'a str,
    seed: u64,
    rep: u32,
    anticipation: &'a str,
    completed: bool,
    duration: f64,
    ticks: u64,
    min_safety_distance: Option<f64>,
    avg_safety_distance: Option<f64>,
    path_length: f64,
    placements: usize,
    mean_translation_error: Option<f64>,
    mean_angular_error_deg: Option<f64>,
    first_deviation: Option<f64>,
    first_person_visible: Option<f64>,
    person_reads: u64,
    digest: &'a str,
}

/// One row per run.
pub fn write_csv(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::Error::Io(e.to_string()))?;
    for r in reports {
        w.serialize(CsvRow {
            scenario: &r.scenario,
            seed: r.seed,
            rep: r.rep,
            anticipation: r.condition(),
            completed: r.completed,
            duration: r.duration,
            ticks: r.ticks,
            min_safety_distance: r.min_safety_distance,
            avg_safety_distance: r.avg_safety_distance,
            path_length: r.path_length,
            placements: r.placements.len(),
            mean_translation_error: r.mean_translation_error,
            mean_angular_error_deg: r.mean_angular_error_deg,
            first_deviation: r.first_deviation,
            first_person_visible: r.first_person_visible,
            person_reads: r.person_reads,
            digest: &r.digest,
        })
        .map_err(|e| crate::Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Run reports, then summary and delta rows, one JSON object per line,
/// each tagged with `record`.
pub fn write_jsonl(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let tagged = |kind: &str, v: serde_json::Value| {
        let mut v = v;
        v.as_object_mut().expect("struct").insert("record".into(), kind.into());
        v
    };
    let enc = |e: serde_json::Error| crate::Error::Io(e.to_string());
    for r in reports {
        writeln!(f, "{}", tagged("run", serde_json::to_value(r).map_err(enc)?))?;
    }
    for s in batch_summary(reports) {
        writeln!(f, "{}", tagged("summary", serde_json::to_value(s).map_err(enc)?))?;
    }
    for d in paired_deltas(reports) {
        writeln!(f, "{}", tagged("delta", serde_json::to_value(d).map_err(enc)?))?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(seed: u64, anticipation: bool, duration: f64) -> RunReport {
        RunReport {
            scenario: "s".into(),
            seed,
            rep: 0,
            anticipation,
            completed: true,
            min_safety_distance: Some(duration / 10.0),
            avg_safety_distance: None,
            path_length: 1.0,
            duration,
            ticks: 1,
            placements: vec![],
            mean_translation_error: None,
            mean_angular_error_deg: None,
            first_deviation: None,
            first_person_visible: None,
            person_reads: 0,
            digest: String::new(),
        }
    }

    #[test]
    fn mean_std_oracle() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[4.0]), Some((4.0, 0.0)));
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_run_summary_equals_run() {
        let r = report(1, true, 12.5);
        let rows = batch_summary(std::slice::from_ref(&r));
        let d = rows.iter().find(|x| x.metric == "duration").unwrap();
        assert_eq!((d.n, d.mean, d.std), (1, 12.5, 0.0));
        assert!(rows.iter().all(|x| x.metric != "avg_safety_distance"));
    }

    #[test]
    fn identical_runs_have_zero_std() {
        let rs = vec![report(1, false, 3.0); 5];
        assert!(batch_summary(&rs).iter().all(|x| x.std == 0.0));
    }

    #[test]
    fn deltas_pair_by_seed() {
        let rs = vec![report(1, true, 10.0), report(1, false, 13.0), report(2, true, 20.0), report(2, false, 21.0), report(3, true, 5.0)];
        let d = paired_deltas(&rs);
        let dur = d.iter().find(|x| x.metric == "duration").unwrap();
        assert_eq!(dur.n, 2);
        assert_eq!(dur.mean_delta, -2.0);
    }

    #[test]
    fn writers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rs = vec![report(1, true, 10.0), report(1, false, 13.0)];
        write_csv(&dir.path().join("r.csv"), &rs).unwrap();
        write_jsonl(&dir.path().join("r.jsonl"), &rs).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join("r.csv")).unwrap();
        assert_eq!(rd.records().count(), 2);
        let text = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
        let runs: Vec<RunReport> = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .filter(|v| v["record"] == "run")
            .map(|mut v| {
                v.as_object_mut().unwrap().remove("record");
                serde_json::from_value(v).unwrap()
            })
            .collect();
        assert_eq!(runs, rs);
    }
}
