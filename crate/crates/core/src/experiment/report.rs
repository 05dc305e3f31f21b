use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Budget label for results evaluated before any adaptation.
pub const UNADAPTED: &str = "none";

pub const CSV_HEADER: [&str; 8] = [
    "scenario",
    "tag",
    "subject",
    "fold",
    "budget",
    "window",
    "per_frame_acc",
    "voted_acc",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub tag: String,
    pub subject: u16,
    pub fold: usize,
    pub budget: String,
    pub window: usize,
    pub per_frame_acc: f64,
    pub voted_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub scenario: String,
    pub tag: String,
    pub budget: String,
    pub window: usize,
    pub per_frame: MeanStd,
    pub voted: Option<MeanStd>,
}

/// Difference in accuracy points (×100) of `budget` over `baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub scenario: String,
    pub tag: String,
    pub window: usize,
    pub baseline: String,
    pub budget: String,
    pub per_frame_points: f64,
    pub voted_points: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub subject: u16,
    pub fold: usize,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub groups: Vec<GroupSummary>,
    pub improvements: Vec<Improvement>,
    pub failures: Vec<FoldFailure>,
    pub complete: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<FoldFailure>,
}

type GroupKey = (String, String, String, usize);

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.failures.extend(other.failures);
    }

    fn groups(&self) -> BTreeMap<GroupKey, Vec<&ResultRow>> {
        let mut g: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
        for r in &self.rows {
            g.entry((r.scenario.clone(), r.tag.clone(), r.budget.clone(), r.window))
                .or_default()
                .push(r);
        }
        g
    }

    pub fn summary(&self) -> Summary {
        let groups: Vec<GroupSummary> = self
            .groups()
            .into_iter()
            .map(|((scenario, tag, budget, window), rows)| {
                let pf: Vec<f64> = rows.iter().map(|r| r.per_frame_acc).collect();
                let voted: Vec<f64> = rows.iter().filter_map(|r| r.voted_acc).collect();
                GroupSummary {
                    scenario,
                    tag,
                    budget,
                    window,
                    per_frame: MeanStd::of(&pf).expect("groups are non-empty"),
                    voted: MeanStd::of(&voted),
                }
            })
            .collect();
        let mut improvements = Vec::new();
        for base in groups.iter().filter(|g| g.budget == UNADAPTED) {
            for g in &groups {
                if g.budget != UNADAPTED && g.scenario == base.scenario && g.tag == base.tag && g.window == base.window {
                    improvements.push(improvement(base, g));
                }
            }
        }
        Summary {
            groups,
            improvements,
            failures: self.failures.clone(),
            complete: self.failures.is_empty(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER)?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if headers != CSV_HEADER {
            return Err(Error::Config(format!(
                "result file columns {headers:?} do not match {CSV_HEADER:?}"
            )));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(EvalReport {
            rows,
            failures: Vec::new(),
        })
    }

    /// Writes `results.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.to_csv()?)?;
        let json = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(dir.join("summary.json"), json + "\n")?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Mean accuracy against window size, per (scenario, tag, budget).
    pub fn window_curve_csv(&self) -> String {
        let mut out = String::from("scenario,tag,budget,window,per_frame_mean,voted_mean,voted_std\n");
        for g in self.summary().groups {
            let (vm, vs) = g
                .voted
                .map(|v| (format!("{:.6}", v.mean), format!("{:.6}", v.std)))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{:.6},{vm},{vs}\n",
                g.scenario, g.tag, g.budget, g.window, g.per_frame.mean
            ));
        }
        out
    }
}

pub fn improvement(baseline: &GroupSummary, other: &GroupSummary) -> Improvement {
    Improvement {
        scenario: other.scenario.clone(),
        tag: other.tag.clone(),
        window: other.window,
        baseline: baseline.budget.clone(),
        budget: other.budget.clone(),
        per_frame_points: 100.0 * (other.per_frame.mean - baseline.per_frame.mean),
        voted_points: match (&baseline.voted, &other.voted) {
            (Some(a), Some(b)) => Some(100.0 * (b.mean - a.mean)),
            _ => None,
        },
    }
}

/// Pairwise deltas of `other` over `baseline`, matched on scenario, budget and
/// window. Tags may differ, so two datasets can be compared.
pub fn compare(baseline: &EvalReport, other: &EvalReport) -> Vec<Improvement> {
    let a = baseline.summary().groups;
    let b = other.summary().groups;
    let mut out = Vec::new();
    for x in &a {
        for y in &b {
            if x.scenario == y.scenario && x.budget == y.budget && x.window == y.window {
                let mut d = improvement(x, y);
                d.baseline = format!("{}:{}", x.tag, x.budget);
                out.push(d);
            }
        }
    }
    out
}

pub fn improvements_csv(rows: &[Improvement]) -> String {
    let mut out = String::from("scenario,tag,window,baseline,budget,per_frame_points,voted_points\n");
    for d in rows {
        let v = d.voted_points.map(|v| format!("{v:.4}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{v}\n",
            d.scenario, d.tag, d.window, d.baseline, d.budget, d.per_frame_points
        ));
    }
    out
}
