use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use super::config::RunPaths;
use super::RunnerError;

/// A metrics CSV keyed by step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: BTreeMap<u64, Vec<String>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric values of `name`, skipping empty cells, in step order.
    pub fn series(&self, name: &str) -> Vec<(u64, f64)> {
        let Some(c) = self.column(name) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter_map(|(&s, row)| row[c].parse::<f64>().ok().map(|v| (s, v)))
            .collect()
    }

    /// Steps whose row carries an evaluation.
    pub fn eval_steps(&self) -> Vec<u64> {
        self.series("pass@1").into_iter().map(|(s, _)| s).collect()
    }
}

pub fn load_metrics(dir: &Path) -> Result<MetricsTable, RunnerError> {
    if !dir.is_dir() {
        return Err(RunnerError::MissingRun(dir.to_path_buf()));
    }
    let path = RunPaths::new(dir).metrics();
    if !path.is_file() {
        return Err(RunnerError::MissingRun(path));
    }
    let bad = |reason: String| RunnerError::BadMetrics {
        path: path.clone(),
        reason,
    };
    let mut reader = csv::Reader::from_path(&path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("step") {
        return Err(bad("first column must be `step`".into()));
    }
    let mut rows = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let step: u64 = rec[0]
            .parse()
            .map_err(|_| bad(format!("bad step `{}`", &rec[0])))?;
        if rows.insert(step, rec.iter().map(str::to_string).collect()).is_some() {
            return Err(bad(format!("duplicate step {step}")));
        }
    }
    Ok(MetricsTable { header, rows })
}

fn cadence(steps: &[u64]) -> Option<u64> {
    match steps {
        [a, b, ..] => Some(b - a),
        _ => None,
    }
}

fn run_names(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    dirs.iter()
        .map(|d| {
            let base = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string());
            let count = seen.entry(base.clone()).or_insert(0);
            *count += 1;
            if *count == 1 {
                base
            } else {
                format!("{base}#{count}")
            }
        })
        .collect()
}

/// Outer join of several runs' metrics on `step`. Every non-step column
/// appears once per run as `column:run`. Runs must evaluate on the same
/// cadence.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<String, RunnerError> {
    if dirs.len() < 2 {
        return Err(RunnerError::TooFewRuns(dirs.len()));
    }
    let tables = dirs
        .iter()
        .map(|d| load_metrics(d))
        .collect::<Result<Vec<_>, _>>()?;
    let names = run_names(dirs);
    let cadences: Vec<Option<u64>> = tables.iter().map(|t| cadence(&t.eval_steps())).collect();
    let known: Vec<(usize, u64)> = cadences
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| (i, c)))
        .collect();
    if let Some(&(i0, c0)) = known.first() {
        if let Some(&(i, c)) = known.iter().find(|(_, c)| *c != c0) {
            return Err(RunnerError::IncompatibleCadence(format!(
                "{} evaluates every {c0} steps, {} every {c}",
                names[i0], names[i]
            )));
        }
    }

    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string()];
    for (t, name) in tables.iter().zip(&names) {
        header.extend(t.header[1..].iter().map(|h| format!("{h}:{name}")));
    }
    out.write_record(&header)?;
    let steps: std::collections::BTreeSet<u64> = tables.iter().flat_map(|t| t.rows.keys().copied()).collect();
    for step in steps {
        let mut row = vec![step.to_string()];
        for t in &tables {
            match t.rows.get(&step) {
                Some(r) => row.extend(r[1..].iter().cloned()),
                None => row.extend(std::iter::repeat_n(String::new(), t.header.len() - 1)),
            }
        }
        out.write_record(&row)?;
    }
    let bytes = out.into_inner().map_err(|e| RunnerError::Pool(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
