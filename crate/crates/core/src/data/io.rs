use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Task, TaskDataset};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Written next to the task files; records how they were generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub dt: f64,
    pub n_steps: usize,
    pub tasks: Vec<Task>,
    pub config: serde_json::Value,
}

/// Fixed-width scientific notation with 17 significant digits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(ds: &TaskDataset) -> String {
    let mut cols = vec!["task_id".to_string(), "lambda".into(), "t".into()];
    cols.extend((1..=ds.x.ncols()).map(|i| format!("x{i}")));
    cols.extend((1..=ds.z.ncols()).map(|i| format!("z{i}")));
    cols.extend((1..=ds.y.ncols()).map(|i| format!("y{i}")));
    cols.join(",")
}

/// One row per time sample: `task_id,lambda,t,x1..,z1..,y1..`.
pub fn write_task_csv(path: &Path, ds: &TaskDataset) -> Result<()> {
    let mut out = header(ds);
    out.push('\n');
    for k in 0..ds.len() {
        write!(out, "{},{},{}", ds.task.task_id, fmt_f64(ds.task.lambda), fmt_f64(ds.times[k]))
            .expect("string write");
        for v in ds.x.row(k).iter().chain(ds.z.row(k)).chain(ds.y.row(k)) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_task_csv(path: &Path) -> Result<TaskDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .split(',')
        .collect();
    let count = |prefix: char| {
        head.iter()
            .filter(|c| c.starts_with(prefix) && c[1..].parse::<usize>().is_ok())
            .count()
    };
    let (dx, dz, dy) = (count('x'), count('z'), count('y'));
    if head.len() != 3 + dx + dz + dy || head[..3] != ["task_id", "lambda", "t"] {
        return Err(Error::Format(format!("unexpected header in {}", path.display())));
    }

    let mut task_id = 0;
    let mut lambda = 0.0;
    let mut times = Vec::new();
    let mut flat = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != head.len() {
            return Err(Error::Format(format!("{}: row {} has {} fields", path.display(), n + 1, fields.len())));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("{}: row {}: {e}", path.display(), n + 1)))
        };
        task_id = fields[0]
            .parse()
            .map_err(|e| Error::Format(format!("{}: bad task id: {e}", path.display())))?;
        lambda = parse(fields[1])?;
        times.push(parse(fields[2])?);
        for f in &fields[3..] {
            flat.push(parse(f)?);
        }
    }
    let rows = times.len();
    if rows == 0 {
        return Err(Error::Format(format!("{} has no samples", path.display())));
    }
    let all = Array2::from_shape_vec((rows, dx + dz + dy), flat)
        .map_err(|e| Error::Format(e.to_string()))?;
    let x = all.slice(ndarray::s![.., ..dx]).to_owned();
    let z = all.slice(ndarray::s![.., dx..dx + dz]).to_owned();
    let y = all.slice(ndarray::s![.., dx + dz..]).to_owned();
    Ok(TaskDataset {
        task: Task {
            task_id,
            lambda,
            x0: x.row(0).to_vec(),
        },
        times,
        x,
        z,
        y,
    })
}

/// Writes `task_<id>.csv` for every dataset plus `manifest.json`.
pub fn write_dataset_dir(dir: &Path, datasets: &[TaskDataset], manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    for ds in datasets {
        write_task_csv(&dir.join(format!("task_{}.csv", ds.task.task_id)), ds)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

/// Reads `manifest.json` and the task files it lists, in manifest order.
pub fn read_dataset_dir(dir: &Path) -> Result<(DatasetManifest, Vec<TaskDataset>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::InsufficientData(format!("cannot read {}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version > MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: format version {} is newer than supported ({MANIFEST_VERSION})",
            path.display(),
            manifest.format_version
        )));
    }
    let mut datasets = Vec::with_capacity(manifest.tasks.len());
    for task in &manifest.tasks {
        let file = dir.join(format!("task_{}.csv", task.task_id));
        if !file.exists() {
            return Err(Error::InsufficientData(format!("missing task file {}", file.display())));
        }
        let mut ds = read_task_csv(&file)?;
        ds.task = task.clone();
        datasets.push(ds);
    }
    if datasets.is_empty() {
        return Err(Error::InsufficientData(format!("{} lists no tasks", path.display())));
    }
    Ok((manifest, datasets))
}
