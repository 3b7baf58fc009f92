//! Result files: JSON-lines records, one JSON summary, CSV chains.

use std::path::Path;

use serde::Serialize;

use crate::{CliError, Run};

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

/// Writes `name` under the output directory, if one was given.
pub fn write_file(run: &Run, name: &str, contents: &str) -> Result<(), CliError> {
    let Some(dir) = &run.out else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| io_error(&path, e))
}

pub fn json_lines<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("serializable record"));
        s.push('\n');
    }
    s
}

/// Writes `records.jsonl` and `summary.json`, and prints the summary.
pub fn finish<R: Serialize, S: Serialize>(run: &Run, records: &[R], summary: &S) -> Result<(), CliError> {
    write_file(run, "records.jsonl", &json_lines(records))?;
    let text = serde_json::to_string_pretty(summary).expect("serializable summary") + "\n";
    write_file(run, "summary.json", &text)?;
    print!("{text}");
    Ok(())
}

/// Sample mean and standard deviation (divisor `n − 1`, zero for one value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
