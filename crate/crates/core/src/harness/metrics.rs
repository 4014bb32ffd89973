//! Append-only metrics CSV.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::HarnessError;

pub const HEADER: &str = "step,train_loss,eval_success_rate,eval_variant,wallclock_s";

pub struct MetricsWriter {
    path: PathBuf,
    start: Instant,
    wallclock: bool,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Starts a new file, or keeps only rows up to `resume_from` of an
    /// existing one.
    pub fn open(path: &Path, wallclock: bool, resume_from: Option<u64>) -> Result<Self, HarnessError> {
        let mut body = String::from(HEADER);
        body.push('\n');
        let mut last_step = None;
        if let Some(limit) = resume_from {
            if let Ok(old) = std::fs::read_to_string(path) {
                for line in old.lines().skip(1) {
                    let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                    if step <= limit {
                        body.push_str(line);
                        body.push('\n');
                        last_step = Some(step);
                    }
                }
            }
        }
        std::fs::write(path, body).map_err(HarnessError::io(path))?;
        Ok(Self { path: path.to_path_buf(), start: Instant::now(), wallclock, last_step })
    }

    pub fn row(&mut self, step: u64, loss: Option<f64>, eval: Option<(f64, &str)>) -> Result<(), HarnessError> {
        if self.last_step.is_some_and(|s| step < s) {
            return Err(HarnessError::Usage(format!("metrics step {step} after {:?}", self.last_step)));
        }
        self.last_step = Some(step);
        let wall = if self.wallclock { self.start.elapsed().as_secs_f64() } else { 0.0 };
        let loss = loss.map(|l| format!("{l:.9}")).unwrap_or_default();
        let (rate, variant) = eval.map(|(r, v)| (format!("{r:.4}"), v.to_string())).unwrap_or_default();
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.path).map_err(HarnessError::io(&self.path))?;
        writeln!(f, "{step},{loss},{rate},{variant},{wall:.3}").map_err(HarnessError::io(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::open(&p, false, None).unwrap();
        w.row(10, Some(0.5), None).unwrap();
        w.row(20, Some(0.25), Some((0.8, "in-dist"))).unwrap();
        assert!(w.row(5, None, None).is_err());
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, format!("{HEADER}\n10,0.500000000,,,0.000\n20,0.250000000,0.8000,in-dist,0.000\n"));
        MetricsWriter::open(&p, false, Some(10)).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    }
}
