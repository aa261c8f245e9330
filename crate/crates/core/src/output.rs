//! Result files.
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! reader never sees a partial file. Floats are written as `{:.16e}`
//! (17 significant digits), which round-trips every `f64`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::bench::Table1;
use crate::error::Result;
use crate::smc::{Population, RunOutput, StepRecord};

pub const TRACE_FILE: &str = "trace.csv";
pub const PARTICLES_FILE: &str = "particles_final.csv";
pub const REPORT_FILE: &str = "report.json";
pub const FIT_TRACE_FILE: &str = "fit_trace.csv";
pub const TABLE1_CSV: &str = "table1.csv";
pub const TABLE1_JSON: &str = "table1.json";

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

pub fn trace_csv(steps: &[StepRecord]) -> String {
    let mut s = String::from("step,lambda,ess,log_z_increment,mean_work,divergences,resampled\n");
    for r in steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            fmt_f64(r.lambda),
            fmt_f64(r.ess),
            fmt_f64(r.log_z_increment),
            fmt_f64(r.mean_work),
            r.divergences,
            u8::from(r.resampled)
        );
    }
    s
}

/// `q,p,weight` in 1-D; `q_0..q_{d-1},p_0..p_{d-1},weight` otherwise.
pub fn particles_csv(pop: &Population) -> String {
    let d = pop.states.first().map_or(1, |s| s.q.len());
    let mut s = String::new();
    if d == 1 {
        s.push_str("q,p,weight\n");
    } else {
        let cols: Vec<String> =
            (0..d).map(|i| format!("q_{i}")).chain((0..d).map(|i| format!("p_{i}"))).collect();
        let _ = writeln!(s, "{},weight", cols.join(","));
    }
    for (st, w) in pop.states.iter().zip(pop.weights()) {
        for x in st.q.iter().chain(&st.p) {
            s.push_str(&fmt_f64(*x));
            s.push(',');
        }
        s.push_str(&fmt_f64(w));
        s.push('\n');
    }
    s
}

pub fn fit_trace_csv(out: &RunOutput) -> String {
    let mut s = String::from("step,iteration,loss\n");
    for r in &out.fit_trace {
        let _ = writeln!(s, "{},{},{}", r.step, r.iteration, fmt_f64(r.loss));
    }
    s
}

pub fn table1_csv(table: &Table1) -> String {
    let mut s =
        String::from("system,method,seed,estimate_unweighted,estimate_weighted,truth,b2,ess_final,divergences\n");
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.system,
            r.method,
            r.seed,
            fmt_f64(r.estimate_unweighted),
            fmt_f64(r.estimate_weighted),
            fmt_f64(r.truth),
            fmt_f64(r.b2),
            fmt_f64(r.ess_final),
            r.divergences
        );
    }
    s
}

/// Writes `trace.csv`, `particles_final.csv`, `report.json` and, when the fit
/// recorded losses, `fit_trace.csv`. Returns the paths written.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>> {
    let report = serde_json::to_string_pretty(&out.report)? + "\n";
    let mut files = vec![
        (dir.join(TRACE_FILE), trace_csv(&out.report.steps)),
        (dir.join(PARTICLES_FILE), particles_csv(&out.population)),
        (dir.join(REPORT_FILE), report),
    ];
    if !out.fit_trace.is_empty() {
        files.push((dir.join(FIT_TRACE_FILE), fit_trace_csv(out)));
    }
    for (path, text) in &files {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

pub fn write_table1(dir: &Path, table: &Table1) -> Result<Vec<PathBuf>> {
    let json = serde_json::to_string_pretty(table)? + "\n";
    let csv_path = dir.join(TABLE1_CSV);
    let json_path = dir.join(TABLE1_JSON);
    write_atomic(&csv_path, table1_csv(table).as_bytes())?;
    write_atomic(&json_path, json.as_bytes())?;
    Ok(vec![csv_path, json_path])
}
