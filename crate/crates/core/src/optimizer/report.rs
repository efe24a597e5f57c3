//! CSV and plain-text output of a [`SolveReport`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::SolveReport;
use crate::linear::Layout;

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `index,block,node,component,value` with blocks `alpha`, `k0`, `d`.
pub fn write_solution_csv<W: Write>(report: &SolveReport, layout: Option<&Layout>, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "block", "node", "component", "value"])?;
    for (i, v) in report.x.iter().enumerate() {
        let (block, node, comp) = match layout {
            Some(l) if i < l.n_alpha() => ("alpha", Some(i / l.n), i % l.n),
            Some(l) if i < l.n_alpha() + l.aleph => ("k0", None, i - l.n_alpha()),
            Some(l) => {
                let k = i - l.n_alpha() - l.aleph;
                ("d", Some(k / l.aleph + 1), k % l.aleph)
            }
            None => ("x", None, i),
        };
        w.write_record([i.to_string(), block.to_string(), opt(node), comp.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `constraint,t,j,node,multiplier,slack`; bound multipliers appear as `bound` rows.
pub fn write_multipliers_csv<W: Write>(report: &SolveReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["constraint", "t", "j", "node", "multiplier", "slack"])?;
    for m in &report.multipliers {
        w.write_record([
            m.label.name.clone(),
            opt(m.label.t),
            opt(m.label.j),
            opt(m.label.node),
            m.value.to_string(),
            m.slack.to_string(),
        ])?;
    }
    for (i, v) in &report.bound_multipliers {
        w.write_record(["bound".to_string(), String::new(), String::new(), i.to_string(), v.to_string(), "0".to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `direction,coordinate,value`, nonzero entries only.
pub fn write_degeneracy_csv<W: Write>(report: &SolveReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["direction", "coordinate", "value"])?;
    for (d, v) in report.degeneracy_basis.iter().enumerate() {
        for (k, x) in v.iter().enumerate().filter(|(_, x)| **x != 0.0) {
            w.write_record([d.to_string(), k.to_string(), x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn summary(report: &SolveReport) -> String {
    let mut s = String::new();
    let mut line = |k: &str, v: String| s.push_str(&format!("{k:<22}{v}\n"));
    line("problem", report.problem.to_string());
    line("status", report.status.to_string());
    line("heuristic", report.heuristic.to_string());
    line("objective", format!("{:.12e}", report.objective));
    line("kkt_residual", format!("{:.3e}", report.kkt_residual));
    line("min_slack", format!("{:.3e}", report.min_slack));
    line("iterations", report.iterations.to_string());
    if let Some(s) = report.starts_spread {
        line("starts_spread", format!("{s:.3e}"));
    }
    if report.patterns_tried > 0 {
        line("patterns_tried", report.patterns_tried.to_string());
    }
    if report.problem == "relaxed" {
        line("degeneracy_dim", report.degeneracy_basis.len().to_string());
    }
    if let Some(d) = report.degeneracy_deviation {
        line("degeneracy_deviation", format!("{d:.3e}"));
    }
    if let Some(f) = &report.feasibility {
        line("feasible", f.feasible().to_string());
        if let Some(w) = f.worst() {
            line("tightest", format!("{} t={} j={} slack={:.3e}", w.constraint, opt(w.t), opt(w.j), w.slack));
        }
    }
    for n in &report.notes {
        line("note", n.clone());
    }
    s
}

/// Writes `solution.csv`, `multipliers.csv`, `feasibility.csv` (when
/// evaluated), `degeneracy_basis.csv` (relaxed model) and `summary.txt`.
pub fn write_report(report: &SolveReport, layout: Option<&Layout>, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = vec![];
    let mut open = |name: &str| -> std::io::Result<BufWriter<File>> {
        let p = dir.join(name);
        written.push(p.clone());
        Ok(BufWriter::new(File::create(p)?))
    };
    write_solution_csv(report, layout, open("solution.csv")?).map_err(std::io::Error::other)?;
    write_multipliers_csv(report, open("multipliers.csv")?).map_err(std::io::Error::other)?;
    if let Some(f) = &report.feasibility {
        f.write_csv(open("feasibility.csv")?).map_err(std::io::Error::other)?;
    }
    if report.problem == "relaxed" {
        write_degeneracy_csv(report, open("degeneracy_basis.csv")?).map_err(std::io::Error::other)?;
    }
    open("summary.txt")?.write_all(summary(report).as_bytes())?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::Status;

    #[test]
    fn summary_and_files() {
        let mut r = SolveReport::new("relaxed", Status::Optimal);
        r.x = vec![1.0, 2.0];
        r.degeneracy_basis = vec![vec![1.0, -1.0]];
        r.degeneracy_deviation = Some(0.0);
        let s = summary(&r);
        assert!(s.contains("status                optimal"));
        assert!(s.contains("degeneracy_dim        1"));
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&r, None, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let basis = std::fs::read_to_string(dir.path().join("degeneracy_basis.csv")).unwrap();
        assert_eq!(basis, "direction,coordinate,value\n0,0,1\n0,1,-1\n");
    }
}
