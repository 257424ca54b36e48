//! CSV plot data derived from a metrics table.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::analysis::{seed_average, speedup_analysis, stationarity_analysis};
use crate::harness::experiment::{write_atomic, MetricsRecord};
use crate::harness::AnalysisKind;

/// Column headers of each plot kind.
pub fn columns(kind: AnalysisKind) -> &'static [&'static str] {
    match kind {
        AnalysisKind::Convergence => &["round", "J", "grad_norm_sq", "drift", "trajectories"],
        AnalysisKind::Speedup => &["N", "mean_gap", "std_gap", "seeds"],
        AnalysisKind::Stationarity => &["round", "grad_norm_sq", "cumulative_mean", "running_min"],
    }
}

/// `out.csv` for point `i` of several becomes `out.p{i}.csv`.
fn point_path(path: &Path, point: usize, many: bool) -> PathBuf {
    if !many {
        return path.to_path_buf();
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.p{point}.{}", ext.to_string_lossy()),
        None => format!("{stem}.p{point}"),
    };
    path.with_file_name(name)
}

fn table(kind: AnalysisKind, rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns(kind))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Parse(format!("CSV buffer: {e}")))
}

/// Writes the plot data of `kind` and returns the files written.
///
/// Convergence and stationarity curves are averaged over seeds, one file per
/// sweep point (suffixed `.p{i}` when there are several). Speedup is one file
/// with a row per point. Reals are written in shortest round-trip form.
pub fn emit_plot_data(record: &MetricsRecord, kind: &str, path: &Path) -> Result<Vec<PathBuf>> {
    let kind: AnalysisKind = kind.parse()?;
    if record.is_empty() {
        write_atomic(path, &table(kind, Vec::new())?)?;
        return Ok(vec![path.to_path_buf()]);
    }
    let points = record.points();
    let many = points.len() > 1;
    let mut written = Vec::new();
    match kind {
        AnalysisKind::Speedup => {
            let rows = speedup_analysis(record)?
                .into_iter()
                .map(|r| {
                    vec![
                        r.n_agents.to_string(),
                        r.mean_gap.to_string(),
                        r.std_gap.to_string(),
                        r.seeds.to_string(),
                    ]
                })
                .collect();
            write_atomic(path, &table(kind, rows)?)?;
            written.push(path.to_path_buf());
        }
        AnalysisKind::Convergence => {
            for (point, runs) in &points {
                let rows = seed_average(runs)
                    .into_iter()
                    .map(|a| {
                        vec![
                            a.round.to_string(),
                            a.objective.to_string(),
                            a.grad_norm_sq.to_string(),
                            a.drift.to_string(),
                            a.trajectories.to_string(),
                        ]
                    })
                    .collect();
                let p = point_path(path, *point, many);
                write_atomic(&p, &table(kind, rows)?)?;
                written.push(p);
            }
        }
        AnalysisKind::Stationarity => {
            for (point, runs) in &points {
                let avg = seed_average(runs);
                let g: Vec<f64> = avg.iter().map(|a| a.grad_norm_sq).collect();
                let curve = stationarity_analysis(&g);
                let rows = avg
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        vec![
                            a.round.to_string(),
                            curve.grad_norm_sq[i].to_string(),
                            curve.cumulative_mean[i].to_string(),
                            curve.running_min[i].to_string(),
                        ]
                    })
                    .collect();
                let p = point_path(path, *point, many);
                write_atomic(&p, &table(kind, rows)?)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_metrics_give_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        for kind in ["convergence", "speedup", "stationarity"] {
            let path = dir.path().join(format!("{kind}.csv"));
            let files = emit_plot_data(&MetricsRecord::default(), kind, &path).unwrap();
            assert_eq!(files, vec![path.clone()]);
            let text = std::fs::read_to_string(&path).unwrap();
            assert_eq!(text.lines().count(), 1);
        }
        let text = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
        assert_eq!(text.trim_end(), "round,J,grad_norm_sq,drift,trajectories");
        let text = std::fs::read_to_string(dir.path().join("speedup.csv")).unwrap();
        assert_eq!(text.trim_end(), "N,mean_gap,std_gap,seeds");
    }

    #[test]
    fn unknown_kind_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plot_data(
            &MetricsRecord::default(),
            "histogram",
            &dir.path().join("x.csv"),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn point_suffix() {
        let p = Path::new("/tmp/out.csv");
        assert_eq!(point_path(p, 3, true), Path::new("/tmp/out.p3.csv"));
        assert_eq!(point_path(p, 3, false), p);
    }
}
