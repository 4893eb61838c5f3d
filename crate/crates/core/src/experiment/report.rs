use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};

use super::runner::{median, RunManifest, RunResults, SeedResult, TableRow, MANIFEST_FILE, RESULTS_FILE};

const PLOT_SIZE: (u32, u32) = (640, 420);

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// `| setting | T1 | T2 | All |` with medians in percent.
pub fn table_markdown(rows: &[TableRow]) -> String {
    let mut s = String::from("| setting | T1 | T2 | All |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {} | {} |", r.label, pct(r.median.t1), pct(r.median.t2), pct(r.median.all));
    }
    s
}

/// Medians followed by the per-seed `all` values separated by `;`.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("setting,t1,t2,all,all_per_seed\n");
    for r in rows {
        let seeds: Vec<String> = r.per_seed.iter().map(|m| m.all.to_string()).collect();
        let _ = writeln!(s, "{},{},{},{},{}", r.label, r.median.t1, r.median.t2, r.median.all, seeds.join(";"));
    }
    s
}

/// Median mAP (all, old, new) after each task, across seeds.
pub fn forgetting_curve(seeds: &[SeedResult]) -> Vec<(usize, f64, Option<f64>, Option<f64>)> {
    let tasks = seeds.iter().map(|s| s.tasks.len()).min().unwrap_or(0);
    (0..tasks)
        .map(|t| {
            let reports: Vec<_> = seeds.iter().map(|s| &s.tasks[t].report).collect();
            let opt = |f: &dyn Fn(&crate::evaluation::EvalReport) -> Option<f64>| {
                let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| median(v))
            };
            (t + 1, median(reports.iter().map(|r| r.map_all)), opt(&|r| r.map_old), opt(&|r| r.map_new))
        })
        .collect()
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::invalid(format!("plot rendering failed: {e}"))
}

/// Line plot of named series over shared x values, in percent.
pub fn line_plot(path: &Path, title: &str, x_label: &str, xs: &[f64], series: &[(&str, Vec<f64>)]) -> Result<()> {
    let root = SVGBackend::new(path, PLOT_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (x0, x1) = match (xs.first(), xs.last()) {
        (Some(a), Some(b)) if b > a => (*a, *b),
        (Some(a), _) => (*a - 0.5, *a + 0.5),
        _ => (0.0, 1.0),
    };
    let pad = 0.05 * (x1 - x0);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d((x0 - pad)..(x1 + pad), 0.0..100.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).y_desc("mAP (%)").draw().map_err(plot_err)?;
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(x, y)| (*x, 100.0 * y)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|p| Circle::new(*p, 3, color.filled()))).map_err(plot_err)?;
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Regenerates markdown tables, CSVs and plots from the persisted results
/// and manifest of a run directory. Returns the files written.
pub fn emit_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let read = |name: &str| -> Result<String> {
        fs::read_to_string(run_dir.join(name))
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", run_dir.join(name).display())))
    };
    let manifest: RunManifest = serde_json::from_str(&read(MANIFEST_FILE)?)?;
    let results: RunResults = serde_json::from_str(&read(RESULTS_FILE)?)?;
    let registry = manifest.config.registry();
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<PathBuf> {
        let p = run_dir.join(name);
        fs::write(&p, body)?;
        written.push(p.clone());
        Ok(p)
    };
    let header = format!("# {}\n\nconfig `{}`, seeds {:?}\n\n", manifest.name, manifest.config_hash, manifest.seeds);
    match &results {
        RunResults::Sequence { seeds } => {
            let curve = forgetting_curve(seeds);
            let opt = |v: Option<f64>| v.map_or("-".to_string(), pct);
            let mut md = header;
            md.push_str("| task | mAP | mAP-old | mAP-new |\n|---|---|---|---|\n");
            let mut csv = String::from("task,map_all,map_old,map_new\n");
            for (t, all, old, new) in &curve {
                let _ = writeln!(md, "| {t} | {} | {} | {} |", pct(*all), opt(*old), opt(*new));
                let f = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
                let _ = writeln!(csv, "{t},{all},{},{}", f(*old), f(*new));
            }
            for s in seeds {
                if let Some(last) = s.tasks.last() {
                    let _ = write!(
                        md,
                        "\n## seed {}, after task {}\n\n{}",
                        s.seed,
                        last.task_index,
                        last.report.to_markdown(&registry)
                    );
                }
            }
            put("summary.md", md)?;
            put("forgetting.csv", csv)?;
            let xs: Vec<f64> = curve.iter().map(|c| c.0 as f64).collect();
            let mut series = vec![("all", curve.iter().map(|c| c.1).collect::<Vec<_>>())];
            if curve.iter().all(|c| c.2.is_some()) && !curve.is_empty() {
                series.push(("old", curve.iter().map(|c| c.2.unwrap_or(0.0)).collect()));
            }
            let p = run_dir.join("forgetting.svg");
            line_plot(&p, "mAP after each task", "task", &xs, &series)?;
            written.push(p);
        }
        RunResults::Ablation { rows } => {
            put("ablation.md", header + &table_markdown(rows))?;
            put("ablation.csv", table_csv(rows))?;
        }
        RunResults::AlphaSweep { alphas, rows } => {
            put("alpha_sweep.md", header + &table_markdown(rows))?;
            put("alpha_sweep.csv", table_csv(rows))?;
            let series = [
                ("T1", rows.iter().map(|r| r.median.t1).collect()),
                ("T2", rows.iter().map(|r| r.median.t2).collect()),
                ("All", rows.iter().map(|r| r.median.all).collect()),
            ];
            let p = run_dir.join("alpha_sweep.svg");
            line_plot(&p, "mAP against distillation weight", "alpha", alphas, &series)?;
            written.push(p);
        }
        RunResults::GammaAlphaGrid { rows, .. } => {
            put("gamma_alpha.md", header + &table_markdown(rows))?;
            put("gamma_alpha.csv", table_csv(rows))?;
        }
    }
    Ok(written)
}
