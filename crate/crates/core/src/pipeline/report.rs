//! Tables and line charts regenerated from persisted runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::persist::{read_metrics_csv, RunDir};
use super::EvalReport;
use crate::error::{Result, SpoError};

/// One named polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A plain SVG line chart with axes, min/max tick labels and a legend.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let finite = series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(out, r#"<text x="{left}" y="{}" text-anchor="start">{x0:.4}</text>"#, top + ph + 16.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{x1:.4}</text>"#, left + pw, top + ph + 16.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y1:.4}</text>"#, left - 4.0, top + 4.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4}</text>"#, left - 4.0, top + ph);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

/// Reads a CSV with a header row; returns the header and the rows.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()).map_err(SpoError::from))
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn parse(s: &str) -> Result<f64> {
    s.parse().map_err(|_| SpoError::Format(format!("`{s}` is not a number")))
}

/// Regenerates `report/` inside a run directory from its manifest,
/// metrics, reward curves and evaluation report. Nothing is retrained.
pub fn generate_run_report(run: &RunDir) -> Result<Vec<PathBuf>> {
    let manifest = run.read_manifest()?;
    let out_dir = run.root.join("report");
    fs::create_dir_all(&out_dir)?;
    let mut written = Vec::new();

    let mut summary = csv::Writer::from_path(out_dir.join("rounds.csv"))?;
    summary.write_record(["round", "dimension", "steps", "first_loss", "final_loss", "final_mean_pair_logit"])?;
    let mut loss_series = Vec::new();
    for (i, rel) in manifest.metrics.iter().enumerate() {
        let metrics = read_metrics_csv(&run.path(rel))?;
        let dim = manifest.dimensions.get(i).cloned().unwrap_or_default();
        let first = metrics.first().map(|m| m.loss).unwrap_or(f64::NAN);
        let last = metrics.last();
        summary.write_record([
            (i + 1).to_string(),
            dim.clone(),
            metrics.len().to_string(),
            first.to_string(),
            last.map(|m| m.loss).unwrap_or(f64::NAN).to_string(),
            last.map(|m| m.mean_pair_logit).unwrap_or(f64::NAN).to_string(),
        ])?;
        loss_series.push(Series {
            name: format!("round {} ({dim})", i + 1),
            points: metrics.iter().map(|m| (m.step as f64, m.loss)).collect(),
        });
    }
    summary.flush()?;
    written.push(out_dir.join("rounds.csv"));
    let chart = svg_line_chart(&format!("{} loss", manifest.method), "step", "loss", &loss_series);
    fs::write(out_dir.join("loss.svg"), chart)?;
    written.push(out_dir.join("loss.svg"));

    if let Some(rel) = &manifest.reward_curves {
        let (header, rows) = read_table(&run.path(rel))?;
        let mut series: Vec<Series> = header[2..]
            .iter()
            .map(|name| Series {
                name: name.clone(),
                points: Vec::new(),
            })
            .collect();
        // Steps restart every round; lay rounds end to end on the x axis.
        let (mut offset, mut last_round, mut last_step) = (0.0, 0usize, 0.0);
        for row in &rows {
            let round: usize = parse(&row[0])? as usize;
            let step = parse(&row[1])?;
            if round != last_round {
                offset += last_step;
                last_round = round;
            }
            last_step = step;
            for (s, v) in series.iter_mut().zip(&row[2..]) {
                s.points.push((offset + step, parse(v)?));
            }
        }
        fs::write(
            out_dir.join("rewards.svg"),
            svg_line_chart("latent reward during training", "step", "expected reward", &series),
        )?;
        written.push(out_dir.join("rewards.svg"));
    }

    if let Some(rel) = &manifest.eval {
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(run.path(rel))?)?;
        let mut w = csv::Writer::from_path(out_dir.join("eval.csv"))?;
        w.write_record(["metric", "value"])?;
        for (t, r) in report.special_tokens.iter().zip(&report.token_presence) {
            w.write_record([format!("presence_token_{t}"), r.to_string()])?;
        }
        w.write_record(["pareto_fraction".to_string(), report.pareto_fraction.to_string()])?;
        w.write_record(["refusal_rate".to_string(), report.refusal_rate.to_string()])?;
        for (d, v) in &report.expected_rewards {
            w.write_record([format!("reward_{d}"), v.to_string()])?;
        }
        for (d, v) in &report.win_rates {
            w.write_record([format!("win_rate_vs_{d}"), v.to_string()])?;
        }
        w.flush()?;
        written.push(out_dir.join("eval.csv"));
    }
    Ok(written)
}

/// Averages a sweep CSV (`alpha,seed,<dim>...`) over seeds and draws one
/// line per dimension against α.
pub fn generate_sweep_report(sweep_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (header, rows) = read_table(sweep_csv)?;
    if header.len() < 3 || header[0] != "alpha" || header[1] != "seed" {
        return Err(SpoError::Format(format!("{} is not a sweep table", sweep_csv.display())));
    }
    fs::create_dir_all(out_dir)?;
    let mut alphas: Vec<f64> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for row in &rows {
        let a = parse(&row[0])?;
        let idx = match alphas.iter().position(|&x| x == a) {
            Some(i) => i,
            None => {
                alphas.push(a);
                sums.push(vec![0.0; header.len() - 2]);
                counts.push(0);
                alphas.len() - 1
            }
        };
        for (s, v) in sums[idx].iter_mut().zip(&row[2..]) {
            *s += parse(v)?;
        }
        counts[idx] += 1;
    }
    let mut w = csv::Writer::from_path(out_dir.join("sweep_mean.csv"))?;
    let mut head = vec!["alpha".to_string(), "seeds".to_string()];
    head.extend(header[2..].iter().cloned());
    w.write_record(&head)?;
    for (i, a) in alphas.iter().enumerate() {
        let mut rec = vec![a.to_string(), counts[i].to_string()];
        rec.extend(sums[i].iter().map(|s| (s / counts[i] as f64).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let series: Vec<Series> = header[2..]
        .iter()
        .enumerate()
        .map(|(d, name)| Series {
            name: name.clone(),
            points: alphas
                .iter()
                .enumerate()
                .map(|(i, &a)| (a, sums[i][d] / counts[i] as f64))
                .collect(),
        })
        .collect();
    fs::write(
        out_dir.join("sweep.svg"),
        svg_line_chart("final reward against alpha", "alpha", "expected reward", &series),
    )?;
    Ok(vec![out_dir.join("sweep_mean.csv"), out_dir.join("sweep.svg")])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_every_series() {
        let svg = svg_line_chart(
            "t <x>",
            "step",
            "loss",
            &[
                Series {
                    name: "a".into(),
                    points: vec![(0.0, 1.0), (1.0, 0.5)],
                },
                Series {
                    name: "b".into(),
                    points: vec![(0.0, 2.0)],
                },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t &lt;x&gt;"));
        assert!(svg_line_chart("empty", "x", "y", &[]).ends_with("</svg>\n"));
    }

    #[test]
    fn sweep_report_averages_over_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("sweep.csv");
        fs::write(&csv_path, "alpha,seed,helpful,harmless\n0,0,1,3\n0,1,3,5\n0.5,0,4,1\n").unwrap();
        generate_sweep_report(&csv_path, &dir.path().join("out")).unwrap();
        let text = fs::read_to_string(dir.path().join("out/sweep_mean.csv")).unwrap();
        assert_eq!(text, "alpha,seeds,helpful,harmless\n0,2,2,4\n0.5,1,4,1\n");
    }
}
