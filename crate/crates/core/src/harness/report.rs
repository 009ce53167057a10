//! `results.csv`, `summary.md` and step-curve SVGs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::experiment::{ResultRow, RunResult};

pub const RESULTS_HEADER: &str = "dataset,shift,method,seed,step,acc,ece,nll";
pub const METRICS: [&str; 3] = ["acc", "ece", "nll"];

fn metric(r: &ResultRow, m: &str) -> f64 {
    match m {
        "acc" => r.acc,
        "ece" => r.ece,
        "nll" => r.nll,
        _ => unreachable!("unknown metric {m}"),
    }
}

/// Rows in canonical order; floats use the shortest round-trip form.
pub fn render_results_csv(res: &RunResult) -> String {
    let mut sorted = res.clone();
    sorted.sort();
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in &sorted.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.dataset, r.shift, r.method, r.seed, r.step, r.acc, r.ece, r.nll
        );
    }
    out
}

pub fn parse_results_csv(text: &str, path: &Path) -> Result<RunResult> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(err(1, format!("expected header '{RESULTS_HEADER}'"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(i + 1, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(i + 1, format!("bad number '{s}'")));
        rows.push(ResultRow {
            dataset: f[0].into(),
            shift: f[1].into(),
            method: f[2].into(),
            seed: f[3].parse().map_err(|_| err(i + 1, "bad seed".into()))?,
            step: f[4].parse().map_err(|_| err(i + 1, "bad step".into()))?,
            acc: num(f[5])?,
            ece: num(f[6])?,
            nll: num(f[7])?,
        });
    }
    Ok(RunResult { rows })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

type GroupKey = (String, String);

fn groups(res: &RunResult) -> BTreeMap<GroupKey, Vec<&ResultRow>> {
    let mut g: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in &res.rows {
        g.entry((r.dataset.clone(), r.shift.clone())).or_default().push(r);
    }
    g
}

/// One table per (dataset, shift) at `step` (default: the last step of
/// each group), one row per method, `mean ± std` over seeds.
pub fn render_summary(res: &RunResult, step: Option<usize>) -> String {
    let mut out = String::from("# Results\n\n");
    if res.rows.is_empty() {
        out.push_str("No results.\n");
        return out;
    }
    out.push_str("Mean ± sample standard deviation over seeds. NLL is per example, with probabilities floored at 1e-12.\n");
    for ((dataset, shift), rows) in groups(res) {
        let at = step.unwrap_or_else(|| rows.iter().map(|r| r.step).max().unwrap_or(0));
        let mut by_method: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.step == at) {
            by_method.entry(&r.method).or_default().push(r);
        }
        let _ = write!(
            out,
            "\n## {dataset} / {shift} (step {at})\n\n| method | seeds | ACC | ECE | NLL |\n|---|---|---|---|---|\n"
        );
        for (method, rs) in by_method {
            let _ = write!(out, "| {method} | {} |", rs.len());
            for m in METRICS {
                let v: Vec<f64> = rs.iter().map(|r| metric(r, m)).collect();
                let (mean, sd) = mean_std(&v);
                let _ = write!(out, " {mean:.10} ± {sd:.10} |");
            }
            out.push('\n');
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart of the seed-mean of `metric` against step, one line per method.
pub fn render_curve_svg(rows: &[&ResultRow], metric_name: &str, title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let mut series: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        series
            .entry(&r.method)
            .or_default()
            .entry(r.step)
            .or_default()
            .push(metric(r, metric_name));
    }
    let points: BTreeMap<&str, Vec<(f64, f64)>> = series
        .iter()
        .map(|(m, s)| {
            (
                *m,
                s.iter().map(|(st, v)| (*st as f64, mean_std(v).0)).collect(),
            )
        })
        .collect();
    let all = points.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    );
    // axes and tick labels
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{:.0}</text>",
            sx(fx),
            h - pad + 18.0,
            fx
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>",
            pad - 6.0,
            sy(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">step</text>",
        w / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>",
        h / 2.0,
        h / 2.0,
        metric_name.to_uppercase()
    );
    for (i, (method, pts)) in points.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            coords.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                sx(x),
                sy(y)
            );
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>",
            w - pad + 4.0,
            xml_escape(method)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn file_token(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Writes `results.csv`, `summary.md` and one SVG per (dataset, shift,
/// metric). Returns the written paths.
pub fn emit_report(res: &RunResult, out_dir: &Path, step: Option<usize>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let csv = out_dir.join("results.csv");
    fs::write(&csv, render_results_csv(res))?;
    written.push(csv);
    let md = out_dir.join("summary.md");
    fs::write(&md, render_summary(res, step))?;
    written.push(md);
    for ((dataset, shift), rows) in groups(res) {
        for m in METRICS {
            let path = out_dir.join(format!(
                "curve_{}_{}_{m}.svg",
                file_token(&dataset),
                file_token(&shift)
            ));
            fs::write(&path, render_curve_svg(&rows, m, &format!("{dataset} / {shift}")))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, step: usize, acc: f64) -> ResultRow {
        ResultRow {
            dataset: "gaussians".into(),
            shift: "id".into(),
            method: method.into(),
            seed,
            step,
            acc,
            ece: acc / 10.0,
            nll: 1.0 - acc / 3.0,
        }
    }

    fn fixture() -> RunResult {
        RunResult {
            rows: vec![
                row("map", 1, 100, 0.9),
                row("la", 0, 100, 0.85),
                row("map", 0, 100, 0.8),
                row("la", 1, 100, 0.95),
                row("map", 0, 50, 0.6),
                row("la", 0, 50, 0.1 + 0.2),
            ],
        }
    }

    #[test]
    fn csv_header_and_round_trip() {
        let res = fixture();
        let text = render_results_csv(&res);
        assert_eq!(text.lines().next().unwrap(), "dataset,shift,method,seed,step,acc,ece,nll");
        let mut back = parse_results_csv(&text, Path::new("r.csv")).unwrap();
        let mut orig = res.clone();
        orig.sort();
        back.sort();
        assert_eq!(back, orig);
        assert!(text.contains(",0.30000000000000004,"));
    }

    #[test]
    fn empty_result_is_header_only() {
        let text = render_results_csv(&RunResult::default());
        assert_eq!(text, format!("{RESULTS_HEADER}\n"));
    }

    #[test]
    fn summary_uses_final_step_and_sample_std() {
        let s = render_summary(&fixture(), None);
        assert!(s.contains("(step 100)"));
        let (m, sd) = mean_std(&[0.8, 0.9]);
        assert!(s.contains(&format!("| map | 2 | {m:.10} ± {sd:.10} |")));
        assert!((sd - (0.005f64).sqrt()).abs() < 1e-15);
        let s50 = render_summary(&fixture(), Some(50));
        assert!(s50.contains("| map | 1 | 0.6000000000 ± 0.0000000000 |"));
    }

    #[test]
    fn report_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = emit_report(&fixture(), &dir.path().join("a"), None).unwrap();
        let mut shuffled = fixture();
        shuffled.rows.reverse();
        let b = emit_report(&shuffled, &dir.path().join("b"), None).unwrap();
        assert_eq!(a.len(), 2 + 3);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
        }
        let svg = fs::read_to_string(&a[2]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn malformed_results_rejected() {
        assert!(parse_results_csv("a,b\n", Path::new("r")).is_err());
        let bad = format!("{RESULTS_HEADER}\ng,id,map,0,1,x,0,0\n");
        match parse_results_csv(&bad, Path::new("r")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
