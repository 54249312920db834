//! Minimal SVG emitters for the PR-curve and event-study plots. All floats
//! use fixed four-decimal formatting so reruns are byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use damagemap_core::event_study::{RegressionResult, EVENT_WINDOW};
use damagemap_core::metrics::RunReport;

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{HEIGHT:.0}\" viewBox=\"0 0 {WIDTH:.0} {HEIGHT:.0}\">"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH:.0}\" height=\"{HEIGHT:.0}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{title}</text>",
        WIDTH / 2.0
    );
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = frame();
    let _ = writeln!(
        s,
        "<line x1=\"{x0:.1}\" y1=\"{y1:.1}\" x2=\"{x1:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x0:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>",
        (x0 + x1) / 2.0,
        y1 + 36.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 {:.1} {:.1})\">{y_label}</text>",
        x0 - 38.0,
        (y0 + y1) / 2.0,
        x0 - 38.0,
        (y0 + y1) / 2.0
    );
}

fn frame() -> (f64, f64, f64, f64) {
    (MARGIN, MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN)
}

/// Both stages' unbalanced PR curves (and stage-1 balanced for contrast).
pub fn write_pr_svg(path: &Path, report: &RunReport) -> Result<()> {
    let (x0, y0, x1, y1) = frame();
    let to_x = |recall: f64| x0 + recall * (x1 - x0);
    let to_y = |precision: f64| y1 - precision * (y1 - y0);

    let mut s = header(&format!("Precision-recall, city {}", report.city));
    axes(&mut s, "recall", "precision");
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{v:.1}</text>",
            to_x(v),
            y1 + 16.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{v:.1}</text>",
            x0 - 6.0,
            to_y(v) + 4.0
        );
    }

    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
    let mut legend_y = y0 + 10.0;
    for (i, stage) in report.stages.iter().enumerate() {
        for (j, (label, curve)) in [
            ("unbalanced", &stage.pr_unbalanced),
            ("balanced", &stage.pr_balanced),
        ]
        .into_iter()
        .enumerate()
        {
            let Some(curve) = curve else { continue };
            let color = palette[(i * 2 + j) % palette.len()];
            let mut points = String::new();
            let _ = write!(points, "{:.4},{:.4}", to_x(0.0), to_y(curve.points.first().map_or(1.0, |p| p.precision)));
            for p in &curve.points {
                let _ = write!(points, " {:.4},{:.4}", to_x(p.recall), to_y(p.precision));
            }
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{points}\"/>"
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{} {label} (AP {:.4})</text>",
                x0 + 10.0,
                legend_y,
                stage.stage,
                curve.average_precision
            );
            legend_y += 16.0;
        }
    }
    let _ = writeln!(s, "</svg>");
    std::fs::write(path, s).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

/// Event-study coefficients over bins -5..+5 with the reference at zero
/// and a dashed line marking the event date.
pub fn write_event_study_svg(path: &Path, result: &RegressionResult) -> Result<()> {
    let (x0, y0, x1, y1) = frame();
    let bins: Vec<i32> = (-EVENT_WINDOW..=EVENT_WINDOW).collect();
    let values: Vec<f64> = bins.iter().map(|b| result.coefficients[b]).collect();
    let max_abs = values.iter().fold(0.05f64, |m, v| m.max(v.abs())) * 1.15;

    let to_x = |bin: i32| {
        x0 + (bin + EVENT_WINDOW) as f64 / (2 * EVENT_WINDOW) as f64 * (x1 - x0)
    };
    let to_y = |v: f64| {
        let mid = (y0 + y1) / 2.0;
        mid - v / max_abs * (y1 - y0) / 2.0
    };

    let mut s = header("Event study: score response to recorded strikes");
    axes(&mut s, "event time (images relative to strike)", "coefficient");
    // zero line
    let _ = writeln!(
        s,
        "<line x1=\"{x0:.1}\" y1=\"{:.4}\" x2=\"{x1:.1}\" y2=\"{:.4}\" stroke=\"#888888\" stroke-width=\"1\"/>",
        to_y(0.0),
        to_y(0.0)
    );
    // dashed event marker at bin 0
    let _ = writeln!(
        s,
        "<line x1=\"{:.4}\" y1=\"{y0:.1}\" x2=\"{:.4}\" y2=\"{y1:.1}\" stroke=\"#555555\" stroke-dasharray=\"5,4\"/>",
        to_x(0),
        to_x(0)
    );
    let mut points = String::new();
    for (bin, v) in bins.iter().zip(&values) {
        let _ = write!(points, "{:.4},{:.4} ", to_x(*bin), to_y(*v));
    }
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>",
        points.trim_end()
    );
    for (bin, v) in bins.iter().zip(&values) {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.4}\" cy=\"{:.4}\" r=\"3\" fill=\"#1f77b4\"/>",
            to_x(*bin),
            to_y(*v)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.4}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{bin:+}</text>",
            to_x(*bin),
            y1 + 16.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{max_abs:+.4}</text>",
        x0 - 6.0,
        to_y(max_abs) + 12.0
    );
    let _ = writeln!(s, "</svg>");
    std::fs::write(path, s).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use damagemap_core::metrics::{pr_curve, ScoredLabelSet, StageMetrics};
    use std::collections::BTreeMap;

    #[test]
    fn pr_svg_is_deterministic_and_well_formed() {
        let set = ScoredLabelSet::new(vec![(0.9, 1), (0.4, 0), (0.6, 1), (0.2, 0)]).unwrap();
        let curve = pr_curve(&set).unwrap();
        let report = RunReport {
            city: "t".into(),
            n_test: 4,
            prevalence: 0.5,
            stages: vec![StageMetrics {
                stage: "stage1".into(),
                auc: 0.9,
                ap_unbalanced: curve.average_precision,
                ap_balanced: curve.average_precision,
                pr_unbalanced: Some(curve.clone()),
                pr_balanced: Some(curve),
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
        write_pr_svg(&a, &report).unwrap();
        write_pr_svg(&b, &report).unwrap();
        let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(ta, tb);
        let text = String::from_utf8(ta).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn event_svg_covers_all_bins() {
        let mut coefficients = BTreeMap::new();
        coefficients.insert(-6, 0.0);
        for bin in -5..=5 {
            coefficients.insert(bin, if bin >= 0 { 0.2 } else { 0.01 });
        }
        let result = RegressionResult { coefficients, n_obs: 100, converged: true };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("es.svg");
        write_event_study_svg(&path, &result).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("<circle").count(), 11);
        assert!(text.contains("stroke-dasharray"));
    }
}
