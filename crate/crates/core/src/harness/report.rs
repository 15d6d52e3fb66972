//! CSV tables and SVG figures for sweep results.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{DashError, Result};
use crate::model::{HybridArch, OperatorKind};
use crate::search::realized_budget;

/// One architecture to draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub lambda: f64,
    pub heldout_kl: f64,
    pub arch: HybridArch,
}

fn color(op: OperatorKind) -> &'static str {
    match op {
        OperatorKind::Full => "#c0392b",
        OperatorKind::Window => "#e67e22",
        OperatorKind::Linear => "#2e86c1",
    }
}

/// Budget label with trailing zeros trimmed, e.g. `B=4.875`, `B=9`.
pub fn budget_label(budget: f64) -> String {
    let s = format!("{budget:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("B={s}")
}

const CELL: usize = 14;
const LABEL_W: usize = 150;

/// One row per architecture, one colored cell per layer.
pub fn allocation_strip_svg(rows: &[ReportRow], window: usize, seq_len: usize) -> String {
    let layers = rows.iter().map(|r| r.arch.len()).max().unwrap_or(0);
    let width = LABEL_W + layers * CELL + 90;
    let height = 20 + rows.len() * (CELL + 4) + 24;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    for (i, row) in rows.iter().enumerate() {
        let y = 20 + i * (CELL + 4);
        let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, y + CELL - 3, escape(&row.label));
        for (l, &op) in row.arch.ops().iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{}" height="{CELL}" fill="{}" stroke="white"><title>layer {l}: {op}</title></rect>"#,
                LABEL_W + l * CELL,
                CELL,
                color(op)
            );
        }
        let b = realized_budget(&row.arch, window, seq_len);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            LABEL_W + layers * CELL + 6,
            y + CELL - 3,
            budget_label(b)
        );
    }
    let ly = height - 8;
    for (k, op) in OperatorKind::ALL.iter().enumerate() {
        let x = 4 + k * 90;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#,
            ly - 9,
            color(*op)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{op}</text>"#, x + 14);
    }
    s.push_str("</svg>\n");
    s
}

/// Mean budget per λ as bars, mean held-out KL per λ as a line.
pub fn budget_chart_svg(rows: &[ReportRow], window: usize, seq_len: usize) -> String {
    let mut lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let groups: Vec<(f64, f64, f64)> = lambdas
        .iter()
        .map(|&l| {
            let g: Vec<&ReportRow> = rows.iter().filter(|r| r.lambda == l).collect();
            let n = g.len() as f64;
            let b = g.iter().map(|r| realized_budget(&r.arch, window, seq_len)).sum::<f64>() / n;
            let kl = g.iter().map(|r| r.heldout_kl).sum::<f64>() / n;
            (l, b, kl)
        })
        .collect();
    let (w, h, pad) = (80 * groups.len().max(1) + 100, 260usize, 40usize);
    let plot_h = (h - 2 * pad) as f64;
    let max_b = groups.iter().map(|g| g.1).fold(1.0, f64::max);
    let max_kl = groups
        .iter()
        .map(|g| g.2)
        .filter(|k| k.is_finite())
        .fold(1e-12, f64::max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="16">realized budget (bars) and held-out KL (line) vs lambda</text>"#
    );
    let mut points = Vec::new();
    for (i, &(l, b, kl)) in groups.iter().enumerate() {
        let x = pad + 20 + i * 80;
        let bh = b / max_b * plot_h;
        let y = (h - pad) as f64 - bh;
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{y:.2}" width="40" height="{bh:.2}" fill="#7f8c8d"/>"##
        );
        let _ = writeln!(s, r#"<text x="{x}" y="{:.2}">{}</text>"#, y - 3.0, budget_label(b));
        let _ = writeln!(s, r#"<text x="{x}" y="{}">{l}</text>"#, h - pad + 14);
        if kl.is_finite() {
            points.push(format!("{},{:.2}", x + 20, (h - pad) as f64 - kl / max_kl * plot_h));
        }
    }
    if !points.is_empty() {
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
            points.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn report_csv(rows: &[ReportRow], window: usize, seq_len: usize) -> String {
    let mut out = String::from("label,lambda,budget,heldout_kl,arch\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            r.lambda,
            realized_budget(&r.arch, window, seq_len),
            r.heldout_kl,
            r.arch
        );
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the CSV table (`report.csv`) and both figures into `dir`.
/// Budgets are always recomputed from the architectures.
pub fn emit_report(rows: &[ReportRow], window: usize, seq_len: usize, dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(DashError::EmptyReport);
    }
    std::fs::create_dir_all(dir).map_err(|e| DashError::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| DashError::io(p, e))
    };
    write("report.csv", report_csv(rows, window, seq_len))?;
    write("allocation.svg", allocation_strip_svg(rows, window, seq_len))?;
    write("budget_kl.svg", budget_chart_svg(rows, window, seq_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use OperatorKind::*;

    fn row(arch: HybridArch, lambda: f64) -> ReportRow {
        ReportRow {
            label: format!("lambda={lambda}"),
            lambda,
            heldout_kl: 0.1,
            arch,
        }
    }

    #[test]
    fn strip_has_one_cell_per_layer() {
        let svg = allocation_strip_svg(&[row(HybridArch::all_linear(8), 0.1)], 4, 32);
        assert_eq!(svg.matches("<rect").count() - 3, 8);
    }

    #[test]
    fn strip_labels_budget() {
        let mut ops = vec![Full; 4];
        ops.extend(vec![Window; 7]);
        ops.resize(36, Linear);
        let svg = allocation_strip_svg(&[row(HybridArch::new(ops), 0.1)], 16, 128);
        assert!(svg.contains("B=4.875"));
        assert_eq!(budget_label(9.0), "B=9");
        assert_eq!(budget_label(17.75), "B=17.75");
    }

    #[test]
    fn output_is_byte_stable() {
        let rows = vec![
            row("L F W L".parse().unwrap(), 0.01),
            row("L L W L".parse().unwrap(), 0.1),
        ];
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        emit_report(&rows, 4, 32, dir1.path()).unwrap();
        emit_report(&rows, 4, 32, dir2.path()).unwrap();
        for f in ["report.csv", "allocation.svg", "budget_kl.svg"] {
            assert_eq!(
                std::fs::read(dir1.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn empty_input_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&[], 4, 32, dir.path()),
            Err(DashError::EmptyReport)
        ));
    }
}
