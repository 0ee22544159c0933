use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{MatchDrift, MatchHistogram};

#[derive(Debug, Serialize, Deserialize)]
struct StatRow {
    phase: String,
    from_step: usize,
    to_step: usize,
    student_tap: usize,
    teacher_tap: usize,
    count: u64,
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, msg: e.to_string() }
}

/// One row per (phase, student tap, teacher tap), zero counts included.
pub fn match_stats_csv(drift: &MatchDrift) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (phase, h) in [("first", &drift.first), ("last", &drift.last)] {
        for (i, row) in h.counts.iter().enumerate() {
            for (j, &count) in row.iter().enumerate() {
                w.serialize(StatRow {
                    phase: phase.into(),
                    from_step: h.from_step,
                    to_step: h.to_step,
                    student_tap: i,
                    teacher_tap: j,
                    count,
                })
                .map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Inverse of [`match_stats_csv`].
pub fn load_match_stats_csv(text: &str) -> Result<MatchDrift> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut first: Vec<StatRow> = Vec::new();
    let mut last: Vec<StatRow> = Vec::new();
    for row in r.deserialize::<StatRow>() {
        let row = row.map_err(csv_err)?;
        match row.phase.as_str() {
            "first" => first.push(row),
            "last" => last.push(row),
            other => return Err(Error::Parse { line: 0, msg: format!("unknown phase {other:?}") }),
        }
    }
    let build = |rows: &[StatRow], name: &str| -> Result<MatchHistogram> {
        let Some(head) = rows.first() else {
            return Err(Error::Parse { line: 0, msg: format!("no rows for phase {name}") });
        };
        let t_s = rows.iter().map(|r| r.student_tap + 1).max().unwrap_or(0);
        let t_l = rows.iter().map(|r| r.teacher_tap + 1).max().unwrap_or(0);
        let mut counts = vec![vec![0u64; t_l]; t_s];
        for r in rows {
            counts[r.student_tap][r.teacher_tap] += r.count;
        }
        Ok(MatchHistogram { from_step: head.from_step, to_step: head.to_step, counts })
    };
    Ok(MatchDrift { first: build(&first, "first")?, last: build(&last, "last")? })
}

const COLORS: [&str; 8] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];

/// Grouped bar chart: one panel per phase, teacher taps on the x axis, one
/// bar per student tap showing the share of its draws.
pub fn match_stats_svg(drift: &MatchDrift) -> String {
    let t_s = drift.first.counts.len();
    let t_l = drift.first.counts.first().map_or(0, |r| r.len());
    let (panel_w, panel_h, margin) = (40.0 + 36.0 * t_l as f64, 180.0, 40.0);
    let width = 2.0 * panel_w + 3.0 * margin;
    let height = panel_h + 2.5 * margin + 16.0 * t_s as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#);
    for (p, (name, h)) in [("first decile", &drift.first), ("last decile", &drift.last)].into_iter().enumerate() {
        let x0 = margin + p as f64 * (panel_w + margin);
        let y0 = margin;
        let _ = writeln!(s, r#"<text x="{}" y="{}">{name} (steps {}..{})</text>"#, x0, y0 - 10.0, h.from_step, h.to_step);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, y0 + panel_h, x0 + panel_w);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{}" stroke="black"/>"#, y0 + panel_h);
        let group = (panel_w - 20.0) / t_l.max(1) as f64;
        let bar = group * 0.8 / t_s.max(1) as f64;
        for (i, row) in h.counts.iter().enumerate() {
            let n: u64 = row.iter().sum();
            for (j, &c) in row.iter().enumerate() {
                let share = if n == 0 { 0.0 } else { c as f64 / n as f64 };
                let bh = share * (panel_h - 10.0);
                let x = x0 + 10.0 + j as f64 * group + i as f64 * bar;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="{bar:.1}" height="{bh:.1}" fill="{}"/>"#,
                    y0 + panel_h - bh,
                    COLORS[i % COLORS.len()]
                );
            }
        }
        for j in 0..t_l {
            let x = x0 + 10.0 + (j as f64 + 0.4) * group;
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{j}</text>"#, y0 + panel_h + 14.0);
        }
    }
    let ly = margin + panel_h + 34.0;
    let _ = writeln!(s, r#"<text x="{margin}" y="{ly}">teacher tap; bar = share of draws per student tap</text>"#);
    for i in 0..t_s {
        let y = ly + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(s, r#"<rect x="{margin}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">student tap {i}</text>"#, margin + 16.0);
    }
    s.push_str("</svg>\n");
    s
}
