//! Benchmark rows, Pareto frontier and the accuracy/energy scatter plot.

use std::fmt::Write as _;

use crate::error::{Result, SnnError};
use crate::profiler::energy_pj;

pub const BENCH_HEADER: &str = "model,schedule,dataset,acc,f1,ac,mac,params,energy_mj,eta,delta_acc";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub schedule: String,
    pub dataset: String,
    pub acc: f64,
    pub f1: f64,
    pub ac: u64,
    pub mac: u64,
    pub params: u64,
    pub energy_mj: f64,
    pub eta: Option<f64>,
    pub delta_acc: Option<f64>,
}

pub fn energy_mj(ac: u64, mac: u64) -> f64 {
    energy_pj(ac, mac) * 1e-9
}

impl BenchRow {
    /// Row with `energy_mj` derived from the counts.
    #[allow(clippy::too_many_arguments)]
    pub fn new(model: &str, schedule: &str, dataset: &str, acc: f64, f1: f64, ac: u64, mac: u64, params: u64) -> Self {
        BenchRow {
            model: model.into(),
            schedule: schedule.into(),
            dataset: dataset.into(),
            acc,
            f1,
            ac,
            mac,
            params,
            energy_mj: energy_mj(ac, mac),
            eta: None,
            delta_acc: None,
        }
    }

    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{:.6},{},{},{},{},{},{}",
            self.model,
            self.schedule,
            self.dataset,
            self.acc,
            self.f1,
            self.ac,
            self.mac,
            self.params,
            self.energy_mj,
            opt(self.eta),
            opt(self.delta_acc)
        )
    }

    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(format!("expected 11 columns, got {}", cols.len()));
        }
        let num = |i: usize| cols[i].trim().parse::<f64>().map_err(|_| format!("column {} is not a number: `{}`", i + 1, cols[i]));
        let int = |i: usize| cols[i].trim().parse::<u64>().map_err(|_| format!("column {} is not an integer: `{}`", i + 1, cols[i]));
        let opt = |i: usize| if cols[i].trim().is_empty() { Ok(None) } else { num(i).map(Some) };
        Ok(BenchRow {
            model: cols[0].into(),
            schedule: cols[1].into(),
            dataset: cols[2].into(),
            acc: num(3)?,
            f1: num(4)?,
            ac: int(5)?,
            mac: int(6)?,
            params: int(7)?,
            energy_mj: num(8)?,
            eta: opt(9)?,
            delta_acc: opt(10)?,
        })
    }
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_rows(text: &str) -> Result<Vec<BenchRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == BENCH_HEADER => {}
        Some(h) => return Err(SnnError::invalid("bench csv", format!("unexpected header `{h}`"))),
        None => return Err(SnnError::invalid("bench csv", "no rows")),
    }
    let rows = lines
        .enumerate()
        .map(|(i, l)| BenchRow::parse_line(l).map_err(|e| SnnError::invalid("bench csv", format!("row {}: {e}", i + 1))))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(SnnError::invalid("bench csv", "no rows"));
    }
    Ok(rows)
}

/// `true` for points not dominated by any other point, where domination
/// means accuracy >= and energy <= with at least one strict.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].1.total_cmp(&points[b].1));
    let mut flags = vec![false; points.len()];
    let mut best_below = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let energy = points[order[i]].1;
        let mut j = i;
        let mut group_best = f64::NEG_INFINITY;
        while j < order.len() && points[order[j]].1 == energy {
            group_best = group_best.max(points[order[j]].0);
            j += 1;
        }
        if group_best > best_below {
            for &k in &order[i..j] {
                flags[k] = points[k].0 == group_best;
            }
            best_below = group_best;
        }
        i = j;
    }
    flags
}

pub fn summary_csv(rows: &[BenchRow], pareto: &[bool]) -> String {
    let mut out = format!("{BENCH_HEADER},pareto\n");
    for (r, &p) in rows.iter().zip(pareto) {
        let _ = writeln!(out, "{},{}", r.to_csv_line(), p);
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of accuracy against energy on a log axis. Pareto rows are filled.
pub fn scatter_svg(rows: &[BenchRow], pareto: &[bool], title: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(SnnError::invalid("report", "no rows to plot"));
    }
    if let Some(r) = rows.iter().find(|r| !(r.energy_mj > 0.0) || !r.acc.is_finite()) {
        return Err(SnnError::invalid(
            "report",
            format!("row {}/{} needs positive energy and finite accuracy for a log axis", r.model, r.schedule),
        ));
    }
    let (w, h, left, right, top, bottom) = (720.0, 480.0, 80.0, 200.0, 40.0, 60.0);
    let log_e: Vec<f64> = rows.iter().map(|r| r.energy_mj.log10()).collect();
    let mut lo = log_e.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let mut hi = log_e.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
    if hi <= lo {
        lo -= 1.0;
        hi += 1.0;
    }
    let acc_lo = rows.iter().map(|r| r.acc).fold(f64::INFINITY, f64::min).min(0.0);
    let acc_hi = rows.iter().map(|r| r.acc).fold(f64::NEG_INFINITY, f64::max).max(1.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |le: f64| left + (le - lo) / (hi - lo) * pw;
    let y = |a: f64| top + (1.0 - (a - acc_lo) / (acc_hi - acc_lo)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for decade in (lo as i32)..=(hi as i32) {
        let px = x(decade as f64);
        let _ = writeln!(s, r##"<line x1="{px:.1}" y1="{top}" x2="{px:.1}" y2="{}" stroke="#ddd"/>"##, top + ph);
        let _ = writeln!(s, r#"<text x="{px:.1}" y="{}" text-anchor="middle">1e{decade}</text>"#, top + ph + 18.0);
    }
    for tick in 0..=5 {
        let a = acc_lo + (acc_hi - acc_lo) * tick as f64 / 5.0;
        let py = y(a);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{a:.2}</text>"#, left - 6.0, py + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">energy per image (mJ, log scale)</text>"#, left + pw / 2.0, h - 16.0);
    let _ = writeln!(s, r#"<text transform="translate(20,{}) rotate(-90)" text-anchor="middle">top-1 accuracy</text>"#, top + ph / 2.0);
    for ((r, &p), &le) in rows.iter().zip(pareto).zip(&log_e) {
        let (px, py) = (x(le), y(r.acc));
        let fill = if p { "#c0392b" } else { "white" };
        let _ = writeln!(
            s,
            r##"<circle cx="{px:.1}" cy="{py:.1}" r="5" fill="{fill}" stroke="#c0392b"><title>{} {} acc={:.4} energy={:.6} mJ</title></circle>"##,
            escape(&r.model),
            escape(&r.schedule),
            r.acc,
            r.energy_mj
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#, px + 7.0, py - 6.0, escape(&r.schedule));
    }
    let lx = left + pw + 16.0;
    let _ = writeln!(s, r##"<circle cx="{lx}" cy="{top}" r="5" fill="#c0392b" stroke="#c0392b"/>"##);
    let _ = writeln!(s, r#"<text x="{}" y="{}">Pareto-optimal</text>"#, lx + 10.0, top + 4.0);
    let _ = writeln!(s, r##"<circle cx="{lx}" cy="{}" r="5" fill="white" stroke="#c0392b"/>"##, top + 20.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}">dominated</text>"#, lx + 10.0, top + 24.0);
    s.push_str("</svg>\n");
    Ok(s)
}
