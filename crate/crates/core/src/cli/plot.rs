//! Schedule plots: per-operator mean probability (normalized) and mean
//! magnitude over epochs, as stacked SVG area charts plus a TSV table.

use std::fmt::Write as _;
use std::path::Path;

use crate::augment::{Operator, SLOTS_PER_OPERATOR};
use crate::error::{Error, Result};
use crate::pba::Schedule;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const LEGEND: f64 = 140.0;

const PALETTE: [&str; 15] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173",
];

/// Per-epoch, per-operator summary of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    pub mean_probability: Vec<Vec<f64>>,
    pub normalized_probability: Vec<Vec<f64>>,
    pub mean_magnitude: Vec<Vec<f64>>,
}

impl ScheduleTable {
    pub fn epochs(&self) -> usize {
        self.mean_probability.len()
    }
}

/// Average the two slots of every operator, then divide every probability
/// by the largest per-epoch probability sum over the whole schedule. An
/// all-zero schedule normalizes to zeros.
pub fn summarize(schedule: &Schedule) -> ScheduleTable {
    let mut prob = Vec::with_capacity(schedule.len());
    let mut mag = Vec::with_capacity(schedule.len());
    for policy in &schedule.per_epoch {
        let mut p = Vec::with_capacity(Operator::ALL.len());
        let mut m = Vec::with_capacity(Operator::ALL.len());
        for op in Operator::ALL {
            let (mut ps, mut ms) = (0.0, 0.0);
            for slot in 0..SLOTS_PER_OPERATOR {
                let e = policy.entry(op, slot);
                ps += e.probability();
                ms += f64::from(e.magnitude());
            }
            p.push(ps / SLOTS_PER_OPERATOR as f64);
            m.push(ms / SLOTS_PER_OPERATOR as f64);
        }
        prob.push(p);
        mag.push(m);
    }
    let denom = prob
        .iter()
        .map(|row| row.iter().sum::<f64>())
        .fold(0.0_f64, f64::max);
    let normalized = prob
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| if denom > 0.0 { v / denom } else { 0.0 })
                .collect()
        })
        .collect();
    ScheduleTable {
        mean_probability: prob,
        normalized_probability: normalized,
        mean_magnitude: mag,
    }
}

pub fn table_tsv(t: &ScheduleTable) -> String {
    let mut s = String::from("epoch\top\tmean_probability\tnormalized_probability\tmean_magnitude\n");
    for e in 0..t.epochs() {
        for (i, op) in Operator::ALL.iter().enumerate() {
            let _ = writeln!(
                s,
                "{e}\t{op}\t{}\t{}\t{}",
                t.mean_probability[e][i], t.normalized_probability[e][i], t.mean_magnitude[e][i]
            );
        }
    }
    s
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Stacked area chart of `series[epoch][op]`.
pub fn stacked_svg(title: &str, y_label: &str, series: &[Vec<f64>]) -> String {
    let epochs = series.len();
    let plot_w = WIDTH - 2.0 * MARGIN - LEGEND;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let totals: Vec<f64> = series.iter().map(|r| r.iter().sum()).collect();
    let ymax = totals.iter().copied().fold(0.0_f64, f64::max);
    let ymax = if ymax > 0.0 { ymax } else { 1.0 };
    let x = |e: usize| {
        if epochs <= 1 {
            MARGIN + plot_w / 2.0
        } else {
            MARGIN + plot_w * e as f64 / (epochs - 1) as f64
        }
    };
    let y = |v: f64| HEIGHT - MARGIN - plot_h * v / ymax;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="16" text-anchor="middle">{title}</text>"#,
        fmt(MARGIN + plot_w / 2.0),
        fmt(MARGIN / 2.0)
    );
    let mut base = vec![0.0; epochs];
    for (i, op) in Operator::ALL.iter().enumerate() {
        let top: Vec<f64> = (0..epochs).map(|e| base[e] + series[e][i]).collect();
        let mut pts: Vec<String> = (0..epochs).map(|e| format!("{},{}", fmt(x(e)), fmt(y(top[e])))).collect();
        pts.extend((0..epochs).rev().map(|e| format!("{},{}", fmt(x(e)), fmt(y(base[e])))));
        let _ = writeln!(
            s,
            r#"<polygon class="series" data-op="{op}" points="{}" fill="{}" stroke="none"/>"#,
            pts.join(" "),
            PALETTE[i]
        );
        let ly = MARGIN + 14.0 * i as f64;
        let lx = WIDTH - LEGEND;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-size="11">{op}</text>"#,
            fmt(lx),
            fmt(ly),
            PALETTE[i],
            fmt(lx + 14.0),
            fmt(ly + 9.0)
        );
        base = top;
    }
    let (x0, x1, y0, y1) = (MARGIN, MARGIN + plot_w, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch (0 to {})</text>"#,
        fmt(MARGIN + plot_w / 2.0),
        fmt(HEIGHT - MARGIN / 3.0),
        epochs.saturating_sub(1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 {} {})">{y_label} (max {})</text>"#,
        fmt(MARGIN / 3.0),
        fmt(HEIGHT / 2.0),
        fmt(MARGIN / 3.0),
        fmt(HEIGHT / 2.0),
        fmt(ymax)
    );
    s.push_str("</svg>\n");
    s
}

/// Write `probability.svg`, `magnitude.svg` and `schedule_table.tsv` into
/// `out`. The schedule file is only read.
pub fn plot_schedule(schedule_path: &Path, out: &Path) -> Result<ScheduleTable> {
    let text = std::fs::read_to_string(schedule_path).map_err(|e| Error::io(schedule_path, e))?;
    let (schedule, _, _) = Schedule::from_text(&text)?;
    let table = summarize(&schedule);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, body: String| {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write(
        "probability.svg",
        stacked_svg("Normalized probability", "probability", &table.normalized_probability),
    )?;
    write("magnitude.svg", stacked_svg("Mean magnitude", "magnitude", &table.mean_magnitude))?;
    write("schedule_table.tsv", table_tsv(&table))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::PolicyList;

    fn schedule(rows: &[&[(Operator, u8, u8)]]) -> Schedule {
        Schedule {
            per_epoch: rows
                .iter()
                .map(|ents| {
                    let mut p = PolicyList::null();
                    for &(op, t, m) in ents.iter() {
                        for slot in 0..SLOTS_PER_OPERATOR {
                            p.set(op, slot, t, m).unwrap();
                        }
                    }
                    p
                })
                .collect(),
        }
    }

    #[test]
    fn zero_schedule_normalizes_to_zero() {
        let t = summarize(&schedule(&[&[], &[]]));
        assert!(t.normalized_probability.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_op_is_one() {
        let t = summarize(&schedule(&[&[(Operator::Rotate, 6, 3)]]));
        assert_eq!(t.normalized_probability[0][Operator::Rotate.index()], 1.0);
        assert_eq!(t.mean_magnitude[0][Operator::Rotate.index()], 3.0);
    }

    #[test]
    fn global_max_denominator() {
        let t = summarize(&schedule(&[
            &[(Operator::Invert, 2, 0), (Operator::Color, 2, 0)],
            &[(Operator::Invert, 4, 0), (Operator::Color, 4, 0)],
        ]));
        let i = Operator::Invert.index();
        assert!((t.normalized_probability[0][i] - 0.25).abs() < 1e-12);
        assert!((t.normalized_probability[1][i] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn svg_has_one_polygon_per_operator() {
        let t = summarize(&schedule(&[&[(Operator::Rotate, 6, 3)], &[]]));
        let svg = stacked_svg("p", "p", &t.normalized_probability);
        assert_eq!(svg.matches("<polygon").count(), Operator::ALL.len());
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
