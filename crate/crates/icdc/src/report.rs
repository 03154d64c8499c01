//! Markdown tables and SVG plots from eval CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, IoContext, Result};
use crate::eval::MethodRow;

pub const REQUIRED_COLUMNS: [&str; 9] =
    ["method", "size", "stride", "samples", "instances", "mean_objective", "gap_pct", "reference", "wallclock_secs"];

pub fn write_rows(path: &Path, rows: &[MethodRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)
}

pub fn read_rows(path: &Path) -> Result<Vec<MethodRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    if let Some(missing) = REQUIRED_COLUMNS.iter().find(|c| !headers.iter().any(|h| h == **c)) {
        return Err(Error::Schema(format!("{}: missing column `{missing}`", path.display())));
    }
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Rows sorted by gap ascending (stable, so ties keep file order).
pub fn markdown_table(rows: &[MethodRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.gap_pct.total_cmp(&b.gap_pct));
    let mut s = String::from("| method | size | stride | n | objective | gap % | reference | time (s) |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in &rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} | {:.2} | {} | {:.2} |\n",
            r.method, r.size, r.stride, r.samples, r.mean_objective, r.gap_pct, r.reference, r.wallclock_secs
        ));
    }
    s
}

/// Leading integer of a size label (`"8"`, `"20x3"`).
fn size_value(label: &str) -> f64 {
    label.split('x').next().and_then(|s| s.parse().ok()).unwrap_or(f64::NAN)
}

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn line_plot(path: &Path, caption: &str, x_label: &str, y_label: &str, series: &Series) -> Result<()> {
    let pts = series.iter().flat_map(|(_, p)| p.iter().copied());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |a: f64, b: f64| if b > a { (b - a) * 0.05 } else { 1.0 };
    let (px, py) = (pad(x0, x1), pad(y0, y1));
    let plot_err = |e: String| Error::Schema(format!("{}: {e}", path.display()));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d((x0 - px)..(x1 + px), (y0 - py)..(y1 + py))
        .map_err(|e| plot_err(e.to_string()))?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(|e| plot_err(e.to_string()))?;
    for (k, (name, p)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(p.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart.draw_series(p.iter().map(|&(x, y)| Circle::new((x, y), 3, color.filled()))).map_err(|e| plot_err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))
}

fn grouped(rows: &[MethodRow], key: impl Fn(&MethodRow) -> String, x: impl Fn(&MethodRow) -> f64, y: impl Fn(&MethodRow) -> f64) -> Series {
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        by.entry(key(r)).or_default().push((x(r), y(r)));
    }
    by.into_iter()
        .map(|(k, mut p)| {
            p.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, p)
        })
        .collect()
}

/// Writes `report.md` into `out` plus `gap_vs_size.svg` when rows span
/// several sizes and `gap_vs_stride.svg` / `time_vs_stride.svg` when model
/// rows span several strides. Returns the files written.
pub fn write_report(csvs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for p in csvs {
        rows.extend(read_rows(p)?);
    }
    fs::create_dir_all(out).at(out)?;
    let mut written = Vec::new();
    let md = out.join("report.md");
    fs::write(&md, markdown_table(&rows)).at(&md)?;
    written.push(md);

    let distinct = |f: &dyn Fn(&MethodRow) -> String, rows: &[&MethodRow]| {
        let mut v: Vec<String> = rows.iter().map(|r| f(r)).collect();
        v.sort();
        v.dedup();
        v.len()
    };
    let all: Vec<&MethodRow> = rows.iter().collect();
    if distinct(&|r| r.size.clone(), &all) > 1 {
        let p = out.join("gap_vs_size.svg");
        let s = grouped(&rows, |r| format!("{} s{}", r.method, r.stride), |r| size_value(&r.size), |r| r.gap_pct);
        line_plot(&p, "Gap vs size", "size", "gap %", &s)?;
        written.push(p);
    }
    let model: Vec<MethodRow> = rows.iter().filter(|r| r.method == "icdc").cloned().collect();
    let model_refs: Vec<&MethodRow> = model.iter().collect();
    if distinct(&|r| r.stride.to_string(), &model_refs) > 1 {
        let key = |r: &MethodRow| format!("{} x{}", r.size, r.samples);
        for (file, caption, y_label, y) in [
            ("gap_vs_stride.svg", "Gap vs stride", "gap %", (|r: &MethodRow| r.gap_pct) as fn(&MethodRow) -> f64),
            ("time_vs_stride.svg", "Time vs stride", "seconds", |r: &MethodRow| r.wallclock_secs),
        ] {
            let p = out.join(file);
            line_plot(&p, caption, "stride", y_label, &grouped(&model, key, |r| r.stride as f64, y))?;
            written.push(p);
        }
    }
    Ok(written)
}
