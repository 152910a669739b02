//! Static SVG figures rendered from a run directory's CSV artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Failure;
use crate::output::OutputDir;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const HISTOGRAM_BINS: usize = 20;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Band {
    pub lower: Vec<(f64, f64)>,
    pub upper: Vec<(f64, f64)>,
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Shaded region drawn under the series of the same index.
    pub bands: Vec<Option<Band>>,
    pub fixed_bounds: Option<(f64, f64, f64, f64)>,
}

fn bounds(plot: &Plot) -> (f64, f64, f64, f64) {
    if let Some(b) = plot.fixed_bounds {
        return b;
    }
    let all = plot.series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        (y0, y1) = (y0 - 1.0, y1 + 1.0);
    }
    (x0, x1, y0, y1)
}

fn tick_label(v: f64) -> String {
    if v == v.round() && v.abs() < 1e6 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

pub fn render(plot: &Plot) -> String {
    let (x0, x1, y0, y1) = bounds(plot);
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + ph - (y - y0) / (y1 - y0) * ph;
    let path = |pts: &[(f64, f64)]| {
        pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect::<Vec<_>>().join(" ")
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(&plot.title)
    );
    let (left, right, top, bottom) = (MARGIN_LEFT, MARGIN_LEFT + pw, MARGIN_TOP, MARGIN_TOP + ph);
    let _ =
        writeln!(s, r#"<polyline points="{left},{top} {left},{bottom} {right},{bottom}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ =
            writeln!(s, r#"<line x1="{px:.2}" y1="{bottom}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, bottom + 5.0);
        let _ =
            writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, bottom + 18.0, tick_label(xv));
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{left}" y2="{py:.2}" stroke="black"/>"#, left - 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        HEIGHT - 10.0,
        escape(&plot.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&plot.y_label)
    );
    for (i, series) in plot.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(Some(band)) = plot.bands.get(i) {
            let mut outline = band.upper.clone();
            outline.extend(band.lower.iter().rev());
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                path(&outline)
            );
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path(&series.points)
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = right + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&series.name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| Failure::Runtime(e.to_string()))?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(Table { header, rows })
}

fn parse_f64(s: &str, path: &Path) -> Result<f64, Failure> {
    s.parse().map_err(|_| Failure::Runtime(format!("{}: not a number: {s:?}", path.display())))
}

fn column(t: &Table, name: &str, path: &Path) -> Result<usize, Failure> {
    t.header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Failure::Runtime(format!("{}: missing column `{name}`", path.display())))
}

/// Summary numbers of one rendered figure, read from its CSV.
#[derive(Debug, Serialize)]
pub struct FigureSummary {
    pub source: String,
    pub figure: String,
    pub values: BTreeMap<String, f64>,
}

fn reputation_figure(path: &Path) -> Result<(Plot, BTreeMap<String, f64>), Failure> {
    let t = read_table(path)?;
    let mut series: Vec<Series> =
        t.header.iter().skip(1).map(|n| Series { name: n.clone(), points: Vec::new() }).collect();
    for row in &t.rows {
        let step = parse_f64(&row[0], path)?;
        for (k, s) in series.iter_mut().enumerate() {
            s.points.push((step, parse_f64(&row[k + 1], path)?));
        }
    }
    let values =
        series.iter().filter_map(|s| s.points.last().map(|p| (format!("final_mean.{}", s.name), p.1))).collect();
    let n = series.len();
    Ok((
        Plot {
            title: "Mean reputation by user type".into(),
            x_label: "step".into(),
            y_label: "mean reputation".into(),
            series,
            bands: (0..n).map(|_| None).collect(),
            fixed_bounds: None,
        },
        values,
    ))
}

fn histogram_figure(path: &Path) -> Result<(Plot, BTreeMap<String, f64>), Failure> {
    let t = read_table(path)?;
    let (c_type, c_rep) = (column(&t, "type", path)?, column(&t, "reputation", path)?);
    let mut by_type: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &t.rows {
        by_type.entry(row[c_type].clone()).or_default().push(parse_f64(&row[c_rep], path)?);
    }
    let all: Vec<f64> = by_type.values().flatten().copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut values = BTreeMap::new();
    let mut series = Vec::new();
    for (name, reps) in &by_type {
        let mut counts = [0usize; HISTOGRAM_BINS];
        for r in reps {
            let b = (((r - lo) / width).floor() as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        let mut points = vec![(lo, 0.0)];
        for (b, c) in counts.iter().enumerate() {
            let frac = *c as f64 / reps.len() as f64;
            points.push((lo + b as f64 * width, frac));
            points.push((lo + (b + 1) as f64 * width, frac));
        }
        points.push((hi, 0.0));
        values.insert(format!("mean.{name}"), reps.iter().sum::<f64>() / reps.len() as f64);
        values.insert(format!("count.{name}"), reps.len() as f64);
        series.push(Series { name: name.clone(), points });
    }
    let n = series.len();
    Ok((
        Plot {
            title: "Final reputation distribution by user type".into(),
            x_label: "reputation".into(),
            y_label: "fraction of users".into(),
            series,
            bands: (0..n).map(|_| None).collect(),
            fixed_bounds: None,
        },
        values,
    ))
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

fn roc_figure(path: &Path) -> Result<(Plot, BTreeMap<String, f64>), Failure> {
    let t = read_table(path)?;
    let (c_sub, c_f, c_t) = (column(&t, "subset", path)?, column(&t, "fpr", path)?, column(&t, "tpr", path)?);
    let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in &t.rows {
        curves.entry(row[c_sub].clone()).or_default().push((parse_f64(&row[c_f], path)?, parse_f64(&row[c_t], path)?));
    }
    let values = curves.iter().map(|(k, pts)| (format!("auc.{k}"), trapezoid(pts))).collect();
    let mut series: Vec<Series> = curves.into_iter().map(|(name, points)| Series { name, points }).collect();
    series.push(Series { name: "chance".into(), points: vec![(0.0, 0.0), (1.0, 1.0)] });
    let n = series.len();
    Ok((
        Plot {
            title: "ROC of settled story labels".into(),
            x_label: "false positive rate".into(),
            y_label: "true positive rate".into(),
            series,
            bands: (0..n).map(|_| None).collect(),
            fixed_bounds: Some((0.0, 1.0, 0.0, 1.0)),
        },
        values,
    ))
}

fn roc_band_figure(path: &Path) -> Result<(Plot, BTreeMap<String, f64>), Failure> {
    let t = read_table(path)?;
    let c = |n| column(&t, n, path);
    let (c_cell, c_f, c_m, c_lo, c_hi) = (c("cell")?, c("fpr")?, c("mean_tpr")?, c("lower")?, c("upper")?);
    let mut cells: BTreeMap<u64, (Series, Band)> = BTreeMap::new();
    for row in &t.rows {
        let cell: u64 = row[c_cell].parse().map_err(|_| Failure::Runtime(format!("{}: bad cell", path.display())))?;
        let f = parse_f64(&row[c_f], path)?;
        let entry = cells.entry(cell).or_insert_with(|| {
            (Series { name: format!("cell {cell}"), points: Vec::new() }, Band { lower: Vec::new(), upper: Vec::new() })
        });
        entry.0.points.push((f, parse_f64(&row[c_m], path)?));
        entry.1.lower.push((f, parse_f64(&row[c_lo], path)?));
        entry.1.upper.push((f, parse_f64(&row[c_hi], path)?));
    }
    let values = cells.iter().map(|(k, (s, _))| (format!("mean_auc.cell{k}"), trapezoid(&s.points))).collect();
    let (series, bands) = cells.into_values().map(|(s, b)| (s, Some(b))).unzip();
    Ok((
        Plot {
            title: "Mean ROC with 95% confidence band".into(),
            x_label: "false positive rate".into(),
            y_label: "true positive rate".into(),
            series,
            bands,
            fixed_bounds: Some((0.0, 1.0, 0.0, 1.0)),
        },
        values,
    ))
}

type Renderer = fn(&Path) -> Result<(Plot, BTreeMap<String, f64>), Failure>;

const FIGURES: [(&str, &str, Renderer); 4] = [
    ("reputation.csv", "reputation.svg", reputation_figure),
    ("final_reputation.csv", "final_reputation.svg", histogram_figure),
    ("roc.csv", "roc.svg", roc_figure),
    ("roc_band.csv", "roc_band.svg", roc_band_figure),
];

/// Renders every known artifact found in `dir` into `dir/figures` and writes
/// `dir/summary.json`.
pub fn report_dir(dir: &Path) -> Result<PathBuf, Failure> {
    let present: Vec<_> = FIGURES.iter().filter(|(csv, _, _)| dir.join(csv).is_file()).collect();
    if present.is_empty() {
        let names: Vec<&str> = FIGURES.iter().map(|f| f.0).collect();
        return Err(Failure::Validation(format!(
            "missing artifacts: {} contains none of {}",
            dir.display(),
            names.join(", ")
        )));
    }
    let mut out = OutputDir::create(dir.to_path_buf())?.with_manifest_name("report_manifest.json");
    let mut summary = Vec::new();
    for (csv_name, svg_name, render_fn) in present {
        let (plot, values) = render_fn(&dir.join(csv_name))?;
        let figure = format!("figures/{svg_name}");
        out.write_text(&figure, &render(&plot))?;
        summary.push(FigureSummary { source: csv_name.to_string(), figure, values });
    }
    out.write_json("summary.json", &summary)?;
    out.finish("report", None, None)
}
