//! Static SVG line charts from CSV inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// A CSV problem, with the 1-based line it was found on.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvError {
    pub path: String,
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for CsvError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: line {}: {}", self.path, self.line, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Source CSV record of each point, embedded in the SVG.
    pub rows: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Header plus records of a CSV file, each record tagged with its line.
pub struct Table {
    pub path: String,
    pub header: Vec<String>,
    pub records: Vec<(u64, Vec<String>)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table, CsvError> {
        let name = path.display().to_string();
        let err = |line: u64, message: String| CsvError {
            path: name.clone(),
            line,
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(0, e.to_string()))?;
        Self::parse(&text, &name)
    }

    pub fn parse(text: &str, name: &str) -> Result<Table, CsvError> {
        let err = |line: u64, message: String| CsvError {
            path: name.to_string(),
            line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| err(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.iter().all(|h| h.is_empty()) {
            return Err(err(1, "empty file".into()));
        }
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            records.push((line, rec.iter().map(str::to_string).collect()));
        }
        if records.is_empty() {
            return Err(err(2, "no data rows".into()));
        }
        Ok(Table {
            path: name.to_string(),
            header,
            records,
        })
    }

    pub fn column(&self, name: &str) -> Result<usize, CsvError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| CsvError {
            path: self.path.clone(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    }

    pub fn number(&self, line: u64, rec: &[String], col: usize) -> Result<f64, CsvError> {
        let v = &rec[col];
        v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| CsvError {
            path: self.path.clone(),
            line,
            message: format!("column `{}`: `{v}` is not a finite number", self.header[col]),
        })
    }
}

/// Loss curves from metrics files: every loss column of a single file, or
/// `l_total` of each file when several are given.
pub fn loss_chart(tables: &[Table]) -> Result<Chart, CsvError> {
    let cols = ["l_total", "l_infonce", "l_rec", "l_denoise"];
    let mut series = Vec::new();
    for t in tables {
        let step = t.column("step")?;
        let wanted: Vec<&str> = if tables.len() == 1 { cols.to_vec() } else { vec!["l_total"] };
        for c in wanted {
            let ci = t.column(c)?;
            let mut s = Series {
                name: if tables.len() == 1 { c.to_string() } else { format!("{} {c}", stem(&t.path)) },
                ..Series::default()
            };
            for (line, rec) in &t.records {
                s.points.push((t.number(*line, rec, step)?, t.number(*line, rec, ci)?));
                s.rows.push(rec.join(","));
            }
            series.push(s);
        }
    }
    Ok(Chart {
        title: "Training loss".into(),
        x_label: "Step".into(),
        y_label: "Loss".into(),
        series,
    })
}

fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(path)
        .to_string()
}

/// One series per value of `group`, plotting `x` against `y`.
fn grouped(tables: &[Table], group: &[&str], x: &str, y: &str, sort_x: bool) -> Result<Vec<Series>, CsvError> {
    let mut by: BTreeMap<String, Series> = BTreeMap::new();
    for t in tables {
        let gi: Vec<usize> = group.iter().map(|g| t.column(g)).collect::<Result<_, _>>()?;
        let (xi, yi) = (t.column(x)?, t.column(y)?);
        for (line, rec) in &t.records {
            let key = gi.iter().map(|&i| rec[i].as_str()).collect::<Vec<_>>().join(" ");
            let s = by.entry(key.clone()).or_insert_with(|| Series {
                name: key,
                ..Series::default()
            });
            s.points.push((t.number(*line, rec, xi)?, t.number(*line, rec, yi)?));
            s.rows.push(rec.join(","));
        }
    }
    let mut out: Vec<Series> = by.into_values().collect();
    if sort_x {
        for s in &mut out {
            let mut idx: Vec<usize> = (0..s.points.len()).collect();
            idx.sort_by(|&a, &b| s.points[a].0.total_cmp(&s.points[b].0));
            s.points = idx.iter().map(|&i| s.points[i]).collect();
            s.rows = idx.iter().map(|&i| s.rows[i].clone()).collect();
        }
    }
    Ok(out)
}

/// Columns `method, mask_rate, accuracy`.
pub fn mask_sweep_chart(tables: &[Table]) -> Result<Chart, CsvError> {
    Ok(Chart {
        title: "Masking rate sweep".into(),
        x_label: "Masking rate".into(),
        y_label: "Linear probe accuracy".into(),
        series: grouped(tables, &["method"], "mask_rate", "accuracy", true)?,
    })
}

/// Columns `method, flops, accuracy`.
pub fn frontier_chart(tables: &[Table]) -> Result<Chart, CsvError> {
    Ok(Chart {
        title: "Accuracy vs pre-training FLOPs".into(),
        x_label: "Pre-training FLOPs".into(),
        y_label: "Linear probe accuracy".into(),
        series: grouped(tables, &["method"], "flops", "accuracy", true)?,
    })
}

/// The cost model CSV: total FLOPs against mask rate, per method and model.
pub fn flops_chart(tables: &[Table]) -> Result<Chart, CsvError> {
    Ok(Chart {
        title: "Forward FLOPs per image".into(),
        x_label: "Masking rate".into(),
        y_label: "FLOPs".into(),
        series: grouped(tables, &["method", "model"], "mask_rate", "total", true)?,
    })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Roughly five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Chart {
    pub fn point_count(&self) -> usize {
        self.series.iter().map(|s| s.points.len()).sum()
    }

    pub fn to_svg(&self) -> String {
        let (w, h) = (720.0, 480.0);
        let (left, right, top, bottom) = (80.0, 170.0, 40.0, 60.0);
        let pw = w - left - right;
        let ph = h - top - bottom;
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            left + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for t in ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{top}" stroke="#e0e0e0"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
                top + ph,
                top + ph + 16.0,
                fmt_tick(t)
            );
        }
        for t in ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                left + pw,
                left - 6.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
            left + pw / 2.0,
            h - 18.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text class="y-label" x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(s, r#"<g class="series" data-name="{}">"#, escape(&series.name));
            let path: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
            // markers carry the source rows so the data survives the rendering
            let dense = series.points.len() > 200;
            for (&(x, y), row) in series.points.iter().zip(&series.rows) {
                let r = if dense { 0.0 } else { 3.0 };
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}" data-row="{}"/>"#,
                    sx(x),
                    sy(y),
                    escape(row)
                );
            }
            let ly = top + 14.0 + 18.0 * i as f64;
            let lx = left + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.name)
            );
            s.push_str("</g>\n");
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Source rows recovered from an SVG written by [`Chart::to_svg`].
pub fn embedded_rows(svg: &str) -> Vec<String> {
    svg.split("data-row=\"")
        .skip(1)
        .filter_map(|rest| rest.split('"').next())
        .map(|r| {
            r.replace("&quot;", "\"")
                .replace("&gt;", ">")
                .replace("&lt;", "<")
                .replace("&amp;", "&")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_malformed_inputs_report_lines() {
        assert!(Table::parse("", "x").is_err());
        assert_eq!(Table::parse("a,b\n", "x").err().unwrap().line, 2);
        let t = Table::parse("method,mask_rate,accuracy\ncan,0.5,0.7\ncan,zero,0.6\n", "x").unwrap();
        assert_eq!(mask_sweep_chart(&[t]).unwrap_err().line, 3);
        let ragged = Table::parse("a,b\n1,2\n3\n", "x");
        assert_eq!(ragged.err().unwrap().line, 3);
    }

    #[test]
    fn sweep_groups_by_method() {
        let t = Table::parse(
            "method,mask_rate,accuracy\ncan,0.5,0.7\nsimclr,0.0,0.6\ncan,0.0,0.65\nsimclr,0.5,0.5\n",
            "x",
        )
        .unwrap();
        let c = mask_sweep_chart(&[t]).unwrap();
        assert_eq!(c.series.len(), 2);
        assert_eq!(c.series[0].name, "can");
        assert_eq!(c.series[0].points, vec![(0.0, 0.65), (0.5, 0.7)]);
        let svg = c.to_svg();
        assert!(svg.contains("Masking rate") && svg.contains("Linear probe accuracy"));
        assert_eq!(embedded_rows(&svg).len(), 4);
    }

    #[test]
    fn ticks_cover_range() {
        let t = ticks(0.0, 1.0);
        assert_eq!(t.first(), Some(&0.0));
        assert!((t.last().unwrap() - 1.0).abs() < 1e-12);
        assert!(ticks(3.0, 3.5).len() >= 3);
    }
}
