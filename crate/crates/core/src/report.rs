//! SVG heatmaps and line charts. Plain data views, no styling beyond a
//! linear color scale.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patching::ScoreTable;
use crate::rsa::SimilarityMatrix;

const CELL: f64 = 18.0;
const MARGIN: f64 = 60.0;

/// Diverging blue-white-red over `[lo, hi]`, white at the midpoint.
pub fn color(value: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((value - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let s = t * 2.0;
        (s, s, 1.0)
    } else {
        let s = (1.0 - t) * 2.0;
        (1.0, s, s)
    };
    let c = |x: f64| (x * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(r), c(g), c(b))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         font-family=\"sans-serif\" font-size=\"10\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn save(path: &Path, svg: String) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Rows × columns grid. `None` cells are drawn grey.
pub struct Heatmap<'a> {
    pub title: &'a str,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub range: (f64, f64),
    /// Cell size in pixels.
    pub cell: f64,
}

impl Heatmap<'_> {
    pub fn render(&self) -> String {
        let rows = self.values.len();
        let cols = self.values.first().map_or(0, Vec::len);
        let c = self.cell;
        let w = MARGIN * 2.0 + cols as f64 * c;
        let h = MARGIN * 2.0 + rows as f64 * c;
        let mut s = open(w, h);
        let _ = writeln!(s, "<text x=\"{MARGIN}\" y=\"20\" font-size=\"13\">{}</text>", escape(self.title));
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let fill = v.map_or_else(|| "#bbbbbb".to_string(), |v| color(v, self.range.0, self.range.1));
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{c:.1}\" height=\"{c:.1}\" fill=\"{fill}\"/>",
                    MARGIN + j as f64 * c,
                    MARGIN + i as f64 * c
                );
            }
        }
        let label_step = (12.0 / c).ceil().max(1.0) as usize;
        for (i, l) in self.row_labels.iter().enumerate().step_by(label_step) {
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
                MARGIN - 4.0,
                MARGIN + (i as f64 + 0.7) * c,
                escape(l)
            );
        }
        for (j, l) in self.col_labels.iter().enumerate().step_by(label_step) {
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                MARGIN + (j as f64 + 0.5) * c,
                MARGIN - 4.0,
                escape(l)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{MARGIN}\" y=\"{:.1}\">scale {:.3} (blue) to {:.3} (red)</text>",
            h - MARGIN / 2.0,
            self.range.0,
            self.range.1
        );
        s + "</svg>\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        save(path, self.render())
    }
}

/// Layer × head heatmap of a score table, symmetric around zero.
pub fn score_heatmap<'a>(table: &ScoreTable, title: &'a str) -> Heatmap<'a> {
    let values: Vec<Vec<Option<f64>>> = (0..table.n_layers)
        .map(|l| {
            (0..table.n_heads_per_layer)
                .map(|j| table.get(crate::runtime::HeadLocator::new(l, j)))
                .collect()
        })
        .collect();
    let m = values.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let m = if m > 0.0 { m } else { 1.0 };
    Heatmap {
        title,
        row_labels: (0..table.n_layers).map(|l| format!("L{l}")).collect(),
        col_labels: (0..table.n_heads_per_layer).map(|j| format!("H{j}")).collect(),
        values,
        range: (-m, m),
        cell: CELL,
    }
}

pub fn write_score_heatmap(table: &ScoreTable, title: &str, path: &Path) -> Result<()> {
    score_heatmap(table, title).write(path)
}

/// Similarity matrix heatmap over `[-1, 1]` in the given row order.
/// `labels` name each row; when the matrix has more than `max_cells` rows,
/// consecutive rows sharing a label are averaged into one block.
pub fn write_similarity_heatmap(
    m: &SimilarityMatrix,
    order: &[usize],
    labels: &[String],
    title: &str,
    max_cells: usize,
    path: &Path,
) -> Result<()> {
    let n = order.len();
    let (groups, names): (Vec<Vec<usize>>, Vec<String>) = if n <= max_cells {
        (order.iter().map(|&i| vec![i]).collect(), order.iter().map(|&i| labels[i].clone()).collect())
    } else {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for &i in order {
            if names.last() != Some(&labels[i]) {
                names.push(labels[i].clone());
                groups.push(Vec::new());
            }
            groups.last_mut().unwrap().push(i);
        }
        (groups, names)
    };
    let values = groups
        .iter()
        .map(|a| {
            groups
                .iter()
                .map(|b| {
                    let sum: f64 = a.iter().flat_map(|&i| b.iter().map(move |&k| m.get(i, k))).sum();
                    Some(sum / (a.len() * b.len()) as f64)
                })
                .collect()
        })
        .collect();
    let cell = (720.0 / groups.len().max(1) as f64).clamp(1.0, CELL);
    Heatmap {
        title,
        row_labels: names.clone(),
        col_labels: names,
        values,
        range: (-1.0, 1.0),
        cell,
    }
    .write(path)
}

/// One line of a chart.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (520.0, 320.0);
    let (pw, ph) = (w - 2.0 * MARGIN - 100.0, h - 2.0 * MARGIN);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| MARGIN + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = open(w, h);
    let _ = writeln!(s, "<text x=\"{MARGIN}\" y=\"20\" font-size=\"13\">{}</text>", escape(title));
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{pw:.1}\" height=\"{ph:.1}\" fill=\"none\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"#999\" stroke-dasharray=\"3,3\"/>",
        py(0.0),
        MARGIN + pw
    );
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>", MARGIN - 4.0, y + 3.0);
    }
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v}</text>", MARGIN + ph + 14.0);
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        MARGIN + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(s, "<text x=\"12\" y=\"{:.1}\">{}</text>", MARGIN - 8.0, escape(y_label));
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        let ly = MARGIN + 14.0 * i as f64;
        let lx = MARGIN + pw + 10.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{c}\" stroke-width=\"2\"/>",
            lx + 14.0
        );
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", lx + 18.0, ly + 3.0, escape(&ser.label));
    }
    s + "</svg>\n"
}

pub fn write_line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    save(path, line_chart(title, x_label, y_label, series))
}
