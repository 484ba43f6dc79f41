//! Output formatting helpers shared by the CSV writers.

use std::path::Path;

use crate::error::{Error, Result};

/// Shortest round-trip decimal; scientific notation for tiny magnitudes.
/// Missing values (`NaN`) are written as `NA`.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else if v != 0.0 && (v.abs() < 1e-4 || v.abs() >= 1e15) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Writes `contents` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart_svg(title: &str, labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
    let (width, height) = (120.0 + 90.0 * labels.len() as f64, 360.0);
    let (left, top, bottom) = (60.0, 40.0, 300.0);
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let scale = (bottom - top) / max;
    let group = 90.0;
    let bar = (group - 20.0) / series.len().max(1) as f64;
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    out += &format!("<text x=\"{left}\" y=\"20\" font-size=\"14\">{}</text>\n", esc(title));
    out += &format!(
        "<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{}\" y2=\"{bottom}\" stroke=\"black\"/>\n",
        width - 20.0
    );
    for tick in 0..=4 {
        let v = max * tick as f64 / 4.0;
        let y = bottom - v * scale;
        out += &format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n",
            left - 5.0,
            y + 4.0,
            v
        );
    }
    for (g, label) in labels.iter().enumerate() {
        let x0 = left + 10.0 + g as f64 * group;
        for (k, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().filter(|v| v.is_finite()).unwrap_or(0.0);
            let h = v * scale;
            out += &format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
                x0 + k as f64 * bar,
                bottom - h,
                bar - 1.0,
                h,
                PALETTE[k % PALETTE.len()]
            );
        }
        out += &format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            x0 + (group - 20.0) / 2.0,
            bottom + 15.0,
            esc(label)
        );
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let y = bottom + 35.0 + 14.0 * k as f64;
        out += &format!(
            "<rect x=\"{left}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{:.1}\">{}</text>\n",
            y - 9.0,
            PALETTE[k % PALETTE.len()],
            left + 15.0,
            y,
            esc(name)
        );
    }
    out += "</svg>\n";
    out
}
