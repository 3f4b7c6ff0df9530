//! CSV tables and SVG heatmaps of attention matrices and saliency maps.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::ForwardTrace;
use crate::numeric::Tensor;

/// Side length of one heatmap cell in pixels.
pub const CELL_PX: usize = 8;

/// A `rows × cols` table with a header row naming the column indices.
pub fn matrix_csv(data: &[f64], rows: usize, cols: usize, row_label: &str, col_label: &str) -> String {
    assert_eq!(data.len(), rows * cols);
    let mut s = String::from(row_label);
    for j in 0..cols {
        write!(s, ",{col_label}_{j}").unwrap();
    }
    s.push('\n');
    for i in 0..rows {
        write!(s, "{i}").unwrap();
        for v in &data[i * cols..(i + 1) * cols] {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Linear ramp from light grey (low) to dark blue (high).
fn ramp(t: f64) -> (u8, u8, u8) {
    let lo = [240.0, 240.0, 240.0];
    let hi = [8.0, 48.0, 107.0];
    let c = |k: usize| (lo[k] + (hi[k] - lo[k]) * t).round() as u8;
    (c(0), c(1), c(2))
}

/// Heatmap with fixed square cells, colours scaled between the matrix
/// minimum and maximum.
pub fn heatmap_svg(data: &[f64], rows: usize, cols: usize) -> String {
    assert_eq!(data.len(), rows * cols);
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (cols * CELL_PX, rows * CELL_PX);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" shape-rendering=\"crispEdges\">\n"
    );
    for i in 0..rows {
        for j in 0..cols {
            let (r, g, b) = ramp((data[i * cols + j] - lo) / span);
            writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL_PX}\" height=\"{CELL_PX}\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>",
                j * CELL_PX,
                i * CELL_PX
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write_pair(dir: &Path, stem: &str, data: &[f64], rows: usize, cols: usize, labels: (&str, &str), out: &mut Vec<PathBuf>) -> io::Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, matrix_csv(data, rows, cols, labels.0, labels.1))?;
    let svg = dir.join(format!("{stem}.svg"));
    fs::write(&svg, heatmap_svg(data, rows, cols))?;
    out.push(csv);
    out.push(svg);
    Ok(())
}

/// Slice of trial `b` from a tensor with a leading batch axis.
fn trial(t: &Tensor, b: usize) -> &[f64] {
    t.row(b)
}

/// Writes the attention matrices of trial `b`: one SACM and one TCAM table
/// per (layer, head), channel importance per layer and temporal weights.
pub fn export_trace(dir: &Path, trace: &ForwardTrace, b: usize, prefix: &str) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        if let Some(a) = &layer.sacm {
            let (h, c) = (a.shape()[1], a.shape()[2]);
            let d = trial(a, b);
            for hh in 0..h {
                let m = &d[hh * c * c..(hh + 1) * c * c];
                write_pair(dir, &format!("{prefix}sacm_l{l}_h{hh}"), m, c, c, ("channel", "channel"), &mut out)?;
            }
        }
        if let Some(a) = &layer.tcam {
            let (h, k) = (a.shape()[1], a.shape()[2]);
            let d = trial(a, b);
            for hh in 0..h {
                let m = &d[hh * k * k..(hh + 1) * k * k];
                write_pair(dir, &format!("{prefix}tcam_l{l}_h{hh}"), m, k, k, ("feature", "feature"), &mut out)?;
            }
        }
        if let Some(w) = &layer.omega {
            let (h, c) = (w.shape()[1], w.shape()[2]);
            let path = dir.join(format!("{prefix}omega_l{l}.csv"));
            fs::write(&path, matrix_csv(trial(w, b), h, c, "head", "channel"))?;
            out.push(path);
        }
    }
    if let Some(a) = &trace.alpha {
        let p = a.shape()[1];
        let path = dir.join(format!("{prefix}alpha.csv"));
        fs::write(&path, matrix_csv(trial(a, b), 1, p, "trial", "patch"))?;
        out.push(path);
    }
    Ok(out)
}

/// Writes a `[C, T]` saliency map as CSV and SVG.
pub fn export_saliency(dir: &Path, stem: &str, map: &Tensor) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let (c, t) = (map.shape()[0], map.shape()[1]);
    let mut out = Vec::new();
    write_pair(dir, stem, map.data(), c, t, ("channel", "sample"), &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_rows() {
        let s = matrix_csv(&[1.0, 0.5, 0.25, 0.0], 2, 2, "channel", "channel");
        assert_eq!(s, "channel,channel_0,channel_1\n0,1,0.5\n1,0.25,0\n");
    }

    #[test]
    fn svg_uses_fixed_cells() {
        let s = heatmap_svg(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, 3);
        assert!(s.contains("width=\"24\" height=\"16\""));
        assert_eq!(s.matches("<rect").count(), 6);
        assert!(s.contains("fill=\"#f0f0f0\""));
        assert!(s.contains("fill=\"#08306b\""));
    }
}
