//! Run logging and report emission: CSV training logs, comparison tables,
//! and self-contained SVG plots (line charts and heat maps).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use super::TrainError;

/// Training log: CSV lines `step,l_vertex,l_joint3d,l_joint2d,l_total`,
/// buffered in memory and optionally flushed to disk.
#[derive(Default)]
pub struct RunLog {
    lines: Vec<String>,
    echo: bool,
}

impl RunLog {
    pub fn new(echo: bool) -> Self {
        RunLog {
            lines: vec!["step,l_vertex,l_joint3d,l_joint2d,l_total".to_string()],
            echo,
        }
    }

    pub fn record(&mut self, step: usize, lv: f64, l3: f64, l2: f64, total: f64) {
        let line = format!("{step},{lv:.9},{l3:.9},{l2:.9},{total:.9}");
        if self.echo {
            eprintln!("[step {step}] L_v={lv:.5} L_3D={l3:.5} L_2D={l2:.5} L={total:.5}");
        }
        self.lines.push(line);
    }

    pub fn note(&mut self, text: &str) {
        if self.echo {
            eprintln!("{text}");
        }
        self.lines.push(format!("# {text}"));
    }

    pub fn text(&self) -> String {
        self.lines.join("\n") + "\n"
    }

    pub fn write_to(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path).map_err(super::io_err(path))?;
        f.write_all(self.text().as_bytes())
            .map_err(super::io_err(path))
    }
}

/// One row of an ablation/comparison table.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub label: String,
    pub mpvpe: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub config_hash: String,
}

/// A comparison table plus the config hash of the producing run.
#[derive(Debug, Clone, Default)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,mpvpe,mpjpe,pa_mpjpe,config_hash\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{}",
                r.label, r.mpvpe, r.mpjpe, r.pa_mpjpe, r.config_hash
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:>10} {:>10} {:>10}  config",
            "variant", "MPVPE", "MPJPE", "PA-MPJPE"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18} {:>10.3} {:>10.3} {:>10.3}  {}",
                r.label,
                r.mpvpe,
                r.mpjpe,
                r.pa_mpjpe,
                &r.config_hash[..12.min(r.config_hash.len())]
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(super::io_err(path))
    }
}

fn color_for(t: f64) -> String {
    // Blue (low) to red (high) through white.
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t * 2.0;
        (
            (80.0 + 175.0 * u) as u8,
            (110.0 + 145.0 * u) as u8,
            (230.0 + 25.0 * u) as u8,
        )
    } else {
        let u = (t - 0.5) * 2.0;
        (255, (255.0 - 175.0 * u) as u8, (255.0 - 195.0 * u) as u8)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Self-contained SVG heat map for a `rows x cols` grid of values.
pub fn heatmap_svg(values: &[f64], rows: usize, cols: usize, title: &str) -> String {
    assert_eq!(values.len(), rows * cols);
    let cell = 28usize;
    let margin = 24usize;
    let width = cols * cell + margin * 2;
    let height = rows * cell + margin * 2 + 20;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<text x=\"{margin}\" y=\"16\" \
         font-family=\"monospace\" font-size=\"12\">{title} (lo={lo:.3}, hi={hi:.3})</text>\n"
    );
    for r in 0..rows {
        for c in 0..cols {
            let v = values[r * cols + c];
            let t = (v - lo) / span;
            let x = margin + c * cell;
            let y = margin + 20 + r * cell;
            let _ = writeln!(
                svg,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\">\
                 <title>({r},{c}) = {v:.4}</title></rect>",
                color_for(t)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Self-contained SVG line chart for one or more named series sharing x
/// values.
pub fn line_chart_svg(x: &[f64], series: &[(&str, Vec<f64>)], title: &str) -> String {
    let width = 480usize;
    let height = 320usize;
    let ml = 56usize;
    let mb = 40usize;
    let mt = 28usize;
    let mr = 16usize;
    let xs_lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let xs_hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for (_, ys) in series {
        for &v in ys {
            y_lo = y_lo.min(v);
            y_hi = y_hi.max(v);
        }
    }
    let xspan = (xs_hi - xs_lo).max(1e-12);
    let yspan = (y_hi - y_lo).max(1e-12);
    let px = |v: f64| ml as f64 + (v - xs_lo) / xspan * (width - ml - mr) as f64;
    let py = |v: f64| (height - mb) as f64 - (v - y_lo) / yspan * (height - mt - mb) as f64;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<text x=\"{ml}\" y=\"18\" font-family=\"monospace\" \
         font-size=\"12\">{title}</text>\n<rect x=\"{ml}\" y=\"{mt}\" width=\"{}\" height=\"{}\" \
         fill=\"none\" stroke=\"#888\"/>\n",
        width - ml - mr,
        height - mt - mb
    );
    let _ = writeln!(
        svg,
        "<text x=\"6\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{y_hi:.3}</text>\
         <text x=\"6\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{y_lo:.3}</text>\
         <text x=\"{ml}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{xs_lo:.2}</text>\
         <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{xs_hi:.2}</text>",
        mt + 8,
        height - mb,
        height - mb + 14,
        width - mr - 30,
        height - mb + 14,
    );
    let palette = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];
    for (si, (name, ys)) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        let points: Vec<String> = x
            .iter()
            .zip(ys.iter())
            .map(|(&xv, &yv)| format!("{:.2},{:.2}", px(xv), py(yv)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
             fill=\"{color}\">{name}</text>",
            ml + 8,
            mt + 16 + si * 14
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_lines_are_csv() {
        let mut log = RunLog::new(false);
        log.record(10, 0.1, 0.2, 0.3, 330.0);
        let text = log.text();
        assert!(text.starts_with("step,l_vertex"));
        assert!(text.contains("10,0.1"));
    }

    #[test]
    fn heatmap_contains_all_cells() {
        let svg = heatmap_svg(&[0.0, 1.0, 2.0, 3.0], 2, 2, "t");
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains("</svg>"));
    }

    #[test]
    fn line_chart_has_one_polyline_per_series() {
        let svg = line_chart_svg(
            &[0.0, 1.0, 2.0],
            &[("a", vec![1.0, 2.0, 3.0]), ("b", vec![3.0, 2.0, 1.0])],
            "t",
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn table_formats_rows() {
        let t = ComparisonTable {
            rows: vec![ComparisonRow {
                label: "fused".into(),
                mpvpe: 1.0,
                mpjpe: 2.0,
                pa_mpjpe: 3.0,
                config_hash: "abcdef0123456789".into(),
            }],
        };
        assert!(t.to_csv().contains("fused,1.000000"));
        assert!(t.to_text().contains("fused"));
    }
}
