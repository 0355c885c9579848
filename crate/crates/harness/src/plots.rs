//! Plot emission: a mutual-information bar chart from metrics CSVs, and a
//! 2-D curvature heatmap with a geodesic overlay. Everything is written as
//! plain SVG (plus a CSV twin for the heatmap so the numbers stay
//! machine-checkable).

use std::io::Write;
use std::path::{Path, PathBuf};

use rnf_core::flows::FlowStack;
use rnf_core::geometry::{curvature_grid, geodesic};

use crate::{HarnessError, Result};

/// One parsed metrics row. Optional columns stay `None` when the field was
/// empty for that epoch.
#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub epoch: u64,
    pub nll: f64,
    pub kl: f64,
    pub mmd: Option<f64>,
    pub log_j_raw: Option<f64>,
    pub log_j_reg: Option<f64>,
    pub ppl: f64,
    pub mi: f64,
    pub alpha: f64,
    pub lambda: f64,
}

fn parse_field(name: &str, raw: &str, path: &Path) -> Result<f64> {
    raw.parse().map_err(|_| {
        HarnessError::Config(format!(
            "{}: cannot read `{raw}` as the `{name}` column",
            path.display()
        ))
    })
}

fn parse_opt(name: &str, raw: &str, path: &Path) -> Result<Option<f64>> {
    if raw.is_empty() {
        Ok(None)
    } else {
        parse_field(name, raw, path).map(Some)
    }
}

/// Read a metrics CSV produced by the trainer.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        HarnessError::Config(format!("cannot read metrics {}: {e}", path.display()))
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::Config(format!("{}: empty file", path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    let index = |name: &str| -> Result<usize> {
        columns.iter().position(|c| *c == name).ok_or_else(|| {
            HarnessError::Config(format!("{}: missing column `{name}`", path.display()))
        })
    };
    let (i_epoch, i_nll, i_kl) = (index("epoch")?, index("nll")?, index("kl")?);
    let (i_mmd, i_raw, i_reg) = (index("mmd")?, index("log_j_raw")?, index("log_j_reg")?);
    let (i_ppl, i_mi) = (index("ppl")?, index("mi")?);
    let (i_alpha, i_lambda) = (index("alpha")?, index("lambda")?);

    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != columns.len() {
            return Err(HarnessError::Config(format!(
                "{}: row has {} fields, header has {}",
                path.display(),
                f.len(),
                columns.len()
            )));
        }
        rows.push(MetricsRow {
            epoch: f[i_epoch].parse().map_err(|_| {
                HarnessError::Config(format!("{}: bad epoch `{}`", path.display(), f[i_epoch]))
            })?,
            nll: parse_field("nll", f[i_nll], path)?,
            kl: parse_field("kl", f[i_kl], path)?,
            mmd: parse_opt("mmd", f[i_mmd], path)?,
            log_j_raw: parse_opt("log_j_raw", f[i_raw], path)?,
            log_j_reg: parse_opt("log_j_reg", f[i_reg], path)?,
            ppl: parse_field("ppl", f[i_ppl], path)?,
            mi: parse_field("mi", f[i_mi], path)?,
            alpha: parse_field("alpha", f[i_alpha], path)?,
            lambda: parse_field("lambda", f[i_lambda], path)?,
        });
    }
    Ok(rows)
}

/// Whether plotting happened or was skipped (with the reason).
#[derive(Debug)]
pub enum PlotOutcome {
    Written(Vec<PathBuf>),
    Skipped(String),
}

/// Bar chart of the final-epoch mutual information of each run.
pub fn mi_bar_chart(runs: &[(String, PathBuf)], out: &Path) -> Result<PathBuf> {
    if runs.is_empty() {
        return Err(HarnessError::Config("no metrics files given".into()));
    }
    let mut bars = Vec::with_capacity(runs.len());
    for (label, path) in runs {
        let rows = read_metrics(path)?;
        let last = rows.last().ok_or_else(|| {
            HarnessError::Config(format!("{}: no metric rows", path.display()))
        })?;
        bars.push((label.clone(), last.mi));
    }

    let max_mi = bars.iter().map(|b| b.1).fold(0.0_f64, f64::max).max(1e-12);
    let bar_w = 80.0;
    let gap = 40.0;
    let plot_h = 240.0;
    let x0 = 70.0;
    let y0 = 30.0;
    let width = x0 + bars.len() as f64 * (bar_w + gap) + 30.0;
    let height = y0 + plot_h + 60.0;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{}\" stroke=\"black\"/>\n",
        y0 + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        y0 + plot_h,
        width - 20.0,
        y0 + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{max_mi:.3}</text>\n",
        x0 - 6.0,
        y0 + 4.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">0</text>\n",
        x0 - 6.0,
        y0 + plot_h + 4.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"13\" transform=\"rotate(-90 14 {})\" \
         text-anchor=\"middle\">mutual information (nats)</text>\n",
        y0 + plot_h / 2.0,
        y0 + plot_h / 2.0
    ));

    for (i, (label, mi)) in bars.iter().enumerate() {
        let h = (mi / max_mi).max(0.0) * plot_h;
        let x = x0 + gap / 2.0 + i as f64 * (bar_w + gap);
        let y = y0 + plot_h - h;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w}\" height=\"{h:.1}\" \
             fill=\"#4472c4\" stroke=\"#2f528f\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{mi:.4}</text>\n",
            x + bar_w / 2.0,
            y - 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{label}</text>\n",
            x + bar_w / 2.0,
            y0 + plot_h + 20.0
        ));
    }
    svg.push_str("</svg>\n");

    std::fs::write(out, svg)?;
    Ok(out.to_path_buf())
}

fn lerp_color(t: f64) -> String {
    // Dark blue (low) to warm yellow (high).
    let t = t.clamp(0.0, 1.0);
    let lo = (26.0, 42.0, 108.0);
    let hi = (253.0, 224.0, 71.0);
    let r = (lo.0 + t * (hi.0 - lo.0)).round() as u8;
    let g = (lo.1 + t * (hi.1 - lo.1)).round() as u8;
    let b = (lo.2 + t * (hi.2 - lo.2)).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Curvature heatmap (sqrt of the metric determinant on an `n x n` grid over
/// `[-half_range, half_range]^2`) with a geodesic overlaid between `from`
/// and `to`. Writes `curvature.svg` and `curvature.csv` into `out_dir`.
/// Latent dimensions other than 2 are reported as skipped, not an error.
pub fn curvature_plot(
    stack: &FlowStack,
    latent: usize,
    half_range: f64,
    n: usize,
    from: [f64; 2],
    to: [f64; 2],
    out_dir: &Path,
) -> Result<PlotOutcome> {
    if latent != 2 {
        return Ok(PlotOutcome::Skipped(format!(
            "curvature heatmap needs a 2-D latent space, this model has {latent}"
        )));
    }
    if n < 2 || !(half_range.is_finite() && half_range > 0.0) {
        return Err(HarnessError::Config(
            "heatmap needs a grid of at least 2x2 over a positive range".into(),
        ));
    }
    let axis: Vec<f64> = (0..n)
        .map(|i| -half_range + 2.0 * half_range * i as f64 / (n - 1) as f64)
        .collect();
    let grid = curvature_grid(stack, &axis, &axis)?;

    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("curvature.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
        writeln!(f, "x,y,value")?;
        for (iy, &y) in axis.iter().enumerate() {
            for (ix, &x) in axis.iter().enumerate() {
                writeln!(f, "{x},{y},{}", grid.get(iy, ix))?;
            }
        }
        f.flush()?;
    }

    let path = geodesic(stack, &from, &to, 24, 400)?;

    let cell = 9.0;
    let margin = 40.0;
    let side = cell * n as f64;
    let size = side + 2.0 * margin;
    let vmin = grid.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = grid.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (vmax - vmin).max(1e-300);

    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let px = margin + (x + half_range) / (2.0 * half_range) * side;
        let py = margin + (half_range - y) / (2.0 * half_range) * side;
        (px, py)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size:.0}\" height=\"{size:.0}\" \
         viewBox=\"0 0 {size:.0} {size:.0}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for iy in 0..n {
        for ix in 0..n {
            let t = (grid.get(iy, ix) - vmin) / span;
            // Row iy carries ys[iy]; larger y sits higher on the canvas.
            let px = margin + ix as f64 * cell;
            let py = margin + (n - 1 - iy) as f64 * cell;
            svg.push_str(&format!(
                "<rect x=\"{px:.1}\" y=\"{py:.1}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"{}\"/>\n",
                lerp_color(t)
            ));
        }
    }
    let pts: Vec<String> = (0..path.curve.points().rows())
        .map(|r| {
            let p = path.curve.points().row_slice(r);
            let (px, py) = to_px(p[0], p[1]);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#e11d48\" stroke-width=\"2.5\"/>\n",
        pts.join(" ")
    ));
    for (x, y) in [(from[0], from[1]), (to[0], to[1])] {
        let (px, py) = to_px(x, y);
        svg.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"4\" fill=\"#e11d48\" stroke=\"white\"/>\n"
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{margin}\" y=\"{:.1}\" font-size=\"12\">sqrt det G over [{:.2}, {:.2}]^2, \
         geodesic {} after {} iterations</text>\n",
        size - 12.0,
        -half_range,
        half_range,
        if path.converged { "converged" } else { "not converged" },
        path.energies.len().saturating_sub(1)
    ));
    svg.push_str("</svg>\n");

    let svg_path = out_dir.join("curvature.svg");
    std::fs::write(&svg_path, svg)?;
    Ok(PlotOutcome::Written(vec![csv_path, svg_path]))
}
