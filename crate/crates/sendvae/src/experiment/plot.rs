//! SVG plot emission: the probe-vs-generation scatter with a fitted line and
//! annotated correlation, plus per-variant training-loss curves.

use crate::error::{Error, Result};
use crate::report::SweepReport;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points(pts: &[(f64, f64)]) -> Frame {
        let mut f = Frame {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for &(x, y) in pts {
            f.x_min = f.x_min.min(x);
            f.x_max = f.x_max.max(x);
            f.y_min = f.y_min.min(y);
            f.y_max = f.y_max.max(y);
        }
        let pad = |lo: &mut f64, hi: &mut f64| {
            let span = (*hi - *lo).max(1e-9);
            *lo -= 0.08 * span;
            *hi += 0.08 * span;
        };
        pad(&mut f.x_min, &mut f.x_max);
        pad(&mut f.y_min, &mut f.y_max);
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (H - 2.0 * MARGIN)
    }
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"15\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    )
}

fn axes(frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        W / 2.0,
        H - 16.0
    );
    let _ = write!(
        s,
        "<text x=\"16\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        H / 2.0,
        H / 2.0
    );
    for i in 0..=4 {
        let fx = frame.x_min + (frame.x_max - frame.x_min) * i as f64 / 4.0;
        let fy = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 4.0;
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{fx:.3}</text>\n",
            frame.px(fx),
            H - MARGIN + 16.0
        );
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{fy:.3}</text>\n",
            MARGIN - 6.0,
            frame.py(fy) + 4.0
        );
    }
    s
}

/// Scatter of probe recall vs generation score with a least-squares line and
/// the recomputed correlation annotated.
pub fn scatter_probe_vs_gfid(report: &SweepReport, out_path: &Path) -> Result<Vec<(f64, f64)>> {
    let pts: Vec<(f64, f64, String)> = report
        .rows
        .iter()
        .filter_map(|r| {
            match (r.probe_top5_recall.value, r.proxy_gfid.value) {
                (Some(x), Some(y)) => Some((x, y, r.variant.clone())),
                _ => None,
            }
        })
        .collect();
    if pts.len() < 3 {
        return Err(Error::Data(format!(
            "scatter needs >= 3 variants with recall and proxy_gfid, have {}",
            pts.len()
        )));
    }
    let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
    let xs: Vec<f64> = xy.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = xy.iter().map(|p| p.1).collect();
    let r = crate::metrics::pearson(&xs, &ys)?;

    // least squares y = a x + b
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let a = sxy / sxx.max(1e-12);
    let b = my - a * mx;

    let frame = Frame::from_points(&xy);
    let mut svg = svg_header("attribute recall@5 vs generation score");
    svg.push_str(&axes(&frame, "probe_top5_recall", "proxy_gfid"));
    let _ = write!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888\" stroke-dasharray=\"5 3\"/>\n",
        frame.px(frame.x_min),
        frame.py(a * frame.x_min + b),
        frame.px(frame.x_max),
        frame.py(a * frame.x_max + b),
    );
    for (x, y, name) in &pts {
        let _ = write!(
            svg,
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"#1f5fbf\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{name}</text>\n",
            frame.px(*x),
            frame.py(*y),
            frame.px(*x) + 6.0,
            frame.py(*y) - 6.0,
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"44\" font-family=\"monospace\" font-size=\"13\" text-anchor=\"middle\">pearson r = {r:.4}</text>\n",
        W / 2.0
    );
    svg.push_str("</svg>\n");
    std::fs::write(out_path, svg)?;
    Ok(xy)
}

/// Loss curve from a JSONL training log; returns false (and logs the reason)
/// when the log is empty or missing.
pub fn loss_curve(log_path: &Path, title: &str, out_path: &Path) -> Result<bool> {
    if !log_path.exists() {
        eprintln!(
            "plot skipped: training log {} does not exist",
            log_path.display()
        );
        return Ok(false);
    }
    let text = std::fs::read_to_string(log_path)?;
    let mut pts = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)?;
        let step = v["step"].as_f64();
        let total = v["total"].as_f64();
        if let (Some(s), Some(t)) = (step, total) {
            pts.push((s, t));
        }
    }
    if pts.is_empty() {
        eprintln!("plot skipped: training log {} is empty", log_path.display());
        return Ok(false);
    }
    let frame = Frame::from_points(&pts);
    let mut svg = svg_header(title);
    svg.push_str(&axes(&frame, "step", "total loss"));
    let mut path = String::from("<polyline fill=\"none\" stroke=\"#b02a2a\" stroke-width=\"1.2\" points=\"");
    for (x, y) in &pts {
        let _ = write!(path, "{:.2},{:.2} ", frame.px(*x), frame.py(*y));
    }
    path.push_str("\"/>\n");
    svg.push_str(&path);
    svg.push_str("</svg>\n");
    std::fs::write(out_path, svg)?;
    Ok(true)
}

/// Emits every plot for a sweep output directory. Returns written files.
pub fn render_plots(out_root: &Path) -> Result<Vec<PathBuf>> {
    let report: SweepReport =
        serde_json::from_str(&std::fs::read_to_string(out_root.join("report.json"))?)?;
    let plots_dir = out_root.join("plots");
    std::fs::create_dir_all(&plots_dir)?;
    let mut written = Vec::new();

    let scatter_path = plots_dir.join("recall_vs_gfid.svg");
    match scatter_probe_vs_gfid(&report, &scatter_path) {
        Ok(_) => written.push(scatter_path),
        Err(e) => eprintln!("scatter skipped: {e}"),
    }

    for row in &report.rows {
        for (stage, file) in [("vae", "vae"), ("flow", "flow")] {
            let log = out_root
                .join("variants")
                .join(&row.variant)
                .join(stage)
                .join("train_log.jsonl");
            let out = plots_dir.join(format!("loss_{}_{}.svg", row.variant, file));
            if loss_curve(&log, &format!("{} {stage} training loss", row.variant), &out)? {
                written.push(out);
            }
        }
    }
    Ok(written)
}
