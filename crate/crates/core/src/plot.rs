//! SVG scatter of sweep results: log-scaled trainable-parameter counts on
//! the x axis, mean test metric on the y axis, one polyline per method,
//! full fine-tuning as a horizontal reference line. Generated purely from
//! the results CSV so plotting stays optional.

use crate::ckpt::write_atomic;
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

struct MeanRow {
    method: String,
    params: f64,
    test: f64,
}

fn parse_mean_rows(csv: &str, path: &Path) -> Result<Vec<MeanRow>> {
    let mut rows = Vec::new();
    for (idx, line) in csv.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("method,") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("{}: expected 8 CSV fields", path.display()),
            });
        }
        if fields[4] != "mean" {
            continue;
        }
        rows.push(MeanRow {
            method: fields[0].to_string(),
            params: fields[2].parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: "bad trainable_params".into(),
            })?,
            test: fields[6].parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: "bad test_metric".into(),
            })?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: no aggregate rows to plot",
            path.display()
        )));
    }
    Ok(rows)
}

/// Render `csv` (a sweep results file) to an SVG scatter at `out`.
pub fn render_csv_to_svg(csv_path: &Path, out: &Path) -> Result<()> {
    let csv = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let rows = parse_mean_rows(&csv, csv_path)?;

    let full: Vec<&MeanRow> = rows.iter().filter(|r| r.method == "full").collect();
    let peft: Vec<&MeanRow> = rows.iter().filter(|r| r.method != "full").collect();

    let xs: Vec<f64> = peft.iter().map(|r| r.params.max(1.0).log10()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.test).collect();
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let x_of = |p: f64| {
        let lx = p.max(1.0).log10();
        MARGIN + (lx - x_min) / (x_max - x_min).max(1e-9) * (WIDTH - 2.0 * MARGIN)
    };
    let y_of = |v: f64| {
        HEIGHT - MARGIN - (v - y_min) / (y_max - y_min).max(1e-9) * (HEIGHT - 2.0 * MARGIN)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">trainable parameters (log scale)</text>\n",
        WIDTH / 2.0,
        HEIGHT - 15.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 18 {})\" text-anchor=\"middle\">mean test metric</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{m}\" y=\"{b}\" font-size=\"10\">{lo:.2}</text>\n\
         <text x=\"{r}\" y=\"{b}\" font-size=\"10\" text-anchor=\"end\">{hi:.2}</text>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN + 14.0,
        r = WIDTH - MARGIN,
        lo = x_min,
        hi = x_max
    ));
    svg.push_str(&format!(
        "<text x=\"{x}\" y=\"{t}\" font-size=\"10\" text-anchor=\"end\">{hi:.3}</text>\n\
         <text x=\"{x}\" y=\"{b}\" font-size=\"10\" text-anchor=\"end\">{lo:.3}</text>\n",
        x = MARGIN - 6.0,
        t = MARGIN + 4.0,
        b = HEIGHT - MARGIN,
        lo = y_min,
        hi = y_max
    ));

    // Full fine-tuning reference line.
    if let Some(f) = full.first() {
        let y = y_of(f.test);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"gray\">full</text>\n",
            MARGIN,
            WIDTH - MARGIN,
            WIDTH - MARGIN - 28.0,
            y - 5.0
        ));
    }

    // One polyline + markers per method, ranks in ascending param order.
    let mut methods: Vec<String> = Vec::new();
    for r in &peft {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    for (mi, method) in methods.iter().enumerate() {
        let color = COLORS[mi % COLORS.len()];
        let mut pts: Vec<(f64, f64)> = peft
            .iter()
            .filter(|r| &r.method == method)
            .map(|r| (r.params, r.test))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let path: Vec<String> = pts
            .iter()
            .map(|&(p, v)| format!("{:.1},{:.1}", x_of(p), y_of(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        for &(p, v) in &pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                x_of(p),
                y_of(v)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{method}</text>\n",
            WIDTH - MARGIN + 5.0,
            MARGIN + 16.0 * mi as f64
        ));
    }
    svg.push_str("</svg>\n");
    write_atomic(out, svg.as_bytes())
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_mean_rows_to_svg() {
        let dir = std::env::temp_dir().join(format!("peft-lab-plot-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("r.csv");
        fs::write(
            &csv,
            "# generated_at = 0\n\
             method,r,trainable_params,trainable_pct,seed,dev_metric,test_metric,stop_step\n\
             full,0,1000,100.0,1,0.9,0.9,10\n\
             full,0,1000,100.0,mean,0.9,0.9,10\n\
             full,0,1000,100.0,std,0.0,0.0,0\n\
             lora,1,64,6.4,1,0.5,0.55,10\n\
             lora,1,64,6.4,mean,0.5,0.55,10\n\
             lora,1,64,6.4,std,0.0,0.0,0\n\
             lora,2,128,12.8,mean,0.7,0.72,10\n\
             lora,2,128,12.8,std,0.0,0.0,0\n",
        )
        .unwrap();
        let out = dir.join("r.svg");
        render_csv_to_svg(&csv, &out).unwrap();
        let svg = fs::read_to_string(&out).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains(">lora<"));
        assert!(svg.contains("full"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_csv_is_a_data_error() {
        let dir = std::env::temp_dir().join(format!("peft-lab-plot2-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("empty.csv");
        fs::write(
            &csv,
            "method,r,trainable_params,trainable_pct,seed,dev_metric,test_metric,stop_step\n",
        )
        .unwrap();
        assert!(render_csv_to_svg(&csv, &dir.join("x.svg")).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
