//! Static SVG figures from the JSON the other subcommands emit.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use plotters::prelude::*;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    /// Brightness histograms before/after degradation (`degrade` output).
    Histogram,
    /// Loss curves from a training log (JSON lines).
    Curve,
    /// Accuracy against diffusion steps (`sweep-T` output).
    Sweep,
    /// Accuracy and mean confidence per subset (`eval` output).
    Confidence,
    /// Accuracy per ablation variant (`ablate` output).
    Ablation,
}

/// Picks the figure type from the document's shape.
pub fn detect(text: &str) -> Result<PlotKind> {
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        if v.get("before").is_some() && v.get("after").is_some() {
            return Ok(PlotKind::Histogram);
        }
        if v.get("trained_t").is_some() {
            return Ok(PlotKind::Sweep);
        }
        if v.get("confusion").is_some() {
            return Ok(PlotKind::Confidence);
        }
        if v.get("reference_note").is_some() {
            return Ok(PlotKind::Ablation);
        }
    }
    let first = text.lines().next().unwrap_or_default();
    if serde_json::from_str::<Value>(first).ok().and_then(|v| v.get("step").cloned()).is_some() {
        return Ok(PlotKind::Curve);
    }
    bail!("cannot tell which figure to draw from the input; pass --kind")
}

pub fn render(input: &Path, kind: Option<PlotKind>, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let kind = match kind {
        Some(k) => k,
        None => detect(&text)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    match kind {
        PlotKind::Histogram => histogram(&serde_json::from_str(&text)?, out),
        PlotKind::Curve => curve(&text, out),
        PlotKind::Sweep => sweep(&serde_json::from_str(&text)?, out),
        PlotKind::Confidence => confidence(&serde_json::from_str(&text)?, out),
        PlotKind::Ablation => ablation(&serde_json::from_str(&text)?, out),
    }
}

fn err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("drawing failed: {e:?}")
}

fn floats(v: &Value, key: &str) -> Result<Vec<f64>> {
    v.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| anyhow!("missing array `{key}`"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| anyhow!("`{key}` holds a non-number")))
        .collect()
}

fn normalized(bins: &[f64]) -> Vec<f64> {
    let total: f64 = bins.iter().sum();
    bins.iter().map(|b| if total > 0.0 { b / total } else { 0.0 }).collect()
}

fn histogram(v: &Value, out: &Path) -> Result<()> {
    let before = normalized(&floats(&v["before"], "bins")?);
    let after = normalized(&floats(&v["after"], "bins")?);
    let top = before.iter().chain(&after).cloned().fold(0.0, f64::max).max(1e-9) * 1.05;
    let root = SVGBackend::new(out, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Pixel intensity distribution", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..1.0, 0.0..top)
        .map_err(err)?;
    chart.configure_mesh().x_desc("intensity").y_desc("fraction of values").draw().map_err(err)?;
    let n = before.len() as f64;
    for (bins, color, label) in [(&before, BLUE, "clear"), (&after, RED, "low-light")] {
        chart
            .draw_series(LineSeries::new(
                bins.iter().enumerate().map(|(i, b)| ((i as f64 + 0.5) / n, *b)),
                color.stroke_width(2),
            ))
            .map_err(err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(err)?;
    root.present().map_err(err)
}

fn curve(text: &str, out: &Path) -> Result<()> {
    let recs: Vec<Value> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    if recs.is_empty() {
        bail!("training log is empty");
    }
    let mut series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    for key in ["loss", "ce", "align", "kl"] {
        let pts: Vec<(f64, f64)> =
            recs.iter().filter_map(|r| Some((r.get("step")?.as_f64()?, r.get(key)?.as_f64()?))).collect();
        if !pts.is_empty() {
            series.push((key, pts));
        }
    }
    let max_x = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).fold(1.0, f64::max);
    let max_y = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).fold(1e-9, f64::max) * 1.05;
    let root = SVGBackend::new(out, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training losses", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..max_x, 0.0..max_y)
        .map_err(err)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(err)?;
    for (i, (name, pts)) in series.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(err)?;
    root.present().map_err(err)
}

fn sweep(v: &Value, out: &Path) -> Result<()> {
    let rows = v["rows"].as_array().ok_or_else(|| anyhow!("missing `rows`"))?;
    let pts: Vec<(f64, f64)> =
        rows.iter().filter_map(|r| Some((r.get("t_steps")?.as_f64()?, r.get("accuracy")?.as_f64()?))).collect();
    if pts.is_empty() {
        bail!("sweep has no rows");
    }
    let max_t = pts.iter().map(|p| p.0).fold(1.0, f64::max) + 1.0;
    let root = SVGBackend::new(out, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Accuracy by diffusion steps", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..max_t, 0.0..1.0)
        .map_err(err)?;
    chart.configure_mesh().x_desc("T").y_desc("accuracy").draw().map_err(err)?;
    chart.draw_series(LineSeries::new(pts.clone(), BLUE.stroke_width(2))).map_err(err)?;
    chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 4, BLUE.filled()))).map_err(err)?;
    root.present().map_err(err)
}

fn bars(title: &str, labels: &[String], groups: &[(&str, Vec<f64>)], out: &Path) -> Result<()> {
    let n = labels.len();
    let root = SVGBackend::new(out, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..n as f64, 0.0..1.0)
        .map_err(err)?;
    let names = labels.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n + 1)
        .x_label_formatter(&move |x| {
            let i = (*x - 0.5).round();
            if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < names.len() {
                names[i as usize].clone()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(err)?;
    let width = 0.8 / groups.len() as f64;
    for (g, (name, values)) in groups.iter().enumerate() {
        let color = Palette99::pick(g).to_rgba();
        chart
            .draw_series(values.iter().enumerate().map(|(i, v)| {
                let x0 = i as f64 + 0.1 + g as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, v.clamp(0.0, 1.0))], color.filled())
            }))
            .map_err(err)?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(err)?;
    root.present().map_err(err)
}

fn confidence(v: &Value, out: &Path) -> Result<()> {
    let mut labels = Vec::new();
    let (mut acc, mut conf) = (Vec::new(), Vec::new());
    for key in ["low_light", "clear"] {
        if let Some(s) = v.get(key).filter(|s| !s.is_null()) {
            labels.push(key.replace('_', "-"));
            acc.push(s["accuracy"].as_f64().unwrap_or(0.0));
            conf.push(s["mean_confidence_correct"].as_f64().unwrap_or(0.0));
        }
    }
    if labels.is_empty() {
        bail!("evaluation report has no subsets");
    }
    bars("Accuracy and confidence", &labels, &[("accuracy", acc), ("confidence (correct)", conf)], out)
}

fn ablation(v: &Value, out: &Path) -> Result<()> {
    let rows = v["rows"].as_array().ok_or_else(|| anyhow!("missing `rows`"))?;
    let labels: Vec<String> = rows.iter().map(|r| r["variant"].as_str().unwrap_or("?").to_string()).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r["accuracy"].as_f64().unwrap_or(0.0)).collect();
    let reference: Vec<f64> = rows.iter().map(|r| r["reference_accuracy"].as_f64().unwrap_or(0.0) / 100.0).collect();
    bars("Ablation variants", &labels, &[("desk run", acc), ("published (reference)", reference)], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_each_document_type() {
        assert_eq!(detect(r#"{"before":{"bins":[1]},"after":{"bins":[1]}}"#).unwrap(), PlotKind::Histogram);
        assert_eq!(detect(r#"{"trained_t":4,"rows":[]}"#).unwrap(), PlotKind::Sweep);
        assert_eq!(detect(r#"{"confusion":[[1]]}"#).unwrap(), PlotKind::Confidence);
        assert_eq!(detect(r#"{"rows":[],"reference_note":""}"#).unwrap(), PlotKind::Ablation);
        assert_eq!(detect("{\"step\":0,\"loss\":1.0}\n{\"step\":1,\"loss\":0.5}\n").unwrap(), PlotKind::Curve);
        assert!(detect("{}").is_err());
    }

    #[test]
    fn renders_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("h.json", r#"{"before":{"bins":[0,2,4,1]},"after":{"bins":[5,1,0,0]}}"#),
            ("s.json", r#"{"trained_t":4,"rows":[{"t_steps":1,"accuracy":0.5},{"t_steps":4,"accuracy":0.75}]}"#),
            (
                "c.json",
                r#"{"confusion":[[1]],"low_light":{"accuracy":0.8,"mean_confidence_correct":0.6},"clear":null}"#,
            ),
            ("a.json", r#"{"reference_note":"","rows":[{"variant":"V1","accuracy":0.5,"reference_accuracy":89.46}]}"#),
            ("l.jsonl", "{\"step\":0,\"loss\":2.0,\"ce\":1.0}\n{\"step\":1,\"loss\":1.0,\"ce\":0.5}\n"),
        ];
        for (name, body) in cases {
            let input = dir.path().join(name);
            std::fs::write(&input, body).unwrap();
            let out = dir.path().join(format!("{name}.svg"));
            render(&input, None, &out).unwrap();
            assert!(std::fs::read_to_string(&out).unwrap().starts_with("<svg"));
        }
    }
}
