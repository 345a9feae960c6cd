//! Report writers: JSON/CSV files and SVG figures.

use std::fs;
use std::path::Path;

use plotters::prelude::*;
use serde::Serialize;

use crate::augment::InrHistogram;
use crate::error::{Error, Result};
use crate::synth::Spectrogram;
use crate::trace::LossTrace;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// `labels` are row/column names; rows are true classes.
pub fn confusion_csv(confusion: &[Vec<u64>], labels: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\pred".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in confusion.iter().enumerate() {
        let mut rec = vec![labels.get(i).cloned().unwrap_or_else(|| i.to_string())];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(plot_err)
}

/// Heatmap of row-normalized counts with the raw count printed in each cell.
pub fn confusion_svg(path: &Path, confusion: &[Vec<u64>], labels: &[String], title: &str) -> Result<()> {
    let n = confusion.len();
    if n == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let cell = 48u32;
    let margin = 110u32;
    let size = (margin + cell * n as u32 + 20, margin + cell * n as u32 + 20);
    let root = SVGBackend::new(path, size).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(60)
        .y_label_area_size(80)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(plot_err)?;
    let name = |i: &usize| labels.get(*i).cloned().unwrap_or_default();
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(n)
        .y_labels(n)
        .x_desc("predicted")
        .y_desc("true")
        .x_label_formatter(&name)
        .y_label_formatter(&|i| name(&(n - 1 - i.min(&(n - 1)))))
        .draw()
        .map_err(plot_err)?;
    for (t, row) in confusion.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (p, &c) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            let shade = (255.0 * (1.0 - frac)) as u8;
            let y = n - 1 - t;
            chart
                .draw_series(std::iter::once(Rectangle::new([(p, y), (p + 1, y + 1)], RGBColor(shade, shade, 255).filled())))
                .map_err(plot_err)?;
            let color = if frac > 0.5 { WHITE } else { BLACK };
            chart
                .draw_series(std::iter::once(Text::new(c.to_string(), (p, y + 1), ("sans-serif", 12).into_font().color(&color))))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One bar per label.
pub fn bar_chart_svg(path: &Path, labels: &[String], values: &[f64], title: &str, y_desc: &str) -> Result<()> {
    if labels.is_empty() || labels.len() != values.len() {
        return Err(Error::dims("bar chart", labels.len(), values.len()));
    }
    let n = labels.len();
    let top = values.iter().cloned().filter(|v| v.is_finite()).fold(0.0f64, f64::max) * 1.1;
    let top = if top > 0.0 { top } else { 1.0 };
    let root = SVGBackend::new(path, (120 + 60 * n as u32, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(50)
        .y_label_area_size(60)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..top)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc(y_desc)
        .x_labels(n)
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(
            Histogram::vertical(&chart)
                .style(BLUE.mix(0.6).filled())
                .margin(6)
                .data(values.iter().enumerate().map(|(i, v)| (i, if v.is_finite() { *v } else { 0.0 }))),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Pixel histogram with the threshold and both population means marked.
pub fn inr_histogram_svg(path: &Path, h: &InrHistogram, title: &str) -> Result<()> {
    let lo = h.bin_edges[0];
    let hi = *h.bin_edges.last().unwrap();
    let top = h.counts.iter().copied().max().unwrap_or(1).max(1) as f64 * 1.05;
    let root = SVGBackend::new(path, (560, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(lo..hi, 0.0..top)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("pixel value").y_desc("count").draw().map_err(plot_err)?;
    chart
        .draw_series(h.counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, &c)| {
            Rectangle::new([(h.bin_edges[i], 0.0), (h.bin_edges[i + 1], c as f64)], BLUE.mix(0.5).filled())
        }))
        .map_err(plot_err)?;
    let vline = |x: f64| vec![(x, 0.0), (x, top)];
    chart.draw_series(LineSeries::new(vline(h.noise_mean), &GREEN)).map_err(plot_err)?.label("noise mean");
    chart.draw_series(LineSeries::new(vline(h.interference_mean), &RED)).map_err(plot_err)?.label("interference mean");
    chart.draw_series(LineSeries::new(vline(h.threshold), BLACK.mix(0.4))).map_err(plot_err)?.label("threshold");
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Row of grayscale spectrogram tiles, one caption per tile.
pub fn spectrogram_strip_svg(path: &Path, images: &[Spectrogram], captions: &[String]) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(Error::Empty("spectrogram strip"));
    };
    let (h, w) = (first.height, first.width);
    if images.iter().any(|s| s.height != h || s.width != w) {
        return Err(Error::dims("spectrogram strip", (h, w), "mixed sizes"));
    }
    let px = (128 / h.max(w)).max(1) as u32;
    let (tw, th) = (w as u32 * px, h as u32 * px);
    let gap = 8u32;
    let n = images.len() as u32;
    let root = SVGBackend::new(path, (gap + n * (tw + gap), th + 2 * gap + 20)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (k, s) in images.iter().enumerate() {
        let x0 = (gap + k as u32 * (tw + gap)) as i32;
        let y0 = (gap + 20) as i32;
        if let Some(c) = captions.get(k) {
            root.draw(&Text::new(c.clone(), (x0, gap as i32), ("sans-serif", 12))).map_err(plot_err)?;
        }
        for r in 0..h {
            for c in 0..w {
                let v = (s.get(r, c).clamp(0.0, 1.0) * 255.0) as u8;
                let (x, y) = (x0 + (c as u32 * px) as i32, y0 + (r as u32 * px) as i32);
                root.draw(&Rectangle::new([(x, y), (x + px as i32, y + px as i32)], RGBColor(v, v, v).filled()))
                    .map_err(plot_err)?;
            }
        }
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One line per trace column against epoch.
pub fn loss_curves_svg(path: &Path, trace: &LossTrace, columns: &[&str], title: &str) -> Result<()> {
    let series: Vec<(String, Vec<f64>)> = columns
        .iter()
        .map(|c| trace.column(c).map(|v| (c.to_string(), v)).ok_or_else(|| Error::config(format!("no trace column `{c}`"))))
        .collect::<Result<_>>()?;
    let finite = series.iter().flat_map(|(_, v)| v.iter()).copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if hi > lo { (lo, hi) } else if lo.is_finite() { (lo - 1.0, lo + 1.0) } else { (0.0, 1.0) };
    let epochs = trace.len().max(2);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(1.0..epochs as f64, lo..hi)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(plot_err)?;
    for (k, (name, v)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let pts = v.iter().enumerate().filter(|(_, y)| y.is_finite()).map(|(i, &y)| ((i + 1) as f64, y));
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::inr_histogram;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn confusion_csv_layout() {
        let csv = confusion_csv(&[vec![3, 1], vec![0, 4]], &names(2)).unwrap();
        assert_eq!(csv, "true\\pred,c0,c1\nc0,3,1\nc1,0,4\n");
    }

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        confusion_svg(&p.join("cm.svg"), &[vec![3, 1], vec![0, 4]], &names(2), "cm").unwrap();
        bar_chart_svg(&p.join("bar.svg"), &names(3), &[1.0, 2.0, 0.5], "bars", "acc").unwrap();
        let img = Spectrogram::new(8, 8, (0..64).map(|i| if i % 8 < 2 { 0.9 } else { 0.1 }).collect()).unwrap();
        inr_histogram_svg(&p.join("inr.svg"), &inr_histogram(&img), "inr").unwrap();
        spectrogram_strip_svg(&p.join("strip.svg"), &[img.clone(), img], &names(2)).unwrap();
        let mut t = LossTrace::new(&["a", "b"]);
        t.push(vec![2.0, 1.0]);
        t.push(vec![1.0, f64::NAN]);
        loss_curves_svg(&p.join("loss.svg"), &t, &["a", "b"], "loss").unwrap();
        for f in ["cm", "bar", "inr", "strip", "loss"] {
            let s = fs::read_to_string(p.join(format!("{f}.svg"))).unwrap();
            assert!(s.starts_with("<svg"), "{f}");
        }
        assert!(bar_chart_svg(&p.join("x.svg"), &names(2), &[1.0], "", "").is_err());
        assert!(loss_curves_svg(&p.join("x.svg"), &t, &["nope"], "").is_err());
    }
}
