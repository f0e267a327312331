//! `geowind report`: a text summary and four SVG plots for a tested run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use geowind_core::estimators::ray_samples;
use geowind_core::harness::{text_table, tracking_tails, TestReport};
use geowind_core::persist::read_dataset;
use geowind_core::pipeline::{load_reports, Estimates, DATASET_DIR};
use geowind_core::stats::{inverse_sqrt, rows_to_matrix};
use geowind_core::Dataset;
use nalgebra::DVector;
use plotters::prelude::*;

pub const SUMMARY_FILE: &str = "report.txt";
const SIZE: (u32, u32) = (720, 480);
const TRAJECTORIES: usize = 8;

/// Writes the summary and every plot the run has data for; returns the
/// paths written. Plots without data are listed as skipped in the summary.
pub fn write(out: &Path) -> Result<Vec<PathBuf>> {
    let (reports, est) = load_reports(out)?;
    let ds = read_dataset(&out.join(DATASET_DIR))?;
    let mut written = Vec::new();
    let mut notes = Vec::new();
    let plots: [(&str, PlotFn); 4] = [
        ("trajectories.svg", trajectories),
        ("clt_histograms.svg", clt_histograms),
        ("tail_fits.svg", tail_fits),
        ("exit_probability.svg", exit_probability),
    ];
    for (name, plot) in plots {
        let path = out.join(name);
        match plot(&path, &ds, &est, &reports).with_context(|| format!("plotting {name}"))? {
            Some(skip) => notes.push(format!("{name}: skipped ({skip})")),
            None => {
                notes.push(format!("{name}: written"));
                written.push(path);
            }
        }
    }
    let summary = summary_text(&ds, &est, &reports, &notes);
    let path = out.join(SUMMARY_FILE);
    std::fs::write(&path, summary)?;
    written.insert(0, path);
    Ok(written)
}

/// `Ok(Some(reason))` when there is nothing to draw.
type PlotFn = fn(&Path, &Dataset, &Estimates, &[TestReport]) -> Result<Option<String>>;

fn summary_text(ds: &Dataset, est: &Estimates, reports: &[TestReport], notes: &[String]) -> String {
    let mut s = String::new();
    let passed = reports.iter().filter(|r| r.pass).count();
    let _ = writeln!(s, "paths {}  horizon {}  dataset {}", ds.paths.len(), ds.horizon(), est.dataset_digest);
    let _ = writeln!(s, "lambda  {:.5} +- {:.5}", est.lambda, est.lambda_se);
    let _ = writeln!(s, "e_nu    {:?} +- {:?}", est.e_nu, est.e_nu_se);
    let _ = writeln!(s, "A_nu    {:?} ({})", est.a_nu, est.a_nu_source);
    if let Some((lo, hi)) = est.min_eigenvalue_ci {
        let _ = writeln!(s, "lambda_min(A_nu) 99% CI [{lo:.5}, {hi:.5}]");
    }
    let _ = writeln!(s, "\ntests: {passed}/{} passed", reports.len());
    s.push_str(&text_table(reports));
    s.push_str("\nplots:\n");
    for n in notes {
        let _ = writeln!(s, "  {n}");
    }
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn trajectories(path: &Path, ds: &Dataset, _: &Estimates, _: &[TestReport]) -> Result<Option<String>> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let dims = ds.dim.min(2);
    let panels = root.split_evenly((dims, 1));
    let xmax = ds.horizon() as f64;
    for (i, panel) in panels.iter().enumerate() {
        let series: Vec<Vec<(f64, f64)>> = ds
            .paths
            .iter()
            .take(TRAJECTORIES)
            .map(|p| p.checkpoints.iter().map(|c| (c.step as f64, c.winding.0[i] as f64)).collect())
            .collect();
        let yr = bounds(series.iter().flatten().map(|p| p.1));
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("winding coordinate {} along {} paths", i + 1, series.len()), ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..xmax, yr.0..yr.1)?;
        chart.configure_mesh().x_desc("step").draw()?;
        for (j, s) in series.into_iter().enumerate() {
            chart.draw_series(LineSeries::new(s, Palette99::pick(j).stroke_width(1)))?;
        }
    }
    root.present()?;
    Ok(None)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn clt_histograms(path: &Path, ds: &Dataset, est: &Estimates, _: &[TestReport]) -> Result<Option<String>> {
    let Some(t) = ds.config.ray.as_ref().and_then(|r| r.times.iter().copied().reduce(f64::max)) else {
        return Ok(Some("no ray times recorded".into()));
    };
    let w = match inverse_sqrt(&rows_to_matrix(&est.a_nu)) {
        Ok(w) => w,
        Err(e) => return Ok(Some(format!("A_nu not invertible: {e}"))),
    };
    let rows = ray_samples(ds, t, &est.e_nu)?;
    let z: Vec<DVector<f64>> = rows.iter().map(|r| &w * DVector::from_column_slice(r)).collect();
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    const BINS: usize = 32;
    const HALF: f64 = 4.0;
    let width = 2.0 * HALF / BINS as f64;
    for (i, panel) in root.split_evenly((1, ds.dim.min(2))).iter().enumerate() {
        let mut counts = [0usize; BINS];
        for v in &z {
            let b = ((v[i] + HALF) / width).floor();
            if b >= 0.0 && (b as usize) < BINS {
                counts[b as usize] += 1;
            }
        }
        let n = z.len() as f64;
        let density: Vec<f64> = counts.iter().map(|&c| c as f64 / (n * width)).collect();
        let ymax = density.iter().copied().fold(normal_pdf(0.0), f64::max) * 1.1;
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("whitened coordinate {} at t = {t}", i + 1), ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(-HALF..HALF, 0.0..ymax)?;
        chart.configure_mesh().draw()?;
        chart.draw_series(density.iter().enumerate().map(|(b, &d)| {
            let x0 = -HALF + b as f64 * width;
            Rectangle::new([(x0, 0.0), (x0 + width, d)], BLUE.mix(0.35).filled())
        }))?;
        chart.draw_series(LineSeries::new((0..=200).map(|k| -HALF + k as f64 * 0.04).map(|x| (x, normal_pdf(x))), RED.stroke_width(2)))?;
    }
    root.present()?;
    Ok(None)
}

/// Log tails with their fitted lines: large-deviation cells and tracking
/// distances at the stopping times.
fn tail_fits(path: &Path, ds: &Dataset, _: &Estimates, reports: &[TestReport]) -> Result<Option<String>> {
    let pld = reports.iter().find(|r| r.name == "pld").and_then(|r| {
        let cells = r.details["cells"].as_array()?;
        let pts: Vec<(f64, f64)> = cells
            .iter()
            .filter_map(|c| Some((c["t"].as_f64()?, c["p"].as_f64()?)))
            .filter(|c| c.1 > 0.0)
            .map(|(t, p)| (t, p.ln()))
            .collect();
        let fit = (r.details["slope"].as_f64(), r.details["intercept"].as_f64());
        Some((pts, fit))
    });
    let tracking = if ds.config.tracking { tracking_tails(ds).ok() } else { None };
    let pld_points = pld.as_ref().is_some_and(|p| !p.0.is_empty());
    if !pld_points && tracking.is_none() {
        return Ok(Some("no large-deviation cells or tracking distances".into()));
    }
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((1, usize::from(pld_points) + usize::from(tracking.is_some())));
    let mut next = panels.iter();
    if let Some((pts, (slope, intercept))) = pld.filter(|_| pld_points) {
        let panel = next.next().expect("panel");
        let xr = bounds(pts.iter().map(|p| p.0));
        let yr = bounds(pts.iter().map(|p| p.1));
        let mut chart = ChartBuilder::on(panel)
            .caption("large deviations: ln P(|M_t/t - e| > a)", ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)?;
        chart.configure_mesh().x_desc("t").draw()?;
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))?;
        if let (Some(b), Some(a)) = (slope, intercept) {
            chart.draw_series(LineSeries::new([xr.0, xr.1].map(|x| (x, a + b * x)), RED.stroke_width(2)))?;
        }
    }
    if let Some(tails) = tracking {
        let panel = next.next().expect("panel");
        let pts: Vec<Vec<(f64, f64)>> =
            tails.iter().map(|t| t.tail.iter().filter(|e| e.1 > 0.0).map(|&(k, p)| (k as f64, p.ln())).collect()).collect();
        let xr = bounds(pts.iter().flatten().map(|p| p.0));
        let yr = bounds(pts.iter().flatten().map(|p| p.1));
        let mut chart = ChartBuilder::on(panel)
            .caption("tracking distance at tau_s: ln P(d >= k)", ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)?;
        chart.configure_mesh().x_desc("k").draw()?;
        for (i, (t, p)) in tails.iter().zip(&pts).enumerate() {
            let color = Palette99::pick(i);
            chart
                .draw_series(p.iter().map(|&q| Circle::new(q, 3, color.filled())))?
                .label(format!("s = {}", t.threshold))
                .legend(move |(x, y)| Circle::new((x, y), 3, Palette99::pick(i).filled()));
            chart.draw_series(LineSeries::new([0.0, xr.1].map(|k| (k, -t.rate * k)), color.stroke_width(1)))?;
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    }
    root.present()?;
    Ok(None)
}

fn exit_probability(path: &Path, _: &Dataset, _: &Estimates, reports: &[TestReport]) -> Result<Option<String>> {
    struct Series {
        name: String,
        target: f64,
        rows: Vec<(f64, f64, f64)>,
    }
    let series: Vec<Series> = reports
        .iter()
        .filter(|r| r.name.starts_with("gambler_ruin"))
        .filter_map(|r| {
            let rows = r.details["rows"]
                .as_array()?
                .iter()
                .filter_map(|x| Some((x["s"].as_f64()?, x["upper_frequency"].as_f64()?, x["se"].as_f64()?)))
                .filter(|x| x.1.is_finite())
                .collect();
            Some(Series { name: r.name.clone(), target: r.details["target"].as_f64()?, rows })
        })
        .collect();
    if series.iter().all(|s| s.rows.is_empty()) {
        return Ok(Some("no exit reports".into()));
    }
    let xr = bounds(series.iter().flat_map(|s| s.rows.iter().map(|r| r.0)).chain([0.0]));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("upper-exit frequency vs s", ("sans-serif", 16))
        .margin(8)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(xr.0..xr.1, 0.0..1.0)?;
    chart.configure_mesh().x_desc("s").y_desc("P(upper exit)").draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i);
        chart
            .draw_series(LineSeries::new([(xr.0, s.target), (xr.1, s.target)], color.stroke_width(1)))?
            .label(format!("{} (target {:.3})", s.name, s.target))
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], Palette99::pick(i)));
        chart.draw_series(s.rows.iter().map(|&(x, f, _)| Circle::new((x, f), 4, color.filled())))?;
        for &(x, f, se) in &s.rows {
            chart.draw_series(LineSeries::new([(x, f - 2.0 * se), (x, f + 2.0 * se)], color.stroke_width(2)))?;
        }
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(None)
}
