//! Report emitters: CSV tables, SVG line plots and PNG feature-map grids.
//! Every CSV emitter has a parser that reads its output back.

use std::fmt::Write as _;
use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::bench::{FeatureDiffReport, RatioStats, SweepCurve, SweepPoint, TransferReport};
use crate::tensor::Tensor;
use crate::xform::TransformSpec;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed report: {0}")]
    Parse(String),
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

const TRANSFER_FIXED: [&str; 5] = ["white_box", "attack", "transform", "dataset", "images"];

/// One transfer cell as printed: `transformed(baseline)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub black_box: String,
    pub transformed: f64,
    pub baseline: f64,
}

/// One row of a transfer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTableRow {
    pub white_box: String,
    pub attack: String,
    pub transform: TransformSpec,
    pub dataset: String,
    pub images: usize,
    pub cells: Vec<TransferCell>,
}

impl TransferTableRow {
    pub fn from_report(r: &TransferReport) -> Self {
        Self {
            white_box: r.white_box_id(),
            attack: r.attack.clone(),
            transform: r.transform,
            dataset: r.dataset.clone(),
            images: r.images(),
            cells: r
                .rows
                .iter()
                .map(|row| TransferCell {
                    black_box: row.black_box.clone(),
                    transformed: row.transformed_rate,
                    baseline: row.baseline_rate,
                })
                .collect(),
        }
    }
}

/// Writer that leaves the header to an explicit first record, so empty
/// tables still get one.
fn headerless() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, ReportError> {
    let bytes = w.into_inner().map_err(|e| ReportError::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Parse(e.to_string()))
}

/// Rows are (white box, attack, transform); columns are black boxes, in
/// order of first appearance. Cells a row does not cover stay empty.
pub fn transfer_csv(reports: &[TransferReport]) -> Result<String, ReportError> {
    let mut columns: Vec<&str> = Vec::new();
    for r in reports {
        for row in &r.rows {
            if !columns.contains(&row.black_box.as_str()) {
                columns.push(&row.black_box);
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRANSFER_FIXED.iter().copied().chain(columns.iter().copied()))?;
    for r in reports {
        let mut rec = vec![
            r.white_box_id(),
            r.attack.clone(),
            r.transform.to_string(),
            r.dataset.clone(),
            r.images().to_string(),
        ];
        for col in &columns {
            rec.push(
                r.row(col)
                    .map(|row| format!("{}({})", row.transformed_rate, row.baseline_rate))
                    .unwrap_or_default(),
            );
        }
        w.write_record(&rec)?;
    }
    finish(w)
}

fn parse_cell(s: &str) -> Option<(f64, f64)> {
    let (t, rest) = s.split_once('(')?;
    let b = rest.strip_suffix(')')?;
    Some((t.parse().ok()?, b.parse().ok()?))
}

pub fn parse_transfer_csv(text: &str) -> Result<Vec<TransferTableRow>, ReportError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.len() < TRANSFER_FIXED.len() || header[..TRANSFER_FIXED.len()] != TRANSFER_FIXED {
        return Err(ReportError::Parse(format!("unexpected transfer header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let bad = |what: &str| ReportError::Parse(format!("bad {what} in row {:?}", rec.position().map(|p| p.line())));
        let mut cells = Vec::new();
        for (col, v) in header.iter().zip(rec.iter()).skip(TRANSFER_FIXED.len()) {
            if v.is_empty() {
                continue;
            }
            let (transformed, baseline) = parse_cell(v).ok_or_else(|| bad("cell"))?;
            cells.push(TransferCell {
                black_box: col.clone(),
                transformed,
                baseline,
            });
        }
        out.push(TransferTableRow {
            white_box: rec[0].to_string(),
            attack: rec[1].to_string(),
            transform: rec[2].parse().map_err(|_| bad("transform"))?,
            dataset: rec[3].to_string(),
            images: rec[4].parse().map_err(|_| bad("image count"))?,
            cells,
        });
    }
    Ok(out)
}

/// One saved prediction, enough to recount every rate by hand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub white_box: String,
    pub attack: String,
    pub transform: String,
    pub black_box: String,
    pub image: usize,
    pub label: usize,
    pub baseline_pred: usize,
    pub transformed_pred: usize,
}

pub fn predictions_csv(reports: &[TransferReport]) -> Result<String, ReportError> {
    let mut w = headerless();
    w.write_record([
        "white_box",
        "attack",
        "transform",
        "black_box",
        "image",
        "label",
        "baseline_pred",
        "transformed_pred",
    ])?;
    for r in reports {
        for row in &r.rows {
            for (i, &label) in r.labels.iter().enumerate() {
                w.serialize(PredictionRecord {
                    white_box: r.white_box_id(),
                    attack: r.attack.clone(),
                    transform: r.transform.to_string(),
                    black_box: row.black_box.clone(),
                    image: i,
                    label,
                    baseline_pred: row.baseline_predictions[i],
                    transformed_pred: row.transformed_predictions[i],
                })?;
            }
        }
    }
    finish(w)
}

pub fn parse_predictions_csv(text: &str) -> Result<Vec<PredictionRecord>, ReportError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepRow {
    angle_deg: f64,
    success_rate: f64,
    argmax: u8,
}

pub fn sweep_csv(curve: &SweepCurve) -> Result<String, ReportError> {
    let mut w = headerless();
    w.write_record(["angle_deg", "success_rate", "argmax"])?;
    for (i, p) in curve.points.iter().enumerate() {
        w.serialize(SweepRow {
            angle_deg: p.angle_deg,
            success_rate: p.success_rate,
            argmax: u8::from(i == curve.argmax),
        })?;
    }
    finish(w)
}

pub fn parse_sweep_csv(black_box: &str, text: &str) -> Result<SweepCurve, ReportError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<SweepRow> = rd.deserialize().collect::<Result<_, _>>()?;
    let marks: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.argmax == 1).map(|(i, _)| i).collect();
    let [argmax] = marks[..] else {
        return Err(ReportError::Parse(format!("expected one argmax row, found {}", marks.len())));
    };
    Ok(SweepCurve {
        black_box: black_box.to_string(),
        points: rows
            .iter()
            .map(|r| SweepPoint {
                angle_deg: r.angle_deg,
                success_rate: r.success_rate,
            })
            .collect(),
        argmax,
    })
}

pub fn ratio_csv(rows: &[(String, Option<RatioStats>)]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["table", "mean_ratio", "max_ratio", "cells", "zero_baseline_cells"])?;
    for (name, s) in rows {
        match s {
            Some(s) => w.write_record([
                name.clone(),
                s.mean.to_string(),
                s.max.to_string(),
                s.cells.to_string(),
                s.skipped.to_string(),
            ])?,
            None => w.write_record([name.as_str(), "", "", "0", ""])?,
        }
    }
    finish(w)
}

pub fn featdiff_csv(r: &FeatureDiffReport) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "channel", "mean_abs_diff"])?;
    for (rank, &c) in r.indices.iter().enumerate() {
        w.write_record([rank.to_string(), c.to_string(), r.channel_diffs[c].to_string()])?;
    }
    finish(w)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line plot of success rate against rotation angle, one polyline per
/// curve with a dot on each curve's maximum.
pub fn sweep_svg(title: &str, curves: &[SweepCurve]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 140.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |a: f64| left + a / 360.0 * pw;
    let py = |r: f64| top + (1.0 - r / 100.0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for a in (0..=360).step_by(60) {
        let x = px(a as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/>"##,
            top + ph,
            top + ph + 4.0
        );
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{a}</text>"#, top + ph + 18.0);
    }
    for r in (0..=100).step_by(20) {
        let y = py(r as f64);
        let _ = writeln!(s, r##"<line x1="{:.2}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="#333"/>"##, left - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{r}</text>"#, left - 8.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">rotation angle (deg)</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">success rate (%)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if c.points.len() > 1 {
            let pts: Vec<String> = c
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", px(p.angle_deg), py(p.success_rate)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        if let Some(p) = c.points.get(c.argmax) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#,
                px(p.angle_deg),
                py(p.success_rate)
            );
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&c.black_box));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const GAP: u32 = 2;

fn gray(v: f32) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

fn blit_image(img: &mut RgbImage, x: &Tensor, ox: u32, oy: u32) {
    let s = x.shape();
    for i in 0..s.h {
        for j in 0..s.w {
            let px: [u8; 3] = std::array::from_fn(|k| {
                let c = if s.c >= 3 { k } else { 0 };
                (x.at(0, i, j, c).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(ox + j as u32, oy + i as u32, Rgb(px));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn blit_map(img: &mut RgbImage, map: &[f32], h: usize, w: usize, scale: u32, lo: f32, hi: f32, ox: u32, oy: u32) {
    let span = if hi > lo { hi - lo } else { 1.0 };
    for i in 0..h {
        for j in 0..w {
            let p = gray((map[i * w + j] - lo) / span);
            for a in 0..scale {
                for b in 0..scale {
                    img.put_pixel(ox + j as u32 * scale + b, oy + i as u32 * scale + a, p);
                }
            }
        }
    }
}

fn min_max<'a>(vals: impl Iterator<Item = &'a f32>) -> (f32, f32) {
    vals.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Four rows: the input pair and their absolute difference, then the
/// selected channels' maps for the non-fooling input, the fooling input,
/// and their absolute difference.
pub fn featdiff_grid(r: &FeatureDiffReport) -> RgbImage {
    let s = r.input_fail.shape();
    let scale = (s.h / r.map_h.max(1)).max(1) as u32;
    let tile_w = (s.w as u32).max(r.map_w as u32 * scale);
    let tile_h = (s.h as u32).max(r.map_h as u32 * scale);
    let cols = r.k.max(3) as u32;
    let width = cols * (tile_w + GAP) + GAP;
    let height = 4 * (tile_h + GAP) + GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let at = |col: u32, row: u32| (GAP + col * (tile_w + GAP), GAP + row * (tile_h + GAP));

    blit_image(&mut img, &r.input_fail, at(0, 0).0, at(0, 0).1);
    blit_image(&mut img, &r.input_success, at(1, 0).0, at(1, 0).1);
    let input_diff: Vec<f32> = r
        .input_fail
        .data()
        .iter()
        .zip(r.input_success.data())
        .map(|(a, b)| (a - b).abs())
        .collect::<Vec<_>>()
        .chunks_exact(s.c)
        .map(|px| px.iter().sum::<f32>() / s.c as f32)
        .collect();
    let (_, dmax) = min_max(input_diff.iter());
    blit_map(&mut img, &input_diff, s.h, s.w, 1, 0.0, dmax, at(2, 0).0, at(2, 0).1);

    for (col, ((f, g), d)) in r.maps_fail.iter().zip(&r.maps_success).zip(&r.maps_diff).enumerate() {
        let col = col as u32;
        let (lo, hi) = min_max(f.iter().chain(g.iter()));
        let (_, dhi) = min_max(d.iter());
        blit_map(&mut img, f, r.map_h, r.map_w, scale, lo, hi, at(col, 1).0, at(col, 1).1);
        blit_map(&mut img, g, r.map_h, r.map_w, scale, lo, hi, at(col, 2).0, at(col, 2).1);
        blit_map(&mut img, d, r.map_h, r.map_w, scale, 0.0, dhi, at(col, 3).0, at(col, 3).1);
    }
    img
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>, ReportError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::TransferRow;

    fn report(rows: &[(&str, f64, f64)]) -> TransferReport {
        TransferReport {
            white_box: vec!["plain".into()],
            attack: "mifgsm".into(),
            transform: TransformSpec::Transpose,
            dataset: "synthetic".into(),
            seed: 1,
            labels: vec![0, 1, 2],
            rows: rows
                .iter()
                .map(|&(b, base, t)| TransferRow {
                    black_box: b.into(),
                    baseline_rate: base,
                    transformed_rate: t,
                    baseline_predictions: vec![0, 1, 0],
                    transformed_predictions: vec![1, 1, 0],
                })
                .collect(),
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let csv = transfer_csv(&[]).unwrap();
        assert_eq!(csv, "white_box,attack,transform,dataset,images\n");
        assert!(parse_transfer_csv(&csv).unwrap().is_empty());
    }

    #[test]
    fn transfer_cells_round_trip() {
        let a = report(&[("wide", 100.0 / 3.0, 200.0 / 3.0), ("vgg", 0.0, 12.5)]);
        let mut b = report(&[("resnet", 1e-3, 99.99)]);
        b.transform = TransformSpec::Rotate(359.0);
        let text = transfer_csv(&[a.clone(), b.clone()]).unwrap();
        let back = parse_transfer_csv(&text).unwrap();
        assert_eq!(back, vec![TransferTableRow::from_report(&a), TransferTableRow::from_report(&b)]);
    }

    #[test]
    fn predictions_round_trip() {
        let r = report(&[("wide", 0.0, 0.0)]);
        let recs = parse_predictions_csv(&predictions_csv(&[r]).unwrap()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].image, 2);
        assert_eq!(recs[0].transformed_pred, 1);
    }

    fn curve(points: &[(f64, f64)], argmax: usize) -> SweepCurve {
        SweepCurve {
            black_box: "wide".into(),
            points: points
                .iter()
                .map(|&(a, r)| SweepPoint {
                    angle_deg: a,
                    success_rate: r,
                })
                .collect(),
            argmax,
        }
    }

    #[test]
    fn sweep_round_trip() {
        let c = curve(&[(0.0, 10.0), (90.0, 55.5), (180.0, 20.0), (270.0, 55.5)], 1);
        assert_eq!(parse_sweep_csv("wide", &sweep_csv(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn one_point_svg_has_marker_and_no_polyline() {
        let svg = sweep_svg("t", &[curve(&[(0.0, 42.0)], 0)]);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(!svg.contains("<polyline"));
        assert!(svg.contains("rotation angle (deg)") && svg.contains("success rate (%)"));
        let svg = sweep_svg("t", &[curve(&[(0.0, 1.0), (180.0, 2.0)], 1), curve(&[(0.0, 3.0), (180.0, 0.0)], 0)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
