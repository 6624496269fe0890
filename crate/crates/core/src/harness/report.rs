//! Tables and figures from stored records.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use archleak_grad::Tensor;
use image::{imageops, Rgb, RgbImage};

use super::config::Preset;
use super::store::{key_for, ResultRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Table,
    RocPlot,
    LadderPlot,
    SweepPlot,
    SnapshotGrid,
}

impl FromStr for ReportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "table" => ReportKind::Table,
            "rocplot" | "roc" => ReportKind::RocPlot,
            "ladderplot" | "ladder" => ReportKind::LadderPlot,
            "sweepplot" | "sweep" => ReportKind::SweepPlot,
            "snapshotgrid" | "snapshots" => ReportKind::SnapshotGrid,
            _ => return Err(Error::config(format!("unknown report kind {s:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub out_dir: PathBuf,
    /// Log-log ROC axes focused on small false-positive rates.
    pub low_fpr: bool,
    /// Metric of ladder plots; `mse` by default.
    pub metric: Option<String>,
}

/// Iterations shown by snapshot grids, when recorded.
pub const GRID_ITERATIONS: [usize; 5] = [1, 50, 100, 1000, 3000];
const CELL_SCALE: u32 = 4;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// Write an NCHW batch in `[0, 1]` as one PNG, examples side by side.
pub fn save_png(path: &Path, x: &Tensor) -> Result<()> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = x.data();
    let img = RgbImage::from_fn((b * w) as u32, h as u32, |px, py| {
        let (n, xx, yy) = (px as usize / w, px as usize % w, py as usize);
        let at = |ch: usize| {
            let v = d[((n * c + ch.min(c - 1)) * h + yy) * w + xx];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Render `records` (which must share a preset) into files under
/// `opts.out_dir/reports`, named by their config hash.
pub fn report(records: &[(PathBuf, ResultRecord)], kind: ReportKind, opts: &ReportOptions) -> Result<Vec<PathBuf>> {
    let first = records.first().ok_or_else(|| Error::domain("report needs at least one record"))?;
    let presets: BTreeSet<Preset> = records.iter().map(|(_, r)| r.preset).collect();
    if presets.len() > 1 {
        let names: Vec<&str> = presets.iter().map(|p| p.as_str()).collect();
        return Err(Error::domain(format!("records mix presets: {}", names.join(", "))));
    }
    let ok: Vec<&(PathBuf, ResultRecord)> = records.iter().filter(|(_, r)| r.ok()).collect();
    if ok.is_empty() {
        return Err(Error::domain("every record is a failure record"));
    }
    let preset = first.1.preset;
    let hashes: BTreeSet<&str> = ok.iter().map(|(_, r)| r.config_hash.as_str()).collect();
    let dir = opts.out_dir.join("reports");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let base = dir.join(key_for(&hashes));
    let with = |suffix: &str| PathBuf::from(format!("{}-{suffix}", base.display()));
    let recs: Vec<&ResultRecord> = ok.iter().map(|(_, r)| r).collect();
    match kind {
        ReportKind::Table => {
            let (csv_text, txt) = table(preset, &recs)?;
            let (a, b) = (with("table.csv"), with("table.txt"));
            fs::write(&a, csv_text).map_err(|e| Error::io(&a, e))?;
            fs::write(&b, txt).map_err(|e| Error::io(&b, e))?;
            Ok(vec![a, b])
        }
        ReportKind::LadderPlot => {
            let metric = opts.metric.clone().unwrap_or_else(|| "mse".into());
            let p = with(&format!("ladder-{metric}.svg"));
            write(&p, &ladder_plot(&recs, &metric)?)?;
            Ok(vec![p])
        }
        ReportKind::SweepPlot => {
            let p = with("sweep.svg");
            write(&p, &sweep_plot(&recs)?)?;
            Ok(vec![p])
        }
        ReportKind::RocPlot => {
            let p = with(if opts.low_fpr { "roc-loglog.svg" } else { "roc.svg" });
            write(&p, &roc_plot(&ok, opts.low_fpr)?)?;
            Ok(vec![p])
        }
        ReportKind::SnapshotGrid => {
            let p = with("snapshots.png");
            snapshot_grid(&ok)?.save(&p)?;
            Ok(vec![p])
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn key_column(preset: Preset) -> &'static str {
    match preset {
        Preset::GiaLadder => "step",
        Preset::GiaSegmentViT => "selection",
        _ => "variant",
    }
}

/// Variants in a stable order: numerically when every name is a number,
/// otherwise by first appearance.
fn variant_order(recs: &[&ResultRecord]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for r in recs {
        if !seen.contains(&r.variant) {
            seen.push(r.variant.clone());
        }
    }
    if seen.iter().all(|v| v.parse::<f64>().is_ok()) {
        seen.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    seen
}

fn fmt_value(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

fn table(preset: Preset, recs: &[&ResultRecord]) -> Result<(String, String)> {
    let has_recon = recs.iter().all(|r| r.metrics.contains_key("mse"));
    let metrics: Vec<String> = if has_recon {
        vec!["mse".into(), "psnr".into(), "ssim".into()]
    } else {
        recs.iter().flat_map(|r| r.metrics.keys().cloned()).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let mut header = vec![key_column(preset).to_string()];
    header.extend(metrics.iter().cloned());
    header.push("seed".into());
    let order = variant_order(recs);
    let mut sorted: Vec<&ResultRecord> = recs.to_vec();
    sorted.sort_by_key(|r| (order.iter().position(|v| *v == r.variant), r.seed));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    let mut cells = vec![header.clone()];
    for r in &sorted {
        let mut raw = vec![r.variant.clone()];
        let mut pretty = vec![r.variant.clone()];
        for m in &metrics {
            match r.metric(m) {
                Some(v) => {
                    raw.push(v.to_string());
                    pretty.push(fmt_value(v));
                }
                None => {
                    raw.push(String::new());
                    pretty.push("-".into());
                }
            }
        }
        raw.push(r.seed.to_string());
        pretty.push(r.seed.to_string());
        w.write_record(&raw)?;
        cells.push(pretty);
    }
    let csv_text = String::from_utf8(w.into_inner().map_err(|e| Error::domain(e.to_string()))?).expect("csv is utf-8");
    let widths: Vec<usize> = (0..header.len()).map(|j| cells.iter().map(|r| r[j].len()).max().unwrap_or(0)).collect();
    let mut txt = String::new();
    for row in &cells {
        let line: Vec<String> =
            row.iter().zip(&widths).enumerate().map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") }).collect();
        writeln!(txt, "{}", line.join("  ").trim_end()).unwrap();
    }
    Ok((csv_text, txt))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Minimal SVG canvas with a plotting frame.
struct Plot {
    body: String,
    w: f64,
    h: f64,
    margin: (f64, f64, f64, f64),
}

impl Plot {
    fn new(title: &str) -> Plot {
        let mut p = Plot { body: String::new(), w: 640.0, h: 420.0, margin: (70.0, 20.0, 40.0, 60.0) };
        writeln!(p.body, r#"<text x="{}" y="24" font-size="15" text-anchor="middle">{}</text>"#, p.w / 2.0, escape(title)).unwrap();
        p
    }

    /// Map unit coordinates `(0..1, 0..1)` into the frame.
    fn at(&self, u: f64, v: f64) -> (f64, f64) {
        let (l, r, t, b) = self.margin;
        (l + u * (self.w - l - r), self.h - b - v * (self.h - t - b))
    }

    fn frame(&mut self, xlabel: &str, ylabel: &str) {
        let (x0, y0) = self.at(0.0, 0.0);
        let (x1, y1) = self.at(1.0, 1.0);
        writeln!(self.body, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1).unwrap();
        writeln!(self.body, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, self.h - 12.0, escape(xlabel)).unwrap();
        writeln!(
            self.body,
            r#"<text x="16" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(ylabel)
        )
        .unwrap();
    }

    fn xtick(&mut self, u: f64, label: &str) {
        let (x, y) = self.at(u, 0.0);
        writeln!(self.body, r#"<line x1="{x}" y1="{y}" x2="{x}" y2="{}" stroke="black"/>"#, y + 5.0).unwrap();
        writeln!(self.body, r#"<text x="{x}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, y + 18.0, escape(label)).unwrap();
    }

    fn ytick(&mut self, v: f64, label: &str) {
        let (x, y) = self.at(0.0, v);
        writeln!(self.body, r#"<line x1="{}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/>"#, x - 5.0).unwrap();
        writeln!(self.body, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#, x - 8.0, y + 4.0, escape(label)).unwrap();
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let p: Vec<String> = pts.iter().map(|&(u, v)| {
            let (x, y) = self.at(u, v);
            format!("{x:.2},{y:.2}")
        }).collect();
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        writeln!(self.body, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>"#, p.join(" ")).unwrap();
    }

    fn dot(&mut self, u: f64, v: f64, color: &str) {
        let (x, y) = self.at(u, v);
        writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}" fill-opacity="0.6"/>"#).unwrap();
    }

    fn legend(&mut self, i: usize, label: &str, color: &str) {
        let (x, y) = self.at(0.02, 0.97);
        let y = y + 16.0 * i as f64;
        writeln!(self.body, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, x + 18.0).unwrap();
        writeln!(self.body, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, x + 24.0, y + 4.0, escape(label)).unwrap();
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.w, self.h, self.body
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Per-seed points and the median per variant, log10 y axis.
fn ladder_plot(recs: &[&ResultRecord], metric: &str) -> Result<String> {
    let order = variant_order(recs);
    let values: Vec<Vec<f64>> =
        order.iter().map(|v| recs.iter().filter(|r| &r.variant == v).filter_map(|r| r.metric(metric)).filter(|x| *x > 0.0).collect()).collect();
    if values.iter().all(Vec::is_empty) {
        return Err(Error::domain(format!("no positive {metric} values to plot")));
    }
    let all: Vec<f64> = values.iter().flatten().copied().collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min).log10().floor();
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max).log10().ceil().max(lo + 1.0);
    let yv = |x: f64| (x.log10() - lo) / (hi - lo);
    let xu = |i: usize| (i as f64 + 0.5) / order.len() as f64;
    let mut p = Plot::new(&format!("{} by variant ({} records)", metric, recs.len()));
    p.frame(key_column(recs[0].preset), &format!("{metric} (log scale)"));
    for (i, v) in order.iter().enumerate() {
        p.xtick(xu(i), v);
    }
    for e in lo as i32..=hi as i32 {
        p.ytick((e as f64 - lo) / (hi - lo), &format!("1e{e}"));
    }
    let mut line = Vec::new();
    for (i, vals) in values.iter().enumerate() {
        for &x in vals {
            p.dot(xu(i), yv(x), PALETTE[0]);
        }
        if !vals.is_empty() {
            line.push((xu(i), yv(median(vals.clone()))));
        }
    }
    p.polyline(&line, PALETTE[0], false);
    p.legend(0, "median over seeds", PALETTE[0]);
    Ok(p.finish())
}

fn sigma_of(r: &ResultRecord) -> Option<f64> {
    r.metric("sigma").or_else(|| r.variant.rsplit('=').next()?.parse().ok())
}

/// Attack AUC and victim test accuracy against the DP noise multiplier.
fn sweep_plot(recs: &[&ResultRecord]) -> Result<String> {
    let mut sigmas: Vec<f64> = recs.iter().filter_map(|r| sigma_of(r)).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    if sigmas.is_empty() {
        return Err(Error::domain("sweep plots need records with a sigma"));
    }
    let xu = |i: usize| (i as f64 + 0.5) / sigmas.len() as f64;
    let mut p = Plot::new("DP noise sweep");
    p.frame("noise multiplier sigma", "value");
    for (i, s) in sigmas.iter().enumerate() {
        p.xtick(xu(i), &s.to_string());
    }
    for k in 0..=5 {
        p.ytick(k as f64 / 5.0, &format!("{:.1}", k as f64 / 5.0));
    }
    for (c, metric) in ["auc", "test_acc", "train_acc"].iter().enumerate() {
        let mut line = Vec::new();
        for (i, s) in sigmas.iter().enumerate() {
            let vals: Vec<f64> = recs.iter().filter(|r| sigma_of(r) == Some(*s)).filter_map(|r| r.metric(metric)).collect();
            for &v in &vals {
                p.dot(xu(i), v, PALETTE[c]);
            }
            if !vals.is_empty() {
                line.push((xu(i), median(vals)));
            }
        }
        if !line.is_empty() {
            p.polyline(&line, PALETTE[c], false);
            p.legend(c, metric, PALETTE[c]);
        }
    }
    Ok(p.finish())
}

fn artifact_root(record_path: &Path) -> PathBuf {
    record_path.ancestors().nth(5).map(Path::to_path_buf).unwrap_or_default()
}

fn read_roc(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn roc_plot(recs: &[&(PathBuf, ResultRecord)], low_fpr: bool) -> Result<String> {
    let floor = 1e-3;
    let map = |v: f64| if low_fpr { (v.max(floor).log10() - floor.log10()) / -floor.log10() } else { v };
    let mut p = Plot::new(if low_fpr { "ROC, log-log" } else { "ROC" });
    p.frame("false positive rate", "true positive rate");
    if low_fpr {
        for e in -3..=0 {
            let v = 10f64.powi(e);
            p.xtick(map(v), &format!("1e{e}"));
            p.ytick(map(v), &format!("1e{e}"));
        }
    } else {
        for k in 0..=5 {
            let v = k as f64 / 5.0;
            p.xtick(v, &format!("{v:.1}"));
            p.ytick(v, &format!("{v:.1}"));
        }
    }
    p.polyline(&[(0.0, 0.0), (1.0, 1.0)], "#888888", true);
    let mut n = 0;
    for (path, r) in recs {
        let root = artifact_root(path);
        for a in r.artifacts.iter().filter(|a| a.file_name().is_some_and(|f| f.to_string_lossy().starts_with("roc"))) {
            let pts: Vec<(f64, f64)> = read_roc(&root.join(a))?.into_iter().map(|(f, t)| (map(f), map(t))).collect();
            let color = PALETTE[n % PALETTE.len()];
            p.polyline(&pts, color, false);
            p.legend(n, &format!("{} seed {}", r.variant, r.seed), color);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::domain("records carry no ROC artifacts"));
    }
    Ok(p.finish())
}

/// Rows: records. Columns: ground truth, then the grid iterations that
/// were recorded.
fn snapshot_grid(recs: &[&(PathBuf, ResultRecord)]) -> Result<RgbImage> {
    let mut rows: Vec<Vec<Option<RgbImage>>> = Vec::new();
    for (path, r) in recs {
        let root = artifact_root(path);
        let find = |name: &str| r.artifacts.iter().find(|a| a.file_name().is_some_and(|f| f == name)).map(|a| root.join(a));
        let Some(truth) = find("truth.png") else { continue };
        let mut row = vec![Some(image::open(&truth)?.to_rgb8())];
        for it in GRID_ITERATIONS {
            row.push(match find(&format!("snap-{it}.png")) {
                Some(p) => Some(image::open(&p)?.to_rgb8()),
                None => None,
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::domain("records carry no snapshots"));
    }
    let keep: Vec<usize> = (0..=GRID_ITERATIONS.len()).filter(|&j| rows.iter().any(|r| r[j].is_some())).collect();
    let cell = rows.iter().flatten().flatten().next().map(|i| (i.width(), i.height())).unwrap();
    let (cw, ch) = (cell.0 * CELL_SCALE, cell.1 * CELL_SCALE);
    let gap = 2;
    let mut grid = RgbImage::from_pixel(keep.len() as u32 * (cw + gap) + gap, rows.len() as u32 * (ch + gap) + gap, Rgb([255, 255, 255]));
    for (i, row) in rows.iter().enumerate() {
        for (k, &j) in keep.iter().enumerate() {
            let (x, y) = (gap + k as u32 * (cw + gap), gap + i as u32 * (ch + gap));
            match &row[j] {
                Some(img) => imageops::replace(&mut grid, &imageops::resize(img, cw, ch, imageops::FilterType::Nearest), x as i64, y as i64),
                None => imageops::replace(&mut grid, &RgbImage::from_pixel(cw, ch, Rgb([200, 200, 200])), x as i64, y as i64),
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::store::TOOL_VERSION;
    use std::collections::BTreeMap;

    fn rec(preset: Preset, variant: &str, seed: u64, mse: f64) -> (PathBuf, ResultRecord) {
        let metrics = BTreeMap::from([("mse".to_string(), mse), ("psnr".to_string(), 20.0), ("ssim".to_string(), 0.5), ("final_cost".to_string(), 0.1)]);
        let r = ResultRecord {
            preset,
            variant: variant.into(),
            config_hash: "0123456789abcdef0123".into(),
            spec_hash: None,
            recipe_hash: None,
            seed,
            metrics,
            wall_time_s: 0.0,
            artifacts: Vec::new(),
            tool_version: TOOL_VERSION.into(),
            error: None,
        };
        (PathBuf::from("r.json"), r)
    }

    #[test]
    fn table_from_two_records() {
        let dir = tempfile::tempdir().unwrap();
        let opts = ReportOptions { out_dir: dir.path().into(), low_fpr: false, metric: None };
        let recs = vec![rec(Preset::GiaLadder, "12", 0, 0.001), rec(Preset::GiaLadder, "4", 0, 0.05)];
        let files = report(&recs, ReportKind::Table, &opts).unwrap();
        let text = fs::read_to_string(&files[0]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,mse,psnr,ssim,seed");
        assert!(lines.next().unwrap().starts_with("4,"));
        assert!(files[0].file_name().unwrap().to_string_lossy().starts_with("0123456789abcdef-"));
        let txt = fs::read_to_string(&files[1]).unwrap();
        assert_eq!(txt.lines().count(), 3);
    }

    #[test]
    fn mixed_presets_are_a_domain_error() {
        let opts = ReportOptions { out_dir: std::env::temp_dir(), low_fpr: false, metric: None };
        let recs = vec![rec(Preset::GiaLadder, "1", 0, 0.1), rec(Preset::MiaLira, "victim", 0, 0.1)];
        assert!(matches!(report(&recs, ReportKind::Table, &opts), Err(Error::Domain(_))));
    }

    #[test]
    fn ladder_plot_is_svg() {
        let recs = [rec(Preset::GiaLadder, "1", 0, 0.5), rec(Preset::GiaLadder, "12", 0, 1e-4)];
        let refs: Vec<&ResultRecord> = recs.iter().map(|(_, r)| r).collect();
        let svg = ladder_plot(&refs, "mse").unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("1e-4") && svg.contains("<polyline"));
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("table".parse::<ReportKind>().unwrap(), ReportKind::Table);
        assert_eq!("SnapshotGrid".parse::<ReportKind>().unwrap(), ReportKind::SnapshotGrid);
        assert_eq!("roc-plot".parse::<ReportKind>().unwrap(), ReportKind::RocPlot);
        assert!("pie".parse::<ReportKind>().is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let x = Tensor::new(vec![1, 3, 2, 2], vec![0.0, 1.0, 0.5, 0.25, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        save_png(&p, &x).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (2, 2));
        assert_eq!(img.get_pixel(1, 0), &Rgb([255, 255, 0]));
    }
}
