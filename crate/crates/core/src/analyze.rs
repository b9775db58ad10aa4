//! Post-hoc analyzers: parameter drift between checkpoints, the IoU series of
//! the entropy and KL masks, the selection-ratio sweep, and deterministic SVG
//! line/bar charts of metrics CSVs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{evaluate, EvalConfig};
use crate::model::{ParameterSet, ReferenceModel};
use crate::selection::{iou, selection_count, MaskDumpRow};
use crate::tasks::{Sample, Vocabulary};
use crate::train::{train_sft, write_csv, Method, SftConfig, SftHooks};
use crate::{Error, Result};

/// Default relative-change thresholds for drift fractions.
pub const DEFAULT_DRIFT_THRESHOLDS: [f64; 3] = [1e-3, 1e-2, 1e-1];

/// Keeps the relative change finite for parameters that start at zero.
pub const DRIFT_DENOMINATOR_EPS: f64 = 1e-8;

/// Selection ratios swept by default.
pub const DEFAULT_SWEEP_RHOS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

/// IoU summary of a large-model EKSFT run, shown next to ours for comparison.
pub const LARGE_SCALE_IOU_REFERENCE: IouSummary = IouSummary {
    min: 0.09,
    max: 0.59,
    mean: 0.50,
};

/// Drift statistics over one group of scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    pub n_scalars: usize,
    pub mean_relative_change: f64,
    pub max_relative_change: f64,
    /// Fraction of scalars whose relative change strictly exceeds each threshold,
    /// aligned with [`DriftReport::thresholds`].
    pub fractions: Vec<f64>,
}

/// Relative parameter change between two checkpoints of the same architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub thresholds: Vec<f64>,
    pub global: DriftStats,
    pub per_tensor: Vec<(String, DriftStats)>,
}

impl DriftReport {
    /// Global fraction above `threshold`, if that threshold was computed.
    pub fn fraction_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.global.fractions[i])
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Long-format CSV: one row per (tensor, threshold), global rows first.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["tensor", "threshold", "fraction", "mean_relative_change", "n_scalars"])?;
        let groups =
            std::iter::once(("global", &self.global)).chain(self.per_tensor.iter().map(|(n, s)| (n.as_str(), s)));
        for (name, stats) in groups {
            for (t, f) in self.thresholds.iter().zip(&stats.fractions) {
                w.write_record([
                    name.to_string(),
                    t.to_string(),
                    f.to_string(),
                    stats.mean_relative_change.to_string(),
                    stats.n_scalars.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Relative change of one scalar: `|after − before| / (|before| + eps)`.
pub fn relative_change(before: f64, after: f64) -> f64 {
    (after - before).abs() / (before.abs() + DRIFT_DENOMINATOR_EPS)
}

fn drift_stats(pairs: impl Iterator<Item = (f64, f64)>, thresholds: &[f64]) -> DriftStats {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut exceed = vec![0usize; thresholds.len()];
    for (b, a) in pairs {
        let r = relative_change(b, a);
        n += 1;
        sum += r;
        max = max.max(r);
        for (count, &t) in exceed.iter_mut().zip(thresholds) {
            if r > t {
                *count += 1;
            }
        }
    }
    let denom = n.max(1) as f64;
    DriftStats {
        n_scalars: n,
        mean_relative_change: sum / denom,
        max_relative_change: max,
        fractions: exceed.iter().map(|&c| c as f64 / denom).collect(),
    }
}

/// Per-tensor and global drift from `before` to `after`.
///
/// Thresholds are sorted ascending so fractions read as non-increasing.
pub fn parameter_drift(before: &ParameterSet, after: &ParameterSet, thresholds: &[f64]) -> Result<DriftReport> {
    if before.config_hash() != after.config_hash() {
        return Err(Error::Input(format!(
            "drift needs checkpoints of one architecture: config hashes {} and {} differ",
            before.config_hash(),
            after.config_hash()
        )));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::Config(format!(
            "drift thresholds must be non-empty, finite and non-negative, got {thresholds:?}"
        )));
    }
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let per_tensor = before
        .iter()
        .zip(after.tensors())
        .map(|((name, b), a)| {
            let stats = drift_stats(b.data().iter().copied().zip(a.data().iter().copied()), &thresholds);
            (name.to_string(), stats)
        })
        .collect();
    let (bf, af) = (before.flatten(), after.flatten());
    let global = drift_stats(bf.into_iter().zip(af), &thresholds);
    Ok(DriftReport {
        thresholds,
        global,
        per_tensor,
    })
}

/// Minimum, maximum and mean of an IoU series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// IoU of the entropy and KL masks at one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepIou {
    pub step: usize,
    pub iou: f64,
    pub n_tokens: usize,
    pub n_entropy: usize,
    pub n_kl: usize,
    pub n_intersection: usize,
}

/// Per-step IoU recovered from a mask dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSeries {
    pub steps: Vec<StepIou>,
    /// `None` when the dump holds no usable rows.
    pub summary: Option<IouSummary>,
    /// Lines that did not parse as mask-dump rows.
    pub skipped_lines: usize,
}

impl IouSeries {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.steps)
    }

    /// Two-row CSV: this run's summary and the large-scale reference row.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["source", "min", "max", "mean", "steps", "skipped_lines"])?;
        let ours = self.summary.map_or_else(
            || ["".to_string(), "".to_string(), "".to_string()],
            |s| [s.min.to_string(), s.max.to_string(), s.mean.to_string()],
        );
        w.write_record([
            "this_run".to_string(),
            ours[0].clone(),
            ours[1].clone(),
            ours[2].clone(),
            self.steps.len().to_string(),
            self.skipped_lines.to_string(),
        ])?;
        let r = LARGE_SCALE_IOU_REFERENCE;
        w.write_record([
            "reference".to_string(),
            r.min.to_string(),
            r.max.to_string(),
            r.mean.to_string(),
            String::new(),
            String::new(),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

type TokenKey = (usize, usize, usize);

#[derive(Default)]
struct StepSets {
    tokens: usize,
    entropy: BTreeSet<TokenKey>,
    kl: BTreeSet<TokenKey>,
}

/// Rebuilds the per-step IoU series from a JSONL mask dump.
///
/// Tokens are keyed by `(micro, seq, pos)`; malformed lines are skipped and counted.
pub fn iou_series<R: BufRead>(dump: R) -> Result<IouSeries> {
    let mut per_step: BTreeMap<usize, StepSets> = BTreeMap::new();
    let mut skipped = 0usize;
    for line in dump.lines() {
        let line = line.map_err(|e| Error::io("mask dump", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Ok(row) = serde_json::from_str::<MaskDumpRow>(&line) else {
            skipped += 1;
            continue;
        };
        let sets = per_step.entry(row.step).or_default();
        let key = (row.micro, row.seq, row.pos);
        sets.tokens += 1;
        if row.in_mH {
            sets.entropy.insert(key);
        }
        if row.in_mKL {
            sets.kl.insert(key);
        }
    }
    if skipped > 0 {
        log::warn!("mask dump: skipped {skipped} malformed line(s)");
    }
    let steps: Vec<StepIou> = per_step
        .into_iter()
        .map(|(step, s)| StepIou {
            step,
            iou: iou(&s.entropy, &s.kl),
            n_tokens: s.tokens,
            n_entropy: s.entropy.len(),
            n_kl: s.kl.len(),
            n_intersection: s.entropy.intersection(&s.kl).count(),
        })
        .collect();
    let summary = summarize(steps.iter().map(|s| s.iou));
    Ok(IouSeries {
        steps,
        summary,
        skipped_lines: skipped,
    })
}

/// [`iou_series`] over a dump file.
pub fn iou_series_from_path(path: &Path) -> Result<IouSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    iou_series(std::io::BufReader::new(file))
}

/// Min/max/mean of a series, `None` when it is empty.
pub fn summarize(values: impl Iterator<Item = f64>) -> Option<IouSummary> {
    let mut n = 0usize;
    let mut acc = IouSummary {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        mean: 0.0,
    };
    for v in values {
        n += 1;
        acc.min = acc.min.min(v);
        acc.max = acc.max.max(v);
        acc.mean += v;
    }
    (n > 0).then(|| IouSummary {
        mean: acc.mean / n as f64,
        ..acc
    })
}

/// One selection ratio's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub pass_at_1: f64,
    pub pass_at_32: f64,
    /// Global drift fraction at the smallest drift threshold.
    pub drift: f64,
    pub entropy: f64,
    pub final_loss: f64,
    /// Micro-batches whose entropy and KL masks both held exactly `ceil(ρ·n)` tokens.
    pub mask_checks: usize,
}

/// Shared inputs of every run in a ratio sweep.
pub struct SweepInputs<'a> {
    pub base: &'a ParameterSet,
    pub reference: &'a ReferenceModel,
    pub train_set: &'a [Sample],
    pub eval_set: &'a [Sample],
    pub vocab: &'a Vocabulary,
    /// Method is forced to EKSFT; everything else is shared across ratios.
    pub sft: SftConfig,
    pub eval: EvalConfig,
    pub drift_thresholds: Vec<f64>,
}

/// Trains and evaluates one EKSFT run per ratio with shared seeds.
///
/// After each completed ratio the combined CSV at `out_csv` (if given) is
/// rewritten, so a failing run leaves the finished rows on disk. Each run's
/// mask log is checked against `k = ceil(ρ·n)`; a mismatch aborts the sweep.
pub fn ratio_sweep(inputs: &SweepInputs<'_>, rhos: &[f64], out_csv: Option<&Path>) -> Result<Vec<SweepRow>> {
    if rhos.is_empty() {
        return Err(Error::Config("ratio sweep needs at least one ratio".into()));
    }
    if let Some(bad) = rhos.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("selection ratio {bad} outside [0, 1]")));
    }
    for k in [1, 32] {
        if !inputs.eval.ks.contains(&k) {
            return Err(Error::Config(format!(
                "ratio sweep reports pass@{k}; add it to the eval ks"
            )));
        }
    }
    let threshold = inputs
        .drift_thresholds
        .iter()
        .copied()
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::Config("ratio sweep needs a drift threshold".into()))?;

    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let config = SftConfig {
            method: Method::Eksft,
            rho,
            ..inputs.sft.clone()
        };
        let outcome = train_sft(
            inputs.base,
            inputs.reference,
            inputs.train_set,
            &config,
            &mut SftHooks::default(),
        )?;
        for entry in &outcome.mask_log {
            let k = selection_count(rho, entry.n_valid);
            if entry.k != k || entry.n_entropy != k || entry.n_kl != k {
                return Err(Error::Numeric(format!(
                    "ratio {rho}, step {} micro {}: mask sizes ({}, {}) differ from k = {k}",
                    entry.step, entry.micro, entry.n_entropy, entry.n_kl
                )));
            }
        }
        let report = evaluate(&outcome.params, inputs.eval_set, &inputs.eval, inputs.vocab)?;
        let drift = parameter_drift(inputs.base, &outcome.params, &[threshold])?;
        rows.push(SweepRow {
            rho,
            pass_at_1: report.pass_at_k[&1],
            pass_at_32: report.pass_at_k[&32],
            drift: drift.global.fractions[0],
            entropy: report.mean_response_entropy,
            final_loss: outcome.metrics.last().map_or(f64::NAN, |m| m.loss),
            mask_checks: outcome.mask_log.len(),
        });
        if let Some(path) = out_csv {
            write_csv(path, &rows)?;
        }
        log::info!("sweep ρ={rho}: done ({} of {})", rows.len(), rhos.len());
    }
    Ok(rows)
}

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// A line chart with shared axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Fixed-precision number formatting keeps SVG output byte-stable.
fn num(v: f64) -> String {
    format!("{v:.2}")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn svg_frame(svg: &mut String, title: &str, x_label: &str, y_label: &str) {
    let (pw, ph) = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT, HEIGHT - MARGIN_TOP - MARGIN_BOTTOM);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#,
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        num(MARGIN_LEFT + pw / 2.0),
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect class="axes" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        num(MARGIN_LEFT),
        num(MARGIN_TOP),
        num(pw),
        num(ph)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        num(MARGIN_LEFT + pw / 2.0),
        num(HEIGHT - 10.0),
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{y}" text-anchor="middle" transform="rotate(-90 15 {y})">{}</text>"#,
        escape(y_label),
        y = num(MARGIN_TOP + ph / 2.0)
    );
}

/// Renders a line chart as a standalone SVG 1.1 document.
///
/// Every finite point becomes one `<circle class="point">`; non-finite points
/// are left out. A chart with no points still renders its axes.
pub fn render_line_chart(chart: &LineChart) -> String {
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let all = || chart.series.iter().flat_map(|s| s.points.iter()).filter(finite);
    let (x0, x1) = extent(all().map(|p| p.0));
    let (y0, y1) = extent(all().map(|p| p.1));
    let (pw, ph) = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT, HEIGHT - MARGIN_TOP - MARGIN_BOTTOM);
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    svg_frame(&mut svg, &chart.title, &chart.x_label, &chart.y_label);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(sx(xv)),
            num(MARGIN_TOP + ph + 15.0),
            tick_label(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            num(MARGIN_LEFT - 5.0),
            num(sy(yv) + 4.0),
            tick_label(yv)
        );
    }
    for (i, s) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<&(f64, f64)> = s.points.iter().filter(finite).collect();
        let _ = writeln!(svg, r#"<g class="series" data-label="{}">"#, escape(&s.label));
        if pts.len() > 1 {
            let path: Vec<String> = pts
                .iter()
                .map(|p| format!("{},{}", num(sx(p.0)), num(sy(p.1))))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        for p in &pts {
            let _ = writeln!(
                svg,
                r#"<circle class="point" cx="{}" cy="{}" r="2" fill="{color}"/>"#,
                num(sx(p.0)),
                num(sy(p.1))
            );
        }
        let ly = MARGIN_TOP + 10.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            num(WIDTH - MARGIN_RIGHT + 10.0),
            num(ly - 8.0),
            num(WIDTH - MARGIN_RIGHT + 25.0),
            num(ly + 1.0),
            escape(&s.label)
        );
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Renders labelled bars (one `<rect class="bar">` per entry) as SVG 1.1.
pub fn render_bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let (pw, ph) = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT, HEIGHT - MARGIN_TOP - MARGIN_BOTTOM);
    let top = bars
        .iter()
        .map(|b| b.1)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let top = if top > 0.0 { top } else { 1.0 };
    let mut svg = String::new();
    svg_frame(&mut svg, title, "", y_label);
    for i in 0..=4 {
        let v = top * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            num(MARGIN_LEFT - 5.0),
            num(MARGIN_TOP + ph - v / top * ph + 4.0),
            tick_label(v)
        );
    }
    let slot = pw / bars.len().max(1) as f64;
    for (i, (label, value)) in bars.iter().enumerate() {
        let v = if value.is_finite() { value.max(0.0) } else { 0.0 };
        let h = v / top * ph;
        let x = MARGIN_LEFT + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            svg,
            r#"<rect class="bar" x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
            num(x),
            num(MARGIN_TOP + ph - h),
            num(slot * 0.7),
            num(h),
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(x + slot * 0.35),
            num(MARGIN_TOP + ph + 15.0),
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads `(x, y)` pairs from two named columns of a CSV with a header row.
///
/// Cells that do not parse as numbers become NaN (and are not plotted).
pub fn read_xy(path: &Path, x_col: &str, y_col: &str) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |col: &str| {
        headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::Export(format!("{}: missing column {col:?}", path.display())))
    };
    let (xi, yi) = (find(x_col)?, find(y_col)?);
    let parse = |s: Option<&str>| s.and_then(|v| v.trim().parse::<f64>().ok()).unwrap_or(f64::NAN);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push((parse(rec.get(xi)), parse(rec.get(yi))));
    }
    Ok(out)
}

/// A labelled input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPath {
    pub label: String,
    pub path: PathBuf,
}

/// Which CSVs to chart.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotInputs {
    /// Supervised-stage metrics CSVs (loss, entropy, KL, IoU vs step).
    pub sft_metrics: Vec<LabeledPath>,
    /// RL metrics CSVs (reward and entropy vs step).
    pub rl_metrics: Vec<LabeledPath>,
    /// Eval CSVs (`k`, `pass_at_k`).
    pub eval_reports: Vec<LabeledPath>,
    /// Drift CSVs written by [`DriftReport::write_csv`].
    pub drift_reports: Vec<LabeledPath>,
}

fn line_chart(title: &str, x: &str, y: &str, inputs: &[LabeledPath]) -> Result<LineChart> {
    let series = inputs
        .iter()
        .map(|lp| {
            Ok(Series {
                label: lp.label.clone(),
                points: read_xy(&lp.path, x, y)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LineChart {
        title: title.to_string(),
        x_label: x.to_string(),
        y_label: y.to_string(),
        series,
    })
}

/// Global drift fractions per (run, threshold), read from drift CSVs.
fn drift_bars(inputs: &[LabeledPath]) -> Result<Vec<(String, f64)>> {
    let mut bars = Vec::new();
    for lp in inputs {
        let mut r = csv::Reader::from_path(&lp.path)?;
        let headers = r.headers()?.clone();
        let col = |c: &str| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::Export(format!("{}: missing column {c:?}", lp.path.display())))
        };
        let (ti, thi, fi) = (col("tensor")?, col("threshold")?, col("fraction")?);
        for rec in r.records() {
            let rec = rec?;
            if rec.get(ti) == Some("global") {
                let f = rec.get(fi).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
                bars.push((format!("{} @{}", lp.label, rec.get(thi).unwrap_or("?")), f));
            }
        }
    }
    Ok(bars)
}

fn write_svg(dir: &Path, name: &str, svg: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes one SVG per populated chart into `out_dir` and returns their paths.
pub fn export_plots(inputs: &PlotInputs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    if !inputs.sft_metrics.is_empty() {
        for (file, title, y) in [
            ("sft_loss.svg", "Training loss", "loss"),
            ("sft_entropy.svg", "Mean token entropy", "mean_entropy"),
            ("sft_kl.svg", "Mean KL to reference", "mean_kl"),
            ("sft_iou.svg", "Mask IoU (entropy vs KL)", "mask_iou"),
        ] {
            let chart = line_chart(title, "step", y, &inputs.sft_metrics)?;
            write_svg(out_dir, file, &render_line_chart(&chart), &mut written)?;
        }
    }
    if !inputs.rl_metrics.is_empty() {
        for (file, title, y) in [
            ("rl_reward.svg", "RL mean reward", "mean_reward"),
            ("rl_entropy.svg", "RL rollout entropy", "mean_entropy"),
        ] {
            let chart = line_chart(title, "step", y, &inputs.rl_metrics)?;
            write_svg(out_dir, file, &render_line_chart(&chart), &mut written)?;
        }
    }
    if !inputs.eval_reports.is_empty() {
        let chart = line_chart("pass@k", "k", "pass_at_k", &inputs.eval_reports)?;
        write_svg(out_dir, "pass_at_k.svg", &render_line_chart(&chart), &mut written)?;
    }
    if !inputs.drift_reports.is_empty() {
        let bars = drift_bars(&inputs.drift_reports)?;
        let svg = render_bar_chart("Fraction of parameters above drift threshold", "fraction", &bars);
        write_svg(out_dir, "drift.svg", &svg, &mut written)?;
    }
    Ok(written)
}
