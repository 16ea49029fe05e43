//! Rate-performance evaluation: anchors, Pareto fronts, Bjøntegaard delta
//! rate with the task score as quality axis, and plot-ready CSV.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::csv_err;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub score: f64,
    pub tag: String,
}

impl RDPoint {
    pub fn new(bpp: f64, score: f64, tag: impl Into<String>) -> Self {
        RDPoint { bpp, score, tag: tag.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorPoint {
    pub qp: i32,
    pub resolution: u32,
    pub bpp: f64,
    pub score: f64,
}

/// Anchor codec results, one point per (qp, resolution) setting.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub points: Vec<AnchorPoint>,
}

impl AnchorGrid {
    pub fn new(points: Vec<AnchorPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("anchor grid".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &points {
            if !(p.bpp > 0.0) || !p.bpp.is_finite() {
                return Err(Error::Parse(format!("anchor qp={} resolution={} has bpp {}", p.qp, p.resolution, p.bpp)));
            }
            if !p.score.is_finite() {
                return Err(Error::Parse(format!("anchor qp={} resolution={} has score {}", p.qp, p.resolution, p.score)));
            }
            if !seen.insert((p.qp, p.resolution)) {
                return Err(Error::Duplicate(format!("anchor qp={} resolution={}", p.qp, p.resolution)));
            }
        }
        Ok(AnchorGrid { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn rd(p: &AnchorPoint) -> RDPoint {
        RDPoint::new(p.bpp, p.score, format!("qp{}@{}%", p.qp, p.resolution))
    }

    pub fn all_points(&self) -> Vec<RDPoint> {
        self.points.iter().map(Self::rd).collect()
    }

    /// One curve per resolution, highest resolution first.
    pub fn by_resolution(&self) -> Vec<(u32, Vec<RDPoint>)> {
        let mut m: BTreeMap<u32, Vec<RDPoint>> = BTreeMap::new();
        for p in &self.points {
            m.entry(p.resolution).or_default().push(Self::rd(p));
        }
        m.into_iter().rev().collect()
    }
}

pub fn parse_anchors(reader: impl Read) -> Result<AnchorGrid> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["qp", "resolution", "bpp", "score"] {
        return Err(Error::Parse(format!("anchor header must be qp,resolution,bpp,score, got {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let points = r.deserialize().collect::<std::result::Result<Vec<AnchorPoint>, _>>().map_err(csv_err)?;
    AnchorGrid::new(points)
}

pub fn load_anchors(path: &Path) -> Result<AnchorGrid> {
    parse_anchors(std::fs::File::open(path)?)
}

/// Points not dominated in (lower bpp, higher score), sorted by bpp.
/// Of several identical points only the first survives.
pub fn pareto_front(points: &[RDPoint]) -> Result<Vec<RDPoint>> {
    if points.is_empty() {
        return Err(Error::Empty("pareto front input".into()));
    }
    let mut keep = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let dominated = points.iter().enumerate().any(|(j, q)| {
            let weakly = q.bpp <= p.bpp && q.score >= p.score;
            let strictly = q.bpp < p.bpp || q.score > p.score;
            let earlier_twin = j < i && q.bpp == p.bpp && q.score == p.score;
            (weakly && strictly) || earlier_twin
        });
        if !dominated {
            keep.push(p.clone());
        }
    }
    keep.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    Ok(keep)
}

/// Score deviations from monotonicity tolerated before a curve is rejected.
pub const MONOTONE_TOLERANCE: f64 = 1e-6;

/// Least-squares cubic `log10(bpp) = p(score)`, evaluated in a normalized
/// score variable for conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRateFit {
    coeffs: [f64; 4],
    centre: f64,
    half_width: f64,
    pub min_score: f64,
    pub max_score: f64,
}

impl LogRateFit {
    fn u(&self, s: f64) -> f64 {
        (s - self.centre) / self.half_width
    }

    pub fn eval(&self, score: f64) -> f64 {
        let u = self.u(score);
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }

    fn antiderivative(&self, score: f64) -> f64 {
        let u = self.u(score);
        let c = self.coeffs;
        self.half_width * u * (c[0] + u * (c[1] / 2.0 + u * (c[2] / 3.0 + u * c[3] / 4.0)))
    }

    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }
}

pub fn fit_log_rate(curve: &[RDPoint]) -> std::result::Result<LogRateFit, String> {
    if curve.len() < 4 {
        return Err(format!("curve has {} points, need at least 4", curve.len()));
    }
    if let Some(p) = curve.iter().find(|p| !(p.bpp > 0.0) || !p.score.is_finite()) {
        return Err(format!("invalid point bpp={} score={}", p.bpp, p.score));
    }
    let mut by_rate: Vec<&RDPoint> = curve.iter().collect();
    by_rate.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    for w in by_rate.windows(2) {
        if w[1].score < w[0].score - MONOTONE_TOLERANCE {
            return Err(format!(
                "score decreases from {} to {} as bpp rises from {} to {}",
                w[0].score, w[1].score, w[0].bpp, w[1].bpp
            ));
        }
    }
    let mut scores: Vec<f64> = curve.iter().map(|p| p.score).collect();
    scores.sort_by(f64::total_cmp);
    if scores.windows(2).any(|w| w[1] - w[0] <= 1e-12) {
        return Err("curve has repeated scores".into());
    }
    let (min_score, max_score) = (scores[0], scores[scores.len() - 1]);
    let centre = (min_score + max_score) / 2.0;
    let half_width = (max_score - min_score) / 2.0;
    let n = curve.len();
    let a = DMatrix::from_fn(n, 4, |i, j| ((curve[i].score - centre) / half_width).powi(j as i32));
    let b = DVector::from_iterator(n, curve.iter().map(|p| p.bpp.log10()));
    let sol = a.svd(true, true).solve(&b, 1e-14).map_err(|e| format!("least squares failed: {e}"))?;
    let coeffs = [sol[0], sol[1], sol[2], sol[3]];
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err("cubic fit is not finite".into());
    }
    Ok(LogRateFit { coeffs, centre, half_width, min_score, max_score })
}

#[derive(Clone, Debug, PartialEq)]
pub enum BDRateResult {
    Defined {
        /// Negative means the test curve needs fewer bits.
        percent: f64,
        interval: (f64, f64),
    },
    Undefined {
        reason: String,
    },
}

impl BDRateResult {
    pub fn percent(&self) -> Option<f64> {
        match self {
            BDRateResult::Defined { percent, .. } => Some(*percent),
            BDRateResult::Undefined { .. } => None,
        }
    }
}

/// Average bitrate difference of `test` relative to `anchor` over their
/// common score interval.
pub fn bd_rate(anchor: &[RDPoint], test: &[RDPoint]) -> BDRateResult {
    let undefined = |reason: String| BDRateResult::Undefined { reason };
    let fa = match fit_log_rate(anchor) {
        Ok(f) => f,
        Err(e) => return undefined(format!("anchor: {e}")),
    };
    let ft = match fit_log_rate(test) {
        Ok(f) => f,
        Err(e) => return undefined(format!("test: {e}")),
    };
    let lo = fa.min_score.max(ft.min_score);
    let hi = fa.max_score.min(ft.max_score);
    if !(hi > lo) {
        return undefined(format!("score ranges do not overlap ({lo} >= {hi})"));
    }
    let delta = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    BDRateResult::Defined { percent: (10f64.powf(delta) - 1.0) * 100.0, interval: (lo, hi) }
}

/// BD-rates against each anchor resolution and against the anchors' Pareto front.
#[derive(Clone, Debug, PartialEq)]
pub struct BDRateTable {
    pub columns: Vec<(String, BDRateResult)>,
}

pub fn bd_rate_table(grid: &AnchorGrid, test: &[RDPoint]) -> Result<BDRateTable> {
    let mut columns: Vec<(String, BDRateResult)> = grid
        .by_resolution()
        .into_iter()
        .map(|(res, curve)| (format!("{res}%"), bd_rate(&curve, test)))
        .collect();
    columns.push(("Pareto".into(), bd_rate(&pareto_front(&grid.all_points())?, test)));
    Ok(BDRateTable { columns })
}

/// Rows of BD-rates, two decimals, `n/a` when undefined.
pub fn render_bd_table(rows: &[(&str, &BDRateTable)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut s = format!("{:<14}", "");
    for (name, _) in &first.columns {
        s.push_str(&format!(" {name:>8}"));
    }
    s.push('\n');
    for (name, t) in rows {
        s.push_str(&format!("{name:<14}"));
        for (_, r) in &t.columns {
            match r.percent() {
                Some(p) => s.push_str(&format!(" {p:>8.2}")),
                None => s.push_str(&format!(" {:>8}", "n/a")),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize, Deserialize)]
struct RdRow {
    curve: String,
    tag: String,
    bpp: f64,
    score: f64,
}

/// Writes `curve,tag,bpp,score` rows ordered by curve name, then bpp.
pub fn emit_rd_csv(curves: &BTreeMap<String, Vec<RDPoint>>, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(["curve", "tag", "bpp", "score"]).map_err(csv_err)?;
    for (name, pts) in curves {
        let mut sorted: Vec<&RDPoint> = pts.iter().collect();
        sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for p in sorted {
            w.serialize(RdRow { curve: name.clone(), tag: p.tag.clone(), bpp: p.bpp, score: p.score }).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_rd_csv(path: &Path) -> Result<BTreeMap<String, Vec<RDPoint>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out: BTreeMap<String, Vec<RDPoint>> = BTreeMap::new();
    for row in r.deserialize() {
        let row: RdRow = row.map_err(csv_err)?;
        out.entry(row.curve).or_default().push(RDPoint::new(row.bpp, row.score, row.tag));
    }
    Ok(out)
}
