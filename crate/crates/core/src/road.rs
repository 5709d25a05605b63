//! Local road map in the curvilinear (s, y) frame.
//!
//! The centreline is described by its tangent angle as a piecewise cubic in
//! the arc length. Each piece uses a segment-local variable `u = s - s_start`
//! for conditioning. Left and right lateral limits are cubics in the same
//! variable, stored with descending powers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RANGE_TOL: f64 = 1e-9;
const SAMPLE_SPACING: f64 = 0.5;

/// Five-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CentrelineSegment {
    pub s_start: f64,
    pub s_end: f64,
    /// theta(s) = c0 + c1 u + c2 u^2 + c3 u^3 with u = s - s_start
    pub theta: [f64; 4],
    /// global position of the centreline at `s_start`
    pub x0: f64,
    pub y0: f64,
}

impl CentrelineSegment {
    fn heading_local(&self, u: f64) -> f64 {
        let c = &self.theta;
        c[0] + u * (c[1] + u * (c[2] + u * c[3]))
    }

    fn curvature_local(&self, u: f64) -> f64 {
        let c = &self.theta;
        c[1] + u * (2.0 * c[2] + u * 3.0 * c[3])
    }

    fn position_local(&self, u: f64) -> (f64, f64) {
        if u == 0.0 {
            return (self.x0, self.y0);
        }
        let panels = (u.abs() / 2.5).ceil().max(1.0) as usize;
        let width = u / panels as f64;
        let (mut x, mut y) = (self.x0, self.y0);
        for k in 0..panels {
            let mid = (k as f64 + 0.5) * width;
            for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
                let th = self.heading_local(mid + 0.5 * width * node);
                x += 0.5 * width * weight * th.cos();
                y += 0.5 * width * weight * th.sin();
            }
        }
        (x, y)
    }
}

/// Lateral limits of one segment, descending powers of the local variable:
/// `y(u) = k[0] u^3 + k[1] u^2 + k[2] u + k[3]`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct BoundaryPolynomials {
    pub left: [f64; 4],
    pub right: [f64; 4],
}

fn eval_desc(k: &[f64; 4], u: f64) -> f64 {
    ((k[0] * u + k[1]) * u + k[2]) * u + k[3]
}

fn slope_desc(k: &[f64; 4], u: f64) -> f64 {
    (3.0 * k[0] * u + 2.0 * k[1]) * u + k[2]
}

/// Re-expand a descending cubic in `s - s0` as a descending cubic in `s`.
fn shift_desc(k: &[f64; 4], s0: f64) -> [f64; 4] {
    let (a, b, c, d) = (k[0], k[1], k[2], k[3]);
    [
        a,
        b - 3.0 * a * s0,
        c - 2.0 * b * s0 + 3.0 * a * s0 * s0,
        d - c * s0 + b * s0 * s0 - a * s0 * s0 * s0,
    ]
}

impl BoundaryPolynomials {
    pub fn constant(left: f64, right: f64) -> Self {
        Self { left: [0.0, 0.0, 0.0, left], right: [0.0, 0.0, 0.0, right] }
    }

    /// Coefficients in the global abscissa for a segment starting at `s_start`.
    pub fn global_form(&self, s_start: f64) -> ([f64; 4], [f64; 4]) {
        (shift_desc(&self.left, s_start), shift_desc(&self.right, s_start))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    #[serde(flatten)]
    pub centreline: CentrelineSegment,
    #[serde(flatten)]
    pub boundaries: BoundaryPolynomials,
}

/// Road file contents: explicit segments, or a polyline with corridor widths
/// that is fitted on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RoadSource {
    Segments { segments: Vec<RoadSegment> },
    Polyline { polyline: Vec<[f64; 2]>, left_width: Widths, right_width: Widths },
    Straight { straight_length: f64, left: f64, right: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Widths {
    Constant(f64),
    PerPoint(Vec<f64>),
}

impl Widths {
    fn expand(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            Widths::Constant(w) => Ok(vec![*w; n]),
            Widths::PerPoint(v) if v.len() == n => Ok(v.clone()),
            Widths::PerPoint(v) => Err(Error::Degenerate(format!(
                "{} widths given for {} polyline points",
                v.len(),
                n
            ))),
        }
    }
}

impl RoadSource {
    pub fn build(&self) -> Result<RoadMap> {
        match self {
            RoadSource::Segments { segments } => RoadMap::from_segments(segments.clone()),
            RoadSource::Polyline { polyline, left_width, right_width } => {
                let pts: Vec<(f64, f64)> = polyline.iter().map(|p| (p[0], p[1])).collect();
                let left = left_width.expand(pts.len())?;
                let right = right_width.expand(pts.len())?;
                RoadMap::fit_from_polyline(&pts, &left, &right)
            }
            RoadSource::Straight { straight_length, left, right } => {
                RoadMap::straight(*straight_length, *left, *right)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoadMap {
    segments: Vec<RoadSegment>,
    /// centreline samples (s, X, Y) used to seed projections
    samples: Vec<(f64, f64, f64)>,
}

impl RoadMap {
    pub fn from_segments(segments: Vec<RoadSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Degenerate("road map needs at least one segment".into()));
        }
        if segments[0].centreline.s_start.abs() > RANGE_TOL {
            return Err(Error::Degenerate("road map must start at s = 0".into()));
        }
        for seg in &segments {
            let c = &seg.centreline;
            if !(c.s_start < c.s_end) {
                return Err(Error::Degenerate(format!("segment [{}, {}] is empty", c.s_start, c.s_end)));
            }
        }
        for pair in segments.windows(2) {
            let (a, b) = (&pair[0].centreline, &pair[1].centreline);
            if (a.s_end - b.s_start).abs() > 1e-9 {
                return Err(Error::Degenerate(format!(
                    "segments not contiguous: {} vs {}",
                    a.s_end, b.s_start
                )));
            }
            let jump = a.heading_local(a.s_end - a.s_start) - b.heading_local(0.0);
            if jump.abs() > 1e-6 {
                return Err(Error::Degenerate(format!("centreline angle jumps by {jump} rad at s = {}", b.s_start)));
            }
        }
        let mut map = Self { segments, samples: Vec::new() };
        map.samples = map.sample_centreline();
        Ok(map)
    }

    /// Straight road along the global X axis.
    pub fn straight(length: f64, left: f64, right: f64) -> Result<Self> {
        if !(length > 0.0) || !(left > right) {
            return Err(Error::Degenerate("straight road needs positive length and left > right".into()));
        }
        Self::from_segments(vec![RoadSegment {
            centreline: CentrelineSegment { s_start: 0.0, s_end: length, theta: [0.0; 4], x0: 0.0, y0: 0.0 },
            boundaries: BoundaryPolynomials::constant(left, right),
        }])
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn length(&self) -> f64 {
        self.segments.last().map(|s| s.centreline.s_end).unwrap_or(0.0)
    }

    pub fn to_source(&self) -> RoadSource {
        RoadSource::Segments { segments: self.segments.clone() }
    }

    fn locate(&self, s: f64) -> Result<(&RoadSegment, f64)> {
        let length = self.length();
        if !(s >= -RANGE_TOL && s <= length + RANGE_TOL) {
            return Err(Error::OutOfRange { s, length });
        }
        let i = self
            .segments
            .partition_point(|seg| seg.centreline.s_start <= s)
            .saturating_sub(1);
        let seg = &self.segments[i];
        Ok((seg, s - seg.centreline.s_start))
    }

    fn clamp(&self, s: f64) -> f64 {
        s.clamp(0.0, self.length())
    }

    pub fn heading_at(&self, s: f64) -> Result<f64> {
        let (seg, u) = self.locate(s)?;
        Ok(seg.centreline.heading_local(u))
    }

    pub fn curvature_at(&self, s: f64) -> Result<f64> {
        let (seg, u) = self.locate(s)?;
        Ok(seg.centreline.curvature_local(u))
    }

    /// Curvature with `s` clamped into the map; used inside prediction horizons
    /// that may run past the mapped region.
    pub fn curvature_clamped(&self, s: f64) -> f64 {
        let s = if s.is_finite() { self.clamp(s) } else { 0.0 };
        self.curvature_at(s).unwrap_or(0.0)
    }

    /// (left, right) lateral limits at `s`.
    pub fn boundaries_at(&self, s: f64) -> Result<(f64, f64)> {
        let (seg, u) = self.locate(s)?;
        Ok((eval_desc(&seg.boundaries.left, u), eval_desc(&seg.boundaries.right, u)))
    }

    /// Limits and their s-derivatives with `s` clamped into the map.
    pub fn boundaries_with_slope_clamped(&self, s: f64) -> ((f64, f64), (f64, f64)) {
        let inside = s.is_finite() && s >= 0.0 && s <= self.length();
        let sc = if s.is_finite() { self.clamp(s) } else { 0.0 };
        let (seg, u) = self.locate(sc).expect("clamped abscissa is in range");
        let b = &seg.boundaries;
        let values = (eval_desc(&b.left, u), eval_desc(&b.right, u));
        let slopes = if inside { (slope_desc(&b.left, u), slope_desc(&b.right, u)) } else { (0.0, 0.0) };
        (values, slopes)
    }

    pub fn centreline_point(&self, s: f64) -> Result<(f64, f64)> {
        let (seg, u) = self.locate(s)?;
        Ok(seg.centreline.position_local(u))
    }

    pub fn curvilinear_to_global(&self, s: f64, y: f64, xi: f64) -> Result<(f64, f64, f64)> {
        let (seg, u) = self.locate(s)?;
        let (cx, cy) = seg.centreline.position_local(u);
        let theta = seg.centreline.heading_local(u);
        let (st, ct) = theta.sin_cos();
        Ok((cx - y * st, cy + y * ct, theta + xi))
    }

    pub fn global_to_curvilinear(&self, x: f64, y: f64, psi: f64) -> Result<(f64, f64, f64)> {
        let seed = self
            .samples
            .iter()
            .min_by(|a, b| {
                let da = (a.1 - x).powi(2) + (a.2 - y).powi(2);
                let db = (b.1 - x).powi(2) + (b.2 - y).powi(2);
                da.total_cmp(&db)
            })
            .ok_or_else(|| Error::Projection("empty road map".into()))?;
        let length = self.length();
        let mut s = seed.0;
        for _ in 0..50 {
            let (seg, u) = self.locate(s)?;
            let (cx, cy) = seg.centreline.position_local(u);
            let theta = seg.centreline.heading_local(u);
            let (st, ct) = theta.sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            let along = dx * ct + dy * st;
            let lateral = -dx * st + dy * ct;
            let denom = 1.0 - seg.centreline.curvature_local(u) * lateral;
            if denom.abs() < 1e-6 {
                return Err(Error::Projection(format!("point at the centre of curvature near s = {s}")));
            }
            let step = along / denom;
            let next = s + step;
            if next < -RANGE_TOL || next > length + RANGE_TOL {
                return Err(Error::Projection(format!(
                    "no orthogonal centreline point within the map (s -> {next})"
                )));
            }
            s = next.clamp(0.0, length);
            if step.abs() < 1e-12 {
                break;
            }
        }
        let (seg, u) = self.locate(s)?;
        let (cx, cy) = seg.centreline.position_local(u);
        let theta = seg.centreline.heading_local(u);
        let (st, ct) = theta.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let along = dx * ct + dy * st;
        if along.abs() > 1e-7 {
            return Err(Error::Projection(format!("orthogonality residual {along:e} at s = {s}")));
        }
        Ok((s, -dx * st + dy * ct, wrap_angle(psi - theta)))
    }

    fn sample_centreline(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for seg in &self.segments {
            let c = &seg.centreline;
            let n = ((c.s_end - c.s_start) / SAMPLE_SPACING).ceil().max(1.0) as usize;
            let mut prev = (c.x0, c.y0);
            out.push((c.s_start, prev.0, prev.1));
            for k in 1..=n {
                let (u0, u1) = ((k - 1) as f64, k as f64);
                let width = (c.s_end - c.s_start) / n as f64;
                let sub = CentrelineSegment {
                    s_start: 0.0,
                    s_end: width,
                    theta: shift_asc(&c.theta, u0 * width),
                    x0: prev.0,
                    y0: prev.1,
                };
                prev = sub.position_local(width);
                out.push((c.s_start + u1 * width, prev.0, prev.1));
            }
        }
        out
    }

    /// Fit a road map to a centreline polyline with per-point corridor widths
    /// (`left` positive to the left, `right` positive to the right).
    pub fn fit_from_polyline(points: &[(f64, f64)], left: &[f64], right: &[f64]) -> Result<Self> {
        if points.len() < 8 {
            return Err(Error::Degenerate(format!("need at least 8 polyline points, got {}", points.len())));
        }
        if left.len() != points.len() || right.len() != points.len() {
            return Err(Error::Degenerate("width arrays must match the polyline length".into()));
        }
        let n = points.len();
        let mut arc = vec![0.0; n];
        let mut chord_angle = vec![0.0; n - 1];
        for i in 1..n {
            let (dx, dy) = (points[i].0 - points[i - 1].0, points[i].1 - points[i - 1].1);
            let ds = dx.hypot(dy);
            if ds < 1e-9 {
                return Err(Error::Degenerate(format!("duplicate polyline points at index {i}")));
            }
            arc[i] = arc[i - 1] + ds;
            chord_angle[i - 1] = dy.atan2(dx);
        }
        unwrap_angles(&mut chord_angle)?;
        // Tangent at interior points: direction of the chord spanning both
        // neighbours. Endpoints: reflect the neighbouring tangent about the
        // end chord (exact for circular arcs).
        let mut theta = vec![0.0; n];
        for i in 1..n - 1 {
            let (dx, dy) = (points[i + 1].0 - points[i - 1].0, points[i + 1].1 - points[i - 1].1);
            let raw = dy.atan2(dx);
            let reference = 0.5 * (chord_angle[i - 1] + chord_angle[i]);
            theta[i] = reference + wrap_angle(raw - reference);
        }
        theta[0] = 2.0 * chord_angle[0] - theta[1];
        theta[n - 1] = 2.0 * chord_angle[n - 2] - theta[n - 2];

        let total = arc[n - 1];
        let n_seg = (total / FIT_SEGMENT).ceil().max(1.0) as usize;
        let mut breaks: Vec<f64> = (0..=n_seg).map(|k| total * k as f64 / n_seg as f64).collect();
        breaks[n_seg] = total;

        let data = FitData { arc: &arc, theta: &theta, left, right };
        let mut segments = Vec::new();
        let mut anchor = points[0];
        let mut c0: Option<f64> = None;
        let mut k = 0;
        while k + 1 < breaks.len() {
            let (a, b) = (breaks[k], breaks[k + 1]);
            let fitted = data.fit_segment(a, b, c0, anchor)?;
            if fitted.angle_residual > FIT_ANGLE_TOL && b - a > 2.0 * FIT_MIN_SEGMENT {
                breaks.insert(k + 1, 0.5 * (a + b));
                continue;
            }
            if fitted.angle_residual > FIT_ANGLE_TOL || fitted.width_residual > FIT_WIDTH_TOL {
                return Err(Error::Degenerate(format!(
                    "cubic fit on [{a:.2}, {b:.2}] misses tolerances: angle {:.4} rad, width {:.4} m",
                    fitted.angle_residual, fitted.width_residual
                )));
            }
            let seg = fitted.segment;
            let u_end = b - a;
            c0 = Some(seg.centreline.heading_local(u_end));
            anchor = seg.centreline.position_local(u_end);
            segments.push(seg);
            k += 1;
        }
        let map = Self::from_segments(segments)?;
        for seg in &map.segments {
            let c = &seg.centreline;
            let steps = 20;
            for j in 0..=steps {
                let u = (c.s_end - c.s_start) * j as f64 / steps as f64;
                let kappa = c.curvature_local(u).abs();
                let half = eval_desc(&seg.boundaries.left, u).abs().max(eval_desc(&seg.boundaries.right, u).abs());
                if kappa * half >= 0.5 {
                    return Err(Error::Degenerate(format!(
                        "corridor self-intersects near s = {:.2} (curvature {kappa:.4}, half-width {half:.2})",
                        c.s_start + u
                    )));
                }
            }
        }
        Ok(map)
    }

    /// Largest absolute difference between the map's centreline angle and the
    /// tangent angle estimated from the polyline at its points.
    pub fn centreline_fit_residual(&self, points: &[(f64, f64)]) -> f64 {
        let mut worst: f64 = 0.0;
        let mut s = 0.0;
        for i in 1..points.len() - 1 {
            let (dx, dy) = (points[i].0 - points[i - 1].0, points[i].1 - points[i - 1].1);
            s += dx.hypot(dy);
            let (tx, ty) = (points[i + 1].0 - points[i - 1].0, points[i + 1].1 - points[i - 1].1);
            if let Ok(h) = self.heading_at(s.min(self.length())) {
                worst = worst.max(wrap_angle(ty.atan2(tx) - h).abs());
            }
        }
        worst
    }
}

const FIT_SEGMENT: f64 = 25.0;
const FIT_OVERLAP: f64 = 5.0;
const FIT_MIN_SEGMENT: f64 = 3.0;
const FIT_ANGLE_TOL: f64 = 0.02;
const FIT_WIDTH_TOL: f64 = 0.05;

struct FitData<'a> {
    arc: &'a [f64],
    theta: &'a [f64],
    left: &'a [f64],
    right: &'a [f64],
}

struct FittedSegment {
    segment: RoadSegment,
    angle_residual: f64,
    width_residual: f64,
}

impl FitData<'_> {
    fn window(&self, a: f64, b: f64) -> Vec<usize> {
        // shorter segments (after adaptive splitting) borrow proportionally less
        let overlap = FIT_OVERLAP.min(0.2 * (b - a));
        let mut lo = a - overlap;
        let mut hi = b + overlap;
        loop {
            let idx: Vec<usize> = (0..self.arc.len()).filter(|&i| self.arc[i] >= lo && self.arc[i] <= hi).collect();
            if idx.len() >= 6 || (lo <= self.arc[0] && hi >= *self.arc.last().unwrap()) {
                return idx;
            }
            lo -= overlap.max(1.0);
            hi += overlap.max(1.0);
        }
    }

    fn fit_segment(&self, a: f64, b: f64, c0: Option<f64>, anchor: (f64, f64)) -> Result<FittedSegment> {
        let idx = self.window(a, b);
        let scale = (b - a).max(1.0);
        let us: Vec<f64> = idx.iter().map(|&i| (self.arc[i] - a) / scale).collect();
        let thetas: Vec<f64> = idx.iter().map(|&i| self.theta[i]).collect();
        let theta_coeffs = match c0 {
            Some(c0) => {
                let rhs: Vec<f64> = thetas.iter().map(|t| t - c0).collect();
                let c = least_squares(&us, &rhs, &[1, 2, 3])?;
                [c0, c[0], c[1], c[2]]
            }
            None => {
                let c = least_squares(&us, &thetas, &[0, 1, 2, 3])?;
                [c[0], c[1], c[2], c[3]]
            }
        };
        let theta = [
            theta_coeffs[0],
            theta_coeffs[1] / scale,
            theta_coeffs[2] / scale.powi(2),
            theta_coeffs[3] / scale.powi(3),
        ];
        let fit_width = |w: &[f64], sign: f64| -> Result<([f64; 4], f64)> {
            let vals: Vec<f64> = idx.iter().map(|&i| sign * w[i]).collect();
            let c = least_squares(&us, &vals, &[0, 1, 2, 3])?;
            let desc = [c[3] / scale.powi(3), c[2] / scale.powi(2), c[1] / scale, c[0]];
            let resid = idx
                .iter()
                .zip(vals.iter())
                .filter(|(&i, _)| self.arc[i] >= a - 1e-9 && self.arc[i] <= b + 1e-9)
                .map(|(&i, v)| (eval_desc(&desc, self.arc[i] - a) - v).abs())
                .fold(0.0, f64::max);
            Ok((desc, resid))
        };
        let (left, rl) = fit_width(self.left, 1.0)?;
        let (right, rr) = fit_width(self.right, -1.0)?;
        let centreline = CentrelineSegment { s_start: a, s_end: b, theta, x0: anchor.0, y0: anchor.1 };
        let angle_residual = idx
            .iter()
            .filter(|&&i| self.arc[i] >= a - 1e-9 && self.arc[i] <= b + 1e-9)
            .map(|&i| (centreline.heading_local(self.arc[i] - a) - self.theta[i]).abs())
            .fold(0.0, f64::max);
        Ok(FittedSegment {
            segment: RoadSegment { centreline, boundaries: BoundaryPolynomials { left, right } },
            angle_residual,
            width_residual: rl.max(rr),
        })
    }
}

fn least_squares(us: &[f64], values: &[f64], powers: &[i32]) -> Result<Vec<f64>> {
    let rows = us.len();
    if rows < powers.len() {
        return Err(Error::Degenerate(format!("{rows} points cannot determine {} coefficients", powers.len())));
    }
    let a = DMatrix::from_fn(rows, powers.len(), |i, j| us[i].powi(powers[j]));
    let b = DVector::from_column_slice(values);
    let svd = a.svd(true, true);
    let sol = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::Degenerate(format!("least-squares fit failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

fn shift_asc(c: &[f64; 4], u0: f64) -> [f64; 4] {
    [
        c[0] + u0 * (c[1] + u0 * (c[2] + u0 * c[3])),
        c[1] + 2.0 * c[2] * u0 + 3.0 * c[3] * u0 * u0,
        c[2] + 3.0 * c[3] * u0,
        c[3],
    ]
}

fn unwrap_angles(angles: &mut [f64]) -> Result<()> {
    for i in 1..angles.len() {
        let d = wrap_angle(angles[i] - angles[i - 1]);
        if d.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::Degenerate(format!("polyline turns by {d:.3} rad between consecutive chords")));
        }
        angles[i] = angles[i - 1] + d;
    }
    Ok(())
}

/// Wrap to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}
