use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineColor {
    White,
    Yellow,
}

/// How to obtain a track: a named preset or an explicit centerline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrackSpec {
    Preset(String),
    Points {
        points: Vec<(f64, f64)>,
        #[serde(default = "default_lane_width")]
        lane_width: f64,
        #[serde(default)]
        is_loop: bool,
    },
}

impl Default for TrackSpec {
    fn default() -> Self {
        TrackSpec::Preset("oval".into())
    }
}

fn default_lane_width() -> f64 {
    1.5
}

fn default_line_width() -> f64 {
    0.1
}

/// Centerline polyline with lane markings on both sides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Track {
    pub centerline: Vec<(f64, f64)>,
    pub lane_width: f64,
    #[serde(default = "default_line_width")]
    pub line_width: f64,
    pub left_line: LineColor,
    pub right_line: LineColor,
    pub is_loop: bool,
    #[serde(skip)]
    index: OnceLock<SegmentIndex>,
}

impl PartialEq for Track {
    fn eq(&self, other: &Self) -> bool {
        self.centerline == other.centerline
            && self.lane_width == other.lane_width
            && self.line_width == other.line_width
            && self.left_line == other.left_line
            && self.right_line == other.right_line
            && self.is_loop == other.is_loop
    }
}

/// Nearest point of the centerline to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub segment: usize,
    /// Arc length of the foot point from the first centerline point.
    pub s: f64,
    /// Signed distance, positive to the left of the direction of travel.
    pub offset: f64,
    /// Unit direction of the nearest segment.
    pub dir: (f64, f64),
}

const CELL_M: f64 = 1.0;

#[derive(Debug, Clone)]
struct SegmentIndex {
    reach: f64,
    cells: HashMap<(i64, i64), Vec<u32>>,
    cumulative: Vec<f64>,
}

impl Track {
    pub fn new(centerline: Vec<(f64, f64)>, lane_width: f64, is_loop: bool) -> Result<Self> {
        let t = Self {
            centerline,
            lane_width,
            line_width: default_line_width(),
            left_line: LineColor::Yellow,
            right_line: LineColor::White,
            is_loop,
            index: OnceLock::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centerline.len() < 2 {
            return Err(Error::Config(format!(
                "track needs at least 2 centerline points, got {}",
                self.centerline.len()
            )));
        }
        if !(self.lane_width > 0.0) || !(self.line_width > 0.0) {
            return Err(Error::Config(
                "lane_width and line_width must be > 0".into(),
            ));
        }
        for (i, w) in self.centerline.windows(2).enumerate() {
            if w[0] == w[1] {
                return Err(Error::Config(format!(
                    "centerline points {i} and {} coincide",
                    i + 1
                )));
            }
        }
        if self.is_loop && self.centerline.first() == self.centerline.last() {
            return Err(Error::Config(
                "closed tracks must not repeat the first point".into(),
            ));
        }
        Ok(())
    }

    pub fn segment_count(&self) -> usize {
        if self.is_loop {
            self.centerline.len()
        } else {
            self.centerline.len() - 1
        }
    }

    pub fn segment(&self, i: usize) -> ((f64, f64), (f64, f64)) {
        let n = self.centerline.len();
        (self.centerline[i], self.centerline[(i + 1) % n])
    }

    /// Total centerline length, including the closing segment of a loop.
    pub fn length(&self) -> f64 {
        *self.index().cumulative.last().unwrap()
    }

    fn index(&self) -> &SegmentIndex {
        self.index.get_or_init(|| SegmentIndex::build(self))
    }

    /// Distance up to which [`Track::project_near`] answers.
    pub fn near_reach(&self) -> f64 {
        self.index().reach
    }

    /// Exact projection over every segment.
    pub fn project(&self, p: (f64, f64)) -> Projection {
        let idx = self.index();
        let mut best: Option<(f64, Projection)> = None;
        for i in 0..self.segment_count() {
            let (d2, proj) = self.project_on(i, p, &idx.cumulative);
            if best.as_ref().is_none_or(|(bd, _)| d2 < *bd) {
                best = Some((d2, proj));
            }
        }
        best.unwrap().1
    }

    /// Projection restricted to segments within [`Track::near_reach`]; `None`
    /// means the point is farther than that from the centerline.
    pub fn project_near(&self, p: (f64, f64)) -> Option<Projection> {
        let idx = self.index();
        let key = cell_of(p);
        let candidates = idx.cells.get(&key)?;
        let mut best: Option<(f64, Projection)> = None;
        for &i in candidates {
            let (d2, proj) = self.project_on(i as usize, p, &idx.cumulative);
            if best.as_ref().is_none_or(|(bd, _)| d2 < *bd) {
                best = Some((d2, proj));
            }
        }
        let (d2, proj) = best?;
        (d2.sqrt() <= idx.reach).then_some(proj)
    }

    fn project_on(&self, i: usize, p: (f64, f64), cumulative: &[f64]) -> (f64, Projection) {
        let (a, b) = self.segment(i);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let len = len2.sqrt();
        let (px, py) = (p.0 - a.0, p.1 - a.1);
        let tt = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
        let (fx, fy) = (a.0 + tt * dx, a.1 + tt * dy);
        let (ex, ey) = (p.0 - fx, p.1 - fy);
        let d2 = ex * ex + ey * ey;
        let cross = dx * py - dy * px;
        let dist = d2.sqrt();
        let offset = if cross >= 0.0 { dist } else { -dist };
        (
            d2,
            Projection {
                segment: i,
                s: cumulative[i] + tt * len,
                offset,
                dir: (dx / len, dy / len),
            },
        )
    }

    /// Point at arc length `s` (wrapped for loops, clamped for open tracks)
    /// together with the unit direction there.
    pub fn point_at(&self, s: f64) -> ((f64, f64), (f64, f64)) {
        let cumulative = &self.index().cumulative;
        let total = *cumulative.last().unwrap();
        let s = if self.is_loop {
            s.rem_euclid(total)
        } else {
            s.clamp(0.0, total)
        };
        let i = match cumulative.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.segment_count() - 1),
            Err(i) => i.saturating_sub(1).min(self.segment_count() - 1),
        };
        let (a, b) = self.segment(i);
        let len = cumulative[i + 1] - cumulative[i];
        let tt = ((s - cumulative[i]) / len).clamp(0.0, 1.0);
        let dir = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        ((a.0 + tt * (b.0 - a.0), a.1 + tt * (b.1 - a.1)), dir)
    }

    /// Signed curvature (1/m, positive turning left) estimated over `span` meters at `s`.
    pub fn curvature_at(&self, s: f64, span: f64) -> f64 {
        let (_, d0) = self.point_at(s - span / 2.0);
        let (_, d1) = self.point_at(s + span / 2.0);
        let a0 = d0.1.atan2(d0.0);
        let a1 = d1.1.atan2(d1.0);
        crate::vehiclesim::wrap_angle(a1 - a0) / span
    }

    /// Start pose: first centerline point facing along the first segment.
    pub fn start_pose(&self) -> (f64, f64, f64) {
        let (a, b) = self.segment(0);
        (a.0, a.1, (b.1 - a.1).atan2(b.0 - a.0))
    }
}

fn cell_of(p: (f64, f64)) -> (i64, i64) {
    ((p.0 / CELL_M).floor() as i64, (p.1 / CELL_M).floor() as i64)
}

impl SegmentIndex {
    fn build(track: &Track) -> Self {
        let reach = track.lane_width / 2.0 + track.line_width.max(super::WALL_MARGIN_MAX) + 1.0;
        let mut cumulative = Vec::with_capacity(track.segment_count() + 1);
        cumulative.push(0.0);
        let mut cells: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for i in 0..track.segment_count() {
            let (a, b) = track.segment(i);
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            cumulative.push(cumulative[i] + len);
            let lo = cell_of((a.0.min(b.0) - reach, a.1.min(b.1) - reach));
            let hi = cell_of((a.0.max(b.0) + reach, a.1.max(b.1) + reach));
            for cx in lo.0..=hi.0 {
                for cy in lo.1..=hi.1 {
                    cells.entry((cx, cy)).or_default().push(i as u32);
                }
            }
        }
        Self {
            reach,
            cells,
            cumulative,
        }
    }
}

fn arc(center: (f64, f64), radius: f64, from: f64, to: f64, step_m: f64) -> Vec<(f64, f64)> {
    let sweep = to - from;
    let n = ((sweep.abs() * radius) / step_m).ceil().max(1.0) as usize;
    (0..n)
        .map(|k| {
            let a = from + sweep * k as f64 / n as f64;
            (center.0 + radius * a.cos(), center.1 + radius * a.sin())
        })
        .collect()
}

fn line(a: (f64, f64), b: (f64, f64), step_m: f64) -> Vec<(f64, f64)> {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let n = (len / step_m).ceil().max(1.0) as usize;
    (0..n)
        .map(|k| {
            let f = k as f64 / n as f64;
            (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
        })
        .collect()
}

/// Build a track from a preset name (`oval`, `drag`, `scurve`) or a point list.
pub fn build_track(spec: &TrackSpec) -> Result<Track> {
    const STEP: f64 = 0.5;
    match spec {
        TrackSpec::Preset(name) => match name.as_str() {
            "oval" => {
                // counter-clockwise: 20 m straights joined by 8 m radius turns,
                // starting mid-way along the bottom straight
                let (half, r) = (10.0, 8.0);
                let mut pts = line((0.0, -r), (half, -r), STEP);
                pts.extend(arc((half, 0.0), r, -PI / 2.0, PI / 2.0, STEP));
                pts.extend(line((half, r), (-half, r), STEP));
                pts.extend(arc((-half, 0.0), r, PI / 2.0, 3.0 * PI / 2.0, STEP));
                pts.extend(line((-half, -r), (0.0, -r), STEP));
                Track::new(pts, 1.5, true)
            }
            "drag" => {
                let mut pts = line((0.0, 0.0), (40.0, 0.0), STEP);
                pts.push((40.0, 0.0));
                Track::new(pts, 1.5, false)
            }
            "scurve" => {
                let r = 10.0;
                let turn = PI / 3.0;
                let mut pts = line((0.0, 0.0), (5.0, 0.0), STEP);
                // left arc centered above, then right arc mirrored
                let c1 = (5.0, r);
                pts.extend(arc(c1, r, -PI / 2.0, -PI / 2.0 + turn, STEP));
                let p1 = (
                    c1.0 + r * (turn - PI / 2.0).cos(),
                    c1.1 + r * (turn - PI / 2.0).sin(),
                );
                let c2 = (2.0 * p1.0 - c1.0, 2.0 * p1.1 - c1.1);
                pts.extend(arc(c2, r, PI / 2.0 + turn, PI / 2.0, STEP));
                let p2 = (c2.0, c2.1 - r);
                pts.extend(line(p2, (p2.0 + 5.0, p2.1), STEP));
                pts.push((p2.0 + 5.0, p2.1));
                Track::new(pts, 1.5, false)
            }
            other => Err(Error::Config(format!(
                "unknown track preset {other:?} (expected oval, drag or scurve)"
            ))),
        },
        TrackSpec::Points {
            points,
            lane_width,
            is_loop,
        } => Track::new(points.clone(), *lane_width, *is_loop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let drag = build_track(&TrackSpec::Preset("drag".into())).unwrap();
        assert!(!drag.is_loop);
        assert!((drag.length() - 40.0).abs() < 1e-9);
        assert_eq!(drag.lane_width, 1.5);

        let oval = build_track(&TrackSpec::Preset("oval".into())).unwrap();
        assert!(oval.is_loop);
        let expected = 40.0 + 2.0 * PI * 8.0;
        assert!((oval.length() - expected).abs() < 0.2, "{}", oval.length());

        let s = build_track(&TrackSpec::Preset("scurve".into())).unwrap();
        assert!(s.length() > 20.0);
    }

    #[test]
    fn bad_specs() {
        assert!(matches!(
            build_track(&TrackSpec::Preset("figure8".into())),
            Err(Error::Config(_))
        ));
        let one = TrackSpec::Points {
            points: vec![(0.0, 0.0)],
            lane_width: 1.0,
            is_loop: false,
        };
        assert!(build_track(&one).is_err());
        let dup = TrackSpec::Points {
            points: vec![(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)],
            lane_width: 1.0,
            is_loop: false,
        };
        assert!(build_track(&dup).is_err());
    }

    #[test]
    fn projection_sign_and_arc_length() {
        let drag = build_track(&TrackSpec::Preset("drag".into())).unwrap();
        let p = drag.project((12.3, 0.2));
        assert!((p.offset - 0.2).abs() < 1e-12);
        assert!((p.s - 12.3).abs() < 1e-9);
        assert!((drag.project((3.0, -0.4)).offset + 0.4).abs() < 1e-12);
        let near = drag.project_near((12.3, 0.2)).unwrap();
        assert_eq!(near.offset, p.offset);
        assert!(drag.project_near((12.0, 30.0)).is_none());
    }

    #[test]
    fn oval_curvature_left() {
        let oval = build_track(&TrackSpec::Preset("oval".into())).unwrap();
        // first turn starts 10 m in; sample in its middle
        let k = oval.curvature_at(10.0 + PI * 4.0, 2.0);
        assert!((k - 1.0 / 8.0).abs() < 0.01, "{k}");
        assert!(oval.curvature_at(5.0, 2.0).abs() < 1e-9);
    }

    #[test]
    fn track_json_round_trip() {
        let oval = build_track(&TrackSpec::Preset("oval".into())).unwrap();
        let s = serde_json::to_string(&oval).unwrap();
        let back: Track = serde_json::from_str(&s).unwrap();
        assert_eq!(back, oval);
    }
}
