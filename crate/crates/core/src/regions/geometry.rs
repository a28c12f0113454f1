//! Planar polygon primitives in lon/lat degrees.
//!
//! Containment uses the even-odd rule. Intersection areas are exact: the
//! boundary of `A ∩ B` is the part of `∂A` inside `B` plus the part of `∂B`
//! inside `A`, so the area follows from integrating the shoelace term over
//! those sub-segments (Green's theorem). Collinear shared edges are counted
//! once, and only when both polygons lie on the same side of them.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub lon: f64,
    pub lat: f64,
}

impl Coord {
    pub const fn new(lon: f64, lat: f64) -> Self {
        Coord { lon, lat }
    }

    fn sub(self, o: Coord) -> Coord {
        Coord::new(self.lon - o.lon, self.lat - o.lat)
    }

    fn lerp(self, o: Coord, t: f64) -> Coord {
        Coord::new(
            self.lon + (o.lon - self.lon) * t,
            self.lat + (o.lat - self.lat) * t,
        )
    }
}

fn cross(a: Coord, b: Coord) -> f64 {
    a.lon * b.lat - a.lat * b.lon
}

fn dot(a: Coord, b: Coord) -> f64 {
    a.lon * b.lon + a.lat * b.lat
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min: Coord,
    pub max: Coord,
}

impl BBox {
    pub fn empty() -> Self {
        BBox {
            min: Coord::new(f64::INFINITY, f64::INFINITY),
            max: Coord::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn extend(&mut self, c: Coord) {
        self.min.lon = self.min.lon.min(c.lon);
        self.min.lat = self.min.lat.min(c.lat);
        self.max.lon = self.max.lon.max(c.lon);
        self.max.lat = self.max.lat.max(c.lat);
    }

    pub fn union(&mut self, o: &BBox) {
        self.extend(o.min);
        self.extend(o.max);
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.lon >= self.min.lon && c.lon <= self.max.lon && c.lat >= self.min.lat && c.lat <= self.max.lat
    }

    pub fn intersects(&self, o: &BBox) -> bool {
        self.min.lon <= o.max.lon
            && o.min.lon <= self.max.lon
            && self.min.lat <= o.max.lat
            && o.min.lat <= self.max.lat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Inside,
    Boundary,
    Outside,
}

/// A polygon with one exterior ring and zero or more holes. Rings are closed
/// (first vertex repeated at the end).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<Coord>,
    pub holes: Vec<Vec<Coord>>,
}

impl Polygon {
    pub fn new(exterior: Vec<Coord>, holes: Vec<Vec<Coord>>) -> Self {
        Polygon { exterior, holes }
    }

    /// Axis-aligned rectangle, counter-clockwise.
    pub fn rect(min: Coord, max: Coord) -> Self {
        Polygon::new(
            vec![
                min,
                Coord::new(max.lon, min.lat),
                max,
                Coord::new(min.lon, max.lat),
                min,
            ],
            Vec::new(),
        )
    }

    pub fn rings(&self) -> impl Iterator<Item = &Vec<Coord>> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    pub fn bbox(&self) -> BBox {
        let mut b = BBox::empty();
        for c in &self.exterior {
            b.extend(*c);
        }
        b
    }

    /// Rings re-oriented so the exterior is counter-clockwise and holes are
    /// clockwise; signed shoelace sums then give the net area directly.
    pub fn oriented_rings(&self) -> Vec<Vec<Coord>> {
        let mut out = Vec::with_capacity(1 + self.holes.len());
        let mut ext = self.exterior.clone();
        if ring_signed_area(&ext) < 0.0 {
            ext.reverse();
        }
        out.push(ext);
        for h in &self.holes {
            let mut h = h.clone();
            if ring_signed_area(&h) > 0.0 {
                h.reverse();
            }
            out.push(h);
        }
        out
    }

    pub fn area(&self) -> f64 {
        let origin = self.exterior[0];
        self.oriented_rings()
            .iter()
            .map(|r| ring_signed_area_about(r, origin))
            .sum()
    }

    /// Area centroid together with the net area.
    pub fn centroid_and_area(&self) -> (Coord, f64) {
        let origin = self.exterior[0];
        let mut a2 = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for ring in self.oriented_rings() {
            for w in ring.windows(2) {
                let p = w[0].sub(origin);
                let q = w[1].sub(origin);
                let c = cross(p, q);
                a2 += c;
                cx += (p.lon + q.lon) * c;
                cy += (p.lat + q.lat) * c;
            }
        }
        let area = a2 / 2.0;
        if area == 0.0 {
            return (origin, 0.0);
        }
        (
            Coord::new(origin.lon + cx / (6.0 * area), origin.lat + cy / (6.0 * area)),
            area,
        )
    }

    pub fn locate(&self, p: Coord) -> Location {
        let mut inside = false;
        for ring in self.rings() {
            for w in ring.windows(2) {
                if on_segment(p, w[0], w[1]) {
                    return Location::Boundary;
                }
            }
            if ring_crosses_odd(ring, p) {
                inside = !inside;
            }
        }
        if inside {
            Location::Inside
        } else {
            Location::Outside
        }
    }

    /// Widest horizontal interior interval over scanlines placed midway
    /// between consecutive distinct vertex latitudes. Returns its midpoint
    /// and width.
    pub fn widest_scanline_midpoint(&self) -> Option<(Coord, f64)> {
        let mut ys: Vec<f64> = self.rings().flat_map(|r| r.iter().map(|c| c.lat)).collect();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        let mut best: Option<(Coord, f64)> = None;
        for w in ys.windows(2) {
            let y = 0.5 * (w[0] + w[1]);
            let mut xs = Vec::new();
            for ring in self.rings() {
                for e in ring.windows(2) {
                    let (a, b) = (e[0], e[1]);
                    if (a.lat > y) != (b.lat > y) {
                        xs.push(a.lon + (y - a.lat) * (b.lon - a.lon) / (b.lat - a.lat));
                    }
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                let width = pair[1] - pair[0];
                if best.map_or(true, |(_, bw)| width > bw) {
                    best = Some((Coord::new(0.5 * (pair[0] + pair[1]), y), width));
                }
            }
        }
        best.filter(|(_, w)| *w > 0.0)
    }
}

pub fn ring_signed_area(ring: &[Coord]) -> f64 {
    match ring.first() {
        Some(&o) => ring_signed_area_about(ring, o),
        None => 0.0,
    }
}

fn ring_signed_area_about(ring: &[Coord], origin: Coord) -> f64 {
    ring.windows(2)
        .map(|w| cross(w[0].sub(origin), w[1].sub(origin)))
        .sum::<f64>()
        / 2.0
}

/// Even-odd crossing parity of a rightward ray from `p`.
fn ring_crosses_odd(ring: &[Coord], p: Coord) -> bool {
    let mut odd = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
            if p.lon < x {
                odd = !odd;
            }
        }
    }
    odd
}

const REL_EPS: f64 = 1e-9;

fn on_segment(p: Coord, a: Coord, b: Coord) -> bool {
    let d = b.sub(a);
    let len2 = dot(d, d);
    let ap = p.sub(a);
    if len2 == 0.0 {
        return ap.lon == 0.0 && ap.lat == 0.0;
    }
    if cross(d, ap).abs() > REL_EPS * len2 {
        return false;
    }
    let t = dot(ap, d) / len2;
    (-REL_EPS..=1.0 + REL_EPS).contains(&t)
}

/// Parameters in (0, 1) at which segment `p0→p1` meets any edge of `rings`.
fn split_params(p0: Coord, p1: Coord, rings: &[Vec<Coord>], out: &mut Vec<f64>) {
    let d = p1.sub(p0);
    let dd = dot(d, d);
    if dd == 0.0 {
        return;
    }
    for ring in rings {
        for w in ring.windows(2) {
            let (q0, q1) = (w[0], w[1]);
            let e = q1.sub(q0);
            let denom = cross(d, e);
            let w0 = q0.sub(p0);
            let scale = (dd * dot(e, e)).sqrt();
            if denom.abs() > 1e-12 * scale {
                let t = cross(w0, e) / denom;
                let u = cross(w0, d) / denom;
                if t > 0.0 && t < 1.0 && (-1e-12..=1.0 + 1e-12).contains(&u) {
                    out.push(t);
                }
            } else if cross(w0, d).abs() <= REL_EPS * dd {
                for q in [q0, q1] {
                    let t = dot(q.sub(p0), d) / dd;
                    if t > 0.0 && t < 1.0 {
                        out.push(t);
                    }
                }
            }
        }
    }
}

fn boundary_direction(rings: &[Vec<Coord>], p: Coord) -> Option<Coord> {
    rings.iter().find_map(|ring| {
        ring.windows(2)
            .find(|w| on_segment(p, w[0], w[1]))
            .map(|w| w[1].sub(w[0]))
    })
}

fn locate_in_rings(rings: &[Vec<Coord>], p: Coord) -> Location {
    let mut inside = false;
    for ring in rings {
        for w in ring.windows(2) {
            if on_segment(p, w[0], w[1]) {
                return Location::Boundary;
            }
        }
        if ring_crosses_odd(ring, p) {
            inside = !inside;
        }
    }
    if inside {
        Location::Inside
    } else {
        Location::Outside
    }
}

/// Twice the Green's-theorem contribution of `subject`'s boundary lying inside `clip`.
fn boundary_contribution(subject: &[Vec<Coord>], clip: &[Vec<Coord>], origin: Coord, shared: bool) -> f64 {
    let mut acc = 0.0;
    let mut ts = Vec::new();
    for ring in subject {
        for w in ring.windows(2) {
            let (p0, p1) = (w[0], w[1]);
            ts.clear();
            ts.push(0.0);
            ts.push(1.0);
            split_params(p0, p1, clip, &mut ts);
            ts.sort_by(f64::total_cmp);
            ts.dedup();
            for seg in ts.windows(2) {
                if seg[1] - seg[0] <= 1e-15 {
                    continue;
                }
                let s = p0.lerp(p1, seg[0]);
                let e = p0.lerp(p1, seg[1]);
                let mid = p0.lerp(p1, 0.5 * (seg[0] + seg[1]));
                let take = match locate_in_rings(clip, mid) {
                    Location::Inside => true,
                    Location::Outside => false,
                    Location::Boundary => {
                        shared && boundary_direction(clip, mid).is_some_and(|dir| dot(dir, p1.sub(p0)) > 0.0)
                    }
                };
                if take {
                    acc += cross(s.sub(origin), e.sub(origin));
                }
            }
        }
    }
    acc
}

/// Exact area of `a ∩ b` for polygons with holes.
pub fn intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    if !a.bbox().intersects(&b.bbox()) {
        return 0.0;
    }
    let ra = a.oriented_rings();
    let rb = b.oriented_rings();
    let origin = a.exterior[0];
    let twice = boundary_contribution(&ra, &rb, origin, true) + boundary_contribution(&rb, &ra, origin, false);
    (twice / 2.0).max(0.0)
}
