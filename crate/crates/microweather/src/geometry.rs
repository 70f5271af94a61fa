//! Geographic primitives: great-circle distance, a local planar projection
//! shared by the triangulation and the interpolation baseline, and an
//! incremental Delaunay triangulation.

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Meters per degree of latitude on the sphere used throughout
/// (2 * pi * R / 360).
pub const METERS_PER_DEG_LAT: f64 = 2.0 * std::f64::consts::PI * EARTH_RADIUS_KM * 1000.0 / 360.0;

/// Great-circle distance in kilometers (haversine form).
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Equirectangular projection around a reference latitude, in kilometers.
/// Adequate for the regional extents this engine works at; the same plane
/// is used for triangulation and for the interpolation baseline so their
/// geometry agrees.
#[derive(Debug, Clone, Copy)]
pub struct LocalPlane {
    pub ref_lat_deg: f64,
    cos_ref: f64,
}

impl LocalPlane {
    pub fn new(ref_lat_deg: f64) -> Self {
        LocalPlane { ref_lat_deg, cos_ref: ref_lat_deg.to_radians().cos() }
    }

    /// Plane centered at the mean latitude of the given points.
    pub fn fit(points: &[(f64, f64)]) -> Self {
        let mean = if points.is_empty() {
            0.0
        } else {
            points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64
        };
        LocalPlane::new(mean)
    }

    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let km_per_deg = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        (lon * self.cos_ref * km_per_deg, lat * km_per_deg)
    }
}

/// Triangle as indices into the point list, sorted ascending.
pub type Triangle = [usize; 3];

/// Result of triangulating a point set.
#[derive(Debug, Clone)]
pub struct Delaunay {
    pub triangles: Vec<Triangle>,
    /// Undirected adjacency: edges[i] holds every j sharing a triangle edge
    /// with i, sorted.
    pub edges: Vec<Vec<usize>>,
}

/// Signed doubled area of triangle abc; positive when counter-clockwise.
fn orient2d(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// Strictly-inside test for point p against the circumcircle of ccw
/// triangle abc, via the standard 3x3 lifted determinant. A relative
/// margin keeps exactly-cocircular configurations from flip-flopping.
fn in_circumcircle(a: (f64, f64), b: (f64, f64), c: (f64, f64), p: (f64, f64)) -> bool {
    let (ax, ay) = (a.0 - p.0, a.1 - p.1);
    let (bx, by) = (b.0 - p.0, b.1 - p.1);
    let (cx, cy) = (c.0 - p.0, c.1 - p.1);
    let t0 = (ax * ax + ay * ay) * (bx * cy - cx * by);
    let t1 = (bx * bx + by * by) * (ax * cy - cx * ay);
    let t2 = (cx * cx + cy * cy) * (ax * by - bx * ay);
    let det = t0 - t1 + t2;
    det > 1e-12 * (t0.abs() + t1.abs() + t2.abs())
}

/// Circumcircle center and squared radius; None for degenerate triangles.
pub fn circumcircle(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Option<((f64, f64), f64)> {
    let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
    if d.abs() < 1e-12 {
        return None;
    }
    let a2 = a.0 * a.0 + a.1 * a.1;
    let b2 = b.0 * b.0 + b.1 * b.1;
    let c2 = c.0 * c.0 + c.1 * c.1;
    let ux = (a2 * (b.1 - c.1) + b2 * (c.1 - a.1) + c2 * (a.1 - b.1)) / d;
    let uy = (a2 * (c.0 - b.0) + b2 * (a.0 - c.0) + c2 * (b.0 - a.0)) / d;
    let r2 = (a.0 - ux) * (a.0 - ux) + (a.1 - uy) * (a.1 - uy);
    Some(((ux, uy), r2))
}

/// Delaunay triangulation via a lexicographic sweep followed by Lawson
/// edge flips. The sweep keeps every inserted point on or outside the
/// running convex hull, so no artificial bounding triangle is needed;
/// the flip phase then restores the empty-circumcircle property, which
/// is global once it holds across every interior edge.
///
/// Returns None when the input is degenerate (fewer than 3 points, exact
/// duplicates, or all points collinear); callers fall back to full
/// connectivity in that case.
pub fn triangulate(points: &[(f64, f64)]) -> Option<Delaunay> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].partial_cmp(&points[b]).unwrap());
    for w in order.windows(2) {
        if points[w[0]] == points[w[1]] {
            return None;
        }
    }
    let scale = {
        let (mut lo, mut hi) = ((f64::MAX, f64::MAX), (f64::MIN, f64::MIN));
        for p in points {
            lo = (lo.0.min(p.0), lo.1.min(p.1));
            hi = (hi.0.max(p.0), hi.1.max(p.1));
        }
        (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-12)
    };
    let area_eps = 1e-13 * scale * scale;

    // Sweep phase: connect each new point to the strictly visible arc of
    // the hull of everything inserted before it.
    let mut tris: Vec<[usize; 3]> = Vec::new();
    let mut inserted: Vec<usize> = vec![order[0], order[1]];
    let mut general = false;
    for &q in order.iter().skip(2) {
        if !general {
            let a = points[inserted[0]];
            let b = points[*inserted.last().unwrap()];
            if orient2d(a, b, points[q]).abs() <= area_eps {
                // Still collinear; lexicographic order keeps the chain
                // ordered along its line.
                inserted.push(q);
                continue;
            }
            let left = orient2d(a, b, points[q]) > 0.0;
            for w in inserted.windows(2) {
                tris.push(if left { [w[0], w[1], q] } else { [w[1], w[0], q] });
            }
            inserted.push(q);
            general = true;
            continue;
        }
        let hull = hull_ccw(&inserted, points);
        let m = hull.len();
        let mut connected = false;
        for i in 0..m {
            let (a, b) = (hull[i], hull[(i + 1) % m]);
            if orient2d(points[a], points[b], points[q]) < -area_eps {
                tris.push([a, q, b]);
                connected = true;
            }
        }
        if !connected {
            // Lex-max point strictly outside the hull always sees an edge;
            // reaching here means the set was numerically degenerate.
            return None;
        }
        inserted.push(q);
    }
    if !general {
        return None;
    }

    lawson_flips(points, &mut tris);

    let mut triangles: Vec<Triangle> = tris
        .into_iter()
        .map(|mut t| {
            t.sort_unstable();
            t
        })
        .collect();
    triangles.sort_unstable();
    triangles.dedup();

    let mut edges = vec![Vec::new(); n];
    for t in &triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[0], t[2])] {
            edges[a].push(b);
            edges[b].push(a);
        }
    }
    for e in &mut edges {
        e.sort_unstable();
        e.dedup();
    }
    Some(Delaunay { triangles, edges })
}

/// Convex hull (counter-clockwise, strict turns only) of the given point
/// indices; collinear boundary points are dropped. Andrew monotone chain.
fn hull_ccw(idx: &[usize], pts: &[(f64, f64)]) -> Vec<usize> {
    let mut sorted = idx.to_vec();
    sorted.sort_by(|&a, &b| pts[a].partial_cmp(&pts[b]).unwrap());
    let build = |iter: &mut dyn Iterator<Item = usize>| {
        let mut chain: Vec<usize> = Vec::new();
        for p in iter {
            while chain.len() >= 2 {
                let a = chain[chain.len() - 2];
                let b = chain[chain.len() - 1];
                if orient2d(pts[a], pts[b], pts[p]) <= 0.0 {
                    chain.pop();
                } else {
                    break;
                }
            }
            chain.push(p);
        }
        chain
    };
    let mut lower = build(&mut sorted.iter().copied());
    let mut upper = build(&mut sorted.iter().rev().copied());
    lower.pop();
    upper.pop();
    lower.append(&mut upper);
    lower
}

/// Flip interior edges until every one satisfies the local empty-
/// circumcircle criterion. Triangles are kept ccw throughout.
fn lawson_flips(pts: &[(f64, f64)], tris: &mut [[usize; 3]]) {
    use std::collections::BTreeMap;
    for t in tris.iter_mut() {
        if orient2d(pts[t[0]], pts[t[1]], pts[t[2]]) < 0.0 {
            t.swap(1, 2);
        }
    }
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut edge_tris: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (ti, t) in tris.iter().enumerate() {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            edge_tris.entry(key(a, b)).or_default().push(ti);
        }
    }
    let mut queue: std::collections::VecDeque<(usize, usize)> =
        edge_tris.keys().copied().collect();
    let mut budget = 64 * tris.len() * tris.len() + 4096;
    while let Some(e) = queue.pop_front() {
        if budget == 0 {
            break;
        }
        budget -= 1;
        let Some(owners) = edge_tris.get(&e) else { continue };
        if owners.len() != 2 {
            continue;
        }
        let (t1, t2) = (owners[0], owners[1]);
        let (u, v) = e;
        let a = *tris[t1].iter().find(|&&x| x != u && x != v).unwrap();
        let b = *tris[t2].iter().find(|&&x| x != u && x != v).unwrap();
        if a == b {
            continue;
        }
        let tri1 = tris[t1];
        if !in_circumcircle(pts[tri1[0]], pts[tri1[1]], pts[tri1[2]], pts[b]) {
            continue;
        }
        // Replace (u,v,a) and (u,v,b) with (u,a,b) and (v,a,b).
        let orient = |t: [usize; 3]| -> [usize; 3] {
            if orient2d(pts[t[0]], pts[t[1]], pts[t[2]]) < 0.0 {
                [t[0], t[2], t[1]]
            } else {
                t
            }
        };
        tris[t1] = orient([u, a, b]);
        tris[t2] = orient([v, a, b]);
        edge_tris.remove(&e);
        edge_tris.insert(key(a, b), vec![t1, t2]);
        let reassign = |map: &mut BTreeMap<(usize, usize), Vec<usize>>,
                        k: (usize, usize),
                        from: usize,
                        to: usize| {
            if let Some(list) = map.get_mut(&k) {
                for x in list.iter_mut() {
                    if *x == from {
                        *x = to;
                    }
                }
            }
        };
        reassign(&mut edge_tris, key(v, a), t1, t2);
        reassign(&mut edge_tris, key(u, b), t2, t1);
        for k in [key(u, a), key(v, a), key(u, b), key(v, b)] {
            queue.push_back(k);
        }
    }
}

impl Delaunay {
    /// Triangle containing (or on the boundary of) the query point, if any.
    pub fn locate(&self, points: &[(f64, f64)], q: (f64, f64)) -> Option<Triangle> {
        for t in &self.triangles {
            let (a, b, c) = (points[t[0]], points[t[1]], points[t[2]]);
            let d0 = orient2d(a, b, q);
            let d1 = orient2d(b, c, q);
            let d2 = orient2d(c, a, q);
            let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
            let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
            if !(has_neg && has_pos) {
                return Some(*t);
            }
        }
        None
    }
}
