use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Inside-or-on test for a convex polygon with counter-clockwise vertices.
pub(crate) fn inside_convex(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    (0..n).all(|i| cross(poly[i], poly[(i + 1) % n], p) >= 0.0)
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0) };
    ((a.x + t * dx - p.x).powi(2) + (a.y + t * dy - p.y).powi(2)).sqrt()
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0))
}

/// Euclidean distance between two convex polygons (0 if they intersect).
pub fn polygon_distance(a: &[Point], b: &[Point]) -> f64 {
    if a.iter().any(|&p| inside_convex(b, p)) || b.iter().any(|&p| inside_convex(a, p)) {
        return 0.0;
    }
    let edges = |p: &[Point]| -> Vec<(Point, Point)> { (0..p.len()).map(|i| (p[i], p[(i + 1) % p.len()])).collect() };
    let (ea, eb) = (edges(a), edges(b));
    if ea.iter().any(|&(p, q)| eb.iter().any(|&(r, s)| segments_cross(p, q, r, s))) {
        return 0.0;
    }
    let one_way = |pts: &[Point], es: &[(Point, Point)]| {
        pts.iter()
            .flat_map(|&p| es.iter().map(move |&(s, t)| point_segment_distance(p, s, t)))
            .fold(f64::INFINITY, f64::min)
    };
    one_way(a, &eb).min(one_way(b, &ea))
}
