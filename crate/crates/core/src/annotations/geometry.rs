use super::{AnnotationError, Point, PolygonRoi, MIN_POLYGON_AREA};
use crate::wsi::WsiRecord;

/// Axis-aligned bounds, `min` inclusive, `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_x <= other.max_x && other.min_x <= self.max_x && self.min_y <= other.max_y && other.min_y <= self.max_y
    }
}

/// Shoelace sum / 2. Positive for counter-clockwise order in a y-up frame.
pub fn signed_area(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    // anchored at the first vertex to limit cancellation for far-off coordinates
    let o = vertices[0];
    let mut twice = 0.0;
    for i in 1..n - 1 {
        let (a, b) = (vertices[i], vertices[i + 1]);
        twice += (a.x - o.x) * (b.y - o.y) - (b.x - o.x) * (a.y - o.y);
    }
    twice / 2.0
}

pub fn polygon_area(roi: &PolygonRoi) -> Result<f64, AnnotationError> {
    let area = signed_area(&roi.vertices).abs();
    if !(area >= MIN_POLYGON_AREA) {
        return Err(AnnotationError::DegeneratePolygon {
            roi_id: roi.roi_id.clone(),
            area,
        });
    }
    Ok(area)
}

/// Area centroid. Falls back to the vertex mean for zero-area input.
pub fn centroid(vertices: &[Point]) -> Point {
    let n = vertices.len();
    let o = vertices[0];
    let (mut cx, mut cy, mut twice) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let a = Point::new(vertices[i].x - o.x, vertices[i].y - o.y);
        let b = Point::new(vertices[(i + 1) % n].x - o.x, vertices[(i + 1) % n].y - o.y);
        let cross = a.x * b.y - b.x * a.y;
        twice += cross;
        cx += (a.x + b.x) * cross;
        cy += (a.y + b.y) * cross;
    }
    if twice.abs() < 1e-12 {
        let (sx, sy) = vertices.iter().fold((0.0, 0.0), |(sx, sy), v| (sx + v.x, sy + v.y));
        return Point::new(sx / n as f64, sy / n as f64);
    }
    Point::new(o.x + cx / (3.0 * twice), o.y + cy / (3.0 * twice))
}

pub fn bounding_box(vertices: &[Point]) -> BBox {
    vertices.iter().fold(
        BBox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        },
        |b, v| BBox {
            min_x: b.min_x.min(v.x),
            min_y: b.min_y.min(v.y),
            max_x: b.max_x.max(v.x),
            max_y: b.max_y.max(v.y),
        },
    )
}

/// Even-odd crossing test.
pub fn point_in_polygon(p: Point, vertices: &[Point]) -> bool {
    let n = vertices.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Rescales vertices from `from_level` to `to_level` coordinates by the
/// per-axis ratio of the two levels' dimensions.
pub fn scale_to_level(roi: &PolygonRoi, from_level: usize, to_level: usize, wsi: &WsiRecord) -> Result<PolygonRoi, AnnotationError> {
    let dims = |level: usize| wsi.level_dimensions.get(level).copied().ok_or(AnnotationError::UnknownLevel(level));
    let (fw, fh) = dims(from_level)?;
    let (tw, th) = dims(to_level)?;
    if from_level == to_level {
        return Ok(roi.clone());
    }
    let (sx, sy) = (tw as f64 / fw as f64, th as f64 / fh as f64);
    let mut scaled = roi.clone();
    for v in &mut scaled.vertices {
        v.x *= sx;
        v.y *= sy;
    }
    Ok(scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::PolygonRoi;
    use crate::wsi::Scanner;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(side: f64) -> PolygonRoi {
        PolygonRoi::new(
            "sq",
            "w",
            vec![Point::new(0.0, 0.0), Point::new(side, 0.0), Point::new(side, side), Point::new(0.0, side)],
        )
    }

    fn record() -> WsiRecord {
        WsiRecord {
            wsi_id: "w".into(),
            image_path: "w".into(),
            scanner: Scanner::NanoZoomerS60,
            resolution_nm_per_px: 221.0,
            base_magnification: 40.0,
            level_count: 3,
            level_dimensions: vec![(4096, 4096), (2048, 2048), (1024, 1024)],
        }
    }

    /// Star-shaped polygon around `c`; always simple.
    fn random_star(rng: &mut ChaCha8Rng, c: Point, n: usize, r: (f64, f64)) -> Vec<Point> {
        (0..n)
            .map(|k| {
                let theta = std::f64::consts::TAU * (k as f64 + rng.random_range(0.0..0.8)) / n as f64;
                let rad = rng.random_range(r.0..r.1);
                Point::new(c.x + rad * theta.cos(), c.y + rad * theta.sin())
            })
            .collect()
    }

    #[test]
    fn square_area() {
        assert_eq!(polygon_area(&square(64.0)).unwrap(), 4096.0);
        let mut rev = square(64.0);
        rev.vertices.reverse();
        assert_eq!(polygon_area(&rev).unwrap(), 4096.0);
    }

    #[test]
    fn collinear_polygon_is_degenerate() {
        let roi = PolygonRoi::new("line", "w", vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0), Point::new(2.0, 2.0)]);
        assert!(matches!(polygon_area(&roi), Err(AnnotationError::DegeneratePolygon { .. })));
    }

    #[test]
    fn area_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let verts = random_star(&mut rng, Point::new(100.0, 100.0), 9, (20.0, 80.0));
            let roi = PolygonRoi::new("r", "w", verts.clone());
            let b = bounding_box(&verts);
            let samples = 1_000_000;
            let hits = (0..samples)
                .filter(|_| {
                    let p = Point::new(rng.random_range(b.min_x..b.max_x), rng.random_range(b.min_y..b.max_y));
                    point_in_polygon(p, &verts)
                })
                .count();
            let estimate = hits as f64 / samples as f64 * b.width() * b.height();
            let area = polygon_area(&roi).unwrap();
            assert!((estimate - area).abs() / area < 0.005, "mc {estimate} vs shoelace {area}");
        }
    }

    #[test]
    fn centroid_of_square() {
        let c = centroid(&square(10.0).vertices);
        assert!((c.x - 5.0).abs() < 1e-12 && (c.y - 5.0).abs() < 1e-12);
    }

    #[test]
    fn identity_scaling_is_bitwise() {
        let roi = PolygonRoi::new("t", "w", vec![Point::new(0.1, 0.7), Point::new(33.3, 1.9), Point::new(7.77, 40.01)]);
        let same = scale_to_level(&roi, 1, 1, &record()).unwrap();
        for (a, b) in roi.vertices.iter().zip(&same.vertices) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
        }
    }

    #[test]
    fn half_scaling_of_square() {
        let scaled = scale_to_level(&square(64.0), 0, 1, &record()).unwrap();
        assert_eq!(polygon_area(&scaled).unwrap(), 1024.0);
        assert_eq!(scaled.vertices[2], Point::new(32.0, 32.0));
    }

    #[test]
    fn scaling_round_trip_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wsi = record();
        for _ in 0..50 {
            let roi = PolygonRoi::new("r", "w", random_star(&mut rng, Point::new(2000.0, 1500.0), 7, (10.0, 300.0)));
            let down = scale_to_level(&roi, 0, 2, &wsi).unwrap();
            let up = scale_to_level(&down, 2, 0, &wsi).unwrap();
            let direct = scale_to_level(&roi, 0, 2, &wsi).unwrap();
            let chained = scale_to_level(&scale_to_level(&roi, 0, 1, &wsi).unwrap(), 1, 2, &wsi).unwrap();
            for i in 0..roi.vertices.len() {
                assert!((up.vertices[i].x - roi.vertices[i].x).abs() <= 1.0);
                assert!((up.vertices[i].y - roi.vertices[i].y).abs() <= 1.0);
                assert!((chained.vertices[i].x - direct.vertices[i].x).abs() <= 1.0);
                assert!((chained.vertices[i].y - direct.vertices[i].y).abs() <= 1.0);
            }
        }
        assert!(matches!(scale_to_level(&square(4.0), 0, 3, &wsi), Err(AnnotationError::UnknownLevel(3))));
    }
}
