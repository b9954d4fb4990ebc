//! Incremental 3D convex hull for small point sets.

use std::collections::HashSet;

use nalgebra::Vector3;

use crate::geometry::Point3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexHull {
    pub vertices: Vec<Point3>,
    /// Outward-oriented triangles (counter-clockwise seen from outside).
    pub faces: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, Copy)]
struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
}

impl Face {
    fn new(points: &[Point3], v: [usize; 3]) -> Face {
        let n = (points[v[1]] - points[v[0]]).cross(&(points[v[2]] - points[v[0]]));
        let normal = n / n.norm();
        Face {
            v,
            normal,
            offset: normal.dot(&points[v[0]].coords),
        }
    }

    fn distance(&self, p: &Point3) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }
}

/// Convex hull of `points`, or `None` when fewer than four non-coplanar
/// points exist.
pub fn convex_hull(points: &[Point3]) -> Option<ConvexHull> {
    let faces = hull_faces(points)?;
    let mut remap = vec![usize::MAX; points.len()];
    let mut vertices = Vec::new();
    let mut out_faces = Vec::with_capacity(faces.len());
    for f in &faces {
        let mut tri = [0; 3];
        for (k, &v) in f.iter().enumerate() {
            if remap[v] == usize::MAX {
                remap[v] = vertices.len();
                vertices.push(points[v]);
            }
            tri[k] = remap[v];
        }
        out_faces.push(tri);
    }
    Some(ConvexHull {
        vertices,
        faces: out_faces,
    })
}

/// Outward hull triangles indexing into `points`.
pub fn hull_faces(points: &[Point3]) -> Option<Vec<[usize; 3]>> {
    if points.len() < 4 {
        return None;
    }
    let scale = points
        .iter()
        .flat_map(|p| p.iter().map(|c| c.abs()))
        .fold(0.0, f64::max)
        .max(1e-12);
    let eps = 1e-10 * scale;

    let i0 = (0..points.len())
        .min_by(|&a, &b| points[a].x.total_cmp(&points[b].x))
        .unwrap();
    let i1 = argmax(points, |p| (p - points[i0]).norm())?;
    let dir = (points[i1] - points[i0]).normalize();
    let i2 = argmax(points, |p| {
        let v = p - points[i0];
        (v - dir * v.dot(&dir)).norm()
    })?;
    let plane_n = (points[i1] - points[i0]).cross(&(points[i2] - points[i0])).normalize();
    if !plane_n.iter().all(|c| c.is_finite()) {
        return None;
    }
    let i3 = argmax(points, |p| plane_n.dot(&(p - points[i0])).abs())?;
    if (points[i1] - points[i0]).norm() < eps || plane_n.dot(&(points[i3] - points[i0])).abs() < eps {
        return None;
    }

    let mut faces = Vec::new();
    let base = [i0, i1, i2, i3];
    let interior = Point3::from(base.iter().map(|&i| points[i].coords).sum::<Vector3<f64>>() / 4.0);
    for (a, b, c) in [(i0, i1, i2), (i0, i1, i3), (i0, i2, i3), (i1, i2, i3)] {
        let f = Face::new(points, [a, b, c]);
        faces.push(if f.distance(&interior) > 0.0 {
            Face::new(points, [a, c, b])
        } else {
            f
        });
    }

    for (pi, p) in points.iter().enumerate() {
        if base.contains(&pi) {
            continue;
        }
        let visible: Vec<bool> = faces.iter().map(|f| f.distance(p) > eps).collect();
        if !visible.iter().any(|&v| v) {
            continue;
        }
        let edges: HashSet<(usize, usize)> = faces
            .iter()
            .zip(&visible)
            .filter(|(_, &v)| v)
            .flat_map(|(f, _)| [(f.v[0], f.v[1]), (f.v[1], f.v[2]), (f.v[2], f.v[0])])
            .collect();
        let mut horizon: Vec<(usize, usize)> = edges
            .iter()
            .filter(|(a, b)| !edges.contains(&(*b, *a)))
            .copied()
            .collect();
        horizon.sort_unstable();
        let mut next: Vec<Face> = faces
            .iter()
            .zip(&visible)
            .filter(|(_, &v)| !v)
            .map(|(f, _)| *f)
            .collect();
        next.extend(horizon.into_iter().map(|(a, b)| Face::new(points, [a, b, pi])));
        faces = next;
    }
    Some(faces.iter().map(|f| f.v).collect())
}

fn argmax(points: &[Point3], f: impl Fn(&Point3) -> f64) -> Option<usize> {
    (0..points.len()).max_by(|&a, &b| f(&points[a]).total_cmp(&f(&points[b])))
}

impl ConvexHull {
    /// Volume (in the cube of the input unit) and centroid, by signed
    /// tetrahedra against the first vertex.
    pub fn volume_and_centroid(&self) -> (f64, Point3) {
        let o = self.vertices[0];
        let mut vol = 0.0;
        let mut moment = Vector3::zeros();
        for f in &self.faces {
            let a = self.vertices[f[0]] - o;
            let b = self.vertices[f[1]] - o;
            let c = self.vertices[f[2]] - o;
            let v = a.dot(&b.cross(&c)) / 6.0;
            vol += v;
            moment += (a + b + c) / 4.0 * v;
        }
        (vol, o + moment / vol)
    }
}
