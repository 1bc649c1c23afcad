//! Distance and inside/outside queries against triangle meshes.
//!
//! Distances come from a bounding-volume hierarchy; signs come from the
//! generalized winding number, evaluated exactly near the query and with the
//! far-field dipole expansion for distant clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Aabb, SdfGrid, TriangleMesh, Vec3};
use crate::error::{Error, Result};
use crate::real::Real;

const LEAF_SIZE: usize = 4;
/// Clusters farther than this many radii use the dipole approximation.
const FAR_FIELD_RATIO: f64 = 2.0;

#[derive(Debug, Clone)]
struct Node<T> {
    bounds: Aabb<T>,
    /// Leaf: `[start, end)` into the permuted triangle list. Inner: children.
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
    /// Sum of area-weighted normals (each term is half the face cross product).
    normal_sum: Vec3<T>,
    /// Area-weighted centroid.
    centroid: Vec3<T>,
    radius: T,
}

/// Bounding-volume hierarchy over a mesh's triangles.
#[derive(Debug, Clone)]
pub struct MeshQuery<T> {
    tris: Vec<[Vec3<T>; 3]>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> MeshQuery<T> {
    pub fn new(mesh: &TriangleMesh<T>) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::EmptyInput("mesh has no triangles".into()));
        }
        let tris: Vec<[Vec3<T>; 3]> = (0..mesh.triangles.len()).map(|t| mesh.corners(t)).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1);
        build(&tris, &mut order, 0, tris.len(), &mut nodes);
        let tris = order.iter().map(|&i| tris[i]).collect();
        Ok(Self { tris, nodes })
    }

    /// Unsigned distance from `p` to the closest point on the mesh.
    pub fn distance(&self, p: Vec3<T>) -> T {
        self.closest_point(p).1.sqrt()
    }

    /// Closest point and its squared distance.
    pub fn closest_point(&self, p: Vec3<T>) -> (Vec3<T>, T) {
        let mut best = (Vec3::zero(), T::infinity());
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bounds.distance_squared(p) >= best.1 {
                continue;
            }
            match node.children {
                Some((a, b)) => {
                    let da = self.nodes[a].bounds.distance_squared(p);
                    let db = self.nodes[b].bounds.distance_squared(p);
                    // nearer child is popped first
                    if da < db {
                        stack.push(b);
                        stack.push(a);
                    } else {
                        stack.push(a);
                        stack.push(b);
                    }
                }
                None => {
                    for tri in &self.tris[node.start..node.end] {
                        let q = closest_point_on_triangle(p, tri);
                        let d = q.distance_squared(p);
                        if d < best.1 {
                            best = (q, d);
                        }
                    }
                }
            }
        }
        best
    }

    /// Generalized winding number with far-field approximation.
    pub fn winding_number(&self, p: Vec3<T>) -> T {
        let mut total = T::zero();
        let mut stack = vec![0usize];
        let ratio = T::lit(FAR_FIELD_RATIO);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            let d = node.centroid - p;
            let dist = d.norm();
            match node.children {
                Some(_) if dist > ratio * node.radius => {
                    total += node.normal_sum.dot(d) / (dist * dist * dist);
                }
                Some((a, b)) => {
                    stack.push(a);
                    stack.push(b);
                }
                None => {
                    for tri in &self.tris[node.start..node.end] {
                        total += solid_angle(p, tri);
                    }
                }
            }
        }
        total / (T::lit(4.0) * T::PI())
    }

    /// Exact winding number summed over every triangle.
    pub fn winding_number_exact(&self, p: Vec3<T>) -> T {
        let s: T = self.tris.iter().map(|t| solid_angle(p, t)).sum();
        s / (T::lit(4.0) * T::PI())
    }

    pub fn is_inside(&self, p: Vec3<T>) -> bool {
        self.winding_number(p) >= T::lit(0.5)
    }

    pub fn bounds(&self) -> Aabb<T> {
        self.nodes[0].bounds
    }

    /// Counts probe points (seeded, in the padded bounding box) whose exact
    /// winding number is not within 0.05 of an integer.
    pub fn watertight_probe(&self, probes: usize, seed: u64) -> (usize, usize) {
        let b = self.bounds();
        let pad = b.extent() * T::lit(0.1) + Vec3::splat(T::lit(1e-3));
        let (lo, hi) = (b.min - pad, b.max + pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec3<T>> = (0..probes)
            .map(|_| {
                let u = Vec3::<T>::from_f64(rng.random(), rng.random(), rng.random());
                Vec3::new(lo.x + (hi.x - lo.x) * u.x, lo.y + (hi.y - lo.y) * u.y, lo.z + (hi.z - lo.z) * u.z)
            })
            .collect();
        let tol = T::lit(0.05);
        let bad = pts
            .par_iter()
            .map(|&p| {
                let w = self.winding_number_exact(p);
                usize::from((w - w.round()).abs() > tol)
            })
            .sum();
        (bad, probes)
    }

    /// Fails with `open-mesh` when fewer than 99% of probes see an integral winding number.
    pub fn require_watertight(&self) -> Result<()> {
        let (bad, probes) = self.watertight_probe(WATERTIGHT_PROBES, 0x5eed);
        if (bad as f64) > 0.01 * probes as f64 {
            Err(Error::OpenMesh { offending: bad, probes })
        } else {
            Ok(())
        }
    }
}

pub const WATERTIGHT_PROBES: usize = 512;

fn build<T: Real>(tris: &[[Vec3<T>; 3]], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node<T>>) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    let mut normal_sum = Vec3::zero();
    let mut weighted = Vec3::zero();
    let mut area_sum = T::zero();
    let third = T::one() / T::lit(3.0);
    for &i in &order[start..end] {
        let [a, b, c] = tris[i];
        bounds.grow(a);
        bounds.grow(b);
        bounds.grow(c);
        let centroid = (a + b + c) * third;
        cbounds.grow(centroid);
        let n = (b - a).cross(c - a) * T::lit(0.5);
        let area = n.norm();
        normal_sum += n;
        weighted += centroid * area;
        area_sum += area;
    }
    let centroid = if area_sum > T::zero() { weighted / area_sum } else { bounds.center() };
    // farthest box corner from the centroid bounds every triangle in the node
    let radius = (0..8)
        .map(|k| {
            let pick = |bit: usize, lo: T, hi: T| if k & bit != 0 { hi } else { lo };
            Vec3::new(
                pick(1, bounds.min.x, bounds.max.x),
                pick(2, bounds.min.y, bounds.max.y),
                pick(4, bounds.min.z, bounds.max.z),
            )
            .distance(centroid)
        })
        .fold(T::zero(), |a, b| a.max(b));
    let id = nodes.len();
    nodes.push(Node { bounds, start, end, children: None, normal_sum, centroid, radius });
    if end - start > LEAF_SIZE {
        let ext = cbounds.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        let key = |i: &usize| {
            let [a, b, c] = tris[*i];
            (a[axis] + b[axis] + c[axis]).as_f64()
        };
        order[start..end].select_nth_unstable_by(mid - start, |x, y| key(x).total_cmp(&key(y)));
        let l = build(tris, order, start, mid, nodes);
        let r = build(tris, order, mid, end, nodes);
        nodes[id].children = Some((l, r));
    }
    id
}

/// Signed solid angle subtended by a triangle (Van Oosterom–Strackee).
pub fn solid_angle<T: Real>(p: Vec3<T>, tri: &[Vec3<T>; 3]) -> T {
    let (a, b, c) = (tri[0] - p, tri[1] - p, tri[2] - p);
    let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
    let num = a.dot(b.cross(c));
    let den = la * lb * lc + a.dot(b) * lc + b.dot(c) * la + c.dot(a) * lb;
    T::lit(2.0) * num.atan2(den)
}

/// Closest point on a triangle to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle<T: Real>(p: Vec3<T>, tri: &[Vec3<T>; 3]) -> Vec3<T> {
    let [a, b, c] = *tri;
    let zero = T::zero();
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= zero && d2 <= zero {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= zero && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= zero && d1 >= zero && d3 <= zero {
        let denom = d1 - d3;
        return if denom > zero { a + ab * (d1 / denom) } else { a };
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= zero && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= zero && d2 >= zero && d6 <= zero {
        let denom = d2 - d6;
        return if denom > zero { a + ac * (d2 / denom) } else { a };
    }
    let va = d3 * d6 - d5 * d4;
    if va <= zero && (d4 - d3) >= zero && (d5 - d6) >= zero {
        let denom = (d4 - d3) + (d5 - d6);
        return if denom > zero { b + (c - b) * ((d4 - d3) / denom) } else { b };
    }
    let denom = va + vb + vc;
    if denom <= zero {
        // degenerate triangle: fall back to the nearest vertex
        return [a, b, c]
            .into_iter()
            .min_by(|x, y| x.distance_squared(p).as_f64().total_cmp(&y.distance_squared(p).as_f64()))
            .unwrap_or(a);
    }
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

/// Signed distance grid over `[-1,1]^3` at `resolution^3` lattice points.
/// Magnitude is the exact unsigned distance; the sign is negative where the
/// generalized winding number is at least 0.5.
pub fn mesh_to_sdf<T: Real>(mesh: &TriangleMesh<T>, resolution: usize) -> Result<SdfGrid<T>> {
    if resolution < 2 {
        return Err(Error::Invalid("resolution too small (need R >= 2)".into()));
    }
    let query = MeshQuery::new(mesh)?;
    query.require_watertight()?;
    SdfGrid::from_fn(resolution, Aabb::unit_cube(), |p| {
        let d = query.distance(p);
        if query.is_inside(p) {
            -d
        } else {
            d
        }
    })
}

#[cfg(test)]
mod tests {
    use super::super::mesh::primitives::*;
    use super::super::Shape;
    use super::*;

    #[test]
    fn closest_point_regions() {
        let tri = [Vec3::new(0.0f64, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        assert!((closest_point_on_triangle(Vec3::new(0.2, 0.2, 1.0), &tri) - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        assert_eq!(closest_point_on_triangle(Vec3::new(-1.0, -1.0, 0.0), &tri), tri[0]);
        assert_eq!(closest_point_on_triangle(Vec3::new(0.5, -1.0, 0.3), &tri), Vec3::new(0.5, 0.0, 0.0));
        let q = closest_point_on_triangle(Vec3::new(1.0, 1.0, 0.0), &tri);
        assert!((q - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn bvh_distance_matches_brute_force() {
        let m = torus(0.5f64, 0.2, 24, 12);
        let q = MeshQuery::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = Vec3::from_f64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let brute = (0..m.triangles.len())
                .map(|t| closest_point_on_triangle(p, &m.corners(t)).distance(p))
                .fold(f64::INFINITY, f64::min);
            assert!((q.distance(p) - brute).abs() < 1e-14);
        }
    }

    #[test]
    fn winding_number_inside_outside() {
        let m = icosphere(Vec3::zero(), 0.5f64, 3);
        let q = MeshQuery::new(&m).unwrap();
        assert!((q.winding_number(Vec3::zero()) - 1.0).abs() < 0.05);
        assert!(q.winding_number(Vec3::new(0.9, 0.1, 0.0)).abs() < 0.05);
        assert!((q.winding_number_exact(Vec3::new(0.2, 0.1, 0.0)) - 1.0).abs() < 1e-9);
        assert!(q.require_watertight().is_ok());
    }

    #[test]
    fn open_mesh_is_reported() {
        let mut m = icosphere(Vec3::zero(), 0.5f64, 2);
        // drop every triangle in the upper hemisphere
        let verts = m.vertices.clone();
        m.triangles.retain(|t| t.iter().all(|&i| verts[i as usize].z < 0.1));
        match mesh_to_sdf(&m, 8) {
            Err(Error::OpenMesh { offending, probes }) => {
                assert_eq!(probes, WATERTIGHT_PROBES);
                assert!(offending > 5);
            }
            other => panic!("expected open-mesh, got {other:?}"),
        }
    }

    #[test]
    fn cube_zero_level_set_within_one_cell() {
        let half = 0.5f64;
        let cube = box_mesh(Vec3::splat(half), 2);
        let grid = mesh_to_sdf(&cube, 32).unwrap();
        let shape = Shape::cuboid(Vec3::splat(half)).unwrap();
        let h = grid.spacing().x;
        let r = grid.resolution();
        // every sign change between lattice neighbors straddles a cube face
        for ix in 0..r - 1 {
            for iy in 0..r {
                for iz in 0..r {
                    let (a, b) = (grid.at(ix, iy, iz), grid.at(ix + 1, iy, iz));
                    if (a < 0.0) != (b < 0.0) {
                        let p = grid.point(ix, iy, iz);
                        assert!(shape.sdf(p).abs() <= h + 1e-12);
                    }
                }
            }
        }
        assert!(grid.at(0, 0, 0) > 0.0);
        assert!(grid.sample(Vec3::zero()) < 0.0);
        // magnitudes are exact distances to the (flat-faced) box
        for &(ix, iy, iz) in &[(3usize, 16usize, 16usize), (16, 16, 16), (0, 0, 31), (20, 9, 14)] {
            assert!((grid.at(ix, iy, iz) - shape.sdf(grid.point(ix, iy, iz))).abs() < 1e-12);
        }
    }
}
