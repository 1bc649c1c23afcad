use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Aabb, Vec3};
use crate::error::{Error, Result};
use crate::real::Real;

/// Indexed triangle mesh with optional per-vertex unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3<T>>>,
}

impl<T: Real> TriangleMesh<T> {
    /// Builds a mesh, checking index ranges.
    pub fn new(vertices: Vec<Vec3<T>>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::Format(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite vertex coordinate".into()));
        }
        Ok(Self { vertices, triangles, normals: None })
    }

    pub fn empty() -> Self {
        Self { vertices: Vec::new(), triangles: Vec::new(), normals: None }
    }

    pub fn with_normals(mut self, normals: Vec<Vec3<T>>) -> Result<Self> {
        if normals.len() != self.vertices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} normals for {} vertices",
                normals.len(),
                self.vertices.len()
            )));
        }
        let tol = T::lit(1e-6);
        if normals.iter().any(|n| (n.norm() - T::one()).abs() > tol) {
            return Err(Error::Format("vertex normals must be unit length".into()));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3<T>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Area-weighted (unnormalized, twice the area) face normal.
    pub fn face_cross(&self, t: usize) -> Vec3<T> {
        let [a, b, c] = self.corners(t);
        (b - a).cross(c - a)
    }

    pub fn face_area(&self, t: usize) -> T {
        self.face_cross(t).norm() * T::lit(0.5)
    }

    pub fn total_area(&self) -> T {
        (0..self.triangles.len()).map(|t| self.face_area(t)).sum()
    }

    pub fn bounds(&self) -> Aabb<T> {
        Aabb::from_points(self.vertices.iter())
    }

    /// Signed enclosed volume; positive for outward-oriented closed meshes.
    pub fn signed_volume(&self) -> T {
        let six = T::lit(6.0);
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(b.cross(c)) / six
            })
            .sum()
    }

    /// Drops triangles with repeated indices or zero area.
    pub fn sanitized(mut self) -> Self {
        let verts = &self.vertices;
        self.triangles.retain(|&[a, b, c]| {
            if a == b || b == c || a == c {
                return false;
            }
            let (pa, pb, pc) = (verts[a as usize], verts[b as usize], verts[c as usize]);
            (pb - pa).cross(pc - pa).norm_squared() > T::zero()
        });
        self
    }

    /// Undirected edge -> number of incident triangles.
    pub fn edge_valence(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::with_capacity(self.triangles.len() * 2);
        for &[a, b, c] in &self.triangles {
            for (i, j) in [(a, b), (b, c), (c, a)] {
                *edges.entry((i.min(j), i.max(j))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// V - E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        let e = self.edge_valence().len() as i64;
        v - e + self.triangles.len() as i64
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_closed_manifold(&self) -> bool {
        !self.triangles.is_empty() && self.edge_valence().values().all(|&c| c == 2)
    }

    /// Area-weighted vertex normals.
    pub fn compute_vertex_normals(&self) -> Vec<Vec3<T>> {
        let mut acc = vec![Vec3::zero(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.face_cross(t);
            for &i in tri {
                acc[i as usize] += n;
            }
        }
        acc.into_iter()
            .map(|n| n.try_normalize(T::lit(1e-300)).unwrap_or_else(Vec3::unit_z))
            .collect()
    }

    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.triangles {
            t.swap(1, 2);
        }
        if let Some(ns) = &mut out.normals {
            for n in ns {
                *n = -*n;
            }
        }
        out
    }

    pub fn transformed(&self, f: impl Fn(Vec3<T>) -> Vec3<T>) -> Self {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = f(*v);
        }
        out
    }
}

/// Points with optional unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedPointCloud<T> {
    pub points: Vec<Vec3<T>>,
    pub normals: Option<Vec<Vec3<T>>>,
}

impl<T: Real> OrientedPointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>, normals: Option<Vec<Vec3<T>>>) -> Result<Self> {
        if let Some(ns) = &normals {
            if ns.len() != points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} normals for {} points",
                    ns.len(),
                    points.len()
                )));
            }
            let tol = T::lit(1e-6);
            if ns.iter().any(|n| (n.norm() - T::one()).abs() > tol) {
                return Err(Error::Format("point normals must be unit length".into()));
            }
        }
        Ok(Self { points, normals })
    }

    pub fn unoriented(points: Vec<Vec3<T>>) -> Self {
        Self { points, normals: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Uniform scale + translation applied by [`normalize_mesh`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeTransform<T> {
    /// Original bounding-box center.
    pub center: Vec3<T>,
    pub scale: T,
}

impl<T: Real> NormalizeTransform<T> {
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        (p - self.center) * self.scale
    }

    pub fn inverse(&self, p: Vec3<T>) -> Vec3<T> {
        p / self.scale + self.center
    }
}

/// Longest bounding-box side after normalization: `[-1,1]` with 5% padding per side.
pub const NORMALIZED_SIDE: f64 = 1.9;

/// Centers the mesh bounding box at the origin and scales its longest side to 1.9.
pub fn normalize_mesh<T: Real>(mesh: &TriangleMesh<T>) -> Result<(TriangleMesh<T>, NormalizeTransform<T>)> {
    if mesh.vertices.is_empty() || mesh.triangles.is_empty() {
        return Err(Error::EmptyInput("mesh has no triangles".into()));
    }
    let b = mesh.bounds();
    let side = b.max_side();
    if side <= T::zero() {
        return Err(Error::DegenerateMesh("bounding box has zero extent".into()));
    }
    let xf = NormalizeTransform { center: b.center(), scale: T::lit(NORMALIZED_SIDE) / side };
    Ok((mesh.transformed(|p| xf.apply(p)), xf))
}

/// Area-uniform surface samples with isotropic Gaussian noise of standard
/// deviation `noise_sigma * max_bbox_side`. Normals come from the source triangle.
pub fn sample_surface<T: Real>(
    mesh: &TriangleMesh<T>,
    n: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<OrientedPointCloud<T>> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyInput("mesh has no triangles".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0f64;
    for t in 0..mesh.triangles.len() {
        total += mesh.face_area(t).as_f64();
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateMesh("total surface area is zero".into()));
    }
    let sigma = noise_sigma * mesh.bounds().max_side().as_f64();
    let noise = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.corners(t);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (wa, wb, wc) = (T::lit(1.0 - s), T::lit(s * (1.0 - r2)), T::lit(s * r2));
        let mut p = a * wa + b * wb + c * wc;
        if let Some(d) = &noise {
            p += Vec3::from_f64(d.sample(&mut rng), d.sample(&mut rng), d.sample(&mut rng));
        }
        points.push(p);
        normals.push(mesh.face_cross(t).try_normalize(T::zero()).unwrap_or_else(Vec3::unit_z));
    }
    Ok(OrientedPointCloud { points, normals: Some(normals) })
}

/// Triangulated primitives used as ground truth in tests and tooling.
pub mod primitives {
    use super::*;

    /// Subdivided icosahedron projected onto a sphere, outward oriented.
    pub fn icosphere<T: Real>(center: Vec3<T>, radius: T, subdivisions: u32) -> TriangleMesh<T> {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3<f64>> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3<f64>>| -> u32 {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                    (verts.len() - 1) as u32
                })
            };
            for [a, b, c] in faces {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        let normals: Vec<Vec3<T>> = verts.iter().map(|v| v.cast()).collect();
        let vertices = verts.iter().map(|v| center + v.cast::<T>() * radius).collect();
        TriangleMesh { vertices, triangles: faces, normals: Some(normals) }
    }

    /// Axis-aligned box centered at the origin, each face split into `n x n` quads.
    pub fn box_mesh<T: Real>(half: Vec3<T>, n: usize) -> TriangleMesh<T> {
        let n = n.max(1);
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut index: HashMap<(i64, i64, i64), u32> = HashMap::new();
        // integer lattice on the box surface, coordinates in [-n, n]
        let mut vid = |p: (i64, i64, i64), vertices: &mut Vec<Vec3<T>>| -> u32 {
            *index.entry(p).or_insert_with(|| {
                let s = T::from_usize_lossy(n);
                vertices.push(Vec3::new(
                    half.x * T::lit(p.0 as f64) / s,
                    half.y * T::lit(p.1 as f64) / s,
                    half.z * T::lit(p.2 as f64) / s,
                ));
                (vertices.len() - 1) as u32
            })
        };
        let ni = n as i64;
        // (normal axis, sign); u/v axes chosen so (u x v) points along the outward normal
        for axis in 0..3usize {
            for sign in [-1i64, 1] {
                let (ua, va) = if sign > 0 { ((axis + 1) % 3, (axis + 2) % 3) } else { ((axis + 2) % 3, (axis + 1) % 3) };
                let at = |u: i64, v: i64| {
                    let mut c = [0i64; 3];
                    c[axis] = sign * ni;
                    c[ua] = u;
                    c[va] = v;
                    (c[0], c[1], c[2])
                };
                for i in 0..n as i64 {
                    for j in 0..n as i64 {
                        let (u0, v0) = (-ni + 2 * i, -ni + 2 * j);
                        let (u1, v1) = (u0 + 2, v0 + 2);
                        let a = vid(at(u0, v0), &mut vertices);
                        let b = vid(at(u1, v0), &mut vertices);
                        let c = vid(at(u1, v1), &mut vertices);
                        let d = vid(at(u0, v1), &mut vertices);
                        triangles.push([a, b, c]);
                        triangles.push([a, c, d]);
                    }
                }
            }
        }
        TriangleMesh { vertices, triangles, normals: None }
    }

    /// Torus around the z axis with major radius `major` and tube radius `minor`.
    pub fn torus<T: Real>(major: T, minor: T, segments: usize, rings: usize) -> TriangleMesh<T> {
        let (nu, nv) = (segments.max(3), rings.max(3));
        let mut vertices = Vec::with_capacity(nu * nv);
        let mut normals = Vec::with_capacity(nu * nv);
        for i in 0..nu {
            let u = T::lit(2.0 * std::f64::consts::PI * i as f64 / nu as f64);
            for j in 0..nv {
                let v = T::lit(2.0 * std::f64::consts::PI * j as f64 / nv as f64);
                let ring = Vec3::new(u.cos(), u.sin(), T::zero());
                let n = ring * v.cos() + Vec3::unit_z() * v.sin();
                vertices.push(ring * major + n * minor);
                normals.push(n);
            }
        }
        let id = |i: usize, j: usize| ((i % nu) * nv + (j % nv)) as u32;
        let mut triangles = Vec::with_capacity(2 * nu * nv);
        for i in 0..nu {
            for j in 0..nv {
                let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        TriangleMesh { vertices, triangles, normals: Some(normals) }
    }
}
