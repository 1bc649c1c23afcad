//! Marching cubes over the zero level set of the implicit function,
//! restricted to grid cells near the occupied octants.

use std::collections::HashMap;

use byteorder::{LittleEndian, WriteBytesExt};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{TriangleMesh, Vec3};
use crate::imls::{eval_f, eval_grad, MlsPointSet};
use crate::mc_tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};
use crate::octree::{cell_center, cell_size};
use crate::real::Real;

pub const DEFAULT_RESOLUTION: usize = 128;
/// Value given to corners outside the evaluation grid.
pub const OUTSIDE_VALUE: f64 = 10.0;
pub const DUMP_MAGIC: &[u8; 4] = b"IMLF";

/// Which cells to march.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// Cells meeting an occupied octant dilated by one octant.
    Band,
    /// Every cell of the grid.
    Full,
}

/// Corner values and band flags of one marching pass.
///
/// The grid has `resolution` real corners per axis over [-1, 1] plus one
/// virtual layer on each side, so cells are indexed `0..=resolution` per axis
/// and cell `i` spans padded corners `i` and `i + 1`.
#[derive(Debug, Clone)]
pub struct MarchGrid<T> {
    resolution: usize,
    band: Vec<bool>,
    /// Padded corner values; NaN for grid corners where F is out of band.
    values: Vec<T>,
    evaluated: usize,
}

impl<T: Real> MarchGrid<T> {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Cells per axis, including the padding layer.
    pub fn cells_per_axis(&self) -> usize {
        self.resolution + 1
    }

    fn corners_per_axis(&self) -> usize {
        self.resolution + 2
    }

    pub fn spacing(&self) -> T {
        T::lit(2.0) / T::from_usize_lossy(self.resolution - 1)
    }

    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        let n = self.cells_per_axis();
        (c[0] * n + c[1]) * n + c[2]
    }

    fn corner_index(&self, c: [usize; 3]) -> usize {
        let n = self.corners_per_axis();
        (c[0] * n + c[1]) * n + c[2]
    }

    fn cell_coords(&self, i: usize) -> [usize; 3] {
        let n = self.cells_per_axis();
        [i / (n * n), (i / n) % n, i % n]
    }

    /// World position of a padded corner.
    pub fn corner_position(&self, c: [usize; 3]) -> Vec3<T> {
        let s = self.spacing();
        let f = |i: usize| -T::one() + (T::from_usize_lossy(i) - T::one()) * s;
        Vec3::new(f(c[0]), f(c[1]), f(c[2]))
    }

    pub fn band_cells(&self) -> usize {
        self.band.iter().filter(|&&b| b).count()
    }

    pub fn is_band(&self, cell: [usize; 3]) -> bool {
        self.band[self.cell_index(cell)]
    }

    pub fn evaluated_corners(&self) -> usize {
        self.evaluated
    }

    fn cell_values(&self, cell: [usize; 3]) -> Option<[T; 8]> {
        let mut out = [T::zero(); 8];
        for (k, o) in CORNER_OFFSETS.iter().enumerate() {
            let v = self.values[self.corner_index([cell[0] + o[0], cell[1] + o[1], cell[2] + o[2]])];
            if v.is_nan() {
                return None;
            }
            out[k] = v;
        }
        Some(out)
    }

    /// `IMLF` then one (u32 cell index, 8 x f32 corner values) record per
    /// marchable band cell, little-endian.
    pub fn dump(&self) -> Vec<u8> {
        let mut out = DUMP_MAGIC.to_vec();
        for (i, _) in self.band.iter().enumerate().filter(|(_, &b)| b) {
            if let Some(vals) = self.cell_values(self.cell_coords(i)) {
                out.write_u32::<LittleEndian>(i as u32).unwrap();
                for v in vals {
                    out.write_f32::<LittleEndian>(v.as_f32()).unwrap();
                }
            }
        }
        out
    }
}

/// Parses a band dump back into `(cell index, corner values)` records.
pub fn read_dump(bytes: &[u8]) -> Result<Vec<(u32, [f32; 8])>> {
    use byteorder::ReadBytesExt;
    if bytes.len() < 4 || &bytes[..4] != DUMP_MAGIC {
        return Err(Error::Format("missing IMLF magic".into()));
    }
    let body = &bytes[4..];
    if body.len() % 36 != 0 {
        return Err(Error::Format("truncated IMLF record".into()));
    }
    let mut rd = body;
    let mut out = Vec::with_capacity(body.len() / 36);
    while !rd.is_empty() {
        let idx = rd.read_u32::<LittleEndian>()?;
        let mut v = [0f32; 8];
        for x in &mut v {
            *x = rd.read_f32::<LittleEndian>()?;
        }
        out.push((idx, v));
    }
    Ok(out)
}

/// Evaluates F on the needed corners of a fresh grid.
pub fn evaluate_grid<T: Real>(mls: &MlsPointSet<T>, resolution: usize, coverage: Coverage) -> Result<MarchGrid<T>> {
    if resolution < 2 {
        return Err(Error::Invalid(format!("marching resolution {resolution} too small")));
    }
    let mut grid = MarchGrid {
        resolution,
        band: Vec::new(),
        values: vec![T::lit(OUTSIDE_VALUE); (resolution + 2).pow(3)],
        evaluated: 0,
    };
    let cells = grid.cells_per_axis();
    grid.band = match coverage {
        Coverage::Full => vec![true; cells.pow(3)],
        Coverage::Band => band_flags(&grid, mls),
    };
    let n = grid.corners_per_axis();
    let mut needed = vec![false; n * n * n];
    for (i, _) in grid.band.iter().enumerate().filter(|(_, &b)| b) {
        let c = grid.cell_coords(i);
        for o in CORNER_OFFSETS {
            let p = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            if p.iter().all(|&x| x >= 1 && x <= resolution) {
                needed[grid.corner_index(p)] = true;
            }
        }
    }
    let todo: Vec<usize> = needed.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    let vals: Vec<T> = todo
        .par_iter()
        .map(|&i| {
            let x = grid.corner_position([i / (n * n), (i / n) % n, i % n]);
            let f = eval_f(x, mls);
            if f.in_band {
                f.value
            } else {
                T::nan()
            }
        })
        .collect();
    for (&i, v) in todo.iter().zip(vals) {
        grid.values[i] = v;
    }
    grid.evaluated = todo.len();
    Ok(grid)
}

fn band_flags<T: Real>(grid: &MarchGrid<T>, mls: &MlsPointSet<T>) -> Vec<bool> {
    let cells = grid.cells_per_axis();
    let mut band = vec![false; cells.pow(3)];
    let depth = mls.depth();
    let reach = T::lit(1.5) * cell_size::<T>(depth);
    let s = grid.spacing();
    let x0 = grid.corner_position([0, 0, 0]).x;
    let mut hosts: Vec<usize> = mls.points().iter().map(|p| p.octant).collect();
    hosts.sort_unstable();
    hosts.dedup();
    let last = cells as i64 - 1;
    let lo_cell = |v: T| (((v - x0) / s).floor().to_i64().unwrap_or(0) - 1).clamp(0, last) as usize;
    let hi_cell = |v: T| (((v - x0) / s).floor().to_i64().unwrap_or(last)).clamp(0, last) as usize;
    for k in hosts {
        let c = cell_center::<T>(depth, mls.octants()[k]);
        let (lo, hi) = (c - Vec3::splat(reach), c + Vec3::splat(reach));
        for ix in lo_cell(lo.x)..=hi_cell(hi.x) {
            for iy in lo_cell(lo.y)..=hi_cell(hi.y) {
                for iz in lo_cell(lo.z)..=hi_cell(hi.z) {
                    band[(ix * cells + iy) * cells + iz] = true;
                }
            }
        }
    }
    band
}

/// Counts from one extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MarchStats {
    pub band_cells: usize,
    pub evaluated_corners: usize,
    /// Band cells with a corner where F is undefined.
    pub skipped_cells: usize,
    pub removed_triangles: usize,
}

/// Triangulates the grid's zero crossings. Triangles are emitted in cell
/// order; vertices shared by neighboring cells are welded.
pub fn triangulate<T: Real>(grid: &MarchGrid<T>) -> (TriangleMesh<T>, MarchStats) {
    let band: Vec<usize> = grid.band.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    let per_cell: Vec<Option<Vec<[u64; 3]>>> = band
        .par_iter()
        .map(|&i| {
            let c = grid.cell_coords(i);
            let vals = grid.cell_values(c)?;
            let mut case = 0usize;
            for (k, v) in vals.iter().enumerate() {
                if *v < T::zero() {
                    case |= 1 << k;
                }
            }
            let mut tris = Vec::new();
            if EDGE_TABLE[case] == 0 {
                return Some(tris);
            }
            let row = &TRIANGLE_TABLE[case];
            for t in row.chunks(3).take_while(|t| t[0] >= 0) {
                let key = |e: i8| edge_key(grid, c, e as usize);
                // the table winds counter-clockwise seen from inside; reverse for outward faces
                tris.push([key(t[0]), key(t[2]), key(t[1])]);
            }
            Some(tris)
        })
        .collect();
    let mut stats = MarchStats { band_cells: band.len(), evaluated_corners: grid.evaluated, ..MarchStats::default() };
    let mut ids: HashMap<u64, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for cell in per_cell {
        let Some(tris) = cell else {
            stats.skipped_cells += 1;
            continue;
        };
        for t in tris {
            let tri = t.map(|key| {
                *ids.entry(key).or_insert_with(|| {
                    vertices.push(edge_vertex(grid, key));
                    (vertices.len() - 1) as u32
                })
            });
            triangles.push(tri);
        }
    }
    let before = triangles.len();
    let mesh = TriangleMesh { vertices, triangles, normals: None }.sanitized();
    stats.removed_triangles = before - mesh.triangles.len();
    (compact(mesh), stats)
}

fn edge_key<T: Real>(grid: &MarchGrid<T>, cell: [usize; 3], edge: usize) -> u64 {
    let (a, b) = EDGE_CORNERS[edge];
    let (oa, ob) = (CORNER_OFFSETS[a], CORNER_OFFSETS[b]);
    let lower = [0, 1, 2].map(|k| cell[k] + oa[k].min(ob[k]));
    let axis = (0..3).find(|&k| oa[k] != ob[k]).unwrap();
    grid.corner_index(lower) as u64 * 3 + axis as u64
}

fn edge_vertex<T: Real>(grid: &MarchGrid<T>, key: u64) -> Vec3<T> {
    let axis = (key % 3) as usize;
    let i = (key / 3) as usize;
    let n = grid.corners_per_axis();
    let a = [i / (n * n), (i / n) % n, i % n];
    let mut b = a;
    b[axis] += 1;
    let (fa, fb) = (grid.values[grid.corner_index(a)], grid.values[grid.corner_index(b)]);
    let eps = T::lit(1e-6);
    let t = (fa / (fa - fb)).max(eps).min(T::one() - eps);
    let (pa, pb) = (grid.corner_position(a), grid.corner_position(b));
    pa + (pb - pa) * t
}

/// Drops unreferenced vertices.
fn compact<T: Real>(mesh: TriangleMesh<T>) -> TriangleMesh<T> {
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let triangles = mesh
        .triangles
        .iter()
        .map(|t| {
            t.map(|i| {
                if remap[i as usize] == u32::MAX {
                    remap[i as usize] = vertices.len() as u32;
                    vertices.push(mesh.vertices[i as usize]);
                }
                remap[i as usize]
            })
        })
        .collect();
    TriangleMesh { vertices, triangles, normals: None }
}

/// Unit vertex normals from the normalized gradient approximation, falling
/// back to face normals where it is undefined.
pub fn vertex_normals<T: Real>(mesh: &TriangleMesh<T>, mls: &MlsPointSet<T>) -> Vec<Vec3<T>> {
    let fallback = mesh.compute_vertex_normals();
    mesh.vertices
        .par_iter()
        .zip(fallback)
        .map(|(&v, f)| eval_grad(v, mls).ok().and_then(|g| g.try_normalize(T::lit(1e-12))).unwrap_or(f))
        .collect()
}

/// Marches the band (or the full grid) and attaches vertex normals.
pub fn extract_mesh_with<T: Real>(mls: &MlsPointSet<T>, resolution: usize, coverage: Coverage) -> Result<(TriangleMesh<T>, MarchGrid<T>, MarchStats)> {
    let grid = evaluate_grid(mls, resolution, coverage)?;
    let (mesh, stats) = triangulate(&grid);
    let normals = vertex_normals(&mesh, mls);
    let mesh = if mesh.is_empty() { mesh } else { mesh.with_normals(normals)? };
    Ok((mesh, grid, stats))
}

/// Band-restricted marching cubes; an empty mesh means no zero crossing was found.
pub fn extract_mesh<T: Real>(mls: &MlsPointSet<T>, resolution: usize) -> Result<TriangleMesh<T>> {
    extract_mesh_with(mls, resolution, Coverage::Band).map(|(m, _, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives::icosphere;

    fn sphere_mls(radius: f64, subdiv: u32, r: f64, depth: u32, flip: bool) -> MlsPointSet<f64> {
        let ico = icosphere(Vec3::zero(), radius, subdiv);
        let normals: Vec<Vec3<f64>> = ico.vertices.iter().map(|v| if flip { -v.normalize() } else { v.normalize() }).collect();
        MlsPointSet::from_oriented(&ico.vertices, &normals, &vec![r; normals.len()], depth).unwrap()
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let mls = sphere_mls(0.5, 4, 0.05, 5, false);
        let (mesh, grid, stats) = extract_mesh_with(&mls, 64, Coverage::Band).unwrap();
        assert!(mesh.is_closed_manifold());
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.signed_volume() > 0.0);
        assert!(stats.skipped_cells < stats.band_cells / 10);
        let s = grid.spacing();
        for v in &mesh.vertices {
            assert!((v.norm() - 0.5).abs() < s, "{}", v.norm());
        }
        for (v, n) in mesh.vertices.iter().zip(mesh.normals.as_ref().unwrap()) {
            assert!(n.angle_deg(*v) < 10.0);
        }
    }

    #[test]
    fn flipped_normals_flip_orientation_only() {
        let a = extract_mesh(&sphere_mls(0.5, 3, 0.06, 4, false), 48).unwrap();
        let b = extract_mesh(&sphere_mls(0.5, 3, 0.06, 4, true), 48).unwrap();
        assert_eq!(a.vertices.len(), b.vertices.len());
        assert_eq!(a.triangles.len(), b.triangles.len());
        assert!(a.signed_volume() > 0.0);
        assert!((a.signed_volume() + b.signed_volume()).abs() < 1e-9);
        let sorted = |m: &TriangleMesh<f64>| {
            let mut v: Vec<[u64; 3]> = m.vertices.iter().map(|p| p.to_array().map(f64::to_bits)).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(sorted(&a), sorted(&b));
    }

    #[test]
    fn empty_band_gives_empty_mesh() {
        let mls = MlsPointSet::from_oriented(&[Vec3::splat(0.9f64)], &[Vec3::unit_z()], &[1e-3], 6).unwrap();
        let mesh = extract_mesh(&mls, 32).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn vertices_sit_on_sign_changing_band_edges() {
        let mls = sphere_mls(0.45, 3, 0.07, 4, false);
        let grid = evaluate_grid(&mls, 40, Coverage::Band).unwrap();
        let (mesh, _) = triangulate(&grid);
        let s = grid.spacing();
        let x0 = grid.corner_position([0, 0, 0]).x;
        for v in &mesh.vertices {
            // exactly one coordinate is off the lattice
            let off: Vec<usize> = (0..3)
                .filter(|&k| {
                    let u = (v[k] - x0) / s;
                    (u - u.round()).abs() > 1e-9
                })
                .collect();
            assert_eq!(off.len(), 1, "{v:?}");
            let axis = off[0];
            let a = [0, 1, 2].map(|k| ((v[k] - x0) / s).floor() as usize);
            let mut b = a;
            b[axis] += 1;
            let fa = grid.values[grid.corner_index(a)];
            let fb = grid.values[grid.corner_index(b)];
            assert!(fa * fb <= 0.0);
            let gap = (fa - fb).abs();
            assert!(eval_f(*v, &mls).value.abs() < gap);
        }
    }

    #[test]
    fn band_is_a_subset_that_misses_nothing() {
        let mls = sphere_mls(0.5, 3, 0.06, 4, false);
        let (band, g, _) = extract_mesh_with(&mls, 40, Coverage::Band).unwrap();
        let (full, gf, _) = extract_mesh_with(&mls, 40, Coverage::Full).unwrap();
        assert!(g.band_cells() < gf.band_cells());
        assert!(g.evaluated_corners() < gf.evaluated_corners());
        assert_eq!(band.triangles.len(), full.triangles.len());
        let mut a: Vec<[u64; 3]> = band.vertices.iter().map(|v| v.to_array().map(f64::to_bits)).collect();
        let mut b: Vec<[u64; 3]> = full.vertices.iter().map(|v| v.to_array().map(f64::to_bits)).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_touching_the_domain_boundary_still_closes() {
        let ico = icosphere(Vec3::zero(), 1.0f64, 3);
        let normals: Vec<Vec3<f64>> = ico.vertices.iter().map(|v| v.normalize()).collect();
        let mls = MlsPointSet::from_oriented(&ico.vertices, &normals, &vec![0.1; normals.len()], 4).unwrap();
        let mesh = extract_mesh(&mls, 32).unwrap();
        assert!(mesh.is_closed_manifold());
        assert_eq!(mesh.euler_characteristic(), 2);
    }

    #[test]
    fn dump_round_trips() {
        let mls = sphere_mls(0.5, 2, 0.08, 3, false);
        let grid = evaluate_grid(&mls, 16, Coverage::Band).unwrap();
        let bytes = grid.dump();
        let recs = read_dump(&bytes).unwrap();
        let (_, stats) = triangulate(&grid);
        assert_eq!(recs.len(), grid.band_cells() - stats.skipped_cells);
        let (i, vals) = recs[0];
        let c = grid.cell_coords(i as usize);
        assert!(grid.is_band(c));
        assert_eq!(vals[0], grid.values[grid.corner_index(c)] as f32);
        assert!(read_dump(b"NOPE").is_err());
        assert!(read_dump(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn tiny_resolution_is_rejected() {
        let mls = MlsPointSet::from_oriented(&[Vec3::zero()], &[Vec3::unit_z()], &[0.1f64], 2).unwrap();
        assert!(extract_mesh(&mls, 1).is_err());
    }
}
