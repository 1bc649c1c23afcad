//! Text point files, the binary SDF grid format and a Wavefront OBJ subset.

use std::fmt::Write as _;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, OrientedPointCloud, SdfGrid, TriangleMesh, Vec3};
use crate::imls::{MlsPoint, MlsPointSet};
use crate::octree::{cell_of, MAX_DEPTH};
use crate::real::Real;

pub const SDF_MAGIC: &[u8; 4] = b"IMLS";
pub const SDF_VERSION: u32 = 1;

/// Contents of a point file. Optional columns are all-or-nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFile<T> {
    pub positions: Vec<Vec3<T>>,
    pub normals: Option<Vec<Vec3<T>>>,
    pub radii: Option<Vec<T>>,
    /// Trailing `# i j k` host coordinates, when every line carries one.
    pub hosts: Option<Vec<[u32; 3]>>,
    /// Value of a `# depth N` comment line.
    pub depth: Option<u32>,
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let bytes = read_file(&path)?;
    String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is not UTF-8 text", path.as_ref().display())))
}

pub fn write_file(path: impl AsRef<Path>, data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, data).map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))
}

fn parse_num<T: Real>(tok: &str, line: usize) -> Result<T> {
    let v: f64 = tok.parse().map_err(|_| Error::Format(format!("line {line}: bad number {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("line {line}: non-finite value")));
    }
    T::from_f64(v).ok_or_else(|| Error::Format(format!("line {line}: value out of range")))
}

pub fn parse_points<T: Real>(text: &str) -> Result<PointFile<T>> {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut radii = Vec::new();
    let mut hosts = Vec::new();
    let mut columns = None;
    let mut depth = None;
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let (body, comment) = match raw.find('#') {
            Some(i) => (&raw[..i], Some(raw[i + 1..].trim())),
            None => (raw, None),
        };
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.is_empty() {
            if let Some(d) = comment.and_then(|c| c.strip_prefix("depth")) {
                let d: u32 = d.trim().parse().map_err(|_| Error::Format(format!("line {ln}: bad depth comment")))?;
                depth = Some(d);
            }
            continue;
        }
        if !matches!(toks.len(), 3 | 6 | 7) {
            return Err(Error::Format(format!("line {ln}: expected 3, 6 or 7 columns, found {}", toks.len())));
        }
        if *columns.get_or_insert(toks.len()) != toks.len() {
            return Err(Error::Format(format!("line {ln}: column count differs from earlier lines")));
        }
        let v: Vec<T> = toks.iter().map(|t| parse_num(t, ln)).collect::<Result<_>>()?;
        positions.push(Vec3::new(v[0], v[1], v[2]));
        if v.len() >= 6 {
            normals.push(Vec3::new(v[3], v[4], v[5]));
        }
        if v.len() == 7 {
            radii.push(v[6]);
        }
        if let Some(c) = comment {
            let h: Vec<u32> = c.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if h.len() == 3 {
                hosts.push([h[0], h[1], h[2]]);
            }
        }
    }
    let n = positions.len();
    Ok(PointFile {
        normals: (columns.unwrap_or(0) >= 6).then_some(normals),
        radii: (columns == Some(7)).then_some(radii),
        hosts: (n > 0 && hosts.len() == n).then_some(hosts),
        positions,
        depth,
    })
}

/// Oriented point cloud from a point file. Normals that are not already unit
/// length are normalized on load.
pub fn parse_cloud<T: Real>(text: &str) -> Result<OrientedPointCloud<T>> {
    let f = parse_points::<T>(text)?;
    if f.positions.is_empty() {
        return Err(Error::EmptyInput("point file has no points".into()));
    }
    let normals = match f.normals {
        Some(ns) => Some(
            ns.into_iter()
                .enumerate()
                .map(|(i, n)| {
                    if (n.norm() - T::one()).abs() <= T::lit(1e-12) {
                        return Ok(n);
                    }
                    n.try_normalize(T::lit(1e-12)).ok_or_else(|| Error::Format(format!("point {i} has a zero normal")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    OrientedPointCloud::new(f.positions, normals)
}

pub fn format_cloud<T: Real>(cloud: &OrientedPointCloud<T>) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p.x, p.y, p.z);
        if let Some(ns) = &cloud.normals {
            let n = ns[i];
            let _ = write!(out, " {} {} {}", n.x, n.y, n.z);
        }
        out.push('\n');
    }
    out
}

/// MLS points as `x y z nx ny nz r # i j k`, preceded by a `# depth N` line.
/// Values use shortest round-trip formatting so reading back is exact.
pub fn format_mls<T: Real>(mls: &MlsPointSet<T>) -> String {
    let mut out = String::with_capacity(mls.len() * 120);
    let _ = writeln!(out, "# depth {}", mls.depth());
    for p in mls.points() {
        let (x, n) = (p.position, p.normal);
        let [i, j, k] = mls.octants()[p.octant];
        let _ = writeln!(out, "{} {} {} {} {} {} {} # {i} {j} {k}", x.x, x.y, x.z, n.x, n.y, n.z, p.radius);
    }
    out
}

/// Inverse of [`format_mls`]. Without host comments each point is hosted by
/// the depth-`N` cell containing it.
pub fn parse_mls<T: Real>(text: &str) -> Result<MlsPointSet<T>> {
    let f = parse_points::<T>(text)?;
    let depth = f.depth.ok_or_else(|| Error::Format("MLS file lacks a `# depth N` line".into()))?;
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::Format(format!("depth {depth} outside 1..={MAX_DEPTH}")));
    }
    let (normals, radii) = match (f.normals, f.radii) {
        (Some(n), Some(r)) => (n, r),
        _ => return Err(Error::Format("MLS file needs 7 columns per point".into())),
    };
    let side = 1u32 << depth;
    let hosts = match f.hosts {
        Some(h) => {
            if h.iter().flatten().any(|&c| c >= side) {
                return Err(Error::Format(format!("host coordinate outside a depth-{depth} grid")));
            }
            h
        }
        None => f.positions.iter().map(|&p| cell_of(depth, p)).collect(),
    };
    let mut octants = Vec::new();
    let mut slot = std::collections::HashMap::new();
    let points = (0..f.positions.len())
        .map(|i| {
            let octant = *slot.entry(hosts[i]).or_insert_with(|| {
                octants.push(hosts[i]);
                octants.len() - 1
            });
            MlsPoint { position: f.positions[i], normal: normals[i], radius: radii[i], octant }
        })
        .collect();
    MlsPointSet::with_octants(points, octants, depth)
}

pub fn encode_sdf<T: Real>(grid: &SdfGrid<T>) -> Vec<u8> {
    let r = grid.resolution();
    let mut out = Vec::with_capacity(36 + 4 * r * r * r);
    out.extend_from_slice(SDF_MAGIC);
    out.write_u32::<LittleEndian>(SDF_VERSION).unwrap();
    out.write_u32::<LittleEndian>(r as u32).unwrap();
    let b = grid.bounds();
    for v in b.min.to_array().into_iter().chain(b.max.to_array()) {
        out.write_f32::<LittleEndian>(v.as_f32()).unwrap();
    }
    for &v in grid.values() {
        out.write_f32::<LittleEndian>(v.as_f32()).unwrap();
    }
    out
}

pub fn decode_sdf<T: Real>(bytes: &[u8]) -> Result<SdfGrid<T>> {
    let short = |_| Error::Format("SDF file is truncated".into());
    let mut rd = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    rd.read_exact(&mut magic).map_err(short)?;
    if &magic != SDF_MAGIC {
        return Err(Error::Format("not an SDF grid file (bad magic)".into()));
    }
    let version = rd.read_u32::<LittleEndian>().map_err(short)?;
    if version != SDF_VERSION {
        return Err(Error::Format(format!("unsupported SDF version {version}")));
    }
    let r = rd.read_u32::<LittleEndian>().map_err(short)? as usize;
    if r < 2 {
        return Err(Error::Invalid("resolution too small (need R >= 2)".into()));
    }
    let mut b = [0f32; 6];
    rd.read_f32_into::<LittleEndian>(&mut b).map_err(short)?;
    let n = r.checked_pow(3).ok_or_else(|| Error::Format("resolution overflows".into()))?;
    if bytes.len() as u64 != 36 + 4 * n as u64 {
        return Err(Error::Format(format!("SDF file has {} bytes, expected {}", bytes.len(), 36 + 4 * n as u64)));
    }
    let mut raw = vec![0f32; n];
    rd.read_f32_into::<LittleEndian>(&mut raw).map_err(short)?;
    let cast = |v: f32| T::lit(v as f64);
    let bounds = Aabb::new(Vec3::new(cast(b[0]), cast(b[1]), cast(b[2])), Vec3::new(cast(b[3]), cast(b[4]), cast(b[5])));
    SdfGrid::new_unchecked(r, bounds, raw.into_iter().map(cast).collect())
}

/// `v`, `vn` and `f` lines; normals are written when present and indexed like vertices.
pub fn format_obj<T: Real>(mesh: &TriangleMesh<T>) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 80 + mesh.triangles.len() * 24);
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    if let Some(ns) = &mesh.normals {
        for n in ns {
            let _ = writeln!(out, "vn {} {} {}", n.x, n.y, n.z);
        }
    }
    let with_n = mesh.normals.is_some();
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| i + 1);
        if with_n {
            let _ = writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}");
        } else {
            let _ = writeln!(out, "f {a} {b} {c}");
        }
    }
    out
}

fn obj_index(tok: &str, count: usize, ln: usize) -> Result<u32> {
    let first = tok.split('/').next().unwrap_or("");
    let i: i64 = first.parse().map_err(|_| Error::Format(format!("line {ln}: bad face index {tok:?}")))?;
    let idx = if i > 0 { i - 1 } else { count as i64 + i };
    if i == 0 || idx < 0 || idx as usize >= count {
        return Err(Error::Format(format!("line {ln}: face index {i} out of range")));
    }
    Ok(idx as u32)
}

/// Reads `v`, `vn` and `f` lines, fan-triangulating polygons. Normals are
/// kept only when there is exactly one per vertex. Other records are ignored.
pub fn parse_obj<T: Real>(text: &str) -> Result<TriangleMesh<T>> {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut triangles = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let body = raw.split('#').next().unwrap_or("");
        let mut toks = body.split_whitespace();
        match toks.next() {
            Some("v") => {
                let v: Vec<T> = toks.take(3).map(|t| parse_num(t, ln)).collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(Error::Format(format!("line {ln}: vertex needs 3 coordinates")));
                }
                vertices.push(Vec3::new(v[0], v[1], v[2]));
            }
            Some("vn") => {
                let v: Vec<T> = toks.take(3).map(|t| parse_num(t, ln)).collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(Error::Format(format!("line {ln}: normal needs 3 components")));
                }
                normals.push(Vec3::new(v[0], v[1], v[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = toks.map(|t| obj_index(t, vertices.len(), ln)).collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::Format(format!("line {ln}: face needs at least 3 vertices")));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mesh = TriangleMesh::new(vertices, triangles)?;
    if !normals.is_empty() && normals.len() == mesh.vertices.len() {
        let unit: Option<Vec<_>> = normals.iter().map(|n| n.try_normalize(T::lit(1e-12))).collect();
        if let Some(unit) = unit {
            return mesh.with_normals(unit);
        }
    }
    Ok(mesh)
}

pub fn read_obj<T: Real>(path: impl AsRef<Path>) -> Result<TriangleMesh<T>> {
    parse_obj(&read_text(path)?)
}

pub fn read_sdf<T: Real>(path: impl AsRef<Path>) -> Result<SdfGrid<T>> {
    decode_sdf(&read_file(path)?)
}

pub fn read_cloud<T: Real>(path: impl AsRef<Path>) -> Result<OrientedPointCloud<T>> {
    parse_cloud(&read_text(path)?)
}

pub fn read_mls<T: Real>(path: impl AsRef<Path>) -> Result<MlsPointSet<T>> {
    parse_mls(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{primitives, Shape};

    #[test]
    fn point_file_columns_and_comments() {
        let f = parse_points::<f64>("# header\n0 0 0 0 0 1\n\n1 2 3 1 0 0 # note\n").unwrap();
        assert_eq!(f.positions.len(), 2);
        assert_eq!(f.normals.as_ref().unwrap()[1], Vec3::new(1.0, 0.0, 0.0));
        assert!(f.radii.is_none());
        assert!(f.hosts.is_none());
        assert!(parse_points::<f64>("0 0 0\n1 1 1 0 0 1\n").is_err());
        assert!(parse_points::<f64>("0 0\n").is_err());
        assert!(parse_points::<f64>("0 0 nan\n").is_err());
        assert!(parse_cloud::<f64>("# nothing\n").is_err());
    }

    #[test]
    fn cloud_round_trip() {
        let c = OrientedPointCloud::new(
            vec![Vec3::new(0.1, -0.2, 0.3), Vec3::new(1.0 / 3.0, 0.0, 0.5)],
            Some(vec![Vec3::new(0.0, 0.6, 0.8), Vec3::new(0.0, 0.0, -1.0)]),
        )
        .unwrap();
        assert_eq!(parse_cloud::<f64>(&format_cloud(&c)).unwrap(), c);
        let bare = OrientedPointCloud::unoriented(vec![Vec3::new(0.25, 0.5, -0.75)]);
        assert_eq!(parse_cloud::<f64>(&format_cloud(&bare)).unwrap(), bare);
    }

    #[test]
    fn mls_round_trip_is_exact() {
        let pos = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.4, 0.55, 0.0)];
        let nrm = vec![Vec3::new(1.0, 2.0, 2.0) / 3.0, Vec3::new(0.0, 0.0, 1.0)];
        let mls = MlsPointSet::from_oriented(&pos, &nrm, &[0.1, 0.2], 4).unwrap();
        let text = format_mls(&mls);
        assert!(text.starts_with("# depth 4\n"));
        let back = parse_mls::<f64>(&text).unwrap();
        assert_eq!(back.points(), mls.points());
        assert_eq!(back.octants(), mls.octants());
        assert_eq!(back.depth(), 4);
        assert!(parse_mls::<f64>("0 0 0 0 0 1 0.1\n").is_err());
        assert!(parse_mls::<f64>("# depth 3\n0 0 0 0 0 1\n").is_err());
        assert!(parse_mls::<f64>("# depth 2\n0 0 0 0 0 1 0.1 # 9 0 0\n").is_err());
    }

    #[test]
    fn sdf_round_trip_and_layout() {
        let grid = SdfGrid::from_shape(&Shape::sphere(Vec3::zero(), 0.5).unwrap(), 5).unwrap();
        let bytes = encode_sdf(&grid);
        assert_eq!(&bytes[..4], b"IMLS");
        assert_eq!(bytes.len(), 36 + 4 * 125);
        // x-major: value (1,2,3) sits at index (1*5+2)*5+3
        let off = 36 + 4 * ((5 + 2) * 5 + 3);
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        assert_eq!(v, grid.at(1, 2, 3) as f32);
        let back = decode_sdf::<f64>(&bytes).unwrap();
        assert_eq!(back.resolution(), 5);
        assert_eq!(back.bounds(), grid.bounds());
        for (a, b) in back.values().iter().zip(grid.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(decode_sdf::<f64>(&bytes[..40]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_sdf::<f64>(&bad).is_err());
        let mut tiny = bytes[..36].to_vec();
        tiny[8..12].copy_from_slice(&1u32.to_le_bytes());
        let err = decode_sdf::<f64>(&tiny).unwrap_err().to_string();
        assert!(err.contains("resolution too small"), "{err}");
    }

    #[test]
    fn obj_round_trip_and_polygons() {
        let m = primitives::icosphere(Vec3::zero(), 0.5f64, 1);
        let back = parse_obj::<f64>(&format_obj(&m)).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.triangles, m.triangles);
        let with_n = m.clone().with_normals(m.compute_vertex_normals()).unwrap();
        assert_eq!(parse_obj::<f64>(&format_obj(&with_n)).unwrap().normals.unwrap().len(), m.vertices.len());
        let quad = parse_obj::<f64>("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1 -1/1\n").unwrap();
        assert_eq!(quad.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(parse_obj::<f64>("v 0 0 0\nf 1 2 3\n").is_err());
        assert!(parse_obj::<f64>("v 0 0\n").is_err());
    }
}
