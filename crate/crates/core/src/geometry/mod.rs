//! Geometric primitives, meshes and signed distance fields.

mod mesh;
mod mesh_sdf;
mod sdf;
mod vec3;

pub use mesh::{normalize_mesh, primitives, sample_surface, NormalizeTransform, OrientedPointCloud, TriangleMesh, NORMALIZED_SIDE};
pub use mesh_sdf::{closest_point_on_triangle, mesh_to_sdf, solid_angle, MeshQuery, WATERTIGHT_PROBES};
pub use sdf::{analytic_sdf, SdfGrid, Shape};
pub use vec3::{Aabb, Mat3, Vec3};
