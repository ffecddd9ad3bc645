use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::CageError;

/// Closed, consistently outward-oriented triangle mesh used as a deformation
/// handle.
#[derive(Debug, Clone, PartialEq)]
pub struct CageMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub face_areas: Vec<f64>,
    pub face_normals: Vec<Vector3<f64>>,
}

/// Deformed vertex positions of a [`CageMesh`]; connectivity is borrowed from
/// the rest cage.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedCage {
    pub vertices: Vec<Vector3<f64>>,
}

impl DeformedCage {
    pub fn rest(cage: &CageMesh) -> Self {
        Self {
            vertices: cage.vertices.clone(),
        }
    }

    /// Unnormalized face normals (cross products of edges).
    pub fn area_normals(&self, faces: &[[usize; 3]]) -> Vec<Vector3<f64>> {
        faces
            .iter()
            .map(|f| triangle_cross(&self.vertices[f[0]], &self.vertices[f[1]], &self.vertices[f[2]]))
            .collect()
    }

    /// Faces whose deformed normal points against the rest normal.
    pub fn flipped_faces(&self, cage: &CageMesh) -> Vec<usize> {
        self.area_normals(&cage.faces)
            .iter()
            .zip(&cage.face_normals)
            .enumerate()
            .filter(|(_, (n, n0))| n.dot(n0) <= 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn max_abs_diff(&self, other: &DeformedCage) -> f64 {
        self.vertices
            .iter()
            .zip(&other.vertices)
            .map(|(a, b)| (a - b).abs().max())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn triangle_cross(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    (b - a).cross(&(c - a))
}

impl CageMesh {
    /// Builds a cage and checks every cage invariant.
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self, CageError> {
        let cage = Self::from_parts(vertices, faces)?;
        cage.validate()?;
        Ok(cage)
    }

    /// Builds a cage with derived per-face data but without the manifold and
    /// orientation checks.
    pub fn from_parts(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self, CageError> {
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(CageError::NonManifoldOutput(format!("face {f:?} indexes past the vertex list")));
        }
        let mut face_areas = Vec::with_capacity(faces.len());
        let mut face_normals = Vec::with_capacity(faces.len());
        for f in &faces {
            let n = triangle_cross(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]);
            let len = n.norm();
            face_areas.push(0.5 * len);
            face_normals.push(if len > 0.0 { n / len } else { Vector3::zeros() });
        }
        Ok(Self {
            vertices,
            faces,
            face_areas,
            face_normals,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn bbox_diag(&self) -> f64 {
        let (lo, hi) = crate::splat::bounds_of(&self.vertices).unwrap_or_default();
        (hi - lo).norm()
    }

    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| self.vertices[f[0]].dot(&self.vertices[f[1]].cross(&self.vertices[f[2]])))
            .sum::<f64>()
            / 6.0
    }

    pub fn num_edges(&self) -> usize {
        3 * self.faces.len() / 2
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.num_edges() as i64 + self.faces.len() as i64
    }

    /// Checks closed 2-manifoldness, consistent outward orientation and
    /// non-degenerate faces.
    pub fn validate(&self) -> Result<(), CageError> {
        if self.faces.len() < 4 {
            return Err(CageError::NonManifoldOutput("fewer than 4 faces".into()));
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * self.faces.len());
        for (fi, f) in self.faces.iter().enumerate() {
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(CageError::NonManifoldOutput(format!("face {fi} repeats a vertex")));
            }
            for k in 0..3 {
                let e = (f[k], f[(k + 1) % 3]);
                if directed.insert(e, fi).is_some() {
                    return Err(CageError::NonManifoldOutput(format!(
                        "directed edge {e:?} used twice (inconsistent orientation or non-manifold edge)"
                    )));
                }
            }
        }
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) {
                return Err(CageError::NonManifoldOutput(format!("edge ({a}, {b}) is a boundary edge")));
            }
        }
        // vertex manifoldness: the faces around each vertex form one fan
        let mut vert_faces: Vec<Vec<usize>> = vec![Vec::new(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                vert_faces[v].push(fi);
            }
        }
        for (v, fans) in vert_faces.iter().enumerate() {
            if fans.is_empty() {
                return Err(CageError::NonManifoldOutput(format!("vertex {v} is unreferenced")));
            }
            // walk around v via the outgoing edge of each face
            let next: HashMap<usize, usize> = fans
                .iter()
                .map(|&fi| {
                    let f = self.faces[fi];
                    let k = f.iter().position(|&x| x == v).unwrap();
                    (f[(k + 1) % 3], f[(k + 2) % 3])
                })
                .collect();
            let start = *next.keys().next().unwrap();
            let mut cur = start;
            let mut steps = 0;
            loop {
                cur = next[&cur];
                steps += 1;
                if cur == start || steps > fans.len() {
                    break;
                }
            }
            if steps != fans.len() {
                return Err(CageError::NonManifoldOutput(format!("vertex {v} is non-manifold")));
            }
        }
        let diag = self.bbox_diag();
        let min_area = 1e-10 * diag * diag;
        if let Some(fi) = self.face_areas.iter().position(|&a| !(a > min_area)) {
            return Err(CageError::NonManifoldOutput(format!("face {fi} is degenerate")));
        }
        if !(self.signed_volume() > 0.0) {
            return Err(CageError::NonManifoldOutput("cage is not outward oriented".into()));
        }
        Ok(())
    }

    /// Face-connected components, as a component id per face.
    pub fn face_components(&self) -> (usize, Vec<usize>) {
        face_components(self.vertices.len(), &self.faces)
    }

    /// Generalized winding number of the cage around `p`.
    pub fn winding_number(&self, p: &Vector3<f64>) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                solid_angle(
                    &(self.vertices[f[0]] - p),
                    &(self.vertices[f[1]] - p),
                    &(self.vertices[f[2]] - p),
                )
            })
            .sum::<f64>()
            / (4.0 * std::f64::consts::PI)
    }

    /// Unsigned distance from `p` to the cage surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                point_triangle_distance(p, &self.vertices[f[0]], &self.vertices[f[1]], &self.vertices[f[2]])
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<(), CageError> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self, CageError> {
        let (v, f) = parse_obj(&std::fs::read_to_string(path)?)?;
        Self::new(v, f)
    }

    /// Axis-aligned box `[lo, hi]` as a 12-triangle cage.
    pub fn cuboid(lo: Vector3<f64>, hi: Vector3<f64>) -> Self {
        let v: Vec<Vector3<f64>> = (0..8)
            .map(|i| {
                Vector3::new(
                    if i & 1 == 0 { lo.x } else { hi.x },
                    if i & 2 == 0 { lo.y } else { hi.y },
                    if i & 4 == 0 { lo.z } else { hi.z },
                )
            })
            .collect();
        let faces = vec![
            [0, 2, 3], [0, 3, 1], // -z
            [4, 5, 7], [4, 7, 6], // +z
            [0, 1, 5], [0, 5, 4], // -y
            [2, 6, 7], [2, 7, 3], // +y
            [0, 4, 6], [0, 6, 2], // -x
            [1, 3, 7], [1, 7, 5], // +x
        ];
        Self::new(v, faces).expect("cuboid is a valid cage")
    }

    /// Subdivided icosahedron projected onto a sphere.
    pub fn icosphere(center: Vector3<f64>, radius: f64, subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vector3<f64>> = [
            (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
            (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
            (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
            let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for f in &faces {
                let a = midpoint(f[0], f[1], &mut verts);
                let b = midpoint(f[1], f[2], &mut verts);
                let c = midpoint(f[2], f[0], &mut verts);
                next.extend_from_slice(&[[f[0], a, c], [f[1], b, a], [f[2], c, b], [a, b, c]]);
            }
            faces = next;
        }
        let verts = verts.into_iter().map(|v| center + v * radius).collect();
        Self::new(verts, faces).expect("icosphere is a valid cage")
    }
}

pub(crate) fn face_components(num_vertices: usize, faces: &[[usize; 3]]) -> (usize, Vec<usize>) {
    let mut parent: Vec<usize> = (0..num_vertices).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for f in faces {
        let a = find(&mut parent, f[0]);
        for &v in &f[1..] {
            let b = find(&mut parent, v);
            if a != b {
                parent[b] = a;
            }
        }
    }
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let comp = faces
        .iter()
        .map(|f| {
            let r = find(&mut parent, f[0]);
            let n = ids.len();
            *ids.entry(r).or_insert(n)
        })
        .collect();
    (ids.len(), comp)
}

pub fn parse_obj(text: &str) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 3]>), CageError> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut toks = line.split_whitespace();
        let bad = || CageError::Obj(format!("line {}: `{}`", ln + 1, line.trim()));
        match toks.next() {
            Some("v") => {
                let c: Vec<f64> = toks.take(3).map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
                if c.len() != 3 {
                    return Err(bad());
                }
                verts.push(Vector3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = toks
                    .map(|t| {
                        let i: i64 = t.split('/').next().unwrap_or("").parse().map_err(|_| bad())?;
                        let i = if i < 0 { verts.len() as i64 + i } else { i - 1 };
                        usize::try_from(i).map_err(|_| bad())
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(CageError::Obj(format!("line {}: only triangles are supported", ln + 1)));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Ok((verts, faces))
}

/// Signed solid angle of triangle (a, b, c) seen from the origin.
pub(crate) fn solid_angle(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
    let num = a.dot(&b.cross(c));
    let den = la * lb * lc + a.dot(b) * lc + a.dot(c) * lb + b.dot(c) * la;
    2.0 * num.atan2(den)
}

pub(crate) fn point_triangle_distance(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> f64 {
    // Ericson, closest point on triangle
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_are_valid() {
        let cube = CageMesh::cuboid(Vector3::repeat(-1.0), Vector3::repeat(1.0));
        assert!((cube.signed_volume() - 8.0).abs() < 1e-12);
        assert_eq!(cube.euler_characteristic(), 2);
        let ico = CageMesh::icosphere(Vector3::zeros(), 1.0, 3);
        assert_eq!(ico.num_vertices(), 642);
        assert_eq!(ico.euler_characteristic(), 2);
    }

    #[test]
    fn winding_inside_outside() {
        let ico = CageMesh::icosphere(Vector3::zeros(), 1.0, 2);
        assert!((ico.winding_number(&Vector3::new(0.1, 0.2, -0.3)) - 1.0).abs() < 1e-9);
        assert!(ico.winding_number(&Vector3::new(2.0, 0.0, 0.0)).abs() < 1e-9);
    }

    #[test]
    fn flipped_orientation_is_rejected() {
        let cube = CageMesh::cuboid(Vector3::repeat(-1.0), Vector3::repeat(1.0));
        let faces = cube.faces.iter().map(|f| [f[0], f[2], f[1]]).collect();
        assert!(CageMesh::new(cube.vertices.clone(), faces).is_err());
    }

    #[test]
    fn open_mesh_is_rejected() {
        let cube = CageMesh::cuboid(Vector3::repeat(-1.0), Vector3::repeat(1.0));
        let faces = cube.faces[..11].to_vec();
        assert!(matches!(
            CageMesh::new(cube.vertices.clone(), faces),
            Err(CageError::NonManifoldOutput(_))
        ));
    }

    #[test]
    fn obj_round_trip() {
        let ico = CageMesh::icosphere(Vector3::new(0.5, 0.0, 0.0), 2.0, 1);
        let (v, f) = parse_obj(&ico.to_obj()).unwrap();
        let back = CageMesh::new(v, f).unwrap();
        assert_eq!(back.faces, ico.faces);
        assert_eq!(back.vertices, ico.vertices);
    }

    #[test]
    fn triangle_distance_regions() {
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(1.0, 0.0, 0.0);
        let c = Vector3::new(0.0, 1.0, 0.0);
        assert!((point_triangle_distance(&Vector3::new(0.2, 0.2, 0.5), &a, &b, &c) - 0.5).abs() < 1e-12);
        assert!((point_triangle_distance(&Vector3::new(-1.0, 0.0, 0.0), &a, &b, &c) - 1.0).abs() < 1e-12);
        assert!((point_triangle_distance(&Vector3::new(1.0, 1.0, 0.0), &a, &b, &c) - 0.5f64.sqrt()).abs() < 1e-12);
    }
}
