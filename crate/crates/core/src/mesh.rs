//! Triangular meshes of the unit square with oriented faces.
//!
//! Every face carries a global orientation `v0 < v1` (by vertex index) and a
//! unit normal obtained by rotating `v1 - v0` clockwise. Elements see each of
//! their faces with a sign: `+1` when their outward normal agrees with the
//! face normal, `-1` otherwise. Face functions are parametrized by
//! `s in [0, 1]` running from `v0` to `v1`, so both neighbours of an interior
//! face evaluate the same trace basis.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

pub type Point = Vector2<f64>;

#[derive(Debug, Clone)]
pub struct Face {
    pub v0: usize,
    pub v1: usize,
    /// Unit normal, clockwise rotation of `v1 - v0`.
    pub normal: Point,
    pub length: f64,
    /// One element for boundary faces, two for interior faces.
    pub elements: Vec<usize>,
    pub is_dirichlet: bool,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.elements.len() == 1
    }
}

/// A face as seen from one element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalFace {
    pub face: usize,
    /// `+1` if the element's outward normal equals the face normal.
    pub sign: i8,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    /// Counterclockwise vertex triples.
    pub elements: Vec<[usize; 3]>,
    pub faces: Vec<Face>,
    /// Local face `j` of an element is the edge from vertex `j` to vertex `j + 1 (mod 3)`.
    pub elem_faces: Vec<[LocalFace; 3]>,
}

/// Affine map `x = J x_ref + b` from the reference triangle
/// `{x, y >= 0, x + y <= 1}` onto an element.
#[derive(Debug, Clone, Copy)]
pub struct AffineMap {
    pub jacobian: Matrix2<f64>,
    pub translation: Point,
    pub det: f64,
    pub inv_jacobian: Matrix2<f64>,
    /// Element area, `det J / 2`.
    pub measure: f64,
}

pub const REFERENCE_TRIANGLE_MEASURE: f64 = 0.5;

impl AffineMap {
    pub fn from_vertices(elem: usize, a: Point, b: Point, c: Point) -> Result<Self> {
        let jacobian = Matrix2::from_columns(&[b - a, c - a]);
        let det = jacobian.determinant();
        let scale = (b - a).norm().max((c - a).norm()).max(f64::MIN_POSITIVE);
        if !(det > 1e-14 * scale * scale) {
            return Err(Error::DegenerateElement { elem, det });
        }
        let inv_jacobian = jacobian.try_inverse().ok_or(Error::DegenerateElement { elem, det })?;
        Ok(Self {
            jacobian,
            translation: a,
            det,
            inv_jacobian,
            measure: det * REFERENCE_TRIANGLE_MEASURE,
        })
    }

    pub fn apply(&self, reference: [f64; 2]) -> Point {
        self.jacobian * Vector2::new(reference[0], reference[1]) + self.translation
    }

    /// `J^{-T}`, which maps reference gradients to physical gradients.
    pub fn inv_transpose(&self) -> Matrix2<f64> {
        self.inv_jacobian.transpose()
    }
}

impl Mesh {
    /// Builds the mesh from counterclockwise triangles; every boundary face is Dirichlet.
    pub fn from_triangles(vertices: Vec<Point>, elements: Vec<[usize; 3]>) -> Result<Self> {
        let mut faces: Vec<Face> = Vec::with_capacity(elements.len() * 2);
        let mut lookup: HashMap<(usize, usize), usize> = HashMap::with_capacity(elements.len() * 2);
        let mut elem_faces = Vec::with_capacity(elements.len());

        for (e, tri) in elements.iter().enumerate() {
            for &v in tri {
                if v >= vertices.len() {
                    return Err(Error::InvalidMesh(format!("element {e} references vertex {v}")));
                }
            }
            AffineMap::from_vertices(e, vertices[tri[0]], vertices[tri[1]], vertices[tri[2]])?;

            let mut local = [LocalFace { face: 0, sign: 1 }; 3];
            for j in 0..3 {
                let a = tri[j];
                let b = tri[(j + 1) % 3];
                let key = (a.min(b), a.max(b));
                let sign = if a < b { 1 } else { -1 };
                let face = match lookup.get(&key) {
                    Some(&f) => {
                        if faces[f].elements.len() >= 2 {
                            return Err(Error::InvalidMesh(format!(
                                "edge ({}, {}) shared by more than two elements",
                                key.0, key.1
                            )));
                        }
                        faces[f].elements.push(e);
                        f
                    }
                    None => {
                        let (v0, v1) = key;
                        let d = vertices[v1] - vertices[v0];
                        let length = d.norm();
                        faces.push(Face {
                            v0,
                            v1,
                            normal: Vector2::new(d.y, -d.x) / length,
                            length,
                            elements: vec![e],
                            is_dirichlet: false,
                        });
                        lookup.insert(key, faces.len() - 1);
                        faces.len() - 1
                    }
                };
                local[j] = LocalFace { face, sign };
            }
            elem_faces.push(local);
        }

        for face in &mut faces {
            face.is_dirichlet = face.is_boundary();
        }
        for (e, local) in elem_faces.iter().enumerate() {
            let f = &faces[local[0].face];
            if f.elements.len() == 2 {
                let other = if f.elements[0] == e {
                    f.elements[1]
                } else {
                    f.elements[0]
                };
                let other_sign = elem_faces[other]
                    .iter()
                    .find(|lf| lf.face == local[0].face)
                    .map(|lf| lf.sign)
                    .unwrap_or(0);
                if other_sign == local[0].sign {
                    return Err(Error::InvalidMesh(format!(
                        "elements {e} and {other} are not consistently oriented"
                    )));
                }
            }
        }

        Ok(Self {
            vertices,
            elements,
            faces,
            elem_faces,
        })
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_dirichlet_faces(&self) -> usize {
        self.faces.iter().filter(|f| f.is_dirichlet).count()
    }

    pub fn affine_map(&self, elem: usize) -> Result<AffineMap> {
        let tri = self.elements.get(elem).ok_or(Error::ElementOutOfRange {
            elem,
            count: self.elements.len(),
        })?;
        AffineMap::from_vertices(
            elem,
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        )
    }

    pub fn centroid(&self, elem: usize) -> Point {
        let [a, b, c] = self.elements[elem];
        (self.vertices[a] + self.vertices[b] + self.vertices[c]) / 3.0
    }

    /// Physical point at parameter `s` along a face, from `v0` to `v1`.
    pub fn face_point(&self, face: usize, s: f64) -> Point {
        let f = &self.faces[face];
        self.vertices[f.v0] * (1.0 - s) + self.vertices[f.v1] * s
    }

    /// Reference coordinates of the point at global face parameter `s` on
    /// local face `j` of `elem`.
    pub fn face_reference_point(&self, elem: usize, j: usize, s: f64) -> [f64; 2] {
        reference_face_point(j, self.elem_faces[elem][j].sign, s)
    }

    /// Outward unit normal of local face `j` of `elem`.
    pub fn outward_normal(&self, elem: usize, j: usize) -> Point {
        let lf = self.elem_faces[elem][j];
        self.faces[lf.face].normal * f64::from(lf.sign)
    }

    /// Returns a copy with elements listed in the order `perm[new] = old`.
    pub fn permute_elements(&self, perm: &[usize]) -> Result<Self> {
        let elements = perm.iter().map(|&old| self.elements[old]).collect();
        Self::from_triangles(self.vertices.clone(), elements)
    }

    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "vertices {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{:.17e} {:.17e}", v.x, v.y);
        }
        let _ = writeln!(out, "elements {}", self.elements.len());
        for (tri, lf) in self.elements.iter().zip(&self.elem_faces) {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                tri[0], tri[1], tri[2], lf[0].face, lf[0].sign, lf[1].face, lf[1].sign, lf[2].face, lf[2].sign
            );
        }
        let _ = writeln!(out, "faces {}", self.faces.len());
        for f in &self.faces {
            let adj: Vec<String> = f.elements.iter().map(|e| e.to_string()).collect();
            let _ = writeln!(out, "{} {} {} {}", f.v0, f.v1, u8::from(f.is_dirichlet), adj.join(" "));
        }
        out
    }

    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.dump_text().as_bytes())?;
        Ok(())
    }
}

/// Reference point at global face parameter `s` on local face `j`, which runs
/// from reference vertex `j` to `j + 1`; the parameter is reversed when
/// `sign < 0`.
pub fn reference_face_point(j: usize, sign: i8, s: f64) -> [f64; 2] {
    const REF: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let t = if sign > 0 { s } else { 1.0 - s };
    let a = REF[j];
    let b = REF[(j + 1) % 3];
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Uniform mesh of `(0,1)^2`: `n x n` squares, each split along the diagonal
/// from its lower-left to its upper-right corner.
pub fn build_uniform_mesh(n_per_side: usize) -> Result<Mesh> {
    if n_per_side == 0 {
        return Err(Error::Config("n_per_side must be at least 1".into()));
    }
    let n = n_per_side;
    let h = 1.0 / n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push(Vector2::new(i as f64 * h, j as f64 * h));
        }
    }
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut elements = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (ll, lr, ur, ul) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            elements.push([ll, lr, ur]);
            elements.push([ll, ur, ul]);
        }
    }
    Mesh::from_triangles(vertices, elements)
}
