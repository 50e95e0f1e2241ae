use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::Point;
use crate::error::{Error, Result};

/// Color assigned to OBJ vertices that carry no color.
const DEFAULT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// Triangle mesh with per-vertex colors.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, colors: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if colors.len() != vertices.len() {
            return Err(Error::DimensionMismatch {
                context: "mesh vertex colors".into(),
                expected: vertices.len(),
                found: colors.len(),
            });
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::InvalidConfig(format!(
                "triangle {t:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            colors,
            triangles,
        })
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        let n = cross(sub(b, a), sub(c, a));
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Parses a Wavefront OBJ subset: `v x y z [r g b]` and polygonal `f`
    /// lines (fan-triangulated; `a/b/c` index forms and negative indices are
    /// accepted). Other statements are ignored.
    pub fn parse_obj(src: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut colors = Vec::new();
        let mut triangles = Vec::new();
        let err = |ln: usize, msg: String| Error::Parse {
            location: format!("obj line {}", ln + 1),
            message: msg,
        };
        for (ln, line) in src.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let vals = it
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| err(ln, e.to_string()))?;
                    match vals.len() {
                        3 | 4 => {
                            vertices.push([vals[0], vals[1], vals[2]]);
                            colors.push(DEFAULT_COLOR);
                        }
                        6 | 7 => {
                            vertices.push([vals[0], vals[1], vals[2]]);
                            colors.push([vals[3], vals[4], vals[5]]);
                        }
                        n => return Err(err(ln, format!("vertex with {n} values"))),
                    }
                }
                Some("f") => {
                    let idx = it
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let i: i64 = head.parse().map_err(|_| err(ln, format!("bad index `{t}`")))?;
                            let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                            if resolved < 0 || resolved as usize >= vertices.len() {
                                return Err(err(ln, format!("index {i} out of range")));
                            }
                            Ok(resolved as usize)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if idx.len() < 3 {
                        return Err(err(ln, "face with fewer than 3 vertices".into()));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, colors, triangles)
    }

    pub fn read_obj(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&src)
    }
}

/// Draws `n` points uniformly over the mesh surface.
///
/// A triangle is chosen with probability proportional to its area, then a
/// point is drawn uniformly inside it via square-root barycentric sampling;
/// its color is the barycentric blend of the vertex colors.
pub fn sample_surface_points<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(Error::InvalidConfig("point count must be at least 1".into()));
    }
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t)).collect();
    let picker = WeightedIndex::new(&areas).map_err(|_| Error::DegenerateMesh)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let tri = mesh.triangles[picker.sample(rng)];
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        let w = [1.0 - r1, r1 * (1.0 - r2), r1 * r2];
        let blend = |attr: &[[f64; 3]]| -> [f32; 3] {
            std::array::from_fn(|c| (0..3).map(|k| w[k] * attr[tri[k]][c]).sum::<f64>() as f32)
        };
        let mut rgb = blend(&mesh.colors);
        for c in &mut rgb {
            *c = c.clamp(0.0, 1.0);
        }
        out.push(Point::new(blend(&mesh.vertices), rgb));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_triangle(colors: [[f64; 3]; 3]) -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            colors.to_vec(),
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn unit_triangle_centroid() {
        let m = unit_triangle([[0.5; 3]; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sample_surface_points(&m, 1000, &mut rng).unwrap();
        assert_eq!(pts.len(), 1000);
        let (mut cx, mut cy, mut cz) = (0.0, 0.0, 0.0);
        for p in &pts {
            let [x, y, z] = p.xyz;
            assert!(x >= 0.0 && y >= 0.0 && x + y <= 1.0 + 1e-6 && z == 0.0);
            cx += x as f64;
            cy += y as f64;
            cz += z as f64;
        }
        let n = pts.len() as f64;
        assert!((cx / n - 1.0 / 3.0).abs() < 0.05);
        assert!((cy / n - 1.0 / 3.0).abs() < 0.05);
        assert!((cz / n).abs() < 0.05);
    }

    #[test]
    fn area_weighting_one_to_three() {
        // Triangle A has area 1, triangle B has area 3 (disjoint in x).
        let m = Mesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [10.0, 0.0, 0.0],
                [13.0, 0.0, 0.0],
                [10.0, 2.0, 0.0],
            ],
            vec![[0.0; 3]; 6],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        assert!((m.triangle_area(0) - 1.0).abs() < 1e-12);
        assert!((m.triangle_area(1) - 3.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sample_surface_points(&m, 40_000, &mut rng).unwrap();
        let big = pts.iter().filter(|p| p.xyz[0] >= 10.0).count() as f64 / 40_000.0;
        // p = 0.75, sigma = sqrt(p(1-p)/n) ~= 0.00217; 4 sigma lies inside [0.73, 0.77].
        assert!((0.73..=0.77).contains(&big), "fraction {big}");
    }

    #[test]
    fn barycentric_colors_sum_to_one() {
        let m = unit_triangle([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in sample_surface_points(&m, 500, &mut rng).unwrap() {
            let s: f64 = p.rgb.iter().map(|&c| c as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "sum {s}");
        }
    }

    #[test]
    fn degenerate_mesh_rejected() {
        let m = Mesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0.0; 3]; 3],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_surface_points(&m, 10, &mut rng),
            Err(Error::DegenerateMesh)
        ));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let m = unit_triangle([[0.2; 3]; 3]);
        let a = sample_surface_points(&m, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_surface_points(&m, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parses_obj_with_colors_and_quads() {
        let src = "# quad\nv 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 1 1 0 0 0 1\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n";
        let m = Mesh::parse_obj(src).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert_eq!(m.colors[3], DEFAULT_COLOR);
        assert!((m.total_area() - 1.0).abs() < 1e-12);
    }
}
