//! Procedural reference shapes used by tests and studies.

use super::{norm3, scale3, Mesh, Vec3};
use std::collections::HashMap;

/// Unit icosphere with the given number of subdivision passes, outward
/// winding. Subdivision 4 gives 2562 vertices / 5120 triangles, close enough
/// to a sphere that the faceting error stays below 1e-3.
pub fn icosphere(subdivisions: usize) -> Mesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in &mut vertices {
        *v = scale3(*v, 1.0 / norm3(*v));
    }
    let mut triangles: Vec<[usize; 3]> = vec![
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
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for t in &triangles {
            let mid = |a: usize, b: usize, vertices: &mut Vec<Vec3>, cache: &mut HashMap<(usize, usize), usize>| {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    let m = [
                        (vertices[a][0] + vertices[b][0]) * 0.5,
                        (vertices[a][1] + vertices[b][1]) * 0.5,
                        (vertices[a][2] + vertices[b][2]) * 0.5,
                    ];
                    let unit = scale3(m, 1.0 / norm3(m));
                    vertices.push(unit);
                    vertices.len() - 1
                })
            };
            let ab = mid(t[0], t[1], &mut vertices, &mut midpoint);
            let bc = mid(t[1], t[2], &mut vertices, &mut midpoint);
            let ca = mid(t[2], t[0], &mut vertices, &mut midpoint);
            next.push([t[0], ab, ca]);
            next.push([t[1], bc, ab]);
            next.push([t[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        triangles = next;
    }
    Mesh::new(vertices, triangles).expect("icosphere construction is valid")
}
