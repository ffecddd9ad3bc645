//! Iso-surface extraction on a regular grid.
//!
//! Each cube is split into six tetrahedra around its main diagonal; the split
//! is identical for every cube, so neighbouring cubes agree on shared faces and
//! the output is watertight and edge-manifold without ambiguity tables.

use std::collections::HashMap;

use nalgebra::Vector3;

use super::sdf::ScalarGrid;

const NODE_GAP: f64 = 0.02;

const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

/// Triangulates `{ value == iso }`; triangles face from `value < iso` toward
/// `value > iso`. Nodes on the grid boundary count as outside so the surface
/// is always closed.
pub fn contour(grid: &ScalarGrid, iso: f64) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let [nx, ny, nz] = grid.dims;
    let inside = |i: usize, j: usize, k: usize| -> bool {
        i > 0 && j > 0 && k > 0 && i + 1 < nx && j + 1 < ny && k + 1 < nz && grid.get(i, j, k) < iso
    };
    let mut verts: Vec<Vector3<f64>> = Vec::new();
    let mut edge_vert: HashMap<(usize, usize), usize> = HashMap::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner = |c: usize| (i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                let mut ins = [false; 8];
                let mut any_in = false;
                let mut any_out = false;
                for (c, slot) in ins.iter_mut().enumerate() {
                    let (a, b, d) = corner(c);
                    *slot = inside(a, b, d);
                    any_in |= *slot;
                    any_out |= !*slot;
                }
                if !(any_in && any_out) {
                    continue;
                }
                for tet in &TETS {
                    let inn: Vec<usize> = tet.iter().copied().filter(|&c| ins[c]).collect();
                    let out: Vec<usize> = tet.iter().copied().filter(|&c| !ins[c]).collect();
                    if inn.is_empty() || out.is_empty() {
                        continue;
                    }
                    let mut vert_on = |a: usize, b: usize| -> usize {
                        let (ai, aj, ak) = corner(a);
                        let (bi, bj, bk) = corner(b);
                        let ga = grid.index(ai, aj, ak);
                        let gb = grid.index(bi, bj, bk);
                        let key = (ga.min(gb), ga.max(gb));
                        *edge_vert.entry(key).or_insert_with(|| {
                            let va = grid.values[ga];
                            let vb = grid.values[gb];
                            let pa = grid.node(ai, aj, ak);
                            let pb = grid.node(bi, bj, bk);
                            // kept off the nodes so a level set through a node cannot leave zero-area slivers
                            let t = if (vb - va).abs() > 0.0 { ((iso - va) / (vb - va)).clamp(NODE_GAP, 1.0 - NODE_GAP) } else { 0.5 };
                            verts.push(pa + (pb - pa) * t);
                            verts.len() - 1
                        })
                    };
                    let pos = |c: usize| {
                        let (a, b, d) = corner(c);
                        grid.node(a, b, d)
                    };
                    // inside -> outside direction used to orient triangles
                    let dir = out.iter().map(|&c| pos(c)).sum::<Vector3<f64>>() / out.len() as f64
                        - inn.iter().map(|&c| pos(c)).sum::<Vector3<f64>>() / inn.len() as f64;
                    let mut tris: Vec<[usize; 3]> = Vec::with_capacity(2);
                    match (inn.len(), out.len()) {
                        (1, 3) => tris.push([vert_on(inn[0], out[0]), vert_on(inn[0], out[1]), vert_on(inn[0], out[2])]),
                        (3, 1) => tris.push([vert_on(inn[0], out[0]), vert_on(inn[1], out[0]), vert_on(inn[2], out[0])]),
                        (2, 2) => {
                            let q = [
                                vert_on(inn[0], out[0]),
                                vert_on(inn[0], out[1]),
                                vert_on(inn[1], out[1]),
                                vert_on(inn[1], out[0]),
                            ];
                            tris.push([q[0], q[1], q[2]]);
                            tris.push([q[0], q[2], q[3]]);
                        }
                        _ => unreachable!(),
                    }
                    // orientation from the non-degenerate mid-edge section of the tet
                    let mid = |a: usize, b: usize| (pos(a) + pos(b)) * 0.5;
                    let proxy = match (inn.len(), out.len()) {
                        (1, 3) => [mid(inn[0], out[0]), mid(inn[0], out[1]), mid(inn[0], out[2])],
                        (3, 1) => [mid(inn[0], out[0]), mid(inn[1], out[0]), mid(inn[2], out[0])],
                        _ => [mid(inn[0], out[0]), mid(inn[0], out[1]), mid(inn[1], out[1])],
                    };
                    let n = super::mesh::triangle_cross(&proxy[0], &proxy[1], &proxy[2]);
                    if n.dot(&dir) < 0.0 {
                        for t in &mut tris {
                            t.swap(1, 2);
                        }
                    }
                    faces.extend(tris);
                }
            }
        }
    }
    (verts, faces)
}
