//! Quadric-error edge-collapse decimation restricted to collapses that keep a
//! closed mesh manifold, keep face orientation and (optionally) keep the
//! surface a minimum distance away from the enclosed points.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, Vector3};

use super::mesh::triangle_cross;
use super::sdf::ScalarGrid;

#[derive(Debug, Clone, Copy, Default)]
struct Quadric {
    a: Matrix3<f64>,
    b: Vector3<f64>,
    c: f64,
}

impl Quadric {
    fn plane(n: &Vector3<f64>, p: &Vector3<f64>) -> Self {
        let d = -n.dot(p);
        Self {
            a: n * n.transpose(),
            b: n * d,
            c: d * d,
        }
    }

    fn add(&self, o: &Quadric) -> Quadric {
        Quadric {
            a: self.a + o.a,
            b: self.b + o.b,
            c: self.c + o.c,
        }
    }

    fn eval(&self, p: &Vector3<f64>) -> f64 {
        (p.dot(&(self.a * p)) + 2.0 * self.b.dot(p) + self.c).max(0.0)
    }

    /// Minimizer, regularized toward `anchor` so flat neighbourhoods stay put.
    fn minimize(&self, anchor: &Vector3<f64>) -> Vector3<f64> {
        let lambda = 1e-3 * self.a.trace() / 3.0 + 1e-12;
        let m = self.a + Matrix3::identity() * lambda;
        m.try_inverse()
            .map(|inv| inv * (anchor * lambda - self.b))
            .unwrap_or(*anchor)
    }
}

#[derive(Debug, PartialEq)]
struct Candidate {
    cost: f64,
    u: usize,
    v: usize,
    stamp: (u32, u32),
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, ties broken by vertex ids for determinism
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.u.cmp(&self.u))
            .then_with(|| other.v.cmp(&self.v))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps decimated faces at least `min_distance` away from the point set
/// whose distance field is `grid`.
pub struct Clearance<'a> {
    pub grid: &'a ScalarGrid,
    pub min_distance: f64,
}

impl Clearance<'_> {
    fn triangle_ok(&self, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> bool {
        let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
        let n = ((longest / self.grid.spacing).ceil() as usize).clamp(1, 64);
        for i in 0..=n {
            for j in 0..=(n - i) {
                let u = i as f64 / n as f64;
                let v = j as f64 / n as f64;
                let p = a + (b - a) * u + (c - a) * v;
                if self.grid.sample(&p) < self.min_distance {
                    return false;
                }
            }
        }
        true
    }
}

pub struct Decimator<'a> {
    pos: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<Vec<usize>>,
    vert_alive: Vec<bool>,
    stamp: Vec<u32>,
    quadric: Vec<Quadric>,
    alive_verts: usize,
    length_weight: f64,
    clearance: Option<Clearance<'a>>,
}

impl<'a> Decimator<'a> {
    pub fn new(pos: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>, clearance: Option<Clearance<'a>>) -> Self {
        let nv = pos.len();
        let mut vert_faces = vec![Vec::new(); nv];
        let mut quadric = vec![Quadric::default(); nv];
        for (fi, f) in faces.iter().enumerate() {
            let n = triangle_cross(&pos[f[0]], &pos[f[1]], &pos[f[2]]);
            let len = n.norm();
            let q = if len > 0.0 { Quadric::plane(&(n / len), &pos[f[0]]) } else { Quadric::default() };
            for &v in f {
                vert_faces[v].push(fi);
                quadric[v] = quadric[v].add(&q);
            }
        }
        let vert_alive: Vec<bool> = vert_faces.iter().map(|f| !f.is_empty()).collect();
        let alive_verts = vert_alive.iter().filter(|&&a| a).count();
        Self {
            face_alive: vec![true; faces.len()],
            pos,
            faces,
            vert_faces,
            vert_alive,
            stamp: vec![0; nv],
            quadric,
            alive_verts,
            length_weight: 0.05,
            clearance,
        }
    }

    fn neighbours(&self, v: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self.vert_faces[v]
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&w| w != v)
            .collect();
        n.sort_unstable();
        n.dedup();
        n
    }

    fn candidate(&self, u: usize, v: usize) -> Candidate {
        let q = self.quadric[u].add(&self.quadric[v]);
        let p = self.collapse_position(u, v);
        let len2 = (self.pos[u] - self.pos[v]).norm_squared();
        Candidate {
            cost: q.eval(&p) + self.length_weight * len2,
            u,
            v,
            stamp: (self.stamp[u], self.stamp[v]),
        }
    }

    fn collapse_position(&self, u: usize, v: usize) -> Vector3<f64> {
        let q = self.quadric[u].add(&self.quadric[v]);
        let mid = (self.pos[u] + self.pos[v]) * 0.5;
        let opt = q.minimize(&mid);
        [opt, mid, self.pos[u], self.pos[v]]
            .into_iter()
            .min_by(|a, b| q.eval(a).total_cmp(&q.eval(b)))
            .unwrap()
    }

    /// Returns the collapse target if collapsing edge (u, v) is allowed.
    fn check(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        let shared: Vec<usize> = self.vert_faces[u]
            .iter()
            .copied()
            .filter(|f| self.faces[*f].contains(&v))
            .collect();
        if shared.len() != 2 {
            return None;
        }
        // link condition
        let nu = self.neighbours(u);
        let nv = self.neighbours(v);
        let common = nu.iter().filter(|w| nv.binary_search(w).is_ok()).count();
        if common != 2 || self.alive_verts <= 4 {
            return None;
        }
        let p = self.collapse_position(u, v);
        let ring: Vec<usize> = self.vert_faces[u]
            .iter()
            .chain(&self.vert_faces[v])
            .copied()
            .filter(|f| !shared.contains(f))
            .collect();
        if !self.ring_ok(&ring, u, v, &p, false) {
            return None;
        }
        if self.ring_ok(&ring, u, v, &p, true) {
            return Some(p);
        }
        // too close to the enclosed points: try sliding the new vertex outward
        let c = self.clearance.as_ref()?;
        let normal = ring
            .iter()
            .map(|&f| triangle_cross(&self.pos[self.faces[f][0]], &self.pos[self.faces[f][1]], &self.pos[self.faces[f][2]]))
            .sum::<Vector3<f64>>()
            .try_normalize(1e-300)?;
        (1..=4)
            .map(|k| p + normal * (k as f64 * c.grid.spacing))
            .find(|q| self.ring_ok(&ring, u, v, q, false) && self.ring_ok(&ring, u, v, q, true))
    }

    /// Orientation test (or clearance test when `clearance` is set) for the
    /// faces around the collapsed edge after moving it to `p`.
    fn ring_ok(&self, ring: &[usize], u: usize, v: usize, p: &Vector3<f64>, clearance: bool) -> bool {
        ring.iter().all(|&fi| {
            let f = self.faces[fi];
            let new = f.map(|x| if x == u || x == v { *p } else { self.pos[x] });
            if clearance {
                return self.clearance.as_ref().is_none_or(|c| c.triangle_ok(&new[0], &new[1], &new[2]));
            }
            let old = [self.pos[f[0]], self.pos[f[1]], self.pos[f[2]]];
            let n_old = triangle_cross(&old[0], &old[1], &old[2]);
            let n_new = triangle_cross(&new[0], &new[1], &new[2]);
            let (l_old, l_new) = (n_old.norm(), n_new.norm());
            if !(l_new > 1e-14 * (1.0 + l_old)) {
                return false;
            }
            !(l_old > 1e-14 && n_old.dot(&n_new) < 0.2 * l_old * l_new)
        })
    }

    fn collapse(&mut self, u: usize, v: usize, p: Vector3<f64>) {
        let faces_u = std::mem::take(&mut self.vert_faces[u]);
        for &fi in &faces_u {
            if self.faces[fi].contains(&v) {
                self.face_alive[fi] = false;
                for &w in &self.faces[fi] {
                    if w != u {
                        self.vert_faces[w].retain(|&g| g != fi);
                    }
                }
            } else {
                for x in self.faces[fi].iter_mut() {
                    if *x == u {
                        *x = v;
                    }
                }
                self.vert_faces[v].push(fi);
            }
        }
        self.vert_alive[u] = false;
        self.alive_verts -= 1;
        self.pos[v] = p;
        self.quadric[v] = self.quadric[v].add(&self.quadric[u]);
        self.stamp[v] += 1;
    }

    /// Collapses edges in cost order until `target` vertices remain or no
    /// admissible collapse is left. Returns the remaining vertex count.
    pub fn run(&mut self, target: usize) -> usize {
        let mut heap = BinaryHeap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            if !self.face_alive[fi] {
                continue;
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                if a < b {
                    heap.push(self.candidate(a, b));
                }
            }
        }
        // rejected collapses are retried once the heap drains, as long as
        // something else changed in between
        let mut deferred = Vec::new();
        loop {
            let collapsed_before = self.alive_verts;
            while self.alive_verts > target {
                let Some(c) = heap.pop() else { break };
                if !self.vert_alive[c.u] || !self.vert_alive[c.v] || c.stamp != (self.stamp[c.u], self.stamp[c.v]) {
                    continue;
                }
                let Some(p) = self.check(c.u, c.v) else {
                    deferred.push(c);
                    continue;
                };
                self.collapse(c.u, c.v, p);
                for w in self.neighbours(c.v) {
                    let (a, b) = (w.min(c.v), w.max(c.v));
                    heap.push(self.candidate(a, b));
                }
            }
            if self.alive_verts <= target || self.alive_verts == collapsed_before || deferred.is_empty() {
                break;
            }
            heap.extend(deferred.drain(..));
        }
        self.alive_verts
    }

    /// Compacted vertex and face arrays.
    pub fn finish(self) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
        let mut remap = vec![usize::MAX; self.pos.len()];
        let mut verts = Vec::with_capacity(self.alive_verts);
        for (i, p) in self.pos.iter().enumerate() {
            if self.vert_alive[i] {
                remap[i] = verts.len();
                verts.push(*p);
            }
        }
        let faces = self
            .faces
            .iter()
            .zip(&self.face_alive)
            .filter(|(_, &a)| a)
            .map(|(f, _)| f.map(|x| remap[x]))
            .collect();
        (verts, faces)
    }
}
