//! Uniform grid hashing for nearest-neighbour queries over planar items.
//!
//! The grid is only an accelerator: queries visit rings of cells outward
//! from the query cell and stop once no unvisited cell can hold anything
//! closer than the best candidate found so far.

use crate::geometry::Vec2;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
    min: (i64, i64),
    max: (i64, i64),
}

impl GridIndex {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell must be positive");
        Self {
            cell,
            cells: HashMap::new(),
            min: (i64::MAX, i64::MAX),
            max: (i64::MIN, i64::MIN),
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn key(&self, p: Vec2) -> (i64, i64) {
        ((p.x / self.cell).floor() as i64, (p.y / self.cell).floor() as i64)
    }

    fn touch(&mut self, k: (i64, i64)) {
        self.min = (self.min.0.min(k.0), self.min.1.min(k.1));
        self.max = (self.max.0.max(k.0), self.max.1.max(k.1));
    }

    /// Registers `id` in the cell containing `p`.
    pub fn insert_point(&mut self, id: usize, p: Vec2) {
        let k = self.key(p);
        self.touch(k);
        self.cells.entry(k).or_default().push(id);
    }

    /// Registers `id` in every cell overlapped by the bounding box of `a`-`b`.
    pub fn insert_segment(&mut self, id: usize, a: Vec2, b: Vec2) {
        let lo = self.key(Vec2::new(a.x.min(b.x), a.y.min(b.y)));
        let hi = self.key(Vec2::new(a.x.max(b.x), a.y.max(b.y)));
        for i in lo.0..=hi.0 {
            for j in lo.1..=hi.1 {
                self.touch((i, j));
                self.cells.entry((i, j)).or_default().push(id);
            }
        }
    }

    /// Visits candidate ids ring by ring. `visit` returns the current best
    /// distance (not squared) after seeing an id, or `None` if nothing has
    /// been found yet. Returns once the search radius exceeds the best.
    pub fn search<F>(&self, p: Vec2, mut visit: F)
    where
        F: FnMut(usize) -> Option<f64>,
    {
        if self.cells.is_empty() {
            return;
        }
        let c = self.key(p);
        let outside = (self.min.0 - c.0).max(c.0 - self.max.0).max(self.min.1 - c.1).max(c.1 - self.max.1);
        if outside > 4 {
            // Far from every populated cell: a flat scan is cheaper than growing rings.
            for ids in self.cells.values() {
                for &id in ids {
                    visit(id);
                }
            }
            return;
        }
        let span = (self.max.0 - self.min.0).max(self.max.1 - self.min.1) + 8;
        let mut best: Option<f64> = None;
        for r in 0..=span {
            for (i, j) in ring(c, r) {
                if let Some(ids) = self.cells.get(&(i, j)) {
                    for &id in ids {
                        if let Some(d) = visit(id) {
                            best = Some(best.map_or(d, |b: f64| b.min(d)));
                        }
                    }
                }
            }
            if let Some(b) = best {
                // Cells in ring r+1 are at least r cells away from p; strict so
                // exact ties further out are still visited.
                if b < r as f64 * self.cell {
                    return;
                }
            }
        }
    }
}

fn ring(c: (i64, i64), r: i64) -> impl Iterator<Item = (i64, i64)> {
    let (cx, cy) = c;
    let side: Vec<(i64, i64)> = if r == 0 {
        vec![(cx, cy)]
    } else {
        let mut v = Vec::with_capacity((8 * r) as usize);
        for i in -r..=r {
            v.push((cx + i, cy - r));
            v.push((cx + i, cy + r));
        }
        for j in (-r + 1)..r {
            v.push((cx - r, cy + j));
            v.push((cx + r, cy + j));
        }
        v
    };
    side.into_iter()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_nearest_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec2> = (0..300)
            .map(|_| Vec2::new(rng.random_range(-200.0..200.0), rng.random_range(-50.0..80.0)))
            .collect();
        let mut grid = GridIndex::new(5.0);
        for (i, p) in pts.iter().enumerate() {
            grid.insert_point(i, *p);
        }
        for _ in 0..500 {
            let q = Vec2::new(rng.random_range(-400.0..400.0), rng.random_range(-300.0..300.0));
            let scan = (0..pts.len())
                .min_by(|&a, &b| q.dist_sq(pts[a]).total_cmp(&q.dist_sq(pts[b])))
                .unwrap();
            let mut best = (f64::INFINITY, usize::MAX);
            grid.search(q, |id| {
                let d = q.dist_sq(pts[id]);
                if (d, id) < best {
                    best = (d, id);
                }
                Some(best.0.sqrt())
            });
            assert_eq!(best.1, scan);
        }
    }
}
