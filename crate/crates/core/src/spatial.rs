//! Uniform-grid spatial index over Gaussian means with exact
//! radius-limited K-nearest-neighbor queries.

use std::cmp::Ordering;
use std::collections::HashMap;

use thiserror::Error;

use crate::types::Coord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("mean {index} is not finite ({x}, {y})")]
    NonFiniteMean { index: usize, x: f64, y: f64 },
    #[error("cell size must be finite and positive, got {0}")]
    BadCellSize(f64),
    #[error("index was built from different means than the ones supplied")]
    StaleIndex,
}

/// The up-to-K nearest means within the query radius, ordered by
/// `(squared distance, index)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborList {
    pub indices: Vec<u32>,
    pub sq_dists: Vec<f64>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn clear(&mut self) {
        self.indices.clear();
        self.sq_dists.clear();
    }
}

/// Reusable candidate buffer for allocation-free queries.
#[derive(Default, Debug)]
pub struct QueryScratch {
    candidates: Vec<(f64, u32)>,
}

#[inline]
fn by_dist_then_index(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Means bucketed into square cells of side `cell_size`, anchored at the
/// domain origin.
#[derive(Clone, Debug)]
pub struct GridIndex {
    cell_size: f64,
    origin: Coord,
    cells: HashMap<(i64, i64), (u32, u32)>,
    /// Gaussian ids grouped by cell; `cells` holds ranges into this.
    order: Vec<u32>,
    /// Means laid out in `order`, for cache-friendly scans.
    points: Vec<Coord>,
    means: Vec<Coord>,
}

impl GridIndex {
    pub fn build(means: &[Coord], cell_size: f64) -> Result<Self, SpatialError> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(SpatialError::BadCellSize(cell_size));
        }
        if let Some((index, m)) = means.iter().enumerate().find(|(_, m)| !m.is_finite()) {
            return Err(SpatialError::NonFiniteMean { index, x: m.x, y: m.y });
        }
        let origin = Coord::default();
        let key_of = |p: Coord| {
            (
                ((p.x - origin.x) / cell_size).floor() as i64,
                ((p.y - origin.y) / cell_size).floor() as i64,
            )
        };
        let mut keyed: Vec<((i64, i64), u32)> =
            means.iter().enumerate().map(|(i, &m)| (key_of(m), i as u32)).collect();
        keyed.sort_unstable();

        let mut cells = HashMap::new();
        let mut order = Vec::with_capacity(means.len());
        let mut start = 0usize;
        while start < keyed.len() {
            let key = keyed[start].0;
            let mut end = start;
            while end < keyed.len() && keyed[end].0 == key {
                order.push(keyed[end].1);
                end += 1;
            }
            cells.insert(key, (start as u32, end as u32));
            start = end;
        }
        let points = order.iter().map(|&i| means[i as usize]).collect();
        Ok(Self { cell_size, origin, cells, order, points, means: means.to_vec() })
    }

    /// Full rebuild over `new_means` with the same cell size.
    pub fn rebuild(&self, new_means: &[Coord]) -> Result<Self, SpatialError> {
        Self::build(new_means, self.cell_size)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> Coord {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// The means this index was built from.
    pub fn means(&self) -> &[Coord] {
        &self.means
    }

    pub fn cell_of(&self, p: Coord) -> (i64, i64) {
        (
            ((p.x - self.origin.x) / self.cell_size).floor() as i64,
            ((p.y - self.origin.y) / self.cell_size).floor() as i64,
        )
    }

    /// Gaussian ids stored in a cell.
    pub fn cell_members(&self, cell: (i64, i64)) -> &[u32] {
        match self.cells.get(&cell) {
            Some(&(s, e)) => &self.order[s as usize..e as usize],
            None => &[],
        }
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = ((i64, i64), &[u32])> {
        self.cells
            .iter()
            .map(|(&k, &(s, e))| (k, &self.order[s as usize..e as usize]))
    }

    /// True when the index was built from exactly these means.
    pub fn is_current(&self, means: &[Coord]) -> bool {
        self.means.len() == means.len()
            && self
                .means
                .iter()
                .zip(means)
                .all(|(a, b)| a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits())
    }

    pub fn query(&self, x: Coord, r: f64, k: usize) -> NeighborList {
        let mut out = NeighborList::default();
        self.query_into(x, r, k, &mut QueryScratch::default(), &mut out);
        out
    }

    /// Like [`query`](Self::query) but first checks that the index matches
    /// `means`.
    pub fn query_checked(
        &self,
        means: &[Coord],
        x: Coord,
        r: f64,
        k: usize,
    ) -> Result<NeighborList, SpatialError> {
        if !self.is_current(means) {
            return Err(SpatialError::StaleIndex);
        }
        Ok(self.query(x, r, k))
    }

    pub fn query_into(
        &self,
        x: Coord,
        r: f64,
        k: usize,
        scratch: &mut QueryScratch,
        out: &mut NeighborList,
    ) {
        out.clear();
        let cand = &mut scratch.candidates;
        cand.clear();
        if k == 0 || !(r > 0.0) || !x.is_finite() || self.means.is_empty() {
            return;
        }
        let r2 = r * r;
        // Pad the cell range so rounding in the distance test can never
        // accept a point whose cell was skipped.
        let pad = r * (1.0 + 1e-9);
        let (cx0, cy0) = self.cell_of(Coord::new(x.x - pad, x.y - pad));
        let (cx1, cy1) = self.cell_of(Coord::new(x.x + pad, x.y + pad));
        let span = (cx1 - cx0 + 1) as u128 * (cy1 - cy0 + 1) as u128;

        let mut scan = |s: u32, e: u32| {
            for slot in s as usize..e as usize {
                let d2 = self.points[slot].sq_dist(x);
                if d2 <= r2 {
                    cand.push((d2, self.order[slot]));
                }
            }
        };
        if span <= self.cells.len() as u128 {
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    if let Some(&(s, e)) = self.cells.get(&(cx, cy)) {
                        scan(s, e);
                    }
                }
            }
        } else {
            for (&(cx, cy), &(s, e)) in &self.cells {
                if (cx0..=cx1).contains(&cx) && (cy0..=cy1).contains(&cy) {
                    scan(s, e);
                }
            }
        }

        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, by_dist_then_index);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_dist_then_index);
        for &(d2, i) in cand.iter() {
            out.indices.push(i);
            out.sq_dists.push(d2);
        }
    }
}
