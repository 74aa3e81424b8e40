//! Packed position sets over the `(time × feature)` grid of a batch.
//!
//! Item `b` contributes rows `start[b]..len[b]`, every row holding all `f`
//! features. Positions outside an item's row range behave like zero padding.

pub const NONE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub f: usize,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl Grid {
    pub fn new(f: usize, starts: Vec<usize>, lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut total = 0;
        for (s, l) in starts.iter().zip(&lens) {
            offsets.push(total);
            total += l.saturating_sub(*s) * f;
        }
        Grid { f, starts, lens, offsets, total }
    }

    #[inline]
    pub fn index(&self, b: usize, t: isize, feat: isize) -> usize {
        if t < self.starts[b] as isize || t >= self.lens[b] as isize || feat < 0 || feat >= self.f as isize {
            return NONE;
        }
        self.offsets[b] + (t as usize - self.starts[b]) * self.f + feat as usize
    }

    /// `(item, time, feature)` of every packed position, in packed order.
    pub fn coords(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.total);
        for b in 0..self.lens.len() {
            for t in self.starts[b]..self.lens[b].max(self.starts[b]) {
                for feat in 0..self.f {
                    out.push((b, t, feat));
                }
            }
        }
        out
    }

    /// Neighbour table for a `(kt × kf)` window, `P × (kt·kf)` entries,
    /// `NONE` where the neighbour falls outside the item.
    pub fn neighbors(&self, kt: usize, kf: usize) -> Vec<usize> {
        self.neighbors_in(self, kt, kf)
    }

    /// Like [`Grid::neighbors`], but indices refer to positions of `target`.
    pub fn neighbors_in(&self, target: &Grid, kt: usize, kf: usize) -> Vec<usize> {
        let (ht, hf) = ((kt / 2) as isize, (kf / 2) as isize);
        let coords = self.coords();
        let mut out = Vec::with_capacity(coords.len() * kt * kf);
        for (b, t, feat) in coords {
            for dt in -ht..=ht {
                for df in -hf..=hf {
                    out.push(target.index(b, t as isize + dt, feat as isize + df));
                }
            }
        }
        out
    }

    /// Index in `self` of every position of `sub`, which must be contained in `self`.
    pub fn map_from(&self, sub: &Grid) -> Vec<usize> {
        sub.coords()
            .into_iter()
            .map(|(b, t, feat)| {
                let i = self.index(b, t as isize, feat as isize);
                debug_assert_ne!(i, NONE, "sub-grid not contained");
                i
            })
            .collect()
    }
}
