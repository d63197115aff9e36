//! Small numeric and hashing helpers shared across the crate.

/// Kahan compensated accumulator. Summation order is fixed by the callers,
/// so results are bit-reproducible regardless of worker count.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// FNV-1a over a byte stream; used for config/model provenance hashes.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv64 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }

    pub fn write_i64(&mut self, v: i64) {
        self.write(&v.to_le_bytes());
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write(&v.to_bits().to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = Kahan::new();
    for (x, y) in a.iter().zip(b) {
        acc.add(x * y);
    }
    acc.value()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Axis-aligned, half-open integer box `[lo, hi)` in `Z^d`.
///
/// Sites are enumerated row-major with the last coordinate fastest, so flat
/// indices are ordered lexicographically by coordinate tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IBox {
    lo: Vec<i64>,
    hi: Vec<i64>,
}

impl IBox {
    /// Panics if `lo.len() != hi.len()` or the box is empty on some axis.
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box corners must share a dimension");
        assert!(
            lo.iter().zip(&hi).all(|(a, b)| a < b),
            "box must be nonempty on every axis: {lo:?}..{hi:?}"
        );
        IBox { lo, hi }
    }

    /// The cube `[0, n)^d`.
    pub fn cube(d: usize, n: i64) -> Self {
        IBox::new(vec![0; d], vec![n; d])
    }

    /// The cube `[-n/2, n/2) ∩ Z^d` (integer sites of the centered cube of side n).
    pub fn centered_cube(d: usize, n: i64) -> Self {
        let lo = -(n.div_euclid(2));
        IBox::new(vec![lo; d], vec![lo + n; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    pub fn extent(&self, axis: usize) -> i64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn len(&self) -> usize {
        (0..self.dim()).map(|a| self.extent(a) as usize).product()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced nonempty at construction
    }

    pub fn contains(&self, site: &[i64]) -> bool {
        site.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(s, (l, h))| l <= s && s < h)
    }

    /// Flat index of a site; the site must lie inside the box.
    pub fn index_of(&self, site: &[i64]) -> usize {
        debug_assert!(self.contains(site), "site {site:?} outside box");
        let mut idx = 0usize;
        for a in 0..self.dim() {
            idx = idx * self.extent(a) as usize + (site[a] - self.lo[a]) as usize;
        }
        idx
    }

    pub fn site_at(&self, mut idx: usize) -> Vec<i64> {
        let mut site = vec![0i64; self.dim()];
        for a in (0..self.dim()).rev() {
            let e = self.extent(a) as usize;
            site[a] = self.lo[a] + (idx % e) as i64;
            idx /= e;
        }
        site
    }

    pub fn sites(&self) -> impl Iterator<Item = Vec<i64>> + '_ {
        (0..self.len()).map(move |i| self.site_at(i))
    }

    /// Wraps a site into the box treating it as a flat torus.
    pub fn wrap(&self, site: &[i64]) -> Vec<i64> {
        site.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(s, (l, h))| l + (s - l).rem_euclid(h - l))
            .collect()
    }
}

/// Basis of the integer lattice spanned by `gens` (row vectors in `Z^d`),
/// in column-echelon form, plus the absolute determinant when full-rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntLattice {
    pub basis: Vec<Vec<i64>>,
    pub rank: usize,
    /// `Some(|det|)` of the basis when rank == d, else `None`.
    pub index_in_zd: Option<i64>,
}

/// Hermite-style reduction of an integer generator list.
pub fn integer_lattice(d: usize, gens: &[Vec<i64>]) -> IntLattice {
    let mut rows: Vec<Vec<i64>> = gens.iter().filter(|g| g.iter().any(|&x| x != 0)).cloned().collect();
    let mut basis: Vec<Vec<i64>> = Vec::new();
    let mut pivot_axis = Vec::new();
    for axis in 0..d {
        loop {
            // Gather rows with support starting at this axis.
            let mut candidates: Vec<usize> = (0..rows.len())
                .filter(|&i| rows[i][axis] != 0)
                .collect();
            if candidates.is_empty() {
                break;
            }
            if candidates.len() == 1 {
                let r = rows.remove(candidates[0]);
                basis.push(r);
                pivot_axis.push(axis);
                break;
            }
            // Euclidean reduction between the two smallest entries.
            candidates.sort_by_key(|&i| rows[i][axis].abs());
            let (a, b) = (candidates[0], candidates[1]);
            let q = rows[b][axis] / rows[a][axis];
            for k in 0..d {
                rows[b][k] -= q * rows[a][k];
            }
            if rows[b].iter().all(|&x| x == 0) {
                rows.remove(b);
            }
        }
    }
    let rank = basis.len();
    let index = if rank == d {
        let mut det: i64 = 1;
        for (r, &ax) in basis.iter().zip(&pivot_axis) {
            det *= r[ax];
        }
        Some(det.abs())
    } else {
        None
    };
    IntLattice {
        basis,
        rank,
        index_in_zd: index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ibox_indexing_round_trip() {
        let b = IBox::new(vec![-2, 1], vec![3, 4]);
        assert_eq!(b.len(), 15);
        for i in 0..b.len() {
            let s = b.site_at(i);
            assert_eq!(b.index_of(&s), i);
        }
    }

    #[test]
    fn ibox_centered_matches_half_open_interval() {
        // [-M/2, M/2) ∩ Z for even and odd M.
        let b = IBox::centered_cube(1, 4);
        assert_eq!((b.lo()[0], b.hi()[0]), (-2, 2));
        let b = IBox::centered_cube(1, 3);
        assert_eq!((b.lo()[0], b.hi()[0]), (-1, 2));
    }

    #[test]
    fn ibox_wrap() {
        let b = IBox::cube(2, 4);
        assert_eq!(b.wrap(&[-1, 4]), vec![3, 0]);
        assert_eq!(b.wrap(&[2, 3]), vec![2, 3]);
    }

    #[test]
    fn lattice_full_rank_index() {
        // Generators (2,0) and (1,1) span an index-2 sublattice of Z^2.
        let l = integer_lattice(2, &[vec![2, 0], vec![1, 1]]);
        assert_eq!(l.rank, 2);
        assert_eq!(l.index_in_zd, Some(2));
        // Unimodular pair.
        let l = integer_lattice(2, &[vec![1, 1], vec![1, 0]]);
        assert_eq!(l.index_in_zd, Some(1));
    }

    #[test]
    fn lattice_rank_deficient() {
        let l = integer_lattice(2, &[vec![3, 0], vec![-6, 0]]);
        assert_eq!(l.rank, 1);
        assert_eq!(l.index_in_zd, None);
        let l = integer_lattice(2, &[]);
        assert_eq!(l.rank, 0);
    }

    #[test]
    fn kahan_beats_naive_on_adversarial_sum() {
        let mut k = Kahan::new();
        k.add(1.0);
        for _ in 0..1000 {
            k.add(1e-18);
        }
        assert_eq!(k.value(), 1.0 + 1e-15);
    }
}
