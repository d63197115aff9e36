//! Discrete fields: `R^m`-valued functions on the sites of an integer box.

use crate::util::IBox;

/// Values in `R^m` indexed by the sites of a box, together with the lattice
/// spacing (1 for unscaled cell problems).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteField {
    bbox: IBox,
    m: usize,
    spacing: f64,
    values: Vec<f64>,
}

impl DiscreteField {
    pub fn zeros(bbox: IBox, m: usize, spacing: f64) -> Self {
        assert!(m > 0 && spacing > 0.0);
        let n = bbox.len() * m;
        DiscreteField {
            bbox,
            m,
            spacing,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(bbox: IBox, m: usize, spacing: f64, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), bbox.len() * m);
        assert!(values.iter().all(|v| v.is_finite()), "field entries must be finite");
        DiscreteField {
            bbox,
            m,
            spacing,
            values,
        }
    }

    /// Builds a field by evaluating `f` at every site.
    pub fn from_fn(bbox: IBox, m: usize, spacing: f64, mut f: impl FnMut(&[i64], &mut [f64])) -> Self {
        let mut values = vec![0.0; bbox.len() * m];
        for i in 0..bbox.len() {
            let site = bbox.site_at(i);
            f(&site, &mut values[i * m..(i + 1) * m]);
        }
        DiscreteField::from_values(bbox, m, spacing, values)
    }

    pub fn bbox(&self) -> &IBox {
        &self.bbox
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn value(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.m..(idx + 1) * self.m]
    }

    pub fn value_at(&self, site: &[i64]) -> &[f64] {
        self.value(self.bbox.index_of(site))
    }

    pub fn set(&mut self, idx: usize, v: &[f64]) {
        self.values[idx * self.m..(idx + 1) * self.m].copy_from_slice(v);
    }

    /// `Σ_k spacing^d |u_k|^2`, the squared discrete L2 norm.
    pub fn l2_sq(&self) -> f64 {
        let vol = self.spacing.powi(self.bbox.dim() as i32);
        let mut acc = crate::util::Kahan::new();
        for v in &self.values {
            acc.add(v * v);
        }
        vol * acc.value()
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_fn_and_lookup() {
        let f = DiscreteField::from_fn(IBox::cube(1, 4), 1, 0.5, |s, out| out[0] = s[0] as f64);
        assert_eq!(f.value_at(&[3])[0], 3.0);
        // 0.5 * (0 + 1 + 4 + 9)
        assert!((f.l2_sq() - 7.0).abs() < 1e-15);
    }
}
