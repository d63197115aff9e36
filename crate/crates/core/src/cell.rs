//! Cell problems: the interaction density and its boundary-pinned variant,
//! island minima and their aggregate constant, homogenized densities of the
//! hard phases, and the two-scale interaction density.
//!
//! Every cell problem is posed on a flat torus whose side is a multiple of
//! the period: bonds are enumerated once per canonical offset with wrapped
//! endpoints, and affine data enters through per-bond increments. Values are
//! normalized per unit cell volume.

use thiserror::Error;

use crate::energy::{ComparisonG, EnergyModel};
use crate::field::DiscreteField;
use crate::lattice::{
    bond_sets, box_components, PeriodicLatticeModel, PhaseDecomposition, SiteClass, Wrap,
};
use crate::solver::{
    minimize, Anchor, AverageConstraint, BondTerm, ConstraintSet, GenericObjective, SiteTerm,
    SolveOptions, SolveStatus, SolverError,
};
use crate::util::{Fnv64, IBox, Kahan};

#[derive(Debug, Error, PartialEq)]
pub enum CellError {
    #[error("cell size {0} must be a positive multiple of the period")]
    BadCellSize(i64),
    #[error("boundary width {0} must be positive and leave an interior core")]
    BadBoundaryWidth(i64),
    #[error("need at least three cell sizes, each doubling the previous")]
    BadCellSizeList,
    #[error(
        "interaction density not monotone at sample {sample}: value {small:.6e} at size {m_small} \
         exceeds value {large:.6e} at size {m_large}"
    )]
    MonotonicityViolation {
        sample: usize,
        m_small: i64,
        m_large: i64,
        small: f64,
        large: f64,
    },
    #[error("per-residue values must be constant on each infinite component")]
    ResidueConstraint,
    #[error("phase {0} out of range")]
    UnknownPhase(u8),
    #[error("solver did not converge within the iteration budget")]
    NotConverged,
    #[error("sample grids must be nonempty")]
    EmptySamples,
    #[error("point {0:?} lies outside the sampled table hull")]
    OutOfHull(Vec<f64>),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Solver settings for cell problems.
#[derive(Debug, Clone, Default)]
pub struct CellOpts {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

impl CellOpts {
    fn solve_options(&self, warm: Option<Vec<f64>>) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            init: warm,
        }
    }
}

/// Contributions to a cell-problem value, each normalized per unit volume:
/// weak-bond energy, zero-order energy on soft sites, zero-order energy on
/// hard sites (infinite components and islands).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiBreakdown {
    pub weak: f64,
    pub soft_site: f64,
    pub hard_site: f64,
}

impl PhiBreakdown {
    pub fn total(&self) -> f64 {
        self.weak + self.soft_site + self.hard_site
    }

    /// Weak bonds plus soft-site zero-order term: the soft-phase share.
    pub fn soft_total(&self) -> f64 {
        self.weak + self.soft_site
    }
}

/// A solved interaction-density cell problem.
#[derive(Debug, Clone)]
pub struct PhiSolution {
    pub value: f64,
    pub soft_value: f64,
    pub breakdown: PhiBreakdown,
    pub minimizer: DiscreteField,
    pub iterations: usize,
}

fn check_cell_size(model: &PeriodicLatticeModel, m_cell: i64) -> Result<(), CellError> {
    if m_cell <= 0 || m_cell % model.period() != 0 {
        return Err(CellError::BadCellSize(m_cell));
    }
    Ok(())
}

fn macro_x(model: &PeriodicLatticeModel, x: Option<&[f64]>) -> Vec<f64> {
    x.map(|v| v.to_vec())
        .unwrap_or_else(|| vec![0.0; model.dim()])
}

/// Builds the weak-bond + zero-order objective of the interaction density on
/// the `m_cell`-torus and the phase constraints (`v = z_j` on the infinite
/// components, constancy on every island component).
fn phi_problem(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    z: &[f64],
    m_cell: i64,
    x: Option<&[f64]>,
) -> Result<(IBox, GenericObjective, ConstraintSet), CellError> {
    check_cell_size(model, m_cell)?;
    let m = model.codomain();
    debug_assert_eq!(z.len(), m * model.phases() as usize);
    let bbox = IBox::centered_cube(model.dim(), m_cell);
    let bonds = bond_sets(model, &bbox, Wrap::Torus);
    let x = macro_x(model, x);

    let mut obj = GenericObjective::new(bbox.len(), m, energy.p);
    for b in &bonds.weak {
        obj.bonds.push(BondTerm {
            a: b.a,
            b: b.b,
            density: energy.weak_density().clone(),
            weight: 1.0,
            scale: 1.0,
            shift: vec![0.0; m],
        });
    }
    if !energy.site_density().is_zero() {
        for i in 0..bbox.len() {
            obj.sites.push(SiteTerm::Density {
                site: i,
                weight: 1.0,
                x: x.clone(),
                density: energy.site_density().clone(),
            });
        }
    }

    let mut cons = ConstraintSet::free();
    for i in 0..bbox.len() {
        let site = bbox.site_at(i);
        if let SiteClass::Infinite { phase } = decomp.class_of_site(model, &site) {
            let j = phase as usize - 1;
            cons.pins.push((i, z[j * m..(j + 1) * m].to_vec()));
        }
    }
    for phase in 1..=model.phases() {
        for comp in box_components(model, &bbox, Wrap::Torus, phase) {
            let site = bbox.site_at(comp[0]);
            if matches!(decomp.class_of_site(model, &site), SiteClass::Island { .. })
                && comp.len() > 1
            {
                cons.ties.push(comp);
            }
        }
    }
    Ok((bbox, obj, cons))
}

fn phi_value_from_solution(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    bbox: &IBox,
    values: Vec<f64>,
    x: Option<&[f64]>,
    iterations: usize,
) -> PhiSolution {
    let m = model.codomain();
    let vol = bbox.len() as f64;
    let bonds = bond_sets(model, bbox, Wrap::Torus);
    let x = macro_x(model, x);
    let mut weak = Kahan::new();
    let mut z = vec![0.0; m];
    for b in &bonds.weak {
        for k in 0..m {
            z[k] = values[b.b * m + k] - values[b.a * m + k];
        }
        weak.add(energy.weak_density().eval(energy.p, &z));
    }
    let (mut soft, mut hard) = (Kahan::new(), Kahan::new());
    if !energy.site_density().is_zero() {
        for i in 0..bbox.len() {
            let site = bbox.site_at(i);
            let g = energy.site_density().eval(&x, &values[i * m..(i + 1) * m]);
            match decomp.class_of_site(model, &site) {
                SiteClass::Soft => soft.add(g),
                _ => hard.add(g),
            }
        }
    }
    let breakdown = PhiBreakdown {
        weak: weak.value() / vol,
        soft_site: soft.value() / vol,
        hard_site: hard.value() / vol,
    };
    PhiSolution {
        value: breakdown.total(),
        soft_value: breakdown.soft_total(),
        breakdown,
        minimizer: DiscreteField::from_values(bbox.clone(), m, 1.0, values),
        iterations,
    }
}

/// The finite-cell interaction density: minimizes the weak-bond and
/// zero-order energy over the `m_cell`-torus with `v = z_j` on the infinite
/// components and constancy on island components, normalized per site.
/// `z` concatenates one `R^m` value per hard phase; `x` is an optional
/// macroscopic position parameter for the zero-order density.
pub fn phi_m(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    z: &[f64],
    m_cell: i64,
    x: Option<&[f64]>,
    opts: &CellOpts,
) -> Result<PhiSolution, CellError> {
    let (bbox, obj, cons) = phi_problem(model, decomp, energy, z, m_cell, x)?;
    let rep = minimize(&obj, &cons, &opts.solve_options(None))?;
    if rep.status == SolveStatus::MaxIter {
        return Err(CellError::NotConverged);
    }
    Ok(phi_value_from_solution(
        model, decomp, energy, &bbox, rep.values, x, rep.iterations,
    ))
}

/// Width of the pinned boundary ring: covers weak-path connectivity within
/// the cell (period times the weak interaction radius) and twice the largest
/// island diameter.
pub fn default_boundary_width(model: &PeriodicLatticeModel, decomp: &PhaseDecomposition) -> i64 {
    let r0 = model
        .range(0)
        .iter()
        .flat_map(|p| p.iter().map(|x| x.abs()))
        .max()
        .unwrap_or(1);
    (model.period() * r0)
        .max(2 * decomp.max_island_diameter())
        .max(1)
}

/// The boundary-pinned variant: in addition to the phase constraints, pins to
/// zero every soft site of the boundary ring of width `r_width` and every
/// island component contained in the ring.
#[allow(clippy::too_many_arguments)]
pub fn phi_tilde_m(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    z: &[f64],
    m_cell: i64,
    r_width: i64,
    x: Option<&[f64]>,
    opts: &CellOpts,
) -> Result<PhiSolution, CellError> {
    if r_width <= 0 || r_width >= m_cell {
        return Err(CellError::BadBoundaryWidth(r_width));
    }
    let (bbox, obj, mut cons) = phi_problem(model, decomp, energy, z, m_cell, x)?;
    let inner = IBox::centered_cube(model.dim(), m_cell - r_width);
    let m = model.codomain();
    for i in 0..bbox.len() {
        let site = bbox.site_at(i);
        if !inner.contains(&site) && decomp.class_of_site(model, &site) == SiteClass::Soft {
            cons.pins.push((i, vec![0.0; m]));
        }
    }
    // Island components entirely inside the ring are pinned to zero.
    for phase in 1..=model.phases() {
        for comp in box_components(model, &bbox, Wrap::Torus, phase) {
            let site = bbox.site_at(comp[0]);
            if matches!(decomp.class_of_site(model, &site), SiteClass::Island { .. })
                && comp.iter().all(|&i| !inner.contains(&bbox.site_at(i)))
            {
                cons.pins.push((comp[0], vec![0.0; m]));
            }
        }
    }
    let rep = minimize(&obj, &cons, &opts.solve_options(None))?;
    if rep.status == SolveStatus::MaxIter {
        return Err(CellError::NotConverged);
    }
    Ok(phi_value_from_solution(
        model, decomp, energy, &bbox, rep.values, x, rep.iterations,
    ))
}

/// Weak-bond p-energy of a cell minimizer restricted to the boundary ring of
/// width `r_m`, per unit volume; a diagnostic that decays as the cell grows.
pub fn boundary_layer_energy(
    solution: &PhiSolution,
    model: &PeriodicLatticeModel,
    energy: &EnergyModel,
    r_m: i64,
) -> f64 {
    let field = &solution.minimizer;
    let bbox = field.bbox();
    let m_cell = bbox.extent(0);
    let inner = IBox::centered_cube(model.dim(), (m_cell - r_m).max(1));
    let bonds = bond_sets(model, bbox, Wrap::Torus);
    let m = field.m();
    let mut acc = Kahan::new();
    for b in &bonds.weak {
        let (sa, sb) = (bbox.site_at(b.a), bbox.site_at(b.b));
        if inner.contains(&sa) || inner.contains(&sb) {
            continue;
        }
        let (ua, ub) = (field.value(b.a), field.value(b.b));
        let d2: f64 = (0..m).map(|k| (ub[k] - ua[k]) * (ub[k] - ua[k])).sum();
        acc.add(d2.powf(energy.p / 2.0));
    }
    acc.value() / bbox.len() as f64
}

/// Free or boundary-pinned variant of a sampled table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiVariant {
    Free,
    BoundaryPinned { r_width: i64 },
}

/// Sampled interaction density over a list of arguments and a doubling list
/// of cell sizes, with the large-cell limit taken as the last value.
#[derive(Debug, Clone)]
pub struct PhiTable {
    pub samples: Vec<Vec<f64>>,
    pub m_list: Vec<i64>,
    /// `values[sample][k]` at cell size `m_list[k]`.
    pub values: Vec<Vec<f64>>,
    pub soft_values: Vec<Vec<f64>>,
    pub extrapolated: Vec<f64>,
    pub variant: PhiVariant,
    pub model_hash: u64,
    pub tol: f64,
    /// Tensor-grid axes when the samples form a grid (enables interpolation).
    pub grid_axes: Option<Vec<Vec<f64>>>,
}

impl PhiTable {
    /// Increment sequence `phi_{2M} - phi_M` per sample.
    pub fn increments(&self, sample: usize) -> Vec<f64> {
        self.values[sample]
            .windows(2)
            .map(|w| w[1] - w[0])
            .collect()
    }

    /// Multilinear interpolation on the tensor grid; errors outside the hull.
    pub fn interpolate(&self, z: &[f64]) -> Result<f64, CellError> {
        let axes = self
            .grid_axes
            .as_ref()
            .ok_or_else(|| CellError::OutOfHull(z.to_vec()))?;
        debug_assert_eq!(z.len(), axes.len());
        let mut lo_idx = vec![0usize; axes.len()];
        let mut frac = vec![0.0f64; axes.len()];
        for (a, axis) in axes.iter().enumerate() {
            let v = z[a];
            if v < axis[0] - 1e-12 || v > *axis.last().unwrap() + 1e-12 {
                return Err(CellError::OutOfHull(z.to_vec()));
            }
            if axis.len() == 1 {
                continue;
            }
            let mut i = axis.len() - 2;
            for k in 0..axis.len() - 1 {
                if v <= axis[k + 1] {
                    i = k;
                    break;
                }
            }
            lo_idx[a] = i;
            frac[a] = ((v - axis[i]) / (axis[i + 1] - axis[i])).clamp(0.0, 1.0);
        }
        let dims: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let flat = |idx: &[usize]| -> usize {
            let mut f = 0usize;
            for (a, &i) in idx.iter().enumerate() {
                f = f * dims[a] + i;
            }
            f
        };
        let mut acc = 0.0;
        let corners = 1usize << axes.len();
        let mut idx = vec![0usize; axes.len()];
        for c in 0..corners {
            let mut w = 1.0;
            let mut valid = true;
            for a in 0..axes.len() {
                let hi = (c >> a) & 1 == 1;
                if hi && dims[a] == 1 {
                    valid = false;
                    break;
                }
                idx[a] = lo_idx[a] + usize::from(hi);
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            if valid && w != 0.0 {
                acc += w * self.extrapolated[flat(&idx)];
            }
        }
        Ok(acc)
    }
}

/// Solves the interaction density over a sample list and a doubling list of
/// cell sizes, asserts the doubling monotonicity within tolerance, and takes
/// the last value as the limit.
#[allow(clippy::too_many_arguments)]
pub fn phi_limit(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    samples: &[Vec<f64>],
    m_list: &[i64],
    x: Option<&[f64]>,
    variant: PhiVariant,
    opts: &CellOpts,
) -> Result<PhiTable, CellError> {
    if samples.is_empty() {
        return Err(CellError::EmptySamples);
    }
    if m_list.len() < 3 || m_list.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(CellError::BadCellSizeList);
    }
    let mut values = Vec::with_capacity(samples.len());
    let mut soft_values = Vec::with_capacity(samples.len());
    let mono_tol = opts.tol.unwrap_or(1e-8);
    for (si, z) in samples.iter().enumerate() {
        let mut row = Vec::with_capacity(m_list.len());
        let mut soft_row = Vec::with_capacity(m_list.len());
        for &mc in m_list {
            let sol = match variant {
                PhiVariant::Free => phi_m(model, decomp, energy, z, mc, x, opts)?,
                PhiVariant::BoundaryPinned { r_width } => {
                    phi_tilde_m(model, decomp, energy, z, mc, r_width, x, opts)?
                }
            };
            row.push(sol.value);
            soft_row.push(sol.soft_value);
        }
        if variant == PhiVariant::Free {
            for k in 0..row.len() - 1 {
                let tol = mono_tol * (1.0 + row[k].abs());
                if row[k + 1] < row[k] - tol {
                    return Err(CellError::MonotonicityViolation {
                        sample: si,
                        m_small: m_list[k],
                        m_large: m_list[k + 1],
                        small: row[k],
                        large: row[k + 1],
                    });
                }
            }
        }
        values.push(row);
        soft_values.push(soft_row);
    }
    let extrapolated = values.iter().map(|row| *row.last().unwrap()).collect();
    Ok(PhiTable {
        samples: samples.to_vec(),
        m_list: m_list.to_vec(),
        values,
        soft_values,
        extrapolated,
        variant,
        model_hash: system_hash(model, energy),
        tol: mono_tol,
        grid_axes: None,
    })
}

/// Tensor product of per-component axes, row-major.
pub fn tensor_samples(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for &v in axis {
                let mut s = prefix.clone();
                s.push(v);
                next.push(s);
            }
        }
        out = next;
    }
    out
}

/// `phi_limit` over a tensor grid, retaining the axes for interpolation.
#[allow(clippy::too_many_arguments)]
pub fn phi_table_on_grid(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    axes: &[Vec<f64>],
    m_list: &[i64],
    x: Option<&[f64]>,
    variant: PhiVariant,
    opts: &CellOpts,
) -> Result<PhiTable, CellError> {
    if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
        return Err(CellError::EmptySamples);
    }
    let samples = tensor_samples(axes);
    let mut table = phi_limit(model, decomp, energy, &samples, m_list, x, variant, opts)?;
    table.grid_axes = Some(axes.to_vec());
    Ok(table)
}

/// Minimum of the bond energy of a finite island over unconstrained fields
/// (gauge-anchored); bonds join sites whose difference lies in `offsets`,
/// oriented by the canonical representative.
pub fn island_min(
    sites: &[Vec<i64>],
    offsets: &[Vec<i64>],
    density: &crate::energy::BondDensity,
    p: f64,
    m: usize,
    opts: &CellOpts,
) -> Result<f64, CellError> {
    let mut sorted: Vec<Vec<i64>> = sites.to_vec();
    sorted.sort();
    let mut obj = GenericObjective::new(sorted.len(), m, p);
    for i in 0..sorted.len() {
        for j in (i + 1)..sorted.len() {
            let d: Vec<i64> = sorted[j]
                .iter()
                .zip(&sorted[i])
                .map(|(a, b)| a - b)
                .collect();
            if !offsets.contains(&d) {
                continue;
            }
            // Sites are sorted, so d is already the canonical orientation.
            obj.bonds.push(BondTerm {
                a: i,
                b: j,
                density: density.clone(),
                weight: 1.0,
                scale: 1.0,
                shift: vec![0.0; m],
            });
        }
    }
    let cons = ConstraintSet {
        anchor: Anchor::LexSmallestFree,
        ..Default::default()
    };
    let rep = minimize(&obj, &cons, &opts.solve_options(None))?;
    if rep.status == SolveStatus::MaxIter {
        return Err(CellError::NotConverged);
    }
    Ok(rep.objective)
}

/// Island minima per phase and the aggregate constant (their sum per
/// fundamental cell volume).
#[derive(Debug, Clone)]
pub struct IslandConstants {
    pub per_island: Vec<IslandMin>,
    pub m_value: f64,
}

#[derive(Debug, Clone)]
pub struct IslandMin {
    pub phase: u8,
    pub island: usize,
    pub value: f64,
}

pub fn aggregate_m(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    opts: &CellOpts,
) -> Result<IslandConstants, CellError> {
    let mut per_island = Vec::new();
    let mut total = Kahan::new();
    for (idx, isl) in decomp.islands().iter().enumerate() {
        let value = island_min(
            &isl.sites,
            model.range(isl.phase),
            energy.strong_density(isl.phase),
            energy.p,
            model.codomain(),
            opts,
        )?;
        total.add(value);
        per_island.push(IslandMin {
            phase: isl.phase,
            island: idx,
            value,
        });
    }
    Ok(IslandConstants {
        per_island,
        m_value: total.value() / model.cell_len() as f64,
    })
}

/// Finite-cell homogenized density of one hard phase: minimizes the strong
/// energy of `u = xi x + v` over periodic correctors `v` on the infinite
/// component of the `k_cell`-torus, per unit volume. `xi` is m x d row-major.
pub fn f_hom_estimate(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    phase: u8,
    xi: &[f64],
    k_cell: i64,
    opts: &CellOpts,
) -> Result<f64, CellError> {
    f_hom_estimate_stats(model, decomp, energy, phase, xi, k_cell, opts).map(|(v, _)| v)
}

/// `f_hom_estimate` together with the solver iteration count.
pub fn f_hom_estimate_stats(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    phase: u8,
    xi: &[f64],
    k_cell: i64,
    opts: &CellOpts,
) -> Result<(f64, usize), CellError> {
    if phase == 0 || phase > model.phases() {
        return Err(CellError::UnknownPhase(phase));
    }
    check_cell_size(model, k_cell)?;
    let d = model.dim();
    let m = model.codomain();
    debug_assert_eq!(xi.len(), m * d);
    let bbox = IBox::cube(d, k_cell);
    let bonds = bond_sets(model, &bbox, Wrap::Torus);
    let density = energy.strong_density(phase);
    let mut obj = GenericObjective::new(bbox.len(), m, energy.p);
    let infinite =
        |i: usize| decomp.class_of_site(model, &bbox.site_at(i)) == SiteClass::Infinite { phase };
    for b in &bonds.strong[phase as usize - 1] {
        if !(infinite(b.a) && infinite(b.b)) {
            continue; // island bonds do not enter the corrector problem
        }
        let shift: Vec<f64> = (0..m)
            .map(|r| (0..d).map(|c| xi[r * d + c] * b.disp[c] as f64).sum())
            .collect();
        obj.bonds.push(BondTerm {
            a: b.a,
            b: b.b,
            density: density.clone(),
            weight: 1.0,
            scale: 1.0,
            shift,
        });
    }
    // Only corrector values on the infinite component matter; the rest of the
    // torus is pinned so the reduced system stays definite.
    let mut cons = ConstraintSet {
        anchor: Anchor::LexSmallestFree,
        ..Default::default()
    };
    for i in 0..bbox.len() {
        if !infinite(i) {
            cons.pins.push((i, vec![0.0; m]));
        }
    }
    let rep = minimize(&obj, &cons, &opts.solve_options(None))?;
    if rep.status == SolveStatus::MaxIter {
        return Err(CellError::NotConverged);
    }
    Ok((rep.objective / bbox.len() as f64, rep.iterations))
}

/// Sampled homogenized density of one phase over directions and cell sizes,
/// with the recovered quadratic form when the minimum-value map is quadratic.
#[derive(Debug, Clone)]
pub struct HomDensityTable {
    pub phase: u8,
    pub xi_samples: Vec<Vec<f64>>,
    pub k_list: Vec<i64>,
    pub values: Vec<Vec<f64>>,
    pub extrapolated: Vec<f64>,
    /// `f_hom(xi) = <A xi, xi>` over `R^{m d}` in the quadratic case.
    pub a_hom: Option<Vec<f64>>,
    pub model_hash: u64,
}

pub fn f_hom_table(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    phase: u8,
    xi_samples: &[Vec<f64>],
    k_list: &[i64],
    opts: &CellOpts,
) -> Result<HomDensityTable, CellError> {
    if xi_samples.is_empty() || k_list.is_empty() {
        return Err(CellError::EmptySamples);
    }
    let mut values = Vec::with_capacity(xi_samples.len());
    for xi in xi_samples {
        let mut row = Vec::with_capacity(k_list.len());
        for &k in k_list {
            row.push(f_hom_estimate(model, decomp, energy, phase, xi, k, opts)?);
        }
        values.push(row);
    }
    let extrapolated: Vec<f64> = values.iter().map(|row| *row.last().unwrap()).collect();
    let a_hom = if energy.is_quadratic() {
        let n = model.codomain() * model.dim();
        let k = *k_list.last().unwrap();
        quadratic_form_from_cells(model, decomp, energy, phase, n, k, opts).ok()
    } else {
        None
    };
    Ok(HomDensityTable {
        phase,
        xi_samples: xi_samples.to_vec(),
        k_list: k_list.to_vec(),
        values,
        extrapolated,
        a_hom,
        model_hash: system_hash(model, energy),
    })
}

/// Recovers `A` with `f_hom(xi) = <A xi, xi>` from cell problems at the basis
/// directions and their pairwise sums.
pub fn quadratic_form_from_cells(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    phase: u8,
    n: usize,
    k_cell: i64,
    opts: &CellOpts,
) -> Result<Vec<f64>, CellError> {
    let mut err = None;
    let a = crate::solver::quadratic_form_recover(
        n,
        |xi| match f_hom_estimate(model, decomp, energy, phase, xi, k_cell, opts) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                f64::NAN
            }
        },
        1e-7,
    );
    if let Some(e) = err {
        return Err(e);
    }
    Ok(a?)
}

/// Value of the two-scale interaction density split like `PhiBreakdown`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiGValue {
    pub weak: f64,
    pub soft_site: f64,
    pub hard_site: f64,
}

impl PhiGValue {
    pub fn total(&self) -> f64 {
        self.weak + self.soft_site + self.hard_site
    }

    pub fn soft_total(&self) -> f64 {
        self.weak + self.soft_site
    }
}

fn check_residue_values(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    u_res: &[Vec<f64>],
) -> Result<(), CellError> {
    let m = model.codomain();
    if u_res.len() != model.cell_len() || u_res.iter().any(|v| v.len() != m) {
        return Err(CellError::ResidueConstraint);
    }
    for phase in 1..=model.phases() {
        let cells = decomp.infinite_cells(phase);
        for w in cells.windows(2) {
            let (a, b) = (&u_res[w[0]], &u_res[w[1]]);
            if a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-12) {
                return Err(CellError::ResidueConstraint);
            }
        }
    }
    Ok(())
}

/// Single-cell formula for the two-scale interaction density of convex
/// energies: weak bonds of the period torus evaluated at the per-residue
/// values plus the comparison term on every residue, per cell volume.
pub fn phi_g_convex(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    g: &ComparisonG,
    u_res: &[Vec<f64>],
    w_res: &[Vec<f64>],
) -> Result<PhiGValue, CellError> {
    check_residue_values(model, decomp, u_res)?;
    let m = model.codomain();
    let cell = model.cell();
    let bonds = bond_sets(model, &cell, Wrap::Torus);
    let vol = model.cell_len() as f64;
    let mut weak = Kahan::new();
    let mut z = vec![0.0; m];
    for b in &bonds.weak {
        let (ra, rb) = (
            model.cell_index(&cell.site_at(b.a)),
            model.cell_index(&cell.site_at(b.b)),
        );
        for k in 0..m {
            z[k] = u_res[rb][k] - u_res[ra][k];
        }
        weak.add(energy.weak_density().eval(energy.p, &z));
    }
    let (mut soft, mut hard) = (Kahan::new(), Kahan::new());
    for c in 0..model.cell_len() {
        for k in 0..m {
            z[k] = u_res[c][k] - w_res[c][k];
        }
        let val = g.eval(&z);
        match decomp.class_of_cell(c) {
            SiteClass::Soft => soft.add(val),
            _ => hard.add(val),
        }
    }
    Ok(PhiGValue {
        weak: weak.value() / vol,
        soft_site: soft.value() / vol,
        hard_site: hard.value() / vol,
    })
}

/// Multi-cell two-scale interaction density: minimizes the weak-bond plus
/// comparison energy over the `(T m_factor)`-torus subject to per-residue
/// averages equal to `u_res`, per torus volume. Coincides with
/// `phi_g_convex` for convex energies; `m_factor = 1` pins each residue.
#[allow(clippy::too_many_arguments)]
pub fn phi_g_general(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    g: &ComparisonG,
    u_res: &[Vec<f64>],
    w_res: &[Vec<f64>],
    m_factor: i64,
    opts: &CellOpts,
) -> Result<PhiGValue, CellError> {
    check_residue_values(model, decomp, u_res)?;
    if m_factor <= 0 {
        return Err(CellError::BadCellSize(m_factor));
    }
    let m = model.codomain();
    let side = model.period() * m_factor;
    let bbox = IBox::cube(model.dim(), side);
    let bonds = bond_sets(model, &bbox, Wrap::Torus);
    let mut obj = GenericObjective::new(bbox.len(), m, energy.p);
    for b in &bonds.weak {
        obj.bonds.push(BondTerm {
            a: b.a,
            b: b.b,
            density: energy.weak_density().clone(),
            weight: 1.0,
            scale: 1.0,
            shift: vec![0.0; m],
        });
    }
    for i in 0..bbox.len() {
        let rc = model.cell_index(&bbox.site_at(i));
        obj.sites.push(SiteTerm::Comparison {
            site: i,
            weight: 1.0,
            target: w_res[rc].clone(),
            g: *g,
        });
    }
    let mut residue_sites: Vec<Vec<usize>> = vec![Vec::new(); model.cell_len()];
    for i in 0..bbox.len() {
        residue_sites[model.cell_index(&bbox.site_at(i))].push(i);
    }
    let count = m_factor.pow(model.dim() as u32) as f64;
    let cons = ConstraintSet {
        averages: residue_sites
            .iter()
            .enumerate()
            .map(|(rc, sites)| AverageConstraint {
                sites: sites.clone(),
                weights: vec![1.0; sites.len()],
                target: u_res[rc].iter().map(|v| v * count).collect(),
            })
            .collect(),
        ..Default::default()
    };
    let rep = minimize(&obj, &cons, &opts.solve_options(None))?;
    if rep.status == SolveStatus::MaxIter {
        return Err(CellError::NotConverged);
    }
    let vol = bbox.len() as f64;
    let mut weak = Kahan::new();
    let mut z = vec![0.0; m];
    for b in &bonds.weak {
        for k in 0..m {
            z[k] = rep.values[b.b * m + k] - rep.values[b.a * m + k];
        }
        weak.add(energy.weak_density().eval(energy.p, &z));
    }
    let (mut soft, mut hard) = (Kahan::new(), Kahan::new());
    for i in 0..bbox.len() {
        let site = bbox.site_at(i);
        let rc = model.cell_index(&site);
        for k in 0..m {
            z[k] = rep.values[i * m + k] - w_res[rc][k];
        }
        let val = g.eval(&z);
        match decomp.class_of_site(model, &site) {
            SiteClass::Soft => soft.add(val),
            _ => hard.add(val),
        }
    }
    Ok(PhiGValue {
        weak: weak.value() / vol,
        soft_site: soft.value() / vol,
        hard_site: hard.value() / vol,
    })
}

/// Provenance hash for tables derived from a model/energy pair.
pub fn system_hash(model: &PeriodicLatticeModel, energy: &EnergyModel) -> u64 {
    let mut h = Fnv64::new();
    h.write(&model.hash().to_le_bytes());
    h.write(&energy.hash().to_le_bytes());
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::build_phases;
    use crate::energy::BondDensity;
    use crate::presets;

    fn opts() -> CellOpts {
        CellOpts::default()
    }

    #[test]
    fn phi_exh1_matches_hand_enumeration() {
        // Every site carries one canonical weak bond with value (z1-z2)^2, so
        // phi_M = |z1 - z2|^2 exactly for every M. Cross-checked by direct
        // enumeration at M = 2 and M = 4.
        let (model, energy) = presets::exh1();
        let dec = build_phases(&model).unwrap();
        for (z1, z2) in [(1.0, 0.0), (0.5, -1.0), (2.0, 2.0)] {
            for m_cell in [2i64, 4] {
                let mut oracle = 0.0;
                for k in -(m_cell / 2)..(m_cell - m_cell / 2) {
                    let (a, b) = (k, k + 1);
                    let va = if a.rem_euclid(2) == 0 { z1 } else { z2 };
                    let vb = if b.rem_euclid(2) == 0 { z1 } else { z2 };
                    oracle += (vb - va) * (vb - va);
                }
                oracle /= m_cell as f64;
                let sol = phi_m(&model, &dec, &energy, &[z1, z2], m_cell, None, &opts()).unwrap();
                assert!(
                    (sol.value - oracle).abs() < 1e-12,
                    "phi({z1},{z2}) at M={m_cell}: {} vs oracle {oracle}",
                    sol.value
                );
                assert!((sol.value - (z1 - z2) * (z1 - z2)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phi_equal_arguments_vanishes() {
        let (model, energy) = presets::exh1();
        let dec = build_phases(&model).unwrap();
        let sol = phi_m(&model, &dec, &energy, &[0.7, 0.7], 8, None, &opts()).unwrap();
        assert!(sol.value.abs() < 1e-14);
    }

    #[test]
    fn phi_exh2_closed_form_and_scan_oracle() {
        // Per period: the odd-site inner minimization of 2(v-z)^2 + (v-c)^2
        // gives (2/3)(z-c)^2, the even site contributes (z-c)^2; divided by
        // T = 2 the total is (5/6)(z-c)^2 and the soft share (1/3)(z-c)^2.
        let c = 0.25;
        let (model, energy) = presets::exh2_pinned_const(c);
        let dec = build_phases(&model).unwrap();
        for z in [-1.0, 0.0, 0.6, 2.0] {
            for m_cell in [2i64, 4, 8] {
                let sol = phi_m(&model, &dec, &energy, &[z], m_cell, None, &opts()).unwrap();
                let d2 = (z - c) * (z - c);
                assert!(
                    (sol.value - 5.0 / 6.0 * d2).abs() < 1e-10,
                    "total {} vs {}",
                    sol.value,
                    5.0 / 6.0 * d2
                );
                assert!((sol.soft_value - d2 / 3.0).abs() < 1e-10);
                assert!((sol.breakdown.hard_site - d2 / 2.0).abs() < 1e-10);
            }
            // Scan oracle for the inner minimization on 1e5 points.
            let mut best = f64::INFINITY;
            for i in 0..=100_000 {
                let v = -3.0 + 6.0 * i as f64 / 100_000.0;
                let val = 2.0 * (v - z) * (v - z) + (v - c) * (v - c);
                best = best.min(val);
            }
            let sol = phi_m(&model, &dec, &energy, &[z], 2, None, &opts()).unwrap();
            let per_period = sol.value * 2.0 - (z - c) * (z - c);
            assert!(
                (per_period - best).abs() < 1e-8,
                "scan {best} vs solver {per_period}"
            );
        }
    }

    #[test]
    fn phi_tilde_dominates_and_converges() {
        let (model, energy) = presets::exh2_pinned_const(0.0);
        let dec = build_phases(&model).unwrap();
        let r = default_boundary_width(&model, &dec);
        assert_eq!(r, 2);
        let z = [0.1];
        let mut last_gap = f64::INFINITY;
        for m_cell in [8i64, 16, 32, 64] {
            let free = phi_m(&model, &dec, &energy, &z, m_cell, None, &opts()).unwrap();
            let pinned = phi_tilde_m(&model, &dec, &energy, &z, m_cell, r, None, &opts()).unwrap();
            let gap = pinned.value - free.value;
            assert!(gap >= -1e-10, "pinned variant must dominate: gap {gap}");
            assert!(gap <= last_gap + 1e-12, "gap must decay: {gap} vs {last_gap}");
            last_gap = gap;
        }
        assert!(last_gap < 1e-3, "gap at M=64: {last_gap}");
    }

    #[test]
    fn phi_tilde_zero_argument_is_zero() {
        let (model, energy) = presets::exh2_zero_g();
        let dec = build_phases(&model).unwrap();
        let sol = phi_tilde_m(&model, &dec, &energy, &[0.0], 8, 2, None, &opts()).unwrap();
        assert!(sol.value.abs() < 1e-14);
    }

    #[test]
    fn boundary_layer_diagnostic_decays() {
        let (model, energy) = presets::exh1();
        let dec = build_phases(&model).unwrap();
        let z = [1.0, 0.0];
        let mut values = Vec::new();
        for m_cell in [8i64, 16, 32, 64] {
            let sol = phi_m(&model, &dec, &energy, &z, m_cell, None, &opts()).unwrap();
            let r_m = (m_cell as f64).sqrt().ceil() as i64;
            let ble = boundary_layer_energy(&sol, &model, &energy, r_m);
            // Independent ring enumeration: the exh1 minimizer is the pinned
            // two-constant profile, every ring bond contributes |z1-z2|^2.
            let bbox = sol.minimizer.bbox().clone();
            let inner = IBox::centered_cube(1, m_cell - r_m);
            let mut count = 0usize;
            for k in 0..bbox.len() {
                let a = bbox.site_at(k);
                let b = bbox.wrap(&[a[0] + 1]);
                if !inner.contains(&a) && !inner.contains(&b) {
                    count += 1;
                }
            }
            let expect = count as f64 / m_cell as f64;
            assert!((ble - expect).abs() < 1e-12, "ble {ble} vs {expect}");
            values.push(ble);
        }
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "diagnostic must decay: {values:?}");
        }
    }

    #[test]
    fn boundary_layer_zero_for_constant_minimizer() {
        let (model, energy) = presets::exh1();
        let dec = build_phases(&model).unwrap();
        let sol = phi_m(&model, &dec, &energy, &[1.0, 1.0], 16, None, &opts()).unwrap();
        assert_eq!(boundary_layer_energy(&sol, &model, &energy, 4), 0.0);
    }

    #[test]
    fn phi_limit_flat_for_exact_models() {
        let (model, energy) = presets::exh2_pinned_const(0.0);
        let dec = build_phases(&model).unwrap();
        let table = phi_limit(
            &model,
            &dec,
            &energy,
            &[vec![-1.0], vec![0.5]],
            &[2, 4, 8],
            None,
            PhiVariant::Free,
            &opts(),
        )
        .unwrap();
        for s in 0..2 {
            for inc in table.increments(s) {
                assert!(inc.abs() < 1e-10, "increments {:?}", table.increments(s));
            }
        }
        assert!((table.extrapolated[1] - 5.0 / 6.0 * 0.25).abs() < 1e-10);
    }

    #[test]
    fn phi_limit_monotone_on_island_model() {
        let (model, energy) = presets::cross_island_2d();
        let dec = build_phases(&model).unwrap();
        let table = phi_limit(
            &model,
            &dec,
            &energy,
            &[vec![0.4]],
            &[8, 16, 32],
            None,
            PhiVariant::Free,
            &opts(),
        )
        .unwrap();
        for inc in table.increments(0) {
            assert!(inc > -1e-8, "doubling monotonicity: {inc}");
        }
    }

    #[test]
    fn phi_limit_rejects_bad_size_lists() {
        let (model, energy) = presets::exh1();
        let dec = build_phases(&model).unwrap();
        let err = phi_limit(
            &model,
            &dec,
            &energy,
            &[vec![0.0, 0.0]],
            &[2, 4],
            None,
            PhiVariant::Free,
            &opts(),
        )
        .unwrap_err();
        assert_eq!(err, CellError::BadCellSizeList);
    }

    #[test]
    fn island_min_examples() {
        // Quadratic density: constants are optimal, value 0.
        let sites = vec![vec![0], vec![1], vec![2]];
        let offsets: Vec<Vec<i64>> = [-2i64, -1, 1, 2].iter().map(|&v| vec![v]).collect();
        let v = island_min(&sites, &offsets, &BondDensity::Quadratic, 2.0, 1, &opts()).unwrap();
        assert!(v.abs() < 1e-12);
        // Shifted density |z-1|^2: stationarity 6a = 4 gives differences 2/3
        // and value 3 (1/3)^2 = 1/3.
        let v = island_min(
            &sites,
            &offsets,
            &BondDensity::ShiftedQuadratic(vec![1.0]),
            2.0,
            1,
            &opts(),
        )
        .unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-10, "island value {v}");
        // Single site: no bonds.
        let v = island_min(
            &[vec![5]],
            &offsets,
            &BondDensity::ShiftedQuadratic(vec![1.0]),
            2.0,
            1,
            &opts(),
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn aggregate_m_examples() {
        // No islands: m = 0.
        let (model, energy) = presets::exh1();
        let dec = build_phases(&model).unwrap();
        let agg = aggregate_m(&model, &dec, &energy, &opts()).unwrap();
        assert!(agg.per_island.is_empty());
        assert_eq!(agg.m_value, 0.0);
        // Cross-island model: one island of value 1/3 per cell of size 8^2.
        let (model, energy) = presets::cross_island_2d();
        let dec = build_phases(&model).unwrap();
        let agg = aggregate_m(&model, &dec, &energy, &opts()).unwrap();
        assert_eq!(agg.per_island.len(), 1);
        assert!((agg.per_island[0].value - 1.0 / 3.0).abs() < 1e-10);
        assert!((agg.m_value - (1.0 / 3.0) / 64.0).abs() < 1e-12);
        // Singleton island: zero.
        let (model, energy) = presets::island_singleton_1d();
        let dec = build_phases(&model).unwrap();
        let agg = aggregate_m(&model, &dec, &energy, &opts()).unwrap();
        assert_eq!(agg.m_value, 0.0);
    }

    #[test]
    fn f_hom_exh1_chains() {
        let (model, energy) = presets::exh1();
        let dec = build_phases(&model).unwrap();
        for phase in [1u8, 2] {
            for xi in [1.0, 2.0, -1.0] {
                for k in [2i64, 8, 16] {
                    let v = f_hom_estimate(&model, &dec, &energy, phase, &[xi], k, &opts()).unwrap();
                    assert!(
                        (v - 2.0 * xi * xi).abs() < 1e-10,
                        "phase {phase} xi {xi} K {k}: {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn f_hom_zero_direction_and_full_lattice() {
        let (model, energy) = presets::full_lattice_1d();
        let dec = build_phases(&model).unwrap();
        let v = f_hom_estimate(&model, &dec, &energy, 1, &[0.0], 8, &opts()).unwrap();
        assert_eq!(v, 0.0);
        for xi in [1.0, -0.5] {
            let v = f_hom_estimate(&model, &dec, &energy, 1, &[xi], 16, &opts()).unwrap();
            assert!((v - xi * xi).abs() < 1e-12, "full lattice: {v}");
        }
    }

    #[test]
    fn f_hom_checkerboard_recovers_identity() {
        // Diagonal bonds with quadratic density: f_hom(xi) = |xi|^2.
        let (model, energy) = presets::checkerboard_2d();
        let dec = build_phases(&model).unwrap();
        let a = quadratic_form_from_cells(&model, &dec, &energy, 1, 2, 8, &opts()).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((a[r * 2 + c] - expect).abs() < 1e-8, "A = {a:?}");
            }
        }
    }

    #[test]
    fn f_hom_is_homogeneous_convex_and_spsd() {
        let (model, energy) = presets::checkerboard_2d();
        let dec = build_phases(&model).unwrap();
        let f = |xi: &[f64]| f_hom_estimate(&model, &dec, &energy, 1, xi, 4, &opts()).unwrap();
        let dirs: [[f64; 2]; 3] = [[1.0, 0.0], [0.7, -0.4], [0.2, 1.1]];
        for xi in &dirs {
            let base = f(xi);
            for lambda in [0.5, 2.0, 3.0] {
                let scaled = f(&[lambda * xi[0], lambda * xi[1]]);
                assert!(
                    (scaled - lambda * lambda * base).abs() < 1e-10 * (1.0 + scaled.abs()),
                    "homogeneity at {xi:?}, lambda {lambda}"
                );
            }
        }
        // Midpoint convexity on direction pairs.
        for a in &dirs {
            for b in &dirs {
                let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                assert!(f(&mid) <= 0.5 * (f(a) + f(b)) + 1e-10);
            }
        }
        // Recovered form is symmetric positive semidefinite.
        let m = quadratic_form_from_cells(&model, &dec, &energy, 1, 2, 4, &opts()).unwrap();
        assert!((m[1] - m[2]).abs() < 1e-10, "symmetry: {m:?}");
        let trace = m[0] + m[3];
        let det = m[0] * m[3] - m[1] * m[2];
        assert!(trace >= -1e-10 && det >= -1e-10, "SPSD: {m:?}");
    }

    #[test]
    fn f_hom_table_extrapolates_and_recovers() {
        let (model, energy) = presets::exh1();
        let dec = build_phases(&model).unwrap();
        let table = f_hom_table(
            &model,
            &dec,
            &energy,
            1,
            &[vec![1.0], vec![-2.0]],
            &[4, 8],
            &opts(),
        )
        .unwrap();
        assert!((table.extrapolated[0] - 2.0).abs() < 1e-10);
        assert!((table.extrapolated[1] - 8.0).abs() < 1e-10);
        let a = table.a_hom.expect("quadratic model");
        assert!((a[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn phi_g_convex_exh2_hand_value() {
        // Residues {even, odd} with u = (z, v), w = c: the single-cell value
        // is (1/2)(2 (v-z)^2 + (v-c)^2 + (z-c)^2).
        let (model, energy) = presets::exh2_zero_g();
        let dec = build_phases(&model).unwrap();
        let (z, v, c) = (1.4, -0.3, 0.25);
        let g = ComparisonG::Quadratic { weight: 1.0 };
        let val = phi_g_convex(
            &model,
            &dec,
            &energy,
            &g,
            &[vec![z], vec![v]],
            &[vec![c], vec![c]],
        )
        .unwrap();
        let expect = 0.5 * (2.0 * (v - z) * (v - z) + (v - c) * (v - c) + (z - c) * (z - c));
        assert!((val.total() - expect).abs() < 1e-12);
        assert!((val.hard_site - 0.5 * (z - c) * (z - c)).abs() < 1e-12);
        // All equal and matching w: zero.
        let val = phi_g_convex(
            &model,
            &dec,
            &energy,
            &g,
            &[vec![c], vec![c]],
            &[vec![c], vec![c]],
        )
        .unwrap();
        assert_eq!(val.total(), 0.0);
    }

    #[test]
    fn phi_g_general_matches_convex_formula() {
        let (model, energy) = presets::exh2_zero_g();
        let dec = build_phases(&model).unwrap();
        let g = ComparisonG::Quadratic { weight: 0.8 };
        let u = [vec![0.9], vec![-0.7]];
        let w = [vec![0.1], vec![0.4]];
        let convex = phi_g_convex(&model, &dec, &energy, &g, &u, &w).unwrap();
        for m_factor in [1i64, 2, 4] {
            let general =
                phi_g_general(&model, &dec, &energy, &g, &u, &w, m_factor, &opts()).unwrap();
            assert!(
                (general.total() - convex.total()).abs() < 1e-9,
                "M = {m_factor}: {} vs {}",
                general.total(),
                convex.total()
            );
        }
    }

    #[test]
    fn phi_g_rejects_inconsistent_hard_values() {
        let (model, energy) = presets::checkerboard_2d();
        let dec = build_phases(&model).unwrap();
        let g = ComparisonG::Quadratic { weight: 1.0 };
        let mut u = vec![vec![0.0]; 4];
        let hard = dec.infinite_cells(1).to_vec();
        u[hard[0]] = vec![1.0];
        u[hard[1]] = vec![2.0]; // differs on the same component
        let w = vec![vec![0.0]; 4];
        assert_eq!(
            phi_g_general(&model, &dec, &energy, &g, &u, &w, 1, &opts()).unwrap_err(),
            CellError::ResidueConstraint
        );
    }

    #[test]
    fn phi_table_interpolation_on_grid() {
        let (model, energy) = presets::exh1();
        let dec = build_phases(&model).unwrap();
        let axes = vec![vec![-1.0, 0.0, 1.0], vec![-1.0, 0.0, 1.0]];
        let table = phi_table_on_grid(
            &model,
            &dec,
            &energy,
            &axes,
            &[2, 4, 8],
            None,
            PhiVariant::Free,
            &opts(),
        )
        .unwrap();
        // phi(z1, z2) = (z1 - z2)^2: exact at nodes, bounded error within a
        // grid cell.
        let v = table.interpolate(&[1.0, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
        let v = table.interpolate(&[0.5, 0.0]).unwrap();
        assert!((v - 0.25).abs() < 0.3);
        assert!(table.interpolate(&[2.0, 0.0]).is_err());
    }

    #[test]
    fn phi_growth_bound_and_lipschitz_modulus() {
        // phi_M(z) <= C (1 + sum |z_j|^p) and a sampled Lipschitz bound.
        let (model, energy) = presets::exh2_pinned_const(0.0);
        let dec = build_phases(&model).unwrap();
        let c = energy.growth_upper;
        let zs = [-2.0, -0.5, 0.0, 1.0, 3.0];
        for &z in &zs {
            let sol = phi_m(&model, &dec, &energy, &[z], 4, None, &opts()).unwrap();
            assert!(sol.value <= c * (1.0 + z.abs().powf(energy.p)) + 1e-9);
        }
        for &z in &zs {
            for &z2 in &zs {
                let a = phi_m(&model, &dec, &energy, &[z], 4, None, &opts()).unwrap();
                let b = phi_m(&model, &dec, &energy, &[z2], 4, None, &opts()).unwrap();
                let dz = (z - z2).abs();
                let bound = c * dz
                    * (dz.powf(energy.p - 1.0)
                        + a.value.powf((energy.p - 1.0) / energy.p)
                        + 1.0
                        + z.abs().powf(energy.p - 1.0)
                        + z2.abs().powf(energy.p - 1.0));
                assert!(
                    (a.value - b.value).abs() <= bound + 1e-9,
                    "modulus at ({z},{z2})"
                );
            }
        }
    }
}
