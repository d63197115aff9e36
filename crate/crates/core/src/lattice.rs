//! Periodic lattice geometry: label function, interaction ranges, torus
//! connectivity with winding groups, bond enumeration, and the interpolation
//! operators used to pass between lattice fields and macroscopic functions.

use thiserror::Error;

use crate::field::DiscreteField;
use crate::util::{integer_lattice, Fnv64, IBox};

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("dimension, codomain and period must be positive")]
    BadShape,
    #[error("label array must have T^d = {expected} entries, got {got}")]
    BadLabelLength { expected: usize, got: usize },
    #[error("label {label} out of range 0..={max} at cell index {cell}")]
    LabelOutOfRange { label: u8, max: u8, cell: usize },
    #[error("need at least one hard phase and one entry per interaction range")]
    MissingRanges,
    #[error("phase {phase} occupies no site of the fundamental cell")]
    EmptyPhase { phase: u8 },
    #[error("interaction range {class} must contain 0 and offsets of dimension d")]
    BadRange { class: usize },
    #[error("interaction range {class} is not symmetric: missing -{offset:?}")]
    AsymmetricRange { class: usize, offset: Vec<i64> },
    #[error("phase {0} has no infinite connected component")]
    NoInfiniteComponent(u8),
    #[error("phase {0} has more than one infinite connected component")]
    MultipleInfiniteComponents(u8),
    #[error("box contains no full periodicity cell")]
    EmptyComponentInBox,
    #[error("field box is not aligned to the period")]
    MisalignedBox,
    #[error("phase index {0} out of range")]
    UnknownPhase(u8),
}

/// Full geometric specification of a periodic lattice model: spatial dimension
/// `d`, codomain dimension `m`, period `T`, label map `J` on the fundamental
/// cell, and one finite symmetric interaction range per label class
/// (`P_0` for the weak class, `P_1..P_N` for the hard phases).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodicLatticeModel {
    d: usize,
    m: usize,
    period: i64,
    labels: Vec<u8>,
    ranges: Vec<Vec<Vec<i64>>>,
}

impl PeriodicLatticeModel {
    pub fn new(
        d: usize,
        m: usize,
        period: i64,
        labels: Vec<u8>,
        ranges: Vec<Vec<Vec<i64>>>,
    ) -> Result<Self, LatticeError> {
        if d == 0 || m == 0 || period <= 0 {
            return Err(LatticeError::BadShape);
        }
        let cell_len = (period as usize).pow(d as u32);
        if labels.len() != cell_len {
            return Err(LatticeError::BadLabelLength {
                expected: cell_len,
                got: labels.len(),
            });
        }
        if ranges.len() < 2 {
            return Err(LatticeError::MissingRanges);
        }
        let phases = (ranges.len() - 1) as u8;
        for (cell, &l) in labels.iter().enumerate() {
            if l > phases {
                return Err(LatticeError::LabelOutOfRange {
                    label: l,
                    max: phases,
                    cell,
                });
            }
        }
        for j in 1..=phases {
            if !labels.contains(&j) {
                return Err(LatticeError::EmptyPhase { phase: j });
            }
        }
        for (class, range) in ranges.iter().enumerate() {
            if !range.iter().any(|p| p.iter().all(|&x| x == 0)) {
                return Err(LatticeError::BadRange { class });
            }
            if range.iter().any(|p| p.len() != d) {
                return Err(LatticeError::BadRange { class });
            }
            for p in range {
                let neg: Vec<i64> = p.iter().map(|x| -x).collect();
                if !range.contains(&neg) {
                    return Err(LatticeError::AsymmetricRange {
                        class,
                        offset: p.clone(),
                    });
                }
            }
        }
        Ok(PeriodicLatticeModel {
            d,
            m,
            period,
            labels,
            ranges,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn codomain(&self) -> usize {
        self.m
    }

    pub fn period(&self) -> i64 {
        self.period
    }

    /// Number of hard phases N.
    pub fn phases(&self) -> u8 {
        (self.ranges.len() - 1) as u8
    }

    /// `{0..T-1}^d` as a box.
    pub fn cell(&self) -> IBox {
        IBox::cube(self.d, self.period)
    }

    pub fn cell_len(&self) -> usize {
        (self.period as usize).pow(self.d as u32)
    }

    /// Flat index of the residue class of a site.
    pub fn cell_index(&self, site: &[i64]) -> usize {
        let mut idx = 0usize;
        for a in 0..self.d {
            idx = idx * self.period as usize + site[a].rem_euclid(self.period) as usize;
        }
        idx
    }

    pub fn residue(&self, site: &[i64]) -> Vec<i64> {
        site.iter().map(|x| x.rem_euclid(self.period)).collect()
    }

    /// T-periodic label function J.
    pub fn label(&self, site: &[i64]) -> u8 {
        self.labels[self.cell_index(site)]
    }

    pub fn label_of_cell(&self, cell: usize) -> u8 {
        self.labels[cell]
    }

    /// Interaction range P_class (class 0 is the weak class).
    pub fn range(&self, class: u8) -> &[Vec<i64>] {
        &self.ranges[class as usize]
    }

    /// Half of `P_class \ {0}`: one representative per `±p` pair, chosen so the
    /// first nonzero coordinate is positive. Bonds are enumerated (and, for
    /// non-even densities, oriented) by these offsets; each unordered pair is
    /// produced exactly once.
    pub fn canonical_offsets(&self, class: u8) -> Vec<Vec<i64>> {
        let mut out: Vec<Vec<i64>> = self.ranges[class as usize]
            .iter()
            .filter(|p| {
                match p.iter().find(|&&x| x != 0) {
                    Some(&first) => first > 0,
                    None => false, // skip 0
                }
            })
            .cloned()
            .collect();
        out.sort();
        out
    }

    /// Decides whether a pair of labels interacts through the weak class:
    /// at least one endpoint soft, or endpoints in distinct hard phases.
    pub fn weak_pair(&self, la: u8, lb: u8) -> bool {
        la == 0 || lb == 0 || la != lb
    }

    /// Provenance hash over the full geometric data.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_i64(self.d as i64);
        h.write_i64(self.m as i64);
        h.write_i64(self.period);
        h.write(&self.labels);
        for r in &self.ranges {
            h.write_i64(r.len() as i64);
            for p in r {
                for &x in p {
                    h.write_i64(x);
                }
            }
        }
        h.finish()
    }
}

/// Classification of a residue class of the fundamental cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteClass {
    /// Label 0.
    Soft,
    /// Belongs to the unique infinite component C_j of its phase.
    Infinite { phase: u8 },
    /// Belongs to a finite component (island) of its phase.
    Island { phase: u8, island: usize },
}

/// One P_j-connected component of `A_j` on the torus `Z^d / T Z^d`.
#[derive(Debug, Clone)]
pub struct TorusComponent {
    pub phase: u8,
    /// Cell indices of the member residues.
    pub cells: Vec<usize>,
    /// Basis of the winding group W (a sublattice of `T Z^d`), echelon rows.
    pub winding: Vec<Vec<i64>>,
    /// `[T Z^d : W]` when W has full rank, else None.
    pub winding_index: Option<i64>,
    /// A connected lift of the component to `Z^d`, one site per residue.
    pub lift: Vec<Vec<i64>>,
}

impl TorusComponent {
    /// Nontrivial winding means the lift to `Z^d` is unbounded.
    pub fn is_infinite(&self) -> bool {
        !self.winding.is_empty()
    }
}

/// A finite component representative: its phase and lifted `Z^d` site set.
#[derive(Debug, Clone)]
pub struct IslandSet {
    pub phase: u8,
    pub sites: Vec<Vec<i64>>,
    pub component: usize,
}

/// Result of the torus connectivity analysis: components per phase, the
/// infinite components, island representatives, and the per-residue class map.
#[derive(Debug, Clone)]
pub struct PhaseDecomposition {
    components: Vec<TorusComponent>,
    class_by_cell: Vec<SiteClass>,
    islands: Vec<IslandSet>,
    infinite_cells: Vec<Vec<usize>>,
    soft_cells: Vec<usize>,
}

impl PhaseDecomposition {
    pub fn components(&self) -> &[TorusComponent] {
        &self.components
    }

    pub fn class_of_cell(&self, cell: usize) -> SiteClass {
        self.class_by_cell[cell]
    }

    pub fn class_of_site(&self, model: &PeriodicLatticeModel, site: &[i64]) -> SiteClass {
        self.class_by_cell[model.cell_index(site)]
    }

    /// Island representatives A_l^j over all phases, in deterministic order.
    pub fn islands(&self) -> &[IslandSet] {
        &self.islands
    }

    /// Residues of `C_j ∩ Y` (cell indices), for phase j in `1..=N`.
    pub fn infinite_cells(&self, phase: u8) -> &[usize] {
        &self.infinite_cells[phase as usize - 1]
    }

    /// Residues of `A_0 ∩ Y`.
    pub fn soft_cells(&self) -> &[usize] {
        &self.soft_cells
    }

    /// Volume fraction `c_j = #(C_j ∩ Y) / T^d`; phase 0 gives the soft fraction.
    pub fn volume_fraction(&self, model: &PeriodicLatticeModel, phase: u8) -> f64 {
        let count = if phase == 0 {
            self.soft_cells.len()
        } else {
            self.infinite_cells[phase as usize - 1].len()
        };
        count as f64 / model.cell_len() as f64
    }

    pub fn max_island_diameter(&self) -> i64 {
        self.islands
            .iter()
            .map(|isl| {
                let mut diam = 0i64;
                for a in &isl.sites {
                    for b in &isl.sites {
                        let d = a
                            .iter()
                            .zip(b)
                            .map(|(x, y)| (x - y).abs())
                            .max()
                            .unwrap_or(0);
                        diam = diam.max(d);
                    }
                }
                diam
            })
            .max()
            .unwrap_or(0)
    }
}

/// Computes the torus components of every hard phase together with their
/// winding groups, classifies them into the unique infinite component and
/// islands, and validates uniqueness.
///
/// A component winds iff its lift to `Z^d` is unbounded; the lift is a single
/// `Z^d`-component iff the winding group has index 1 in `T Z^d`.
pub fn build_phases(model: &PeriodicLatticeModel) -> Result<PhaseDecomposition, LatticeError> {
    let t = model.period();
    let cell = model.cell();
    let n_cells = model.cell_len();
    let mut class_by_cell = vec![SiteClass::Soft; n_cells];
    let mut components = Vec::new();
    let mut islands = Vec::new();
    let mut infinite_cells = vec![Vec::new(); model.phases() as usize];

    for phase in 1..=model.phases() {
        let offsets: Vec<Vec<i64>> = model
            .range(phase)
            .iter()
            .filter(|p| p.iter().any(|&x| x != 0))
            .cloned()
            .collect();
        let mut visited = vec![false; n_cells];
        let mut phase_components: Vec<TorusComponent> = Vec::new();

        for start in 0..n_cells {
            if visited[start] || model.label_of_cell(start) != phase {
                continue;
            }
            // BFS over the torus graph tracking a Z^d lift per residue; a
            // revisit with a different lift yields a winding generator.
            let start_site = cell.site_at(start);
            let mut lift: Vec<Option<Vec<i64>>> = vec![None; n_cells];
            lift[start] = Some(start_site.clone());
            visited[start] = true;
            let mut queue = std::collections::VecDeque::new();
            queue.push_back(start);
            let mut members = vec![start];
            let mut gens: Vec<Vec<i64>> = Vec::new();
            while let Some(cur) = queue.pop_front() {
                let pos = lift[cur].clone().expect("visited residue has a lift");
                for p in &offsets {
                    let next_site: Vec<i64> = pos.iter().zip(p).map(|(x, y)| x + y).collect();
                    let next_cell = model.cell_index(&next_site);
                    if model.label_of_cell(next_cell) != phase {
                        continue;
                    }
                    match &lift[next_cell] {
                        None => {
                            lift[next_cell] = Some(next_site);
                            visited[next_cell] = true;
                            members.push(next_cell);
                            queue.push_back(next_cell);
                        }
                        Some(existing) => {
                            let g: Vec<i64> =
                                next_site.iter().zip(existing).map(|(a, b)| a - b).collect();
                            if g.iter().any(|&x| x != 0) {
                                gens.push(g);
                            }
                        }
                    }
                }
            }
            // Winding displacements are multiples of T; reduce in cell units.
            let cell_gens: Vec<Vec<i64>> = gens
                .iter()
                .map(|g| g.iter().map(|&x| x / t).collect())
                .collect();
            let reduced = integer_lattice(model.dim(), &cell_gens);
            let winding: Vec<Vec<i64>> = reduced
                .basis
                .iter()
                .map(|r| r.iter().map(|&x| x * t).collect())
                .collect();
            members.sort_unstable();
            let lift_sites: Vec<Vec<i64>> = members
                .iter()
                .map(|&c| lift[c].clone().expect("member has a lift"))
                .collect();
            phase_components.push(TorusComponent {
                phase,
                cells: members,
                winding,
                winding_index: reduced.index_in_zd,
                lift: lift_sites,
            });
        }

        let winding_ids: Vec<usize> = (0..phase_components.len())
            .filter(|&i| phase_components[i].is_infinite())
            .collect();
        match winding_ids.len() {
            0 => return Err(LatticeError::NoInfiniteComponent(phase)),
            1 => {
                let c = &phase_components[winding_ids[0]];
                // The lift splits into [T Z^d : W] distinct infinite components.
                if c.winding_index != Some(1) {
                    return Err(LatticeError::MultipleInfiniteComponents(phase));
                }
            }
            _ => return Err(LatticeError::MultipleInfiniteComponents(phase)),
        }

        for comp in phase_components {
            let id = components.len();
            if comp.is_infinite() {
                for &c in &comp.cells {
                    class_by_cell[c] = SiteClass::Infinite { phase };
                }
                infinite_cells[phase as usize - 1] = comp.cells.clone();
            } else {
                let island_id = islands.len();
                for &c in &comp.cells {
                    class_by_cell[c] = SiteClass::Island {
                        phase,
                        island: island_id,
                    };
                }
                // Normalize the lift so its minimal corner lies in [0, T)^d.
                let mut sites = comp.lift.clone();
                for a in 0..model.dim() {
                    let min = sites.iter().map(|s| s[a]).min().unwrap();
                    let shift = min.div_euclid(t) * t;
                    for s in &mut sites {
                        s[a] -= shift;
                    }
                }
                sites.sort();
                islands.push(IslandSet {
                    phase,
                    sites,
                    component: id,
                });
            }
            components.push(comp);
        }
    }

    let soft_cells: Vec<usize> = (0..n_cells)
        .filter(|&c| model.label_of_cell(c) == 0)
        .collect();

    Ok(PhaseDecomposition {
        components,
        class_by_cell,
        islands,
        infinite_cells,
        soft_cells,
    })
}

/// Whether bond enumeration treats the box as a flat torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrap {
    None,
    Torus,
}

/// An unordered interacting pair, stored once, oriented from `a` to `b` by a
/// canonical offset. `disp` is the true displacement in `Z^d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub disp: Vec<i64>,
}

/// Strong bonds per phase and weak bonds restricted to a box.
#[derive(Debug, Clone)]
pub struct BondSets {
    pub strong: Vec<Vec<Bond>>,
    pub weak: Vec<Bond>,
}

impl BondSets {
    pub fn total(&self) -> usize {
        self.weak.len() + self.strong.iter().map(|v| v.len()).sum::<usize>()
    }
}

/// Enumerates every interacting pair exactly once: strong bonds require both
/// endpoints in the same hard phase with difference in `P_j \ {0}`, weak bonds
/// difference in `P_0 \ {0}` with an endpoint soft or endpoints in distinct
/// phases. With `Wrap::Torus` the box extents must be multiples of the period
/// and the second endpoint is wrapped; wrapped bonds keep their true
/// displacement.
pub fn bond_sets(model: &PeriodicLatticeModel, bbox: &IBox, wrap: Wrap) -> BondSets {
    if wrap == Wrap::Torus {
        for a in 0..bbox.dim() {
            assert!(
                bbox.extent(a) % model.period() == 0,
                "torus extents must be multiples of the period"
            );
        }
    }
    let mut strong = vec![Vec::new(); model.phases() as usize];
    let mut weak = Vec::new();
    let classes: Vec<(u8, Vec<Vec<i64>>)> = (0..=model.phases())
        .map(|c| (c, model.canonical_offsets(c)))
        .collect();
    for ia in 0..bbox.len() {
        let site = bbox.site_at(ia);
        let la = model.label(&site);
        for (class, offsets) in &classes {
            for p in offsets {
                let other: Vec<i64> = site.iter().zip(p).map(|(x, y)| x + y).collect();
                let ib = match wrap {
                    Wrap::None => {
                        if !bbox.contains(&other) {
                            continue;
                        }
                        bbox.index_of(&other)
                    }
                    Wrap::Torus => bbox.index_of(&bbox.wrap(&other)),
                };
                let lb = model.label(&other);
                let bond = Bond {
                    a: ia,
                    b: ib,
                    disp: p.clone(),
                };
                if *class == 0 {
                    if model.weak_pair(la, lb) {
                        weak.push(bond);
                    }
                } else if la == *class && lb == *class {
                    strong[*class as usize - 1].push(bond);
                }
            }
        }
    }
    BondSets { strong, weak }
}

/// Connected components of `A_j ∩ box` under P_j-adjacency (within the box,
/// optionally wrapped). Returned as sorted site-index lists, ordered by their
/// smallest member.
pub fn box_components(
    model: &PeriodicLatticeModel,
    bbox: &IBox,
    wrap: Wrap,
    phase: u8,
) -> Vec<Vec<usize>> {
    let bonds = bond_sets(model, bbox, wrap);
    let mut parent: Vec<usize> = (0..bbox.len()).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = x;
        while parent[c] != c {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    for b in &bonds.strong[phase as usize - 1] {
        let (ra, rb) = (find(&mut parent, b.a), find(&mut parent, b.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..bbox.len() {
        let site = bbox.site_at(i);
        if model.label(&site) == phase {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

/// Extension operator: propagates values on `C_j` sites to the whole box by
/// replacing every non-`C_j` site with the average of the field over the
/// `C_j` sites of its periodicity cell. Cells that are not fully contained in
/// the box copy the nearest fully interior cell's average.
pub fn extend_from_component(
    field: &DiscreteField,
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    phase: u8,
) -> Result<DiscreteField, LatticeError> {
    if phase == 0 || phase > model.phases() {
        return Err(LatticeError::UnknownPhase(phase));
    }
    let bbox = field.bbox();
    let t = model.period();
    let d = model.dim();
    let m = field.m();
    // Index range of fully interior periodicity cells per axis.
    let mut c_lo = vec![0i64; d];
    let mut c_hi = vec![0i64; d];
    for a in 0..d {
        c_lo[a] = (bbox.lo()[a] + t - 1).div_euclid(t);
        c_hi[a] = bbox.hi()[a].div_euclid(t);
        if c_lo[a] >= c_hi[a] {
            return Err(LatticeError::EmptyComponentInBox);
        }
    }
    let cells = IBox::new(c_lo.clone(), c_hi.clone());
    // Average over C_j per interior cell.
    let mut avg = vec![0.0; cells.len() * m];
    for ci in 0..cells.len() {
        let corner: Vec<i64> = cells.site_at(ci).iter().map(|c| c * t).collect();
        let mut count = 0usize;
        for &rc in decomp.infinite_cells(phase) {
            let residue = model.cell().site_at(rc);
            let site: Vec<i64> = corner.iter().zip(&residue).map(|(c, r)| c + r).collect();
            let v = field.value_at(&site);
            for k in 0..m {
                avg[ci * m + k] += v[k];
            }
            count += 1;
        }
        debug_assert!(count > 0, "infinite component meets every periodicity cell");
        for k in 0..m {
            avg[ci * m + k] /= count as f64;
        }
    }
    let mut out = field.clone();
    for i in 0..bbox.len() {
        let site = bbox.site_at(i);
        if decomp.class_of_site(model, &site) == (SiteClass::Infinite { phase }) {
            continue;
        }
        let clamped: Vec<i64> = (0..d)
            .map(|a| site[a].div_euclid(t).clamp(c_lo[a], c_hi[a] - 1))
            .collect();
        let ci = cells.index_of(&clamped);
        out.set(i, &avg[ci * m..(ci + 1) * m]);
    }
    Ok(out)
}

/// A field split into its residue classes: one coarse field per residue
/// `y ∈ {0..T-1}^d`, where coarse site `c` holds the value at `T c + y`.
#[derive(Debug, Clone)]
pub struct TwoScaleDecomposition {
    pub period: i64,
    pub fine_box: IBox,
    /// Indexed by cell index of the residue.
    pub residues: Vec<DiscreteField>,
}

/// Splits `field` into per-residue coarse fields. The box must be aligned to
/// the period on every axis. Reassembling reproduces the input exactly.
pub fn two_scale_decompose(
    field: &DiscreteField,
    model: &PeriodicLatticeModel,
) -> Result<TwoScaleDecomposition, LatticeError> {
    let bbox = field.bbox();
    let t = model.period();
    for a in 0..bbox.dim() {
        if bbox.lo()[a].rem_euclid(t) != 0 || bbox.hi()[a].rem_euclid(t) != 0 {
            return Err(LatticeError::MisalignedBox);
        }
    }
    let coarse = IBox::new(
        bbox.lo().iter().map(|x| x / t).collect(),
        bbox.hi().iter().map(|x| x / t).collect(),
    );
    let mut residues = Vec::with_capacity(model.cell_len());
    for rc in 0..model.cell_len() {
        let y = model.cell().site_at(rc);
        let f = DiscreteField::from_fn(coarse.clone(), field.m(), field.spacing() * t as f64, |c, out| {
            let site: Vec<i64> = c.iter().zip(&y).map(|(ci, yi)| t * ci + yi).collect();
            out.copy_from_slice(field.value_at(&site));
        });
        residues.push(f);
    }
    Ok(TwoScaleDecomposition {
        period: t,
        fine_box: bbox.clone(),
        residues,
    })
}

impl TwoScaleDecomposition {
    pub fn reassemble(&self, model: &PeriodicLatticeModel) -> DiscreteField {
        let m = self.residues[0].m();
        let spacing = self.residues[0].spacing() / self.period as f64;
        DiscreteField::from_fn(self.fine_box.clone(), m, spacing, |site, out| {
            let rc = model.cell_index(site);
            let c: Vec<i64> = site.iter().map(|x| x.div_euclid(self.period)).collect();
            out.copy_from_slice(self.residues[rc].value_at(&c));
        })
    }
}
