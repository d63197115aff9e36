//! Property-based invariants over randomized models and fields.

use proptest::prelude::*;

use dporo::energy::total_energy;
use dporo::lattice::{build_phases, two_scale_decompose, PeriodicLatticeModel};
use dporo::presets;
use dporo::solver::{minimize, BondTerm, ConstraintSet, GenericObjective, SolveOptions};
use dporo::{DiscreteField, IBox};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Splitting a field into residue classes and reassembling is the
    /// identity, for any aligned box and any values.
    #[test]
    fn two_scale_round_trip(
        periods in 1i64..6,
        offset in -3i64..3,
        seed in any::<u64>(),
    ) {
        let (model, _) = presets::exh2_zero_g();
        let t = model.period();
        let bbox = IBox::new(vec![offset * t], vec![(offset + periods) * t]);
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let field = DiscreteField::from_fn(bbox, 1, 0.5, |_, out| out[0] = next());
        let ts = two_scale_decompose(&field, &model).unwrap();
        let back = ts.reassemble(&model);
        prop_assert_eq!(back.values(), field.values());
    }

    /// Every residue of a valid model is classified exactly once: infinite
    /// components, islands and soft sites partition the fundamental cell.
    #[test]
    fn partition_of_random_labelings(labels in proptest::collection::vec(0u8..2, 6)) {
        let model = PeriodicLatticeModel::new(
            1,
            1,
            6,
            labels,
            vec![
                vec![vec![-1], vec![0], vec![1]],
                vec![vec![-2], vec![-1], vec![0], vec![1], vec![2]],
            ],
        );
        let Ok(model) = model else { return Ok(()); };
        let Ok(dec) = build_phases(&model) else { return Ok(()); };
        let infinite: usize = (1..=model.phases())
            .map(|j| dec.infinite_cells(j).len())
            .sum();
        let islands: usize = dec.islands().iter().map(|i| i.sites.len()).sum();
        prop_assert_eq!(infinite + islands + dec.soft_cells().len(), model.cell_len());
    }

    /// The weak term is positively p-homogeneous: scaling a field with hard
    /// sites at zero scales the weak sum by lambda^p exactly.
    #[test]
    fn weak_homogeneity(lambda in 0.1f64..5.0, seed in any::<u64>()) {
        let (model, energy) = presets::exh2_zero_g();
        let domain = IBox::cube(1, 12);
        let mut state = seed | 1;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let field = DiscreteField::from_fn(domain.clone(), 1, 0.5, |s, out| {
            out[0] = if s[0] % 2 == 0 { 0.0 } else { next() }
        });
        let mut scaled = field.clone();
        scaled.scale(lambda);
        let e1 = total_energy(&field, &model, &energy, &domain);
        let e2 = total_energy(&scaled, &model, &energy, &domain);
        let expect = lambda.powf(energy.p) * e1.weak;
        prop_assert!((e2.weak - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }

    /// Shift covariance: translating the pinned values translates the
    /// minimizer and preserves the minimum of a difference-based objective.
    #[test]
    fn minimizer_shift_covariance(shift in -10.0f64..10.0, n in 4usize..20) {
        let mut obj = GenericObjective::new(n, 1, 2.0);
        for i in 0..n - 1 {
            obj.bonds.push(BondTerm {
                a: i,
                b: i + 1,
                density: dporo::BondDensity::Quadratic,
                weight: 1.0,
                scale: 1.0,
                shift: vec![0.0],
            });
        }
        let pin = |a: f64, b: f64| ConstraintSet {
            pins: vec![(0, vec![a]), (n - 1, vec![b])],
            ..Default::default()
        };
        let r0 = minimize(&obj, &pin(0.0, 1.0), &SolveOptions::default()).unwrap();
        let r1 = minimize(&obj, &pin(shift, 1.0 + shift), &SolveOptions::default()).unwrap();
        prop_assert!((r0.objective - r1.objective).abs() < 1e-9);
        for i in 0..n {
            prop_assert!((r1.values[i] - r0.values[i] - shift).abs() < 1e-7);
        }
    }
}
