use std::sync::Arc;

use equity_alloc::constraints::ruin_probability;
use equity_alloc::contracts::{generate_universe, ContractUniverse, GenSpec, IncrementLaw, SubsidiaryGen, DEFAULT_MAX_LEAVES};
use equity_alloc::forms::{form_a, form_b, spectral_bounds, DEFAULT_MAX_DIM};
use equity_alloc::optimizer::{solve_basic, BasicConfig, SolverSettings, Status};
use equity_alloc::portfolio::{delta_utility_processes, utility_processes, PortfolioVariable};
use equity_alloc::contracts::Runoff;
use equity_alloc::tree::{inner_product_h, AdaptedProcess, RandomVariable, ScenarioTree, TreeSpec};
use proptest::prelude::*;

fn tree_strategy() -> impl Strategy<Value = Arc<ScenarioTree>> {
    prop::collection::vec(prop::collection::vec(0.1f64..1.0, 1..=3), 1..=4).prop_map(|levels| {
        let levels = levels
            .into_iter()
            .map(|w| {
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        Arc::new(ScenarioTree::build(&TreeSpec::new(levels)).unwrap())
    })
}

fn leaf_values(tree: &ScenarioTree, seed: &[f64]) -> Vec<f64> {
    tree.leaves().enumerate().map(|(i, _)| seed[i % seed.len()] * (1.0 + i as f64 * 0.1)).collect()
}

fn law() -> impl Strategy<Value = Vec<[f64; 2]>> {
    (0.2f64..0.8, 0.2f64..2.0, -2.0f64..-0.1).prop_map(|(p, a, b)| vec![[p, a], [1.0 - p, b]])
}

fn universe_strategy() -> impl Strategy<Value = ContractUniverse> {
    (1usize..=2, 0usize..=1, prop::collection::vec(law(), 4)).prop_map(|(types, t_bar, laws)| {
        let spec = GenSpec {
            t_bar,
            settlement: 1,
            subsidiaries: vec![SubsidiaryGen {
                types,
                increments: vec![IncrementLaw::Independent { independent: laws[..types].to_vec() }],
                overrides: vec![],
                runoff: vec![],
            }],
            max_leaves: DEFAULT_MAX_LEAVES,
        };
        generate_universe(&spec, &TreeSpec::new(vec![])).unwrap()
    })
}

fn eta_for(u: &ContractUniverse, seed: &[f64]) -> AdaptedProcess {
    let n = u.total_dim();
    AdaptedProcess::from_fn(u.tree(), n, 0..=u.t_bar(), |node, out| {
        for (c, o) in out.iter_mut().enumerate() {
            *o = seed[(node * n + c) % seed.len()];
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tower_property(tree in tree_strategy(), seed in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let h = tree.horizon();
        let x = RandomVariable::scalar(&tree, h, leaf_values(&tree, &seed)).unwrap();
        for k in 0..=h {
            let direct = x.conditional_at(k).unwrap();
            for j in k..=h {
                let nested = x.conditional_at(j).unwrap().conditional_at(k).unwrap();
                for n in tree.level(k) {
                    prop_assert!((nested.at(n)[0] - direct.at(n)[0]).abs() < 1e-10);
                }
            }
        }
        prop_assert!((x.conditional_at(0).unwrap().at(0)[0] - x.expectation()[0]).abs() < 1e-10);
    }

    #[test]
    fn conditional_expectation_is_linear(
        tree in tree_strategy(),
        s1 in prop::collection::vec(-5.0f64..5.0, 1..8),
        s2 in prop::collection::vec(-5.0f64..5.0, 1..8),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let h = tree.horizon();
        let (xv, yv) = (leaf_values(&tree, &s1), leaf_values(&tree, &s2));
        let zv = xv.iter().zip(&yv).map(|(x, y)| a * x + b * y).collect();
        let x = RandomVariable::scalar(&tree, h, xv).unwrap();
        let y = RandomVariable::scalar(&tree, h, yv).unwrap();
        let z = RandomVariable::scalar(&tree, h, zv).unwrap();
        for k in 0..=h {
            let (cx, cy, cz) = (x.conditional_at(k).unwrap(), y.conditional_at(k).unwrap(), z.conditional_at(k).unwrap());
            for n in tree.level(k) {
                prop_assert!((cz.at(n)[0] - a * cx.at(n)[0] - b * cy.at(n)[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn utility_telescopes(u in universe_strategy(), seed in prop::collection::vec(-2.0f64..2.0, 1..6)) {
        let mut x = PortfolioVariable::zeros(&u);
        x.alpha = eta_for(&u, &seed);
        let xi = Runoff::new();
        let ut = utility_processes(&u, &x, &xi).unwrap();
        let du = delta_utility_processes(&u, &x, &xi).unwrap();
        let tree = u.tree();
        prop_assert_eq!(ut[0].get(0, 0), 0.0);
        for n in 1..tree.len() {
            let p = tree.parent(n).unwrap();
            prop_assert!((ut[0].get(n, 0) - ut[0].get(p, 0) - du[0].get(n, 0)).abs() < 1e-10);
        }
    }

    #[test]
    fn ruin_probability_is_monotone_and_scale_free(
        tree in tree_strategy(),
        seed in prop::collection::vec(-3.0f64..3.0, 1..10),
        scale in 0.1f64..10.0,
    ) {
        let k = AdaptedProcess::from_fn(&tree, 1, 0..=tree.horizon(), |n, out| out[0] = 1.0 + seed[n % seed.len()]);
        let m = AdaptedProcess::zeros_full(&tree, 1);
        let ks = AdaptedProcess::from_fn(&tree, 1, 0..=tree.horizon(), |n, out| out[0] = scale * k.get(n, 0));
        let mut last = 0.0;
        for t in 0..=tree.horizon() {
            let p = ruin_probability(&k, &m, t).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
            prop_assert!(p >= last - 1e-15);
            prop_assert!((ruin_probability(&ks, &m, t).unwrap() - p).abs() < 1e-15);
            last = p;
        }
    }

    #[test]
    fn forms_are_sandwiched(u in universe_strategy(), seed in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let eta = eta_for(&u, &seed);
        let s = spectral_bounds(&u, DEFAULT_MAX_DIM).unwrap();
        let n2 = inner_product_h(&eta, &eta).unwrap();
        let (a, b) = (form_a(&u, &eta).unwrap(), form_b(&u, &eta).unwrap());
        prop_assert!(s.c_lower * n2 <= b + 1e-9);
        prop_assert!(b <= a + 1e-9);
        prop_assert!(a <= s.c_upper * n2 + 1e-9);
    }

    #[test]
    fn variance_form_is_midpoint_convex(
        u in universe_strategy(),
        s1 in prop::collection::vec(-3.0f64..3.0, 1..8),
        s2 in prop::collection::vec(-3.0f64..3.0, 1..8),
    ) {
        let (x, y) = (eta_for(&u, &s1), eta_for(&u, &s2));
        let mid = AdaptedProcess::from_fn(u.tree(), u.total_dim(), 0..=u.t_bar(), |n, out| {
            for (c, o) in out.iter_mut().enumerate() {
                *o = 0.5 * (x.get(n, c) + y.get(n, c));
            }
        });
        let bm = form_b(&u, &mid).unwrap();
        prop_assert!(bm <= 0.5 * (form_b(&u, &x).unwrap() + form_b(&u, &y).unwrap()) + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn basic_optimum_grows_with_variance_cap(l1 in law(), l2 in law(), s in 0.5f64..4.0, grow in 1.1f64..3.0) {
        let spec = GenSpec {
            t_bar: 0,
            settlement: 1,
            subsidiaries: vec![SubsidiaryGen {
                types: 2,
                increments: vec![IncrementLaw::Independent { independent: vec![l1, l2] }],
                overrides: vec![],
                runoff: vec![],
            }],
            max_leaves: DEFAULT_MAX_LEAVES,
        };
        let u = generate_universe(&spec, &TreeSpec::new(vec![])).unwrap();
        let settings = SolverSettings { starts: 1, ..SolverSettings::default() };
        let lo = solve_basic(&u, &BasicConfig::new(s), &settings).unwrap();
        let hi = solve_basic(&u, &BasicConfig::new(s * grow), &settings).unwrap();
        prop_assert_eq!(lo.status, Status::Optimal);
        prop_assert_eq!(hi.status, Status::Optimal);
        prop_assert!(hi.objective >= lo.objective - 1e-7);
    }
}
