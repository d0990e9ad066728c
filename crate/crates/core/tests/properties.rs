//! Randomized invariants over codes, plans, metrics and the objective.

use std::collections::BTreeSet;

use proptest::prelude::*;

use dcr_core::eval::{micro_metrics, objective, Metrics};
use dcr_core::seeds;
use dcr_core::taxonomy::canonicalize;
use dcr_core::workflow::{compile_plan, ComponentLibrary};

fn code() -> impl Strategy<Value = String> {
    "[A-Z][0-9]{2}(\\.[0-9A-Z]{1,4})?"
}

fn code_set() -> impl Strategy<Value = BTreeSet<String>> {
    prop::collection::btree_set("[A-C][0-9]\\.[0-3]", 0..8)
}

proptest! {
    #[test]
    fn canonicalize_is_idempotent(raw in code(), lower in any::<bool>(), pad in any::<bool>()) {
        let mut input = if lower { raw.to_lowercase() } else { raw.clone() };
        if pad {
            input = format!("  {input} ");
        }
        let once = canonicalize(&input).unwrap();
        prop_assert_eq!(canonicalize(&once).unwrap(), once.clone());
        prop_assert_eq!(once, raw);
    }

    #[test]
    fn metrics_bounded_and_consistent(pairs in prop::collection::vec((code_set(), code_set()), 1..20)) {
        let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let m = micro_metrics(&p, &g).unwrap();
        let tp: u64 = p.iter().zip(&g).map(|(a, b)| a.intersection(b).count() as u64).sum();
        prop_assert_eq!(m.tp, tp);
        prop_assert_eq!(m.tp + m.fp, p.iter().map(|s| s.len() as u64).sum::<u64>());
        prop_assert_eq!(m.tp + m.fn_, g.iter().map(|s| s.len() as u64).sum::<u64>());
        prop_assert_eq!(m, Metrics::from_counts(m.tp, m.fp, m.fn_));
        for x in [m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
    }

    #[test]
    fn objective_monotone(
        f1 in 0.0..=1.0f64,
        v in prop::collection::vec(0.0..=1.0f64, 1..6),
        c in 0.0..100.0f64,
        lv in 0.0..2.0f64,
        lc in 0.0..2.0f64,
        df1 in 0.0..0.5f64,
        dc in 0.0..10.0f64,
    ) {
        let g = objective(f1, &v, c, lv, lc);
        prop_assert!(objective(f1 + df1, &v, c, lv, lc) >= g);
        prop_assert!(objective(f1, &v, c + dc, lv, lc) <= g);
        let full = vec![1.0; v.len()];
        prop_assert!(objective(f1, &full, c, lv, lc) >= g);
        prop_assert_eq!(objective(f1, &v, c, 0.0, 0.0), f1);
    }

    #[test]
    fn topo_order_respects_edges(i in 0usize..64) {
        let names = seeds::seed_names();
        let plan = seeds::build_seed(names[i % names.len()], &Default::default()).unwrap();
        let graph = compile_plan(&plan, &ComponentLibrary::standard()).unwrap();
        let order = graph.topo_order().unwrap();
        prop_assert_eq!(order.len(), graph.nodes.len());
        let pos = |id: &str| order.iter().position(|x| x == id).unwrap();
        for e in &graph.edges {
            prop_assert!(pos(&e.from) < pos(&e.to), "{} before {}", e.from, e.to);
        }
    }
}
