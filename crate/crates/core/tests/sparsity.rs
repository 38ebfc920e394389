mod common;

use chordal_verify::chordal::{
    chordal_extension, clique_count, double_cliques, enumerate_maximal_cliques, is_chordal,
    pattern_e_beta, theorem1_cliques,
};
use chordal_verify::{Activation, DimProfile, EdgeSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{adjacency, chordal_by_elimination, maximal_cliques, p_oracle};

fn profile_strategy() -> impl Strategy<Value = (Vec<usize>, usize, usize)> {
    (
        prop::collection::vec(1usize..=5, 2..=8),
        1usize..=5,
        0usize..=6,
    )
        .prop_map(|(dims, out, beta)| {
            let max_beta = dims.iter().sum::<usize>() - dims[0] - 1;
            let beta = beta.min(max_beta);
            (dims, out, beta)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn containments_hold((dims, out, beta) in profile_strategy(), seed in any::<u64>(), act in 0usize..3) {
        let act = [Activation::Relu, Activation::Tanh, Activation::Sigmoid][act];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Err(e) = common::check_containments(&mut rng, &dims, out, beta, act) {
            return Err(TestCaseError::fail(e));
        }
    }

    #[test]
    fn cliques_match_enumeration((dims, out, beta) in profile_strategy()) {
        let profile = DimProfile::new(dims.clone(), out).unwrap();
        let f = chordal_extension(&profile, beta).unwrap();
        let adj = adjacency(&f);
        let oracle = maximal_cliques(&adj);
        prop_assert_eq!(theorem1_cliques(&profile, beta).unwrap().as_set(), oracle.clone());
        prop_assert_eq!(enumerate_maximal_cliques(&f).unwrap().as_set(), oracle);
        prop_assert!(is_chordal(&f));
        prop_assert!(chordal_by_elimination(&adj));
        prop_assert_eq!(clique_count(&profile, beta).unwrap(), p_oracle(&dims, beta));
        prop_assert!(pattern_e_beta(&profile, beta).unwrap().is_subset(&f));
    }

    #[test]
    fn is_chordal_agrees_on_random_graphs(n in 1usize..9, bits in prop::collection::vec(any::<bool>(), 36)) {
        let mut e = EdgeSet::new(n);
        let mut t = 0;
        for j in 0..n {
            for i in 0..j {
                if bits[t] {
                    e.insert(i, j);
                }
                t += 1;
            }
        }
        prop_assert_eq!(is_chordal(&e), chordal_by_elimination(&adjacency(&e)));
    }

    #[test]
    fn double_cliques_cover_e_beta((dims, out, beta) in profile_strategy()) {
        let profile = DimProfile::new(dims, out).unwrap();
        let cliques = theorem1_cliques(&profile, beta).unwrap();
        let p = cliques.len();
        let mut covered = EdgeSet::new(profile.n_total() + 1);
        for k in 1..=p {
            let c = &cliques.cliques[k - 1];
            let (d1, d2) = double_cliques(&profile, beta, k, p).unwrap();
            let mut both: Vec<usize> = d1.iter().chain(&d2).copied().collect();
            both.sort_unstable();
            both.dedup();
            prop_assert_eq!(both.len(), c.len());
            for part in [&d1, &d2] {
                for (a, &u) in part.iter().enumerate() {
                    for &w in &part[a + 1..] {
                        covered.insert(c[u], c[w]);
                    }
                }
            }
        }
        let e = pattern_e_beta(&profile, beta).unwrap();
        prop_assert!(e.is_subset(&covered), "missing {:?}", e.difference(&covered));
    }
}

#[test]
fn six_layers_of_three() {
    let profile = DimProfile::new(vec![3; 6], 3).unwrap();
    for (beta, p) in [(0, 4), (2, 4), (4, 3)] {
        assert_eq!(clique_count(&profile, beta).unwrap(), p);
        assert_eq!(p_oracle(&[3; 6], beta), p);
        let f = chordal_extension(&profile, beta).unwrap();
        assert_eq!(maximal_cliques(&adjacency(&f)).len(), p);
        assert_eq!(theorem1_cliques(&profile, beta).unwrap().len(), p);
    }
}

#[test]
fn four_cycle_is_not_chordal() {
    let e = EdgeSet::from_pairs(4, [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
    assert!(!is_chordal(&e));
    assert!(!chordal_by_elimination(&adjacency(&e)));
    let e = EdgeSet::from_pairs(4, [(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)]).unwrap();
    assert!(is_chordal(&e));
}
