//! Fixture values and properties for the exact-inference oracle.
//!
//! Expected values are computed by an independent first-principles
//! enumerator in this file (`Enumerated`), which multiplies the spec's
//! conditional tables directly and never touches the library's joint
//! table machinery, so the two routes check each other.

use invrat::oracle::*;
use proptest::prelude::*;

/// Independent oracle: all 32 assignment masses from raw arithmetic.
struct Enumerated {
    rows: Vec<([usize; 5], f64)>, // (e, x1, y, x2, x3), mass
}

impl Enumerated {
    fn build(
        weights: &[f64],
        prior_x1: &[f64],
        y_x1: [f64; 2],
        x2_y: [f64; 2],
        x3_x1x2: [f64; 4],
    ) -> Self {
        let b = |p: f64, v: usize| if v == 1 { p } else { 1.0 - p };
        let mut rows = Vec::new();
        for e in 0..weights.len() {
            for x1 in 0..2 {
                for y in 0..2 {
                    for x2 in 0..2 {
                        for x3 in 0..2 {
                            let mass = weights[e]
                                * b(prior_x1[e], x1)
                                * b(y_x1[x1], y)
                                * b(x2_y[y], x2)
                                * b(x3_x1x2[x1 * 2 + x2], x3);
                            rows.push(([e, x1, y, x2, x3], mass));
                        }
                    }
                }
            }
        }
        Enumerated { rows }
    }

    fn toy_two_env() -> Self {
        Self::build(
            &[0.5, 0.5],
            &[0.5, 0.6],
            [0.1, 0.9],
            [0.1, 0.9],
            [0.0, 0.5, 0.5, 1.0],
        )
    }

    /// P(pred_num | pred_den) via mass ratios.
    fn cond(
        &self,
        num: impl Fn(&[usize; 5]) -> bool,
        den: impl Fn(&[usize; 5]) -> bool,
    ) -> f64 {
        let d: f64 = self.rows.iter().filter(|(a, _)| den(a)).map(|(_, m)| m).sum();
        let n: f64 = self
            .rows
            .iter()
            .filter(|(a, _)| den(a) && num(a))
            .map(|(_, m)| m)
            .sum();
        n / d
    }
}

#[test]
fn equal_predictive_power_in_the_base_environment() {
    // The three single-feature conditionals all hit 0.9 exactly.
    let joint = build_joint_uniform(&BinaryGraphSpec::toy_single_env()).unwrap();
    for var in [Variable::X1, Variable::X2, Variable::X3] {
        let p = conditional(&joint, Variable::Y, &[(var, 1)]).unwrap();
        assert!((p - 0.9).abs() < 1e-12, "P(Y=1|{var}=1) = {p}");
        let q = conditional(&joint, Variable::Y, &[(var, 0)]).unwrap();
        assert!(((1.0 - q) - 0.9).abs() < 1e-12, "P(Y=0|{var}=0) = {}", 1.0 - q);
    }
}

#[test]
fn shifted_environment_conditionals_match_independent_enumeration() {
    let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
    let raw = Enumerated::toy_two_env();

    let cases: [(&str, Variable, usize, usize, f64); 4] = [
        // (label, given variable, given value, y value, published rounded value)
        ("P(Y=1|X2=1,e2)", Variable::X2, 1, 1, 0.9255),
        ("P(Y=0|X2=0,e2)", Variable::X2, 0, 0, 0.8670),
        ("P(Y=1|X3=1,e2)", Variable::X3, 1, 1, 0.9124),
        ("P(Y=0|X3=0,e2)", Variable::X3, 0, 0, 0.8828),
    ];
    for (label, var, val, yval, published) in cases {
        let p1 = conditional(&joint, Variable::Y, &[(var, val), (Variable::Env, 1)]).unwrap();
        let p = if yval == 1 { p1 } else { 1.0 - p1 };
        let idx = match var {
            Variable::X2 => 3,
            Variable::X3 => 4,
            _ => unreachable!(),
        };
        let raw_p = raw.cond(|a| a[2] == yval, |a| a[idx] == val && a[0] == 1);
        assert!((p - raw_p).abs() < 1e-12, "{label}: {p} vs enumerated {raw_p}");
        assert!(
            (p - published).abs() < 5e-4,
            "{label}: {p} vs published {published}"
        );
    }
}

#[test]
fn invariance_verdicts_follow_the_graph_structure() {
    // Conditioning on the cause blocks the environment's only path to
    // the label, so a subset is invariant exactly when it contains X1.
    let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
    for z in FeatureSubset::power_set() {
        let expect = z.contains(Variable::X1);
        assert_eq!(
            is_invariant(&joint, z, 1e-6),
            expect,
            "subset {z}, gap {}",
            invariance_gap(&joint, z)
        );
    }
}

#[test]
fn consequence_subset_has_a_strictly_positive_gap() {
    let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
    let gap = invariance_gap(&joint, FeatureSubset::X2);
    assert!(gap > 1e-6, "gap {gap}");
    // cross-checked against the independent enumerator
    let raw = Enumerated::toy_two_env();
    let h = |p: f64| binary_entropy(p);
    let mut pooled = 0.0;
    let mut per_env = 0.0;
    for x2 in 0..2usize {
        let mass: f64 = raw
            .rows
            .iter()
            .filter(|(a, _)| a[3] == x2)
            .map(|(_, m)| m)
            .sum();
        pooled += mass * h(raw.cond(|a| a[2] == 1, |a| a[3] == x2));
        for e in 0..2usize {
            let mass_e: f64 = raw
                .rows
                .iter()
                .filter(|(a, _)| a[3] == x2 && a[0] == e)
                .map(|(_, m)| m)
                .sum();
            per_env += mass_e * h(raw.cond(|a| a[2] == 1, |a| a[3] == x2 && a[0] == e));
        }
    }
    assert!((gap - (pooled - per_env)).abs() < 1e-12);
}

#[test]
fn theorem_check_on_the_five_point_grid_selects_the_cause() {
    let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
    let report = verify_theorem1(&joint, &[0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
    assert_eq!(report.winner, FeatureSubset::X1);
    assert!(report.conclusive);
    // The cause's worst case is its invariant conditional entropy: the
    // adversary can shift the cause prior but not the label conditional.
    let x1_row = report
        .rows
        .iter()
        .find(|r| r.subset == FeatureSubset::X1)
        .unwrap();
    assert!((x1_row.max_loss - binary_entropy(0.9)).abs() < 1e-12);
}

#[test]
fn matched_single_point_evaluation_minimized_by_maximal_subsets() {
    // With the adversary pinned to the pooled training priors, each
    // subset's loss is its conditional entropy, so the full feature set
    // ties for the minimum (the correlate adds nothing beyond the
    // cause and consequence).
    let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
    let matched = AdversarialPriors::matched(&joint).unwrap();
    let losses: Vec<(FeatureSubset, f64)> = FeatureSubset::power_set()
        .into_iter()
        .map(|z| (z, adversarial_test_loss(&joint, &matched, z).unwrap()))
        .collect();
    for (z, loss) in &losses {
        let h = conditional_entropy(&joint, *z, false);
        assert!((loss - h).abs() < 1e-9, "{z}: {loss} vs H {h}");
    }
    let min = losses.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
    let full = losses
        .iter()
        .find(|(z, _)| *z == FeatureSubset::ALL)
        .unwrap()
        .1;
    assert!(full - min < 1e-9, "full set not among minimizers");
}

#[test]
fn uniform_spec_is_fully_invariant_with_zero_information() {
    let spec = BinaryGraphSpec {
        envs: vec!["e1".into(), "e2".into()],
        prior_x1: vec![0.5, 0.5],
        cond_y_given_x1: [0.5, 0.5],
        cond_x2_given_y: [0.5, 0.5],
        cond_x3_given_x1x2: [0.5; 4],
    };
    let joint = build_joint_uniform(&spec).unwrap();
    for z in FeatureSubset::power_set() {
        assert!(is_invariant(&joint, z, 1e-12), "{z}");
        assert!(mutual_information(&joint, z) < 1e-12, "{z}");
    }
}

fn prob() -> impl Strategy<Value = f64> {
    // interior probabilities keep all conditioning events positive-mass
    (0.02f64..0.98).prop_map(|p| (p * 1e6).round() / 1e6)
}

fn arbitrary_spec() -> impl Strategy<Value = BinaryGraphSpec> {
    (
        prop::collection::vec(prob(), 2..4),
        [prob(), prob()],
        [prob(), prob()],
        [prob(), prob(), prob(), prob()],
    )
        .prop_map(|(prior_x1, y, x2, x3)| BinaryGraphSpec {
            envs: (0..prior_x1.len()).map(|i| format!("e{}", i + 1)).collect(),
            prior_x1,
            cond_y_given_x1: y,
            cond_x2_given_y: x2,
            cond_x3_given_x1x2: x3,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_normalizes_and_marginalizes_back_to_the_spec(spec in arbitrary_spec()) {
        let joint = build_joint_uniform(&spec).unwrap();
        prop_assert!((joint.total_mass() - 1.0).abs() < MASS_TOL);
        for (e, p) in spec.prior_x1.iter().enumerate() {
            let q = conditional(&joint, Variable::X1, &[(Variable::Env, e)]).unwrap();
            prop_assert!((q - p).abs() < MASS_TOL);
        }
        for x1 in 0..2 {
            let q = conditional(&joint, Variable::Y, &[(Variable::X1, x1)]).unwrap();
            prop_assert!((q - spec.cond_y_given_x1[x1]).abs() < MASS_TOL);
        }
        for y in 0..2 {
            let q = conditional(&joint, Variable::X2, &[(Variable::Y, y)]).unwrap();
            prop_assert!((q - spec.cond_x2_given_y[y]).abs() < MASS_TOL);
        }
        for x1 in 0..2 {
            for x2 in 0..2 {
                let q = conditional(
                    &joint,
                    Variable::X3,
                    &[(Variable::X1, x1), (Variable::X2, x2)],
                ).unwrap();
                prop_assert!((q - spec.cond_x3_given_x1x2[x1 * 2 + x2]).abs() < MASS_TOL);
            }
        }
    }

    #[test]
    fn conditioning_on_the_environment_never_raises_entropy(spec in arbitrary_spec()) {
        let joint = build_joint_uniform(&spec).unwrap();
        for z in FeatureSubset::power_set() {
            let pooled = conditional_entropy(&joint, z, false);
            let per_env = conditional_entropy(&joint, z, true);
            prop_assert!(per_env <= pooled + 1e-12, "{z}: {per_env} > {pooled}");
        }
    }

    #[test]
    fn the_cause_is_invariant_in_every_factorizing_spec(spec in arbitrary_spec()) {
        // The label conditional is shared across environments by
        // construction of the spec type, so conditioning on the cause
        // always separates the label from the environment.
        let joint = build_joint_uniform(&spec).unwrap();
        prop_assert!(is_invariant(&joint, FeatureSubset::X1, 1e-10));
    }

    #[test]
    fn mutual_information_is_monotone_under_inclusion(spec in arbitrary_spec()) {
        let joint = build_joint_uniform(&spec).unwrap();
        let subsets = FeatureSubset::power_set();
        for a in &subsets {
            for b in &subsets {
                if a.is_subset_of(b) {
                    let ia = mutual_information(&joint, *a);
                    let ib = mutual_information(&joint, *b);
                    prop_assert!(ia <= ib + 1e-12, "I({a})={ia} > I({b})={ib}");
                }
            }
        }
    }

    #[test]
    fn conditionals_stay_in_range_and_mi_nonnegative(spec in arbitrary_spec()) {
        let joint = build_joint_uniform(&spec).unwrap();
        for z in FeatureSubset::power_set() {
            let mi = mutual_information(&joint, z);
            prop_assert!(mi >= 0.0);
        }
        for var in [Variable::X1, Variable::X2, Variable::X3] {
            for val in 0..2 {
                let p = conditional(&joint, Variable::Y, &[(var, val)]).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }
}
