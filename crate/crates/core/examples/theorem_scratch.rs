use invrat::oracle::*;

fn main() {
    let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
    // Paper fixtures first
    for (label, target, given, expect) in [
        ("P(Y=1|X1=1)", Variable::Y, vec![(Variable::X1, 1)], 0.9),
        ("P(Y=1|X2=1) e1", Variable::Y, vec![(Variable::X2, 1), (Variable::Env, 0)], 0.9),
        ("P(Y=1|X3=1) e1", Variable::Y, vec![(Variable::X3, 1), (Variable::Env, 0)], 0.9),
        ("P(Y=1|X2=1) e2", Variable::Y, vec![(Variable::X2, 1), (Variable::Env, 1)], 0.9255),
        ("P(Y=1|X3=1) e2", Variable::Y, vec![(Variable::X3, 1), (Variable::Env, 1)], 0.9124),
    ] {
        let v = conditional(&joint, target, &given).unwrap();
        println!("{label} = {v:.6} (expect ~{expect})");
    }
    let p_y0_x2_0 = 1.0 - conditional(&joint, Variable::Y, &[(Variable::X2, 0), (Variable::Env, 1)]).unwrap();
    let p_y0_x3_0 = 1.0 - conditional(&joint, Variable::Y, &[(Variable::X3, 0), (Variable::Env, 1)]).unwrap();
    println!("P(Y=0|X2=0) e2 = {p_y0_x2_0:.6} (expect ~0.8670)");
    println!("P(Y=0|X3=0) e2 = {p_y0_x3_0:.6} (expect ~0.8828)");

    for z in FeatureSubset::power_set() {
        println!("{z}: gap={:.6} inv={}", invariance_gap(&joint, z), is_invariant(&joint, z, 1e-6));
    }

    let t0 = std::time::Instant::now();
    let report = verify_theorem1(&joint, &[0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
    let dt = t0.elapsed();
    println!("\ngrid 5 in {dt:?}:");
    for row in &report.rows {
        println!("  {}: max_loss = {:.6}", row.subset, row.max_loss);
    }
    println!("winner = {}, ties = {:?}, conclusive = {}", report.winner,
        report.ties.iter().map(|t| t.to_string()).collect::<Vec<_>>(), report.conclusive);

    // matched single-point: minimizer should be full set
    let matched = AdversarialPriors::matched(&joint).unwrap();
    let mut rows: Vec<(String, f64)> = FeatureSubset::power_set().iter()
        .map(|z| (z.to_string(), adversarial_test_loss(&joint, &matched, *z).unwrap()))
        .collect();
    rows.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    println!("\nmatched-prior losses (sorted): {rows:?}");
}
