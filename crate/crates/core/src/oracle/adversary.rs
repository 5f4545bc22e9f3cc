//! Worst-case test environments and the brute-force saddle-point check.
//!
//! A deployed predictor that replicates the pooled training conditional
//! `p(Y | Z)` is scored in a test environment whose feature priors are
//! chosen adversarially. The label conditional given the cause is not
//! adversary-controlled — it is invariant by assumption. The minimax
//! check grids all nine adversarial parameters exhaustively and reports,
//! per feature subset, the worst loss the adversary can force.

use super::{
    conditional, FeatureSubset, JointTable, OracleError, Variable,
};

/// Train conditionals are clamped into `[CLAMP, 1 - CLAMP]` before logs
/// so the adversary cannot force an infinite loss through assignments
/// that carry zero training mass.
pub const CLAMP: f64 = 1e-9;

/// Test-environment priors under adversary control: the prior of the
/// cause, the consequence conditional, and the correlate conditional.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialPriors {
    /// `P(X1 = 1)` in the test environment.
    pub pi1: f64,
    /// `P(X2 = 1 | X1 = a, Y = y)`, indexed by `a * 2 + y`.
    pub pi2: [f64; 4],
    /// `P(X3 = 1 | X1 = a, X2 = b)`, indexed by `a * 2 + b`.
    pub pi3: [f64; 4],
}

impl AdversarialPriors {
    pub fn validate(&self) -> Result<(), OracleError> {
        let all = std::iter::once(self.pi1)
            .chain(self.pi2)
            .chain(self.pi3);
        for (i, p) in all.enumerate() {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(OracleError::BadProbability {
                    what: format!("adversarial prior #{i}"),
                    value: p,
                });
            }
        }
        Ok(())
    }

    /// The priors that exactly reproduce the pooled training
    /// distribution; under them the adversarial loss of any subset
    /// equals its conditional label entropy.
    pub fn matched(train: &JointTable) -> Result<Self, OracleError> {
        let pi1 = conditional(train, Variable::X1, &[])?;
        let mut pi2 = [0.0; 4];
        let mut pi3 = [0.0; 4];
        for a in 0..2 {
            for y in 0..2 {
                pi2[a * 2 + y] =
                    conditional(train, Variable::X2, &[(Variable::X1, a), (Variable::Y, y)])?;
            }
            for b in 0..2 {
                // The correlate conditional may sit on zero-mass cells in
                // degenerate specs; treat such cells as uninformative.
                pi3[a * 2 + b] = conditional(
                    train,
                    Variable::X3,
                    &[(Variable::X1, a), (Variable::X2, b)],
                )
                .unwrap_or(0.5);
            }
        }
        Ok(AdversarialPriors { pi1, pi2, pi3 })
    }
}

/// Precomputed per-subset state for scoring many adversarial priors
/// against one training joint.
struct SubsetEvaluator {
    z: FeatureSubset,
    /// Invariant conditional `P(Y = 1 | X1 = a)` from training.
    q_y_given_x1: [f64; 2],
    /// Clamped pooled train conditional `P(Y = 1 | Z = cell)`; cells the
    /// training distribution never produces fall back to the pooled
    /// label marginal.
    train_cond: Vec<f64>,
    /// Cell index for each of the 16 feature assignments
    /// `(x1 * 4 + x2 * 2 + x3)` ignoring `y`.
    cell_of: [usize; 8],
}

impl SubsetEvaluator {
    fn new(train: &JointTable, z: FeatureSubset) -> Result<Self, OracleError> {
        let q_y_given_x1 = [
            conditional(train, Variable::Y, &[(Variable::X1, 0)])?,
            conditional(train, Variable::Y, &[(Variable::X1, 1)])?,
        ];
        let p_y = conditional(train, Variable::Y, &[])?;
        let n_cells = z.n_cells();
        let mut mass_all = vec![0.0; n_cells];
        let mut mass_y1 = vec![0.0; n_cells];
        for (_, x1, y, x2, x3, m) in train.assignments() {
            let cell = z.cell_index(x1, x2, x3);
            mass_all[cell] += m;
            if y == 1 {
                mass_y1[cell] += m;
            }
        }
        let train_cond = mass_all
            .iter()
            .zip(&mass_y1)
            .map(|(all, y1)| {
                let raw = if *all > 0.0 { y1 / all } else { p_y };
                raw.clamp(CLAMP, 1.0 - CLAMP)
            })
            .collect();
        let mut cell_of = [0usize; 8];
        for x1 in 0..2 {
            for x2 in 0..2 {
                for x3 in 0..2 {
                    cell_of[x1 * 4 + x2 * 2 + x3] = z.cell_index(x1, x2, x3);
                }
            }
        }
        Ok(SubsetEvaluator {
            z,
            q_y_given_x1,
            train_cond,
            cell_of,
        })
    }

    /// Expected test cross-entropy of the pooled-train predictor over
    /// the adversary's distribution, in nats.
    fn loss(&self, priors: &AdversarialPriors) -> f64 {
        let n_cells = self.z.n_cells();
        let mut mass = [0.0f64; 16]; // cell * 2 + y, n_cells <= 8
        for x1 in 0..2usize {
            let p1 = if x1 == 1 { priors.pi1 } else { 1.0 - priors.pi1 };
            if p1 == 0.0 {
                continue;
            }
            for y in 0..2usize {
                let qy = if y == 1 {
                    self.q_y_given_x1[x1]
                } else {
                    1.0 - self.q_y_given_x1[x1]
                };
                if qy == 0.0 {
                    continue;
                }
                for x2 in 0..2usize {
                    let p2v = priors.pi2[x1 * 2 + y];
                    let p2 = if x2 == 1 { p2v } else { 1.0 - p2v };
                    if p2 == 0.0 {
                        continue;
                    }
                    for x3 in 0..2usize {
                        let p3v = priors.pi3[x1 * 2 + x2];
                        let p3 = if x3 == 1 { p3v } else { 1.0 - p3v };
                        if p3 == 0.0 {
                            continue;
                        }
                        let cell = self.cell_of[x1 * 4 + x2 * 2 + x3];
                        mass[cell * 2 + y] += p1 * qy * p2 * p3;
                    }
                }
            }
        }
        let mut loss = 0.0;
        for cell in 0..n_cells {
            let q = self.train_cond[cell];
            let m1 = mass[cell * 2 + 1];
            let m0 = mass[cell * 2];
            if m1 > 0.0 {
                loss -= m1 * q.ln();
            }
            if m0 > 0.0 {
                loss -= m0 * (1.0 - q).ln();
            }
        }
        loss
    }
}

/// Expected cross-entropy, under adversarial test priors, of the
/// predictor that replicates the pooled training conditional of `z`.
/// Zero-mass test assignments contribute nothing; positive-mass test
/// assignments with zero training mass are scored against the clamped
/// pooled label marginal.
pub fn adversarial_test_loss(
    train: &JointTable,
    test_priors: &AdversarialPriors,
    z: FeatureSubset,
) -> Result<f64, OracleError> {
    test_priors.validate()?;
    Ok(SubsetEvaluator::new(train, z)?.loss(test_priors))
}

/// Worst-case loss of one subset and the grid point attaining it.
#[derive(Clone, Debug)]
pub struct SubsetMaxLoss {
    pub subset: FeatureSubset,
    pub max_loss: f64,
    pub argmax: AdversarialPriors,
}

/// Result of the exhaustive minimax check over the power set.
#[derive(Clone, Debug)]
pub struct Theorem1Report {
    pub grid: Vec<f64>,
    /// One row per subset, in power-set order (size, then lexicographic).
    pub rows: Vec<SubsetMaxLoss>,
    /// The minimax-optimal subset after tie-breaking (smaller subsets
    /// first, then lexicographic member order).
    pub winner: FeatureSubset,
    /// Every subset whose worst-case loss ties the minimum.
    pub ties: Vec<FeatureSubset>,
    /// False when the grid was too coarse to separate the minimum from
    /// other subsets; an inconclusive report is not a failure.
    pub conclusive: bool,
}

/// Relative tolerance under which two worst-case losses count as tied.
const TIE_RTOL: f64 = 1e-9;

/// Brute-force saddle-point check: for every subset of the features,
/// maximizes the adversarial test loss over the 9-dimensional grid
/// (every parameter ranges over `grid`), then reports the subset whose
/// worst case is smallest.
pub fn verify_theorem1(train: &JointTable, grid: &[f64]) -> Result<Theorem1Report, OracleError> {
    if grid.is_empty() {
        return Err(OracleError::BadGrid {
            what: "grid must not be empty".into(),
        });
    }
    for g in grid {
        if !(0.0..=1.0).contains(g) || g.is_nan() {
            return Err(OracleError::BadProbability {
                what: "grid value".into(),
                value: *g,
            });
        }
    }
    let mut rows = Vec::with_capacity(8);
    for z in FeatureSubset::power_set() {
        let eval = SubsetEvaluator::new(train, z)?;
        let mut best = f64::NEG_INFINITY;
        let mut best_priors = AdversarialPriors {
            pi1: grid[0],
            pi2: [grid[0]; 4],
            pi3: [grid[0]; 4],
        };
        // Odometer over the 9 grid axes; exhaustive by design.
        let g = grid.len();
        let mut idx = [0usize; 9];
        loop {
            let priors = AdversarialPriors {
                pi1: grid[idx[0]],
                pi2: [grid[idx[1]], grid[idx[2]], grid[idx[3]], grid[idx[4]]],
                pi3: [grid[idx[5]], grid[idx[6]], grid[idx[7]], grid[idx[8]]],
            };
            let loss = eval.loss(&priors);
            if loss > best {
                best = loss;
                best_priors = priors;
            }
            // Advance the odometer.
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < g {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == 9 {
                    break;
                }
            }
            if k == 9 {
                break;
            }
        }
        rows.push(SubsetMaxLoss {
            subset: z,
            max_loss: best,
            argmax: best_priors,
        });
    }

    let min = rows
        .iter()
        .map(|r| r.max_loss)
        .fold(f64::INFINITY, f64::min);
    let tol = TIE_RTOL * min.abs().max(1.0);
    let ties: Vec<FeatureSubset> = rows
        .iter()
        .filter(|r| r.max_loss - min <= tol)
        .map(|r| r.subset)
        .collect();
    // Rows are already in tie-break order (size, then lexicographic).
    let winner = ties[0];
    let conclusive = ties.len() == 1;
    Ok(Theorem1Report {
        grid: grid.to_vec(),
        rows,
        winner,
        ties,
        conclusive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{
        build_joint_uniform, conditional_entropy, BinaryGraphSpec,
    };

    #[test]
    fn matched_priors_reduce_to_conditional_entropy() {
        // Cross-entropy of a distribution with itself is its entropy.
        let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
        let matched = AdversarialPriors::matched(&joint).unwrap();
        for z in FeatureSubset::power_set() {
            let loss = adversarial_test_loss(&joint, &matched, z).unwrap();
            let h = conditional_entropy(&joint, z, false);
            assert!(
                (loss - h).abs() < 1e-9,
                "{z}: loss {loss} vs entropy {h}"
            );
        }
    }

    #[test]
    fn uninformative_adversary_on_cause_gives_its_entropy() {
        // With the consequence and correlate rendered independent of
        // everything, the loss of the cause subset is the expected
        // label entropy under the adversary's cause prior.
        let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
        for pi1 in [0.1, 0.35, 0.8] {
            let priors = AdversarialPriors {
                pi1,
                pi2: [0.5; 4],
                pi3: [0.5; 4],
            };
            let loss = adversarial_test_loss(&joint, &priors, FeatureSubset::X1).unwrap();
            let expect = pi1 * crate::oracle::binary_entropy(0.9)
                + (1.0 - pi1) * crate::oracle::binary_entropy(0.1);
            assert!((loss - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn flipped_consequence_exceeds_matched_loss() {
        let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
        let matched = AdversarialPriors::matched(&joint).unwrap();
        let matched_loss =
            adversarial_test_loss(&joint, &matched, FeatureSubset::X2).unwrap();
        // Flip the consequence conditional: where training had 0.9 the
        // adversary supplies 0.1 and vice versa.
        let mut flipped = matched.clone();
        for a in 0..2 {
            for y in 0..2 {
                flipped.pi2[a * 2 + y] = 1.0 - matched.pi2[a * 2 + y];
            }
        }
        let flipped_loss =
            adversarial_test_loss(&joint, &flipped, FeatureSubset::X2).unwrap();
        assert!(
            flipped_loss > matched_loss + 0.5,
            "flipped {flipped_loss} vs matched {matched_loss}"
        );
    }

    #[test]
    fn rejects_out_of_range_priors() {
        let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
        let priors = AdversarialPriors {
            pi1: 1.2,
            pi2: [0.5; 4],
            pi3: [0.5; 4],
        };
        assert!(adversarial_test_loss(&joint, &priors, FeatureSubset::X1).is_err());
    }

    #[test]
    fn degenerate_single_point_grid_keeps_cause_among_minimizers() {
        let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
        let report = verify_theorem1(&joint, &[0.5]).unwrap();
        assert!(report.ties.contains(&FeatureSubset::X1), "{:?}", report.ties);
    }
}
