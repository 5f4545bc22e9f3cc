//! Exact inference over a small discrete causal graph.
//!
//! The graph has five variables: an environment `E` that shifts the
//! prior of a cause `X1`; a binary label `Y` drawn from `X1` through a
//! conditional that is shared across environments; a consequence `X2`
//! drawn from `Y`; and a correlate `X3` drawn from `(X1, X2)` with no
//! direct link to `Y`. Everything in this module works by enumerating
//! the joint mass table, so every probability, entropy, and mutual
//! information is exact up to floating point.
//!
//! Entropies are in nats throughout.

mod adversary;
mod spec_file;

pub use adversary::{
    adversarial_test_loss, verify_theorem1, AdversarialPriors, SubsetMaxLoss, Theorem1Report,
};
pub use spec_file::{read_spec_file, spec_from_toml, spec_to_toml, write_spec_file};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid probability for {what}: {value} is outside [0, 1]")]
    BadProbability { what: String, value: f64 },
    #[error("environment weights must sum to 1, got {sum}")]
    BadEnvWeights { sum: f64 },
    #[error("{what}")]
    BadSpec { what: String },
    #[error("conditional is undefined: the event {given} has zero mass")]
    UndefinedConditional { given: String },
    #[error("spec file error: {0}")]
    SpecFile(String),
    #[error("{what}")]
    BadGrid { what: String },
}

/// One of the five graph variables. For assignments, `Env` takes an
/// environment index and the others take 0 or 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variable {
    Env,
    X1,
    Y,
    X2,
    X3,
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variable::Env => "E",
            Variable::X1 => "X1",
            Variable::Y => "Y",
            Variable::X2 => "X2",
            Variable::X3 => "X3",
        };
        write!(f, "{s}")
    }
}

/// All conditional probability tables of the graph, per environment.
/// Only the prior of `X1` may vary with the environment; the label
/// conditional is shared, which is exactly the invariance assumption.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryGraphSpec {
    /// Environment identifiers, e.g. `["e1", "e2"]`.
    pub envs: Vec<String>,
    /// `P(X1 = 1 | E = e)`, one entry per environment.
    pub prior_x1: Vec<f64>,
    /// `P(Y = 1 | X1 = x)`, indexed by `x`.
    pub cond_y_given_x1: [f64; 2],
    /// `P(X2 = 1 | Y = y)`, indexed by `y`.
    pub cond_x2_given_y: [f64; 2],
    /// `P(X3 = 1 | X1 = a, X2 = b)`, indexed by `a * 2 + b`.
    pub cond_x3_given_x1x2: [f64; 4],
}

impl BinaryGraphSpec {
    /// The single-environment toy construction: a symmetric 0.9-chain
    /// in which the cause, the consequence, and the correlate are all
    /// equally predictive of the label.
    pub fn toy_single_env() -> Self {
        BinaryGraphSpec {
            envs: vec!["e1".to_string()],
            prior_x1: vec![0.5],
            cond_y_given_x1: [0.1, 0.9],
            cond_x2_given_y: [0.1, 0.9],
            cond_x3_given_x1x2: [0.0, 0.5, 0.5, 1.0],
        }
    }

    /// The two-environment construction: identical to
    /// [`toy_single_env`](Self::toy_single_env) except that the second
    /// environment shifts the prior of the cause to 0.6, which exposes
    /// the non-invariance of the other two features.
    pub fn toy_two_env() -> Self {
        BinaryGraphSpec {
            envs: vec!["e1".to_string(), "e2".to_string()],
            prior_x1: vec![0.5, 0.6],
            cond_y_given_x1: [0.1, 0.9],
            cond_x2_given_y: [0.1, 0.9],
            cond_x3_given_x1x2: [0.0, 0.5, 0.5, 1.0],
        }
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.envs.is_empty() {
            return Err(OracleError::BadSpec {
                what: "spec needs at least one environment".into(),
            });
        }
        if self.prior_x1.len() != self.envs.len() {
            return Err(OracleError::BadSpec {
                what: format!(
                    "{} priors for {} environments",
                    self.prior_x1.len(),
                    self.envs.len()
                ),
            });
        }
        let check = |what: String, value: f64| -> Result<(), OracleError> {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                Err(OracleError::BadProbability { what, value })
            } else {
                Ok(())
            }
        };
        for (e, p) in self.envs.iter().zip(&self.prior_x1) {
            check(format!("P(X1=1|E={e})"), *p)?;
        }
        for (x, p) in self.cond_y_given_x1.iter().enumerate() {
            check(format!("P(Y=1|X1={x})"), *p)?;
        }
        for (y, p) in self.cond_x2_given_y.iter().enumerate() {
            check(format!("P(X2=1|Y={y})"), *p)?;
        }
        for (i, p) in self.cond_x3_given_x1x2.iter().enumerate() {
            check(format!("P(X3=1|X1={},X2={})", i / 2, i % 2), *p)?;
        }
        Ok(())
    }
}

/// A subset of the three feature variables `{X1, X2, X3}`, stored as a
/// bitmask. The empty set is allowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureSubset(u8);

impl FeatureSubset {
    pub const EMPTY: FeatureSubset = FeatureSubset(0);
    pub const X1: FeatureSubset = FeatureSubset(1);
    pub const X2: FeatureSubset = FeatureSubset(2);
    pub const X3: FeatureSubset = FeatureSubset(4);
    pub const ALL: FeatureSubset = FeatureSubset(7);

    pub fn from_members(members: &[Variable]) -> Result<Self, OracleError> {
        let mut bits = 0u8;
        for m in members {
            bits |= match m {
                Variable::X1 => 1,
                Variable::X2 => 2,
                Variable::X3 => 4,
                other => {
                    return Err(OracleError::BadSpec {
                        what: format!("{other} is not a feature variable"),
                    })
                }
            };
        }
        Ok(FeatureSubset(bits))
    }

    pub fn contains(&self, v: Variable) -> bool {
        match v {
            Variable::X1 => self.0 & 1 != 0,
            Variable::X2 => self.0 & 2 != 0,
            Variable::X3 => self.0 & 4 != 0,
            _ => false,
        }
    }

    pub fn is_subset_of(&self, other: &FeatureSubset) -> bool {
        self.0 & other.0 == self.0
    }

    pub fn members(&self) -> Vec<Variable> {
        let mut out = Vec::new();
        if self.0 & 1 != 0 {
            out.push(Variable::X1);
        }
        if self.0 & 2 != 0 {
            out.push(Variable::X2);
        }
        if self.0 & 4 != 0 {
            out.push(Variable::X3);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// All eight subsets, ordered by size then lexicographically by
    /// member list; this is also the tie-breaking order of the minimax
    /// report.
    pub fn power_set() -> Vec<FeatureSubset> {
        let mut all: Vec<FeatureSubset> = (0u8..8).map(FeatureSubset).collect();
        all.sort_by_key(|s| (s.len(), s.0));
        all
    }

    /// Projects a full assignment `(x1, x2, x3)` onto this subset,
    /// packing member values (in `X1 < X2 < X3` order) into a cell index.
    pub fn cell_index(&self, x1: usize, x2: usize, x3: usize) -> usize {
        let mut idx = 0;
        if self.0 & 1 != 0 {
            idx = idx * 2 + x1;
        }
        if self.0 & 2 != 0 {
            idx = idx * 2 + x2;
        }
        if self.0 & 4 != 0 {
            idx = idx * 2 + x3;
        }
        idx
    }

    pub fn n_cells(&self) -> usize {
        1 << self.len()
    }
}

impl std::fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_empty() {
            return write!(f, "{{}}");
        }
        let names: Vec<String> = self.members().iter().map(|m| m.to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// The exact joint distribution over `(E, X1, Y, X2, X3)`, materialized
/// as a dense probability mass table.
#[derive(Clone, Debug)]
pub struct JointTable {
    n_envs: usize,
    env_weights: Vec<f64>,
    /// Mass indexed by `(((e * 2 + x1) * 2 + y) * 2 + x2) * 2 + x3`.
    mass: Vec<f64>,
}

/// Tolerance for the normalization invariant of a joint table.
pub const MASS_TOL: f64 = 1e-12;

impl JointTable {
    pub fn n_envs(&self) -> usize {
        self.n_envs
    }

    pub fn env_weights(&self) -> &[f64] {
        &self.env_weights
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    #[inline]
    fn idx(&self, e: usize, x1: usize, y: usize, x2: usize, x3: usize) -> usize {
        (((e * 2 + x1) * 2 + y) * 2 + x2) * 2 + x3
    }

    pub fn mass_of(&self, e: usize, x1: usize, y: usize, x2: usize, x3: usize) -> f64 {
        self.mass[self.idx(e, x1, y, x2, x3)]
    }

    /// Iterates `(e, x1, y, x2, x3, mass)` over all assignments.
    pub fn assignments(
        &self,
    ) -> impl Iterator<Item = (usize, usize, usize, usize, usize, f64)> + '_ {
        (0..self.mass.len()).map(move |i| {
            let x3 = i % 2;
            let x2 = (i / 2) % 2;
            let y = (i / 4) % 2;
            let x1 = (i / 8) % 2;
            let e = i / 16;
            (e, x1, y, x2, x3, self.mass[i])
        })
    }

    /// Total mass of all assignments matching `given`.
    pub fn event_mass(&self, given: &[(Variable, usize)]) -> f64 {
        self.assignments()
            .filter(|(e, x1, y, x2, x3, _)| matches(given, *e, *x1, *y, *x2, *x3))
            .map(|(_, _, _, _, _, m)| m)
            .sum()
    }
}

fn matches(
    given: &[(Variable, usize)],
    e: usize,
    x1: usize,
    y: usize,
    x2: usize,
    x3: usize,
) -> bool {
    given.iter().all(|(v, val)| match v {
        Variable::Env => e == *val,
        Variable::X1 => x1 == *val,
        Variable::Y => y == *val,
        Variable::X2 => x2 == *val,
        Variable::X3 => x3 == *val,
    })
}

/// Materializes the joint distribution of a spec under the given
/// environment weights: mass factors as
/// `w(e) * P(x1|e) * P(y|x1) * P(x2|y) * P(x3|x1,x2)`.
pub fn build_joint(spec: &BinaryGraphSpec, env_weights: &[f64]) -> Result<JointTable, OracleError> {
    spec.validate()?;
    if env_weights.len() != spec.n_envs() {
        return Err(OracleError::BadSpec {
            what: format!(
                "{} environment weights for {} environments",
                env_weights.len(),
                spec.n_envs()
            ),
        });
    }
    let sum: f64 = env_weights.iter().sum();
    if (sum - 1.0).abs() > MASS_TOL || env_weights.iter().any(|w| *w < 0.0) {
        return Err(OracleError::BadEnvWeights { sum });
    }
    let n = spec.n_envs();
    let mut mass = vec![0.0; n * 16];
    for e in 0..n {
        for x1 in 0..2usize {
            let p1 = bern(spec.prior_x1[e], x1);
            for y in 0..2usize {
                let py = bern(spec.cond_y_given_x1[x1], y);
                for x2 in 0..2usize {
                    let p2 = bern(spec.cond_x2_given_y[y], x2);
                    for x3 in 0..2usize {
                        let p3 = bern(spec.cond_x3_given_x1x2[x1 * 2 + x2], x3);
                        mass[(((e * 2 + x1) * 2 + y) * 2 + x2) * 2 + x3] =
                            env_weights[e] * p1 * py * p2 * p3;
                    }
                }
            }
        }
    }
    Ok(JointTable {
        n_envs: n,
        env_weights: env_weights.to_vec(),
        mass,
    })
}

/// Builds the joint with uniform environment weights.
pub fn build_joint_uniform(spec: &BinaryGraphSpec) -> Result<JointTable, OracleError> {
    let w = vec![1.0 / spec.n_envs() as f64; spec.n_envs()];
    build_joint(spec, &w)
}

#[inline]
fn bern(p_one: f64, value: usize) -> f64 {
    if value == 1 {
        p_one
    } else {
        1.0 - p_one
    }
}

/// Exact `P(target = 1 | given)` by summation over the joint. A zero-mass
/// conditioning event is an explicit error, never a silent 0/0.
pub fn conditional(
    joint: &JointTable,
    target: Variable,
    given: &[(Variable, usize)],
) -> Result<f64, OracleError> {
    let denom = joint.event_mass(given);
    if denom <= 0.0 {
        let desc = given
            .iter()
            .map(|(v, val)| format!("{v}={val}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(OracleError::UndefinedConditional {
            given: format!("({desc})"),
        });
    }
    let mut with_target = given.to_vec();
    with_target.push((target, 1));
    Ok(joint.event_mass(&with_target) / denom)
}

/// Entropy of a Bernoulli with success probability `p`, in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let q = 1.0 - p;
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if q > 0.0 {
        h -= q * q.ln();
    }
    h
}

/// Marginal label entropy `H(Y)` in nats.
pub fn label_entropy(joint: &JointTable) -> f64 {
    let p = joint.event_mass(&[(Variable::Y, 1)]);
    binary_entropy(p)
}

/// Exact `H(Y | Z)` (or `H(Y | Z, E)` when `condition_on_env` is set),
/// in nats. Zero-mass cells contribute nothing.
pub fn conditional_entropy(joint: &JointTable, z: FeatureSubset, condition_on_env: bool) -> f64 {
    let n_cells = z.n_cells();
    let n_groups = if condition_on_env { joint.n_envs() } else { 1 };
    let mut mass_y1 = vec![0.0; n_cells * n_groups];
    let mut mass_all = vec![0.0; n_cells * n_groups];
    for (e, x1, y, x2, x3, m) in joint.assignments() {
        let g = if condition_on_env { e } else { 0 };
        let cell = g * n_cells + z.cell_index(x1, x2, x3);
        mass_all[cell] += m;
        if y == 1 {
            mass_y1[cell] += m;
        }
    }
    let mut h = 0.0;
    for (m_all, m_y1) in mass_all.iter().zip(&mass_y1) {
        if *m_all > 0.0 {
            h += m_all * binary_entropy(m_y1 / m_all);
        }
    }
    h
}

/// Exact mutual information `I(Y; Z) = H(Y) - H(Y | Z)` in nats.
pub fn mutual_information(joint: &JointTable, z: FeatureSubset) -> f64 {
    // Clamp tiny negative round-off; MI is nonnegative.
    (label_entropy(joint) - conditional_entropy(joint, z, false)).max(0.0)
}

/// The invariance gap `H(Y|Z) - H(Y|Z,E)` in nats; zero exactly when
/// `Y` is independent of `E` given `Z`.
pub fn invariance_gap(joint: &JointTable, z: FeatureSubset) -> f64 {
    conditional_entropy(joint, z, false) - conditional_entropy(joint, z, true)
}

/// Whether `Y` is conditionally independent of the environment given
/// `Z`, up to `tol` nats.
pub fn is_invariant(joint: &JointTable, z: FeatureSubset, tol: f64) -> bool {
    debug_assert!(tol >= 0.0);
    invariance_gap(joint, z) <= tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_single_env_is_symmetric() {
        let joint = build_joint_uniform(&BinaryGraphSpec::toy_single_env()).unwrap();
        assert!((joint.total_mass() - 1.0).abs() < MASS_TOL);
        let py = joint.event_mass(&[(Variable::Y, 1)]);
        assert!((py - 0.5).abs() < MASS_TOL);
    }

    #[test]
    fn degenerate_spec_concentrates_all_mass() {
        let spec = BinaryGraphSpec {
            envs: vec!["only".into()],
            prior_x1: vec![1.0],
            cond_y_given_x1: [0.0, 1.0],
            cond_x2_given_y: [0.0, 1.0],
            cond_x3_given_x1x2: [0.0, 0.0, 0.0, 1.0],
        };
        let joint = build_joint(&spec, &[1.0]).unwrap();
        assert_eq!(joint.mass_of(0, 1, 1, 1, 1), 1.0);
        let elsewhere: f64 = joint
            .assignments()
            .filter(|(_, x1, y, x2, x3, _)| !(*x1 == 1 && *y == 1 && *x2 == 1 && *x3 == 1))
            .map(|(_, _, _, _, _, m)| m)
            .sum();
        assert_eq!(elsewhere, 0.0);
    }

    #[test]
    fn shifted_env_label_marginal() {
        // P(Y=1) under the shifted environment: 0.6 * 0.9 + 0.4 * 0.1.
        let spec = BinaryGraphSpec::toy_two_env();
        let joint = build_joint_uniform(&spec).unwrap();
        let py_e2 = conditional(&joint, Variable::Y, &[(Variable::Env, 1)]).unwrap();
        assert!((py_e2 - 0.58).abs() < MASS_TOL);
    }

    #[test]
    fn rejects_invalid_probability() {
        let mut spec = BinaryGraphSpec::toy_single_env();
        spec.cond_x2_given_y[0] = 1.5;
        assert!(matches!(
            build_joint(&spec, &[1.0]),
            Err(OracleError::BadProbability { .. })
        ));
    }

    #[test]
    fn rejects_bad_env_weights() {
        let spec = BinaryGraphSpec::toy_two_env();
        assert!(matches!(
            build_joint(&spec, &[0.7, 0.7]),
            Err(OracleError::BadEnvWeights { .. })
        ));
    }

    #[test]
    fn zero_mass_conditioning_is_an_error() {
        let spec = BinaryGraphSpec {
            envs: vec!["only".into()],
            prior_x1: vec![1.0],
            cond_y_given_x1: [0.1, 0.9],
            cond_x2_given_y: [0.1, 0.9],
            cond_x3_given_x1x2: [0.0, 0.5, 0.5, 1.0],
        };
        let joint = build_joint(&spec, &[1.0]).unwrap();
        let err = conditional(&joint, Variable::Y, &[(Variable::X1, 0)]).unwrap_err();
        assert!(matches!(err, OracleError::UndefinedConditional { .. }));
    }

    #[test]
    fn empty_subset_gives_zero_mi_and_label_entropy() {
        let joint = build_joint_uniform(&BinaryGraphSpec::toy_two_env()).unwrap();
        assert!(mutual_information(&joint, FeatureSubset::EMPTY).abs() < MASS_TOL);
        let h = conditional_entropy(&joint, FeatureSubset::EMPTY, false);
        assert!((h - label_entropy(&joint)).abs() < MASS_TOL);
    }

    #[test]
    fn mi_of_cause_matches_closed_form() {
        // I(Y; X1) = H(0.5) - H(0.9) for the symmetric single-env chain.
        let joint = build_joint_uniform(&BinaryGraphSpec::toy_single_env()).unwrap();
        let mi = mutual_information(&joint, FeatureSubset::X1);
        let expect = binary_entropy(0.5) - binary_entropy(0.9);
        assert!((mi - expect).abs() < 1e-12, "mi={mi}, expect={expect}");
        assert!((expect - 0.368064).abs() < 5e-7);
    }

    #[test]
    fn subset_display_and_order() {
        let all = FeatureSubset::power_set();
        let shown: Vec<String> = all.iter().map(|s| s.to_string()).collect();
        assert_eq!(
            shown,
            vec![
                "{}",
                "{X1}",
                "{X2}",
                "{X3}",
                "{X1,X2}",
                "{X1,X3}",
                "{X2,X3}",
                "{X1,X2,X3}"
            ]
        );
    }
}
