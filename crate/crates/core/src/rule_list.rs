//! Ordered decision lists of rules with an implicit trailing default rule.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMatrix, Dataset};
use crate::error::{Error, Result};
use crate::mining::{clause_from_names, Rule, RulePool};

/// Default cap on the number of explicit rules.
pub const DEFAULT_MAX_RULES: usize = 12;

/// A decision list. Only the explicit rules are stored; the default rule is
/// always the last subgroup, so `len() == rules().len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct RuleList {
    rules: Vec<Rule>,
}

impl RuleList {
    pub fn new(rules: Vec<Rule>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rules {
            if r.is_default() {
                return Err(Error::Parameter(
                    "the default rule is implicit and cannot appear explicitly".into(),
                ));
            }
            if !seen.insert(r.clause().to_vec()) {
                return Err(Error::Parameter(format!("duplicate rule `{}`", r.label)));
            }
        }
        Ok(Self { rules })
    }

    /// The default-only list (one subgroup).
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Number of subgroups L, including the default.
    pub fn len(&self) -> usize {
        self.rules.len() + 1
    }

    /// Never true: the default subgroup always exists.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, rule: &Rule) -> bool {
        self.rules.iter().any(|r| r == rule)
    }

    /// Clause sequence, the list's identity.
    pub fn key(&self) -> Vec<Vec<usize>> {
        self.rules.iter().map(|r| r.clause().to_vec()).collect()
    }

    /// 0-based subgroup of a row: the first firing rule, else the default.
    pub fn assign(&self, row: &[u8]) -> Result<usize> {
        for (l, r) in self.rules.iter().enumerate() {
            if r.eval(row)? {
                return Ok(l);
            }
        }
        Ok(self.rules.len())
    }

    pub(crate) fn assign_unchecked(&self, row: &[u8]) -> usize {
        self.rules
            .iter()
            .position(|r| r.fires(row))
            .unwrap_or(self.rules.len())
    }

    pub(crate) fn check_width(&self, width: usize) -> Result<()> {
        for r in &self.rules {
            if let Some(&bad) = r.clause().iter().find(|&&i| i >= width) {
                return Err(Error::Dimension(format!(
                    "rule `{}` uses feature {bad} but rows have width {width}",
                    r.label
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self, names: &[String]) -> serde_json::Value {
        let clauses: Vec<Vec<&str>> = self
            .rules
            .iter()
            .map(|r| r.clause().iter().map(|&i| names[i].as_str()).collect())
            .collect();
        serde_json::json!(clauses)
    }

    pub fn from_json(value: &serde_json::Value, names: &[String]) -> Result<Self> {
        let clauses: Vec<Vec<String>> = serde_json::from_value(value.clone())?;
        let rules = clauses
            .iter()
            .map(|c| clause_from_names(c, names))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rules)
    }

    /// Human readable `IF ... ELSE IF ... ELSE` rendering.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.rules.iter().enumerate() {
            s.push_str(if i == 0 { "IF " } else { "ELSE IF " });
            s.push_str(&r.label);
            s.push('\n');
        }
        s.push_str("ELSE (default)");
        s
    }
}

/// 1-based subgroup index in `{1..L}` of row `x`.
pub fn assign_subgroup(list: &RuleList, x: &[u8]) -> Result<usize> {
    list.assign(x).map(|z| z + 1)
}

/// Per-row 0-based subgroup indices and per-subgroup counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub subgroup: Vec<usize>,
    pub counts: Vec<usize>,
}

pub fn assign_matrix(list: &RuleList, m: &BinaryMatrix) -> Result<Assignment> {
    list.check_width(m.n_cols())?;
    let mut counts = vec![0; list.len()];
    let subgroup = m
        .rows()
        .map(|r| {
            let z = list.assign_unchecked(r);
            counts[z] += 1;
            z
        })
        .collect();
    Ok(Assignment { subgroup, counts })
}

pub fn assign_all(list: &RuleList, data: &Dataset) -> Result<Assignment> {
    assign_matrix(list, &data.rule_features)
}

/// Levenshtein distance over the explicit rule sequences with unit costs,
/// comparing rules by clause.
pub fn edit_distance(a: &RuleList, b: &RuleList) -> usize {
    let (a, b) = (a.rules(), b.rules());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MoveKind {
    Swap,
    Replace,
    Insert,
    Delete,
}

impl MoveKind {
    pub const ALL: [MoveKind; 4] = [
        MoveKind::Swap,
        MoveKind::Replace,
        MoveKind::Insert,
        MoveKind::Delete,
    ];
}

/// Move types available from `list`.
pub fn feasible_moves(list: &RuleList, pool: &RulePool, max_rules: usize) -> Vec<MoveKind> {
    let k = list.rules.len();
    let has_outside = pool.rules.iter().any(|r| !list.contains(r));
    MoveKind::ALL
        .into_iter()
        .filter(|m| match m {
            MoveKind::Swap => k >= 2,
            MoveKind::Replace => k >= 1 && has_outside,
            MoveKind::Insert => k < max_rules && has_outside,
            MoveKind::Delete => k >= 1,
        })
        .collect()
}

/// Draw one neighbour of `list`: a feasible move type uniformly, then that
/// move's random choices uniformly. Returns the list unchanged (and `None`)
/// when no move is feasible.
pub fn propose_move<R: Rng + ?Sized>(
    list: &RuleList,
    pool: &RulePool,
    max_rules: usize,
    rng: &mut R,
) -> (RuleList, Option<MoveKind>) {
    let moves = feasible_moves(list, pool, max_rules);
    let Some(&kind) = moves.choose(rng) else {
        return (list.clone(), None);
    };
    let mut rules = list.rules.clone();
    let k = rules.len();
    let outside = || -> Vec<&Rule> { pool.rules.iter().filter(|r| !list.contains(r)).collect() };
    match kind {
        MoveKind::Swap => {
            let i = rng.random_range(0..k);
            let mut j = rng.random_range(0..k - 1);
            if j >= i {
                j += 1;
            }
            rules.swap(i, j);
        }
        MoveKind::Replace => {
            let i = rng.random_range(0..k);
            let candidates = outside();
            rules[i] = (*candidates.choose(rng).expect("feasible")).clone();
        }
        MoveKind::Insert => {
            let pos = rng.random_range(0..=k);
            let candidates = outside();
            rules.insert(pos, (*candidates.choose(rng).expect("feasible")).clone());
        }
        MoveKind::Delete => {
            let i = rng.random_range(0..k);
            rules.remove(i);
        }
    }
    (RuleList { rules }, Some(kind))
}

/// A uniformly random list of `len` distinct pool rules.
pub fn random_list<R: Rng + ?Sized>(pool: &RulePool, len: usize, rng: &mut R) -> Result<RuleList> {
    if len > pool.len() {
        return Err(Error::Config(format!(
            "cannot draw {len} distinct rules from a pool of {}",
            pool.len()
        )));
    }
    let picked = rand::seq::index::sample(rng, pool.len(), len);
    Ok(RuleList {
        rules: picked.iter().map(|i| pool.rules[i].clone()).collect(),
    })
}
