//! Candidate rule pool: frequent conjunctions of binary features mined with
//! an FP-tree, bounded in clause count.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::data::BinaryMatrix;
use crate::error::{Error, Result};

/// A conjunction of binary features. The empty clause is the default rule,
/// which fires on every row. Identity (equality, hashing) is the clause.
#[derive(Debug, Clone)]
pub struct Rule {
    clause: Vec<usize>,
    pub label: String,
    pub support: f64,
}

impl PartialEq for Rule {
    fn eq(&self, other: &Self) -> bool {
        self.clause == other.clause
    }
}

impl Eq for Rule {}

impl Hash for Rule {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.clause.hash(state);
    }
}

impl Rule {
    /// Build a rule from feature indices; duplicates are removed and the
    /// clause sorted.
    pub fn new(mut clause: Vec<usize>, names: &[String]) -> Self {
        clause.sort_unstable();
        clause.dedup();
        let label = clause
            .iter()
            .map(|&i| names.get(i).cloned().unwrap_or_else(|| format!("f{i}")))
            .collect::<Vec<_>>()
            .join(" AND ");
        Self {
            clause,
            label,
            support: f64::NAN,
        }
    }

    pub fn with_support(mut self, support: f64) -> Self {
        self.support = support;
        self
    }

    /// The always-true default rule.
    pub fn default_rule() -> Self {
        Self {
            clause: Vec::new(),
            label: "DEFAULT".into(),
            support: 1.0,
        }
    }

    pub fn clause(&self) -> &[usize] {
        &self.clause
    }

    pub fn is_default(&self) -> bool {
        self.clause.is_empty()
    }

    /// True iff every clause feature is 1 in `row`.
    pub fn eval(&self, row: &[u8]) -> Result<bool> {
        if let Some(&bad) = self.clause.iter().find(|&&i| i >= row.len()) {
            return Err(Error::Dimension(format!(
                "rule feature {bad} out of range for row of width {}",
                row.len()
            )));
        }
        Ok(self.fires(row))
    }

    /// Unchecked evaluation; callers guarantee the row is wide enough.
    #[inline]
    pub(crate) fn fires(&self, row: &[u8]) -> bool {
        self.clause.iter().all(|&i| row[i] == 1)
    }

    /// Empirical fraction of rows where the rule fires.
    pub fn empirical_support(&self, m: &BinaryMatrix) -> f64 {
        if m.n_rows() == 0 {
            return 0.0;
        }
        m.rows().filter(|r| self.fires(r)).count() as f64 / m.n_rows() as f64
    }
}

pub fn rule_eval(rule: &Rule, row: &[u8]) -> Result<bool> {
    rule.eval(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    pub min_support: f64,
    pub max_clauses: usize,
}

impl MiningParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_support > 0.0 && self.min_support <= 1.0) {
            return Err(Error::Config(format!(
                "min_support must lie in (0, 1], got {}",
                self.min_support
            )));
        }
        if self.max_clauses == 0 {
            return Err(Error::Config("max_clauses must be >= 1".into()));
        }
        Ok(())
    }
}

/// The candidate set of rules; the default rule is never a member.
#[derive(Debug, Clone, PartialEq)]
pub struct RulePool {
    pub rules: Vec<Rule>,
    pub params: MiningParams,
}

impl RulePool {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// One single-feature rule per column, as used when the binary columns
    /// are themselves the candidate rules.
    pub fn singletons(m: &BinaryMatrix) -> Self {
        let mut rules: Vec<Rule> = (0..m.n_cols())
            .map(|j| {
                let r = Rule::new(vec![j], m.names());
                let s = r.empirical_support(m);
                r.with_support(s)
            })
            .collect();
        rules.sort_by(pool_order);
        Self {
            rules,
            params: MiningParams {
                min_support: f64::MIN_POSITIVE,
                max_clauses: 1,
            },
        }
    }

    pub fn to_json(&self, names: &[String]) -> serde_json::Value {
        let rules: Vec<RuleJson> = self
            .rules
            .iter()
            .map(|r| RuleJson {
                clause: r.clause.iter().map(|&i| names[i].clone()).collect(),
                support: r.support,
            })
            .collect();
        serde_json::json!({
            "min_support": self.params.min_support,
            "max_clauses": self.params.max_clauses,
            "rules": rules,
        })
    }

    pub fn from_json(value: &serde_json::Value, names: &[String]) -> Result<Self> {
        #[derive(Deserialize)]
        struct PoolJson {
            min_support: f64,
            max_clauses: usize,
            rules: Vec<RuleJson>,
        }
        let p: PoolJson = serde_json::from_value(value.clone())?;
        let rules = p
            .rules
            .into_iter()
            .map(|r| Ok(clause_from_names(&r.clause, names)?.with_support(r.support)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rules,
            params: MiningParams {
                min_support: p.min_support,
                max_clauses: p.max_clauses,
            },
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleJson {
    clause: Vec<String>,
    support: f64,
}

/// Resolve feature names to a rule over `names`.
pub fn clause_from_names(clause: &[String], names: &[String]) -> Result<Rule> {
    let idx = clause
        .iter()
        .map(|c| {
            names
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| Error::Schema(format!("unknown feature `{c}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rule::new(idx, names))
}

fn pool_order(a: &Rule, b: &Rule) -> std::cmp::Ordering {
    b.support
        .total_cmp(&a.support)
        .then_with(|| a.clause.cmp(&b.clause))
}

/// Smallest count meeting `count / n >= min_support`.
pub(crate) fn min_count(n: usize, min_support: f64) -> usize {
    let mut c = ((min_support * n as f64).ceil() as usize).max(1);
    while c > 1 && (c - 1) as f64 / n as f64 >= min_support {
        c -= 1;
    }
    while (c as f64 / n as f64) < min_support {
        c += 1;
    }
    c
}

const ROOT: usize = 0;

struct FpNode {
    item: usize,
    count: usize,
    parent: usize,
    children: Vec<usize>,
}

struct FpTree {
    nodes: Vec<FpNode>,
    /// item -> nodes carrying it
    header: HashMap<usize, Vec<usize>>,
    /// items in the tree's insertion order (descending frequency)
    order: Vec<usize>,
}

impl FpTree {
    /// Build from weighted transactions, keeping only items with total
    /// count >= `min_count`.
    fn build(transactions: &[(Vec<usize>, usize)], min_count: usize) -> Self {
        let mut freq: HashMap<usize, usize> = HashMap::new();
        for (items, w) in transactions {
            for &i in items {
                *freq.entry(i).or_default() += w;
            }
        }
        let mut order: Vec<usize> = freq
            .iter()
            .filter(|&(_, &c)| c >= min_count)
            .map(|(&i, _)| i)
            .collect();
        order.sort_by(|a, b| freq[b].cmp(&freq[a]).then(a.cmp(b)));
        let rank: HashMap<usize, usize> = order.iter().enumerate().map(|(r, &i)| (i, r)).collect();

        let mut tree = FpTree {
            nodes: vec![FpNode {
                item: usize::MAX,
                count: 0,
                parent: ROOT,
                children: Vec::new(),
            }],
            header: HashMap::new(),
            order,
        };
        let mut path = Vec::new();
        for (items, w) in transactions {
            path.clear();
            path.extend(items.iter().copied().filter(|i| rank.contains_key(i)));
            path.sort_by_key(|i| rank[i]);
            tree.insert(&path, *w);
        }
        tree
    }

    fn insert(&mut self, path: &[usize], weight: usize) {
        let mut cur = ROOT;
        for &item in path {
            let next = self.nodes[cur]
                .children
                .iter()
                .copied()
                .find(|&c| self.nodes[c].item == item);
            cur = match next {
                Some(c) => {
                    self.nodes[c].count += weight;
                    c
                }
                None => {
                    let id = self.nodes.len();
                    self.nodes.push(FpNode {
                        item,
                        count: weight,
                        parent: cur,
                        children: Vec::new(),
                    });
                    self.nodes[cur].children.push(id);
                    self.header.entry(item).or_default().push(id);
                    id
                }
            };
        }
    }

    /// Prefix paths leading to each occurrence of `item`, weighted by that
    /// occurrence's count.
    fn conditional_base(&self, item: usize) -> Vec<(Vec<usize>, usize)> {
        self.header[&item]
            .iter()
            .map(|&node| {
                let mut prefix = Vec::new();
                let mut p = self.nodes[node].parent;
                while p != ROOT {
                    prefix.push(self.nodes[p].item);
                    p = self.nodes[p].parent;
                }
                (prefix, self.nodes[node].count)
            })
            .filter(|(prefix, _)| !prefix.is_empty())
            .collect()
    }

    fn mine(
        &self,
        suffix: &mut Vec<usize>,
        min_count: usize,
        max_len: usize,
        out: &mut Vec<(Vec<usize>, usize)>,
    ) {
        // least frequent first, as in the classic recursion
        for &item in self.order.iter().rev() {
            let count: usize = self.header[&item].iter().map(|&n| self.nodes[n].count).sum();
            if count < min_count {
                continue;
            }
            suffix.push(item);
            out.push((suffix.clone(), count));
            if suffix.len() < max_len {
                let base = self.conditional_base(item);
                if !base.is_empty() {
                    let sub = FpTree::build(&base, min_count);
                    if !sub.order.is_empty() {
                        sub.mine(suffix, min_count, max_len, out);
                    }
                }
            }
            suffix.pop();
        }
    }
}

/// All conjunctions of at most `max_clauses` features whose empirical
/// support is at least `min_support`, ordered by support (descending) then
/// clause.
pub fn mine_rules(binary: &BinaryMatrix, min_support: f64, max_clauses: usize) -> Result<RulePool> {
    let params = MiningParams {
        min_support,
        max_clauses,
    };
    params.validate()?;
    let n = binary.n_rows();
    if n == 0 || binary.n_cols() == 0 {
        return Err(Error::EmptyInput("cannot mine rules from an empty matrix".into()));
    }
    let min_count = min_count(n, min_support);
    let transactions: Vec<(Vec<usize>, usize)> = binary
        .rows()
        .map(|r| {
            let items = r
                .iter()
                .enumerate()
                .filter(|&(_, &v)| v == 1)
                .map(|(j, _)| j)
                .collect();
            (items, 1)
        })
        .collect();
    let tree = FpTree::build(&transactions, min_count);
    let mut found = Vec::new();
    tree.mine(&mut Vec::new(), min_count, max_clauses, &mut found);
    let mut rules: Vec<Rule> = found
        .into_iter()
        .map(|(items, count)| Rule::new(items, binary.names()).with_support(count as f64 / n as f64))
        .collect();
    rules.sort_by(pool_order);
    Ok(RulePool { rules, params })
}
