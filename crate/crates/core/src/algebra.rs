//! Which latent blocks are identifiable from a view system: base content blocks,
//! closed under intersection, complement and union.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::latent_model::{content_of, LatentSpec, ViewIndexSets, INDEPENDENCE_TOL};

pub const MAX_LATENTS: usize = 16;

/// Answers "are the latent blocks `a` and `b` independent?". Empty blocks are
/// independent of everything.
pub trait IndependenceOracle {
    fn independent(&self, a: &IndexSet, b: &IndexSet) -> bool;
}

/// Gaussian latents: independent iff the cross-covariance block vanishes.
impl IndependenceOracle for LatentSpec {
    fn independent(&self, a: &IndexSet, b: &IndexSet) -> bool {
        if a.is_empty() || b.is_empty() {
            return true;
        }
        self.sub_covariance(a, b)
            .iter()
            .all(|v| v.abs() <= INDEPENDENCE_TOL)
    }
}

/// Treats every pair of blocks as independent.
#[derive(Clone, Copy, Debug, Default)]
pub struct MutuallyIndependent;

impl IndependenceOracle for MutuallyIndependent {
    fn independent(&self, _: &IndexSet, _: &IndexSet) -> bool {
        true
    }
}

impl<F: Fn(&IndexSet, &IndexSet) -> bool> IndependenceOracle for F {
    fn independent(&self, a: &IndexSet, b: &IndexSet) -> bool {
        self(a, b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Derivation {
    /// Content of a view subset.
    Base { views: IndexSet },
    /// Supplied by the caller.
    Given,
    Intersection { left: IndexSet, right: IndexSet },
    Complement { left: IndexSet, right: IndexSet },
    Union { left: IndexSet, right: IndexSet },
}

impl Derivation {
    fn operands(&self) -> Option<(&IndexSet, &IndexSet)> {
        match self {
            Derivation::Intersection { left, right }
            | Derivation::Complement { left, right }
            | Derivation::Union { left, right } => Some((left, right)),
            _ => None,
        }
    }

    fn label(&self) -> String {
        match self {
            Derivation::Base { views } => format!("content of views {views}"),
            Derivation::Given => "given".into(),
            Derivation::Intersection { left, right } => format!("{left} ∩ {right}"),
            Derivation::Complement { left, right } => format!("{left} ∖ {right}"),
            Derivation::Union { left, right } => format!("{left} ∪ {right}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub set: IndexSet,
    pub derivation: Derivation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Intersection,
    Complement,
    Union,
}

pub const DEFAULT_RULE_ORDER: [Rule; 3] = [Rule::Intersection, Rule::Complement, Rule::Union];

/// A deduplicated family of nonempty latent blocks, each with the first
/// derivation that produced it. Blocks are kept in insertion order, so every
/// operand precedes the blocks derived from it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "BlockSetRaw")]
pub struct IdentifiableBlockSet {
    n_latents: usize,
    blocks: Vec<Block>,
    #[serde(skip)]
    index: HashMap<u64, usize>,
}

#[derive(Deserialize)]
struct BlockSetRaw {
    n_latents: usize,
    blocks: Vec<Block>,
}

impl From<BlockSetRaw> for IdentifiableBlockSet {
    fn from(r: BlockSetRaw) -> Self {
        let mut out = IdentifiableBlockSet {
            n_latents: r.n_latents,
            blocks: r.blocks,
            index: HashMap::new(),
        };
        out.rebuild_index();
        out
    }
}

impl PartialEq for IdentifiableBlockSet {
    /// Families compare as sets of blocks; provenance is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.n_latents == other.n_latents && self.sorted_sets() == other.sorted_sets()
    }
}

impl IdentifiableBlockSet {
    pub fn new(n_latents: usize) -> Result<Self> {
        if n_latents > MAX_LATENTS {
            return Err(Error::TooManyLatents(n_latents));
        }
        Ok(IdentifiableBlockSet {
            n_latents,
            blocks: Vec::new(),
            index: HashMap::new(),
        })
    }

    /// A family seeded with caller-supplied blocks, tagged [`Derivation::Given`].
    pub fn from_sets(n_latents: usize, sets: impl IntoIterator<Item = IndexSet>) -> Result<Self> {
        let mut out = Self::new(n_latents)?;
        for s in sets {
            if IndexSet::max(&s).unwrap_or(0) > n_latents {
                return Err(Error::InvalidIndexSet(format!("block {s} exceeds N = {n_latents}")));
            }
            out.insert(s, Derivation::Given);
        }
        Ok(out)
    }

    pub fn n_latents(&self) -> usize {
        self.n_latents
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn contains(&self, set: &IndexSet) -> bool {
        self.index.contains_key(&set.to_mask())
    }

    pub fn get(&self, set: &IndexSet) -> Option<&Block> {
        self.index.get(&set.to_mask()).map(|&i| &self.blocks[i])
    }

    /// Blocks ordered by size, then lexicographically.
    pub fn sorted_sets(&self) -> Vec<IndexSet> {
        let mut sets: Vec<IndexSet> = self.blocks.iter().map(|b| b.set.clone()).collect();
        sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        sets
    }

    /// Latents `j` for which `{j}` is in the family.
    pub fn isolated_latents(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .blocks
            .iter()
            .filter(|b| b.set.len() == 1)
            .map(|b| b.set.as_slice()[0])
            .collect();
        out.sort_unstable();
        out
    }

    /// Adds a nonempty block if new; returns whether the family grew.
    fn insert(&mut self, set: IndexSet, derivation: Derivation) -> bool {
        if set.is_empty() {
            return false;
        }
        let mask = set.to_mask();
        if self.index.contains_key(&mask) {
            return false;
        }
        self.index.insert(mask, self.blocks.len());
        self.blocks.push(Block { set, derivation });
        true
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.set.to_mask(), i))
            .collect();
    }

    /// Re-checks every derivation step: operands appear earlier in the family,
    /// the set equals the operation's result, base blocks match the view
    /// content, and independence preconditions hold under `oracle`.
    pub fn verify(&self, views: Option<&ViewIndexSets>, oracle: &dyn IndependenceOracle) -> Result<()> {
        let fail = |b: &Block, why: &str| {
            Err(Error::InvalidIndexSet(format!(
                "block {} ({}): {why}",
                b.set,
                b.derivation.label()
            )))
        };
        for (i, b) in self.blocks.iter().enumerate() {
            if b.set.is_empty() {
                return fail(b, "empty block");
            }
            if let Some((l, r)) = b.derivation.operands() {
                let earlier = |s: &IndexSet| self.index.get(&s.to_mask()).is_some_and(|&j| j < i);
                if !earlier(l) || !earlier(r) {
                    return fail(b, "operand missing or not derived earlier");
                }
            }
            let ok = match &b.derivation {
                Derivation::Given => true,
                Derivation::Base { views: subset } => match views {
                    Some(v) => content_of(subset, v)?.indices == b.set,
                    None => true,
                },
                Derivation::Intersection { left, right } => left.intersection(right) == b.set,
                Derivation::Complement { left, right } => {
                    left.difference(right) == b.set && complement_allowed(left, right, oracle)
                }
                Derivation::Union { left, right } => {
                    left.union(right) == b.set && union_allowed(left, right, oracle)
                }
            };
            if !ok {
                return fail(b, "derivation does not replay");
            }
        }
        Ok(())
    }

    /// The derivation tree of `set`, one step per line, indented by depth.
    pub fn explain(&self, set: &IndexSet) -> Option<String> {
        self.get(set)?;
        let mut out = String::new();
        self.explain_into(set, 0, &mut out);
        Some(out)
    }

    fn explain_into(&self, set: &IndexSet, depth: usize, out: &mut String) {
        let Some(b) = self.get(set) else { return };
        let _ = writeln!(out, "{}{} <- {}", "  ".repeat(depth), b.set, b.derivation.label());
        if let Some((l, r)) = b.derivation.operands() {
            self.explain_into(l, depth + 1, out);
            self.explain_into(r, depth + 1, out);
        }
    }

    /// Sorted blocks with their immediate derivation, one per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in self.sorted_sets() {
            let b = self.get(&s).expect("listed block");
            let _ = writeln!(out, "{}\t{}", b.set, b.derivation.label());
        }
        let isolated = self.isolated_latents();
        let _ = writeln!(
            out,
            "isolated latents: {}",
            if isolated.is_empty() {
                "none".to_string()
            } else {
                isolated.iter().map(|j| format!("z{j}")).collect::<Vec<_>>().join(", ")
            }
        );
        out
    }

    /// Graphviz rendering of the derivation DAG.
    pub fn to_dot(&self) -> String {
        let id = |s: &IndexSet| format!("b{}", s.to_mask());
        let mut out = String::from("digraph blocks {\n  rankdir=LR;\n");
        for b in &self.blocks {
            let shape = match b.derivation {
                Derivation::Base { .. } | Derivation::Given => "box",
                _ => "ellipse",
            };
            let _ = writeln!(out, "  {} [label=\"{}\", shape={shape}];", id(&b.set), b.set);
        }
        for b in &self.blocks {
            let (op, l, r) = match &b.derivation {
                Derivation::Intersection { left, right } => ("∩", left, right),
                Derivation::Complement { left, right } => ("∖", left, right),
                Derivation::Union { left, right } => ("∪", left, right),
                _ => continue,
            };
            let _ = writeln!(out, "  {} -> {} [label=\"{op}\"];", id(l), id(&b.set));
            let _ = writeln!(out, "  {} -> {} [label=\"{op}\", style=dashed];", id(r), id(&b.set));
        }
        out.push_str("}\n");
        out
    }
}

fn complement_allowed(c1: &IndexSet, c2: &IndexSet, oracle: &dyn IndependenceOracle) -> bool {
    oracle.independent(&c1.intersection(c2), &c1.difference(c2))
}

fn union_allowed(c1: &IndexSet, c2: &IndexSet, oracle: &dyn IndependenceOracle) -> bool {
    let shared = c1.intersection(c2);
    let only1 = c1.difference(c2);
    let only2 = c2.difference(c1);
    oracle.independent(&shared, &only1)
        && oracle.independent(&shared, &only2)
        && oracle.independent(&only1, &only2)
}

/// Nonempty content `∩_{k∈V} S_k` of every view subset `V` with `|V| ≥ 2`.
pub fn base_blocks(views: &ViewIndexSets) -> Result<IdentifiableBlockSet> {
    if views.n_views() < 2 {
        return Err(Error::InvalidIndexSet(format!(
            "need at least two views, got {}",
            views.n_views()
        )));
    }
    let mut out = IdentifiableBlockSet::new(views.n_latents())?;
    for subset in views.all_subsets() {
        let c = content_of(&subset, views)?;
        out.insert(c.indices, Derivation::Base { views: subset });
    }
    Ok(out)
}

/// One pass over the current pairs; blocks added during the pass are not re-paired.
fn apply_rule(set: &mut IdentifiableBlockSet, rule: Rule, oracle: &dyn IndependenceOracle) -> bool {
    let snapshot: Vec<IndexSet> = set.blocks.iter().map(|b| b.set.clone()).collect();
    let mut grew = false;
    for (i, c1) in snapshot.iter().enumerate() {
        for (j, c2) in snapshot.iter().enumerate() {
            let (left, right) = (c1.clone(), c2.clone());
            grew |= match rule {
                Rule::Intersection if i < j => {
                    set.insert(c1.intersection(c2), Derivation::Intersection { left, right })
                }
                Rule::Complement if i != j && complement_allowed(c1, c2, oracle) => {
                    set.insert(c1.difference(c2), Derivation::Complement { left, right })
                }
                Rule::Union if i < j && union_allowed(c1, c2, oracle) => {
                    set.insert(c1.union(c2), Derivation::Union { left, right })
                }
                _ => false,
            };
        }
    }
    grew
}

pub fn close_intersection(set: &IdentifiableBlockSet) -> IdentifiableBlockSet {
    let mut out = set.clone();
    apply_rule(&mut out, Rule::Intersection, &MutuallyIndependent);
    out
}

pub fn close_complement(set: &IdentifiableBlockSet, oracle: &dyn IndependenceOracle) -> IdentifiableBlockSet {
    let mut out = set.clone();
    apply_rule(&mut out, Rule::Complement, oracle);
    out
}

pub fn close_union(set: &IdentifiableBlockSet, oracle: &dyn IndependenceOracle) -> IdentifiableBlockSet {
    let mut out = set.clone();
    apply_rule(&mut out, Rule::Union, oracle);
    out
}

/// Least fixpoint of `seed` under the three rules, applied in rounds in the given order.
pub fn close_with_order(
    seed: &IdentifiableBlockSet,
    oracle: &dyn IndependenceOracle,
    order: &[Rule],
) -> IdentifiableBlockSet {
    let mut out = seed.clone();
    out.rebuild_index();
    let bound = 1usize << out.n_latents;
    for _ in 0..bound {
        let mut grew = false;
        for &rule in order {
            grew |= apply_rule(&mut out, rule, oracle);
        }
        if !grew {
            break;
        }
    }
    out
}

pub fn close(seed: &IdentifiableBlockSet, oracle: &dyn IndependenceOracle) -> IdentifiableBlockSet {
    close_with_order(seed, oracle, &DEFAULT_RULE_ORDER)
}

/// Every block identifiable from `views` under `oracle`.
pub fn closure(views: &ViewIndexSets, oracle: &dyn IndependenceOracle) -> Result<IdentifiableBlockSet> {
    Ok(close(&base_blocks(views)?, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_model::LatentMode;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn set(v: &[usize]) -> IndexSet {
        IndexSet::new(v.iter().copied()).unwrap()
    }

    /// Second implementation: reachability over all `2^N` masks, with the
    /// independence relation precomputed as a mask-pair predicate.
    fn naive_fixpoint(n: usize, base: &[u64], indep: &dyn Fn(u64, u64) -> bool) -> Vec<u64> {
        let mut reach = vec![false; 1 << n];
        for &m in base {
            if m != 0 {
                reach[m as usize] = true;
            }
        }
        loop {
            let current: Vec<u64> = (1..(1u64 << n)).filter(|&m| reach[m as usize]).collect();
            let mut changed = false;
            let mut mark = |m: u64, reach: &mut Vec<bool>| {
                if m != 0 && !reach[m as usize] {
                    reach[m as usize] = true;
                    changed = true;
                }
            };
            for &a in &current {
                for &b in &current {
                    let (s, oa, ob) = (a & b, a & !b, b & !a);
                    mark(s, &mut reach);
                    if indep(s, oa) {
                        mark(oa, &mut reach);
                    }
                    if indep(s, oa) && indep(s, ob) && indep(oa, ob) {
                        mark(a | b, &mut reach);
                    }
                }
            }
            if !changed {
                return current;
            }
        }
    }

    fn masks(f: &IdentifiableBlockSet) -> Vec<u64> {
        let mut m: Vec<u64> = f.blocks().iter().map(|b| b.set.to_mask()).collect();
        m.sort_unstable();
        m
    }

    /// Oracle for a covariance given as a boolean "nonzero entry" adjacency over latents.
    fn adjacency_oracle(adj: Vec<Vec<bool>>) -> impl Fn(&IndexSet, &IndexSet) -> bool {
        move |a: &IndexSet, b: &IndexSet| {
            a.iter().all(|i| b.iter().all(|j| !adj[i - 1][j - 1]))
        }
    }

    #[test]
    fn base_blocks_of_running_example() {
        let views = ViewIndexSets::example_four_views();
        let base = base_blocks(&views).unwrap();
        assert!(base.contains(&set(&[1, 2, 3, 5])));
        assert!(base.contains(&set(&[1, 2])));
        assert_eq!(
            base.get(&set(&[1, 2, 3, 5])).unwrap().derivation,
            Derivation::Base { views: set(&[1, 2]) }
        );
        // 6 pair contents, 4 triple contents, 1 all-view content, all distinct
        assert_eq!(base.len(), 11);
    }

    #[test]
    fn identical_views_give_single_block() {
        let views = ViewIndexSets::from_lists(3, &[&[1, 2, 3], &[1, 2, 3], &[1, 2, 3]]).unwrap();
        assert_eq!(base_blocks(&views).unwrap().sorted_sets(), vec![set(&[1, 2, 3])]);
    }

    #[test]
    fn disjoint_views_give_empty_family() {
        let views = ViewIndexSets::from_lists(4, &[&[1, 2], &[3, 4]]).unwrap();
        assert!(base_blocks(&views).unwrap().is_empty());
    }

    #[test]
    fn single_view_rejected() {
        let views = ViewIndexSets::from_lists(2, &[&[1, 2]]).unwrap();
        assert!(base_blocks(&views).is_err());
    }

    #[test]
    fn too_many_latents_rejected() {
        assert!(matches!(
            IdentifiableBlockSet::new(17),
            Err(Error::TooManyLatents(17))
        ));
    }

    #[test]
    fn intersection_rule() {
        let f = IdentifiableBlockSet::from_sets(5, [set(&[1, 2, 3, 5]), set(&[1, 2, 3, 4])]).unwrap();
        let g = close_intersection(&f);
        assert!(g.contains(&set(&[1, 2, 3])));
        assert_eq!(close_intersection(&close_intersection(&g)), close_intersection(&g));

        let disjoint = IdentifiableBlockSet::from_sets(4, [set(&[1, 2]), set(&[3, 4])]).unwrap();
        assert_eq!(close_intersection(&disjoint), disjoint);
        let single = IdentifiableBlockSet::from_sets(4, [set(&[1, 2])]).unwrap();
        assert_eq!(close_intersection(&single), single);
    }

    #[test]
    fn complement_rule_follows_independence() {
        let f = IdentifiableBlockSet::from_sets(5, [set(&[1, 2, 3, 5]), set(&[1, 2, 3, 4])]).unwrap();
        let iid = LatentSpec::independent(5).unwrap();
        let g = close_complement(&f, &iid);
        assert!(g.contains(&set(&[5])));
        assert!(g.contains(&set(&[4])));

        let mut cov = Array2::<f64>::eye(5);
        cov[[0, 4]] = 0.5;
        cov[[4, 0]] = 0.5;
        let dep = LatentSpec::new(cov, LatentMode::Dependent).unwrap();
        let g = close_complement(&f, &dep);
        assert!(!g.contains(&set(&[5])));
        assert!(g.contains(&set(&[4])));

        let nested = IdentifiableBlockSet::from_sets(4, [set(&[1, 2]), set(&[1, 2, 3])]).unwrap();
        let g = close_complement(&nested, &MutuallyIndependent);
        assert_eq!(g.sorted_sets(), vec![set(&[3]), set(&[1, 2]), set(&[1, 2, 3])]);
    }

    #[test]
    fn union_rule_follows_independence() {
        let f = IdentifiableBlockSet::from_sets(4, [set(&[1, 2]), set(&[2, 3])]).unwrap();
        assert!(close_union(&f, &MutuallyIndependent).contains(&set(&[1, 2, 3])));
        let oracle = adjacency_oracle({
            let mut a = vec![vec![false; 4]; 4];
            a[0][2] = true;
            a[2][0] = true;
            a
        });
        assert!(!close_union(&f, &oracle).contains(&set(&[1, 2, 3])));
        let same = IdentifiableBlockSet::from_sets(4, [set(&[1, 2])]).unwrap();
        assert_eq!(close_union(&same, &MutuallyIndependent), same);
    }

    #[test]
    fn running_example_closure_under_identity() {
        let views = ViewIndexSets::example_four_views();
        let iid = LatentSpec::independent(6).unwrap();
        let c = closure(&views, &iid).unwrap();
        // Latents 1 and 2 appear in every view, so no rule can separate them.
        assert_eq!(c.isolated_latents(), vec![3, 4, 5, 6]);
        assert!(c.contains(&set(&[1, 2])));
        assert!(!c.contains(&set(&[1])));
        assert!(c.contains(&set(&[1, 2, 3, 4, 5, 6])));
        let base: Vec<u64> = masks(&base_blocks(&views).unwrap());
        assert_eq!(masks(&c), naive_fixpoint(6, &base, &|_, _| true));
        c.verify(Some(&views), &iid).unwrap();
    }

    #[test]
    fn identical_pair_closure() {
        let views = ViewIndexSets::from_lists(3, &[&[1, 2, 3], &[1, 2, 3]]).unwrap();
        let spec = LatentSpec::generate(3, LatentMode::Dependent, 1).unwrap();
        assert_eq!(closure(&views, &spec).unwrap().sorted_sets(), vec![set(&[1, 2, 3])]);
    }

    #[test]
    fn explain_and_dot_cover_derivations() {
        let views = ViewIndexSets::example_four_views();
        let c = closure(&views, &MutuallyIndependent).unwrap();
        let text = c.explain(&set(&[5])).unwrap();
        assert!(text.lines().count() >= 3, "{text}");
        assert!(text.starts_with("{5} <- "));
        let dot = c.to_dot();
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("label=\"{5}\""));
        assert!(c.render().contains("isolated latents: z3, z4, z5, z6"));
    }

    #[test]
    fn verify_catches_bad_replay() {
        let views = ViewIndexSets::example_four_views();
        let c = closure(&views, &MutuallyIndependent).unwrap();
        let dep = LatentSpec::generate(6, LatentMode::Dependent, 3).unwrap();
        assert!(c.verify(Some(&views), &dep).is_err());
    }

    #[test]
    fn json_keeps_provenance() {
        let c = closure(&ViewIndexSets::example_four_views(), &MutuallyIndependent).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: IdentifiableBlockSet = serde_json::from_str(&text).unwrap();
        assert!(back.contains(&set(&[5])));
        assert_eq!(back, c);
        assert_eq!(back.blocks(), c.blocks());
    }

    fn arb_system() -> impl Strategy<Value = (usize, Vec<u64>, Vec<Vec<bool>>)> {
        (2usize..=8).prop_flat_map(|n| {
            let full = (1u64 << n) - 1;
            (
                Just(n),
                prop::collection::vec(1..=full, 2..=5),
                prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.2), n), n),
            )
        })
    }

    fn build(n: usize, view_masks: &[u64], adj: &[Vec<bool>]) -> (ViewIndexSets, Vec<Vec<bool>>) {
        let views = ViewIndexSets::new(n, view_masks.iter().map(|&m| IndexSet::from_mask(m)).collect()).unwrap();
        let mut sym = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                sym[i][j] = i != j && (adj[i][j] || adj[j][i]);
            }
        }
        (views, sym)
    }

    fn mask_indep(adj: &[Vec<bool>]) -> impl Fn(u64, u64) -> bool + '_ {
        move |a, b| {
            (0..adj.len()).all(|i| {
                a >> i & 1 == 0 || (0..adj.len()).all(|j| b >> j & 1 == 0 || !adj[i][j])
            })
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn closure_matches_naive_fixpoint((n, vm, adj) in arb_system()) {
            let (views, sym) = build(n, &vm, &adj);
            let oracle = adjacency_oracle(sym.clone());
            let c = closure(&views, &oracle).unwrap();
            let base = masks(&base_blocks(&views).unwrap());
            prop_assert_eq!(masks(&c), naive_fixpoint(n, &base, &mask_indep(&sym)));
            prop_assert!(c.verify(Some(&views), &oracle).is_ok());
        }

        #[test]
        fn closure_is_idempotent((n, vm, adj) in arb_system()) {
            let (views, sym) = build(n, &vm, &adj);
            let oracle = adjacency_oracle(sym);
            let c = closure(&views, &oracle).unwrap();
            let again = close(&IdentifiableBlockSet::from_sets(n, c.sorted_sets()).unwrap(), &oracle);
            prop_assert_eq!(again, c);
        }

        #[test]
        fn rule_order_does_not_matter((n, vm, adj) in arb_system()) {
            let (views, sym) = build(n, &vm, &adj);
            let oracle = adjacency_oracle(sym);
            let base = base_blocks(&views).unwrap();
            let reference = close(&base, &oracle);
            for order in [
                [Rule::Union, Rule::Complement, Rule::Intersection],
                [Rule::Complement, Rule::Intersection, Rule::Union],
            ] {
                prop_assert_eq!(&close_with_order(&base, &oracle, &order), &reference);
            }
        }

        #[test]
        fn superset_view_never_loses_blocks((n, vm, adj) in arb_system(), pick in 0usize..5, extra in 0u64..256) {
            let (views, sym) = build(n, &vm, &adj);
            let oracle = adjacency_oracle(sym);
            let existing = vm[pick % vm.len()];
            let full = (1u64 << n) - 1;
            let mut bigger = vm.clone();
            bigger.push(existing | (extra & full));
            let (more, _) = build(n, &bigger, &adj);
            let small = closure(&views, &oracle).unwrap();
            let large = closure(&more, &oracle).unwrap();
            for s in small.sorted_sets() {
                prop_assert!(large.contains(&s), "lost {}", s);
            }
        }
    }
}
