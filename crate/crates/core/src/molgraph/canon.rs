//! Canonical atom ranking and canonical SMILES.
//!
//! Ranks start from per-atom labels (element, aromaticity, degree, charge,
//! written hydrogens, isotope, map class, ring membership) and are refined
//! by repeatedly rehashing each atom with the sorted ranks of its bonded
//! neighbors until the partition stops splitting. Remaining ties are
//! broken by trying every atom of the first tied class and keeping the
//! lexicographically smallest output string. Chirality and `/` `\` marks
//! play no part and are not emitted.

use alloc::string::String;
use alloc::vec::Vec;

use super::write::write_traced;
use super::{parse_smiles, MolGraph, ParseError, WriteOptions};

const NO_STEREO: WriteOptions = WriteOptions { stereo: false };

/// Canonical SMILES. The empty graph renders as `""`.
pub fn canonical_smiles(g: &MolGraph) -> String {
    canonical_search(g).0
}

/// Discrete canonical ranks (a permutation of `0..n`) behind
/// [`canonical_smiles`].
pub fn canonical_ranks(g: &MolGraph) -> Vec<usize> {
    canonical_search(g).1
}

/// Parse then canonicalize.
pub fn canonical_smiles_str(text: &str) -> Result<String, ParseError> {
    parse_smiles(text).map(|g| canonical_smiles(&g))
}

/// 128-bit XXH3 of the canonical SMILES bytes (see [`crate::HASH_ALGORITHM`]).
pub fn canonical_hash(text: &str) -> Result<u128, ParseError> {
    canonical_smiles_str(text).map(|s| xxhash_rust::xxh3::xxh3_128(s.as_bytes()))
}

fn canonical_search(g: &MolGraph) -> (String, Vec<usize>) {
    let n = g.atom_count();
    if n == 0 {
        return (String::new(), Vec::new());
    }
    let labels: Vec<_> = (0..n)
        .map(|i| {
            let a = &g.atoms()[i];
            (
                a.element.atomic_number(),
                a.aromatic,
                g.degree(i),
                a.formal_charge,
                a.explicit_h,
                a.isotope,
                a.map_class,
                g.is_ring_atom(i),
            )
        })
        .collect();
    let ranks = refine(g, dense_ranks(&labels));
    let mut search = Search { g, first: None, best: None, automorphisms: Vec::new() };
    let mut path = Vec::new();
    search.descend(ranks, &mut path);
    let best = search.best.expect("at least one leaf");
    (best.smiles, best.ranks)
}

struct Leaf {
    smiles: String,
    ranks: Vec<usize>,
    /// Atoms in emission order.
    emitted: Vec<usize>,
}

/// Tie-breaking search tree. Two leaves with equal strings reveal an
/// automorphism (map atoms emitted at the same position onto each other);
/// candidates in the same orbit under automorphisms that fix the current
/// path lead to identical subtrees and are skipped.
struct Search<'g> {
    g: &'g MolGraph,
    first: Option<Leaf>,
    best: Option<Leaf>,
    automorphisms: Vec<Vec<usize>>,
}

impl Search<'_> {
    fn descend(&mut self, ranks: Vec<usize>, path: &mut Vec<usize>) {
        let n = ranks.len();
        let mut counts = alloc::vec![0usize; n];
        for &r in &ranks {
            counts[r] += 1;
        }
        let Some(tied) = (0..n).find(|&r| counts[r] > 1) else {
            self.leaf(ranks);
            return;
        };
        let candidates: Vec<usize> = (0..n).filter(|&i| ranks[i] == tied).collect();
        let mut explored: Vec<usize> = Vec::new();
        for &pick in &candidates {
            if !explored.is_empty() {
                let orbits = self.orbits_fixing(path, n);
                if explored.iter().any(|&e| find(&orbits, e) == find(&orbits, pick)) {
                    continue;
                }
            }
            let keys: Vec<_> = (0..n)
                .map(|i| (ranks[i], ranks[i] == tied && i != pick))
                .collect();
            let next = refine(self.g, dense_ranks(&keys));
            path.push(pick);
            self.descend(next, path);
            path.pop();
            explored.push(pick);
        }
    }

    fn leaf(&mut self, ranks: Vec<usize>) {
        let root = ranks.iter().position(|&r| r == 0).expect("rank 0 exists");
        let (smiles, emitted) = write_traced(self.g, root, &ranks, NO_STEREO).expect("valid root");
        for known in [&self.first, &self.best].into_iter().flatten() {
            if known.smiles == smiles {
                let mut gamma = alloc::vec![0; emitted.len()];
                for (&a, &b) in known.emitted.iter().zip(&emitted) {
                    gamma[a] = b;
                }
                if gamma.iter().enumerate().any(|(i, &j)| i != j) && !self.automorphisms.contains(&gamma) {
                    self.automorphisms.push(gamma);
                }
                break;
            }
        }
        let leaf = Leaf { smiles, ranks, emitted };
        if self.first.is_none() {
            self.first = Some(Leaf { smiles: leaf.smiles.clone(), ranks: leaf.ranks.clone(), emitted: leaf.emitted.clone() });
        }
        if self.best.as_ref().map_or(true, |b| leaf.smiles < b.smiles) {
            self.best = Some(leaf);
        }
    }

    /// Union-find parents of the orbits of the group generated by known
    /// automorphisms that fix every atom on `path`.
    fn orbits_fixing(&self, path: &[usize], n: usize) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..n).collect();
        for gamma in &self.automorphisms {
            if path.iter().all(|&p| gamma[p] == p) {
                for (i, &j) in gamma.iter().enumerate() {
                    let (a, b) = (find(&parent, i), find(&parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        parent
    }
}

fn find(parent: &[usize], mut i: usize) -> usize {
    while parent[i] != i {
        i = parent[i];
    }
    i
}

/// Iterates neighborhood rehashing until the number of classes is stable.
fn refine(g: &MolGraph, mut ranks: Vec<usize>) -> Vec<usize> {
    let n = ranks.len();
    let mut classes = class_count(&ranks);
    loop {
        let signatures: Vec<(usize, Vec<(usize, u8)>)> = (0..n)
            .map(|i| {
                let mut nb: Vec<(usize, u8)> = g
                    .neighbors(i)
                    .iter()
                    .map(|&(v, b)| (ranks[v], g.bonds()[b].order.code()))
                    .collect();
                nb.sort_unstable();
                (ranks[i], nb)
            })
            .collect();
        let next = dense_ranks(&signatures);
        let next_classes = class_count(&next);
        ranks = next;
        if next_classes == classes {
            return ranks;
        }
        classes = next_classes;
    }
}

fn class_count(ranks: &[usize]) -> usize {
    ranks.iter().copied().max().map_or(0, |m| m + 1)
}

/// Dense rank of each key among the distinct keys.
fn dense_ranks<K: Ord>(keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let mut ranks = alloc::vec![0; keys.len()];
    let mut r = 0;
    for w in 0..idx.len() {
        if w > 0 && keys[idx[w]] != keys[idx[w - 1]] {
            r += 1;
        }
        ranks[idx[w]] = r;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canon(s: &str) -> String {
        canonical_smiles_str(s).unwrap()
    }

    #[test]
    fn same_molecule_two_renderings() {
        assert_eq!(canon("OCC"), canon("CCO"));
        assert_eq!(canon("c1ccccc1O"), canon("Oc1ccccc1"));
        assert_eq!(canon("C1CCCCC1C(=O)N"), canon("NC(=O)C1CCCCC1"));
        assert_ne!(canon("CCO"), canon("CCN"));
        assert_ne!(canon("CC=O"), canon("C=CO"));
    }

    #[test]
    fn idempotent() {
        for s in ["CC(C)(C)c1ccc(O)cc1", "C1CC2CCC1CC2", "[NH4+].[Cl-]", "O=C(O)CCc1c[nH]c2ccccc12"] {
            let c = canon(s);
            assert_eq!(canon(&c), c, "{s}");
        }
    }

    #[test]
    fn ignores_stereo() {
        assert_eq!(canon("F/C=C/F"), canon("F/C=C\\F"));
        assert_eq!(canon("[C@@H](F)(Cl)Br"), canon("[C@H](F)(Cl)Br"));
        assert!(!canon("F/C=C/F").contains('/'));
    }

    #[test]
    fn component_order_does_not_matter() {
        assert_eq!(canon("CCO.[Na+]"), canon("[Na+].OCC"));
    }

    #[test]
    fn ranks_are_a_permutation() {
        let g = parse_smiles("CC(C)(C)C").unwrap();
        let mut r = canonical_ranks(&g);
        r.sort_unstable();
        assert_eq!(r, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn hash_matches_canonical_equality() {
        assert_eq!(canonical_hash("CCO").unwrap(), canonical_hash("OCC").unwrap());
        assert_ne!(canonical_hash("CCO").unwrap(), canonical_hash("CCN").unwrap());
        // Pinned so that a silent change of algorithm is caught.
        assert_eq!(
            canonical_hash("CCO").unwrap(),
            xxhash_rust::xxh3::xxh3_128(canon("CCO").as_bytes())
        );
    }

    #[test]
    fn highly_symmetric_hub_terminates() {
        // Twelve cyclopropanes on one spiro hub: 12! * 2^12 unpruned leaves.
        let mut s = String::from("C");
        for d in 1..=12 {
            s.push_str(&alloc::format!("%{:02}", d + 10));
        }
        for d in 1..=12 {
            s.push_str(&alloc::format!("(CC%{:02})", d + 10));
        }
        let c = canon(&s);
        assert_eq!(canon(&c), c);
        assert_eq!(canon("C12(CC1)CC2"), canon("C1CC12CC2"));
    }

    #[test]
    fn empty_graph_is_empty_string() {
        assert_eq!(canonical_smiles(&MolGraph::empty()), "");
    }
}
