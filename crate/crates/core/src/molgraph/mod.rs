//! Molecular graphs parsed from SMILES, with canonical rendering,
//! Bemis-Murcko scaffolds, circular fingerprints and scaffold splits.

mod canon;
mod ecfp;
mod element;
mod parse;
mod scaffold;
mod split;
mod write;

use alloc::vec;
use alloc::vec::Vec;

pub use canon::{canonical_hash, canonical_ranks, canonical_smiles, canonical_smiles_str};
pub use ecfp::{ecfp, Fingerprint, FingerprintError};
pub use element::Element;
pub use parse::{parse_smiles, parse_smiles_strict, ParseError};
pub use scaffold::{scaffold, scaffold_key};
pub use split::{scaffold_split, ScaffoldSplit, SplitError};
pub use write::{write_smiles, write_smiles_with, WriteError, WriteOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Chirality {
    #[default]
    None,
    /// `@@`
    Clockwise,
    /// `@`
    CounterClockwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub element: Element,
    /// Written lowercase.
    pub aromatic: bool,
    pub formal_charge: i8,
    /// Hydrogen count written inside brackets. `None` for bare atoms, whose
    /// hydrogens are implicit.
    pub explicit_h: Option<u8>,
    pub isotope: Option<u16>,
    pub chirality: Chirality,
    /// Atom-map class (`[CH3:7]`).
    pub map_class: Option<u16>,
}

impl Atom {
    pub fn new(element: Element) -> Self {
        Atom {
            element,
            aromatic: false,
            formal_charge: 0,
            explicit_h: None,
            isotope: None,
            chirality: Chirality::None,
            map_class: None,
        }
    }

    pub fn aromatic(element: Element) -> Self {
        Atom { aromatic: true, ..Atom::new(element) }
    }

    /// True when the atom can only be written inside square brackets.
    pub fn needs_brackets(&self, with_stereo: bool) -> bool {
        self.explicit_h.is_some()
            || self.formal_charge != 0
            || self.isotope.is_some()
            || self.map_class.is_some()
            || (with_stereo && self.chirality != Chirality::None)
            || !self.element.is_organic_subset(self.aromatic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub(crate) fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    /// Contribution to the valence sum; aromatic bonds count one, the
    /// extra pi electron is added per aromatic atom.
    fn valence(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BondStereo {
    #[default]
    None,
    /// `/`
    Up,
    /// `\`
    Down,
}

impl BondStereo {
    pub(crate) fn flipped(self) -> Self {
        match self {
            BondStereo::None => BondStereo::None,
            BondStereo::Up => BondStereo::Down,
            BondStereo::Down => BondStereo::Up,
        }
    }
}

/// A bond between atoms `a` and `b`. The stereo mark is read in the
/// `a -> b` direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub stereo: BondStereo,
}

impl Bond {
    pub fn new(a: usize, b: usize, order: BondOrder) -> Self {
        Bond { a, b, order, stereo: BondStereo::None }
    }

    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("bond {0} joins an atom to itself")]
    SelfBond(usize),
    #[error("bond {0} references a missing atom")]
    AtomOutOfRange(usize),
    #[error("atoms {0} and {1} are bonded twice")]
    DuplicateBond(usize, usize),
}

/// Atoms, bonds and derived ring membership.
///
/// Empty graphs are allowed: they are the scaffold of acyclic molecules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// Per atom: `(neighbor, bond index)` in bond-list order.
    adjacency: Vec<Vec<(usize, usize)>>,
    ring_atom: Vec<bool>,
    ring_bond: Vec<bool>,
}

impl MolGraph {
    pub fn new(mut atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, GraphError> {
        let n = atoms.len();
        let mut adjacency = vec![Vec::new(); n];
        for (i, bond) in bonds.iter().enumerate() {
            if bond.a >= n || bond.b >= n {
                return Err(GraphError::AtomOutOfRange(i));
            }
            if bond.a == bond.b {
                return Err(GraphError::SelfBond(i));
            }
            if adjacency[bond.a].iter().any(|&(nb, _)| nb == bond.b) {
                return Err(GraphError::DuplicateBond(bond.a.min(bond.b), bond.a.max(bond.b)));
            }
            adjacency[bond.a].push((bond.b, i));
            adjacency[bond.b].push((bond.a, i));
        }
        // Atoms that must be bracketed always carry an explicit hydrogen
        // count so that writing and re-reading them is lossless.
        for atom in atoms.iter_mut() {
            if atom.explicit_h.is_none() && atom.needs_brackets(true) {
                atom.explicit_h = Some(0);
            }
        }
        let ring_bond = ring_bonds(n, &bonds, &adjacency);
        let mut ring_atom = vec![false; n];
        for (bond, &in_ring) in bonds.iter().zip(&ring_bond) {
            if in_ring {
                ring_atom[bond.a] = true;
                ring_atom[bond.b] = true;
            }
        }
        Ok(MolGraph { atoms, bonds, adjacency, ring_atom, ring_bond })
    }

    pub fn empty() -> Self {
        MolGraph {
            atoms: Vec::new(),
            bonds: Vec::new(),
            adjacency: Vec::new(),
            ring_atom: Vec::new(),
            ring_bond: Vec::new(),
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `(neighbor, bond index)` pairs of `atom`.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.adjacency[atom].len()
    }

    pub fn ring_membership(&self) -> &[bool] {
        &self.ring_atom
    }

    pub fn is_ring_atom(&self, atom: usize) -> bool {
        self.ring_atom[atom]
    }

    pub fn is_ring_bond(&self, bond: usize) -> bool {
        self.ring_bond[bond]
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency[a].iter().find(|&&(nb, _)| nb == b).map(|&(_, i)| i)
    }

    /// Component label per atom, numbered by first atom.
    pub fn components(&self) -> Vec<usize> {
        let n = self.atoms.len();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn component_count(&self) -> usize {
        self.components().iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Total hydrogen count: the bracket count when written, otherwise the
    /// implicit count from the lowest default valence that fits.
    pub fn hydrogen_count(&self, atom: usize) -> u32 {
        let a = &self.atoms[atom];
        if let Some(h) = a.explicit_h {
            return h as u32;
        }
        let mut used: u32 = self.adjacency[atom]
            .iter()
            .map(|&(_, b)| self.bonds[b].order.valence())
            .sum();
        if a.aromatic {
            used += 1;
        }
        a.element
            .default_valences()
            .iter()
            .copied()
            .find(|&v| v >= used)
            .map_or(0, |v| v - used)
    }

    /// Sum of bond valences plus hydrogens, for strict-mode checks.
    pub(crate) fn valence_used(&self, atom: usize) -> u32 {
        let bonds: u32 = self.adjacency[atom]
            .iter()
            .map(|&(_, b)| self.bonds[b].order.valence())
            .sum();
        bonds + u32::from(self.atoms[atom].aromatic) + self.hydrogen_count(atom)
    }

    /// Induced subgraph on `keep` (atoms stay in their original order).
    pub fn subgraph(&self, keep: &[bool]) -> MolGraph {
        let mut remap = vec![usize::MAX; self.atoms.len()];
        let mut atoms = Vec::new();
        for (i, atom) in self.atoms.iter().enumerate() {
            if keep[i] {
                remap[i] = atoms.len();
                atoms.push(atom.clone());
            }
        }
        let bonds = self
            .bonds
            .iter()
            .filter(|b| keep[b.a] && keep[b.b])
            .map(|b| Bond { a: remap[b.a], b: remap[b.b], ..*b })
            .collect();
        MolGraph::new(atoms, bonds).expect("subgraph of a valid graph is valid")
    }
}

/// Bonds that are not bridges lie on a cycle. Iterative low-link DFS.
fn ring_bonds(n: usize, bonds: &[Bond], adjacency: &[Vec<(usize, usize)>]) -> Vec<bool> {
    let mut in_ring = vec![true; bonds.len()];
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut time = 0;
    // (atom, bond used to enter, next adjacency index)
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        disc[root] = time;
        low[root] = time;
        time += 1;
        stack.push((root, usize::MAX, 0));
        while let Some(top) = stack.last_mut() {
            let (u, via, idx) = *top;
            if idx < adjacency[u].len() {
                top.2 += 1;
                let (v, bond) = adjacency[u][idx];
                if bond == via {
                    continue;
                }
                if disc[v] == usize::MAX {
                    disc[v] = time;
                    low[v] = time;
                    time += 1;
                    stack.push((v, bond, 0));
                } else {
                    low[u] = low[u].min(disc[v]);
                }
            } else {
                stack.pop();
                if let Some(&(parent, _, _)) = stack.last() {
                    low[parent] = low[parent].min(low[u]);
                    if low[u] > disc[parent] {
                        in_ring[via] = false;
                    }
                }
            }
        }
    }
    in_ring
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_detection_on_fused_and_chain() {
        // Naphthalene with a methyl: every ring atom flagged, methyl not.
        let g = parse_smiles("Cc1ccc2ccccc2c1").unwrap();
        let ring = g.ring_membership();
        assert!(!ring[0]);
        assert!(ring[1..].iter().all(|&r| r));
        let chain = parse_smiles("CCCC").unwrap();
        assert!(chain.ring_membership().iter().all(|&r| !r));
    }

    #[test]
    fn linker_between_rings_is_not_a_ring_atom() {
        let g = parse_smiles("C1CC1CC1CC1").unwrap();
        assert_eq!(
            g.ring_membership(),
            &[true, true, true, false, true, true, true]
        );
        assert_eq!(g.component_count(), 1);
    }

    #[test]
    fn implicit_hydrogens() {
        let g = parse_smiles("c1ccncc1C(=O)O").unwrap();
        let h: Vec<u32> = (0..g.atom_count()).map(|i| g.hydrogen_count(i)).collect();
        assert_eq!(h, vec![1, 1, 1, 0, 1, 0, 0, 0, 1]);
        let g = parse_smiles("[nH]1cccc1").unwrap();
        assert_eq!(g.hydrogen_count(0), 1);
    }

    #[test]
    fn duplicate_and_self_bonds_rejected() {
        let atoms = vec![Atom::new(Element::CARBON), Atom::new(Element::CARBON)];
        let dup = vec![Bond::new(0, 1, BondOrder::Single), Bond::new(1, 0, BondOrder::Single)];
        assert_eq!(MolGraph::new(atoms.clone(), dup), Err(GraphError::DuplicateBond(0, 1)));
        let selfb = vec![Bond::new(1, 1, BondOrder::Single)];
        assert_eq!(MolGraph::new(atoms, selfb), Err(GraphError::SelfBond(0)));
    }
}
