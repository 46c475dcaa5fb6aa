use alloc::vec;
use alloc::vec::Vec;

use xxhash_rust::xxh3::xxh3_64;

use super::MolGraph;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FingerprintError {
    #[error("fingerprint length {0} is not a power of two")]
    InvalidLength(usize),
}

/// Folded bit vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    nbits: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn new(nbits: usize) -> Result<Self, FingerprintError> {
        if nbits == 0 || !nbits.is_power_of_two() {
            return Err(FingerprintError::InvalidLength(nbits));
        }
        Ok(Fingerprint { nbits, words: vec![0; nbits.div_ceil(64)] })
    }

    pub fn len(&self) -> usize {
        self.nbits
    }

    pub fn is_empty(&self) -> bool {
        self.nbits == 0
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nbits).filter(|&b| self.get(b))
    }

    /// Dense 0/1 vector, for use as model features.
    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.nbits).map(|b| if self.get(b) { 1.0 } else { 0.0 }).collect()
    }
}

/// Extended-connectivity fingerprint. Every atom starts from a hash of its
/// element, heavy degree, hydrogen count, charge, isotope, ring flag and
/// aromaticity; each of `radius` rounds rehashes an atom with its previous
/// identifier and the sorted `(bond order, neighbor identifier)` pairs.
/// All identifiers from rounds `0..=radius` are folded by `mod nbits`.
/// ECFP4 is `radius = 2`.
pub fn ecfp(g: &MolGraph, radius: usize, nbits: usize) -> Result<Fingerprint, FingerprintError> {
    let mut fp = Fingerprint::new(nbits)?;
    for id in identifiers(g, radius) {
        fp.set((id % nbits as u64) as usize);
    }
    Ok(fp)
}

/// Every identifier produced, one per atom per round.
pub(crate) fn identifiers(g: &MolGraph, radius: usize) -> Vec<u64> {
    let n = g.atom_count();
    let mut current: Vec<u64> = (0..n)
        .map(|i| {
            let a = &g.atoms()[i];
            let iso = a.isotope.unwrap_or(0).to_le_bytes();
            let bytes = [
                a.element.atomic_number(),
                g.degree(i) as u8,
                g.hydrogen_count(i) as u8,
                a.formal_charge as u8,
                iso[0],
                iso[1],
                g.is_ring_atom(i) as u8,
                a.aromatic as u8,
            ];
            xxh3_64(&bytes)
        })
        .collect();
    let mut all = current.clone();
    let mut buf = Vec::new();
    for round in 1..=radius {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut env: Vec<(u8, u64)> = g
                    .neighbors(i)
                    .iter()
                    .map(|&(v, b)| (g.bonds()[b].order.code(), current[v]))
                    .collect();
                env.sort_unstable();
                buf.clear();
                buf.extend_from_slice(&(round as u32).to_le_bytes());
                buf.extend_from_slice(&current[i].to_le_bytes());
                for (code, id) in env {
                    buf.push(code);
                    buf.extend_from_slice(&id.to_le_bytes());
                }
                xxh3_64(&buf)
            })
            .collect();
        all.extend_from_slice(&next);
        current = next;
    }
    all
}

#[cfg(test)]
mod tests {
    use super::super::parse_smiles;
    use super::*;

    #[test]
    fn methane_radius_zero_sets_one_bit() {
        let g = parse_smiles("C").unwrap();
        assert_eq!(ecfp(&g, 0, 2048).unwrap().count_ones(), 1);
    }

    #[test]
    fn order_invariant() {
        let a = ecfp(&parse_smiles("CCO").unwrap(), 2, 2048).unwrap();
        let b = ecfp(&parse_smiles("OCC").unwrap(), 2, 2048).unwrap();
        assert_eq!(a, b);
        let c = ecfp(&parse_smiles("CCN").unwrap(), 2, 2048).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let g = parse_smiles("C").unwrap();
        assert_eq!(ecfp(&g, 2, 1000), Err(FingerprintError::InvalidLength(1000)));
        assert_eq!(ecfp(&g, 2, 0), Err(FingerprintError::InvalidLength(0)));
    }

    #[test]
    fn popcount_bounded_by_enumerated_environments() {
        // 20 heavy atoms.
        let g = parse_smiles("CC(C)Cc1ccc(cc1)C(C)C(=O)OCCN(C)C").unwrap();
        assert_eq!(g.atom_count(), 20);
        // Independent enumeration: distinct (atom, radius) neighborhoods
        // as sets of atoms reachable within r bonds.
        let mut envs = alloc::collections::BTreeSet::new();
        for i in 0..g.atom_count() {
            let mut frontier = alloc::collections::BTreeSet::from([i]);
            for r in 0..=2 {
                envs.insert((i, r, frontier.clone()));
                let mut grown = frontier.clone();
                for &u in &frontier {
                    for &(v, _) in g.neighbors(u) {
                        grown.insert(v);
                    }
                }
                frontier = grown;
            }
        }
        let fp = ecfp(&g, 2, 2048).unwrap();
        assert!(envs.len() <= 3 * g.atom_count());
        assert!(fp.count_ones() <= envs.len());
        assert!(fp.count_ones() > g.atom_count() / 2);
    }
}
