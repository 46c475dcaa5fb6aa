use alloc::string::String;
use alloc::vec;

use super::{canonical_smiles, MolGraph};

/// Bemis-Murcko framework: non-ring atoms with at most one neighbor are
/// removed until none remain. Ring systems and the linkers between them
/// survive; acyclic molecules reduce to the empty graph.
pub fn scaffold(g: &MolGraph) -> MolGraph {
    let n = g.atom_count();
    let mut keep = vec![true; n];
    let mut degree: alloc::vec::Vec<usize> = (0..n).map(|i| g.degree(i)).collect();
    let mut queue: alloc::vec::Vec<usize> =
        (0..n).filter(|&i| !g.is_ring_atom(i) && degree[i] <= 1).collect();
    while let Some(u) = queue.pop() {
        if !keep[u] {
            continue;
        }
        keep[u] = false;
        for &(v, _) in g.neighbors(u) {
            if keep[v] {
                degree[v] -= 1;
                if !g.is_ring_atom(v) && degree[v] <= 1 {
                    queue.push(v);
                }
            }
        }
    }
    g.subgraph(&keep)
}

/// Canonical SMILES of the scaffold; `""` for acyclic molecules.
pub fn scaffold_key(g: &MolGraph) -> String {
    canonical_smiles(&scaffold(g))
}
