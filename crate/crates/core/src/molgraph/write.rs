use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use super::{Atom, BondOrder, BondStereo, Chirality, MolGraph};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WriteError {
    #[error("root atom {root} out of range for {atoms} atoms")]
    InvalidRoot { root: usize, atoms: usize },
    #[error("neighbor order has {got} entries, graph has {atoms} atoms")]
    OrderLength { got: usize, atoms: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    /// Emit chirality and `/` `\` bond marks.
    pub stereo: bool,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions { stereo: true }
    }
}

/// Depth-first SMILES from `root`. `priority[i]` orders the neighbors of
/// every atom (lower first, ties by atom index); remaining components are
/// appended after `.` rooted at their lowest-priority atom.
pub fn write_smiles(g: &MolGraph, root: usize, priority: &[usize]) -> Result<String, WriteError> {
    write_smiles_with(g, root, priority, WriteOptions::default())
}

pub fn write_smiles_with(
    g: &MolGraph,
    root: usize,
    priority: &[usize],
    opts: WriteOptions,
) -> Result<String, WriteError> {
    write_traced(g, root, priority, opts).map(|(s, _)| s)
}

/// Also returns the atoms in the order their symbols were emitted.
pub(crate) fn write_traced(
    g: &MolGraph,
    root: usize,
    priority: &[usize],
    opts: WriteOptions,
) -> Result<(String, Vec<usize>), WriteError> {
    let n = g.atom_count();
    if root >= n {
        return Err(WriteError::InvalidRoot { root, atoms: n });
    }
    if priority.len() != n {
        return Err(WriteError::OrderLength { got: priority.len(), atoms: n });
    }
    let key = |i: usize| (priority[i], i);

    let sorted_neighbors: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|u| {
            let mut nb = g.neighbors(u).to_vec();
            nb.sort_by_key(|&(v, _)| key(v));
            nb
        })
        .collect();

    let labels = g.components();
    let mut roots = vec![root];
    let mut seen_component = vec![false; labels.iter().copied().max().map_or(0, |m| m + 1)];
    seen_component[labels[root]] = true;
    let mut by_priority: Vec<usize> = (0..n).collect();
    by_priority.sort_by_key(|&i| key(i));
    for i in by_priority {
        if !seen_component[labels[i]] {
            seen_component[labels[i]] = true;
            roots.push(i);
        }
    }

    let plan = Plan::build(g, &sorted_neighbors, &roots);
    let mut out = String::new();
    let mut emitted = Vec::with_capacity(n);
    let mut digits = RingDigits::default();
    for (ci, &r) in roots.iter().enumerate() {
        if ci > 0 {
            out.push('.');
        }
        plan.emit(g, r, opts, &mut digits, &mut out, &mut emitted);
    }
    Ok((out, emitted))
}

/// Spanning-forest layout: tree children and ring-closure bonds per atom.
struct Plan {
    children: Vec<Vec<(usize, usize)>>,
    /// Ring bonds in the order they appear after each atom's symbol; the
    /// flag marks the opening end.
    ring_bonds: Vec<Vec<(usize, bool)>>,
}

impl Plan {
    fn build(g: &MolGraph, sorted_neighbors: &[Vec<(usize, usize)>], roots: &[usize]) -> Plan {
        let n = g.atom_count();
        let mut visited = vec![false; n];
        let mut bond_used = vec![false; g.bonds().len()];
        let mut children = vec![Vec::new(); n];
        let mut opens: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut closes: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for &r in roots {
            visited[r] = true;
            stack.push((r, 0));
            while let Some(top) = stack.last_mut() {
                let (u, idx) = *top;
                if idx == sorted_neighbors[u].len() {
                    stack.pop();
                    continue;
                }
                top.1 += 1;
                let (v, b) = sorted_neighbors[u][idx];
                if bond_used[b] {
                    continue;
                }
                bond_used[b] = true;
                if visited[v] {
                    opens[v].push(b);
                    closes[u].push(b);
                } else {
                    visited[v] = true;
                    children[u].push((v, b));
                    stack.push((v, 0));
                }
            }
        }
        let ring_bonds = closes
            .into_iter()
            .zip(opens)
            .map(|(c, o)| {
                c.into_iter()
                    .map(|b| (b, false))
                    .chain(o.into_iter().map(|b| (b, true)))
                    .collect()
            })
            .collect();
        Plan { children, ring_bonds }
    }

    fn emit(
        &self,
        g: &MolGraph,
        root: usize,
        opts: WriteOptions,
        digits: &mut RingDigits,
        out: &mut String,
        emitted: &mut Vec<usize>,
    ) {
        enum Step {
            Atom { atom: usize, from: Option<(usize, usize)> },
            Open,
            Close,
        }
        let mut stack = vec![Step::Atom { atom: root, from: None }];
        while let Some(step) = stack.pop() {
            match step {
                Step::Open => out.push('('),
                Step::Close => out.push(')'),
                Step::Atom { atom, from } => {
                    if let Some((parent, bond)) = from {
                        push_bond(g, bond, parent, atom, opts, out);
                    }
                    push_atom(&g.atoms()[atom], opts, out);
                    emitted.push(atom);
                    let mut freed = Vec::new();
                    for &(bond, opening) in &self.ring_bonds[atom] {
                        if opening {
                            let d = digits.take();
                            digits.assigned.push((bond, d));
                            let other = g.bonds()[bond].other(atom);
                            push_bond(g, bond, atom, other, opts, out);
                            push_digit(d, out);
                        } else {
                            let slot = digits
                                .assigned
                                .iter()
                                .position(|&(b, _)| b == bond)
                                .expect("ring opened before closing");
                            let (_, d) = digits.assigned.remove(slot);
                            push_digit(d, out);
                            freed.push(d);
                        }
                    }
                    for d in freed {
                        digits.release(d);
                    }
                    let kids = &self.children[atom];
                    for (k, &(child, bond)) in kids.iter().enumerate().rev() {
                        let last = k + 1 == kids.len();
                        if !last {
                            stack.push(Step::Close);
                        }
                        stack.push(Step::Atom { atom: child, from: Some((atom, bond)) });
                        if !last {
                            stack.push(Step::Open);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Default)]
struct RingDigits {
    in_use: Vec<u16>,
    assigned: Vec<(usize, u16)>,
}

impl RingDigits {
    fn take(&mut self) -> u16 {
        let d = (1..).find(|d| !self.in_use.contains(d)).expect("unbounded");
        self.in_use.push(d);
        d
    }

    fn release(&mut self, d: u16) {
        self.in_use.retain(|&x| x != d);
    }
}

fn push_digit(d: u16, out: &mut String) {
    if d < 10 {
        out.push((b'0' + d as u8) as char);
    } else {
        let _ = write!(out, "%{:02}", d);
    }
}

fn push_bond(g: &MolGraph, bond: usize, from: usize, to: usize, opts: WriteOptions, out: &mut String) {
    let b = &g.bonds()[bond];
    let both_aromatic = g.atoms()[from].aromatic && g.atoms()[to].aromatic;
    match b.order {
        BondOrder::Single => {
            let stereo = if b.a == from { b.stereo } else { b.stereo.flipped() };
            match stereo {
                BondStereo::Up if opts.stereo => out.push('/'),
                BondStereo::Down if opts.stereo => out.push('\\'),
                _ if both_aromatic => out.push('-'),
                _ => {}
            }
        }
        BondOrder::Double => out.push('='),
        BondOrder::Triple => out.push('#'),
        BondOrder::Aromatic => {
            if !both_aromatic {
                out.push(':');
            }
        }
    }
}

fn push_atom(atom: &Atom, opts: WriteOptions, out: &mut String) {
    let symbol = if atom.aromatic {
        atom.element.aromatic_symbol().unwrap_or(atom.element.symbol())
    } else {
        atom.element.symbol()
    };
    if !atom.needs_brackets(opts.stereo) {
        out.push_str(symbol);
        return;
    }
    out.push('[');
    if let Some(iso) = atom.isotope {
        let _ = write!(out, "{iso}");
    }
    out.push_str(symbol);
    if opts.stereo {
        match atom.chirality {
            Chirality::None => {}
            Chirality::CounterClockwise => out.push('@'),
            Chirality::Clockwise => out.push_str("@@"),
        }
    }
    match atom.explicit_h.unwrap_or(0) {
        0 => {}
        1 => out.push('H'),
        h => {
            let _ = write!(out, "H{h}");
        }
    }
    match atom.formal_charge {
        0 => {}
        1 => out.push('+'),
        -1 => out.push('-'),
        c if c > 0 => {
            let _ = write!(out, "+{c}");
        }
        c => {
            let _ = write!(out, "-{}", -(c as i32));
        }
    }
    if let Some(class) = atom.map_class {
        let _ = write!(out, ":{class}");
    }
    out.push(']');
}

#[cfg(test)]
mod tests {
    use super::super::{canonical_smiles, parse_smiles};
    use super::*;

    fn identity(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn single_atom() {
        let g = parse_smiles("C").unwrap();
        assert_eq!(write_smiles(&g, 0, &[0]).unwrap(), "C");
    }

    #[test]
    fn ethanol_from_oxygen() {
        let g = parse_smiles("CCO").unwrap();
        assert_eq!(write_smiles(&g, 2, &identity(3)).unwrap(), "OCC");
    }

    #[test]
    fn original_order_reproduces_input() {
        for s in [
            "CC(=O)Oc1ccccc1C(=O)O",
            "F/C=C/F",
            "[C@@H](F)(Cl)Br",
            "C1CC2CCC1CC2",
            "c1ccccc1-c1ccccc1",
            "[Na+].[Cl-]",
            "[13CH3:2]C#N",
        ] {
            let g = parse_smiles(s).unwrap();
            assert_eq!(write_smiles(&g, 0, &identity(g.atom_count())).unwrap(), s);
        }
    }

    #[test]
    fn benzene_from_every_root_reparses_isomorphic() {
        let g = parse_smiles("c1ccccc1").unwrap();
        let reference = canonical_smiles(&g);
        for root in 0..6 {
            let mut order = identity(6);
            order.reverse();
            let s = write_smiles(&g, root, &order).unwrap();
            let h = parse_smiles(&s).unwrap();
            assert_eq!(h.atom_count(), 6);
            assert!(h.atoms().iter().all(|a| a.aromatic));
            assert_eq!(canonical_smiles(&h), reference);
        }
    }

    #[test]
    fn errors() {
        let g = parse_smiles("CC").unwrap();
        assert_eq!(
            write_smiles(&g, 2, &[0, 1]),
            Err(WriteError::InvalidRoot { root: 2, atoms: 2 })
        );
        assert_eq!(
            write_smiles(&g, 0, &[0]),
            Err(WriteError::OrderLength { got: 1, atoms: 2 })
        );
    }

    #[test]
    fn many_rings_use_percent_digits() {
        // Ten fused cyclopropanes sharing one hub atom force ring numbers > 9.
        let mut s = String::from("C");
        for d in 1..=10 {
            if d < 10 {
                let _ = write!(s, "{d}");
            } else {
                s.push_str("%10");
            }
        }
        for d in 1..=10 {
            s.push_str("(CC");
            if d < 10 {
                let _ = write!(s, "{d}");
            } else {
                s.push_str("%10");
            }
            s.push(')');
        }
        let g = parse_smiles(&s).unwrap();
        let out = write_smiles(&g, 0, &identity(g.atom_count())).unwrap();
        assert!(out.contains("%10"));
        assert_eq!(canonical_smiles(&parse_smiles(&out).unwrap()), canonical_smiles(&g));
    }
}
