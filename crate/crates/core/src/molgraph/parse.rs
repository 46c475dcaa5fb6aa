use alloc::vec::Vec;

use super::{Atom, Bond, BondOrder, BondStereo, Chirality, Element, MolGraph};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("empty SMILES")]
    EmptyInput,
    #[error("non-ASCII byte at {0}")]
    NonAscii(usize),
    #[error("unexpected character {ch:?} at {pos}")]
    UnexpectedCharacter { pos: usize, ch: char },
    #[error("unknown element at {0}")]
    UnknownElement(usize),
    #[error("bracket atom opened at {0} is never closed")]
    UnclosedBracket(usize),
    #[error("malformed bracket atom at {0}")]
    MalformedBracket(usize),
    #[error("ring closure {0} is never closed")]
    UnclosedRing(u16),
    #[error("branch opened at {0} is never closed")]
    UnclosedBranch(usize),
    #[error("unbalanced ')' at {0}")]
    UnbalancedParenthesis(usize),
    #[error("bond symbol at {0} has no atom to attach to")]
    DanglingBond(usize),
    #[error("ring closure at {0} has conflicting bond symbols")]
    RingBondConflict(usize),
    #[error("ring closure at {0} bonds an atom to itself or repeats a bond")]
    InvalidRingClosure(usize),
    #[error("atom {atom} exceeds its maximum valence ({used} > {max})")]
    SuperValent { atom: usize, used: u32, max: u32 },
}

/// Parses a SMILES string. Atoms are numbered in order of appearance.
pub fn parse_smiles(text: &str) -> Result<MolGraph, ParseError> {
    Parser::new(text)?.run()
}

/// Like [`parse_smiles`], additionally rejecting atoms whose bonds plus
/// hydrogens exceed a fixed maximum valence (adjusted by formal charge).
pub fn parse_smiles_strict(text: &str) -> Result<MolGraph, ParseError> {
    let g = parse_smiles(text)?;
    for i in 0..g.atom_count() {
        let atom = &g.atoms()[i];
        if let Some(max) = atom.element.max_valence() {
            let max = (max as i32 + atom.formal_charge.unsigned_abs() as i32) as u32;
            let used = g.valence_used(i);
            if used > max {
                return Err(ParseError::SuperValent { atom: i, used, max });
            }
        }
    }
    Ok(g)
}

#[derive(Clone, Copy)]
struct PendingBond {
    order: BondOrder,
    stereo: BondStereo,
    pos: usize,
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    prev: Option<usize>,
    pending: Option<PendingBond>,
    branches: Vec<(Option<usize>, usize)>,
    /// ring number -> (atom, bond written at the opening, position)
    rings: Vec<(u16, usize, Option<PendingBond>, usize)>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Result<Self, ParseError> {
        if text.is_empty() {
            return Err(ParseError::EmptyInput);
        }
        if let Some(i) = text.bytes().position(|b| !b.is_ascii()) {
            return Err(ParseError::NonAscii(i));
        }
        Ok(Parser {
            bytes: text.as_bytes(),
            pos: 0,
            atoms: Vec::new(),
            bonds: Vec::new(),
            prev: None,
            pending: None,
            branches: Vec::new(),
            rings: Vec::new(),
        })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn run(mut self) -> Result<MolGraph, ParseError> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.push_atom(atom);
                }
                b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' => {
                    let next = self.bytes.get(self.pos + 1).copied();
                    let element = match (c, next) {
                        (b'C', Some(b'l')) => {
                            self.pos += 1;
                            Element::CHLORINE
                        }
                        (b'B', Some(b'r')) => {
                            self.pos += 1;
                            Element::BROMINE
                        }
                        _ => Element::from_symbol(ascii_str(&[c])).expect("organic subset"),
                    };
                    self.pos += 1;
                    self.push_atom(Atom::new(element));
                }
                b'b' | b'c' | b'n' | b'o' | b'p' | b's' => {
                    self.pos += 1;
                    let element = Element::from_aromatic_symbol(ascii_str(&[c])).expect("aromatic");
                    self.push_atom(Atom::aromatic(element));
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if self.prev.is_none() || self.pending.is_some() {
                        return Err(ParseError::DanglingBond(start));
                    }
                    let (order, stereo) = match c {
                        b'-' => (BondOrder::Single, BondStereo::None),
                        b'=' => (BondOrder::Double, BondStereo::None),
                        b'#' => (BondOrder::Triple, BondStereo::None),
                        b':' => (BondOrder::Aromatic, BondStereo::None),
                        b'/' => (BondOrder::Single, BondStereo::Up),
                        _ => (BondOrder::Single, BondStereo::Down),
                    };
                    self.pending = Some(PendingBond { order, stereo, pos: start });
                    self.pos += 1;
                }
                b'(' => {
                    if self.prev.is_none() || self.pending.is_some() {
                        return Err(ParseError::UnexpectedCharacter { pos: start, ch: '(' });
                    }
                    if self.bytes.get(self.pos + 1) == Some(&b')') {
                        return Err(ParseError::UnexpectedCharacter { pos: start + 1, ch: ')' });
                    }
                    self.branches.push((self.prev, start));
                    self.pos += 1;
                }
                b')' => {
                    if let Some(p) = self.pending {
                        return Err(ParseError::DanglingBond(p.pos));
                    }
                    let (prev, _) = self
                        .branches
                        .pop()
                        .ok_or(ParseError::UnbalancedParenthesis(start))?;
                    self.prev = prev;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let number = self.ring_number()?;
                    self.ring_closure(number, start)?;
                }
                b'.' => {
                    if let Some(p) = self.pending {
                        return Err(ParseError::DanglingBond(p.pos));
                    }
                    if self.prev.is_none() {
                        return Err(ParseError::UnexpectedCharacter { pos: start, ch: '.' });
                    }
                    self.prev = None;
                    self.pos += 1;
                }
                b'A'..=b'Z' | b'a'..=b'z' | b'*' => return Err(ParseError::UnknownElement(start)),
                _ => {
                    return Err(ParseError::UnexpectedCharacter { pos: start, ch: c as char });
                }
            }
        }
        if let Some(p) = self.pending {
            return Err(ParseError::DanglingBond(p.pos));
        }
        if let Some(&(_, pos)) = self.branches.last() {
            return Err(ParseError::UnclosedBranch(pos));
        }
        if let Some(&(number, ..)) = self.rings.first() {
            return Err(ParseError::UnclosedRing(number));
        }
        if self.atoms.is_empty() {
            return Err(ParseError::EmptyInput);
        }
        Ok(MolGraph::new(self.atoms, self.bonds).expect("parser emits valid bonds"))
    }

    fn default_order(&self, a: usize, b: usize) -> BondOrder {
        if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn push_atom(&mut self, atom: Atom) {
        let idx = self.atoms.len();
        self.atoms.push(atom);
        if let Some(prev) = self.prev {
            let (order, stereo) = match self.pending.take() {
                Some(p) => (p.order, p.stereo),
                None => (self.default_order(prev, idx), BondStereo::None),
            };
            self.bonds.push(Bond { a: prev, b: idx, order, stereo });
        }
        self.prev = Some(idx);
    }

    fn ring_number(&mut self) -> Result<u16, ParseError> {
        let start = self.pos;
        let c = self.bytes[self.pos];
        if c == b'%' {
            let digits = self.bytes.get(self.pos + 1..self.pos + 3);
            match digits {
                Some([a, b]) if a.is_ascii_digit() && b.is_ascii_digit() => {
                    self.pos += 3;
                    Ok(((a - b'0') * 10 + (b - b'0')) as u16)
                }
                _ => Err(ParseError::UnexpectedCharacter { pos: start, ch: '%' }),
            }
        } else {
            self.pos += 1;
            Ok((c - b'0') as u16)
        }
    }

    fn ring_closure(&mut self, number: u16, start: usize) -> Result<(), ParseError> {
        let atom = self
            .prev
            .ok_or(ParseError::UnexpectedCharacter { pos: start, ch: self.bytes[start] as char })?;
        let pending = self.pending.take();
        if let Some(slot) = self.rings.iter().position(|r| r.0 == number) {
            let (_, open_atom, open_bond, _) = self.rings.remove(slot);
            if open_atom == atom
                || self.bonds.iter().any(|b| {
                    (b.a == atom && b.b == open_atom) || (b.a == open_atom && b.b == atom)
                })
            {
                return Err(ParseError::InvalidRingClosure(start));
            }
            let (order, stereo) = match (open_bond, pending) {
                (Some(o), Some(c)) => {
                    if o.order != c.order {
                        return Err(ParseError::RingBondConflict(start));
                    }
                    (o.order, o.stereo)
                }
                (Some(o), None) => (o.order, o.stereo),
                // A mark written at the closing digit reads closing -> opening.
                (None, Some(c)) => (c.order, c.stereo.flipped()),
                (None, None) => (self.default_order(open_atom, atom), BondStereo::None),
            };
            self.bonds.push(Bond { a: open_atom, b: atom, order, stereo });
        } else {
            self.rings.push((number, atom, pending, start));
        }
        Ok(())
    }

    fn bracket_atom(&mut self) -> Result<Atom, ParseError> {
        let open = self.pos;
        let close = self.bytes[open..]
            .iter()
            .position(|&b| b == b']')
            .map(|i| open + i)
            .ok_or(ParseError::UnclosedBracket(open))?;
        let body = &self.bytes[open + 1..close];
        self.pos = close + 1;
        let malformed = ParseError::MalformedBracket(open);
        let mut i = 0;

        let digits = |i: &mut usize| -> Option<u32> {
            let s = *i;
            while *i < body.len() && body[*i].is_ascii_digit() {
                *i += 1;
            }
            if *i == s {
                None
            } else {
                ascii_str(&body[s..*i]).parse().ok()
            }
        };

        let isotope = match digits(&mut i) {
            Some(0) => return Err(malformed),
            Some(v) => Some(u16::try_from(v).map_err(|_| malformed.clone())?),
            None => None,
        };

        // Element symbol: two letters if valid, else one.
        let (element, aromatic) = {
            let first = *body.get(i).ok_or(ParseError::UnknownElement(open))?;
            if first.is_ascii_lowercase() {
                if let Some(e) = body
                    .get(i..i + 2)
                    .and_then(|s| Element::from_aromatic_symbol(ascii_str(s)))
                {
                    i += 2;
                    (e, true)
                } else if let Some(e) = Element::from_aromatic_symbol(ascii_str(&[first])) {
                    i += 1;
                    (e, true)
                } else {
                    return Err(ParseError::UnknownElement(open + 1 + i));
                }
            } else if first.is_ascii_uppercase() {
                let two = body
                    .get(i..i + 2)
                    .filter(|s| s[1].is_ascii_lowercase())
                    .and_then(|s| Element::from_symbol(ascii_str(s)));
                if let Some(e) = two {
                    i += 2;
                    (e, false)
                } else if let Some(e) = Element::from_symbol(ascii_str(&[first])) {
                    i += 1;
                    (e, false)
                } else {
                    return Err(ParseError::UnknownElement(open + 1 + i));
                }
            } else {
                return Err(ParseError::UnknownElement(open + 1 + i));
            }
        };

        let mut chirality = Chirality::None;
        if body.get(i) == Some(&b'@') {
            i += 1;
            chirality = Chirality::CounterClockwise;
            if body.get(i) == Some(&b'@') {
                i += 1;
                chirality = Chirality::Clockwise;
            }
        }

        let mut h = 0u8;
        if body.get(i) == Some(&b'H') {
            i += 1;
            h = match digits(&mut i) {
                Some(v) => u8::try_from(v).map_err(|_| malformed.clone())?,
                None => 1,
            };
        }

        let mut charge: i32 = 0;
        if let Some(&sign @ (b'+' | b'-')) = body.get(i) {
            let unit = if sign == b'+' { 1 } else { -1 };
            i += 1;
            if let Some(v) = digits(&mut i) {
                charge = unit * v as i32;
            } else {
                charge = unit;
                while body.get(i) == Some(&sign) {
                    charge += unit;
                    i += 1;
                }
            }
        }
        let formal_charge = i8::try_from(charge).map_err(|_| malformed.clone())?;

        let mut map_class = None;
        if body.get(i) == Some(&b':') {
            i += 1;
            let v = digits(&mut i).ok_or(malformed.clone())?;
            map_class = Some(u16::try_from(v).map_err(|_| malformed.clone())?);
        }
        if i != body.len() {
            return Err(malformed);
        }
        Ok(Atom {
            element,
            aromatic,
            formal_charge,
            explicit_h: Some(h),
            isotope,
            chirality,
            map_class,
        })
    }
}

fn ascii_str(bytes: &[u8]) -> &str {
    core::str::from_utf8(bytes).expect("input is ASCII")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ethanol() {
        let g = parse_smiles("CCO").unwrap();
        assert_eq!(g.atom_count(), 3);
        let syms: Vec<_> = g.atoms().iter().map(|a| a.element.symbol()).collect();
        assert_eq!(syms, ["C", "C", "O"]);
        assert_eq!(g.bonds().len(), 2);
        assert!(g.bonds().iter().all(|b| b.order == BondOrder::Single));
    }

    #[test]
    fn cyclopropane_ring_members() {
        let g = parse_smiles("C1CC1").unwrap();
        assert_eq!(g.atom_count(), 3);
        assert_eq!(g.bonds().len(), 3);
        assert!(g.ring_membership().iter().all(|&r| r));
    }

    #[test]
    fn unclosed_ring() {
        assert_eq!(parse_smiles("C1CC"), Err(ParseError::UnclosedRing(1)));
    }

    #[test]
    fn error_kinds() {
        assert_eq!(parse_smiles(""), Err(ParseError::EmptyInput));
        assert_eq!(parse_smiles("C[NH"), Err(ParseError::UnclosedBracket(1)));
        assert_eq!(parse_smiles("CX"), Err(ParseError::UnknownElement(1)));
        assert_eq!(parse_smiles("C[Xx]"), Err(ParseError::UnknownElement(2)));
        assert_eq!(parse_smiles("CC="), Err(ParseError::DanglingBond(2)));
        assert_eq!(parse_smiles("=CC"), Err(ParseError::DanglingBond(0)));
        assert_eq!(parse_smiles("C(=)C"), Err(ParseError::DanglingBond(2)));
        assert_eq!(parse_smiles("CC)"), Err(ParseError::UnbalancedParenthesis(2)));
        assert_eq!(parse_smiles("C(C"), Err(ParseError::UnclosedBranch(1)));
        assert_eq!(parse_smiles("C11"), Err(ParseError::InvalidRingClosure(2)));
        assert_eq!(parse_smiles("C=1CC#1"), Err(ParseError::RingBondConflict(6)));
        assert_eq!(parse_smiles("CCé"), Err(ParseError::NonAscii(2)));
    }

    #[test]
    fn bracket_atoms() {
        let g = parse_smiles("[13CH3:2][N+](C)(C)C.[Cl-]").unwrap();
        let a = &g.atoms()[0];
        assert_eq!(a.isotope, Some(13));
        assert_eq!(a.explicit_h, Some(3));
        assert_eq!(a.map_class, Some(2));
        assert_eq!(g.atoms()[1].formal_charge, 1);
        assert_eq!(g.atoms()[5].formal_charge, -1);
        assert_eq!(g.component_count(), 2);
        let g = parse_smiles("[C@@H](F)(Cl)Br").unwrap();
        assert_eq!(g.atoms()[0].chirality, Chirality::Clockwise);
        let g = parse_smiles("[Fe++]").unwrap();
        assert_eq!(g.atoms()[0].formal_charge, 2);
        let g = parse_smiles("[se]1cccc1").unwrap();
        assert!(g.atoms()[0].aromatic);
        assert_eq!(g.atoms()[0].element.symbol(), "Se");
    }

    #[test]
    fn bonds_and_rings() {
        let g = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        let single = g.bonds().iter().filter(|b| b.order == BondOrder::Single).count();
        assert_eq!(single, 1);
        let g = parse_smiles("C%12CC%12").unwrap();
        assert_eq!(g.bonds().len(), 3);
        let g = parse_smiles("C=1CCC1").unwrap();
        assert_eq!(g.bonds()[3].order, BondOrder::Double);
        let g = parse_smiles("F/C=C/F").unwrap();
        assert_eq!(g.bonds()[0].stereo, BondStereo::Up);
    }

    #[test]
    fn strict_mode_rejects_pentavalent_carbon() {
        assert!(parse_smiles("C(C)(C)(C)(C)C").is_ok());
        assert!(matches!(
            parse_smiles_strict("C(C)(C)(C)(C)C"),
            Err(ParseError::SuperValent { atom: 0, .. })
        ));
        assert!(parse_smiles_strict("C[N+](C)(C)C").is_ok());
        assert!(parse_smiles_strict("c1ccccc1O").is_ok());
    }
}
