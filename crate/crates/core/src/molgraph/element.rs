use core::fmt;

const SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// A chemical element, stored as its atomic number.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

impl Element {
    pub const HYDROGEN: Element = Element(1);
    pub const BORON: Element = Element(5);
    pub const CARBON: Element = Element(6);
    pub const NITROGEN: Element = Element(7);
    pub const OXYGEN: Element = Element(8);
    pub const FLUORINE: Element = Element(9);
    pub const PHOSPHORUS: Element = Element(15);
    pub const SULFUR: Element = Element(16);
    pub const CHLORINE: Element = Element(17);
    pub const BROMINE: Element = Element(35);
    pub const IODINE: Element = Element(53);

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        (1..=118).contains(&z).then_some(Element(z))
    }

    /// Case-sensitive lookup of a capitalized symbol (`"Cl"`, not `"cl"`).
    pub fn from_symbol(symbol: &str) -> Option<Element> {
        SYMBOLS
            .iter()
            .position(|&s| s == symbol)
            .map(|i| Element(i as u8 + 1))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn symbol(self) -> &'static str {
        SYMBOLS[self.0 as usize - 1]
    }

    /// Lowercase spelling used for aromatic atoms, if the element may be
    /// written aromatic at all.
    pub fn aromatic_symbol(self) -> Option<&'static str> {
        Some(match self.0 {
            5 => "b",
            6 => "c",
            7 => "n",
            8 => "o",
            15 => "p",
            16 => "s",
            33 => "as",
            34 => "se",
            52 => "te",
            _ => return None,
        })
    }

    pub fn from_aromatic_symbol(symbol: &str) -> Option<Element> {
        Some(match symbol {
            "b" => Element(5),
            "c" => Element(6),
            "n" => Element(7),
            "o" => Element(8),
            "p" => Element(15),
            "s" => Element(16),
            "as" => Element(33),
            "se" => Element(34),
            "te" => Element(52),
            _ => return None,
        })
    }

    /// Whether the atom may be written without brackets.
    pub fn is_organic_subset(self, aromatic: bool) -> bool {
        if aromatic {
            matches!(self.0, 5 | 6 | 7 | 8 | 15 | 16)
        } else {
            matches!(self.0, 5 | 6 | 7 | 8 | 9 | 15 | 16 | 17 | 35 | 53)
        }
    }

    /// Default valences used for implicit hydrogens. Empty for elements
    /// outside the organic subset.
    pub fn default_valences(self) -> &'static [u32] {
        match self.0 {
            5 => &[3],
            6 => &[4],
            7 => &[3, 5],
            8 => &[2],
            15 => &[3, 5],
            16 => &[2, 4, 6],
            9 | 17 | 35 | 53 => &[1],
            _ => &[],
        }
    }

    /// Largest valence accepted in strict parsing mode.
    pub fn max_valence(self) -> Option<u32> {
        Some(match self.0 {
            1 => 1,
            5 => 3,
            6 => 4,
            7 => 5,
            8 => 2,
            9 => 1,
            14 => 4,
            15 => 5,
            16 => 6,
            17 | 35 | 53 => 7,
            _ => return None,
        })
    }
}

impl fmt::Debug for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_table_round_trips() {
        for z in 1..=118u8 {
            let e = Element::from_atomic_number(z).unwrap();
            assert_eq!(Element::from_symbol(e.symbol()), Some(e));
        }
        assert_eq!(Element::from_symbol("Cl"), Some(Element::CHLORINE));
        assert_eq!(Element::from_symbol("cl"), None);
        assert_eq!(Element::from_aromatic_symbol("se").unwrap().symbol(), "Se");
    }
}
