use alloc::string::String;
use alloc::vec::Vec;

use hashbrown::HashMap;
use rand::seq::SliceRandom;

use super::{parse_smiles, scaffold_key, ParseError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("split fractions must be positive and sum to 1, got ({0}, {1}, {2})")]
    InvalidFractions(f64, f64, f64),
}

/// Row indices per split, plus rows that failed to parse.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScaffoldSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub rejected: Vec<(usize, ParseError)>,
}

impl ScaffoldSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// Groups rows by canonical scaffold (acyclic molecules share the empty
/// scaffold) and fills train, then valid, then test with whole groups,
/// largest group first. `seed` orders groups of equal size. The first
/// group always goes to train, so a single-scaffold corpus is all train.
pub fn scaffold_split<S: AsRef<str>>(
    smiles: &[S],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<ScaffoldSplit, SplitError> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(SplitError::InvalidFractions(ft, fv, fs));
    }
    let mut out = ScaffoldSplit::default();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (row, s) in smiles.iter().enumerate() {
        match parse_smiles(s.as_ref()) {
            Ok(g) => {
                let key = scaffold_key(&g);
                let gi = *index.entry(key).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[gi].push(row);
            }
            Err(e) => out.rejected.push((row, e)),
        }
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let mut rng = crate::rng::seeded(seed);
    groups.shuffle(&mut rng);
    groups.sort_by(|a, b| b.len().cmp(&a.len()));

    let eps = 1e-9;
    let train_cut = ft * n as f64 + eps;
    let valid_cut = fv * n as f64 + eps;
    for group in groups {
        if out.train.is_empty() || ((out.train.len() + group.len()) as f64) <= train_cut {
            out.train.extend(group);
        } else if ((out.valid.len() + group.len()) as f64) <= valid_cut {
            out.valid.extend(group);
        } else {
            out.test.extend(group);
        }
    }
    out.train.sort_unstable();
    out.valid.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_scaffold_all_train() {
        let rows = ["Cc1ccccc1", "Oc1ccccc1", "c1ccccc1N", "c1ccccc1"];
        let s = scaffold_split(&rows, (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!(s.sizes(), (4, 0, 0));
    }

    #[test]
    fn unique_scaffolds_eight_one_one() {
        let rows = [
            "c1ccccc1", "C1CC1", "C1CCC1", "C1CCCC1", "C1CCCCC1", "C1CCCCCC1", "c1ccncc1",
            "c1ccoc1", "c1ccsc1", "C1CCNCC1",
        ];
        let s = scaffold_split(&rows, (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
    }

    #[test]
    fn rejected_rows_reported() {
        let rows = ["CCO", "C1CC", "c1ccccc1"];
        let s = scaffold_split(&rows, (0.5, 0.25, 0.25), 0).unwrap();
        assert_eq!(s.rejected.len(), 1);
        assert_eq!(s.rejected[0].0, 1);
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), 2);
    }

    #[test]
    fn bad_fractions() {
        assert!(scaffold_split(&["C"], (0.5, 0.5, 0.5), 0).is_err());
        assert!(scaffold_split(&["C"], (1.0, 0.0, 0.0), 0).is_err());
    }
}
