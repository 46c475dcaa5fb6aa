use alloc::vec::Vec;

use super::TokenizerError;

/// Splits SMILES into chemically meaningful symbols: a whole bracket atom,
/// `Cl`/`Br`, a `%nn` ring closure, or any other single character.
/// Concatenating the output reproduces `text`.
pub fn rule_tokenize(text: &str) -> Result<Vec<&str>, TokenizerError> {
    rule_spans(text).map(|spans| spans.into_iter().map(|(s, e)| &text[s..e]).collect())
}

/// Byte spans of the symbols produced by [`rule_tokenize`].
pub fn rule_spans(text: &str) -> Result<Vec<(usize, usize)>, TokenizerError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let len = match c {
            b'[' => {
                let close = bytes[i..]
                    .iter()
                    .position(|&b| b == b']')
                    .ok_or(TokenizerError::UnclosedBracket(i))?;
                close + 1
            }
            b'C' if bytes.get(i + 1) == Some(&b'l') => 2,
            b'B' if bytes.get(i + 1) == Some(&b'r') => 2,
            b'%' => match bytes.get(i + 1..i + 3) {
                Some([a, b]) if a.is_ascii_digit() && b.is_ascii_digit() => 3,
                _ => return Err(TokenizerError::IllegalCharacter { pos: i, ch: '%' }),
            },
            b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' | b'b' | b'c' | b'n' | b'o'
            | b'p' | b's' | b'*' | b'-' | b'=' | b'#' | b'$' | b':' | b'/' | b'\\' | b'('
            | b')' | b'.' | b'0'..=b'9' => 1,
            _ => {
                let ch = text[i..].chars().next().expect("in bounds");
                return Err(TokenizerError::IllegalCharacter { pos: i, ch });
            }
        };
        out.push((i, i + len));
        i += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_char_element() {
        assert_eq!(rule_tokenize("CCl").unwrap(), ["C", "Cl"]);
        assert_eq!(rule_tokenize("BrCC").unwrap(), ["Br", "C", "C"]);
    }

    #[test]
    fn bracket_atom_is_one_symbol() {
        assert_eq!(
            rule_tokenize("[nH]1cccc1").unwrap(),
            ["[nH]", "1", "c", "c", "c", "c", "1"]
        );
    }

    #[test]
    fn percent_ring_closure() {
        assert_eq!(rule_tokenize("C%12CC%12").unwrap(), ["C", "%12", "C", "C", "%12"]);
    }

    #[test]
    fn errors() {
        assert_eq!(rule_tokenize("C[NH"), Err(TokenizerError::UnclosedBracket(1)));
        assert_eq!(
            rule_tokenize("CXC"),
            Err(TokenizerError::IllegalCharacter { pos: 1, ch: 'X' })
        );
        assert!(rule_tokenize("C%1").is_err());
    }
}
