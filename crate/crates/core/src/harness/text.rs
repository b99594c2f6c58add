//! Character inventory of the synthetic task and text/label conversion.

use crate::error::{Error, Result};

/// Letters in id order, starting at [`FIRST_LETTER`].
pub const LETTERS: &str = "abcdefghi";
pub const BLANK: usize = 0;
pub const SPACE: usize = 1;
pub const FIRST_LETTER: usize = 2;
/// Start and end of sentence share the last id.
pub const EOS: usize = FIRST_LETTER + LETTERS.len();
pub const VOCAB_SIZE: usize = EOS + 1;

pub fn letter_index(c: char) -> Option<usize> {
    LETTERS.chars().position(|l| l == c)
}

/// Label ids of `text`; words are separated by single spaces.
pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| match c {
            ' ' => Ok(SPACE),
            c => letter_index(c).map(|i| FIRST_LETTER + i).ok_or_else(|| Error::InvalidArgument(format!("character `{c}` not in the inventory"))),
        })
        .collect()
}

/// Inverse of [`encode`]; blank, sos/eos and unknown ids are skipped.
pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .filter_map(|&i| match i {
            SPACE => Some(' '),
            i if (FIRST_LETTER..EOS).contains(&i) => LETTERS.chars().nth(i - FIRST_LETTER),
            _ => None,
        })
        .collect()
}

pub fn words(text: &str) -> Vec<&str> {
    text.split(' ').filter(|w| !w.is_empty()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ids = encode("abc ih").unwrap();
        assert_eq!(ids, vec![2, 3, 4, 1, 10, 9]);
        assert_eq!(decode(&ids), "abc ih");
        assert_eq!(VOCAB_SIZE, 12);
        assert!(encode("abz").is_err());
        assert_eq!(decode(&[EOS, 2, BLANK, 3, EOS]), "ab");
        assert_eq!(words(" ab  c "), vec!["ab", "c"]);
    }
}
