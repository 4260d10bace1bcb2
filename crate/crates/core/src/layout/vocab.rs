use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary index of a single character.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Character-level vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    lookup: [Option<u32>; 128],
}

impl Vocab {
    /// Newline followed by the 95 printable ASCII characters.
    pub fn printable_ascii() -> Self {
        let chars: Vec<char> = std::iter::once('\n').chain(' '..='~').collect();
        Self::from_chars(chars).expect("printable ascii is a valid vocabulary")
    }

    /// Only ASCII characters are supported; duplicates are rejected.
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut lookup = [None; 128];
        for (i, &c) in chars.iter().enumerate() {
            if !c.is_ascii() {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary character {c:?} is not ascii"
                )));
            }
            let slot = &mut lookup[c as usize];
            if slot.is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary character {c:?}"
                )));
            }
            *slot = Some(i as u32);
        }
        Ok(Self { chars, lookup })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn token_of(&self, c: char) -> Result<Token> {
        if c.is_ascii() {
            if let Some(id) = self.lookup[c as usize] {
                return Ok(Token(id));
            }
        }
        Err(Error::UnknownCharacter(c))
    }

    pub fn char_of(&self, token: Token) -> char {
        self.chars[token.index()]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        text.chars().map(|c| self.token_of(c)).collect()
    }

    pub fn detokenize(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.char_of(t)).collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::printable_ascii()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::SeededRng;

    #[test]
    fn empty_and_repeats() {
        let v = Vocab::default();
        assert!(v.tokenize("").unwrap().is_empty());
        let t = v.tokenize("AAB").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0], t[1]);
        assert_ne!(t[1], t[2]);
    }

    #[test]
    fn unknown_character_is_named() {
        let err = Vocab::default().tokenize("ab\tc").unwrap_err();
        assert!(matches!(err, Error::UnknownCharacter('\t')));
        assert!(err.to_string().contains("'\\t'"));
    }

    #[test]
    fn random_round_trip() {
        let v = Vocab::default();
        let mut rng = SeededRng::new(1);
        for _ in 0..100 {
            let len = rng.range_inclusive(0, 40);
            let s: String = (0..len)
                .map(|_| v.char_of(Token(rng.range_inclusive(0, v.len() - 1) as u32)))
                .collect();
            assert_eq!(v.detokenize(&v.tokenize(&s).unwrap()), s);
        }
    }

    #[test]
    fn rejects_duplicate_characters() {
        assert!(Vocab::from_chars(vec!['a', 'a']).is_err());
        assert!(Vocab::from_chars(vec!['é']).is_err());
    }
}
