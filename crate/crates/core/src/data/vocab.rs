use serde::{Deserialize, Serialize};

use crate::error::{PktError, Result};

use super::corpus::{Fact, WorldSpec};

/// Atomic-symbol vocabulary: `=`, then `e<i>`, `r<j>` (base and alias), `v<k>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_entities: usize,
    /// Base relations; alias relations occupy ids `n_relations..2·n_relations`.
    pub n_relations: usize,
    pub n_values: usize,
}

pub const EQUALS: u32 = 0;

impl Vocab {
    pub fn new(spec: &WorldSpec) -> Self {
        Vocab { n_entities: spec.n_entities, n_relations: spec.n_relations, n_values: spec.n_values }
    }

    pub fn size(&self) -> usize {
        1 + self.n_entities + 2 * self.n_relations + self.n_values
    }

    pub fn entity(&self, i: u32) -> u32 {
        1 + i
    }

    pub fn relation(&self, j: u32) -> u32 {
        1 + self.n_entities as u32 + j
    }

    pub fn value(&self, k: u32) -> u32 {
        1 + (self.n_entities + 2 * self.n_relations) as u32 + k
    }

    pub fn prompt(&self, f: &Fact) -> Vec<u32> {
        vec![self.entity(f.entity), self.relation(f.relation), EQUALS]
    }

    pub fn answer(&self, f: &Fact) -> u32 {
        self.value(f.value)
    }

    /// Token ids of every value symbol, in order.
    pub fn value_tokens(&self) -> std::ops::Range<u32> {
        self.value(0)..self.value(self.n_values as u32)
    }

    pub fn symbol(&self, token: u32) -> Result<String> {
        let t = token as usize;
        let (e, r) = (self.n_entities, 2 * self.n_relations);
        Ok(match t {
            0 => "=".to_string(),
            _ if t <= e => format!("e{}", t - 1),
            _ if t <= e + r => format!("r{}", t - 1 - e),
            _ if t < self.size() => format!("v{}", t - 1 - e - r),
            _ => return Err(PktError::Token { token, vocab: self.size() }),
        })
    }

    pub fn token(&self, symbol: &str) -> Result<u32> {
        let bad = || PktError::Data(format!("unknown symbol `{symbol}`"));
        if symbol == "=" {
            return Ok(EQUALS);
        }
        let (kind, rest) = symbol.split_at(symbol.char_indices().nth(1).map(|(i, _)| i).unwrap_or(symbol.len()));
        if rest.is_empty() || (rest.len() > 1 && rest.starts_with('0')) {
            return Err(bad());
        }
        let n: u32 = rest.parse().map_err(|_| bad())?;
        match kind {
            "e" if (n as usize) < self.n_entities => Ok(self.entity(n)),
            "r" if (n as usize) < 2 * self.n_relations => Ok(self.relation(n)),
            "v" if (n as usize) < self.n_values => Ok(self.value(n)),
            _ => Err(bad()),
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|s| self.token(s)).collect()
    }

    pub fn detokenize(&self, tokens: &[u32]) -> Result<String> {
        let parts: Result<Vec<String>> = tokens.iter().map(|&t| self.symbol(t)).collect();
        Ok(parts?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab { n_entities: 10, n_relations: 4, n_values: 20 }
    }

    #[test]
    fn prompt_format() {
        let v = vocab();
        let f = Fact { entity: 7, relation: 3, value: 12 };
        assert_eq!(v.detokenize(&v.prompt(&f)).unwrap(), "e7 r3 =");
        assert_eq!(v.symbol(v.answer(&f)).unwrap(), "v12");
        assert_eq!(v.tokenize("e7 r3 =").unwrap(), v.prompt(&f));
    }

    #[test]
    fn rejects_unknown_symbols() {
        let v = vocab();
        for s in ["e10", "r8", "v20", "x1", "e", "e01", "=="] {
            assert!(v.token(s).is_err(), "{s}");
        }
        assert!(v.symbol(v.size() as u32).is_err());
    }
}
