//! Micro-language for scratch extent and bound expressions.
//!
//! Annotations carry sizes like `(nxb)+1` as verbatim strings; they are
//! evaluated against a mesh parameter table only when a concrete layout is
//! needed. The grammar is deliberately tiny: integer literals, identifiers
//! from the parameter table, `+ - *`, and parentheses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mesh parameters visible to extent expressions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshParams {
    /// Interior cells per block along x.
    pub nxb: usize,
    /// Interior cells per block along y.
    pub nyb: usize,
    /// Halo (guardcell) width.
    pub nguard: usize,
    /// Number of registered mesh variables.
    pub nvars: usize,
}

impl MeshParams {
    pub fn table(&self) -> BTreeMap<String, i64> {
        BTreeMap::from([
            ("nxb".to_owned(), self.nxb as i64),
            ("nyb".to_owned(), self.nyb as i64),
            ("nguard".to_owned(), self.nguard as i64),
            ("nvars".to_owned(), self.nvars as i64),
        ])
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExprError {
    #[error("expression syntax error at byte {pos} in `{expr}`: {msg}")]
    Syntax {
        expr: String,
        pos: usize,
        msg: String,
    },
    #[error("unknown identifier `{name}` in `{expr}`")]
    UnknownIdentifier { expr: String, name: String },
}

/// Evaluates an extent expression against a parameter table.
pub fn eval(expr: &str, params: &BTreeMap<String, i64>) -> Result<i64, ExprError> {
    let mut p = Parser {
        src: expr,
        bytes: expr.as_bytes(),
        pos: 0,
        params,
    };
    let v = p.sum()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return Err(p.err("trailing input"));
    }
    Ok(v)
}

/// Evaluates an extent expression expected to produce a positive size.
pub fn eval_positive(expr: &str, params: &BTreeMap<String, i64>) -> Result<u64, ExprError> {
    let v = eval(expr, params)?;
    if v <= 0 {
        return Err(ExprError::Syntax {
            expr: expr.to_owned(),
            pos: 0,
            msg: format!("extent evaluates to non-positive value {v}"),
        });
    }
    Ok(v as u64)
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    params: &'a BTreeMap<String, i64>,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> ExprError {
        ExprError::Syntax {
            expr: self.src.to_owned(),
            pos: self.pos,
            msg: msg.to_owned(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn sum(&mut self) -> Result<i64, ExprError> {
        let mut acc = self.product()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc += self.product()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc -= self.product()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn product(&mut self) -> Result<i64, ExprError> {
        let mut acc = self.atom()?;
        while let Some(b'*') = self.peek() {
            self.pos += 1;
            acc *= self.atom()?;
        }
        Ok(acc)
    }

    fn atom(&mut self) -> Result<i64, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let v = self.sum()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(v)
            }
            Some(b'-') => {
                self.pos += 1;
                Ok(-self.atom()?)
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self
                    .bytes
                    .get(self.pos)
                    .is_some_and(|b| b.is_ascii_digit())
                {
                    self.pos += 1;
                }
                self.src[start..self.pos]
                    .parse::<i64>()
                    .map_err(|e| self.err(&e.to_string()))
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self
                    .bytes
                    .get(self.pos)
                    .is_some_and(|b| b.is_ascii_alphanumeric() || *b == b'_')
                {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                self.params
                    .get(name)
                    .copied()
                    .ok_or_else(|| ExprError::UnknownIdentifier {
                        expr: self.src.to_owned(),
                        name: name.to_owned(),
                    })
            }
            _ => Err(self.err("expected literal, identifier, or `(`")),
        }
    }
}
