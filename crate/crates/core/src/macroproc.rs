//! Argumented macros with qualifier-scoped alternative definitions.
//!
//! A macro is invoked as `@NAME(arg, ...)` and its body refers to
//! parameters as `$(param)`. Definitions live under a qualifier path
//! (e.g. `["default"]`, `["gpu"]`, `["gpu", "tiled"]`); arbitration walks
//! from the active path toward `["default"]` along the inheritance
//! relation and picks the first path that defines the name. A child path
//! may redefine any subset of names; unlisted names inherit.
//!
//! Definition files are sectioned text:
//!
//! ```text
//! [default]
//! HALO() = 2
//! IDX(i, j) = ($(i)) + ($(j))*@PITCH()
//! [gpu]
//! inherit default
//! HALO() = 4
//! ```

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

/// Ordered qualifier key path, most general segment first.
pub type QualifierPath = Vec<String>;

/// Backstop behind the self-reference detector; hitting it is an internal
/// error, not a feature.
const RECURSION_LIMIT: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MacroError {
    #[error("macro `{name}` is undefined (searched down to [default])")]
    Undefined { name: String },
    #[error("macro `{name}` has two candidate definitions at [{path}]")]
    Ambiguous { name: String, path: String },
    #[error("self-referential expansion of `{name}` (chain: {chain})")]
    SelfReference { name: String, chain: String },
    #[error("macro `{name}` expects {expected} argument(s), got {got}")]
    ArityMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("malformed macro input: {0}")]
    Malformed(String),
    #[error("inheritance cycle at [{path}]")]
    InheritanceCycle { path: String },
    #[error("internal macro error: {0}")]
    Internal(String),
}

/// One candidate definition of a macro name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacroDefinition {
    pub name: String,
    pub params: Vec<String>,
    pub body: String,
    pub qualifiers: QualifierPath,
}

fn path_str(path: &[String]) -> String {
    path.join(".")
}

/// A multi-map of macro definitions plus the inheritance relation between
/// qualifier paths. Immutable once built; expansion is a pure function.
#[derive(Debug, Clone, Default)]
pub struct DefinitionSet {
    defs: BTreeMap<String, Vec<MacroDefinition>>,
    inheritance: BTreeMap<QualifierPath, QualifierPath>,
    sections: BTreeSet<QualifierPath>,
}

impl DefinitionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.defs.keys().map(String::as_str)
    }

    pub fn definitions(&self, name: &str) -> &[MacroDefinition] {
        self.defs.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Adds a definition after validating its parameter list and body.
    pub fn add(&mut self, def: MacroDefinition) -> Result<(), MacroError> {
        if def.qualifiers.is_empty() {
            return Err(MacroError::Malformed(format!(
                "macro `{}` has an empty qualifier path",
                def.name
            )));
        }
        if !is_ident(&def.name) {
            return Err(MacroError::Malformed(format!(
                "invalid macro name `{}`",
                def.name
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &def.params {
            if !is_ident(p) {
                return Err(MacroError::Malformed(format!(
                    "invalid parameter `{p}` of macro `{}`",
                    def.name
                )));
            }
            if !seen.insert(p) {
                return Err(MacroError::Malformed(format!(
                    "duplicate parameter `{p}` of macro `{}`",
                    def.name
                )));
            }
        }
        for referenced in body_param_refs(&def.body) {
            if !def.params.contains(&referenced) {
                return Err(MacroError::Malformed(format!(
                    "body of `{}` references undeclared parameter `{referenced}`",
                    def.name
                )));
            }
        }
        self.sections.insert(def.qualifiers.clone());
        self.defs.entry(def.name.clone()).or_default().push(def);
        Ok(())
    }

    /// Declares `child` to inherit from `parent`, keeping the relation a
    /// forest.
    pub fn set_parent(
        &mut self,
        child: QualifierPath,
        parent: QualifierPath,
    ) -> Result<(), MacroError> {
        self.sections.insert(child.clone());
        self.sections.insert(parent.clone());
        self.inheritance.insert(child.clone(), parent);
        // reject cycles introduced by the new edge
        let mut cur = child.clone();
        for _ in 0..RECURSION_LIMIT {
            match self.parent_of(&cur) {
                Some(p) => {
                    if p == child {
                        self.inheritance.remove(&child);
                        return Err(MacroError::InheritanceCycle {
                            path: path_str(&child),
                        });
                    }
                    cur = p;
                }
                None => return Ok(()),
            }
        }
        self.inheritance.remove(&child);
        Err(MacroError::InheritanceCycle {
            path: path_str(&child),
        })
    }

    /// The next path toward `["default"]`: the explicit parent when one is
    /// declared, otherwise the path with its last segment dropped.
    fn parent_of(&self, path: &[String]) -> Option<QualifierPath> {
        if path == [DEFAULT] {
            return None;
        }
        if let Some(p) = self.inheritance.get(path) {
            return Some(p.clone());
        }
        if path.len() > 1 {
            Some(path[..path.len() - 1].to_vec())
        } else {
            Some(vec![DEFAULT.to_owned()])
        }
    }

    /// Selects the definition of `name` visible from `active_qualifiers`.
    pub fn arbitrate(
        &self,
        name: &str,
        active_qualifiers: &[String],
    ) -> Result<&MacroDefinition, MacroError> {
        let candidates = self.definitions(name);
        if candidates.is_empty() {
            return Err(MacroError::Undefined {
                name: name.to_owned(),
            });
        }
        let mut path: QualifierPath = if active_qualifiers.is_empty() {
            vec![DEFAULT.to_owned()]
        } else {
            active_qualifiers.to_vec()
        };
        for _ in 0..RECURSION_LIMIT {
            let here: Vec<&MacroDefinition> = candidates
                .iter()
                .filter(|d| d.qualifiers == path)
                .collect();
            match here.len() {
                0 => {}
                1 => return Ok(here[0]),
                _ => {
                    return Err(MacroError::Ambiguous {
                        name: name.to_owned(),
                        path: path_str(&path),
                    })
                }
            }
            match self.parent_of(&path) {
                Some(p) => path = p,
                None => {
                    return Err(MacroError::Undefined {
                        name: name.to_owned(),
                    })
                }
            }
        }
        Err(MacroError::Internal(format!(
            "arbitration walk for `{name}` did not reach [default]"
        )))
    }

    /// Expands every `@NAME(args)` invocation in `text` to a fixed point,
    /// depth-first, rejecting direct or mutual self-reference.
    pub fn expand(&self, text: &str, active_qualifiers: &[String]) -> Result<String, MacroError> {
        let mut chain = Vec::new();
        self.expand_inner(text, active_qualifiers, &mut chain)
    }

    fn expand_inner(
        &self,
        text: &str,
        active: &[String],
        chain: &mut Vec<String>,
    ) -> Result<String, MacroError> {
        if chain.len() > RECURSION_LIMIT {
            return Err(MacroError::Internal(format!(
                "expansion exceeded the recursion limit of {RECURSION_LIMIT}"
            )));
        }
        let bytes = text.as_bytes();
        let mut out = String::with_capacity(text.len());
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'@' {
                if let Some((name, args, end)) = scan_invocation(text, i)? {
                    if chain.iter().any(|c| c == &name) {
                        let mut full = chain.clone();
                        full.push(name.clone());
                        return Err(MacroError::SelfReference {
                            name,
                            chain: full.join(" -> "),
                        });
                    }
                    let def = self.arbitrate(&name, active)?;
                    if def.params.len() != args.len() {
                        return Err(MacroError::ArityMismatch {
                            name,
                            expected: def.params.len(),
                            got: args.len(),
                        });
                    }
                    let substituted = substitute(&def.body, &def.params, &args);
                    chain.push(name);
                    let expanded = self.expand_inner(&substituted, active, chain)?;
                    chain.pop();
                    out.push_str(&expanded);
                    i = end;
                    continue;
                }
            }
            let ch = text[i..].chars().next().expect("in-bounds char");
            out.push(ch);
            i += ch.len_utf8();
        }
        Ok(out)
    }

    /// Parses a sectioned definition file.
    pub fn parse(text: &str) -> Result<Self, MacroError> {
        let mut set = DefinitionSet::new();
        let mut section: QualifierPath = vec![DEFAULT.to_owned()];
        let mut lines = text.lines().enumerate().peekable();
        while let Some((lineno, raw)) = lines.next() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let Some(inner) = inner.strip_suffix(']') else {
                    return Err(MacroError::Malformed(format!(
                        "line {}: unterminated section header",
                        lineno + 1
                    )));
                };
                section = parse_path(inner, lineno + 1)?;
                set.sections.insert(section.clone());
                continue;
            }
            if let Some(parent) = line.strip_prefix("inherit ") {
                let parent = parse_path(parent.trim(), lineno + 1)?;
                set.set_parent(section.clone(), parent)?;
                continue;
            }
            // definition: NAME(params) = body, with `\` continuation
            let mut full = raw.trim_end().to_owned();
            while full.ends_with('\\') {
                full.pop();
                match lines.next() {
                    Some((_, next)) => {
                        full.push('\n');
                        full.push_str(next.trim_end());
                    }
                    None => {
                        return Err(MacroError::Malformed(format!(
                            "line {}: continuation at end of file",
                            lineno + 1
                        )))
                    }
                }
            }
            let def = parse_definition(&full, &section, lineno + 1)?;
            set.add(def)?;
        }
        Ok(set)
    }
}

const DEFAULT: &str = "default";

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_path(s: &str, line: usize) -> Result<QualifierPath, MacroError> {
    let parts: Vec<String> = s.split('.').map(|p| p.trim().to_owned()).collect();
    if parts.is_empty() || parts.iter().any(|p| !is_ident(p)) {
        return Err(MacroError::Malformed(format!(
            "line {line}: invalid qualifier path `{s}`"
        )));
    }
    Ok(parts)
}

fn parse_definition(
    line: &str,
    section: &[String],
    lineno: usize,
) -> Result<MacroDefinition, MacroError> {
    let trimmed = line.trim();
    let open = trimmed.find('(').ok_or_else(|| {
        MacroError::Malformed(format!("line {lineno}: expected `NAME(params) = body`"))
    })?;
    let name = trimmed[..open].trim().to_owned();
    let close = trimmed[open..].find(')').ok_or_else(|| {
        MacroError::Malformed(format!("line {lineno}: unclosed parameter list"))
    })? + open;
    let params_src = trimmed[open + 1..close].trim();
    let params: Vec<String> = if params_src.is_empty() {
        Vec::new()
    } else {
        params_src.split(',').map(|p| p.trim().to_owned()).collect()
    };
    let rest = trimmed[close + 1..].trim_start();
    let body = rest.strip_prefix('=').ok_or_else(|| {
        MacroError::Malformed(format!("line {lineno}: missing `=` in definition"))
    })?;
    Ok(MacroDefinition {
        name,
        params,
        body: body.trim_start().to_owned(),
        qualifiers: section.to_vec(),
    })
}

/// Collects `$(ident)` references in a body.
fn body_param_refs(body: &str) -> Vec<String> {
    let bytes = body.as_bytes();
    let mut refs = Vec::new();
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'$' && bytes[i + 1] == b'(' {
            if let Some(close) = body[i + 2..].find(')') {
                let name = &body[i + 2..i + 2 + close];
                if is_ident(name) {
                    refs.push(name.to_owned());
                }
                i += 2 + close + 1;
                continue;
            }
        }
        i += 1;
    }
    refs
}

fn substitute(body: &str, params: &[String], args: &[String]) -> String {
    let mut out = String::with_capacity(body.len());
    let bytes = body.as_bytes();
    let mut i = 0;
    'outer: while i < bytes.len() {
        if bytes[i] == b'$' && i + 1 < bytes.len() && bytes[i + 1] == b'(' {
            if let Some(close) = body[i + 2..].find(')') {
                let name = &body[i + 2..i + 2 + close];
                for (p, a) in params.iter().zip(args) {
                    if p == name {
                        out.push_str(a);
                        i += 2 + close + 1;
                        continue 'outer;
                    }
                }
            }
        }
        let ch = body[i..].chars().next().expect("in-bounds char");
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

/// If `pos` starts a well-formed invocation, returns (name, args, end).
/// `@` followed by anything else is kept as literal text.
fn scan_invocation(
    text: &str,
    pos: usize,
) -> Result<Option<(String, Vec<String>, usize)>, MacroError> {
    let bytes = text.as_bytes();
    let mut i = pos + 1;
    let start = i;
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
        i += 1;
    }
    if i == start || !is_ident(&text[start..i]) {
        return Ok(None);
    }
    if bytes.get(i) != Some(&b'(') {
        return Ok(None);
    }
    let name = text[start..i].to_owned();
    let mut depth = 1usize;
    let args_start = i + 1;
    let mut args = Vec::new();
    let mut cur_start = args_start;
    i += 1;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 {
                    let last = text[cur_start..i].trim();
                    if !(args.is_empty() && last.is_empty()) {
                        args.push(last.to_owned());
                    }
                    return Ok(Some((name, args, i + 1)));
                }
            }
            b',' if depth == 1 => {
                args.push(text[cur_start..i].trim().to_owned());
                cur_start = i + 1;
            }
            _ => {}
        }
        i += 1;
    }
    Err(MacroError::Malformed(format!(
        "unbalanced parentheses in invocation of `@{name}`"
    )))
}
