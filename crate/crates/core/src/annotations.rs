//! Structured comment annotations at kernel routine declarations.
//!
//! The parser never looks at the host language: it only reads lines whose
//! first non-blank token is the configured comment sentinel, between
//! `<sentinel> milhoja begin` and `<sentinel> milhoja end`. Everything else
//! in the file is ignored, so the static code body can change freely
//! without affecting the extracted specification.
//!
//! Grammar (line oriented, two nesting levels):
//!
//! ```text
//! block     = sentinel "milhoja begin" NL {entry} sentinel "milhoja end"
//! entry     = sentinel key ":" value NL [indented sub-entries]
//! ```
//!
//! Top-level keys are `routine`, `devices`, and `argument`; indented
//! sub-entries describe the most recent `argument`.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::device::DeviceTarget;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("annotation syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("duplicate argument `{name}` at line {line}")]
    DuplicateArgument { name: String, line: usize },
    #[error("unknown source kind `{kind}` at line {line}")]
    UnknownSourceKind { kind: String, line: usize },
    #[error("annotation block starting at line {line} is never terminated")]
    UnterminatedBlock { line: usize },
    #[error("spec document error: {0}")]
    Document(String),
}

macro_rules! string_serde {
    ($ty:ident) => {
        impl serde::Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }
        impl<'de> serde::Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                $ty::parse(&raw).ok_or_else(|| {
                    serde::de::Error::custom(format!(
                        concat!("invalid ", stringify!($ty), " `{}`"),
                        raw
                    ))
                })
            }
        }
    };
}

/// Grid data structures an argument can reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StructureIndex {
    Center,
    FluxX,
    FluxY,
}

string_serde!(StructureIndex);
string_serde!(ScalarKind);
string_serde!(MetadataKind);

impl StructureIndex {
    pub fn as_str(&self) -> &'static str {
        match self {
            StructureIndex::Center => "center",
            StructureIndex::FluxX => "flux_x",
            StructureIndex::FluxY => "flux_y",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "center" => Some(StructureIndex::Center),
            "flux_x" => Some(StructureIndex::FluxX),
            "flux_y" => Some(StructureIndex::FluxY),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ScalarKind {
    Real,
    Integer,
}

impl ScalarKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScalarKind::Real => "real",
            ScalarKind::Integer => "integer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(ScalarKind::Real),
            "integer" => Some(ScalarKind::Integer),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetadataKind {
    Lo,
    Hi,
    Deltas,
    Dt,
    BlockId,
}

impl MetadataKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetadataKind::Lo => "lo",
            MetadataKind::Hi => "hi",
            MetadataKind::Deltas => "deltas",
            MetadataKind::Dt => "dt",
            MetadataKind::BlockId => "block_id",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lo" => Some(MetadataKind::Lo),
            "hi" => Some(MetadataKind::Hi),
            "deltas" => Some(MetadataKind::Deltas),
            "dt" => Some(MetadataKind::Dt),
            "block_id" => Some(MetadataKind::BlockId),
            _ => None,
        }
    }
}

/// Where an argument's data comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArgSource {
    GridData {
        structure_index: StructureIndex,
        variables_in: BTreeSet<String>,
        variables_out: BTreeSet<String>,
    },
    Scratch {
        /// Extent expressions, kept verbatim.
        extents: Vec<String>,
        /// Lower-bound expressions, kept verbatim.
        lbound: Vec<String>,
    },
    External {
        scalar_kind: ScalarKind,
    },
    TileMetadata {
        kind: MetadataKind,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgumentSpec {
    pub name: String,
    pub source: ArgSource,
}

/// Data requirements of one annotated routine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutineSpec {
    pub name: String,
    /// Arguments in declaration order.
    pub arguments: Vec<ArgumentSpec>,
    pub source_file: String,
    pub device_variants: BTreeSet<DeviceTarget>,
}

impl RoutineSpec {
    pub fn argument(&self, name: &str) -> Option<&ArgumentSpec> {
        self.arguments.iter().find(|a| a.name == name)
    }
}

/// Parses every annotation block in `source_text`.
pub fn parse_annotations(
    source_text: &str,
    comment_sentinel: &str,
) -> Result<Vec<RoutineSpec>, AnnotationError> {
    parse_annotations_named(source_text, comment_sentinel, "<input>")
}

/// Like [`parse_annotations`] but records `source_file` on every spec.
pub fn parse_annotations_named(
    source_text: &str,
    comment_sentinel: &str,
    source_file: &str,
) -> Result<Vec<RoutineSpec>, AnnotationError> {
    assert!(!comment_sentinel.is_empty(), "comment sentinel must be non-empty");
    let mut specs = Vec::new();
    let mut block: Option<BlockBuilder> = None;

    for (lineno, raw) in source_text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim_start();
        let Some(rest) = trimmed.strip_prefix(comment_sentinel) else {
            continue; // non-annotation line, ignored entirely
        };
        let body = rest.strip_prefix(' ').unwrap_or(rest);
        let directive = body.trim();
        match (&mut block, directive) {
            (None, "milhoja begin") => block = Some(BlockBuilder::new(line, source_file)),
            (None, _) => {} // ordinary comment outside a block
            (Some(_), "milhoja begin") => {
                return Err(AnnotationError::Syntax {
                    line,
                    msg: "nested `milhoja begin`".to_owned(),
                });
            }
            (Some(_), "milhoja end") => {
                let b = block.take().expect("block is present");
                specs.push(b.finish()?);
            }
            (Some(b), _) => b.entry(body, line)?,
        }
    }

    if let Some(b) = block {
        return Err(AnnotationError::UnterminatedBlock { line: b.start_line });
    }
    Ok(specs)
}

/// Raw `key -> (value, line)` fields of one argument block.
type ArgFields = BTreeMap<String, (String, usize)>;

struct BlockBuilder {
    start_line: usize,
    source_file: String,
    routine: Option<String>,
    devices: BTreeSet<DeviceTarget>,
    arguments: Vec<(String, usize, ArgFields)>,
}

impl BlockBuilder {
    fn new(start_line: usize, source_file: &str) -> Self {
        BlockBuilder {
            start_line,
            source_file: source_file.to_owned(),
            routine: None,
            devices: BTreeSet::new(),
            arguments: Vec::new(),
        }
    }

    fn entry(&mut self, body: &str, line: usize) -> Result<(), AnnotationError> {
        let indented = body.starts_with(char::is_whitespace);
        let text = body.trim();
        if text.is_empty() {
            return Ok(()); // blank annotation line
        }
        let Some((key, value)) = text.split_once(':') else {
            return Err(AnnotationError::Syntax {
                line,
                msg: format!("expected `key: value`, got `{text}`"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(AnnotationError::Syntax {
                line,
                msg: format!("malformed key `{key}`"),
            });
        }

        if indented {
            let Some((_, _, fields)) = self.arguments.last_mut() else {
                return Err(AnnotationError::Syntax {
                    line,
                    msg: format!("sub-entry `{key}` without a preceding argument"),
                });
            };
            if fields
                .insert(key.to_owned(), (value.to_owned(), line))
                .is_some()
            {
                return Err(AnnotationError::Syntax {
                    line,
                    msg: format!("duplicate field `{key}`"),
                });
            }
            return Ok(());
        }

        match key {
            "routine" => {
                if self.routine.is_some() {
                    return Err(AnnotationError::Syntax {
                        line,
                        msg: "duplicate `routine` entry".to_owned(),
                    });
                }
                if value.is_empty() {
                    return Err(AnnotationError::Syntax {
                        line,
                        msg: "empty routine name".to_owned(),
                    });
                }
                self.routine = Some(value.to_owned());
            }
            "devices" => {
                for d in split_list(value) {
                    let dev = DeviceTarget::parse(&d).map_err(|e| AnnotationError::Syntax {
                        line,
                        msg: e.to_string(),
                    })?;
                    self.devices.insert(dev);
                }
            }
            "argument" => {
                if value.is_empty() {
                    return Err(AnnotationError::Syntax {
                        line,
                        msg: "empty argument name".to_owned(),
                    });
                }
                if self.arguments.iter().any(|(n, _, _)| n == value) {
                    return Err(AnnotationError::DuplicateArgument {
                        name: value.to_owned(),
                        line,
                    });
                }
                self.arguments
                    .push((value.to_owned(), line, BTreeMap::new()));
            }
            other => {
                return Err(AnnotationError::Syntax {
                    line,
                    msg: format!("unknown top-level key `{other}`"),
                });
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<RoutineSpec, AnnotationError> {
        let name = self.routine.ok_or(AnnotationError::Syntax {
            line: self.start_line,
            msg: "block has no `routine` entry".to_owned(),
        })?;
        if self.devices.is_empty() {
            return Err(AnnotationError::Syntax {
                line: self.start_line,
                msg: format!("routine `{name}` declares no device variants"),
            });
        }
        let mut arguments = Vec::with_capacity(self.arguments.len());
        for (arg_name, arg_line, mut fields) in self.arguments {
            let source = build_source(&arg_name, arg_line, &mut fields)?;
            if let Some((stray, (_, line))) = fields.iter().next() {
                return Err(AnnotationError::Syntax {
                    line: *line,
                    msg: format!("unexpected field `{stray}` for argument `{arg_name}`"),
                });
            }
            arguments.push(ArgumentSpec {
                name: arg_name,
                source,
            });
        }
        Ok(RoutineSpec {
            name,
            arguments,
            source_file: self.source_file,
            device_variants: self.devices,
        })
    }
}

fn build_source(
    arg: &str,
    arg_line: usize,
    fields: &mut ArgFields,
) -> Result<ArgSource, AnnotationError> {
    let (source, source_line) = fields.remove("source").ok_or(AnnotationError::Syntax {
        line: arg_line,
        msg: format!("argument `{arg}` has no `source` field"),
    })?;
    let take = |fields: &mut ArgFields, key: &str| {
        fields.remove(key).ok_or(AnnotationError::Syntax {
            line: arg_line,
            msg: format!("argument `{arg}` needs `{key}` for source `{source}`"),
        })
    };
    match source.as_str() {
        "grid_data" => {
            let (si, si_line) = take(fields, "structure_index")?;
            let structure_index =
                StructureIndex::parse(&si).ok_or(AnnotationError::Syntax {
                    line: si_line,
                    msg: format!("invalid structure_index `{si}`"),
                })?;
            let variables_in: BTreeSet<String> = fields
                .remove("variables_in")
                .map(|(v, _)| split_list(&v).into_iter().collect())
                .unwrap_or_default();
            let variables_out: BTreeSet<String> = fields
                .remove("variables_out")
                .map(|(v, _)| split_list(&v).into_iter().collect())
                .unwrap_or_default();
            if variables_in.is_empty() && variables_out.is_empty() {
                return Err(AnnotationError::Syntax {
                    line: arg_line,
                    msg: format!("grid_data argument `{arg}` masks no variables"),
                });
            }
            Ok(ArgSource::GridData {
                structure_index,
                variables_in,
                variables_out,
            })
        }
        "scratch" => {
            let (extents, ext_line) = take(fields, "extents")?;
            let extents = split_list(&extents);
            if extents.is_empty() {
                return Err(AnnotationError::Syntax {
                    line: ext_line,
                    msg: format!("scratch argument `{arg}` has empty extents"),
                });
            }
            let lbound = match fields.remove("lbound") {
                Some((v, lb_line)) => {
                    let lb = split_list(&v);
                    if lb.len() != extents.len() {
                        return Err(AnnotationError::Syntax {
                            line: lb_line,
                            msg: format!(
                                "lbound rank {} does not match extents rank {}",
                                lb.len(),
                                extents.len()
                            ),
                        });
                    }
                    lb
                }
                None => vec!["1".to_owned(); extents.len()],
            };
            Ok(ArgSource::Scratch { extents, lbound })
        }
        "external" => {
            let (ty, ty_line) = take(fields, "type")?;
            let scalar_kind = ScalarKind::parse(&ty).ok_or(AnnotationError::Syntax {
                line: ty_line,
                msg: format!("invalid external type `{ty}`"),
            })?;
            Ok(ArgSource::External { scalar_kind })
        }
        "tile_metadata" => {
            let (kind, kind_line) = take(fields, "kind")?;
            let kind = MetadataKind::parse(&kind).ok_or(AnnotationError::Syntax {
                line: kind_line,
                msg: format!("invalid tile_metadata kind `{kind}`"),
            })?;
            Ok(ArgSource::TileMetadata { kind })
        }
        other => Err(AnnotationError::UnknownSourceKind {
            kind: other.to_owned(),
            line: source_line,
        }),
    }
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Exports a routine spec as a canonical JSON document: keys sorted at
/// every level, two-space indent, trailing newline. `import_spec` of the
/// result reproduces the spec.
pub fn export_spec(spec: &RoutineSpec) -> String {
    let mut args = Map::new();
    for a in &spec.arguments {
        let v = match &a.source {
            ArgSource::GridData {
                structure_index,
                variables_in,
                variables_out,
            } => json!({
                "source": "grid_data",
                "structure_index": structure_index.as_str(),
                "variables_in": variables_in.iter().collect::<Vec<_>>(),
                "variables_out": variables_out.iter().collect::<Vec<_>>(),
            }),
            ArgSource::Scratch { extents, lbound } => json!({
                "source": "scratch",
                "extents": extents,
                "lbound": lbound,
            }),
            ArgSource::External { scalar_kind } => json!({
                "source": "external",
                "type": scalar_kind.as_str(),
            }),
            ArgSource::TileMetadata { kind } => json!({
                "source": "tile_metadata",
                "kind": kind.as_str(),
            }),
        };
        args.insert(a.name.clone(), v);
    }
    let doc = json!({
        "argument_order": spec.arguments.iter().map(|a| a.name.clone()).collect::<Vec<_>>(),
        "arguments": Value::Object(args),
        "device_variants": spec.device_variants.iter().map(|d| d.as_str()).collect::<Vec<_>>(),
        "name": spec.name,
        "source_file": spec.source_file,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("spec serializes");
    s.push('\n');
    s
}

/// Parses a spec document produced by [`export_spec`].
pub fn import_spec(text: &str) -> Result<RoutineSpec, AnnotationError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| AnnotationError::Document(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| AnnotationError::Document("spec document is not an object".into()))?;
    let get_str = |key: &str| -> Result<String, AnnotationError> {
        obj.get(key)
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| AnnotationError::Document(format!("missing string field `{key}`")))
    };
    let name = get_str("name")?;
    let source_file = get_str("source_file")?;
    let order = obj
        .get("argument_order")
        .and_then(Value::as_array)
        .ok_or_else(|| AnnotationError::Document("missing `argument_order`".into()))?;
    let args_obj = obj
        .get("arguments")
        .and_then(Value::as_object)
        .ok_or_else(|| AnnotationError::Document("missing `arguments`".into()))?;
    if order.len() != args_obj.len() {
        return Err(AnnotationError::Document(
            "`argument_order` does not match `arguments`".into(),
        ));
    }

    let str_list = |v: &Value, what: &str| -> Result<Vec<String>, AnnotationError> {
        v.as_array()
            .and_then(|a| {
                a.iter()
                    .map(|x| x.as_str().map(str::to_owned))
                    .collect::<Option<Vec<_>>>()
            })
            .ok_or_else(|| AnnotationError::Document(format!("`{what}` must be a string list")))
    };

    let mut arguments = Vec::with_capacity(order.len());
    for nm in order {
        let nm = nm
            .as_str()
            .ok_or_else(|| AnnotationError::Document("argument_order entries must be strings".into()))?;
        let a = args_obj
            .get(nm)
            .and_then(Value::as_object)
            .ok_or_else(|| AnnotationError::Document(format!("argument `{nm}` missing")))?;
        let source = a
            .get("source")
            .and_then(Value::as_str)
            .ok_or_else(|| AnnotationError::Document(format!("argument `{nm}` has no source")))?;
        let src = match source {
            "grid_data" => {
                let si = a
                    .get("structure_index")
                    .and_then(Value::as_str)
                    .and_then(StructureIndex::parse)
                    .ok_or_else(|| {
                        AnnotationError::Document(format!("argument `{nm}`: bad structure_index"))
                    })?;
                let vin = str_list(a.get("variables_in").unwrap_or(&Value::Null), "variables_in")?;
                let vout =
                    str_list(a.get("variables_out").unwrap_or(&Value::Null), "variables_out")?;
                if vin.is_empty() && vout.is_empty() {
                    return Err(AnnotationError::Document(format!(
                        "grid_data argument `{nm}` masks no variables"
                    )));
                }
                ArgSource::GridData {
                    structure_index: si,
                    variables_in: vin.into_iter().collect(),
                    variables_out: vout.into_iter().collect(),
                }
            }
            "scratch" => ArgSource::Scratch {
                extents: str_list(a.get("extents").unwrap_or(&Value::Null), "extents")?,
                lbound: str_list(a.get("lbound").unwrap_or(&Value::Null), "lbound")?,
            },
            "external" => {
                let kind = a
                    .get("type")
                    .and_then(Value::as_str)
                    .and_then(ScalarKind::parse)
                    .ok_or_else(|| {
                        AnnotationError::Document(format!("argument `{nm}`: bad external type"))
                    })?;
                ArgSource::External { scalar_kind: kind }
            }
            "tile_metadata" => {
                let kind = a
                    .get("kind")
                    .and_then(Value::as_str)
                    .and_then(MetadataKind::parse)
                    .ok_or_else(|| {
                        AnnotationError::Document(format!("argument `{nm}`: bad metadata kind"))
                    })?;
                ArgSource::TileMetadata { kind }
            }
            other => {
                return Err(AnnotationError::Document(format!(
                    "unknown source kind `{other}`"
                )))
            }
        };
        arguments.push(ArgumentSpec {
            name: nm.to_owned(),
            source: src,
        });
    }

    let mut device_variants = BTreeSet::new();
    for d in str_list(
        obj.get("device_variants").unwrap_or(&Value::Null),
        "device_variants",
    )? {
        device_variants.insert(
            DeviceTarget::parse(&d).map_err(|e| AnnotationError::Document(e.to_string()))?,
        );
    }
    if device_variants.is_empty() {
        return Err(AnnotationError::Document(
            "spec declares no device variants".into(),
        ));
    }

    Ok(RoutineSpec {
        name,
        arguments,
        source_file,
        device_variants,
    })
}
