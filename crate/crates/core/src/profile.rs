//! Parser for cachegrind/callgrind output files.
//!
//! Both dialects are line oriented: a header with an `events:` declaration,
//! position/cost records grouped under `fl=`/`fn=` name lines, and a final
//! `summary:` (cachegrind) or `totals:` (callgrind) line. Callgrind adds call
//! records (`cfn=`, `calls=`) whose cost lines are inclusive callee costs; only
//! self costs are aggregated here, so those lines are skipped.

use std::collections::HashMap;
use std::path::Path;

use crate::events::{EventId, EventVector};

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(
        "integrity error: event {event}: per-function sum {function_sum} != summary {summary}"
    )]
    Integrity {
        event: EventId,
        function_sum: u64,
        summary: u64,
    },
    #[error("events not declared in profile header: {0:?}")]
    MissingEvents(Vec<EventId>),
    #[error("cannot merge profiles: {0}")]
    Merge(String),
    #[error("i/o error reading profile: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, reason: impl Into<String>) -> ProfileError {
    ProfileError::Parse {
        line,
        reason: reason.into(),
    }
}

/// Self costs of one function, aggregated over all its position records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionProfile {
    pub function_name: String,
    pub source_file: String,
    pub counts: EventVector,
}

/// A parsed profile: declared event order, whole-run totals, and per-function
/// self costs.
#[derive(Debug, Clone, Default)]
pub struct Profile {
    pub event_order: Vec<EventId>,
    pub totals: EventVector,
    pub functions: Vec<FunctionProfile>,
    pub command_line: String,
    pub source_path: String,
    /// Header lines that are not interpreted (`desc:`, `version:`, ...),
    /// preserved verbatim as (key, value).
    pub metadata: Vec<(String, String)>,
}

impl Profile {
    /// Restricts the totals to `required` events. Fails rather than inventing
    /// zeros for events the file never declared.
    pub fn event_vector(&self, required: &[EventId]) -> Result<EventVector, ProfileError> {
        let missing = self.totals.missing(required);
        if !missing.is_empty() {
            return Err(ProfileError::MissingEvents(missing));
        }
        Ok(EventVector::from_counts(
            required
                .iter()
                .map(|&e| (e, self.totals.get(e).unwrap())),
        ))
    }
}

/// Parses a cachegrind/callgrind output file from bytes.
pub fn parse_profile(input: &[u8], source_path: &str) -> Result<Profile, ProfileError> {
    let text = String::from_utf8_lossy(input);
    Parser::new(source_path).parse(&text)
}

pub fn parse_profile_file(path: &Path) -> Result<Profile, ProfileError> {
    let bytes = std::fs::read(path)?;
    parse_profile(&bytes, &path.display().to_string())
}

struct Parser {
    source_path: String,
    event_order: Vec<EventId>,
    /// Column layout of cost lines: one entry per declared column; `None` for
    /// columns whose event name is outside the known set (ignored).
    columns: Vec<Option<EventId>>,
    n_positions: usize,
    summary: Option<EventVector>,
    metadata: Vec<(String, String)>,
    command_line: String,
    // Current attribution state.
    current_fn: Option<String>,
    current_fl: String,
    // callgrind name compression: kind -> id -> name
    names: HashMap<&'static str, HashMap<u64, String>>,
    // The cost line after a `calls=` record is an inclusive call cost.
    skip_next_cost: bool,
    functions: Vec<FunctionProfile>,
    fn_index: HashMap<(String, String), usize>,
}

impl Parser {
    fn new(source_path: &str) -> Self {
        Self {
            source_path: source_path.to_owned(),
            event_order: Vec::new(),
            columns: Vec::new(),
            n_positions: 1,
            summary: None,
            metadata: Vec::new(),
            command_line: String::new(),
            current_fn: None,
            current_fl: String::new(),
            names: HashMap::new(),
            skip_next_cost: false,
            functions: Vec::new(),
            fn_index: HashMap::new(),
        }
    }

    fn parse(mut self, text: &str) -> Result<Profile, ProfileError> {
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.parse_line(line, lineno)?;
        }

        if self.event_order.is_empty() {
            return Err(parse_err(0, "missing `events:` declaration in header"));
        }
        let summary = self
            .summary
            .ok_or_else(|| parse_err(0, "missing `summary:`/`totals:` line"))?;

        // When the file carries function records their per-event sums must
        // match the summary exactly.
        if !self.functions.is_empty() {
            for &event in &self.event_order {
                let function_sum: u64 = self
                    .functions
                    .iter()
                    .map(|f| f.counts.get(event).unwrap_or(0))
                    .sum();
                let total = summary.get(event).unwrap_or(0);
                if function_sum != total {
                    return Err(ProfileError::Integrity {
                        event,
                        function_sum,
                        summary: total,
                    });
                }
            }
        }

        Ok(Profile {
            event_order: self.event_order,
            totals: summary,
            functions: self.functions,
            command_line: self.command_line,
            source_path: self.source_path,
            metadata: self.metadata,
        })
    }

    fn parse_line(&mut self, line: &str, lineno: usize) -> Result<(), ProfileError> {
        // Name records (`fn=`, `fl=`, ...) take precedence over `key: value`
        // headers; a `=` before any `:` marks them.
        if let Some(eq) = line.find('=') {
            if line[..eq].find(':').is_none() && !line[..eq].contains(char::is_whitespace) {
                return self.parse_name_record(&line[..eq], &line[eq + 1..], lineno);
            }
        }
        if let Some(colon) = line.find(':') {
            let key = &line[..colon];
            if !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                let value = line[colon + 1..].trim();
                return self.parse_header(key, value, lineno);
            }
        }
        self.parse_cost_line(line, lineno)
    }

    fn parse_header(&mut self, key: &str, value: &str, lineno: usize) -> Result<(), ProfileError> {
        match key {
            "events" => {
                if !self.event_order.is_empty() {
                    return Err(parse_err(lineno, "duplicate `events:` declaration"));
                }
                for name in value.split_whitespace() {
                    match name.parse::<EventId>() {
                        Ok(event) => {
                            if self.event_order.contains(&event) {
                                return Err(parse_err(
                                    lineno,
                                    format!("duplicate event `{event}` in `events:` header"),
                                ));
                            }
                            self.event_order.push(event);
                            self.columns.push(Some(event));
                        }
                        // Columns for events outside the known set are parsed
                        // and discarded.
                        Err(_) => self.columns.push(None),
                    }
                }
                if self.columns.is_empty() {
                    return Err(parse_err(lineno, "empty `events:` declaration"));
                }
                Ok(())
            }
            "positions" => {
                self.n_positions = value.split_whitespace().count().max(1);
                Ok(())
            }
            "summary" | "totals" => {
                if self.summary.is_some() {
                    return Err(parse_err(lineno, "duplicate summary/totals line"));
                }
                if self.event_order.is_empty() && self.columns.is_empty() {
                    return Err(parse_err(lineno, "summary before `events:` declaration"));
                }
                let counts = self.parse_counts(value.split_whitespace(), lineno)?;
                self.summary = Some(counts);
                Ok(())
            }
            "cmd" => {
                self.command_line = value.to_owned();
                Ok(())
            }
            // Unknown header lines are preserved as opaque metadata.
            _ => {
                self.metadata.push((key.to_owned(), value.to_owned()));
                Ok(())
            }
        }
    }

    fn parse_name_record(
        &mut self,
        kind: &str,
        value: &str,
        lineno: usize,
    ) -> Result<(), ProfileError> {
        // Call targets (`cfn=`, `cfl=`) share the compression tables of their
        // plain counterparts but do not change the attribution state.
        let table: &'static str = match kind {
            "fn" | "cfn" => "fn",
            "fl" | "fi" | "fe" | "cfl" | "cfi" => "fl",
            "ob" | "cob" => "ob",
            "calls" => {
                self.skip_next_cost = true;
                return Ok(());
            }
            "jump" | "jcnd" | "jfn" | "jfi" | "jfl" => return Ok(()),
            other => {
                return Err(parse_err(lineno, format!("unknown record `{other}=`")));
            }
        };
        let name = self.resolve_name(table, value.trim(), lineno)?;
        match kind {
            "fn" => self.current_fn = Some(name),
            "fl" | "fi" | "fe" => self.current_fl = name,
            _ => {}
        }
        Ok(())
    }

    /// Resolves callgrind name compression: `(id) name` defines, `(id)` refers.
    fn resolve_name(
        &mut self,
        kind: &'static str,
        value: &str,
        lineno: usize,
    ) -> Result<String, ProfileError> {
        if let Some(rest) = value.strip_prefix('(') {
            let close = rest
                .find(')')
                .ok_or_else(|| parse_err(lineno, "unterminated name id"))?;
            let id: u64 = rest[..close]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad name id `{}`", &rest[..close])))?;
            let name = rest[close + 1..].trim();
            let table = self.names.entry(kind).or_default();
            if name.is_empty() {
                table.get(&id).cloned().ok_or_else(|| {
                    parse_err(lineno, format!("reference to undefined {kind} name ({id})"))
                })
            } else {
                table.insert(id, name.to_owned());
                Ok(name.to_owned())
            }
        } else {
            Ok(value.to_owned())
        }
    }

    fn parse_cost_line(&mut self, line: &str, lineno: usize) -> Result<(), ProfileError> {
        if self.columns.is_empty() {
            return Err(parse_err(lineno, "cost line before `events:` declaration"));
        }
        let mut fields = line.split_whitespace();
        // Leading subposition fields: absolute, hex, relative (+n/-n) or `*`.
        for _ in 0..self.n_positions {
            let field = fields
                .next()
                .ok_or_else(|| parse_err(lineno, "cost line missing position field"))?;
            if !is_position_field(field) {
                return Err(parse_err(lineno, format!("bad position field `{field}`")));
            }
        }
        if self.skip_next_cost {
            // Inclusive cost of a call record; only self costs are kept.
            self.skip_next_cost = false;
            return Ok(());
        }
        let counts = self.parse_counts(fields, lineno)?;
        let function_name = self
            .current_fn
            .clone()
            .ok_or_else(|| parse_err(lineno, "cost line before any `fn=` record"))?;
        if function_name.is_empty() {
            return Err(parse_err(lineno, "empty function name"));
        }
        let key = (function_name.clone(), self.current_fl.clone());
        let idx = match self.fn_index.get(&key) {
            Some(&idx) => idx,
            None => {
                self.functions.push(FunctionProfile {
                    function_name,
                    source_file: self.current_fl.clone(),
                    counts: EventVector::new(),
                });
                let idx = self.functions.len() - 1;
                self.fn_index.insert(key, idx);
                idx
            }
        };
        self.functions[idx].counts.add_vector(&counts);
        Ok(())
    }

    /// Parses the count columns of a cost or summary line. Trailing columns may
    /// be omitted and count as explicit zeros, per the file format.
    fn parse_counts<'a, I: Iterator<Item = &'a str>>(
        &self,
        fields: I,
        lineno: usize,
    ) -> Result<EventVector, ProfileError> {
        let mut counts = EventVector::new();
        let mut n = 0usize;
        for field in fields {
            let slot = self
                .columns
                .get(n)
                .ok_or_else(|| parse_err(lineno, "more count fields than declared events"))?;
            let value: u64 = field.parse().map_err(|_| {
                parse_err(lineno, format!("count field `{field}` is not a non-negative integer"))
            })?;
            if let Some(event) = slot {
                counts.set(*event, value);
            }
            n += 1;
        }
        if n == 0 {
            return Err(parse_err(lineno, "cost line has no count fields"));
        }
        for slot in &self.columns[n..] {
            if let Some(event) = slot {
                counts.set(*event, 0);
            }
        }
        Ok(counts)
    }
}

fn is_position_field(field: &str) -> bool {
    if field == "*" {
        return true;
    }
    let body = field
        .strip_prefix('+')
        .or_else(|| field.strip_prefix('-'))
        .unwrap_or(field);
    if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        return !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit());
    }
    !body.is_empty() && body.chars().all(|c| c.is_ascii_digit())
}

/// Element-wise sum of multi-part profiles (e.g. per-thread output files).
/// Functions are matched by (function_name, source_file).
pub fn merge_profiles(parts: &[Profile]) -> Result<Profile, ProfileError> {
    let first = parts
        .first()
        .ok_or_else(|| ProfileError::Merge("no profiles to merge".into()))?;
    for part in &parts[1..] {
        if part.event_order != first.event_order {
            return Err(ProfileError::Merge(format!(
                "mismatched event order: {:?} vs {:?}",
                first.event_order, part.event_order
            )));
        }
    }
    let mut totals = EventVector::new();
    let mut functions: Vec<FunctionProfile> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for part in parts {
        totals.add_vector(&part.totals);
        for func in &part.functions {
            let key = (func.function_name.clone(), func.source_file.clone());
            match index.get(&key) {
                Some(&i) => functions[i].counts.add_vector(&func.counts),
                None => {
                    index.insert(key, functions.len());
                    functions.push(func.clone());
                }
            }
        }
    }
    Ok(Profile {
        event_order: first.event_order.clone(),
        totals,
        functions,
        command_line: first.command_line.clone(),
        source_path: format!("merge of {} parts", parts.len()),
        metadata: Vec::new(),
    })
}

/// Debug dump of a profile in cachegrind syntax. Re-parsing the dump is a
/// fixed point on totals and function counts.
pub fn dump_profile(profile: &Profile) -> String {
    let mut out = String::new();
    let names: Vec<&str> = profile.event_order.iter().map(|e| e.name()).collect();
    if !profile.command_line.is_empty() {
        out.push_str(&format!("cmd: {}\n", profile.command_line));
    }
    out.push_str(&format!("events: {}\n", names.join(" ")));
    for func in &profile.functions {
        out.push_str(&format!("fl={}\n", func.source_file));
        out.push_str(&format!("fn={}\n", func.function_name));
        out.push('0');
        for &event in &profile.event_order {
            out.push_str(&format!(" {}", func.counts.get(event).unwrap_or(0)));
        }
        out.push('\n');
    }
    out.push_str("summary:");
    for &event in &profile.event_order {
        out.push_str(&format!(" {}", profile.totals.get(event).unwrap_or(0)));
    }
    out.push('\n');
    out
}
