//! Execution-specification verification.
//!
//! An [`ExecutionSpec`] describes what a correct pseudo-code execution must
//! print: which categories are recognizable, which fields each category
//! requires, and which consistency predicates tie the printed values back
//! to ground truth (source code, call trace, structure definitions).
//!
//! [`verify`] classifies every failure into one of three classes:
//! unrecognized execution (unknown category), incomplete execution
//! (missing required fields), inconsistent execution (a printed value
//! contradicts the source or trace). Anything the verifier cannot check —
//! a line or structure the model invented — is *inconsistent*, not a pass:
//! the check fails closed.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcx::{ExecutionOutcome, PrintRecord};
use crate::report::Frame;
use crate::retrieval::{DefKind, RetrievedDefinition, RetrievedSource, SourceIndex};

#[derive(Debug, Error)]
pub enum EsvError {
    #[error("bad spec: {0}")]
    BadSpec(String),
    #[error("spec mismatch: outcome was produced under {outcome}, spec is {spec}")]
    SpecMismatch { outcome: String, spec: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    VariableInLine,
    LineInSource,
    CallerInTrace,
    CallAtCallsite,
    FieldInStructure,
    ValueIsLiteral,
}

impl Predicate {
    /// Parameter names each predicate consumes; validation rejects rules
    /// missing any of them.
    fn required_params(self) -> &'static [&'static str] {
        match self {
            Predicate::VariableInLine => &["variable", "line"],
            Predicate::LineInSource => &["line"],
            Predicate::CallerInTrace => &["caller"],
            Predicate::CallAtCallsite => &["line", "function"],
            Predicate::FieldInStructure => &["structure", "field"],
            Predicate::ValueIsLiteral => &["value"],
        }
    }
}

/// One cross-check. `params` binds predicate parameters to record field
/// names; the special value `@current` binds to the function under
/// analysis instead of a field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyRule {
    pub id: String,
    pub category: String,
    pub predicate: Predicate,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionSpec {
    pub id: String,
    pub accepted_categories: Vec<String>,
    pub required_fields: BTreeMap<String, Vec<String>>,
    pub consistency_rules: Vec<ConsistencyRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationClass {
    Unrecognized,
    Incomplete,
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub class: ViolationClass,
    /// Consistency-rule id, or "category" / "fields" for the first two
    /// classes, or "duplicate_record" for the cross-record check.
    pub rule_id: String,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_index: Option<usize>,
}

impl Violation {
    fn new(
        class: ViolationClass,
        rule_id: &str,
        detail: String,
        record_index: Option<usize>,
    ) -> Violation {
        Violation {
            class,
            rule_id: rule_id.to_string(),
            detail,
            record_index,
        }
    }
}

#[derive(Deserialize)]
struct SpecFile {
    schema: String,
    id: String,
    accepted_categories: Vec<String>,
    required_fields: BTreeMap<String, Vec<String>>,
    consistency_rules: Vec<ConsistencyRule>,
}

/// Parse and validate a `spec.v1` document.
pub fn parse_spec(text: &str) -> Result<ExecutionSpec, EsvError> {
    let file: SpecFile =
        serde_json::from_str(text).map_err(|e| EsvError::BadSpec(e.to_string()))?;
    if file.schema != "spec.v1" {
        return Err(EsvError::BadSpec(format!(
            "unsupported schema {:?}",
            file.schema
        )));
    }
    let spec = ExecutionSpec {
        id: file.id,
        accepted_categories: file.accepted_categories,
        required_fields: file.required_fields,
        consistency_rules: file.consistency_rules,
    };
    validate_spec(&spec)?;
    Ok(spec)
}

pub fn load_spec(path: &Path) -> Result<ExecutionSpec, EsvError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EsvError::BadSpec(format!("{}: {e}", path.display())))?;
    parse_spec(&text)
}

fn validate_spec(spec: &ExecutionSpec) -> Result<(), EsvError> {
    if spec.id.is_empty() {
        return Err(EsvError::BadSpec("spec has no id".into()));
    }
    let accepted: BTreeSet<&str> = spec.accepted_categories.iter().map(String::as_str).collect();
    for category in spec.required_fields.keys() {
        if !accepted.contains(category.as_str()) {
            return Err(EsvError::BadSpec(format!(
                "required_fields lists unknown category {category:?}"
            )));
        }
    }
    let mut seen_ids = BTreeSet::new();
    for rule in &spec.consistency_rules {
        if !seen_ids.insert(rule.id.as_str()) {
            return Err(EsvError::BadSpec(format!("duplicate rule id {:?}", rule.id)));
        }
        if !accepted.contains(rule.category.as_str()) {
            return Err(EsvError::BadSpec(format!(
                "rule {} references unknown category {:?}",
                rule.id, rule.category
            )));
        }
        let declared: BTreeSet<&str> = spec
            .required_fields
            .get(&rule.category)
            .map(|fields| fields.iter().map(String::as_str).collect())
            .unwrap_or_default();
        for name in rule.predicate.required_params() {
            let Some(binding) = rule.params.get(*name) else {
                return Err(EsvError::BadSpec(format!(
                    "rule {} lacks param {name:?}",
                    rule.id
                )));
            };
            if !binding.starts_with('@') && !declared.contains(binding.as_str()) {
                return Err(EsvError::BadSpec(format!(
                    "rule {} binds {name:?} to undeclared field {binding:?}",
                    rule.id
                )));
            }
        }
    }
    Ok(())
}

pub const BUILTIN_SPECS: &[&str] = &[
    include_str!("../assets/specs/backward_taint.v1.spec.json"),
    include_str!("../assets/specs/backward_taint_stack.v1.spec.json"),
];

/// The embedded specs plus optional directory overrides (same-id wins).
#[derive(Debug, Clone)]
pub struct SpecLibrary {
    specs: BTreeMap<String, ExecutionSpec>,
}

impl SpecLibrary {
    pub fn builtin() -> SpecLibrary {
        let mut specs = BTreeMap::new();
        for text in BUILTIN_SPECS {
            let spec = parse_spec(text).expect("builtin specs parse");
            specs.insert(spec.id.clone(), spec);
        }
        SpecLibrary { specs }
    }

    pub fn with_dir(dir: &Path) -> Result<SpecLibrary, EsvError> {
        let mut library = SpecLibrary::builtin();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| EsvError::BadSpec(format!("spec dir {}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".spec.json"))
            .collect();
        paths.sort();
        for path in paths {
            let spec = load_spec(&path)?;
            library.specs.insert(spec.id.clone(), spec);
        }
        Ok(library)
    }

    pub fn get(&self, id: &str) -> Option<&ExecutionSpec> {
        self.specs.get(id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.specs.keys().map(String::as_str).collect()
    }
}

/// Ground truth the predicates check against: the sources that were in the
/// prompt, the call trace, and (optionally) the index for on-demand lookup
/// of callers and structure definitions the record names.
pub struct VerificationContext<'a> {
    pub current_function: String,
    pub provided: BTreeMap<String, RetrievedSource>,
    pub call_trace: Vec<Frame>,
    index: Option<&'a SourceIndex>,
    looked_up: RefCell<BTreeMap<String, RetrievedSource>>,
}

impl<'a> VerificationContext<'a> {
    pub fn new(
        current_function: &str,
        provided: BTreeMap<String, RetrievedSource>,
        call_trace: Vec<Frame>,
        index: Option<&'a SourceIndex>,
    ) -> VerificationContext<'a> {
        VerificationContext {
            current_function: current_function.to_string(),
            provided,
            call_trace,
            index,
            looked_up: RefCell::new(BTreeMap::new()),
        }
    }

    /// Resolve a name: prompt-provided sources first, then the index.
    fn lookup(&self, name: &str) -> RetrievedSource {
        if let Some(source) = self.provided.get(name) {
            return source.clone();
        }
        if let Some(source) = self.looked_up.borrow().get(name) {
            return source.clone();
        }
        let source = match self.index {
            Some(index) => index.retrieve_one(name),
            None => RetrievedSource::NotFound,
        };
        self.looked_up
            .borrow_mut()
            .insert(name.to_string(), source.clone());
        source
    }

    /// All definitions whose text was available to the model: everything
    /// provided in the prompt, plus `extra` names resolved on demand.
    fn regions(&self, extra: &[&str]) -> Vec<RetrievedDefinition> {
        let mut out = Vec::new();
        for source in self.provided.values() {
            if let RetrievedSource::Found { definitions, .. } = source {
                out.extend(definitions.iter().cloned());
            }
        }
        for name in extra {
            if self.provided.contains_key(*name) {
                continue;
            }
            if let RetrievedSource::Found { definitions, .. } = self.lookup(name) {
                out.extend(definitions);
            }
        }
        out
    }
}

/// Split a printed `Line` value into its number and text parts.
/// `"405: lock_buffer(bh);"` → `(Some(405), "lock_buffer(bh);")`;
/// `"405"` → `(Some(405), "")`; `"lock_buffer(bh);"` → `(None, ...)`.
fn split_line_value(value: &str) -> (Option<u32>, String) {
    let value = value.trim();
    if let Ok(n) = value.parse::<u32>() {
        return (Some(n), String::new());
    }
    if let Some((head, rest)) = value.split_once(':') {
        if let Ok(n) = head.trim().parse::<u32>() {
            return (Some(n), rest.trim().to_string());
        }
    }
    (None, value.to_string())
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn token_occurs(token: &str, text: &str) -> bool {
    if token.is_empty() {
        return false;
    }
    let pattern = format!(r"\b{}\b", regex::escape(token));
    Regex::new(&pattern).map(|re| re.is_match(text)).unwrap_or(false)
}

fn call_occurs(function: &str, text: &str) -> bool {
    if function.is_empty() {
        return false;
    }
    let pattern = format!(r"\b{}\s*\(", regex::escape(function));
    Regex::new(&pattern).map(|re| re.is_match(text)).unwrap_or(false)
}

/// `n`-th line of a retrieved definition (1-based file numbering).
fn region_line(def: &RetrievedDefinition, n: u32) -> Option<&str> {
    if n < def.location.start_line || n > def.location.end_line {
        return None;
    }
    def.text.lines().nth((n - def.location.start_line) as usize)
}

fn is_literal(value: &str) -> bool {
    let v = value.trim();
    if v.is_empty() {
        return false;
    }
    if v == "NULL" || v == "null" || v == "true" || v == "false" {
        return true;
    }
    if (v.starts_with('\'') && v.ends_with('\'') && v.len() >= 3)
        || (v.starts_with('"') && v.ends_with('"') && v.len() >= 2)
    {
        return true;
    }
    let unsuffixed = v
        .trim_end_matches(['u', 'U', 'l', 'L'])
        .trim_start_matches(['-', '+']);
    if let Some(hex) = unsuffixed
        .strip_prefix("0x")
        .or_else(|| unsuffixed.strip_prefix("0X"))
    {
        return !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit());
    }
    !unsuffixed.is_empty() && unsuffixed.parse::<f64>().is_ok()
}

/// Evaluate one rule against one record. `Err(detail)` means the predicate
/// failed (or could not be checked — same class, fail-closed).
pub fn predicate_eval(
    rule: &ConsistencyRule,
    record: &PrintRecord,
    ctx: &VerificationContext,
) -> Result<(), String> {
    let resolve = |param: &str| -> Result<String, String> {
        let binding = rule
            .params
            .get(param)
            .ok_or_else(|| format!("rule {} lacks param {param:?}", rule.id))?;
        if binding == "@current" {
            return Ok(ctx.current_function.clone());
        }
        record
            .field(binding)
            .map(str::to_string)
            .ok_or_else(|| format!("record has no {binding} field"))
    };

    match rule.predicate {
        Predicate::VariableInLine => {
            let variable = resolve("variable")?;
            let (_, text) = split_line_value(&resolve("line")?);
            if text.is_empty() {
                return Err(format!(
                    "Line value carries no source text to find `{variable}` in"
                ));
            }
            if token_occurs(&variable, &text) {
                Ok(())
            } else {
                Err(format!("variable `{variable}` does not occur in line `{text}`"))
            }
        }
        Predicate::LineInSource => {
            let raw = resolve("line")?;
            let (number, text) = split_line_value(&raw);
            let Some(number) = number else {
                return Err(format!("Line value `{raw}` has no line number"));
            };
            if text.is_empty() {
                return Err(format!("Line value `{raw}` has no source text"));
            }
            let extra: Vec<&str> = record.field("Caller").into_iter().collect();
            let regions = ctx.regions(&extra);
            if regions.is_empty() {
                return Err("unverifiable: no source regions available".into());
            }
            let want = normalize_ws(&text);
            let mut in_span = false;
            for def in &regions {
                if let Some(actual) = region_line(def, number) {
                    in_span = true;
                    if normalize_ws(actual) == want {
                        return Ok(());
                    }
                }
            }
            if in_span {
                Err(format!("line {number} does not read `{text}` in any provided source"))
            } else {
                Err(format!("line {number} is outside every provided source region"))
            }
        }
        Predicate::CallerInTrace => {
            let caller = resolve("caller")?;
            if ctx.call_trace.iter().any(|f| f.function == caller) {
                Ok(())
            } else {
                Err(format!("`{caller}` is not a frame of the call trace"))
            }
        }
        Predicate::CallAtCallsite => {
            let function = resolve("function")?;
            let raw = resolve("line")?;
            let (_, text) = split_line_value(&raw);
            if text.is_empty() {
                return Err(format!("Line value `{raw}` has no source text"));
            }
            if call_occurs(&function, &text) {
                Ok(())
            } else {
                Err(format!("no call to `{function}` at callsite line `{text}`"))
            }
        }
        Predicate::FieldInStructure => {
            let structure = resolve("structure")?;
            let field = resolve("field")?;
            match ctx.lookup(&structure) {
                RetrievedSource::Found { definitions, .. } => {
                    let structs: Vec<_> = definitions
                        .iter()
                        .filter(|d| d.location.kind == DefKind::Structure)
                        .collect();
                    let candidates = if structs.is_empty() {
                        definitions.iter().collect()
                    } else {
                        structs
                    };
                    if candidates.iter().any(|d| token_occurs(&field, &d.text)) {
                        Ok(())
                    } else {
                        Err(format!("`{structure}` has no member `{field}`"))
                    }
                }
                RetrievedSource::NotFound => {
                    Err(format!("unverifiable: no definition of `{structure}`"))
                }
            }
        }
        Predicate::ValueIsLiteral => {
            let value = resolve("value")?;
            if is_literal(&value) {
                Ok(())
            } else {
                Err(format!("`{value}` is not a literal constant"))
            }
        }
    }
}

/// Check one outcome against its spec. Empty result = verified. Per
/// record, class precedence is unrecognized > incomplete > inconsistent:
/// an unknown category makes field checks meaningless, and missing fields
/// make consistency checks unevaluable.
pub fn verify(
    outcome: &ExecutionOutcome,
    spec: &ExecutionSpec,
    ctx: &VerificationContext,
) -> Result<Vec<Violation>, EsvError> {
    if outcome.spec_ref != spec.id {
        return Err(EsvError::SpecMismatch {
            outcome: outcome.spec_ref.clone(),
            spec: spec.id.clone(),
        });
    }

    let mut violations = Vec::new();
    if outcome.records.is_empty() {
        violations.push(Violation::new(
            ViolationClass::Incomplete,
            "fields",
            "no output produced".into(),
            None,
        ));
        return Ok(violations);
    }

    for (i, record) in outcome.records.iter().enumerate() {
        if !spec.accepted_categories.contains(&record.category) {
            violations.push(Violation::new(
                ViolationClass::Unrecognized,
                "category",
                format!("category `{}` is not recognized", record.category),
                Some(i),
            ));
            continue;
        }

        let required = spec
            .required_fields
            .get(&record.category)
            .map(Vec::as_slice)
            .unwrap_or_default();
        let mut incomplete = false;
        for field in required {
            let missing = record
                .field(field)
                .map(|v| v.trim().is_empty())
                .unwrap_or(true);
            if missing {
                incomplete = true;
                violations.push(Violation::new(
                    ViolationClass::Incomplete,
                    "fields",
                    format!("required field `{field}` is missing or empty"),
                    Some(i),
                ));
            }
        }
        if incomplete {
            continue;
        }

        for rule in &spec.consistency_rules {
            if rule.category != record.category {
                continue;
            }
            if let Err(detail) = predicate_eval(rule, record, ctx) {
                violations.push(Violation::new(
                    ViolationClass::Inconsistent,
                    &rule.id,
                    detail,
                    Some(i),
                ));
            }
        }
    }

    // Cross-record check: a faithful execution prints each result once.
    for (i, record) in outcome.records.iter().enumerate() {
        if outcome.records[..i].contains(record) {
            violations.push(Violation::new(
                ViolationClass::Inconsistent,
                "duplicate_record",
                format!("record {i} duplicates an earlier record"),
                Some(i),
            ));
        }
    }

    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcx::{parse_outcome, parse_program, PseudoProgram, BUILTIN_PROGRAMS};
    use crate::report::parse_report;
    use crate::retrieval::DefinitionLocation;

    fn taint_spec() -> ExecutionSpec {
        parse_spec(BUILTIN_SPECS[0]).unwrap()
    }

    fn taint_program() -> PseudoProgram {
        parse_program(BUILTIN_PROGRAMS[0]).unwrap()
    }

    fn def(name: &str, kind: DefKind, file: &str, start: u32, lines: &[&str]) -> RetrievedDefinition {
        RetrievedDefinition {
            location: DefinitionLocation {
                name: name.into(),
                kind,
                file: file.into(),
                start_line: start,
                end_line: start + lines.len() as u32 - 1,
                signature: lines[0].into(),
            },
            text: lines.join("\n"),
            annotated: lines
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{file}:{}: {l}", start + i as u32))
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }

    fn found(defs: Vec<RetrievedDefinition>) -> RetrievedSource {
        RetrievedSource::Found {
            definitions: defs,
            ambiguous: false,
        }
    }

    /// Context mirroring one taint step inside `lock_buffer`: the prompt
    /// carried the current function body and the caller's body, and the
    /// callsite line 405 reads `lock_buffer(bh);` inside the caller.
    fn lock_buffer_ctx<'a>() -> VerificationContext<'a> {
        let mut provided = BTreeMap::new();
        provided.insert(
            "lock_buffer".to_string(),
            found(vec![def(
                "lock_buffer",
                DefKind::Function,
                "include/buffer_ops.h",
                390,
                &[
                    "static inline void lock_buffer(struct buffer_head *bh)",
                    "{",
                    "\tmight_sleep();",
                    "\tif (!trylock_buffer(bh))",
                    "\t\t__lock_buffer_slow(bh);",
                    "}",
                ],
            )]),
        );
        provided.insert(
            "submit_bh".to_string(),
            found(vec![def(
                "submit_bh",
                DefKind::Function,
                "fs/buffer.c",
                400,
                &[
                    "int submit_bh(int op, struct buffer_head *bh)",
                    "{",
                    "\tstruct bio *bio;",
                    "",
                    "\tBUG_ON(!buffer_locked(bh));",
                    "\tlock_buffer(bh);",
                    "\tbio = bio_alloc(GFP_NOIO, 1);",
                    "\tsubmit_bio(op, bio);",
                    "\treturn 0;",
                    "}",
                ],
            )]),
        );
        let report = parse_report(
            "BUG: KASAN: use-after-free in lock_buffer+0x10/0x20\n\
             Call Trace:\n\
              lock_buffer include/buffer_ops.h:393 [inline]\n\
              submit_bh+0x72/0x120 fs/buffer.c:405\n\
              ext4_read_block+0x88/0x200 fs/ext4/inode.c:120\n",
        )
        .unwrap();
        VerificationContext::new("lock_buffer", provided, report.call_trace, None)
    }

    fn parameter_outcome(raw: &str) -> ExecutionOutcome {
        parse_outcome(raw, &taint_program())
    }

    const CLEAN_REPLY: &str = "Category: parameter of function\n\
                               Variable: bh\n\
                               Line: 405: lock_buffer(bh);\n\
                               Caller: submit_bh\n";

    #[test]
    fn builtin_specs_parse_and_validate() {
        let library = SpecLibrary::builtin();
        assert_eq!(library.ids(), vec!["backward_taint.v1", "backward_taint_stack.v1"]);
        let spec = library.get("backward_taint.v1").unwrap();
        assert_eq!(spec.accepted_categories.len(), 6);
        assert_eq!(spec.consistency_rules.len(), 17);
        let stack = library.get("backward_taint_stack.v1").unwrap();
        assert!(stack.accepted_categories.iter().any(|c| c == "stack variable"));
    }

    #[test]
    fn clean_parameter_record_verifies() {
        let outcome = parameter_outcome(CLEAN_REPLY);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations, vec![]);
    }

    #[test]
    fn unknown_category_is_unrecognized_and_skips_other_checks() {
        let outcome = parameter_outcome("Category: parameter of banana\nVariable: bh\n");
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].class, ViolationClass::Unrecognized);
        assert_eq!(violations[0].rule_id, "category");
        assert_eq!(violations[0].record_index, Some(0));
    }

    #[test]
    fn missing_caller_is_incomplete_and_skips_consistency() {
        let raw = "Category: parameter of function\nVariable: bh\nLine: 405: lock_buffer(bh);\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].class, ViolationClass::Incomplete);
        assert!(violations[0].detail.contains("Caller"));
    }

    #[test]
    fn each_missing_field_is_reported() {
        let outcome = parameter_outcome("Category: parameter of function\nVariable: bh\n");
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations.len(), 2);
        assert!(violations.iter().all(|v| v.class == ViolationClass::Incomplete));
    }

    #[test]
    fn zero_records_is_one_incomplete_violation() {
        let outcome = parameter_outcome("I could not figure this one out, sorry.");
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].class, ViolationClass::Incomplete);
        assert_eq!(violations[0].detail, "no output produced");
        assert_eq!(violations[0].record_index, None);
    }

    #[test]
    fn variable_absent_from_line_is_inconsistent() {
        let raw = "Category: parameter of function\n\
                   Variable: bio\n\
                   Line: 405: lock_buffer(bh);\n\
                   Caller: submit_bh\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].class, ViolationClass::Inconsistent);
        assert_eq!(violations[0].rule_id, "param.variable_in_line");
    }

    #[test]
    fn variable_substring_is_not_a_token_match() {
        // `bh` inside `bhx` must not pass.
        let mut provided = BTreeMap::new();
        provided.insert(
            "f".to_string(),
            found(vec![def("f", DefKind::Function, "a.c", 1, &["void f(int q)", "{", "\tlock_bhx(q);", "}"])]),
        );
        let ctx = VerificationContext::new("f", provided, vec![], None);
        let rule = ConsistencyRule {
            id: "t.variable_in_line".into(),
            category: "parameter of function".into(),
            predicate: Predicate::VariableInLine,
            params: BTreeMap::from([
                ("variable".to_string(), "Variable".to_string()),
                ("line".to_string(), "Line".to_string()),
            ]),
        };
        let record = PrintRecord {
            category: "parameter of function".into(),
            fields: BTreeMap::from([
                ("Variable".to_string(), "bh".to_string()),
                ("Line".to_string(), "3: lock_bhx(q);".to_string()),
            ]),
        };
        assert!(predicate_eval(&rule, &record, &ctx).is_err());
    }

    #[test]
    fn fabricated_line_number_is_inconsistent() {
        let raw = "Category: parameter of function\n\
                   Variable: bh\n\
                   Line: 1000000000: lock_buffer(bh);\n\
                   Caller: submit_bh\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].rule_id, "param.line_in_source");
        assert!(violations[0].detail.contains("outside every provided source region"));
    }

    #[test]
    fn line_with_wrong_text_is_inconsistent() {
        let raw = "Category: parameter of function\n\
                   Variable: bh\n\
                   Line: 405: unlock_buffer(bh);\n\
                   Caller: submit_bh\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        // The invented text breaks both the line check and the callsite
        // check (no `lock_buffer(` call in the claimed text)... unless the
        // text still calls the current function. Here it does not:
        // `unlock_buffer(bh)` is a different token than `lock_buffer`.
        assert!(violations.iter().any(|v| v.rule_id == "param.line_in_source"));
        assert!(violations.iter().all(|v| v.class == ViolationClass::Inconsistent));
    }

    #[test]
    fn line_text_comparison_ignores_whitespace() {
        let raw = "Category: parameter of function\n\
                   Variable: bh\n\
                   Line: 405:    lock_buffer( bh ) ;\n\
                   Caller: submit_bh\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        // Whitespace differs but tokens match after normalization of
        // blank runs; `lock_buffer( bh ) ;` vs `lock_buffer(bh);` still
        // differs in non-whitespace positions, so this stays a violation.
        assert!(violations.iter().any(|v| v.rule_id == "param.line_in_source"));

        let raw = "Category: parameter of function\n\
                   Variable: bh\n\
                   Line: 405:   lock_buffer(bh);\n\
                   Caller: submit_bh\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations, vec![]);
    }

    #[test]
    fn caller_not_in_trace_is_inconsistent() {
        let raw = "Category: parameter of function\n\
                   Variable: bh\n\
                   Line: 405: lock_buffer(bh);\n\
                   Caller: phantom_caller\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        // line_in_source still passes (the line exists in submit_bh's
        // provided body); only the trace membership fails.
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].rule_id, "param.caller_in_trace");
    }

    #[test]
    fn callsite_without_call_to_current_function_is_inconsistent() {
        // Line 404 of submit_bh exists, holds `bh`, but calls nothing.
        let raw = "Category: parameter of function\n\
                   Variable: bh\n\
                   Line: 404: BUG_ON(!buffer_locked(bh));\n\
                   Caller: submit_bh\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].rule_id, "param.call_at_callsite");
    }

    #[test]
    fn return_value_sink_checks_named_function_call() {
        let mut provided = BTreeMap::new();
        provided.insert(
            "alloc_branch".to_string(),
            found(vec![def(
                "alloc_branch",
                DefKind::Function,
                "fs/itree.c",
                145,
                &[
                    "static int alloc_branch(struct inode *inode)",
                    "{",
                    "\tbh = sb_getblk(inode->i_sb, parent);",
                    "\treturn 0;",
                    "}",
                ],
            )]),
        );
        let ctx = VerificationContext::new("alloc_branch", provided, vec![], None);
        let raw = "Category: return value of function call\n\
                   Variable: bh\n\
                   Line: 147: bh = sb_getblk(inode->i_sb, parent);\n\
                   Function: sb_getblk\n";
        let outcome = parameter_outcome(raw);
        assert_eq!(verify(&outcome, &taint_spec(), &ctx).unwrap(), vec![]);

        // Naming a function the line does not call must fail exactly the
        // callsite rule.
        let raw = "Category: return value of function call\n\
                   Variable: bh\n\
                   Line: 147: bh = sb_getblk(inode->i_sb, parent);\n\
                   Function: sb_bread\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &ctx).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].rule_id, "retval.call_at_callsite");
    }

    #[test]
    fn field_of_structure_checks_member_token() {
        let mut provided = BTreeMap::new();
        provided.insert(
            "reader".to_string(),
            found(vec![def(
                "reader",
                DefKind::Function,
                "a.c",
                10,
                &["int reader(struct buffer_head *bh)", "{", "\treturn bh->b_state;", "}"],
            )]),
        );
        provided.insert(
            "buffer_head".to_string(),
            found(vec![def(
                "buffer_head",
                DefKind::Structure,
                "include/buffer_ops.h",
                3,
                &["struct buffer_head {", "\tunsigned long b_state;", "\tstruct page *b_page;", "};"],
            )]),
        );
        let ctx = VerificationContext::new("reader", provided, vec![], None);
        let raw = "Category: field of a structure\n\
                   Variable: bh\n\
                   Structure: buffer_head\n\
                   Field: b_state\n\
                   Line: 12: return bh->b_state;\n";
        let outcome = parameter_outcome(raw);
        assert_eq!(verify(&outcome, &taint_spec(), &ctx).unwrap(), vec![]);

        let raw = "Category: field of a structure\n\
                   Variable: bh\n\
                   Structure: buffer_head\n\
                   Field: b_missing\n\
                   Line: 12: return bh->b_state;\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &ctx).unwrap();
        // The invented member also fails variable_in_line? No — Variable
        // is `bh` and the line holds `bh`. Only the structure check fails.
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].rule_id, "field.field_in_structure");
    }

    #[test]
    fn unknown_structure_is_unverifiable_hence_inconsistent() {
        let mut provided = BTreeMap::new();
        provided.insert(
            "reader".to_string(),
            found(vec![def(
                "reader",
                DefKind::Function,
                "a.c",
                10,
                &["int reader(struct ghost *g)", "{", "\treturn g->x;", "}"],
            )]),
        );
        let ctx = VerificationContext::new("reader", provided, vec![], None);
        let raw = "Category: field of a structure\n\
                   Variable: g\n\
                   Structure: ghost\n\
                   Field: x\n\
                   Line: 12: return g->x;\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &ctx).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].rule_id, "field.field_in_structure");
        assert!(violations[0].detail.contains("unverifiable"));
    }

    #[test]
    fn constant_sink_requires_literal_value() {
        let mut provided = BTreeMap::new();
        provided.insert(
            "init".to_string(),
            found(vec![def(
                "init",
                DefKind::Function,
                "a.c",
                1,
                &["void init(void)", "{", "\tint x = 0x10;", "\tint y = compute();", "}"],
            )]),
        );
        let ctx = VerificationContext::new("init", provided, vec![], None);
        let raw = "Category: constant value\nVariable: x\nLine: 3: int x = 0x10;\nValue: 0x10\n";
        let outcome = parameter_outcome(raw);
        assert_eq!(verify(&outcome, &taint_spec(), &ctx).unwrap(), vec![]);

        let raw = "Category: constant value\nVariable: y\nLine: 4: int y = compute();\nValue: compute()\n";
        let outcome = parameter_outcome(raw);
        let violations = verify(&outcome, &taint_spec(), &ctx).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].rule_id, "const.value_is_literal");
    }

    #[test]
    fn duplicate_identical_records_are_flagged() {
        let raw = format!("{CLEAN_REPLY}{CLEAN_REPLY}");
        let outcome = parameter_outcome(&raw);
        assert_eq!(outcome.records.len(), 2);
        let violations = verify(&outcome, &taint_spec(), &lock_buffer_ctx()).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].rule_id, "duplicate_record");
        assert_eq!(violations[0].record_index, Some(1));
    }

    #[test]
    fn spec_mismatch_is_an_error() {
        let stack_spec = SpecLibrary::builtin()
            .get("backward_taint_stack.v1")
            .cloned()
            .unwrap();
        let outcome = parameter_outcome(CLEAN_REPLY);
        assert!(matches!(
            verify(&outcome, &stack_spec, &lock_buffer_ctx()),
            Err(EsvError::SpecMismatch { .. })
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        // required_fields for an unknown category.
        let bad = r#"{"schema":"spec.v1","id":"x","accepted_categories":["a"],
                      "required_fields":{"b":["Variable"]},"consistency_rules":[]}"#;
        assert!(parse_spec(bad).is_err());
        // rule binding to an undeclared field.
        let bad = r#"{"schema":"spec.v1","id":"x","accepted_categories":["a"],
                      "required_fields":{"a":["Variable"]},
                      "consistency_rules":[{"id":"r","category":"a","predicate":"variable_in_line",
                        "params":{"variable":"Variable","line":"Line"}}]}"#;
        assert!(parse_spec(bad).is_err());
        // wrong schema tag.
        let bad = r#"{"schema":"spec.v2","id":"x","accepted_categories":[],
                      "required_fields":{},"consistency_rules":[]}"#;
        assert!(matches!(parse_spec(bad), Err(EsvError::BadSpec(m)) if m.contains("schema")));
    }

    #[test]
    fn literal_recognizer_accepts_c_literals_only() {
        for ok in ["0", "42", "-1", "0x1f", "0XFF", "128UL", "'a'", "\"s\"", "NULL", "3.5"] {
            assert!(is_literal(ok), "{ok} should be a literal");
        }
        for bad in ["compute()", "x", "bh->b_state", "", "0x", "NULLX"] {
            assert!(!is_literal(bad), "{bad} should not be a literal");
        }
    }

    proptest::proptest! {
        /// Adding a rule never shrinks the violation list.
        #[test]
        fn adding_rules_is_monotone(extra_field in "[A-Z][a-z]{2,8}") {
            let spec = taint_spec();
            let outcome = parameter_outcome(CLEAN_REPLY);
            let ctx = lock_buffer_ctx();
            let base = verify(&outcome, &spec, &ctx).unwrap().len();

            let mut grown = spec.clone();
            grown.consistency_rules.push(ConsistencyRule {
                id: format!("extra.{extra_field}"),
                category: "parameter of function".into(),
                // Bind to a field name the record does not have: the
                // predicate fails, so the list must grow.
                predicate: Predicate::CallerInTrace,
                params: BTreeMap::from([("caller".to_string(), "@missing".to_string())]),
            });
            let grown_len = verify(&outcome, &grown, &ctx).unwrap().len();
            proptest::prop_assert!(grown_len >= base);
        }

        /// Every violation carries exactly one class and a non-empty detail.
        #[test]
        fn violations_are_well_formed(category in "[a-z ]{1,24}", variable in "[a-z_][a-z0-9_]{0,8}") {
            let raw = format!("Category: {category}\nVariable: {variable}\nLine: 7\n");
            let outcome = parameter_outcome(&raw);
            let ctx = lock_buffer_ctx();
            let violations = verify(&outcome, &taint_spec(), &ctx).unwrap();
            for v in violations {
                proptest::prop_assert!(!v.detail.is_empty());
                proptest::prop_assert!(!v.rule_id.is_empty());
            }
        }
    }
}
