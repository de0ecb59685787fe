use std::path::Path;

use serde_json::Value;

use super::{infer_value_set_type, io_err, normalize_system_uri, CodeEntry, CorpusError, ValueSet};

fn is_oid(segment: &str) -> bool {
    let parts: Vec<&str> = segment.split('.').collect();
    parts.len() >= 2 && parts.iter().all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()))
}

/// Last OID-shaped segment of a canonical URL such as
/// `http://cts.nlm.nih.gov/fhir/ValueSet/2.16.840.1.113762.1.4.1`.
fn oid_from_url(url: &str) -> Option<String> {
    url.rsplit(['/', ':', '|'])
        .find(|seg| is_oid(seg))
        .map(str::to_string)
}

fn str_field<'a>(doc: &'a Value, key: &str) -> Option<&'a str> {
    doc.get(key).and_then(Value::as_str).filter(|s| !s.trim().is_empty())
}

fn collect_contains(items: &[Value], out: &mut Vec<CodeEntry>, skipped: &mut usize) {
    for item in items {
        let code = item.get("code").and_then(Value::as_str).unwrap_or("");
        let system = item.get("system").and_then(Value::as_str).unwrap_or("");
        if !code.is_empty() && !system.is_empty() {
            let display = item.get("display").and_then(Value::as_str).unwrap_or("");
            out.push(CodeEntry::new(code, normalize_system_uri(system), display));
        } else if item.get("contains").is_none() {
            *skipped += 1;
        }
        // nested groupings
        if let Some(nested) = item.get("contains").and_then(Value::as_array) {
            collect_contains(nested, out, skipped);
        }
    }
}

/// Parse one FHIR `ValueSet` resource with an expansion.
pub fn parse_fhir_valueset(document: &str) -> Result<ValueSet, CorpusError> {
    let doc: Value = serde_json::from_str(document)
        .map_err(|e| CorpusError::MalformedDocument(format!("not JSON: {e}")))?;
    if !doc.is_object() {
        return Err(CorpusError::MalformedDocument("top level is not an object".into()));
    }
    match doc.get("resourceType").and_then(Value::as_str) {
        Some("ValueSet") => {}
        Some(other) => {
            return Err(CorpusError::MalformedDocument(format!(
                "resourceType is {other:?}, expected \"ValueSet\""
            )))
        }
        None => return Err(CorpusError::MalformedDocument("missing resourceType".into())),
    }

    let oid = str_field(&doc, "url")
        .and_then(oid_from_url)
        .or_else(|| str_field(&doc, "id").map(str::to_string))
        .ok_or_else(|| CorpusError::MalformedDocument("no OID in url and no id".into()))?;

    let title = str_field(&doc, "title")
        .or_else(|| str_field(&doc, "name"))
        .ok_or_else(|| CorpusError::MissingTitle(oid.clone()))?
        .to_string();

    let contains = doc
        .get("expansion")
        .and_then(|e| e.get("contains"))
        .and_then(Value::as_array)
        .ok_or_else(|| CorpusError::MissingExpansion(oid.clone()))?;

    let mut codes = Vec::new();
    let mut skipped = 0;
    collect_contains(contains, &mut codes, &mut skipped);
    if skipped > 0 {
        log::warn!("{oid}: skipped {skipped} expansion entries without code or system");
    }

    let mut vs = ValueSet {
        vs_type: infer_value_set_type(&title),
        oid,
        title,
        description: str_field(&doc, "description").unwrap_or("").to_string(),
        publisher: str_field(&doc, "publisher").unwrap_or("").to_string(),
        codes,
    };
    let dups = vs.dedup_codes();
    if dups > 0 {
        log::warn!("{}: collapsed {dups} duplicate (code, system) pairs", vs.oid);
    }
    Ok(vs)
}

/// Parse every `*.json` file in a directory (sorted by file name). Documents
/// that fail to parse are logged and skipped; the count of skipped files is
/// returned alongside the parsed sets.
pub fn ingest_fhir_dir(dir: &Path) -> Result<(Vec<ValueSet>, usize), CorpusError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut sets = Vec::with_capacity(paths.len());
    let mut seen = std::collections::HashSet::new();
    let mut skipped = 0;
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        match parse_fhir_valueset(&text) {
            Ok(vs) if !seen.insert(vs.oid.clone()) => {
                log::warn!("{}: duplicate oid {}, keeping first", path.display(), vs.oid);
                skipped += 1;
            }
            Ok(vs) => sets.push(vs),
            Err(e) => {
                log::warn!("{}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    Ok((sets, skipped))
}
