use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::catalog::RelationCatalog;
use crate::corpus::triple::{FactTriple, KnowledgeSet, NarrativeSample};
use crate::error::{Error, Result};

/// Marker of an unfilled slot in knowledge-base text.
pub const BLANK_MARKER: &str = "___";

/// Per-reason counts of triples dropped during ingestion.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub kept: usize,
    pub dropped_none_tail: usize,
    pub dropped_blank: usize,
    pub dropped_unknown_relation: usize,
    pub dropped_empty: usize,
}

impl IngestReport {
    pub fn dropped(&self) -> usize {
        self.dropped_none_tail + self.dropped_blank + self.dropped_unknown_relation + self.dropped_empty
    }

    fn absorb(&mut self, other: &IngestReport) {
        self.kept += other.kept;
        self.dropped_none_tail += other.dropped_none_tail;
        self.dropped_blank += other.dropped_blank;
        self.dropped_unknown_relation += other.dropped_unknown_relation;
        self.dropped_empty += other.dropped_empty;
    }
}

#[derive(Serialize, Deserialize)]
struct TripleRecord {
    head: String,
    relation: String,
    tail: String,
}

#[derive(Serialize)]
struct NarrativeRecord<'a> {
    context: &'a str,
    facts: Vec<&'a FactTriple>,
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Applies the triple filters; `None` means dropped (and counted).
fn admit(rec: TripleRecord, catalog: &RelationCatalog, report: &mut IngestReport) -> Option<FactTriple> {
    let (head, relation, tail) = (collapse_ws(&rec.head), rec.relation.trim().to_string(), collapse_ws(&rec.tail));
    if [&head, &relation, &tail].iter().any(|f| f.contains(BLANK_MARKER)) {
        report.dropped_blank += 1;
        return None;
    }
    if tail.eq_ignore_ascii_case("none") {
        report.dropped_none_tail += 1;
        return None;
    }
    if head.is_empty() || tail.is_empty() {
        report.dropped_empty += 1;
        return None;
    }
    if !catalog.contains(&relation) {
        report.dropped_unknown_relation += 1;
        return None;
    }
    report.kept += 1;
    Some(FactTriple { head, relation, tail })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn triple_from_value(v: &Value, path: &Path, line: usize) -> Result<TripleRecord> {
    let field = |k: &str| -> Result<String> {
        v.get(k)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| parse_err(path, line, format!("missing string key `{k}`")))
    };
    Ok(TripleRecord { head: field("head")?, relation: field("relation")?, tail: field("tail")? })
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Reads `kg.jsonl` (`{"head","relation","tail"}` per line), keeping file order.
pub fn ingest_kg(path: &Path, catalog: &RelationCatalog) -> Result<(KnowledgeSet, IngestReport)> {
    let mut report = IngestReport::default();
    let mut facts = Vec::new();
    for (line, text) in read_lines(path)? {
        let v: Value = serde_json::from_str(&text).map_err(|e| parse_err(path, line, e.to_string()))?;
        let rec = triple_from_value(&v, path, line)?;
        facts.extend(admit(rec, catalog, &mut report));
    }
    Ok((KnowledgeSet::new(facts), report))
}

/// Reads `narratives.jsonl` (`{"context": str, "facts": [triple...]}` per line).
pub fn ingest_narratives(path: &Path, catalog: &RelationCatalog) -> Result<(Vec<NarrativeSample>, IngestReport)> {
    let mut report = IngestReport::default();
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let v: Value = serde_json::from_str(&text).map_err(|e| parse_err(path, line, e.to_string()))?;
        let context = v
            .get("context")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(path, line, "missing string key `context`"))?;
        let facts = v
            .get("facts")
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err(path, line, "missing array key `facts`"))?;
        let mut local = IngestReport::default();
        let mut gold = Vec::with_capacity(facts.len());
        for f in facts {
            let rec = triple_from_value(f, path, line)?;
            gold.extend(admit(rec, catalog, &mut local));
        }
        report.absorb(&local);
        let sample = NarrativeSample::new(context, KnowledgeSet::new(gold))
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        out.push(sample);
    }
    Ok((out, report))
}

pub fn write_kg(path: &Path, kg: &KnowledgeSet) -> Result<()> {
    let mut buf = Vec::new();
    for k in kg.facts() {
        serde_json::to_writer(&mut buf, k)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_narratives(path: &Path, samples: &[NarrativeSample]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in samples {
        let rec = NarrativeRecord { context: &s.context, facts: s.gold.facts().iter().collect() };
        let line = serde_json::to_string(&rec)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::catalog::RelationGroup;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn kg_filters_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "kg.jsonl",
            concat!(
                "{\"head\":\"cap\",\"relation\":\"ObjectUse\",\"tail\":\"wear on head\"}\n",
                "{\"head\":\"x\",\"relation\":\"ObjectUse\",\"tail\":\"none\"}\n",
                "{\"head\":\"PersonX takes ___\",\"relation\":\"xWant\",\"tail\":\"rest\"}\n",
                "{\"head\":\"a\",\"relation\":\"NotARelation\",\"tail\":\"b\"}\n",
                "\n",
            ),
        );
        let cat = RelationCatalog::atomic();
        let (kg, rep) = ingest_kg(&p, &cat).unwrap();
        assert_eq!(kg.len(), 1);
        assert_eq!(kg.facts()[0], FactTriple::new("cap", "ObjectUse", "wear on head"));
        assert_eq!(cat.group(&kg.facts()[0].relation), Some(RelationGroup::Physical));
        assert_eq!(rep.dropped_none_tail, 1);
        assert_eq!(rep.dropped_blank, 1);
        assert_eq!(rep.dropped_unknown_relation, 1);
        assert_eq!(rep.kept, 1);
    }

    #[test]
    fn empty_file_gives_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "kg.jsonl", "");
        let (kg, rep) = ingest_kg(&p, &RelationCatalog::atomic()).unwrap();
        assert!(kg.is_empty());
        assert_eq!(rep, IngestReport::default());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "kg.jsonl",
            "{\"head\":\"a\",\"relation\":\"Causes\",\"tail\":\"b\"}\n{not json\n",
        );
        match ingest_kg(&p, &RelationCatalog::atomic()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn narratives_missing_key_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "n.jsonl", "{\"context\":\"a b\",\"facts\":[]}\n{\"facts\":[]}\n");
        match ingest_narratives(&p, &RelationCatalog::atomic()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn narratives_keep_duplicates_and_empty_sets() {
        let dir = tempfile::tempdir().unwrap();
        let f = "{\"head\":\"a\",\"relation\":\"Causes\",\"tail\":\"b\"}";
        let g = "{\"head\":\"c\",\"relation\":\"xWant\",\"tail\":\"d\"}";
        let body = format!(
            "{{\"context\":\"one\",\"facts\":[{f},{f},{g}]}}\n{{\"context\":\"two\",\"facts\":[]}}\n"
        );
        let p = write(dir.path(), "n.jsonl", &body);
        let cat = RelationCatalog::atomic();
        let (samples, _) = ingest_narratives(&p, &cat).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].gold.len(), 3);
        assert!(samples[1].gold.is_empty());

        let out = dir.path().join("again.jsonl");
        write_narratives(&out, &samples).unwrap();
        let (again, _) = ingest_narratives(&out, &cat).unwrap();
        assert_eq!(again, samples);
    }
}
