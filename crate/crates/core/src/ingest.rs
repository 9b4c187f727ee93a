//! Streaming comment-dump ingestion and parent/child pairing.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::io::open_reader;
use crate::{Error, Result};

const DELETION_MARKERS: [&str; 2] = ["[deleted]", "[removed]"];

/// One validated dump record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub id: String,
    pub parent_id: String,
    pub author: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subreddit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_utc: Option<i64>,
}

/// A parent comment and one direct reply to it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextResponsePair {
    #[serde(rename = "context")]
    pub context_text: String,
    #[serde(rename = "response")]
    pub response_text: String,
    pub responder: String,
    pub response_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    DeletedAuthor,
    DeletedBody,
    EmptyBody,
    DuplicateId,
}

#[derive(Debug, PartialEq, Eq)]
pub enum ParseOutcome {
    Comment(Comment),
    Skip(SkipReason),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub parsed: u64,
    pub skipped: u64,
    pub malformed: u64,
    pub paired: u64,
    pub unmatched: u64,
}

impl IngestStats {
    pub fn merge(&mut self, other: &IngestStats) {
        self.parsed += other.parsed;
        self.skipped += other.skipped;
        self.malformed += other.malformed;
        self.paired += other.paired;
        self.unmatched += other.unmatched;
    }
}

fn required_str<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a str, String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(Value::Null) if key == "parent_id" => Ok(""),
        Some(_) => Err(format!("field {key:?} is not a string")),
        None => Err(format!("missing field {key:?}")),
    }
}

/// Parses and filters one JSONL record.
///
/// The error string describes why the line is malformed; callers count it
/// and move on.
pub fn parse_comment(line: &str) -> Result<ParseOutcome, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid json: {e}"))?;
    let obj = value.as_object().ok_or("record is not a json object")?;
    let parent_id = required_str(obj, "parent_id")?.to_string();
    let id = match obj.get("name") {
        Some(Value::String(name)) if !name.is_empty() => name.clone(),
        _ => {
            let raw = required_str(obj, "id")?;
            // raw dumps give bare ids but type-prefixed parent ids
            let typed_parents = parent_id.starts_with("t1_") || parent_id.starts_with("t3_");
            if typed_parents && !raw.contains('_') {
                format!("t1_{raw}")
            } else {
                raw.to_string()
            }
        }
    };
    if id.is_empty() {
        return Err("empty comment id".into());
    }
    let author = required_str(obj, "author")?.to_string();
    let body = required_str(obj, "body")?.to_string();
    let subreddit = obj.get("subreddit").and_then(Value::as_str).map(str::to_string);
    let created_utc = match obj.get("created_utc") {
        Some(Value::Number(n)) => n.as_i64().or_else(|| n.as_f64().map(|f| f as i64)),
        Some(Value::String(s)) => s.parse().ok(),
        _ => None,
    };

    if DELETION_MARKERS.contains(&author.as_str()) {
        return Ok(ParseOutcome::Skip(SkipReason::DeletedAuthor));
    }
    if DELETION_MARKERS.contains(&body.trim()) {
        return Ok(ParseOutcome::Skip(SkipReason::DeletedBody));
    }
    if body.trim().is_empty() {
        return Ok(ParseOutcome::Skip(SkipReason::EmptyBody));
    }
    Ok(ParseOutcome::Comment(Comment {
        id,
        parent_id,
        author,
        body,
        subreddit,
        created_utc,
    }))
}

/// Comments of one dump file plus the counts gathered while reading it.
#[derive(Debug, Default)]
pub struct ShardIngest {
    pub comments: Vec<Comment>,
    pub stats: IngestStats,
}

/// Parses a whole (optionally gzip-compressed) JSONL file.
pub fn read_dump_file(path: &Path) -> Result<ShardIngest> {
    let reader = open_reader(path)?;
    let mut shard = ShardIngest::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_comment(&line) {
            Ok(ParseOutcome::Comment(c)) => {
                shard.stats.parsed += 1;
                shard.comments.push(c);
            }
            Ok(ParseOutcome::Skip(_)) => shard.stats.skipped += 1,
            Err(_) => shard.stats.malformed += 1,
        }
    }
    Ok(shard)
}

/// Reads all dump files in parallel and merges them in argument order.
///
/// Later duplicates of an id are dropped and counted as skipped.
pub fn read_dump(paths: &[PathBuf]) -> Result<ShardIngest> {
    let shards: Vec<ShardIngest> = paths
        .par_iter()
        .map(|p| read_dump_file(p))
        .collect::<Result<_>>()?;
    let mut merged = ShardIngest::default();
    let mut seen = HashSet::new();
    for shard in shards {
        merged.stats.merge(&shard.stats);
        for comment in shard.comments {
            if seen.insert(comment.id.clone()) {
                merged.comments.push(comment);
            } else {
                merged.stats.parsed -= 1;
                merged.stats.skipped += 1;
            }
        }
    }
    Ok(merged)
}

/// Pairs every comment with its parent when the parent is in the dump.
///
/// Output is sorted by response id, so it does not depend on the order the
/// comments arrived in. Counts of paired/unmatched comments are added to
/// `stats`.
pub fn pair_successive(comments: &[Comment], stats: &mut IngestStats) -> Vec<ContextResponsePair> {
    // pass 1: the id set
    let by_id: HashMap<&str, &Comment> = comments.iter().map(|c| (c.id.as_str(), c)).collect();
    // pass 2: emission against the frozen id set
    let mut pairs: Vec<ContextResponsePair> = comments
        .par_iter()
        .filter_map(|child| {
            let parent = by_id.get(child.parent_id.as_str())?;
            Some(ContextResponsePair {
                context_text: parent.body.clone(),
                response_text: child.body.clone(),
                responder: child.author.clone(),
                response_id: child.id.clone(),
            })
        })
        .collect();
    pairs.sort_by(|a, b| a.response_id.cmp(&b.response_id));
    stats.paired += pairs.len() as u64;
    stats.unmatched += (comments.len() - pairs.len()) as u64;
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn comment(id: &str, parent: &str, author: &str, body: &str) -> Comment {
        Comment {
            id: id.into(),
            parent_id: parent.into(),
            author: author.into(),
            body: body.into(),
            subreddit: None,
            created_utc: None,
        }
    }

    #[test]
    fn parses_and_filters_records() {
        let outcome =
            parse_comment(r#"{"name":"t1_b","parent_id":"t1_a","author":"ann","body":"hi"}"#).unwrap();
        assert_eq!(outcome, ParseOutcome::Comment(comment("t1_b", "t1_a", "ann", "hi")));

        let deleted =
            parse_comment(r#"{"name":"t1_c","parent_id":"t1_a","author":"[deleted]","body":"x"}"#);
        assert_eq!(deleted.unwrap(), ParseOutcome::Skip(SkipReason::DeletedAuthor));
        let removed =
            parse_comment(r#"{"name":"t1_c","parent_id":"t1_a","author":"bo","body":"[removed]"}"#);
        assert_eq!(removed.unwrap(), ParseOutcome::Skip(SkipReason::DeletedBody));
        let blank = parse_comment(r#"{"name":"t1_c","parent_id":"t1_a","author":"bo","body":"  "}"#);
        assert_eq!(blank.unwrap(), ParseOutcome::Skip(SkipReason::EmptyBody));

        assert!(parse_comment("not json").is_err());
        assert!(parse_comment(r#"{"name":"t1_c","author":"bo","body":"x"}"#).is_err());
        assert!(parse_comment(r#"[1,2]"#).is_err());
    }

    #[test]
    fn bare_ids_get_comment_prefix() {
        let line = r#"{"id":"b2","parent_id":"t1_a1","author":"ann","body":"hi","created_utc":"1500000000","subreddit":"rust"}"#;
        let ParseOutcome::Comment(c) = parse_comment(line).unwrap() else { panic!() };
        assert_eq!(c.id, "t1_b2");
        assert_eq!(c.created_utc, Some(1_500_000_000));
        assert_eq!(c.subreddit.as_deref(), Some("rust"));
    }

    #[test]
    fn pairs_follow_thread_links() {
        let comments = vec![
            comment("A", "", "u1", "root"),
            comment("B", "A", "u2", "reply"),
            comment("C", "B", "u3", "reply to reply"),
        ];
        let mut stats = IngestStats::default();
        let pairs = pair_successive(&comments, &mut stats);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].context_text, "root");
        assert_eq!(pairs[0].response_text, "reply");
        assert_eq!(pairs[0].responder, "u2");
        assert_eq!(pairs[1].context_text, "reply");
        assert_eq!(pairs[1].responder, "u3");
        assert_eq!(stats.paired, 2);
        assert_eq!(stats.unmatched, 1);

        let mut stats = IngestStats::default();
        assert!(pair_successive(&[comment("A", "t3_x", "u", "solo")], &mut stats).is_empty());

        let siblings = vec![
            comment("A", "", "u1", "parent"),
            comment("B", "A", "u2", "one"),
            comment("B2", "A", "u3", "two"),
        ];
        let pairs = pair_successive(&siblings, &mut IngestStats::default());
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.context_text == "parent"));
    }

    #[test]
    fn pairing_ignores_input_order() {
        let mut comments = vec![
            comment("A", "", "u1", "a"),
            comment("B", "A", "u2", "b"),
            comment("C", "B", "u1", "c"),
            comment("D", "A", "u1", "d"),
        ];
        let forward = pair_successive(&comments, &mut IngestStats::default());
        comments.reverse();
        assert_eq!(pair_successive(&comments, &mut IngestStats::default()), forward);
    }

    #[test]
    fn reads_plain_and_gzip_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let text = concat!(
            r#"{"name":"t1_a","parent_id":"t3_s","author":"ann","body":"question?"}"#, "\n",
            "garbage\n",
            r#"{"name":"t1_b","parent_id":"t1_a","author":"[deleted]","body":"x"}"#, "\n",
            r#"{"name":"t1_c","parent_id":"t1_a","author":"bob","body":"answer."}"#, "\n",
        );
        let plain = dir.path().join("dump.jsonl");
        std::fs::write(&plain, text).unwrap();
        let gz = dir.path().join("dump2.jsonl.gz");
        let mut enc = flate2::write::GzEncoder::new(
            std::fs::File::create(&gz).unwrap(),
            flate2::Compression::default(),
        );
        enc.write_all(r#"{"name":"t1_d","parent_id":"t1_c","author":"cy","body":"ok"}"#.as_bytes())
            .unwrap();
        enc.finish().unwrap();

        let ingest = read_dump(&[plain.clone(), gz]).unwrap();
        assert_eq!(ingest.stats.parsed, 3);
        assert_eq!(ingest.stats.skipped, 1);
        assert_eq!(ingest.stats.malformed, 1);
        let mut stats = ingest.stats.clone();
        let pairs = pair_successive(&ingest.comments, &mut stats);
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.responder != "[deleted]"));

        // duplicate ids across files keep the first record
        let twice = read_dump(&[plain.clone(), plain]).unwrap();
        assert_eq!(twice.comments.len(), 2);
        assert_eq!(twice.stats.skipped, 4);
    }
}
