//! Tab-separated interaction and social-edge readers.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use log::warn;

use super::{DataError, IdMap, Interaction, InteractionLog, SocialGraph};

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `raw_user \t raw_item \t unix_seconds [\t rating]` lines.
///
/// Raw ids are mapped to dense indices in order of first appearance. Blank
/// lines and lines starting with `#` are skipped; exact duplicate rows are
/// kept.
pub fn load_interactions(path: &Path) -> Result<InteractionLog, DataError> {
    parse_interactions(open(path)?).map_err(|e| e.with_path(path))
}

pub fn parse_interactions<R: Read>(reader: R) -> Result<InteractionLog, DataError> {
    let mut log = InteractionLog::default();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DataError::parse(lineno, e.to_string()))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(DataError::parse(
                lineno,
                format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let timestamp: i64 = fields[2]
            .parse()
            .map_err(|_| DataError::parse(lineno, format!("invalid timestamp {:?}", fields[2])))?;
        if timestamp < 0 {
            return Err(DataError::parse(lineno, format!("negative timestamp {timestamp}")));
        }
        let rating = match fields.get(3) {
            Some(s) if !s.is_empty() => Some(
                s.parse::<f64>()
                    .ok()
                    .filter(|r| r.is_finite())
                    .ok_or_else(|| DataError::parse(lineno, format!("invalid rating {s:?}")))?,
            ),
            _ => None,
        };
        let user = log.users.get_or_insert(fields[0]);
        let item = log.items.get_or_insert(fields[1]);
        log.interactions.push(Interaction {
            user,
            item,
            timestamp,
            rating,
        });
    }
    Ok(log)
}

/// Counters reported by [`load_social_edges`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SocialLoadStats {
    pub edges: usize,
    pub self_loops: usize,
    pub unknown_users: usize,
    pub duplicates: usize,
}

/// Reads `raw_user \t raw_user` rows into a symmetric adjacency over the
/// users known to `users`. Rows naming an unknown user are dropped.
pub fn load_social_edges(path: &Path, users: &IdMap) -> Result<(SocialGraph, SocialLoadStats), DataError> {
    parse_social_edges(open(path)?, users).map_err(|e| e.with_path(path))
}

pub fn parse_social_edges<R: Read>(reader: R, users: &IdMap) -> Result<(SocialGraph, SocialLoadStats), DataError> {
    let mut edges = BTreeSet::new();
    let mut stats = SocialLoadStats::default();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DataError::parse(lineno, e.to_string()))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(DataError::parse(lineno, "expected two tab-separated user ids".to_string()));
        }
        if fields[0] == fields[1] {
            warn!("social edges line {lineno}: self-loop on {:?} skipped", fields[0]);
            stats.self_loops += 1;
            continue;
        }
        let (Some(a), Some(b)) = (users.encode(fields[0]), users.encode(fields[1])) else {
            stats.unknown_users += 1;
            continue;
        };
        if !edges.insert((a.min(b), a.max(b))) {
            stats.duplicates += 1;
        }
    }
    stats.edges = edges.len();
    Ok((SocialGraph::from_edges(users.len(), edges), stats))
}
