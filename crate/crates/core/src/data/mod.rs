//! Ingestion and preparation of interaction logs and social graphs.

mod io;
mod preprocess;
mod sampling;
mod temporal;

pub use io::{load_interactions, load_social_edges, parse_interactions, parse_social_edges, SocialLoadStats};
pub use preprocess::preprocess;
pub use sampling::sample_negatives;
pub use temporal::{
    build_behavior_sequence, build_neighbor_item_buckets, group_by_user, leave_one_out_split, ActivityStream, Event,
    UserSplit, Walk, WalkIndex,
};

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::rng;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}line {line}: {message}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        message: String,
    },
    #[error("no interactions left after filtering")]
    EmptyAfterFilter,
    #[error("user {user} has {count} interactions; at least 3 are needed for a leave-one-out split")]
    TooFewInteractions { user: u32, count: usize },
    #[error("need at least 2 items to sample negatives, have {n_items}")]
    TooFewItems { n_items: usize },
    #[error("snapshot {}: {message}", path.display())]
    Snapshot { path: PathBuf, message: String },
}

impl DataError {
    fn parse(line: usize, message: String) -> Self {
        DataError::Parse {
            path: None,
            line,
            message,
        }
    }

    fn with_path(self, p: &Path) -> Self {
        match self {
            DataError::Parse { line, message, .. } => DataError::Parse {
                path: Some(p.to_path_buf()),
                line,
                message,
            },
            other => other,
        }
    }
}

/// One `(user, item, timestamp, rating)` event over dense ids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
    pub rating: Option<f64>,
}

/// Bijection between raw string ids and dense indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for IdMap {
    fn from(raw: Vec<String>) -> Self {
        let index = raw.iter().enumerate().map(|(i, r)| (r.clone(), i as u32)).collect();
        IdMap { raw, index }
    }
}

impl From<IdMap> for Vec<String> {
    fn from(m: IdMap) -> Self {
        m.raw
    }
}

impl IdMap {
    pub fn get_or_insert(&mut self, raw: &str) -> u32 {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len() as u32;
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), i);
        i
    }

    pub fn encode(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn decode(&self, id: u32) -> &str {
        &self.raw[id as usize]
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Interactions plus the id tables that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub users: IdMap,
    pub items: IdMap,
}

/// Undirected user-user graph without self-loops.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialGraph {
    adjacency: Vec<Vec<u32>>,
}

impl SocialGraph {
    pub fn empty(n_users: usize) -> Self {
        SocialGraph {
            adjacency: vec![Vec::new(); n_users],
        }
    }

    /// Builds the symmetric adjacency from edges; self-loops and repeats are
    /// ignored.
    pub fn from_edges(n_users: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut sets = vec![BTreeSet::new(); n_users];
        for (a, b) in edges {
            if a != b {
                sets[a as usize].insert(b);
                sets[b as usize].insert(a);
            }
        }
        SocialGraph {
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn neighbors(&self, user: u32) -> &[u32] {
        self.adjacency.get(user as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn n_users(&self) -> usize {
        self.adjacency.len()
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Preparation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub min_actions: usize,
    pub rating_threshold: f64,
    pub tau_days: f64,
    /// Behavior sequence truncation length.
    pub max_seq_len: usize,
    /// Neighbor item bucket truncation length.
    pub max_bucket_len: usize,
    pub max_walks: usize,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            min_actions: 5,
            rating_threshold: 3.0,
            tau_days: 60.0,
            max_seq_len: 50,
            max_bucket_len: 20,
            max_walks: 10,
            seed: 42,
        }
    }
}

impl PrepareConfig {
    pub fn tau_seconds(&self) -> i64 {
        (self.tau_days * SECONDS_PER_DAY as f64).round() as i64
    }
}

/// One user's prepared timeline.
///
/// Positions are the truncated training window followed by the validation
/// and the test event. `buckets[t]` and `walks[t]` are defined for every
/// position except the last: bucket `t` spans `[timestamps[t],
/// timestamps[t+1])`, and walks are anchored at `(user, items[t],
/// timestamps[t])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTimeline {
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
    pub buckets: Vec<Vec<u32>>,
    pub walks: Vec<Vec<Walk>>,
    /// Training interactions before truncation.
    pub train_total: usize,
}

impl UserTimeline {
    /// Length of the truncated training window.
    pub fn train_len(&self) -> usize {
        self.items.len() - 2
    }

    pub fn validation_item(&self) -> u32 {
        self.items[self.items.len() - 2]
    }

    pub fn test_item(&self) -> u32 {
        self.items[self.items.len() - 1]
    }
}

/// Which held-out event an evaluation targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    /// Timeline position of the target event.
    pub fn target_position(self, timeline: &UserTimeline) -> usize {
        match self {
            Split::Validation => timeline.items.len() - 2,
            Split::Test => timeline.items.len() - 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub social_links: usize,
    pub density: f64,
    pub mean_train_len: f64,
}

/// Filtered, split corpus with every structure the scorers read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedDataset {
    pub config: PrepareConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub users: Vec<UserTimeline>,
    pub social: SocialGraph,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
    pub n_interactions: usize,
}

pub const SNAPSHOT_FILE: &str = "dataset.json";
pub const ID_MAP_FILE: &str = "id_map.tsv";
pub const STATS_FILE: &str = "stats.json";

impl PreparedDataset {
    /// Splits and indexes an already filtered log.
    ///
    /// Buckets read the neighbors' full activity (bounded above by the next
    /// timeline timestamp, so never past the target). Walks only read
    /// training interactions.
    pub fn build(log: &InteractionLog, social: SocialGraph, config: PrepareConfig, exec: Execution) -> Result<Self, DataError> {
        let n_users = log.users.len();
        let n_items = log.items.len();
        let grouped = group_by_user(&log.interactions, n_users);
        let mut splits = Vec::with_capacity(n_users);
        for (u, events) in grouped.iter().enumerate() {
            let split = leave_one_out_split(events).ok_or(DataError::TooFewInteractions {
                user: u as u32,
                count: events.len(),
            })?;
            splits.push(split);
        }
        let train_pairs: Vec<(u32, Vec<Event>)> = splits
            .iter()
            .enumerate()
            .map(|(u, s)| (u as u32, s.train.clone()))
            .collect();
        let walk_index = WalkIndex::from_train(&train_pairs);
        let social = if social.n_users() == n_users {
            social
        } else {
            SocialGraph::empty(n_users)
        };
        let tau = config.tau_seconds();

        let user_ids: Vec<u32> = (0..n_users as u32).collect();
        let users = exec::map(exec, &user_ids, |&u| {
            let split = &splits[u as usize];
            let window = build_behavior_sequence(&split.train, config.max_seq_len);
            let mut events = window;
            events.push(split.validation);
            events.push(split.test);
            let items: Vec<u32> = events.iter().map(|e| e.item).collect();
            let timestamps: Vec<i64> = events.iter().map(|e| e.timestamp).collect();

            let stream = ActivityStream::merge(social.neighbors(u).iter().map(|&v| grouped[v as usize].as_slice()));
            let buckets = build_neighbor_item_buckets(&timestamps, &stream, config.max_bucket_len);

            let walks = events[..events.len() - 1]
                .iter()
                .enumerate()
                .map(|(t, e)| {
                    let mut r = rng::stream(config.seed, &[rng::domain::WALKS, u as u64, t as u64]);
                    walk_index.walks(u, e.item, e.timestamp, tau, config.max_walks, &mut r)
                })
                .collect();

            UserTimeline {
                items,
                timestamps,
                buckets,
                walks,
                train_total: split.train.len(),
            }
        });

        Ok(PreparedDataset {
            config,
            n_users,
            n_items,
            users,
            social,
            user_ids: log.users.clone(),
            item_ids: log.items.clone(),
            n_interactions: log.interactions.len(),
        })
    }

    pub fn stats(&self) -> DatasetStats {
        let cells = (self.n_users * self.n_items).max(1) as f64;
        DatasetStats {
            users: self.n_users,
            items: self.n_items,
            interactions: self.n_interactions,
            social_links: self.social.n_edges(),
            density: self.n_interactions as f64 / cells,
            mean_train_len: self.users.iter().map(|u| u.train_total as f64).sum::<f64>() / self.n_users.max(1) as f64,
        }
    }

    /// Writes the snapshot, the id sidecar and the stats file into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<(), DataError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DataError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let snap = dir.join(SNAPSHOT_FILE);
        let json = serde_json::to_vec(self).map_err(|e| DataError::Snapshot {
            path: snap.clone(),
            message: e.to_string(),
        })?;
        fs::write(&snap, json).map_err(io_err(&snap))?;

        let map_path = dir.join(ID_MAP_FILE);
        let mut out = Vec::new();
        writeln!(out, "kind\tdense\traw").expect("in-memory write");
        for (kind, map) in [("user", &self.user_ids), ("item", &self.item_ids)] {
            for i in 0..map.len() {
                writeln!(out, "{kind}\t{i}\t{}", map.decode(i as u32)).expect("in-memory write");
            }
        }
        fs::write(&map_path, out).map_err(io_err(&map_path))?;

        let stats_path = dir.join(STATS_FILE);
        let stats = serde_json::json!({
            "stats": self.stats(),
            "config": self.config,
        });
        let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
        fs::write(&stats_path, text + "\n").map_err(io_err(&stats_path))?;
        Ok(())
    }

    pub fn read_snapshot(dir: &Path) -> Result<Self, DataError> {
        let snap = dir.join(SNAPSHOT_FILE);
        let bytes = fs::read(&snap).map_err(|source| DataError::Io {
            path: snap.clone(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| DataError::Snapshot {
            path: snap,
            message: e.to_string(),
        })
    }
}
